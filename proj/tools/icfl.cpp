#include <cstdio>
#include <exception>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "icfl/experiments.hpp"
#include "icfl/io.hpp"
#include "icfl/scenario.hpp"

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::string mode;
  long quadrature_size = 0;
  std::vector<std::string> overrides;
  // One slot per registered config key, filled by --<key> flags.
  std::map<std::string, std::string> keyed;
  std::vector<std::pair<std::string, CLI::Option*>> keyed_options;
  std::string ensemble;
  bool print_config = false;
};

icfl::Scenario resolve(const std::string& command, const Options& opt) {
  const bool figure = command.rfind("fig", 0) == 0 || command == "scaling" || command == "chaos";
  auto scn = icfl::preset(figure ? command : "default");
  if (!opt.config.empty()) icfl::apply_config_file(scn, opt.config);
  if (opt.seed) scn.apply_seed(*opt.seed);
  if (!opt.mode.empty()) scn.train.mode = icfl::train_mode_from_name(opt.mode);
  if (opt.quadrature_size > 0) scn.eval.size = opt.quadrature_size;
  for (const auto& [key, o] : opt.keyed_options)
    if (o->count() > 0) icfl::set_config_value(scn, key, opt.keyed.at(key));
  for (const auto& kv : opt.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    icfl::set_config_value(scn, kv.substr(0, eq), kv.substr(eq + 1));
  }
  return scn;
}

int report(const icfl::RunStatus& st) {
  for (const auto& f : st.files) std::cout << "wrote " << f.string() << '\n';
  if (st.aborted) {
    std::cerr << "numerical abort: " << st.abort_reason << '\n';
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mean-field in-context feature learning simulator"};
  app.set_version_flag("--version", icfl::version_string());
  app.require_subcommand(1);

  Options opt;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"train", "train one ensemble in the configured mode"},
      {"probe", "landscape probe: slope, curvature, band"},
      {"spectrum", "Hessian kernel spectrum on a particle subsample"},
      {"fig1a", "training curves of the three modes"},
      {"fig1b", "degenerate teacher, static vs modified over seeds"},
      {"fig1c", "misspecified teacher with extra features"},
      {"fig1d", "test error on the norm task along training"},
      {"scaling", "finite-width approximation error"},
      {"chaos", "nested-width trajectories against a wide reference"}};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", opt.config, "flat key = value config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", opt.seed, "master seed");
    sub->add_option("--out", opt.out, "output directory")->capture_default_str();
    sub->add_option("--mode", opt.mode, "attention, static or modified");
    sub->add_option("--quadrature-size", opt.quadrature_size, "evaluation-set size M");
    sub->add_option("--set", opt.overrides, "config override key=value (repeatable)");
    sub->add_flag("--print-config", opt.print_config, "print the resolved config and exit");
    for (const auto& key : icfl::config_keys()) {
      if (key.key == "seed") continue;
      opt.keyed_options.emplace_back(key.key, sub->add_option("--" + key.key, opt.keyed[key.key], key.description)
                                                  ->group("Config keys"));
    }
    if (name == "train" || name == "probe" || name == "spectrum")
      sub->add_option("--ensemble", opt.ensemble, "start from a saved ensemble")->check(CLI::ExistingFile);
  }

  CLI11_PARSE(app, argc, argv);
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    const auto scn = resolve(command, opt);
    if (opt.print_config) {
      std::cout << "seed = " << scn.seed << '\n' << scn.serialize();
      return 0;
    }
    const icfl::fs::path out = opt.out;
    std::optional<icfl::fs::path> ens;
    if (!opt.ensemble.empty()) ens = opt.ensemble;

    if (command == "train") return report(icfl::run_train(scn, out, ens));
    if (command == "probe") return report(icfl::run_probe(scn, out, ens));
    if (command == "spectrum") return report(icfl::run_spectrum(scn, out, ens));
    if (command == "fig1a") return report(icfl::run_fig1a(scn, out));
    if (command == "fig1b") return report(icfl::run_fig1b(scn, out));
    if (command == "fig1c") return report(icfl::run_fig1c(scn, out));
    if (command == "fig1d") return report(icfl::run_fig1d(scn, out));
    if (command == "scaling") return report(icfl::finite_width_scaling(scn, out));
    if (command == "chaos") return report(icfl::chaos_experiment(scn, out));
  } catch (const icfl::NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
