#include "icfl/scenario.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "icfl/io.hpp"

#ifndef ICFL_VERSION
#define ICFL_VERSION "0.0.0"
#endif

namespace icfl {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return out;
  } catch (const std::exception&) {
    throw std::invalid_argument("config key '" + key + "' expects a number, got '" + v + "'");
  }
}

long parse_long(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long out = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return out;
  } catch (const std::exception&) {
    throw std::invalid_argument("config key '" + key + "' expects an integer, got '" + v + "'");
  }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    const unsigned long long out = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return out;
  } catch (const std::exception&) {
    throw std::invalid_argument("config key '" + key + "' expects an unsigned integer, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("config key '" + key + "' expects true/false, got '" + v + "'");
}

std::vector<long> parse_list(const std::string& key, const std::string& v) {
  std::vector<long> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_long(key, trim(item)));
  if (out.empty()) throw std::invalid_argument("config key '" + key + "' expects a comma-separated list");
  return out;
}

std::string join(const std::vector<long>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::string fmt(double v) { return format_double(v); }

ConfigKey real_key(std::string key, std::string desc, double Scenario::*outer) {
  return {key, std::move(desc), [outer, key](Scenario& s, const std::string& v) { s.*outer = parse_double(key, v); },
          [outer](const Scenario& s) { return fmt(s.*outer); }};
}

template <typename Sub, typename Field>
ConfigKey nested_key(std::string key, std::string desc, Sub Scenario::*sub, Field Sub::*field) {
  auto set = [sub, field, key](Scenario& s, const std::string& v) {
    auto& target = s.*sub.*field;
    using T = std::decay_t<decltype(target)>;
    if constexpr (std::is_same_v<T, double>)
      target = parse_double(key, v);
    else if constexpr (std::is_same_v<T, bool>)
      target = parse_bool(key, v);
    else if constexpr (std::is_same_v<T, std::uint64_t>)
      target = parse_u64(key, v);
    else
      target = static_cast<T>(parse_long(key, v));
  };
  auto get = [sub, field](const Scenario& s) {
    const auto& v = s.*sub.*field;
    using T = std::decay_t<decltype(v)>;
    if constexpr (std::is_same_v<T, double>)
      return fmt(v);
    else if constexpr (std::is_same_v<T, bool>)
      return std::string(v ? "true" : "false");
    else
      return std::to_string(v);
  };
  return {std::move(key), std::move(desc), set, get};
}

std::vector<ConfigKey> make_keys() {
  std::vector<ConfigKey> keys;
  keys.push_back({"seed", "master seed; derives eval.seed, teacher.seed, model.seed and train.seed",
                  [](Scenario& s, const std::string& v) { s.apply_seed(parse_u64("seed", v)); },
                  [](const Scenario& s) { return std::to_string(s.seed); }});
  keys.push_back({"name", "scenario name, used in provenance lines",
                  [](Scenario& s, const std::string& v) { s.name = v; }, [](const Scenario& s) { return s.name; }});
  keys.push_back({"d", "input dimension",
                  [](Scenario& s, const std::string& v) {
                    s.d = parse_long("d", v);
                    s.eval.dim = s.d;
                  },
                  [](const Scenario& s) { return std::to_string(s.d); }});
  keys.push_back({"activation", "sigmoid or tanh",
                  [](Scenario& s, const std::string& v) {
                    Activation::from_name(v);
                    s.activation = v;
                  },
                  [](const Scenario& s) { return s.activation; }});
  keys.push_back(real_key("ridge_eps", "relative eigenvalue floor for the model covariance inverse",
                          &Scenario::ridge_eps));

  keys.push_back(nested_key("eval.seed", "evaluation-set seed", &Scenario::eval, &EvalSetDescriptor::seed));
  keys.push_back(nested_key("eval.size", "evaluation-set size M (at least 256)", &Scenario::eval,
                            &EvalSetDescriptor::size));
  keys.push_back({"eval.dist", "input distribution: gaussian or uniform",
                  [](Scenario& s, const std::string& v) { s.eval.dist = input_distribution_from_name(v); },
                  [](const Scenario& s) { return to_string(s.eval.dist); }});

  keys.push_back(nested_key("teacher.k", "teacher feature dimension", &Scenario::teacher, &TeacherSpec::k));
  keys.push_back(nested_key("teacher.n", "teacher particle count", &Scenario::teacher, &TeacherSpec::n));
  keys.push_back(nested_key("teacher.rank", "rank of the teacher covariance (0: teacher.k)", &Scenario::teacher,
                            &TeacherSpec::rank));
  keys.push_back(nested_key("teacher.w_std", "teacher first-layer std (0: 1/sqrt(d))", &Scenario::teacher,
                            &TeacherSpec::w_std));
  keys.push_back(nested_key("teacher.scale", "teacher covariance eigenvalue (0: 1/teacher.k)", &Scenario::teacher,
                            &TeacherSpec::scale));
  keys.push_back(nested_key("teacher.alternating", "alternate the signs of the teacher a-vectors",
                            &Scenario::teacher, &TeacherSpec::alternating));
  keys.push_back(nested_key("teacher.seed", "teacher seed", &Scenario::teacher, &TeacherSpec::seed));

  keys.push_back(nested_key("model.k", "model feature dimension", &Scenario::model, &ModelSpec::k));
  keys.push_back(nested_key("model.n", "model particle count N", &Scenario::model, &ModelSpec::n));
  keys.push_back(nested_key("model.a_radius", "initial |a|", &Scenario::model, &ModelSpec::a_radius));
  keys.push_back(nested_key("model.w_std", "initial first-layer std (0: 1/sqrt(d))", &Scenario::model,
                            &ModelSpec::w_std));
  keys.push_back(nested_key("model.seed", "model initialization seed", &Scenario::model, &ModelSpec::seed));

  keys.push_back(nested_key("train.eta", "particle learning rate", &Scenario::train, &TrainConfig::eta));
  keys.push_back(nested_key("train.eta_w", "attention learning rate (negative: 10 * eta, 0: closed form)",
                            &Scenario::train, &TrainConfig::eta_w));
  keys.push_back(nested_key("train.w_init", "attention mode: initial attention is w_init times I; negative: the optimum for the initial ensemble",
                            &Scenario::train, &TrainConfig::w_init));
  keys.push_back(nested_key("train.gamma", "birth-death fraction", &Scenario::train, &TrainConfig::gamma));
  keys.push_back(nested_key("train.eta_p", "perturbation step size", &Scenario::train, &TrainConfig::eta_p));
  keys.push_back(nested_key("train.tau", "minimum steps between perturbations", &Scenario::train, &TrainConfig::tau));
  keys.push_back(nested_key("train.delta_b", "birth-death threshold, relative improvement per window",
                            &Scenario::train, &TrainConfig::delta_b));
  keys.push_back(nested_key("train.delta_p", "perturbation threshold, relative improvement per window",
                            &Scenario::train, &TrainConfig::delta_p));
  keys.push_back(nested_key("train.epsilon", "stop once the loss is at most this", &Scenario::train,
                            &TrainConfig::epsilon));
  keys.push_back(nested_key("train.max_steps", "step budget", &Scenario::train, &TrainConfig::max_steps));
  keys.push_back(nested_key("train.window", "steps per improvement window", &Scenario::train, &TrainConfig::window));
  keys.push_back(nested_key("train.seed", "seed for birth-death, perturbation and minibatches", &Scenario::train,
                            &TrainConfig::seed));
  keys.push_back({"train.mode", "attention, static or modified",
                  [](Scenario& s, const std::string& v) { s.train.mode = train_mode_from_name(v); },
                  [](const Scenario& s) { return to_string(s.train.mode); }});
  keys.push_back(nested_key("train.project_a", "project a onto the unit ball after each step", &Scenario::train,
                            &TrainConfig::project_a));
  keys.push_back(nested_key("train.stochastic", "fresh minibatch of inputs for every gradient", &Scenario::train,
                            &TrainConfig::stochastic));
  keys.push_back(nested_key("train.batch_size", "minibatch size in stochastic mode", &Scenario::train,
                            &TrainConfig::batch_size));
  keys.push_back({"gp.sigma_p", "perturbation kernel amplitude",
                  [](Scenario& s, const std::string& v) { s.train.gp.sigma_p = parse_double("gp.sigma_p", v); },
                  [](const Scenario& s) { return fmt(s.train.gp.sigma_p); }});
  keys.push_back({"gp.ell", "perturbation kernel length scale",
                  [](Scenario& s, const std::string& v) { s.train.gp.ell = parse_double("gp.ell", v); },
                  [](const Scenario& s) { return fmt(s.train.gp.ell); }});
  keys.push_back({"pi.a_scale", "birth-death draws: |a|; 0: model.a_radius",
                  [](Scenario& s, const std::string& v) { s.train.pi.a_scale = parse_double("pi.a_scale", v); },
                  [](const Scenario& s) { return fmt(s.train.pi.a_scale); }});
  keys.push_back({"pi.w_std", "birth-death draws: first-layer std; 0: the model initialization std",
                  [](Scenario& s, const std::string& v) { s.train.pi.w_std = parse_double("pi.w_std", v); },
                  [](const Scenario& s) { return fmt(s.train.pi.w_std); }});
  keys.push_back({"pi.antithetic", "pair every birth-death draw with its negation",
                  [](Scenario& s, const std::string& v) { s.train.pi.antithetic = parse_bool("pi.antithetic", v); },
                  [](const Scenario& s) { return std::string(s.train.pi.antithetic ? "true" : "false"); }});

  keys.push_back({"log_every", "write every n-th training record to CSV",
                  [](Scenario& s, const std::string& v) { s.log_every = std::max(1L, parse_long("log_every", v)); },
                  [](const Scenario& s) { return std::to_string(s.log_every); }});
  keys.push_back({"test_every", "fig1d: test-error stride in steps",
                  [](Scenario& s, const std::string& v) { s.test_every = std::max(1L, parse_long("test_every", v)); },
                  [](const Scenario& s) { return std::to_string(s.test_every); }});
  keys.push_back({"seeds", "fig1b, chaos: number of repetitions",
                  [](Scenario& s, const std::string& v) { s.seeds = static_cast<int>(parse_long("seeds", v)); },
                  [](const Scenario& s) { return std::to_string(s.seeds); }});
  keys.push_back({"scaling.draws", "scaling: draws per width",
                  [](Scenario& s, const std::string& v) {
                    s.scaling_draws = static_cast<int>(parse_long("scaling.draws", v));
                  },
                  [](const Scenario& s) { return std::to_string(s.scaling_draws); }});
  keys.push_back({"scaling.widths", "scaling: comma-separated widths",
                  [](Scenario& s, const std::string& v) { s.scaling_widths = parse_list("scaling.widths", v); },
                  [](const Scenario& s) { return join(s.scaling_widths); }});
  keys.push_back({"chaos.widths", "chaos: comma-separated widths",
                  [](Scenario& s, const std::string& v) { s.chaos_widths = parse_list("chaos.widths", v); },
                  [](const Scenario& s) { return join(s.chaos_widths); }});
  keys.push_back({"chaos.reference", "chaos: reference width",
                  [](Scenario& s, const std::string& v) { s.chaos_reference = parse_long("chaos.reference", v); },
                  [](const Scenario& s) { return std::to_string(s.chaos_reference); }});
  keys.push_back({"chaos.steps", "chaos: training horizon in steps",
                  [](Scenario& s, const std::string& v) { s.chaos_steps = parse_long("chaos.steps", v); },
                  [](const Scenario& s) { return std::to_string(s.chaos_steps); }});
  keys.push_back({"spectral.n", "particles kept for the Hessian spectrum",
                  [](Scenario& s, const std::string& v) { s.spectral_n = parse_long("spectral.n", v); },
                  [](const Scenario& s) { return std::to_string(s.spectral_n); }});
  keys.push_back({"spectral.fd_step", "finite-difference step of the Hessian operator",
                  [](Scenario& s, const std::string& v) { s.spectral_fd_step = parse_double("spectral.fd_step", v); },
                  [](const Scenario& s) { return fmt(s.spectral_fd_step); }});
  keys.push_back({"probe.delta", "slope threshold for the band classification",
                  [](Scenario& s, const std::string& v) { s.probe_delta = parse_double("probe.delta", v); },
                  [](const Scenario& s) { return fmt(s.probe_delta); }});
  return keys;
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = make_keys();
  return keys;
}

void Scenario::apply_seed(std::uint64_t master) {
  seed = master;
  eval.seed = splitmix(master ^ 0x1);
  teacher.seed = splitmix(master ^ 0x2);
  model.seed = splitmix(master ^ 0x3);
  train.seed = splitmix(master ^ 0x4);
}

std::string Scenario::serialize() const {
  std::string out;
  for (const auto& k : config_keys()) {
    if (k.key == "seed") continue;  // sub-seeds are written explicitly
    out += k.key + " = " + k.get(*this) + "\n";
  }
  return out;
}

std::uint64_t Scenario::hash() const {
  const std::string s = serialize();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  detail::fnv1a(h, s.data(), s.size());
  return h;
}

std::string Scenario::provenance() const {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash()));
  return "scenario=" + name + " hash=" + buf + " seed=" + std::to_string(seed) + " version=" + version_string();
}

const char* version_string() { return ICFL_VERSION; }

void set_config_value(Scenario& scn, const std::string& key, const std::string& value) {
  for (const auto& k : config_keys())
    if (k.key == key) {
      k.set(scn, value);
      return;
    }
  throw std::invalid_argument("unknown config key '" + key + "'");
}

void apply_config_text(Scenario& scn, const std::string& text) {
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    set_config_value(scn, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void apply_config_file(Scenario& scn, const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read config " + path.string());
  std::stringstream buf;
  buf << is.rdbuf();
  apply_config_text(scn, buf.str());
}

EvalSetd make_eval_set(const Scenario& scn) {
  EvalSetDescriptor desc = scn.eval;
  desc.dim = scn.d;
  return draw_eval_set<double>(desc);
}

Ensembled build_teacher(const TeacherSpec& spec, Eigen::Index d, const EvalSetd& eval, const Activation& act) {
  const Eigen::Index k = spec.k;
  const Eigen::Index rank = spec.rank == 0 ? k : spec.rank;
  if (rank < 1 || rank > k) throw std::invalid_argument("teacher.rank must lie in [1, teacher.k]");
  if (spec.n < 2 * rank) throw std::invalid_argument("teacher needs at least two particles per feature");
  const double w_std = spec.w_std > 0 ? spec.w_std : 1.0 / std::sqrt(double(d));
  const double scale = spec.scale > 0 ? spec.scale : 1.0 / double(k);

  Rng rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixXd a = MatrixXd::Zero(spec.n, rank), w(spec.n, d);
  for (Eigen::Index j = 0; j < spec.n; ++j) {
    a(j, j % rank) = spec.alternating && (j / rank) % 2 == 1 ? -1.0 : 1.0;
    for (Eigen::Index c = 0; c < d; ++c) w(j, c) = w_std * normal(rng);
  }

  // Whiten the raw features on the evaluation set.
  const auto raw = Ensembled::uniform(a, w);
  const MatrixXd h = network_outputs(raw, eval.samples, act);
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(cov<double>(h, h));
  if (es.eigenvalues()(0) <= 0) throw NumericalError("teacher features are linearly dependent on the eval set");
  const MatrixXd t = std::sqrt(scale) * es.operatorInverseSqrt();

  MatrixXd embed = MatrixXd::Identity(k, rank);
  if (rank < k) {
    MatrixXd g(k, k);
    for (Eigen::Index i = 0; i < k; ++i)
      for (Eigen::Index j = 0; j < k; ++j) g(i, j) = normal(rng);
    Eigen::HouseholderQR<MatrixXd> qr(g);
    embed = qr.householderQ() * MatrixXd::Identity(k, rank);
  }
  return Ensembled::uniform(a * t.transpose() * embed.transpose(), w);
}

Ensembled build_model(const ModelSpec& spec, Eigen::Index d) {
  if (spec.n < 1 || spec.k < 1) throw std::invalid_argument("model needs positive n and k");
  const double w_std = spec.w_std > 0 ? spec.w_std : 1.0 / std::sqrt(double(d));
  Rng rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixXd a(spec.n, spec.k), w(spec.n, d);
  for (Eigen::Index j = 0; j < spec.n; ++j) {
    for (Eigen::Index c = 0; c < spec.k; ++c) a(j, c) = normal(rng);
    a.row(j) *= spec.a_radius / a.row(j).norm();
    for (Eigen::Index c = 0; c < d; ++c) w(j, c) = w_std * normal(rng);
  }
  return Ensembled::uniform(std::move(a), std::move(w));
}

Problemd make_problem(const Scenario& scn) {
  auto eval = make_eval_set(scn);
  const auto act = scn.act();
  auto teacher = build_teacher(scn.teacher, scn.d, eval, act);
  return Problemd(std::move(teacher), std::move(eval), act, scn.ridge_eps);
}

PiConfig default_pi(const ModelSpec& spec, Eigen::Index d) {
  PiConfig pi;
  pi.a_scale = spec.a_radius;
  pi.w_std = spec.w_std > 0 ? spec.w_std : 1.0 / std::sqrt(double(d));
  pi.antithetic = true;
  return pi;
}

PiConfig resolved_pi(const Scenario& scn) {
  const PiConfig model = default_pi(scn.model, scn.d);
  PiConfig pi = scn.train.pi;
  if (pi.a_scale <= 0.0) pi.a_scale = model.a_scale;
  if (pi.w_std <= 0.0) pi.w_std = model.w_std;
  return pi;
}

Scenario preset(const std::string& experiment) {
  Scenario s;
  s.name = experiment.empty() ? "default" : experiment;
  s.apply_seed(0);
  // Zero pi scales follow the model initialization; see resolved_pi.
  s.train.pi.a_scale = 0.0;
  s.train.pi.w_std = 0.0;
  if (experiment == "fig1a" || experiment == "fig1d") {
    s.eval.size = 2048;
    s.train.max_steps = 20000;
    s.log_every = 10;
    // fig1d follows the transformer along the fig1a trajectory.
    s.train.eta_w = 100.0 * s.train.eta;
    if (experiment == "fig1d") {
      s.train.mode = TrainMode::Attention;
      // With alternating signs the teacher is odd in x and its norm has no linear part.
      s.teacher.alternating = false;
    }
  } else if (experiment == "fig1b") {
    s.teacher.rank = 3;
    s.eval.size = 1024;
    s.train.max_steps = 5000;
    s.log_every = 10;
  } else if (experiment == "fig1c") {
    s.teacher.k = 7;
    s.eval.size = 2048;
    s.train.max_steps = 10000;
    s.log_every = 10;
  } else if (experiment == "chaos") {
    s.eval.size = 1024;
  } else if (experiment != "default" && experiment != "scaling") {
    throw std::invalid_argument("unknown experiment: " + experiment);
  }
  return s;
}

}  // namespace icfl
