#include "icfl/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "icfl/io.hpp"

namespace icfl {

namespace {

std::string s(double v) { return format_double(v); }

void ensure_dir(const fs::path& out) {
  if (!out.empty()) fs::create_directories(out);
}

bool keep_row(const Scenario& scn, const Curve& c, std::size_t i) {
  return c.steps[i] % scn.log_every == 0 || i + 1 == c.steps.size();
}

Ensembled initial_ensemble(const Scenario& scn, const std::optional<fs::path>& path) {
  if (path) return load_ensemble(*path);
  return build_model(scn.model, scn.d);
}

void check_dims(const Scenario& scn, const Ensembled& mu) {
  if (mu.d() != scn.d) throw std::invalid_argument("ensemble input dimension does not match scenario d");
}

const std::vector<TrainMode> kAllModes{TrainMode::Attention, TrainMode::Static, TrainMode::Modified};

}  // namespace

void RunStatus::absorb(const Curve& c) {
  if (c.aborted && !aborted) {
    aborted = true;
    abort_reason = to_string(c.mode) + ": " + c.abort_reason;
  }
}

Curve to_curve(const TrainLog<double>& log, TrainMode mode) {
  Curve c;
  c.mode = mode;
  c.aborted = log.aborted;
  c.abort_reason = log.abort_reason;
  for (const auto& r : log.records) {
    c.steps.push_back(r.step);
    c.loss.push_back(r.loss);
  }
  return c;
}

TrainLog<double> run_training(const Scenario& scn, const Problemd& prob, const Ensembled& mu0, TrainMode mode,
                              const TrainObserver<double>& observer) {
  TrainConfig cfg = scn.train;
  cfg.mode = mode;
  cfg.pi = resolved_pi(scn);
  return train(mu0, prob, cfg, observer);
}

TrainResult run_train(const Scenario& scn, const fs::path& out, const std::optional<fs::path>& init) {
  ensure_dir(out);
  const auto prob = make_problem(scn);
  const auto mu0 = initial_ensemble(scn, init);
  check_dims(scn, mu0);

  TrainResult res;
  res.log = run_training(scn, prob, mu0, scn.train.mode);
  res.absorb(to_curve(res.log, scn.train.mode));

  TrainLog<double> thinned = res.log;
  thinned.records.clear();
  for (std::size_t i = 0; i < res.log.records.size(); ++i)
    if (res.log.records[i].step % scn.log_every == 0 || i + 1 == res.log.records.size())
      thinned.records.push_back(res.log.records[i]);
  write_train_log(out / "train.csv", scn.provenance(), thinned);
  save_ensemble(out / "final.ens", res.log.final_ensemble);

  nlohmann::json j = {{"provenance", scn.provenance()},
                      {"mode", to_string(scn.train.mode)},
                      {"steps", res.log.records.empty() ? 0 : res.log.records.back().step},
                      {"initial_loss", res.log.initial_loss()},
                      {"final_loss", res.log.final_loss()},
                      {"aborted", res.log.aborted},
                      {"abort_reason", res.log.abort_reason}};
  if (res.log.final_w.size() > 0) j["final_w"] = matrix_to_json(res.log.final_w);
  write_json(out / "train.json", j);
  res.files = {out / "train.csv", out / "final.ens", out / "train.json"};
  return res;
}

ProbeResult run_probe(const Scenario& scn, const fs::path& out, const std::optional<fs::path>& ensemble) {
  ensure_dir(out);
  const auto prob = make_problem(scn);
  const auto mu = initial_ensemble(scn, ensemble);
  check_dims(scn, mu);
  ProbeResult res;
  res.report = probe(mu, prob, scn.probe_delta);
  auto j = to_json(res.report);
  j["provenance"] = scn.provenance();
  j["cov"] = to_json(reduced_loss(mu, prob));
  write_json(out / "probe.json", j);
  res.files = {out / "probe.json"};
  return res;
}

SpectrumResult run_spectrum(const Scenario& scn, const fs::path& out, const std::optional<fs::path>& ensemble) {
  ensure_dir(out);
  const auto prob = make_problem(scn);
  const auto full = initial_ensemble(scn, ensemble);
  check_dims(scn, full);
  Rng rng(scn.train.seed);
  const auto mu = subsample(full, scn.spectral_n, rng);

  SpectrumResult res;
  res.report = spectrum(mu, prob, scn.spectral_fd_step);
  auto j = to_json(res.report, false);
  j["provenance"] = scn.provenance();
  j["loss"] = reduced_loss(mu, prob).loss;
  write_json(out / "spectrum.json", j);
  CsvWriter csv(out / "spectrum.csv", scn.provenance(), {"index", "eigenvalue"});
  for (Eigen::Index i = 0; i < res.report.eigenvalues.size(); ++i)
    csv.row({std::to_string(i), s(res.report.eigenvalues(i))});
  res.files = {out / "spectrum.json", out / "spectrum.csv"};
  return res;
}

const Curve& Fig1aResult::curve(TrainMode m) const {
  for (const auto& c : curves)
    if (c.mode == m) return c;
  throw std::out_of_range("no curve for mode " + to_string(m));
}

Fig1aResult run_fig1a(const Scenario& scn, const fs::path& out) {
  if (scn.teacher.k != scn.model.k) throw std::invalid_argument("fig1a needs teacher.k == model.k");
  ensure_dir(out);
  const auto prob = make_problem(scn);
  const auto mu0 = build_model(scn.model, scn.d);

  Fig1aResult res;
  CsvWriter csv(out / "fig1a.csv", scn.provenance(), {"step", "mode", "loss"});
  for (TrainMode mode : kAllModes) {
    auto c = to_curve(run_training(scn, prob, mu0, mode), mode);
    for (std::size_t i = 0; i < c.steps.size(); ++i)
      if (keep_row(scn, c, i)) csv.row({std::to_string(c.steps[i]), to_string(mode), s(c.loss[i])});
    res.absorb(c);
    res.curves.push_back(std::move(c));
  }
  res.files = {csv.path()};
  return res;
}

int Fig1bResult::modified_wins() const {
  return static_cast<int>(
      std::count_if(seeds.begin(), seeds.end(), [](const Fig1bSeed& r) { return r.modified_final < r.static_final; }));
}

Fig1bResult run_fig1b(const Scenario& scn, const fs::path& out) {
  const Eigen::Index rank = scn.teacher.rank == 0 ? scn.teacher.k : scn.teacher.rank;
  if (rank >= scn.model.k) throw std::invalid_argument("fig1b needs teacher.rank < model.k");
  if (scn.teacher.k != scn.model.k) throw std::invalid_argument("fig1b needs teacher.k == model.k");
  ensure_dir(out);

  Fig1bResult res;
  CsvWriter csv(out / "fig1b.csv", scn.provenance(), {"seed", "mode", "step", "loss"});
  CsvWriter summary(out / "fig1b_summary.csv", scn.provenance(),
                    {"seed", "lambda_min_oo", "static_final", "modified_final"});
  for (int rep = 0; rep < scn.seeds; ++rep) {
    Scenario sc = scn;
    sc.apply_seed(scn.seed + static_cast<std::uint64_t>(rep));
    const auto prob = make_problem(sc);
    const auto mu0 = build_model(sc.model, sc.d);
    Fig1bSeed row;
    row.seed = sc.seed;
    row.lambda_min_oo = Eigen::SelfAdjointEigenSolver<MatrixXd>(prob.sigma_oo(), Eigen::EigenvaluesOnly).eigenvalues()(0);
    for (TrainMode mode : {TrainMode::Static, TrainMode::Modified}) {
      const auto log = run_training(sc, prob, mu0, mode);
      auto c = to_curve(log, mode);
      for (std::size_t i = 0; i < c.steps.size(); ++i)
        if (keep_row(scn, c, i))
          csv.row({std::to_string(sc.seed), to_string(mode), std::to_string(c.steps[i]), s(c.loss[i])});
      (mode == TrainMode::Static ? row.static_final : row.modified_final) = c.final();
      if (mode == TrainMode::Static && rep == 0) save_ensemble(out / "fig1b_static_seed0.ens", log.final_ensemble);
      res.absorb(c);
    }
    summary.row({std::to_string(row.seed), s(row.lambda_min_oo), s(row.static_final), s(row.modified_final)});
    res.seeds.push_back(row);
  }
  res.files = {csv.path(), summary.path(), out / "fig1b_static_seed0.ens"};
  return res;
}

Fig1cResult run_fig1c(const Scenario& scn, const fs::path& out) {
  if (scn.teacher.k <= scn.model.k) throw std::invalid_argument("fig1c needs teacher.k > model.k");
  ensure_dir(out);
  const auto prob = make_problem(scn);
  const auto mu0 = build_model(scn.model, scn.d);

  Fig1cResult res;
  const VectorXd ev = Eigen::SelfAdjointEigenSolver<MatrixXd>(prob.sigma_oo(), Eigen::EigenvaluesOnly).eigenvalues();
  // Eigenvalues are ascending; drop the model.k largest.
  res.floor = 0.5 * ev.head(ev.size() - scn.model.k).sum();

  CsvWriter csv(out / "fig1c.csv", scn.provenance(), {"step", "mode", "loss"});
  for (TrainMode mode : kAllModes) {
    auto c = to_curve(run_training(scn, prob, mu0, mode), mode);
    for (std::size_t i = 0; i < c.steps.size(); ++i)
      if (keep_row(scn, c, i)) csv.row({std::to_string(c.steps[i]), to_string(mode), s(c.loss[i])});
    res.absorb(c);
    res.curves.push_back(std::move(c));
  }
  nlohmann::json j = {{"provenance", scn.provenance()}, {"rank_floor", res.floor}};
  for (const auto& c : res.curves) j["final_loss"][to_string(c.mode)] = c.final();
  write_json(out / "fig1c.json", j);
  res.files = {csv.path(), out / "fig1c.json"};
  return res;
}

Fig1dResult run_fig1d(const Scenario& scn, const fs::path& out) {
  ensure_dir(out);
  const auto prob = make_problem(scn);
  const auto mu0 = build_model(scn.model, scn.d);
  const VectorXd g = norm_task(prob);

  Fig1dResult res;
  auto record = [&](long step, double loss, const MatrixXd& hm, const MatrixXd& w) {
    const auto te = test_error(hm, w, g, prob);
    res.steps.push_back(step);
    res.loss.push_back(loss);
    res.test_error.push_back(te.error);
    res.projection_floor = te.projection_floor;
  };
  auto observer = [&](const TrainRecord& r, const Ensembled& mu, const MatrixXd& w) {
    if (r.step % scn.test_every == 0) record(r.step, r.loss, network_outputs(mu, prob.eval().samples, prob.activation()), w);
  };
  const auto log = run_training(scn, prob, mu0, scn.train.mode, observer);
  res.absorb(to_curve(log, scn.train.mode));
  // Always close with the last ensemble, whatever the stride.
  if (!log.records.empty() && (res.steps.empty() || res.steps.back() != log.records.back().step)) {
    const MatrixXd hm = network_outputs(log.final_ensemble, prob.eval().samples, prob.activation());
    const MatrixXd w = log.final_w.size() > 0 ? log.final_w : cov_pack(hm, prob).w_opt;
    record(log.records.back().step, log.records.back().loss, hm, w);
  }

  CsvWriter csv(out / "fig1d.csv", scn.provenance(), {"step", "loss", "test_error", "projection_floor"});
  for (std::size_t i = 0; i < res.steps.size(); ++i)
    csv.row({std::to_string(res.steps[i]), s(res.loss[i]), s(res.test_error[i]), s(res.projection_floor)});
  res.files = {csv.path()};
  return res;
}

ScalingResult finite_width_scaling(const Scenario& scn, const fs::path& out) {
  ensure_dir(out);
  const auto prob = make_problem(scn);
  const auto& teacher = prob.teacher();
  const MatrixXd& f = prob.teacher_features();
  const auto& x = prob.eval().samples;
  const double m = double(x.rows());

  ScalingResult res;
  res.teacher_path_norm = path_norm(teacher);
  const auto copy = Ensembled::uniform(teacher.a(), teacher.w());
  res.control_error = (network_outputs(copy, x, prob.activation()) - f).squaredNorm() / m;

  CsvWriter csv(out / "scaling.csv", scn.provenance(), {"n", "draw", "error", "path_norm", "teacher_path_norm"});
  Rng rng(scn.model.seed);
  std::uniform_int_distribution<Eigen::Index> pick(0, teacher.size() - 1);
  long within = 0, total = 0;
  for (long n : scn.scaling_widths) {
    if (n < 1) throw std::invalid_argument("scaling widths must be positive");
    double sum = 0;
    for (int draw = 0; draw < scn.scaling_draws; ++draw) {
      MatrixXd a(n, teacher.k()), w(n, teacher.d());
      for (long j = 0; j < n; ++j) {
        const auto src = pick(rng);
        a.row(j) = teacher.a().row(src);
        w.row(j) = teacher.w().row(src);
      }
      const auto sample = Ensembled::uniform(std::move(a), std::move(w));
      const double err = (network_outputs(sample, x, prob.activation()) - f).squaredNorm() / m;
      const double pn = path_norm(sample);
      sum += err;
      within += pn <= 3.0 * res.teacher_path_norm;
      ++total;
      csv.row({std::to_string(n), std::to_string(draw), s(err), s(pn), s(res.teacher_path_norm)});
    }
    res.widths.push_back(n);
    res.mean_error.push_back(sum / scn.scaling_draws);
  }
  res.path_norm_fraction = total ? double(within) / double(total) : 0.0;
  std::vector<double> xs(res.widths.begin(), res.widths.end());
  res.slope = loglog_slope(xs, res.mean_error);

  write_json(out / "scaling.json", {{"provenance", scn.provenance()},
                                    {"slope", res.slope},
                                    {"control_error", res.control_error},
                                    {"path_norm_fraction", res.path_norm_fraction},
                                    {"teacher_path_norm", res.teacher_path_norm}});
  res.files = {csv.path(), out / "scaling.json"};
  return res;
}

ChaosResult chaos_experiment(const Scenario& scn, const fs::path& out) {
  ensure_dir(out);
  for (long n : scn.chaos_widths)
    if (n < 2 || n > scn.chaos_reference) throw std::invalid_argument("chaos widths must lie in [2, chaos.reference]");

  ChaosResult res;
  CsvWriter csv(out / "chaos.csv", scn.provenance(), {"seed", "n", "distance"});
  for (int rep = 0; rep < scn.seeds; ++rep) {
    Scenario sc = scn;
    sc.apply_seed(scn.seed + static_cast<std::uint64_t>(rep));
    sc.train.max_steps = scn.chaos_steps;
    sc.train.epsilon = 0.0;
    const auto prob = make_problem(sc);
    ModelSpec spec = sc.model;
    spec.n = scn.chaos_reference;
    const auto ref0 = build_model(spec, sc.d);

    const auto ref = to_curve(run_training(sc, prob, ref0, TrainMode::Static), TrainMode::Static);
    res.absorb(ref);
    std::vector<long> widths = scn.chaos_widths;
    widths.push_back(scn.chaos_reference);
    std::vector<double> row;
    for (long n : widths) {
      // Nested initializations: the first n particles of the reference.
      const auto mu0 = Ensembled::uniform(ref0.a().topRows(n), ref0.w().topRows(n));
      const auto c = n == scn.chaos_reference ? ref : to_curve(run_training(sc, prob, mu0, TrainMode::Static),
                                                               TrainMode::Static);
      res.absorb(c);
      double dist = 0;
      for (std::size_t t = 0; t < std::min(c.loss.size(), ref.loss.size()); ++t)
        dist = std::max(dist, std::abs(c.loss[t] - ref.loss[t]));
      if (c.loss.size() != ref.loss.size()) dist = std::numeric_limits<double>::infinity();
      row.push_back(dist);
      csv.row({std::to_string(sc.seed), std::to_string(n), s(dist)});
    }
    res.distance.push_back(std::move(row));
  }
  res.files = {csv.path()};
  return res;
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("loglog_slope needs two or more points");
  const std::size_t n = x.size();
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(x[i] > 0 && y[i] > 0)) throw std::invalid_argument("loglog_slope needs positive data");
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= double(n);
  my /= double(n);
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * double(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) r[idx[t]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("spearman needs two or more paired values");
  const auto rx = ranks(x), ry = ranks(y);
  const Eigen::Map<const VectorXd> a(rx.data(), Eigen::Index(rx.size())), b(ry.data(), Eigen::Index(ry.size()));
  const VectorXd ca = a.array() - a.mean(), cb = b.array() - b.mean();
  const double den = ca.norm() * cb.norm();
  return den == 0.0 ? 0.0 : ca.dot(cb) / den;
}

}  // namespace icfl
