#ifndef ICFL_EXPERIMENTS_HPP
#define ICFL_EXPERIMENTS_HPP

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "icfl/dynamics.hpp"
#include "icfl/landscape.hpp"
#include "icfl/scenario.hpp"
#include "icfl/spectral.hpp"

namespace icfl {

namespace fs = std::filesystem;

struct Curve {
  TrainMode mode = TrainMode::Static;
  std::vector<long> steps;
  std::vector<double> loss;
  bool aborted = false;
  std::string abort_reason;

  double initial() const { return loss.empty() ? 0.0 : loss.front(); }
  double final() const { return loss.empty() ? 0.0 : loss.back(); }
};

/// Shared by every command: set when any training run hit a numerical abort.
struct RunStatus {
  bool aborted = false;
  std::string abort_reason;
  std::vector<fs::path> files;

  void absorb(const Curve& c);
};

Curve to_curve(const TrainLog<double>& log, TrainMode mode);

/// Trains mu0 on prob with the scenario's TrainConfig in the given mode.
TrainLog<double> run_training(const Scenario& scn, const Problemd& prob, const Ensembled& mu0, TrainMode mode,
                              const TrainObserver<double>& observer = {});

struct TrainResult : RunStatus {
  TrainLog<double> log;
};
/// Writes train.csv, final.ens and train.json. Starts from `init` if given,
/// otherwise from the scenario's model initialization.
TrainResult run_train(const Scenario& scn, const fs::path& out, const std::optional<fs::path>& init = {});

struct ProbeResult : RunStatus {
  ProbeReport<double> report;
};
ProbeResult run_probe(const Scenario& scn, const fs::path& out, const std::optional<fs::path>& ensemble = {});

struct SpectrumResult : RunStatus {
  SpectralReport<double> report;
};
/// Subsamples spectral_n particles, then writes spectrum.json and
/// spectrum.csv (index, eigenvalue).
SpectrumResult run_spectrum(const Scenario& scn, const fs::path& out, const std::optional<fs::path>& ensemble = {});

struct Fig1aResult : RunStatus {
  std::vector<Curve> curves;  // attention, static, modified
  const Curve& curve(TrainMode m) const;
};
/// fig1a.csv with columns step,mode,loss.
Fig1aResult run_fig1a(const Scenario& scn, const fs::path& out);

struct Fig1bSeed {
  std::uint64_t seed = 0;
  double lambda_min_oo = 0;
  double static_final = 0;
  double modified_final = 0;
};
struct Fig1bResult : RunStatus {
  std::vector<Fig1bSeed> seeds;
  int modified_wins() const;
};
/// Degenerate teacher over `seeds` repetitions. fig1b.csv has columns
/// seed,mode,step,loss; fig1b_summary.csv one row per seed. The final static
/// ensemble of the first seed is saved as fig1b_static_seed0.ens.
Fig1bResult run_fig1b(const Scenario& scn, const fs::path& out);

struct Fig1cResult : RunStatus {
  std::vector<Curve> curves;
  double floor = 0;  // half the sum of the teacher covariance eigenvalues beyond model.k
};
Fig1cResult run_fig1c(const Scenario& scn, const fs::path& out);

struct Fig1dResult : RunStatus {
  std::vector<long> steps;
  std::vector<double> loss;
  std::vector<double> test_error;
  double projection_floor = 0;
};
/// Test error on g(x) = |h_teacher(x)| every test_every steps of a training
/// run in the scenario's mode. fig1d.csv: step,loss,test_error,projection_floor.
Fig1dResult run_fig1d(const Scenario& scn, const fs::path& out);

struct ScalingResult : RunStatus {
  std::vector<long> widths;
  std::vector<double> mean_error;
  double slope = 0;
  double control_error = 0;      // resampling-free copy of the teacher
  double path_norm_fraction = 0;  // share of draws with path norm <= 3x teacher
  double teacher_path_norm = 0;
};
/// scaling.csv: n,draw,error,path_norm,teacher_path_norm.
ScalingResult finite_width_scaling(const Scenario& scn, const fs::path& out);

struct ChaosResult : RunStatus {
  // distance[s][i] for seed s and width chaos_widths[i]; the last column is
  // the reference against itself.
  std::vector<std::vector<double>> distance;
};
/// chaos.csv: seed,n,distance.
ChaosResult chaos_experiment(const Scenario& scn, const fs::path& out);

/// Ordinary least-squares slope of log y against log x.
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace icfl

#endif  // ICFL_EXPERIMENTS_HPP
