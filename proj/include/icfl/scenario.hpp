#ifndef ICFL_SCENARIO_HPP
#define ICFL_SCENARIO_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "icfl/activation.hpp"
#include "icfl/dynamics.hpp"
#include "icfl/ensemble.hpp"
#include "icfl/objective.hpp"
#include "icfl/quadrature.hpp"
#include "icfl/spectral.hpp"

namespace icfl {

/// Teacher: n particles split evenly over `rank` features. Within a feature
/// the sign of a alternates, w ~ N(0, w_std^2 I). The a-vectors are then
/// linearly mapped so that the teacher covariance on the evaluation set
/// equals `scale` times a rank-`rank` projector (the identity when rank = k).
struct TeacherSpec {
  Eigen::Index k = 5;
  Eigen::Index n = 500;
  Eigen::Index rank = 0;  // 0: full rank k
  double w_std = 0.0;     // 0: 1/sqrt(d)
  double scale = 0.0;     // 0: 1/k
  bool alternating = true;  // signs of the a-vectors alternate within each direction
  std::uint64_t seed = 11;
};

/// Model initialization: a uniform on the sphere of radius a_radius,
/// w ~ N(0, w_std^2 I).
struct ModelSpec {
  Eigen::Index k = 5;
  Eigen::Index n = 500;
  double a_radius = 0.5;
  double w_std = 0.0;  // 0: 1/sqrt(d)
  std::uint64_t seed = 3;
};

struct Scenario {
  std::string name = "default";
  Eigen::Index d = 20;
  std::string activation = "sigmoid";
  double ridge_eps = kDefaultRidgeEps;
  EvalSetDescriptor eval{1, 4096, 20, InputDistribution::Gaussian};
  TeacherSpec teacher;
  ModelSpec model;
  TrainConfig train;
  std::uint64_t seed = 0;  // master seed; see apply_seed

  long log_every = 1;           // CSV thinning for training curves
  long test_every = 100;        // fig1d evaluation stride
  int seeds = 10;               // repetitions for seed-majority experiments
  int scaling_draws = 20;
  std::vector<long> scaling_widths{50, 100, 200, 400, 800, 1600, 3200};
  std::vector<long> chaos_widths{64, 128, 256, 512};
  long chaos_reference = 1024;
  long chaos_steps = 200;
  Eigen::Index spectral_n = kDefaultSpectralParticles;
  double spectral_fd_step = kDefaultHessianStep;
  double probe_delta = 1e-3;

  /// Derives every sub-seed (eval set, teacher, model, training) from one
  /// master seed.
  void apply_seed(std::uint64_t master);

  Activation act() const { return Activation::from_name(activation); }
  std::uint64_t hash() const;
  std::string serialize() const;
  std::string provenance() const;
};

/// Default configuration of a named experiment.
Scenario preset(const std::string& experiment);

/// Registered configuration keys, in documentation order.
struct ConfigKey {
  std::string key;
  std::string description;
  std::function<void(Scenario&, const std::string&)> set;
  std::function<std::string(const Scenario&)> get;
};
const std::vector<ConfigKey>& config_keys();

void set_config_value(Scenario& scn, const std::string& key, const std::string& value);
/// Parses flat `key = value` lines; '#' starts a comment.
void apply_config_text(Scenario& scn, const std::string& text);
void apply_config_file(Scenario& scn, const std::filesystem::path& path);

const char* version_string();

EvalSetd make_eval_set(const Scenario& scn);
Ensembled build_teacher(const TeacherSpec& spec, Eigen::Index d, const EvalSetd& eval, const Activation& act);
Ensembled build_model(const ModelSpec& spec, Eigen::Index d);
Problemd make_problem(const Scenario& scn);

/// Reference distribution pi matched to the model initialization.
PiConfig default_pi(const ModelSpec& spec, Eigen::Index d);
/// The scenario's pi with zero scales replaced by default_pi.
PiConfig resolved_pi(const Scenario& scn);

}  // namespace icfl

#endif  // ICFL_SCENARIO_HPP
