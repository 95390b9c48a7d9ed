#ifndef ICFL_QUADRATURE_HPP
#define ICFL_QUADRATURE_HPP

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <string>
#include <utility>

#include <Eigen/Dense>

#include "icfl/activation.hpp"
#include "icfl/ensemble.hpp"

namespace icfl {

enum class InputDistribution { Gaussian, Uniform };

inline std::string to_string(InputDistribution d) {
  return d == InputDistribution::Gaussian ? "gaussian" : "uniform";
}

inline InputDistribution input_distribution_from_name(const std::string& s) {
  if (s == "gaussian") return InputDistribution::Gaussian;
  if (s == "uniform") return InputDistribution::Uniform;
  throw std::invalid_argument("unknown input distribution: " + s);
}

/// Seeded descriptor of an evaluation set; the samples themselves are never
/// persisted.
struct EvalSetDescriptor {
  std::uint64_t seed = 0;
  Eigen::Index size = 4096;
  Eigen::Index dim = 20;
  InputDistribution dist = InputDistribution::Gaussian;
};

inline constexpr Eigen::Index kMinEvalSetSize = 256;

/// Fixed Monte-Carlo sample standing in for every expectation over inputs.
/// Row m of `samples` is x_m.
template <typename Scalar>
struct EvalSet {
  Mat<Scalar> samples;
  EvalSetDescriptor descriptor;

  Eigen::Index size() const { return samples.rows(); }
  Eigen::Index dim() const { return samples.cols(); }
  std::uint64_t seed() const { return descriptor.seed; }

  /// Empirical E|x|^2 and E|x|^4.
  Scalar moment2() const { return samples.rowwise().squaredNorm().mean(); }
  Scalar moment4() const { return samples.rowwise().squaredNorm().array().square().mean(); }
};

using EvalSetd = EvalSet<double>;

/// Fills an M x d matrix with i.i.d. inputs; identical seeds give bitwise
/// identical matrices.
template <typename Scalar>
Mat<Scalar> draw_inputs(Rng& rng, Eigen::Index m, Eigen::Index d, InputDistribution dist) {
  Mat<Scalar> x(m, d);
  if (dist == InputDistribution::Gaussian) {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index j = 0; j < d; ++j) x(i, j) = Scalar(normal(rng));
  } else {
    // unit variance
    const double h = std::sqrt(3.0);
    std::uniform_real_distribution<double> unif(-h, h);
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index j = 0; j < d; ++j) x(i, j) = Scalar(unif(rng));
  }
  return x;
}

template <typename Scalar = double>
EvalSet<Scalar> draw_eval_set(const EvalSetDescriptor& desc) {
  if (desc.size < kMinEvalSetSize)
    throw std::invalid_argument("evaluation set needs at least 256 samples");
  if (desc.dim < 1) throw std::invalid_argument("evaluation set dimension must be positive");
  Rng rng(desc.seed);
  return {draw_inputs<Scalar>(rng, desc.size, desc.dim, desc.dist), desc};
}

template <typename Scalar = double>
EvalSet<Scalar> draw_eval_set(std::uint64_t seed, Eigen::Index m, Eigen::Index d,
                              InputDistribution dist = InputDistribution::Gaussian) {
  return draw_eval_set<Scalar>(EvalSetDescriptor{seed, m, d, dist});
}

/// Network output over the evaluation set. Row m of `values` is h_mu(x_m).
template <typename Scalar>
struct FeatureMatrix {
  Mat<Scalar> values;
  std::uint64_t ensemble_hash = 0;
  std::uint64_t eval_seed = 0;
};

/// Per-particle activations on the evaluation set, needed by the gradient and
/// Hessian code. Column j belongs to particle j.
template <typename Scalar>
struct ParticleActivations {
  Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic> s;   // sigma(w_j^T x_m)
  Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic> ds;  // sigma'(w_j^T x_m)
};

template <typename Scalar>
ParticleActivations<Scalar> particle_activations(const Mat<Scalar>& w, const Mat<Scalar>& x,
                                                 const Activation& act) {
  const Mat<Scalar> z = x * w.transpose();
  ParticleActivations<Scalar> out;
  act.apply(z.array(), out.s, out.ds);
  return out;
}

/// M x k matrix of network outputs given activations.
template <typename Scalar>
Mat<Scalar> outputs_from_activations(const Ensemble<Scalar>& mu,
                                     const Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic>& s) {
  return s.matrix() * (mu.weights().asDiagonal() * mu.a());
}

template <typename Scalar>
Mat<Scalar> network_outputs(const Ensemble<Scalar>& mu, const Mat<Scalar>& x, const Activation& act) {
  if (mu.d() != x.cols()) throw std::invalid_argument("network_outputs: input dimension mismatch");
  const Mat<Scalar> z = x * mu.w().transpose();
  Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic> s, ds;
  act.apply(z.array(), s, ds);
  return outputs_from_activations(mu, s);
}

template <typename Scalar>
FeatureMatrix<Scalar> features(const Ensemble<Scalar>& mu, const EvalSet<Scalar>& e, const Activation& act = {}) {
  return {network_outputs(mu, e.samples, act), mu.hash(), e.seed()};
}

/// Memoizes feature matrices by (ensemble hash, eval-set seed).
template <typename Scalar>
class FeatureCache {
 public:
  std::shared_ptr<const FeatureMatrix<Scalar>> get(const Ensemble<Scalar>& mu, const EvalSet<Scalar>& e,
                                                   const Activation& act = {}) {
    const auto key = std::make_pair(mu.hash(), e.seed());
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = entries_.find(key);
    if (it != entries_.end()) return it->second;
    auto fm = std::make_shared<const FeatureMatrix<Scalar>>(features(mu, e, act));
    entries_.emplace(key, fm);
    return fm;
  }

  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

 private:
  std::mutex mutex_;
  std::map<std::pair<std::uint64_t, std::uint64_t>, std::shared_ptr<const FeatureMatrix<Scalar>>> entries_;
};

/// (1/M) sum_m h_mu(x_m) h_nu(x_m)^T from two feature matrices.
template <typename Scalar>
Mat<Scalar> cov(const Mat<Scalar>& hmu, const Mat<Scalar>& hnu) {
  if (hmu.rows() != hnu.rows()) throw std::invalid_argument("cov: feature matrices use different eval sets");
  return hmu.transpose() * hnu / Scalar(hmu.rows());
}

template <typename Scalar>
Mat<Scalar> cov(const Ensemble<Scalar>& mu, const Ensemble<Scalar>& nu, const EvalSet<Scalar>& e,
                const Activation& act = {}) {
  return cov<Scalar>(features(mu, e, act).values, features(nu, e, act).values);
}

template <typename Scalar>
struct SigmaSpectrum {
  Scalar lambda_min;
  Scalar lambda_max;
  Eigen::Index rank;
};

template <typename Scalar>
SigmaSpectrum<Scalar> spectrum_of(const Mat<Scalar>& sigma) {
  Eigen::SelfAdjointEigenSolver<Mat<Scalar>> es(sigma, Eigen::EigenvaluesOnly);
  const auto& ev = es.eigenvalues();
  const Scalar tol = Scalar(1e-10) * sigma.trace() / Scalar(sigma.rows());
  return {ev(0), ev(ev.size() - 1), static_cast<Eigen::Index>((ev.array() > tol).count())};
}

template <typename Scalar>
SigmaSpectrum<Scalar> sigma_spectrum(const Ensemble<Scalar>& mu, const EvalSet<Scalar>& e,
                                     const Activation& act = {}) {
  const auto h = features(mu, e, act).values;
  return spectrum_of<Scalar>(cov<Scalar>(h, h));
}

}  // namespace icfl

#endif  // ICFL_QUADRATURE_HPP
