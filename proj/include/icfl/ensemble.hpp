#ifndef ICFL_ENSEMBLE_HPP
#define ICFL_ENSEMBLE_HPP

#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "icfl/activation.hpp"

namespace icfl {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatrixXd = Mat<double>;
using VectorXd = Vec<double>;

/// Thrown when a computation leaves the numerically valid domain
/// (singular covariance, non-finite loss, failed factorization).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void fnv1a(std::uint64_t& h, const void* data, std::size_t bytes) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
}

template <typename Derived>
void hash_matrix(std::uint64_t& h, const Eigen::MatrixBase<Derived>& m) {
  const std::int64_t rows = m.rows(), cols = m.cols();
  fnv1a(h, &rows, sizeof rows);
  fnv1a(h, &cols, sizeof cols);
  const auto& e = m.derived().eval();
  fnv1a(h, e.data(), sizeof(typename Derived::Scalar) * static_cast<std::size_t>(e.size()));
}

}  // namespace detail

/// A single neuron theta = (a, w) with output a * sigma(w^T x).
template <typename Scalar>
struct Particle {
  Vec<Scalar> a;
  Vec<Scalar> w;

  Eigen::Index k() const { return a.size(); }
  Eigen::Index d() const { return w.size(); }
};

/// Weighted empirical measure on parameter space. Row j of `a()` and `w()`
/// holds particle j. Instances are immutable once built.
template <typename Scalar>
class Ensemble {
 public:
  Ensemble() = default;

  Ensemble(Mat<Scalar> a, Mat<Scalar> w, Vec<Scalar> weights)
      : a_(std::move(a)), w_(std::move(w)), weights_(std::move(weights)) {
    validate();
  }

  static Ensemble uniform(Mat<Scalar> a, Mat<Scalar> w) {
    const auto n = a.rows();
    if (n == 0) throw std::invalid_argument("ensemble must contain at least one particle");
    Vec<Scalar> weights = Vec<Scalar>::Constant(n, Scalar(1) / Scalar(n));
    return Ensemble(std::move(a), std::move(w), std::move(weights));
  }

  static Ensemble from_particles(const std::vector<Particle<Scalar>>& ps) {
    if (ps.empty()) throw std::invalid_argument("ensemble must contain at least one particle");
    const auto k = ps.front().k(), d = ps.front().d();
    Mat<Scalar> a(static_cast<Eigen::Index>(ps.size()), k), w(static_cast<Eigen::Index>(ps.size()), d);
    for (std::size_t j = 0; j < ps.size(); ++j) {
      if (ps[j].k() != k || ps[j].d() != d) throw std::invalid_argument("particle dimension mismatch");
      a.row(static_cast<Eigen::Index>(j)) = ps[j].a.transpose();
      w.row(static_cast<Eigen::Index>(j)) = ps[j].w.transpose();
    }
    return uniform(std::move(a), std::move(w));
  }

  Eigen::Index size() const { return a_.rows(); }
  Eigen::Index k() const { return a_.cols(); }
  Eigen::Index d() const { return w_.cols(); }
  bool empty() const { return a_.rows() == 0; }

  const Mat<Scalar>& a() const { return a_; }
  const Mat<Scalar>& w() const { return w_; }
  const Vec<Scalar>& weights() const { return weights_; }

  Particle<Scalar> particle(Eigen::Index j) const {
    return {a_.row(j).transpose(), w_.row(j).transpose()};
  }

  bool is_uniform(Scalar tol = Scalar(1e-15)) const {
    const Scalar u = Scalar(1) / Scalar(size());
    return ((weights_.array() - u).abs() <= tol).all();
  }

  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    detail::hash_matrix(h, a_);
    detail::hash_matrix(h, w_);
    detail::hash_matrix(h, weights_);
    return h;
  }

  /// Same weights, new coordinates.
  Ensemble with_coordinates(Mat<Scalar> a, Mat<Scalar> w) const {
    return Ensemble(std::move(a), std::move(w), weights_);
  }

 private:
  void validate() const {
    if (a_.rows() == 0) throw std::invalid_argument("ensemble must contain at least one particle");
    if (w_.rows() != a_.rows() || weights_.size() != a_.rows())
      throw std::invalid_argument("ensemble row counts disagree");
    if (!a_.allFinite() || !w_.allFinite()) throw NumericalError("ensemble contains non-finite coordinates");
    if ((weights_.array() < Scalar(0)).any()) throw std::invalid_argument("negative ensemble weight");
    if (std::abs(weights_.sum() - Scalar(1)) > Scalar(1e-12))
      throw std::invalid_argument("ensemble weights must sum to 1");
  }

  Mat<Scalar> a_;
  Mat<Scalar> w_;
  Vec<Scalar> weights_;
};

using Ensembled = Ensemble<double>;
using Particled = Particle<double>;

/// A k x k matrix in the spectral-norm unit ball.
template <typename Scalar>
struct Rotation {
  Mat<Scalar> matrix;

  explicit Rotation(Mat<Scalar> m, Scalar tol = Scalar(1e-9)) : matrix(std::move(m)) {
    if (matrix.size() > 0) {
      Eigen::JacobiSVD<Mat<Scalar>> svd(matrix);
      if (svd.singularValues()(0) > Scalar(1) + tol)
        throw std::invalid_argument("rotation has spectral norm above 1");
    }
  }

  static Rotation identity(Eigen::Index k) { return Rotation(Mat<Scalar>::Identity(k, k)); }
};

using Rotationd = Rotation<double>;

/// Reference distribution for birth-death: a uniform on a sphere,
/// w isotropic Gaussian.
struct PiConfig {
  double a_scale = 1.0;
  double w_std = 1.0;
  bool antithetic = true;
};

using Rng = std::mt19937_64;

template <typename Scalar, typename DerivedX>
Vec<Scalar> h_particle(const Particle<Scalar>& p, const Eigen::MatrixBase<DerivedX>& x,
                       const Activation& act = {}) {
  if (p.w.size() != x.size()) throw std::invalid_argument("h_particle: input dimension mismatch");
  return p.a * act.value(p.w.dot(x));
}

template <typename Scalar, typename DerivedX>
Vec<Scalar> h_ensemble(const Ensemble<Scalar>& mu, const Eigen::MatrixBase<DerivedX>& x,
                       const Activation& act = {}) {
  if (mu.empty()) throw std::invalid_argument("h_ensemble: empty ensemble");
  if (mu.d() != x.size()) throw std::invalid_argument("h_ensemble: input dimension mismatch");
  Vec<Scalar> z = mu.w() * x;
  Vec<Scalar> s = z.unaryExpr([&](Scalar t) { return act.value(t); });
  return mu.a().transpose() * (mu.weights().cwiseProduct(s));
}

/// Convex decomposition R = sum_j alpha_j Q_j over orthogonal Q_j, from the SVD
/// R = U D V^T and the sign-diagonal vertices of the cube containing D.
template <typename Scalar>
std::vector<std::pair<Scalar, Mat<Scalar>>> hull_decompose(const Rotation<Scalar>& r) {
  const auto& R = r.matrix;
  const Eigen::Index k = R.rows();
  if (R.cols() != k) throw std::invalid_argument("hull_decompose: rotation must be square");
  if (k > 20) throw std::invalid_argument("hull_decompose: k > 20 would enumerate 2^k sign patterns");

  const Mat<Scalar> gram = R.transpose() * R - Mat<Scalar>::Identity(k, k);
  if (gram.norm() <= Scalar(1e-12)) return {{Scalar(1), R}};

  Eigen::JacobiSVD<Mat<Scalar>> svd(R, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Vec<Scalar> dvals = svd.singularValues();
  if (dvals.size() && dvals(0) > Scalar(1) + Scalar(1e-9))
    throw std::invalid_argument("hull_decompose: spectral norm above 1");
  dvals = dvals.cwiseMin(Scalar(1));

  std::vector<std::pair<Scalar, Mat<Scalar>>> out;
  const std::uint64_t patterns = std::uint64_t{1} << k;
  for (std::uint64_t mask = 0; mask < patterns; ++mask) {
    Scalar alpha(1);
    Vec<Scalar> signs(k);
    for (Eigen::Index i = 0; i < k; ++i) {
      signs(i) = (mask >> i) & 1U ? Scalar(-1) : Scalar(1);
      alpha *= (Scalar(1) + signs(i) * dvals(i)) / Scalar(2);
    }
    if (alpha <= Scalar(0)) continue;
    out.emplace_back(alpha, svd.matrixU() * signs.asDiagonal() * svd.matrixV().transpose());
  }
  return out;
}

/// Hull-mixture pushforward: particles (Q_j a, w) with weight alpha_j * weight.
template <typename Scalar>
Ensemble<Scalar> rotate_pushforward(const Ensemble<Scalar>& mu, const Rotation<Scalar>& r) {
  if (r.matrix.cols() != mu.k()) throw std::invalid_argument("rotate_pushforward: dimension mismatch");
  const auto terms = hull_decompose(r);
  const Eigen::Index n = mu.size();
  const auto t = static_cast<Eigen::Index>(terms.size());
  Mat<Scalar> a(n * t, r.matrix.rows());
  Mat<Scalar> w(n * t, mu.d());
  Vec<Scalar> weights(n * t);
  for (Eigen::Index j = 0; j < t; ++j) {
    const auto& [alpha, q] = terms[static_cast<std::size_t>(j)];
    a.middleRows(j * n, n) = mu.a() * q.transpose();
    w.middleRows(j * n, n) = mu.w();
    weights.segment(j * n, n) = alpha * mu.weights();
  }
  weights /= weights.sum();
  return Ensemble<Scalar>(std::move(a), std::move(w), std::move(weights));
}

/// (1 - s) mu + s nu as a concatenated weighted ensemble.
template <typename Scalar>
Ensemble<Scalar> mix(const Ensemble<Scalar>& mu, const Ensemble<Scalar>& nu, Scalar s) {
  if (!(s >= Scalar(0) && s <= Scalar(1))) throw std::invalid_argument("mix: s must lie in [0,1]");
  if (mu.k() != nu.k() || mu.d() != nu.d()) throw std::invalid_argument("mix: dimension mismatch");
  if (s == Scalar(0)) return mu;
  if (s == Scalar(1)) return nu;
  const Eigen::Index n = mu.size(), m = nu.size();
  Mat<Scalar> a(n + m, mu.k()), w(n + m, mu.d());
  Vec<Scalar> weights(n + m);
  a << mu.a(), nu.a();
  w << mu.w(), nu.w();
  weights << (Scalar(1) - s) * mu.weights(), s * nu.weights();
  return Ensemble<Scalar>(std::move(a), std::move(w), std::move(weights));
}

/// Draws from pi. With antithetic sampling the particles come in pairs
/// (a, w), (-a, w), so the a-mean and the network output both vanish.
template <typename Scalar = double>
std::vector<Particle<Scalar>> sample_pi(std::size_t n, Eigen::Index k, Eigen::Index d, const PiConfig& cfg,
                                        Rng& rng) {
  if (cfg.antithetic && n % 2 != 0) throw std::invalid_argument("sample_pi: antithetic sampling needs even n");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Particle<Scalar>> out;
  out.reserve(n);
  const std::size_t draws = cfg.antithetic ? n / 2 : n;
  for (std::size_t i = 0; i < draws; ++i) {
    Vec<Scalar> a(k), w(d);
    for (Eigen::Index c = 0; c < k; ++c) a(c) = Scalar(normal(rng));
    const Scalar na = a.norm();
    a *= Scalar(cfg.a_scale) / na;
    for (Eigen::Index c = 0; c < d; ++c) w(c) = Scalar(cfg.w_std * normal(rng));
    if (cfg.antithetic) {
      out.push_back({a, w});
      out.push_back({-a, w});
    } else {
      out.push_back({std::move(a), std::move(w)});
    }
  }
  return out;
}

/// sum_j weight_j |a_j| |w_j|
template <typename Scalar>
Scalar path_norm(const Ensemble<Scalar>& mu) {
  return (mu.weights().array() * mu.a().rowwise().norm().array() * mu.w().rowwise().norm().array()).sum();
}

/// sum_j weight_j |a_j|^2
template <typename Scalar>
Scalar second_moment_a(const Ensemble<Scalar>& mu) {
  return (mu.weights().array() * mu.a().rowwise().squaredNorm().array()).sum();
}

}  // namespace icfl

#endif  // ICFL_ENSEMBLE_HPP
