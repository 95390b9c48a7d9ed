#ifndef ICFL_SPECTRAL_HPP
#define ICFL_SPECTRAL_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "icfl/dynamics.hpp"
#include "icfl/ensemble.hpp"
#include "icfl/objective.hpp"
#include "icfl/quadrature.hpp"

namespace icfl {

inline constexpr double kDefaultHessianStep = 1e-4;
inline constexpr Eigen::Index kHessianBudget = 20000;
inline constexpr Eigen::Index kDefaultSpectralParticles = 200;

/// Weighted Hessian kernel matrix A with A[p, j] = (1/N) H(theta_p, theta_j).
/// Particle p, coordinate c sits at index p * (k + d) + c, a-coordinates
/// first.
template <typename Scalar>
struct HessianOperator {
  Mat<Scalar> matrix;
  Eigen::Index n = 0;
  Eigen::Index k = 0;
  Eigen::Index d = 0;
  std::uint64_t base_hash = 0;
  Scalar fd_step = 0;

  Eigen::Index m() const { return k + d; }

  /// The kernel block H(theta_p, theta_j), without the 1/N weight.
  Mat<Scalar> block(Eigen::Index p, Eigen::Index j) const {
    return Scalar(n) * matrix.block(p * m(), j * m(), m(), m());
  }

  Scalar asymmetry() const {
    const Scalar nrm = matrix.norm();
    return nrm == Scalar(0) ? Scalar(0) : (matrix - matrix.transpose()).norm() / nrm;
  }
};

template <typename Scalar>
Mat<Scalar> flatten_field(const Mat<Scalar>& field) {
  Mat<Scalar> rowmajor = field.transpose();
  return Eigen::Map<const Mat<Scalar>>(rowmajor.data(), rowmajor.size(), 1);
}

template <typename Scalar>
Mat<Scalar> unflatten_field(const Vec<Scalar>& flat, Eigen::Index n, Eigen::Index m) {
  return Eigen::Map<const Mat<Scalar>>(flat.data(), m, n).transpose();
}

/// Kernel operator applied to a velocity field v (N x (k + d)), by central
/// differences of the analytic gradient field: every particle is displaced
/// by +-eps v, and the gradient is re-evaluated at the undisplaced locations.
template <typename Scalar>
Mat<Scalar> apply_hessian(const Ensemble<Scalar>& mu, const Problem<Scalar>& prob, const Mat<Scalar>& v,
                          Scalar eps = Scalar(kDefaultHessianStep)) {
  require_uniform(mu, "apply_hessian");
  const Eigen::Index k = mu.k(), d = mu.d();
  if (v.rows() != mu.size() || v.cols() != k + d) throw std::invalid_argument("apply_hessian: field shape mismatch");
  if (!(eps > Scalar(0))) throw std::invalid_argument("apply_hessian: step must be positive");
  if (v.isZero(0)) return Mat<Scalar>::Zero(v.rows(), v.cols());

  const auto& x = prob.eval().samples;
  auto driving = [&](Scalar sign) {
    const auto moved =
        mu.with_coordinates(mu.a() + sign * eps * v.leftCols(k), mu.w() + sign * eps * v.rightCols(d));
    return FirstVariation<Scalar>::reduced(moved, prob).driving();
  };
  const Mat<Scalar> dg = (driving(Scalar(1)) - driving(Scalar(-1))) / (Scalar(2) * eps);
  const auto acts = particle_activations(mu.w(), x, prob.activation());
  return FirstVariation<Scalar>::apply(dg, mu.a(), acts, x).stacked();
}

/// Assembles the full weighted kernel matrix column by column. Displacing a
/// single particle only changes one column of the activation matrix, so each
/// column costs one covariance update plus one linear field evaluation.
template <typename Scalar>
HessianOperator<Scalar> hessian_matrix(const Ensemble<Scalar>& mu, const Problem<Scalar>& prob,
                                       Scalar eps = Scalar(kDefaultHessianStep)) {
  require_uniform(mu, "hessian_matrix");
  const Eigen::Index n = mu.size(), k = mu.k(), d = mu.d(), m = k + d;
  if (n * m > kHessianBudget)
    throw std::invalid_argument("hessian_matrix: N(k+d) = " + std::to_string(n * m) +
                                " exceeds the dense budget; subsample the ensemble first");
  if (!(eps > Scalar(0))) throw std::invalid_argument("hessian_matrix: step must be positive");

  const auto& x = prob.eval().samples;
  const Activation& act = prob.activation();
  const auto acts = particle_activations(mu.w(), x, act);
  const Mat<Scalar> hm = outputs_from_activations(mu, acts.s);
  const Scalar inv_n = Scalar(1) / Scalar(n);

  auto driving_of = [&](const Mat<Scalar>& h) {
    const auto cp = cov_pack(h, prob);
    return Mat<Scalar>(residuals(h, cp, prob) * cp.b);
  };

  HessianOperator<Scalar> op;
  op.n = n;
  op.k = k;
  op.d = d;
  op.base_hash = mu.hash();
  op.fd_step = eps;
  op.matrix.resize(n * m, n * m);

  Vec<Scalar> z(x.rows()), s_plus(x.rows()), s_minus(x.rows());
  for (Eigen::Index j = 0; j < n; ++j) {
    const Vec<Scalar> a_j = mu.a().row(j).transpose();
    const Vec<Scalar> w_j = mu.w().row(j).transpose();
    const Vec<Scalar> s_j = acts.s.col(j).matrix();
    const Mat<Scalar> base_j = s_j * a_j.transpose();
    for (Eigen::Index c = 0; c < m; ++c) {
      Mat<Scalar> contrib_plus, contrib_minus;
      if (c < k) {
        Vec<Scalar> ap = a_j, am = a_j;
        ap(c) += eps;
        am(c) -= eps;
        contrib_plus = s_j * ap.transpose();
        contrib_minus = s_j * am.transpose();
      } else {
        const Eigen::Index i = c - k;
        Vec<Scalar> wp = w_j, wm = w_j;
        wp(i) += eps;
        wm(i) -= eps;
        z = x * wp;
        s_plus = z.unaryExpr([&](Scalar t) { return act.value(t); });
        z = x * wm;
        s_minus = z.unaryExpr([&](Scalar t) { return act.value(t); });
        contrib_plus = s_plus * a_j.transpose();
        contrib_minus = s_minus * a_j.transpose();
      }
      const Mat<Scalar> g_plus = driving_of(hm + inv_n * (contrib_plus - base_j));
      const Mat<Scalar> g_minus = driving_of(hm + inv_n * (contrib_minus - base_j));
      const Mat<Scalar> dg = (g_plus - g_minus) / (Scalar(2) * eps);
      const Mat<Scalar> col = FirstVariation<Scalar>::apply(dg, mu.a(), acts, x).stacked();
      op.matrix.col(j * m + c) = flatten_field(col);
    }
  }
  return op;
}

template <typename Scalar>
struct SpectralReport {
  Vec<Scalar> eigenvalues;  // ascending
  Scalar lambda_0 = 0;
  Mat<Scalar> psi_0;        // N x (k + d), (1/N) sum |psi_0|^2 = 1
  Mat<Scalar> eigenvectors; // Euclidean-orthonormal columns of the symmetrized matrix
  Scalar alpha = 0;
  Scalar asymmetry = 0;
  Eigen::Index n = 0;
  Eigen::Index m = 0;

  /// Eigenfield i as an N x (k + d) array normalized in L2 of the empirical
  /// measure.
  Mat<Scalar> eigenfield(Eigen::Index i) const {
    return std::sqrt(Scalar(n)) * unflatten_field<Scalar>(eigenvectors.col(i), n, m);
  }
};

/// Spectrum of the symmetrized operator. `gradient` is the first-variation
/// gradient field at the particles, used for the alignment alpha.
template <typename Scalar>
SpectralReport<Scalar> eigen(const HessianOperator<Scalar>& op, const Mat<Scalar>& gradient) {
  const Eigen::Index n = op.n, m = op.m();
  if (gradient.rows() != n || gradient.cols() != m) throw std::invalid_argument("eigen: gradient field shape mismatch");
  const Mat<Scalar> sym = (op.matrix + op.matrix.transpose()) / Scalar(2);
  Eigen::SelfAdjointEigenSolver<Mat<Scalar>> es(sym);
  if (es.info() != Eigen::Success) throw NumericalError("Hessian eigendecomposition failed");

  SpectralReport<Scalar> rep;
  rep.n = n;
  rep.m = m;
  rep.eigenvalues = es.eigenvalues();
  rep.eigenvectors = es.eigenvectors();
  rep.lambda_0 = rep.eigenvalues(0);
  rep.asymmetry = op.asymmetry();
  rep.psi_0 = rep.eigenfield(0);
  rep.alpha = std::abs((rep.psi_0.array() * gradient.array()).sum() / Scalar(n));
  return rep;
}

template <typename Scalar>
SpectralReport<Scalar> spectrum(const Ensemble<Scalar>& mu, const Problem<Scalar>& prob,
                                Scalar eps = Scalar(kDefaultHessianStep)) {
  const auto op = hessian_matrix(mu, prob, eps);
  const auto grad = FirstVariation<Scalar>::reduced(mu, prob).field(mu).stacked();
  return eigen(op, grad);
}

/// Uniform random subset of n particles, reweighted uniformly.
template <typename Scalar>
Ensemble<Scalar> subsample(const Ensemble<Scalar>& mu, Eigen::Index n, Rng& rng) {
  if (n >= mu.size()) return Ensemble<Scalar>::uniform(mu.a(), mu.w());
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(mu.size()));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<std::size_t>(n));
  std::sort(idx.begin(), idx.end());
  Mat<Scalar> a(n, mu.k()), w(n, mu.d());
  for (Eigen::Index i = 0; i < n; ++i) {
    a.row(i) = mu.a().row(idx[static_cast<std::size_t>(i)]);
    w.row(i) = mu.w().row(idx[static_cast<std::size_t>(i)]);
  }
  return Ensemble<Scalar>::uniform(std::move(a), std::move(w));
}

template <typename Scalar>
struct EvoCheck {
  Scalar residual = 0;
  Scalar field_norm = 0;
  Scalar hessian_norm = 0;
  bool degenerate = false;
};

/// Compares the change of the gradient field over one Euler step of length
/// dt (at fixed locations) with minus the kernel operator applied to it.
template <typename Scalar>
EvoCheck<Scalar> evo_check(const Ensemble<Scalar>& mu, const Problem<Scalar>& prob, Scalar dt,
                           Scalar eps = Scalar(kDefaultHessianStep), Scalar degenerate_tol = Scalar(1e-12)) {
  require_uniform(mu, "evo_check");
  const auto& x = prob.eval().samples;
  const auto acts = particle_activations(mu.w(), x, prob.activation());
  const auto g0 = FirstVariation<Scalar>::reduced(mu, prob).field(mu.a(), acts);

  EvoCheck<Scalar> out;
  const Mat<Scalar> g0s = g0.stacked();
  out.field_norm = g0.l2_norm();
  if (out.field_norm <= degenerate_tol) {
    out.degenerate = true;
    return out;
  }
  const auto mu1 = descend(mu, g0, dt);
  const Mat<Scalar> g1s = FirstVariation<Scalar>::reduced(mu1, prob).field(mu.a(), acts).stacked();
  const Mat<Scalar> hg = apply_hessian(mu, prob, g0s, eps);
  out.hessian_norm = hg.norm();
  if (out.hessian_norm <= degenerate_tol) {
    out.degenerate = true;
    return out;
  }
  out.residual = ((g1s - g0s) / dt + hg).norm() / out.hessian_norm;
  return out;
}

/// Pieces of the first trace term t(theta, theta') = (a'^T S^-1 a)(u^T u'),
/// where u = E[sigma(w^T x) h_teacher(x)] and S is the model covariance.
template <typename Scalar>
struct TraceTermBlocks {
  Mat<Scalar> aa;  // k x k
  Mat<Scalar> aw;  // k x d
  Mat<Scalar> wa;  // d x k
  Mat<Scalar> ww;  // d x d

  Mat<Scalar> assembled() const {
    Mat<Scalar> out(aa.rows() + wa.rows(), aa.cols() + aw.cols());
    out << aa, aw, wa, ww;
    return out;
  }
};

namespace detail {

template <typename Scalar>
struct TeacherMoments {
  Vec<Scalar> u;  // E[sigma(w x) h_teacher]
  Mat<Scalar> v;  // E[sigma'(w x) h_teacher x^T], k_teacher x d
};

template <typename Scalar>
TeacherMoments<Scalar> teacher_moments(const Vec<Scalar>& w, const Problem<Scalar>& prob) {
  const auto& x = prob.eval().samples;
  const auto& act = prob.activation();
  const Scalar m = Scalar(x.rows());
  const Vec<Scalar> z = x * w;
  const Vec<Scalar> s = z.unaryExpr([&](Scalar t) { return act.value(t); });
  const Vec<Scalar> ds = z.unaryExpr([&](Scalar t) { return act.derivative(t); });
  const auto& ho = prob.teacher_features();
  return {ho.transpose() * s / m, ho.transpose() * ds.asDiagonal() * x / m};
}

}  // namespace detail

template <typename Scalar>
Scalar first_trace_term(const Particle<Scalar>& theta, const Particle<Scalar>& theta2, const Mat<Scalar>& sigma_inv,
                        const Problem<Scalar>& prob) {
  const auto t1 = detail::teacher_moments(theta.w, prob);
  const auto t2 = detail::teacher_moments(theta2.w, prob);
  return theta2.a.dot(sigma_inv * theta.a) * t1.u.dot(t2.u);
}

/// Analytic mixed second derivative of the first trace term, rows indexed
/// by theta = (a, w) and columns by theta' = (a', w').
template <typename Scalar>
TraceTermBlocks<Scalar> first_trace_term_blocks(const Particle<Scalar>& theta, const Particle<Scalar>& theta2,
                                                const Mat<Scalar>& sigma_inv, const Problem<Scalar>& prob) {
  const auto t1 = detail::teacher_moments(theta.w, prob);
  const auto t2 = detail::teacher_moments(theta2.w, prob);
  const Scalar uu = t1.u.dot(t2.u);
  const Scalar quad = theta2.a.dot(sigma_inv * theta.a);
  TraceTermBlocks<Scalar> b;
  b.aa = uu * sigma_inv;
  b.aw = (sigma_inv * theta2.a) * (t1.u.transpose() * t2.v);
  b.wa = (t1.v.transpose() * t2.u) * (sigma_inv * theta.a).transpose();
  b.ww = quad * t1.v.transpose() * t2.v;
  return b;
}

}  // namespace icfl

#endif  // ICFL_SPECTRAL_HPP
