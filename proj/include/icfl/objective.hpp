#ifndef ICFL_OBJECTIVE_HPP
#define ICFL_OBJECTIVE_HPP

#include <cmath>
#include <random>
#include <stdexcept>
#include <utility>

#include <Eigen/Dense>

#include "icfl/activation.hpp"
#include "icfl/ensemble.hpp"
#include "icfl/quadrature.hpp"

namespace icfl {

inline constexpr double kDefaultRidgeEps = 1e-8;

/// Teacher measure, evaluation set and activation: everything the objective
/// needs besides the model ensemble. Teacher outputs are computed once.
template <typename Scalar>
class Problem {
 public:
  Problem(Ensemble<Scalar> teacher, EvalSet<Scalar> eval, Activation act = {},
          Scalar ridge_eps = Scalar(kDefaultRidgeEps))
      : teacher_(std::move(teacher)), eval_(std::move(eval)), act_(act), ridge_eps_(ridge_eps) {
    if (teacher_.d() != eval_.dim()) throw std::invalid_argument("teacher and eval set dimensions differ");
    teacher_features_ = network_outputs(teacher_, eval_.samples, act_);
    sigma_oo_ = cov<Scalar>(teacher_features_, teacher_features_);
  }

  const Ensemble<Scalar>& teacher() const { return teacher_; }
  const EvalSet<Scalar>& eval() const { return eval_; }
  const Activation& activation() const { return act_; }
  Scalar ridge_eps() const { return ridge_eps_; }
  /// M x k_teacher matrix of h_teacher(x_m).
  const Mat<Scalar>& teacher_features() const { return teacher_features_; }
  const Mat<Scalar>& sigma_oo() const { return sigma_oo_; }
  Eigen::Index teacher_k() const { return teacher_.k(); }
  Eigen::Index samples() const { return eval_.size(); }

  Problem with_ridge(Scalar eps) const {
    Problem p = *this;
    p.ridge_eps_ = eps;
    return p;
  }

 private:
  Ensemble<Scalar> teacher_;
  EvalSet<Scalar> eval_;
  Activation act_;
  Scalar ridge_eps_;
  Mat<Scalar> teacher_features_;
  Mat<Scalar> sigma_oo_;
};

using Problemd = Problem<double>;

template <typename Scalar>
struct RegularizedInverse {
  Mat<Scalar> inverse;
  bool floor_active = false;
};

/// Inverse of a symmetric PSD matrix whose eigenvalues are floored at
/// eps * trace / k. Well-conditioned inputs are inverted exactly.
template <typename Scalar>
RegularizedInverse<Scalar> regularized_inverse(const Mat<Scalar>& sigma, Scalar eps) {
  const Eigen::Index k = sigma.rows();
  const Scalar tr = sigma.trace();
  if (!std::isfinite(tr) || !(tr > Scalar(0)))
    throw NumericalError("feature covariance is singular (all model outputs vanish on the eval set)");
  Eigen::SelfAdjointEigenSolver<Mat<Scalar>> es(sigma);
  if (es.info() != Eigen::Success) throw NumericalError("feature covariance eigendecomposition failed");
  const Scalar floor = eps * tr / Scalar(k);
  Vec<Scalar> ev = es.eigenvalues();
  RegularizedInverse<Scalar> out;
  for (Eigen::Index i = 0; i < k; ++i) {
    if (ev(i) < floor) {
      ev(i) = floor;
      out.floor_active = true;
    }
    if (!(ev(i) > Scalar(0)))
      throw NumericalError("feature covariance is numerically singular even after regularization");
  }
  out.inverse = es.eigenvectors() * ev.cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
  return out;
}

/// Covariance bundle of a model ensemble against the teacher.
template <typename Scalar>
struct CovPack {
  Mat<Scalar> sigma_mm;      // k x k
  Mat<Scalar> sigma_om;      // k_teacher x k
  Mat<Scalar> sigma_oo;      // k_teacher x k_teacher
  Mat<Scalar> sigma_mm_inv;  // regularized
  Mat<Scalar> w_opt;         // closed-form attention matrix
  Mat<Scalar> b;             // sigma_om * sigma_mm_inv
  Mat<Scalar> l_mat;         // residual matrix; trace equals loss
  Scalar loss = 0;
  Scalar r_lo = 0;
  Scalar r_hi = 0;
  bool floor_active = false;
};

using CovPackd = CovPack<double>;

template <typename Scalar>
CovPack<Scalar> cov_pack(const Mat<Scalar>& hm, const Problem<Scalar>& prob) {
  CovPack<Scalar> cp;
  const auto& ho = prob.teacher_features();
  cp.sigma_mm = cov<Scalar>(hm, hm);
  cp.sigma_om = cov<Scalar>(ho, hm);
  cp.sigma_oo = prob.sigma_oo();
  auto inv = regularized_inverse<Scalar>(cp.sigma_mm, prob.ridge_eps());
  cp.sigma_mm_inv = std::move(inv.inverse);
  cp.floor_active = inv.floor_active;
  cp.w_opt = cp.sigma_mm_inv;
  cp.b = cp.sigma_om * cp.sigma_mm_inv;
  cp.l_mat = Scalar(0.5) * (cp.sigma_oo - cp.b * cp.sigma_om.transpose());
  cp.l_mat = Scalar(0.5) * (cp.l_mat + cp.l_mat.transpose()).eval();
  cp.loss = cp.l_mat.trace();
  Eigen::SelfAdjointEigenSolver<Mat<Scalar>> es(cp.sigma_oo, Eigen::EigenvaluesOnly);
  cp.r_lo = es.eigenvalues()(0);
  cp.r_hi = es.eigenvalues()(es.eigenvalues().size() - 1);
  return cp;
}

/// Closed-form objective with the attention layer at its optimum.
template <typename Scalar>
CovPack<Scalar> reduced_loss(const Ensemble<Scalar>& mu, const Problem<Scalar>& prob) {
  return cov_pack(network_outputs(mu, prob.eval().samples, prob.activation()), prob);
}

struct AttentionMatrix {
  MatrixXd w;
};

template <typename Scalar>
Mat<Scalar> attention_optimum(const Ensemble<Scalar>& mu, const Problem<Scalar>& prob) {
  return reduced_loss(mu, prob).w_opt;
}

/// Residuals zeta(x_m) = h_teacher(x_m) - B h_mu(x_m), one row per sample.
template <typename Scalar>
Mat<Scalar> residuals(const Mat<Scalar>& hm, const CovPack<Scalar>& cp, const Problem<Scalar>& prob) {
  return prob.teacher_features() - hm * cp.b.transpose();
}

/// Transformer risk evaluated sample by sample on the evaluation set.
template <typename Scalar>
Scalar loss_tf(const Mat<Scalar>& hm, const Mat<Scalar>& w, const Problem<Scalar>& prob) {
  const auto& ho = prob.teacher_features();
  if (w.rows() != hm.cols() || w.cols() != hm.cols()) throw std::invalid_argument("loss_tf: W dimension mismatch");
  const Mat<Scalar> c = cov<Scalar>(ho, hm);
  const Mat<Scalar> r = ho - hm * (c * w).transpose();
  return Scalar(0.5) * r.squaredNorm() / Scalar(hm.rows());
}

template <typename Scalar>
Scalar loss_tf(const Ensemble<Scalar>& mu, const Mat<Scalar>& w, const Problem<Scalar>& prob) {
  return loss_tf(network_outputs(mu, prob.eval().samples, prob.activation()), w, prob);
}

/// Same risk expanded into covariance traces.
template <typename Scalar>
Scalar loss_tf_trace(const Mat<Scalar>& hm, const Mat<Scalar>& w, const Problem<Scalar>& prob) {
  if (w.rows() != hm.cols() || w.cols() != hm.cols()) throw std::invalid_argument("loss_tf: W dimension mismatch");
  const Mat<Scalar> c = cov<Scalar>(prob.teacher_features(), hm);
  const Mat<Scalar> smm = cov<Scalar>(hm, hm);
  const Mat<Scalar> cw = c * w;
  return Scalar(0.5) * prob.sigma_oo().trace() - (cw * c.transpose()).trace() +
         Scalar(0.5) * (cw * smm * cw.transpose()).trace();
}

/// Monte-Carlo estimate of the risk with n in-context examples per prompt and
/// tasks v ~ N(0, I). Uses fresh inputs, independent of the evaluation set.
template <typename Scalar>
Scalar finite_prompt_loss(const Ensemble<Scalar>& mu, const Mat<Scalar>& w, const Ensemble<Scalar>& teacher,
                          Eigen::Index n, Eigen::Index prompts, Rng& rng, const Activation& act = {},
                          InputDistribution dist = InputDistribution::Gaussian) {
  if (n < 1 || prompts < 1) throw std::invalid_argument("finite_prompt_loss: need n >= 1 and prompts >= 1");
  std::normal_distribution<double> normal(0.0, 1.0);
  Scalar total(0);
  for (Eigen::Index p = 0; p < prompts; ++p) {
    Vec<Scalar> v(teacher.k());
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = Scalar(normal(rng));
    const Mat<Scalar> x = draw_inputs<Scalar>(rng, n + 1, mu.d(), dist);
    const Mat<Scalar> ho = network_outputs(teacher, x, act);
    const Mat<Scalar> hm = network_outputs(mu, x, act);
    const Vec<Scalar> y = ho * v;
    const Vec<Scalar> ctx = hm.topRows(n).transpose() * y.head(n) / Scalar(n);
    const Scalar pred = ctx.dot(w * hm.row(n).transpose());
    const Scalar err = y(n) - pred;
    total += Scalar(0.5) * err * err;
  }
  return total / Scalar(prompts);
}

template <typename Scalar>
struct TestError {
  Scalar error;
  Scalar projection_floor;
};

/// In-context error on an arbitrary scalar task g given by its values on the
/// evaluation set, plus the best error achievable by any linear readout of
/// the teacher features.
template <typename Scalar>
TestError<Scalar> test_error(const Mat<Scalar>& hm, const Mat<Scalar>& w, const Vec<Scalar>& g,
                             const Problem<Scalar>& prob) {
  if (g.size() != hm.rows()) throw std::invalid_argument("test_error: task values do not match eval set");
  const Scalar m = Scalar(hm.rows());
  const Vec<Scalar> gbar = hm.transpose() * g / m;
  const Vec<Scalar> pred = hm * (w.transpose() * gbar);
  const Scalar err = (g - pred).squaredNorm() / m;
  const auto& ho = prob.teacher_features();
  const Vec<Scalar> coef = ho.colPivHouseholderQr().solve(g);
  const Scalar floor = (g - ho * coef).squaredNorm() / m;
  return {err, floor};
}

template <typename Scalar>
TestError<Scalar> test_error(const Ensemble<Scalar>& mu, const Mat<Scalar>& w, const Vec<Scalar>& g,
                             const Problem<Scalar>& prob) {
  return test_error(network_outputs(mu, prob.eval().samples, prob.activation()), w, g, prob);
}

/// g(x) = |h_teacher(x)| on the evaluation set.
template <typename Scalar>
Vec<Scalar> norm_task(const Problem<Scalar>& prob) {
  return prob.teacher_features().rowwise().norm();
}

}  // namespace icfl

#endif  // ICFL_OBJECTIVE_HPP
