#pragma once

#include <cmath>
#include <random>

#include "icfl/objective.hpp"
#include "icfl/scenario.hpp"

namespace testing {

using namespace icfl;

inline MatrixXd gaussian(Rng& rng, Eigen::Index r, Eigen::Index c, double std = 1.0) {
  std::normal_distribution<double> n(0.0, std);
  MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = n(rng);
  return m;
}

inline Ensembled random_ensemble(Rng& rng, Eigen::Index n, Eigen::Index k, Eigen::Index d, double a_std = 1.0,
                                 double w_std = -1.0) {
  if (w_std < 0) w_std = 1.0 / std::sqrt(double(d));
  return Ensembled::uniform(gaussian(rng, n, k, a_std), gaussian(rng, n, d, w_std));
}

inline Ensembled random_weighted(Rng& rng, Eigen::Index n, Eigen::Index k, Eigen::Index d) {
  std::uniform_real_distribution<double> u(0.1, 1.0);
  VectorXd wts(n);
  for (Eigen::Index i = 0; i < n; ++i) wts(i) = u(rng);
  wts /= wts.sum();
  return Ensembled(gaussian(rng, n, k), gaussian(rng, n, d, 1.0 / std::sqrt(double(d))), wts);
}

/// A spectral-norm <= 1 matrix: random Gaussian scaled to norm `radius`.
inline MatrixXd random_contraction(Rng& rng, Eigen::Index k, double radius = 0.9) {
  MatrixXd r = gaussian(rng, k, k);
  Eigen::JacobiSVD<MatrixXd> svd(r);
  return r * (radius / svd.singularValues()(0));
}

inline MatrixXd random_orthogonal(Rng& rng, Eigen::Index k) {
  Eigen::HouseholderQR<MatrixXd> qr(gaussian(rng, k, k));
  return qr.householderQ() * MatrixXd::Identity(k, k);
}

/// Small default problem: whitened teacher with scale 1/k on a Gaussian
/// evaluation set.
inline Problemd small_problem(Eigen::Index k = 5, Eigen::Index d = 20, Eigen::Index m = 1024,
                              Eigen::Index teacher_n = 100, std::uint64_t seed = 1, Eigen::Index rank = 0) {
  auto eval = draw_eval_set<double>(seed, m, d);
  TeacherSpec spec;
  spec.k = k;
  spec.n = teacher_n;
  spec.rank = rank;
  spec.seed = seed + 100;
  auto teacher = build_teacher(spec, d, eval, Activation{});
  return Problemd(std::move(teacher), std::move(eval));
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

}  // namespace testing
