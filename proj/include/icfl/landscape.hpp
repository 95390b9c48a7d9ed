#ifndef ICFL_LANDSCAPE_HPP
#define ICFL_LANDSCAPE_HPP

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "icfl/ensemble.hpp"
#include "icfl/objective.hpp"
#include "icfl/quadrature.hpp"

namespace icfl {

enum class Band { Below, Accelerating, Decelerating, Above };

inline std::string to_string(Band b) {
  switch (b) {
    case Band::Below: return "below_band";
    case Band::Accelerating: return "accel_band";
    case Band::Decelerating: return "decel_band";
    case Band::Above: return "above_band";
  }
  return "above_band";
}

namespace detail {

template <typename Scalar>
void require_square(const CovPack<Scalar>& cp, const Mat<Scalar>& r) {
  const auto k = cp.sigma_mm.rows();
  if (cp.sigma_oo.rows() != k) throw std::invalid_argument("landscape probes need matching teacher and model k");
  if (r.rows() != k || r.cols() != k) throw std::invalid_argument("rotation dimension mismatch");
}

}  // namespace detail

/// d/ds L((1 - s) mu + s R#teacher) at s = 0.
template <typename Scalar>
Scalar first_order_slope(const CovPack<Scalar>& cp, const Mat<Scalar>& r) {
  detail::require_square(cp, r);
  return Scalar(-2) * (r * cp.l_mat * cp.b).trace();
}

template <typename Scalar>
Scalar first_order_slope(const Ensemble<Scalar>& mu, const Problem<Scalar>& prob, const Rotation<Scalar>& r) {
  return first_order_slope(reduced_loss(mu, prob), r.matrix);
}

template <typename Scalar>
struct SteepestRotation {
  Rotation<Scalar> rotation;
  Scalar slope;
  Scalar nuclear_norm;  // |L B|_*
};

/// The rotation in the unit ball minimizing the first-order slope. For
/// L B = U S V^T the minimizer is V U^T and the slope is -2 |L B|_*.
template <typename Scalar>
SteepestRotation<Scalar> steepest_rotation(const CovPack<Scalar>& cp) {
  const auto k = cp.sigma_mm.rows();
  detail::require_square(cp, Mat<Scalar>(Mat<Scalar>::Identity(k, k)));
  const Mat<Scalar> lb = cp.l_mat * cp.b;
  Eigen::JacobiSVD<Mat<Scalar>> svd(lb, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Scalar nuc = svd.singularValues().sum();
  Mat<Scalar> r = svd.matrixV() * svd.matrixU().transpose();
  return {Rotation<Scalar>(std::move(r)), Scalar(-2) * nuc, nuc};
}

template <typename Scalar>
SteepestRotation<Scalar> steepest_rotation(const Ensemble<Scalar>& mu, const Problem<Scalar>& prob) {
  return steepest_rotation(reduced_loss(mu, prob));
}

/// For B = U D V^T, R = V U^T makes B R = U D U^T symmetric.
template <typename Scalar>
Rotation<Scalar> symmetrizing_rotation(const CovPack<Scalar>& cp) {
  const auto k = cp.sigma_mm.rows();
  detail::require_square(cp, Mat<Scalar>(Mat<Scalar>::Identity(k, k)));
  Eigen::JacobiSVD<Mat<Scalar>> svd(cp.b, Eigen::ComputeFullU | Eigen::ComputeFullV);
  return Rotation<Scalar>(svd.matrixV() * svd.matrixU().transpose());
}

template <typename Scalar>
Rotation<Scalar> symmetrizing_rotation(const Ensemble<Scalar>& mu, const Problem<Scalar>& prob) {
  return symmetrizing_rotation(reduced_loss(mu, prob));
}

/// d^2/ds^2 L((1 - s) mu + s R#teacher) at s = 0.
template <typename Scalar>
Scalar second_order_curvature(const CovPack<Scalar>& cp, const Mat<Scalar>& r) {
  detail::require_square(cp, r);
  const auto k = r.rows();
  const Mat<Scalar>& l = cp.l_mat;
  const Mat<Scalar> br = cp.b * r;
  const Mat<Scalar> inner = Scalar(2) * br + r.transpose() * cp.b.transpose() - Scalar(2) * Mat<Scalar>::Identity(k, k);
  return Scalar(-4) * (l * l * r.transpose() * cp.sigma_mm_inv * r).trace() + Scalar(2) * (l * inner * br).trace();
}

template <typename Scalar>
Scalar second_order_curvature(const Ensemble<Scalar>& mu, const Problem<Scalar>& prob, const Rotation<Scalar>& r) {
  return second_order_curvature(reduced_loss(mu, prob), r.matrix);
}

/// Reduced loss along the homotopy, evaluated through the actual mixture of
/// mu with the hull-mixture pushforward of the teacher.
template <typename Scalar>
std::vector<std::pair<Scalar, Scalar>> homotopy_scan(const Ensemble<Scalar>& mu, const Problem<Scalar>& prob,
                                                     const Rotation<Scalar>& r, const std::vector<Scalar>& s_grid) {
  const auto pushed = rotate_pushforward(prob.teacher(), r);
  std::vector<std::pair<Scalar, Scalar>> out;
  out.reserve(s_grid.size());
  for (Scalar s : s_grid) {
    if (!(s >= Scalar(0) && s <= Scalar(1))) throw std::invalid_argument("homotopy_scan: s must lie in [0,1]");
    out.emplace_back(s, reduced_loss(mix(mu, pushed, s), prob).loss);
  }
  return out;
}

/// Reduced loss of the signed measure (1 - s) mu + s R#teacher, using the
/// linearity of features in the measure. Unlike homotopy_scan this accepts
/// s outside [0,1], which central differences at s = 0 need.
template <typename Scalar>
Scalar homotopy_loss(const Mat<Scalar>& hm, const Mat<Scalar>& h_pushed, const Problem<Scalar>& prob, Scalar s) {
  const Mat<Scalar> hs = (Scalar(1) - s) * hm + s * h_pushed;
  return cov_pack(hs, prob).loss;
}

template <typename Scalar>
struct BandReport {
  Band band = Band::Above;
  Scalar loss = 0;
  Scalar r_lo = 0;
  Scalar lower = 0;   // (r - sqrt(r^2 - 4 c delta)) / 4
  Scalar upper = 0;   // (r + sqrt(r^2 - 4 c delta)) / 4
  Scalar half_r = 0;  // r / 2
  Scalar c = 0;       // bound on |Sigma_om| used in place of R1^2
  bool vacuous = false;
  bool guarantee_applies = false;
};

/// Places the loss relative to the accelerated-convergence interval. The
/// constant multiplying delta is max(R1^2, |Sigma_om|), which keeps the
/// guarantee valid for teachers whose outputs exceed R1.
template <typename Scalar>
BandReport<Scalar> band_check(const CovPack<Scalar>& cp, Scalar delta, Scalar r1 = Scalar(1)) {
  if (delta < Scalar(0)) throw std::invalid_argument("band_check: delta must be non-negative");
  BandReport<Scalar> rep;
  rep.loss = cp.loss;
  rep.r_lo = cp.r_lo;
  rep.half_r = cp.r_lo / Scalar(2);
  Eigen::JacobiSVD<Mat<Scalar>> svd(cp.sigma_om);
  rep.c = std::max(r1 * r1, svd.singularValues()(0));
  const Scalar disc = cp.r_lo * cp.r_lo - Scalar(4) * rep.c * delta;
  rep.vacuous = disc < Scalar(0);
  const Scalar root = rep.vacuous ? Scalar(0) : std::sqrt(disc);
  rep.lower = (cp.r_lo - root) / Scalar(4);
  rep.upper = (cp.r_lo + root) / Scalar(4);
  const Scalar quarter = cp.r_lo / Scalar(4);
  const Scalar zero_tol = Scalar(1e-12) * std::max(cp.r_lo, Scalar(1e-300));
  if (cp.loss <= zero_tol || cp.loss < rep.lower)
    rep.band = Band::Below;
  else if (cp.loss <= quarter)
    rep.band = Band::Accelerating;
  else if (cp.loss <= rep.half_r)
    rep.band = Band::Decelerating;
  else
    rep.band = Band::Above;
  rep.guarantee_applies = !rep.vacuous && cp.loss >= rep.lower && cp.loss <= rep.upper && cp.loss > zero_tol;
  return rep;
}

template <typename Scalar>
struct ProbeReport {
  Scalar loss = 0;
  Scalar slope = 0;
  Scalar curvature = 0;
  Mat<Scalar> steepest;      // rotation achieving `slope`
  Mat<Scalar> symmetrizing;  // rotation used for `curvature`
  Scalar nuclear_norm_lb = 0;
  BandReport<Scalar> band;
};

/// Full probe at one ensemble: steepest slope, curvature along the
/// symmetrizing rotation, and band placement.
template <typename Scalar>
ProbeReport<Scalar> probe(const Ensemble<Scalar>& mu, const Problem<Scalar>& prob, Scalar delta) {
  const auto cp = reduced_loss(mu, prob);
  ProbeReport<Scalar> rep;
  rep.loss = cp.loss;
  const auto steep = steepest_rotation(cp);
  rep.slope = steep.slope;
  rep.nuclear_norm_lb = steep.nuclear_norm;
  rep.steepest = steep.rotation.matrix;
  const auto sym = symmetrizing_rotation(cp);
  rep.symmetrizing = sym.matrix;
  rep.curvature = second_order_curvature(cp, sym.matrix);
  rep.band = band_check(cp, delta, Scalar(prob.activation().bounds().r1));
  return rep;
}

}  // namespace icfl

#endif  // ICFL_LANDSCAPE_HPP
