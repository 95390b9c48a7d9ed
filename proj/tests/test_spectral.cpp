#include <Eigen/Eigenvalues>

#include "doctest.h"
#include "helpers.hpp"
#include "icfl/spectral.hpp"

using namespace icfl;
using namespace testing;

namespace {

// Second derivative of the isolated first trace term by central differences
// in both particles.
MatrixXd fd_trace_blocks(const Particled& p, const Particled& q, const MatrixXd& s_inv, const Problemd& prob,
                         double h) {
  const Eigen::Index k = p.a.size(), d = p.w.size(), m = k + d;
  auto shift = [&](Particled x, Eigen::Index c, double delta) {
    (c < k ? x.a(c) : x.w(c - k)) += delta;
    return x;
  };
  MatrixXd out(m, m);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j) {
      const double pp = first_trace_term(shift(p, i, h), shift(q, j, h), s_inv, prob);
      const double pm = first_trace_term(shift(p, i, h), shift(q, j, -h), s_inv, prob);
      const double mp = first_trace_term(shift(p, i, -h), shift(q, j, h), s_inv, prob);
      const double mm = first_trace_term(shift(p, i, -h), shift(q, j, -h), s_inv, prob);
      out(i, j) = (pp - pm - mp + mm) / (4 * h * h);
    }
  return out;
}

}  // namespace

TEST_SUITE("spectral") {

TEST_CASE("operator application") {
  Rng rng(1);
  const auto prob = small_problem(3, 6, 512, 30);
  const auto mu = random_ensemble(rng, 12, 3, 6, 1.0, 0.5);
  const MatrixXd zero = MatrixXd::Zero(12, 9);
  CHECK(apply_hessian(mu, prob, zero).isZero(0));
  CHECK_THROWS_AS(apply_hessian(mu, prob, MatrixXd(MatrixXd::Zero(12, 8))), std::invalid_argument);

  // Central differences are second order: halving the step shrinks the
  // error by about four.
  const MatrixXd v = gaussian(rng, 12, 9);
  const MatrixXd h1 = apply_hessian(mu, prob, v, 1e-3);
  const MatrixXd h2 = apply_hessian(mu, prob, v, 5e-4);
  const MatrixXd h4 = apply_hessian(mu, prob, v, 2.5e-4);
  CHECK((h2 - h4).norm() <= 0.4 * (h1 - h2).norm());

  // Matrix columns reproduce the operator on unit displacements.
  const auto op = hessian_matrix(mu, prob);
  const MatrixXd applied = apply_hessian(mu, prob, v);
  const MatrixXd viamatrix = unflatten_field<double>(op.matrix * flatten_field(v), 12, 9);
  CHECK((applied - viamatrix).norm() <= 1e-6 * applied.norm());
}

TEST_CASE("rotation direction at the teacher") {
  Rng rng(2);
  const auto prob = small_problem(3, 6, 512, 24);
  const auto& mu = prob.teacher();
  MatrixXd s = gaussian(rng, 3, 3);
  s = (s - s.transpose()).eval();
  MatrixXd v = MatrixXd::Zero(mu.size(), 9);
  v.leftCols(3) = mu.a() * s.transpose();
  const MatrixXd hv = apply_hessian(mu, prob, v);
  // Rotations keep the loss at zero, so the quadratic form vanishes.
  const double quad = (hv.array() * v.array()).sum();
  const MatrixXd u = gaussian(rng, mu.size(), 9);
  const double generic = (apply_hessian(mu, prob, u).array() * u.array()).sum();
  CHECK(std::abs(quad) <= 1e-6 * std::abs(generic));
}

TEST_CASE("matrix symmetry and spectrum") {
  Rng rng(3);
  const auto prob = small_problem(3, 6, 512, 30);
  const auto mu = random_ensemble(rng, 15, 3, 6, 1.0, 0.5);
  const auto op = hessian_matrix(mu, prob);
  CHECK(op.asymmetry() <= 1e-6);
  CHECK((op.block(2, 5) - op.block(5, 2).transpose()).norm() <= 1e-5 * op.block(2, 5).norm() + 1e-12);

  const auto grad = FirstVariation<double>::reduced(mu, prob).field(mu).stacked();
  const auto rep = eigen(op, grad);
  CHECK(rep.eigenvalues.size() == 135);
  CHECK(rep.lambda_0 == rep.eigenvalues.minCoeff());
  CHECK(rep.psi_0.squaredNorm() / 15.0 == doctest::Approx(1.0).epsilon(1e-10));

  // Independent solver on the symmetrized matrix.
  const MatrixXd sym = (op.matrix + op.matrix.transpose()) / 2.0;
  Eigen::EigenSolver<MatrixXd> general(sym);
  std::vector<double> ev(general.eigenvalues().size());
  for (Eigen::Index i = 0; i < general.eigenvalues().size(); ++i) ev[std::size_t(i)] = general.eigenvalues()(i).real();
  std::sort(ev.begin(), ev.end());
  double worst = 0;
  for (std::size_t i = 0; i < ev.size(); ++i) worst = std::max(worst, std::abs(ev[i] - rep.eigenvalues(Eigen::Index(i))));
  CHECK(worst <= 1e-8 * std::max(1.0, rep.eigenvalues.cwiseAbs().maxCoeff()));

  // Eigenfields are orthonormal in L2 of the empirical measure.
  MatrixXd gram(4, 4);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) gram(i, j) = (rep.eigenfield(i).array() * rep.eigenfield(j).array()).sum() / 15.0;
  CHECK((gram - MatrixXd::Identity(4, 4)).norm() <= 1e-8);

  CHECK_THROWS_AS(eigen(op, MatrixXd(MatrixXd::Zero(3, 3))), std::invalid_argument);
  CHECK_THROWS_AS(hessian_matrix(random_ensemble(rng, 800, 3, 25), small_problem(3, 25, 512, 30)),
                  std::invalid_argument);
}

TEST_CASE("global minimum has no descent direction") {
  const auto prob = small_problem(3, 6, 512, 30);
  const auto rep = spectrum(prob.teacher(), prob);
  CHECK(rep.lambda_0 >= -1e-4);
}

TEST_CASE("degenerate saddle has a negative direction") {
  const auto prob = small_problem(3, 6, 512, 30);
  MatrixXd p = MatrixXd::Identity(3, 3);
  p(2, 2) = 0.0;
  // diag(1, 1, 0) splits into two reflections with equal weight, so the
  // pushforward is uniform. A few faint extra particles keep the model
  // covariance invertible.
  const auto pushed = rotate_pushforward(prob.teacher(), Rotationd(p));
  REQUIRE(pushed.is_uniform(1e-12));
  Rng rng(4);
  const Eigen::Index extra = 6, n = pushed.size() + extra;
  MatrixXd a(n, 3), w(n, 6);
  a << pushed.a(), gaussian(rng, extra, 3, 0.05);
  w << pushed.w(), gaussian(rng, extra, 6, 0.5);
  const auto saddle = Ensembled::uniform(a, w);
  const auto cp = reduced_loss(saddle, prob);
  CHECK(cp.loss >= 0.5 * cp.r_lo - 1e-2);
  CHECK(spectrum(saddle, prob).lambda_0 < 0.0);
}

TEST_CASE("eigenvalues are stable under step halving") {
  Rng rng(5);
  const auto prob = small_problem(3, 6, 512, 30);
  const auto mu = random_ensemble(rng, 10, 3, 6, 1.0, 0.5);
  const auto a = spectrum(mu, prob, 1e-4);
  const auto b = spectrum(mu, prob, 5e-5);
  const double scale = a.eigenvalues.cwiseAbs().maxCoeff();
  CHECK((a.eigenvalues - b.eigenvalues).cwiseAbs().maxCoeff() <= 1e-3 * scale);
}

TEST_CASE("subsample") {
  Rng rng(6);
  const auto mu = random_ensemble(rng, 50, 2, 3);
  const auto sub = subsample(mu, 20, rng);
  CHECK(sub.size() == 20);
  CHECK(sub.is_uniform());
  for (Eigen::Index i = 0; i < sub.size(); ++i) {
    bool found = false;
    for (Eigen::Index j = 0; j < mu.size() && !found; ++j) found = sub.a().row(i) == mu.a().row(j);
    CHECK(found);
  }
  CHECK(subsample(mu, 80, rng).size() == 50);
}

TEST_CASE("evolution equation") {
  Rng rng(7);
  const auto prob = small_problem(5, 20, 1024, 100, 7);
  const auto mu = random_ensemble(rng, 64, 5, 20, 1.0, 0.5);
  const auto r1 = evo_check(mu, prob, 1e-4);
  const auto r2 = evo_check(mu, prob, 5e-5);
  CHECK_FALSE(r1.degenerate);
  CHECK(r1.residual <= 0.05);
  CHECK(r2.residual <= 0.7 * r1.residual);

  CHECK(evo_check(prob.teacher(), prob, 1e-4, 1e-4, 1e-8).degenerate);
}

TEST_CASE("first trace term blocks") {
  Rng rng(8);
  const auto prob = small_problem(3, 6, 512, 30);
  const MatrixXd s = gaussian(rng, 3, 3);
  const MatrixXd s_inv = (s * s.transpose() + MatrixXd::Identity(3, 3)).inverse();
  for (int t = 0; t < 3; ++t) {
    const Particled p{gaussian(rng, 3, 1), gaussian(rng, 6, 1, 0.5)};
    const Particled q{gaussian(rng, 3, 1), gaussian(rng, 6, 1, 0.5)};
    const MatrixXd analytic = first_trace_term_blocks(p, q, s_inv, prob).assembled();
    const MatrixXd fd = fd_trace_blocks(p, q, s_inv, prob, 1e-4);
    CHECK((analytic - fd).norm() <= 1e-3 * analytic.norm());
  }
}

}
