#include "doctest.h"
#include "helpers.hpp"

using namespace icfl;
using namespace testing;

namespace {

Ensembled model_like(Rng& rng, const Problemd& prob, Eigen::Index n = 40) {
  return random_ensemble(rng, n, prob.teacher_k(), prob.eval().dim(), 1.0, 0.5);
}

}  // namespace

TEST_SUITE("objective") {

TEST_CASE("regularized inverse") {
  MatrixXd s = MatrixXd::Identity(3, 3);
  s(2, 2) = 1e-14;
  const auto inv = regularized_inverse<double>(s, 1e-8);
  CHECK(inv.floor_active);
  CHECK(inv.inverse(2, 2) == doctest::Approx(1.0 / (1e-8 * (2.0 + 1e-14) / 3.0)));
  const auto plain = regularized_inverse<double>(MatrixXd::Identity(3, 3) * 2.0, 1e-8);
  CHECK_FALSE(plain.floor_active);
  CHECK((plain.inverse - 0.5 * MatrixXd::Identity(3, 3)).norm() <= 1e-15);
  CHECK_THROWS_AS(regularized_inverse<double>(MatrixXd::Zero(3, 3), 1e-8), NumericalError);
}

TEST_CASE("covariance bundle invariants") {
  Rng rng(1);
  const auto prob = small_problem();
  for (int t = 0; t < 10; ++t) {
    const auto cp = reduced_loss(model_like(rng, prob), prob);
    CHECK(cp.l_mat.trace() == doctest::Approx(cp.loss).epsilon(1e-12));
    CHECK(Eigen::SelfAdjointEigenSolver<MatrixXd>(cp.l_mat).eigenvalues()(0) >= -1e-10);
    CHECK(cp.loss >= 0.0);
    CHECK(cp.loss <= 0.5 * cp.sigma_oo.trace());
  }
}

TEST_CASE("transformer risk") {
  Rng rng(2);
  const auto prob = small_problem();
  const auto& ho = prob.teacher_features();
  SUBCASE("zero readout") {
    const MatrixXd hm = network_outputs(model_like(rng, prob), prob.eval().samples, prob.activation());
    CHECK(loss_tf(hm, MatrixXd(MatrixXd::Zero(5, 5)), prob) == doctest::Approx(0.5 * prob.sigma_oo().trace()));
  }
  SUBCASE("teacher with inverse covariance") {
    const MatrixXd w = prob.sigma_oo().inverse();
    CHECK(std::abs(loss_tf(ho, w, prob)) <= 1e-12);
  }
  SUBCASE("quadrature and trace forms agree") {
    for (int t = 0; t < 10; ++t) {
      const MatrixXd hm = network_outputs(model_like(rng, prob), prob.eval().samples, prob.activation());
      const MatrixXd w = gaussian(rng, 5, 5, 10.0);
      CHECK(std::abs(loss_tf(hm, w, prob) - loss_tf_trace(hm, w, prob)) <= 1e-10);
    }
  }
  SUBCASE("dimension mismatch") {
    CHECK_THROWS_AS(loss_tf(ho, MatrixXd(MatrixXd::Zero(4, 4)), prob), std::invalid_argument);
  }
}

TEST_CASE("attention optimum") {
  Rng rng(3);
  const auto prob = small_problem();
  const MatrixXd self = attention_optimum(prob.teacher(), prob);
  CHECK((self - prob.sigma_oo().inverse()).norm() <= 1e-8 * self.norm());

  for (int t = 0; t < 3; ++t) {
    const auto mu = model_like(rng, prob);
    const MatrixXd hm = network_outputs(mu, prob.eval().samples, prob.activation());
    const auto cp = cov_pack(hm, prob);
    const double best = loss_tf(hm, cp.w_opt, prob);
    CHECK(best == doctest::Approx(cp.loss).epsilon(1e-8));
    for (int j = 0; j < 20; ++j) {
      const MatrixXd delta = gaussian(rng, 5, 5, 1e-2 * cp.w_opt.norm());
      CHECK(loss_tf(hm, MatrixXd(cp.w_opt + delta), prob) >= best - 1e-12);
    }
    // The closed form beats sampled attention matrices.
    for (int j = 0; j < 200; ++j) {
      const MatrixXd w = gaussian(rng, 5, 5, cp.w_opt.norm() / 5.0);
      CHECK(loss_tf(hm, w, prob) >= cp.loss - 1e-8);
    }
  }
}

TEST_CASE("global minima of the reduced objective") {
  Rng rng(4);
  const auto prob = small_problem();
  CHECK(std::abs(reduced_loss(prob.teacher(), prob).loss) <= 1e-10);
  for (int t = 0; t < 5; ++t) {
    const MatrixXd r = random_contraction(rng, 5, 0.5 + 0.1 * t);
    const auto pushed = rotate_pushforward(prob.teacher(), Rotationd(r));
    CHECK(std::abs(reduced_loss(pushed, prob).loss) <= 1e-9);
  }
}

TEST_CASE("rotation invariance") {
  Rng rng(5);
  const auto prob = small_problem();
  for (int t = 0; t < 5; ++t) {
    const auto mu = model_like(rng, prob);
    const auto rotated = rotate_pushforward(mu, Rotationd(random_orthogonal(rng, 5)));
    CHECK(std::abs(reduced_loss(rotated, prob).loss - reduced_loss(mu, prob).loss) <= 1e-9);
  }
}

TEST_CASE("missing directions cost at least half the smallest teacher eigenvalue") {
  Rng rng(6);
  const auto prob = small_problem();
  // All a in one direction: the model can explain at most one teacher direction.
  MatrixXd a = MatrixXd::Zero(30, 5);
  a.col(0) = gaussian(rng, 30, 1);
  const auto mu = Ensembled::uniform(a, gaussian(rng, 30, 20, 0.5));
  const auto cp = reduced_loss(mu, prob);
  CHECK(cp.floor_active);
  CHECK(cp.loss >= 0.5 * cp.r_lo - 1e-10);
}

TEST_CASE("misspecified dimensions") {
  Rng rng(7);
  const auto prob = small_problem(7, 20, 1024, 70);
  const auto mu = random_ensemble(rng, 40, 5, 20, 1.0, 0.5);
  const auto cp = reduced_loss(mu, prob);
  CHECK(cp.sigma_om.rows() == 7);
  CHECK(cp.sigma_om.cols() == 5);
  CHECK(cp.b.rows() == 7);
  const VectorXd ev = Eigen::SelfAdjointEigenSolver<MatrixXd>(cp.sigma_oo).eigenvalues();
  CHECK(cp.loss >= 0.5 * ev.head(2).sum() - 1e-12);
}

TEST_CASE("finite prompt risk") {
  const auto prob = small_problem(3, 8, 1024, 30);
  const MatrixXd w = prob.sigma_oo().inverse();
  Rng rng(8);
  const double big = finite_prompt_loss(prob.teacher(), w, prob.teacher(), 10000, 30, rng);
  CHECK(big <= 0.01);

  // The deviation from the infinite-prompt value shrinks with n.
  std::vector<double> dev;
  for (Eigen::Index n : {16, 64, 256, 1024}) {
    Rng r(100);
    dev.push_back(finite_prompt_loss(prob.teacher(), w, prob.teacher(), n, 400, r));
  }
  for (std::size_t i = 1; i < dev.size(); ++i) CHECK(dev[i] < dev[i - 1]);

  // A zero task predicts zero and loses nothing.
  const Ensembled silent = Ensembled::uniform(MatrixXd::Zero(4, 3), gaussian(rng, 4, 8));
  CHECK(finite_prompt_loss(prob.teacher(), w, silent, 32, 20, rng) == 0.0);
}

TEST_CASE("test error on scalar tasks") {
  const auto prob = small_problem();
  const auto& ho = prob.teacher_features();
  const auto cp = reduced_loss(prob.teacher(), prob);
  const VectorXd zero = VectorXd::Zero(prob.samples());
  CHECK(test_error(ho, cp.w_opt, zero, prob).error == 0.0);

  const VectorXd v0 = VectorXd::LinSpaced(5, -1.0, 1.0);
  const VectorXd linear = ho * v0;
  const auto lin = test_error(ho, cp.w_opt, linear, prob);
  CHECK(lin.error <= 1e-12);
  CHECK(lin.projection_floor <= 1e-20);

  const VectorXd g = norm_task(prob);
  const auto te = test_error(ho, cp.w_opt, g, prob);
  CHECK(te.projection_floor > 0.0);
  CHECK(te.error >= te.projection_floor - 1e-6);
}

TEST_CASE("linear task after training stays near the training loss") {
  Rng rng(9);
  const auto prob = small_problem(3, 10, 1024, 30);
  TrainConfig cfg;
  cfg.max_steps = 1500;
  cfg.eta = 0.05;
  const auto log = train(random_ensemble(rng, 60, 3, 10, 0.5, 0.3), prob, cfg);
  const auto& mu = log.final_ensemble;
  const auto cp = reduced_loss(mu, prob);
  REQUIRE(cp.loss < 0.1 * log.initial_loss());
  const VectorXd v0 = VectorXd::Ones(3) / std::sqrt(3.0);
  const VectorXd g = prob.teacher_features() * v0;
  CHECK(test_error(mu, cp.w_opt, g, prob).error <= 10.0 * cp.loss);
}

}
