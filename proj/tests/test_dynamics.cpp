#include "doctest.h"
#include "helpers.hpp"

using namespace icfl;
using namespace testing;

namespace {

// Central difference of the reduced loss in one coordinate of particle j.
double fd_loss(const Ensembled& mu, const Problemd& prob, Eigen::Index j, Eigen::Index c, double h) {
  const Eigen::Index k = mu.k();
  auto shifted = [&](double delta) {
    MatrixXd a = mu.a(), w = mu.w();
    if (c < k)
      a(j, c) += delta;
    else
      w(j, c - k) += delta;
    return reduced_loss(mu.with_coordinates(a, w), prob).loss;
  };
  return (shifted(h) - shifted(-h)) / (2 * h);
}

}  // namespace

TEST_SUITE("dynamics") {

TEST_CASE("first variation basics") {
  Rng rng(1);
  const auto prob = small_problem();
  const auto mu = random_ensemble(rng, 30, 5, 20, 1.0, 0.5);
  const Particled silent{VectorXd::Zero(5), gaussian(rng, 20, 1)};
  CHECK(func_deriv(mu, prob, silent) == 0.0);
  CHECK(grad_func_deriv(mu, prob, silent).w.isZero(0));

  // Zero residual: the teacher itself.
  const Particled any{gaussian(rng, 5, 1), gaussian(rng, 20, 1)};
  CHECK(std::abs(func_deriv(prob.teacher(), prob, any)) <= 1e-10);

  // Normalization: the variation integrates to zero against mu.
  const auto fv = FirstVariation<double>::reduced(mu, prob);
  double avg = 0;
  for (Eigen::Index j = 0; j < mu.size(); ++j) avg += fv.value(mu.particle(j)) / double(mu.size());
  CHECK(std::abs(avg) <= 1e-10);

  // Linearity in a: a . grad_a equals the value.
  for (Eigen::Index j = 0; j < 5; ++j) {
    const auto p = mu.particle(j);
    CHECK(p.a.dot(fv.gradient(p).a) == doctest::Approx(fv.value(p)).epsilon(1e-12));
  }

  // Field and pointwise gradient agree.
  const auto field = fv.field(mu);
  for (Eigen::Index j = 0; j < 5; ++j) {
    const auto g = fv.gradient(mu.particle(j));
    CHECK((field.a.row(j).transpose() - g.a).norm() <= 1e-14);
    CHECK((field.w.row(j).transpose() - g.w).norm() <= 1e-14);
    CHECK(field.value(j) == doctest::Approx(fv.value(mu.particle(j))).epsilon(1e-12));
  }
}

TEST_CASE("gradient of the first variation matches finite differences") {
  Rng rng(2);
  const auto prob = small_problem();
  const auto mu = random_ensemble(rng, 30, 5, 20, 1.0, 0.5);
  const auto fv = FirstVariation<double>::reduced(mu, prob);
  for (Eigen::Index j = 0; j < 3; ++j) {
    Particled p{gaussian(rng, 5, 1), gaussian(rng, 20, 1, 0.5)};
    const auto g = fv.gradient(p);
    const double h = 1e-4;
    for (Eigen::Index c = 0; c < 25; ++c) {
      Particled plus = p, minus = p;
      (c < 5 ? plus.a(c) : plus.w(c - 5)) += h;
      (c < 5 ? minus.a(c) : minus.w(c - 5)) -= h;
      const double fd = (fv.value(plus) - fv.value(minus)) / (2 * h);
      const double an = c < 5 ? g.a(c) : g.w(c - 5);
      CHECK(std::abs(fd - an) <= 1e-5 * std::max(1.0, std::abs(an)));
    }
  }
}

TEST_CASE("particle gradient is N times the loss derivative") {
  Rng rng(3);
  const auto prob = small_problem(5, 20, 1024, 100, 3);
  const auto mu = random_ensemble(rng, 64, 5, 20, 1.0, 0.5);
  const auto field = FirstVariation<double>::reduced(mu, prob).field(mu);
  double worst = 0;
  for (Eigen::Index j = 0; j < 5; ++j)
    for (Eigen::Index c = 0; c < 25; ++c) {
      const double an = (c < 5 ? field.a(j, c) : field.w(j, c - 5)) / 64.0;
      const double fd = fd_loss(mu, prob, j, c, 1e-5);
      worst = std::max(worst, std::abs(an - fd) / std::max(std::abs(an), 1e-8));
    }
  CHECK(worst <= 1e-4);
}

TEST_CASE("gradient step") {
  Rng rng(4);
  const auto prob = small_problem();
  const auto mu = random_ensemble(rng, 40, 5, 20, 1.0, 0.5);
  CHECK(gd_step(mu, prob, 0.0).hash() == mu.hash());
  CHECK(reduced_loss(gd_step(mu, prob, 1e-3), prob).loss < reduced_loss(mu, prob).loss);
  CHECK_THROWS_AS(gd_step(random_weighted(rng, 10, 5, 20), prob, 0.1), std::invalid_argument);

  const auto projected = gd_step(mu, prob, 1.0, true);
  CHECK(projected.a().rowwise().norm().maxCoeff() <= 1.0 + 1e-15);
}

TEST_CASE("monotone descent at small steps") {
  Rng rng(5);
  const auto prob = small_problem(5, 20, 512, 100, 5);
  auto mu = random_ensemble(rng, 40, 5, 20, 1.0, 0.5);
  double prev = reduced_loss(mu, prob).loss;
  int increases = 0;
  for (int t = 0; t < 500; ++t) {
    mu = gd_step(mu, prob, 1e-3);
    const double cur = reduced_loss(mu, prob).loss;
    increases += cur > prev + 1e-12;
    prev = cur;
  }
  CHECK(increases == 0);
}

TEST_CASE("second moment drifts at first order in the step") {
  Rng rng(6);
  const auto prob = small_problem(5, 20, 512, 100, 6);
  const auto mu0 = random_ensemble(rng, 40, 5, 20, 1.0, 0.5);
  auto drift = [&](double eta) {
    auto mu = mu0;
    for (int t = 0; t < int(0.1 / eta); ++t) mu = gd_step(mu, prob, eta);
    return std::abs(second_moment_a(mu) - second_moment_a(mu0));
  };
  const double d1 = drift(1e-3), d2 = drift(5e-4);
  CHECK(d1 > 0.0);
  CHECK(d2 / d1 == doctest::Approx(0.5).epsilon(0.1));
}

TEST_CASE("attention gradient step") {
  Rng rng(7);
  const auto prob = small_problem();
  const auto mu = random_ensemble(rng, 40, 5, 20, 1.0, 0.5);
  const MatrixXd hm = network_outputs(mu, prob.eval().samples, prob.activation());
  const auto cp = cov_pack(hm, prob);

  CHECK((attention_gd_step(cp.w_opt, cp, 1.0) - cp.w_opt).norm() <= 1e-10);

  const MatrixXd w = gaussian(rng, 5, 5);
  const MatrixXd grad = attention_gradient(w, cp);
  const double h = 1e-5;
  for (Eigen::Index i = 0; i < 5; ++i)
    for (Eigen::Index j = 0; j < 5; ++j) {
      MatrixXd wp = w, wm = w;
      wp(i, j) += h;
      wm(i, j) -= h;
      const double fd = (loss_tf(hm, wp, prob) - loss_tf(hm, wm, prob)) / (2 * h);
      CHECK(std::abs(fd - grad(i, j)) <= 1e-5 * std::max(std::abs(grad(i, j)), grad.cwiseAbs().maxCoeff() * 1e-3));
    }
}

TEST_CASE("transformer first variation") {
  Rng rng(8);
  const auto prob = small_problem(4, 10, 512, 40, 8);
  const auto mu = random_ensemble(rng, 32, 4, 10, 1.0, 0.5);
  const MatrixXd hm = network_outputs(mu, prob.eval().samples, prob.activation());
  const MatrixXd w = gaussian(rng, 4, 4, 3.0);
  const auto field = FirstVariation<double>::transformer(hm, w, prob).field(mu);
  for (Eigen::Index j = 0; j < 3; ++j)
    for (Eigen::Index c = 0; c < 14; ++c) {
      const double h = 1e-5;
      auto at = [&](double delta) {
        MatrixXd a = mu.a(), ww = mu.w();
        (c < 4 ? a(j, c) : ww(j, c - 4)) += delta;
        return loss_tf(mu.with_coordinates(a, ww), w, prob);
      };
      const double fd = (at(h) - at(-h)) / (2 * h);
      const double an = (c < 4 ? field.a(j, c) : field.w(j, c - 4)) / 32.0;
      CHECK(std::abs(fd - an) <= 1e-4 * std::max(std::abs(an), 1e-6));
    }
  // At the optimum the transformer field equals the reduced one.
  const auto cp = cov_pack(hm, prob);
  const MatrixXd t = FirstVariation<double>::transformer(hm, cp.w_opt, prob).driving();
  const MatrixXd r = FirstVariation<double>::reduced(hm, cp, prob).driving();
  CHECK((t - r).norm() <= 1e-8 * r.norm());
}

TEST_CASE("birth and death") {
  Rng rng(9);
  const auto prob = small_problem();
  const auto mu = random_ensemble(rng, 40, 5, 20, 1.0, 0.5);
  const PiConfig pi{0.5, 0.3, true};
  CHECK(birth_death(mu, 0.0, pi, rng).hash() == mu.hash());
  // gamma N below one pair is a no-op.
  CHECK(birth_death(mu, 0.04, pi, rng).hash() == mu.hash());

  const auto replaced = birth_death(mu, 0.25, pi, rng);
  int changed = 0;
  for (Eigen::Index j = 0; j < mu.size(); ++j) changed += replaced.a().row(j) != mu.a().row(j);
  CHECK(changed == 10);

  const double base = reduced_loss(mu, prob).loss;
  const auto exact = birth_death_exact(mu, 0.3, pi, 200, rng);
  CHECK(std::abs(reduced_loss(exact, prob).loss - base) <= 1e-10);
  CHECK(second_moment_a(exact) == doctest::Approx(0.7 * second_moment_a(mu) + 0.3 * 0.25).epsilon(1e-12));
}

TEST_CASE("resampled birth-death deviates like one over root N") {
  Rng rng(10);
  const auto prob = small_problem(5, 20, 512, 100, 10);
  const PiConfig pi{0.5, 1.0 / std::sqrt(20.0), true};
  // Five clusters, so the features stay O(1) whatever N is.
  const MatrixXd centers = gaussian(rng, 5, 20, 0.5);
  auto spread = [&](Eigen::Index n) {
    MatrixXd a = gaussian(rng, n, 5, 0.3), w = gaussian(rng, n, 20, 0.1);
    for (Eigen::Index j = 0; j < n; ++j) {
      a(j, j % 5) += 2.0;
      w.row(j) += centers.row(j % 5);
    }
    const auto mu = Ensembled::uniform(a, w);
    const double base = reduced_loss(birth_death_exact(mu, 0.1, pi, 2000, rng), prob).loss;
    double sq = 0;
    for (int t = 0; t < 100; ++t) {
      const double d = reduced_loss(birth_death(mu, 0.1, pi, rng), prob).loss - base;
      sq += d * d;
    }
    return std::sqrt(sq / 100);
  };
  const double s100 = spread(100), s1600 = spread(1600);
  // Sixteen times the particles, roughly a quarter of the spread.
  CHECK(s1600 < 0.5 * s100);
  CHECK(s1600 > 0.1 * s100);
}

TEST_CASE("GP perturbation field") {
  Rng rng(11);
  const auto mu = random_ensemble(rng, 6, 2, 3);
  GpConfig off;
  off.sigma_p = 0.0;
  CHECK(gp_perturb(mu, off, 1.0, rng).hash() == mu.hash());

  MatrixXd a = mu.a(), w = mu.w();
  a.row(1) = a.row(0);
  w.row(1) = w.row(0);
  const auto twins = mu.with_coordinates(a, w);
  MatrixXd theta(twins.size(), 5);
  theta << twins.a(), twins.w();
  const MatrixXd xi = sample_gp_field(theta, GpConfig{}, rng);
  CHECK(xi.row(0) == xi.row(1));

  // Covariance between two locations across many draws.
  MatrixXd two(2, 2);
  two << 0.0, 0.0, 0.6, -0.3;
  const GpConfig cfg{0.5, 0.8, 1e-10};
  const double expect = 0.25 * std::exp(-(0.36 + 0.09) / (2 * 0.64));
  double prod = 0, var = 0;
  const int draws = 10000;
  for (int t = 0; t < draws; ++t) {
    const MatrixXd s = sample_gp_field(two, cfg, rng);
    prod += s(0, 0) * s(1, 0) + s(0, 1) * s(1, 1);
    var += s(0, 0) * s(0, 0) + s(0, 1) * s(0, 1);
  }
  CHECK(prod / (2.0 * draws) == doctest::Approx(expect).epsilon(0.05));
  CHECK(var / (2.0 * draws) == doctest::Approx(0.25).epsilon(0.05));

  CHECK_THROWS_AS(gp_perturb(random_ensemble(rng, 10001, 1, 1), GpConfig{}, 1.0, rng), std::invalid_argument);
}

TEST_CASE("training loop") {
  Rng rng(12);
  const auto prob = small_problem(3, 10, 512, 30, 12);
  TrainConfig cfg;
  cfg.max_steps = 300;

  SUBCASE("starting at the teacher stops at once") {
    cfg.epsilon = 1e-8;
    const auto log = train(prob.teacher(), prob, cfg);
    REQUIRE(log.records.size() == 1);
    CHECK(log.records[0].loss <= cfg.epsilon);
  }
  SUBCASE("identical seeds give identical logs") {
    cfg.mode = TrainMode::Modified;
    cfg.window = 20;
    cfg.tau = 50;
    cfg.pi = PiConfig{0.5, 0.3, true};
    const auto mu0 = random_ensemble(rng, 40, 3, 10, 0.5, 0.3);
    const auto a = train(mu0, prob, cfg);
    const auto b = train(mu0, prob, cfg);
    REQUIRE(a.records.size() == b.records.size());
    bool same = true;
    for (std::size_t i = 0; i < a.records.size(); ++i)
      same = same && a.records[i].loss == b.records[i].loss && a.records[i].event == b.records[i].event;
    CHECK(same);
    CHECK(a.final_ensemble.hash() == b.final_ensemble.hash());
    bool any_event = false;
    for (const auto& r : a.records) any_event = any_event || r.event != kEventNone;
    CHECK(any_event);
  }
  SUBCASE("attention mode tracks the transformer risk") {
    cfg.mode = TrainMode::Attention;
    const auto mu0 = random_ensemble(rng, 40, 3, 10, 0.5, 0.3);
    const auto log = train(mu0, prob, cfg);
    CHECK_FALSE(log.aborted);
    CHECK(log.final_w.rows() == 3);
    CHECK(log.final_loss() < log.initial_loss());
    const MatrixXd w0 = cfg.w_init * MatrixXd::Identity(3, 3);
    CHECK(log.initial_loss() == doctest::Approx(loss_tf(mu0, w0, prob)));

    cfg.w_init = -1.0;
    cfg.max_steps = 0;
    CHECK(train(mu0, prob, cfg).initial_loss() == doctest::Approx(reduced_loss(mu0, prob).loss).epsilon(1e-8));
  }
  SUBCASE("stochastic minibatches") {
    cfg.stochastic = true;
    cfg.batch_size = 256;
    const auto mu0 = random_ensemble(rng, 40, 3, 10, 0.5, 0.3);
    const auto a = train(mu0, prob, cfg);
    const auto b = train(mu0, prob, cfg);
    CHECK(a.final_loss() == b.final_loss());
    CHECK(a.final_loss() < a.initial_loss());
  }
  SUBCASE("numerical failure aborts") {
    const auto dead = Ensembled::uniform(MatrixXd::Zero(4, 3), gaussian(rng, 4, 10));
    const auto log = train(dead, prob, cfg);
    CHECK(log.aborted);
    CHECK_FALSE(log.abort_reason.empty());
  }
  SUBCASE("invalid configs are rejected") {
    cfg.eta = 0.0;
    CHECK_THROWS_AS(train(prob.teacher(), prob, cfg), std::invalid_argument);
    cfg.eta = 0.1;
    cfg.delta_b = 0.001;
    cfg.delta_p = 0.01;
    CHECK_THROWS_AS(train(prob.teacher(), prob, cfg), std::invalid_argument);
  }
}

}
