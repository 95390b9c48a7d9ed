#ifndef ICFL_DYNAMICS_HPP
#define ICFL_DYNAMICS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>

#include "icfl/activation.hpp"
#include "icfl/ensemble.hpp"
#include "icfl/objective.hpp"
#include "icfl/quadrature.hpp"

namespace icfl {

/// Gradient of the first variation at a batch of points. Row j of `a` and `w`
/// are the a- and w-components at point j; `value(j)` is the first variation.
template <typename Scalar>
struct GradientField {
  Mat<Scalar> a;
  Mat<Scalar> w;
  Vec<Scalar> value;

  Eigen::Index size() const { return a.rows(); }

  /// Stacked N x (k + d) array, a-components first.
  Mat<Scalar> stacked() const {
    Mat<Scalar> out(a.rows(), a.cols() + w.cols());
    out << a, w;
    return out;
  }

  /// sqrt((1/N) sum_j |grad_j|^2)
  Scalar l2_norm() const {
    return std::sqrt((a.squaredNorm() + w.squaredNorm()) / Scalar(std::max<Eigen::Index>(a.rows(), 1)));
  }
};

template <typename Scalar>
struct ParticleGradient {
  Vec<Scalar> a;
  Vec<Scalar> w;
};

/// First variation of a loss that depends on mu only through h_mu on the
/// evaluation set. Every such variation has the form
///   F(theta) = -(1/M) sum_m g_m^T h_theta(x_m)
/// for a "driving field" g (M x k), which is all this class stores.
template <typename Scalar>
class FirstVariation {
 public:
  FirstVariation(Mat<Scalar> driving, Mat<Scalar> x, Activation act)
      : g_(std::move(driving)), x_(std::move(x)), act_(act) {
    if (g_.rows() != x_.rows()) throw std::invalid_argument("driving field and inputs disagree on M");
  }

  /// Variation of the reduced objective: g = zeta B.
  static FirstVariation reduced(const Mat<Scalar>& hm, const CovPack<Scalar>& cp, const Problem<Scalar>& prob) {
    return FirstVariation(residuals(hm, cp, prob) * cp.b, prob.eval().samples, prob.activation());
  }

  static FirstVariation reduced(const Ensemble<Scalar>& mu, const Problem<Scalar>& prob) {
    const Mat<Scalar> hm = network_outputs(mu, prob.eval().samples, prob.activation());
    return reduced(hm, cov_pack(hm, prob), prob);
  }

  /// Variation of the transformer risk at fixed attention matrix W.
  /// With C = Sigma_om, r_m = h_teacher - C W h_m and P = W Hm^T R / M,
  /// the driving field is g_m = P h_teacher(x_m) + W^T C^T r_m.
  static FirstVariation transformer(const Mat<Scalar>& hm, const Mat<Scalar>& w, const Problem<Scalar>& prob) {
    const auto& ho = prob.teacher_features();
    const Scalar m = Scalar(hm.rows());
    const Mat<Scalar> c = cov<Scalar>(ho, hm);
    const Mat<Scalar> cw = c * w;
    const Mat<Scalar> r = ho - hm * cw.transpose();
    const Mat<Scalar> p = w * (hm.transpose() * r) / m;
    return FirstVariation(ho * p.transpose() + r * cw, prob.eval().samples, prob.activation());
  }

  const Mat<Scalar>& driving() const { return g_; }
  const Mat<Scalar>& inputs() const { return x_; }
  Eigen::Index k() const { return g_.cols(); }

  Scalar value(const Particle<Scalar>& theta) const {
    check(theta);
    const Vec<Scalar> z = x_ * theta.w;
    const Vec<Scalar> s = z.unaryExpr([&](Scalar t) { return act_.value(t); });
    return -(s.transpose() * g_ * theta.a)(0) / Scalar(x_.rows());
  }

  ParticleGradient<Scalar> gradient(const Particle<Scalar>& theta) const {
    check(theta);
    const Vec<Scalar> z = x_ * theta.w;
    const Vec<Scalar> s = z.unaryExpr([&](Scalar t) { return act_.value(t); });
    const Vec<Scalar> ds = z.unaryExpr([&](Scalar t) { return act_.derivative(t); });
    const Scalar m = Scalar(x_.rows());
    ParticleGradient<Scalar> out;
    out.a = -(g_.transpose() * s) / m;
    const Vec<Scalar> ga = (g_ * theta.a).cwiseProduct(ds);
    out.w = -(x_.transpose() * ga) / m;
    return out;
  }

  /// Gradient at many points whose activations are already known.
  GradientField<Scalar> field(const Mat<Scalar>& a, const ParticleActivations<Scalar>& act) const {
    return apply(g_, a, act, x_);
  }

  GradientField<Scalar> field(const Mat<Scalar>& a, const Mat<Scalar>& w) const {
    return field(a, particle_activations(w, x_, act_));
  }

  GradientField<Scalar> field(const Ensemble<Scalar>& mu) const { return field(mu.a(), mu.w()); }

  /// The map g -> gradient field is linear; exposed for finite differences
  /// of driving fields.
  static GradientField<Scalar> apply(const Mat<Scalar>& g, const Mat<Scalar>& a,
                                     const ParticleActivations<Scalar>& act, const Mat<Scalar>& x) {
    const Scalar m = Scalar(x.rows());
    GradientField<Scalar> out;
    const Mat<Scalar> sg = act.s.matrix().transpose() * g;  // N x k
    out.a = -sg / m;
    out.value = -(sg.cwiseProduct(a)).rowwise().sum() / m;
    const Mat<Scalar> ga = ((g * a.transpose()).array() * act.ds).matrix();  // M x N
    out.w = -(ga.transpose() * x) / m;
    return out;
  }

 private:
  void check(const Particle<Scalar>& theta) const {
    if (theta.a.size() != g_.cols() || theta.w.size() != x_.cols())
      throw std::invalid_argument("first variation: particle dimension mismatch");
  }

  Mat<Scalar> g_;
  Mat<Scalar> x_;
  Activation act_;
};

template <typename Scalar>
Scalar func_deriv(const Ensemble<Scalar>& mu, const Problem<Scalar>& prob, const Particle<Scalar>& theta) {
  return FirstVariation<Scalar>::reduced(mu, prob).value(theta);
}

template <typename Scalar>
ParticleGradient<Scalar> grad_func_deriv(const Ensemble<Scalar>& mu, const Problem<Scalar>& prob,
                                         const Particle<Scalar>& theta) {
  return FirstVariation<Scalar>::reduced(mu, prob).gradient(theta);
}

template <typename Scalar>
void require_uniform(const Ensemble<Scalar>& mu, const char* what) {
  if (!mu.is_uniform(Scalar(1e-12))) throw std::invalid_argument(std::string(what) + ": ensemble must be uniform");
}

/// Moves every particle against a precomputed gradient field.
template <typename Scalar>
Ensemble<Scalar> descend(const Ensemble<Scalar>& mu, const GradientField<Scalar>& g, Scalar eta,
                         bool project_a = false) {
  Mat<Scalar> a = mu.a() - eta * g.a;
  Mat<Scalar> w = mu.w() - eta * g.w;
  if (project_a) {
    for (Eigen::Index j = 0; j < a.rows(); ++j) {
      const Scalar n = a.row(j).norm();
      if (n > Scalar(1)) a.row(j) /= n;
    }
  }
  return mu.with_coordinates(std::move(a), std::move(w));
}

/// One simultaneous gradient step on the reduced objective.
template <typename Scalar>
Ensemble<Scalar> gd_step(const Ensemble<Scalar>& mu, const Problem<Scalar>& prob, Scalar eta,
                         bool project_a = false) {
  require_uniform(mu, "gd_step");
  if (eta == Scalar(0)) return mu;
  return descend(mu, FirstVariation<Scalar>::reduced(mu, prob).field(mu), eta, project_a);
}

/// Gradient of the transformer risk with respect to W.
template <typename Scalar>
Mat<Scalar> attention_gradient(const Mat<Scalar>& w, const CovPack<Scalar>& cp) {
  const Eigen::Index k = w.rows();
  return cp.sigma_om.transpose() * cp.sigma_om * (w * cp.sigma_mm - Mat<Scalar>::Identity(k, k));
}

template <typename Scalar>
Mat<Scalar> attention_gd_step(const Mat<Scalar>& w, const CovPack<Scalar>& cp, Scalar eta_w) {
  return w - eta_w * attention_gradient(w, cp);
}

template <typename Scalar>
Mat<Scalar> attention_gd_step(const Mat<Scalar>& w, const Ensemble<Scalar>& mu, const Problem<Scalar>& prob,
                              Scalar eta_w) {
  return attention_gd_step(w, reduced_loss(mu, prob), eta_w);
}

/// Replaces floor(gamma N) uniformly chosen particles with antithetic draws
/// from pi. An odd count is rounded down so that pairs stay intact.
template <typename Scalar>
Ensemble<Scalar> birth_death(const Ensemble<Scalar>& mu, Scalar gamma, const PiConfig& pi, Rng& rng) {
  require_uniform(mu, "birth_death");
  if (!(gamma >= Scalar(0) && gamma < Scalar(1))) throw std::invalid_argument("birth_death: gamma must lie in [0,1)");
  auto count = static_cast<std::size_t>(std::floor(gamma * Scalar(mu.size())));
  if (pi.antithetic) count -= count % 2;
  if (count == 0) return mu;
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(mu.size()));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto fresh = sample_pi<Scalar>(count, mu.k(), mu.d(), pi, rng);
  Mat<Scalar> a = mu.a(), w = mu.w();
  for (std::size_t i = 0; i < count; ++i) {
    a.row(idx[i]) = fresh[i].a.transpose();
    w.row(idx[i]) = fresh[i].w.transpose();
  }
  return mu.with_coordinates(std::move(a), std::move(w));
}

/// Mean-field limit of birth-death: (1 - gamma) mu + gamma pi_n.
template <typename Scalar>
Ensemble<Scalar> birth_death_exact(const Ensemble<Scalar>& mu, Scalar gamma, const PiConfig& pi, std::size_t n_pi,
                                   Rng& rng) {
  const auto ps = sample_pi<Scalar>(n_pi, mu.k(), mu.d(), pi, rng);
  return mix(mu, Ensemble<Scalar>::from_particles(ps), gamma);
}

struct GpConfig {
  double sigma_p = 0.1;
  double ell = 1.0;
  double jitter = 1e-10;
};

/// Samples a vector-valued Gaussian random field with squared-exponential
/// kernel at the particle locations; coincident particles share one value.
template <typename Scalar>
Mat<Scalar> sample_gp_field(const Mat<Scalar>& theta, const GpConfig& cfg, Rng& rng) {
  const Eigen::Index n = theta.rows(), m = theta.cols();
  if (cfg.sigma_p == 0.0) return Mat<Scalar>::Zero(n, m);

  std::map<std::vector<Scalar>, Eigen::Index> seen;
  std::vector<Eigen::Index> slot(static_cast<std::size_t>(n));
  std::vector<Eigen::Index> reps;
  for (Eigen::Index j = 0; j < n; ++j) {
    std::vector<Scalar> key(static_cast<std::size_t>(m));
    for (Eigen::Index c = 0; c < m; ++c) key[static_cast<std::size_t>(c)] = theta(j, c);
    auto [it, inserted] = seen.emplace(std::move(key), static_cast<Eigen::Index>(reps.size()));
    if (inserted) reps.push_back(j);
    slot[static_cast<std::size_t>(j)] = it->second;
  }
  const auto u = static_cast<Eigen::Index>(reps.size());

  const Scalar s2 = Scalar(cfg.sigma_p * cfg.sigma_p);
  const Scalar inv2l2 = Scalar(1) / Scalar(2 * cfg.ell * cfg.ell);
  Mat<Scalar> gram(u, u);
  for (Eigen::Index i = 0; i < u; ++i)
    for (Eigen::Index j = 0; j <= i; ++j) {
      const Scalar d2 = (theta.row(reps[static_cast<std::size_t>(i)]) - theta.row(reps[static_cast<std::size_t>(j)]))
                            .squaredNorm();
      gram(i, j) = gram(j, i) = s2 * std::exp(-d2 * inv2l2);
    }

  Scalar jitter = Scalar(cfg.jitter);
  Eigen::LLT<Mat<Scalar>> llt;
  for (int attempt = 0;; ++attempt) {
    llt.compute(gram + jitter * Mat<Scalar>::Identity(u, u));
    if (llt.info() == Eigen::Success) break;
    if (attempt == 8) throw NumericalError("GP Gram matrix is not positive definite after jitter escalation");
    jitter *= Scalar(10);
  }

  std::normal_distribution<double> normal(0.0, 1.0);
  Mat<Scalar> z(u, m);
  for (Eigen::Index i = 0; i < u; ++i)
    for (Eigen::Index c = 0; c < m; ++c) z(i, c) = Scalar(normal(rng));
  const Mat<Scalar> xi_u = llt.matrixL() * z;

  Mat<Scalar> xi(n, m);
  for (Eigen::Index j = 0; j < n; ++j) xi.row(j) = xi_u.row(slot[static_cast<std::size_t>(j)]);
  return xi;
}

/// theta <- theta - eta_p xi(theta) for a freshly sampled field xi.
template <typename Scalar>
Ensemble<Scalar> gp_perturb(const Ensemble<Scalar>& mu, const GpConfig& cfg, Scalar eta_p, Rng& rng) {
  if (mu.size() > 10000) throw std::invalid_argument("gp_perturb: more than 1e4 particles");
  if (cfg.sigma_p == 0.0 || eta_p == Scalar(0)) return mu;
  const Eigen::Index k = mu.k(), d = mu.d();
  Mat<Scalar> theta(mu.size(), k + d);
  theta << mu.a(), mu.w();
  const Mat<Scalar> xi = sample_gp_field(theta, cfg, rng);
  return mu.with_coordinates(mu.a() - eta_p * xi.leftCols(k), mu.w() - eta_p * xi.rightCols(d));
}

enum class TrainMode { Attention, Static, Modified };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::Attention: return "attention";
    case TrainMode::Static: return "static";
    case TrainMode::Modified: return "modified";
  }
  return "static";
}

inline TrainMode train_mode_from_name(const std::string& s) {
  if (s == "attention") return TrainMode::Attention;
  if (s == "static") return TrainMode::Static;
  if (s == "modified") return TrainMode::Modified;
  throw std::invalid_argument("unknown training mode: " + s);
}

enum EventFlags : unsigned { kEventNone = 0, kEventBirthDeath = 1, kEventPerturb = 2 };

inline std::string event_name(unsigned e) {
  if (e == kEventNone) return "none";
  if (e == kEventBirthDeath) return "birth_death";
  if (e == kEventPerturb) return "perturb";
  return "birth_death+perturb";
}

struct TrainConfig {
  double eta = 0.05;
  double eta_w = -1.0;  // negative: 10 * eta; zero: closed-form attention
  double w_init = 100.0;  // attention starts from w_init * I; negative: optimum at mu0
  double gamma = 0.05;
  double eta_p = 0.05;
  long tau = 500;
  double delta_b = 0.01;
  double delta_p = 0.01;
  double epsilon = 1e-10;
  long max_steps = 20000;
  long window = 100;
  std::uint64_t seed = 0;
  GpConfig gp;
  PiConfig pi;
  TrainMode mode = TrainMode::Static;
  bool project_a = false;
  bool stochastic = false;
  Eigen::Index batch_size = 1024;

  double attention_rate() const { return eta_w < 0.0 ? 10.0 * eta : eta_w; }

  void validate() const {
    if (!(eta > 0.0)) throw std::invalid_argument("eta must be positive");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("gamma must lie in [0,1)");
    if (!(delta_b >= delta_p && delta_p >= 0.0)) throw std::invalid_argument("need delta_b >= delta_p >= 0");
    if (window < 1) throw std::invalid_argument("window must be positive");
    if (max_steps < 0) throw std::invalid_argument("max_steps must be non-negative");
    if (stochastic && batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  }
};

struct TrainRecord {
  long step = 0;
  double loss = 0;
  double m_a = 0;
  double sigma_min = 0;
  double sigma_max = 0;
  double grad_norm = 0;
  unsigned event = kEventNone;
};

template <typename Scalar>
struct TrainLog {
  std::vector<TrainRecord> records;
  Ensemble<Scalar> final_ensemble;
  Mat<Scalar> final_w;
  bool aborted = false;
  std::string abort_reason;

  double initial_loss() const { return records.empty() ? 0.0 : records.front().loss; }
  double final_loss() const { return records.empty() ? 0.0 : records.back().loss; }
};

/// Called after each record is appended, with the ensemble that produced it
/// and the attention matrix in use: the trained W in joint training, the
/// optimum for the ensemble otherwise.
template <typename Scalar>
using TrainObserver = std::function<void(const TrainRecord&, const Ensemble<Scalar>&, const Mat<Scalar>&)>;

namespace detail {

template <typename Scalar>
struct StepState {
  ParticleActivations<Scalar> acts;
  Mat<Scalar> hm;
  CovPack<Scalar> cp;
  Scalar loss;
};

template <typename Scalar>
StepState<Scalar> evaluate(const Ensemble<Scalar>& mu, const Mat<Scalar>* w, const Problem<Scalar>& prob) {
  StepState<Scalar> st;
  st.acts = particle_activations(mu.w(), prob.eval().samples, prob.activation());
  st.hm = outputs_from_activations(mu, st.acts.s);
  st.cp = cov_pack(st.hm, prob);
  st.loss = w ? loss_tf(st.hm, *w, prob) : st.cp.loss;
  return st;
}

}  // namespace detail

/// Particle training loop with optional attention layer, birth-death and GP
/// perturbation events.
template <typename Scalar>
TrainLog<Scalar> train(const Ensemble<Scalar>& mu0, const Problem<Scalar>& prob, const TrainConfig& cfg,
                       const std::type_identity_t<TrainObserver<Scalar>>& observer = {}) {
  cfg.validate();
  require_uniform(mu0, "train");
  Rng rng(cfg.seed);
  Rng batch_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  const bool attention = cfg.mode == TrainMode::Attention;
  const bool events = cfg.mode == TrainMode::Modified;
  const Scalar eta = Scalar(cfg.eta);
  const Scalar eta_w = Scalar(cfg.attention_rate());

  TrainLog<Scalar> log;
  Ensemble<Scalar> mu = mu0;
  Mat<Scalar> w = cfg.w_init < 0.0 ? reduced_loss(mu0, prob).w_opt
                                   : Mat<Scalar>(Scalar(cfg.w_init) * Mat<Scalar>::Identity(mu.k(), mu.k()));
  // Non-null when W is trained jointly; the loss is then the transformer risk.
  const Mat<Scalar>* wp = attention && eta_w > Scalar(0) ? &w : nullptr;
  long last_perturb = 0;
  std::vector<double> losses;

  auto fail = [&](const std::string& why) {
    log.aborted = true;
    log.abort_reason = why;
  };

  try {
    for (long step = 0;; ++step) {
      auto st = detail::evaluate(mu, wp, prob);
      if (attention && eta_w == Scalar(0)) w = st.cp.w_opt;

      unsigned ev = kEventNone;
      if (events && step > 0 && step % cfg.window == 0) {
        const double before = losses[static_cast<std::size_t>(step - cfg.window)];
        const double improvement = before - double(st.loss);
        if (improvement <= cfg.delta_b * double(st.loss)) {
          mu = birth_death(mu, Scalar(cfg.gamma), cfg.pi, rng);
          ev |= kEventBirthDeath;
        }
        if (improvement <= cfg.delta_p * double(st.loss) && step - last_perturb > cfg.tau) {
          mu = gp_perturb(mu, cfg.gp, Scalar(cfg.eta_p), rng);
          last_perturb = step;
          ev |= kEventPerturb;
        }
        if (ev != kEventNone) st = detail::evaluate(mu, wp, prob);
      }

      if (!std::isfinite(double(st.loss))) {
        fail("non-finite loss at step " + std::to_string(step));
        break;
      }

      // The gradient may come from a fresh minibatch in stochastic mode.
      std::optional<Problem<Scalar>> batch;
      if (cfg.stochastic) {
        const EvalSetDescriptor desc{batch_rng(), std::max<Eigen::Index>(cfg.batch_size, kMinEvalSetSize),
                                     prob.eval().dim(), prob.eval().descriptor.dist};
        batch.emplace(prob.teacher(), draw_eval_set<Scalar>(desc), prob.activation(), prob.ridge_eps());
      }
      const Problem<Scalar>& gp = batch ? *batch : prob;
      std::optional<detail::StepState<Scalar>> bst;
      if (batch) bst = detail::evaluate(mu, wp, gp);
      const auto& gst = bst ? *bst : st;

      const auto variation = wp ? FirstVariation<Scalar>::transformer(gst.hm, w, gp)
                                : FirstVariation<Scalar>::reduced(gst.hm, gst.cp, gp);
      const auto field = variation.field(mu.a(), gst.acts);

      TrainRecord rec;
      rec.step = step;
      rec.loss = double(st.loss);
      rec.m_a = double(second_moment_a(mu));
      const auto spec = spectrum_of<Scalar>(st.cp.sigma_mm);
      rec.sigma_min = double(spec.lambda_min);
      rec.sigma_max = double(spec.lambda_max);
      rec.grad_norm = double(field.l2_norm());
      rec.event = ev;
      log.records.push_back(rec);
      losses.push_back(rec.loss);
      if (observer) observer(rec, mu, wp ? w : st.cp.w_opt);

      if (rec.loss <= cfg.epsilon || step >= cfg.max_steps) break;

      if (wp) w = attention_gd_step(w, gst.cp, eta_w);
      mu = descend(mu, field, eta, cfg.project_a);
    }
  } catch (const NumericalError& e) {
    fail(e.what());
  }

  log.final_ensemble = mu;
  log.final_w = attention ? w : Mat<Scalar>();
  return log;
}

}  // namespace icfl

#endif  // ICFL_DYNAMICS_HPP
