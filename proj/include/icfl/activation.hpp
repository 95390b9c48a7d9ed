#ifndef ICFL_ACTIVATION_HPP
#define ICFL_ACTIVATION_HPP

#include <cmath>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace icfl {

enum class ActivationKind { Sigmoid, Tanh };

// Bounds |sigma| <= r1, |sigma'| <= r2, |sigma''| <= r3.
struct ActivationBounds {
  double r1;
  double r2;
  double r3;
};

struct Activation {
  ActivationKind kind = ActivationKind::Sigmoid;

  template <typename Scalar>
  Scalar value(Scalar z) const {
    if (kind == ActivationKind::Sigmoid) return Scalar(1) / (Scalar(1) + std::exp(-z));
    return std::tanh(z);
  }

  template <typename Scalar>
  Scalar derivative(Scalar z) const {
    if (kind == ActivationKind::Sigmoid) {
      const Scalar s = value(z);
      return s * (Scalar(1) - s);
    }
    const Scalar t = std::tanh(z);
    return Scalar(1) - t * t;
  }

  /// Elementwise value and first derivative of a pre-activation array.
  template <typename Derived>
  void apply(const Eigen::ArrayBase<Derived>& z,
             Eigen::Array<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic>& s,
             Eigen::Array<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic>& ds) const {
    using Scalar = typename Derived::Scalar;
    if (kind == ActivationKind::Sigmoid) {
      s = (Scalar(1) + (-z).exp()).inverse();
      ds = s * (Scalar(1) - s);
    } else {
      s = z.tanh();
      ds = Scalar(1) - s.square();
    }
  }

  ActivationBounds bounds() const {
    if (kind == ActivationKind::Sigmoid) return {1.0, 0.25, 1.0 / (6.0 * std::sqrt(3.0))};
    return {1.0, 1.0, 4.0 / (3.0 * std::sqrt(3.0))};
  }

  std::string name() const { return kind == ActivationKind::Sigmoid ? "sigmoid" : "tanh"; }

  static Activation from_name(const std::string& name) {
    if (name == "sigmoid") return {ActivationKind::Sigmoid};
    if (name == "tanh") return {ActivationKind::Tanh};
    throw std::invalid_argument("unknown activation: " + name);
  }
};

}  // namespace icfl

#endif  // ICFL_ACTIVATION_HPP
