#pragma once

// Shared test utilities: finite-difference gradient oracles and tolerance
// helpers.

#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "grafit/nn.hpp"
#include "grafit/rng.hpp"
#include "grafit/tensor.hpp"

namespace testsupport {

inline bool close(double a, double b, double rel = 1e-9, double abs = 1e-12) {
  return std::abs(a - b) <= abs + rel * std::max(std::abs(a), std::abs(b));
}

// Central finite differences of a scalar-valued graph with respect to one
// leaf, compared against the analytic gradient from backward_grad.
inline void check_gradient(
    const std::function<grafit::ad::Tensor(const grafit::ad::Tensor&)>& build,
    const std::vector<std::size_t>& shape, const std::vector<double>& values,
    double step = 1e-5, double rel_tol = 1e-4, double abs_tol = 1e-8) {
  auto leaf = grafit::ad::Tensor::leaf(shape, values, true);
  auto root = build(leaf);
  REQUIRE(root.size() == 1);
  grafit::ad::backward_grad(root);
  const auto analytic = leaf.grad();
  REQUIRE(analytic.size() == values.size());

  for (std::size_t i = 0; i < values.size(); ++i) {
    auto plus = values;
    plus[i] += step;
    auto minus = values;
    minus[i] -= step;
    const double fp = build(grafit::ad::Tensor::leaf(shape, plus, false)).value();
    const double fm = build(grafit::ad::Tensor::leaf(shape, minus, false)).value();
    const double fd = (fp - fm) / (2.0 * step);
    const bool ok = std::abs(analytic[i] - fd) <=
                    abs_tol + rel_tol * std::max(std::abs(analytic[i]), std::abs(fd));
    REQUIRE_MESSAGE(ok, "coordinate " << i << ": analytic " << analytic[i] << " vs fd " << fd);
  }
}

// Finite differences with respect to selected coordinates of a persistent
// parameter; the loss builder reconstructs the graph from current parameter
// values.
inline void check_param_gradient(const std::function<grafit::ad::Tensor()>& build_loss,
                                 grafit::nn::Parameter& param,
                                 const std::vector<std::size_t>& coords, double step = 1e-5,
                                 double rel_tol = 1e-4, double abs_tol = 1e-8) {
  param.zero_grad();
  auto root = build_loss();
  grafit::ad::backward_grad(root);
  const auto analytic = param.grad();
  REQUIRE(analytic.size() == param.values().size());

  for (auto c : coords) {
    const double original = param.values()[c];
    param.values()[c] = original + step;
    const double fp = build_loss().value();
    param.values()[c] = original - step;
    const double fm = build_loss().value();
    param.values()[c] = original;
    const double fd = (fp - fm) / (2.0 * step);
    const bool ok = std::abs(analytic[c] - fd) <=
                    abs_tol + rel_tol * std::max(std::abs(analytic[c]), std::abs(fd));
    REQUIRE_MESSAGE(ok, "param coordinate " << c << ": analytic " << analytic[c] << " vs fd "
                                            << fd);
  }
}

inline std::vector<double> random_values(std::size_t n, grafit::Rng& rng, double lo = -1.0,
                                         double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.next_uniform(lo, hi);
  return v;
}

// Values bounded away from zero, for kinked primitives like ReLU.
inline std::vector<double> random_values_off_kink(std::size_t n, grafit::Rng& rng,
                                                  double margin = 1e-3) {
  std::vector<double> v(n);
  for (auto& x : v) {
    do {
      x = rng.next_uniform(-1.0, 1.0);
    } while (std::abs(x) < margin);
  }
  return v;
}

}  // namespace testsupport
