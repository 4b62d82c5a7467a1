#pragma once

// Small building blocks on top of the autodiff tensor: named parameters,
// linear and batch-norm layers, and fan-in uniform initialization.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "grafit/rng.hpp"
#include "grafit/tensor.hpp"

namespace grafit::nn {

// A persistent leaf tensor with a name for checkpointing.
struct Parameter {
  std::string name;
  ad::Tensor tensor;

  [[nodiscard]] std::vector<double>& values() { return tensor.mutable_values(); }
  [[nodiscard]] const std::vector<double>& values() const { return tensor.values(); }
  [[nodiscard]] const std::vector<double>& grad() const { return tensor.grad(); }
  void zero_grad() { tensor.zero_grad(); }
};

inline Parameter make_param(std::string name, std::vector<std::size_t> shape,
                            std::vector<double> values, bool requires_grad) {
  return Parameter{std::move(name), ad::Tensor::leaf(std::move(shape), std::move(values), requires_grad)};
}

// Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
inline std::vector<double> fan_in_uniform(std::size_t count, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(count);
  for (auto& x : v) x = rng.next_uniform(-bound, bound);
  return v;
}

// y = x W^T + b with W stored [out, in].
struct LinearLayer {
  Parameter weight;  // [out, in]
  Parameter bias;    // [out]

  static LinearLayer init(const std::string& prefix, std::size_t in_dim, std::size_t out_dim,
                          Rng& rng, bool requires_grad = true) {
    LinearLayer l;
    l.weight = make_param(prefix + ".weight", {out_dim, in_dim},
                          fan_in_uniform(out_dim * in_dim, in_dim, rng), requires_grad);
    l.bias = make_param(prefix + ".bias", {out_dim}, fan_in_uniform(out_dim, in_dim, rng),
                        requires_grad);
    return l;
  }

  [[nodiscard]] ad::Tensor forward(const ad::Tensor& x) const {
    return ad::add_bias_row(ad::matmul_nt(x, weight.tensor), bias.tensor);
  }

  [[nodiscard]] std::size_t in_dim() const { return weight.tensor.shape()[1]; }
  [[nodiscard]] std::size_t out_dim() const { return weight.tensor.shape()[0]; }
};

// Batch normalization with running statistics for evaluation mode.
struct BatchNormLayer {
  Parameter gamma;  // [dim]
  Parameter beta;   // [dim]
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  static BatchNormLayer init(const std::string& prefix, std::size_t dim, bool requires_grad = true) {
    BatchNormLayer bn;
    bn.gamma = make_param(prefix + ".gamma", {dim}, std::vector<double>(dim, 1.0), requires_grad);
    bn.beta = make_param(prefix + ".beta", {dim}, std::vector<double>(dim, 0.0), requires_grad);
    bn.running_mean.assign(dim, 0.0);
    bn.running_var.assign(dim, 1.0);
    return bn;
  }

  // Training mode folds the current batch statistics into the running
  // estimates once, at graph-construction time (running variance stored
  // unbiased when the batch has more than one row).
  ad::Tensor forward(const ad::Tensor& x, bool training) {
    if (!training) {
      return ad::batchnorm_eval(x, gamma.tensor, beta.tensor, running_mean, running_var, eps);
    }
    std::vector<double> batch_mean, batch_var;
    auto y = ad::batchnorm_train(x, gamma.tensor, beta.tensor, eps, &batch_mean, &batch_var);
    const double n = static_cast<double>(x.shape()[0]);
    const double unbias = n > 1.0 ? n / (n - 1.0) : 1.0;
    for (std::size_t j = 0; j < running_mean.size(); ++j) {
      running_mean[j] = (1.0 - momentum) * running_mean[j] + momentum * batch_mean[j];
      running_var[j] = (1.0 - momentum) * running_var[j] + momentum * batch_var[j] * unbias;
    }
    return y;
  }

  [[nodiscard]] std::size_t dim() const { return gamma.tensor.size(); }
};

}  // namespace grafit::nn
