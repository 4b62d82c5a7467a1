#pragma once

// Embedding-space analyses: PCA cumulative energy, linear probing of frozen
// features, and the random-sub-label separability study.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <vector>

#include "grafit/classify.hpp"
#include "grafit/data.hpp"
#include "grafit/error.hpp"
#include "grafit/losses.hpp"
#include "grafit/memory.hpp"
#include "grafit/metrics.hpp"
#include "grafit/model.hpp"
#include "grafit/nn.hpp"
#include "grafit/trainer.hpp"

namespace grafit::analysis {

struct PcaCurve {
  std::vector<double> eigenvalues;        // descending, non-negative
  std::vector<double> cumulative_energy;  // entry i = sum_{j<=i} / total
  std::size_t dim = 0;
};

namespace detail {

// Cyclic Jacobi eigenvalue iteration for a symmetric matrix (row-major).
// Deterministic; fine for the small covariance sizes used here.
inline std::vector<double> symmetric_eigenvalues(std::vector<double> a, std::size_t d) {
  auto off_norm = [&a, d]() {
    double s = 0.0;
    for (std::size_t p = 0; p < d; ++p) {
      for (std::size_t q = p + 1; q < d; ++q) s += a[p * d + q] * a[p * d + q];
    }
    return std::sqrt(2.0 * s);
  };
  double frob = 0.0;
  for (double v : a) frob += v * v;
  frob = std::sqrt(frob);
  const double tol = std::max(1e-300, 1e-14 * frob);

  for (int sweep = 0; sweep < 100 && off_norm() > tol; ++sweep) {
    for (std::size_t p = 0; p < d; ++p) {
      for (std::size_t q = p + 1; q < d; ++q) {
        const double apq = a[p * d + q];
        if (std::abs(apq) < 1e-300) continue;
        const double app = a[p * d + p], aqq = a[q * d + q];
        const double theta = 0.5 * (aqq - app) / apq;
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < d; ++k) {
          const double akp = a[k * d + p], akq = a[k * d + q];
          a[k * d + p] = c * akp - s * akq;
          a[k * d + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < d; ++k) {
          const double apk = a[p * d + k], aqk = a[q * d + k];
          a[p * d + k] = c * apk - s * aqk;
          a[q * d + k] = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> eig(d);
  for (std::size_t i = 0; i < d; ++i) eig[i] = a[i * d + i];
  std::sort(eig.begin(), eig.end(), std::greater<>());
  return eig;
}

}  // namespace detail

// Mean-centered covariance eigendecomposition of an N x d embedding matrix.
inline PcaCurve pca_energy(const std::vector<double>& embeddings, std::size_t n, std::size_t d) {
  if (n < 2) throw ContractError("pca_energy: need at least 2 rows");
  if (embeddings.size() != n * d) throw ContractError("pca_energy: size does not match n * d");

  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) mean[j] += embeddings[i * d + j];
  }
  for (auto& m : mean) m /= static_cast<double>(n);

  std::vector<double> cov(d * d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < d; ++p) {
      const double xp = embeddings[i * d + p] - mean[p];
      for (std::size_t q = p; q < d; ++q) {
        cov[p * d + q] += xp * (embeddings[i * d + q] - mean[q]);
      }
    }
  }
  for (std::size_t p = 0; p < d; ++p) {
    for (std::size_t q = p; q < d; ++q) {
      cov[p * d + q] /= static_cast<double>(n - 1);
      cov[q * d + p] = cov[p * d + q];
    }
  }

  PcaCurve curve;
  curve.dim = d;
  curve.eigenvalues = detail::symmetric_eigenvalues(std::move(cov), d);
  double total = 0.0;
  for (auto& ev : curve.eigenvalues) {
    ev = std::max(0.0, ev);  // covariance is PSD up to rounding
    total += ev;
  }
  if (total <= 0.0) {
    throw ContractError("pca_energy: degenerate input, all rows identical");
  }
  curve.cumulative_energy.resize(d);
  double acc = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    acc += curve.eigenvalues[i];
    curve.cumulative_energy[i] = acc / total;
  }
  return curve;
}

struct ProbeConfig {
  std::size_t epochs = 100;
  double lr = 0.01;
  std::size_t batch_size = 64;
  double momentum = 0.9;
  std::uint64_t seed = 1;
};

// Fits a linear classifier on fixed embeddings with cross-entropy and the
// trainer's optimizer under a cosine schedule.
inline nn::LinearLayer fit_linear_head(const std::vector<double>& embeds, std::size_t n,
                                       std::size_t e_dim, std::span<const std::uint32_t> labels,
                                       std::size_t num_classes, const ProbeConfig& cfg) {
  if (labels.size() != n) throw ContractError("probe: label count does not match rows");
  Rng root(cfg.seed);
  Rng init_rng = root.stream("probe_init");
  auto head = nn::LinearLayer::init("probe", e_dim, num_classes, init_rng, true);
  if (cfg.epochs == 0 || n == 0) return head;

  std::vector<nn::Parameter*> params = {&head.weight, &head.bias};
  trainer::SgdOptimizer optimizer{cfg.momentum, 0.0, {}};
  const std::size_t batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.epochs * batches;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng = root.stream("probe_shuffle", epoch);
    shuffle_rng.shuffle(order);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t b = std::min(cfg.batch_size, n - start);
      std::vector<double> x(b * e_dim);
      std::vector<std::uint32_t> y(b);
      for (std::size_t k = 0; k < b; ++k) {
        const std::size_t i = order[start + k];
        std::copy_n(embeds.begin() + static_cast<std::ptrdiff_t>(i * e_dim), e_dim,
                    x.begin() + static_cast<std::ptrdiff_t>(k * e_dim));
        y[k] = labels[i];
      }
      auto logits = head.forward(ad::Tensor::leaf({b, e_dim}, std::move(x), false));
      auto loss = losses::cross_entropy_loss(logits, y);
      for (auto* p : params) p->zero_grad();
      ad::backward_grad(loss);
      optimizer.step(params, trainer::cosine_lr(step, total_steps, cfg.lr));
      step++;
    }
  }
  return head;
}

inline std::vector<std::uint32_t> head_predictions(nn::LinearLayer& head,
                                                   const std::vector<double>& embeds,
                                                   std::size_t n, std::size_t e_dim) {
  std::vector<std::uint32_t> pred(n);
  if (n == 0) return pred;
  auto logits = head.forward(ad::Tensor::leaf({n, e_dim}, embeds, false));
  const auto& v = logits.values();
  const std::size_t c = head.out_dim();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (v[i * c + j] > v[i * c + best]) best = j;
    }
    pred[i] = static_cast<std::uint32_t>(best);
  }
  return pred;
}

namespace detail {

// Raw trunk features of one split: the probing protocols discard the
// projector and fit classifiers directly on the trunk output.
inline std::vector<double> trunk_split(model::TestModel& m, const data::HierarchicalDataset& ds,
                                       data::Split split) {
  const auto rows = ds.indices_of(split);
  if (rows.empty()) return {};
  std::vector<double> features;
  features.reserve(rows.size() * ds.dim);
  for (auto i : rows) {
    auto row = ds.feature_row(i);
    features.insert(features.end(), row.begin(), row.end());
  }
  auto x = ad::Tensor::leaf({rows.size(), ds.dim}, std::move(features), false);
  return m.forward_trunk(x).values();
}

}  // namespace detail

// Fits a linear head on frozen train trunk features at the given label level
// and reports held-out test top-1.
inline double linear_probe(model::TestModel& frozen, const data::HierarchicalDataset& ds,
                           classify::LabelLevel level, const ProbeConfig& cfg) {
  const auto train_rows = ds.indices_of(data::Split::Train);
  const auto test_rows = ds.indices_of(data::Split::Test);
  const auto train_embeds = detail::trunk_split(frozen, ds, data::Split::Train);
  const auto test_embeds = detail::trunk_split(frozen, ds, data::Split::Test);
  const std::size_t e_dim = frozen.config.trunk_out_dim();

  const auto& source = level == classify::LabelLevel::Coarse ? ds.coarse_labels : ds.fine_labels;
  std::vector<std::uint32_t> train_labels, test_labels;
  for (auto i : train_rows) train_labels.push_back(source[i]);
  for (auto i : test_rows) test_labels.push_back(source[i]);
  const std::size_t classes =
      level == classify::LabelLevel::Coarse ? ds.num_coarse() : ds.num_fine();

  auto head = fit_linear_head(train_embeds, train_rows.size(), e_dim, train_labels, classes, cfg);
  auto pred = head_predictions(head, test_embeds, test_rows.size(), e_dim);
  return metrics::top1_accuracy(pred, test_labels);
}

struct SeparabilityResult {
  std::vector<double> plain;        // per-trial train top-1
  std::vector<double> conditioned;  // per-trial train top-1 with coarse conditioning
  double mean_plain = 0.0, std_plain = 0.0;
  double mean_conditioned = 0.0, std_conditioned = 0.0;
};

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  const double n = static_cast<double>(xs.size());
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  const double sd = xs.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
  return {mean, sd};
}

}  // namespace detail

// The random-sub-label separability protocol: for each trial, split every
// coarse class evenly into two synthetic sub-labels, fit a linear probe on
// the frozen train trunk features, and measure train top-1 -- plain, and
// with the prediction conditioned on a kNN coarse posterior over the same
// features.
inline SeparabilityResult separability_run(model::TestModel& frozen,
                                           const data::HierarchicalDataset& ds,
                                           std::size_t num_trials, const ProbeConfig& cfg,
                                           const classify::KnnConfig& knn_cfg = {}) {
  const auto train_rows = ds.indices_of(data::Split::Train);
  const std::size_t n = train_rows.size();
  const auto embeds = detail::trunk_split(frozen, ds, data::Split::Train);
  const std::size_t e_dim = frozen.config.trunk_out_dim();
  const std::size_t num_coarse = ds.num_coarse();
  const std::size_t num_synthetic = 2 * num_coarse;

  // Memory over the same frozen embeddings feeds the coarse kNN posterior.
  memory::EmbeddingMemory mem;
  mem.dim = e_dim;
  mem.rows = embeds;
  for (auto i : train_rows) {
    mem.coarse_labels.push_back(ds.coarse_labels[i]);
    mem.fine_labels.push_back(ds.fine_labels[i]);
  }
  std::vector<std::uint32_t> synthetic_hierarchy(num_synthetic);
  for (std::size_t f = 0; f < num_synthetic; ++f) {
    synthetic_hierarchy[f] = static_cast<std::uint32_t>(f / 2);
  }

  // The leave-one-out coarse posterior per training sample does not depend
  // on the trial.
  std::vector<classify::Posterior> posteriors(n);
  for (std::size_t k = 0; k < n; ++k) {
    posteriors[k] =
        classify::knn_classify(mem.row(k), mem, classify::LabelLevel::Coarse, knn_cfg, k);
  }

  const auto trials = data::random_fine_split(ds, num_trials, cfg.seed);
  SeparabilityResult result;
  for (std::size_t t = 0; t < trials.size(); ++t) {
    std::vector<std::uint32_t> labels(n);
    for (std::size_t k = 0; k < n; ++k) labels[k] = trials[t][train_rows[k]];

    ProbeConfig trial_cfg = cfg;
    trial_cfg.seed = Rng(cfg.seed).stream("probe_trial", t).next_u64();
    auto head = fit_linear_head(embeds, n, e_dim, labels, num_synthetic, trial_cfg);
    auto pred = head_predictions(head, embeds, n, e_dim);
    result.plain.push_back(metrics::top1_accuracy(pred, labels));

    auto logits = head.forward(ad::Tensor::leaf({n, e_dim}, embeds, false));
    const auto& lv = logits.values();
    std::size_t correct = 0;
    for (std::size_t k = 0; k < n; ++k) {
      std::map<std::uint32_t, double> fine_scores;
      for (std::size_t f = 0; f < num_synthetic; ++f) {
        fine_scores[static_cast<std::uint32_t>(f)] = lv[k * num_synthetic + f];
      }
      auto combined =
          classify::coarse_conditioned_classify(fine_scores, posteriors[k], synthetic_hierarchy);
      if (classify::predict_label(combined) == labels[k]) correct++;
    }
    result.conditioned.push_back(static_cast<double>(correct) / static_cast<double>(n));
  }
  std::tie(result.mean_plain, result.std_plain) = detail::mean_std(result.plain);
  std::tie(result.mean_conditioned, result.std_conditioned) = detail::mean_std(result.conditioned);
  return result;
}

}  // namespace grafit::analysis
