#pragma once

// Training objectives: the supervised kNN loss over the embedding memory,
// the self-supervised instance loss against the EMA target network, their
// weighted combination, and the cross-entropy / triplet baselines.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "grafit/data.hpp"
#include "grafit/error.hpp"
#include "grafit/memory.hpp"
#include "grafit/model.hpp"
#include "grafit/retrieval.hpp"
#include "grafit/rng.hpp"
#include "grafit/tensor.hpp"

namespace grafit::losses {

struct LossConfig {
  double sigma = 0.05;
  double lambda = 1.0;
  std::size_t num_augmentations = 4;  // T
  double triplet_margin = 0.2;

  void validate() const {
    if (sigma <= 0.0) throw ConfigError("loss: sigma must be positive");
    if (num_augmentations < 2) throw ConfigError("loss: need at least 2 augmentations");
    if (lambda < 0.0) throw ConfigError("loss: lambda must be non-negative");
    if (triplet_margin < 0.0) throw ConfigError("loss: triplet margin must be non-negative");
  }
};

namespace detail {

// Memory rows enter the graph as constants: a row-normalized copy with no
// gradient tracking. cos(q, m_j) then reduces to a dot product because the
// queries are unit rows already.
inline ad::Tensor normalized_memory_constant(const memory::EmbeddingMemory& mem) {
  std::vector<double> rows = mem.rows;
  for (std::size_t i = 0; i < mem.size(); ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < mem.dim; ++j) sq += rows[i * mem.dim + j] * rows[i * mem.dim + j];
    const double norm = std::sqrt(sq);
    for (std::size_t j = 0; j < mem.dim; ++j) {
      rows[i * mem.dim + j] = norm < ad::kDegenerateNorm ? 0.0 : rows[i * mem.dim + j] / norm;
    }
  }
  return ad::Tensor::leaf({mem.size(), mem.dim}, std::move(rows), false);
}

}  // namespace detail

// Mean over the batch of -log sum_{j: y_j = y_i, j != i} p_{i,j}, with
// p_{i,j} the softmax over all j != i of cos(g(x_i), m_j) / sigma. Computed
// as logsumexp(all) - logsumexp(same class) so no explicit probabilities are
// formed. Gradients flow only through the query embeddings.
inline ad::Tensor knn_loss(const ad::Tensor& queries, std::span<const std::size_t> query_indices,
                           std::span<const std::uint32_t> query_labels,
                           const memory::EmbeddingMemory& mem, double sigma) {
  if (sigma <= 0.0) throw ConfigError("knn_loss: sigma must be positive");
  if (mem.size() < 2) throw ContractError("knn_loss: memory needs at least 2 entries");
  const std::size_t batch = queries.rows();
  const std::size_t n = mem.size();
  if (query_indices.size() != batch || query_labels.size() != batch) {
    throw ContractError("knn_loss: index/label count does not match query batch");
  }
  for (std::size_t b = 0; b < batch; ++b) {
    if (query_indices[b] >= n) {
      throw ContractError("knn_loss: query index " + std::to_string(query_indices[b]) +
                          " outside memory");
    }
    bool has_peer = false;
    for (std::size_t j = 0; j < n && !has_peer; ++j) {
      has_peer = j != query_indices[b] && mem.coarse_labels[j] == query_labels[b];
    }
    if (!has_peer) {
      throw ContractError("knn_loss: isolated class for query index " +
                          std::to_string(query_indices[b]));
    }
  }

  auto memory_rows = detail::normalized_memory_constant(mem);
  auto scores = ad::scalar_mul(ad::matmul_nt(queries, memory_rows), 1.0 / sigma);

  std::vector<std::uint8_t> mask_all(batch * n, 1);
  std::vector<std::uint8_t> mask_same(batch * n, 0);
  for (std::size_t b = 0; b < batch; ++b) {
    mask_all[b * n + query_indices[b]] = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != query_indices[b] && mem.coarse_labels[j] == query_labels[b]) {
        mask_same[b * n + j] = 1;
      }
    }
  }
  auto lse_all = ad::logsumexp_rows(scores, std::move(mask_all));
  auto lse_same = ad::logsumexp_rows(scores, std::move(mask_same));
  return ad::mean(ad::sub(lse_all, lse_same));
}

// Debug view of the neighbor distribution p_{i,.} for one query embedding:
// entry self_index is zero and the rest sums to 1.
inline std::vector<double> knn_neighbor_probabilities(std::span<const double> query,
                                                      std::size_t self_index,
                                                      const memory::EmbeddingMemory& mem,
                                                      double sigma) {
  std::vector<double> logits(mem.size());
  double max_logit = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < mem.size(); ++j) {
    if (j == self_index) continue;
    logits[j] = retrieval::cosine(query, mem.row(j)) / sigma;
    max_logit = std::max(max_logit, logits[j]);
  }
  std::vector<double> p(mem.size(), 0.0);
  double total = 0.0;
  for (std::size_t j = 0; j < mem.size(); ++j) {
    if (j == self_index) continue;
    p[j] = std::exp(logits[j] - max_logit);
    total += p[j];
  }
  for (auto& v : p) v /= total;
  return p;
}

// Core of the instance loss, shared by the per-sample operation and the
// trainer's batched path: -(1 / (T (T - 1))) * sum over ordered pairs
// i != j of cos(q(g(t_i x)), g_target(t_j x)), averaged over the batch.
// online_pred are predictor outputs (gradients flow); target_embed are
// target-network embeddings entering as constants.
inline ad::Tensor instance_loss_from_views(const std::vector<ad::Tensor>& online_pred,
                                           const std::vector<ad::Tensor>& target_embed) {
  const std::size_t t = online_pred.size();
  if (t < 2 || target_embed.size() != t) {
    throw ConfigError("instance_loss: need at least 2 views on both branches");
  }
  ad::Tensor acc;
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = 0; j < t; ++j) {
      if (i == j) continue;
      auto pair_mean = ad::mean(ad::cosine_rows(online_pred[i], target_embed[j]));
      acc = acc.defined() ? ad::add(acc, pair_mean) : pair_mean;
    }
  }
  return ad::scalar_mul(acc, -1.0 / static_cast<double>(t * (t - 1)));
}

// Per-sample instance loss. View 0 is the identity view; views 1..T-1 are
// drawn from the augmenter.
inline ad::Tensor instance_loss(model::ModelBundle& bundle, std::span<const double> x,
                                const data::AugmentationConfig& aug, std::size_t t, Rng& rng,
                                bool training = true) {
  if (t < 2) throw ConfigError("instance_loss: T must be at least 2");
  std::vector<ad::Tensor> online_pred, target_embed;
  online_pred.reserve(t);
  target_embed.reserve(t);
  for (std::size_t v = 0; v < t; ++v) {
    std::vector<double> view =
        v == 0 ? std::vector<double>(x.begin(), x.end()) : data::augment(x, aug, rng);
    auto leaf = ad::Tensor::leaf({1, view.size()}, view, false);
    auto g = bundle.forward_embed(leaf, false, training);
    online_pred.push_back(bundle.forward_predictor(g, training));
    target_embed.push_back(bundle.forward_embed(leaf, true, training));
  }
  return instance_loss_from_views(online_pred, target_embed);
}

// knn + lambda * inst; lambda = 1 is the plain unweighted sum.
inline ad::Tensor total_loss(const ad::Tensor& knn, const ad::Tensor& inst, double lambda) {
  if (knn.size() != 1 || inst.size() != 1) {
    throw ContractError("total_loss: inputs must be scalars");
  }
  return ad::add(knn, ad::scalar_mul(inst, lambda));
}

// Mean negative log-softmax of the true class, via stabilized log-sum-exp.
inline ad::Tensor cross_entropy_loss(const ad::Tensor& logits,
                                     std::span<const std::uint32_t> labels) {
  const std::size_t batch = logits.rows();
  const std::size_t classes = logits.cols();
  if (labels.size() != batch) {
    throw ContractError("cross_entropy_loss: label count does not match batch");
  }
  std::vector<std::uint8_t> mask_true(batch * classes, 0);
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] >= classes) {
      throw ContractError("cross_entropy_loss: label " + std::to_string(labels[b]) +
                          " out of range for " + std::to_string(classes) + " classes");
    }
    mask_true[b * classes + labels[b]] = 1;
  }
  auto lse_all = ad::logsumexp_rows(logits, std::vector<std::uint8_t>(batch * classes, 1));
  // log-sum-exp over a single allowed entry is that entry itself.
  auto true_logit = ad::logsumexp_rows(logits, std::move(mask_true));
  return ad::mean(ad::sub(lse_all, true_logit));
}

// Mean over the batch of max(0, margin - cos(a, p) + cos(a, n)).
inline ad::Tensor triplet_loss(const ad::Tensor& anchor, const ad::Tensor& positive,
                               const ad::Tensor& negative, double margin) {
  auto cos_ap = ad::cosine_rows(anchor, positive);
  auto cos_an = ad::cosine_rows(anchor, negative);
  return ad::mean(ad::relu(ad::scalar_add(ad::sub(cos_an, cos_ap), margin)));
}

}  // namespace grafit::losses
