#pragma once

// On-the-fly kNN classification with exponentially decreasing neighbor
// weighting, cross-validated k, and coarse-conditioned fine classification.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "grafit/error.hpp"
#include "grafit/memory.hpp"
#include "grafit/retrieval.hpp"

namespace grafit::classify {

enum class LabelLevel { Coarse, Fine };

struct KnnConfig {
  std::size_t k = 10;
  double sigma = 0.05;
  std::vector<std::size_t> k_grid = {10, 15, 20, 25, 30};
};

using Posterior = std::map<std::uint32_t, double>;

inline std::uint32_t predict_label(const Posterior& posterior) {
  if (posterior.empty()) throw ContractError("predict_label: empty posterior");
  // std::map iterates labels ascending, so > implements the lowest-label
  // tie-break.
  auto best = posterior.begin();
  for (auto it = posterior.begin(); it != posterior.end(); ++it) {
    if (it->second > best->second) best = it;
  }
  return best->first;
}

// p(y) proportional to sum over the k nearest rows with label y of
// exp(cos(q, m_j) / sigma), normalized to sum to 1.
inline Posterior knn_classify(std::span<const double> query, const memory::EmbeddingMemory& mem,
                              LabelLevel level, const KnnConfig& cfg,
                              std::optional<std::size_t> exclude_self = std::nullopt) {
  if (cfg.sigma <= 0.0) throw ConfigError("knn_classify: sigma must be positive");
  if (cfg.k < 1) throw ConfigError("knn_classify: k must be at least 1");
  if (mem.size() == 0) throw ContractError("knn_classify: empty memory");
  if (level == LabelLevel::Fine && !mem.has_fine()) {
    throw ContractError("knn_classify: memory has no fine labels");
  }
  const std::size_t available = mem.size() - (exclude_self ? 1 : 0);
  if (cfg.k > available) {
    throw ContractError("knn_classify: k = " + std::to_string(cfg.k) + " exceeds " +
                        std::to_string(available) + " available memory rows");
  }

  std::vector<std::pair<std::size_t, double>> scored;
  scored.reserve(mem.size());
  for (std::size_t i = 0; i < mem.size(); ++i) {
    if (exclude_self && *exclude_self == i) continue;
    scored.emplace_back(i, retrieval::cosine(query, mem.row(i)));
  }
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(cfg.k),
                    scored.end(), [](const auto& a, const auto& b) {
                      if (a.second != b.second) return a.second > b.second;
                      return a.first < b.first;
                    });

  // Stabilized accumulation: weights divided by the max keep exponents tame
  // at small sigma and cancel in the normalization.
  double max_cos = scored[0].second;
  Posterior posterior;
  double total = 0.0;
  const auto& labels = level == LabelLevel::Coarse ? mem.coarse_labels : mem.fine_labels;
  for (std::size_t r = 0; r < cfg.k; ++r) {
    const double w = std::exp((scored[r].second - max_cos) / cfg.sigma);
    posterior[labels[scored[r].first]] += w;
    total += w;
  }
  for (auto& [label, p] : posterior) p /= total;
  return posterior;
}

// Validation sample for k selection: an embedded query, its true label, and
// (when it is a training sample) its own memory index to exclude.
struct ValidationSample {
  std::vector<double> embedding;
  std::uint32_t label = 0;
  std::optional<std::size_t> memory_index;
};

// Returns the grid value with the highest validation top-1; ties break
// toward smaller k.
inline std::size_t select_k(const memory::EmbeddingMemory& mem,
                            std::span<const ValidationSample> validation, LabelLevel level,
                            const KnnConfig& cfg) {
  if (cfg.k_grid.empty()) throw ConfigError("select_k: empty k grid");
  if (validation.empty()) throw ContractError("select_k: empty validation set");
  auto grid = cfg.k_grid;
  std::sort(grid.begin(), grid.end());
  std::size_t best_k = 0;
  std::size_t best_correct = 0;
  bool have_best = false;
  for (auto k : grid) {
    KnnConfig trial = cfg;
    trial.k = k;
    std::size_t correct = 0;
    for (const auto& sample : validation) {
      auto posterior = knn_classify(sample.embedding, mem, level, trial, sample.memory_index);
      if (predict_label(posterior) == sample.label) correct++;
    }
    if (!have_best || correct > best_correct) {
      best_k = k;
      best_correct = correct;
      have_best = true;
    }
  }
  return best_k;
}

// combined(f) proportional to softmax(fine_scores)(f) * coarse_posterior(parent(f)),
// normalized over fine labels.
inline Posterior coarse_conditioned_classify(const std::map<std::uint32_t, double>& fine_scores,
                                             const Posterior& coarse_posterior,
                                             const std::vector<std::uint32_t>& hierarchy) {
  if (fine_scores.empty()) throw ContractError("coarse_conditioned_classify: no fine scores");
  double max_score = fine_scores.begin()->second;
  for (const auto& [f, s] : fine_scores) max_score = std::max(max_score, s);

  Posterior combined;
  double total = 0.0;
  for (const auto& [fine, score] : fine_scores) {
    if (fine >= hierarchy.size()) {
      throw ContractError("coarse_conditioned_classify: fine label " + std::to_string(fine) +
                          " has no parent in the hierarchy");
    }
    auto it = coarse_posterior.find(hierarchy[fine]);
    const double p_coarse = it == coarse_posterior.end() ? 0.0 : it->second;
    const double value = std::exp(score - max_score) * p_coarse;
    combined[fine] = value;
    total += value;
  }
  if (total <= 0.0) {
    throw ContractError("coarse_conditioned_classify: coarse posterior annihilates every fine label");
  }
  for (auto& [fine, p] : combined) p /= total;
  return combined;
}

}  // namespace grafit::classify
