#pragma once

// Category-level retrieval over the embedding memory: plain cosine ranking,
// ranking conditioned on a coarse-class posterior, and the oracle variant
// where the query's true coarse label is known.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "grafit/error.hpp"
#include "grafit/memory.hpp"

namespace grafit::retrieval {

enum class RankingMode { Cosine, Conditional, Oracle };

struct RankingResult {
  std::string query_id;
  std::vector<std::pair<std::size_t, double>> entries;  // (memory index, score), best first
  RankingMode mode = RankingMode::Cosine;
};

inline double cosine(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    dot += a[j] * b[j];
    na += a[j] * a[j];
    nb += b[j] * b[j];
  }
  const double denom = std::sqrt(na) * std::sqrt(nb);
  return denom < 1e-18 ? 0.0 : dot / denom;
}

namespace detail {

// Descending score; ties broken toward the lower memory index.
inline void sort_entries(std::vector<std::pair<std::size_t, double>>& entries) {
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
}

inline std::vector<double> query_cosines(std::span<const double> query,
                                         const memory::EmbeddingMemory& mem) {
  if (mem.size() == 0) throw ContractError("ranking: empty memory");
  if (query.size() != mem.dim) {
    throw ContractError("ranking: query dimension " + std::to_string(query.size()) +
                        " does not match memory dimension " + std::to_string(mem.dim));
  }
  std::vector<double> cos(mem.size());
  for (std::size_t i = 0; i < mem.size(); ++i) cos[i] = cosine(query, mem.row(i));
  return cos;
}

}  // namespace detail

// score_i = cos(q, m_i). If the query is itself a training sample, pass its
// memory index as exclude_self to drop it from the ranking.
inline RankingResult rank_cosine(std::span<const double> query, const memory::EmbeddingMemory& mem,
                                 std::string query_id = {},
                                 std::optional<std::size_t> exclude_self = std::nullopt) {
  const auto cos = detail::query_cosines(query, mem);
  RankingResult result;
  result.query_id = std::move(query_id);
  result.mode = RankingMode::Cosine;
  result.entries.reserve(mem.size());
  for (std::size_t i = 0; i < mem.size(); ++i) {
    if (exclude_self && *exclude_self == i) continue;
    result.entries.emplace_back(i, cos[i]);
  }
  detail::sort_entries(result.entries);
  return result;
}

// score_i = cos(q, m_i) + log(p_c / (1 - p_c)) with p_c the posterior of
// m_i's coarse label, clamped to [epsilon, 1 - epsilon].
inline RankingResult rank_conditional(std::span<const double> query,
                                      const memory::EmbeddingMemory& mem,
                                      const std::map<std::uint32_t, double>& coarse_posterior,
                                      double epsilon = 1e-6, std::string query_id = {},
                                      std::optional<std::size_t> exclude_self = std::nullopt) {
  double total = 0.0;
  for (const auto& [label, p] : coarse_posterior) {
    if (p < 0.0 || p > 1.0) {
      throw ContractError("rank_conditional: posterior of label " + std::to_string(label) +
                          " outside [0, 1]");
    }
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-6) {
    throw ContractError("rank_conditional: posterior sums to " + std::to_string(total));
  }
  const auto cos = detail::query_cosines(query, mem);
  RankingResult result;
  result.query_id = std::move(query_id);
  result.mode = RankingMode::Conditional;
  result.entries.reserve(mem.size());
  for (std::size_t i = 0; i < mem.size(); ++i) {
    if (exclude_self && *exclude_self == i) continue;
    auto it = coarse_posterior.find(mem.coarse_labels[i]);
    if (it == coarse_posterior.end()) {
      throw ContractError("rank_conditional: coarse label " +
                          std::to_string(mem.coarse_labels[i]) + " absent from the posterior");
    }
    const double p = std::clamp(it->second, epsilon, 1.0 - epsilon);
    result.entries.emplace_back(i, cos[i] + std::log(p / (1.0 - p)));
  }
  detail::sort_entries(result.entries);
  return result;
}

// Lexicographic ordering: rows sharing the query's coarse label first (by
// cosine), then all others (by cosine). The limit of rank_conditional as the
// posterior approaches a point mass. Same-coarse scores carry a +4 block
// offset, which dominates the cosine range [-1, 1] and keeps entries sorted
// by score.
inline constexpr double kOracleBlockOffset = 4.0;

inline RankingResult rank_oracle(std::span<const double> query, const memory::EmbeddingMemory& mem,
                                 std::uint32_t query_coarse_label, std::string query_id = {},
                                 std::optional<std::size_t> exclude_self = std::nullopt) {
  const auto cos = detail::query_cosines(query, mem);
  RankingResult result;
  result.query_id = std::move(query_id);
  result.mode = RankingMode::Oracle;
  result.entries.reserve(mem.size());
  for (std::size_t i = 0; i < mem.size(); ++i) {
    if (exclude_self && *exclude_self == i) continue;
    const bool same = mem.coarse_labels[i] == query_coarse_label;
    result.entries.emplace_back(i, cos[i] + (same ? kOracleBlockOffset : 0.0));
  }
  detail::sort_entries(result.entries);
  return result;
}

}  // namespace grafit::retrieval
