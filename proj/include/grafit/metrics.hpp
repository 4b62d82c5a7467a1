#pragma once

// Retrieval and classification metrics: non-interpolated average precision,
// mean average precision with fine-label relevance, and top-1 accuracy.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "grafit/error.hpp"
#include "grafit/retrieval.hpp"

namespace grafit::metrics {

enum class Metric { MAP, Top1 };

struct EvalReport {
  std::string level;
  Metric metric = Metric::MAP;
  double value = 0.0;
  std::size_t num_queries = 0;
  std::size_t num_skipped = 0;
  std::string mode;
};

// AP = (1/R) * sum over relevant ranks r of precision@r. Relevance is
// indexed by memory index.
inline double average_precision(const retrieval::RankingResult& ranking,
                                const std::vector<std::uint8_t>& relevance) {
  std::size_t total_relevant = 0;
  for (const auto& [index, score] : ranking.entries) {
    if (index >= relevance.size()) {
      throw ContractError("average_precision: memory index " + std::to_string(index) +
                          " outside relevance table");
    }
    if (relevance[index]) total_relevant++;
  }
  if (total_relevant == 0) {
    throw ContractError("average_precision: undefined, query has zero relevant items");
  }
  double ap = 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < ranking.entries.size(); ++r) {
    if (relevance[ranking.entries[r].first]) {
      hits++;
      ap += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  }
  return ap / static_cast<double>(total_relevant);
}

// A ranked query together with its fine label for relevance judgment.
struct RankedQuery {
  retrieval::RankingResult ranking;
  std::uint32_t fine_label = 0;
};

// Mean of per-query AP where an item is relevant iff it shares the query's
// fine label. Queries with no relevant item are skipped and counted.
inline EvalReport mean_average_precision(std::span<const RankedQuery> queries,
                                         const std::vector<std::uint32_t>& memory_fine_labels,
                                         std::string mode = {}) {
  if (queries.empty()) throw ContractError("mean_average_precision: no queries");
  double total = 0.0;
  std::size_t evaluated = 0, skipped = 0;
  for (const auto& q : queries) {
    std::vector<std::uint8_t> relevance(memory_fine_labels.size(), 0);
    bool any = false;
    for (std::size_t i = 0; i < memory_fine_labels.size(); ++i) {
      if (memory_fine_labels[i] == q.fine_label) {
        relevance[i] = 1;
        any = true;
      }
    }
    // Self-exclusion happens in the ranking; a query whose class has no
    // other member yields zero relevant entries and is skipped.
    if (any) {
      std::size_t reachable = 0;
      for (const auto& [index, score] : q.ranking.entries) {
        if (relevance[index]) reachable++;
      }
      any = reachable > 0;
    }
    if (!any) {
      skipped++;
      continue;
    }
    total += average_precision(q.ranking, relevance);
    evaluated++;
  }
  if (evaluated == 0) throw ContractError("mean_average_precision: every query was skipped");
  EvalReport report;
  report.level = "fine";
  report.metric = Metric::MAP;
  report.value = total / static_cast<double>(evaluated);
  report.num_queries = evaluated;
  report.num_skipped = skipped;
  report.mode = std::move(mode);
  return report;
}

inline double top1_accuracy(std::span<const std::uint32_t> predictions,
                            std::span<const std::uint32_t> truths) {
  if (predictions.size() != truths.size()) {
    throw ContractError("top1_accuracy: " + std::to_string(predictions.size()) +
                        " predictions vs " + std::to_string(truths.size()) + " truths");
  }
  if (predictions.empty()) throw ContractError("top1_accuracy: empty input");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i] == truths[i]) correct++;
  }
  return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

}  // namespace grafit::metrics
