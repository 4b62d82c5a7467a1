#pragma once

// Shared evaluation drivers: embedding test queries, building rankings in
// each mode, and computing retrieval mAP / kNN top-1 on a dataset split.

#include <cstdint>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "grafit/classify.hpp"
#include "grafit/data.hpp"
#include "grafit/memory.hpp"
#include "grafit/metrics.hpp"
#include "grafit/model.hpp"
#include "grafit/retrieval.hpp"

namespace grafit::evaluate {

// Runs fn(i) for i in [0, n) across the given number of worker threads.
// Work is chunked by index, so outputs keyed by i stay deterministic.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t workers = std::min(threads, n);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([w, workers, n, &fn]() {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

struct QuerySet {
  std::vector<std::size_t> rows;  // dataset indices
  std::vector<double> embeddings;
  std::size_t dim = 0;

  [[nodiscard]] std::span<const double> embedding(std::size_t i) const {
    return {embeddings.data() + i * dim, dim};
  }
  [[nodiscard]] std::size_t size() const { return rows.size(); }
};

template <typename Model>
QuerySet embed_split(Model& m, const data::HierarchicalDataset& ds, data::Split split) {
  QuerySet q;
  q.rows = ds.indices_of(split);
  std::vector<double> features;
  features.reserve(q.rows.size() * ds.dim);
  for (auto i : q.rows) {
    auto row = ds.feature_row(i);
    features.insert(features.end(), row.begin(), row.end());
  }
  q.embeddings = model::embed_rows(m, features, q.rows.size(), ds.dim);
  q.dim = q.rows.empty() ? 0 : q.embeddings.size() / q.rows.size();
  return q;
}

// Ranks every query against the memory in the requested mode. Conditional
// mode derives the coarse posterior from a kNN classification of the query.
inline std::vector<metrics::RankedQuery> rank_queries(const QuerySet& queries,
                                                      const data::HierarchicalDataset& ds,
                                                      const memory::EmbeddingMemory& mem,
                                                      retrieval::RankingMode mode,
                                                      const classify::KnnConfig& posterior_cfg,
                                                      double epsilon = 1e-6,
                                                      std::size_t threads = 1) {
  std::vector<metrics::RankedQuery> out(queries.size());
  parallel_for(queries.size(), threads, [&](std::size_t i) {
    const auto row = queries.rows[i];
    const auto embedding = queries.embedding(i);
    const std::string id = "q" + std::to_string(row);
    switch (mode) {
      case retrieval::RankingMode::Cosine:
        out[i].ranking = retrieval::rank_cosine(embedding, mem, id);
        break;
      case retrieval::RankingMode::Conditional: {
        auto posterior =
            classify::knn_classify(embedding, mem, classify::LabelLevel::Coarse, posterior_cfg);
        // Coarse classes absent from the top-k carry zero posterior mass;
        // the clamp in rank_conditional keeps their log-odds finite.
        for (auto label : mem.coarse_labels) posterior.emplace(label, 0.0);
        out[i].ranking = retrieval::rank_conditional(embedding, mem, posterior, epsilon, id);
        break;
      }
      case retrieval::RankingMode::Oracle:
        out[i].ranking = retrieval::rank_oracle(embedding, mem, ds.coarse_labels[row], id);
        break;
    }
    out[i].fine_label = ds.fine_labels[row];
  });
  return out;
}

inline const char* mode_name(retrieval::RankingMode mode) {
  switch (mode) {
    case retrieval::RankingMode::Cosine: return "cosine";
    case retrieval::RankingMode::Conditional: return "conditional";
    case retrieval::RankingMode::Oracle: return "oracle";
  }
  return "?";
}

// Fine-label retrieval mAP of a query set under one ranking mode.
inline metrics::EvalReport map_report(const QuerySet& queries, const data::HierarchicalDataset& ds,
                                      const memory::EmbeddingMemory& mem,
                                      retrieval::RankingMode mode,
                                      const classify::KnnConfig& posterior_cfg,
                                      double epsilon = 1e-6, std::size_t threads = 1) {
  auto ranked = rank_queries(queries, ds, mem, mode, posterior_cfg, epsilon, threads);
  return metrics::mean_average_precision(ranked, mem.fine_labels, mode_name(mode));
}

// kNN top-1 accuracy of a query set at the given label level.
inline double knn_top1(const QuerySet& queries, const data::HierarchicalDataset& ds,
                       const memory::EmbeddingMemory& mem, classify::LabelLevel level,
                       const classify::KnnConfig& cfg, std::size_t threads = 1) {
  std::vector<std::uint32_t> pred(queries.size()), truth(queries.size());
  parallel_for(queries.size(), threads, [&](std::size_t i) {
    auto posterior = classify::knn_classify(queries.embedding(i), mem, level, cfg);
    pred[i] = classify::predict_label(posterior);
    truth[i] = level == classify::LabelLevel::Coarse ? ds.coarse_labels[queries.rows[i]]
                                                     : ds.fine_labels[queries.rows[i]];
  });
  return metrics::top1_accuracy(pred, truth);
}

}  // namespace grafit::evaluate
