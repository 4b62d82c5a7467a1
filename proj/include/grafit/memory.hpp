#pragma once

// Training-set embedding memory: one row per training sample, averaged with
// fresh embeddings during training and rebuilt exactly at test time.

#include <cstdint>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "grafit/data.hpp"
#include "grafit/error.hpp"
#include "grafit/io.hpp"
#include "grafit/model.hpp"

namespace grafit::memory {

struct EmbeddingMemory {
  std::size_t dim = 0;
  std::vector<double> rows;  // row-major, size() == count * dim
  std::vector<std::uint32_t> coarse_labels;
  std::vector<std::uint32_t> fine_labels;  // empty when the fine level is absent
  std::uint64_t generation = 0;

  [[nodiscard]] std::size_t size() const { return coarse_labels.size(); }
  [[nodiscard]] bool has_fine() const { return !fine_labels.empty(); }

  [[nodiscard]] std::span<const double> row(std::size_t i) const {
    return {rows.data() + i * dim, dim};
  }
};

// Embeds every training sample of the dataset under the given model in
// evaluation mode. Memory index k corresponds to the k-th training sample in
// dataset order.
template <typename Model>
EmbeddingMemory init_memory(Model& m, const data::HierarchicalDataset& ds) {
  EmbeddingMemory mem;
  const auto train = ds.indices_of(data::Split::Train);
  mem.dim = 0;
  std::vector<double> features;
  features.reserve(train.size() * ds.dim);
  for (auto i : train) {
    auto row = ds.feature_row(i);
    features.insert(features.end(), row.begin(), row.end());
    mem.coarse_labels.push_back(ds.coarse_labels[i]);
    mem.fine_labels.push_back(ds.fine_labels[i]);
  }
  mem.rows = model::embed_rows(m, features, train.size(), ds.dim);
  mem.dim = train.empty() ? 0 : mem.rows.size() / train.size();
  mem.generation = 0;
  return mem;
}

// m_i <- (m_i + g_i) / 2 for each batch row. Rows are intentionally not
// re-normalized; the cosine downstream handles non-unit rows and the
// test-time rebuild restores unit norms.
inline void update_minibatch(EmbeddingMemory& mem, std::span<const std::size_t> indices,
                             std::span<const double> fresh) {
  if (fresh.size() != indices.size() * mem.dim) {
    throw ContractError("update_minibatch: fresh embedding count does not match index count");
  }
  std::unordered_set<std::size_t> seen;
  for (auto idx : indices) {
    if (idx >= mem.size()) {
      throw ContractError("update_minibatch: index " + std::to_string(idx) + " out of range");
    }
    if (!seen.insert(idx).second) {
      throw ContractError("update_minibatch: duplicate index " + std::to_string(idx) +
                          " in one batch");
    }
  }
  for (std::size_t k = 0; k < indices.size(); ++k) {
    double* m = mem.rows.data() + indices[k] * mem.dim;
    const double* g = fresh.data() + k * mem.dim;
    for (std::size_t j = 0; j < mem.dim; ++j) m[j] = 0.5 * (m[j] + g[j]);
  }
  mem.generation++;
}

// Recomputes every row as the evaluation-mode embedding of its sample under
// the current weights. Idempotent.
template <typename Model>
void rebuild(EmbeddingMemory& mem, Model& m, const data::HierarchicalDataset& ds) {
  const auto train = ds.indices_of(data::Split::Train);
  if (train.size() != mem.size()) {
    throw ContractError("rebuild: memory holds " + std::to_string(mem.size()) +
                        " rows but dataset has " + std::to_string(train.size()) +
                        " training samples");
  }
  std::vector<double> features;
  features.reserve(train.size() * ds.dim);
  for (auto i : train) {
    auto row = ds.feature_row(i);
    features.insert(features.end(), row.begin(), row.end());
  }
  mem.rows = model::embed_rows(m, features, train.size(), ds.dim);
  mem.generation++;
}

// --- "GEMB" embedding-store format ------------------------------------------

inline constexpr std::uint32_t kEmbeddingStoreVersion = 1;

inline void save_embedding_store(const std::string& path, const EmbeddingMemory& mem) {
  auto os = io::open_output(path);
  io::write_bytes(os, "GEMB", 4);
  io::write_pod<std::uint32_t>(os, kEmbeddingStoreVersion);
  io::write_pod<std::uint64_t>(os, mem.size());
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(mem.dim));
  io::write_pod<std::uint8_t>(os, mem.has_fine() ? 2 : 1);
  io::write_f64s(os, mem.rows);
  for (auto l : mem.coarse_labels) io::write_pod<std::uint32_t>(os, l);
  if (mem.has_fine()) {
    for (auto l : mem.fine_labels) io::write_pod<std::uint32_t>(os, l);
  }
}

inline EmbeddingMemory load_embedding_store(const std::string& path) {
  auto is = io::open_input(path);
  io::Reader r(is, path);
  r.expect_magic("GEMB");
  const auto version = r.read_pod<std::uint32_t>();
  if (version != kEmbeddingStoreVersion) {
    throw DataError(path + ": unsupported embedding store version " + std::to_string(version));
  }
  EmbeddingMemory mem;
  const auto n = r.read_pod<std::uint64_t>();
  mem.dim = r.read_pod<std::uint32_t>();
  const auto levels = r.read_pod<std::uint8_t>();
  if (levels < 1 || levels > 2) {
    throw DataError(path + ": label-level count must be 1 or 2, got " + std::to_string(levels));
  }
  mem.rows = r.read_f64s(n * mem.dim);
  mem.coarse_labels.resize(n);
  for (auto& l : mem.coarse_labels) l = r.read_pod<std::uint32_t>();
  if (levels == 2) {
    mem.fine_labels.resize(n);
    for (auto& l : mem.fine_labels) l = r.read_pod<std::uint32_t>();
  }
  return mem;
}

}  // namespace grafit::memory
