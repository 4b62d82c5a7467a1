#pragma once

// Synthetic coarse/fine datasets, vector augmentations, random sub-label
// splits, and dataset serialization.

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "grafit/error.hpp"
#include "grafit/io.hpp"
#include "grafit/rng.hpp"

namespace grafit::data {

enum class Split : std::uint8_t { Train = 0, Test = 1 };

inline constexpr std::uint32_t kNoLabel = 0xffffffffu;

// Feature vectors with paired (coarse, fine) labels, where every fine class
// refines exactly one coarse class.
struct HierarchicalDataset {
  std::vector<double> features;  // row-major, size() == n * dim
  std::size_t dim = 0;
  std::vector<std::uint32_t> coarse_labels;
  std::vector<std::uint32_t> fine_labels;
  std::vector<std::uint32_t> hierarchy;  // fine label -> parent coarse label
  std::vector<Split> split;
  std::uint64_t seed = 0;

  [[nodiscard]] std::size_t size() const { return coarse_labels.size(); }
  [[nodiscard]] std::size_t num_coarse() const {
    return hierarchy.empty() ? 0 : 1 + *std::max_element(hierarchy.begin(), hierarchy.end());
  }
  [[nodiscard]] std::size_t num_fine() const { return hierarchy.size(); }

  [[nodiscard]] std::span<const double> feature_row(std::size_t i) const {
    return {features.data() + i * dim, dim};
  }

  [[nodiscard]] std::vector<std::size_t> indices_of(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i) {
      if (split[i] == s) out.push_back(i);
    }
    return out;
  }

  void validate() const {
    const std::size_t n = size();
    if (features.size() != n * dim || fine_labels.size() != n || split.size() != n) {
      throw DataError("dataset: inconsistent field sizes");
    }
    std::vector<std::size_t> train_per_fine(num_fine(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      if (fine_labels[i] >= hierarchy.size()) {
        throw DataError("dataset: fine label " + std::to_string(fine_labels[i]) + " out of range");
      }
      if (hierarchy[fine_labels[i]] != coarse_labels[i]) {
        throw DataError("dataset: fine label " + std::to_string(fine_labels[i]) +
                        " mapped to two coarse parents (" +
                        std::to_string(hierarchy[fine_labels[i]]) + " and " +
                        std::to_string(coarse_labels[i]) + ")");
      }
      if (split[i] == Split::Train) train_per_fine[fine_labels[i]]++;
    }
    for (std::size_t f = 0; f < train_per_fine.size(); ++f) {
      if (train_per_fine[f] < 2) {
        throw DataError("dataset: fine class " + std::to_string(f) +
                        " has fewer than 2 training samples");
      }
    }
  }
};

// Stand-in for image augmentations: additive jitter, multiplicative scaling,
// per-coordinate masking. An all-neutral config is the exact identity.
struct AugmentationConfig {
  double jitter_sigma = 0.1;
  double scale_lo = 0.9;
  double scale_hi = 1.1;
  double mask_prob = 0.05;

  static AugmentationConfig neutral() { return {0.0, 1.0, 1.0, 0.0}; }

  void validate() const {
    if (scale_lo > scale_hi) throw ConfigError("augmentation: scale_lo > scale_hi");
    if (mask_prob < 0.0 || mask_prob >= 1.0) throw ConfigError("augmentation: mask_prob outside [0, 1)");
    if (jitter_sigma < 0.0) throw ConfigError("augmentation: negative jitter_sigma");
  }
};

// y = mask(scale * (x + noise)).
inline std::vector<double> augment(std::span<const double> x, const AugmentationConfig& cfg,
                                   Rng& rng) {
  std::vector<double> y(x.begin(), x.end());
  for (auto& v : y) v += cfg.jitter_sigma * rng.next_gaussian();
  const double scale = cfg.scale_lo == cfg.scale_hi ? cfg.scale_lo
                                                    : rng.next_uniform(cfg.scale_lo, cfg.scale_hi);
  for (auto& v : y) v *= scale;
  if (cfg.mask_prob > 0.0) {
    for (auto& v : y) {
      if (rng.next_double() < cfg.mask_prob) v = 0.0;
    }
  }
  return y;
}

// Gaussian mixture with a two-level label hierarchy: C coarse centers on a
// sphere, F fine centers offset from each coarse center, unit isotropic
// noise per sample. Deterministic per seed; 80/20 stratified train/test.
inline HierarchicalDataset synth_gaussian_hierarchy(std::size_t num_coarse,
                                                    std::size_t fine_per_coarse, std::size_t dim,
                                                    double coarse_separation,
                                                    double fine_separation,
                                                    std::size_t samples_per_fine,
                                                    std::uint64_t seed) {
  if (num_coarse < 1 || fine_per_coarse < 1 || samples_per_fine < 1) {
    throw ConfigError("synth_gaussian_hierarchy: counts must be >= 1");
  }
  if (!(fine_separation < coarse_separation)) {
    throw ConfigError("synth_gaussian_hierarchy: fine_separation must be below coarse_separation");
  }
  Rng root(seed);
  Rng centers = root.stream("centers");
  Rng noise = root.stream("noise");
  Rng split_rng = root.stream("split");

  auto random_direction = [dim](Rng& rng) {
    std::vector<double> d(dim);
    double norm = 0.0;
    do {
      norm = 0.0;
      for (auto& v : d) {
        v = rng.next_gaussian();
        norm += v * v;
      }
      norm = std::sqrt(norm);
    } while (norm < 1e-12);
    for (auto& v : d) v /= norm;
    return d;
  };

  HierarchicalDataset ds;
  ds.dim = dim;
  ds.seed = seed;
  const std::size_t num_fine = num_coarse * fine_per_coarse;
  ds.hierarchy.resize(num_fine);

  std::vector<std::vector<double>> fine_centers(num_fine);
  for (std::size_t c = 0; c < num_coarse; ++c) {
    auto coarse_center = random_direction(centers);
    for (auto& v : coarse_center) v *= coarse_separation;
    for (std::size_t f = 0; f < fine_per_coarse; ++f) {
      const std::size_t fine = c * fine_per_coarse + f;
      ds.hierarchy[fine] = static_cast<std::uint32_t>(c);
      auto offset = random_direction(centers);
      fine_centers[fine] = coarse_center;
      for (std::size_t j = 0; j < dim; ++j) fine_centers[fine][j] += fine_separation * offset[j];
    }
  }

  for (std::size_t fine = 0; fine < num_fine; ++fine) {
    for (std::size_t s = 0; s < samples_per_fine; ++s) {
      for (std::size_t j = 0; j < dim; ++j) {
        ds.features.push_back(fine_centers[fine][j] + noise.next_gaussian());
      }
      ds.fine_labels.push_back(static_cast<std::uint32_t>(fine));
      ds.coarse_labels.push_back(ds.hierarchy[fine]);
    }
  }

  // Stratified split: per fine class, a seeded shuffle then the first 80%
  // (rounded) go to train.
  ds.split.assign(ds.size(), Split::Test);
  for (std::size_t fine = 0; fine < num_fine; ++fine) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (ds.fine_labels[i] == fine) members.push_back(i);
    }
    split_rng.shuffle(members);
    const std::size_t train_count =
        static_cast<std::size_t>(static_cast<double>(members.size()) * 0.8 + 0.5);
    for (std::size_t k = 0; k < members.size(); ++k) {
      ds.split[members[k]] = k < train_count ? Split::Train : Split::Test;
    }
  }

  ds.validate();
  return ds;
}

// Re-labels the dataset so the supervision level becomes the fine labels:
// coarse := fine with an identity hierarchy. Used to train at the finer
// granularity with the same machinery.
inline HierarchicalDataset promote_fine_to_coarse(const HierarchicalDataset& ds) {
  HierarchicalDataset out = ds;
  out.coarse_labels = ds.fine_labels;
  out.hierarchy.resize(ds.num_fine());
  for (std::size_t f = 0; f < out.hierarchy.size(); ++f) {
    out.hierarchy[f] = static_cast<std::uint32_t>(f);
  }
  out.validate();
  return out;
}

// One trial of the random sub-label protocol: within each coarse class, half
// the training samples get sub-label 0 and half sub-label 1 (+-1 for odd
// counts), producing 2 * num_coarse synthetic fine classes. Entries for test
// samples are kNoLabel.
inline std::vector<std::vector<std::uint32_t>> random_fine_split(const HierarchicalDataset& ds,
                                                                 std::size_t num_trials,
                                                                 std::uint64_t seed) {
  const std::size_t num_coarse = ds.num_coarse();
  std::vector<std::vector<std::size_t>> members(num_coarse);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.split[i] == Split::Train) members[ds.coarse_labels[i]].push_back(i);
  }
  for (std::size_t c = 0; c < num_coarse; ++c) {
    if (members[c].size() < 2) {
      throw ContractError("random_fine_split: coarse class " + std::to_string(c) +
                          " has fewer than 2 training samples");
    }
  }
  Rng root(seed);
  std::vector<std::vector<std::uint32_t>> trials;
  trials.reserve(num_trials);
  for (std::size_t t = 0; t < num_trials; ++t) {
    Rng trial_rng = root.stream("trial", t);
    std::vector<std::uint32_t> labels(ds.size(), kNoLabel);
    for (std::size_t c = 0; c < num_coarse; ++c) {
      auto order = members[c];
      trial_rng.shuffle(order);
      const std::size_t half = order.size() / 2;
      for (std::size_t k = 0; k < order.size(); ++k) {
        labels[order[k]] = static_cast<std::uint32_t>(2 * c + (k < half ? 0 : 1));
      }
    }
    trials.push_back(std::move(labels));
  }
  return trials;
}

// --- "GDAT" binary format -------------------------------------------------

inline constexpr std::uint32_t kDatasetFormatVersion = 1;

inline void save_dataset(const std::string& path, const HierarchicalDataset& ds) {
  auto os = io::open_output(path);
  io::write_bytes(os, "GDAT", 4);
  io::write_pod<std::uint32_t>(os, kDatasetFormatVersion);
  io::write_pod<std::uint64_t>(os, ds.seed);
  io::write_pod<std::uint64_t>(os, ds.size());
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ds.dim));
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ds.num_fine()));
  for (auto parent : ds.hierarchy) io::write_pod<std::uint32_t>(os, parent);
  io::write_f64s(os, ds.features);
  for (auto l : ds.coarse_labels) io::write_pod<std::uint32_t>(os, l);
  for (auto l : ds.fine_labels) io::write_pod<std::uint32_t>(os, l);
  for (auto s : ds.split) io::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(s));
}

inline HierarchicalDataset load_dataset(const std::string& path) {
  auto is = io::open_input(path);
  io::Reader r(is, path);
  r.expect_magic("GDAT");
  const auto version = r.read_pod<std::uint32_t>();
  if (version != kDatasetFormatVersion) {
    throw DataError(path + ": unsupported dataset format version " + std::to_string(version));
  }
  HierarchicalDataset ds;
  ds.seed = r.read_pod<std::uint64_t>();
  const auto n = r.read_pod<std::uint64_t>();
  ds.dim = r.read_pod<std::uint32_t>();
  const auto num_fine = r.read_pod<std::uint32_t>();
  ds.hierarchy.resize(num_fine);
  for (auto& parent : ds.hierarchy) parent = r.read_pod<std::uint32_t>();
  ds.features = r.read_f64s(n * ds.dim);
  ds.coarse_labels.resize(n);
  for (auto& l : ds.coarse_labels) l = r.read_pod<std::uint32_t>();
  ds.fine_labels.resize(n);
  for (auto& l : ds.fine_labels) l = r.read_pod<std::uint32_t>();
  ds.split.resize(n);
  for (auto& s : ds.split) s = static_cast<Split>(r.read_pod<std::uint8_t>());
  ds.validate();
  return ds;
}

// CSV import with header row d0,...,dD-1,coarse,fine. The hierarchy is
// inferred from the observed (fine, coarse) pairs; all rows become training
// samples.
inline HierarchicalDataset import_csv(std::istream& is, const std::string& name) {
  std::string line;
  if (!std::getline(is, line)) throw DataError(name + ": empty CSV");
  std::size_t columns = 1 + static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  if (columns < 3) throw DataError(name + ": CSV needs at least one feature column plus coarse,fine");
  const std::size_t dim = columns - 2;

  HierarchicalDataset ds;
  ds.dim = dim;
  std::map<std::uint32_t, std::uint32_t> parent_of;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> row;
    std::uint32_t coarse = 0, fine = 0;
    for (std::size_t c = 0; c < columns; ++c) {
      if (!std::getline(ss, cell, ',')) {
        throw DataError(name + ": line " + std::to_string(line_no) + " has too few columns");
      }
      if (c < dim) {
        row.push_back(std::stod(cell));
      } else if (c == dim) {
        coarse = static_cast<std::uint32_t>(std::stoul(cell));
      } else {
        fine = static_cast<std::uint32_t>(std::stoul(cell));
      }
    }
    auto [it, inserted] = parent_of.emplace(fine, coarse);
    if (!inserted && it->second != coarse) {
      throw DataError(name + ": line " + std::to_string(line_no) + ": fine label " +
                      std::to_string(fine) + " mapped to two coarse parents (" +
                      std::to_string(it->second) + " and " + std::to_string(coarse) + ")");
    }
    ds.features.insert(ds.features.end(), row.begin(), row.end());
    ds.coarse_labels.push_back(coarse);
    ds.fine_labels.push_back(fine);
    ds.split.push_back(Split::Train);
  }
  if (ds.size() == 0) throw DataError(name + ": CSV has no data rows");
  const std::uint32_t max_fine = *std::max_element(ds.fine_labels.begin(), ds.fine_labels.end());
  ds.hierarchy.assign(max_fine + 1, 0);
  for (auto [fine, coarse] : parent_of) ds.hierarchy[fine] = coarse;
  ds.validate();
  return ds;
}

}  // namespace grafit::data
