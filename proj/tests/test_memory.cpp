#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "grafit/memory.hpp"
#include "grafit/trainer.hpp"
#include "support.hpp"

using namespace grafit;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "grafit_test_memory";
  std::filesystem::create_directories(dir);
  return dir / name;
}

struct Fixture {
  data::HierarchicalDataset ds;
  model::ModelBundle bundle;

  static Fixture make(std::uint64_t seed = 17) {
    Rng rng(seed);
    model::ModelConfig cfg;
    cfg.input_dim = 8;
    cfg.trunk_hidden = {8, 8};
    cfg.embed_dim = 4;
    cfg.projector_hidden = 8;
    return Fixture{data::synth_gaussian_hierarchy(2, 2, 8, 5.0, 2.0, 8, seed),
                   model::ModelBundle::init(cfg, rng)};
  }
};

}  // namespace

TEST_CASE("an empty dataset yields an empty, valid memory") {
  auto fx = Fixture::make();
  data::HierarchicalDataset empty;
  empty.dim = 8;
  auto mem = memory::init_memory(fx.bundle, empty);
  CHECK(mem.size() == 0);
  CHECK(mem.generation == 0);
}

TEST_CASE("initial memory rows are unit-norm embeddings of their samples") {
  auto fx = Fixture::make();
  auto mem = memory::init_memory(fx.bundle, fx.ds);
  const auto train = fx.ds.indices_of(data::Split::Train);
  REQUIRE(mem.size() == train.size());
  for (std::size_t k = 0; k < mem.size(); ++k) {
    double norm = 0.0;
    for (double v : mem.row(k)) norm += v * v;
    CHECK(std::abs(std::sqrt(norm) - 1.0) <= 1e-9);
  }
  // Row k equals the direct evaluation-mode embedding of sample k.
  std::vector<double> features;
  for (auto i : train) {
    auto row = fx.ds.feature_row(i);
    features.insert(features.end(), row.begin(), row.end());
  }
  auto direct = model::embed_rows(fx.bundle, features, train.size(), fx.ds.dim);
  for (std::size_t i = 0; i < direct.size(); ++i) {
    CHECK(std::abs(direct[i] - mem.rows[i]) <= 1e-12);
  }
  CHECK(mem.coarse_labels.size() == train.size());
  CHECK(mem.has_fine());
}

TEST_CASE("averaging update: fixed point, arithmetic, and no renormalization") {
  memory::EmbeddingMemory mem;
  mem.dim = 2;
  mem.rows = {1.0, 0.0, 0.0, 1.0};
  mem.coarse_labels = {0, 1};

  SUBCASE("a fresh embedding equal to the row leaves it unchanged") {
    const std::vector<std::size_t> idx = {0};
    const std::vector<double> fresh = {1.0, 0.0};
    memory::update_minibatch(mem, idx, fresh);
    CHECK(mem.rows[0] == 1.0);
    CHECK(mem.rows[1] == 0.0);
    CHECK(mem.generation == 1);
  }

  SUBCASE("orthogonal average is halved, not renormalized") {
    const std::vector<std::size_t> idx = {0};
    const std::vector<double> fresh = {0.0, 1.0};
    memory::update_minibatch(mem, idx, fresh);
    CHECK(mem.rows[0] == 0.5);
    CHECK(mem.rows[1] == 0.5);
    // Untouched row is bitwise intact.
    CHECK(mem.rows[2] == 0.0);
    CHECK(mem.rows[3] == 1.0);
  }
}

TEST_CASE("repeated updates toward a constant vector decay geometrically") {
  memory::EmbeddingMemory mem;
  mem.dim = 3;
  mem.rows = {1.0, 2.0, -1.0};
  mem.coarse_labels = {0};
  const std::vector<double> v = {0.25, -0.5, 0.75};
  const std::vector<std::size_t> idx = {0};

  auto dist = [&]() {
    double d = 0.0;
    for (std::size_t j = 0; j < 3; ++j) d += (mem.rows[j] - v[j]) * (mem.rows[j] - v[j]);
    return std::sqrt(d);
  };
  double prev = dist();
  for (int it = 0; it < 10; ++it) {
    memory::update_minibatch(mem, idx, v);
    CHECK(dist() == doctest::Approx(0.5 * prev).epsilon(1e-12));
    prev = dist();
  }
}

TEST_CASE("duplicate indices in one batch are rejected") {
  memory::EmbeddingMemory mem;
  mem.dim = 1;
  mem.rows = {1.0, 2.0};
  mem.coarse_labels = {0, 0};
  const std::vector<std::size_t> idx = {1, 1};
  const std::vector<double> fresh = {3.0, 4.0};
  CHECK_THROWS_AS(memory::update_minibatch(mem, idx, fresh), ContractError);
  // Fail-closed: nothing changed.
  CHECK(mem.rows == std::vector<double>{1.0, 2.0});
}

TEST_CASE("update touches exactly the batch rows") {
  auto fx = Fixture::make();
  auto mem = memory::init_memory(fx.bundle, fx.ds);
  auto before = mem.rows;
  const std::vector<std::size_t> idx = {1, 3};
  std::vector<double> fresh(2 * mem.dim, 0.123);
  memory::update_minibatch(mem, idx, fresh);
  for (std::size_t k = 0; k < mem.size(); ++k) {
    const bool touched = k == 1 || k == 3;
    for (std::size_t j = 0; j < mem.dim; ++j) {
      if (touched) {
        CHECK(mem.rows[k * mem.dim + j] == 0.5 * (before[k * mem.dim + j] + 0.123));
      } else {
        CHECK(mem.rows[k * mem.dim + j] == before[k * mem.dim + j]);
      }
    }
  }
}

TEST_CASE("rebuild restores unit rows, is idempotent, and matches a fresh pass") {
  auto fx = Fixture::make();
  auto mem = memory::init_memory(fx.bundle, fx.ds);

  // Distort the memory, then rebuild.
  for (auto& v : mem.rows) v *= 0.37;
  memory::rebuild(mem, fx.bundle, fx.ds);
  for (std::size_t k = 0; k < mem.size(); ++k) {
    double norm = 0.0;
    for (double v : mem.row(k)) norm += v * v;
    CHECK(std::abs(std::sqrt(norm) - 1.0) <= 1e-9);
  }
  auto first = mem.rows;
  memory::rebuild(mem, fx.bundle, fx.ds);
  CHECK(mem.rows == first);
}

TEST_CASE("after training steps, rebuild equals an independent embedding pass") {
  auto fx = Fixture::make(23);
  auto mem = memory::init_memory(fx.bundle, fx.ds);
  trainer::TrainConfig cfg;
  cfg.epochs = 8;
  cfg.batch_size = 4;
  cfg.loss.num_augmentations = 2;
  cfg.seed = 23;
  trainer::train(fx.bundle, fx.ds, mem, cfg, trainer::TrainMode::Grafit);

  // train() already rebuilds; compare against a from-scratch pass.
  const auto train_rows = fx.ds.indices_of(data::Split::Train);
  std::vector<double> features;
  for (auto i : train_rows) {
    auto row = fx.ds.feature_row(i);
    features.insert(features.end(), row.begin(), row.end());
  }
  auto fresh = model::embed_rows(fx.bundle, features, train_rows.size(), fx.ds.dim);
  REQUIRE(fresh.size() == mem.rows.size());
  for (std::size_t i = 0; i < fresh.size(); ++i) {
    CHECK(std::abs(fresh[i] - mem.rows[i]) <= 1e-12);
  }
  // cos(m_i, g(x_i)) = 1 for every row.
  for (std::size_t k = 0; k < mem.size(); ++k) {
    std::span<const double> fresh_row{fresh.data() + k * mem.dim, mem.dim};
    CHECK(retrieval::cosine(mem.row(k), fresh_row) == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("memory rows enter loss graphs without gradient buffers") {
  auto fx = Fixture::make();
  auto mem = memory::init_memory(fx.bundle, fx.ds);
  Rng rng(1);
  auto queries =
      ad::Tensor::leaf({2, mem.dim}, testsupport::random_values(2 * mem.dim, rng), true);
  auto unit = ad::l2_normalize_rows(queries);
  auto loss = losses::knn_loss(unit, std::vector<std::size_t>{0, 1},
                               std::vector<std::uint32_t>{mem.coarse_labels[0], mem.coarse_labels[1]},
                               mem, 0.5);
  ad::backward_grad(loss);
  // The memory constant inside the graph must not require or hold gradients.
  bool found_constant_memory = false;
  std::function<void(const ad::NodePtr&)> walk = [&](const ad::NodePtr& n) {
    if (n->op == nullptr && n->shape == std::vector<std::size_t>{mem.size(), mem.dim}) {
      found_constant_memory = true;
      CHECK_FALSE(n->requires_grad);
      CHECK(n->grad.empty());
    }
    for (const auto& in : n->inputs) walk(in);
  };
  walk(loss.node());
  CHECK(found_constant_memory);
}

TEST_CASE("embedding store round trip") {
  auto fx = Fixture::make();
  auto mem = memory::init_memory(fx.bundle, fx.ds);
  mem.generation = 5;
  const auto path = temp_file("store.gemb");
  memory::save_embedding_store(path.string(), mem);
  auto loaded = memory::load_embedding_store(path.string());
  CHECK(loaded.rows == mem.rows);
  CHECK(loaded.dim == mem.dim);
  CHECK(loaded.coarse_labels == mem.coarse_labels);
  CHECK(loaded.fine_labels == mem.fine_labels);

  // Coarse-only store.
  mem.fine_labels.clear();
  const auto path2 = temp_file("store1.gemb");
  memory::save_embedding_store(path2.string(), mem);
  auto loaded2 = memory::load_embedding_store(path2.string());
  CHECK_FALSE(loaded2.has_fine());

  // Truncation fails closed.
  std::filesystem::resize_file(path, std::filesystem::file_size(path) / 3);
  CHECK_THROWS_AS(memory::load_embedding_store(path.string()), DataError);
}
