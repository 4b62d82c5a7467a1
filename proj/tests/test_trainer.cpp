#include <doctest.h>

#include <cmath>

#include "grafit/evaluate.hpp"
#include "grafit/trainer.hpp"
#include "support.hpp"

using namespace grafit;
using testsupport::close;
using testsupport::random_values;

namespace {

struct Setup {
  data::HierarchicalDataset ds;
  model::ModelBundle bundle;
  memory::EmbeddingMemory mem;

  static Setup make(trainer::TrainMode mode, std::uint64_t seed = 7, std::size_t samples = 8) {
    auto ds = data::synth_gaussian_hierarchy(2, 2, 8, 5.0, 2.0, samples, seed);
    auto mc = trainer::model_config_for_mode(mode, ds.dim, ds.num_coarse(), 4, 8);
    mc.trunk_hidden = {8, 8};
    if (mc.projector_kind == model::ProjectorKind::Identity) mc.embed_dim = 8;
    Rng rng(seed);
    auto bundle = model::ModelBundle::init(mc, rng);
    auto mem = memory::init_memory(bundle, ds);
    return Setup{std::move(ds), std::move(bundle), std::move(mem)};
  }
};

trainer::TrainConfig small_config(std::uint64_t seed = 7) {
  trainer::TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.seed = seed;
  cfg.loss.num_augmentations = 2;
  return cfg;
}

}  // namespace

TEST_CASE("cosine schedule endpoints and the learning-rate rule") {
  CHECK(trainer::cosine_lr(0, 100, 0.4) == doctest::Approx(0.4));
  CHECK(trainer::cosine_lr(50, 100, 0.4) == doctest::Approx(0.2));
  CHECK_THROWS_AS(trainer::cosine_lr(100, 100, 0.4), ContractError);
  // Monotone non-increasing.
  double prev = 1e9;
  for (std::size_t s = 0; s < 100; ++s) {
    const double lr = trainer::cosine_lr(s, 100, 0.4);
    CHECK(lr <= prev + 1e-15);
    prev = lr;
  }
  trainer::TrainConfig cfg;
  cfg.batch_size = 1024;
  CHECK(cfg.base_lr() == doctest::Approx(0.4));
  cfg.batch_size = 64;
  CHECK(cfg.base_lr() == doctest::Approx(0.025));
}

TEST_CASE("plain SGD moves a parameter by lr times the gradient") {
  auto p = nn::make_param("p", {1}, {1.0}, true);
  auto root = ad::identity(p.tensor);
  ad::backward_grad(root);  // gradient 1
  trainer::SgdOptimizer opt{0.0, 0.0, {}};
  std::vector<nn::Parameter*> params = {&p};
  opt.step(params, 0.1);
  CHECK(p.values()[0] == doctest::Approx(0.9).epsilon(1e-15));
}

TEST_CASE("zero gradients leave parameters invariant regardless of momentum") {
  auto p = nn::make_param("p", {2}, {1.0, -2.0}, true);
  auto root = ad::sum(ad::scalar_mul(p.tensor, 0.0));
  ad::backward_grad(root);
  trainer::SgdOptimizer opt{0.9, 0.0, {}};
  std::vector<nn::Parameter*> params = {&p};
  for (int s = 0; s < 5; ++s) opt.step(params, 0.5);
  CHECK(p.values()[0] == 1.0);
  CHECK(p.values()[1] == -2.0);
}

TEST_CASE("two Nesterov steps match the hand-unrolled recurrence") {
  // v <- mu v + g; p <- p - lr (g + mu v), with constant g = 1, mu = 0.9.
  const double g = 1.0, mu = 0.9, lr = 0.1;
  double v = 0.0, p_expected = 2.0;
  for (int s = 0; s < 2; ++s) {
    v = mu * v + g;
    p_expected -= lr * (g + mu * v);
  }

  auto p = nn::make_param("p", {1}, {2.0}, true);
  trainer::SgdOptimizer opt{mu, 0.0, {}};
  std::vector<nn::Parameter*> params = {&p};
  for (int s = 0; s < 2; ++s) {
    p.zero_grad();
    auto root = ad::identity(p.tensor);
    ad::backward_grad(root);
    opt.step(params, lr);
  }
  CHECK(close(p.values()[0], p_expected, 1e-12, 1e-12));
}

TEST_CASE("non-finite gradients abort the step with parameters unchanged") {
  auto p = nn::make_param("p", {2}, {1.0, 2.0}, true);
  auto root = ad::sum(p.tensor);
  ad::backward_grad(root);
  // Corrupt the gradient buffer directly.
  auto& node = *p.tensor.node();
  node.grad[1] = std::nan("");
  trainer::SgdOptimizer opt{0.9, 0.0, {}};
  std::vector<nn::Parameter*> params = {&p};
  CHECK_THROWS_AS(opt.step(params, 0.1), NumericError);
  CHECK(p.values()[0] == 1.0);
  CHECK(p.values()[1] == 2.0);
}

TEST_CASE("training validates its configuration") {
  auto setup = Setup::make(trainer::TrainMode::Grafit);
  auto cfg = small_config();
  cfg.epochs = 0;
  CHECK_THROWS_AS(
      trainer::train(setup.bundle, setup.ds, setup.mem, cfg, trainer::TrainMode::Grafit),
      ConfigError);
}

TEST_CASE("one epoch logs one row per batch") {
  auto setup = Setup::make(trainer::TrainMode::Grafit);
  auto cfg = small_config();
  cfg.epochs = 1;
  auto result = trainer::train(setup.bundle, setup.ds, setup.mem, cfg, trainer::TrainMode::Grafit);
  const std::size_t n_train = setup.ds.indices_of(data::Split::Train).size();
  CHECK(result.log.size() == (n_train + cfg.batch_size - 1) / cfg.batch_size);
  for (const auto& row : result.log) {
    CHECK(row.loss_knn.has_value());
    CHECK(row.loss_inst.has_value());
    CHECK_FALSE(row.loss_ce.has_value());
  }
}

TEST_CASE("the kNN-only mode has no instance-loss column") {
  auto setup = Setup::make(trainer::TrainMode::SNCAplus);
  auto result = trainer::train(setup.bundle, setup.ds, setup.mem, small_config(),
                               trainer::TrainMode::SNCAplus);
  for (const auto& row : result.log) {
    CHECK(row.loss_knn.has_value());
    CHECK_FALSE(row.loss_inst.has_value());
    CHECK(close(row.loss_total, *row.loss_knn, 1e-15));
  }
}

TEST_CASE("cross-entropy modes populate their own columns") {
  auto setup = Setup::make(trainer::TrainMode::CEplusTriplet);
  auto result = trainer::train(setup.bundle, setup.ds, setup.mem, small_config(),
                               trainer::TrainMode::CEplusTriplet);
  for (const auto& row : result.log) {
    CHECK(row.loss_ce.has_value());
    CHECK(row.loss_triplet.has_value());
    CHECK_FALSE(row.loss_knn.has_value());
  }
  // CE modes need a head.
  auto bad = Setup::make(trainer::TrainMode::Grafit);
  CHECK_THROWS_AS(
      trainer::train(bad.bundle, bad.ds, bad.mem, small_config(), trainer::TrainMode::CEBaseline),
      ContractError);
}

TEST_CASE("the instance-only mode trains without labels in the loss") {
  auto setup = Setup::make(trainer::TrainMode::InstOnly);
  auto result = trainer::train(setup.bundle, setup.ds, setup.mem, small_config(),
                               trainer::TrainMode::InstOnly);
  for (const auto& row : result.log) {
    CHECK(row.loss_inst.has_value());
    CHECK_FALSE(row.loss_knn.has_value());
  }
}

TEST_CASE("a zero learning rate leaves every parameter bitwise unchanged") {
  auto setup = Setup::make(trainer::TrainMode::Grafit);
  std::vector<std::vector<double>> before;
  for (auto* p : setup.bundle.trainable_params()) before.push_back(p->values());

  trainer::SgdOptimizer opt{0.9, 1e-4, {}};
  auto params = setup.bundle.trainable_params();
  for (int s = 0; s < 3; ++s) {
    for (auto* p : params) p->zero_grad();
    auto x = ad::Tensor::leaf({2, setup.ds.dim}, std::vector<double>(2 * setup.ds.dim, 0.5),
                              false);
    auto loss = ad::mean(setup.bundle.forward_embed(x, false, true));
    ad::backward_grad(loss);
    opt.step(params, 0.0);
  }
  auto after = setup.bundle.trainable_params();
  for (std::size_t i = 0; i < after.size(); ++i) {
    CHECK(after[i]->values() == before[i]);
  }
}

TEST_CASE("training is deterministic given seed and config") {
  auto a = Setup::make(trainer::TrainMode::Grafit, 13);
  auto b = Setup::make(trainer::TrainMode::Grafit, 13);
  auto cfg = small_config(13);
  auto ra = trainer::train(a.bundle, a.ds, a.mem, cfg, trainer::TrainMode::Grafit);
  auto rb = trainer::train(b.bundle, b.ds, b.mem, cfg, trainer::TrainMode::Grafit);
  REQUIRE(ra.log.size() == rb.log.size());
  for (std::size_t i = 0; i < ra.log.size(); ++i) {
    CHECK(ra.log[i].loss_total == rb.log[i].loss_total);
    CHECK(ra.log[i].lr == rb.log[i].lr);
  }
  CHECK(a.mem.rows == b.mem.rows);

  // The cosine schedule consumed exactly epochs * batches steps.
  const std::size_t total = ra.log.size();
  CHECK(ra.log[0].lr == doctest::Approx(cfg.base_lr()));
  CHECK(ra.log[total - 1].lr ==
        doctest::Approx(trainer::cosine_lr(total - 1, total, cfg.base_lr())));
}

TEST_CASE("training reduces the kNN loss on a synthetic benchmark") {
  // Reduced benchmark shape for unit-test speed; the full configuration runs
  // in the acceptance suite.
  auto ds = data::synth_gaussian_hierarchy(4, 2, 16, 6.0, 3.0, 12, 7);
  auto mc = trainer::model_config_for_mode(trainer::TrainMode::Grafit, ds.dim, ds.num_coarse(), 8);
  Rng rng(7);
  auto bundle = model::ModelBundle::init(mc, rng);
  auto mem = memory::init_memory(bundle, ds);
  trainer::TrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 16;
  cfg.seed = 7;
  cfg.loss.num_augmentations = 2;
  auto result = trainer::train(bundle, ds, mem, cfg, trainer::TrainMode::Grafit);

  const std::size_t batches = result.log.size() / cfg.epochs;
  double first_epoch_mean = 0.0;
  for (std::size_t i = 0; i < batches; ++i) first_epoch_mean += *result.log[i].loss_knn;
  first_epoch_mean /= static_cast<double>(batches);
  CHECK(*result.log.back().loss_knn < first_epoch_mean);
}

TEST_CASE("snapshot callback fires on the configured cadence") {
  auto setup = Setup::make(trainer::TrainMode::Grafit);
  auto cfg = small_config();
  cfg.epochs = 4;
  cfg.snapshot_every = 2;
  std::vector<std::size_t> epochs_seen;
  trainer::train(setup.bundle, setup.ds, setup.mem, cfg, trainer::TrainMode::Grafit,
                 [&](std::size_t epoch, model::ModelBundle&) { epochs_seen.push_back(epoch); });
  CHECK(epochs_seen == std::vector<std::size_t>{1, 3});
}
