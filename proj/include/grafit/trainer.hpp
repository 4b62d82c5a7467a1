#pragma once

// The optimization loop: SGD with Nesterov momentum, cosine learning-rate
// decay, per-mode loss assembly, EMA target updates, and embedding-memory
// maintenance.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "grafit/data.hpp"
#include "grafit/error.hpp"
#include "grafit/losses.hpp"
#include "grafit/memory.hpp"
#include "grafit/model.hpp"
#include "grafit/rng.hpp"

namespace grafit::trainer {

enum class TrainMode { Grafit, GrafitFC, SNCAplus, CEBaseline, CEplusTriplet, InstOnly };

inline const char* mode_name(TrainMode mode) {
  switch (mode) {
    case TrainMode::Grafit: return "grafit";
    case TrainMode::GrafitFC: return "grafit-fc";
    case TrainMode::SNCAplus: return "snca-plus";
    case TrainMode::CEBaseline: return "ce";
    case TrainMode::CEplusTriplet: return "ce-triplet";
    case TrainMode::InstOnly: return "inst-only";
  }
  throw ContractError("unknown train mode");
}

inline TrainMode parse_mode(const std::string& name) {
  if (name == "grafit") return TrainMode::Grafit;
  if (name == "grafit-fc") return TrainMode::GrafitFC;
  if (name == "snca-plus") return TrainMode::SNCAplus;
  if (name == "ce") return TrainMode::CEBaseline;
  if (name == "ce-triplet") return TrainMode::CEplusTriplet;
  if (name == "inst-only") return TrainMode::InstOnly;
  throw ConfigError("unknown train mode: " + name);
}

// Architecture wiring per ablation mode: the Grafit variants differ in the
// projector; the cross-entropy baselines classify from the trunk and use the
// L2-normalized trunk features as embeddings (identity projector).
inline model::ModelConfig model_config_for_mode(TrainMode mode, std::size_t input_dim,
                                                std::size_t num_coarse, std::size_t embed_dim = 32,
                                                std::size_t projector_hidden = 128,
                                                double tau = 0.99) {
  model::ModelConfig mc;
  mc.input_dim = input_dim;
  mc.trunk_hidden = {64, 64};
  mc.projector_hidden = projector_hidden;
  mc.embed_dim = embed_dim;
  mc.tau = tau;
  switch (mode) {
    case TrainMode::Grafit:
    case TrainMode::SNCAplus:
    case TrainMode::InstOnly:
      mc.projector_kind = model::ProjectorKind::MLP;
      break;
    case TrainMode::GrafitFC:
      mc.projector_kind = model::ProjectorKind::FC;
      break;
    case TrainMode::CEBaseline:
    case TrainMode::CEplusTriplet:
      mc.projector_kind = model::ProjectorKind::Identity;
      mc.embed_dim = mc.trunk_out_dim();
      mc.head_classes = num_coarse;
      break;
  }
  return mc;
}

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  losses::LossConfig loss;
  data::AugmentationConfig augmentation;
  std::uint64_t seed = 7;
  std::size_t snapshot_every = 0;  // epochs between checkpoint callbacks; 0 = final only

  // lr = 0.1/256 * batch size.
  [[nodiscard]] double base_lr() const {
    return 0.1 / 256.0 * static_cast<double>(batch_size);
  }

  void validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be at least 1");
    if (batch_size < 2) throw ConfigError("train: batch size must be at least 2");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train: momentum outside [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("train: negative weight decay");
    loss.validate();
    augmentation.validate();
  }
};

// lr(step) = base * (1 + cos(pi * step / total)) / 2.
inline double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr) {
  if (step >= total_steps) {
    throw ContractError("cosine_lr: step " + std::to_string(step) + " >= total " +
                        std::to_string(total_steps));
  }
  return base_lr * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                         static_cast<double>(total_steps)));
}

// Nesterov momentum SGD with decoupled-from-nothing classic L2 weight decay:
//   d = g + wd * p;  v <- mu * v + d;  p <- p - lr * (d + mu * v).
struct SgdOptimizer {
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::vector<std::vector<double>> velocity;

  void step(const std::vector<nn::Parameter*>& params, double lr) {
    if (velocity.empty()) {
      velocity.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        velocity[i].assign(params[i]->values().size(), 0.0);
      }
    }
    if (velocity.size() != params.size()) {
      throw ContractError("sgd_step: parameter set changed size across steps");
    }
    // Validate every gradient before touching any parameter so a numeric
    // failure leaves the model unchanged. Parameters that never entered a
    // graph (empty gradient buffer) are skipped, like a loss mode that does
    // not use the predictor.
    for (const auto* p : params) {
      for (double g : p->grad()) {
        if (!std::isfinite(g)) {
          throw NumericError("sgd_step: non-finite gradient in " + p->name);
        }
      }
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& value = params[i]->values();
      const auto& grad = params[i]->grad();
      if (grad.empty()) continue;
      auto& vel = velocity[i];
      for (std::size_t j = 0; j < value.size(); ++j) {
        const double d = grad[j] + weight_decay * value[j];
        vel[j] = momentum * vel[j] + d;
        value[j] -= lr * (d + momentum * vel[j]);
      }
    }
  }
};

struct LogRow {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss_total = 0.0;
  std::optional<double> loss_knn;
  std::optional<double> loss_inst;
  std::optional<double> loss_ce;
  std::optional<double> loss_triplet;
};

struct TrainResult {
  std::vector<LogRow> log;
  model::TestModel snapshot;
};

// Callback fired after each epoch that completes a snapshot interval, and
// always after the final epoch.
using EpochCallback = std::function<void(std::size_t epoch, model::ModelBundle&)>;

inline TrainResult train(model::ModelBundle& bundle, const data::HierarchicalDataset& ds,
                         memory::EmbeddingMemory& mem, const TrainConfig& cfg, TrainMode mode,
                         const EpochCallback& on_snapshot = {}) {
  cfg.validate();
  const auto train_rows = ds.indices_of(data::Split::Train);
  const std::size_t n_train = train_rows.size();
  if (n_train != mem.size()) {
    throw ContractError("train: memory size " + std::to_string(mem.size()) +
                        " does not match training set size " + std::to_string(n_train));
  }
  if (n_train < 2) throw ContractError("train: need at least 2 training samples");

  const bool needs_knn =
      mode == TrainMode::Grafit || mode == TrainMode::GrafitFC || mode == TrainMode::SNCAplus;
  const bool needs_inst = (mode == TrainMode::Grafit || mode == TrainMode::GrafitFC)
                              ? cfg.loss.lambda > 0.0
                              : mode == TrainMode::InstOnly;
  const bool needs_ce = mode == TrainMode::CEBaseline || mode == TrainMode::CEplusTriplet;
  const bool needs_triplet = mode == TrainMode::CEplusTriplet;
  if (needs_ce && !bundle.head) {
    throw ContractError("train: cross-entropy mode requires a bundle with a classification head");
  }

  const std::size_t batches_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.epochs * batches_per_epoch;
  const std::size_t t_views = cfg.loss.num_augmentations;
  const double lambda = mode == TrainMode::InstOnly ? 1.0 : cfg.loss.lambda;

  Rng root(cfg.seed);
  auto params = bundle.trainable_params();
  SgdOptimizer optimizer{cfg.momentum, cfg.weight_decay, {}};

  TrainResult result;
  result.log.reserve(total_steps);
  std::size_t global_step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(n_train);
    for (std::size_t i = 0; i < n_train; ++i) order[i] = i;
    Rng shuffle_rng = root.stream("shuffle", epoch);
    shuffle_rng.shuffle(order);

    for (std::size_t start = 0; start < n_train; start += cfg.batch_size) {
      const std::size_t b = std::min(cfg.batch_size, n_train - start);
      std::vector<std::size_t> batch_mem(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(start + b));
      std::vector<double> features;
      features.reserve(b * ds.dim);
      std::vector<std::uint32_t> coarse(b);
      for (std::size_t k = 0; k < b; ++k) {
        const auto row = ds.feature_row(train_rows[batch_mem[k]]);
        features.insert(features.end(), row.begin(), row.end());
        coarse[k] = ds.coarse_labels[train_rows[batch_mem[k]]];
      }

      Rng step_rng = root.stream("augment", global_step);
      LogRow row;
      row.step = global_step;
      row.epoch = epoch;
      row.lr = cosine_lr(global_step, total_steps, cfg.base_lr());

      ad::Tensor total;
      ad::Tensor identity_embed;  // g of the identity view, reused for the memory update

      if (needs_inst) {
        // One concatenated pass: view 0 is the identity view (shared with
        // the kNN loss), views 1..T-1 are augmented.
        std::vector<double> all_views = features;
        all_views.reserve(b * t_views * ds.dim);
        for (std::size_t v = 1; v < t_views; ++v) {
          for (std::size_t k = 0; k < b; ++k) {
            auto view = data::augment(ds.feature_row(train_rows[batch_mem[k]]),
                                      cfg.augmentation, step_rng);
            all_views.insert(all_views.end(), view.begin(), view.end());
          }
        }
        auto x_all = ad::Tensor::leaf({b * t_views, ds.dim}, all_views, false);
        auto g_all = bundle.forward_embed(x_all, false, true);
        auto pred_all = bundle.forward_predictor(g_all, true);
        auto target_all = bundle.forward_embed(x_all, true, true);
        identity_embed = ad::slice_rows(g_all, 0, b);

        std::vector<ad::Tensor> online_views, target_views;
        for (std::size_t v = 0; v < t_views; ++v) {
          online_views.push_back(ad::slice_rows(pred_all, v * b, (v + 1) * b));
          target_views.push_back(ad::slice_rows(target_all, v * b, (v + 1) * b));
        }
        auto inst = losses::instance_loss_from_views(online_views, target_views);
        row.loss_inst = inst.value();
        if (needs_knn) {
          auto knn = losses::knn_loss(identity_embed, batch_mem, coarse, mem, cfg.loss.sigma);
          row.loss_knn = knn.value();
          total = losses::total_loss(knn, inst, lambda);
        } else {
          total = inst;
        }
      } else if (needs_knn) {
        auto x = ad::Tensor::leaf({b, ds.dim}, features, false);
        identity_embed = bundle.forward_embed(x, false, true);
        auto knn = losses::knn_loss(identity_embed, batch_mem, coarse, mem, cfg.loss.sigma);
        row.loss_knn = knn.value();
        total = knn;
      } else if (needs_ce) {
        // Single trunk pass over [identity | view A | view B]; the head sees
        // the identity rows, the triplet the augmented ones.
        const std::size_t groups = needs_triplet ? 3 : 1;
        std::vector<double> all_views = features;
        for (std::size_t v = 1; v < groups; ++v) {
          for (std::size_t k = 0; k < b; ++k) {
            auto view = data::augment(ds.feature_row(train_rows[batch_mem[k]]),
                                      cfg.augmentation, step_rng);
            all_views.insert(all_views.end(), view.begin(), view.end());
          }
        }
        auto x_all = ad::Tensor::leaf({b * groups, ds.dim}, all_views, false);
        auto trunk_out = bundle.trunk.forward(x_all, true);
        auto logits = bundle.head->forward(ad::slice_rows(trunk_out, 0, b));
        auto ce = losses::cross_entropy_loss(logits, coarse);
        row.loss_ce = ce.value();
        auto g_all = ad::l2_normalize_rows(bundle.projector.forward(trunk_out, true));
        identity_embed = ad::slice_rows(g_all, 0, b);
        if (needs_triplet && b >= 2) {
          auto anchors = ad::slice_rows(g_all, b, 2 * b);
          auto positives = ad::slice_rows(g_all, 2 * b, 3 * b);
          // Negatives are drawn uniformly from the other samples in the batch.
          Rng neg_rng = root.stream("negatives", global_step);
          std::vector<std::size_t> neg_index(b);
          for (std::size_t k = 0; k < b; ++k) {
            neg_index[k] = (k + 1 + neg_rng.next_below(b - 1)) % b;
          }
          auto negatives = ad::gather_rows(anchors, neg_index);
          auto triplet = losses::triplet_loss(anchors, positives, negatives, cfg.loss.triplet_margin);
          row.loss_triplet = triplet.value();
          total = ad::add(ce, triplet);
        } else {
          total = ce;
        }
      } else {
        throw ContractError("train: mode assembles no loss");
      }

      row.loss_total = total.value();
      for (auto* p : params) p->zero_grad();
      ad::backward_grad(total);
      optimizer.step(params, row.lr);
      bundle.ema_update();
      memory::update_minibatch(mem, batch_mem, identity_embed.values());

      result.log.push_back(row);
      global_step++;
    }

    if (on_snapshot && cfg.snapshot_every > 0 && (epoch + 1) % cfg.snapshot_every == 0 &&
        epoch + 1 < cfg.epochs) {
      on_snapshot(epoch, bundle);
    }
  }

  memory::rebuild(mem, bundle, ds);
  result.snapshot = model::snapshot_test_model(bundle);
  if (on_snapshot) on_snapshot(cfg.epochs - 1, bundle);
  return result;
}

}  // namespace grafit::trainer
