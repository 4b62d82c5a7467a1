#pragma once

// The embedding network bundle: an MLP trunk, a projector (linear or MLP),
// a predictor for the instance branch, and exponential-moving-average target
// copies of trunk and projector. Embeddings are the L2-normalized projector
// outputs.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "grafit/data.hpp"
#include "grafit/error.hpp"
#include "grafit/io.hpp"
#include "grafit/nn.hpp"
#include "grafit/rng.hpp"
#include "grafit/tensor.hpp"

namespace grafit::model {

enum class ProjectorKind : std::uint32_t { FC = 0, MLP = 1, Identity = 2 };

struct ModelConfig {
  std::size_t input_dim = 32;
  std::vector<std::size_t> trunk_hidden = {64, 64};
  ProjectorKind projector_kind = ProjectorKind::MLP;
  std::size_t projector_hidden = 128;
  std::size_t embed_dim = 32;
  double tau = 0.99;
  std::size_t head_classes = 0;  // > 0 attaches a linear classifier on the trunk

  [[nodiscard]] std::size_t trunk_out_dim() const { return trunk_hidden.back(); }

  void validate() const {
    if (trunk_hidden.empty()) throw ConfigError("model: trunk needs at least one hidden layer");
    if (tau < 0.0 || tau > 1.0) throw ConfigError("model: tau must lie in [0, 1]");
    if (projector_kind == ProjectorKind::Identity && embed_dim != trunk_out_dim()) {
      throw ConfigError("model: identity projector requires embed_dim == trunk output dim");
    }
    if (embed_dim == 0 || input_dim == 0) throw ConfigError("model: zero dimension");
  }
};

// Record visitor used for checkpointing and EMA: name, shape, values, and
// whether the record is a parameter (true) or a running-statistics buffer.
using RecordVisitor =
    std::function<void(const std::string&, const std::vector<std::size_t>&, std::vector<double>&, bool)>;

struct TrunkNet {
  std::vector<nn::LinearLayer> linears;
  std::vector<nn::BatchNormLayer> norms;

  static TrunkNet init(const std::string& prefix, const ModelConfig& cfg, Rng& rng,
                       bool requires_grad) {
    TrunkNet t;
    std::size_t in = cfg.input_dim;
    for (std::size_t i = 0; i < cfg.trunk_hidden.size(); ++i) {
      const std::string layer = prefix + "." + std::to_string(i);
      t.linears.push_back(nn::LinearLayer::init(layer, in, cfg.trunk_hidden[i], rng, requires_grad));
      t.norms.push_back(nn::BatchNormLayer::init(layer + ".bn", cfg.trunk_hidden[i], requires_grad));
      in = cfg.trunk_hidden[i];
    }
    return t;
  }

  ad::Tensor forward(const ad::Tensor& x, bool training) {
    ad::Tensor h = x;
    for (std::size_t i = 0; i < linears.size(); ++i) {
      h = ad::relu(norms[i].forward(linears[i].forward(h), training));
    }
    return h;
  }

  void visit(const RecordVisitor& fn) {
    for (std::size_t i = 0; i < linears.size(); ++i) {
      fn(linears[i].weight.name, linears[i].weight.tensor.shape(), linears[i].weight.values(), true);
      fn(linears[i].bias.name, linears[i].bias.tensor.shape(), linears[i].bias.values(), true);
      fn(norms[i].gamma.name, norms[i].gamma.tensor.shape(), norms[i].gamma.values(), true);
      fn(norms[i].beta.name, norms[i].beta.tensor.shape(), norms[i].beta.values(), true);
      fn(norms[i].gamma.name + ".running_mean", {norms[i].dim()}, norms[i].running_mean, false);
      fn(norms[i].gamma.name + ".running_var", {norms[i].dim()}, norms[i].running_var, false);
    }
  }
};

// Two linear layers separated by batch norm and ReLU.
struct MlpBlock {
  nn::LinearLayer in;
  nn::BatchNormLayer bn;
  nn::LinearLayer out;

  static MlpBlock init(const std::string& prefix, std::size_t in_dim, std::size_t hidden,
                       std::size_t out_dim, Rng& rng, bool requires_grad) {
    MlpBlock m;
    m.in = nn::LinearLayer::init(prefix + ".in", in_dim, hidden, rng, requires_grad);
    m.bn = nn::BatchNormLayer::init(prefix + ".bn", hidden, requires_grad);
    m.out = nn::LinearLayer::init(prefix + ".out", hidden, out_dim, rng, requires_grad);
    return m;
  }

  ad::Tensor forward(const ad::Tensor& x, bool training) {
    return out.forward(ad::relu(bn.forward(in.forward(x), training)));
  }

  void visit(const RecordVisitor& fn) {
    fn(in.weight.name, in.weight.tensor.shape(), in.weight.values(), true);
    fn(in.bias.name, in.bias.tensor.shape(), in.bias.values(), true);
    fn(bn.gamma.name, bn.gamma.tensor.shape(), bn.gamma.values(), true);
    fn(bn.beta.name, bn.beta.tensor.shape(), bn.beta.values(), true);
    fn(bn.gamma.name + ".running_mean", {bn.dim()}, bn.running_mean, false);
    fn(bn.gamma.name + ".running_var", {bn.dim()}, bn.running_var, false);
    fn(out.weight.name, out.weight.tensor.shape(), out.weight.values(), true);
    fn(out.bias.name, out.bias.tensor.shape(), out.bias.values(), true);
  }
};

struct ProjectorNet {
  ProjectorKind kind = ProjectorKind::MLP;
  std::optional<nn::LinearLayer> fc;
  std::optional<MlpBlock> mlp;

  static ProjectorNet init(const std::string& prefix, const ModelConfig& cfg, Rng& rng,
                           bool requires_grad) {
    ProjectorNet p;
    p.kind = cfg.projector_kind;
    switch (cfg.projector_kind) {
      case ProjectorKind::FC:
        p.fc = nn::LinearLayer::init(prefix + ".fc", cfg.trunk_out_dim(), cfg.embed_dim, rng,
                                     requires_grad);
        break;
      case ProjectorKind::MLP:
        p.mlp = MlpBlock::init(prefix, cfg.trunk_out_dim(), cfg.projector_hidden, cfg.embed_dim,
                               rng, requires_grad);
        break;
      case ProjectorKind::Identity:
        break;
    }
    return p;
  }

  ad::Tensor forward(const ad::Tensor& x, bool training) {
    switch (kind) {
      case ProjectorKind::FC:
        return fc->forward(x);
      case ProjectorKind::MLP:
        return mlp->forward(x, training);
      case ProjectorKind::Identity:
        return x;
    }
    throw ContractError("projector: unknown kind");
  }

  void visit(const RecordVisitor& fn) {
    if (fc) {
      fn(fc->weight.name, fc->weight.tensor.shape(), fc->weight.values(), true);
      fn(fc->bias.name, fc->bias.tensor.shape(), fc->bias.values(), true);
    }
    if (mlp) mlp->visit(fn);
  }
};

// Online and target networks plus the predictor of the instance branch.
struct ModelBundle {
  ModelConfig config;
  TrunkNet trunk;
  ProjectorNet projector;
  MlpBlock predictor;
  TrunkNet target_trunk;
  ProjectorNet target_projector;
  std::optional<nn::LinearLayer> head;

  static ModelBundle init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    ModelBundle b;
    b.config = cfg;
    Rng init_rng = rng.stream("model_init");
    b.trunk = TrunkNet::init("trunk", cfg, init_rng, true);
    b.projector = ProjectorNet::init("projector", cfg, init_rng, true);
    b.predictor = MlpBlock::init("predictor", cfg.embed_dim, cfg.projector_hidden, cfg.embed_dim,
                                 init_rng, true);
    if (cfg.head_classes > 0) {
      b.head = nn::LinearLayer::init("head", cfg.trunk_out_dim(), cfg.head_classes, init_rng, true);
    }
    // Targets start as exact copies of the online parameters.
    Rng scratch(0);
    b.target_trunk = TrunkNet::init("target_trunk", cfg, scratch, false);
    b.target_projector = ProjectorNet::init("target_projector", cfg, scratch, false);
    b.copy_online_to_target();
    return b;
  }

  // g(x) = l2_normalize(P(f(x))), through either the online or the target
  // network. The target path tracks no gradients (its leaves do not require
  // them).
  ad::Tensor forward_embed(const ad::Tensor& x, bool use_target, bool training) {
    if (x.shape().size() != 2 || x.shape()[1] != config.input_dim) {
      throw ContractError("forward_embed: input shape " + ad::format_shape(x.shape()) +
                          " does not match input_dim " + std::to_string(config.input_dim));
    }
    TrunkNet& f = use_target ? target_trunk : trunk;
    ProjectorNet& p = use_target ? target_projector : projector;
    return ad::l2_normalize_rows(p.forward(f.forward(x, training), training));
  }

  // Predictor on top of an embedding batch; output is intentionally not
  // re-normalized (the cosine downstream is scale-invariant).
  ad::Tensor forward_predictor(const ad::Tensor& g, bool training) {
    return predictor.forward(g, training);
  }

  // Classification logits from the trunk (requires head_classes > 0).
  ad::Tensor forward_head(const ad::Tensor& x, bool training) {
    if (!head) throw ContractError("forward_head: bundle has no classification head");
    return head->forward(trunk.forward(x, training));
  }

  // xi <- tau * xi + (1 - tau) * theta for every target parameter and
  // running-statistics buffer.
  void ema_update() {
    const double tau = config.tau;
    auto blend = [tau](std::vector<double>& target, const std::vector<double>& online) {
      for (std::size_t i = 0; i < target.size(); ++i) {
        target[i] = tau * target[i] + (1.0 - tau) * online[i];
      }
    };
    std::vector<std::vector<double>*> online_recs, target_recs;
    auto collect = [](std::vector<std::vector<double>*>& dst) {
      return [&dst](const std::string&, const std::vector<std::size_t>&, std::vector<double>& v,
                    bool) { dst.push_back(&v); };
    };
    trunk.visit(collect(online_recs));
    projector.visit(collect(online_recs));
    target_trunk.visit(collect(target_recs));
    target_projector.visit(collect(target_recs));
    for (std::size_t i = 0; i < target_recs.size(); ++i) blend(*target_recs[i], *online_recs[i]);
  }

  void copy_online_to_target() {
    std::vector<std::vector<double>*> online_recs, target_recs;
    auto collect = [](std::vector<std::vector<double>*>& dst) {
      return [&dst](const std::string&, const std::vector<std::size_t>&, std::vector<double>& v,
                    bool) { dst.push_back(&v); };
    };
    trunk.visit(collect(online_recs));
    projector.visit(collect(online_recs));
    target_trunk.visit(collect(target_recs));
    target_projector.visit(collect(target_recs));
    for (std::size_t i = 0; i < target_recs.size(); ++i) *target_recs[i] = *online_recs[i];
  }

  // Every trainable parameter, in a stable order (optimizer state is keyed
  // by this order).
  std::vector<nn::Parameter*> trainable_params() {
    std::vector<nn::Parameter*> out;
    for (std::size_t i = 0; i < trunk.linears.size(); ++i) {
      out.push_back(&trunk.linears[i].weight);
      out.push_back(&trunk.linears[i].bias);
      out.push_back(&trunk.norms[i].gamma);
      out.push_back(&trunk.norms[i].beta);
    }
    auto add_mlp = [&out](MlpBlock& m) {
      out.push_back(&m.in.weight);
      out.push_back(&m.in.bias);
      out.push_back(&m.bn.gamma);
      out.push_back(&m.bn.beta);
      out.push_back(&m.out.weight);
      out.push_back(&m.out.bias);
    };
    if (projector.fc) {
      out.push_back(&projector.fc->weight);
      out.push_back(&projector.fc->bias);
    }
    if (projector.mlp) add_mlp(*projector.mlp);
    add_mlp(predictor);
    if (head) {
      out.push_back(&head->weight);
      out.push_back(&head->bias);
    }
    return out;
  }

  void visit_all(const RecordVisitor& fn) {
    trunk.visit(fn);
    projector.visit(fn);
    predictor.visit(fn);
    target_trunk.visit(fn);
    target_projector.visit(fn);
    if (head) {
      fn(head->weight.name, head->weight.tensor.shape(), head->weight.values(), true);
      fn(head->bias.name, head->bias.tensor.shape(), head->bias.values(), true);
    }
  }
};

// Test-time model: online trunk and projector only, evaluation mode only.
struct TestModel {
  ModelConfig config;
  TrunkNet trunk;
  ProjectorNet projector;

  ad::Tensor forward_embed(const ad::Tensor& x) {
    if (x.shape().size() != 2 || x.shape()[1] != config.input_dim) {
      throw ContractError("forward_embed: input shape " + ad::format_shape(x.shape()) +
                          " does not match input_dim " + std::to_string(config.input_dim));
    }
    return ad::l2_normalize_rows(projector.forward(trunk.forward(x, false), false));
  }

  // Raw trunk features, used by the linear-probe protocols (the projector is
  // discarded there).
  ad::Tensor forward_trunk(const ad::Tensor& x) {
    if (x.shape().size() != 2 || x.shape()[1] != config.input_dim) {
      throw ContractError("forward_trunk: input shape " + ad::format_shape(x.shape()) +
                          " does not match input_dim " + std::to_string(config.input_dim));
    }
    return trunk.forward(x, false);
  }

  void visit_all(const RecordVisitor& fn) {
    trunk.visit(fn);
    projector.visit(fn);
  }
};

// Strips the instance branch: keeps only the online trunk and projector.
inline TestModel snapshot_test_model(ModelBundle& bundle) {
  TestModel snap;
  snap.config = bundle.config;
  snap.config.head_classes = 0;
  Rng scratch(0);
  snap.trunk = TrunkNet::init("trunk", snap.config, scratch, false);
  snap.projector = ProjectorNet::init("projector", snap.config, scratch, false);

  std::map<std::string, std::vector<double>> source;
  bundle.trunk.visit([&source](const std::string& name, const std::vector<std::size_t>&,
                               std::vector<double>& v, bool) { source[name] = v; });
  bundle.projector.visit([&source](const std::string& name, const std::vector<std::size_t>&,
                                   std::vector<double>& v, bool) { source[name] = v; });
  snap.visit_all([&source](const std::string& name, const std::vector<std::size_t>&,
                           std::vector<double>& v, bool) { v = source.at(name); });
  return snap;
}

// --- "GFIT" checkpoint format ----------------------------------------------
//
// magic "GFIT", version u32, then per-parameter records:
//   name length u32, UTF-8 name, rank u32, dims u32 each, f64 values.
// A "__meta__" record carries the architecture so a checkpoint is
// self-describing; test snapshots simply omit the predictor/target/head
// records.

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

namespace detail {

inline std::vector<double> encode_meta(const ModelConfig& cfg, bool is_snapshot) {
  std::vector<double> meta;
  meta.push_back(static_cast<double>(cfg.input_dim));
  meta.push_back(static_cast<double>(cfg.trunk_hidden.size()));
  for (auto h : cfg.trunk_hidden) meta.push_back(static_cast<double>(h));
  meta.push_back(static_cast<double>(cfg.projector_kind));
  meta.push_back(static_cast<double>(cfg.projector_hidden));
  meta.push_back(static_cast<double>(cfg.embed_dim));
  meta.push_back(cfg.tau);
  meta.push_back(static_cast<double>(cfg.head_classes));
  meta.push_back(is_snapshot ? 1.0 : 0.0);
  return meta;
}

inline ModelConfig decode_meta(const std::vector<double>& meta, bool& is_snapshot,
                               const std::string& path) {
  if (meta.size() < 7) throw DataError(path + ": malformed __meta__ record");
  ModelConfig cfg;
  std::size_t at = 0;
  cfg.input_dim = static_cast<std::size_t>(meta[at++]);
  const auto n_hidden = static_cast<std::size_t>(meta[at++]);
  if (meta.size() != 7 + n_hidden + 1) throw DataError(path + ": malformed __meta__ record");
  cfg.trunk_hidden.clear();
  for (std::size_t i = 0; i < n_hidden; ++i) cfg.trunk_hidden.push_back(static_cast<std::size_t>(meta[at++]));
  cfg.projector_kind = static_cast<ProjectorKind>(static_cast<std::uint32_t>(meta[at++]));
  cfg.projector_hidden = static_cast<std::size_t>(meta[at++]);
  cfg.embed_dim = static_cast<std::size_t>(meta[at++]);
  cfg.tau = meta[at++];
  cfg.head_classes = static_cast<std::size_t>(meta[at++]);
  is_snapshot = meta[at++] != 0.0;
  return cfg;
}

inline void write_record(std::ostream& os, const std::string& name,
                         const std::vector<std::size_t>& shape, const std::vector<double>& values) {
  io::write_string(os, name);
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  io::write_f64s(os, values);
}

template <typename Model>
void save_gfit(const std::string& path, Model& m, bool is_snapshot) {
  auto os = io::open_output(path);
  io::write_bytes(os, "GFIT", 4);
  io::write_pod<std::uint32_t>(os, kCheckpointFormatVersion);
  const auto meta = encode_meta(m.config, is_snapshot);
  write_record(os, "__meta__", {meta.size()}, meta);
  m.visit_all([&os](const std::string& name, const std::vector<std::size_t>& shape,
                    std::vector<double>& values, bool) { write_record(os, name, shape, values); });
}

inline std::map<std::string, std::vector<double>> read_records(io::Reader& r) {
  std::map<std::string, std::vector<double>> records;
  while (!r.at_eof()) {
    const std::string name = r.read_string();
    const auto rank = r.read_pod<std::uint32_t>();
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) count *= r.read_pod<std::uint32_t>();
    records[name] = r.read_f64s(count);
  }
  return records;
}

template <typename Model>
void assign_records(Model& m, std::map<std::string, std::vector<double>>& records,
                    const std::string& path) {
  m.visit_all([&records, &path](const std::string& name, const std::vector<std::size_t>& shape,
                                std::vector<double>& values, bool) {
    auto it = records.find(name);
    if (it == records.end()) throw DataError(path + ": missing record \"" + name + "\"");
    if (it->second.size() != values.size()) {
      throw DataError(path + ": record \"" + name + "\" has " + std::to_string(it->second.size()) +
                      " values, expected " + std::to_string(values.size()));
    }
    (void)shape;
    values = std::move(it->second);
  });
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, ModelBundle& bundle) {
  detail::save_gfit(path, bundle, false);
}

inline void save_snapshot(const std::string& path, TestModel& snap) {
  detail::save_gfit(path, snap, true);
}

inline bool checkpoint_is_snapshot(const std::string& path) {
  auto is = io::open_input(path);
  io::Reader r(is, path);
  r.expect_magic("GFIT");
  const auto version = r.read_pod<std::uint32_t>();
  if (version != kCheckpointFormatVersion) {
    throw DataError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  const std::string name = r.read_string();
  if (name != "__meta__") throw DataError(path + ": first record must be __meta__");
  const auto rank = r.read_pod<std::uint32_t>();
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) count *= r.read_pod<std::uint32_t>();
  bool is_snapshot = false;
  detail::decode_meta(r.read_f64s(count), is_snapshot, path);
  return is_snapshot;
}

namespace detail {

inline std::map<std::string, std::vector<double>> load_records_checked(const std::string& path,
                                                                       ModelConfig& cfg,
                                                                       bool expect_snapshot) {
  auto is = io::open_input(path);
  io::Reader r(is, path);
  r.expect_magic("GFIT");
  const auto version = r.read_pod<std::uint32_t>();
  if (version != kCheckpointFormatVersion) {
    throw DataError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  auto records = read_records(r);
  auto meta_it = records.find("__meta__");
  if (meta_it == records.end()) throw DataError(path + ": missing __meta__ record");
  bool is_snapshot = false;
  cfg = decode_meta(meta_it->second, is_snapshot, path);
  if (is_snapshot != expect_snapshot) {
    throw DataError(path + (expect_snapshot ? ": expected a test snapshot, found a full bundle"
                                            : ": expected a full bundle, found a test snapshot"));
  }
  records.erase(meta_it);
  return records;
}

}  // namespace detail

inline ModelBundle load_checkpoint(const std::string& path) {
  ModelConfig cfg;
  auto records = detail::load_records_checked(path, cfg, false);
  Rng scratch(0);
  ModelBundle bundle = ModelBundle::init(cfg, scratch);
  detail::assign_records(bundle, records, path);
  return bundle;
}

inline TestModel load_snapshot(const std::string& path) {
  ModelConfig cfg;
  auto records = detail::load_records_checked(path, cfg, true);
  TestModel snap;
  snap.config = cfg;
  Rng scratch(0);
  snap.trunk = TrunkNet::init("trunk", cfg, scratch, false);
  snap.projector = ProjectorNet::init("projector", cfg, scratch, false);
  detail::assign_records(snap, records, path);
  return snap;
}

// Plain-matrix embedding of many feature rows (evaluation mode, online path).
template <typename Model>
std::vector<double> embed_rows(Model& m, const std::vector<double>& rows, std::size_t n,
                               std::size_t dim) {
  if (n == 0) return {};
  auto x = ad::Tensor::leaf({n, dim}, rows, false);
  if constexpr (requires(Model& mm, const ad::Tensor& t) { mm.forward_embed(t); }) {
    return m.forward_embed(x).values();
  } else {
    return m.forward_embed(x, false, false).values();
  }
}

}  // namespace grafit::model
