#pragma once

// Command-line entry point: wires configuration, training, evaluation,
// retrieval, and analysis into reproducible runs. Every subcommand writes
// its outputs plus a manifest (resolved configuration, content digest,
// artifact paths) into the run directory.

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "grafit/analysis.hpp"
#include "grafit/classify.hpp"
#include "grafit/data.hpp"
#include "grafit/error.hpp"
#include "grafit/evaluate.hpp"
#include "grafit/io.hpp"
#include "grafit/losses.hpp"
#include "grafit/memory.hpp"
#include "grafit/metrics.hpp"
#include "grafit/model.hpp"
#include "grafit/retrieval.hpp"
#include "grafit/trainer.hpp"

namespace grafit::cli {

inline constexpr const char* kToolVersion = "0.1.0";

namespace detail {

inline std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline std::string suggest(const std::string& unknown, const std::vector<std::string>& known) {
  std::string best;
  std::size_t best_d = unknown.size();
  for (const auto& k : known) {
    const std::size_t d = edit_distance(unknown, k);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best_d <= std::max<std::size_t>(2, unknown.size() / 3) ? best : std::string{};
}

}  // namespace detail

// Collects the resolved configuration and artifact paths of one run and
// writes them as manifest.json in the run directory.
class RunContext {
 public:
  RunContext(std::string command, const std::filesystem::path& run_dir, std::uint64_t seed)
      : command_(std::move(command)), run_dir_(run_dir), seed_(seed) {
    std::filesystem::create_directories(run_dir_);
    note("seed", std::to_string(seed));
  }

  void note(const std::string& key, const std::string& value) { config_[key] = value; }
  void note(const std::string& key, double value) { config_[key] = io::format_f64(value); }
  void note(const std::string& key, std::size_t value) { config_[key] = std::to_string(value); }

  // Registers an artifact and returns its absolute path.
  std::filesystem::path artifact(const std::string& name, const std::string& relative) {
    artifacts_[name] = relative;
    return run_dir_ / relative;
  }

  [[nodiscard]] const std::filesystem::path& dir() const { return run_dir_; }
  [[nodiscard]] std::uint64_t seed() const { return seed_; }

  void write_manifest() const {
    std::string canonical;
    for (const auto& [k, v] : config_) canonical += k + "=" + v + "\n";
    nlohmann::ordered_json manifest;
    manifest["command"] = command_;
    manifest["tool_version"] = kToolVersion;
    manifest["seed"] = seed_;
    manifest["config"] = config_;
    manifest["config_digest"] = detail::fnv1a_hex(canonical);
    manifest["artifacts"] = artifacts_;
    std::ofstream os(run_dir_ / "manifest.json");
    if (!os) throw DataError("cannot write manifest in " + run_dir_.string());
    os << manifest.dump(2) << "\n";
  }

 private:
  std::string command_;
  std::filesystem::path run_dir_;
  std::uint64_t seed_;
  std::map<std::string, std::string> config_;
  std::map<std::string, std::string> artifacts_;
};

namespace detail {

inline std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  return os;
}

inline classify::LabelLevel parse_level(const std::string& s) {
  if (s == "coarse") return classify::LabelLevel::Coarse;
  if (s == "fine") return classify::LabelLevel::Fine;
  throw ConfigError("unknown label level: " + s);
}

inline retrieval::RankingMode parse_rank_mode(const std::string& s) {
  if (s == "cosine") return retrieval::RankingMode::Cosine;
  if (s == "conditional") return retrieval::RankingMode::Conditional;
  if (s == "oracle") return retrieval::RankingMode::Oracle;
  throw ConfigError("unknown ranking mode: " + s);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Subcommand options
// ---------------------------------------------------------------------------

struct CommonOpts {
  std::uint64_t seed = 7;
  std::string out_dir;
  std::size_t threads = 1;

  [[nodiscard]] std::filesystem::path run_dir() const {
    if (!out_dir.empty()) return out_dir;
    if (const char* env = std::getenv("GRAFIT_RUN_DIR")) return env;
    return ".";
  }
};

struct GenDataOpts {
  std::size_t num_coarse = 10;
  std::size_t fine_per_coarse = 4;
  std::size_t dim = 32;
  std::size_t samples_per_fine = 30;
  double coarse_separation = 7.0;
  double fine_separation = 3.5;
  std::string out_file = "dataset.gdat";
};

struct TrainOpts {
  std::string dataset;
  std::string mode = "grafit";
  std::string label_level = "coarse";
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double lambda = 1.0;
  double sigma = 0.05;
  std::size_t augmentations = 4;
  double triplet_margin = 0.2;
  double tau = 0.99;
  std::size_t embed_dim = 32;
  std::size_t projector_hidden = 128;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double jitter = 0.1;
  double scale_lo = 0.9;
  double scale_hi = 1.1;
  double mask_prob = 0.05;
  std::size_t snapshot_every = 0;
};

struct EvalKnnOpts {
  std::string snapshot;
  std::string dataset;
  std::string embeddings;
  std::string level = "both";
  std::size_t k = 0;  // 0 = cross-validate over the grid
  double sigma = 0.05;
};

struct EvalMapOpts {
  std::string snapshot;
  std::string dataset;
  std::string embeddings;
  std::string modes = "cosine,conditional,oracle";
  double epsilon = 1e-6;
  std::size_t posterior_k = 10;
  double sigma = 0.05;
};

struct RetrieveOpts {
  std::string snapshot;
  std::string dataset;
  std::string embeddings;
  std::string mode = "cosine";
  double epsilon = 1e-6;
  std::size_t posterior_k = 10;
  double sigma = 0.05;
  std::size_t max_queries = 0;  // 0 = all
  std::size_t top = 0;          // 0 = full ranking
};

struct PcaOpts {
  std::string embeddings;
};

struct SeparabilityOpts {
  std::string snapshot;
  std::string dataset;
  std::size_t trials = 10;
  std::size_t probe_epochs = 100;
  double probe_lr = 0.01;
  std::size_t probe_batch = 64;
  std::size_t posterior_k = 10;
  double sigma = 0.05;
};

struct SweepLambdaOpts {
  std::string dataset;
  std::string grid = "0,0.2,0.4,0.6,0.8,1.0,1.2,1.4";
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double sigma = 0.05;
  std::size_t augmentations = 4;
  double jitter = 0.1;
  double scale_lo = 0.9;
  double scale_hi = 1.1;
  double mask_prob = 0.05;
};

// ---------------------------------------------------------------------------
// Command implementations
// ---------------------------------------------------------------------------

namespace detail {

inline void run_gen_data(const CommonOpts& common, const GenDataOpts& o) {
  RunContext ctx("gen-data", common.run_dir(), common.seed);
  ctx.note("num_coarse", o.num_coarse);
  ctx.note("fine_per_coarse", o.fine_per_coarse);
  ctx.note("dim", o.dim);
  ctx.note("samples_per_fine", o.samples_per_fine);
  ctx.note("coarse_separation", o.coarse_separation);
  ctx.note("fine_separation", o.fine_separation);
  auto ds = data::synth_gaussian_hierarchy(o.num_coarse, o.fine_per_coarse, o.dim,
                                           o.coarse_separation, o.fine_separation,
                                           o.samples_per_fine, common.seed);
  data::save_dataset(ctx.artifact("dataset", o.out_file).string(), ds);
  ctx.write_manifest();
}

inline trainer::TrainConfig train_config_from(const TrainOpts& o, std::uint64_t seed) {
  trainer::TrainConfig tc;
  tc.epochs = o.epochs;
  tc.batch_size = o.batch_size;
  tc.momentum = o.momentum;
  tc.weight_decay = o.weight_decay;
  tc.seed = seed;
  tc.snapshot_every = o.snapshot_every;
  tc.loss.sigma = o.sigma;
  tc.loss.lambda = o.lambda;
  tc.loss.num_augmentations = o.augmentations;
  tc.loss.triplet_margin = o.triplet_margin;
  tc.augmentation.jitter_sigma = o.jitter;
  tc.augmentation.scale_lo = o.scale_lo;
  tc.augmentation.scale_hi = o.scale_hi;
  tc.augmentation.mask_prob = o.mask_prob;
  return tc;
}

inline void write_log_csv(const std::filesystem::path& path,
                          const std::vector<trainer::LogRow>& log) {
  auto os = open_csv(path);
  os << "step,epoch,lr,loss_total,loss_knn,loss_inst,loss_ce,loss_triplet\n";
  auto cell = [](const std::optional<double>& v) {
    return v ? io::format_f64(*v) : std::string{};
  };
  for (const auto& row : log) {
    os << row.step << "," << row.epoch << "," << io::format_f64(row.lr) << ","
       << io::format_f64(row.loss_total) << "," << cell(row.loss_knn) << ","
       << cell(row.loss_inst) << "," << cell(row.loss_ce) << "," << cell(row.loss_triplet)
       << "\n";
  }
}

inline void run_train(const CommonOpts& common, const TrainOpts& o) {
  RunContext ctx("train", common.run_dir(), common.seed);
  ctx.note("dataset", o.dataset);
  ctx.note("mode", o.mode);
  ctx.note("label_level", o.label_level);
  ctx.note("epochs", o.epochs);
  ctx.note("batch_size", o.batch_size);
  ctx.note("lambda", o.lambda);
  ctx.note("sigma", o.sigma);
  ctx.note("augmentations", o.augmentations);
  ctx.note("tau", o.tau);
  ctx.note("embed_dim", o.embed_dim);
  ctx.note("momentum", o.momentum);
  ctx.note("weight_decay", o.weight_decay);

  auto ds = data::load_dataset(o.dataset);
  if (o.label_level == "fine") {
    ds = data::promote_fine_to_coarse(ds);
  } else if (o.label_level != "coarse") {
    throw ConfigError("unknown label level: " + o.label_level);
  }
  const auto mode = trainer::parse_mode(o.mode);
  auto mc = trainer::model_config_for_mode(mode, ds.dim, ds.num_coarse(), o.embed_dim,
                                           o.projector_hidden, o.tau);
  Rng rng(common.seed);
  auto bundle = model::ModelBundle::init(mc, rng);
  auto mem = memory::init_memory(bundle, ds);
  const auto tc = train_config_from(o, common.seed);

  trainer::EpochCallback callback;
  if (o.snapshot_every > 0) {
    callback = [&ctx](std::size_t epoch, model::ModelBundle& b) {
      const std::string name = "checkpoint_epoch" + std::to_string(epoch + 1) + ".gfit";
      model::save_checkpoint(ctx.artifact(name, name).string(), b);
    };
  }
  auto result = trainer::train(bundle, ds, mem, tc, mode, callback);

  model::save_checkpoint(ctx.artifact("checkpoint", "checkpoint.gfit").string(), bundle);
  model::save_snapshot(ctx.artifact("snapshot", "snapshot.gfit").string(), result.snapshot);
  memory::save_embedding_store(ctx.artifact("embeddings", "embeddings.gemb").string(), mem);
  write_log_csv(ctx.artifact("log", "log.csv"), result.log);
  ctx.write_manifest();
}

struct EvalInputs {
  model::TestModel snapshot;
  data::HierarchicalDataset ds;
  memory::EmbeddingMemory mem;
};

inline EvalInputs load_eval_inputs(const std::string& snapshot_path, const std::string& dataset_path,
                                   const std::string& embeddings_path) {
  EvalInputs in;
  in.snapshot = model::load_snapshot(snapshot_path);
  in.ds = data::load_dataset(dataset_path);
  in.mem = memory::load_embedding_store(embeddings_path);
  const auto train = in.ds.indices_of(data::Split::Train);
  if (in.mem.size() != train.size()) {
    throw DataError("embedding store holds " + std::to_string(in.mem.size()) +
                    " rows but the dataset has " + std::to_string(train.size()) +
                    " training samples");
  }
  return in;
}

inline void run_eval_knn(const CommonOpts& common, const EvalKnnOpts& o) {
  RunContext ctx("eval-knn", common.run_dir(), common.seed);
  ctx.note("snapshot", o.snapshot);
  ctx.note("dataset", o.dataset);
  ctx.note("embeddings", o.embeddings);
  ctx.note("level", o.level);
  ctx.note("k", o.k);
  ctx.note("sigma", o.sigma);

  auto in = load_eval_inputs(o.snapshot, o.dataset, o.embeddings);
  auto queries = evaluate::embed_split(in.snapshot, in.ds, data::Split::Test);

  std::vector<std::string> levels =
      o.level == "both" ? std::vector<std::string>{"coarse", "fine"}
                        : std::vector<std::string>{o.level};
  auto os = open_csv(ctx.artifact("knn_eval", "knn_eval.csv"));
  os << "label_level,k,sigma,accuracy\n";
  for (const auto& level_name : levels) {
    const auto level = parse_level(level_name);
    if (level == classify::LabelLevel::Fine && !in.mem.has_fine()) {
      throw DataError("eval-knn: embedding store has no fine labels");
    }
    classify::KnnConfig cfg;
    cfg.sigma = o.sigma;
    std::size_t k = o.k;
    if (k == 0) {
      // Cross-validate on the training samples, leave-one-out.
      std::vector<classify::ValidationSample> validation;
      validation.reserve(in.mem.size());
      const auto& labels =
          level == classify::LabelLevel::Coarse ? in.mem.coarse_labels : in.mem.fine_labels;
      for (std::size_t i = 0; i < in.mem.size(); ++i) {
        auto row = in.mem.row(i);
        validation.push_back({{row.begin(), row.end()}, labels[i], i});
      }
      k = classify::select_k(in.mem, validation, level, cfg);
    }
    cfg.k = k;
    const double acc = evaluate::knn_top1(queries, in.ds, in.mem, level, cfg, common.threads);
    os << level_name << "," << k << "," << io::format_f64(o.sigma) << "," << io::format_f64(acc)
       << "\n";
  }
  ctx.write_manifest();
}

inline void run_eval_map(const CommonOpts& common, const EvalMapOpts& o) {
  RunContext ctx("eval-map", common.run_dir(), common.seed);
  ctx.note("snapshot", o.snapshot);
  ctx.note("dataset", o.dataset);
  ctx.note("embeddings", o.embeddings);
  ctx.note("modes", o.modes);
  ctx.note("epsilon", o.epsilon);
  ctx.note("posterior_k", o.posterior_k);
  ctx.note("sigma", o.sigma);

  auto in = load_eval_inputs(o.snapshot, o.dataset, o.embeddings);
  if (!in.mem.has_fine()) throw DataError("eval-map: embedding store has no fine labels");
  auto queries = evaluate::embed_split(in.snapshot, in.ds, data::Split::Test);
  classify::KnnConfig posterior_cfg;
  posterior_cfg.k = o.posterior_k;
  posterior_cfg.sigma = o.sigma;

  auto os = open_csv(ctx.artifact("map_eval", "map_eval.csv"));
  os << "level,mode,mAP,num_queries,num_skipped\n";
  for (const auto& mode_name : split_list(o.modes)) {
    const auto mode = parse_rank_mode(mode_name);
    auto report = evaluate::map_report(queries, in.ds, in.mem, mode, posterior_cfg, o.epsilon,
                                       common.threads);
    os << report.level << "," << mode_name << "," << io::format_f64(report.value) << ","
       << report.num_queries << "," << report.num_skipped << "\n";
  }
  ctx.write_manifest();
}

inline void run_retrieve(const CommonOpts& common, const RetrieveOpts& o) {
  RunContext ctx("retrieve", common.run_dir(), common.seed);
  ctx.note("snapshot", o.snapshot);
  ctx.note("dataset", o.dataset);
  ctx.note("embeddings", o.embeddings);
  ctx.note("mode", o.mode);
  ctx.note("max_queries", o.max_queries);
  ctx.note("top", o.top);

  auto in = load_eval_inputs(o.snapshot, o.dataset, o.embeddings);
  auto queries = evaluate::embed_split(in.snapshot, in.ds, data::Split::Test);
  if (o.max_queries > 0 && queries.size() > o.max_queries) {
    queries.rows.resize(o.max_queries);
    queries.embeddings.resize(o.max_queries * queries.dim);
  }
  classify::KnnConfig posterior_cfg;
  posterior_cfg.k = o.posterior_k;
  posterior_cfg.sigma = o.sigma;
  auto ranked = evaluate::rank_queries(queries, in.ds, in.mem, parse_rank_mode(o.mode),
                                       posterior_cfg, o.epsilon, common.threads);

  auto os = open_csv(ctx.artifact("retrieve", "retrieve.csv"));
  os << "query_id,rank,memory_index,score,coarse_match,fine_match\n";
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    const auto query_row = queries.rows[i];
    const auto& entries = ranked[i].ranking.entries;
    const std::size_t limit = o.top == 0 ? entries.size() : std::min(o.top, entries.size());
    for (std::size_t r = 0; r < limit; ++r) {
      const auto [mem_index, score] = entries[r];
      os << ranked[i].ranking.query_id << "," << (r + 1) << "," << mem_index << ","
         << io::format_f64(score) << ","
         << (in.mem.coarse_labels[mem_index] == in.ds.coarse_labels[query_row] ? 1 : 0) << ","
         << (in.mem.has_fine() && in.mem.fine_labels[mem_index] == in.ds.fine_labels[query_row]
                 ? 1
                 : 0)
         << "\n";
    }
  }
  ctx.write_manifest();
}

inline void run_analyze_pca(const CommonOpts& common, const PcaOpts& o) {
  RunContext ctx("analyze-pca", common.run_dir(), common.seed);
  ctx.note("embeddings", o.embeddings);
  auto mem = memory::load_embedding_store(o.embeddings);
  auto curve = analysis::pca_energy(mem.rows, mem.size(), mem.dim);
  auto os = open_csv(ctx.artifact("pca", "pca.csv"));
  os << "component_index,eigenvalue,cumulative_energy\n";
  for (std::size_t i = 0; i < curve.eigenvalues.size(); ++i) {
    os << i << "," << io::format_f64(curve.eigenvalues[i]) << ","
       << io::format_f64(curve.cumulative_energy[i]) << "\n";
  }
  ctx.write_manifest();
}

inline void run_separability(const CommonOpts& common, const SeparabilityOpts& o) {
  RunContext ctx("separability", common.run_dir(), common.seed);
  ctx.note("snapshot", o.snapshot);
  ctx.note("dataset", o.dataset);
  ctx.note("trials", o.trials);
  ctx.note("probe_epochs", o.probe_epochs);
  ctx.note("probe_lr", o.probe_lr);

  auto snapshot = model::load_snapshot(o.snapshot);
  auto ds = data::load_dataset(o.dataset);
  analysis::ProbeConfig probe;
  probe.epochs = o.probe_epochs;
  probe.lr = o.probe_lr;
  probe.batch_size = o.probe_batch;
  probe.seed = common.seed;
  classify::KnnConfig knn_cfg;
  knn_cfg.k = o.posterior_k;
  knn_cfg.sigma = o.sigma;
  auto result = analysis::separability_run(snapshot, ds, o.trials, probe, knn_cfg);

  auto os = open_csv(ctx.artifact("separability", "separability.csv"));
  os << "trial,accuracy_plain,accuracy_conditioned\n";
  for (std::size_t t = 0; t < result.plain.size(); ++t) {
    os << t << "," << io::format_f64(result.plain[t]) << ","
       << io::format_f64(result.conditioned[t]) << "\n";
  }
  ctx.write_manifest();
}

inline void run_sweep_lambda(const CommonOpts& common, const SweepLambdaOpts& o) {
  RunContext ctx("sweep-lambda", common.run_dir(), common.seed);
  ctx.note("dataset", o.dataset);
  ctx.note("grid", o.grid);
  ctx.note("epochs", o.epochs);
  ctx.note("batch_size", o.batch_size);

  auto ds = data::load_dataset(o.dataset);
  std::vector<double> grid;
  for (const auto& item : split_list(o.grid)) grid.push_back(std::stod(item));
  if (grid.empty()) throw ConfigError("sweep-lambda: empty grid");

  auto os = open_csv(ctx.artifact("sweep", "sweep.csv"));
  os << "lambda,map_fine,knn_top1_fine\n";
  for (double lambda : grid) {
    auto mc = trainer::model_config_for_mode(trainer::TrainMode::Grafit, ds.dim, ds.num_coarse());
    Rng rng(common.seed);
    auto bundle = model::ModelBundle::init(mc, rng);
    auto mem = memory::init_memory(bundle, ds);
    trainer::TrainConfig tc;
    tc.epochs = o.epochs;
    tc.batch_size = o.batch_size;
    tc.seed = common.seed;
    tc.loss.sigma = o.sigma;
    tc.loss.lambda = lambda;
    tc.loss.num_augmentations = o.augmentations;
    tc.augmentation.jitter_sigma = o.jitter;
    tc.augmentation.scale_lo = o.scale_lo;
    tc.augmentation.scale_hi = o.scale_hi;
    tc.augmentation.mask_prob = o.mask_prob;
    auto result = trainer::train(bundle, ds, mem, tc, trainer::TrainMode::Grafit);

    auto queries = evaluate::embed_split(result.snapshot, ds, data::Split::Test);
    classify::KnnConfig knn_cfg;
    knn_cfg.sigma = o.sigma;
    knn_cfg.k = std::min<std::size_t>(10, mem.size());
    auto report = evaluate::map_report(queries, ds, mem, retrieval::RankingMode::Cosine, knn_cfg,
                                       1e-6, common.threads);
    const double top1 =
        evaluate::knn_top1(queries, ds, mem, classify::LabelLevel::Fine, knn_cfg, common.threads);
    os << io::format_f64(lambda) << "," << io::format_f64(report.value) << ","
       << io::format_f64(top1) << "\n";
  }
  ctx.write_manifest();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

// Executes one subcommand. Returns 0 on success, 1 on usage/config errors,
// 2 on data or contract errors, 3 on numeric errors.
inline int run(std::vector<std::string> args) {
  CLI::App app{"Coarse-to-fine metric-learning engine"};
  app.set_config("--config", "", "Plain key=value configuration file; flags override");
  app.require_subcommand(1);

  CommonOpts common;
  app.add_option("--seed", common.seed, "Root seed for every random stream");
  app.add_option("--out,-o", common.out_dir, "Run directory (default: $GRAFIT_RUN_DIR or .)");
  app.add_option("--threads", common.threads, "Worker threads for evaluation queries");

  GenDataOpts gen;
  auto* cmd_gen = app.add_subcommand("gen-data", "Generate a synthetic hierarchical dataset");
  cmd_gen->add_option("--coarse", gen.num_coarse, "Number of coarse classes");
  cmd_gen->add_option("--fine-per-coarse", gen.fine_per_coarse, "Fine classes per coarse class");
  cmd_gen->add_option("--dim", gen.dim, "Feature dimension");
  cmd_gen->add_option("--samples-per-fine", gen.samples_per_fine, "Samples per fine class");
  cmd_gen->add_option("--coarse-sep", gen.coarse_separation, "Coarse center radius");
  cmd_gen->add_option("--fine-sep", gen.fine_separation, "Fine center offset radius");
  cmd_gen->add_option("--out-file", gen.out_file, "Dataset file name inside the run directory");

  TrainOpts train;
  auto* cmd_train = app.add_subcommand("train", "Train an embedding model");
  cmd_train->add_option("--dataset", train.dataset, "Dataset file (GDAT)")->required();
  cmd_train->add_option("--mode", train.mode,
                        "grafit | grafit-fc | snca-plus | ce | ce-triplet | inst-only");
  cmd_train->add_option("--label-level", train.label_level, "Supervision level: coarse | fine");
  cmd_train->add_option("--epochs", train.epochs, "Training epochs");
  cmd_train->add_option("--batch-size", train.batch_size, "Batch size (lr = 0.1/256 * batch)");
  cmd_train->add_option("--lambda", train.lambda, "Instance loss weight");
  cmd_train->add_option("--sigma", train.sigma, "Softmax temperature");
  cmd_train->add_option("--augmentations", train.augmentations, "Views per sample (T)");
  cmd_train->add_option("--triplet-margin", train.triplet_margin, "Triplet hinge margin");
  cmd_train->add_option("--tau", train.tau, "Target decay rate");
  cmd_train->add_option("--embed-dim", train.embed_dim, "Embedding dimension");
  cmd_train->add_option("--projector-hidden", train.projector_hidden, "Projector MLP width");
  cmd_train->add_option("--momentum", train.momentum, "Nesterov momentum");
  cmd_train->add_option("--weight-decay", train.weight_decay, "L2 weight decay");
  cmd_train->add_option("--jitter", train.jitter, "Augmentation noise scale");
  cmd_train->add_option("--scale-lo", train.scale_lo, "Augmentation scale lower bound");
  cmd_train->add_option("--scale-hi", train.scale_hi, "Augmentation scale upper bound");
  cmd_train->add_option("--mask-prob", train.mask_prob, "Augmentation masking probability");
  cmd_train->add_option("--snapshot-every", train.snapshot_every,
                        "Epochs between intermediate checkpoints (0 = final only)");

  EvalKnnOpts eval_knn;
  auto* cmd_eval_knn = app.add_subcommand("eval-knn", "kNN classification accuracy on the test split");
  cmd_eval_knn->add_option("--snapshot", eval_knn.snapshot, "Test model (GFIT snapshot)")->required();
  cmd_eval_knn->add_option("--dataset", eval_knn.dataset, "Dataset file")->required();
  cmd_eval_knn->add_option("--embeddings", eval_knn.embeddings, "Embedding store (GEMB)")->required();
  cmd_eval_knn->add_option("--level", eval_knn.level, "coarse | fine | both");
  cmd_eval_knn->add_option("--k", eval_knn.k, "Neighbor count (0 = cross-validate)");
  cmd_eval_knn->add_option("--sigma", eval_knn.sigma, "Weighting temperature");

  EvalMapOpts eval_map;
  auto* cmd_eval_map = app.add_subcommand("eval-map", "Retrieval mAP on the test split");
  cmd_eval_map->add_option("--snapshot", eval_map.snapshot, "Test model (GFIT snapshot)")->required();
  cmd_eval_map->add_option("--dataset", eval_map.dataset, "Dataset file")->required();
  cmd_eval_map->add_option("--embeddings", eval_map.embeddings, "Embedding store (GEMB)")->required();
  cmd_eval_map->add_option("--modes", eval_map.modes, "Comma list of cosine,conditional,oracle");
  cmd_eval_map->add_option("--epsilon", eval_map.epsilon, "Posterior clamp for log-odds");
  cmd_eval_map->add_option("--posterior-k", eval_map.posterior_k, "k for the coarse posterior");
  cmd_eval_map->add_option("--sigma", eval_map.sigma, "Posterior temperature");

  RetrieveOpts retrieve;
  auto* cmd_retrieve = app.add_subcommand("retrieve", "Emit per-query rankings as CSV");
  cmd_retrieve->add_option("--snapshot", retrieve.snapshot, "Test model (GFIT snapshot)")->required();
  cmd_retrieve->add_option("--dataset", retrieve.dataset, "Dataset file")->required();
  cmd_retrieve->add_option("--embeddings", retrieve.embeddings, "Embedding store (GEMB)")->required();
  cmd_retrieve->add_option("--mode", retrieve.mode, "cosine | conditional | oracle");
  cmd_retrieve->add_option("--epsilon", retrieve.epsilon, "Posterior clamp for log-odds");
  cmd_retrieve->add_option("--posterior-k", retrieve.posterior_k, "k for the coarse posterior");
  cmd_retrieve->add_option("--sigma", retrieve.sigma, "Posterior temperature");
  cmd_retrieve->add_option("--max-queries", retrieve.max_queries, "Limit query count (0 = all)");
  cmd_retrieve->add_option("--top", retrieve.top, "Rows per query (0 = full ranking)");

  PcaOpts pca;
  auto* cmd_pca = app.add_subcommand("analyze-pca", "Cumulative PCA energy of stored embeddings");
  cmd_pca->add_option("--embeddings", pca.embeddings, "Embedding store (GEMB)")->required();

  SeparabilityOpts separability;
  auto* cmd_sep = app.add_subcommand("separability", "Random sub-label probe study");
  cmd_sep->add_option("--snapshot", separability.snapshot, "Test model (GFIT snapshot)")->required();
  cmd_sep->add_option("--dataset", separability.dataset, "Dataset file")->required();
  cmd_sep->add_option("--trials", separability.trials, "Number of random splits");
  cmd_sep->add_option("--probe-epochs", separability.probe_epochs, "Probe training epochs");
  cmd_sep->add_option("--probe-lr", separability.probe_lr, "Probe learning rate");
  cmd_sep->add_option("--probe-batch", separability.probe_batch, "Probe batch size");
  cmd_sep->add_option("--posterior-k", separability.posterior_k, "k for the coarse posterior");
  cmd_sep->add_option("--sigma", separability.sigma, "Posterior temperature");

  SweepLambdaOpts sweep;
  auto* cmd_sweep = app.add_subcommand("sweep-lambda", "Train across an instance-weight grid");
  cmd_sweep->add_option("--dataset", sweep.dataset, "Dataset file (GDAT)")->required();
  cmd_sweep->add_option("--grid", sweep.grid, "Comma-separated lambda values");
  cmd_sweep->add_option("--epochs", sweep.epochs, "Training epochs per lambda");
  cmd_sweep->add_option("--batch-size", sweep.batch_size, "Batch size");
  cmd_sweep->add_option("--sigma", sweep.sigma, "Softmax temperature");
  cmd_sweep->add_option("--augmentations", sweep.augmentations, "Views per sample (T)");
  cmd_sweep->add_option("--jitter", sweep.jitter, "Augmentation noise scale");
  cmd_sweep->add_option("--scale-lo", sweep.scale_lo, "Augmentation scale lower bound");
  cmd_sweep->add_option("--scale-hi", sweep.scale_hi, "Augmentation scale upper bound");
  cmd_sweep->add_option("--mask-prob", sweep.mask_prob, "Augmentation masking probability");

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    // Offer the nearest known flag or subcommand when something was not
    // recognized.
    std::vector<std::string> known;
    for (const auto* sub : app.get_subcommands({})) known.push_back(sub->get_name());
    auto add_options = [&known](const CLI::App* a) {
      for (const auto* opt : a->get_options()) {
        for (const auto& n : opt->get_lnames()) known.push_back("--" + n);
      }
    };
    add_options(&app);
    for (const auto* sub : app.get_subcommands({})) add_options(sub);
    for (auto& word : args) {
      if (word.rfind("--", 0) == 0 || std::none_of(known.begin(), known.end(),
                                                   [&](const std::string& k) { return k == word; })) {
        const auto hint = detail::suggest(word, known);
        if (!hint.empty()) {
          std::cerr << "hint: did you mean '" << hint << "'?\n";
          break;
        }
      }
    }
    return 1;
  }

  try {
    if (app.got_subcommand(cmd_gen)) {
      detail::run_gen_data(common, gen);
    } else if (app.got_subcommand(cmd_train)) {
      detail::run_train(common, train);
    } else if (app.got_subcommand(cmd_eval_knn)) {
      detail::run_eval_knn(common, eval_knn);
    } else if (app.got_subcommand(cmd_eval_map)) {
      detail::run_eval_map(common, eval_map);
    } else if (app.got_subcommand(cmd_retrieve)) {
      detail::run_retrieve(common, retrieve);
    } else if (app.got_subcommand(cmd_pca)) {
      detail::run_analyze_pca(common, pca);
    } else if (app.got_subcommand(cmd_sep)) {
      detail::run_separability(common, separability);
    } else if (app.got_subcommand(cmd_sweep)) {
      detail::run_sweep_lambda(common, sweep);
    }
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const ContractError& e) {
    std::cerr << "contract error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace grafit::cli
