#pragma once

// Single-client federated simulation: gradient sharing at batch size 1,
// training on (possibly encrypted) datasets, and the end-to-end experiment
// runner that writes a resumable bundle:
//
//   <out>/config.json    resolved configuration and run manifest
//   <out>/metrics.csv    one row per (defense, attack): accuracy and privacy aggregates
//   <out>/pairs.csv      per-pair PSNR / proxy with aggregate footers
//   <out>/images/        private, encrypted and reconstructed grids
//   <out>/checkpoints/   content-addressed stage outputs
//
// metrics.csv columns:
//   defense,param,attack,accuracy,proxy_avg,proxy_std,proxy_min,psnr_avg,psnr_std,psnr_max

#include <algorithm>
#include <cstdio>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "loda/attack.hpp"
#include "loda/data.hpp"
#include "loda/defense.hpp"
#include "loda/digest.hpp"
#include "loda/metrics.hpp"
#include "loda/nn.hpp"

namespace loda::fedsim {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---- worker fan-out -------------------------------------------------------

// LODA_WORKERS, default 1.
inline std::size_t worker_budget(std::size_t configured = 0) {
  if (configured) return configured;
  if (const char* env = std::getenv("LODA_WORKERS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return 1;
}

// Runs fn(0..n-1) on up to `workers` threads. Results must be written by
// index, so scheduling never affects output. Rethrows the first exception.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

// ---- gradients and training -----------------------------------------------

inline Tensor label_row(const Label& l) { return Tensor({1, l.num_classes()}, l.probs()); }

struct SharedGradient {
  ad::GradientVector grad;
  std::optional<std::vector<std::size_t>> support;  // unpruned flat indices when pruned
};

// grad_theta L(f(x), y) for one example, optionally pruned.
inline SharedGradient client_gradient(const nn::Model& m, const LabeledExample& ex, std::optional<double> prune_p = {}) {
  nn::check_input(m, ex.image);
  ad::Tape tape;
  auto params = nn::variable_params(tape, m);
  ad::Var loss = ad::softmax_cross_entropy(nn::forward(m.spec, params, tape.constant(ex.image.batched())), label_row(ex.label));
  auto g = tape.grad(loss, params);
  std::vector<Tensor> parts;
  for (auto& v : g) parts.push_back(v.value());
  SharedGradient out{ad::GradientVector(std::move(parts)), {}};
  if (prune_p) {
    out.support = defense::prune_support(out.grad.flatten(), *prune_p);
    out.grad = defense::grad_prune(out.grad, *prune_p);
  }
  return out;
}

enum class TrainOptimizer { Sgd, Momentum };
NLOHMANN_JSON_SERIALIZE_ENUM(TrainOptimizer, {{TrainOptimizer::Sgd, "sgd"}, {TrainOptimizer::Momentum, "momentum"}})

struct TrainConfig {
  TrainOptimizer optimizer = TrainOptimizer::Momentum;
  double lr = 0.05;
  double momentum = 0.9;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  bool lr_decay = true;                 // x0.1 at 1/2 and 3/4 of the epochs
  std::optional<double> prune_p;        // GradPruning applied to every update
  std::optional<double> stop_accuracy;  // stop once eval accuracy reaches this

  void validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (!(lr >= 0.0)) throw ConfigError("train: lr must be >= 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  }
};

inline void to_json(json& j, const TrainConfig& c) {
  j = {{"optimizer", c.optimizer}, {"lr", c.lr}, {"momentum", c.momentum}, {"epochs", c.epochs},
       {"batch_size", c.batch_size}, {"seed", c.seed}, {"lr_decay", c.lr_decay}};
  j["prune_p"] = c.prune_p ? json(*c.prune_p) : json(nullptr);
  j["stop_accuracy"] = c.stop_accuracy ? json(*c.stop_accuracy) : json(nullptr);
}

inline void from_json(const json& j, TrainConfig& c) {
  TrainConfig d;
  c.optimizer = enum_value(j, "optimizer", d.optimizer);
  c.lr = j.value("lr", d.lr);
  c.momentum = j.value("momentum", d.momentum);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.seed = j.value("seed", d.seed);
  c.lr_decay = j.value("lr_decay", d.lr_decay);
  c.prune_p = j.contains("prune_p") && !j["prune_p"].is_null() ? std::optional<double>(j["prune_p"].get<double>()) : std::nullopt;
  c.stop_accuracy = j.contains("stop_accuracy") && !j["stop_accuracy"].is_null()
                        ? std::optional<double>(j["stop_accuracy"].get<double>())
                        : std::nullopt;
}

struct TrainResult {
  nn::Model model;
  std::vector<double> loss;      // mean training loss per epoch
  std::vector<double> accuracy;  // eval accuracy after each epoch
  std::size_t epochs_run = 0;
};

struct DivergenceError : Error {
  std::vector<double> trace;
  DivergenceError(const std::string& w, std::vector<double> t) : Error("divergence", w), trace(std::move(t)) {}
};

// Minibatch training with soft-label cross-entropy, -sum q log p. Order is
// reshuffled every epoch from (seed, epoch). Deterministic given the seed.
inline TrainResult train(nn::Model model, const std::vector<LabeledExample>& data,
                         const std::vector<LabeledExample>& eval, const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw DomainError("train: empty dataset");
  const std::size_t d = shape_numel(model.spec.input), k = model.spec.num_classes;
  std::vector<Tensor> velocity;
  for (const auto& p : model.params) velocity.emplace_back(p.shape(), 0.0);
  TrainResult res;
  std::vector<std::size_t> order(data.size());
  std::vector<double> batch_losses;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(cfg.seed, epoch));
    rng.shuffle(order);
    double lr = cfg.lr;
    if (cfg.lr_decay) {
      if (4 * epoch >= 2 * cfg.epochs) lr *= 0.1;
      if (4 * epoch >= 3 * cfg.epochs) lr *= 0.1;
    }
    double total = 0.0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - s);
      Shape bs{n};
      bs.insert(bs.end(), model.spec.input.begin(), model.spec.input.end());
      Tensor xb(bs), yb({n, k});
      for (std::size_t i = 0; i < n; ++i) {
        const auto& ex = data[order[s + i]];
        nn::check_input(model, ex.image);
        std::copy(ex.image.pixels().data().begin(), ex.image.pixels().data().end(),
                  xb.data().begin() + static_cast<std::ptrdiff_t>(i * d));
        std::copy(ex.label.probs().begin(), ex.label.probs().end(), yb.data().begin() + static_cast<std::ptrdiff_t>(i * k));
      }
      ad::Tape tape;
      auto params = nn::variable_params(tape, model);
      ad::Var loss;
      try {
        loss = ad::softmax_cross_entropy(nn::forward(model.spec, params, tape.constant(xb)), yb);
      } catch (const NonFiniteError& e) {
        batch_losses.push_back(std::numeric_limits<double>::infinity());
        throw DivergenceError(std::string("train: ") + e.what(), batch_losses);
      }
      const double lv = loss.value().item();
      batch_losses.push_back(lv);
      if (!(lv <= 1e6)) throw DivergenceError("train: loss " + std::to_string(lv) + " exceeds 1e6", batch_losses);
      total += lv * static_cast<double>(n);
      auto grads = tape.grad(loss, params);
      std::vector<Tensor> g;
      for (auto& v : grads) g.push_back(v.value());
      if (cfg.prune_p) g = defense::grad_prune(ad::GradientVector(std::move(g)), *cfg.prune_p).parts();
      for (std::size_t p = 0; p < model.params.size(); ++p) {
        auto w = model.params[p].data();
        auto gv = g[p].data();
        if (cfg.optimizer == TrainOptimizer::Momentum) {
          auto v = velocity[p].data();
          for (std::size_t i = 0; i < w.size(); ++i) {
            v[i] = cfg.momentum * v[i] + gv[i];
            w[i] -= lr * v[i];
          }
        } else {
          for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * gv[i];
        }
      }
    }
    res.loss.push_back(total / static_cast<double>(data.size()));
    res.epochs_run = epoch + 1;
    if (!eval.empty()) {
      res.accuracy.push_back(metrics::accuracy(model, eval));
      if (cfg.stop_accuracy && res.accuracy.back() >= *cfg.stop_accuracy) break;
    }
  }
  res.model = std::move(model);
  return res;
}

// ---- attacker capability ---------------------------------------------------

// Everything an attack may touch. Built by the simulator; attacks receive
// nothing else. Encrypted images appear only as declared oracle data for the
// adaptive attacks.
struct AttackerView {
  const nn::Model* model = nullptr;
  ad::GradientVector shared;
  Label label;
  std::optional<std::vector<std::size_t>> prune_support;
  const defense::MixingMatrix* mixing = nullptr;
  const nn::FeatureExtractor* extractor = nullptr;
  std::optional<Image> encrypted;
};

// ---- experiment -------------------------------------------------------------

enum class AlphaSelect { PerImage, PerConfig };
NLOHMANN_JSON_SERIALIZE_ENUM(AlphaSelect, {{AlphaSelect::PerImage, "per-image"}, {AlphaSelect::PerConfig, "per-config"}})

enum class AdaptiveSource { Encrypted, Reconstructed };
NLOHMANN_JSON_SERIALIZE_ENUM(AdaptiveSource, {{AdaptiveSource::Encrypted, "encrypted"}, {AdaptiveSource::Reconstructed, "reconstructed"}})

// Where the adaptive mixing attack gets M_hat: the true matrix from
// provenance, or attack::estimate_mixing on the attacker's images.
enum class MixingEstimate { Oracle, Correlation };
NLOHMANN_JSON_SERIALIZE_ENUM(MixingEstimate, {{MixingEstimate::Oracle, "oracle"}, {MixingEstimate::Correlation, "correlation"}})

struct DatasetConfig {
  std::string format = "synthetic";  // synthetic | idx | png-dir | csv
  std::string path, labels_path, manifest;
  Shape image_shape{1, 16, 16};
  std::size_t num_classes = 10;
  std::size_t synthetic_count = 2400;
  std::uint64_t seed = 1;
  data::SplitSizes sizes{600, 200, 800, 400};
  double public_skew = 0.8;
};

struct ExtractorConfig {
  std::string arch = "cnn-small";
  std::uint64_t seed = 11;
  std::vector<std::string> layers;  // empty: all conv layers
  TrainConfig train{TrainOptimizer::Momentum, 0.05, 0.9, 40, 32, 5, true, std::nullopt, 0.9};
  double validation_fraction = 0.2;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  std::string model_arch = "cnn-small";
  std::uint64_t model_seed = 1;
  ExtractorConfig extractor;
  ExtractorConfig metric{"cnn-wide", 23, {}, {TrainOptimizer::Momentum, 0.05, 0.9, 40, 32, 7, true, std::nullopt, 0.9}, 0.2};
  // defense
  defense::Kind defense = defense::Kind::None;
  double prune_p = 0.9;
  std::size_t mix_k = 4;
  bool instahide_public = false;
  defense::LodaConfig loda;
  std::uint64_t defense_seed = 3;
  // attacks
  std::size_t eval_count = 8;
  attack::AttackConfig gla;
  double prune_alpha_tv = 1e-3;    // replaces gla.alpha_tv under grad-prune
  std::vector<double> alpha_grid;  // empty: no sweep
  AlphaSelect alpha_select = AlphaSelect::PerImage;
  bool adaptive = true;
  AdaptiveSource adaptive_source = AdaptiveSource::Encrypted;
  attack::AttackConfig mix_attack = attack::mix_attack_defaults();
  std::size_t mix_restarts = 50;
  MixingEstimate mixing_estimate = MixingEstimate::Oracle;
  attack::AttackConfig loda_attack = attack::loda_attack_defaults();
  std::vector<double> loda_attack_c{0, 1, 5, 10, 20};
  // utility
  bool run_training = true;
  TrainConfig train{TrainOptimizer::Momentum, 0.05, 0.9, 30, 32, 9, true, std::nullopt, std::nullopt};
  std::size_t train_repeats = 5;  // accuracy is the mean over (model_seed + r, train.seed + r)
  std::size_t workers = 0;
};

inline json to_json_config(const ExperimentConfig& c) {
  json j;
  j["dataset"] = {{"format", c.dataset.format},
                  {"path", c.dataset.path},
                  {"labels_path", c.dataset.labels_path},
                  {"manifest", c.dataset.manifest},
                  {"image_shape", c.dataset.image_shape},
                  {"num_classes", c.dataset.num_classes},
                  {"synthetic_count", c.dataset.synthetic_count},
                  {"seed", c.dataset.seed},
                  {"sizes", {c.dataset.sizes.private_train, c.dataset.sizes.private_eval, c.dataset.sizes.public_pool, c.dataset.sizes.test}},
                  {"public_skew", c.dataset.public_skew}};
  auto ext = [](const ExtractorConfig& e) {
    return json{{"arch", e.arch}, {"seed", e.seed}, {"layers", e.layers}, {"train", e.train}, {"validation_fraction", e.validation_fraction}};
  };
  j["model"] = {{"arch", c.model_arch}, {"seed", c.model_seed}};
  j["extractor"] = ext(c.extractor);
  j["metric"] = ext(c.metric);
  j["defense"] = {{"kind", c.defense},
                  {"prune_p", c.prune_p},
                  {"k", c.mix_k},
                  {"instahide_public", c.instahide_public},
                  {"seed", c.defense_seed},
                  {"loda", {{"c", c.loda.c}, {"T", c.loda.steps}, {"tau", c.loda.tau}, {"seed", c.loda.seed}}}};
  j["attack"] = {{"eval_count", c.eval_count},
                 {"gla", c.gla},
                 {"prune_alpha_tv", c.prune_alpha_tv},
                 {"alpha_grid", c.alpha_grid},
                 {"alpha_select", c.alpha_select},
                 {"adaptive", c.adaptive},
                 {"adaptive_source", c.adaptive_source},
                 {"mix", c.mix_attack},
                 {"mix_restarts", c.mix_restarts},
                 {"mixing_estimate", c.mixing_estimate},
                 {"loda", c.loda_attack},
                 {"loda_c", c.loda_attack_c}};
  j["train"] = c.train;
  j["run_training"] = c.run_training;
  j["train_repeats"] = c.train_repeats;
  j["workers"] = c.workers;
  return j;
}

// Overlays keys present in `j`; unknown sections are rejected. Either every
// key applies or `out` is left untouched.
inline void apply_json_config(ExperimentConfig& out, const json& j) {
  ExperimentConfig c = out;
  static const std::set<std::string> top = {"dataset", "model", "extractor", "metric", "defense", "attack", "train", "run_training", "train_repeats", "workers", "manifest"};
  for (const auto& [k, v] : j.items())
    if (!top.count(k)) throw ConfigError("config: unknown section '" + k + "'");
  try {
    if (j.contains("dataset")) {
      const auto& d = j["dataset"];
      c.dataset.format = d.value("format", c.dataset.format);
      c.dataset.path = d.value("path", c.dataset.path);
      c.dataset.labels_path = d.value("labels_path", c.dataset.labels_path);
      c.dataset.manifest = d.value("manifest", c.dataset.manifest);
      c.dataset.image_shape = d.value("image_shape", c.dataset.image_shape);
      c.dataset.num_classes = d.value("num_classes", c.dataset.num_classes);
      c.dataset.synthetic_count = d.value("synthetic_count", c.dataset.synthetic_count);
      c.dataset.seed = d.value("seed", c.dataset.seed);
      c.dataset.public_skew = d.value("public_skew", c.dataset.public_skew);
      if (d.contains("sizes")) {
        auto s = d["sizes"].get<std::vector<std::size_t>>();
        if (s.size() != 4) throw ConfigError("config: dataset.sizes needs 4 entries");
        c.dataset.sizes = {s[0], s[1], s[2], s[3]};
      }
    }
    if (j.contains("model")) {
      c.model_arch = j["model"].value("arch", c.model_arch);
      c.model_seed = j["model"].value("seed", c.model_seed);
    }
    auto ext = [](ExtractorConfig& e, const json& x) {
      e.arch = x.value("arch", e.arch);
      e.seed = x.value("seed", e.seed);
      e.layers = x.value("layers", e.layers);
      if (x.contains("train")) {
        json merged = e.train;
        merged.update(x["train"]);
        e.train = merged.get<TrainConfig>();
      }
      e.validation_fraction = x.value("validation_fraction", e.validation_fraction);
    };
    if (j.contains("extractor")) ext(c.extractor, j["extractor"]);
    if (j.contains("metric")) ext(c.metric, j["metric"]);
    if (j.contains("defense")) {
      const auto& d = j["defense"];
      if (d.contains("kind")) c.defense = defense::parse_kind(d["kind"].get<std::string>());
      c.prune_p = d.value("prune_p", c.prune_p);
      c.mix_k = d.value("k", c.mix_k);
      c.instahide_public = d.value("instahide_public", c.instahide_public);
      c.defense_seed = d.value("seed", c.defense_seed);
      if (d.contains("loda")) {
        const auto& l = d["loda"];
        c.loda.c = l.value("c", c.loda.c);
        c.loda.steps = l.value("T", c.loda.steps);
        c.loda.tau = l.value("tau", c.loda.tau);
        c.loda.seed = l.value("seed", c.loda.seed);
      }
    }
    if (j.contains("attack")) {
      const auto& a = j["attack"];
      auto merge = [](attack::AttackConfig& cfg, const json& x) {
        json m = cfg;
        m.update(x);
        cfg = m.get<attack::AttackConfig>();
      };
      c.eval_count = a.value("eval_count", c.eval_count);
      if (a.contains("gla")) merge(c.gla, a["gla"]);
      c.prune_alpha_tv = a.value("prune_alpha_tv", c.prune_alpha_tv);
      c.alpha_grid = a.value("alpha_grid", c.alpha_grid);
      c.alpha_select = enum_value(a, "alpha_select", c.alpha_select);
      c.adaptive = a.value("adaptive", c.adaptive);
      c.adaptive_source = enum_value(a, "adaptive_source", c.adaptive_source);
      if (a.contains("mix")) merge(c.mix_attack, a["mix"]);
      c.mix_restarts = a.value("mix_restarts", c.mix_restarts);
      c.mixing_estimate = enum_value(a, "mixing_estimate", c.mixing_estimate);
      if (a.contains("loda")) merge(c.loda_attack, a["loda"]);
      c.loda_attack_c = a.value("loda_c", c.loda_attack_c);
    }
    if (j.contains("train")) {
      json merged = c.train;
      merged.update(j["train"]);
      c.train = merged.get<TrainConfig>();
    }
    c.run_training = j.value("run_training", c.run_training);
    c.train_repeats = j.value("train_repeats", c.train_repeats);
    if (c.train_repeats < 1) throw ConfigError("config: train_repeats must be >= 1");
    c.workers = j.value("workers", c.workers);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.loda.validate();
  c.gla.validate();
  out = std::move(c);
}

inline std::string short_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

inline std::string param_label(const ExperimentConfig& c) {
  switch (c.defense) {
    case defense::Kind::GradPrune:
      return "p=" + short_num(c.prune_p);
    case defense::Kind::Mixup:
    case defense::Kind::InstaHide:
      return "k=" + std::to_string(c.mix_k);
    case defense::Kind::Loda:
      return "c=" + short_num(c.loda.c);
    default:
      return "-";
  }
}

// ---- content-addressed stage cache ----------------------------------------

namespace detail {

inline std::string key_of(const json& j) { return sha256_hex(j.dump()).substr(0, 20); }

inline void write_tensors(const std::string& path, const std::vector<Tensor>& ts) {
  json header = json::array();
  std::string payload;
  for (const auto& t : ts) {
    header.push_back(t.shape());
    payload += doubles_to_bytes(t.data());
  }
  const std::string h = header.dump();
  std::string out = std::to_string(h.size()) + "\n" + h + payload;
  write_file(path + ".tmp", out);
  fs::rename(path + ".tmp", path);
}

inline std::vector<Tensor> read_tensors(const std::string& path) {
  const std::string b = read_file(path);
  const auto nl = b.find('\n');
  if (nl == std::string::npos) throw ParseError("tensor cache " + path + ": missing header");
  const std::size_t hlen = std::stoull(b.substr(0, nl));
  const json header = json::parse(b.substr(nl + 1, hlen));
  std::size_t off = nl + 1 + hlen;
  std::vector<Tensor> out;
  for (const auto& s : header) {
    const Shape shape = s.get<Shape>();
    const std::size_t nb = shape_numel(shape) * sizeof(double);
    if (off + nb > b.size()) throw ParseError("tensor cache " + path + ": truncated");
    out.emplace_back(shape, bytes_to_doubles(std::string_view(b).substr(off, nb)));
    off += nb;
  }
  return out;
}

inline std::vector<Tensor> cached_tensors(const fs::path& dir, const std::string& name, const json& key,
                                          const std::function<std::vector<Tensor>()>& compute) {
  const auto path = (dir / (name + "-" + key_of(key) + ".bin")).string();
  if (fs::exists(path)) return read_tensors(path);
  auto ts = compute();
  write_tensors(path, ts);
  return ts;
}

inline std::string samples_digest(const std::vector<LabeledExample>& s) {
  Digest d;
  for (const auto& e : s) {
    d.update_u64(e.id);
    d.update(e.image.pixels());
    d.update(std::span<const double>(e.label.probs()));
  }
  return d.hex();
}

}  // namespace detail

// ---- experiment stages ------------------------------------------------------

struct Corpus {
  std::vector<LabeledExample> samples;
  data::Manifest manifest;
};

inline Corpus load_corpus(const DatasetConfig& dc) {
  Corpus c;
  if (dc.format == "synthetic") {
    if (dc.image_shape.size() != 3) throw ConfigError("dataset: image_shape must be [C,H,W]");
    c.samples = data::synthetic_shapes({dc.synthetic_count, dc.image_shape[1], dc.image_shape[2], dc.image_shape[0], dc.seed});
  } else {
    data::Source src{data::parse_format(dc.format), dc.path, dc.labels_path, dc.image_shape, dc.num_classes};
    c.samples = data::load_samples(src);
  }
  c.manifest = dc.manifest.empty() ? data::make_manifest(data::hard_labels(c.samples), dc.sizes, dc.seed, dc.public_skew)
                                   : data::load_manifest(dc.manifest);
  return c;
}

inline data::DatasetSplit load_split(const DatasetConfig& dc) {
  const auto c = load_corpus(dc);
  return data::apply_manifest(c.samples, c.manifest);
}

// Trains a classifier on the public pool (held-out tail for validation)
// until its validation accuracy reaches train.stop_accuracy or the epoch
// budget runs out; both outcomes are recorded in the checkpoint meta.
inline nn::FeatureExtractor train_extractor(const ExtractorConfig& ec, const std::vector<LabeledExample>& pool,
                                            const Shape& input, std::size_t num_classes, const fs::path& ckpt_dir,
                                            json* meta_out = nullptr) {
  const json key = {{"arch", ec.arch}, {"seed", ec.seed}, {"train", ec.train}, {"val", ec.validation_fraction},
                    {"pool", detail::samples_digest(pool)}};
  const auto path = (ckpt_dir / ("extractor-" + detail::key_of(key) + ".bin")).string();
  nn::FeatureExtractor fx;
  if (fs::exists(path)) {
    auto lm = nn::load_model(path);
    fx.model = std::move(lm.model);
    if (meta_out) *meta_out = lm.meta;
  } else {
    const auto n_val = static_cast<std::size_t>(ec.validation_fraction * static_cast<double>(pool.size()));
    std::vector<LabeledExample> tr(pool.begin(), pool.end() - static_cast<std::ptrdiff_t>(n_val));
    std::vector<LabeledExample> val(pool.end() - static_cast<std::ptrdiff_t>(n_val), pool.end());
    auto res = train(nn::init_model(nn::architecture(ec.arch, input, num_classes), ec.seed), tr, val, ec.train);
    json meta = {{"epochs_run", res.epochs_run},
                 {"validation_accuracy", res.accuracy.empty() ? json(nullptr) : json(res.accuracy.back())},
                 {"threshold", ec.train.stop_accuracy ? json(*ec.train.stop_accuracy) : json(nullptr)},
                 {"reached_threshold", ec.train.stop_accuracy && !res.accuracy.empty() && res.accuracy.back() >= *ec.train.stop_accuracy}};
    fs::create_directories(ckpt_dir);
    nn::save_model(path, res.model, meta);
    fx.model = std::move(res.model);
    if (meta_out) *meta_out = meta;
  }
  fx.layers = ec.layers.empty() ? nn::conv_layer_names(fx.model.spec) : ec.layers;
  fx.validate_selection();
  return fx;
}

struct Encrypted {
  std::vector<defense::EncryptionRecord> records;
  std::optional<defense::MixingMatrix> mixing;
};

inline Encrypted encrypt_set(const ExperimentConfig& c, const std::vector<LabeledExample>& batch,
                             const std::vector<LabeledExample>& pool, const nn::FeatureExtractor* fx, std::size_t workers) {
  using defense::Kind;
  Encrypted out;
  switch (c.defense) {
    case Kind::None:
    case Kind::GradPrune:
      out.records = defense::identity_encrypt(batch, c.defense);
      break;
    case Kind::Mixup: {
      auto r = defense::mix_encrypt(batch, {c.mix_k, c.defense_seed, false});
      out.records = std::move(r.records);
      out.mixing = std::move(r.mixing);
      break;
    }
    case Kind::InstaHide: {
      auto r = defense::instahide_encrypt(batch, {c.mix_k, c.defense_seed, c.instahide_public}, &pool);
      out.records = std::move(r.records);
      if (!c.instahide_public) out.mixing = std::move(r.mixing);
      break;
    }
    case Kind::Loda: {
      if (!fx) throw ArtifactError("loda: extractor required");
      out.records.resize(batch.size());
      parallel_for(batch.size(), workers, [&](std::size_t i) { out.records[i] = defense::loda_encrypt(batch[i], *fx, c.loda, pool); });
      break;
    }
  }
  return out;
}

// Encrypts with a disk cache keyed on everything the output depends on.
inline Encrypted encrypt_cached(const ExperimentConfig& c, const std::vector<LabeledExample>& batch,
                                const std::vector<LabeledExample>& pool, const nn::FeatureExtractor* fx,
                                const fs::path& ckpt_dir, const std::string& tag) {
  json key = {{"defense", c.defense}, {"k", c.mix_k}, {"public", c.instahide_public}, {"seed", c.defense_seed},
              {"batch", detail::samples_digest(batch)}};
  if (c.defense == defense::Kind::InstaHide && c.instahide_public) key["pool"] = detail::samples_digest(pool);
  if (c.defense == defense::Kind::Loda) {
    key["loda"] = {c.loda.c, c.loda.steps, c.loda.tau, c.loda.seed};
    key["extractor"] = nn::model_digest(fx->model);
    key["layers"] = fx->layers;
    key["pool"] = detail::samples_digest(pool);
  }
  const auto dir = ckpt_dir / ("enc-" + tag + "-" + detail::key_of(key));
  if (fs::exists(dir / "manifest.json")) {
    auto ds = defense::load_encrypted(dir.string());
    return {std::move(ds.records), std::move(ds.mixing)};
  }
  auto enc = encrypt_set(c, batch, pool, fx, worker_budget(c.workers));
  defense::save_encrypted((dir.string() + ".tmp"), {c.defense, to_json_config(c)["defense"], enc.records, enc.mixing});
  fs::remove_all(dir);
  fs::rename(dir.string() + ".tmp", dir);
  return enc;
}

// Mean eval-accuracy curve over c.train_repeats trainings of `arch`, repeat r
// using model seed model_seed + r and shuffle seed train.seed + r. Each curve
// is cached under ckpt_dir.
inline std::vector<double> utility_curve(const ExperimentConfig& c, const std::string& arch,
                                         const std::vector<LabeledExample>& train_set,
                                         const std::vector<LabeledExample>& test, const fs::path& ckpt_dir) {
  const Shape input = c.dataset.image_shape;
  std::vector<double> mean(c.train.epochs, 0.0);
  for (std::size_t r = 0; r < c.train_repeats; ++r) {
    TrainConfig tc = c.train;
    tc.seed += r;
    if (c.defense == defense::Kind::GradPrune) tc.prune_p = c.prune_p;
    const std::uint64_t mseed = c.model_seed + r;
    const json key = {{"train", tc}, {"arch", arch}, {"seed", mseed}, {"data", detail::samples_digest(train_set)},
                      {"test", detail::samples_digest(test)}};
    auto curve = detail::cached_tensors(ckpt_dir, "train", key, [&] {
      auto tr = train(nn::init_model(nn::architecture(arch, input, c.dataset.num_classes), mseed), train_set, test, tc);
      return std::vector<Tensor>{Tensor::vector(tr.accuracy)};
    });
    const auto& acc = curve[0].values();
    for (std::size_t e = 0; e < mean.size(); ++e)
      mean[e] += acc[std::min(e, acc.size() - 1)] / static_cast<double>(c.train_repeats);
  }
  return mean;
}

struct AttackRow {
  std::string attack;
  metrics::PrivacyReport report;
  std::vector<Image> reconstructions;
};

struct ExperimentResult {
  std::string defense;
  std::string param;
  std::optional<double> accuracy;
  std::vector<double> accuracy_curve;
  double alpha_tv = 0.0;        // grid alpha with the best batch average
  double pixel_distance = 0.0;  // mean ||x' - x*||_2 over the eval batch
  std::vector<AttackRow> rows;  // gla, adaptive..., strongest
  std::vector<defense::EncryptionRecord> eval_records;
  std::vector<defense::EncryptionRecord> train_records;
  json extractor_meta;

  const AttackRow& row(const std::string& name) const {
    for (const auto& r : rows)
      if (r.attack == name) return r;
    throw Error("missing-row", "no attack row '" + name + "'");
  }
};

namespace detail {

inline metrics::PrivacyReport score(const std::vector<Image>& recon, const std::vector<LabeledExample>& truth,
                                    const nn::FeatureExtractor& metric_fx) {
  std::vector<metrics::PairScore> pairs;
  for (std::size_t i = 0; i < recon.size(); ++i)
    pairs.push_back({truth[i].id, metrics::psnr(recon[i], truth[i].image), metrics::perceptual_distance(recon[i], truth[i].image, metric_fx)});
  return metrics::summarize(std::move(pairs));
}

inline std::vector<Image> to_images(const std::vector<Tensor>& ts) {
  std::vector<Image> out;
  for (const auto& t : ts) out.emplace_back(t);
  return out;
}

inline std::vector<Tensor> to_tensors(const std::vector<Image>& is) {
  std::vector<Tensor> out;
  for (const auto& i : is) out.push_back(i.pixels());
  return out;
}

}  // namespace detail

inline std::string metrics_csv_header() {
  return "defense,param,attack,accuracy,proxy_avg,proxy_std,proxy_min,psnr_avg,psnr_std,psnr_max\n";
}

inline std::string metrics_csv_rows(const ExperimentResult& r) {
  std::string out;
  for (const auto& row : r.rows) {
    const auto& p = row.report;
    out += r.defense + "," + r.param + "," + row.attack + "," + (r.accuracy ? metrics::fmt(*r.accuracy) : "") + "," +
           metrics::fmt(p.proxy_avg) + "," + metrics::fmt(p.proxy_std) + "," + metrics::fmt(p.proxy_min) + "," +
           metrics::fmt(p.psnr_avg) + "," + metrics::fmt(p.psnr_std) + "," + metrics::fmt(p.psnr_max) + "\n";
  }
  return out;
}

// Full pipeline for one defense configuration. Every expensive stage is
// cached under <out>/checkpoints, so a rerun recomputes nothing and writes
// identical files.
// What the attacker gets for one released record: the gradient of the
// (defended) example, its label, and the defense's oracle data.
inline AttackerView make_view(const ExperimentConfig& c, const nn::Model& model, const defense::EncryptionRecord& r,
                              const Encrypted& enc, const nn::FeatureExtractor* fx) {
  using defense::Kind;
  AttackerView v;
  auto sg = client_gradient(model, {r.sample_id, r.image, r.label},
                            c.defense == Kind::GradPrune ? std::optional<double>(c.prune_p) : std::nullopt);
  v.model = &model;
  v.shared = std::move(sg.grad);
  v.label = r.label;
  v.prune_support = std::move(sg.support);
  if (enc.mixing) v.mixing = &*enc.mixing;
  v.extractor = fx;
  if (c.adaptive && c.adaptive_source == AdaptiveSource::Encrypted && c.defense != Kind::None && c.defense != Kind::GradPrune)
    v.encrypted = r.image;
  return v;
}

// Artifacts built elsewhere (CLI inputs, shared ablation caches).
struct Artifacts {
  std::optional<nn::FeatureExtractor> extractor;
  std::optional<nn::FeatureExtractor> metric;
  std::optional<Encrypted> eval;  // replaces the in-run encryption of the eval batch
  std::string checkpoint_dir;     // default <out>/checkpoints
};

inline ExperimentResult run_experiment(const ExperimentConfig& c, const std::string& out_dir, const json& manifest = json::object(),
                                       const Artifacts& art = {}) {
  using defense::Kind;
  const fs::path out(out_dir), img_dir = out / "images";
  const fs::path ckpt = art.checkpoint_dir.empty() ? out / "checkpoints" : fs::path(art.checkpoint_dir);
  fs::create_directories(ckpt);
  fs::create_directories(img_dir);
  auto stage = [](const char* name, auto&& fn) -> decltype(fn()) {
    try {
      return fn();
    } catch (const Error& e) {
      throw Error(e.kind(), std::string("stage ") + name + ": " + e.what());
    }
  };

  const auto split = stage("data", [&] { return load_split(c.dataset); });
  std::vector<LabeledExample> eval_batch;
  if (art.eval) {
    std::map<std::uint64_t, const LabeledExample*> by_id;
    for (const auto* part : {&split.private_train, &split.private_eval, &split.public_pool, &split.test})
      for (const auto& e : *part) by_id[e.id] = &e;
    for (const auto& r : art.eval->records) {
      auto it = by_id.find(r.sample_id);
      if (it == by_id.end()) throw ArtifactError("encrypted record " + std::to_string(r.sample_id) + " has no private sample in the dataset");
      eval_batch.push_back(*it->second);
    }
  } else {
    if (split.private_eval.size() < c.eval_count) throw ConfigError("private-eval split smaller than eval_count");
    eval_batch.assign(split.private_eval.begin(), split.private_eval.begin() + static_cast<std::ptrdiff_t>(c.eval_count));
  }
  const Shape input = c.dataset.image_shape;
  const std::size_t k = c.dataset.num_classes;

  ExperimentResult res;
  res.defense = defense::kind_name(c.defense);
  res.param = param_label(c);

  const auto metric_fx = art.metric ? *art.metric : stage("metric", [&] { return train_extractor(c.metric, split.public_pool, input, k, ckpt); });
  std::optional<nn::FeatureExtractor> fx = art.extractor;
  if (c.defense == Kind::Loda && !fx)
    fx = stage("extractor", [&] { return train_extractor(c.extractor, split.public_pool, input, k, ckpt, &res.extractor_meta); });
  const nn::FeatureExtractor* fxp = fx ? &*fx : nullptr;

  const nn::Model model = nn::init_model(nn::architecture(c.model_arch, input, k), c.model_seed);
  auto enc = art.eval ? *art.eval : stage("encrypt", [&] { return encrypt_cached(c, eval_batch, split.public_pool, fxp, ckpt, "eval"); });
  res.eval_records = enc.records;
  for (std::size_t i = 0; i < eval_batch.size(); ++i) {
    const Tensor& a = enc.records[i].image.pixels();
    const Tensor& b = eval_batch[i].image.pixels();
    double d = 0.0;
    for (std::size_t p = 0; p < a.size(); ++p) d += (a[p] - b[p]) * (a[p] - b[p]);
    res.pixel_distance += std::sqrt(d) / static_cast<double>(eval_batch.size());
  }
  const std::size_t workers = worker_budget(c.workers);

  // Intercepted gradients and attacker views.
  std::vector<AttackerView> views;
  for (const auto& r : enc.records) views.push_back(make_view(c, model, r, enc, fxp));

  // Gradient leakage attack over the alpha grid.
  const double alpha0 = c.defense == Kind::GradPrune ? c.prune_alpha_tv : c.gla.alpha_tv;
  const std::vector<double> alphas = c.alpha_grid.empty() ? std::vector<double>{alpha0} : c.alpha_grid;
  std::vector<std::vector<Tensor>> per_alpha;
  for (double alpha : alphas) {
    attack::AttackConfig ac = c.gla;
    ac.alpha_tv = alpha;
    ac.mask_aware = c.defense == Kind::GradPrune;
    const json key = {{"gla", ac}, {"model", nn::model_digest(model)}, {"records", detail::samples_digest(eval_batch)},
                      {"grads", [&] { Digest d; for (auto& v : views) d.update(attack::gradient_hash(v.shared)); return d.hex(); }()},
                      {"enc", [&] { Digest d; for (auto& r : enc.records) d.update(r.image.pixels()); return d.hex(); }()}};
    per_alpha.push_back(stage("gla", [&] {
      return detail::cached_tensors(ckpt, "gla", key, [&] {
        std::vector<Tensor> out(views.size());
        parallel_for(views.size(), workers, [&](std::size_t i) {
          attack::AttackConfig ai = ac;
          ai.seed = derive_seed(ac.seed, enc.records[i].sample_id);
          const auto* mask = views[i].prune_support ? &*views[i].prune_support : nullptr;
          out[i] = attack::gradient_leakage_attack(views[i].shared, views[i].label, *views[i].model, ai, mask).images[0].pixels();
        });
        return out;
      });
    }));
  }
  // Grid selection: per image (best leakage per image) or one alpha per
  // configuration (best batch average).
  std::vector<Image> gla_best;
  {
    std::vector<std::vector<double>> ps(alphas.size());
    std::vector<double> avg(alphas.size(), 0.0);
    for (std::size_t a = 0; a < alphas.size(); ++a)
      for (std::size_t i = 0; i < eval_batch.size(); ++i) {
        ps[a].push_back(metrics::psnr(Image(per_alpha[a][i]), eval_batch[i].image));
        avg[a] += ps[a].back();
      }
    const std::size_t best_cfg = static_cast<std::size_t>(std::max_element(avg.begin(), avg.end()) - avg.begin());
    res.alpha_tv = alphas[best_cfg];
    for (std::size_t i = 0; i < eval_batch.size(); ++i) {
      std::size_t pick = best_cfg;
      if (c.alpha_select == AlphaSelect::PerImage)
        for (std::size_t a = 0; a < alphas.size(); ++a)
          if (ps[a][i] > ps[pick][i]) pick = a;
      gla_best.emplace_back(per_alpha[pick][i]);
    }
  }
  res.rows.push_back({"gla", detail::score(gla_best, eval_batch, metric_fx), gla_best});

  // Adaptive attacks.
  if (c.adaptive && (c.defense == Kind::Mixup || c.defense == Kind::InstaHide) && enc.mixing) {
    std::vector<Image> source;
    for (std::size_t i = 0; i < views.size(); ++i)
      source.push_back(c.adaptive_source == AdaptiveSource::Encrypted ? *views[i].encrypted : gla_best[i]);
    const defense::MixingMatrix m_hat = c.mixing_estimate == MixingEstimate::Oracle
                                            ? *views[0].mixing
                                            : attack::estimate_mixing(source, c.mix_k, enc.mixing->ids);
    const json key = {{"mix", c.mix_attack}, {"restarts", c.mix_restarts}, {"m", defense::mixing_to_json(m_hat)},
                      {"src", detail::key_of(json(detail::to_tensors(source).size())) + [&] { Digest d; for (auto& s : source) d.update(s.pixels()); return d.hex(); }()}};
    auto recon = stage("adaptive", [&] {
      return detail::cached_tensors(ckpt, "mixattack", key, [&] {
        return detail::to_tensors(attack::adaptive_mix_attack(source, m_hat, c.mix_attack, c.mix_restarts).images);
      });
    });
    auto imgs = detail::to_images(recon);
    res.rows.push_back({"adaptive", detail::score(imgs, eval_batch, metric_fx), imgs});
  }
  if (c.adaptive && c.defense == Kind::Loda) {
    for (double ca : c.loda_attack_c) {
      std::vector<Image> source;
      for (std::size_t i = 0; i < views.size(); ++i)
        source.push_back(c.adaptive_source == AdaptiveSource::Encrypted ? *views[i].encrypted : gla_best[i]);
      const json key = {{"loda", c.loda_attack}, {"c", ca}, {"fx", nn::model_digest(fx->model)}, {"layers", fx->layers},
                        {"src", [&] { Digest d; for (auto& s : source) d.update(s.pixels()); return d.hex(); }()}};
      auto recon = stage("adaptive", [&] {
        return detail::cached_tensors(ckpt, "lodaattack", key, [&] {
          std::vector<Tensor> out(source.size());
          parallel_for(source.size(), workers, [&](std::size_t i) {
            attack::AttackConfig ai = c.loda_attack;
            ai.seed = derive_seed(c.loda_attack.seed, enc.records[i].sample_id);
            out[i] = attack::loda_adaptive_attack(source[i], *views[i].extractor, ca, ai).images[0].pixels();
          });
          return out;
        });
      });
      auto imgs = detail::to_images(recon);
      res.rows.push_back({"adaptive-c" + short_num(ca), detail::score(imgs, eval_batch, metric_fx), imgs});
    }
  }
  {
    // strongest = highest average PSNR among the attacks run
    const AttackRow* s = &res.rows.front();
    for (const auto& r : res.rows)
      if (r.report.psnr_avg > s->report.psnr_avg) s = &r;
    AttackRow strongest = *s;
    strongest.attack = "strongest";
    res.rows.push_back(std::move(strongest));
  }

  // Utility: train on the defended private-train split, test on clean data.
  if (c.run_training) {
    auto tenc = stage("encrypt-train", [&] { return encrypt_cached(c, split.private_train, split.public_pool, fxp, ckpt, "train"); });
    res.train_records = tenc.records;
    std::vector<LabeledExample> train_set;
    for (const auto& r : tenc.records) train_set.push_back({r.sample_id, r.image, r.label});
    res.accuracy_curve = stage("train", [&] { return utility_curve(c, c.model_arch, train_set, split.test, ckpt); });
    res.accuracy = res.accuracy_curve.back();
  }

  // Bundle outputs.
  json cfg = to_json_config(c);
  cfg["manifest"] = manifest;
  if (!res.extractor_meta.is_null()) cfg["extractor_checkpoint"] = res.extractor_meta;
  cfg["gla_alpha_selected"] = res.alpha_tv;
  write_file((out / "config.json").string(), cfg.dump(2));
  write_file((out / "metrics.csv").string(), metrics_csv_header() + metrics_csv_rows(res));
  std::string pairs;
  for (const auto& r : res.rows) {
    std::string block = metrics::report_csv(r.report, res.defense, r.attack);
    pairs += pairs.empty() ? block : block.substr(block.find('\n') + 1);
  }
  write_file((out / "pairs.csv").string(), pairs);
  std::vector<Image> priv, encs;
  for (std::size_t i = 0; i < eval_batch.size(); ++i) {
    priv.push_back(eval_batch[i].image);
    encs.push_back(enc.records[i].image.range() == PixelRange::Unit ? enc.records[i].image : enc.records[i].image.magnitude());
  }
  data::save_image_grid(priv, (img_dir / "private.png").string());
  data::save_image_grid(encs, (img_dir / "encrypted.png").string());
  for (const auto& r : res.rows) data::save_image_grid(r.reconstructions, (img_dir / (r.attack + ".png")).string());
  return res;
}

}  // namespace loda::fedsim
