#pragma once

// loda_lab command line. Subcommands:
//
//   prepare-data     materialize the dataset as IDX + split manifest
//   train-extractor  train the LODA extractor (or the proxy metric network)
//   encrypt          encrypt one split with the configured defense
//   attack           eval-batch gradient interception + GLA (+ adaptive attack)
//   train            train a model on a clean or encrypted dataset
//   ablate           c-sweep | cross-arch tables
//   report           merge bundle metrics.csv files into one table
//   run              full experiment bundle (attack + utility)
//   replay           re-run a subcommand from its run_manifest.json
//
// Config precedence (later wins): built-in defaults, --config file (JSON),
// --set section.key=value overrides, dedicated flags (--sweep, --adaptive).
// Exit codes: 0 ok, 1 runtime failure, 2 config or artifact error. Failures
// print {"error": kind, "message": ...} on stderr.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "loda/fedsim.hpp"

namespace loda::cli {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr const char* kToolVersion = "0.1.0";
inline const std::vector<double> kAlphaGrid = {1e-5, 1e-4, 1e-3, 1e-2, 1e-1};

struct Options {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out;
  std::string split = "private-train";
  std::size_t count = 0;  // 0: whole split
  std::string extractor, metric, encrypted;
  std::string role = "extractor";
  bool sweep = false;
  std::optional<bool> adaptive;
  std::string arch;
  std::string ablation;
  std::vector<double> c_values{10, 20, 30, 40, 50};
  std::vector<std::string> archs;
  std::vector<std::string> bundles;
};

inline json options_to_json(const Options& o) {
  json j = {{"split", o.split}, {"count", o.count}, {"extractor", o.extractor}, {"metric", o.metric},
            {"encrypted", o.encrypted}, {"role", o.role}, {"sweep", o.sweep}, {"arch", o.arch},
            {"ablation", o.ablation}, {"c_values", o.c_values}, {"archs", o.archs}, {"bundles", o.bundles}};
  j["adaptive"] = o.adaptive ? json(*o.adaptive) : json(nullptr);
  return j;
}

inline Options options_from_json(const json& j) {
  Options o;
  o.split = j.value("split", o.split);
  o.count = j.value("count", o.count);
  o.extractor = j.value("extractor", o.extractor);
  o.metric = j.value("metric", o.metric);
  o.encrypted = j.value("encrypted", o.encrypted);
  o.role = j.value("role", o.role);
  o.sweep = j.value("sweep", o.sweep);
  o.arch = j.value("arch", o.arch);
  o.ablation = j.value("ablation", o.ablation);
  o.c_values = j.value("c_values", o.c_values);
  o.archs = j.value("archs", o.archs);
  o.bundles = j.value("bundles", o.bundles);
  if (j.contains("adaptive") && !j["adaptive"].is_null()) o.adaptive = j["adaptive"].get<bool>();
  return o;
}

// Everything needed to replay a subcommand bit-exactly.
struct RunManifest {
  std::string subcommand;
  json config;   // fully resolved
  json options;  // subcommand flags other than --out
  json seeds;
  std::string tool_version = kToolVersion;
  std::map<std::string, std::string> input_hashes;  // path -> sha256
};

inline json to_json(const RunManifest& m) {
  return {{"subcommand", m.subcommand}, {"config", m.config},   {"options", m.options},
          {"seeds", m.seeds},           {"tool_version", m.tool_version}, {"input_hashes", m.input_hashes}};
}

inline RunManifest run_manifest_from_json(const json& j) {
  try {
    RunManifest m;
    m.subcommand = j.at("subcommand").get<std::string>();
    m.config = j.at("config");
    m.options = j.value("options", json::object());
    m.seeds = j.value("seeds", json::object());
    m.tool_version = j.value("tool_version", std::string(kToolVersion));
    m.input_hashes = j.value("input_hashes", std::map<std::string, std::string>{});
    return m;
  } catch (const json::exception& e) {
    throw ParseError(std::string("run manifest: ") + e.what());
  }
}

// ---- config resolution ----------------------------------------------------

inline json parse_json_file(const std::string& path) {
  if (!fs::exists(path)) throw ArtifactError("file not found: " + path);
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ParseError(path + ": " + e.what());
  }
}

// "a.b.c=value"; value is JSON when it parses, a string otherwise.
inline void apply_set(json& j, const std::string& expr) {
  const auto eq = expr.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key.path=value, got '" + expr + "'");
  const std::string path = expr.substr(0, eq), raw = expr.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json* node = &j;
  std::stringstream ss(path);
  std::string key;
  std::vector<std::string> keys;
  while (std::getline(ss, key, '.')) keys.push_back(key);
  for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
    if (!node->contains(keys[i]) || !(*node)[keys[i]].is_object()) (*node)[keys[i]] = json::object();
    node = &(*node)[keys[i]];
  }
  (*node)[keys.back()] = value;
}

inline fedsim::ExperimentConfig config_from_json(const json& j) {
  fedsim::ExperimentConfig c;
  fedsim::apply_json_config(c, j);
  return c;
}

inline json resolve_config_json(const Options& o) {
  json j = o.config_path.empty() ? json::object() : parse_json_file(o.config_path);
  for (const auto& s : o.sets) apply_set(j, s);
  auto c = config_from_json(j);
  if (o.sweep) {
    c.alpha_grid = kAlphaGrid;
    c.alpha_select = fedsim::AlphaSelect::PerImage;
  }
  if (o.adaptive) c.adaptive = *o.adaptive;
  return fedsim::to_json_config(c);
}

inline json seeds_of(const fedsim::ExperimentConfig& c) {
  return {{"dataset", c.dataset.seed}, {"model", c.model_seed},      {"extractor", c.extractor.seed},
          {"metric", c.metric.seed},   {"defense", c.defense_seed},  {"loda", c.loda.seed},
          {"attack", c.gla.seed},      {"mix_attack", c.mix_attack.seed}, {"loda_attack", c.loda_attack.seed},
          {"train", c.train.seed}};
}

inline void hash_input(RunManifest& m, const std::string& path) {
  if (path.empty()) return;
  if (fs::is_regular_file(path)) {
    m.input_hashes[path] = file_sha256(path);
  } else if (fs::is_directory(path)) {
    // directory inputs: hash of the sorted file hashes
    std::vector<std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(path))
      if (e.is_regular_file()) files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    Digest d;
    for (const auto& f : files) d.update(fs::relative(f, path).string()).update(file_sha256(f));
    m.input_hashes[path] = d.hex();
  }
}

inline RunManifest make_manifest(const std::string& sub, const json& cfg, const Options& o) {
  RunManifest m;
  m.subcommand = sub;
  m.config = cfg;
  m.options = options_to_json(o);
  m.seeds = seeds_of(config_from_json(cfg));
  const auto c = config_from_json(cfg);
  hash_input(m, c.dataset.path);
  hash_input(m, c.dataset.labels_path);
  hash_input(m, c.dataset.manifest);
  hash_input(m, o.extractor);
  hash_input(m, o.metric);
  hash_input(m, o.encrypted);
  for (const auto& b : o.bundles) hash_input(m, (fs::path(b) / "metrics.csv").string());
  return m;
}

inline void write_run_manifest(const fs::path& out, const RunManifest& m) {
  fs::create_directories(out);
  write_file((out / "run_manifest.json").string(), to_json(m).dump(2));
}

// ---- subcommands ------------------------------------------------------------

inline std::optional<nn::FeatureExtractor> load_optional_extractor(const std::string& path) {
  if (path.empty()) return std::nullopt;
  if (!fs::exists(path)) throw ArtifactError("extractor checkpoint not found: " + path);
  return nn::load_extractor(path);
}

inline int cmd_prepare_data(const json& cfg_json, const Options& o, std::ostream& out) {
  const auto c = config_from_json(cfg_json);
  const auto corpus = fedsim::load_corpus(c.dataset);
  data::validate_manifest(corpus.manifest, corpus.samples.size());
  const fs::path dir(o.out);
  fs::create_directories(dir);
  data::write_idx((dir / "images.idx").string(), (dir / "labels.idx").string(), corpus.samples);
  write_file((dir / "manifest.json").string(), data::manifest_to_json(corpus.manifest).dump(1));
  // ready-made dataset section pointing at the files just written
  const json section = {{"dataset",
                         {{"format", "idx"},
                          {"path", fs::absolute(dir / "images.idx").string()},
                          {"labels_path", fs::absolute(dir / "labels.idx").string()},
                          {"manifest", fs::absolute(dir / "manifest.json").string()},
                          {"image_shape", c.dataset.image_shape},
                          {"num_classes", c.dataset.num_classes}}}};
  write_file((dir / "dataset.json").string(), section.dump(2));
  write_run_manifest(dir, make_manifest("prepare-data", cfg_json, o));
  out << section.dump(2) << "\n";
  return 0;
}

inline int cmd_train_extractor(const json& cfg_json, const Options& o, std::ostream& out) {
  const auto c = config_from_json(cfg_json);
  if (o.role != "extractor" && o.role != "metric") throw ConfigError("--role must be extractor or metric");
  const auto& ec = o.role == "metric" ? c.metric : c.extractor;
  const auto split = fedsim::load_split(c.dataset);
  const fs::path dir(o.out);
  json meta;
  auto fx = fedsim::train_extractor(ec, split.public_pool, c.dataset.image_shape, c.dataset.num_classes, dir / "checkpoints", &meta);
  meta["role"] = o.role;
  nn::save_extractor((dir / "extractor.bin").string(), fx, meta);
  write_run_manifest(dir, make_manifest("train-extractor", cfg_json, o));
  out << meta.dump() << "\n";
  return 0;
}

inline int cmd_encrypt(const json& cfg_json, const Options& o, std::ostream& out) {
  const auto c = config_from_json(cfg_json);
  std::optional<nn::FeatureExtractor> fx;
  if (c.defense == defense::Kind::Loda) {
    if (o.extractor.empty()) throw ArtifactError("defense loda needs --extractor");
    fx = load_optional_extractor(o.extractor);
  }
  auto split = fedsim::load_split(c.dataset);
  auto samples = split.by_name(o.split);
  if (o.count && o.count < samples.size()) samples.resize(o.count);
  auto enc = fedsim::encrypt_set(c, samples, split.public_pool, fx ? &*fx : nullptr, fedsim::worker_budget(c.workers));
  defense::save_encrypted(o.out, {c.defense, cfg_json["defense"], enc.records, enc.mixing});
  write_run_manifest(o.out, make_manifest("encrypt", cfg_json, o));
  out << json{{"records", enc.records.size()}, {"defense", defense::kind_name(c.defense)}, {"out", o.out}}.dump() << "\n";
  return 0;
}

inline fedsim::Artifacts artifacts_of(const Options& o) {
  fedsim::Artifacts art;
  art.extractor = load_optional_extractor(o.extractor);
  art.metric = load_optional_extractor(o.metric);
  if (!o.encrypted.empty()) {
    if (!fs::exists(fs::path(o.encrypted) / "manifest.json")) throw ArtifactError("encrypted dataset not found: " + o.encrypted);
    auto ds = defense::load_encrypted(o.encrypted);
    art.eval = fedsim::Encrypted{std::move(ds.records), std::move(ds.mixing)};
  }
  return art;
}

inline void print_rows(const fedsim::ExperimentResult& r, std::ostream& out) {
  out << fedsim::metrics_csv_header() << fedsim::metrics_csv_rows(r);
}

inline int cmd_attack(const json& cfg_json, const Options& o, std::ostream& out) {
  auto c = config_from_json(cfg_json);
  c.run_training = false;
  const auto m = make_manifest("attack", cfg_json, o);
  auto r = fedsim::run_experiment(c, o.out, to_json(m), artifacts_of(o));
  json rep = json::object();
  for (const auto& row : r.rows) rep[row.attack] = metrics::report_json(row.report);
  write_file((fs::path(o.out) / "report.json").string(), rep.dump(2));
  write_run_manifest(o.out, m);
  print_rows(r, out);
  return 0;
}

inline int cmd_run(const json& cfg_json, const Options& o, std::ostream& out) {
  const auto c = config_from_json(cfg_json);
  const auto m = make_manifest("run", cfg_json, o);
  auto r = fedsim::run_experiment(c, o.out, to_json(m), artifacts_of(o));
  write_run_manifest(o.out, m);
  print_rows(r, out);
  return 0;
}

inline int cmd_train(const json& cfg_json, const Options& o, std::ostream& out) {
  const auto c = config_from_json(cfg_json);
  const auto split = fedsim::load_split(c.dataset);
  std::vector<LabeledExample> data;
  if (!o.encrypted.empty()) {
    if (!fs::exists(fs::path(o.encrypted) / "manifest.json")) throw ArtifactError("encrypted dataset not found: " + o.encrypted);
    data = defense::load_encrypted(o.encrypted).examples();
  } else {
    data = split.private_train;
  }
  const std::string arch = o.arch.empty() ? c.model_arch : o.arch;
  auto tc = c.train;
  if (c.defense == defense::Kind::GradPrune) tc.prune_p = c.prune_p;
  auto res = fedsim::train(nn::init_model(nn::architecture(arch, c.dataset.image_shape, c.dataset.num_classes), c.model_seed), data, split.test, tc);
  const fs::path dir(o.out);
  fs::create_directories(dir);
  nn::save_model((dir / "model.bin").string(), res.model, {{"arch", arch}});
  const json acc = {{"arch", arch}, {"epochs_run", res.epochs_run}, {"accuracy", res.accuracy}, {"loss", res.loss},
                    {"final_accuracy", res.accuracy.empty() ? json(nullptr) : json(res.accuracy.back())}};
  write_file((dir / "accuracy.json").string(), acc.dump(2));
  write_run_manifest(dir, make_manifest("train", cfg_json, o));
  out << acc.dump() << "\n";
  return 0;
}

inline std::string c_sweep_header() {
  return "c,accuracy,proxy_avg,proxy_std,proxy_min,psnr_avg,psnr_std,psnr_max,pixel_distance\n";
}

inline int cmd_ablate(const json& cfg_json, const Options& o, std::ostream& out) {
  auto c = config_from_json(cfg_json);
  const fs::path dir(o.out);
  const auto m = make_manifest("ablate", cfg_json, o);
  auto art = artifacts_of(o);
  art.checkpoint_dir = (dir / "checkpoints").string();
  if (o.ablation == "c-sweep") {
    std::string table = c_sweep_header();
    for (double cv : o.c_values) {
      auto cc = c;
      cc.defense = defense::Kind::Loda;
      cc.loda.c = cv;
      auto r = fedsim::run_experiment(cc, (dir / ("c-" + fedsim::short_num(cv))).string(), to_json(m), art);
      const auto& p = r.row("strongest").report;
      table += fedsim::short_num(cv) + "," + (r.accuracy ? metrics::fmt(*r.accuracy) : "") + "," + metrics::fmt(p.proxy_avg) + "," +
               metrics::fmt(p.proxy_std) + "," + metrics::fmt(p.proxy_min) + "," + metrics::fmt(p.psnr_avg) + "," +
               metrics::fmt(p.psnr_std) + "," + metrics::fmt(p.psnr_max) + "," + metrics::fmt(r.pixel_distance) + "\n";
    }
    write_file((dir / "c_sweep.csv").string(), table);
    out << table;
  } else if (o.ablation == "cross-arch") {
    const auto split = fedsim::load_split(c.dataset);
    const Shape input = c.dataset.image_shape;
    std::optional<nn::FeatureExtractor> fx = art.extractor;
    if (c.defense == defense::Kind::Loda && !fx)
      fx = fedsim::train_extractor(c.extractor, split.public_pool, input, c.dataset.num_classes, art.checkpoint_dir);
    auto enc = fedsim::encrypt_cached(c, split.private_train, split.public_pool, fx ? &*fx : nullptr, art.checkpoint_dir, "train");
    std::vector<LabeledExample> data;
    for (const auto& r : enc.records) data.push_back({r.sample_id, r.image, r.label});
    auto archs = o.archs.empty() ? nn::registered_architectures() : o.archs;
    std::string table = "arch,defense,accuracy\n";
    for (const auto& a : archs) {
      const auto curve = fedsim::utility_curve(c, a, data, split.test, art.checkpoint_dir);
      table += a + "," + defense::kind_name(c.defense) + "," + metrics::fmt(curve.back()) + "\n";
    }
    fs::create_directories(dir);
    write_file((dir / "cross_arch.csv").string(), table);
    out << table;
  } else {
    throw ConfigError("ablate: kind must be c-sweep or cross-arch, got '" + o.ablation + "'");
  }
  write_run_manifest(dir, m);
  return 0;
}

inline int cmd_report(const json& cfg_json, const Options& o, std::ostream& out) {
  if (o.bundles.empty()) throw ConfigError("report: no bundle directories given");
  std::string table = fedsim::metrics_csv_header();
  for (const auto& b : o.bundles) {
    const auto path = fs::path(b) / "metrics.csv";
    if (!fs::exists(path)) throw ArtifactError("bundle has no metrics.csv: " + b);
    const std::string body = read_file(path.string());
    const auto nl = body.find('\n');
    if (nl == std::string::npos || body.substr(0, nl + 1) != fedsim::metrics_csv_header())
      throw ParseError(path.string() + ": unexpected header");
    table += body.substr(nl + 1);
  }
  const fs::path dir(o.out);
  fs::create_directories(dir);
  write_file((dir / "report.csv").string(), table);
  write_run_manifest(dir, make_manifest("report", cfg_json, o));
  out << table;
  return 0;
}

inline int dispatch(const std::string& sub, const json& cfg, const Options& o, std::ostream& out) {
  if (sub == "prepare-data") return cmd_prepare_data(cfg, o, out);
  if (sub == "train-extractor") return cmd_train_extractor(cfg, o, out);
  if (sub == "encrypt") return cmd_encrypt(cfg, o, out);
  if (sub == "attack") return cmd_attack(cfg, o, out);
  if (sub == "train") return cmd_train(cfg, o, out);
  if (sub == "ablate") return cmd_ablate(cfg, o, out);
  if (sub == "report") return cmd_report(cfg, o, out);
  if (sub == "run") return cmd_run(cfg, o, out);
  throw ConfigError("unknown subcommand '" + sub + "'");
}

inline int exit_code_for(const std::string& kind) {
  return kind == "config" || kind == "parse" || kind == "missing-artifact" ? 2 : 1;
}

inline void print_error(std::ostream& err, const std::string& kind, const std::string& msg) {
  err << json{{"error", kind}, {"message", msg}}.dump() << "\n";
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"loda_lab: gradient leakage attacks and input-encryption defenses"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);
  Options o;
  std::string manifest_path;

  auto common = [&](CLI::App* s) {
    s->add_option("--config", o.config_path, "JSON config file");
    s->add_option("--set", o.sets, "override: section.key=value (repeatable)");
    s->add_option("--out", o.out, "output directory")->required();
  };
  auto* prep = app.add_subcommand("prepare-data", "write dataset as IDX plus split manifest");
  common(prep);
  auto* tex = app.add_subcommand("train-extractor", "train the LODA extractor or the proxy metric network");
  common(tex);
  tex->add_option("--role", o.role, "extractor | metric");
  auto* enc = app.add_subcommand("encrypt", "encrypt a split with the configured defense");
  common(enc);
  enc->add_option("--split", o.split, "split to encrypt");
  enc->add_option("--count", o.count, "first N samples only (0 = all)");
  enc->add_option("--extractor", o.extractor, "extractor checkpoint (loda)");
  auto* att = app.add_subcommand("attack", "gradient interception and attacks on the eval batch");
  common(att);
  att->add_flag("--sweep", o.sweep, "sweep alpha_tv over {1e-5..1e-1}, best per image");
  att->add_flag("--adaptive,!--no-adaptive", o.adaptive, "run the defense-specific adaptive attack");
  att->add_option("--extractor", o.extractor, "extractor checkpoint");
  att->add_option("--metric", o.metric, "proxy metric network checkpoint");
  att->add_option("--encrypted", o.encrypted, "pre-encrypted eval records");
  auto* tr = app.add_subcommand("train", "train a model, report test accuracy per epoch");
  common(tr);
  tr->add_option("--encrypted", o.encrypted, "encrypted dataset to train on (default: clean private-train)");
  tr->add_option("--arch", o.arch, "architecture override");
  auto* abl = app.add_subcommand("ablate", "c-sweep or cross-arch ablation");
  common(abl);
  abl->add_option("kind", o.ablation, "c-sweep | cross-arch")->required();
  abl->add_option("--c", o.c_values, "c values for c-sweep")->delimiter(',');
  abl->add_option("--archs", o.archs, "architectures for cross-arch")->delimiter(',');
  abl->add_option("--extractor", o.extractor, "extractor checkpoint");
  abl->add_option("--metric", o.metric, "proxy metric network checkpoint");
  auto* rep = app.add_subcommand("report", "merge bundle metrics into one table");
  common(rep);
  rep->add_option("bundles", o.bundles, "bundle directories")->required();
  auto* run_cmd = app.add_subcommand("run", "full experiment bundle");
  common(run_cmd);
  run_cmd->add_flag("--sweep", o.sweep, "sweep alpha_tv over {1e-5..1e-1}, best per image");
  run_cmd->add_flag("--adaptive,!--no-adaptive", o.adaptive, "run the defense-specific adaptive attack");
  run_cmd->add_option("--extractor", o.extractor, "extractor checkpoint");
  run_cmd->add_option("--metric", o.metric, "proxy metric network checkpoint");
  auto* rep_cmd = app.add_subcommand("replay", "re-run a subcommand from its run_manifest.json");
  rep_cmd->add_option("manifest", manifest_path, "run_manifest.json")->required();
  rep_cmd->add_option("--out", o.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    print_error(err, "config", e.what());
    return 2;
  }

  try {
    if (rep_cmd->parsed()) {
      const auto m = run_manifest_from_json(parse_json_file(manifest_path));
      Options ro = options_from_json(m.options);
      ro.out = o.out;
      return dispatch(m.subcommand, m.config, ro, out);
    }
    const std::string sub = app.get_subcommands().front()->get_name();
    return dispatch(sub, resolve_config_json(o), o, out);
  } catch (const fedsim::DivergenceError& e) {
    err << json{{"error", e.kind()}, {"message", e.what()}, {"trace", e.trace}}.dump() << "\n";
    return 1;
  } catch (const Error& e) {
    print_error(err, e.kind(), e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    print_error(err, "runtime", e.what());
    return 1;
  }
}

}  // namespace loda::cli
