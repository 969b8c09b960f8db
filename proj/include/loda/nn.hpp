#pragma once

// Small classifiers f(x; theta) and feature extractors g(x) on top of the
// autodiff tape, plus the model checkpoint format.
//
// Checkpoint layout (all integers little-endian):
//   bytes [0, 8)    magic "LODAMDL1"
//   bytes [8, 16)   u64 header length L
//   bytes [16, 16+L) UTF-8 JSON header:
//                   {"spec": ModelSpec, "seed": u64, "params": [{"name", "shape"}...],
//                    "meta": {...}}
//   remainder       parameters as float64, concatenated in declaration order
// load(save(m)) reproduces every parameter bitwise.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "loda/autodiff.hpp"
#include "loda/digest.hpp"
#include "loda/image.hpp"
#include "loda/rng.hpp"

namespace loda {

// Reads an enum written by NLOHMANN_JSON_SERIALIZE_ENUM, rejecting strings
// that are not one of its names (the macro would silently map them to the
// first enumerator).
template <class E>
E enum_value(const nlohmann::json& j, const char* key, E fallback) {
  if (!j.contains(key)) return fallback;
  const E v = j[key].get<E>();
  if (nlohmann::json(v) != j[key]) throw ConfigError(std::string("config: bad value for '") + key + "': " + j[key].dump());
  return v;
}

}  // namespace loda

namespace loda::nn {

using json = nlohmann::json;

enum class LayerKind { Conv, Relu, Pool, Flatten, Linear };

NLOHMANN_JSON_SERIALIZE_ENUM(LayerKind, {{LayerKind::Conv, "conv"},
                                         {LayerKind::Relu, "relu"},
                                         {LayerKind::Pool, "pool"},
                                         {LayerKind::Flatten, "flatten"},
                                         {LayerKind::Linear, "linear"}})

struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  std::string name;
  std::size_t out = 0;     // conv: out-channels; linear: out-dim
  std::size_t kernel = 3;  // conv only
  std::size_t pad = 1;     // conv only

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

inline void to_json(json& j, const LayerSpec& l) {
  j = json{{"kind", l.kind}, {"name", l.name}};
  if (l.kind == LayerKind::Conv) {
    j["out"] = l.out;
    j["kernel"] = l.kernel;
    j["pad"] = l.pad;
  } else if (l.kind == LayerKind::Linear) {
    j["out"] = l.out;
  }
}

inline void from_json(const json& j, LayerSpec& l) {
  l.kind = j.at("kind").get<LayerKind>();
  l.name = j.value("name", std::string());
  l.out = j.value("out", std::size_t{0});
  const bool is_conv = l.kind == LayerKind::Conv;
  l.kernel = is_conv ? j.value("kernel", std::size_t{3}) : 0;
  l.pad = is_conv ? j.value("pad", std::size_t{1}) : 0;
}

struct ModelSpec {
  std::string name;
  Shape input;  // [C,H,W]
  std::size_t num_classes = 0;
  std::vector<LayerSpec> layers;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

inline void to_json(json& j, const ModelSpec& s) {
  j = json{{"name", s.name}, {"input", s.input}, {"num_classes", s.num_classes}, {"layers", s.layers}};
}

inline void from_json(const json& j, ModelSpec& s) {
  s.name = j.value("name", std::string());
  s.input = j.at("input").get<Shape>();
  s.num_classes = j.at("num_classes").get<std::size_t>();
  s.layers = j.at("layers").get<std::vector<LayerSpec>>();
}

struct ParamInfo {
  std::string name;
  Shape shape;
  std::size_t fan_in = 0;
};

// Fills in default layer names (conv1, conv2, ..., fc1, ...), checks that
// consecutive shapes compose and that the output has num_classes entries.
// Returns the per-layer output shapes (without batch dimension).
inline std::vector<Shape> validate(ModelSpec& spec) {
  if (spec.input.size() != 3 || shape_numel(spec.input) == 0)
    throw ConfigError("model spec '" + spec.name + "': input must be [C,H,W]");
  if (spec.num_classes < 2) throw ConfigError("model spec '" + spec.name + "': needs at least 2 classes");
  std::vector<Shape> shapes;
  Shape cur = spec.input;
  std::size_t nconv = 0, nfc = 0;
  std::map<std::string, int> seen;
  for (auto& l : spec.layers) {
    const std::string where = "model spec '" + spec.name + "' layer " + std::to_string(shapes.size());
    switch (l.kind) {
      case LayerKind::Conv:
        ++nconv;
        if (l.name.empty()) l.name = "conv" + std::to_string(nconv);
        if (cur.size() != 3) throw ConfigError(where + ": conv after flatten");
        if (l.out == 0 || l.kernel == 0) throw ConfigError(where + ": conv needs out-channels and kernel");
        if (cur[1] + 2 * l.pad < l.kernel || cur[2] + 2 * l.pad < l.kernel)
          throw ConfigError(where + ": kernel larger than padded input");
        cur = {l.out, cur[1] + 2 * l.pad - l.kernel + 1, cur[2] + 2 * l.pad - l.kernel + 1};
        break;
      case LayerKind::Relu:
        if (l.name.empty()) l.name = "relu" + std::to_string(shapes.size() + 1);
        break;
      case LayerKind::Pool:
        if (l.name.empty()) l.name = "pool" + std::to_string(shapes.size() + 1);
        if (cur.size() != 3 || cur[1] % 2 || cur[2] % 2) throw ConfigError(where + ": pool needs even H and W");
        cur = {cur[0], cur[1] / 2, cur[2] / 2};
        break;
      case LayerKind::Flatten:
        if (l.name.empty()) l.name = "flatten";
        cur = {shape_numel(cur)};
        break;
      case LayerKind::Linear:
        ++nfc;
        if (l.name.empty()) l.name = "fc" + std::to_string(nfc);
        if (cur.size() != 1) throw ConfigError(where + ": linear needs a flattened input");
        if (l.out == 0) throw ConfigError(where + ": linear needs out-dim");
        cur = {l.out};
        break;
    }
    if (seen[l.name]++) throw ConfigError(where + ": duplicate layer name '" + l.name + "'");
    shapes.push_back(cur);
  }
  if (cur != Shape{spec.num_classes})
    throw ConfigError("model spec '" + spec.name + "': output shape " + shape_str(cur) + " is not [" +
                      std::to_string(spec.num_classes) + "]");
  return shapes;
}

inline std::vector<ParamInfo> param_layout(const ModelSpec& spec_in) {
  ModelSpec spec = spec_in;
  validate(spec);
  std::vector<ParamInfo> out;
  Shape cur = spec.input;
  for (const auto& l : spec.layers) {
    if (l.kind == LayerKind::Conv) {
      const std::size_t fan = cur[0] * l.kernel * l.kernel;
      out.push_back({l.name + ".weight", {l.out, cur[0], l.kernel, l.kernel}, fan});
      out.push_back({l.name + ".bias", {l.out}, fan});
      cur = {l.out, cur[1] + 2 * l.pad - l.kernel + 1, cur[2] + 2 * l.pad - l.kernel + 1};
    } else if (l.kind == LayerKind::Pool) {
      cur = {cur[0], cur[1] / 2, cur[2] / 2};
    } else if (l.kind == LayerKind::Flatten) {
      cur = {shape_numel(cur)};
    } else if (l.kind == LayerKind::Linear) {
      out.push_back({l.name + ".weight", {cur[0], l.out}, cur[0]});
      out.push_back({l.name + ".bias", {l.out}, cur[0]});
      cur = {l.out};
    }
  }
  return out;
}

inline std::vector<std::string> conv_layer_names(const ModelSpec& spec) {
  std::vector<std::string> names;
  for (const auto& l : spec.layers)
    if (l.kind == LayerKind::Conv) names.push_back(l.name);
  return names;
}

// ---- architecture registry -------------------------------------------------

inline LayerSpec conv(std::size_t out, std::size_t kernel = 3, std::size_t pad = 1) {
  return {LayerKind::Conv, "", out, kernel, pad};
}
inline LayerSpec relu() { return {LayerKind::Relu, "", 0, 0, 0}; }
inline LayerSpec pool() { return {LayerKind::Pool, "", 0, 0, 0}; }
inline LayerSpec flatten() { return {LayerKind::Flatten, "", 0, 0, 0}; }
inline LayerSpec linear(std::size_t out) { return {LayerKind::Linear, "", out, 0, 0}; }

inline std::vector<std::string> registered_architectures() {
  return {"linear", "mlp", "cnn-small", "cnn-wide", "cnn-deep"};
}

// Desk-scale stand-ins for the large CNNs. Inputs with H, W divisible by 4.
inline ModelSpec architecture(const std::string& name, Shape input, std::size_t num_classes) {
  ModelSpec s{name, std::move(input), num_classes, {}};
  if (name == "linear") {
    s.layers = {flatten(), linear(num_classes)};
  } else if (name == "mlp") {
    s.layers = {flatten(), linear(64), relu(), linear(num_classes)};
  } else if (name == "cnn-small") {
    s.layers = {conv(8), relu(), pool(), conv(16), relu(), pool(), conv(16), relu(), flatten(), linear(num_classes)};
  } else if (name == "cnn-wide") {
    s.layers = {conv(16), relu(), pool(), conv(32), relu(), pool(), conv(32), relu(), flatten(), linear(num_classes)};
  } else if (name == "cnn-deep") {
    s.layers = {conv(8),  relu(), conv(8),  relu(), pool(), conv(16), relu(), conv(16), relu(),
                pool(),   conv(16), relu(), flatten(), linear(num_classes)};
  } else {
    throw ConfigError("unknown architecture '" + name + "'");
  }
  validate(s);
  return s;
}

// ---- models ---------------------------------------------------------------

struct Model {
  ModelSpec spec;
  std::uint64_t seed = 0;
  std::vector<Tensor> params;  // declaration order of param_layout(spec)

  friend bool operator==(const Model&, const Model&) = default;
};

// Uniform in +-1/sqrt(fan-in), drawn sequentially in declaration order.
inline Model init_model(ModelSpec spec, std::uint64_t seed) {
  validate(spec);
  Model m{spec, seed, {}};
  Rng rng(seed);
  for (const auto& p : param_layout(spec)) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(p.fan_in));
    Tensor t(p.shape);
    for (auto& v : t.data()) v = rng.uniform(-bound, bound);
    m.params.push_back(std::move(t));
  }
  return m;
}

inline std::size_t parameter_count(const Model& m) {
  std::size_t n = 0;
  for (const auto& p : m.params) n += p.size();
  return n;
}

using Activations = std::map<std::string, ad::Var>;

// Forward pass of x [N,C,H,W] through the model. Conv layer outputs (before
// any activation) are written to `acts` when given, keyed by layer name.
inline ad::Var forward(const ModelSpec& spec, std::span<const ad::Var> params, ad::Var x,
                       Activations* acts = nullptr, const std::vector<std::string>* stop_after = nullptr) {
  if (x.shape().size() != 4 || Shape(x.shape().begin() + 1, x.shape().end()) != spec.input)
    throw ShapeError("forward: input " + shape_str(x.shape()) + " does not match spec input " +
                     shape_str(spec.input));
  std::size_t pi = 0;
  std::size_t remaining = stop_after ? stop_after->size() : 0;
  ad::Var h = x;
  for (const auto& l : spec.layers) {
    switch (l.kind) {
      case LayerKind::Conv:
        h = ad::bias_add(ad::conv2d(h, params[pi], {l.pad, l.pad}), params[pi + 1]);
        pi += 2;
        if (acts) (*acts)[l.name] = h;
        if (stop_after && std::find(stop_after->begin(), stop_after->end(), l.name) != stop_after->end() &&
            --remaining == 0)
          return h;
        break;
      case LayerKind::Relu:
        h = ad::relu(h);
        break;
      case LayerKind::Pool:
        h = ad::mean_pool(h);
        break;
      case LayerKind::Flatten:
        h = ad::reshape(h, {h.shape()[0], shape_numel(h.shape()) / h.shape()[0]});
        break;
      case LayerKind::Linear:
        h = ad::bias_add(ad::matmul(h, params[pi]), params[pi + 1]);
        pi += 2;
        break;
    }
  }
  return h;
}

inline std::vector<ad::Var> constant_params(ad::Tape& tape, const Model& m) {
  std::vector<ad::Var> v;
  for (const auto& p : m.params) v.push_back(tape.constant(p));
  return v;
}

inline std::vector<ad::Var> variable_params(ad::Tape& tape, const Model& m) {
  std::vector<ad::Var> v;
  for (const auto& p : m.params) v.push_back(tape.variable(p));
  return v;
}

inline void check_input(const Model& m, const Image& img) {
  if (img.shape() != m.spec.input)
    throw ShapeError("model '" + m.spec.name + "' expects " + shape_str(m.spec.input) + ", got " +
                     shape_str(img.shape()));
}

// Logits for a batch [N,C,H,W].
inline Tensor logits(const Model& m, const Tensor& batch) {
  ad::Tape tape;
  auto params = constant_params(tape, m);
  return forward(m.spec, params, tape.constant(batch)).value();
}

// Class probabilities for one image.
inline std::vector<double> predict(const Model& m, const Image& img) {
  check_input(m, img);
  return kernels::softmax(logits(m, img.batched())).values();
}

// ---- feature extractor ----------------------------------------------------

struct FeatureExtractor {
  Model model;
  std::vector<std::string> layers;  // selected conv layers, in spec order

  // Selection must be a non-empty subset of the conv layers; reorders to spec order.
  void validate_selection() {
    if (layers.empty()) throw ConfigError("feature extractor: empty layer selection");
    const auto convs = conv_layer_names(model.spec);
    for (const auto& l : layers)
      if (std::find(convs.begin(), convs.end(), l) == convs.end())
        throw ConfigError("feature extractor: '" + l + "' is not a conv layer of '" + model.spec.name + "'");
    std::vector<std::string> ordered;
    for (const auto& c : convs)
      if (std::find(layers.begin(), layers.end(), c) != layers.end()) ordered.push_back(c);
    layers = std::move(ordered);
  }
};

// g(x) = x: one 1x1 conv with an identity kernel and zero bias. Test fixture
// for the closed-form LODA and stationarity-attack cases.
inline FeatureExtractor identity_extractor(const Shape& input) {
  const std::size_t c = input.at(0);
  ModelSpec s{"identity", input, 2, {conv(c, 1, 0), flatten(), linear(2)}};
  Model m = init_model(s, 0);
  m.params[0] = Tensor(m.params[0].shape(), 0.0);
  for (std::size_t k = 0; k < c; ++k) m.params[0][k * c + k] = 1.0;
  m.params[1] = Tensor(m.params[1].shape(), 0.0);
  return FeatureExtractor{std::move(m), {"conv1"}};
}

// Selected activations of x [N,C,H,W] on `tape`, parameters frozen.
inline std::vector<ad::Var> feature_vars(ad::Tape& tape, const FeatureExtractor& fx, ad::Var x) {
  if (fx.layers.empty()) throw ConfigError("feature extractor: empty layer selection");
  auto params = constant_params(tape, fx.model);
  Activations acts;
  forward(fx.model.spec, params, x, &acts, &fx.layers);
  std::vector<ad::Var> out;
  for (const auto& name : fx.layers) {
    auto it = acts.find(name);
    if (it == acts.end()) throw ConfigError("feature extractor: layer '" + name + "' not reached");
    out.push_back(it->second);
  }
  return out;
}

// Per-layer activations as plain tensors [C,H,W].
inline std::vector<Tensor> layer_features(const FeatureExtractor& fx, const Image& img) {
  check_input(fx.model, img);
  ad::Tape tape;
  std::vector<Tensor> out;
  for (const auto& v : feature_vars(tape, fx, tape.constant(img.batched()))) {
    const Shape& s = v.shape();
    out.push_back(v.value().reshaped(Shape(s.begin() + 1, s.end())));
  }
  return out;
}

// g(x): the selected layers' activations, flattened and concatenated.
inline Tensor extract_features(const FeatureExtractor& fx, const Image& img) {
  std::vector<double> flat;
  for (const auto& t : layer_features(fx, img)) flat.insert(flat.end(), t.data().begin(), t.data().end());
  return Tensor::vector(std::move(flat));
}

inline std::size_t feature_dimension(const FeatureExtractor& fx) {
  ModelSpec spec = fx.model.spec;
  const auto shapes = validate(spec);
  std::size_t n = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i)
    if (std::find(fx.layers.begin(), fx.layers.end(), spec.layers[i].name) != fx.layers.end())
      n += shape_numel(shapes[i]);
  return n;
}

// ---- checkpoints ----------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'L', 'O', 'D', 'A', 'M', 'D', 'L', '1'};

inline std::string serialize_model(const Model& m, const json& meta = json::object()) {
  json header;
  header["spec"] = m.spec;
  header["seed"] = m.seed;
  header["meta"] = meta;
  const auto layout = param_layout(m.spec);
  if (layout.size() != m.params.size()) throw ShapeError("checkpoint: parameter count does not match spec");
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (layout[i].shape != m.params[i].shape())
      throw ShapeError("checkpoint: parameter '" + layout[i].name + "' has wrong shape");
    header["params"].push_back({{"name", layout[i].name}, {"shape", layout[i].shape}});
  }
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, 8);
  const std::uint64_t len = h.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
  out += h;
  for (const auto& p : m.params) out += doubles_to_bytes(p.data());
  return out;
}

struct LoadedModel {
  Model model;
  json meta;
};

inline LoadedModel deserialize_model(std::string_view bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw ParseError("checkpoint: bad magic at offset 0");
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  if (16 + len > bytes.size()) throw ParseError("checkpoint: header length exceeds file size at offset 8");
  json header;
  try {
    header = json::parse(bytes.substr(16, len));
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint: header JSON: ") + e.what());
  }
  LoadedModel out;
  out.model.spec = header.at("spec").get<ModelSpec>();
  out.model.seed = header.at("seed").get<std::uint64_t>();
  out.meta = header.value("meta", json::object());
  std::size_t off = 16 + len;
  for (const auto& p : param_layout(out.model.spec)) {
    const std::size_t nbytes = shape_numel(p.shape) * sizeof(double);
    if (off + nbytes > bytes.size()) throw ParseError("checkpoint: truncated payload for '" + p.name + "'");
    out.model.params.emplace_back(p.shape, bytes_to_doubles(bytes.substr(off, nbytes)));
    off += nbytes;
  }
  if (off != bytes.size()) throw ParseError("checkpoint: trailing bytes after payload");
  return out;
}

inline void save_model(const std::string& path, const Model& m, const json& meta = json::object()) {
  write_file(path, serialize_model(m, meta));
}

inline LoadedModel load_model(const std::string& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const IoError&) {
    throw ArtifactError("model checkpoint not found: " + path);
  }
  return deserialize_model(bytes);
}

// Extractors are checkpoints whose meta carries the layer selection.
inline void save_extractor(const std::string& path, const FeatureExtractor& fx, json meta = json::object()) {
  meta["layers"] = fx.layers;
  save_model(path, fx.model, meta);
}

inline FeatureExtractor load_extractor(const std::string& path) {
  auto lm = load_model(path);
  FeatureExtractor fx{std::move(lm.model), lm.meta.value("layers", std::vector<std::string>{})};
  if (fx.layers.empty()) fx.layers = conv_layer_names(fx.model.spec);
  fx.validate_selection();
  return fx;
}

inline std::string model_digest(const Model& m) { return sha256_hex(serialize_model(m)); }

}  // namespace loda::nn
