#pragma once

// Input- and gradient-space defenses: gradient pruning, Mixup, InstaHide and
// LODA, with encryption provenance that replays bit-exactly.
//
// Encrypted dataset directory:
//   manifest.json  {"defense": kind, "config": {...}, "records": [
//                    {"sample_id", "file", "shape", "range", "label", "provenance"}...],
//                   "mixing": {"n", "ids", "rows"} (mixup/instahide only)}
//   <sample_id>.f64  the encrypted image, raw little-endian float64 in C,H,W order

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "loda/autodiff.hpp"
#include "loda/digest.hpp"
#include "loda/image.hpp"
#include "loda/nn.hpp"
#include "loda/rng.hpp"

namespace loda::defense {

using json = nlohmann::json;

enum class Kind { None, GradPrune, Mixup, InstaHide, Loda };

NLOHMANN_JSON_SERIALIZE_ENUM(Kind, {{Kind::None, "none"},
                                    {Kind::GradPrune, "grad-prune"},
                                    {Kind::Mixup, "mixup"},
                                    {Kind::InstaHide, "instahide"},
                                    {Kind::Loda, "loda"}})

inline Kind parse_kind(const std::string& s) {
  for (Kind k : {Kind::None, Kind::GradPrune, Kind::Mixup, Kind::InstaHide, Kind::Loda})
    if (json(k).get<std::string>() == s) return k;
  throw ConfigError("unknown defense '" + s + "'");
}

inline std::string kind_name(Kind k) { return json(k).get<std::string>(); }

// ---- gradient pruning -----------------------------------------------------

// Flat indices that survive pruning at fraction p: everything except the
// floor(p*n) smallest magnitudes, ties broken by ascending index. Sorted.
inline std::vector<std::size_t> prune_support(std::span<const double> flat, double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError("grad_prune: p=" + std::to_string(p) + " outside [0,1]");
  const std::size_t n = flat.size();
  if (n == 0) throw DomainError("grad_prune: empty gradient");
  const auto drop = static_cast<std::size_t>(std::floor(p * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return std::fabs(flat[a]) < std::fabs(flat[b]); });
  std::vector<std::size_t> kept(order.begin() + static_cast<std::ptrdiff_t>(drop), order.end());
  std::sort(kept.begin(), kept.end());
  return kept;
}

inline ad::GradientVector grad_prune(const ad::GradientVector& g, double p) {
  const auto flat = g.flatten();
  std::vector<double> out(flat.size(), 0.0);
  for (std::size_t i : prune_support(flat, p)) out[i] = flat[i];
  return ad::GradientVector::unflatten(out, g);
}

// ---- mixing ---------------------------------------------------------------

// Row-stochastic, k-sparse matrix over a batch; ids[i] is the sample id of
// batch position i.
struct MixingMatrix {
  std::size_t n = 0;
  std::vector<std::uint64_t> ids;
  std::vector<double> a;  // n*n row-major

  double at(std::size_t i, std::size_t j) const { return a[i * n + j]; }
  double& at(std::size_t i, std::size_t j) { return a[i * n + j]; }

  static MixingMatrix identity(std::vector<std::uint64_t> ids) {
    MixingMatrix m{ids.size(), std::move(ids), {}};
    m.a.assign(m.n * m.n, 0.0);
    for (std::size_t i = 0; i < m.n; ++i) m.at(i, i) = 1.0;
    return m;
  }

  // Throws DomainError naming the first violated row.
  void validate(std::size_t k) const {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0, mx = 0.0;
      std::size_t nz = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const double v = at(i, j);
        if (v < 0.0) throw DomainError("mixing row " + std::to_string(i) + ": negative coefficient");
        s += v;
        nz += v != 0.0;
        mx = std::max(mx, v);
      }
      if (std::fabs(s - 1.0) > 1e-9) throw DomainError("mixing row " + std::to_string(i) + ": sums to " + std::to_string(s));
      if (nz != k) throw DomainError("mixing row " + std::to_string(i) + ": " + std::to_string(nz) + " nonzeros, expected " + std::to_string(k));
      if (at(i, i) != mx) throw DomainError("mixing row " + std::to_string(i) + ": own coefficient is not the maximum");
    }
  }
};

inline json mixing_to_json(const MixingMatrix& m) {
  json rows = json::array();
  for (std::size_t i = 0; i < m.n; ++i) rows.push_back(std::vector<double>(m.a.begin() + i * m.n, m.a.begin() + (i + 1) * m.n));
  return {{"n", m.n}, {"ids", m.ids}, {"rows", rows}};
}

inline MixingMatrix mixing_from_json(const json& j) {
  MixingMatrix m{j.at("n").get<std::size_t>(), j.at("ids").get<std::vector<std::uint64_t>>(), {}};
  for (const auto& r : j.at("rows")) {
    auto v = r.get<std::vector<double>>();
    if (v.size() != m.n) throw ParseError("mixing matrix: ragged row");
    m.a.insert(m.a.end(), v.begin(), v.end());
  }
  if (m.a.size() != m.n * m.n || m.ids.size() != m.n) throw ParseError("mixing matrix: wrong size");
  return m;
}

// Per-pixel +-1 multiplier reproducible from its seed.
struct SignMask {
  std::uint64_t seed = 0;
  Tensor signs;

  static SignMask from_seed(std::uint64_t seed, const Shape& shape) {
    SignMask m{seed, Tensor(shape)};
    Rng rng(seed);
    for (auto& v : m.signs.data()) v = rng.uniform() < 0.5 ? -1.0 : 1.0;
    return m;
  }

  double flip_fraction() const {
    const auto neg = std::count(signs.data().begin(), signs.data().end(), -1.0);
    return static_cast<double>(neg) / static_cast<double>(signs.size());
  }
};

inline Tensor apply_signs(Tensor px, const SignMask& mask) {
  if (px.shape() != mask.signs.shape()) throw ShapeError("apply_signs: mask shape mismatch");
  for (std::size_t i = 0; i < px.size(); ++i) px[i] *= mask.signs[i];
  return px;
}

// ---- encryption records ---------------------------------------------------

struct Provenance {
  std::vector<std::uint64_t> members;  // mixed sample ids, own id first
  std::vector<double> coeffs;          // matching mixing coefficients
  std::vector<bool> member_public;     // instahide public-companion mode only
  std::optional<std::uint64_t> sign_seed;
  std::optional<std::uint64_t> init_id;  // LODA: public-pool sample id
  double c = 0.0, tau = 0.0;
  std::size_t steps = 0;
  std::string extractor;  // digest of the extractor checkpoint
  std::vector<std::string> layers;
  std::size_t zero_grad_events = 0;
  double objective_init = 0.0, objective_final = 0.0;
};

inline void to_json(json& j, const Provenance& p) {
  j = json::object();
  if (!p.members.empty()) {
    j["members"] = p.members;
    j["coeffs"] = p.coeffs;
    if (!p.member_public.empty()) j["member_public"] = p.member_public;
  }
  if (p.sign_seed) j["sign_seed"] = *p.sign_seed;
  if (p.init_id) {
    j["init_id"] = *p.init_id;
    j["c"] = p.c;
    j["T"] = p.steps;
    j["tau"] = p.tau;
    j["extractor"] = p.extractor;
    j["layers"] = p.layers;
    j["zero_grad_events"] = p.zero_grad_events;
    j["objective_init"] = p.objective_init;
    j["objective_final"] = p.objective_final;
  }
}

inline void from_json(const json& j, Provenance& p) {
  p = Provenance{};
  if (j.contains("members")) {
    p.members = j.at("members").get<std::vector<std::uint64_t>>();
    p.coeffs = j.at("coeffs").get<std::vector<double>>();
    if (j.contains("member_public")) p.member_public = j.at("member_public").get<std::vector<bool>>();
  }
  if (j.contains("sign_seed")) p.sign_seed = j.at("sign_seed").get<std::uint64_t>();
  if (j.contains("init_id")) {
    p.init_id = j.at("init_id").get<std::uint64_t>();
    p.c = j.at("c").get<double>();
    p.steps = j.at("T").get<std::size_t>();
    p.tau = j.at("tau").get<double>();
    p.extractor = j.value("extractor", std::string());
    p.layers = j.value("layers", std::vector<std::string>{});
    p.zero_grad_events = j.value("zero_grad_events", std::size_t{0});
    p.objective_init = j.value("objective_init", 0.0);
    p.objective_final = j.value("objective_final", 0.0);
  }
}

struct EncryptionRecord {
  std::uint64_t sample_id = 0;
  Kind kind = Kind::None;
  Image image;
  Label label;
  Provenance provenance;
};

// Clean copies; used for the no-defense and gradient-pruning pipelines.
inline std::vector<EncryptionRecord> identity_encrypt(const std::vector<LabeledExample>& batch, Kind kind = Kind::None) {
  std::vector<EncryptionRecord> out;
  for (const auto& e : batch) out.push_back({e.id, kind, e.image, e.label, {}});
  return out;
}

namespace detail {

inline Tensor combine(const std::vector<const Image*>& imgs, const std::vector<double>& coeffs) {
  Tensor out(imgs[0]->shape(), 0.0);
  for (std::size_t m = 0; m < imgs.size(); ++m) {
    const auto px = imgs[m]->pixels().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += coeffs[m] * px[i];
  }
  // a convex combination can exceed 1 by rounding only
  for (auto& v : out.data()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

inline Label mix_labels(const std::vector<const Label*>& labels, const std::vector<double>& coeffs) {
  std::vector<double> q(labels[0]->num_classes(), 0.0);
  double total = 0.0;
  for (std::size_t m = 0; m < labels.size(); ++m) {
    for (std::size_t c = 0; c < q.size(); ++c) q[c] += coeffs[m] * labels[m]->probs()[c];
    total += coeffs[m];
  }
  for (auto& v : q) v /= total;
  return Label(std::move(q));
}

}  // namespace detail

// Applies explicit mixing rows to a batch (row i mixes into image i).
inline std::vector<Tensor> apply_mixing(const std::vector<Image>& batch, const MixingMatrix& m) {
  if (batch.size() != m.n) throw ShapeError("apply_mixing: batch of " + std::to_string(batch.size()) + " for n=" + std::to_string(m.n));
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < m.n; ++i) {
    std::vector<const Image*> imgs;
    std::vector<double> coeffs;
    for (std::size_t j = 0; j < m.n; ++j)
      if (m.at(i, j) != 0.0) {
        imgs.push_back(&batch[j]);
        coeffs.push_back(m.at(i, j));
      }
    out.push_back(detail::combine(imgs, coeffs));
  }
  return out;
}

struct MixConfig {
  std::size_t k = 4;
  std::uint64_t seed = 0;
  bool public_companions = false;  // instahide only: companions from the public pool
};

struct MixOutput {
  std::vector<EncryptionRecord> records;
  MixingMatrix mixing;  // empty (n = 0) in public-companion mode
  std::vector<SignMask> masks;
};

namespace detail {

// Row i: Dirichlet(1) weights over i and k-1 distinct batch companions, with
// the largest weight assigned to i. Stream per sample id.
inline MixOutput mix_batch(const std::vector<LabeledExample>& batch, const MixConfig& cfg, Kind kind,
                           const std::vector<LabeledExample>* pool) {
  const std::size_t n = batch.size();
  if (cfg.k < 1) throw ConfigError("mix: k must be >= 1");
  const bool use_pool = pool != nullptr;
  if (!use_pool && cfg.k > n) throw ConfigError("mix: k=" + std::to_string(cfg.k) + " exceeds batch size " + std::to_string(n));
  if (use_pool && cfg.k - 1 > pool->size()) throw ConfigError("mix: public pool smaller than k-1");
  MixOutput out;
  if (!use_pool) {
    out.mixing.n = n;
    out.mixing.a.assign(n * n, 0.0);
    for (const auto& e : batch) out.mixing.ids.push_back(e.id);
  }
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(cfg.seed, batch[i].id));
    std::vector<double> w = rng.dirichlet_ones(cfg.k);
    std::swap(w[0], *std::max_element(w.begin(), w.end()));
    std::vector<const LabeledExample*> members{&batch[i]};
    if (use_pool) {
      for (auto j : rng.sample_without_replacement(pool->size(), cfg.k - 1)) members.push_back(&(*pool)[j]);
    } else {
      for (auto j : rng.sample_without_replacement(n - 1, cfg.k - 1)) members.push_back(&batch[j >= i ? j + 1 : j]);
    }
    Provenance prov;
    std::vector<const Image*> imgs;
    std::vector<const Label*> labels;
    std::vector<double> label_w;
    for (std::size_t m = 0; m < members.size(); ++m) {
      prov.members.push_back(members[m]->id);
      prov.coeffs.push_back(w[m]);
      imgs.push_back(&members[m]->image);
      if (use_pool) prov.member_public.push_back(m > 0);
      // public companions carry no label mass
      if (!use_pool || m == 0) {
        labels.push_back(&members[m]->label);
        label_w.push_back(w[m]);
      }
      if (!use_pool) out.mixing.at(i, (m == 0 ? i : static_cast<std::size_t>(members[m] - batch.data()))) = w[m];
    }
    Tensor px = combine(imgs, prov.coeffs);
    PixelRange range = PixelRange::Unit;
    if (kind == Kind::InstaHide) {
      const std::uint64_t sseed = derive_seed(cfg.seed ^ 0x5349474eULL, batch[i].id);
      auto mask = SignMask::from_seed(sseed, px.shape());
      px = apply_signs(std::move(px), mask);
      prov.sign_seed = sseed;
      out.masks.push_back(std::move(mask));
      range = PixelRange::Signed;
    }
    out.records.push_back({batch[i].id, kind, Image(std::move(px), range), mix_labels(labels, label_w), std::move(prov)});
  }
  return out;
}

}  // namespace detail

inline MixOutput mix_encrypt(const std::vector<LabeledExample>& batch, const MixConfig& cfg) {
  return detail::mix_batch(batch, cfg, Kind::Mixup, nullptr);
}

inline MixOutput instahide_encrypt(const std::vector<LabeledExample>& batch, const MixConfig& cfg,
                                   const std::vector<LabeledExample>* public_pool = nullptr) {
  if (cfg.public_companions && (!public_pool || public_pool->empty()))
    throw ConfigError("instahide: public-companion mode needs a public pool");
  return detail::mix_batch(batch, cfg, Kind::InstaHide, cfg.public_companions ? public_pool : nullptr);
}

// ---- LODA -----------------------------------------------------------------

struct LodaConfig {
  double c = 20.0;
  std::size_t steps = 500;  // T
  double tau = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(c >= 0.0)) throw ConfigError("loda: c must be >= 0");
    if (!(tau > 0.0)) throw ConfigError("loda: tau must be > 0");
  }
};

// ||g(x') - g(x*)||^2 - c ||x' - x*||^2
inline double loda_objective(const nn::FeatureExtractor& fx, const Image& xp, const Image& xs, double c) {
  const Tensor a = nn::extract_features(fx, xp), b = nn::extract_features(fx, xs);
  double feat = 0.0, pix = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) feat += (a[i] - b[i]) * (a[i] - b[i]);
  for (std::size_t i = 0; i < xp.size(); ++i) {
    const double d = xp.pixels()[i] - xs.pixels()[i];
    pix += d * d;
  }
  return feat - c * pix;
}

namespace detail {

// Gradient of the LODA objective at x' with g(x*) precomputed.
inline Tensor loda_gradient(const nn::FeatureExtractor& fx, const Tensor& xp_batched, const Tensor& xs_batched,
                            const std::vector<Tensor>& target, double c) {
  ad::Tape tape;
  ad::Var x = tape.variable(xp_batched);
  auto feats = nn::feature_vars(tape, fx, x);
  ad::Var loss = ad::sum_squares(ad::sub(feats[0], tape.constant(target[0])));
  for (std::size_t l = 1; l < feats.size(); ++l) loss = ad::add(loss, ad::sum_squares(ad::sub(feats[l], tape.constant(target[l]))));
  loss = ad::sub(loss, ad::scale(ad::sum_squares(ad::sub(x, tape.constant(xs_batched))), c));
  std::array<ad::Var, 1> wrt{x};
  return tape.grad(loss, wrt)[0].value();
}

inline std::vector<Tensor> feature_targets(const nn::FeatureExtractor& fx, const Tensor& batched) {
  ad::Tape tape;
  std::vector<Tensor> out;
  for (const auto& v : nn::feature_vars(tape, fx, tape.constant(batched))) out.push_back(v.value());
  return out;
}

}  // namespace detail

// LODA for one image: x' starts at a public image drawn with
// replacement (stream = sample id), then T normalized-gradient steps with
// projection onto [0,1]. A step whose gradient norm is below 1e-12 is
// skipped and counted in zero_grad_events. Keeps the original label.
inline EncryptionRecord loda_encrypt(const LabeledExample& x_star, const nn::FeatureExtractor& fx, const LodaConfig& cfg,
                                     const std::vector<LabeledExample>& public_pool,
                                     const Image* init_override = nullptr) {
  cfg.validate();
  nn::check_input(fx.model, x_star.image);
  Provenance prov;
  Image init;
  if (init_override) {
    init = *init_override;
    prov.init_id = std::numeric_limits<std::uint64_t>::max();
  } else {
    if (public_pool.empty()) throw ConfigError("loda: empty public pool");
    Rng rng(derive_seed(cfg.seed, x_star.id));
    const auto& pick = public_pool[rng.below(public_pool.size())];
    init = pick.image;
    prov.init_id = pick.id;
  }
  prov.c = cfg.c;
  prov.tau = cfg.tau;
  prov.steps = cfg.steps;
  prov.extractor = nn::model_digest(fx.model);
  prov.layers = fx.layers;

  const Tensor xs = x_star.image.batched();
  const auto target = detail::feature_targets(fx, xs);
  Tensor x = init.batched();
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    const Tensor g = detail::loda_gradient(fx, x, xs, target, cfg.c);
    const double norm = l2_norm(g.data());
    if (norm < 1e-12) {
      ++prov.zero_grad_events;
      continue;
    }
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x[i] - cfg.tau * g[i] / norm, 0.0, 1.0);
  }
  Image out(x.reshaped(x_star.image.shape()));
  prov.objective_init = loda_objective(fx, init, x_star.image, cfg.c);
  prov.objective_final = loda_objective(fx, out, x_star.image, cfg.c);
  return {x_star.id, Kind::Loda, std::move(out), x_star.label, std::move(prov)};
}

// ||J_g(x')^T (g(x') - g(x*)) - c (x' - x*)||_2 with one backward pass at x'.
inline double loda_stationarity_residual(const Image& xp, const Image& xs, const nn::FeatureExtractor& fx, double c) {
  if (xp.shape() != xs.shape()) throw ShapeError("stationarity residual: shape mismatch");
  const auto target = detail::feature_targets(fx, xs.batched());
  ad::Tape tape;
  ad::Var x = tape.variable(xp.batched());
  auto feats = nn::feature_vars(tape, fx, x);
  ad::Var loss;
  for (std::size_t l = 0; l < feats.size(); ++l) {
    Tensor d = feats[l].value();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] -= target[l][i];
    ad::Var term = ad::dot(feats[l], tape.constant(d));
    loss = l == 0 ? term : ad::add(loss, term);
  }
  std::array<ad::Var, 1> wrt{x};
  Tensor r = tape.grad(loss, wrt)[0].value();
  for (std::size_t i = 0; i < r.size(); ++i) r[i] -= c * (xp.pixels()[i] - xs.pixels()[i]);
  return l2_norm(r.data());
}

// ---- replay and storage ---------------------------------------------------

struct ReplayContext {
  std::map<std::uint64_t, const LabeledExample*> private_samples;
  std::map<std::uint64_t, const LabeledExample*> public_samples;
  const nn::FeatureExtractor* extractor = nullptr;

  void add_private(const std::vector<LabeledExample>& v) {
    for (const auto& e : v) private_samples[e.id] = &e;
  }
  void add_public(const std::vector<LabeledExample>& v) {
    for (const auto& e : v) public_samples[e.id] = &e;
  }
};

// Recomputes a record's image from its provenance alone.
inline Image replay(const EncryptionRecord& r, const ReplayContext& ctx) {
  auto lookup = [&](std::uint64_t id, bool pub) -> const LabeledExample& {
    const auto& table = pub ? ctx.public_samples : ctx.private_samples;
    auto it = table.find(id);
    if (it == table.end()) throw ArtifactError("replay: sample " + std::to_string(id) + " not available");
    return *it->second;
  };
  const auto& p = r.provenance;
  switch (r.kind) {
    case Kind::None:
    case Kind::GradPrune:
      return lookup(r.sample_id, false).image;
    case Kind::Mixup:
    case Kind::InstaHide: {
      std::vector<const Image*> imgs;
      for (std::size_t m = 0; m < p.members.size(); ++m)
        imgs.push_back(&lookup(p.members[m], !p.member_public.empty() && p.member_public[m]).image);
      Tensor px = detail::combine(imgs, p.coeffs);
      if (r.kind == Kind::Mixup) return Image(std::move(px));
      const auto mask = SignMask::from_seed(p.sign_seed.value(), px.shape());
      return Image(apply_signs(std::move(px), mask), PixelRange::Signed);
    }
    case Kind::Loda: {
      if (!ctx.extractor) throw ArtifactError("replay: LODA record needs the extractor");
      if (nn::model_digest(ctx.extractor->model) != p.extractor) throw ArtifactError("replay: extractor digest mismatch");
      LodaConfig cfg{p.c, p.steps, p.tau, 0};
      nn::FeatureExtractor fx = *ctx.extractor;
      fx.layers = p.layers;
      const Image& init = lookup(p.init_id.value(), true).image;
      return loda_encrypt(lookup(r.sample_id, false), fx, cfg, {}, &init).image;
    }
  }
  throw Error("replay", "unknown defense kind");
}

struct EncryptedDataset {
  Kind kind = Kind::None;
  json config = json::object();
  std::vector<EncryptionRecord> records;
  std::optional<MixingMatrix> mixing;

  // What training consumes: encrypted images with their released labels.
  std::vector<LabeledExample> examples() const {
    std::vector<LabeledExample> out;
    for (const auto& r : records) out.push_back({r.sample_id, r.image, r.label});
    return out;
  }
};

inline void save_encrypted(const std::string& dir, const EncryptedDataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  json m;
  m["defense"] = ds.kind;
  m["config"] = ds.config;
  m["records"] = json::array();
  for (const auto& r : ds.records) {
    const std::string file = std::to_string(r.sample_id) + ".f64";
    write_file((fs::path(dir) / file).string(), doubles_to_bytes(r.image.pixels().data()));
    m["records"].push_back({{"sample_id", r.sample_id},
                            {"file", file},
                            {"shape", r.image.shape()},
                            {"range", range_name(r.image.range())},
                            {"label", r.label.probs()},
                            {"provenance", r.provenance}});
  }
  if (ds.mixing) m["mixing"] = mixing_to_json(*ds.mixing);
  write_file((fs::path(dir) / "manifest.json").string(), m.dump(1));
}

inline EncryptedDataset load_encrypted(const std::string& dir) {
  namespace fs = std::filesystem;
  const auto mpath = (fs::path(dir) / "manifest.json").string();
  if (!fs::exists(mpath)) throw ArtifactError("encrypted dataset manifest not found: " + mpath);
  EncryptedDataset ds;
  try {
    const json m = json::parse(read_file(mpath));
    ds.kind = m.at("defense").get<Kind>();
    ds.config = m.value("config", json::object());
    for (const auto& jr : m.at("records")) {
      const Shape shape = jr.at("shape").get<Shape>();
      auto px = bytes_to_doubles(read_file((fs::path(dir) / jr.at("file").get<std::string>()).string()));
      if (px.size() != shape_numel(shape)) throw ParseError("encrypted record " + jr.at("file").get<std::string>() + ": payload size mismatch");
      const auto range = jr.at("range").get<std::string>() == "signed" ? PixelRange::Signed : PixelRange::Unit;
      ds.records.push_back({jr.at("sample_id").get<std::uint64_t>(), ds.kind, Image(Tensor(shape, std::move(px)), range),
                            Label(jr.at("label").get<std::vector<double>>()), jr.at("provenance").get<Provenance>()});
    }
    if (m.contains("mixing")) ds.mixing = mixing_from_json(m.at("mixing"));
  } catch (const json::exception& e) {
    throw ParseError("encrypted dataset " + mpath + ": " + e.what());
  }
  return ds;
}

}  // namespace loda::defense
