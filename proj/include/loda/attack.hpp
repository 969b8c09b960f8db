#pragma once

// Gradient leakage attack (cosine gradient matching + TV prior), the
// abs-regression attack on Mixup/InstaHide and the stationarity attack on
// LODA. Every attack projects onto [0,1] after each step and returns the
// best-objective iterate.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "loda/autodiff.hpp"
#include "loda/data.hpp"
#include "loda/defense.hpp"
#include "loda/digest.hpp"
#include "loda/image.hpp"
#include "loda/nn.hpp"
#include "loda/rng.hpp"

namespace loda::attack {

using json = nlohmann::json;

// ---- objectives -----------------------------------------------------------

// Anisotropic TV of a [C,H,W] tensor.
inline double total_variation(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("total_variation: expected [C,H,W]");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  double tv = 0.0;
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const double v = x[(k * h + i) * w + j];
        if (i + 1 < h) tv += std::fabs(x[(k * h + i + 1) * w + j] - v);
        if (j + 1 < w) tv += std::fabs(x[(k * h + i) * w + j + 1] - v);
      }
  return tv;
}

inline double total_variation(const Image& img) { return total_variation(img.pixels()); }

// Neighbour index pairs for TV on a tensor whose trailing dims are [H,W].
struct TvPairs {
  std::shared_ptr<const std::vector<std::size_t>> a, b;  // empty when no pairs
};

inline TvPairs tv_pairs(const Shape& s) {
  const std::size_t h = s[s.size() - 2], w = s[s.size() - 1], planes = shape_numel(s) / (h * w);
  std::vector<std::size_t> a, b;
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const std::size_t at = (p * h + i) * w + j;
        if (i + 1 < h) {
          a.push_back(at + w);
          b.push_back(at);
        }
        if (j + 1 < w) {
          a.push_back(at + 1);
          b.push_back(at);
        }
      }
  if (a.empty()) return {};
  return {std::make_shared<const std::vector<std::size_t>>(std::move(a)),
          std::make_shared<const std::vector<std::size_t>>(std::move(b))};
}

inline ad::Var total_variation(const ad::Var& x, const TvPairs& pairs) {
  if (!pairs.a) return ad::scale(ad::sum(x), 0.0);
  return ad::sum(ad::abs(ad::sub(ad::gather(x, pairs.a), ad::gather(x, pairs.b))));
}

// 1 - cos(g1, g2) over the (optionally masked) flat vectors.
inline double grad_match_distance(std::span<const double> g1, std::span<const double> g2,
                                  const std::vector<std::size_t>* mask = nullptr) {
  if (g1.size() != g2.size()) throw ShapeError("grad_match_distance: dimension mismatch");
  double d = 0.0, n1 = 0.0, n2 = 0.0;
  auto acc = [&](std::size_t i) {
    d += g1[i] * g2[i];
    n1 += g1[i] * g1[i];
    n2 += g2[i] * g2[i];
  };
  if (mask)
    for (std::size_t i : *mask) acc(i);
  else
    for (std::size_t i = 0; i < g1.size(); ++i) acc(i);
  if (n1 == 0.0 || n2 == 0.0) throw DomainError("grad_match_distance: zero-norm gradient");
  return 1.0 - d / (std::sqrt(n1) * std::sqrt(n2));
}

inline double grad_match_distance(const ad::GradientVector& g1, const ad::GradientVector& g2,
                                  const std::vector<std::size_t>* mask = nullptr) {
  return grad_match_distance(g1.flatten(), g2.flatten(), mask);
}

// ---- configuration --------------------------------------------------------

enum class Optimizer { Adam, Gd };
enum class Init { Uniform, Gray, Given };

NLOHMANN_JSON_SERIALIZE_ENUM(Optimizer, {{Optimizer::Adam, "adam"}, {Optimizer::Gd, "gd"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Init, {{Init::Uniform, "uniform"}, {Init::Gray, "gray"}, {Init::Given, "given"}})

struct AttackConfig {
  Optimizer optimizer = Optimizer::Adam;
  double lr = 0.1;
  std::size_t steps = 2000;
  bool lr_decay = true;  // x0.1 at 3/8, 5/8 and 7/8 of the steps
  double alpha_tv = 1e-4;
  Init init = Init::Uniform;
  bool mask_aware = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("attack: lr must be > 0");
    if (!(alpha_tv >= 0.0)) throw ConfigError("attack: alpha_tv must be >= 0");
  }
};

inline void to_json(json& j, const AttackConfig& c) {
  j = {{"optimizer", c.optimizer}, {"lr", c.lr},     {"steps", c.steps},           {"lr_decay", c.lr_decay},
       {"alpha_tv", c.alpha_tv},   {"init", c.init}, {"mask_aware", c.mask_aware}, {"seed", c.seed}};
}

inline void from_json(const json& j, AttackConfig& c) {
  AttackConfig d;
  c.optimizer = enum_value(j, "optimizer", d.optimizer);
  c.lr = j.value("lr", d.lr);
  c.steps = j.value("steps", d.steps);
  c.lr_decay = j.value("lr_decay", d.lr_decay);
  c.alpha_tv = j.value("alpha_tv", d.alpha_tv);
  c.init = enum_value(j, "init", d.init);
  c.mask_aware = j.value("mask_aware", d.mask_aware);
  c.seed = j.value("seed", d.seed);
}

// Abs-regression defaults: Adam 0.01, constant rate, 50 restarts.
inline AttackConfig mix_attack_defaults() {
  AttackConfig c;
  c.lr = 0.01;
  c.steps = 1000;
  c.alpha_tv = 0.0;
  c.lr_decay = false;
  return c;
}

// Stationarity-attack defaults: Adam 0.05, constant rate, 100 steps. Uniform
// init: x' itself zeroes the objective for every c, so starting there never moves.
inline AttackConfig loda_attack_defaults() {
  AttackConfig c;
  c.lr = 0.05;
  c.steps = 100;
  c.alpha_tv = 0.0;
  c.lr_decay = false;
  c.init = Init::Uniform;
  return c;
}

struct AttackResult {
  std::vector<Image> images;
  std::vector<double> trace;  // objective at every iterate, initial included
  double best_objective = 0.0;
  std::size_t best_step = 0;
  double seconds = 0.0;
  std::string status = "ok";  // ok | non-finite
  std::vector<std::string> events;
};

// ---- optimizer ------------------------------------------------------------

class Adam {
 public:
  explicit Adam(std::size_t n) : m_(n, 0.0), v_(n, 0.0) {}

  void step(std::span<double> x, std::span<const double> g, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(kB1, static_cast<double>(t_)), c2 = 1.0 - std::pow(kB2, static_cast<double>(t_));
    for (std::size_t i = 0; i < x.size(); ++i) {
      m_[i] = kB1 * m_[i] + (1.0 - kB1) * g[i];
      v_[i] = kB2 * v_[i] + (1.0 - kB2) * g[i] * g[i];
      x[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + kEps);
    }
  }

 private:
  static constexpr double kB1 = 0.9, kB2 = 0.999, kEps = 1e-8;
  std::vector<double> m_, v_;
  long t_ = 0;
};

namespace detail {

inline double scheduled_lr(const AttackConfig& cfg, std::size_t t) {
  double lr = cfg.lr;
  if (cfg.lr_decay)
    for (std::size_t num : {3u, 5u, 7u})
      if (t >= cfg.steps * num / 8) lr *= 0.1;
  return lr;
}

inline Tensor initial_point(const AttackConfig& cfg, const Shape& shape, const Tensor* given) {
  switch (cfg.init) {
    case Init::Given:
      if (!given) throw ConfigError("attack: init=given without an initial image");
      return *given;
    case Init::Gray:
      return Tensor(shape, 0.5);
    case Init::Uniform: {
      Tensor t(shape);
      Rng rng(cfg.seed);
      for (auto& v : t.data()) v = rng.uniform();
      return t;
    }
  }
  return Tensor(shape, 0.5);
}

// Objective value and gradient at a point.
using Evaluator = std::function<std::pair<double, Tensor>(const Tensor&)>;

// Projected first-order loop shared by all attacks. Evaluates steps+1
// iterates and keeps the best.
// With best_out set, the best iterate is returned there instead of as an image.
inline AttackResult optimize(const AttackConfig& cfg, Tensor x, const Evaluator& eval, Tensor* best_out = nullptr) {
  const auto start = std::chrono::steady_clock::now();
  AttackResult res;
  Adam adam(x.size());
  Tensor best = x;
  res.best_objective = std::numeric_limits<double>::infinity();
  bool all_zero_grad = true;
  for (std::size_t t = 0; t <= cfg.steps; ++t) {
    std::pair<double, Tensor> r;
    try {
      r = eval(x);
    } catch (const NonFiniteError& e) {
      res.status = "non-finite";
      res.events.push_back(std::string("aborted at step ") + std::to_string(t) + ": " + e.what());
      break;
    }
    if (!std::isfinite(r.first)) {
      res.status = "non-finite";
      res.events.push_back("aborted at step " + std::to_string(t) + ": non-finite objective");
      break;
    }
    res.trace.push_back(r.first);
    if (r.first < res.best_objective) {
      res.best_objective = r.first;
      res.best_step = t;
      best = x;
    }
    if (t == cfg.steps) break;
    if (l2_norm(r.second.data()) >= 1e-12) all_zero_grad = false;
    const double lr = scheduled_lr(cfg, t);
    if (cfg.optimizer == Optimizer::Adam) {
      adam.step(x.data(), r.second.data(), lr);
    } else {
      for (std::size_t i = 0; i < x.size(); ++i) x[i] -= lr * r.second[i];
    }
    for (auto& v : x.data()) v = std::clamp(v, 0.0, 1.0);
  }
  if (cfg.steps > 0 && all_zero_grad && res.status == "ok") res.events.push_back("degenerate objective: zero gradient at every step");
  if (best_out)
    *best_out = std::move(best);
  else
    res.images.push_back(Image(best.reshaped(Shape(best.shape().begin() + 1, best.shape().end()))));
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

}  // namespace detail

// ---- gradient leakage attack ---------------------------------------------

// Records which flat coordinates of the shared gradient an attack read.
struct ReadLog {
  std::vector<std::size_t> reads;  // per coordinate
};

// Minimizes 1 - cos(grad_theta L(f(x), y), shared) + alpha_tv TV(x) over x in
// [0,1]. With cfg.mask_aware and a mask (the unpruned flat indices), only the
// masked coordinates of both gradients enter the cosine.
inline AttackResult gradient_leakage_attack(const ad::GradientVector& shared, const Label& y_true, const nn::Model& model,
                                            const AttackConfig& cfg, const std::vector<std::size_t>* mask = nullptr,
                                            const Image* init = nullptr, ReadLog* log = nullptr) {
  cfg.validate();
  const auto layout = nn::param_layout(model.spec);
  if (shared.parts().size() != layout.size()) throw ShapeError("gradient_leakage_attack: gradient does not match model");
  const bool masked = cfg.mask_aware && mask;
  if (log) log->reads.assign(shared.size(), 0);

  // Per-part selected indices and the matching shared values.
  std::vector<std::shared_ptr<const std::vector<std::size_t>>> sel(layout.size());
  std::vector<Tensor> target;
  std::vector<bool> active(layout.size(), false);
  double shared_sq = 0.0;
  {
    std::vector<std::vector<std::size_t>> local(layout.size());
    std::size_t part = 0, base = 0;
    auto read = [&](std::size_t p, std::size_t i) {
      if (log) ++log->reads[base + i];
      return shared.parts()[p][i];
    };
    if (masked) {
      for (std::size_t flat : *mask) {
        while (flat >= base + shared.parts()[part].size()) base += shared.parts()[part++].size();
        local[part].push_back(flat - base);
      }
      part = 0;
      base = 0;
    }
    for (std::size_t p = 0; p < layout.size(); ++p) {
      if (shared.parts()[p].shape() != layout[p].shape) throw ShapeError("gradient_leakage_attack: part shape mismatch");
      std::vector<double> vals;
      if (masked) {
        for (std::size_t i : local[p]) vals.push_back(read(p, i));
        if (!local[p].empty()) sel[p] = std::make_shared<const std::vector<std::size_t>>(std::move(local[p]));
      } else {
        for (std::size_t i = 0; i < shared.parts()[p].size(); ++i) vals.push_back(read(p, i));
      }
      base += shared.parts()[p].size();
      active[p] = !vals.empty();
      for (double v : vals) shared_sq += v * v;
      target.push_back(vals.empty() ? Tensor({1}, 0.0) : Tensor::vector(std::move(vals)).reshaped(masked ? Shape{sel[p]->size()} : layout[p].shape));
    }
  }
  if (shared_sq == 0.0) throw DomainError("gradient_leakage_attack: zero-norm shared gradient");
  const double inv_shared = 1.0 / std::sqrt(shared_sq);
  Tensor y({1, y_true.num_classes()}, y_true.probs());
  const Shape xshape = [&] {
    Shape s{1};
    s.insert(s.end(), model.spec.input.begin(), model.spec.input.end());
    return s;
  }();
  const TvPairs pairs = tv_pairs(xshape);

  auto eval = [&](const Tensor& xv) -> std::pair<double, Tensor> {
    ad::Tape tape;
    ad::Var x = tape.variable(xv);
    auto params = nn::variable_params(tape, model);
    ad::Var loss = ad::softmax_cross_entropy(nn::forward(model.spec, params, x), y);
    auto g = tape.grad(loss, params);
    ad::Var dot, sq;
    bool first = true;
    for (std::size_t p = 0; p < g.size(); ++p) {
      if (!active[p]) continue;
      ad::Var gp = masked ? ad::gather(g[p], sel[p]) : g[p];
      ad::Var d = ad::dot(gp, tape.constant(target[p]));
      ad::Var s = ad::sum_squares(gp);
      dot = first ? d : ad::add(dot, d);
      sq = first ? s : ad::add(sq, s);
      first = false;
    }
    // 1 - dot / (|g| |shared|)
    ad::Var cosv = ad::scale(ad::mul(dot, ad::reciprocal(ad::sqrt(sq))), inv_shared);
    ad::Var obj = ad::sub(tape.constant(Tensor({1}, 1.0)), cosv);
    if (cfg.alpha_tv > 0.0) obj = ad::add(obj, ad::scale(total_variation(x, pairs), cfg.alpha_tv));
    std::array<ad::Var, 1> wrt{x};
    return {obj.value().item(), tape.grad(obj, wrt)[0].value()};
  };
  const Tensor given = init ? init->batched() : Tensor(xshape, 0.5);
  return detail::optimize(cfg, detail::initial_point(cfg, xshape, init ? &given : nullptr), eval);
}

// ---- abs-regression attack on mixing defenses ----------------------------

namespace detail {

// Smallest pivot magnitude of Gaussian elimination with partial pivoting.
inline double min_pivot(const defense::MixingMatrix& m) {
  std::vector<double> a = m.a;
  const std::size_t n = m.n;
  double smallest = std::numeric_limits<double>::infinity();
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::fabs(a[r * n + col]) > std::fabs(a[piv * n + col])) piv = r;
    for (std::size_t k = 0; k < n; ++k) std::swap(a[col * n + k], a[piv * n + k]);
    const double p = a[col * n + col];
    smallest = std::min(smallest, std::fabs(p));
    if (p == 0.0) continue;
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a[r * n + col] / p;
      for (std::size_t k = col; k < n; ++k) a[r * n + k] -= f * a[col * n + k];
    }
  }
  return smallest;
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

// Minimizes ||abs(M_hat X') - abs(E)||^2 over X' in [0,1]^{n x d}, from
// `restarts` independent uniform inits (seed streams 0..R-1), and returns the
// per-pixel median of the restarts' best iterates. The trace is restart 0's.
inline AttackResult adaptive_mix_attack(const std::vector<Image>& encrypted, const defense::MixingMatrix& m_hat,
                                        const AttackConfig& cfg, std::size_t restarts = 50) {
  cfg.validate();
  const std::size_t n = encrypted.size();
  if (n == 0) throw DomainError("adaptive_mix_attack: no encrypted images");
  if (m_hat.n != n) throw ShapeError("adaptive_mix_attack: M_hat is " + std::to_string(m_hat.n) + "x" + std::to_string(m_hat.n) + " for " + std::to_string(n) + " images");
  if (restarts == 0) throw ConfigError("adaptive_mix_attack: restarts must be >= 1");
  const Shape img_shape = encrypted[0].shape();
  const std::size_t d = shape_numel(img_shape);
  Tensor e_abs({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    if (encrypted[i].shape() != img_shape) throw ShapeError("adaptive_mix_attack: images differ in shape");
    for (std::size_t p = 0; p < d; ++p) e_abs[i * d + p] = std::fabs(encrypted[i].pixels()[p]);
  }
  const Tensor mt({n, n}, m_hat.a);
  std::vector<std::string> events;
  if (detail::min_pivot(m_hat) < 1e-10) events.push_back("warning: M_hat is singular or nearly so");

  auto eval = [&](const Tensor& xv) -> std::pair<double, Tensor> {
    ad::Tape tape;
    ad::Var x = tape.variable(xv.reshaped({n, d}));
    ad::Var obj = ad::sum_squares(ad::sub(ad::abs(ad::matmul(tape.constant(mt), x)), tape.constant(e_abs)));
    std::array<ad::Var, 1> wrt{x};
    return {obj.value().item(), tape.grad(obj, wrt)[0].value().reshaped({1, n, d})};
  };

  const auto start = std::chrono::steady_clock::now();
  std::vector<Tensor> bests;
  AttackResult out;
  for (std::size_t r = 0; r < restarts; ++r) {
    AttackConfig rc = cfg;
    rc.seed = derive_seed(cfg.seed, r);
    Tensor x0({1, n, d});
    Rng rng(rc.seed);
    for (auto& v : x0.data()) v = rng.uniform();
    Tensor best;
    auto res = detail::optimize(rc, x0, eval, &best);
    if (r == 0) {
      out.trace = res.trace;
      out.best_objective = res.best_objective;
      out.best_step = res.best_step;
      out.status = res.status;
    }
    bests.push_back(std::move(best));
  }
  for (std::size_t i = 0; i < n; ++i) {
    Tensor px(img_shape);
    std::vector<double> col(restarts);
    for (std::size_t p = 0; p < d; ++p) {
      for (std::size_t r = 0; r < restarts; ++r) col[r] = bests[r][i * d + p];
      px[p] = detail::median(col);
    }
    out.images.push_back(Image(std::move(px)));
  }
  out.events = std::move(events);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

// Crude M_hat from the attacker's images alone, for demonstration next to the
// oracle: row i keeps its own entry plus the k-1 images whose |pixels|
// correlate best with image i, weighted by max(corr, 1e-3) and normalized.
// The own entry (corr 1) stays the row maximum.
inline defense::MixingMatrix estimate_mixing(const std::vector<Image>& images, std::size_t k, std::vector<std::uint64_t> ids) {
  const std::size_t n = images.size();
  if (ids.size() != n) throw ShapeError("estimate_mixing: ids and images differ in length");
  if (k < 1 || k > n) throw ConfigError("estimate_mixing: k must be in [1, n]");
  std::vector<std::vector<double>> z(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto px = images[i].pixels().data();
    double mean = 0.0;
    for (double v : px) mean += std::fabs(v);
    mean /= static_cast<double>(px.size());
    double norm = 0.0;
    for (double v : px) {
      z[i].push_back(std::fabs(v) - mean);
      norm += z[i].back() * z[i].back();
    }
    norm = std::sqrt(norm);
    for (double& v : z[i]) v = norm > 0.0 ? v / norm : 0.0;
  }
  defense::MixingMatrix m{n, std::move(ids), std::vector<double>(n * n, 0.0)};
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::pair<double, std::size_t>> corr;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double c = 0.0;
      for (std::size_t p = 0; p < z[i].size(); ++p) c += z[i][p] * z[j][p];
      corr.push_back({std::min(c, 1.0), j});
    }
    std::stable_sort(corr.begin(), corr.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    double total = 1.0;
    m.at(i, i) = 1.0;
    for (std::size_t t = 0; t + 1 < k; ++t) {
      const double w = std::max(corr[t].first, 1e-3);
      m.at(i, corr[t].second) = w;
      total += w;
    }
    for (std::size_t j = 0; j < n; ++j) m.at(i, j) /= total;
  }
  return m;
}

// ---- stationarity attack on LODA ------------------------------------------

// Minimizes ||J_g(x')^T (g(x') - g(x)) - c (x' - x)||^2 over x, with the
// vector-Jacobian product always taken at the fixed encrypted point x'.
inline AttackResult loda_adaptive_attack(const Image& x_prime, const nn::FeatureExtractor& fx, double c_attack,
                                         const AttackConfig& cfg, const Image* init = nullptr) {
  cfg.validate();
  nn::check_input(fx.model, x_prime);
  const Tensor xp = x_prime.batched();
  std::vector<Tensor> gp;
  {
    ad::Tape tape;
    for (const auto& v : nn::feature_vars(tape, fx, tape.constant(xp))) gp.push_back(v.value());
  }
  auto eval = [&](const Tensor& xv) -> std::pair<double, Tensor> {
    ad::Tape tape;
    ad::Var at = tape.variable(xp);
    ad::Var x = tape.variable(xv);
    auto f_at = nn::feature_vars(tape, fx, at);
    auto f_x = nn::feature_vars(tape, fx, x);
    ad::Var inner;
    for (std::size_t l = 0; l < f_at.size(); ++l) {
      ad::Var term = ad::dot(f_at[l], ad::sub(tape.constant(gp[l]), f_x[l]));
      inner = l == 0 ? term : ad::add(inner, term);
    }
    std::array<ad::Var, 1> wrt_at{at};
    ad::Var u = tape.grad(inner, wrt_at)[0];
    ad::Var r = ad::sub(u, ad::scale(ad::sub(tape.constant(xp), x), c_attack));
    ad::Var obj = ad::sum_squares(r);
    std::array<ad::Var, 1> wrt{x};
    return {obj.value().item(), tape.grad(obj, wrt)[0].value()};
  };
  const Tensor given = init ? init->batched() : xp;
  return detail::optimize(cfg, detail::initial_point(cfg, xp.shape(), &given), eval);
}

// ---- serialization --------------------------------------------------------

inline std::string gradient_hash(const ad::GradientVector& g) {
  Digest d;
  for (const auto& p : g.parts()) d.update(p);
  return d.hex();
}

// <dir>/<name>.png (grid of reconstructions) and <dir>/<name>.json.
inline void save_attack_result(const std::string& dir, const std::string& name, const AttackResult& r,
                               const std::string& provenance_hash, const json& config) {
  std::filesystem::create_directories(dir);
  data::save_image_grid(r.images, (std::filesystem::path(dir) / (name + ".png")).string());
  json j = {{"trace", r.trace},   {"best_objective", r.best_objective}, {"best_step", r.best_step},
            {"status", r.status}, {"events", r.events},                 {"seconds", r.seconds},
            {"config", config},   {"provenance_hash", provenance_hash}};
  write_file((std::filesystem::path(dir) / (name + ".json")).string(), j.dump(1));
}

}  // namespace loda::attack
