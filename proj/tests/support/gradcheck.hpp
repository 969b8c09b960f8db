#pragma once

// Central finite-difference checker used by the unit and acceptance suites.
// Independent of the reverse-mode path: it only ever evaluates the scalar
// function forward.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "loda/autodiff.hpp"
#include "loda/rng.hpp"

namespace loda::fd {

// Builds a scalar on `tape` from variables holding `inputs`.
using ScalarFn = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

inline double eval_scalar(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.constant(t));
  return f(tape, vars).value().item();
}

inline std::vector<Tensor> analytic_grads(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.variable(t));
  ad::Var loss = f(tape, vars);
  auto g = tape.grad(loss, vars);
  std::vector<Tensor> out;
  for (auto& v : g) out.push_back(v.value());
  return out;
}

inline std::vector<Tensor> numeric_grads(const ScalarFn& f, const std::vector<Tensor>& inputs,
                                         double step = 1e-4) {
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor g(inputs[k].shape());
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto plus = inputs;
      auto minus = inputs;
      plus[k][i] += step;
      minus[k][i] -= step;
      g[i] = (eval_scalar(f, plus) - eval_scalar(f, minus)) / (2.0 * step);
    }
    out.push_back(std::move(g));
  }
  return out;
}

// ||a - n||_2 / max(||n||_2, floor) over all inputs jointly.
inline double relative_error(const std::vector<Tensor>& a, const std::vector<Tensor>& n,
                             double floor = 1e-8) {
  double diff = 0.0, ref = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k)
    for (std::size_t i = 0; i < a[k].size(); ++i) {
      diff += (a[k][i] - n[k][i]) * (a[k][i] - n[k][i]);
      ref += n[k][i] * n[k][i];
    }
  return std::sqrt(diff) / std::max(std::sqrt(ref), floor);
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Values bounded away from zero so finite differences never straddle a kink.
inline Tensor away_from_zero(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) {
    const double m = rng.uniform(0.1, 1.0);
    v = rng.uniform() < 0.5 ? -m : m;
  }
  return t;
}

// sum(w * f(x)) with fixed random weights exercises the full Jacobian.
inline ScalarFn weighted(ScalarFn f, Tensor w) {
  return [f, w](ad::Tape& t, const std::vector<ad::Var>& in) {
    ad::Var y = f(t, in);
    return ad::dot(y, t.constant(w.reshaped(y.shape())));
  };
}

inline double gradcheck(const ScalarFn& f, const std::vector<Tensor>& inputs, double step = 1e-4) {
  return relative_error(analytic_grads(f, inputs), numeric_grads(f, inputs, step));
}

}  // namespace loda::fd
