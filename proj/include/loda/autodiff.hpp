#pragma once

// Tape-based reverse-mode differentiation over dense Tensors.
//
// Every primitive's backward rule is written in terms of other primitives,
// and Tape::grad records those calls on the same tape. A gradient returned by
// grad() is therefore an ordinary Var that can itself be differentiated
// (double backward), which is what gradient matching needs.
//
// Adjoint pairs that keep the primitive set closed:
//   sum <-> fill, gather <-> scatter, channel_broadcast <-> channel_sum,
//   mean_pool <-> mean_pool_adjoint, and the conv2d triple
//   {conv2d, conv2d_input_grad, conv2d_weight_grad}.

#include <array>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "loda/kernels.hpp"
#include "loda/tensor.hpp"

namespace loda::ad {

enum class Op : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Neg,
  Scale,
  Square,
  Abs,
  Relu,
  Sqrt,
  Reciprocal,
  Sum,
  Fill,
  MatMul,
  Transpose,
  Conv2d,
  Conv2dInputGrad,
  Conv2dWeightGrad,
  ChannelBroadcast,
  ChannelSum,
  MeanPool,
  MeanPoolAdjoint,
  Reshape,
  Softmax,
  SoftmaxCrossEntropy,
  Gather,
  Scatter,
  Custom,
  Opaque,
};

inline const char* op_name(Op op) {
  static constexpr const char* names[] = {
      "leaf",       "add",         "sub",          "mul",
      "neg",        "scale",       "square",       "abs",
      "relu",       "sqrt",        "reciprocal",   "sum",
      "fill",       "matmul",      "transpose",    "conv2d",
      "conv2d_input_grad", "conv2d_weight_grad", "channel_broadcast", "channel_sum",
      "mean_pool",  "mean_pool_adjoint", "reshape", "softmax",
      "softmax_cross_entropy", "gather", "scatter", "custom",
      "opaque"};
  return names[static_cast<std::size_t>(op)];
}

// Raised when a backward pass must differentiate through a node whose
// derivative was never registered (custom first-order rules).
struct MissingDerivativeError : Error {
  explicit MissingDerivativeError(const std::string& w) : Error("missing-derivative", w) {}
};

// First-order rule for a user-supplied unary op. vjp(x, g) returns the
// gradient with respect to x; it is not itself differentiable.
struct CustomRule {
  std::string name;
  std::function<Tensor(const Tensor&)> forward;
  std::function<Tensor(const Tensor& x, const Tensor& g)> vjp;
};

struct Node {
  Op op = Op::Leaf;
  int a = -1;
  int b = -1;
  bool requires_grad = false;
  Tensor value;
  double scalar = 0.0;
  Shape shape;
  kernels::ConvPad pad;
  std::shared_ptr<const Tensor> aux;
  std::shared_ptr<const std::vector<std::size_t>> index;
  std::shared_ptr<const CustomRule> custom;
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid as long as the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape() const noexcept { return tape_; }
  int id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr && id_ >= 0; }
  inline const Tensor& value() const;
  inline const Shape& shape() const;
  inline bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

struct GradOptions {
  // Reject requests for gradients of inputs that do not require grad.
  bool strict = false;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var variable(Tensor t) { return leaf(std::move(t), true); }
  Var constant(Tensor t) { return leaf(std::move(t), false); }

  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var push(Node n) {
    if (!n.value.all_finite())
      throw NonFiniteError(std::string("autodiff: ") + op_name(n.op) + " produced a non-finite value");
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size() - 1));
  }

  // Reverse-mode gradients of a scalar `loss` with respect to `wrt`. The
  // backward pass is recorded on this tape, so the results are differentiable.
  // Inputs that do not influence the loss get a constant zero tensor.
  inline std::vector<Var> grad(Var loss, std::span<const Var> wrt, GradOptions opts = {});

 private:
  Var leaf(Tensor t, bool requires_grad) {
    Node n;
    n.requires_grad = requires_grad;
    n.value = std::move(t);
    return push(std::move(n));
  }

  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->node(id_).value; }
inline const Shape& Var::shape() const { return tape_->node(id_).value.shape(); }
inline bool Var::requires_grad() const { return tape_->node(id_).requires_grad; }

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b, const char* op) {
  if (!a.valid() || !b.valid() || a.tape() != b.tape())
    throw Error("autodiff", std::string(op) + ": operands live on different tapes");
  return *a.tape();
}

inline Var make(Op op, Tensor value, const Var& a, const Var* b = nullptr) {
  Node n;
  n.op = op;
  n.a = a.id();
  n.b = b ? b->id() : -1;
  n.requires_grad = a.requires_grad() || (b && b->requires_grad());
  n.value = std::move(value);
  return a.tape()->push(std::move(n));
}

}  // namespace detail

// ---- primitives ------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  detail::same_tape(a, b, "add");
  return detail::make(Op::Add, kernels::zip(a.value(), b.value(), "add", std::plus<>()), a, &b);
}

inline Var sub(const Var& a, const Var& b) {
  detail::same_tape(a, b, "sub");
  return detail::make(Op::Sub, kernels::zip(a.value(), b.value(), "sub", std::minus<>()), a, &b);
}

inline Var mul(const Var& a, const Var& b) {
  detail::same_tape(a, b, "mul");
  return detail::make(Op::Mul, kernels::zip(a.value(), b.value(), "mul", std::multiplies<>()), a, &b);
}

inline Var neg(const Var& a) {
  return detail::make(Op::Neg, kernels::map(a.value(), [](double v) { return -v; }), a);
}

inline Var scale(const Var& a, double c) {
  Node n;
  n.op = Op::Scale;
  n.a = a.id();
  n.requires_grad = a.requires_grad();
  n.scalar = c;
  n.value = kernels::map(a.value(), [c](double v) { return c * v; });
  return a.tape()->push(std::move(n));
}

inline Var square(const Var& a) {
  return detail::make(Op::Square, kernels::map(a.value(), [](double v) { return v * v; }), a);
}

inline Var abs(const Var& a) {
  return detail::make(Op::Abs, kernels::map(a.value(), [](double v) { return std::fabs(v); }), a);
}

inline Var relu(const Var& a) {
  return detail::make(Op::Relu, kernels::map(a.value(), [](double v) { return v > 0.0 ? v : 0.0; }), a);
}

inline Var sqrt(const Var& a) {
  for (double v : a.value().data())
    if (v < 0.0) throw DomainError("sqrt: negative argument");
  return detail::make(Op::Sqrt, kernels::map(a.value(), [](double v) { return std::sqrt(v); }), a);
}

inline Var reciprocal(const Var& a) {
  return detail::make(Op::Reciprocal, kernels::map(a.value(), [](double v) { return 1.0 / v; }), a);
}

// Sum of all entries, as a [1] tensor.
inline Var sum(const Var& a) {
  return detail::make(Op::Sum, Tensor::scalar(kernels::sum(a.value())), a);
}

// Broadcast a [1] tensor to `shape`.
inline Var fill(const Var& s, const Shape& shape) {
  if (s.value().size() != 1) throw ShapeError("fill: source must hold one value");
  Node n;
  n.op = Op::Fill;
  n.a = s.id();
  n.requires_grad = s.requires_grad();
  n.shape = shape;
  n.value = Tensor(shape, s.value()[0]);
  return s.tape()->push(std::move(n));
}

inline Var matmul(const Var& a, const Var& b) {
  detail::same_tape(a, b, "matmul");
  return detail::make(Op::MatMul, kernels::matmul(a.value(), b.value()), a, &b);
}

inline Var transpose(const Var& a) {
  return detail::make(Op::Transpose, kernels::transpose(a.value()), a);
}

namespace detail {

inline Var make_conv(Op op, Tensor value, const Var& a, const Var& b, kernels::ConvPad pad) {
  Node n;
  n.op = op;
  n.a = a.id();
  n.b = b.id();
  n.requires_grad = a.requires_grad() || b.requires_grad();
  n.pad = pad;
  n.value = std::move(value);
  return a.tape()->push(std::move(n));
}

}  // namespace detail

inline Var conv2d(const Var& x, const Var& w, kernels::ConvPad pad) {
  detail::same_tape(x, w, "conv2d");
  return detail::make_conv(Op::Conv2d, kernels::conv2d(x.value(), w.value(), pad), x, w, pad);
}

inline Var conv2d_input_grad(const Var& g, const Var& w, std::size_t h, std::size_t wd,
                             kernels::ConvPad pad) {
  detail::same_tape(g, w, "conv2d_input_grad");
  return detail::make_conv(Op::Conv2dInputGrad,
                           kernels::conv2d_input_grad(g.value(), w.value(), h, wd, pad), g, w, pad);
}

inline Var conv2d_weight_grad(const Var& x, const Var& g, std::size_t kh, std::size_t kw,
                              kernels::ConvPad pad) {
  detail::same_tape(x, g, "conv2d_weight_grad");
  return detail::make_conv(Op::Conv2dWeightGrad,
                           kernels::conv2d_weight_grad(x.value(), g.value(), kh, kw, pad), x, g, pad);
}

inline Var channel_broadcast(const Var& b, const Shape& shape) {
  Node n;
  n.op = Op::ChannelBroadcast;
  n.a = b.id();
  n.requires_grad = b.requires_grad();
  n.shape = shape;
  n.value = kernels::channel_broadcast(b.value(), shape);
  return b.tape()->push(std::move(n));
}

inline Var channel_sum(const Var& x) {
  return detail::make(Op::ChannelSum, kernels::channel_sum(x.value()), x);
}

inline Var mean_pool(const Var& x) { return detail::make(Op::MeanPool, kernels::mean_pool(x.value()), x); }

inline Var mean_pool_adjoint(const Var& g) {
  return detail::make(Op::MeanPoolAdjoint, kernels::mean_pool_adjoint(g.value()), g);
}

inline Var reshape(const Var& x, const Shape& shape) {
  Node n;
  n.op = Op::Reshape;
  n.a = x.id();
  n.requires_grad = x.requires_grad();
  n.shape = shape;
  n.value = x.value().reshaped(shape);
  return x.tape()->push(std::move(n));
}

inline Var softmax(const Var& z) { return detail::make(Op::Softmax, kernels::softmax(z.value()), z); }

// Mean over rows of the cross-entropy between softmax(logits) and the fixed
// target distribution rows `target` (soft labels allowed).
inline Var softmax_cross_entropy(const Var& logits, const Tensor& target) {
  Node n;
  n.op = Op::SoftmaxCrossEntropy;
  n.a = logits.id();
  n.requires_grad = logits.requires_grad();
  n.value = Tensor::scalar(kernels::softmax_cross_entropy(logits.value(), target));
  n.aux = std::make_shared<const Tensor>(target);
  return logits.tape()->push(std::move(n));
}

inline Var gather(const Var& x, std::shared_ptr<const std::vector<std::size_t>> idx) {
  Node n;
  n.op = Op::Gather;
  n.a = x.id();
  n.requires_grad = x.requires_grad();
  n.value = kernels::gather(x.value(), *idx);
  n.index = std::move(idx);
  return x.tape()->push(std::move(n));
}

inline Var scatter(const Var& g, std::shared_ptr<const std::vector<std::size_t>> idx, const Shape& shape) {
  Node n;
  n.op = Op::Scatter;
  n.a = g.id();
  n.requires_grad = g.requires_grad();
  n.shape = shape;
  n.value = kernels::scatter(g.value(), *idx, shape);
  n.index = std::move(idx);
  return g.tape()->push(std::move(n));
}

inline Var custom(const Var& x, std::shared_ptr<const CustomRule> rule) {
  Node n;
  n.op = Op::Custom;
  n.a = x.id();
  n.requires_grad = x.requires_grad();
  n.value = rule->forward(x.value());
  n.custom = std::move(rule);
  return x.tape()->push(std::move(n));
}

// ---- composites ------------------------------------------------------------

// x [N,C,...] + b [C] broadcast along axis 1.
inline Var bias_add(const Var& x, const Var& b) { return add(x, channel_broadcast(b, x.shape())); }

// x * s where s is a [1] tensor.
inline Var mul_scalar(const Var& x, const Var& s) { return mul(x, fill(s, x.shape())); }

inline Var dot(const Var& a, const Var& b) { return sum(mul(a, b)); }

inline Var sum_squares(const Var& a) { return sum(square(a)); }

inline Var l2_norm(const Var& a) { return sqrt(sum_squares(a)); }

// ---- backward rules --------------------------------------------------------

namespace detail {

// Returns gradients for the (up to two) parents of node `id`, given the
// gradient `g` of the node's output. Entries for parents that do not require
// grad are left invalid.
inline std::array<Var, 2> vjp(Tape& tape, int id, const Var& g) {
  const Node& n = tape.node(id);
  const Op op = n.op;
  const int ia = n.a, ib = n.b;
  Var a = ia >= 0 ? Var(&tape, ia) : Var();
  Var b = ib >= 0 ? Var(&tape, ib) : Var();
  const bool ga = a.valid() && a.requires_grad();
  const bool gb = b.valid() && b.requires_grad();
  const Var self(&tape, id);
  std::array<Var, 2> out{};

  switch (op) {
    case Op::Leaf:
      break;
    case Op::Add:
      if (ga) out[0] = g;
      if (gb) out[1] = g;
      break;
    case Op::Sub:
      if (ga) out[0] = g;
      if (gb) out[1] = neg(g);
      break;
    case Op::Mul:
      if (ga) out[0] = mul(g, b);
      if (gb) out[1] = mul(g, a);
      break;
    case Op::Neg:
      out[0] = neg(g);
      break;
    case Op::Scale:
      out[0] = scale(g, n.scalar);
      break;
    case Op::Square:
      out[0] = mul(g, scale(a, 2.0));
      break;
    case Op::Abs: {
      // sign(x), with sign(0) = 0; its derivative is zero almost everywhere.
      Var sign = tape.constant(kernels::map(a.value(), [](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }));
      out[0] = mul(g, sign);
      break;
    }
    case Op::Relu: {
      // relu'(0) = 0
      Var mask = tape.constant(kernels::map(a.value(), [](double v) { return v > 0 ? 1.0 : 0.0; }));
      out[0] = mul(g, mask);
      break;
    }
    case Op::Sqrt:
      out[0] = mul(g, scale(reciprocal(self), 0.5));
      break;
    case Op::Reciprocal:
      out[0] = mul(g, neg(square(self)));
      break;
    case Op::Sum:
      out[0] = fill(g, a.shape());
      break;
    case Op::Fill:
      out[0] = sum(g);
      break;
    case Op::MatMul:
      if (ga) out[0] = matmul(g, transpose(b));
      if (gb) out[1] = matmul(transpose(a), g);
      break;
    case Op::Transpose:
      out[0] = transpose(g);
      break;
    case Op::Conv2d: {
      const auto pad = n.pad;
      if (ga) out[0] = conv2d_input_grad(g, b, a.shape()[2], a.shape()[3], pad);
      if (gb) out[1] = conv2d_weight_grad(a, g, b.shape()[2], b.shape()[3], pad);
      break;
    }
    case Op::Conv2dInputGrad: {
      // out = A(g_in, w), adjoint of conv2d in its input: <A(u,w), v> = <u, conv2d(v,w)>
      const auto pad = n.pad;
      if (ga) out[0] = conv2d(g, b, pad);
      if (gb) out[1] = conv2d_weight_grad(g, a, b.shape()[2], b.shape()[3], pad);
      break;
    }
    case Op::Conv2dWeightGrad: {
      // out = B(x, u): <B(x,u), v> = <u, conv2d(x, v)>
      const auto pad = n.pad;
      if (ga) out[0] = conv2d_input_grad(b, g, a.shape()[2], a.shape()[3], pad);
      if (gb) out[1] = conv2d(a, g, pad);
      break;
    }
    case Op::ChannelBroadcast:
      out[0] = channel_sum(g);
      break;
    case Op::ChannelSum:
      out[0] = channel_broadcast(g, a.shape());
      break;
    case Op::MeanPool:
      out[0] = mean_pool_adjoint(g);
      break;
    case Op::MeanPoolAdjoint:
      out[0] = mean_pool(g);
      break;
    case Op::Reshape:
      out[0] = reshape(g, a.shape());
      break;
    case Op::Softmax: {
      // s * (g - rowsum(s * g)); row sums via matmul with constant ones.
      const std::size_t k = self.shape()[1];
      Var sg = mul(self, g);
      Var ones_col = tape.constant(Tensor({k, 1}, 1.0));
      Var ones_row = tape.constant(Tensor({1, k}, 1.0));
      Var rowsum = matmul(matmul(sg, ones_col), ones_row);
      out[0] = sub(sg, mul(self, rowsum));
      break;
    }
    case Op::SoftmaxCrossEntropy: {
      // d/dz = (softmax(z) * rowsum(q) - q) / N
      const Tensor& q = *n.aux;
      const std::size_t rows = q.dim(0), k = q.dim(1);
      Tensor qsum(q.shape());
      for (std::size_t i = 0; i < rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += q[i * k + j];
        for (std::size_t j = 0; j < k; ++j) qsum[i * k + j] = s;
      }
      Var target = tape.constant(q);
      Var weights = tape.constant(std::move(qsum));
      Var diff = sub(mul(softmax(a), weights), target);
      out[0] = mul_scalar(diff, scale(g, 1.0 / static_cast<double>(rows)));
      break;
    }
    case Op::Gather:
      out[0] = scatter(g, n.index, a.shape());
      break;
    case Op::Scatter:
      out[0] = gather(g, n.index);
      break;
    case Op::Custom: {
      Node o;
      o.op = Op::Opaque;
      o.a = g.id();
      o.b = ia;
      o.requires_grad = g.requires_grad() || a.requires_grad();
      o.value = n.custom->vjp(a.value(), g.value());
      o.custom = n.custom;
      if (o.value.shape() != a.shape())
        throw ShapeError("custom op '" + n.custom->name + "': vjp returned wrong shape");
      out[0] = tape.push(std::move(o));
      break;
    }
    case Op::Opaque:
      throw MissingDerivativeError("autodiff: no second derivative registered for custom op '" +
                                   (n.custom ? n.custom->name : std::string("?")) + "'");
  }
  return out;
}

}  // namespace detail

inline std::vector<Var> Tape::grad(Var loss, std::span<const Var> wrt, GradOptions opts) {
  if (loss.tape() != this) throw Error("autodiff", "backward: loss lives on another tape");
  if (loss.value().size() != 1)
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  int lo = loss.id();
  for (const Var& w : wrt) {
    if (w.tape() != this) throw Error("autodiff", "backward: input lives on another tape");
    if (opts.strict && !w.requires_grad())
      throw Error("detached", "backward: requested gradient of a detached input (strict mode)");
    lo = std::min(lo, w.id());
  }

  const int top = loss.id();
  std::vector<int> acc(static_cast<std::size_t>(top) + 1, -1);
  if (node(top).requires_grad) acc[static_cast<std::size_t>(top)] = constant(Tensor(loss.shape(), 1.0)).id();

  for (int id = top; id >= lo; --id) {
    const int gid = acc[static_cast<std::size_t>(id)];
    if (gid < 0) continue;
    const Node& n = node(id);
    if (n.op == Op::Leaf || !n.requires_grad) continue;
    const int parents[2] = {n.a, n.b};
    const auto pg = detail::vjp(*this, id, Var(this, gid));
    for (int k = 0; k < 2; ++k) {
      if (parents[k] < 0 || !pg[k].valid()) continue;
      int& slot = acc[static_cast<std::size_t>(parents[k])];
      slot = slot < 0 ? pg[k].id() : add(Var(this, slot), pg[k]).id();
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) {
    const int gid = acc[static_cast<std::size_t>(w.id())];
    out.push_back(gid >= 0 ? Var(this, gid) : constant(Tensor(w.shape(), 0.0)));
  }
  return out;
}

// Gradient of a scalar built from recorded gradients (a "gradient of a
// gradient") with respect to an input. Plain Tape::grad does this already;
// the helper exists to name the pattern and return a value.
inline Tensor grad_of_grad(Var outer, Var input) {
  const Var wrt[] = {input};
  return outer.tape()->grad(outer, wrt)[0].value();
}

// Per-parameter gradients in declaration order.
class GradientVector {
 public:
  GradientVector() = default;
  explicit GradientVector(std::vector<Tensor> parts) : parts_(std::move(parts)) {}

  const std::vector<Tensor>& parts() const noexcept { return parts_; }
  std::vector<Tensor>& parts() noexcept { return parts_; }
  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& p : parts_) n += p.size();
    return n;
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(size());
    for (const auto& p : parts_) out.insert(out.end(), p.data().begin(), p.data().end());
    return out;
  }

  // Inverse of flatten() given the per-part shapes of `like`.
  static GradientVector unflatten(std::span<const double> flat, const GradientVector& like) {
    if (flat.size() != like.size())
      throw ShapeError("unflatten: " + std::to_string(flat.size()) + " values for " +
                       std::to_string(like.size()) + " slots");
    std::vector<Tensor> parts;
    std::size_t off = 0;
    for (const auto& p : like.parts_) {
      parts.emplace_back(p.shape(), std::vector<double>(flat.begin() + off, flat.begin() + off + p.size()));
      off += p.size();
    }
    return GradientVector(std::move(parts));
  }

  friend bool operator==(const GradientVector&, const GradientVector&) = default;

 private:
  std::vector<Tensor> parts_;
};

}  // namespace loda::ad
