#pragma once

// Raw numeric kernels on Tensors. No tape, no differentiation; the autodiff
// primitives in autodiff.hpp are thin wrappers around these.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "loda/tensor.hpp"

namespace loda::kernels {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

template <class F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = f(x[i]);
  return out;
}

template <class F>
Tensor zip(const Tensor& a, const Tensor& b, const char* op, F f) {
  require_same_shape(a, b, op);
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = f(x[i], y[i]);
  return out;
}

inline double sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return s;
}

// [M,K] x [K,N] -> [M,N]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = x[i * k + p];
      if (av == 0.0) continue;
      const double* row = &y[p * n];
      double* dst = &o[i * n];
      for (std::size_t j = 0; j < n; ++j) dst[j] += av * row[j];
    }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: rank " + std::to_string(a.rank()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return out;
}

struct ConvPad {
  std::size_t h = 0;
  std::size_t w = 0;
  bool operator==(const ConvPad&) const = default;
};

// Stride-1 cross-correlation with zero padding.
// x [N,C,H,W], w [O,C,KH,KW] -> [N,O,H+2ph-KH+1, W+2pw-KW+1]
inline Tensor conv2d(const Tensor& x, const Tensor& w, ConvPad pad) {
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1))
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " vs kernel " + shape_str(w.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (h + 2 * pad.h < kh || wd + 2 * pad.w < kw)
    throw ShapeError("conv2d: kernel larger than padded input");
  const std::size_t oh = h + 2 * pad.h - kh + 1, ow = wd + 2 * pad.w - kw + 1;
  Tensor out({n, o, oh, ow});
  auto xo = x.data();
  auto wo = w.data();
  auto yo = out.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oc = 0; oc < o; ++oc) {
      double* dst = &yo[((b * o) + oc) * oh * ow];
      for (std::size_t ic = 0; ic < c; ++ic) {
        const double* src = &xo[((b * c) + ic) * h * wd];
        for (std::size_t i = 0; i < kh; ++i)
          for (std::size_t j = 0; j < kw; ++j) {
            const double wv = wo[((oc * c + ic) * kh + i) * kw + j];
            // valid output columns: 0 <= q + j - pw < wd
            const std::size_t q0 = j < pad.w ? pad.w - j : 0;
            const std::size_t q1 = std::min(ow, wd + pad.w - j);
            for (std::size_t p = 0; p < oh; ++p) {
              const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(p + i) - static_cast<std::ptrdiff_t>(pad.h);
              if (r < 0 || r >= static_cast<std::ptrdiff_t>(h)) continue;
              const double* srow = src + static_cast<std::size_t>(r) * wd;
              double* drow = dst + p * ow;
              for (std::size_t q = q0; q < q1; ++q) drow[q] += wv * srow[q + j - pad.w];
            }
          }
      }
    }
  return out;
}

// Adjoint of conv2d with respect to its input.
// g [N,O,OH,OW], w [O,C,KH,KW] -> [N,C,H,W]
inline Tensor conv2d_input_grad(const Tensor& g, const Tensor& w, std::size_t h, std::size_t wd,
                                ConvPad pad) {
  if (g.rank() != 4 || w.rank() != 4 || g.dim(1) != w.dim(0))
    throw ShapeError("conv2d_input_grad: grad " + shape_str(g.shape()) + " vs kernel " +
                     shape_str(w.shape()));
  const std::size_t n = g.dim(0), o = w.dim(0), c = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const std::size_t oh = g.dim(2), ow = g.dim(3);
  if (oh + kh != h + 2 * pad.h + 1 || ow + kw != wd + 2 * pad.w + 1)
    throw ShapeError("conv2d_input_grad: output extent does not match input extent");
  Tensor out({n, c, h, wd});
  auto go = g.data();
  auto wo = w.data();
  auto xo = out.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oc = 0; oc < o; ++oc) {
      const double* src = &go[((b * o) + oc) * oh * ow];
      for (std::size_t ic = 0; ic < c; ++ic) {
        double* dst = &xo[((b * c) + ic) * h * wd];
        for (std::size_t i = 0; i < kh; ++i)
          for (std::size_t j = 0; j < kw; ++j) {
            const double wv = wo[((oc * c + ic) * kh + i) * kw + j];
            const std::size_t q0 = j < pad.w ? pad.w - j : 0;
            const std::size_t q1 = std::min(ow, wd + pad.w - j);
            for (std::size_t p = 0; p < oh; ++p) {
              const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(p + i) - static_cast<std::ptrdiff_t>(pad.h);
              if (r < 0 || r >= static_cast<std::ptrdiff_t>(h)) continue;
              double* drow = dst + static_cast<std::size_t>(r) * wd;
              const double* srow = src + p * ow;
              for (std::size_t q = q0; q < q1; ++q) drow[q + j - pad.w] += wv * srow[q];
            }
          }
      }
    }
  return out;
}

// Adjoint of conv2d with respect to its kernel.
// x [N,C,H,W], g [N,O,OH,OW] -> [O,C,KH,KW]
inline Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g, std::size_t kh, std::size_t kw,
                                 ConvPad pad) {
  if (x.rank() != 4 || g.rank() != 4 || x.dim(0) != g.dim(0))
    throw ShapeError("conv2d_weight_grad: input " + shape_str(x.shape()) + " vs grad " +
                     shape_str(g.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = g.dim(1), oh = g.dim(2), ow = g.dim(3);
  if (oh + kh != h + 2 * pad.h + 1 || ow + kw != wd + 2 * pad.w + 1)
    throw ShapeError("conv2d_weight_grad: kernel extent does not match");
  Tensor out({o, c, kh, kw});
  auto xo = x.data();
  auto go = g.data();
  auto wo = out.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oc = 0; oc < o; ++oc) {
      const double* gsrc = &go[((b * o) + oc) * oh * ow];
      for (std::size_t ic = 0; ic < c; ++ic) {
        const double* xsrc = &xo[((b * c) + ic) * h * wd];
        for (std::size_t i = 0; i < kh; ++i)
          for (std::size_t j = 0; j < kw; ++j) {
            const std::size_t q0 = j < pad.w ? pad.w - j : 0;
            const std::size_t q1 = std::min(ow, wd + pad.w - j);
            double acc = 0.0;
            for (std::size_t p = 0; p < oh; ++p) {
              const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(p + i) - static_cast<std::ptrdiff_t>(pad.h);
              if (r < 0 || r >= static_cast<std::ptrdiff_t>(h)) continue;
              const double* xrow = xsrc + static_cast<std::size_t>(r) * wd;
              const double* grow = gsrc + p * ow;
              for (std::size_t q = q0; q < q1; ++q) acc += grow[q] * xrow[q + j - pad.w];
            }
            wo[((oc * c + ic) * kh + i) * kw + j] += acc;
          }
      }
    }
  return out;
}

// Broadcast b [C] along axis 1 of `shape` ([N,C,...]).
inline Tensor channel_broadcast(const Tensor& b, const Shape& shape) {
  if (b.rank() != 1 || shape.size() < 2 || shape[1] != b.dim(0))
    throw ShapeError("channel_broadcast: " + shape_str(b.shape()) + " into " + shape_str(shape));
  Tensor out(shape);
  const std::size_t n = shape[0], c = shape[1], inner = shape_numel(shape) / (n * c);
  auto o = out.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) std::fill_n(&o[(i * c + k) * inner], inner, b[k]);
  return out;
}

inline Tensor channel_sum(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("channel_sum: rank " + std::to_string(x.rank()));
  const std::size_t n = x.dim(0), c = x.dim(1), inner = x.size() / (n * c);
  Tensor out({c});
  auto xi = x.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < inner; ++j) s += xi[(i * c + k) * inner + j];
      out[k] += s;
    }
  return out;
}

// 2x2 average pooling, stride 2, on [N,C,H,W] with even H and W.
inline Tensor mean_pool(const Tensor& x) {
  if (x.rank() != 4 || x.dim(2) % 2 || x.dim(3) % 2)
    throw ShapeError("mean_pool: needs [N,C,even,even], got " + shape_str(x.shape()));
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out({x.dim(0), x.dim(1), h / 2, w / 2});
  auto xi = x.data();
  auto o = out.data();
  for (std::size_t p = 0; p < nc; ++p)
    for (std::size_t i = 0; i < h / 2; ++i)
      for (std::size_t j = 0; j < w / 2; ++j) {
        const double* s = &xi[p * h * w + 2 * i * w + 2 * j];
        o[p * (h / 2) * (w / 2) + i * (w / 2) + j] = 0.25 * (s[0] + s[1] + s[w] + s[w + 1]);
      }
  return out;
}

inline Tensor mean_pool_adjoint(const Tensor& g) {
  if (g.rank() != 4) throw ShapeError("mean_pool_adjoint: rank " + std::to_string(g.rank()));
  const std::size_t nc = g.dim(0) * g.dim(1), h = g.dim(2), w = g.dim(3);
  Tensor out({g.dim(0), g.dim(1), 2 * h, 2 * w});
  auto gi = g.data();
  auto o = out.data();
  for (std::size_t p = 0; p < nc; ++p)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const double v = 0.25 * gi[p * h * w + i * w + j];
        double* d = &o[p * 4 * h * w + 2 * i * 2 * w + 2 * j];
        d[0] = d[1] = d[2 * w] = d[2 * w + 1] = v;
      }
  return out;
}

// Row-wise softmax of [N,K].
inline Tensor softmax(const Tensor& z) {
  if (z.rank() != 2) throw ShapeError("softmax: needs [N,K], got " + shape_str(z.shape()));
  const std::size_t n = z.dim(0), k = z.dim(1);
  Tensor out(z.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) m = std::max(m, z[i * k + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += (out[i * k + j] = std::exp(z[i * k + j] - m));
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] /= s;
  }
  return out;
}

// Mean over rows of -sum_k q_k log softmax(z)_k.
inline double softmax_cross_entropy(const Tensor& z, const Tensor& q) {
  require_same_shape(z, q, "softmax_cross_entropy");
  if (z.rank() != 2) throw ShapeError("softmax_cross_entropy: needs [N,K]");
  const std::size_t n = z.dim(0), k = z.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) m = std::max(m, z[i * k + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(z[i * k + j] - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < k; ++j) total -= q[i * k + j] * (z[i * k + j] - lse);
  }
  return total / static_cast<double>(n);
}

inline Tensor gather(const Tensor& x, const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw ShapeError("gather: empty index set");
  std::vector<double> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= x.size()) throw ShapeError("gather: index out of range");
    out[i] = x[idx[i]];
  }
  return Tensor::vector(std::move(out));
}

inline Tensor scatter(const Tensor& g, const std::vector<std::size_t>& idx, const Shape& shape) {
  if (g.size() != idx.size()) throw ShapeError("scatter: value/index count mismatch");
  Tensor out(shape);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= out.size()) throw ShapeError("scatter: index out of range");
    out[idx[i]] += g[i];
  }
  return out;
}

}  // namespace loda::kernels
