#pragma once

// Differentiable tensor operations. Every op validates shapes, computes the
// forward value eagerly, and registers a backward rule when an input
// requires grad.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "css/error.hpp"
#include "css/parallel.hpp"
#include "css/tensor.hpp"

namespace css::ops {

using detail::make_result;
using detail::Node;
using detail::TensorImpl;

namespace detail_ops {

inline bool is_suffix(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

inline std::size_t norm_axis(int axis, std::size_t ndim) {
  const int n = static_cast<int>(ndim);
  const int a = axis < 0 ? axis + n : axis;
  if (a < 0 || a >= n) throw ShapeError("axis " + std::to_string(axis) + " out of range");
  return static_cast<std::size_t>(a);
}

// C[M,N] += A[M,K] * B[K,N]
inline void gemm_nn(std::size_t M, std::size_t K, std::size_t N, const double* A, const double* B,
                    double* C) {
  parallel_for(M, 16, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      double* c = C + i * N;
      const double* a = A + i * K;
      for (std::size_t k = 0; k < K; ++k) {
        const double av = a[k];
        if (av == 0.0) continue;
        const double* b = B + k * N;
        for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
      }
    }
  });
}

// dA[M,K] += dC[M,N] * B[K,N]^T
inline void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const double* dC, const double* B,
                    double* dA) {
  parallel_for(M, 16, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      const double* g = dC + i * N;
      double* out = dA + i * K;
      for (std::size_t k = 0; k < K; ++k) {
        const double* b = B + k * N;
        double s = 0.0;
        for (std::size_t j = 0; j < N; ++j) s += g[j] * b[j];
        out[k] += s;
      }
    }
  });
}

// dB[K,N] += A[M,K]^T * dC[M,N]
inline void gemm_tn(std::size_t M, std::size_t K, std::size_t N, const double* A, const double* dC,
                    double* dB) {
  parallel_for(K, 8, [&](std::size_t k0, std::size_t k1) {
    for (std::size_t i = 0; i < M; ++i) {
      const double* a = A + i * K;
      const double* g = dC + i * N;
      for (std::size_t k = k0; k < k1; ++k) {
        const double av = a[k];
        if (av == 0.0) continue;
        double* out = dB + k * N;
        for (std::size_t j = 0; j < N; ++j) out[j] += av * g[j];
      }
    }
  });
}

}  // namespace detail_ops

// ---------------------------------------------------------------------------
// Elementwise binary ops. `b` may match `a` exactly or be a trailing suffix of
// a's shape (broadcast over leading dimensions, as for biases).

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (!detail_ops::is_suffix(a.shape(), b.shape())) {
    throw ShapeError("add: cannot broadcast " + shape_str(b.shape()) + " onto " +
                     shape_str(a.shape()));
  }
  const std::size_t n = a.numel(), m = b.numel();
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] += bd[i % m];
  return make_result(a.shape(), std::move(out), "add", {a, b}, [n, m](const TensorImpl& o, Node& nd) {
    if (double* ga = nd.grad_of(0))
      for (std::size_t i = 0; i < n; ++i) ga[i] += o.grad[i];
    if (double* gb = nd.grad_of(1))
      for (std::size_t i = 0; i < n; ++i) gb[i % m] += o.grad[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("sub: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
  return make_result(a.shape(), std::move(out), "sub", {a, b}, [n](const TensorImpl& o, Node& nd) {
    if (double* ga = nd.grad_of(0))
      for (std::size_t i = 0; i < n; ++i) ga[i] += o.grad[i];
    if (double* gb = nd.grad_of(1))
      for (std::size_t i = 0; i < n; ++i) gb[i] -= o.grad[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (!detail_ops::is_suffix(a.shape(), b.shape())) {
    throw ShapeError("mul: cannot broadcast " + shape_str(b.shape()) + " onto " +
                     shape_str(a.shape()));
  }
  const std::size_t n = a.numel(), m = b.numel();
  std::vector<double> out(n);
  const auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] * bd[i % m];
  return make_result(a.shape(), std::move(out), "mul", {a, b},
                     [n, m, a, b](const TensorImpl& o, Node& nd) {
                       const auto ad = a.data(), bd = b.data();
                       if (double* ga = nd.grad_of(0))
                         for (std::size_t i = 0; i < n; ++i) ga[i] += o.grad[i] * bd[i % m];
                       if (double* gb = nd.grad_of(1))
                         for (std::size_t i = 0; i < n; ++i) gb[i % m] += o.grad[i] * ad[i];
                     });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  return make_result(a.shape(), std::move(out), "scale", {a}, [s](const TensorImpl& o, Node& nd) {
    if (double* ga = nd.grad_of(0))
      for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += s * o.grad[i];
  });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += s;
  return make_result(a.shape(), std::move(out), "add_scalar", {a}, [](const TensorImpl& o, Node& nd) {
    if (double* ga = nd.grad_of(0))
      for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Unary elementwise functions.

enum class Unary { kSigmoid, kTanh, kRelu, kExp, kLog, kNeg, kSquare };

inline Tensor apply_unary(const Tensor& x, Unary fn) {
  const std::size_t n = x.numel();
  const auto xd = x.data();
  std::vector<double> y(n);
  switch (fn) {
    case Unary::kSigmoid:
      for (std::size_t i = 0; i < n; ++i) y[i] = 1.0 / (1.0 + std::exp(-xd[i]));
      break;
    case Unary::kTanh:
      for (std::size_t i = 0; i < n; ++i) y[i] = std::tanh(xd[i]);
      break;
    case Unary::kRelu:
      for (std::size_t i = 0; i < n; ++i) y[i] = xd[i] > 0.0 ? xd[i] : 0.0;
      break;
    case Unary::kExp:
      for (std::size_t i = 0; i < n; ++i) y[i] = std::exp(xd[i]);
      break;
    case Unary::kLog:
      for (std::size_t i = 0; i < n; ++i) {
        if (!(xd[i] > 0.0)) {
          throw NumericError("log: non-positive input " + std::to_string(xd[i]) + " at index " +
                             std::to_string(i));
        }
        y[i] = std::log(xd[i]);
      }
      break;
    case Unary::kNeg:
      for (std::size_t i = 0; i < n; ++i) y[i] = -xd[i];
      break;
    case Unary::kSquare:
      for (std::size_t i = 0; i < n; ++i) y[i] = xd[i] * xd[i];
      break;
  }
  return make_result(x.shape(), std::move(y), "unary", {x}, [fn, x, n](const TensorImpl& o, Node& nd) {
    double* gx = nd.grad_of(0);
    if (!gx) return;
    const auto xd = x.data();
    const auto& yd = o.data;
    const auto& g = o.grad;
    switch (fn) {
      case Unary::kSigmoid:
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * yd[i] * (1.0 - yd[i]);
        break;
      case Unary::kTanh:
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * (1.0 - yd[i] * yd[i]);
        break;
      case Unary::kRelu:
        // Subgradient 0 at exactly 0.
        for (std::size_t i = 0; i < n; ++i) gx[i] += xd[i] > 0.0 ? g[i] : 0.0;
        break;
      case Unary::kExp:
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * yd[i];
        break;
      case Unary::kLog:
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] / xd[i];
        break;
      case Unary::kNeg:
        for (std::size_t i = 0; i < n; ++i) gx[i] -= g[i];
        break;
      case Unary::kSquare:
        for (std::size_t i = 0; i < n; ++i) gx[i] += 2.0 * g[i] * xd[i];
        break;
    }
  });
}

inline Tensor sigmoid(const Tensor& x) { return apply_unary(x, Unary::kSigmoid); }
inline Tensor tanh(const Tensor& x) { return apply_unary(x, Unary::kTanh); }
inline Tensor relu(const Tensor& x) { return apply_unary(x, Unary::kRelu); }
inline Tensor exp(const Tensor& x) { return apply_unary(x, Unary::kExp); }
inline Tensor log(const Tensor& x) { return apply_unary(x, Unary::kLog); }
inline Tensor neg(const Tensor& x) { return apply_unary(x, Unary::kNeg); }
inline Tensor square(const Tensor& x) { return apply_unary(x, Unary::kSquare); }

// ---------------------------------------------------------------------------
// Reductions.

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  const std::size_t n = x.numel();
  return make_result({1}, {s}, "sum", {x}, [n](const TensorImpl& o, Node& nd) {
    if (double* gx = nd.grad_of(0))
      for (std::size_t i = 0; i < n; ++i) gx[i] += o.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

/// Sums over the last axis: [.., n] -> [..] (a rank-1 input gives shape [1]).
inline Tensor sum_last(const Tensor& x) {
  const std::size_t n = x.dim(-1);
  const std::size_t rows = x.numel() / n;
  Shape s(x.shape().begin(), x.shape().end() - 1);
  if (s.empty()) s = {1};
  std::vector<double> out(rows, 0.0);
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r] += xd[r * n + j];
  return make_result(std::move(s), std::move(out), "sum_last", {x}, [rows, n](const TensorImpl& o, Node& nd) {
    if (double* gx = nd.grad_of(0))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += o.grad[r];
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation.

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), "reshape", {x}, [](const TensorImpl& o, Node& nd) {
    if (double* gx = nd.grad_of(0))
      for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i];
  });
}

/// out.shape[i] = x.shape[axes[i]].
inline Tensor permute(const Tensor& x, std::vector<std::size_t> axes) {
  const std::size_t nd_ = x.ndim();
  if (axes.size() != nd_) throw ShapeError("permute: axis count mismatch for " + shape_str(x.shape()));
  std::vector<bool> used(nd_, false);
  for (auto a : axes) {
    if (a >= nd_ || used[a]) throw ShapeError("permute: invalid axes");
    used[a] = true;
  }
  const auto& in_shape = x.shape();
  std::vector<std::size_t> in_stride(nd_, 1);
  for (std::size_t i = nd_; i-- > 1;) in_stride[i - 1] = in_stride[i] * in_shape[i];
  Shape out_shape(nd_);
  std::vector<std::size_t> src_stride(nd_);
  for (std::size_t i = 0; i < nd_; ++i) {
    out_shape[i] = in_shape[axes[i]];
    src_stride[i] = in_stride[axes[i]];
  }
  // Gather map: out flat index -> in flat index.
  const std::size_t n = x.numel();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(nd_, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < n; ++i) {
    src[i] = offset;
    for (std::size_t d = nd_; d-- > 0;) {
      ++idx[d];
      offset += src_stride[d];
      if (idx[d] < out_shape[d]) break;
      offset -= src_stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  std::vector<double> out(n);
  const auto xd = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = xd[src[i]];
  return make_result(std::move(out_shape), std::move(out), "permute", {x},
                     [src = std::move(src)](const TensorImpl& o, Node& nd) {
                       if (double* gx = nd.grad_of(0))
                         for (std::size_t i = 0; i < src.size(); ++i) gx[src[i]] += o.grad[i];
                     });
}

inline Tensor transpose_last(const Tensor& x) {
  std::vector<std::size_t> axes(x.ndim());
  std::iota(axes.begin(), axes.end(), 0);
  if (axes.size() < 2) throw ShapeError("transpose_last needs rank >= 2");
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(x, std::move(axes));
}

/// Contiguous sub-range [start, start+len) along one axis.
inline Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t len) {
  const std::size_t ax = detail_ops::norm_axis(axis, x.ndim());
  const auto& s = x.shape();
  if (len == 0 || start + len > s[ax]) {
    throw ShapeError("slice [" + std::to_string(start) + ", +" + std::to_string(len) +
                     ") out of range for axis of size " + std::to_string(s[ax]));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t full = s[ax];
  Shape os = s;
  os[ax] = len;
  std::vector<double> out(outer * len * inner);
  const auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>((o * full + start) * inner), len * inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * len * inner));
  return make_result(std::move(os), std::move(out), "slice", {x},
                     [outer, inner, full, start, len](const TensorImpl& ot, Node& nd) {
                       double* gx = nd.grad_of(0);
                       if (!gx) return;
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t i = 0; i < len * inner; ++i)
                           gx[(o * full + start) * inner + i] += ot.grad[o * len * inner + i];
                     });
}

inline Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat of nothing");
  const std::size_t ax = detail_ops::norm_axis(axis, xs[0].ndim());
  Shape os = xs[0].shape();
  std::size_t total = 0;
  for (const auto& t : xs) {
    Shape a = t.shape(), b = xs[0].shape();
    if (a.size() != b.size()) throw ShapeError("concat: rank mismatch");
    a[ax] = b[ax] = 0;
    if (a != b) throw ShapeError("concat: shapes " + shape_str(t.shape()) + " and " + shape_str(xs[0].shape()));
    total += t.shape()[ax];
  }
  os[ax] = total;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= os[i];
  for (std::size_t i = ax + 1; i < os.size(); ++i) inner *= os[i];
  std::vector<double> out(numel(os));
  std::vector<std::size_t> widths;
  std::size_t off = 0;
  for (const auto& t : xs) {
    const std::size_t w = t.shape()[ax] * inner;
    widths.push_back(w);
    const auto td = t.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(o * w), w,
                  out.begin() + static_cast<std::ptrdiff_t>(o * total * inner + off));
    off += w;
  }
  const std::size_t row = total * inner;
  return make_result(std::move(os), std::move(out), "concat", xs,
                     [outer, row, widths](const TensorImpl& ot, Node& nd) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < widths.size(); ++k) {
                         if (double* g = nd.grad_of(k))
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t i = 0; i < widths[k]; ++i)
                               g[o * widths[k] + i] += ot.grad[o * row + off + i];
                         off += widths[k];
                       }
                     });
}

// ---------------------------------------------------------------------------
// Matrix product over the last two axes. `b` is either a matrix [k,n] shared
// by every batch entry of `a`, or carries the same batch dimensions as `a`.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() < 2 || b.ndim() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(-2), k = a.dim(-1), kb = b.dim(-2), n = b.dim(-1);
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  const bool shared_b = b_batch.empty();
  if (k != kb || (!shared_b && a_batch != b_batch)) {
    throw ShapeError("matmul: dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t batch = numel(a_batch);
  Shape os = a_batch;
  os.push_back(m);
  os.push_back(n);
  std::vector<double> out(batch * m * n, 0.0);
  if (shared_b) {
    detail_ops::gemm_nn(batch * m, k, n, a.data().data(), b.data().data(), out.data());
  } else {
    for (std::size_t t = 0; t < batch; ++t)
      detail_ops::gemm_nn(m, k, n, a.data().data() + t * m * k, b.data().data() + t * k * n,
                          out.data() + t * m * n);
  }
  return make_result(std::move(os), std::move(out), "matmul", {a, b},
                     [a, b, batch, m, k, n, shared_b](const TensorImpl& o, Node& nd) {
                       const double* g = o.grad.data();
                       if (double* ga = nd.grad_of(0)) {
                         if (shared_b) {
                           detail_ops::gemm_nt(batch * m, n, k, g, b.data().data(), ga);
                         } else {
                           for (std::size_t t = 0; t < batch; ++t)
                             detail_ops::gemm_nt(m, n, k, g + t * m * n, b.data().data() + t * k * n,
                                                 ga + t * m * k);
                         }
                       }
                       if (double* gb = nd.grad_of(1)) {
                         if (shared_b) {
                           detail_ops::gemm_tn(batch * m, k, n, a.data().data(), g, gb);
                         } else {
                           for (std::size_t t = 0; t < batch; ++t)
                             detail_ops::gemm_tn(m, k, n, a.data().data() + t * m * k, g + t * m * n,
                                                 gb + t * k * n);
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Normalization.

/// Normalizes each vector along the last axis to zero mean and unit variance
/// (biased estimator, eps inside the square root), then applies gamma/beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  const std::size_t n = x.dim(-1);
  if (gamma.shape() != Shape{n} || beta.shape() != Shape{n}) {
    throw ShapeError("layer_norm: feature size " + std::to_string(n) + " vs gamma " +
                     shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
  }
  const std::size_t rows = x.numel() / n;
  std::vector<double> y(x.numel()), xhat(x.numel()), inv_std(rows);
  const auto xd = x.data(), gd = gamma.data(), bd = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xd.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (xr[j] - mu) * inv;
      xhat[r * n + j] = h;
      y[r * n + j] = gd[j] * h + bd[j];
    }
  }
  return make_result(x.shape(), std::move(y), "layer_norm", {x, gamma, beta},
                     [rows, n, gamma, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                         const TensorImpl& o, Node& nd) {
                       const auto gd = gamma.data();
                       double* gx = nd.grad_of(0);
                       double* gg = nd.grad_of(1);
                       double* gbeta = nd.grad_of(2);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* dy = o.grad.data() + r * n;
                         const double* h = xhat.data() + r * n;
                         if (gg)
                           for (std::size_t j = 0; j < n; ++j) gg[j] += dy[j] * h[j];
                         if (gbeta)
                           for (std::size_t j = 0; j < n; ++j) gbeta[j] += dy[j];
                         if (gx) {
                           double m1 = 0.0, m2 = 0.0;
                           for (std::size_t j = 0; j < n; ++j) {
                             const double dh = dy[j] * gd[j];
                             m1 += dh;
                             m2 += dh * h[j];
                           }
                           m1 /= static_cast<double>(n);
                           m2 /= static_cast<double>(n);
                           for (std::size_t j = 0; j < n; ++j)
                             gx[r * n + j] += inv_std[r] * (dy[j] * gd[j] - m1 - h[j] * m2);
                         }
                       }
                     });
}

/// Softmax along `axis`, stabilized by subtracting the per-slice maximum.
inline Tensor softmax(const Tensor& x, int axis = -1) {
  const std::size_t ax = detail_ops::norm_axis(axis, x.ndim());
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[ax];
  std::vector<double> y(x.numel());
  const auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xd[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(xd[base + j * inner] - mx);
        y[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < len; ++j) y[base + j * inner] /= z;
    }
  }
  return make_result(s, std::move(y), "softmax", {x}, [outer, inner, len](const TensorImpl& o, Node& nd) {
    double* gx = nd.grad_of(0);
    if (!gx) return;
    for (std::size_t oo = 0; oo < outer; ++oo) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = oo * len * inner + i;
        double dot = 0.0;
        for (std::size_t j = 0; j < len; ++j) dot += o.grad[base + j * inner] * o.data[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t p = base + j * inner;
          gx[p] += o.data[p] * (o.grad[p] - dot);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// 1-D convolutions over the last axis of [batch, channels, time].

inline std::size_t conv1d_output_length(std::size_t t, std::size_t k, std::size_t stride,
                                        std::size_t padding) {
  if (stride == 0) throw ConfigError("conv1d: stride must be positive");
  if (t + 2 * padding < k) {
    throw ShapeError("conv1d: kernel " + std::to_string(k) + " larger than padded input " +
                     std::to_string(t + 2 * padding));
  }
  return (t + 2 * padding - k) / stride + 1;
}

/// x: [B, Cin, T], kernel: [Cout, Cin, k], bias: [Cout] or undefined.
inline Tensor conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride,
                     std::size_t padding) {
  if (x.ndim() != 3 || kernel.ndim() != 3 || kernel.dim(1) != x.dim(1)) {
    throw ShapeError("conv1d: input " + shape_str(x.shape()) + " vs kernel " + shape_str(kernel.shape()));
  }
  const std::size_t B = x.dim(0), Cin = x.dim(1), T = x.dim(2);
  const std::size_t Cout = kernel.dim(0), K = kernel.dim(2);
  const std::size_t To = conv1d_output_length(T, K, stride, padding);
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{Cout}) throw ShapeError("conv1d: bias shape " + shape_str(bias.shape()));
  std::vector<double> y(B * Cout * To, 0.0);
  const auto xd = x.data(), wd = kernel.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < Cout; ++o) {
      double* yr = y.data() + (b * Cout + o) * To;
      if (has_bias)
        for (std::size_t t = 0; t < To; ++t) yr[t] = bias[o];
      for (std::size_t c = 0; c < Cin; ++c) {
        const double* xr = xd.data() + (b * Cin + c) * T;
        const double* wr = wd.data() + (o * Cin + c) * K;
        for (std::size_t t = 0; t < To; ++t)
          for (std::size_t j = 0; j < K; ++j) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + j) -
                                       static_cast<std::ptrdiff_t>(padding);
            if (src >= 0 && src < static_cast<std::ptrdiff_t>(T)) yr[t] += wr[j] * xr[src];
          }
      }
    }
  std::vector<Tensor> inputs{x, kernel};
  if (has_bias) inputs.push_back(bias);
  return make_result({B, Cout, To}, std::move(y), "conv1d", inputs,
                     [=](const TensorImpl& o, Node& nd) {
                       const auto xd = x.data(), wd = kernel.data();
                       double* gx = nd.grad_of(0);
                       double* gw = nd.grad_of(1);
                       double* gbias = has_bias ? nd.grad_of(2) : nullptr;
                       for (std::size_t b = 0; b < B; ++b)
                         for (std::size_t oc = 0; oc < Cout; ++oc) {
                           const double* g = o.grad.data() + (b * Cout + oc) * To;
                           if (gbias)
                             for (std::size_t t = 0; t < To; ++t) gbias[oc] += g[t];
                           for (std::size_t c = 0; c < Cin; ++c) {
                             const double* xr = xd.data() + (b * Cin + c) * T;
                             const double* wr = wd.data() + (oc * Cin + c) * K;
                             for (std::size_t t = 0; t < To; ++t)
                               for (std::size_t j = 0; j < K; ++j) {
                                 const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + j) -
                                                            static_cast<std::ptrdiff_t>(padding);
                                 if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
                                 if (gx) gx[(b * Cin + c) * T + static_cast<std::size_t>(src)] += g[t] * wr[j];
                                 if (gw) gw[(oc * Cin + c) * K + j] += g[t] * xr[src];
                               }
                           }
                         }
                     });
}

/// Output length of the transposed convolution for the given output padding.
inline std::size_t transposed_conv1d_output_length(std::size_t t_in, std::size_t k, std::size_t stride,
                                                   std::size_t padding, std::size_t output_padding) {
  if (stride == 0) throw ConfigError("transposed_conv1d: stride must be positive");
  if (output_padding >= stride && output_padding > 0) {
    throw ConfigError("transposed_conv1d: output_padding must be smaller than stride");
  }
  const std::ptrdiff_t len = static_cast<std::ptrdiff_t>((t_in - 1) * stride + k + output_padding) -
                             2 * static_cast<std::ptrdiff_t>(padding);
  if (len <= 0) throw ConfigError("transposed_conv1d: unreachable output length");
  return static_cast<std::size_t>(len);
}

/// Output padding that makes the transposed convolution produce exactly
/// `target` frames from `t_in`, or a ConfigError when that is impossible.
inline std::size_t output_padding_for(std::size_t t_in, std::size_t target, std::size_t k,
                                      std::size_t stride, std::size_t padding) {
  const std::ptrdiff_t base = static_cast<std::ptrdiff_t>((t_in - 1) * stride + k) -
                              2 * static_cast<std::ptrdiff_t>(padding);
  const std::ptrdiff_t op = static_cast<std::ptrdiff_t>(target) - base;
  if (op < 0 || (op > 0 && op >= static_cast<std::ptrdiff_t>(stride))) {
    throw ConfigError("transposed_conv1d: cannot reach length " + std::to_string(target) + " from " +
                      std::to_string(t_in) + " with stride " + std::to_string(stride));
  }
  return static_cast<std::size_t>(op);
}

/// Adjoint of conv1d. x: [B, Cin, T'], kernel: [Cin, Cout, k], bias: [Cout]
/// or undefined.
inline Tensor transposed_conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
                                std::size_t stride, std::size_t padding, std::size_t output_padding) {
  if (x.ndim() != 3 || kernel.ndim() != 3 || kernel.dim(0) != x.dim(1)) {
    throw ShapeError("transposed_conv1d: input " + shape_str(x.shape()) + " vs kernel " +
                     shape_str(kernel.shape()));
  }
  const std::size_t B = x.dim(0), Cin = x.dim(1), Ti = x.dim(2);
  const std::size_t Cout = kernel.dim(1), K = kernel.dim(2);
  const std::size_t To = transposed_conv1d_output_length(Ti, K, stride, padding, output_padding);
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{Cout}) {
    throw ShapeError("transposed_conv1d: bias shape " + shape_str(bias.shape()));
  }
  std::vector<double> y(B * Cout * To, 0.0);
  const auto xd = x.data(), wd = kernel.data();
  for (std::size_t b = 0; b < B; ++b) {
    if (has_bias)
      for (std::size_t o = 0; o < Cout; ++o)
        for (std::size_t t = 0; t < To; ++t) y[(b * Cout + o) * To + t] = bias[o];
    for (std::size_t c = 0; c < Cin; ++c) {
      const double* xr = xd.data() + (b * Cin + c) * Ti;
      for (std::size_t o = 0; o < Cout; ++o) {
        const double* wr = wd.data() + (c * Cout + o) * K;
        double* yr = y.data() + (b * Cout + o) * To;
        for (std::size_t t = 0; t < Ti; ++t)
          for (std::size_t j = 0; j < K; ++j) {
            const std::ptrdiff_t dst = static_cast<std::ptrdiff_t>(t * stride + j) -
                                       static_cast<std::ptrdiff_t>(padding);
            if (dst >= 0 && dst < static_cast<std::ptrdiff_t>(To)) yr[dst] += xr[t] * wr[j];
          }
      }
    }
  }
  std::vector<Tensor> inputs{x, kernel};
  if (has_bias) inputs.push_back(bias);
  return make_result({B, Cout, To}, std::move(y), "transposed_conv1d", inputs,
                     [=](const TensorImpl& o, Node& nd) {
                       const auto xd = x.data(), wd = kernel.data();
                       double* gx = nd.grad_of(0);
                       double* gw = nd.grad_of(1);
                       double* gbias = has_bias ? nd.grad_of(2) : nullptr;
                       for (std::size_t b = 0; b < B; ++b) {
                         if (gbias)
                           for (std::size_t oc = 0; oc < Cout; ++oc)
                             for (std::size_t t = 0; t < To; ++t) gbias[oc] += o.grad[(b * Cout + oc) * To + t];
                         for (std::size_t c = 0; c < Cin; ++c) {
                           const double* xr = xd.data() + (b * Cin + c) * Ti;
                           for (std::size_t oc = 0; oc < Cout; ++oc) {
                             const double* wr = wd.data() + (c * Cout + oc) * K;
                             const double* g = o.grad.data() + (b * Cout + oc) * To;
                             for (std::size_t t = 0; t < Ti; ++t)
                               for (std::size_t j = 0; j < K; ++j) {
                                 const std::ptrdiff_t dst = static_cast<std::ptrdiff_t>(t * stride + j) -
                                                            static_cast<std::ptrdiff_t>(padding);
                                 if (dst < 0 || dst >= static_cast<std::ptrdiff_t>(To)) continue;
                                 if (gx) gx[(b * Cin + c) * Ti + t] += g[dst] * wr[j];
                                 if (gw) gw[(c * Cout + oc) * K + j] += g[dst] * xr[t];
                               }
                           }
                         }
                       }
                     });
}

}  // namespace css::ops
