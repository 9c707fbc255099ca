#pragma once

// Sequence-modeling layers: fully connected, layer norm, (B)LSTM,
// multi-head self-attention transformer encoder, and the 1-D convolution
// pair used for resampling. All parameters live in a ParamStore so the
// optimizer and checkpoints see one ordered, named list.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "css/ops.hpp"
#include "css/tensor.hpp"

namespace css {

using Rng = std::mt19937_64;

class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor t) {
    for (const auto& [n, _] : params_) {
      if (n == name) throw ConfigError("duplicate parameter name " + name);
    }
    t.set_requires_grad(true);
    params_.emplace_back(name, t);
    return t;
  }

  Tensor uniform(const std::string& name, Shape shape, double bound, Rng& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = dist(rng);
    return add(name, Tensor::from(std::move(shape), std::move(v)));
  }

  Tensor constant(const std::string& name, Shape shape, double value) {
    return add(name, Tensor::full(std::move(shape), value));
  }

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return params_; }

  Tensor get(const std::string& name) const {
    for (const auto& [n, t] : params_) {
      if (n == name) return t;
    }
    throw ConfigError("no parameter named " + name);
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
};

// ---------------------------------------------------------------------------

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = ps.uniform(name + ".weight", {in, out}, bound, rng);
    bias = ps.uniform(name + ".bias", {out}, bound, rng);
  }

  std::size_t in_dim() const { return weight.dim(0); }
  std::size_t out_dim() const { return weight.dim(1); }

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }

  static Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.dim(-1) != w.dim(0)) {
      throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
    }
    return ops::add(ops::matmul(x, w), b);
  }
};

struct LayerNorm {
  Tensor gamma, beta;
  double eps = 1e-5;

  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& name, std::size_t n) {
    gamma = ps.constant(name + ".gamma", {n}, 1.0);
    beta = ps.constant(name + ".beta", {n}, 0.0);
  }

  Tensor operator()(const Tensor& x) const { return ops::layer_norm(x, gamma, beta, eps); }
};

// ---------------------------------------------------------------------------
// LSTM

enum class Direction { kForward, kBackward };

/// One direction of an LSTM. Gates are stacked in the order input, forget,
/// cell, output; each gate row reads [x_t ; h_{t-1}] plus a bias.
struct LstmParams {
  std::size_t input_dim = 0, hidden_dim = 0;
  Tensor weight;  // [4H, in + H]
  Tensor bias;    // [4H]

  LstmParams() = default;
  LstmParams(ParamStore& ps, const std::string& name, std::size_t in, std::size_t hidden, Rng& rng)
      : input_dim(in), hidden_dim(hidden) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    weight = ps.uniform(name + ".weight", {4 * hidden, in + hidden}, bound, rng);
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> b(4 * hidden);
    for (std::size_t g = 0; g < 4 * hidden; ++g) b[g] = (g >= hidden && g < 2 * hidden) ? 1.0 : dist(rng);
    bias = ps.add(name + ".bias", Tensor::from({4 * hidden}, std::move(b)));
  }
};

/// Runs the recurrence over x: [S, T, in] from a zero state. The backward
/// direction consumes the sequence reversed and writes each output at its
/// original time index.
inline Tensor lstm_forward(const Tensor& x, const LstmParams& p, Direction dir) {
  if (x.ndim() != 3 || x.dim(2) != p.input_dim) {
    throw ShapeError("lstm: input " + shape_str(x.shape()) + " vs input_dim " + std::to_string(p.input_dim));
  }
  const std::size_t S = x.dim(0), T = x.dim(1), I = p.input_dim, H = p.hidden_dim, G = 4 * H, W = I + H;
  const auto xd = x.data(), wd = p.weight.data(), bd = p.bias.data();
  // Per-step caches for backprop.
  std::vector<double> xh(T * S * W), gates(T * S * G), cells(T * S * H), tanh_c(T * S * H);
  std::vector<double> out(S * T * H);
  std::vector<double> h(S * H, 0.0), c(S * H, 0.0), z(S * G);
  for (std::size_t step = 0; step < T; ++step) {
    const std::size_t t = dir == Direction::kForward ? step : T - 1 - step;
    double* xh_s = xh.data() + step * S * W;
    for (std::size_t s = 0; s < S; ++s) {
      std::copy_n(xd.data() + (s * T + t) * I, I, xh_s + s * W);
      std::copy_n(h.data() + s * H, H, xh_s + s * W + I);
    }
    for (std::size_t s = 0; s < S; ++s) std::copy_n(bd.data(), G, z.data() + s * G);
    ops::detail_ops::gemm_nt(S, W, G, xh_s, wd.data(), z.data());
    double* gt = gates.data() + step * S * G;
    for (std::size_t s = 0; s < S; ++s) {
      const double* zs = z.data() + s * G;
      double* gs = gt + s * G;
      for (std::size_t k = 0; k < H; ++k) {
        const double ig = 1.0 / (1.0 + std::exp(-zs[k]));
        const double fg = 1.0 / (1.0 + std::exp(-zs[H + k]));
        const double cg = std::tanh(zs[2 * H + k]);
        const double og = 1.0 / (1.0 + std::exp(-zs[3 * H + k]));
        gs[k] = ig;
        gs[H + k] = fg;
        gs[2 * H + k] = cg;
        gs[3 * H + k] = og;
        const double cn = fg * c[s * H + k] + ig * cg;
        const double tc = std::tanh(cn);
        c[s * H + k] = cn;
        h[s * H + k] = og * tc;
        cells[(step * S + s) * H + k] = cn;
        tanh_c[(step * S + s) * H + k] = tc;
        out[(s * T + t) * H + k] = og * tc;
      }
    }
  }
  return detail::make_result(
      {S, T, H}, std::move(out), "lstm", {x, p.weight, p.bias},
      [=, xh = std::move(xh), gates = std::move(gates), cells = std::move(cells),
       tanh_c = std::move(tanh_c), weight = p.weight](const detail::TensorImpl& o, detail::Node& nd) {
        double* gx = nd.grad_of(0);
        double* gw = nd.grad_of(1);
        double* gb = nd.grad_of(2);
        const auto wd = weight.data();
        std::vector<double> dh_next(S * H, 0.0), dc_next(S * H, 0.0), dz(S * G), dxh(S * W);
        for (std::size_t step = T; step-- > 0;) {
          const std::size_t t = dir == Direction::kForward ? step : T - 1 - step;
          const double* gs_all = gates.data() + step * S * G;
          for (std::size_t s = 0; s < S; ++s) {
            const double* gs = gs_all + s * G;
            for (std::size_t k = 0; k < H; ++k) {
              const std::size_t hk = s * H + k;
              const double dh = o.grad[(s * T + t) * H + k] + dh_next[hk];
              const double ig = gs[k], fg = gs[H + k], cg = gs[2 * H + k], og = gs[3 * H + k];
              const double tc = tanh_c[step * S * H + hk];
              const double c_prev = step > 0 ? cells[(step - 1) * S * H + hk] : 0.0;
              const double dc = dh * og * (1.0 - tc * tc) + dc_next[hk];
              dc_next[hk] = dc * fg;
              dz[s * G + k] = dc * cg * ig * (1.0 - ig);
              dz[s * G + H + k] = dc * c_prev * fg * (1.0 - fg);
              dz[s * G + 2 * H + k] = dc * ig * (1.0 - cg * cg);
              dz[s * G + 3 * H + k] = dh * tc * og * (1.0 - og);
            }
          }
          if (gw) ops::detail_ops::gemm_tn(S, G, W, dz.data(), xh.data() + step * S * W, gw);
          if (gb)
            for (std::size_t s = 0; s < S; ++s)
              for (std::size_t g = 0; g < G; ++g) gb[g] += dz[s * G + g];
          std::fill(dxh.begin(), dxh.end(), 0.0);
          ops::detail_ops::gemm_nn(S, G, W, dz.data(), wd.data(), dxh.data());
          for (std::size_t s = 0; s < S; ++s) {
            if (gx)
              for (std::size_t i = 0; i < I; ++i) gx[(s * T + t) * I + i] += dxh[s * W + i];
            std::copy_n(dxh.data() + s * W + I, H, dh_next.data() + s * H);
          }
        }
      });
}

struct Blstm {
  LstmParams fwd, bwd;

  Blstm() = default;
  Blstm(ParamStore& ps, const std::string& name, std::size_t in, std::size_t hidden, Rng& rng)
      : fwd(ps, name + ".fwd", in, hidden, rng), bwd(ps, name + ".bwd", in, hidden, rng) {}

  std::size_t output_dim() const { return 2 * fwd.hidden_dim; }
};

/// [forward outputs ; backward outputs] along the feature axis.
inline Tensor blstm_forward(const Tensor& x, const LstmParams& fwd, const LstmParams& bwd) {
  if (fwd.hidden_dim != bwd.hidden_dim) {
    throw ShapeError("blstm: hidden sizes differ (" + std::to_string(fwd.hidden_dim) + " vs " +
                     std::to_string(bwd.hidden_dim) + ")");
  }
  return ops::concat({lstm_forward(x, fwd, Direction::kForward), lstm_forward(x, bwd, Direction::kBackward)}, -1);
}

// ---------------------------------------------------------------------------
// Transformer encoder (post-norm, no positional encoding).

struct TransformerEncoderParams {
  std::size_t dim = 0, heads = 0, ff_dim = 0;
  Linear q, k, v, o;
  Linear ff1, ff2;
  LayerNorm norm1, norm2;

  TransformerEncoderParams() = default;
  TransformerEncoderParams(ParamStore& ps, const std::string& name, std::size_t d, std::size_t h,
                           std::size_t ff, Rng& rng)
      : dim(d), heads(h), ff_dim(ff) {
    if (h == 0 || d % h != 0) {
      throw ConfigError("transformer: attention dim " + std::to_string(d) + " not divisible by " +
                        std::to_string(h) + " heads");
    }
    q = Linear(ps, name + ".q", d, d, rng);
    k = Linear(ps, name + ".k", d, d, rng);
    v = Linear(ps, name + ".v", d, d, rng);
    o = Linear(ps, name + ".o", d, d, rng);
    ff1 = Linear(ps, name + ".ff1", d, ff, rng);
    ff2 = Linear(ps, name + ".ff2", ff, d, rng);
    norm1 = LayerNorm(ps, name + ".norm1", d);
    norm2 = LayerNorm(ps, name + ".norm2", d);
  }
};

/// Multi-head attention context (before the output projection) for
/// x: [S, T, d]. When `weights` is non-null it receives the attention
/// probabilities [S*heads, T, T].
inline Tensor attention_context(const Tensor& x, const TransformerEncoderParams& p, bool causal,
                                Tensor* weights = nullptr) {
  if (x.ndim() != 3 || x.dim(2) != p.dim) {
    throw ShapeError("transformer: input " + shape_str(x.shape()) + " vs dim " + std::to_string(p.dim));
  }
  const std::size_t S = x.dim(0), T = x.dim(1), d = p.dim, h = p.heads, dh = d / h;
  auto split = [&](const Tensor& t) {
    return ops::reshape(ops::permute(ops::reshape(t, {S, T, h, dh}), {0, 2, 1, 3}), {S * h, T, dh});
  };
  Tensor q = split(p.q(x));
  Tensor k = split(p.k(x));
  Tensor v = split(p.v(x));
  Tensor scores = ops::scale(ops::matmul(q, ops::transpose_last(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (causal) {
    std::vector<double> mask(T * T, 0.0);
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = i + 1; j < T; ++j) mask[i * T + j] = -1e30;
    scores = ops::add(scores, Tensor::from({T, T}, std::move(mask)));
  }
  Tensor attn = ops::softmax(scores, -1);
  if (weights) *weights = attn;
  Tensor ctx = ops::matmul(attn, v);
  return ops::reshape(ops::permute(ops::reshape(ctx, {S, h, T, dh}), {0, 2, 1, 3}), {S, T, d});
}

inline Tensor transformer_encoder_forward(const Tensor& x, const TransformerEncoderParams& p, bool causal) {
  Tensor a = p.o(attention_context(x, p, causal));
  Tensor x1 = p.norm1(ops::add(x, a));
  Tensor f = p.ff2(ops::relu(p.ff1(x1)));
  return p.norm2(ops::add(x1, f));
}

// ---------------------------------------------------------------------------
// Strided convolution pair along the time axis of [batch, time, channels].

struct Conv1dLayer {
  Tensor kernel;  // [Cout, Cin, k]
  Tensor bias;    // [Cout]
  std::size_t stride = 1, padding = 0;

  Conv1dLayer() = default;
  Conv1dLayer(ParamStore& ps, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
              std::size_t stride_, std::size_t padding_, Rng& rng)
      : stride(stride_), padding(padding_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k));
    kernel = ps.uniform(name + ".kernel", {cout, cin, k}, bound, rng);
    bias = ps.uniform(name + ".bias", {cout}, bound, rng);
  }

  /// x: [B, T, C] -> [B, T', C'].
  Tensor operator()(const Tensor& x) const {
    Tensor y = ops::conv1d(ops::permute(x, {0, 2, 1}), kernel, bias, stride, padding);
    return ops::permute(y, {0, 2, 1});
  }
};

struct TransposedConv1dLayer {
  Tensor kernel;  // [Cin, Cout, k]
  Tensor bias;    // [Cout]
  std::size_t stride = 1, padding = 0;

  TransposedConv1dLayer() = default;
  TransposedConv1dLayer(ParamStore& ps, const std::string& name, std::size_t cin, std::size_t cout,
                        std::size_t k, std::size_t stride_, std::size_t padding_, Rng& rng)
      : stride(stride_), padding(padding_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cout * k));
    kernel = ps.uniform(name + ".kernel", {cin, cout, k}, bound, rng);
    bias = ps.uniform(name + ".bias", {cout}, bound, rng);
  }

  /// x: [B, T', C] -> [B, target_len, C'].
  Tensor operator()(const Tensor& x, std::size_t target_len) const {
    const std::size_t op = ops::output_padding_for(x.dim(1), target_len, kernel.dim(2), stride, padding);
    Tensor y = ops::transposed_conv1d(ops::permute(x, {0, 2, 1}), kernel, bias, stride, padding, op);
    return ops::permute(y, {0, 2, 1});
  }
};

}  // namespace css
