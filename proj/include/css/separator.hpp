#pragma once

// The separation pipeline: segmentation of a recording into overlapping
// windows, the dual-path separator and its window-independent baselines,
// the boosted down/up-sampling variant, and similarity-based stitching.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "css/dsp.hpp"
#include "css/error.hpp"
#include "css/layers.hpp"
#include "css/metrics.hpp"
#include "css/ops.hpp"
#include "css/tensor.hpp"

namespace css {

enum class Arch { kBlstmBaseline, kDpBlstm, kTransformerBaseline, kDpTransformer, kDpTransformerBoosted };

inline const char* arch_name(Arch a) {
  switch (a) {
    case Arch::kBlstmBaseline: return "blstm-baseline";
    case Arch::kDpBlstm: return "dp-blstm";
    case Arch::kTransformerBaseline: return "transformer-baseline";
    case Arch::kDpTransformer: return "dp-transformer";
    case Arch::kDpTransformerBoosted: return "dp-transformer-boosted";
  }
  return "?";
}

inline Arch parse_arch(const std::string& s) {
  for (Arch a : {Arch::kBlstmBaseline, Arch::kDpBlstm, Arch::kTransformerBaseline, Arch::kDpTransformer,
                 Arch::kDpTransformerBoosted}) {
    if (s == arch_name(a)) return a;
  }
  throw ConfigError("unknown architecture '" + s + "'");
}

inline bool is_transformer(Arch a) {
  return a == Arch::kTransformerBaseline || a == Arch::kDpTransformer || a == Arch::kDpTransformerBoosted;
}
inline bool is_dual_path(Arch a) { return a != Arch::kBlstmBaseline && a != Arch::kTransformerBaseline; }

struct SeparatorConfig {
  Arch arch = Arch::kDpTransformer;
  std::size_t window = 150;      // K frames
  std::size_t hop = 0;           // P frames; 0 means K/2
  std::size_t bins = 257;        // F
  std::size_t feature_dim = 256; // N
  int repeats = -1;              // R; negative picks 2 for RNN and 5 for transformer models
  std::size_t rnn_hidden = 512;  // per direction
  std::size_t online_hidden = 512;
  std::size_t heads = 4;
  std::size_t ff_dim = 1024;
  bool online = false;
  std::size_t lambda = 2;
  std::size_t conv_kernel = 3;
  bool stitch_on_magnitudes = false;

  static constexpr std::size_t kSources = 2;

  std::size_t hop_frames() const { return hop ? hop : window / 2; }
  std::size_t num_repeats() const {
    return repeats >= 0 ? static_cast<std::size_t>(repeats) : (is_transformer(arch) ? 5 : 2);
  }
  /// Number of sequence layers; baselines stack as many as the dual-path model.
  std::size_t num_layers() const { return 2 * num_repeats(); }

  void validate() const {
    if (window == 0) throw ConfigError("window must be positive");
    if (hop_frames() == 0 || hop_frames() > window) throw ConfigError("hop must be in (0, window]");
    if (bins < 2 || feature_dim == 0) throw ConfigError("bins and feature_dim must be positive");
    if (is_transformer(arch)) {
      if (heads == 0 || feature_dim % heads != 0) throw ConfigError("feature_dim must be divisible by heads");
      if (ff_dim == 0) throw ConfigError("ff_dim must be positive");
    } else if (rnn_hidden == 0) {
      throw ConfigError("rnn_hidden must be positive");
    }
    if (online && arch != Arch::kDpBlstm) {
      throw ConfigError("online mode needs a recurrent global layer (arch dp-blstm)");
    }
    if (online && online_hidden == 0) throw ConfigError("online_hidden must be positive");
    if (arch == Arch::kDpTransformerBoosted) {
      if (num_repeats() < 3) throw ConfigError("boosted model needs at least 3 DP blocks");
      if (lambda == 0) throw ConfigError("lambda must be positive");
      if (conv_kernel == 0 || conv_kernel % 2 == 0) throw ConfigError("conv_kernel must be odd");
    }
  }

  /// Frames per window seen by the inner blocks of the boosted model.
  std::size_t inner_window() const {
    return arch == Arch::kDpTransformerBoosted ? (window + lambda - 1) / lambda : window;
  }
};

// ---------------------------------------------------------------------------
// Segmentation

struct WindowedFeature {
  Tensor data;  // [B, K, D]
  std::size_t window = 0, hop = 0, frames = 0, pad = 0;

  std::size_t count() const { return data.dim(0); }
  std::size_t start(std::size_t b) const { return b * hop; }
  bool is_padded(std::size_t b, std::size_t k) const { return start(b) + k >= frames; }
  bool window_has_padding(std::size_t b) const { return start(b) + window > frames; }
};

inline std::size_t window_count(std::size_t frames, std::size_t K, std::size_t P) {
  return frames > K ? (frames - K + P - 1) / P + 1 : 1;
}

/// Splits x: [L, D] into B overlapping windows [B, K, D], zero-padding the
/// tail so the last window is full.
inline WindowedFeature segment(const Tensor& x, std::size_t K, std::size_t P) {
  if (K == 0 || P == 0) throw ConfigError("segment: window and hop must be positive");
  if (P > K) throw ConfigError("segment: hop " + std::to_string(P) + " exceeds window " + std::to_string(K));
  if (x.ndim() != 2) throw ShapeError("segment: expected [L, D], got " + shape_str(x.shape()));
  const std::size_t L = x.dim(0), D = x.dim(1), B = window_count(L, K, P);
  WindowedFeature w;
  w.window = K;
  w.hop = P;
  w.frames = L;
  w.pad = (B - 1) * P + K - L;
  std::vector<double> out(B * K * D, 0.0);
  const auto xd = x.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < K && b * P + k < L; ++k)
      std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>((b * P + k) * D), D, out.begin() + static_cast<std::ptrdiff_t>((b * K + k) * D));
  w.data = detail::make_result({B, K, D}, std::move(out), "segment", {x},
                               [B, K, D, L, P](const detail::TensorImpl& o, detail::Node& nd) {
                                 double* g = nd.grad_of(0);
                                 if (!g) return;
                                 for (std::size_t b = 0; b < B; ++b)
                                   for (std::size_t k = 0; k < K && b * P + k < L; ++k)
                                     for (std::size_t d = 0; d < D; ++d) g[(b * P + k) * D + d] += o.grad[(b * K + k) * D + d];
                               });
  return w;
}

// ---------------------------------------------------------------------------
// Separator

enum class SeqKind { kBlstm, kLstm, kTransformer };

/// One residual sequence sublayer: x + LN(FC(f(x))). Transformer layers
/// already produce N-dimensional output and skip the FC.
struct Sublayer {
  SeqKind kind = SeqKind::kBlstm;
  Blstm blstm;
  LstmParams lstm;
  TransformerEncoderParams transformer;
  std::optional<Linear> fc;
  LayerNorm ln;

  Sublayer() = default;
  Sublayer(ParamStore& ps, const std::string& name, SeqKind k, const SeparatorConfig& c, Rng& rng) : kind(k) {
    const std::size_t N = c.feature_dim;
    switch (k) {
      case SeqKind::kBlstm:
        blstm = Blstm(ps, name + ".blstm", N, c.rnn_hidden, rng);
        fc.emplace(ps, name + ".fc", 2 * c.rnn_hidden, N, rng);
        break;
      case SeqKind::kLstm:
        lstm = LstmParams(ps, name + ".lstm", N, c.online_hidden, rng);
        fc.emplace(ps, name + ".fc", c.online_hidden, N, rng);
        break;
      case SeqKind::kTransformer:
        transformer = TransformerEncoderParams(ps, name + ".transformer", N, c.heads, c.ff_dim, rng);
        break;
    }
    ln = LayerNorm(ps, name + ".ln", N);
  }

  /// x: [S, T, N] -> [S, T, N].
  Tensor operator()(const Tensor& x) const {
    Tensor h;
    switch (kind) {
      case SeqKind::kBlstm: h = blstm_forward(x, blstm.fwd, blstm.bwd); break;
      case SeqKind::kLstm: h = lstm_forward(x, lstm, Direction::kForward); break;
      case SeqKind::kTransformer: h = transformer_encoder_forward(x, transformer, false); break;
    }
    if (fc) h = (*fc)(h);
    return ops::add(x, ln(h));
  }
};

struct DpBlock {
  Sublayer local, global;
};

/// Local pass over each window (sequence length K, batch B), then a global
/// pass over each frame index (sequence length B, batch K).
inline Tensor dp_block_forward(const Tensor& x, const DpBlock& block) {
  if (x.ndim() != 3) throw ShapeError("dp_block_forward: expected [B, K, N], got " + shape_str(x.shape()));
  Tensor l = block.local(x);
  Tensor g = block.global(ops::permute(l, {1, 0, 2}));
  return ops::permute(g, {1, 0, 2});
}

struct WindowOutputs {
  Tensor mask1, mask2;  // [B, K, F]
  Tensor mag1, mag2;    // masks applied to the window magnitudes
};

class Separator {
 public:
  Separator(const SeparatorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const std::size_t N = cfg_.feature_dim, F = cfg_.bins, R = cfg_.num_repeats();
    embed_ = Linear(ps_, "embed", F, N, rng);
    const SeqKind local = is_transformer(cfg_.arch) ? SeqKind::kTransformer : SeqKind::kBlstm;
    if (is_dual_path(cfg_.arch)) {
      const SeqKind global = cfg_.online ? SeqKind::kLstm : local;
      for (std::size_t r = 0; r < R; ++r) {
        const std::string name = "block" + std::to_string(r);
        DpBlock b;
        b.local = Sublayer(ps_, name + ".local", local, cfg_, rng);
        b.global = Sublayer(ps_, name + ".global", global, cfg_, rng);
        blocks_.push_back(std::move(b));
        if (cfg_.arch == Arch::kDpTransformerBoosted && r == 0) {
          down_ = Conv1dLayer(ps_, "down", N, N, cfg_.conv_kernel, cfg_.lambda, cfg_.conv_kernel / 2, rng);
        }
      }
      if (cfg_.arch == Arch::kDpTransformerBoosted) {
        up_ = TransposedConv1dLayer(ps_, "up", N, N, cfg_.conv_kernel, cfg_.lambda, cfg_.conv_kernel / 2, rng);
      }
    } else {
      for (std::size_t i = 0; i < cfg_.num_layers(); ++i) {
        layers_.push_back(Sublayer(ps_, "layer" + std::to_string(i), local, cfg_, rng));
      }
    }
    head_ = Linear(ps_, "head", N, SeparatorConfig::kSources * F, rng);
    // Masks start near 1 so an untrained model passes the mixture through.
    for (double& w : head_.weight.mutable_data()) w *= 0.1;
    std::fill(head_.bias.mutable_data().begin(), head_.bias.mutable_data().end(), 1.0);
  }

  Separator(const Separator&) = delete;
  Separator& operator=(const Separator&) = delete;
  Separator(Separator&&) = default;

  const SeparatorConfig& config() const { return cfg_; }
  ParamStore& params() { return ps_; }
  const ParamStore& params() const { return ps_; }
  const std::vector<DpBlock>& blocks() const { return blocks_; }
  std::vector<DpBlock>& blocks() { return blocks_; }
  std::vector<Sublayer>& layers() { return layers_; }
  Conv1dLayer& down() { return down_; }
  TransposedConv1dLayer& up() { return up_; }

  /// Sequence model body on bottleneck features [B, K, N].
  Tensor body(const Tensor& x) const {
    if (!is_dual_path(cfg_.arch)) {
      Tensor h = x;
      for (const auto& l : layers_) h = l(h);
      return h;
    }
    const std::size_t K = x.dim(1), R = blocks_.size();
    const bool boosted = cfg_.arch == Arch::kDpTransformerBoosted;
    Tensor h = x;
    for (std::size_t r = 0; r < R; ++r) {
      if (boosted && r == R - 1) h = up_(h, K);
      h = dp_block_forward(h, blocks_[r]);
      if (boosted && r == 0) h = down_(h);
    }
    return h;
  }

  /// Separates windowed magnitudes [B, K, F] of one recording; the global
  /// pass runs across the B windows.
  WindowOutputs forward(const Tensor& mag) const {
    if (mag.ndim() != 3 || mag.dim(2) != cfg_.bins) {
      throw ShapeError("separator: expected [B, K, " + std::to_string(cfg_.bins) + "] magnitudes, got " +
                       shape_str(mag.shape()));
    }
    const std::size_t B = mag.dim(0), K = mag.dim(1), F = cfg_.bins;
    std::vector<double> feat(mag.numel());
    const auto md = mag.data();
    for (std::size_t i = 0; i < feat.size(); ++i) {
      if (md[i] < 0.0) throw ContractError("separator: negative magnitude");
      feat[i] = std::log1p(md[i]);
    }
    Tensor h = body(embed_(Tensor::from(mag.shape(), std::move(feat))));
    Tensor masks = ops::relu(head_(h));  // [B, K, 2F]
    masks = ops::reshape(masks, {B, K, SeparatorConfig::kSources, F});
    WindowOutputs out;
    out.mask1 = ops::reshape(ops::slice(masks, 2, 0, 1), {B, K, F});
    out.mask2 = ops::reshape(ops::slice(masks, 2, 1, 1), {B, K, F});
    const Tensor m = mag.detach();
    out.mag1 = ops::mul(out.mask1, m);
    out.mag2 = ops::mul(out.mask2, m);
    return out;
  }

 private:
  SeparatorConfig cfg_;
  ParamStore ps_;
  Linear embed_, head_;
  std::vector<DpBlock> blocks_;
  std::vector<Sublayer> layers_;
  Conv1dLayer down_;
  TransposedConv1dLayer up_;
};

// ---------------------------------------------------------------------------
// Windowing of spectrograms

/// Magnitudes and unit phasors of a spectrogram cut into windows.
struct SpectrogramWindows {
  WindowedFeature mag;          // [B, K, F]
  std::vector<Complex> phase;   // B*K*F, 1 on padded frames
};

inline SpectrogramWindows window_spectrogram(const Spectrogram& s, std::size_t K, std::size_t P) {
  const std::size_t F = s.bins();
  SpectrogramWindows w;
  w.mag = segment(Tensor::from({s.frames, F}, s.magnitude()), K, P);
  const auto ph = phasors(s.values);
  const std::size_t B = w.mag.count();
  w.phase.assign(B * K * F, Complex(1.0, 0.0));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < K && b * P + k < s.frames; ++k)
      std::copy_n(ph.begin() + static_cast<std::ptrdiff_t>((b * P + k) * F), F,
                  w.phase.begin() + static_cast<std::ptrdiff_t>((b * K + k) * F));
  return w;
}

/// Plain per-window masks for both outputs, B*K*F each.
struct WindowMasks {
  std::size_t windows = 0, window = 0, hop = 0, frames = 0, bins = 0;
  std::vector<double> m1, m2;
};

inline WindowMasks to_window_masks(const WindowOutputs& o, const WindowedFeature& w) {
  WindowMasks m;
  m.windows = w.count();
  m.window = w.window;
  m.hop = w.hop;
  m.frames = w.frames;
  m.bins = o.mask1.dim(2);
  m.m1.assign(o.mask1.data().begin(), o.mask1.data().end());
  m.m2.assign(o.mask2.data().begin(), o.mask2.data().end());
  return m;
}

inline WindowMasks unit_window_masks(std::size_t frames, std::size_t bins, std::size_t K, std::size_t P) {
  WindowMasks m;
  m.windows = window_count(frames, K, P);
  m.window = K;
  m.hop = P;
  m.frames = frames;
  m.bins = bins;
  m.m1.assign(m.windows * K * bins, 1.0);
  m.m2 = m.m1;
  return m;
}

/// Per-window oracle phase-sensitive masks of two references.
inline WindowMasks oracle_window_masks(const Spectrogram& mix, const Spectrogram& ref1, const Spectrogram& ref2,
                                       std::size_t K, std::size_t P) {
  const std::size_t F = mix.bins();
  WindowMasks m;
  m.window = K;
  m.hop = P;
  m.frames = mix.frames;
  m.bins = F;
  const Tensor p1 = psm_target(ref1, mix), p2 = psm_target(ref2, mix);
  const auto w1 = segment(p1, K, P), w2 = segment(p2, K, P);
  m.windows = w1.count();
  m.m1.assign(w1.data.data().begin(), w1.data.data().end());
  m.m2.assign(w2.data.data().begin(), w2.data.data().end());
  return m;
}

// ---------------------------------------------------------------------------
// Stitching

struct StitchedStreams {
  std::size_t frames = 0, bins = 0;
  std::vector<double> mask1, mask2;  // [L, F]
  std::vector<bool> swapped;         // per window, relative to the stream labels
  std::vector<double> sim_identity;  // per adjacent pair
  std::vector<double> sim_swap;
};

namespace detail {
inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return (aa > 0.0 && bb > 0.0) ? ab / std::sqrt(aa * bb) : 0.0;
}
}  // namespace detail

/// Greedy left-to-right alignment of adjacent windows by cosine similarity
/// on the shared frames, then normalized overlap-add of the aligned masks.
/// `weights` (B*K*F, optional) multiplies the masks before the similarity
/// is taken, e.g. window magnitudes to compare masked magnitudes.
inline StitchedStreams stitch(const WindowMasks& wm, const std::vector<double>* weights = nullptr) {
  const std::size_t B = wm.windows, K = wm.window, P = wm.hop, F = wm.bins, L = wm.frames;
  if (P >= K && B > 1) throw ContractError("stitch: windows do not overlap (hop >= window)");
  if (wm.m1.size() != B * K * F || wm.m2.size() != B * K * F) throw ShapeError("stitch: mask storage mismatch");
  if (weights && weights->size() != B * K * F) throw ShapeError("stitch: weight storage mismatch");
  const std::size_t O = K > P ? K - P : 0;

  StitchedStreams out;
  out.frames = L;
  out.bins = F;
  out.swapped.assign(B, false);

  auto region = [&](const std::vector<double>& m, std::size_t b, std::size_t k0) {
    // Shared-region values of window b from local frame k0, padded frames dropped.
    std::vector<double> v;
    v.reserve(O * F);
    for (std::size_t k = k0; k < k0 + O; ++k) {
      if (b * P + k >= L) break;
      for (std::size_t f = 0; f < F; ++f) {
        const std::size_t i = (b * K + k) * F + f;
        v.push_back(weights ? m[i] * (*weights)[i] : m[i]);
      }
    }
    return v;
  };
  for (std::size_t b = 0; b + 1 < B; ++b) {
    const bool prev_sw = out.swapped[b];
    const auto a1 = region(prev_sw ? wm.m2 : wm.m1, b, K - O);
    const auto a2 = region(prev_sw ? wm.m1 : wm.m2, b, K - O);
    auto b1 = region(wm.m1, b + 1, 0);
    auto b2 = region(wm.m2, b + 1, 0);
    b1.resize(a1.size());
    b2.resize(a2.size());
    const double id = detail::cosine(a1, b1) + detail::cosine(a2, b2);
    const double sw = detail::cosine(a1, b2) + detail::cosine(a2, b1);
    out.sim_identity.push_back(id);
    out.sim_swap.push_back(sw);
    out.swapped[b + 1] = sw > id;
  }

  // Trapezoid crossfade weights over the shared frames, normalized per frame.
  std::vector<double> w(K);
  out.mask1.assign(L * F, 0.0);
  out.mask2.assign(L * F, 0.0);
  std::vector<double> norm(L, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t k = 0; k < K; ++k) {
      double wk = 1.0;
      if (b > 0 && k < O) wk = std::min(wk, static_cast<double>(k + 1) / static_cast<double>(O + 1));
      if (b + 1 < B && k >= K - O) wk = std::min(wk, static_cast<double>(K - k) / static_cast<double>(O + 1));
      w[k] = wk;
    }
    const auto& s1 = out.swapped[b] ? wm.m2 : wm.m1;
    const auto& s2 = out.swapped[b] ? wm.m1 : wm.m2;
    for (std::size_t k = 0; k < K && b * P + k < L; ++k) {
      const std::size_t l = b * P + k;
      norm[l] += w[k];
      for (std::size_t f = 0; f < F; ++f) {
        out.mask1[l * F + f] += w[k] * s1[(b * K + k) * F + f];
        out.mask2[l * F + f] += w[k] * s2[(b * K + k) * F + f];
      }
    }
  }
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t f = 0; f < F; ++f) {
      out.mask1[l * F + f] /= norm[l];
      out.mask2[l * F + f] /= norm[l];
    }
  return out;
}

// ---------------------------------------------------------------------------
// End-to-end inference

struct SeparationReport {
  std::vector<bool> swapped;
  std::vector<double> margins;  // |identity - swap| similarity per adjacent pair
  std::size_t windows = 0, frames = 0;
  double seconds_stft = 0.0, seconds_separate = 0.0, seconds_stitch = 0.0, seconds_resynth = 0.0;
};

struct SeparationResult {
  Waveform stream1, stream2;
  StitchedStreams stitched;
  SeparationReport report;
};

enum class MaskSource { kModel, kUnit };

/// Stitches window masks and resynthesizes both streams with the mixture
/// phase.
inline SeparationResult resynthesize_streams(const Spectrogram& mix, const WindowMasks& wm,
                                             const std::vector<double>* weights = nullptr) {
  using clock = std::chrono::steady_clock;
  SeparationResult r;
  auto t0 = clock::now();
  r.stitched = stitch(wm, weights);
  auto t1 = clock::now();
  r.stream1 = masked_resynthesis(mix, Tensor::from({mix.frames, mix.bins()}, r.stitched.mask1));
  r.stream2 = masked_resynthesis(mix, Tensor::from({mix.frames, mix.bins()}, r.stitched.mask2));
  auto t2 = clock::now();
  r.report.swapped = r.stitched.swapped;
  for (std::size_t i = 0; i < r.stitched.sim_identity.size(); ++i)
    r.report.margins.push_back(std::abs(r.stitched.sim_identity[i] - r.stitched.sim_swap[i]));
  r.report.windows = wm.windows;
  r.report.frames = wm.frames;
  r.report.seconds_stitch = std::chrono::duration<double>(t1 - t0).count();
  r.report.seconds_resynth = std::chrono::duration<double>(t2 - t1).count();
  return r;
}

/// stft -> separator -> stitch -> masked resynthesis of both streams.
inline SeparationResult separate_recording(const Waveform& w, const Separator& model,
                                           MaskSource source = MaskSource::kModel, const StftConfig& stft_cfg = {}) {
  using clock = std::chrono::steady_clock;
  const auto& cfg = model.config();
  const auto t0 = clock::now();
  const Spectrogram mix = stft(w, stft_cfg);
  if (mix.bins() != cfg.bins) throw ConfigError("separate_recording: STFT bins do not match the model");
  const auto t1 = clock::now();
  const auto win = window_spectrogram(mix, cfg.window, cfg.hop_frames());
  WindowMasks wm;
  std::vector<double> mags;
  if (source == MaskSource::kUnit) {
    wm = unit_window_masks(mix.frames, mix.bins(), cfg.window, cfg.hop_frames());
  } else {
    NoGradGuard ng;
    wm = to_window_masks(model.forward(win.mag.data), win.mag);
  }
  const auto t2 = clock::now();
  if (cfg.stitch_on_magnitudes) mags.assign(win.mag.data.data().begin(), win.mag.data.data().end());
  auto r = resynthesize_streams(mix, wm, cfg.stitch_on_magnitudes ? &mags : nullptr);
  r.report.seconds_stft = std::chrono::duration<double>(t1 - t0).count();
  r.report.seconds_separate = std::chrono::duration<double>(t2 - t1).count();
  return r;
}

}  // namespace css
