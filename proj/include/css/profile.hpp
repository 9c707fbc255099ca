#pragma once

// Analytic parameter and multiply-accumulate counts for separator configs.
//
// MAC conventions (nonlinearities, norms, softmax, masking ignored):
//   linear       in * out per frame
//   LSTM         4 * (in * h + h * h) per frame per direction
//   attention    4 * T * d^2 (Q, K, V, O projections) + 2 * T^2 * d per sequence
//   feed-forward 2 * T * d * ff per sequence
//   conv         Cin * Cout * k * T_out (transposed: T_in) per window

#include <cstdio>
#include <string>
#include <vector>

#include "css/separator.hpp"

namespace css {

struct Workload {
  std::size_t frames = 3751;  // L: 60 s at 16 kHz with a 256-sample hop
  std::size_t window = 150;
  std::size_t hop = 75;

  std::size_t windows() const { return window_count(frames, window, hop); }
};

struct LayerCost {
  std::string name;
  std::size_t params = 0;
  double macs = 0.0;
};

struct ComputeReport {
  std::string arch;
  Workload workload;
  std::vector<LayerCost> layers;

  std::size_t total_params() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.params;
    return n;
  }
  double total_macs() const {
    double n = 0.0;
    for (const auto& l : layers) n += l.macs;
    return n;
  }

  std::string table() const {
    std::string s;
    char line[160];
    std::snprintf(line, sizeof line, "%s  L=%zu K=%zu P=%zu B=%zu\n", arch.c_str(), workload.frames, workload.window,
                  workload.hop, workload.windows());
    s += line;
    std::snprintf(line, sizeof line, "  %-18s %14s %14s\n", "layer", "params", "GMACs");
    s += line;
    for (const auto& l : layers) {
      std::snprintf(line, sizeof line, "  %-18s %14zu %14.4f\n", l.name.c_str(), l.params, l.macs * 1e-9);
      s += line;
    }
    std::snprintf(line, sizeof line, "  %-18s %14zu %14.4f\n", "total", total_params(), total_macs() * 1e-9);
    s += line;
    std::snprintf(line, sizeof line, "  (%.3f M params, %.3f GMACs; MACs ignore nonlinearities, norms, softmax)\n",
                  total_params() * 1e-6, total_macs() * 1e-9);
    s += line;
    return s;
  }
};

namespace detail::profile {

inline std::size_t linear_params(std::size_t in, std::size_t out) { return in * out + out; }
inline std::size_t lstm_params(std::size_t in, std::size_t h) { return 4 * h * (in + h) + 4 * h; }

inline std::size_t sublayer_params(SeqKind kind, const SeparatorConfig& c) {
  const std::size_t N = c.feature_dim;
  switch (kind) {
    case SeqKind::kBlstm: return 2 * lstm_params(N, c.rnn_hidden) + linear_params(2 * c.rnn_hidden, N) + 2 * N;
    case SeqKind::kLstm: return lstm_params(N, c.online_hidden) + linear_params(c.online_hidden, N) + 2 * N;
    case SeqKind::kTransformer:
      return 4 * linear_params(N, N) + linear_params(N, c.ff_dim) + linear_params(c.ff_dim, N) + 4 * N + 2 * N;
  }
  return 0;
}

/// MACs of one sublayer applied to S sequences of length T.
inline double sublayer_macs(SeqKind kind, const SeparatorConfig& c, double S, double T) {
  const double N = static_cast<double>(c.feature_dim);
  switch (kind) {
    case SeqKind::kBlstm: {
      const double H = static_cast<double>(c.rnn_hidden);
      return S * T * (2.0 * 4.0 * (N * H + H * H) + 2.0 * H * N);
    }
    case SeqKind::kLstm: {
      const double H = static_cast<double>(c.online_hidden);
      return S * T * (4.0 * (N * H + H * H) + H * N);
    }
    case SeqKind::kTransformer: {
      const double d = N, ff = static_cast<double>(c.ff_dim);
      return S * (4.0 * T * d * d + 2.0 * T * T * d + 2.0 * T * d * ff);
    }
  }
  return 0.0;
}

}  // namespace detail::profile

inline ComputeReport count_macs(const SeparatorConfig& cfg, const Workload& wl) {
  using namespace detail::profile;
  cfg.validate();
  ComputeReport r;
  r.arch = arch_name(cfg.arch);
  r.workload = wl;
  const std::size_t N = cfg.feature_dim, F = cfg.bins, R = cfg.num_repeats();
  const double B = static_cast<double>(wl.windows()), K = static_cast<double>(wl.window);
  r.layers.push_back({"embed", linear_params(F, N), B * K * static_cast<double>(F * N)});
  const SeqKind local = is_transformer(cfg.arch) ? SeqKind::kTransformer : SeqKind::kBlstm;
  if (is_dual_path(cfg.arch)) {
    const SeqKind global = cfg.online ? SeqKind::kLstm : local;
    const bool boosted = cfg.arch == Arch::kDpTransformerBoosted;
    const double Kin = boosted ? static_cast<double>(ops::conv1d_output_length(wl.window, cfg.conv_kernel, cfg.lambda,
                                                                               cfg.conv_kernel / 2))
                               : K;
    const double conv = static_cast<double>(N * N * cfg.conv_kernel) * Kin * B;
    for (std::size_t b = 0; b < R; ++b) {
      const std::string name = "block" + std::to_string(b);
      if (boosted && b == R - 1) r.layers.push_back({"up", N * N * cfg.conv_kernel + N, conv});
      const double Kb = (boosted && b > 0 && b < R - 1) ? Kin : K;
      r.layers.push_back({name + ".local", sublayer_params(local, cfg), sublayer_macs(local, cfg, B, Kb)});
      r.layers.push_back({name + ".global", sublayer_params(global, cfg), sublayer_macs(global, cfg, Kb, B)});
      if (boosted && b == 0) r.layers.push_back({"down", N * N * cfg.conv_kernel + N, conv});
    }
  } else {
    for (std::size_t i = 0; i < cfg.num_layers(); ++i) {
      r.layers.push_back({"layer" + std::to_string(i), sublayer_params(local, cfg), sublayer_macs(local, cfg, B, K)});
    }
  }
  r.layers.push_back({"head", linear_params(N, SeparatorConfig::kSources * F),
                      B * K * static_cast<double>(N * SeparatorConfig::kSources * F)});
  return r;
}

/// Parameter counts; MACs are evaluated on the config's own window and hop
/// over the default 60 s workload.
inline ComputeReport count_params(const SeparatorConfig& cfg) {
  Workload wl;
  wl.window = cfg.window;
  wl.hop = cfg.hop_frames();
  return count_macs(cfg, wl);
}

/// MACs of the boosted model over the plain dual-path transformer with the
/// same dimensions. At lambda 1 nothing is resampled and the two models are
/// the same, so the ratio is 1.
inline double boosted_mac_ratio(const SeparatorConfig& cfg, const Workload& wl) {
  if (cfg.arch != Arch::kDpTransformerBoosted) throw ConfigError("boosted_mac_ratio: arch must be dp-transformer-boosted");
  if (cfg.lambda == 1) return 1.0;
  auto plain = cfg;
  plain.arch = Arch::kDpTransformer;
  return count_macs(cfg, wl).total_macs() / count_macs(plain, wl).total_macs();
}

}  // namespace css
