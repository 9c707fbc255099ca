#pragma once

// Training objectives and evaluation metrics: phase-sensitive mask targets,
// time-domain SNR, two-speaker permutation invariant loss, overlap ratios
// and the per-bucket window SNR table.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "css/dsp.hpp"
#include "css/error.hpp"
#include "css/ops.hpp"
#include "css/tensor.hpp"

namespace css {

inline constexpr double kPsmEps = 1e-8;
inline constexpr double kSnrFloor = 1e-10;

/// Phase-sensitive mask |S|/max(|Y|,eps) * cos(theta_S - theta_Y), clipped
/// to [0, 1]. Returned as [L, F].
inline Tensor psm_target(const Spectrogram& src, const Spectrogram& mix, bool clip = true) {
  if (src.frames != mix.frames || src.bins() != mix.bins() || src.values.size() != mix.values.size()) {
    throw ShapeError("psm_target: source " + std::to_string(src.frames) + "x" + std::to_string(src.bins()) +
                     " vs mixture " + std::to_string(mix.frames) + "x" + std::to_string(mix.bins()));
  }
  std::vector<double> m(mix.values.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    const Complex s = src.values[i], y = mix.values[i];
    // Re(S conj(Y)) / |Y| = |S| cos(theta_S - theta_Y).
    const double ya = std::abs(y);
    double v = ya > 0.0 ? std::real(s * std::conj(y)) / (ya * std::max(ya, kPsmEps)) : 0.0;
    if (clip) v = std::clamp(v, 0.0, 1.0);
    m[i] = v;
  }
  return Tensor::from({mix.frames, mix.bins()}, std::move(m));
}

/// 10 log10(|ref|^2 / |ref - est|^2), denominator floored at 1e-10 |ref|^2.
inline double snr(std::span<const double> est, std::span<const double> ref) {
  if (est.size() != ref.size()) {
    throw ShapeError("snr: lengths differ (" + std::to_string(est.size()) + " vs " + std::to_string(ref.size()) + ")");
  }
  double r = 0.0, e = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    r += ref[i] * ref[i];
    e += (ref[i] - est[i]) * (ref[i] - est[i]);
  }
  if (!(r > 0.0)) throw ContractError("snr: reference has zero energy");
  return 10.0 * std::log10(r / std::max(e, kSnrFloor * r));
}

inline double snr(const Waveform& est, const Waveform& ref) { return snr(est.samples, ref.samples); }

struct PitResult {
  bool swapped = false;          // true: est1 -> ref2, est2 -> ref1
  std::array<double, 2> snrs{};  // SNR of the chosen pairs, indexed by estimate
  double loss = 0.0;             // -mean(snrs)
};

/// Window-level PIT over the two pairings; ties keep the identity.
inline PitResult pit_loss(std::span<const double> e1, std::span<const double> e2, std::span<const double> r1,
                          std::span<const double> r2) {
  if (e1.size() != r1.size() || e2.size() != r1.size() || r2.size() != r1.size()) {
    throw ShapeError("pit_loss: all four signals must share one length");
  }
  const double id = 0.5 * (snr(e1, r1) + snr(e2, r2));
  const double sw = 0.5 * (snr(e1, r2) + snr(e2, r1));
  PitResult p;
  p.swapped = sw > id;
  p.snrs = p.swapped ? std::array{snr(e1, r2), snr(e2, r1)} : std::array{snr(e1, r1), snr(e2, r2)};
  p.loss = -(p.swapped ? sw : id);
  return p;
}

inline PitResult pit_loss(const Waveform& e1, const Waveform& e2, const Waveform& r1, const Waveform& r2) {
  return pit_loss(e1.samples, e2.samples, r1.samples, r2.samples);
}

// ---------------------------------------------------------------------------
// Differentiable objective used in training.

/// Per-row SNR of est [B, T] against constant references (B*T values):
/// 10 log10((|r|^2 + eps_b) / (|r - e|^2 + eps_b)). The additive eps keeps
/// rows with a silent reference defined; they reward silent estimates.
inline Tensor batch_snr(const Tensor& est, const std::vector<double>& ref, const std::vector<double>& eps) {
  if (est.ndim() != 2 || ref.size() != est.numel() || eps.size() != est.dim(0)) {
    throw ShapeError("batch_snr: estimates " + shape_str(est.shape()) + " vs " + std::to_string(ref.size()) +
                     " reference samples");
  }
  const std::size_t B = est.dim(0), T = est.dim(1);
  std::vector<double> out(B), err(B);
  const auto e = est.data();
  for (std::size_t b = 0; b < B; ++b) {
    double r = 0.0, d = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      const double rv = ref[b * T + t];
      r += rv * rv;
      d += (rv - e[b * T + t]) * (rv - e[b * T + t]);
    }
    if (!(eps[b] > 0.0)) throw ContractError("batch_snr: epsilon must be positive");
    err[b] = d + eps[b];
    out[b] = 10.0 * std::log10((r + eps[b]) / err[b]);
  }
  return detail::make_result({B}, std::move(out), "batch_snr", {est},
                             [ref, err, B, T, est](const detail::TensorImpl& o, detail::Node& nd) {
                               double* g = nd.grad_of(0);
                               if (!g) return;
                               const auto e = est.data();
                               const double c = 20.0 / std::numbers::ln10;
                               for (std::size_t b = 0; b < B; ++b) {
                                 const double s = c * o.grad[b] / err[b];
                                 for (std::size_t t = 0; t < T; ++t) g[b * T + t] += s * (ref[b * T + t] - e[b * T + t]);
                               }
                             });
}

struct BatchPit {
  Tensor loss;                // scalar: -mean over windows and streams of the chosen SNRs
  std::vector<bool> swapped;  // per window
  std::vector<double> snr;    // per window, mean of the two chosen SNRs
};

/// Two-speaker PIT over a batch of windows; the pairing is chosen per window
/// by value and the gradient flows through the chosen pairing only.
inline BatchPit batch_pit_loss(const Tensor& est1, const Tensor& est2, const std::vector<double>& ref1,
                               const std::vector<double>& ref2, const std::vector<double>& eps) {
  const Tensor s11 = batch_snr(est1, ref1, eps), s22 = batch_snr(est2, ref2, eps);
  const Tensor s12 = batch_snr(est1, ref2, eps), s21 = batch_snr(est2, ref1, eps);
  const std::size_t B = est1.dim(0);
  BatchPit out;
  std::vector<double> keep_id(B), keep_sw(B);
  for (std::size_t b = 0; b < B; ++b) {
    const double id = s11[b] + s22[b], sw = s12[b] + s21[b];
    const bool swap = sw > id;
    out.swapped.push_back(swap);
    out.snr.push_back(0.5 * (swap ? sw : id));
    keep_id[b] = swap ? 0.0 : 1.0;
    keep_sw[b] = swap ? 1.0 : 0.0;
  }
  const Tensor wid = Tensor::from({B}, keep_id), wsw = Tensor::from({B}, keep_sw);
  const Tensor total = ops::add(ops::mul(ops::add(s11, s22), wid), ops::mul(ops::add(s12, s21), wsw));
  out.loss = ops::scale(ops::sum(total), -0.5 / static_cast<double>(B));
  return out;
}

// ---------------------------------------------------------------------------
// Overlap accounting.

/// Per-speaker frame activity; activity[s][l] is true when speaker s is
/// active at frame l.
using Activity = std::vector<std::vector<bool>>;

/// Fraction of active frames in [begin, end) with two or more speakers.
inline double overlap_ratio(const Activity& act, std::size_t begin, std::size_t end) {
  if (act.empty()) throw ContractError("overlap_ratio: no activity masks");
  std::size_t active = 0, overlapped = 0;
  for (std::size_t l = begin; l < end; ++l) {
    int n = 0;
    for (const auto& a : act) {
      if (l >= a.size()) throw ShapeError("overlap_ratio: frame range exceeds activity length");
      n += a[l] ? 1 : 0;
    }
    active += n >= 1;
    overlapped += n >= 2;
  }
  if (active == 0) throw ContractError("overlap_ratio: no active frames");
  return static_cast<double>(overlapped) / static_cast<double>(active);
}

inline double overlap_ratio(const Activity& act) {
  if (act.empty()) throw ContractError("overlap_ratio: no activity masks");
  return overlap_ratio(act, 0, act.front().size());
}

inline constexpr std::size_t kOverlapBuckets = 5;
inline constexpr std::array<const char*, kOverlapBuckets> kBucketLabels = {"0%", "0-25%", "25-50%", "50-75%",
                                                                          "75-100%"};

/// 0 exactly -> bucket 0; otherwise half-open quarters [lo, hi) with the
/// last one closed at 1.
inline std::size_t overlap_bucket(double ratio) {
  if (ratio < 0.0 || ratio > 1.0) throw ContractError("overlap_bucket: ratio outside [0, 1]");
  if (ratio == 0.0) return 0;
  if (ratio < 0.25) return 1;
  if (ratio < 0.5) return 2;
  if (ratio < 0.75) return 3;
  return 4;
}

struct WindowScore {
  double snr = 0.0;
  std::size_t start_frame = 0;
  bool padded = false;
};

struct BucketStats {
  std::size_t count = 0;
  double mean_snr = 0.0;
};

struct WindowSnrReport {
  std::array<BucketStats, kOverlapBuckets> buckets{};
  std::size_t windows = 0;         // windows scored into buckets
  std::size_t padded_excluded = 0;
  std::size_t silent_excluded = 0;

  std::string table(const std::string& title = "window SNR (dB)") const {
    std::string s = title + "\n";
    char line[96];
    std::snprintf(line, sizeof line, "  %-8s %6s %9s\n", "overlap", "count", "mean");
    s += line;
    for (std::size_t i = 0; i < kOverlapBuckets; ++i) {
      if (buckets[i].count) {
        std::snprintf(line, sizeof line, "  %-8s %6zu %9.2f\n", kBucketLabels[i], buckets[i].count, buckets[i].mean_snr);
      } else {
        std::snprintf(line, sizeof line, "  %-8s %6zu %9s\n", kBucketLabels[i], std::size_t{0}, "-");
      }
      s += line;
    }
    return s;
  }
};

/// Buckets window scores by the overlap ratio of frames
/// [start, start + K). Padded windows and windows without any active
/// speaker are excluded and counted separately.
inline WindowSnrReport window_snr_report(const std::vector<WindowScore>& scores, const Activity& act, std::size_t K) {
  if (act.empty()) throw ContractError("window_snr_report: activity is required");
  WindowSnrReport rep;
  std::array<double, kOverlapBuckets> sums{};
  for (const auto& w : scores) {
    if (w.padded) {
      ++rep.padded_excluded;
      continue;
    }
    double ratio = 0.0;
    try {
      ratio = overlap_ratio(act, w.start_frame, w.start_frame + K);
    } catch (const ContractError&) {
      ++rep.silent_excluded;
      continue;
    }
    const auto b = overlap_bucket(ratio);
    ++rep.buckets[b].count;
    sums[b] += w.snr;
    ++rep.windows;
  }
  for (std::size_t i = 0; i < kOverlapBuckets; ++i)
    if (rep.buckets[i].count) rep.buckets[i].mean_snr = sums[i] / static_cast<double>(rep.buckets[i].count);
  return rep;
}

}  // namespace css
