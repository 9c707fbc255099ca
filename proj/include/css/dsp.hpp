#pragma once

// Short-time Fourier analysis/synthesis with a sqrt-Hann window pair and
// centered frames (signal padded by fft_size/2 on both ends), so frame l is
// centered on sample l * hop and a 16 kHz signal maps 50 frames to 0.8 s.

#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "css/error.hpp"
#include "css/fft.hpp"
#include "css/ops.hpp"
#include "css/tensor.hpp"

namespace css {

struct Waveform {
  std::vector<double> samples;
  int sample_rate = 16000;

  std::size_t size() const { return samples.size(); }
  double seconds() const { return static_cast<double>(samples.size()) / sample_rate; }
};

struct StftConfig {
  std::size_t fft_size = 512;
  std::size_t hop = 256;

  std::size_t bins() const { return fft_size / 2 + 1; }
  std::size_t frames_for(std::size_t samples) const { return samples / hop + 1; }
  bool operator==(const StftConfig&) const = default;
};

/// One-sided complex spectrogram, frames x bins, row-major.
struct Spectrogram {
  StftConfig config;
  std::size_t frames = 0;
  std::size_t length = 0;  // sample count of the analyzed signal
  int sample_rate = 16000;
  std::vector<Complex> values;

  std::size_t bins() const { return config.bins(); }
  Complex& at(std::size_t l, std::size_t f) { return values[l * bins() + f]; }
  const Complex& at(std::size_t l, std::size_t f) const { return values[l * bins() + f]; }

  std::vector<double> magnitude() const {
    std::vector<double> m(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) m[i] = std::abs(values[i]);
    return m;
  }
};

/// sqrt of the periodic Hann window: sin(pi n / N).
inline std::vector<double> sqrt_hann(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = std::sin(std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  return w;
}

namespace detail {
inline void validate(const StftConfig& c) {
  if (c.fft_size < 2 || c.fft_size % 2 != 0) throw ConfigError("stft: fft_size must be even and >= 2");
  if (c.hop == 0 || c.hop > c.fft_size / 2) throw ConfigError("stft: hop must be in (0, fft_size/2]");
}
}  // namespace detail

inline Spectrogram stft(const Waveform& w, const StftConfig& cfg = {}) {
  detail::validate(cfg);
  if (w.samples.empty()) throw ContractError("stft: empty waveform");
  const std::size_t N = cfg.fft_size, half = N / 2, F = cfg.bins();
  Spectrogram s;
  s.config = cfg;
  s.length = w.samples.size();
  s.sample_rate = w.sample_rate;
  s.frames = cfg.frames_for(s.length);
  s.values.resize(s.frames * F);
  const auto win = sqrt_hann(N);
  const auto& fft = RealFft::get(N);
  std::vector<double> frame(N);
  for (std::size_t l = 0; l < s.frames; ++l) {
    for (std::size_t n = 0; n < N; ++n) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(l * cfg.hop + n) - static_cast<std::ptrdiff_t>(half);
      frame[n] = (src >= 0 && src < static_cast<std::ptrdiff_t>(s.length)) ? w.samples[src] * win[n] : 0.0;
    }
    fft.forward(frame.data(), s.values.data() + l * F);
  }
  return s;
}

namespace detail {

/// Overlap-add synthesis of `frames` spectra (frames x bins) followed by
/// window-power normalization; returns samples [0, out_len) in the centered
/// time axis of the first frame.
inline std::vector<double> synthesize(const Complex* spec, std::size_t frames, const StftConfig& cfg,
                                      std::size_t out_len) {
  const std::size_t N = cfg.fft_size, half = N / 2, F = cfg.bins();
  const auto win = sqrt_hann(N);
  const auto& fft = RealFft::get(N);
  std::vector<double> acc(out_len, 0.0), norm(out_len, 0.0), frame(N);
  for (std::size_t l = 0; l < frames; ++l) {
    fft.inverse(spec + l * F, frame.data());
    for (std::size_t n = 0; n < N; ++n) {
      const std::ptrdiff_t dst = static_cast<std::ptrdiff_t>(l * cfg.hop + n) - static_cast<std::ptrdiff_t>(half);
      if (dst < 0 || dst >= static_cast<std::ptrdiff_t>(out_len)) continue;
      acc[dst] += frame[n] / static_cast<double>(N) * win[n];
      norm[dst] += win[n] * win[n];
    }
  }
  for (std::size_t t = 0; t < out_len; ++t) acc[t] = norm[t] > 1e-12 ? acc[t] / norm[t] : 0.0;
  return acc;
}

}  // namespace detail

/// Weighted overlap-add inverse. Output length is the analyzed length, or
/// (frames - 1) * hop when `length` is zero.
inline Waveform istft(const Spectrogram& s) {
  detail::validate(s.config);
  if (s.values.size() != s.frames * s.bins()) throw ConfigError("istft: spectrogram storage does not match frames x bins");
  const std::size_t len = s.length ? s.length : (s.frames - 1) * s.config.hop;
  if (len > s.frames * s.config.hop + s.config.fft_size / 2) throw ConfigError("istft: length exceeds frame coverage");
  Waveform w;
  w.sample_rate = s.sample_rate;
  w.samples = detail::synthesize(s.values.data(), s.frames, s.config, len);
  return w;
}

/// istft(mask * |mix| * e^{i phase(mix)}); the mask is [L, F].
inline Waveform masked_resynthesis(const Spectrogram& mix, const Tensor& mask) {
  if (mask.shape() != Shape{mix.frames, mix.bins()}) {
    throw ShapeError("masked_resynthesis: mask " + shape_str(mask.shape()) + " vs spectrogram [" +
                     std::to_string(mix.frames) + "," + std::to_string(mix.bins()) + "]");
  }
  Spectrogram s = mix;
  for (std::size_t i = 0; i < s.values.size(); ++i) {
    if (mask[i] < 0.0) throw ContractError("masked_resynthesis: negative mask value");
    s.values[i] *= mask[i];
  }
  return istft(s);
}

/// Unit phasors e^{i phase} of a spectrum; bins with zero magnitude get 1.
inline std::vector<Complex> phasors(const std::vector<Complex>& spec) {
  std::vector<Complex> p(spec.size());
  for (std::size_t i = 0; i < spec.size(); ++i) {
    const double m = std::abs(spec[i]);
    p[i] = m > 0.0 ? spec[i] / m : Complex(1.0, 0.0);
  }
  return p;
}

/// Number of samples synthesized for a window of `frames` frames: the
/// span between the first and last frame centers.
inline std::size_t window_samples(std::size_t frames, const StftConfig& cfg) { return (frames - 1) * cfg.hop; }

/// Differentiable resynthesis of windowed magnitudes with fixed phase.
/// mag: [B, K, F]; phasors: B*K*F unit phasors in the same layout.
/// Returns [B, (K-1)*hop]: each window synthesized on its own time axis.
inline Tensor istft_windows(const Tensor& mag, const std::vector<Complex>& phase, const StftConfig& cfg) {
  if (mag.ndim() != 3 || mag.dim(2) != cfg.bins() || phase.size() != mag.numel()) {
    throw ShapeError("istft_windows: magnitudes " + shape_str(mag.shape()) + " with " +
                     std::to_string(phase.size()) + " phasors");
  }
  const std::size_t B = mag.dim(0), K = mag.dim(1), F = cfg.bins(), N = cfg.fft_size;
  if (K < 2) throw ShapeError("istft_windows: need at least two frames per window");
  const std::size_t T = window_samples(K, cfg);
  std::vector<double> out(B * T);
  std::vector<Complex> spec(K * F);
  const auto md = mag.data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < K * F; ++i) spec[i] = md[b * K * F + i] * phase[b * K * F + i];
    auto w = detail::synthesize(spec.data(), K, cfg, T);
    std::copy(w.begin(), w.end(), out.begin() + static_cast<std::ptrdiff_t>(b * T));
  }
  return detail::make_result(
      {B, T}, std::move(out), "istft_windows", {mag}, [=](const detail::TensorImpl& o, detail::Node& nd) {
        double* gm = nd.grad_of(0);
        if (!gm) return;
        const std::size_t half = N / 2;
        const auto win = sqrt_hann(N);
        // Window-power normalization over the synthesized span.
        std::vector<double> norm(T, 0.0);
        for (std::size_t l = 0; l < K; ++l)
          for (std::size_t n = 0; n < N; ++n) {
            const std::ptrdiff_t t = static_cast<std::ptrdiff_t>(l * cfg.hop + n) - static_cast<std::ptrdiff_t>(half);
            if (t >= 0 && t < static_cast<std::ptrdiff_t>(T)) norm[t] += win[n] * win[n];
          }
        const auto& fft = RealFft::get(N);
        std::vector<double> seg(N);
        std::vector<Complex> G(F);
        for (std::size_t b = 0; b < B; ++b) {
          const double* g = o.grad.data() + b * T;
          for (std::size_t l = 0; l < K; ++l) {
            for (std::size_t n = 0; n < N; ++n) {
              const std::ptrdiff_t t = static_cast<std::ptrdiff_t>(l * cfg.hop + n) - static_cast<std::ptrdiff_t>(half);
              seg[n] = (t >= 0 && t < static_cast<std::ptrdiff_t>(T) && norm[t] > 1e-12) ? g[t] * win[n] / norm[t] : 0.0;
            }
            fft.forward(seg.data(), G.data());
            for (std::size_t f = 0; f < F; ++f) {
              const double c = (f == 0 || f == F - 1) ? 1.0 : 2.0;
              const std::size_t idx = (b * K + l) * F + f;
              gm[idx] += c / static_cast<double>(N) * std::real(phase[idx] * std::conj(G[f]));
            }
          }
        }
      });
}

}  // namespace css
