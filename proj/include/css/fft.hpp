#pragma once

// Thin FFTW wrapper: cached real-to-complex plans, safe to execute from any
// thread once created.

#include <fftw3.h>

#include <complex>
#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <vector>

namespace css {

using Complex = std::complex<double>;

class RealFft {
 public:
  /// Plan pair for transform size n, created on first use.
  static const RealFft& get(std::size_t n) {
    static std::mutex mu;
    static std::map<std::size_t, std::unique_ptr<RealFft>> cache;
    std::lock_guard lock(mu);
    auto& slot = cache[n];
    if (!slot) slot.reset(new RealFft(n));
    return *slot;
  }

  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;
  ~RealFft() {
    fftw_destroy_plan(fwd_);
    fftw_destroy_plan(inv_);
  }

  std::size_t size() const { return n_; }
  std::size_t bins() const { return n_ / 2 + 1; }

  /// X[f] = sum_n x[n] e^{-2 pi i f n / N}, f = 0..N/2.
  void forward(const double* in, Complex* out) const {
    std::vector<double> tmp(in, in + n_);
    fftw_execute_dft_r2c(fwd_, tmp.data(), reinterpret_cast<fftw_complex*>(out));
  }

  /// Unnormalized inverse of the one-sided spectrum (imaginary parts of the
  /// DC and Nyquist bins are ignored).
  void inverse(const Complex* in, double* out) const {
    std::vector<Complex> tmp(in, in + bins());
    fftw_execute_dft_c2r(inv_, reinterpret_cast<fftw_complex*>(tmp.data()), out);
  }

 private:
  explicit RealFft(std::size_t n) : n_(n) {
    std::vector<double> buf(n);
    std::vector<Complex> spec(n / 2 + 1);
    const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
    fwd_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), buf.data(), reinterpret_cast<fftw_complex*>(spec.data()), flags);
    inv_ = fftw_plan_dft_c2r_1d(static_cast<int>(n), reinterpret_cast<fftw_complex*>(spec.data()), buf.data(), flags);
  }

  std::size_t n_;
  fftw_plan fwd_ = nullptr;
  fftw_plan inv_ = nullptr;
};

/// Full linear convolution (length a.size() + b.size() - 1) via FFT.
inline std::vector<double> fft_convolve(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty()) return {};
  const std::size_t out_len = a.size() + b.size() - 1;
  std::size_t n = 1;
  while (n < out_len) n <<= 1;
  const auto& fft = RealFft::get(n);
  std::vector<double> pa(n, 0.0), pb(n, 0.0);
  std::copy(a.begin(), a.end(), pa.begin());
  std::copy(b.begin(), b.end(), pb.begin());
  std::vector<Complex> fa(fft.bins()), fb(fft.bins());
  fft.forward(pa.data(), fa.data());
  fft.forward(pb.data(), fb.data());
  for (std::size_t i = 0; i < fa.size(); ++i) fa[i] *= fb[i] / static_cast<double>(n);
  fft.inverse(fa.data(), pa.data());
  pa.resize(out_len);
  return pa;
}

}  // namespace css
