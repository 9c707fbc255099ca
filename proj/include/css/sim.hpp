#pragma once

// Seeded meeting simulator: shoebox rooms, image-method impulse responses,
// band-limited toy speakers, and a gap-free two-at-a-time utterance
// schedule hitting a target overlap ratio.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "css/dsp.hpp"
#include "css/error.hpp"
#include "css/fft.hpp"
#include "css/metrics.hpp"

namespace css {

using Vec3 = std::array<double, 3>;
using SimRng = std::mt19937_64;

inline constexpr double kSpeedOfSound = 343.0;

struct RoomSpec {
  Vec3 size{6.0, 5.0, 3.0};  // width, length, height in meters
  Vec3 mic{3.0, 2.5, 0.8};
  std::vector<Vec3> sources;
  double rt60 = 0.3;
  int sample_rate = 16000;

  double volume() const { return size[0] * size[1] * size[2]; }
  double surface() const { return 2.0 * (size[0] * size[1] + size[0] * size[2] + size[1] * size[2]); }
  /// Sabine absorption coefficient for the requested reverberation time.
  double absorption() const { return 0.161 * volume() / (surface() * rt60); }
  double reflection() const { return std::sqrt(std::max(0.0, 1.0 - absorption())); }

  bool inside(const Vec3& p) const {
    for (int i = 0; i < 3; ++i)
      if (!(p[i] > 0.0 && p[i] < size[i])) return false;
    return true;
  }
};

inline double distance(const Vec3& a, const Vec3& b) {
  return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]));
}

struct RoomRanges {
  double min_side = 2.0, max_side = 12.0;
  double min_height = 2.5, max_height = 4.5;
  double mic_area = 2.0;  // side of the central square holding the mic
  double mic_min_z = 0.4, mic_max_z = 1.2;
  double wall_margin = 0.5;
  double src_min_z = 1.0, src_max_z = 2.0;
  double min_rt60 = 0.1, max_rt60 = 0.5;
  double min_src_mic = 0.3;  // keeps the direct path well defined
};

/// Rejection-samples a room with `n_sources` source positions. Rooms whose
/// requested rt60 would need an absorption coefficient above 1 are redrawn.
inline RoomSpec sample_room(SimRng& rng, std::size_t n_sources, const RoomRanges& r = {}) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto in = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  for (int attempt = 0; attempt < 10000; ++attempt) {
    RoomSpec room;
    room.size = {in(r.min_side, r.max_side), in(r.min_side, r.max_side), in(r.min_height, r.max_height)};
    room.rt60 = in(r.min_rt60, r.max_rt60);
    if (room.absorption() > 1.0) continue;
    const double half = r.mic_area / 2.0;
    room.mic = {in(room.size[0] / 2 - half, room.size[0] / 2 + half), in(room.size[1] / 2 - half, room.size[1] / 2 + half),
                in(r.mic_min_z, r.mic_max_z)};
    if (!room.inside(room.mic)) continue;
    bool ok = true;
    for (std::size_t s = 0; s < n_sources && ok; ++s) {
      Vec3 p{in(r.wall_margin, room.size[0] - r.wall_margin), in(r.wall_margin, room.size[1] - r.wall_margin),
             in(r.src_min_z, r.src_max_z)};
      ok = room.inside(p) && distance(p, room.mic) >= r.min_src_mic;
      room.sources.push_back(p);
    }
    if (ok) return room;
  }
  throw ConfigError("sample_room: no valid room after 10000 attempts");
}

// ---------------------------------------------------------------------------
// Image method

/// Room impulse response from `src` to `mic`. Image sources up to
/// `max_order` reflections (negative: every image that arrives within the
/// response length) contribute beta^order * d0 / d at a fractional delay
/// d / c * fs rendered with a Hann-windowed sinc, so the direct path has
/// unit gain. Length defaults to 1.2 * rt60 plus the direct delay.
inline std::vector<double> image_method_rir(const RoomSpec& room, const Vec3& src, const Vec3& mic, int max_order,
                                            std::size_t length = 0, std::optional<double> reflection = std::nullopt) {
  if (!room.inside(src) || !room.inside(mic)) throw ContractError("image_method_rir: position outside the room");
  const double d0 = distance(src, mic);
  if (d0 < 1e-3) throw ContractError("image_method_rir: source and microphone coincide");
  const double fs = room.sample_rate;
  const double beta = reflection.value_or(room.reflection());
  const int tw = 2 * static_cast<int>(std::lround(0.004 * fs));
  const double direct = d0 / kSpeedOfSound * fs;
  if (length == 0) length = static_cast<std::size_t>(std::ceil(1.2 * room.rt60 * fs + direct)) + tw;
  std::vector<double> h(length, 0.0);
  const double reach = (static_cast<double>(length) + tw / 2.0) / fs * kSpeedOfSound;
  std::array<int, 3> nmax{};
  for (int i = 0; i < 3; ++i) nmax[i] = static_cast<int>(std::ceil(reach / (2.0 * room.size[i]))) + 1;

  auto add_tap = [&](double delay, double amp) {
    const long lo = static_cast<long>(std::floor(delay)) - tw / 2, hi = static_cast<long>(std::floor(delay)) + tw / 2;
    for (long n = std::max(0L, lo); n <= hi && n < static_cast<long>(length); ++n) {
      const double x = static_cast<double>(n) - delay;
      if (std::abs(x) > tw / 2.0) continue;
      const double win = 0.5 * (1.0 + std::cos(2.0 * std::numbers::pi * x / tw));
      const double sinc = x == 0.0 ? 1.0 : std::sin(std::numbers::pi * x) / (std::numbers::pi * x);
      h[static_cast<std::size_t>(n)] += amp * win * sinc;
    }
  };

  for (int nx = -nmax[0]; nx <= nmax[0]; ++nx)
    for (int ny = -nmax[1]; ny <= nmax[1]; ++ny)
      for (int nz = -nmax[2]; nz <= nmax[2]; ++nz)
        for (int p = 0; p < 8; ++p) {
          const int px = p & 1, py = (p >> 1) & 1, pz = (p >> 2) & 1;
          const int order = std::abs(nx - px) + std::abs(nx) + std::abs(ny - py) + std::abs(ny) + std::abs(nz - pz) +
                            std::abs(nz);
          if (max_order >= 0 && order > max_order) continue;
          const Vec3 img{(1 - 2 * px) * src[0] + 2 * nx * room.size[0], (1 - 2 * py) * src[1] + 2 * ny * room.size[1],
                         (1 - 2 * pz) * src[2] + 2 * nz * room.size[2]};
          const double d = distance(img, mic);
          const double delay = d / kSpeedOfSound * fs;
          if (delay - tw / 2.0 >= static_cast<double>(length)) continue;
          const double amp = (order == 0 ? 1.0 : std::pow(beta, order)) * d0 / d;
          if (amp == 0.0) continue;
          add_tap(delay, amp);
        }
  return h;
}

/// Reverberation time from a Schroeder energy decay curve, fitting the
/// -5 dB to -25 dB range and extrapolating to -60 dB.
inline double schroeder_rt60(const std::vector<double>& h, int sample_rate) {
  std::vector<double> edc(h.size());
  double acc = 0.0;
  for (std::size_t i = h.size(); i-- > 0;) {
    acc += h[i] * h[i];
    edc[i] = acc;
  }
  if (!(acc > 0.0)) throw ContractError("schroeder_rt60: silent impulse response");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    const double db = 10.0 * std::log10(edc[i] / acc);
    if (db > -5.0) continue;
    if (db < -25.0) break;
    const double t = static_cast<double>(i) / sample_rate;
    sx += t;
    sy += db;
    sxx += t * t;
    sxy += t * db;
    ++n;
  }
  if (n < 2) throw NumericError("schroeder_rt60: decay range too short to fit");
  const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  return -60.0 / slope;
}

// ---------------------------------------------------------------------------
// Toy speakers

enum class SourceStyle {
  kDisjointBands,  // speaker s owns one contiguous band, fixed across recordings
  kBlockPairs,     // speaker s owns two of four comb blocks, paired afresh per recording
};

inline const char* source_style_name(SourceStyle s) {
  return s == SourceStyle::kDisjointBands ? "disjoint-bands" : "block-pairs";
}

inline SourceStyle parse_source_style(const std::string& s) {
  if (s == "disjoint-bands") return SourceStyle::kDisjointBands;
  if (s == "block-pairs") return SourceStyle::kBlockPairs;
  throw ConfigError("unknown source style '" + s + "'");
}

inline constexpr double kToyRms = 0.1;

namespace detail::sim {

/// FFT bins (of an n-point transform at 16 kHz) inside [lo, hi) Hz.
inline void keep_band(std::vector<bool>& keep, std::size_t n, double lo, double hi, int fs) {
  for (std::size_t f = 0; f < keep.size(); ++f) {
    const double hz = static_cast<double>(f) * fs / static_cast<double>(n);
    if (hz >= lo && hz < hi) keep[f] = true;
  }
}

inline Waveform shaped_noise(SimRng& rng, std::size_t len, const std::vector<std::pair<double, double>>& bands, int fs) {
  std::size_t n = 1;
  while (n < len) n <<= 1;
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> x(n);
  for (auto& v : x) v = g(rng);
  const auto& fft = RealFft::get(n);
  std::vector<Complex> X(fft.bins());
  fft.forward(x.data(), X.data());
  std::vector<bool> keep(X.size(), false);
  for (const auto& [lo, hi] : bands) keep_band(keep, n, lo, hi, fs);
  for (std::size_t f = 0; f < X.size(); ++f)
    if (!keep[f]) X[f] = 0.0;
  fft.inverse(X.data(), x.data());
  // Slow syllable-like amplitude envelope.
  std::uniform_real_distribution<double> rate(2.0, 5.0), phase(0.0, 2.0 * std::numbers::pi);
  const double r = rate(rng), ph = phase(rng);
  Waveform w;
  w.sample_rate = fs;
  w.samples.resize(len);
  for (std::size_t t = 0; t < len; ++t) {
    const double env = 0.6 + 0.4 * std::sin(2.0 * std::numbers::pi * r * t / fs + ph);
    w.samples[t] = x[t] * env;
  }
  double e = 0.0;
  for (double v : w.samples) e += v * v;
  const double rms = std::sqrt(e / static_cast<double>(len));
  if (rms > 0.0)
    for (auto& v : w.samples) v *= kToyRms / rms;
  return w;
}

}  // namespace detail::sim

/// Spectrally distinct stand-in speakers at RMS 0.1. kDisjointBands splits
/// 100-7900 Hz into equal contiguous bands with guard gaps. kBlockPairs cuts
/// 125-7875 Hz into 250 Hz sub-bands, deals sub-band i to comb block i % 4,
/// and gives each speaker a distinct pair of blocks; two speakers always get
/// complementary pairs, so their union is the same whichever pairing was
/// drawn.
inline std::vector<Waveform> make_toy_sources(SimRng& rng, std::size_t n_speakers, std::size_t length,
                                              SourceStyle style = SourceStyle::kDisjointBands, int fs = 16000) {
  using Bands = std::vector<std::pair<double, double>>;
  if (n_speakers < 2) throw ConfigError("make_toy_sources: need at least two speakers");
  if (length == 0) throw ConfigError("make_toy_sources: empty utterance length");
  std::vector<Waveform> out;
  if (style == SourceStyle::kDisjointBands) {
    const double lo = 100.0, hi = 7900.0, guard = 150.0;
    const double width = (hi - lo) / static_cast<double>(n_speakers);
    for (std::size_t s = 0; s < n_speakers; ++s) {
      const Bands band{{lo + s * width + guard / 2, lo + (s + 1) * width - guard / 2}};
      out.push_back(detail::sim::shaped_noise(rng, length, band, fs));
    }
    return out;
  }
  // The six block pairs, listed so that entries 2k and 2k+1 are complements.
  static constexpr std::array<std::array<std::size_t, 2>, 6> kPairs{{{0, 1}, {2, 3}, {0, 2}, {1, 3}, {0, 3}, {1, 2}}};
  if (n_speakers > kPairs.size()) throw ConfigError("make_toy_sources: block-pairs supports at most 6 speakers");
  std::vector<std::size_t> pick(kPairs.size());
  for (std::size_t i = 0; i < pick.size(); ++i) pick[i] = i;
  if (n_speakers == 2) {
    const std::size_t k = std::uniform_int_distribution<std::size_t>(0, 2)(rng);
    const bool flip = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
    pick = {2 * k + (flip ? 1 : 0), 2 * k + (flip ? 0 : 1)};
  } else {
    std::shuffle(pick.begin(), pick.end(), rng);
  }
  std::array<Bands, 4> comb;
  for (std::size_t i = 0; i < 31; ++i) {
    const double lo = 125.0 + 250.0 * static_cast<double>(i);
    comb[i % 4].push_back({lo + 30.0, lo + 220.0});
  }
  for (std::size_t s = 0; s < n_speakers; ++s) {
    // Each block carries its own envelope, so only the pairing ties them.
    Waveform w = detail::sim::shaped_noise(rng, length, comb[kPairs[pick[s]][0]], fs);
    const Waveform v = detail::sim::shaped_noise(rng, length, comb[kPairs[pick[s]][1]], fs);
    double e = 0.0;
    for (std::size_t t = 0; t < length; ++t) {
      w.samples[t] += v.samples[t];
      e += w.samples[t] * w.samples[t];
    }
    const double rms = std::sqrt(e / static_cast<double>(length));
    for (auto& x : w.samples) x *= kToyRms / rms;
    out.push_back(std::move(w));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Meetings

struct Utterance {
  std::size_t speaker = 0;
  std::size_t onset = 0;   // samples
  std::size_t length = 0;  // samples
  double gain_db = 0.0;
};

struct MeetingConfig {
  std::size_t speakers = 2;
  double min_utterance_s = 1.5, max_utterance_s = 4.0;
  double max_gain_db = 3.0;
  int max_order = 2;  // image-method reflection order; negative means unlimited
  bool reverberant = true;
  StftConfig stft{};
};

struct MeetingScenario {
  RoomSpec room;
  std::vector<Utterance> schedule;
  std::size_t duration = 0;  // samples
  double target_overlap = 0.0;
  double realized_overlap = 0.0;
  double noise_snr_db = 0.0;
  std::uint64_t seed = 0;
  Waveform mixture, noise;
  std::vector<Waveform> refs;     // reverberant per-speaker images
  std::array<Waveform, 2> streams;  // reverberant images by utterance parity
  Activity activity;           // per speaker, STFT frame resolution
};

/// Gap-free chain: each utterance starts before the previous one ends and
/// after the one before that ended, so at most two speakers talk at once.
/// Lengths are rescaled so that sum(len) = duration * (1 + target); the
/// overlap budget target * sum(len) / (1 + target) is then spread over
/// consecutive pairs, each capped by what the earlier utterance has left.
/// Draws that cannot absorb the budget are redrawn.
inline std::vector<Utterance> schedule_utterances(SimRng& rng, std::size_t duration, double target,
                                                  const MeetingConfig& cfg, int fs) {
  if (target < 0.0 || target >= 1.0) throw ConfigError("schedule: target overlap must be in [0, 1)");
  if (cfg.speakers < 2) throw ConfigError("schedule: need at least two speakers");
  if (!(cfg.min_utterance_s > 0.0) || cfg.max_utterance_s < cfg.min_utterance_s)
    throw ConfigError("schedule: bad utterance length range");
  std::uniform_real_distribution<double> ulen(cfg.min_utterance_s, cfg.max_utterance_s);
  std::uniform_real_distribution<double> gain(-cfg.max_gain_db, cfg.max_gain_db);
  std::uniform_int_distribution<std::size_t> spk(0, cfg.speakers - 1);
  const double need = static_cast<double>(duration) * (1.0 + target);
  double shortfall = 0.0;
  for (int attempt = 0; attempt < 200; ++attempt) {
    std::vector<double> raw;
    double total = 0.0;
    while (total < need || raw.size() < 2) {
      raw.push_back(ulen(rng) * fs);
      total += raw.back();
    }
    const std::size_t n = raw.size();
    std::vector<std::size_t> len(n);
    double sum_len = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      len[i] = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(raw[i] * need / total)));
      sum_len += static_cast<double>(len[i]);
    }
    auto remaining = static_cast<long long>(std::llround(target * sum_len / (1.0 + target)));
    std::vector<std::size_t> ov(n, 0);
    std::size_t prev = 0;
    for (std::size_t i = 0; i + 1 < n; ++i) {
      const std::size_t cap = std::min(len[i] - prev, len[i + 1]);
      const auto pairs_left = static_cast<long long>(n - 1 - i);
      const long long share = (remaining + pairs_left - 1) / pairs_left;
      ov[i] = static_cast<std::size_t>(std::clamp<long long>(share, 0, static_cast<long long>(cap)));
      remaining -= static_cast<long long>(ov[i]);
      prev = ov[i];
    }
    if (remaining > 0) {
      shortfall = static_cast<double>(remaining) / fs;
      continue;
    }
    std::vector<Utterance> out(n);
    std::size_t onset = 0, last = cfg.speakers;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t s;
      do s = spk(rng);
      while (s == last);
      last = s;
      out[i] = {s, onset, len[i], gain(rng)};
      onset += len[i] - ov[i];
    }
    return out;
  }
  throw ConfigError("schedule: overlap target " + std::to_string(target) + " infeasible with utterances of " +
                    std::to_string(cfg.min_utterance_s) + "-" + std::to_string(cfg.max_utterance_s) + " s (last draw " +
                    std::to_string(shortfall) + " s short)");
}

/// Frame l is active for a speaker when its center sample l * hop lies in
/// one of the speaker's utterances.
inline Activity activity_from_schedule(const std::vector<Utterance>& sched, std::size_t speakers,
                                       std::size_t duration, const StftConfig& stft_cfg) {
  const std::size_t L = stft_cfg.frames_for(duration);
  Activity act(speakers, std::vector<bool>(L, false));
  for (const auto& u : sched)
    for (std::size_t l = (u.onset + stft_cfg.hop - 1) / stft_cfg.hop; l < L && l * stft_cfg.hop < u.onset + u.length; ++l)
      act[u.speaker][l] = true;
  return act;
}

/// Builds one meeting. `sources[s]` is speaker s's material; utterance i
/// plays sources[s] over its own span [onset, onset + length).
inline MeetingScenario simulate_meeting(const RoomSpec& room, const std::vector<Waveform>& sources, double target_overlap,
                                        std::size_t duration, double noise_snr_db, SimRng& rng,
                                        const MeetingConfig& cfg = {}) {
  if (sources.size() != cfg.speakers) throw ConfigError("simulate_meeting: one source per speaker required");
  if (cfg.reverberant && room.sources.size() < cfg.speakers) throw ConfigError("simulate_meeting: room lacks source positions");
  for (const auto& s : sources) {
    if (s.sample_rate != room.sample_rate) throw ConfigError("simulate_meeting: source sample rate differs from room");
    if (s.size() < duration) throw ConfigError("simulate_meeting: source material shorter than the meeting");
  }
  MeetingScenario m;
  m.room = room;
  m.duration = duration;
  m.target_overlap = target_overlap;
  m.noise_snr_db = noise_snr_db;
  m.schedule = schedule_utterances(rng, duration, target_overlap, cfg, room.sample_rate);

  std::vector<std::vector<double>> rirs(cfg.speakers);
  if (cfg.reverberant)
    for (std::size_t s = 0; s < cfg.speakers; ++s) rirs[s] = image_method_rir(room, room.sources[s], room.mic, cfg.max_order);

  m.refs.assign(cfg.speakers, Waveform{std::vector<double>(duration, 0.0), room.sample_rate});
  m.streams.fill(Waveform{std::vector<double>(duration, 0.0), room.sample_rate});
  for (const auto& u : m.schedule) {
    if (u.onset >= duration) continue;
    const double g = std::pow(10.0, u.gain_db / 20.0);
    std::vector<double> dry(u.length);
    for (std::size_t t = 0; t < u.length; ++t) dry[t] = g * (u.onset + t < duration ? sources[u.speaker].samples[u.onset + t] : 0.0);
    const auto wet = cfg.reverberant ? fft_convolve(dry, rirs[u.speaker]) : dry;
    auto& ref = m.refs[u.speaker].samples;
    auto& stream = m.streams[(&u - m.schedule.data()) % 2].samples;
    for (std::size_t t = 0; t < wet.size() && u.onset + t < duration; ++t) {
      ref[u.onset + t] += wet[t];
      stream[u.onset + t] += wet[t];
    }
  }

  std::vector<double> clean(duration, 0.0);
  for (const auto& r : m.refs)
    for (std::size_t t = 0; t < duration; ++t) clean[t] += r.samples[t];
  double ce = 0.0;
  for (double v : clean) ce += v * v;
  std::normal_distribution<double> g(0.0, 1.0);
  m.noise.sample_rate = room.sample_rate;
  m.noise.samples.resize(duration);
  double ne = 0.0;
  for (auto& v : m.noise.samples) {
    v = g(rng);
    ne += v * v;
  }
  const double ns = ne > 0.0 && ce > 0.0 ? std::sqrt(ce / ne * std::pow(10.0, -noise_snr_db / 10.0)) : 0.0;
  for (auto& v : m.noise.samples) v *= ns;
  m.mixture.sample_rate = room.sample_rate;
  m.mixture.samples.resize(duration);
  for (std::size_t t = 0; t < duration; ++t) m.mixture.samples[t] = clean[t] + m.noise.samples[t];

  m.activity = activity_from_schedule(m.schedule, cfg.speakers, duration, cfg.stft);
  m.realized_overlap = overlap_ratio(m.activity);
  return m;
}

}  // namespace css
