#pragma once

// Minimal RIFF/WAVE I/O for mono 16 kHz audio: 16-bit PCM and 32-bit float.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "css/dsp.hpp"
#include "css/error.hpp"

namespace css {

enum class WavFormat { kPcm16, kFloat32 };

namespace detail::wav {
inline void put_u32(std::ofstream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_u16(std::ofstream& os, std::uint16_t v) { os.write(reinterpret_cast<const char*>(&v), 2); }
inline std::uint32_t u32(const unsigned char* p) { return p[0] | (p[1] << 8) | (p[2] << 16) | (std::uint32_t(p[3]) << 24); }
inline std::uint16_t u16(const unsigned char* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }
}  // namespace detail::wav

inline void write_wav(const std::string& path, const Waveform& w, WavFormat fmt = WavFormat::kPcm16) {
  static_assert(std::endian::native == std::endian::little);
  using namespace detail::wav;
  if (w.sample_rate != 16000) throw IoError("write_wav: only 16 kHz audio is supported");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  const std::uint16_t bits = fmt == WavFormat::kPcm16 ? 16 : 32;
  const std::uint16_t tag = fmt == WavFormat::kPcm16 ? 1 : 3;
  const auto data_bytes = static_cast<std::uint32_t>(w.samples.size() * bits / 8);
  os.write("RIFF", 4);
  put_u32(os, 36 + data_bytes);
  os.write("WAVEfmt ", 8);
  put_u32(os, 16);
  put_u16(os, tag);
  put_u16(os, 1);
  put_u32(os, 16000);
  put_u32(os, 16000u * bits / 8);
  put_u16(os, bits / 8);
  put_u16(os, bits);
  os.write("data", 4);
  put_u32(os, data_bytes);
  if (fmt == WavFormat::kPcm16) {
    std::vector<std::int16_t> pcm(w.samples.size());
    for (std::size_t i = 0; i < pcm.size(); ++i) {
      const double v = std::clamp(std::round(w.samples[i] * 32768.0), -32768.0, 32767.0);
      pcm[i] = static_cast<std::int16_t>(v);
    }
    os.write(reinterpret_cast<const char*>(pcm.data()), static_cast<std::streamsize>(pcm.size() * 2));
  } else {
    std::vector<float> f(w.samples.begin(), w.samples.end());
    os.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * 4));
  }
  if (!os) throw IoError("failed writing " + path);
}

inline Waveform read_wav(const std::string& path) {
  using namespace detail::wav;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw IoError(path + ": not a RIFF/WAVE file");
  }
  std::uint16_t tag = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* h = bytes.data() + pos;
    const std::uint32_t size = u32(h + 4);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size()) throw IoError(path + ": truncated chunk");
    if (std::memcmp(h, "fmt ", 4) == 0) {
      if (size < 16) throw IoError(path + ": short fmt chunk");
      tag = u16(bytes.data() + body);
      channels = u16(bytes.data() + body + 2);
      rate = u32(bytes.data() + body + 4);
      bits = u16(bytes.data() + body + 14);
      if (tag == 0xFFFE && size >= 26) tag = u16(bytes.data() + body + 24);  // WAVE_FORMAT_EXTENSIBLE
      have_fmt = true;
    } else if (std::memcmp(h, "data", 4) == 0) {
      if (!have_fmt) throw IoError(path + ": data before fmt chunk");
      if (channels != 1) throw IoError(path + ": expected mono audio, found " + std::to_string(channels) + " channels");
      if (rate != 16000) throw IoError(path + ": expected 16000 Hz, found " + std::to_string(rate));
      Waveform w;
      w.sample_rate = 16000;
      if (tag == 1 && bits == 16) {
        w.samples.resize(size / 2);
        for (std::size_t i = 0; i < w.samples.size(); ++i) {
          const auto v = static_cast<std::int16_t>(u16(bytes.data() + body + 2 * i));
          w.samples[i] = v / 32768.0;
        }
      } else if (tag == 3 && bits == 32) {
        w.samples.resize(size / 4);
        for (std::size_t i = 0; i < w.samples.size(); ++i) {
          float f;
          std::memcpy(&f, bytes.data() + body + 4 * i, 4);
          w.samples[i] = f;
        }
      } else {
        throw IoError(path + ": unsupported sample format (tag " + std::to_string(tag) + ", " +
                      std::to_string(bits) + " bits)");
      }
      return w;
    }
    pos = body + size + (size & 1);
  }
  throw IoError(path + ": no data chunk");
}

}  // namespace css
