#pragma once

// On-disk meeting datasets. Each meeting is a directory holding
// manifest.json plus float32 WAVs (mixture, ref1..refN, stream1/2, noise).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "css/sim.hpp"
#include "css/wav.hpp"

namespace css {

struct SimConfig {
  std::size_t meetings = 3;
  double min_duration_s = 8.0, max_duration_s = 20.0;
  double min_overlap = 0.5, max_overlap = 0.8;
  double min_snr_db = 0.0, max_snr_db = 20.0;
  std::size_t min_speakers = 2, max_speakers = 3;
  SourceStyle style = SourceStyle::kDisjointBands;
  MeetingConfig meeting{};
  RoomRanges rooms{};

  void validate() const {
    if (min_duration_s <= 0.0 || max_duration_s < min_duration_s) throw ConfigError("sim: bad duration range");
    if (min_overlap < 0.0 || max_overlap >= 1.0 || max_overlap < min_overlap) throw ConfigError("sim: bad overlap range");
    if (max_snr_db < min_snr_db) throw ConfigError("sim: bad snr range");
    if (min_speakers < 2 || max_speakers < min_speakers) throw ConfigError("sim: speakers must be >= 2");
  }
};

/// Per-meeting stream derived from (seed, index) so meetings can be built in
/// any order.
inline SimRng meeting_rng(std::uint64_t seed, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), 0x6d656574u};
  return SimRng(seq);
}

inline MeetingScenario generate_meeting(const SimConfig& cfg, std::uint64_t seed, std::size_t index) {
  cfg.validate();
  SimRng rng = meeting_rng(seed, index);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto in = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  MeetingConfig mc = cfg.meeting;
  mc.speakers = std::uniform_int_distribution<std::size_t>(cfg.min_speakers, cfg.max_speakers)(rng);
  const auto duration = static_cast<std::size_t>(std::llround(in(cfg.min_duration_s, cfg.max_duration_s) * 16000.0));
  const double overlap = in(cfg.min_overlap, cfg.max_overlap);
  const double snr = in(cfg.min_snr_db, cfg.max_snr_db);
  const RoomSpec room = sample_room(rng, mc.speakers, cfg.rooms);
  const auto sources = make_toy_sources(rng, mc.speakers, duration, cfg.style);
  MeetingScenario m = simulate_meeting(room, sources, overlap, duration, snr, rng, mc);
  m.seed = seed;
  return m;
}

// ---------------------------------------------------------------------------
// Manifests

inline nlohmann::ordered_json manifest_json(const MeetingScenario& m, int max_order) {
  nlohmann::ordered_json j;
  j["seed"] = m.seed;
  j["sample_rate"] = m.room.sample_rate;
  j["duration"] = m.duration;
  j["speakers"] = m.refs.size();
  j["target_overlap"] = m.target_overlap;
  j["realized_overlap"] = m.realized_overlap;
  j["noise_snr_db"] = m.noise_snr_db;
  j["room"] = {{"size", m.room.size}, {"mic", m.room.mic},         {"sources", m.room.sources},
               {"rt60", m.room.rt60}, {"max_order", max_order}};
  auto& sched = j["schedule"] = nlohmann::ordered_json::array();
  for (const auto& u : m.schedule)
    sched.push_back({{"speaker", u.speaker}, {"onset", u.onset}, {"length", u.length}, {"gain_db", u.gain_db}});
  return j;
}

namespace detail::dataset {

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot write " + p.string());
  os << text;
  if (!os) throw IoError("write failed: " + p.string());
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot read " + p.string());
  return std::string(std::istreambuf_iterator<char>(is), {});
}

inline std::string meeting_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "meeting_%04zu", index);
  return buf;
}

}  // namespace detail::dataset

inline void write_meeting(const std::filesystem::path& dir, const MeetingScenario& m, int max_order) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  detail::dataset::write_text(dir / "manifest.json", manifest_json(m, max_order).dump(2) + "\n");
  write_wav((dir / "mixture.wav").string(), m.mixture, WavFormat::kFloat32);
  write_wav((dir / "noise.wav").string(), m.noise, WavFormat::kFloat32);
  for (std::size_t s = 0; s < m.refs.size(); ++s)
    write_wav((dir / ("ref" + std::to_string(s + 1) + ".wav")).string(), m.refs[s], WavFormat::kFloat32);
  for (std::size_t c = 0; c < 2; ++c)
    write_wav((dir / ("stream" + std::to_string(c + 1) + ".wav")).string(), m.streams[c], WavFormat::kFloat32);
}

/// Loads a meeting written by write_meeting. Activity is rebuilt from the
/// schedule; audio comes back at float32 precision.
inline MeetingScenario read_meeting(const std::filesystem::path& dir, const StftConfig& stft_cfg = {}) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::dataset::read_text(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad manifest in " + dir.string() + ": " + e.what());
  }
  MeetingScenario m;
  try {
    m.seed = j.at("seed").get<std::uint64_t>();
    m.duration = j.at("duration").get<std::size_t>();
    m.target_overlap = j.at("target_overlap").get<double>();
    m.realized_overlap = j.at("realized_overlap").get<double>();
    m.noise_snr_db = j.at("noise_snr_db").get<double>();
    const auto& room = j.at("room");
    m.room.sample_rate = j.at("sample_rate").get<int>();
    m.room.size = room.at("size").get<Vec3>();
    m.room.mic = room.at("mic").get<Vec3>();
    m.room.sources = room.at("sources").get<std::vector<Vec3>>();
    m.room.rt60 = room.at("rt60").get<double>();
    for (const auto& u : j.at("schedule"))
      m.schedule.push_back({u.at("speaker").get<std::size_t>(), u.at("onset").get<std::size_t>(),
                            u.at("length").get<std::size_t>(), u.at("gain_db").get<double>()});
    const auto speakers = j.at("speakers").get<std::size_t>();
    m.mixture = read_wav((dir / "mixture.wav").string());
    m.noise = read_wav((dir / "noise.wav").string());
    for (std::size_t s = 0; s < speakers; ++s) m.refs.push_back(read_wav((dir / ("ref" + std::to_string(s + 1) + ".wav")).string()));
    for (std::size_t c = 0; c < 2; ++c) m.streams[c] = read_wav((dir / ("stream" + std::to_string(c + 1) + ".wav")).string());
    m.activity = activity_from_schedule(m.schedule, speakers, m.duration, stft_cfg);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad manifest in " + dir.string() + ": " + e.what());
  }
  if (m.mixture.size() != m.duration) throw IoError("mixture length disagrees with manifest in " + dir.string());
  return m;
}

struct DatasetSummary {
  std::vector<double> targets, realized;

  /// Realized overlap counts in 0.1-wide bins over [0, 1].
  std::string histogram() const {
    std::array<std::size_t, 10> bins{};
    for (double r : realized) ++bins[std::min<std::size_t>(9, static_cast<std::size_t>(r * 10.0))];
    std::string s = "realized overlap histogram (" + std::to_string(realized.size()) + " meetings)\n";
    char line[64];
    for (std::size_t b = 0; b < bins.size(); ++b) {
      std::snprintf(line, sizeof line, "  [%.1f, %.1f%c %4zu ", b / 10.0, (b + 1) / 10.0, b == 9 ? ']' : ')', bins[b]);
      s += line;
      s += std::string(bins[b], '#') + "\n";
    }
    return s;
  }
};

/// Writes meetings 0..n-1 under `dir` plus an index file listing them.
inline DatasetSummary write_dataset(const std::filesystem::path& dir, const SimConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  DatasetSummary sum;
  nlohmann::ordered_json index;
  index["seed"] = seed;
  index["meetings"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < cfg.meetings; ++i) {
    const MeetingScenario m = generate_meeting(cfg, seed, i);
    const std::string name = detail::dataset::meeting_name(i);
    write_meeting(dir / name, m, cfg.meeting.max_order);
    index["meetings"].push_back({{"name", name}, {"target_overlap", m.target_overlap},
                                 {"realized_overlap", m.realized_overlap}});
    sum.targets.push_back(m.target_overlap);
    sum.realized.push_back(m.realized_overlap);
  }
  detail::dataset::write_text(dir / "dataset.json", index.dump(2) + "\n");
  return sum;
}

inline std::vector<std::filesystem::path> list_meetings(const std::filesystem::path& dir) {
  const auto index_path = dir / "dataset.json";
  if (!std::filesystem::exists(index_path)) throw IoError("no dataset at " + dir.string() + " (missing dataset.json)");
  std::vector<std::filesystem::path> out;
  try {
    const auto j = nlohmann::json::parse(detail::dataset::read_text(index_path));
    for (const auto& m : j.at("meetings")) out.push_back(dir / m.at("name").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad dataset index " + index_path.string() + ": " + e.what());
  }
  return out;
}

}  // namespace css
