#pragma once

// Command-line front end: simulate, train, separate, evaluate, profile.
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "css/config.hpp"
#include "css/wav.hpp"

namespace css {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

struct CliFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out, arch, checkpoint;
  std::optional<std::size_t> window_frames, hop_frames, lambda;
  std::optional<bool> online, debug_oracle_mask, debug_unit_mask;
  std::vector<std::string> positional;
};

/// defaults < config file < flags.
inline RunConfig resolve_config(const CliFlags& f) {
  RunConfig c = f.config.empty() ? RunConfig{} : load_run_config(f.config);
  if (f.seed) c.seed = *f.seed;
  if (f.out) c.out = *f.out;
  if (f.arch) c.model.arch = parse_arch(*f.arch);
  if (f.checkpoint) c.checkpoint = *f.checkpoint;
  if (f.window_frames) {
    c.model.window = *f.window_frames;
    if (!f.hop_frames) c.model.hop = 0;
  }
  if (f.hop_frames) c.model.hop = *f.hop_frames;
  if (f.lambda) c.model.lambda = *f.lambda;
  if (f.online) c.model.online = *f.online;
  if (f.debug_oracle_mask) c.debug_oracle_mask = *f.debug_oracle_mask;
  if (f.debug_unit_mask) c.debug_unit_mask = *f.debug_unit_mask;
  c.model.validate();
  c.sim.validate();
  if (c.debug_oracle_mask && c.debug_unit_mask) throw ConfigError("--debug-oracle-mask and --debug-unit-mask are exclusive");
  return c;
}

namespace detail::cli {

namespace fs = std::filesystem;

inline void make_out_dir(const RunConfig& c) {
  std::error_code ec;
  fs::create_directories(c.out, ec);
  if (ec) throw IoError("cannot create output directory " + c.out + ": " + ec.message());
}

inline void write_json(const fs::path& p, const Json& j) { detail::dataset::write_text(p, j.dump(2) + "\n"); }

inline void write_resolved(const RunConfig& c) { write_json(fs::path(c.out) / "resolved_config.json", to_json(c)); }

inline std::vector<MeetingScenario> load_meetings(const std::string& dir) {
  if (dir.empty()) throw ConfigError("no dataset directory given");
  std::vector<MeetingScenario> ms;
  for (const auto& p : list_meetings(dir)) ms.push_back(read_meeting(p));
  return ms;
}

/// Loads model weights from a bare or a training checkpoint.
inline void load_weights(Separator& model, const std::string& path) {
  if (path.empty()) throw ConfigError("no checkpoint given (--checkpoint)");
  const auto arrays = read_checkpoint(path);
  bool training = false;
  for (const auto& a : arrays) training = training || a.name.rfind("param/", 0) == 0;
  try {
    restore(model.params(), arrays, training ? "param/" : "");
  } catch (const ConfigError& e) {
    throw ConfigError("checkpoint " + path + " does not fit model arch " + arch_name(model.config().arch) + ": " +
                      e.what());
  }
}

inline const std::vector<double>* stitch_weights(const SeparatorConfig& cfg, const Spectrogram& mix,
                                                 std::vector<double>& buf) {
  if (!cfg.stitch_on_magnitudes) return nullptr;
  const auto win = window_spectrogram(mix, cfg.window, cfg.hop_frames());
  buf.assign(win.mag.data.data().begin(), win.mag.data.data().end());
  return &buf;
}

inline Json snr_list(const std::vector<double>& v) {
  Json a = Json::array();
  for (double x : v) a.push_back(x);
  return a;
}

// ---------------------------------------------------------------------------

inline int simulate(const RunConfig& c, std::ostream& out, std::ostream& err) {
  make_out_dir(c);
  write_resolved(c);
  const auto sum = write_dataset(c.out, c.sim, c.seed);
  if (c.sim.meetings == 0) err << "warning: sim.meetings is 0, wrote an empty dataset\n";
  out << "wrote " << sum.realized.size() << " meetings to " << c.out << "\n" << sum.histogram();
  return kExitOk;
}

inline int train(RunConfig c, std::ostream& out) {
  if (c.train.dataset.empty()) c.train.dataset = c.dataset;
  const auto meetings = load_meetings(c.train.dataset);
  const std::size_t K = c.model.window, P = c.model.hop_frames();
  const auto train_set = make_windows(meetings, K, P);
  if (train_set.size() == 0)
    throw ConfigError("dataset " + c.train.dataset + " has no complete window of " + std::to_string(K) + " frames");
  std::optional<WindowDataset> val;
  if (!c.train.val_dataset.empty()) val = make_windows(load_meetings(c.train.val_dataset), K, P);
  make_out_dir(c);
  write_resolved(c);

  Separator model(c.model, c.seed);
  TrainState st;
  if (!c.train.resume.empty()) {
    try {
      restore_training(model, st, read_checkpoint(c.train.resume));
    } catch (const ConfigError& e) {
      throw ConfigError("cannot resume from " + c.train.resume + ": " + e.what());
    }
    out << "resumed at step " << st.opt.step << " (epoch " << st.epoch << ")\n";
  }
  const WindowDataset& vset = val ? *val : train_set;
  const double untrained = mean(window_snrs(model, vset));
  out << train_set.size() << " training windows, " << vset.size() << " validation windows\n";
  if (st.opt.step == 0) out << "initial mean window SNR " << untrained << " dB\n";

  const fs::path dir(c.out);
  const auto tc = c.train_config();
  auto on_epoch = [&](const EpochRecord& r, const TrainState& s) {
    char line[160];
    std::snprintf(line, sizeof line, "epoch %3zu  step %6zu  lr %.3g  train %.3f dB  val %.3f dB\n", r.epoch, r.step, r.lr,
                  -r.train_loss, -r.val_loss);
    out << line << std::flush;
    write_checkpoint((dir / "last.ckpt").string(), training_snapshot(model, s));
    write_checkpoint((dir / "best.ckpt").string(), s.best.front().second);
    detail::dataset::write_text(dir / "history.jsonl", history_jsonl(s.history));
  };
  css::train(model, train_set, val ? &*val : nullptr, tc, st, on_epoch);
  if (st.best.empty()) {
    // Stopped by max_steps inside the first epoch.
    write_checkpoint((dir / "last.ckpt").string(), training_snapshot(model, st));
    out << "stopped at step " << st.opt.step << " before the first epoch completed\n";
    return kExitOk;
  }
  if (st.best.size() > 1) {
    std::vector<std::vector<NamedArray>> snaps;
    for (const auto& b : st.best) snaps.push_back(b.second);
    write_checkpoint((dir / "averaged.ckpt").string(), average_snapshots(snaps));
  }
  Json summary = {{"arch", arch_name(c.model.arch)},
                  {"steps", st.opt.step},
                  {"epochs", st.epoch},
                  {"best_epoch", st.best_epoch},
                  {"best_val_snr_db", -st.best_val},
                  {"initial_val_snr_db", untrained}};
  write_json(dir / "train_summary.json", summary);
  out << "best epoch " << st.best_epoch << ": mean window SNR " << -st.best_val << " dB\n";
  return kExitOk;
}

inline int separate(RunConfig c, std::ostream& out) {
  if (c.input.empty()) throw ConfigError("separate needs an input WAV");
  if (c.debug_oracle_mask)
    throw ConfigError("oracle masks need reference streams; use evaluate --debug-oracle-mask on a dataset");
  const Waveform w = read_wav(c.input);
  if (w.sample_rate != 16000)
    throw ConfigError(c.input + " has sample rate " + std::to_string(w.sample_rate) + ", expected 16000");
  SeparationResult r;
  if (c.debug_unit_mask) {
    const Spectrogram mix = stft(w);
    r = resynthesize_streams(mix, unit_window_masks(mix.frames, mix.bins(), c.model.window, c.model.hop_frames()));
  } else {
    Separator model(c.model, c.seed);
    load_weights(model, c.checkpoint);
    r = separate_recording(w, model);
  }
  make_out_dir(c);
  write_resolved(c);
  const fs::path dir(c.out);
  write_wav((dir / "stream1.wav").string(), r.stream1, WavFormat::kFloat32);
  write_wav((dir / "stream2.wav").string(), r.stream2, WavFormat::kFloat32);
  Json rep = {{"input", c.input},
              {"mask_source", c.debug_unit_mask ? "unit" : "model"},
              {"frames", r.report.frames},
              {"windows", r.report.windows},
              {"window", c.model.window},
              {"hop", c.model.hop_frames()}};
  Json perm = Json::array();
  for (std::size_t b = 0; b < r.report.swapped.size(); ++b) {
    Json e = {{"window", b}, {"swapped", static_cast<bool>(r.report.swapped[b])}};
    if (b > 0) e["margin"] = r.report.margins[b - 1];
    perm.push_back(e);
  }
  rep["permutations"] = perm;
  write_json(dir / "separation.json", rep);
  std::size_t swaps = 0;
  for (bool s : r.report.swapped) swaps += s;
  out << "separated " << c.input << ": " << r.report.windows << " windows, " << swaps << " swapped\n"
      << "  timings (s): stft " << r.report.seconds_stft << ", separate " << r.report.seconds_separate << ", stitch "
      << r.report.seconds_stitch << ", resynth " << r.report.seconds_resynth << "\n";
  return kExitOk;
}

struct EvalRow {
  std::string name;
  std::vector<WindowScore> scores;  // per meeting, concatenated
  std::array<double, kOverlapBuckets> sums{};
  WindowSnrReport report;
  std::vector<double> stream_snrs;

  void add(const WindowSnrReport& r) {
    for (std::size_t i = 0; i < kOverlapBuckets; ++i) {
      sums[i] += r.buckets[i].mean_snr * static_cast<double>(r.buckets[i].count);
      report.buckets[i].count += r.buckets[i].count;
    }
    report.windows += r.windows;
    report.padded_excluded += r.padded_excluded;
    report.silent_excluded += r.silent_excluded;
  }
  void finish() {
    for (std::size_t i = 0; i < kOverlapBuckets; ++i)
      if (report.buckets[i].count) report.buckets[i].mean_snr = sums[i] / static_cast<double>(report.buckets[i].count);
  }
  Json json() const {
    Json b = Json::array();
    for (std::size_t i = 0; i < kOverlapBuckets; ++i)
      b.push_back({{"overlap", kBucketLabels[i]}, {"count", report.buckets[i].count},
                   {"mean_snr_db", report.buckets[i].count ? Json(report.buckets[i].mean_snr) : Json(nullptr)}});
    return {{"name", name},
            {"windows", report.windows},
            {"padded_excluded", report.padded_excluded},
            {"silent_excluded", report.silent_excluded},
            {"buckets", b},
            {"stream_snr_db", mean(stream_snrs)},
            {"stream_snr_per_meeting", snr_list(stream_snrs)}};
  }
};

inline int evaluate(RunConfig c, std::ostream& out) {
  const auto meetings = load_meetings(c.dataset);
  const std::size_t K = c.model.window, P = c.model.hop_frames();
  std::optional<Separator> model;
  std::string model_row = "model";
  if (c.debug_oracle_mask) model_row = "model (oracle masks)";
  else if (c.debug_unit_mask) model_row = "model (unit masks)";
  else {
    model.emplace(c.model, c.seed);
    load_weights(*model, c.checkpoint);
  }
  EvalRow rows[3];
  rows[0].name = model_row;
  rows[1].name = "oracle";
  rows[2].name = "mixture";
  for (const auto& m : meetings) {
    if (m.refs.empty() || m.streams[0].samples.empty())
      throw ConfigError("evaluate: meeting without reference signals");
    const auto ds = make_windows({m}, K, P);
    const Spectrogram mix = stft(m.mixture);
    const std::size_t total = window_count(mix.frames, K, P);
    const Spectrogram s1 = stft(m.streams[0]), s2 = stft(m.streams[1]);
    std::vector<double> buf;
    const auto* weights = stitch_weights(c.model, mix, buf);
    const auto oracle = resynthesize_streams(mix, oracle_window_masks(mix, s1, s2, K, P), weights);
    const auto unit = resynthesize_streams(mix, unit_window_masks(mix.frames, mix.bins(), K, P), weights);

    std::vector<double> snrs[3];
    snrs[1] = oracle_window_snrs(ds);
    snrs[2] = mixture_window_snrs(ds);
    SeparationResult sep;
    if (c.debug_oracle_mask) {
      snrs[0] = snrs[1];
      sep = oracle;
    } else if (c.debug_unit_mask) {
      snrs[0] = snrs[2];
      sep = unit;
    } else {
      snrs[0] = window_snrs(*model, ds);
      sep = separate_recording(m.mixture, *model);
    }
    const SeparationResult* streams[3] = {&sep, &oracle, &unit};
    for (int r = 0; r < 3; ++r) {
      std::vector<WindowScore> scores;
      for (std::size_t i = 0; i < ds.size(); ++i) scores.push_back({snrs[r][i], ds.items[i].start_frame, false});
      auto rep = window_snr_report(scores, m.activity, K);
      rep.padded_excluded = total - ds.size();
      rows[r].add(rep);
      rows[r].stream_snrs.push_back(
          -pit_loss(streams[r]->stream1, streams[r]->stream2, m.streams[0], m.streams[1]).loss);
    }
  }
  make_out_dir(c);
  write_resolved(c);
  Json records = {{"dataset", c.dataset}, {"meetings", meetings.size()}, {"window", K}, {"hop", P}};
  Json jr = Json::array();
  for (auto& r : rows) {
    r.finish();
    out << r.report.table("pre-stitching window SNR (dB): " + r.name);
    jr.push_back(r.json());
  }
  records["rows"] = jr;
  char line[128];
  out << "post-stitching stream SNR (dB)\n";
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "  %-22s %9.2f\n", r.name.c_str(), mean(r.stream_snrs));
    out << line;
  }
  write_json(fs::path(c.out) / "evaluation.json", records);
  return kExitOk;
}

inline int profile(const RunConfig& c, std::ostream& out) {
  Workload wl;
  wl.frames = c.profile_frames;
  wl.window = c.model.window;
  wl.hop = c.model.hop_frames();
  const auto rep = count_macs(c.model, wl);
  out << rep.table();
  Json j = {{"arch", rep.arch},
            {"frames", wl.frames},
            {"window", wl.window},
            {"hop", wl.hop},
            {"params", rep.total_params()},
            {"macs", rep.total_macs()}};
  Json layers = Json::array();
  for (const auto& l : rep.layers) layers.push_back({{"name", l.name}, {"params", l.params}, {"macs", l.macs}});
  j["layers"] = layers;
  if (c.model.arch == Arch::kDpTransformerBoosted) {
    const double ratio = boosted_mac_ratio(c.model, wl);
    j["boosted_over_plain_macs"] = ratio;
    out << "boosted / plain MACs (lambda " << c.model.lambda << "): " << ratio << "\n";
  }
  make_out_dir(c);
  write_resolved(c);
  write_json(fs::path(c.out) / "profile.json", j);
  return kExitOk;
}

}  // namespace detail::cli

/// Parses `args` (program name first) and runs one subcommand.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Continuous speech separation toolkit", "css"};
  app.require_subcommand(1);
  CliFlags f;
  const std::vector<std::pair<const char*, const char*>> cmds = {
      {"simulate", "simulate a meeting dataset"},
      {"train", "train a separator on a dataset directory"},
      {"separate", "separate a WAV recording into two streams"},
      {"evaluate", "score a checkpoint on a dataset"},
      {"profile", "count parameters and MACs"}};
  for (const auto& [name, help] : cmds) {
    auto* s = app.add_subcommand(name, help);
    s->add_option("--config", f.config, "JSON config file")->check(CLI::ExistingFile);
    s->add_option("--seed", f.seed, "random seed");
    s->add_option("--out", f.out, "output directory");
    s->add_option("--arch", f.arch, "separator architecture");
    s->add_option("--window-frames", f.window_frames, "window size K")->check(CLI::IsMember({50, 100, 150, 200}));
    s->add_option("--hop-frames", f.hop_frames, "window hop P (default K/2)")->check(CLI::PositiveNumber);
    s->add_option("--lambda", f.lambda, "boosted model resampling factor")->check(CLI::PositiveNumber);
    s->add_option("--online", f.online, "unidirectional global layer");
    s->add_option("--debug-oracle-mask", f.debug_oracle_mask, "use oracle masks instead of the model");
    s->add_option("--debug-unit-mask", f.debug_unit_mask, "use unit masks instead of the model");
    s->add_option("--checkpoint", f.checkpoint, "model checkpoint");
    if (std::string(name) != "simulate" && std::string(name) != "profile")
      s->add_option("inputs", f.positional, "dataset directory or input WAV");
  }
  std::vector<char*> argv;
  std::vector<std::string> copy = args;
  for (auto& a : copy) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }
  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    RunConfig c = resolve_config(f);
    const auto& pos = f.positional;
    if (cmd == "simulate") return detail::cli::simulate(c, out, err);
    if (cmd == "profile") return detail::cli::profile(c, out);
    if (pos.size() > (cmd == "evaluate" ? 2u : 1u)) throw ConfigError(cmd + ": too many positional arguments");
    if (cmd == "train") {
      if (!pos.empty()) c.train.dataset = pos[0];
      return detail::cli::train(c, out);
    }
    if (cmd == "separate") {
      if (!pos.empty()) c.input = pos[0];
      return detail::cli::separate(c, out);
    }
    if (!pos.empty()) c.dataset = pos[0];
    if (pos.size() > 1) c.checkpoint = pos[1];
    return detail::cli::evaluate(c, out);
  } catch (const ConfigError& e) {
    err << "css " << cmd << ": configuration error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "css " << cmd << ": error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace css
