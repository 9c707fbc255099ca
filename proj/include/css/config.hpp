#pragma once

// JSON run configuration shared by the command-line tools. Every section
// rejects keys it does not know.

#include <cstdint>
#include <set>
#include <string>

#include <json.hpp>

#include "css/dataset.hpp"
#include "css/profile.hpp"
#include "css/separator.hpp"
#include "css/trainer.hpp"

namespace css {

using Json = nlohmann::ordered_json;

struct TrainSection {
  std::string dataset, val_dataset, resume;
  std::size_t epochs = 10, steps_per_epoch = 0, max_steps = 0, batch_size = 2, keep_best = 1;
  double lr = 0.0;               // 0: architecture default
  std::string schedule = "auto";  // auto | warmup | plateau
  std::size_t warmup = 25000;
  double plateau_decay = 0.9, clip_norm = 5.0;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out = "out";
  std::string checkpoint, input, dataset;
  bool debug_oracle_mask = false, debug_unit_mask = false;
  SeparatorConfig model{};
  SimConfig sim{};
  TrainSection train{};
  std::size_t profile_frames = 3751;

  OptimizerConfig optimizer() const {
    OptimizerConfig o = default_optimizer(model.arch);
    if (train.lr > 0.0) o.base_lr = train.lr;
    if (train.schedule == "warmup") o.schedule = LrSchedule::kWarmup;
    else if (train.schedule == "plateau") o.schedule = LrSchedule::kPlateau;
    else if (train.schedule != "auto") throw ConfigError("train.schedule must be auto, warmup or plateau");
    o.warmup = train.warmup;
    o.plateau_decay = train.plateau_decay;
    o.clip_norm = train.clip_norm;
    return o;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.epochs = train.epochs;
    t.steps_per_epoch = train.steps_per_epoch;
    t.max_steps = train.max_steps;
    t.batch_size = train.batch_size;
    t.keep_best = train.keep_best;
    t.seed = seed;
    t.opt = optimizer();
    return t;
  }
};

namespace detail::config {

inline void check_keys(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> known) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  const std::set<std::string> ok(known.begin(), known.end());
  for (const auto& [k, _] : j.items())
    if (!ok.count(k)) throw ConfigError("unknown key '" + (where.empty() ? k : where + "." + k) + "'");
}

template <typename T>
void take(const nlohmann::json& j, const char* key, T& dst, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("bad value for '" + where + "." + key + "': " + j.at(key).dump());
  }
}

}  // namespace detail::config

inline Json to_json(const SeparatorConfig& c) {
  return {{"arch", arch_name(c.arch)},
          {"window", c.window},
          {"hop", c.hop_frames()},
          {"bins", c.bins},
          {"feature_dim", c.feature_dim},
          {"repeats", c.num_repeats()},
          {"rnn_hidden", c.rnn_hidden},
          {"online_hidden", c.online_hidden},
          {"heads", c.heads},
          {"ff_dim", c.ff_dim},
          {"online", c.online},
          {"lambda", c.lambda},
          {"conv_kernel", c.conv_kernel},
          {"stitch_on_magnitudes", c.stitch_on_magnitudes}};
}

inline void from_json(const nlohmann::json& j, SeparatorConfig& c) {
  using namespace detail::config;
  check_keys(j, "model",
             {"arch", "window", "hop", "bins", "feature_dim", "repeats", "rnn_hidden", "online_hidden", "heads", "ff_dim",
              "online", "lambda", "conv_kernel", "stitch_on_magnitudes"});
  std::string arch = arch_name(c.arch);
  take(j, "arch", arch, "model");
  c.arch = parse_arch(arch);
  take(j, "window", c.window, "model");
  take(j, "hop", c.hop, "model");
  take(j, "bins", c.bins, "model");
  take(j, "feature_dim", c.feature_dim, "model");
  take(j, "repeats", c.repeats, "model");
  take(j, "rnn_hidden", c.rnn_hidden, "model");
  take(j, "online_hidden", c.online_hidden, "model");
  take(j, "heads", c.heads, "model");
  take(j, "ff_dim", c.ff_dim, "model");
  take(j, "online", c.online, "model");
  take(j, "lambda", c.lambda, "model");
  take(j, "conv_kernel", c.conv_kernel, "model");
  take(j, "stitch_on_magnitudes", c.stitch_on_magnitudes, "model");
}

inline Json to_json(const SimConfig& c) {
  return {{"meetings", c.meetings},
          {"min_duration_s", c.min_duration_s},
          {"max_duration_s", c.max_duration_s},
          {"min_overlap", c.min_overlap},
          {"max_overlap", c.max_overlap},
          {"min_snr_db", c.min_snr_db},
          {"max_snr_db", c.max_snr_db},
          {"min_speakers", c.min_speakers},
          {"max_speakers", c.max_speakers},
          {"style", source_style_name(c.style)},
          {"min_utterance_s", c.meeting.min_utterance_s},
          {"max_utterance_s", c.meeting.max_utterance_s},
          {"max_gain_db", c.meeting.max_gain_db},
          {"max_order", c.meeting.max_order},
          {"reverberant", c.meeting.reverberant}};
}

inline void from_json(const nlohmann::json& j, SimConfig& c) {
  using namespace detail::config;
  check_keys(j, "sim",
             {"meetings", "min_duration_s", "max_duration_s", "min_overlap", "max_overlap", "min_snr_db", "max_snr_db",
              "min_speakers", "max_speakers", "style", "min_utterance_s", "max_utterance_s", "max_gain_db", "max_order",
              "reverberant"});
  take(j, "meetings", c.meetings, "sim");
  take(j, "min_duration_s", c.min_duration_s, "sim");
  take(j, "max_duration_s", c.max_duration_s, "sim");
  take(j, "min_overlap", c.min_overlap, "sim");
  take(j, "max_overlap", c.max_overlap, "sim");
  take(j, "min_snr_db", c.min_snr_db, "sim");
  take(j, "max_snr_db", c.max_snr_db, "sim");
  take(j, "min_speakers", c.min_speakers, "sim");
  take(j, "max_speakers", c.max_speakers, "sim");
  std::string style = source_style_name(c.style);
  take(j, "style", style, "sim");
  c.style = parse_source_style(style);
  take(j, "min_utterance_s", c.meeting.min_utterance_s, "sim");
  take(j, "max_utterance_s", c.meeting.max_utterance_s, "sim");
  take(j, "max_gain_db", c.meeting.max_gain_db, "sim");
  take(j, "max_order", c.meeting.max_order, "sim");
  take(j, "reverberant", c.meeting.reverberant, "sim");
}

inline Json to_json(const TrainSection& t) {
  return {{"dataset", t.dataset},       {"val_dataset", t.val_dataset},
          {"resume", t.resume},         {"epochs", t.epochs},
          {"steps_per_epoch", t.steps_per_epoch}, {"max_steps", t.max_steps},
          {"batch_size", t.batch_size}, {"keep_best", t.keep_best},
          {"lr", t.lr},                 {"schedule", t.schedule},
          {"warmup", t.warmup},         {"plateau_decay", t.plateau_decay},
          {"clip_norm", t.clip_norm}};
}

inline void from_json(const nlohmann::json& j, TrainSection& t) {
  using namespace detail::config;
  check_keys(j, "train",
             {"dataset", "val_dataset", "resume", "epochs", "steps_per_epoch", "max_steps", "batch_size", "keep_best",
              "lr", "schedule", "warmup", "plateau_decay", "clip_norm"});
  take(j, "dataset", t.dataset, "train");
  take(j, "val_dataset", t.val_dataset, "train");
  take(j, "resume", t.resume, "train");
  take(j, "epochs", t.epochs, "train");
  take(j, "steps_per_epoch", t.steps_per_epoch, "train");
  take(j, "max_steps", t.max_steps, "train");
  take(j, "batch_size", t.batch_size, "train");
  take(j, "keep_best", t.keep_best, "train");
  take(j, "lr", t.lr, "train");
  take(j, "schedule", t.schedule, "train");
  take(j, "warmup", t.warmup, "train");
  take(j, "plateau_decay", t.plateau_decay, "train");
  take(j, "clip_norm", t.clip_norm, "train");
}

inline Json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"out", c.out},
          {"checkpoint", c.checkpoint},
          {"input", c.input},
          {"dataset", c.dataset},
          {"debug_oracle_mask", c.debug_oracle_mask},
          {"debug_unit_mask", c.debug_unit_mask},
          {"profile_frames", c.profile_frames},
          {"model", to_json(c.model)},
          {"sim", to_json(c.sim)},
          {"train", to_json(c.train)}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  using namespace detail::config;
  check_keys(j, "",
             {"seed", "out", "checkpoint", "input", "dataset", "debug_oracle_mask", "debug_unit_mask", "profile_frames",
              "model", "sim", "train"});
  take(j, "seed", c.seed, "");
  take(j, "out", c.out, "");
  take(j, "checkpoint", c.checkpoint, "");
  take(j, "input", c.input, "");
  take(j, "dataset", c.dataset, "");
  take(j, "debug_oracle_mask", c.debug_oracle_mask, "");
  take(j, "debug_unit_mask", c.debug_unit_mask, "");
  take(j, "profile_frames", c.profile_frames, "");
  if (j.contains("model")) from_json(j.at("model"), c.model);
  if (j.contains("sim")) from_json(j.at("sim"), c.sim);
  if (j.contains("train")) from_json(j.at("train"), c.train);
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is, nullptr, true, true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  RunConfig c;
  from_json(j, c);
  return c;
}

}  // namespace css
