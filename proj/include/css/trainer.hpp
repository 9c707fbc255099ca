#pragma once

// Window-level PIT training: dataset windows cut from simulated meetings,
// Adam with warm-up or plateau schedules, best-on-validation checkpoints
// and exact resume.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "css/checkpoint.hpp"
#include "css/dsp.hpp"
#include "css/metrics.hpp"
#include "css/separator.hpp"
#include "css/sim.hpp"

namespace css {

// ---------------------------------------------------------------------------
// Windows

struct TrainWindow {
  std::vector<double> mag;     // K*F mixture magnitudes
  std::vector<Complex> phase;  // K*F mixture phasors
  std::vector<double> psm1, psm2;  // K*F oracle masks for the two streams
  std::vector<double> ref1, ref2;  // (K-1)*hop reference samples
  std::size_t meeting = 0, start_frame = 0;
  double overlap = 0.0;  // fraction of active frames with both streams active
};

struct WindowDataset {
  std::size_t window = 0, hop = 0, bins = 0, samples = 0;
  StftConfig stft{};
  std::vector<TrainWindow> items;

  std::size_t size() const { return items.size(); }
};

/// Cuts every meeting into K-frame windows with hop P. Window b spans
/// samples [b*P*hop, b*P*hop + (K-1)*hop) of the meeting; its references
/// are the two reverberant output streams over that span. Windows that run
/// past the last frame are dropped.
inline WindowDataset make_windows(const std::vector<MeetingScenario>& meetings, std::size_t K, std::size_t P,
                                  const StftConfig& stft_cfg = {}) {
  if (K < 2 || P == 0 || P > K) throw ConfigError("make_windows: need K >= 2 and 0 < P <= K");
  WindowDataset ds;
  ds.window = K;
  ds.hop = P;
  ds.bins = stft_cfg.bins();
  ds.samples = window_samples(K, stft_cfg);
  ds.stft = stft_cfg;
  const std::size_t F = ds.bins, T = ds.samples;
  for (std::size_t mi = 0; mi < meetings.size(); ++mi) {
    const auto& m = meetings[mi];
    const Spectrogram mix = stft(m.mixture, stft_cfg);
    const Spectrogram s1 = stft(m.streams[0], stft_cfg), s2 = stft(m.streams[1], stft_cfg);
    const Tensor p1 = psm_target(s1, mix), p2 = psm_target(s2, mix);
    const auto mag = mix.magnitude();
    const auto ph = phasors(mix.values);
    const std::size_t B = window_count(mix.frames, K, P);
    // Overlap per window uses stream activity: a stream is active on a frame
    // when any utterance of its parity covers the frame center.
    std::array<std::vector<bool>, 2> act{std::vector<bool>(mix.frames, false), std::vector<bool>(mix.frames, false)};
    for (std::size_t i = 0; i < m.schedule.size(); ++i) {
      const auto& u = m.schedule[i];
      for (std::size_t l = (u.onset + stft_cfg.hop - 1) / stft_cfg.hop;
           l < mix.frames && l * stft_cfg.hop < u.onset + u.length; ++l)
        act[i % 2][l] = true;
    }
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t s = b * P;
      if (s + K > mix.frames) continue;
      TrainWindow w;
      w.meeting = mi;
      w.start_frame = s;
      const auto off = static_cast<std::ptrdiff_t>(s * F);
      const auto len = static_cast<std::ptrdiff_t>(K * F);
      w.mag.assign(mag.begin() + off, mag.begin() + off + len);
      w.phase.assign(ph.begin() + off, ph.begin() + off + len);
      w.psm1.assign(p1.data().begin() + off, p1.data().begin() + off + len);
      w.psm2.assign(p2.data().begin() + off, p2.data().begin() + off + len);
      w.ref1.assign(T, 0.0);
      w.ref2.assign(T, 0.0);
      const std::size_t t0 = s * stft_cfg.hop;
      for (std::size_t t = 0; t < T && t0 + t < m.duration; ++t) {
        w.ref1[t] = m.streams[0].samples[t0 + t];
        w.ref2[t] = m.streams[1].samples[t0 + t];
      }
      std::size_t active = 0, both = 0;
      for (std::size_t l = s; l < s + K; ++l) {
        active += act[0][l] || act[1][l];
        both += act[0][l] && act[1][l];
      }
      w.overlap = active ? static_cast<double>(both) / static_cast<double>(active) : 0.0;
      ds.items.push_back(std::move(w));
    }
  }
  return ds;
}

inline WindowDataset subset(const WindowDataset& ds, const std::vector<std::size_t>& idx) {
  WindowDataset out = ds;
  out.items.clear();
  for (auto i : idx) out.items.push_back(ds.items.at(i));
  return out;
}

/// Batch of windows packed for the separator and the objective.
struct WindowBatch {
  Tensor mag;  // [B, K, F]
  std::vector<Complex> phase;
  std::vector<double> ref1, ref2, eps;
};

/// Per-window epsilon of the training SNR: 1e-3 of the mean reference
/// energy, so a silent stream caps its window term at 0 dB.
inline double window_epsilon(const std::vector<double>& r1, const std::vector<double>& r2) {
  double e = 0.0;
  for (double v : r1) e += v * v;
  for (double v : r2) e += v * v;
  return 1e-3 * e / 2.0 + 1e-12;
}

inline WindowBatch make_batch(const WindowDataset& ds, const std::vector<std::size_t>& idx) {
  const std::size_t K = ds.window, F = ds.bins, T = ds.samples, B = idx.size();
  WindowBatch b;
  std::vector<double> mag(B * K * F);
  b.phase.resize(B * K * F);
  b.ref1.resize(B * T);
  b.ref2.resize(B * T);
  for (std::size_t i = 0; i < B; ++i) {
    const auto& w = ds.items.at(idx[i]);
    std::copy(w.mag.begin(), w.mag.end(), mag.begin() + static_cast<std::ptrdiff_t>(i * K * F));
    std::copy(w.phase.begin(), w.phase.end(), b.phase.begin() + static_cast<std::ptrdiff_t>(i * K * F));
    std::copy(w.ref1.begin(), w.ref1.end(), b.ref1.begin() + static_cast<std::ptrdiff_t>(i * T));
    std::copy(w.ref2.begin(), w.ref2.end(), b.ref2.begin() + static_cast<std::ptrdiff_t>(i * T));
    b.eps.push_back(window_epsilon(w.ref1, w.ref2));
  }
  b.mag = Tensor::from({B, K, F}, std::move(mag));
  return b;
}

/// PIT objective on a batch: forward, window resynthesis, best pairing.
inline BatchPit window_objective(const Separator& model, const WindowBatch& b, const StftConfig& stft_cfg) {
  const WindowOutputs out = model.forward(b.mag);
  const Tensor e1 = istft_windows(out.mag1, b.phase, stft_cfg);
  const Tensor e2 = istft_windows(out.mag2, b.phase, stft_cfg);
  return batch_pit_loss(e1, e2, b.ref1, b.ref2, b.eps);
}

/// Mean PIT window SNR of the model over the dataset.
inline std::vector<double> window_snrs(const Separator& model, const WindowDataset& ds, std::size_t batch = 8) {
  NoGradGuard ng;
  std::vector<double> out;
  for (std::size_t s = 0; s < ds.size(); s += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = s; i < std::min(ds.size(), s + batch); ++i) idx.push_back(i);
    const auto pit = window_objective(model, make_batch(ds, idx), ds.stft);
    out.insert(out.end(), pit.snr.begin(), pit.snr.end());
  }
  return out;
}

namespace detail::train {

inline std::vector<double> masked_snrs(const WindowDataset& ds, bool oracle) {
  const std::size_t K = ds.window, F = ds.bins;
  std::vector<double> out;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto b = make_batch(ds, {i});
    const auto& w = ds.items[i];
    std::vector<double> m1(K * F), m2(K * F);
    for (std::size_t j = 0; j < K * F; ++j) {
      m1[j] = w.mag[j] * (oracle ? w.psm1[j] : 1.0);
      m2[j] = w.mag[j] * (oracle ? w.psm2[j] : 1.0);
    }
    const Tensor e1 = istft_windows(Tensor::from({1, K, F}, std::move(m1)), b.phase, ds.stft);
    const Tensor e2 = istft_windows(Tensor::from({1, K, F}, std::move(m2)), b.phase, ds.stft);
    out.push_back(batch_pit_loss(e1, e2, b.ref1, b.ref2, b.eps).snr[0]);
  }
  return out;
}

}  // namespace detail::train

/// Same metric with oracle PSM masks in place of the model: the ceiling.
inline std::vector<double> oracle_window_snrs(const WindowDataset& ds) {
  NoGradGuard ng;
  return detail::train::masked_snrs(ds, true);
}

/// Same metric with the unprocessed mixture on both outputs.
inline std::vector<double> mixture_window_snrs(const WindowDataset& ds) {
  NoGradGuard ng;
  return detail::train::masked_snrs(ds, false);
}

inline double mean(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------
// Optimizer

enum class LrSchedule { kWarmup, kPlateau };

struct OptimizerConfig {
  double base_lr = 0.002;
  LrSchedule schedule = LrSchedule::kWarmup;
  std::size_t warmup = 25000;
  double plateau_decay = 0.9;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double clip_norm = 5.0;  // <= 0 disables clipping
};

/// Base rate and schedule for an architecture: transformers warm up from
/// 0.002, recurrent models start at 0.001 and decay on plateaus.
inline OptimizerConfig default_optimizer(Arch arch) {
  OptimizerConfig c;
  if (is_transformer(arch)) {
    c.base_lr = 0.002;
    c.schedule = LrSchedule::kWarmup;
  } else {
    c.base_lr = 0.001;
    c.schedule = LrSchedule::kPlateau;
  }
  return c;
}

/// Learning rate for `step` (1-based). Warm-up: base * min(step^-0.5,
/// step * w^-1.5) * w^0.5, peaking at base when step == w. Plateau: base
/// times decay for every epoch whose validation loss is not below all
/// earlier ones.
inline double lr_schedule(std::size_t step, const std::vector<double>& epoch_val_losses, const OptimizerConfig& c) {
  if (step == 0) throw ContractError("lr_schedule: steps are 1-based");
  if (c.schedule == LrSchedule::kWarmup) {
    if (c.warmup == 0) throw ConfigError("lr_schedule: warmup must be positive");
    const double s = static_cast<double>(step), w = static_cast<double>(c.warmup);
    return c.base_lr * std::min(1.0 / std::sqrt(s), s * std::pow(w, -1.5)) * std::sqrt(w);
  }
  double lr = c.base_lr, best = std::numeric_limits<double>::infinity();
  for (std::size_t e = 0; e < epoch_val_losses.size(); ++e) {
    if (e > 0 && !(epoch_val_losses[e] < best)) lr *= c.plateau_decay;
    best = std::min(best, epoch_val_losses[e]);
  }
  return lr;
}

struct OptimizerState {
  std::vector<std::vector<double>> m, v;
  std::size_t step = 0;

  void init(const ParamStore& ps) {
    m.clear();
    v.clear();
    for (const auto& [_, t] : ps.entries()) {
      m.emplace_back(t.numel(), 0.0);
      v.emplace_back(t.numel(), 0.0);
    }
    step = 0;
  }
};

/// Global L2 norm of all parameter gradients; throws on non-finite entries.
inline double gradient_norm(const ParamStore& ps) {
  double s = 0.0;
  for (const auto& [name, t] : ps.entries()) {
    if (!t.has_grad()) continue;
    for (double g : t.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + name);
      s += g * g;
    }
  }
  return std::sqrt(s);
}

/// One bias-corrected Adam update with step size `lr`. Gradients are read
/// from the store and scaled by `grad_scale` first. Parameters without a
/// gradient are treated as having a zero one.
inline void adam_step(ParamStore& ps, OptimizerState& st, double lr, const OptimizerConfig& c, double grad_scale = 1.0) {
  if (st.m.size() != ps.entries().size()) st.init(ps);
  if (!(lr > 0.0)) throw ContractError("adam_step: learning rate must be positive");
  ++st.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.step));
  std::size_t i = 0;
  for (const auto& [name, t0] : ps.entries()) {
    Tensor t = t0;
    auto& m = st.m[i];
    auto& v = st.v[i];
    ++i;
    if (m.size() != t.numel()) throw ShapeError("adam_step: moment shape mismatch for " + name);
    const bool has = t.has_grad();
    const auto g = t.grad();
    auto p = t.mutable_data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = has ? g[k] * grad_scale : 0.0;
      if (!std::isfinite(gk)) throw NumericError("adam_step: non-finite gradient in " + name);
      m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
      v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
      p[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + c.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t steps_per_epoch = 0;  // 0: one pass over the training windows
  std::size_t max_steps = 0;        // 0: no limit
  std::size_t batch_size = 2;
  std::size_t keep_best = 1;        // snapshots retained for averaging
  std::uint64_t seed = 0;
  OptimizerConfig opt{};
};

struct EpochRecord {
  std::size_t epoch = 0, step = 0;
  double lr = 0.0, train_loss = 0.0, val_loss = 0.0;
};

struct TrainState {
  OptimizerState opt;
  std::size_t epoch = 0;         // completed epochs
  std::size_t epoch_step = 0;    // steps taken inside the current epoch
  double epoch_loss_sum = 0.0;
  std::vector<EpochRecord> history;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::vector<std::pair<double, std::vector<NamedArray>>> best;  // ascending val loss
};

/// Order in which an epoch visits the training windows; a function of
/// (seed, epoch) only, so an interrupted run can resume mid-epoch.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::size_t steps, std::size_t batch, std::uint64_t seed,
                                            std::size_t epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x74726e21u};
  std::mt19937_64 rng(seq);
  std::vector<std::size_t> order;
  while (order.size() < steps * batch) {
    std::vector<std::size_t> pass(n);
    std::iota(pass.begin(), pass.end(), 0);
    std::shuffle(pass.begin(), pass.end(), rng);
    order.insert(order.end(), pass.begin(), pass.end());
  }
  order.resize(steps * batch);
  return order;
}

struct StepResult {
  double loss = 0.0, grad_norm = 0.0, lr = 0.0;
};

/// Takes one optimizer step on `idx`. Non-finite loss raises NumericError
/// naming `batch_id`.
inline StepResult train_step(Separator& model, const WindowDataset& ds, const std::vector<std::size_t>& idx,
                             TrainState& st, const OptimizerConfig& oc, std::size_t batch_id) {
  auto& ps = model.params();
  if (st.opt.m.size() != ps.entries().size()) st.opt.init(ps);
  StepResult r;
  std::vector<double> vals;
  for (const auto& h : st.history) vals.push_back(h.val_loss);
  r.lr = lr_schedule(st.opt.step + 1, vals, oc);
  ps.zero_grad();
  const auto pit = window_objective(model, make_batch(ds, idx), ds.stft);
  r.loss = pit.loss.item();
  if (!std::isfinite(r.loss)) throw NumericError("non-finite training loss at batch " + std::to_string(batch_id));
  backward(pit.loss);
  r.grad_norm = gradient_norm(ps);
  const double scale = oc.clip_norm > 0.0 && r.grad_norm > oc.clip_norm ? oc.clip_norm / r.grad_norm : 1.0;
  adam_step(ps, st.opt, r.lr, oc, scale);
  return r;
}

/// Mean loss (negative mean PIT window SNR) without gradients.
inline double evaluate_loss(const Separator& model, const WindowDataset& ds) { return -mean(window_snrs(model, ds)); }

using EpochCallback = std::function<void(const EpochRecord&, const TrainState&)>;

/// Runs epochs until `cfg.epochs` are complete (continuing from `st`).
/// Validation uses `val` when given, else the training windows. Keeps the
/// best `keep_best` parameter snapshots by validation loss.
inline void train(Separator& model, const WindowDataset& train_set, const WindowDataset* val, const TrainConfig& cfg,
                  TrainState& st, const EpochCallback& on_epoch = {}) {
  if (train_set.size() == 0) throw ConfigError("train: no training windows");
  if (cfg.batch_size == 0) throw ConfigError("train: batch size must be positive");
  const std::size_t per_epoch =
      cfg.steps_per_epoch ? cfg.steps_per_epoch : (train_set.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t bs = std::min(cfg.batch_size, train_set.size());
  while (st.epoch < cfg.epochs) {
    const auto order = epoch_order(train_set.size(), per_epoch, bs, cfg.seed, st.epoch);
    bool stop = false;
    while (st.epoch_step < per_epoch) {
      if (cfg.max_steps && st.opt.step >= cfg.max_steps) {
        stop = true;
        break;
      }
      const auto first = order.begin() + static_cast<std::ptrdiff_t>(st.epoch_step * bs);
      const std::vector<std::size_t> idx(first, first + static_cast<std::ptrdiff_t>(bs));
      const auto r = train_step(model, train_set, idx, st, cfg.opt, st.epoch * per_epoch + st.epoch_step);
      st.epoch_loss_sum += r.loss;
      ++st.epoch_step;
    }
    if (stop && st.epoch_step < per_epoch) break;  // resumable mid-epoch
    EpochRecord rec;
    rec.epoch = st.epoch + 1;
    rec.step = st.opt.step;
    std::vector<double> vals;
    for (const auto& h : st.history) vals.push_back(h.val_loss);
    rec.lr = lr_schedule(std::max<std::size_t>(1, st.opt.step), vals, cfg.opt);
    rec.train_loss = st.epoch_loss_sum / static_cast<double>(st.epoch_step);
    rec.val_loss = evaluate_loss(model, val ? *val : train_set);
    if (!std::isfinite(rec.val_loss)) throw NumericError("non-finite validation loss after epoch " + std::to_string(rec.epoch));
    st.history.push_back(rec);
    if (rec.val_loss < st.best_val) {
      st.best_val = rec.val_loss;
      st.best_epoch = rec.epoch;
    }
    const std::size_t keep = std::max<std::size_t>(1, cfg.keep_best);
    if (st.best.size() < keep || rec.val_loss < st.best.back().first) {
      st.best.emplace_back(rec.val_loss, snapshot(model.params()));
      std::stable_sort(st.best.begin(), st.best.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
      if (st.best.size() > keep) st.best.pop_back();
    }
    ++st.epoch;
    st.epoch_step = 0;
    st.epoch_loss_sum = 0.0;
    if (on_epoch) on_epoch(rec, st);
    if (stop) break;
  }
}

/// Element-wise mean of parameter snapshots with identical layouts.
inline std::vector<NamedArray> average_snapshots(const std::vector<std::vector<NamedArray>>& snaps) {
  if (snaps.empty()) throw ContractError("average_snapshots: nothing to average");
  auto out = snaps.front();
  for (std::size_t s = 1; s < snaps.size(); ++s) {
    if (snaps[s].size() != out.size()) throw ShapeError("average_snapshots: layouts differ");
    for (std::size_t a = 0; a < out.size(); ++a) {
      if (snaps[s][a].name != out[a].name || snaps[s][a].shape != out[a].shape)
        throw ShapeError("average_snapshots: array " + out[a].name + " differs");
      for (std::size_t k = 0; k < out[a].values.size(); ++k) out[a].values[k] += snaps[s][a].values[k];
    }
  }
  for (auto& a : out)
    for (auto& v : a.values) v /= static_cast<double>(snaps.size());
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

/// Parameters under "param/", Adam moments under "adam.m/" and "adam.v/",
/// and loop counters in "state".
inline std::vector<NamedArray> training_snapshot(const Separator& model, const TrainState& st) {
  auto out = snapshot(model.params(), "param/");
  const auto& entries = model.params().entries();
  if (st.opt.m.size() == entries.size()) {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      out.push_back({"adam.m/" + entries[i].first, entries[i].second.shape(), st.opt.m[i]});
      out.push_back({"adam.v/" + entries[i].first, entries[i].second.shape(), st.opt.v[i]});
    }
  }
  out.push_back({"state", {6},
                 {static_cast<double>(st.opt.step), static_cast<double>(st.epoch), static_cast<double>(st.epoch_step),
                  st.epoch_loss_sum, st.best_val, static_cast<double>(st.best_epoch)}});
  std::vector<double> hist;
  for (const auto& h : st.history)
    hist.insert(hist.end(), {static_cast<double>(h.epoch), static_cast<double>(h.step), h.lr, h.train_loss, h.val_loss});
  out.push_back({"history", {st.history.size(), 5}, hist});
  return out;
}

inline void restore_training(Separator& model, TrainState& st, const std::vector<NamedArray>& arrays) {
  restore(model.params(), arrays, "param/");
  std::map<std::string, const NamedArray*> by;
  for (const auto& a : arrays) by[a.name] = &a;
  const auto& entries = model.params().entries();
  st = TrainState{};
  if (by.count("adam.m/" + entries.front().first)) {
    for (const auto& [name, t] : entries) {
      const auto* m = by.at("adam.m/" + name);
      const auto* v = by.at("adam.v/" + name);
      if (m->values.size() != t.numel() || v->values.size() != t.numel())
        throw ConfigError("checkpoint optimizer state for " + name + " has the wrong size");
      st.opt.m.push_back(m->values);
      st.opt.v.push_back(v->values);
    }
  }
  if (auto it = by.find("state"); it != by.end()) {
    const auto& s = it->second->values;
    if (s.size() != 6) throw IoError("checkpoint state record has " + std::to_string(s.size()) + " entries");
    st.opt.step = static_cast<std::size_t>(s[0]);
    st.epoch = static_cast<std::size_t>(s[1]);
    st.epoch_step = static_cast<std::size_t>(s[2]);
    st.epoch_loss_sum = s[3];
    st.best_val = s[4];
    st.best_epoch = static_cast<std::size_t>(s[5]);
  }
  if (auto it = by.find("history"); it != by.end()) {
    const auto& h = it->second->values;
    for (std::size_t i = 0; i + 4 < h.size(); i += 5)
      st.history.push_back({static_cast<std::size_t>(h[i]), static_cast<std::size_t>(h[i + 1]), h[i + 2], h[i + 3], h[i + 4]});
  }
}

inline std::string history_jsonl(const std::vector<EpochRecord>& h) {
  std::string s;
  char line[256];
  for (const auto& r : h) {
    std::snprintf(line, sizeof line,
                  "{\"epoch\": %zu, \"step\": %zu, \"lr\": %.9g, \"train_loss\": %.9g, \"val_loss\": %.9g}\n", r.epoch,
                  r.step, r.lr, r.train_loss, r.val_loss);
    s += line;
  }
  return s;
}

}  // namespace css
