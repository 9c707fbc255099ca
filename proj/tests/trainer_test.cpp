#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "css/dataset.hpp"
#include "css/trainer.hpp"

namespace {

css::SeparatorConfig tiny(css::Arch arch) {
  css::SeparatorConfig c;
  c.arch = arch;
  c.window = 20;
  c.hop = 10;
  c.feature_dim = 8;
  c.repeats = arch == css::Arch::kDpTransformerBoosted ? 3 : 2;
  c.heads = 2;
  c.ff_dim = 16;
  c.rnn_hidden = 6;
  c.online_hidden = 6;
  return c;
}

const css::WindowDataset& toy_windows() {
  static const css::WindowDataset ds = [] {
    css::SimConfig sc;
    sc.min_duration_s = sc.max_duration_s = 1.5;
    sc.min_speakers = sc.max_speakers = 2;
    sc.min_snr_db = sc.max_snr_db = 20.0;
    std::vector<css::MeetingScenario> ms{css::generate_meeting(sc, 5, 0)};
    return css::make_windows(ms, 20, 10);
  }();
  return ds;
}

std::vector<std::size_t> first(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

}  // namespace

TEST(LrSchedule, WarmupPeaksAtBase) {
  css::OptimizerConfig c;
  c.base_lr = 0.002;
  c.warmup = 25000;
  EXPECT_NEAR(css::lr_schedule(25000, {}, c), 0.002, 1e-15);
  EXPECT_NEAR(css::lr_schedule(12500, {}, c), 0.001, 1e-15);
  EXPECT_NEAR(css::lr_schedule(100000, {}, c), 0.002 * std::sqrt(25000.0 / 100000.0), 1e-15);
  EXPECT_LT(css::lr_schedule(25001, {}, c), 0.002);
  EXPECT_THROW(css::lr_schedule(0, {}, c), css::ContractError);
}

TEST(LrSchedule, PlateauDecaysOnNonImprovingEpochs) {
  auto c = css::default_optimizer(css::Arch::kDpBlstm);
  EXPECT_DOUBLE_EQ(c.base_lr, 0.001);
  EXPECT_DOUBLE_EQ(css::lr_schedule(1, {}, c), 0.001);
  EXPECT_DOUBLE_EQ(css::lr_schedule(1, {-3.0, -2.0, -2.5, -2.9}, c), 0.001 * 0.9 * 0.9 * 0.9);
  EXPECT_DOUBLE_EQ(css::lr_schedule(1, {-3.0, -4.0, -5.0}, c), 0.001);
  EXPECT_DOUBLE_EQ(css::default_optimizer(css::Arch::kTransformerBaseline).base_lr, 0.002);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  css::ParamStore ps;
  css::Rng rng(1);
  auto w = ps.uniform("w", {3, 4}, 1.0, rng);
  const std::vector<double> before(w.data().begin(), w.data().end());
  w.mutable_grad();  // allocated, all zero
  css::OptimizerState st;
  css::OptimizerConfig c;
  for (int i = 0; i < 5; ++i) css::adam_step(ps, st, 0.01, c);
  EXPECT_EQ(std::vector<double>(w.data().begin(), w.data().end()), before);
}

TEST(Adam, ConstantGradientStepsApproachLearningRate) {
  // With g constant, m_hat = g and v_hat = g^2, so each step is lr * sign(g)
  // up to eps / |g|.
  css::ParamStore ps;
  auto w = ps.add("w", css::Tensor::from({2}, {0.0, 0.0}));
  css::OptimizerState st;
  css::OptimizerConfig c;
  double prev0 = 0.0, prev1 = 0.0;
  for (int i = 0; i < 200; ++i) {
    auto g = w.mutable_grad();
    g[0] = 0.3;
    g[1] = -2.0;
    css::adam_step(ps, st, 0.01, c);
    const double d0 = w.data()[0] - prev0, d1 = w.data()[1] - prev1;
    prev0 = w.data()[0];
    prev1 = w.data()[1];
    EXPECT_NEAR(d0, -0.01, 1e-8);
    EXPECT_NEAR(d1, 0.01, 1e-8);
  }
}

TEST(Windows, ReferencesAlignWithStreams) {
  const auto& ds = toy_windows();
  ASSERT_GE(ds.size(), 3u);
  EXPECT_EQ(ds.samples, 19u * 256u);
  // Oracle masks resynthesize close to the references; the raw mixture
  // does not.
  const auto oracle = css::oracle_window_snrs(ds);
  const auto mix = css::mixture_window_snrs(ds);
  EXPECT_GT(css::mean(oracle), css::mean(mix) + 5.0);
}

TEST(Objective, InvariantToSwappingReferences) {
  auto ds = toy_windows();
  css::Separator model(tiny(css::Arch::kDpTransformer), 3);
  const auto a = css::window_snrs(model, ds);
  for (auto& w : ds.items) std::swap(w.ref1, w.ref2);
  const auto b = css::window_snrs(model, ds);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_DOUBLE_EQ(a[i], b[i]);
}

TEST(Objective, UntrainedModelMatchesMixtureBaseline) {
  const auto& ds = toy_windows();
  for (auto arch : {css::Arch::kDpTransformer, css::Arch::kDpBlstm}) {
    css::Separator model(tiny(arch), 4);
    EXPECT_NEAR(css::mean(css::window_snrs(model, ds)), css::mean(css::mixture_window_snrs(ds)), 1.5)
        << css::arch_name(arch);
  }
}

class GradientFlow : public ::testing::TestWithParam<css::Arch> {};

TEST_P(GradientFlow, EveryParameterGroupReceivesGradient) {
  const auto& ds = toy_windows();
  css::Separator model(tiny(GetParam()), 9);
  model.params().zero_grad();
  const auto pit = css::window_objective(model, css::make_batch(ds, first(2)), ds.stft);
  css::backward(pit.loss);
  // Group weight and bias of one projection together: the key bias alone has
  // an identically zero gradient under softmax.
  std::map<std::string, double> norm;
  for (const auto& [name, t] : model.params().entries()) {
    const auto group = name.substr(0, name.rfind('.'));
    double s = 0.0;
    if (t.has_grad())
      for (double g : t.grad()) s += g * g;
    norm[group] += s;
  }
  for (const auto& [group, s] : norm) EXPECT_GT(s, 0.0) << group;
}

INSTANTIATE_TEST_SUITE_P(Archs, GradientFlow,
                         ::testing::Values(css::Arch::kBlstmBaseline, css::Arch::kDpBlstm,
                                           css::Arch::kTransformerBaseline, css::Arch::kDpTransformer,
                                           css::Arch::kDpTransformerBoosted),
                         [](const auto& info) {
                           std::string s = css::arch_name(info.param);
                           for (auto& ch : s)
                             if (ch == '-') ch = '_';
                           return s;
                         });

TEST(Train, LossDecreasesAndBestIsTracked) {
  const auto& ds = toy_windows();
  css::Separator model(tiny(css::Arch::kDpTransformer), 2);
  css::TrainConfig tc;
  tc.epochs = 6;
  tc.steps_per_epoch = 10;
  tc.batch_size = 4;
  tc.opt.warmup = 20;
  css::TrainState st;
  const double before = css::evaluate_loss(model, ds);
  css::train(model, ds, nullptr, tc, st);
  ASSERT_EQ(st.history.size(), 6u);
  EXPECT_LT(st.best_val, before);
  double best = 1e300;
  for (const auto& h : st.history) best = std::min(best, h.val_loss);
  EXPECT_DOUBLE_EQ(best, st.best_val);
  EXPECT_EQ(st.history.back().step, 60u);
  // The retained snapshot reproduces the best validation loss.
  css::Separator restored(tiny(css::Arch::kDpTransformer), 77);
  css::restore(restored.params(), st.best.front().second);
  EXPECT_NEAR(css::evaluate_loss(restored, ds), st.best_val, 1e-12);
}

TEST(Train, DeterministicReplay) {
  const auto& ds = toy_windows();
  auto run = [&] {
    css::Separator model(tiny(css::Arch::kDpBlstm), 6);
    css::TrainConfig tc;
    tc.epochs = 2;
    tc.steps_per_epoch = 3;
    tc.batch_size = 2;
    tc.seed = 11;
    tc.opt = css::default_optimizer(css::Arch::kDpBlstm);
    css::TrainState st;
    css::train(model, ds, nullptr, tc, st);
    return css::snapshot(model.params());
  };
  const auto a = run(), b = run();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].values, b[i].values) << a[i].name;
}

TEST(Train, ResumeReproducesNextStepExactly) {
  const auto& ds = toy_windows();
  const auto cfg = tiny(css::Arch::kDpTransformerBoosted);
  css::TrainConfig tc;
  tc.epochs = 2;
  tc.steps_per_epoch = 4;
  tc.batch_size = 2;
  tc.seed = 3;
  tc.opt.warmup = 10;

  // Continuous run of 7 steps.
  css::Separator a(cfg, 1);
  css::TrainState sa;
  auto t7 = tc;
  t7.max_steps = 7;
  css::train(a, ds, nullptr, t7, sa);

  // 6 steps, checkpoint to disk, restore into a fresh model, one more step.
  css::Separator b(cfg, 1);
  css::TrainState sb;
  auto t6 = tc;
  t6.max_steps = 6;
  css::train(b, ds, nullptr, t6, sb);
  const auto path = (std::filesystem::temp_directory_path() / "css_trainer_resume.ckpt").string();
  css::write_checkpoint(path, css::training_snapshot(b, sb));
  css::Separator c(cfg, 999);
  css::TrainState sc;
  css::restore_training(c, sc, css::read_checkpoint(path));
  EXPECT_EQ(sc.opt.step, 6u);
  EXPECT_EQ(sc.history.size(), sb.history.size());
  css::train(c, ds, nullptr, t7, sc);

  const auto pa = css::snapshot(a.params()), pc = css::snapshot(c.params());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].values, pc[i].values) << pa[i].name;
  std::filesystem::remove(path);
  std::filesystem::remove(path + ".manifest.txt");
}

TEST(Train, NonFiniteLossNamesTheBatch) {
  auto ds = toy_windows();
  ds.items[1].mag[5] = std::nan("");
  css::Separator model(tiny(css::Arch::kDpTransformer), 1);
  css::TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 1;
  tc.steps_per_epoch = ds.size();
  css::TrainState st;
  try {
    css::train(model, ds, nullptr, tc, st);
    FAIL() << "expected NumericError";
  } catch (const css::NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("batch"), std::string::npos);
  }
}

TEST(Checkpoints, AveragingIsElementwiseMean) {
  std::vector<css::NamedArray> a{{"w", {2}, {1.0, 2.0}}}, b{{"w", {2}, {3.0, 6.0}}};
  const auto m = css::average_snapshots({a, b});
  EXPECT_EQ(m[0].values, (std::vector<double>{2.0, 4.0}));
  std::vector<css::NamedArray> c{{"v", {2}, {0.0, 0.0}}};
  EXPECT_THROW(css::average_snapshots({a, c}), css::ShapeError);
}
