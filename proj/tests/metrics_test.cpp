#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "css/gradcheck.hpp"
#include "css/metrics.hpp"
#include "css/profile.hpp"

namespace css {
namespace {

std::vector<double> randn(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

Spectrogram spec_of(std::vector<Complex> v, std::size_t frames) {
  Spectrogram s;
  s.frames = frames;
  s.config = StftConfig{8, 4};
  s.values = std::move(v);
  return s;
}

// --- PSM -------------------------------------------------------------------

TEST(Psm, SourceEqualsMixtureGivesOnes) {
  std::vector<Complex> v(2 * 5);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::polar(0.5 + i, 0.3 * i);
  const Tensor m = psm_target(spec_of(v, 2), spec_of(v, 2));
  for (double x : m.data()) EXPECT_NEAR(x, 1.0, 1e-12);
}

TEST(Psm, ZeroSourceGivesZeros) {
  std::vector<Complex> v(10, Complex(1.0, 2.0)), z(10);
  const Tensor m = psm_target(spec_of(z, 2), spec_of(v, 2));
  for (double x : m.data()) EXPECT_EQ(x, 0.0);
}

TEST(Psm, EqualInPhaseSourcesGiveHalf) {
  std::vector<Complex> s(10, std::polar(1.0, 0.7)), y(10, std::polar(2.0, 0.7));
  const Tensor m = psm_target(spec_of(s, 2), spec_of(y, 2));
  for (double x : m.data()) EXPECT_NEAR(x, 0.5, 1e-12);
}

TEST(Psm, ClipsToUnitInterval) {
  // Opposite phase -> negative, larger source -> above one.
  std::vector<Complex> s = {Complex(-1, 0), Complex(3, 0)}, y = {Complex(1, 0), Complex(1, 0)};
  Spectrogram a = spec_of(s, 1), b = spec_of(y, 1);
  a.config = b.config = StftConfig{2, 1};
  const auto m = psm_target(a, b);
  EXPECT_EQ(m[0], 0.0);
  EXPECT_EQ(m[1], 1.0);
  const auto raw = psm_target(a, b, false);
  EXPECT_DOUBLE_EQ(raw[0], -1.0);
  EXPECT_DOUBLE_EQ(raw[1], 3.0);
}

TEST(Psm, UnclippedMaskRecoversInPhaseComponent) {
  // Two sinusoids in the same bins: mask * Y equals the projection of S on Y.
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<Complex> s(20), n(20), y(20);
  for (std::size_t i = 0; i < 20; ++i) {
    s[i] = {u(rng), u(rng)};
    n[i] = {u(rng), u(rng)};
    y[i] = s[i] + n[i];
  }
  const auto m = psm_target(spec_of(s, 4), spec_of(y, 4), false);
  for (std::size_t i = 0; i < 20; ++i) {
    const Complex proj = std::real(s[i] * std::conj(y[i])) / std::norm(y[i]) * y[i];
    EXPECT_NEAR(std::abs(m[i] * y[i] - proj), 0.0, 1e-12);
  }
}

TEST(Psm, ShapeMismatchThrows) {
  EXPECT_THROW(psm_target(spec_of(std::vector<Complex>(10), 2), spec_of(std::vector<Complex>(15), 3)), ShapeError);
}

// --- SNR -------------------------------------------------------------------

TEST(Snr, IdenticalHitsCap) {
  const auto r = randn(100, 1);
  EXPECT_NEAR(snr(r, r), 100.0, 1e-12);
}

TEST(Snr, ZeroEstimateIsZeroDb) {
  const auto r = randn(100, 2);
  EXPECT_NEAR(snr(std::vector<double>(100, 0.0), r), 0.0, 1e-12);
}

TEST(Snr, HalfEstimate) {
  const auto r = randn(100, 3);
  std::vector<double> e(r);
  for (auto& x : e) x *= 0.5;
  EXPECT_NEAR(snr(e, r), 10.0 * std::log10(4.0), 1e-12);
}

TEST(Snr, ScaleBehaviour) {
  const auto r = randn(64, 4), n = randn(64, 5, 0.1);
  std::vector<double> e(64), e3(64), r3(64), twice(64);
  for (std::size_t i = 0; i < 64; ++i) {
    e[i] = r[i] + n[i];
    e3[i] = 3.0 * e[i];
    r3[i] = 3.0 * r[i];
    twice[i] = 2.0 * r[i];
  }
  EXPECT_NEAR(snr(e3, r3), snr(e, r), 1e-10);
  EXPECT_NEAR(snr(twice, r), 0.0, 1e-12);
}

TEST(Snr, ZeroReferenceAndLengthMismatchThrow) {
  EXPECT_THROW(snr(std::vector<double>(4, 1.0), std::vector<double>(4, 0.0)), ContractError);
  EXPECT_THROW(snr(std::vector<double>(4, 1.0), std::vector<double>(5, 1.0)), ShapeError);
}

// --- PIT -------------------------------------------------------------------

TEST(Pit, SwappedEstimatesChooseSwap) {
  const auto a = randn(50, 6), b = randn(50, 7);
  const auto p = pit_loss(a, b, b, a);
  EXPECT_TRUE(p.swapped);
  EXPECT_NEAR(p.loss, -100.0, 1e-9);
}

TEST(Pit, OrthogonalIdentity) {
  std::vector<double> a(8, 0.0), b(8, 0.0);
  a[0] = 1.0;
  b[1] = 1.0;
  const auto p = pit_loss(a, b, a, b);
  EXPECT_FALSE(p.swapped);
}

TEST(Pit, MatchesBruteForce) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto e1 = randn(40, 10 * s + 1), e2 = randn(40, 10 * s + 2);
    const auto r1 = randn(40, 10 * s + 3), r2 = randn(40, 10 * s + 4);
    const double id = -(snr(e1, r1) + snr(e2, r2)) / 2.0;
    const double sw = -(snr(e1, r2) + snr(e2, r1)) / 2.0;
    const auto p = pit_loss(e1, e2, r1, r2);
    EXPECT_EQ(p.loss, std::min(id, sw));
    EXPECT_EQ(p.swapped, sw < id);
  }
}

TEST(BatchPit, ValuesMatchPitAndGradientChecks) {
  const std::size_t B = 3, T = 12;
  std::vector<double> r1 = randn(B * T, 20), r2 = randn(B * T, 21);
  Tensor e1 = Tensor::from({B, T}, randn(B * T, 22), true);
  Tensor e2 = Tensor::from({B, T}, randn(B * T, 23), true);
  std::vector<double> eps(B, 1e-9);
  const auto bp = batch_pit_loss(e1, e2, r1, r2, eps);
  double expect = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    auto sl = [&](const std::vector<double>& v) { return std::span<const double>(v.data() + b * T, T); };
    const std::vector<double> a(e1.data().begin() + b * T, e1.data().begin() + (b + 1) * T);
    const std::vector<double> c(e2.data().begin() + b * T, e2.data().begin() + (b + 1) * T);
    const auto p = pit_loss(a, c, sl(r1), sl(r2));
    EXPECT_EQ(bool(bp.swapped[b]), p.swapped);
    expect += p.loss / B;
  }
  EXPECT_NEAR(bp.loss.item(), expect, 1e-6);
  const double err = grad_check([&] { return batch_pit_loss(e1, e2, r1, r2, eps).loss; }, {e1, e2});
  EXPECT_LT(err, 1e-5);
}

TEST(BatchSnr, SilentReferenceRewardsSilence) {
  Tensor e = Tensor::from({1, 4}, {0.1, -0.1, 0.2, 0.0}, true);
  const std::vector<double> ref(4, 0.0), eps{1e-4};
  EXPECT_LT(batch_snr(e, ref, eps)[0], 0.0);
  Tensor z = Tensor::zeros({1, 4});
  EXPECT_NEAR(batch_snr(z, ref, eps)[0], 0.0, 1e-12);
}

// --- Overlap and buckets ------------------------------------------------------

TEST(Overlap, CountingCases) {
  Activity full = {std::vector<bool>(10, true), std::vector<bool>(10, true)};
  EXPECT_EQ(overlap_ratio(full), 1.0);
  Activity seq(2, std::vector<bool>(10, false));
  for (int i = 0; i < 5; ++i) seq[0][i] = true;
  for (int i = 5; i < 10; ++i) seq[1][i] = true;
  EXPECT_EQ(overlap_ratio(seq), 0.0);
  Activity part(2, std::vector<bool>(120, false));
  for (int i = 0; i < 100; ++i) part[0][i] = true;
  for (int i = 70; i < 100; ++i) part[1][i] = true;
  EXPECT_DOUBLE_EQ(overlap_ratio(part), 0.30);
  Activity silent(2, std::vector<bool>(10, false));
  EXPECT_THROW(overlap_ratio(silent), ContractError);
}

TEST(Buckets, EdgeConvention) {
  EXPECT_EQ(overlap_bucket(0.0), 0u);
  EXPECT_EQ(overlap_bucket(0.01), 1u);
  EXPECT_EQ(overlap_bucket(0.25), 2u);
  EXPECT_EQ(overlap_bucket(0.5), 3u);
  EXPECT_EQ(overlap_bucket(0.75), 4u);
  EXPECT_EQ(overlap_bucket(1.0), 4u);
}

TEST(WindowReport, SingleSpeakerOnlyZeroBucket) {
  Activity act = {std::vector<bool>(100, true), std::vector<bool>(100, false)};
  std::vector<WindowScore> w = {{5.0, 0, false}, {7.0, 25, false}, {9.0, 50, false}};
  const auto rep = window_snr_report(w, act, 50);
  EXPECT_EQ(rep.buckets[0].count, 3u);
  EXPECT_DOUBLE_EQ(rep.buckets[0].mean_snr, 7.0);
  for (std::size_t i = 1; i < kOverlapBuckets; ++i) EXPECT_EQ(rep.buckets[i].count, 0u);
}

TEST(WindowReport, HalfOverlapLandsIn50To75) {
  Activity act = {std::vector<bool>(50, true), std::vector<bool>(50, false)};
  for (int i = 0; i < 25; ++i) act[1][i] = true;
  const auto rep = window_snr_report({{3.0, 0, false}, {3.0, 0, false}, {1.0, 0, true}}, act, 50);
  EXPECT_EQ(rep.buckets[3].count, 2u);
  EXPECT_DOUBLE_EQ(rep.buckets[3].mean_snr, 3.0);
  EXPECT_EQ(rep.padded_excluded, 1u);
  EXPECT_EQ(rep.windows, 2u);
}

TEST(WindowReport, MissingActivityThrows) { EXPECT_THROW(window_snr_report({}, {}, 10), ContractError); }

// --- Compute counting ---------------------------------------------------------

SeparatorConfig full_size_cfg(Arch a) {
  SeparatorConfig c;
  c.arch = a;
  return c;
}

TEST(Profile, TransformerBaselineSize) {
  const double m = count_params(full_size_cfg(Arch::kTransformerBaseline)).total_params() * 1e-6;
  EXPECT_NEAR(m, 8.2, 0.05 * 8.2);
}

TEST(Profile, DpTransformerMatchesBaseline) {
  const double a = count_params(full_size_cfg(Arch::kTransformerBaseline)).total_params();
  const double b = count_params(full_size_cfg(Arch::kDpTransformer)).total_params();
  EXPECT_NEAR(b / a, 1.0, 0.01);
}

TEST(Profile, DpBlstmMatchesFlatStack) {
  EXPECT_EQ(count_params(full_size_cfg(Arch::kDpBlstm)).total_params(),
            count_params(full_size_cfg(Arch::kBlstmBaseline)).total_params());
}

TEST(Profile, ZeroLayerConfigIsEmbedPlusHead) {
  auto c = full_size_cfg(Arch::kBlstmBaseline);
  c.repeats = 0;
  EXPECT_EQ(count_params(c).total_params(), (257u * 256 + 256) + (256u * 514 + 514));
}

TEST(Profile, AnalyticCountsMatchInstantiatedModels) {
  for (Arch a : {Arch::kBlstmBaseline, Arch::kDpBlstm, Arch::kTransformerBaseline, Arch::kDpTransformer,
                 Arch::kDpTransformerBoosted}) {
    SeparatorConfig c;
    c.arch = a;
    c.feature_dim = 16;
    c.rnn_hidden = 12;
    c.heads = 2;
    c.ff_dim = 24;
    c.bins = 9;
    c.window = 10;
    const Separator model(c, 1);
    const auto rep = count_params(c);
    EXPECT_EQ(rep.total_params(), model.params().total_size()) << arch_name(a);
    for (const auto& l : rep.layers) {
      std::size_t n = 0;
      for (const auto& [name, t] : model.params().entries())
        if (name.rfind(l.name + ".", 0) == 0) n += t.numel();
      EXPECT_EQ(n, l.params) << l.name;
    }
  }
  SeparatorConfig on;
  on.arch = Arch::kDpBlstm;
  on.online = true;
  on.feature_dim = 16;
  on.rnn_hidden = 12;
  on.online_hidden = 10;
  on.bins = 9;
  on.window = 10;
  EXPECT_EQ(count_params(on).total_params(), Separator(on, 1).params().total_size());
}

TEST(Profile, BoostedMacRatioOnSixtySeconds) {
  const Workload wl;  // 60 s, K=150, P=75
  const double plain = count_macs(full_size_cfg(Arch::kDpTransformer), wl).total_macs();
  const double boosted = count_macs(full_size_cfg(Arch::kDpTransformerBoosted), wl).total_macs();
  EXPECT_LT(boosted, plain);
  EXPECT_GE(boosted / plain, 0.60);
  EXPECT_LE(boosted / plain, 0.78);
}

TEST(Profile, LambdaOneBoostedCostsConvOnly) {
  auto c = full_size_cfg(Arch::kDpTransformerBoosted);
  c.lambda = 1;
  const Workload wl;
  const auto boosted = count_macs(c, wl);
  const auto plain = count_macs(full_size_cfg(Arch::kDpTransformer), wl);
  double conv = 0.0;
  for (const auto& l : boosted.layers)
    if (l.name == "down" || l.name == "up") conv += l.macs;
  EXPECT_DOUBLE_EQ(boosted.total_macs() - conv, plain.total_macs());
}

TEST(Profile, RnnMacsLinearInFrames) {
  for (Arch a : {Arch::kBlstmBaseline, Arch::kDpBlstm}) {
    Workload w1{600, 100, 50}, w2{1100, 100, 50};  // B = 11 and 21 windows
    const auto c = full_size_cfg(a);
    const double m1 = count_macs(c, w1).total_macs(), m2 = count_macs(c, w2).total_macs();
    // MACs scale with the number of windowed frames B*K.
    EXPECT_NEAR(m2 / m1, 21.0 / 11.0, 1e-12) << arch_name(a);
  }
}

TEST(Profile, AttentionQuadraticTerm) {
  auto c = full_size_cfg(Arch::kTransformerBaseline);
  const double d = 256, ff = 1024, B = 10;
  // T^2 coefficient at K and 2K for fixed B, from the per-layer formula.
  auto layer = [&](double T) { return detail::profile::sublayer_macs(SeqKind::kTransformer, c, B, T); };
  const double quad_k = layer(100) - B * (4 * 100 * d * d + 2 * 100 * d * ff);
  const double quad_2k = layer(200) - B * (4 * 200 * d * d + 2 * 200 * d * ff);
  EXPECT_DOUBLE_EQ(quad_2k / quad_k, 4.0);
}

TEST(Profile, ReportTotalsAreSums) {
  const auto r = count_params(full_size_cfg(Arch::kDpTransformerBoosted));
  double m = 0.0;
  std::size_t p = 0;
  for (const auto& l : r.layers) {
    m += l.macs;
    p += l.params;
  }
  EXPECT_EQ(r.total_params(), p);
  EXPECT_DOUBLE_EQ(r.total_macs(), m);
  EXPECT_NE(r.table().find("total"), std::string::npos);
}

}  // namespace
}  // namespace css
