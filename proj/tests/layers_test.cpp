#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>

#include "css/checkpoint.hpp"
#include "css/gradcheck.hpp"
#include "css/layers.hpp"

namespace css {
namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-scale, scale);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = d(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor project(const Tensor& y, std::uint64_t seed) {
  return ops::sum(ops::mul(y, random_tensor(y.shape(), seed)));
}

std::vector<Tensor> all_params(const ParamStore& ps) {
  std::vector<Tensor> out;
  for (const auto& [_, t] : ps.entries()) out.push_back(t);
  return out;
}

void zero_all(ParamStore& ps) {
  for (const auto& [_, t] : ps.entries()) {
    Tensor x = t;
    for (auto& v : x.mutable_data()) v = 0.0;
  }
}

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

TEST(Lstm, ZeroWeightsGiveZeroOutputs) {
  ParamStore ps;
  Rng rng(1);
  LstmParams p(ps, "l", 3, 4, rng);
  zero_all(ps);
  auto y = lstm_forward(random_tensor({2, 5, 3}, 2), p, Direction::kForward);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Lstm, ForgetBiasStartsAtOne) {
  ParamStore ps;
  Rng rng(1);
  LstmParams p(ps, "l", 3, 4, rng);
  for (std::size_t k = 4; k < 8; ++k) EXPECT_EQ(p.bias[k], 1.0);
}

TEST(Lstm, SingleStepEqualsCellFormula) {
  ParamStore ps;
  Rng rng(3);
  const std::size_t I = 2, H = 3;
  LstmParams p(ps, "l", I, H, rng);
  auto x = random_tensor({1, 1, I}, 4);
  auto y = lstm_forward(x, p, Direction::kForward);
  // h0 = c0 = 0, so only the input columns of W contribute.
  for (std::size_t k = 0; k < H; ++k) {
    auto gate = [&](std::size_t g) {
      double z = p.bias[g * H + k];
      for (std::size_t i = 0; i < I; ++i) z += p.weight[(g * H + k) * (I + H) + i] * x[i];
      return z;
    };
    const double c = sigm(gate(0)) * std::tanh(gate(2));
    EXPECT_NEAR(y[k], sigm(gate(3)) * std::tanh(c), 1e-14);
  }
}

TEST(Lstm, InputDimMismatchThrows) {
  ParamStore ps;
  Rng rng(1);
  LstmParams p(ps, "l", 3, 4, rng);
  EXPECT_THROW(lstm_forward(Tensor::zeros({1, 2, 5}), p, Direction::kForward), ShapeError);
}

TEST(Lstm, GradCheckBothDirections) {
  for (auto dir : {Direction::kForward, Direction::kBackward}) {
    ParamStore ps;
    Rng rng(5);
    LstmParams p(ps, "l", 4, 5, rng);
    auto x = random_tensor({2, 3, 4}, 6);
    auto wrt = all_params(ps);
    wrt.push_back(x);
    EXPECT_LT(grad_check([&] { return project(lstm_forward(x, p, dir), 7); }, wrt), 1e-4);
  }
}

TEST(Blstm, OutputWidthIsTwiceHidden) {
  ParamStore ps;
  Rng rng(8);
  Blstm b(ps, "b", 256, 512, rng);
  EXPECT_EQ(b.output_dim(), 1024u);
  auto y = blstm_forward(random_tensor({1, 2, 256}, 9), b.fwd, b.bwd);
  EXPECT_EQ(y.dim(2), 1024u);
}

TEST(Blstm, ForwardHalfEqualsUnidirectionalLstm) {
  ParamStore ps;
  Rng rng(10);
  Blstm b(ps, "b", 3, 4, rng);
  auto x = random_tensor({2, 6, 3}, 11);
  auto both = blstm_forward(x, b.fwd, b.bwd);
  auto fwd = lstm_forward(x, b.fwd, Direction::kForward);
  auto half = ops::slice(both, -1, 0, 4);
  for (std::size_t i = 0; i < fwd.numel(); ++i) EXPECT_EQ(half[i], fwd[i]);
}

TEST(Blstm, TimeReversalSwapsHalves) {
  ParamStore ps;
  Rng rng(12);
  Blstm b(ps, "b", 3, 4, rng);
  // Tie the two directions so reversal symmetry holds exactly.
  Tensor bw = b.bwd.weight, bb = b.bwd.bias;
  std::copy(b.fwd.weight.data().begin(), b.fwd.weight.data().end(), bw.mutable_data().begin());
  std::copy(b.fwd.bias.data().begin(), b.fwd.bias.data().end(), bb.mutable_data().begin());
  const std::size_t S = 2, T = 5, I = 3, H = 4;
  auto x = random_tensor({S, T, I}, 13);
  std::vector<double> rev(x.numel());
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t i = 0; i < I; ++i) rev[(s * T + t) * I + i] = x[(s * T + (T - 1 - t)) * I + i];
  auto y = blstm_forward(x, b.fwd, b.bwd);
  auto yr = blstm_forward(Tensor::from({S, T, I}, rev), b.fwd, b.bwd);
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t k = 0; k < H; ++k)
        EXPECT_NEAR(yr[(s * T + t) * 2 * H + k], y[(s * T + (T - 1 - t)) * 2 * H + H + k], 1e-14);
}

TEST(Blstm, ZeroWeightsGiveZero) {
  ParamStore ps;
  Rng rng(14);
  Blstm b(ps, "b", 3, 4, rng);
  zero_all(ps);
  auto y = blstm_forward(random_tensor({1, 3, 3}, 15), b.fwd, b.bwd);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Blstm, HiddenMismatchThrows) {
  ParamStore ps;
  Rng rng(16);
  LstmParams a(ps, "a", 3, 4, rng), c(ps, "c", 3, 5, rng);
  EXPECT_THROW(blstm_forward(Tensor::zeros({1, 2, 3}), a, c), ShapeError);
}

TEST(Blstm, GradCheck) {
  ParamStore ps;
  Rng rng(17);
  Blstm b(ps, "b", 4, 3, rng);
  auto x = random_tensor({2, 4, 4}, 18);
  auto wrt = all_params(ps);
  wrt.push_back(x);
  EXPECT_LT(grad_check([&] { return project(blstm_forward(x, b.fwd, b.bwd), 19); }, wrt), 1e-4);
}

TEST(Transformer, HeadsMustDivideDim) {
  ParamStore ps;
  Rng rng(20);
  EXPECT_THROW(TransformerEncoderParams(ps, "t", 10, 4, 16, rng), ConfigError);
}

TEST(Transformer, DimMismatchThrows) {
  ParamStore ps;
  Rng rng(21);
  TransformerEncoderParams p(ps, "t", 8, 2, 16, rng);
  EXPECT_THROW(transformer_encoder_forward(Tensor::zeros({1, 3, 6}), p, false), ShapeError);
}

TEST(Transformer, PermutationEquivariantWithoutPositions) {
  ParamStore ps;
  Rng rng(22);
  TransformerEncoderParams p(ps, "t", 8, 2, 16, rng);
  const std::size_t S = 2, T = 5, d = 8;
  auto x = random_tensor({S, T, d}, 23);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  std::vector<double> xp(x.numel());
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < d; ++j) xp[(s * T + t) * d + j] = x[(s * T + perm[t]) * d + j];
  auto y = transformer_encoder_forward(x, p, false);
  auto yp = transformer_encoder_forward(Tensor::from({S, T, d}, xp), p, false);
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < d; ++j)
        EXPECT_NEAR(yp[(s * T + t) * d + j], y[(s * T + perm[t]) * d + j], 1e-12);
}

TEST(Transformer, SinglePositionAttendsToItsOwnValue) {
  ParamStore ps;
  Rng rng(24);
  TransformerEncoderParams p(ps, "t", 8, 2, 16, rng);
  auto x = random_tensor({3, 1, 8}, 25);
  auto ctx = attention_context(x, p, false);
  auto v = p.v(x);
  for (std::size_t i = 0; i < v.numel(); ++i) EXPECT_NEAR(ctx[i], v[i], 1e-14);
}

TEST(Transformer, AttentionWeightsSumToOne) {
  ParamStore ps;
  Rng rng(26);
  TransformerEncoderParams p(ps, "t", 8, 2, 16, rng);
  for (bool causal : {false, true}) {
    Tensor w;
    attention_context(random_tensor({2, 6, 8}, 27, 3.0), p, causal, &w);
    auto s = ops::sum_last(w);
    for (double v : s.data()) EXPECT_NEAR(v, 1.0, 1e-12);
  }
}

TEST(Transformer, CausalMaskBlocksFuturePositions) {
  ParamStore ps;
  Rng rng(28);
  TransformerEncoderParams p(ps, "t", 8, 2, 16, rng);
  auto x = random_tensor({1, 6, 8}, 29);
  auto y = transformer_encoder_forward(x, p, true);
  auto x2 = x.detach();
  for (std::size_t i = 4 * 8; i < 6 * 8; ++i) x2.mutable_data()[i] += 1.0;
  auto y2 = transformer_encoder_forward(x2, p, true);
  for (std::size_t i = 0; i < 4 * 8; ++i) EXPECT_EQ(y[i], y2[i]);
}

TEST(Transformer, GradCheck) {
  ParamStore ps;
  Rng rng(30);
  TransformerEncoderParams p(ps, "t", 8, 2, 12, rng);
  auto x = random_tensor({1, 4, 8}, 31);
  auto wrt = all_params(ps);
  wrt.push_back(x);
  for (bool causal : {false, true}) {
    EXPECT_LT(grad_check([&] { return project(transformer_encoder_forward(x, p, causal), 32); }, wrt), 1e-4);
  }
}

TEST(Linear, IdentityWeights) {
  auto x = random_tensor({2, 3}, 40);
  auto y = Linear::linear(x, Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}), Tensor::zeros({3}));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Linear, BottleneckFromBlstmWidth) {
  ParamStore ps;
  Rng rng(41);
  Linear fc(ps, "fc", 1024, 256, rng);
  EXPECT_EQ(fc(Tensor::zeros({2, 1024})).shape(), (Shape{2, 256}));
  EXPECT_THROW(fc(Tensor::zeros({2, 512})), ShapeError);
}

TEST(Linear, GradCheck) {
  ParamStore ps;
  Rng rng(42);
  Linear fc(ps, "fc", 5, 3, rng);
  auto x = random_tensor({2, 4, 5}, 43);
  auto wrt = all_params(ps);
  wrt.push_back(x);
  EXPECT_LT(grad_check([&] { return project(fc(x), 44); }, wrt), 1e-6);
}

TEST(Conv, GradCheckThroughLayers) {
  ParamStore ps;
  Rng rng(45);
  Conv1dLayer down(ps, "down", 4, 4, 3, 2, 1, rng);
  TransposedConv1dLayer up(ps, "up", 4, 4, 3, 2, 1, rng);
  auto x = random_tensor({2, 8, 4}, 46);
  auto wrt = all_params(ps);
  wrt.push_back(x);
  EXPECT_LT(grad_check([&] { return project(up(down(x), 8), 47); }, wrt), 1e-6);
}

TEST(Checkpoint, RoundTripAndManifest) {
  ParamStore ps;
  Rng rng(50);
  TransformerEncoderParams p(ps, "t", 8, 2, 16, rng);
  const auto path = (std::filesystem::temp_directory_path() / "css_layers_test.ckpt").string();
  write_checkpoint(path, snapshot(ps));
  ParamStore other;
  Rng rng2(999);
  TransformerEncoderParams q(other, "t", 8, 2, 16, rng2);
  restore(other, read_checkpoint(path));
  for (std::size_t i = 0; i < ps.entries().size(); ++i) {
    const auto& a = ps.entries()[i].second;
    const auto& b = other.entries()[i].second;
    for (std::size_t j = 0; j < a.numel(); ++j) EXPECT_EQ(a[j], b[j]);
  }
  EXPECT_TRUE(std::filesystem::exists(path + ".manifest.txt"));

  ParamStore wrong;
  TransformerEncoderParams r(wrong, "t", 8, 2, 8, rng2);
  EXPECT_THROW(restore(wrong, read_checkpoint(path)), ConfigError);
  std::filesystem::remove(path);
  std::filesystem::remove(path + ".manifest.txt");
}

TEST(Checkpoint, RejectsForeignFile) {
  const auto path = (std::filesystem::temp_directory_path() / "css_not_a_ckpt.bin").string();
  {
    std::ofstream os(path);
    os << "hello world";
  }
  EXPECT_THROW(read_checkpoint(path), IoError);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace css
