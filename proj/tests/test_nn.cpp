#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "oracles.hpp"
#include "rasr/checkpoint.hpp"
#include "rasr/nn.hpp"

using namespace rasr;

TEST(ParameterStore, UniqueNamesAndSnapshots) {
  nn::ParameterStore ps;
  Rng rng(1);
  nn::Linear l(ps, "ccam.q_proj", 3, 2, rng);
  EXPECT_TRUE(ps.contains("ccam.q_proj.weight"));
  EXPECT_TRUE(ps.contains("ccam.q_proj.bias"));
  EXPECT_THROW(nn::Linear(ps, "ccam.q_proj", 3, 2, rng), ConfigError);
  EXPECT_EQ(ps.total_size(), 3u * 2u + 2u);
  auto snap = ps.snapshot();
  snap["ccam.q_proj.bias"][0] = 5.0;
  ps.load(snap);
  EXPECT_EQ(ps.get("ccam.q_proj.bias").value()[0], 5.0);
  snap["ccam.q_proj.bias"] = Tensor({3}, 0.0);
  EXPECT_THROW(ps.load(snap), Error);
}

TEST(ParameterStore, GradientsAreZeroFilledForUnreachedParameters) {
  nn::ParameterStore ps;
  Rng rng(2);
  nn::Linear a(ps, "a", 2, 2, rng), b(ps, "b", 2, 2, rng);
  ad::backward(ad::sum(a(ad::constant(Tensor::from_rows({{1, 2}})))));
  const auto g = ps.gradients();
  EXPECT_EQ(max_abs(g.at("b.weight")), 0.0);
  EXPECT_GT(max_abs(g.at("a.weight")), 0.0);
}

TEST(HeUniform, BoundedByFanIn) {
  Rng rng(3);
  const Tensor w = nn::he_uniform({64, 32}, 64, rng);
  const double bound = std::sqrt(6.0 / 64.0);
  for (double v : w.storage()) EXPECT_LE(std::abs(v), bound);
  EXPECT_GT(max_abs(w), 0.5 * bound);
}

TEST(SinusoidalPe, ClosedForms) {
  const Tensor pe = nn::sinusoidal_pe(50, 16);
  for (std::size_t j = 0; j < 16; ++j) EXPECT_DOUBLE_EQ(pe(0, j), j % 2 == 0 ? 0.0 : 1.0);
  for (double v : pe.storage()) {
    EXPECT_LE(v, 1.0);
    EXPECT_GE(v, -1.0);
  }
  EXPECT_NEAR(pe(1, 0), 0.8414709848078965, 1e-15);
  EXPECT_NEAR(pe(3, 5), std::cos(3.0 / std::pow(10000.0, 4.0 / 16.0)), 1e-15);
}

TEST(MultiHeadAttention, SinglePositionIsOutputProjectionOfValue) {
  Rng rng(4);
  nn::ParameterStore ps;
  nn::MultiHeadSelfAttention mha(ps, "mha", 8, 2, rng);
  std::mt19937_64 r(5);
  const ad::Var x = ad::constant(oracle::random_tensor({1, 8}, r));
  const ad::Var expect = mha.o(mha.v(x));
  EXPECT_LT(max_abs_diff(mha(x).value(), expect.value()), 1e-12);
  EXPECT_THROW(nn::MultiHeadSelfAttention(ps, "bad", 6, 4, rng), ConfigError);
}

TEST(MultiHeadAttention, RowsSumToOne) {
  Rng rng(6);
  nn::ParameterStore ps;
  nn::MultiHeadSelfAttention mha(ps, "mha", 8, 4, rng);
  std::mt19937_64 r(7);
  const auto res = mha.forward(ad::constant(oracle::random_tensor({6, 8}, r)));
  ASSERT_EQ(res.weights.size(), 4u);
  for (const auto& w : res.weights)
    for (std::size_t i = 0; i < 6; ++i) {
      double s = 0;
      for (double v : w.row(i)) s += v;
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
}

TEST(MultiHeadAttention, SelfOnlyMaskMatchesPerPositionOracle) {
  Rng rng(8);
  nn::ParameterStore ps;
  nn::MultiHeadSelfAttention mha(ps, "mha", 8, 2, rng);
  std::mt19937_64 r(9);
  const Tensor x = oracle::random_tensor({5, 8}, r);
  Tensor mask = Tensor::matrix(5, 5, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < 5; ++i) mask(i, i) = 0.0;
  const Tensor y = mha(ad::constant(x), mask).value();
  for (std::size_t i = 0; i < 5; ++i) {
    const Tensor xi({1, 8}, std::vector<double>(x.row(i).begin(), x.row(i).end()));
    const Tensor yi = mha(ad::constant(xi)).value();
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(y(i, c), yi[c], 1e-12);
  }
}

TEST(Checkpoint, BitExactRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "rasr_ckpt_test";
  std::filesystem::remove_all(dir);
  std::mt19937_64 r(10);
  CheckpointData ck;
  ck.tensors["a.weight"] = oracle::random_tensor({3, 4}, r);
  ck.tensors["b"] = oracle::random_tensor({7}, r);
  ck.tensors["b"][2] = 1.0 / 3.0;
  ck.meta["note"] = "x";
  save_checkpoint(dir, ck);
  const CheckpointData back = load_checkpoint(dir);
  ASSERT_EQ(back.tensors.size(), 2u);
  for (const auto& [k, t] : ck.tensors) EXPECT_TRUE(back.tensors.at(k) == t) << k;
  EXPECT_EQ(back.meta["note"], "x");
  std::filesystem::resize_file(dir / "tensors.bin", 8);
  EXPECT_THROW(load_checkpoint(dir), FormatError);
}
