#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "oracles.hpp"
#include "rasr/ccam.hpp"

using namespace rasr;
using namespace rasr::ccam;

namespace {

Var row(std::vector<double> v) { return ad::constant(Tensor::row_vector(std::move(v))); }

SpeakerPrediction prediction(std::vector<double> g, std::vector<double> a, std::vector<double> d) {
  return {row(std::move(g)), row(std::move(a)), row(std::move(d))};
}

std::vector<double> random_simplex(std::size_t k, std::mt19937_64& rng) {
  std::exponential_distribution<double> e(1.0);
  std::vector<double> p(k);
  double s = 0;
  for (double& v : p) s += (v = e(rng));
  for (double& v : p) v /= s;
  return p;
}

double row_sum(const Tensor& t, std::size_t r = 0) {
  double s = 0;
  for (double v : t.row(r)) s += v;
  return s;
}

} // namespace

TEST(SpeakerClassifier, HeadAndEmbeddingDims) {
  Rng rng(1);
  nn::ParameterStore ps;
  SpeakerClassifier cls(ps, "ccam.speaker", 512, rng);
  std::mt19937_64 r(2);
  const auto out = cls(ad::constant(oracle::random_tensor({7, 512}, r)));
  EXPECT_EQ(out.prediction.gender.size(), 2u);
  EXPECT_EQ(out.prediction.age.size(), 4u);
  EXPECT_EQ(out.prediction.dialect.size(), 6u);
  EXPECT_EQ(out.embedding.size(), kEmbeddingDim);
  EXPECT_TRUE(out.embedding.value().all_finite());
  for (const Var* h : out.prediction.heads()) {
    EXPECT_NEAR(row_sum(h->value()), 1.0, 1e-9);
    for (double v : h->value().storage()) EXPECT_GE(v, 0.0);
  }
  EXPECT_THROW(cls(ad::constant(Tensor::matrix(0, 512))), SequenceTooShort);
}

TEST(SpeakerClassifier, ConstantSequenceMatchesSingleFrame) {
  Rng rng(3);
  nn::ParameterStore ps;
  SpeakerClassifier cls(ps, "ccam.speaker", 512, rng);
  std::mt19937_64 r(4);
  const Tensor frame = oracle::random_tensor({1, 512}, r);
  Tensor many = Tensor::matrix(9, 512);
  for (std::size_t t = 0; t < 9; ++t)
    for (std::size_t c = 0; c < 512; ++c) many(t, c) = frame[c];
  const auto a = cls(ad::constant(frame)), b = cls(ad::constant(many));
  EXPECT_LT(max_abs_diff(a.embedding.value(), b.embedding.value()), 1e-12);
  EXPECT_LT(max_abs_diff(a.prediction.dialect.value(), b.prediction.dialect.value()), 1e-12);
}

TEST(SpeakerClassifier, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  nn::ParameterStore ps;
  SpeakerClassifier cls(ps, "ccam.speaker", 512, rng);
  std::mt19937_64 r(6);
  const SpeakerLabels y{1, 2, 5};
  const auto res = oracle::grad_check(
      [&](const std::vector<Var>& v) {
        const auto o = cls(v[0]);
        return ad::add(speaker_loss(o.prediction, y, 1, 1, 1), ad::mean(o.embedding));
      },
      {oracle::random_tensor({3, 512}, r)});
  EXPECT_LT(res.error, 1e-4);
}

TEST(CrossAttention, ResidualIdentityAndRowSums) {
  Rng rng(7);
  nn::ParameterStore ps;
  CrossAttention ca(ps, "ccam.attn", 16, rng);
  std::mt19937_64 r(8);
  for (std::size_t t = 1; t <= 32; ++t) {
    const Tensor h = oracle::random_tensor({t, 16}, r);
    const auto res = ca.forward(ad::constant(h), ad::constant(oracle::random_tensor({1, 128}, r)));
    ASSERT_EQ(res.output.shape(), h.shape());
    for (std::size_t i = 0; i < h.size(); ++i)
      ASSERT_LE(std::abs(res.output.value()[i] - res.attended.value()[i] - h[i]), 1e-12);
    for (std::size_t i = 0; i < t; ++i) ASSERT_NEAR(row_sum(res.attention, i), 1.0, 1e-9);
  }
}

TEST(CrossAttention, SingleFrameIsValuePlusInput) {
  Rng rng(9);
  nn::ParameterStore ps;
  CrossAttention ca(ps, "ccam.attn", 16, rng);
  std::mt19937_64 r(10);
  const Tensor h = oracle::random_tensor({1, 16}, r);
  const Tensor out = ca(ad::constant(h), ad::constant(oracle::random_tensor({1, 128}, r))).value();
  const Tensor v = ad::linear(ad::constant(h), ps.get("ccam.attn.v_proj.weight"), ps.get("ccam.attn.v_proj.bias")).value();
  for (std::size_t c = 0; c < 16; ++c) EXPECT_NEAR(out[c], v[c] + h[c], 1e-12);
}

TEST(CrossAttention, RejectsWidthMismatch) {
  Rng rng(11);
  nn::ParameterStore ps;
  CrossAttention ca(ps, "ccam.attn", 16, rng);
  EXPECT_THROW(ca(ad::constant(Tensor::matrix(3, 8)), ad::constant(Tensor::matrix(1, 128))), ShapeError);
  EXPECT_THROW(ca(ad::constant(Tensor::matrix(3, 16)), ad::constant(Tensor::matrix(1, 64))), ShapeError);
}

TEST(CrossAttention, GradientMatchesFiniteDifferences) {
  Rng rng(12);
  nn::ParameterStore ps;
  CrossAttention ca(ps, "ccam.attn", 8, rng);
  std::mt19937_64 r(13);
  const auto res = oracle::grad_check(
      [&](const std::vector<Var>& v) { return ad::mean(ad::square(ca(v[0], v[1]))); },
      {oracle::random_tensor({4, 8}, r), oracle::random_tensor({1, 128}, r)});
  EXPECT_LT(res.error, 1e-4);
}

TEST(SpeakerLoss, ClosedForms) {
  const auto perfect = prediction({0, 1}, {0, 0, 1, 0}, {0, 0, 0, 0, 0, 1});
  EXPECT_DOUBLE_EQ(speaker_loss(perfect, {1, 2, 5}, 1, 1, 1).value().item(), 0.0);
  const auto uniform = prediction({0.5, 0.5}, {0.25, 0.25, 0.25, 0.25}, std::vector<double>(6, 1.0 / 6.0));
  EXPECT_NEAR(speaker_loss(uniform, {0, 0, 0}, 1, 0, 0).value().item(), 0.693147, 1e-6);
  EXPECT_NEAR(speaker_loss(uniform, {0, 0, 0}, 1, 1, 1).value().item(), std::log(2.0 * 4.0 * 6.0), 1e-12);
  EXPECT_EQ(speaker_loss(uniform, {1, 3, 4}, 0, 0, 0).value().item(), 0.0);
  EXPECT_THROW(speaker_loss(uniform, {0, 0, 6}, 1, 1, 1), ConfigError);
}

TEST(ConsistencyLoss, ClosedForms) {
  const auto a = prediction({1, 0}, {0.1, 0.2, 0.3, 0.4}, {0.5, 0.1, 0.1, 0.1, 0.1, 0.1});
  const auto b = prediction({0.5, 0.5}, {0.1, 0.2, 0.3, 0.4}, {0.5, 0.1, 0.1, 0.1, 0.1, 0.1});
  EXPECT_EQ(consistency_loss(a, a).value().item(), 0.0);
  EXPECT_NEAR(consistency_loss(a, b).value().item(), std::numbers::ln2, 1e-9);
  const auto zero_q = prediction({0, 1}, {0.1, 0.2, 0.3, 0.4}, {0.5, 0.1, 0.1, 0.1, 0.1, 0.1});
  EXPECT_NEAR(consistency_loss(a, zero_q).value().item(), -std::log(1e-12), 1e-9);
}

TEST(ConsistencyLoss, NonNegativeOnRandomSimplexPairs) {
  std::mt19937_64 r(14);
  for (int i = 0; i < 1000; ++i) {
    const auto p = prediction(random_simplex(2, r), random_simplex(4, r), random_simplex(6, r));
    const auto q = prediction(random_simplex(2, r), random_simplex(4, r), random_simplex(6, r));
    ASSERT_GE(consistency_loss(p, q).value().item(), -1e-15);
  }
}

TEST(ConsistencyLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 r(15);
  const auto res = oracle::grad_check(
      [](const std::vector<Var>& v) {
        const SpeakerPrediction p{ad::softmax_rows(v[0]), ad::softmax_rows(v[1]), ad::softmax_rows(v[2])};
        const SpeakerPrediction q{ad::softmax_rows(v[3]), ad::softmax_rows(v[4]), ad::softmax_rows(v[5])};
        return consistency_loss(p, q);
      },
      {oracle::random_tensor({1, 2}, r), oracle::random_tensor({1, 4}, r), oracle::random_tensor({1, 6}, r),
       oracle::random_tensor({1, 2}, r), oracle::random_tensor({1, 4}, r), oracle::random_tensor({1, 6}, r)});
  EXPECT_LT(res.error, 1e-4);
}
