#include <gtest/gtest.h>

#include "oracles.hpp"
#include "rasr/backbone.hpp"
#include "rasr/dsp.hpp"

using namespace rasr;

namespace {

// Layer-by-layer length recomputation that does not use the library.
std::size_t expected_length(std::size_t t, const std::vector<std::pair<std::size_t, std::size_t>>& ks) {
  for (auto [k, s] : ks) {
    if (t < k) return 0;
    t = (t - k) / s + 1;
  }
  return t;
}

EncoderConfig tiny(std::size_t layers) {
  EncoderConfig c = EncoderConfig::desk();
  for (auto& l : c.conv_layers)
    if (l.channels != EncoderConfig::kFeatureWidth) l.channels = 8;
  c.tf_layers = layers;
  c.hidden = 16;
  c.heads = 2;
  c.ffn = 32;
  return c;
}

} // namespace

TEST(EncoderConfig, PresetsAndValidation) {
  const EncoderConfig p = EncoderConfig::paper();
  EXPECT_EQ(p.tf_layers, 24u);
  EXPECT_EQ(p.hidden, 1024u);
  EXPECT_EQ(p.heads, 16u);
  EXPECT_EQ(p.ffn, 4096u);
  EXPECT_EQ(p.conv_layers.size(), 7u);
  EXPECT_EQ(p.conv_layers.back().channels, 512u);
  const EncoderConfig d = EncoderConfig::desk();
  EXPECT_EQ(d.tf_layers, 4u);
  EXPECT_EQ(d.hidden, 256u);
  EXPECT_EQ(d.conv_layers[0].stride, 2u);
  EXPECT_EQ(d.conv_layers[1].stride, 1u);
  EXPECT_THROW(EncoderConfig::from_preset("huge"), ConfigError);
  EncoderConfig bad = d;
  bad.heads = 3;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = d;
  bad.conv_layers.back().channels = 256;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(EncoderConfig, JsonOverridesPreset) {
  nlohmann::json j = {{"preset", "desk"}, {"tf_layers", 2}};
  const EncoderConfig c = j.get<EncoderConfig>();
  EXPECT_EQ(c.tf_layers, 2u);
  EXPECT_EQ(c.hidden, 256u);
  const EncoderConfig back = nlohmann::json(c).get<EncoderConfig>();
  EXPECT_EQ(back.tf_layers, 2u);
  EXPECT_EQ(back.conv_layers.size(), c.conv_layers.size());
}

TEST(ConvEncoder, LengthChains) {
  const std::vector<std::pair<std::size_t, std::size_t>> paper{{10, 5}, {3, 2}, {3, 2}, {3, 2}, {3, 2}, {2, 2}, {2, 2}};
  const std::vector<std::pair<std::size_t, std::size_t>> desk{{10, 2}, {3, 1}, {3, 1}, {3, 1}, {3, 1}, {2, 1}, {2, 1}};
  EXPECT_EQ(EncoderConfig::paper().output_length(16000), 49u);
  EXPECT_EQ(expected_length(16000, paper), 49u);
  EXPECT_EQ(EncoderConfig::desk().output_length(98), expected_length(98, desk));
  EXPECT_EQ(EncoderConfig::desk().output_length(98), 35u);
  for (std::size_t t = 1; t < 300; ++t) ASSERT_EQ(EncoderConfig::desk().output_length(t), expected_length(t, desk));
}

TEST(ConvEncoder, DeskForwardShapeAndPaperTooShort) {
  Rng rng(1);
  nn::ParameterStore ps;
  ConvEncoder enc(ps, "encoder", EncoderConfig::desk(), rng);
  WaveForm w{std::vector<double>(16000), 16000};
  for (std::size_t i = 0; i < w.samples.size(); ++i) w.samples[i] = 0.3 * std::sin(0.05 * i);
  const ad::Var z = enc(ad::constant(dsp::featurize(w)));
  EXPECT_EQ(z.rows(), 35u);
  EXPECT_EQ(z.cols(), 512u);
  EXPECT_TRUE(z.value().all_finite());
  EXPECT_TRUE(enc(ad::constant(dsp::featurize(w))).value() == z.value());

  nn::ParameterStore ps2;
  ConvEncoder big(ps2, "encoder", EncoderConfig::paper(), rng);
  EXPECT_THROW(big(ad::constant(Tensor::matrix(98, 80))), SequenceTooShort);
}

TEST(TransformerEncoder, OutputShape) {
  Rng rng(2);
  nn::ParameterStore ps;
  const EncoderConfig c = tiny(2);
  TransformerEncoder tf(ps, "transformer", c, rng);
  std::mt19937_64 r(3);
  for (std::size_t t : {1u, 4u, 9u}) {
    const ad::Var h = tf(ad::constant(oracle::random_tensor({t, 512}, r)));
    EXPECT_EQ(h.rows(), t);
    EXPECT_EQ(h.cols(), 16u);
  }
}

TEST(TransformerEncoder, ZeroLayersIsProjectionPlusPositions) {
  Rng rng(4);
  nn::ParameterStore ps;
  TransformerEncoder tf(ps, "transformer", tiny(0), rng);
  std::mt19937_64 r(5);
  const Tensor z = oracle::random_tensor({6, 512}, r);
  const ad::Var proj = ad::linear(ad::constant(z), ps.get("transformer.input_proj.weight"),
                                  ps.get("transformer.input_proj.bias"));
  Tensor expect = proj.value();
  expect += nn::sinusoidal_pe(6, 16);
  EXPECT_LT(max_abs_diff(tf(ad::constant(z)).value(), expect), 1e-12);
}

TEST(TransformerEncoder, MaskedPaddingKeepsPrefix) {
  Rng rng(6);
  nn::ParameterStore ps;
  TransformerEncoder tf(ps, "transformer", tiny(2), rng);
  std::mt19937_64 r(7);
  const Tensor z = oracle::random_tensor({5, 512}, r);
  Tensor padded = Tensor::matrix(8, 512);
  for (std::size_t i = 0; i < z.size(); ++i) padded[i] = z[i];
  for (std::size_t i = z.size(); i < padded.size(); ++i) padded[i] = 3.0;
  std::vector<bool> valid(8, false);
  for (int i = 0; i < 5; ++i) valid[i] = true;
  const Tensor a = tf(ad::constant(z)).value();
  const Tensor b = tf(ad::constant(padded), valid).value();
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t c = 0; c < 16; ++c) EXPECT_NEAR(a(i, c), b(i, c), 1e-6);
}

TEST(TransformerEncoder, DropoutOnlyInTraining) {
  Rng rng(8);
  nn::ParameterStore ps;
  TransformerEncoder tf(ps, "transformer", tiny(1), rng);
  std::mt19937_64 r(9);
  const ad::Var z = ad::constant(oracle::random_tensor({4, 512}, r));
  EXPECT_TRUE(tf(z).value() == tf(z).value());
  Rng d1(1), d2(2);
  EXPECT_FALSE(tf(z, {}, true, &d1).value() == tf(z, {}, true, &d2).value());
  EXPECT_THROW(tf(z, {}, true, nullptr), ConfigError);
}

TEST(Backbone, DeskOneSecondUnderOneSecond) {
  Rng rng(10);
  nn::ParameterStore ps;
  const EncoderConfig c = EncoderConfig::desk();
  ConvEncoder conv(ps, "encoder", c, rng);
  TransformerEncoder tf(ps, "transformer", c, rng);
  WaveForm w{std::vector<double>(16000), 16000};
  for (std::size_t i = 0; i < w.samples.size(); ++i) w.samples[i] = 0.3 * std::sin(0.05 * i);
  ad::NoGradGuard guard;
  const auto t0 = std::chrono::steady_clock::now();
  const ad::Var h = tf(conv(ad::constant(dsp::featurize(w))));
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_EQ(h.cols(), 256u);
  EXPECT_LT(s, 1.0);
}

TEST(Backbone, ConvGradientMatchesFiniteDifferences) {
  EncoderConfig c;
  c.preset = "desk";
  c.input_channels = 3;
  c.conv_layers = {{3, 2, 4, "gelu"}, {2, 1, 512, "gelu"}};
  Rng rng(11);
  nn::ParameterStore ps;
  ConvEncoder conv(ps, "encoder", c, rng);
  std::mt19937_64 r(12);
  const auto res = oracle::grad_check(
      [&](const std::vector<ad::Var>& v) { return ad::mean(ad::square(conv(v[0]))); },
      {oracle::random_tensor({9, 3}, r)});
  EXPECT_LT(res.error, 1e-4);
}
