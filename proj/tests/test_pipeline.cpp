#include <gtest/gtest.h>

#include <random>

#include "rasr/pipeline.hpp"
#include "tiny_model.hpp"

using namespace rasr;
using namespace testing_support;

namespace {

PairedExample pair_of(const data::Utterance& u) { return {u.id, u.wave, u.wave, u.target, u.labels, {}}; }

} // namespace

TEST(Transcribe, DeskModelProducesNormalizedPosteriors) {
  const Model model(ModelConfig::from_preset("desk"));
  const auto u = utterance("x", {3, 9, 4});
  const Transcription t = model.transcribe(u.wave);
  EXPECT_EQ(t.posteriors.cols(), 52u);
  EXPECT_EQ(t.posteriors.rows(), model.feature_rows(u.wave.samples.size()));
  for (std::size_t r = 0; r < t.posteriors.rows(); ++r) {
    double s = 0;
    for (double v : t.posteriors.row(r)) s += v;
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
  EXPECT_NO_THROW(model.vocabulary().encode(t.text));
  EXPECT_GT(t.rtf, 0.0);
  EXPECT_EQ(t.gender.size(), 2u);
  EXPECT_EQ(t.dialect.size(), 6u);
}

TEST(Transcribe, DenoiserOnlyChangesDownstream) {
  const Model model(tiny_config());
  const auto u = utterance("x", {3, 9, 4});
  const Transcription a = model.transcribe(u.wave, 0), b = model.transcribe(u.wave, 4);
  EXPECT_TRUE(a.features == b.features);
  EXPECT_TRUE(a.denoised == a.features);
  EXPECT_FALSE(b.denoised == b.features);
  EXPECT_EQ(b.denoised.shape(), b.features.shape());
}

TEST(Transcribe, DeterministicPerSeed) {
  const Model model(tiny_config());
  const auto u = utterance("x", {3, 9, 4});
  EXPECT_TRUE(model.transcribe(u.wave, 4, 5).posteriors == model.transcribe(u.wave, 4, 5).posteriors);
  EXPECT_TRUE(model.transcribe(u.wave, 1, 5).posteriors == model.transcribe(u.wave, 1, 6).posteriors);
}

TEST(Transcribe, ErrorsCarryStageTags) {
  const Model model(tiny_config());
  try {
    model.transcribe(WaveForm{std::vector<double>(100, 0.1), 16000});
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("[featurize]"), std::string::npos);
    EXPECT_EQ(e.kind(), "AudioTooShort");
  }
  ModelConfig paper = tiny_config();
  paper.encoder = EncoderConfig::paper();
  paper.encoder.tf_layers = 0;
  const Model big(paper);
  try {
    big.transcribe(utterance("x", {3, 9, 4}).wave);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("[conv_encode]"), std::string::npos);
    EXPECT_EQ(e.kind(), "SequenceTooShort");
  }
}

TEST(ForwardLosses, ZeroWeightsLeaveCtc) {
  const Model model(tiny_config());
  LossConfig lc;
  lc.alpha = {0, 0, 0};
  Rng rng(1);
  const auto l = model.forward_losses(pair_of(toy_set()[0]), lc, {false, {}, &rng});
  EXPECT_EQ(l.total.item(), l.ctc.item());
  EXPECT_GT(l.ctc.item(), 0.0);
}

TEST(ForwardLosses, IdenticalPairWithIdentityDenoiserHasNoConsistencyTerms) {
  const Model model(tiny_config());
  const auto l = model.forward_losses(pair_of(toy_set()[1]), {}, {false, 0, nullptr});
  EXPECT_EQ(l.phonetic.item(), 0.0);
  EXPECT_EQ(l.consistency.item(), 0.0);
  EXPECT_NEAR(l.total.item(), l.ctc.item() + l.speaker.item(), 1e-12);
}

TEST(ForwardLosses, MismatchedPairIsRejected) {
  const Model model(tiny_config());
  auto ex = pair_of(toy_set()[0]);
  ex.noisy.samples.pop_back();
  EXPECT_THROW(model.forward_losses(ex, {}), ConfigError);
}

TEST(ForwardLosses, ParameterGradientsMatchFiniteDifferences) {
  Model model(tiny_config());
  auto ex = pair_of(toy_set()[0]);
  std::mt19937_64 noise(2);
  std::normal_distribution<double> n(0.0, 0.01);
  for (double& v : ex.noisy.samples) v += n(noise);
  const auto loss = [&] {
    Rng rng(4);
    return model.forward_losses(ex, {}, {false, 2, &rng}).total;
  };
  auto& ps = model.params();
  ps.zero_grad();
  ad::backward(loss());
  const auto grads = ps.gradients();
  ps.zero_grad();
  std::mt19937_64 pick(3);
  for (const std::string name : {"ctc.weight", "transformer.layer0.attn.q_proj.weight", "ccam.attn.speaker_proj.weight",
                                 "ccam.speaker.mlp0.weight", "dbdm.unet.enc1.conv.weight", "encoder.conv6.weight",
                                 "encoder.conv0.bias"}) {
    ad::Var p = ps.get(name);
    for (int k = 0; k < 3; ++k) {
      const std::size_t i = pick() % p.size();
      const double orig = p.value()[i], h = 1e-5;
      p.mutable_value()[i] = orig + h;
      const double up = loss().item();
      p.mutable_value()[i] = orig - h;
      const double down = loss().item();
      p.mutable_value()[i] = orig;
      const double fd = (up - down) / (2 * h);
      EXPECT_NEAR(grads.at(name)[i], fd, 1e-4 * (1.0 + std::abs(fd))) << name << "[" << i << "]";
    }
  }
}

TEST(ModelConfig, PresetsValidationAndJson) {
  EXPECT_EQ(ModelConfig::from_preset("paper").encoder.hidden, 1024u);
  EXPECT_THROW(ModelConfig::from_preset("tiny"), ConfigError);
  ModelConfig c = tiny_config();
  c.denoise_steps = 50;
  EXPECT_THROW(c.validate(), ConfigError);
  const ModelConfig t = tiny_config();
  const ModelConfig back = nlohmann::json(t).get<ModelConfig>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(t));
}

TEST(Model, DeskParameterBudget) {
  const Model model(ModelConfig::from_preset("desk"));
  const std::size_t n = model.params().total_size();
  EXPECT_GT(n, 5'000'000u);
  EXPECT_LT(n, 15'000'000u);
}
