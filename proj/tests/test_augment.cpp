#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <numbers>
#include <random>

#include "rasr/augment.hpp"

using namespace rasr;
using namespace rasr::augment;

namespace {

WaveForm tone(double hz, std::size_t n, double amp = 0.5) {
  WaveForm w{std::vector<double>(n), 16000};
  for (std::size_t i = 0; i < n; ++i) w.samples[i] = amp * std::sin(2.0 * std::numbers::pi * hz * i / 16000.0);
  return w;
}

WaveForm random_wave(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  WaveForm w{std::vector<double>(n), 16000};
  for (double& v : w.samples) v = u(rng);
  return w;
}

double power(const std::vector<double>& x) {
  long double s = 0;
  for (double v : x) s += static_cast<long double>(v) * v;
  return static_cast<double>(s / x.size());
}

// Frequency of the strongest direct-DFT bin between lo and hi Hz.
double peak_hz(const std::vector<double>& x, double lo, double hi) {
  const double n = static_cast<double>(x.size());
  double best = 0, best_f = 0;
  for (std::size_t k = static_cast<std::size_t>(lo * n / 16000.0); k <= static_cast<std::size_t>(hi * n / 16000.0); ++k) {
    std::complex<double> s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * std::polar(1.0, -2.0 * std::numbers::pi * k * i / n);
    if (std::abs(s) > best) {
      best = std::abs(s);
      best_f = k * 16000.0 / n;
    }
  }
  return best_f;
}

} // namespace

TEST(MixAtSnr, PowerRatios) {
  std::mt19937_64 rng(1);
  const WaveForm c = random_wave(4000, rng), n = random_wave(4000, rng);
  for (double snr : {0.0, 20.0}) {
    const WaveForm m = mix_at_snr(c, n, snr);
    std::vector<double> added(m.samples.size());
    for (std::size_t i = 0; i < added.size(); ++i) added[i] = m.samples[i] - c.samples[i];
    EXPECT_NEAR(power(added) * std::pow(10.0, snr / 10.0) / power(c.samples), 1.0, 1e-9);
  }
}

TEST(MixAtSnr, RemeasuredSnrRoundTrip) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> snr_dist(-5, 20);
  std::uniform_int_distribution<std::size_t> len(500, 5000);
  for (int i = 0; i < 200; ++i) {
    const WaveForm c = random_wave(len(rng), rng), n = random_wave(len(rng), rng);
    const double snr = snr_dist(rng);
    const WaveForm m = mix_at_snr(c, n, snr);
    ASSERT_EQ(m.samples.size(), c.samples.size());
    std::vector<double> added(m.samples.size());
    for (std::size_t k = 0; k < added.size(); ++k) added[k] = m.samples[k] - c.samples[k];
    ASSERT_NEAR(10.0 * std::log10(power(c.samples) / power(added)), snr, 0.01);
  }
}

TEST(MixAtSnr, LinearInCleanAndRejectsSilence) {
  std::mt19937_64 rng(3);
  const WaveForm a = random_wave(1000, rng), n = random_wave(300, rng);
  const WaveForm m1 = mix_at_snr(a, n, 5.0);
  std::vector<double> looped(1000);
  for (std::size_t i = 0; i < 1000; ++i) looped[i] = n.samples[i % 300];
  const double g = std::sqrt(power(a.samples) / (power(looped) * std::pow(10.0, 0.5)));
  for (std::size_t i = 0; i < 1000; ++i) EXPECT_NEAR(m1.samples[i], a.samples[i] + g * n.samples[i % 300], 1e-12);
  EXPECT_THROW(mix_at_snr(WaveForm{std::vector<double>(10, 0.0), 16000}, n, 5), SilentAudio);
  EXPECT_THROW(mix_at_snr(a, WaveForm{std::vector<double>(10, 0.0), 16000}, 5), SilentAudio);
}

TEST(GaussianNoise, MomentsAndDeterminism) {
  const WaveForm w = gaussian_noise(1000000, 42);
  double mean = 0;
  for (double v : w.samples) mean += v;
  mean /= 1e6;
  double var = 0;
  for (double v : w.samples) var += (v - mean) * (v - mean);
  var /= 1e6 - 1;
  EXPECT_GE(var, 0.99);
  EXPECT_LE(var, 1.01);
  EXPECT_LE(std::abs(mean), 0.005);
  EXPECT_EQ(gaussian_noise(100, 7).samples, gaussian_noise(100, 7).samples);
  EXPECT_NE(gaussian_noise(100, 7).samples, gaussian_noise(100, 8).samples);
}

TEST(SpeedPerturb, LengthsAndIdentity) {
  std::mt19937_64 rng(4);
  const WaveForm w = random_wave(100, rng);
  EXPECT_EQ(speed_perturb(w, 1.0).samples, w.samples);
  EXPECT_EQ(speed_perturb(w, 2.0).samples.size(), 50u);
  EXPECT_EQ(speed_perturb(w, 0.9).samples.size(), 111u);
  EXPECT_EQ(speed_perturb(w, 1.1).samples.size(), 91u);
  EXPECT_THROW(speed_perturb(w, 2.5), ConfigError);
  EXPECT_THROW(speed_perturb(w, 0.4), ConfigError);
}

TEST(SpeedPerturb, ToneFrequencyScales) {
  for (double factor : {0.9, 1.1}) {
    const WaveForm out = speed_perturb(tone(500, 8000), factor);
    EXPECT_NEAR(peak_hz(out.samples, 300, 800), 500 * factor, 16000.0 / out.samples.size() + 1e-9) << factor;
  }
}

TEST(VolumeScale, ClosedForms) {
  std::mt19937_64 rng(5);
  const WaveForm w = random_wave(200, rng);
  EXPECT_EQ(volume_scale(w, 0.0).samples, w.samples);
  const WaveForm q = volume_scale(w, -3.0);
  for (std::size_t i = 0; i < 200; ++i) EXPECT_NEAR(q.samples[i], w.samples[i] * 0.707946, 1e-6);
  const WaveForm back = volume_scale(volume_scale(w, 3.0), -3.0);
  for (std::size_t i = 0; i < 200; ++i) EXPECT_NEAR(back.samples[i], w.samples[i], 1e-12);
}

TEST(AugmentPolicy, DisabledIsIdentityAndSeedsReproduce) {
  std::mt19937_64 rng(6);
  const WaveForm w = random_wave(3000, rng);
  EXPECT_EQ(augment_policy(w, AugmentConfig::disabled(), 1).samples, w.samples);
  const AugmentConfig cfg;
  EXPECT_EQ(augment_policy(w, cfg, 99).samples, augment_policy(w, cfg, 99).samples);
  EXPECT_NE(augment_policy(w, cfg, 99).samples, augment_policy(w, cfg, 100).samples);
  AugmentTrace tr;
  augment_policy(w, cfg, 5, nullptr, &tr);
  EXPECT_GE(tr.speed, 0.9);
  EXPECT_LE(tr.speed, 1.1);
  EXPECT_GE(tr.gain_db, -3.0);
  EXPECT_LE(tr.gain_db, 3.0);
  EXPECT_GE(tr.snr_db, 5.0);
  EXPECT_LE(tr.snr_db, 20.0);
  EXPECT_THROW(augment_policy(WaveForm{std::vector<double>(100, 0.0), 16000}, cfg, 1), SilentAudio);
}

TEST(AugmentPolicy, FixedSnrNoiseMeasured) {
  std::mt19937_64 rng(7);
  const WaveForm w = random_wave(8000, rng);
  AugmentConfig cfg = AugmentConfig::disabled();
  cfg.noise = {NoiseSource{"gaussian", {5.0, 5.0}, 1.0}};
  const WaveForm m = augment_policy(w, cfg, 3);
  std::vector<double> added(m.samples.size());
  for (std::size_t i = 0; i < added.size(); ++i) added[i] = m.samples[i] - w.samples[i];
  EXPECT_NEAR(10.0 * std::log10(power(w.samples) / power(added)), 5.0, 0.1);
}

TEST(AugmentConfig, JsonRoundTrip) {
  const nlohmann::json j = {{"speed", nullptr}, {"gain_db", {{"min", -1}, {"max", 1}}},
                            {"noise", {{{"path", "gaussian"}, {"snr_db", {{"min", -5}, {"max", 20}}}}}}};
  const AugmentConfig c = j.get<AugmentConfig>();
  EXPECT_FALSE(c.speed_enabled);
  EXPECT_EQ(c.gain_db.max, 1.0);
  ASSERT_EQ(c.noise.size(), 1u);
  EXPECT_EQ(c.noise[0].snr_db.min, -5.0);
  EXPECT_EQ(nlohmann::json(c), nlohmann::json(nlohmann::json(c).get<AugmentConfig>()));
  EXPECT_THROW((nlohmann::json{{"speed", {{"min", 2}, {"max", 1}}}}.get<AugmentConfig>()), ConfigError);
}
