#pragma once

#include <cmath>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "rasr/dsp.hpp"
#include "rasr/nn.hpp"

namespace rasr::augment {

inline double mean_power(const std::vector<double>& x) {
  if (x.empty()) return 0.0;
  double s = 0.0;
  for (double v : x) s += v * v;
  return s / static_cast<double>(x.size());
}

inline double snr_db(const std::vector<double>& signal, const std::vector<double>& noise) {
  return 10.0 * std::log10(mean_power(signal) / mean_power(noise));
}

// clean + g * noise with g chosen so that P_clean / P(g * noise) = 10^(snr/10).
// The noise is looped or truncated to the clean length.
inline WaveForm mix_at_snr(const WaveForm& clean, const WaveForm& noise, double snr) {
  if (clean.samples.empty() || noise.samples.empty()) throw EmptyAudio("mixing needs non-empty signals");
  std::vector<double> n(clean.samples.size());
  for (std::size_t i = 0; i < n.size(); ++i) n[i] = noise.samples[i % noise.samples.size()];
  const double pc = mean_power(clean.samples), pn = mean_power(n);
  if (pc <= 0.0) throw SilentAudio("clean signal has zero power");
  if (pn <= 0.0) throw SilentAudio("noise signal has zero power");
  const double g = std::sqrt(pc / (pn * std::pow(10.0, snr / 10.0)));
  WaveForm out{clean.samples, clean.sample_rate};
  for (std::size_t i = 0; i < n.size(); ++i) out.samples[i] += g * n[i];
  return out;
}

inline WaveForm gaussian_noise(std::size_t length, std::uint64_t seed, int sample_rate = dsp::kSampleRate) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  WaveForm w{std::vector<double>(length), sample_rate};
  for (double& v : w.samples) v = normal(rng);
  return w;
}

// Linear-interpolation resampling; output length round(T / factor).
inline WaveForm speed_perturb(const WaveForm& wave, double factor) {
  if (!(factor >= 0.5 && factor <= 2.0)) throw ConfigError("speed factor must be in [0.5, 2.0]");
  if (wave.samples.empty()) throw EmptyAudio("speed perturbation of an empty waveform");
  const std::size_t n_in = wave.samples.size();
  const auto n_out = static_cast<std::size_t>(std::llround(static_cast<double>(n_in) / factor));
  WaveForm out{std::vector<double>(n_out), wave.sample_rate};
  for (std::size_t i = 0; i < n_out; ++i) {
    const double pos = static_cast<double>(i) * factor;
    const auto i0 = static_cast<std::size_t>(pos);
    if (i0 + 1 >= n_in) {
      out.samples[i] = wave.samples[n_in - 1];
      continue;
    }
    const double frac = pos - static_cast<double>(i0);
    out.samples[i] = wave.samples[i0] * (1.0 - frac) + wave.samples[i0 + 1] * frac;
  }
  return out;
}

inline WaveForm volume_scale(const WaveForm& wave, double gain_db) {
  const double g = std::pow(10.0, gain_db / 20.0);
  WaveForm out = wave;
  for (double& v : out.samples) v *= g;
  return out;
}

struct Range {
  double min = 0.0;
  double max = 0.0;
};

struct NoiseSource {
  std::string path = "gaussian"; // or a WAV file
  Range snr_db{5.0, 20.0};
  double weight = 1.0;
};

struct AugmentConfig {
  bool speed_enabled = true;
  Range speed{0.9, 1.1};
  bool gain_enabled = true;
  Range gain_db{-3.0, 3.0};
  std::vector<NoiseSource> noise{NoiseSource{}};

  static AugmentConfig disabled() {
    AugmentConfig c;
    c.speed_enabled = false;
    c.gain_enabled = false;
    c.noise.clear();
    return c;
  }
};

inline void from_json(const nlohmann::json& j, Range& r) {
  j.at("min").get_to(r.min);
  j.at("max").get_to(r.max);
  if (r.min > r.max) throw ConfigError("range min exceeds max");
}
inline void to_json(nlohmann::json& j, const Range& r) { j = {{"min", r.min}, {"max", r.max}}; }

// {speed: {min,max} | null, gain_db: {min,max} | null,
//  noise: [{path | "gaussian", snr_db: {min,max}, weight}]}
inline void from_json(const nlohmann::json& j, AugmentConfig& c) {
  c = AugmentConfig{};
  if (j.contains("speed")) {
    c.speed_enabled = !j["speed"].is_null();
    if (c.speed_enabled) j["speed"].get_to(c.speed);
  }
  if (j.contains("gain_db")) {
    c.gain_enabled = !j["gain_db"].is_null();
    if (c.gain_enabled) j["gain_db"].get_to(c.gain_db);
  }
  if (j.contains("noise")) {
    c.noise.clear();
    for (const auto& n : j["noise"]) {
      NoiseSource s;
      s.path = n.value("path", "gaussian");
      if (n.contains("snr_db")) n["snr_db"].get_to(s.snr_db);
      s.weight = n.value("weight", 1.0);
      if (s.weight <= 0.0) throw ConfigError("noise weight must be positive");
      c.noise.push_back(s);
    }
  }
}
inline void to_json(nlohmann::json& j, const AugmentConfig& c) {
  j = nlohmann::json::object();
  j["speed"] = c.speed_enabled ? nlohmann::json(c.speed) : nlohmann::json(nullptr);
  j["gain_db"] = c.gain_enabled ? nlohmann::json(c.gain_db) : nlohmann::json(nullptr);
  j["noise"] = nlohmann::json::array();
  for (const auto& n : c.noise) j["noise"].push_back({{"path", n.path}, {"snr_db", n.snr_db}, {"weight", n.weight}});
}

// What augment_policy drew, for logging and SNR bucketing.
struct AugmentTrace {
  double speed = 1.0;
  double gain_db = 0.0;
  std::string noise;
  double snr_db = std::numeric_limits<double>::quiet_NaN();
};

// Loads each noise WAV once.
class NoiseBank {
public:
  const WaveForm& get(const std::string& path) {
    auto it = cache_.find(path);
    if (it == cache_.end()) it = cache_.emplace(path, dsp::read_wav(path)).first;
    return it->second;
  }

private:
  std::map<std::string, WaveForm> cache_;
};

// Independently draws speed, gain, noise source and SNR, then applies speed
// -> gain -> noise. SNR is measured against the speed/gain-adjusted signal.
inline WaveForm augment_policy(const WaveForm& wave, const AugmentConfig& cfg, std::uint64_t seed,
                               NoiseBank* bank = nullptr, AugmentTrace* trace = nullptr) {
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto draw = [&](const Range& r) { return r.min + (r.max - r.min) * unit(rng); };
  AugmentTrace tr;
  WaveForm out = wave;
  if (cfg.speed_enabled) {
    tr.speed = draw(cfg.speed);
    out = speed_perturb(out, tr.speed);
  }
  if (cfg.gain_enabled) {
    tr.gain_db = draw(cfg.gain_db);
    out = volume_scale(out, tr.gain_db);
  }
  if (!cfg.noise.empty()) {
    double total = 0.0;
    for (const auto& n : cfg.noise) total += n.weight;
    double pick = unit(rng) * total;
    const NoiseSource* src = &cfg.noise.back();
    for (const auto& n : cfg.noise) {
      if (pick < n.weight) {
        src = &n;
        break;
      }
      pick -= n.weight;
    }
    tr.noise = src->path;
    tr.snr_db = draw(src->snr_db);
    const std::uint64_t noise_seed = rng();
    WaveForm noise;
    if (src->path == "gaussian") {
      noise = gaussian_noise(out.samples.size(), noise_seed, out.sample_rate);
    } else {
      NoiseBank local;
      noise = (bank ? *bank : local).get(src->path);
    }
    out = mix_at_snr(out, noise, tr.snr_db);
  }
  if (trace) *trace = tr;
  return out;
}

} // namespace rasr::augment
