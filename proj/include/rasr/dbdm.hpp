#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "rasr/nn.hpp"

// Diffusion-based denoising of encoder feature sequences.
namespace rasr::dbdm {

using ad::Var;

// Linear beta schedule. Steps are 1-based: beta(1) .. beta(steps()).
class NoiseSchedule {
public:
  NoiseSchedule() = default;
  explicit NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
    if (betas_.empty()) throw ConfigError("noise schedule needs at least one step");
    double prod = 1.0;
    for (double b : betas_) {
      if (!(b > 0.0 && b < 1.0)) throw ConfigError("beta values must lie in (0, 1)");
      alphas_.push_back(1.0 - b);
      prod *= 1.0 - b;
      alpha_bars_.push_back(prod);
    }
  }

  std::size_t steps() const { return betas_.size(); }
  double beta(std::size_t t) const { return betas_.at(index(t)); }
  double alpha(std::size_t t) const { return alphas_.at(index(t)); }
  double alpha_bar(std::size_t t) const { return alpha_bars_.at(index(t)); }
  // sigma_t^2 = beta_t for t > 1, sigma_1 = 0.
  double sigma(std::size_t t) const { return t > 1 ? std::sqrt(beta(t)) : 0.0; }

  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alphas() const { return alphas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }

private:
  std::size_t index(std::size_t t) const {
    if (t < 1 || t > betas_.size())
      throw ConfigError("diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(betas_.size()) + "]");
    return t - 1;
  }

  std::vector<double> betas_, alphas_, alpha_bars_;
};

inline NoiseSchedule make_schedule(std::size_t steps, double beta_start = 1e-4, double beta_end = 0.02,
                                   const std::string& kind = "linear") {
  if (steps < 1) throw ConfigError("diffusion needs at least one step");
  if (kind != "linear") throw ConfigError("unsupported schedule kind '" + kind + "'");
  std::vector<double> b(steps);
  for (std::size_t i = 0; i < steps; ++i)
    b[i] = steps == 1 ? beta_start
                      : beta_start + (beta_end - beta_start) * static_cast<double>(i) / static_cast<double>(steps - 1);
  return NoiseSchedule(std::move(b));
}

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
inline Var forward_diffuse(const Var& z0, std::size_t t, const Var& eps, const NoiseSchedule& s) {
  if (eps.shape() != z0.shape()) throw ShapeError("noise shape differs from features");
  const double ab = s.alpha_bar(t);
  return ad::add(ad::scale(z0, std::sqrt(ab)), ad::scale(eps, std::sqrt(1.0 - ab)));
}

// mu = (z_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t);
// z_{t-1} = mu + sigma_t * noise. `noise` may be empty (treated as zero).
inline Var reverse_step(const Var& z_t, std::size_t t, const Var& eps_hat, const NoiseSchedule& s,
                        const Tensor& noise = {}) {
  if (t < 1) throw ConfigError("reverse step needs t >= 1");
  if (eps_hat.shape() != z_t.shape()) throw ShapeError("predicted noise shape differs from features");
  const double coef = s.beta(t) / std::sqrt(1.0 - s.alpha_bar(t));
  Var mu = ad::scale(ad::sub(z_t, ad::scale(eps_hat, coef)), 1.0 / std::sqrt(s.alpha(t)));
  const double sigma = s.sigma(t);
  if (sigma == 0.0 || noise.empty()) return mu;
  if (noise.size() != z_t.size()) throw ShapeError("sampling noise shape differs from features");
  Tensor scaled = noise;
  for (double& v : scaled.storage()) v *= sigma;
  return ad::add(mu, ad::constant(scaled.reshaped(z_t.shape())));
}

// Evenly strided descending steps that always end at t = 1.
inline std::vector<std::size_t> denoise_timesteps(std::size_t total_steps, std::size_t steps) {
  if (steps < 1 || steps > total_steps)
    throw ConfigError("denoising steps must be in [1, " + std::to_string(total_steps) + "], got " +
                      std::to_string(steps));
  std::vector<std::size_t> ts(steps);
  for (std::size_t k = 0; k < steps; ++k) ts[steps - 1 - k] = 1 + (k * total_steps) / steps;
  return ts;
}

// Ancestral sampling from `z_noisy`, treated as a sample at the first step of
// the strided sequence. Without a generator the sampling noise is zero.
template <class Predictor>
Var denoise(const Var& z_noisy, const Predictor& predict, const NoiseSchedule& s, std::size_t steps, Rng* rng = nullptr) {
  Var z = z_noisy;
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t t : denoise_timesteps(s.steps(), steps)) {
    Tensor noise;
    if (rng != nullptr && t > 1) {
      noise = Tensor(z.shape());
      for (double& v : noise.storage()) v = normal(*rng);
    }
    z = reverse_step(z, t, predict(z, t), s, noise);
  }
  return z;
}

struct UNetConfig {
  std::vector<std::size_t> widths{512, 256, 128, 64, 32};
  std::size_t time_dim = 128;
  std::size_t kernel = 3;
};

// 1-D U-Net over time with the feature width as channels. Encoder stage i
// maps to widths[i] (stride 2 after the first); decoder stages mirror it,
// each upsampling, cropping to the skip length, projecting to its width and
// mixing with the concatenated skip. Every stage adds a learned projection of
// the sinusoidal step embedding before its SiLU.
class UNetDenoiser {
public:
  UNetDenoiser() = default;
  UNetDenoiser(nn::ParameterStore& ps, const std::string& name, std::size_t feature_width, const UNetConfig& cfg, Rng& rng)
      : cfg_(cfg), feature_width_(feature_width) {
    if (cfg.widths.empty()) throw ConfigError("U-Net needs at least one stage");
    if (cfg.kernel % 2 == 0) throw ConfigError("U-Net kernel must be odd");
    const std::size_t pad = cfg.kernel / 2;
    std::size_t c_in = feature_width;
    for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
      const std::string p = name + ".enc" + std::to_string(i);
      enc_.push_back({nn::Conv1d(ps, p + ".conv", c_in, cfg.widths[i], cfg.kernel, i == 0 ? 1 : 2, rng, pad),
                      nn::Linear(ps, p + ".time", cfg.time_dim, cfg.widths[i], rng)});
      c_in = cfg.widths[i];
    }
    for (std::size_t j = 0; j < cfg.widths.size(); ++j) {
      const std::size_t w = cfg.widths[cfg.widths.size() - 1 - j];
      const std::string p = name + ".dec" + std::to_string(j);
      dec_.push_back({nn::Conv1d(ps, p + ".up", c_in, w, cfg.kernel, 1, rng, pad),
                      nn::Conv1d(ps, p + ".mix", 2 * w, w, cfg.kernel, 1, rng, pad),
                      nn::Linear(ps, p + ".time", cfg.time_dim, w, rng)});
      c_in = w;
    }
    out_ = nn::Linear(ps, name + ".out", c_in, feature_width, rng);
  }

  Tensor time_embedding(std::size_t t) const {
    Tensor e = Tensor::matrix(1, cfg_.time_dim);
    nn::sinusoidal_row(static_cast<double>(t), e.row(0));
    return e;
  }

  // Predicted noise, same shape as `z_t`.
  Var operator()(const Var& z_t, std::size_t t) const {
    if (z_t.cols() != feature_width_) throw ShapeError("U-Net expects width " + std::to_string(feature_width_));
    if (z_t.rows() == 0) throw SequenceTooShort("U-Net input has no frames");
    const Var temb = ad::constant(time_embedding(t));
    std::vector<Var> skips;
    Var h = z_t;
    for (const auto& s : enc_) {
      h = ad::silu(ad::add(s.conv(h), s.time(temb)));
      skips.push_back(h);
    }
    for (std::size_t j = 0; j < dec_.size(); ++j) {
      const auto& s = dec_[j];
      const Var& skip = skips[skips.size() - 1 - j];
      if (h.rows() != skip.rows()) h = ad::slice_rows(ad::upsample_rows(h, 2), 0, skip.rows());
      h = s.up(h);
      h = ad::silu(ad::add(s.mix(ad::concat_cols({h, skip})), s.time(temb)));
    }
    return out_(h);
  }

  const UNetConfig& config() const { return cfg_; }

private:
  struct EncStage {
    nn::Conv1d conv;
    nn::Linear time;
  };
  struct DecStage {
    nn::Conv1d up;
    nn::Conv1d mix;
    nn::Linear time;
  };
  UNetConfig cfg_;
  std::size_t feature_width_ = 0;
  std::vector<EncStage> enc_;
  std::vector<DecStage> dec_;
  nn::Linear out_;
};

// Frozen frame-level phoneme posterior map, width -> 64 -> n_phonemes with a
// row softmax. Its parameters live in a private store and never train.
class PhoneticClassifier {
public:
  explicit PhoneticClassifier(std::size_t feature_width = 512, std::size_t n_phonemes = 8, std::uint64_t seed = 0x50484f4eULL) {
    Rng rng(seed);
    hidden_ = nn::Linear(store_, "phi.hidden", feature_width, 64, rng);
    out_ = nn::Linear(store_, "phi.out", 64, n_phonemes, rng);
    store_.set_trainable_prefix("phi.", false);
  }

  Var operator()(const Var& z) const { return ad::softmax_rows(out_(ad::gelu(hidden_(z)))); }

private:
  nn::ParameterStore store_;
  nn::Linear hidden_, out_;
};

// lambda1 * mean over frames and classes of (phi(clean) - phi(denoised))^2.
template <class Phi>
Var phonetic_consistency_loss(const Var& z_clean, const Var& z_denoised, const Phi& phi, double lambda1) {
  return ad::scale(ad::mse(phi(z_clean), phi(z_denoised)), lambda1);
}

// One-shot estimate of z0 from z_t and predicted noise.
inline Var estimate_clean(const Var& z_t, std::size_t t, const Var& eps_hat, const NoiseSchedule& s) {
  const double ab = s.alpha_bar(t);
  return ad::scale(ad::sub(z_t, ad::scale(eps_hat, std::sqrt(1.0 - ab))), 1.0 / std::sqrt(ab));
}

struct DbdmLoss {
  Var total;
  Var noise_mse;
  Var phonetic;
};

// Mean-square noise prediction error plus the phonetic term evaluated on the
// one-shot clean estimate.
template <class Predictor, class Phi>
DbdmLoss dbdm_loss(const Var& z0, std::size_t t, const Var& eps, const Predictor& predict, const NoiseSchedule& s,
                   const Phi& phi, double lambda1) {
  const Var z_t = forward_diffuse(z0, t, eps, s);
  const Var eps_hat = predict(z_t, t);
  DbdmLoss out;
  out.noise_mse = ad::mse(eps, eps_hat);
  out.phonetic = phonetic_consistency_loss(z0, estimate_clean(z_t, t, eps_hat, s), phi, lambda1);
  out.total = ad::add(out.noise_mse, out.phonetic);
  return out;
}

} // namespace rasr::dbdm
