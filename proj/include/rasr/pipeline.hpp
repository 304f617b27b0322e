#pragma once

#include <chrono>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rasr/backbone.hpp"
#include "rasr/ccam.hpp"
#include "rasr/ctc.hpp"
#include "rasr/dbdm.hpp"
#include "rasr/dsp.hpp"

namespace rasr {

struct LossConfig {
  ctc::LossWeights alpha;
  double lambda1 = 1.0; // phonetic consistency
  double lambda2 = 1.0; // gender CE
  double lambda3 = 1.0; // age CE
  double lambda4 = 1.0; // dialect CE
};

inline void to_json(nlohmann::json& j, const LossConfig& c) {
  j = {{"alpha1", c.alpha.alpha1}, {"alpha2", c.alpha.alpha2}, {"alpha3", c.alpha.alpha3}, {"lambda1", c.lambda1},
       {"lambda2", c.lambda2},     {"lambda3", c.lambda3},     {"lambda4", c.lambda4}};
}
inline void from_json(const nlohmann::json& j, LossConfig& c) {
  c.alpha.alpha1 = j.value("alpha1", c.alpha.alpha1);
  c.alpha.alpha2 = j.value("alpha2", c.alpha.alpha2);
  c.alpha.alpha3 = j.value("alpha3", c.alpha.alpha3);
  c.lambda1 = j.value("lambda1", c.lambda1);
  c.lambda2 = j.value("lambda2", c.lambda2);
  c.lambda3 = j.value("lambda3", c.lambda3);
  c.lambda4 = j.value("lambda4", c.lambda4);
}

struct ModelConfig {
  EncoderConfig encoder = EncoderConfig::desk();
  dbdm::UNetConfig unet;
  std::size_t diffusion_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::size_t denoise_steps = 10;      // inference
  std::size_t train_denoise_steps = 10; // denoising chain length inside the joint loss
  bool run_denoiser = true;            // false skips the denoiser at inference
  std::size_t n_phonemes = 8;
  std::uint64_t phonetic_seed = 0x50484f4eULL;
  std::uint64_t init_seed = 1;

  static ModelConfig from_preset(const std::string& preset) {
    ModelConfig c;
    c.encoder = EncoderConfig::from_preset(preset);
    return c;
  }

  void validate() const {
    encoder.validate();
    if (unet.widths.empty() || unet.widths.front() != EncoderConfig::kFeatureWidth)
      throw ConfigError("U-Net must start at the 512-wide feature width");
    if (diffusion_steps < 1) throw ConfigError("diffusion_steps must be >= 1");
    if (denoise_steps > diffusion_steps || train_denoise_steps > diffusion_steps)
      throw ConfigError("denoising steps exceed diffusion_steps");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"encoder", c.encoder},
       {"unet", {{"widths", c.unet.widths}, {"time_dim", c.unet.time_dim}, {"kernel", c.unet.kernel}}},
       {"diffusion_steps", c.diffusion_steps},
       {"beta_start", c.beta_start},
       {"beta_end", c.beta_end},
       {"denoise_steps", c.denoise_steps},
       {"train_denoise_steps", c.train_denoise_steps},
       {"run_denoiser", c.run_denoiser},
       {"n_phonemes", c.n_phonemes},
       {"phonetic_seed", c.phonetic_seed},
       {"init_seed", c.init_seed}};
}
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (j.contains("encoder")) {
    nlohmann::json e = j["encoder"];
    if (!e.contains("preset")) e["preset"] = c.encoder.preset;
    e.get_to(c.encoder);
  }
  if (j.contains("unet")) {
    const auto& u = j["unet"];
    if (u.contains("widths")) u["widths"].get_to(c.unet.widths);
    c.unet.time_dim = u.value("time_dim", c.unet.time_dim);
    c.unet.kernel = u.value("kernel", c.unet.kernel);
  }
  c.diffusion_steps = j.value("diffusion_steps", c.diffusion_steps);
  c.beta_start = j.value("beta_start", c.beta_start);
  c.beta_end = j.value("beta_end", c.beta_end);
  c.denoise_steps = j.value("denoise_steps", c.denoise_steps);
  c.train_denoise_steps = j.value("train_denoise_steps", c.train_denoise_steps);
  c.run_denoiser = j.value("run_denoiser", c.run_denoiser);
  c.n_phonemes = j.value("n_phonemes", c.n_phonemes);
  c.phonetic_seed = j.value("phonetic_seed", c.phonetic_seed);
  c.init_seed = j.value("init_seed", c.init_seed);
}

// One training example: a clean utterance and its noisy counterpart of the
// same length, the grapheme targets and the speaker labels.
struct PairedExample {
  std::string id;
  WaveForm clean;
  WaveForm noisy;
  std::vector<int> target;
  ccam::SpeakerLabels labels;
  // Number of real samples when the waveforms were zero-padded for batching.
  std::optional<std::size_t> valid_samples;
};

struct LossBreakdown {
  ad::Var ctc, phonetic, speaker, consistency, total;
};

struct ForwardOptions {
  bool train = false;
  std::optional<std::size_t> denoise_steps; // default: model's train_denoise_steps; 0 bypasses
  Rng* rng = nullptr;                       // dropout and sampling noise
};

struct Transcription {
  std::string text;
  Tensor posteriors;      // (T'' x V)
  Tensor features;        // conv encoder output Z
  Tensor denoised;        // Z after the denoiser (equal to Z when bypassed)
  Tensor gender, age, dialect;
  double rtf = 0.0;
  double seconds = 0.0;
};

// featurize -> conv encoder -> denoiser -> transformer -> speaker-conditioned
// cross-attention -> CTC head.
class Model {
public:
  explicit Model(ModelConfig cfg, ctc::Vocabulary vocab = {}) : cfg_(std::move(cfg)), vocab_(std::move(vocab)) {
    cfg_.validate();
    Rng rng(cfg_.init_seed);
    conv_ = ConvEncoder(params_, "encoder", cfg_.encoder, rng);
    unet_ = dbdm::UNetDenoiser(params_, "dbdm.unet", EncoderConfig::kFeatureWidth, cfg_.unet, rng);
    transformer_ = TransformerEncoder(params_, "transformer", cfg_.encoder, rng);
    speaker_ = ccam::SpeakerClassifier(params_, "ccam.speaker", EncoderConfig::kFeatureWidth, rng);
    cross_ = ccam::CrossAttention(params_, "ccam.attn", cfg_.encoder.hidden, rng);
    ctc_weight_ = params_.add("ctc.weight", nn::he_uniform({cfg_.encoder.hidden, vocab_.size()}, cfg_.encoder.hidden, rng));
    schedule_ = dbdm::make_schedule(cfg_.diffusion_steps, cfg_.beta_start, cfg_.beta_end);
    dbdm::PhoneticClassifier phi(EncoderConfig::kFeatureWidth, cfg_.n_phonemes, cfg_.phonetic_seed);
    phi_ = [phi](const ad::Var& z) { return phi(z); };
  }

  const ModelConfig& config() const { return cfg_; }
  const ctc::Vocabulary& vocabulary() const { return vocab_; }
  nn::ParameterStore& params() { return params_; }
  const nn::ParameterStore& params() const { return params_; }
  const dbdm::NoiseSchedule& schedule() const { return schedule_; }
  const dbdm::UNetDenoiser& unet() const { return unet_; }

  using PhoneticMap = std::function<ad::Var(const ad::Var&)>;
  const PhoneticMap& phonetic_map() const { return phi_; }
  void set_phonetic_map(PhoneticMap phi) { phi_ = std::move(phi); }

  // Conv features of a waveform. When `valid_samples` is set, frames that
  // depend on padding are cropped away.
  ad::Var encode(const WaveForm& wave, std::optional<std::size_t> valid_samples = {}) const {
    Tensor x;
    try {
      x = dsp::featurize(wave);
    } catch (const Error& e) {
      throw StageError("featurize", e);
    }
    try {
      ad::Var z = conv_(ad::constant(std::move(x)));
      if (valid_samples) {
        const std::size_t frames = dsp::frame_count(*valid_samples);
        if (frames == 0) throw AudioTooShort("valid region shorter than one frame");
        const std::size_t keep = cfg_.encoder.output_length(frames);
        if (keep == 0) throw SequenceTooShort("valid region vanishes in the conv encoder");
        if (keep < z.rows()) z = ad::slice_rows(z, 0, keep);
      }
      return z;
    } catch (const Error& e) {
      throw StageError("conv_encode", e);
    }
  }

  // Rows of the conv feature matrix for a waveform of `num_samples` samples.
  std::size_t feature_rows(std::size_t num_samples) const {
    return cfg_.encoder.output_length(dsp::frame_count(num_samples));
  }

  ad::Var denoise(const ad::Var& z, std::size_t steps, Rng* rng) const {
    if (steps == 0) return z;
    return dbdm::denoise(z, unet_, schedule_, steps, rng);
  }

  ccam::SpeakerOutput classify_speaker(const ad::Var& z) const { return speaker_(z); }

  // Log-posteriors (T'' x V) from denoised features and a speaker embedding.
  ad::Var decode_log_probs(const ad::Var& z, const ad::Var& embedding, bool train = false, Rng* rng = nullptr) const {
    const ad::Var h = transformer_(z, {}, train, rng);
    const ad::Var hc = cross_(h, embedding);
    return ctc::ctc_head_log_probs(hc, ctc_weight_);
  }

  // All four loss components on one (clean, noisy) pair.
  LossBreakdown forward_losses(const PairedExample& ex, const LossConfig& lc, const ForwardOptions& opt = {}) const {
    if (ex.clean.samples.size() != ex.noisy.samples.size())
      throw ConfigError("clean and noisy waveforms of '" + ex.id + "' differ in length");
    const ad::Var zc = encode(ex.clean, ex.valid_samples);
    const ad::Var zn = encode(ex.noisy, ex.valid_samples);
    const std::size_t steps = opt.denoise_steps.value_or(cfg_.train_denoise_steps);
    const ad::Var zd = denoise(zn, steps, opt.rng);
    const ccam::SpeakerOutput spk_clean = speaker_(zc);
    const ccam::SpeakerOutput spk_den = speaker_(zd);
    const ad::Var log_probs = decode_log_probs(zd, spk_den.embedding, opt.train, opt.rng);

    LossBreakdown l;
    try {
      l.ctc = ctc::ctc_loss(log_probs, ex.target);
    } catch (const Error& e) {
      throw StageError("ctc[" + ex.id + "]", e);
    }
    l.phonetic = dbdm::phonetic_consistency_loss(zc, zd, phi_, lc.lambda1);
    l.speaker = ccam::speaker_loss(spk_den.prediction, ex.labels, lc.lambda2, lc.lambda3, lc.lambda4);
    l.consistency = ccam::consistency_loss(spk_clean.prediction, spk_den.prediction);
    l.total = ctc::joint_loss(l.ctc, l.phonetic, l.speaker, l.consistency, lc.alpha);
    return l;
  }

  // Noise-prediction objective on clean features at step t with noise eps.
  dbdm::DbdmLoss diffusion_loss(const WaveForm& clean, std::size_t t, const Tensor& eps, double lambda1,
                                std::optional<std::size_t> valid_samples = {}) const {
    const ad::Var z0 = encode(clean, valid_samples);
    if (eps.size() != z0.size()) throw ShapeError("diffusion noise shape mismatch");
    return dbdm::dbdm_loss(z0, t, ad::constant(eps.reshaped(z0.shape())), unet_, schedule_, phi_, lambda1);
  }

  // Eval-mode forward pass with wall-clock timing. `denoise_steps` 0 bypasses
  // the denoiser; `seed` drives the sampling noise.
  Transcription transcribe(const WaveForm& wave, std::optional<std::size_t> denoise_steps = {},
                           std::uint64_t seed = 0) const {
    ad::NoGradGuard no_grad;
    const auto t0 = std::chrono::steady_clock::now();
    if (wave.samples.size() < dsp::kFrameLength)
      throw StageError("featurize", AudioTooShort("need at least 400 samples"));
    Rng rng(seed);
    const ad::Var z = encode(wave);
    const std::size_t steps = denoise_steps.value_or(cfg_.run_denoiser ? cfg_.denoise_steps : 0);
    const ad::Var zd = denoise(z, steps, &rng);
    const ccam::SpeakerOutput spk = speaker_(zd);
    const ad::Var lp = decode_log_probs(zd, spk.embedding);
    Transcription r;
    r.posteriors = lp.value();
    for (double& v : r.posteriors.storage()) v = std::exp(v);
    r.text = ctc::greedy_decode(r.posteriors, vocab_);
    r.features = z.value();
    r.denoised = zd.value();
    r.gender = spk.prediction.gender.value();
    r.age = spk.prediction.age.value();
    r.dialect = spk.prediction.dialect.value();
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.rtf = r.seconds / wave.duration_s();
    return r;
  }

private:
  ModelConfig cfg_;
  ctc::Vocabulary vocab_;
  nn::ParameterStore params_;
  ConvEncoder conv_;
  dbdm::UNetDenoiser unet_;
  TransformerEncoder transformer_;
  ccam::SpeakerClassifier speaker_;
  ccam::CrossAttention cross_;
  ad::Var ctc_weight_;
  dbdm::NoiseSchedule schedule_;
  PhoneticMap phi_;
};

} // namespace rasr
