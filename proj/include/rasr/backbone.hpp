#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "rasr/nn.hpp"

namespace rasr {

struct ConvLayerSpec {
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t channels = 512;
  std::string activation = "gelu";
};

struct EncoderConfig {
  std::string preset = "desk";
  std::size_t input_channels = 80;
  std::vector<ConvLayerSpec> conv_layers;
  std::size_t tf_layers = 4;
  std::size_t hidden = 256;
  std::size_t heads = 4;
  std::size_t ffn = 1024;
  double dropout = 0.1;

  static constexpr std::size_t kFeatureWidth = 512;

  // Seven GELU conv layers, kernels 10,3,3,3,3,2,2 and strides 5,2,...,2;
  // 24 x 1024 transformer with 16 heads.
  static EncoderConfig paper() {
    EncoderConfig c;
    c.preset = "paper";
    const std::size_t k[] = {10, 3, 3, 3, 3, 2, 2};
    const std::size_t s[] = {5, 2, 2, 2, 2, 2, 2};
    for (int i = 0; i < 7; ++i) c.conv_layers.push_back({k[i], s[i], 512, "gelu"});
    c.tf_layers = 24;
    c.hidden = 1024;
    c.heads = 16;
    c.ffn = 4096;
    c.dropout = 0.1;
    return c;
  }

  // Same kernels, stride only in the first layer, narrow intermediate
  // channels; ends at 512 like the full-size encoder.
  static EncoderConfig desk() {
    EncoderConfig c;
    c.preset = "desk";
    const std::size_t k[] = {10, 3, 3, 3, 3, 2, 2};
    const std::size_t s[] = {2, 1, 1, 1, 1, 1, 1};
    for (int i = 0; i < 7; ++i) c.conv_layers.push_back({k[i], s[i], i == 6 ? kFeatureWidth : 128, "gelu"});
    c.tf_layers = 4;
    c.hidden = 256;
    c.heads = 4;
    c.ffn = 1024;
    c.dropout = 0.1;
    return c;
  }

  static EncoderConfig from_preset(const std::string& name) {
    if (name == "paper") return paper();
    if (name == "desk") return desk();
    throw ConfigError("unknown preset '" + name + "' (expected paper or desk)");
  }

  void validate() const {
    if (conv_layers.empty()) throw ConfigError("encoder needs at least one conv layer");
    if (conv_layers.back().channels != kFeatureWidth) throw ConfigError("conv stack must end at 512 channels");
    for (const auto& l : conv_layers) {
      if (l.kernel == 0 || l.stride == 0 || l.channels == 0) throw ConfigError("conv layer fields must be positive");
      if (l.activation != "gelu" && l.activation != "linear") throw ConfigError("unknown activation " + l.activation);
    }
    if (heads == 0 || hidden % heads != 0) throw ConfigError("hidden size must be divisible by heads");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
  }

  // Sequence length after each conv layer, starting with `input_length`.
  std::vector<std::size_t> length_chain(std::size_t input_length) const {
    std::vector<std::size_t> chain{input_length};
    for (const auto& l : conv_layers) chain.push_back(ad::conv_output_length(chain.back(), l.kernel, l.stride));
    return chain;
  }
  std::size_t output_length(std::size_t input_length) const { return length_chain(input_length).back(); }
};

inline void to_json(nlohmann::json& j, const ConvLayerSpec& l) {
  j = {{"kernel", l.kernel}, {"stride", l.stride}, {"channels", l.channels}, {"activation", l.activation}};
}
inline void from_json(const nlohmann::json& j, ConvLayerSpec& l) {
  j.at("kernel").get_to(l.kernel);
  j.at("stride").get_to(l.stride);
  j.at("channels").get_to(l.channels);
  l.activation = j.value("activation", "gelu");
}
inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"preset", c.preset}, {"input_channels", c.input_channels}, {"conv_layers", c.conv_layers},
       {"tf_layers", c.tf_layers}, {"hidden", c.hidden}, {"heads", c.heads}, {"ffn", c.ffn}, {"dropout", c.dropout}};
}
// Fields override the named preset, so partial blocks are allowed.
inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c = EncoderConfig::from_preset(j.value("preset", c.preset.empty() ? std::string("desk") : c.preset));
  if (j.contains("input_channels")) j.at("input_channels").get_to(c.input_channels);
  if (j.contains("conv_layers")) j.at("conv_layers").get_to(c.conv_layers);
  if (j.contains("tf_layers")) j.at("tf_layers").get_to(c.tf_layers);
  if (j.contains("hidden")) j.at("hidden").get_to(c.hidden);
  if (j.contains("heads")) j.at("heads").get_to(c.heads);
  if (j.contains("ffn")) j.at("ffn").get_to(c.ffn);
  if (j.contains("dropout")) j.at("dropout").get_to(c.dropout);
}

class ConvEncoder {
public:
  ConvEncoder() = default;
  ConvEncoder(nn::ParameterStore& ps, const std::string& name, const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    std::size_t c_in = cfg.input_channels;
    for (std::size_t i = 0; i < cfg.conv_layers.size(); ++i) {
      const auto& l = cfg.conv_layers[i];
      layers_.emplace_back(ps, name + ".conv" + std::to_string(i), c_in, l.channels, l.kernel, l.stride, rng);
      c_in = l.channels;
    }
  }

  // (T' x 80) -> (T'' x 512).
  ad::Var operator()(const ad::Var& x) const {
    if (x.cols() != cfg_.input_channels)
      throw ShapeError("conv encoder expects " + std::to_string(cfg_.input_channels) + " input channels");
    const auto chain = cfg_.length_chain(x.rows());
    for (std::size_t i = 1; i < chain.size(); ++i)
      if (chain[i] == 0)
        throw SequenceTooShort(std::to_string(x.rows()) + " frames vanish at conv layer " + std::to_string(i) +
                               " (" + cfg_.preset + " preset)");
    ad::Var h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = layers_[i](h);
      if (cfg_.conv_layers[i].activation == "gelu") h = ad::gelu(h);
    }
    return h;
  }

  const EncoderConfig& config() const { return cfg_; }

private:
  EncoderConfig cfg_;
  std::vector<nn::Conv1d> layers_;
};

struct TransformerBlock {
  nn::LayerNorm ln_attn;
  nn::MultiHeadSelfAttention attn;
  nn::LayerNorm ln_ffn;
  nn::Linear ff_in;
  nn::Linear ff_out;
};

// Linear bridge 512 -> hidden, additive sinusoidal positions, pre-norm blocks,
// final layer norm.
class TransformerEncoder {
public:
  TransformerEncoder() = default;
  TransformerEncoder(nn::ParameterStore& ps, const std::string& name, const EncoderConfig& cfg, Rng& rng)
      : cfg_(cfg), input_proj_(ps, name + ".input_proj", EncoderConfig::kFeatureWidth, cfg.hidden, rng) {
    for (std::size_t i = 0; i < cfg.tf_layers; ++i) {
      const std::string p = name + ".layer" + std::to_string(i);
      blocks_.push_back({nn::LayerNorm(ps, p + ".ln_attn", cfg.hidden),
                         nn::MultiHeadSelfAttention(ps, p + ".attn", cfg.hidden, cfg.heads, rng),
                         nn::LayerNorm(ps, p + ".ln_ffn", cfg.hidden), nn::Linear(ps, p + ".ff_in", cfg.hidden, cfg.ffn, rng),
                         nn::Linear(ps, p + ".ff_out", cfg.ffn, cfg.hidden, rng)});
    }
    if (cfg.tf_layers > 0) final_ln_ = nn::LayerNorm(ps, name + ".final_ln", cfg.hidden);
  }

  // `valid`, when non-empty, marks real (true) versus padded (false) frames;
  // padded frames are excluded as attention keys. `rng` is only used when
  // `train` enables dropout.
  ad::Var operator()(const ad::Var& z, const std::vector<bool>& valid = {}, bool train = false,
                     Rng* rng = nullptr) const {
    if (z.cols() != EncoderConfig::kFeatureWidth) throw ShapeError("transformer expects 512-wide features");
    if (!valid.empty() && valid.size() != z.rows()) throw ShapeError("padding mask length mismatch");
    const bool drop = train && cfg_.dropout > 0.0;
    if (drop && rng == nullptr) throw ConfigError("training-mode dropout needs a generator");
    Tensor mask;
    if (!valid.empty() && std::find(valid.begin(), valid.end(), false) != valid.end()) mask = nn::key_padding_mask(valid);

    ad::Var h = ad::add(input_proj_(z), ad::constant(nn::sinusoidal_pe(z.rows(), cfg_.hidden)));
    for (const auto& b : blocks_) {
      ad::Var a = b.attn(b.ln_attn(h), mask);
      if (drop) a = ad::dropout(a, cfg_.dropout, true, *rng);
      h = ad::add(h, a);
      ad::Var f = b.ff_out(ad::gelu(b.ff_in(b.ln_ffn(h))));
      if (drop) f = ad::dropout(f, cfg_.dropout, true, *rng);
      h = ad::add(h, f);
    }
    if (!blocks_.empty()) h = final_ln_(h);
    return h;
  }

  const EncoderConfig& config() const { return cfg_; }

private:
  EncoderConfig cfg_;
  nn::Linear input_proj_;
  std::vector<TransformerBlock> blocks_;
  nn::LayerNorm final_ln_;
};

} // namespace rasr
