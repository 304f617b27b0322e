#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rasr/autodiff.hpp"

namespace rasr {

using Rng = std::mt19937_64;

namespace nn {

using ad::Var;

// Scaled uniform initialization, U(-sqrt(6/fan_in), sqrt(6/fan_in)).
inline Tensor he_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = u(rng);
  return t;
}

// Owns every trainable tensor of a model under a unique dotted name.
class ParameterStore {
public:
  Var add(const std::string& name, Tensor init, bool trainable = true) {
    if (vars_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    if (!init.all_finite()) throw ConfigError("non-finite initial value for '" + name + "'");
    Var v(std::move(init), trainable, name);
    vars_.emplace(name, v);
    order_.push_back(name);
    return v;
  }

  const Var& get(const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }

  const std::vector<std::string>& names() const { return order_; }
  std::size_t count() const { return order_.size(); }
  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [_, v] : vars_) n += v.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, v] : vars_) v.zero_grad();
  }

  // Current gradients of every trainable parameter, zero where nothing flowed.
  ad::GradientMap gradients() const {
    ad::GradientMap g;
    for (const auto& name : order_) {
      const Var& v = vars_.at(name);
      if (v.requires_grad()) g[name] = v.grad_or_zero();
    }
    return g;
  }

  std::map<std::string, Tensor> snapshot() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, v] : vars_) out[name] = v.value();
    return out;
  }

  void load(const std::map<std::string, Tensor>& values) {
    for (const auto& name : order_) {
      auto it = values.find(name);
      if (it == values.end()) throw FormatError("checkpoint lacks parameter '" + name + "'");
      Var& v = vars_.at(name);
      if (it->second.shape() != v.shape())
        throw FormatError("shape mismatch for '" + name + "': " + shape_str(it->second.shape()) + " vs " +
                          shape_str(v.shape()));
      v.mutable_value() = it->second;
    }
  }

  void set_trainable_prefix(const std::string& prefix, bool trainable) {
    for (auto& [name, v] : vars_)
      if (name.rfind(prefix, 0) == 0) v.node().requires_grad = trainable;
  }

private:
  std::map<std::string, Var> vars_;
  std::vector<std::string> order_;
};

struct Linear {
  Var weight;
  Var bias;

  Linear() = default;
  Linear(ParameterStore& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool with_bias = true)
      : weight(ps.add(name + ".weight", he_uniform({in, out}, in, rng))) {
    if (with_bias) bias = ps.add(name + ".bias", Tensor({out}, 0.0));
  }

  Var operator()(const Var& x) const { return ad::linear(x, weight, bias); }
  std::size_t in_features() const { return weight.shape()[0]; }
  std::size_t out_features() const { return weight.shape()[1]; }
};

struct LayerNorm {
  Var gamma;
  Var beta;
  double eps = 1e-5;

  LayerNorm() = default;
  LayerNorm(ParameterStore& ps, const std::string& name, std::size_t dim)
      : gamma(ps.add(name + ".gamma", Tensor({dim}, 1.0))), beta(ps.add(name + ".beta", Tensor({dim}, 0.0))) {}

  Var operator()(const Var& x) const { return ad::layer_norm(x, gamma, beta, eps); }
};

struct Conv1d {
  Var kernels;
  Var bias;
  std::size_t stride = 1;
  std::size_t padding = 0;

  Conv1d() = default;
  Conv1d(ParameterStore& ps, const std::string& name, std::size_t c_in, std::size_t c_out, std::size_t kernel,
         std::size_t stride_, Rng& rng, std::size_t padding_ = 0)
      : kernels(ps.add(name + ".weight", he_uniform({c_out, c_in, kernel}, c_in * kernel, rng))),
        bias(ps.add(name + ".bias", Tensor({c_out}, 0.0))), stride(stride_), padding(padding_) {}

  Var operator()(const Var& x) const { return ad::conv1d(x, kernels, bias, stride, padding); }
  std::size_t kernel_size() const { return kernels.shape()[2]; }
};

// PE(pos, 2i) = sin(pos / 10000^(2i/d)), PE(pos, 2i+1) = cos(same).
inline void sinusoidal_row(double pos, std::span<double> out) {
  const std::size_t d = out.size();
  for (std::size_t j = 0; j < d; ++j) {
    const std::size_t i2 = j - (j % 2);
    const double angle = pos / std::pow(10000.0, static_cast<double>(i2) / static_cast<double>(d));
    out[j] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
  }
}

inline Tensor sinusoidal_pe(std::size_t length, std::size_t dim) {
  Tensor pe = Tensor::matrix(length, dim);
  for (std::size_t p = 0; p < length; ++p) sinusoidal_row(static_cast<double>(p), pe.row(p));
  return pe;
}

struct AttentionResult {
  Var output;
  std::vector<Tensor> weights; // one (T x T) matrix per head
};

// Additive (T x T) mask: -inf on columns whose key is padding.
inline Tensor key_padding_mask(const std::vector<bool>& valid) {
  const std::size_t t = valid.size();
  Tensor m = Tensor::matrix(t, t);
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t c = 0; c < t; ++c)
      if (!valid[c]) m(r, c) = -std::numeric_limits<double>::infinity();
  return m;
}

struct MultiHeadSelfAttention {
  Linear q, k, v, o;
  std::size_t heads = 1;

  MultiHeadSelfAttention() = default;
  MultiHeadSelfAttention(ParameterStore& ps, const std::string& name, std::size_t dim, std::size_t heads_, Rng& rng)
      : q(ps, name + ".q_proj", dim, dim, rng), k(ps, name + ".k_proj", dim, dim, rng),
        v(ps, name + ".v_proj", dim, dim, rng), o(ps, name + ".out_proj", dim, dim, rng), heads(heads_) {
    if (heads == 0 || dim % heads != 0)
      throw ConfigError("hidden size " + std::to_string(dim) + " not divisible by " + std::to_string(heads) + " heads");
  }

  // `mask`, when non-empty, is added to every head's scaled scores.
  AttentionResult forward(const Var& x, const Tensor& mask = {}) const {
    const std::size_t dim = x.cols();
    const std::size_t dh = dim / heads;
    const Var Q = q(x), K = k(x), V = v(x);
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> outs;
    AttentionResult res;
    for (std::size_t h = 0; h < heads; ++h) {
      Var qh = ad::slice_cols(Q, h * dh, dh);
      Var kh = ad::slice_cols(K, h * dh, dh);
      Var vh = ad::slice_cols(V, h * dh, dh);
      Var scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv);
      if (!mask.empty()) scores = ad::add(scores, ad::constant(mask));
      Var attn = ad::softmax_rows(scores);
      res.weights.push_back(attn.value());
      outs.push_back(ad::matmul(attn, vh));
    }
    res.output = o(heads == 1 ? outs.front() : ad::concat_cols(outs));
    return res;
  }

  Var operator()(const Var& x, const Tensor& mask = {}) const { return forward(x, mask).output; }
};

} // namespace nn
} // namespace rasr
