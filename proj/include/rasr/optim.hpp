#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>

#include "json.hpp"
#include "rasr/nn.hpp"

namespace rasr::optim {

struct AdamWConfig {
  double lr = 2e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  // false turns the decay into an L2 term folded into the gradient (plain
  // Adam with L2), kept for comparison.
  bool decoupled = true;
};

inline void to_json(nlohmann::json& j, const AdamWConfig& c) {
  j = {{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}, {"weight_decay", c.weight_decay},
       {"decoupled", c.decoupled}};
}
inline void from_json(const nlohmann::json& j, AdamWConfig& c) {
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.decoupled = j.value("decoupled", c.decoupled);
}

struct OptimizerState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  std::uint64_t step = 0;
};

class AdamW {
public:
  AdamW() = default;
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {
    if (cfg_.lr < 0.0 || cfg_.eps <= 0.0 || cfg_.weight_decay < 0.0) throw ConfigError("invalid optimizer settings");
    if (!(cfg_.beta1 >= 0.0 && cfg_.beta1 < 1.0 && cfg_.beta2 >= 0.0 && cfg_.beta2 < 1.0))
      throw ConfigError("Adam betas must be in [0, 1)");
  }

  // theta <- theta - lr*wd*theta, then the bias-corrected Adam update.
  // Parameters without an entry in `grads` are left untouched.
  void step(nn::ParameterStore& ps, const ad::GradientMap& grads) {
    ++state_.step;
    const double t = static_cast<double>(state_.step);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
    for (const auto& [name, g] : grads) {
      ad::Var p = ps.get(name);
      Tensor& theta = p.mutable_value();
      if (g.size() != theta.size()) throw ShapeError("gradient shape mismatch for '" + name + "'");
      Tensor& m = slot(state_.m, name, theta);
      Tensor& v = slot(state_.v, name, theta);
      for (std::size_t i = 0; i < theta.size(); ++i) {
        double gi = g[i];
        if (cfg_.decoupled) theta[i] -= cfg_.lr * cfg_.weight_decay * theta[i];
        else gi += cfg_.weight_decay * theta[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        theta[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  const AdamWConfig& config() const { return cfg_; }
  AdamWConfig& config() { return cfg_; }
  const OptimizerState& state() const { return state_; }
  OptimizerState& state() { return state_; }

private:
  static Tensor& slot(std::map<std::string, Tensor>& map, const std::string& name, const Tensor& like) {
    auto it = map.find(name);
    if (it == map.end()) it = map.emplace(name, Tensor(like.shape(), 0.0)).first;
    return it->second;
  }

  AdamWConfig cfg_;
  OptimizerState state_;
};

// One optimizer step over `micro_batches`: each micro-batch loss is scaled by
// 1/n before backward so the accumulated gradient is their mean. Returns the
// mean micro-batch loss.
template <class Batch, class LossFn>
double accumulate_step(nn::ParameterStore& ps, AdamW& opt, std::span<const Batch> micro_batches, LossFn&& loss_fn) {
  if (micro_batches.empty()) throw ConfigError("accumulation needs at least one micro-batch");
  ps.zero_grad();
  const double inv = 1.0 / static_cast<double>(micro_batches.size());
  double total = 0.0;
  for (const Batch& mb : micro_batches) {
    ad::Var loss = loss_fn(mb);
    total += loss.item();
    ad::backward(ad::scale(loss, inv));
  }
  opt.step(ps, ps.gradients());
  ps.zero_grad();
  return total * inv;
}

} // namespace rasr::optim
