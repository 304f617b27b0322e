#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "rasr/augment.hpp"
#include "rasr/checkpoint.hpp"
#include "rasr/data.hpp"
#include "rasr/optim.hpp"
#include "rasr/pipeline.hpp"

namespace rasr {

// Longer waveforms are truncated; shorter ones pass through unchanged.
inline WaveForm cap_duration(const WaveForm& wave, double max_s = 30.0) {
  if (!(max_s > 0.0)) throw ConfigError("max duration must be positive");
  const auto cap = static_cast<std::size_t>(std::llround(max_s * wave.sample_rate));
  if (wave.samples.size() <= cap) return wave;
  WaveForm out{std::vector<double>(wave.samples.begin(), wave.samples.begin() + static_cast<std::ptrdiff_t>(cap)),
               wave.sample_rate};
  return out;
}

// Zero-pads every item to the longest one and records the true lengths.
inline void pad_batch(std::vector<PairedExample>& batch) {
  std::size_t longest = 0;
  for (const auto& ex : batch) longest = std::max(longest, ex.clean.samples.size());
  for (auto& ex : batch) {
    const std::size_t n = ex.valid_samples.value_or(ex.clean.samples.size());
    if (ex.clean.samples.size() == longest) continue;
    ex.valid_samples = n;
    ex.clean.samples.resize(longest, 0.0);
    ex.noisy.samples.resize(longest, 0.0);
  }
}

enum class Stage { Diffusion, Joint };

inline Stage parse_stage(const std::string& s) {
  if (s == "diffusion") return Stage::Diffusion;
  if (s == "joint") return Stage::Joint;
  throw ConfigError("unknown stage '" + s + "' (expected diffusion or joint)");
}
inline std::string to_string(Stage s) { return s == Stage::Diffusion ? "diffusion" : "joint"; }

struct TrainConfig {
  Stage stage = Stage::Joint;
  optim::AdamWConfig optimizer;
  std::size_t micro_batch = 16;
  std::size_t accum_steps = 4;
  double max_audio_s = 30.0;
  std::size_t checkpoint_every = 1000;
  std::size_t patience = 5;
  std::size_t epochs = 30;
  std::size_t max_steps = 0;  // 0: bounded by epochs only
  std::size_t eval_every = 0; // 0: once per epoch
  LossConfig loss;
  bool augment = true;
  augment::AugmentConfig augmentation;
  std::uint64_t seed = 0;
  std::string checkpoint_dir;

  static TrainConfig for_stage(Stage s) {
    TrainConfig c;
    c.stage = s;
    c.optimizer.lr = s == Stage::Diffusion ? 5e-5 : 2e-5;
    c.epochs = s == Stage::Diffusion ? 50 : 30;
    return c;
  }

  void validate() const {
    if (micro_batch < 1 || accum_steps < 1) throw ConfigError("micro_batch and accum_steps must be >= 1");
    if (!(max_audio_s > 0.0)) throw ConfigError("max_audio_s must be positive");
    if (!(optimizer.lr >= 0.0)) throw ConfigError("learning rate must be non-negative");
    if (epochs < 1 && max_steps < 1) throw ConfigError("either epochs or max_steps must be positive");
    if (patience < 1) throw ConfigError("patience must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"stage", to_string(c.stage)},
       {"optimizer", c.optimizer},
       {"micro_batch", c.micro_batch},
       {"accum_steps", c.accum_steps},
       {"max_audio_s", c.max_audio_s},
       {"checkpoint_every", c.checkpoint_every},
       {"patience", c.patience},
       {"epochs", c.epochs},
       {"max_steps", c.max_steps},
       {"eval_every", c.eval_every},
       {"loss", c.loss},
       {"augment", c.augment},
       {"augmentation", c.augmentation},
       {"seed", c.seed},
       {"checkpoint_dir", c.checkpoint_dir}};
}

// Unset fields keep their current value, except that a stage change resets
// lr and epochs to that stage's defaults unless they are given.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (j.contains("stage")) {
    const Stage s = parse_stage(j["stage"].get<std::string>());
    if (s != c.stage) {
      const TrainConfig d = TrainConfig::for_stage(s);
      c.stage = s;
      c.optimizer.lr = d.optimizer.lr;
      c.epochs = d.epochs;
    }
  }
  if (j.contains("optimizer")) j["optimizer"].get_to(c.optimizer);
  c.micro_batch = j.value("micro_batch", c.micro_batch);
  c.accum_steps = j.value("accum_steps", c.accum_steps);
  c.max_audio_s = j.value("max_audio_s", c.max_audio_s);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.patience = j.value("patience", c.patience);
  c.epochs = j.value("epochs", c.epochs);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.eval_every = j.value("eval_every", c.eval_every);
  if (j.contains("loss")) j["loss"].get_to(c.loss);
  c.augment = j.value("augment", c.augment);
  if (j.contains("augmentation")) j["augmentation"].get_to(c.augmentation);
  c.seed = j.value("seed", c.seed);
  c.checkpoint_dir = j.value("checkpoint_dir", c.checkpoint_dir);
}

struct HistoryRow {
  std::size_t step = 0;
  Stage stage = Stage::Joint;
  double loss = 0.0;
  double ctc = 0.0, phonetic = 0.0, speaker = 0.0, consistency = 0.0, noise_mse = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
};

inline void to_json(nlohmann::json& j, const HistoryRow& r) {
  const auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
  j = {{"step", r.step},         {"stage", to_string(r.stage)},
       {"loss", r.loss},         {"ctc", r.ctc},
       {"phonetic", r.phonetic}, {"speaker", r.speaker},
       {"consistency", r.consistency}, {"noise_mse", r.noise_mse},
       {"val_loss", num(r.val_loss)}};
}
inline void from_json(const nlohmann::json& j, HistoryRow& r) {
  r.step = j.at("step");
  r.stage = parse_stage(j.at("stage"));
  r.loss = j.at("loss");
  r.ctc = j.at("ctc");
  r.phonetic = j.at("phonetic");
  r.speaker = j.at("speaker");
  r.consistency = j.at("consistency");
  r.noise_mse = j.at("noise_mse");
  r.val_loss = j.at("val_loss").is_null() ? std::numeric_limits<double>::quiet_NaN() : j.at("val_loss").get<double>();
}

inline void write_history_csv(const std::filesystem::path& path, const std::vector<HistoryRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "step,stage,loss,ctc,phonetic,speaker,consistency,noise_mse,val_loss\n";
  out.precision(17);
  for (const auto& r : rows) {
    out << r.step << ',' << to_string(r.stage) << ',' << r.loss << ',' << r.ctc << ',' << r.phonetic << ','
        << r.speaker << ',' << r.consistency << ',' << r.noise_mse << ',';
    if (!std::isnan(r.val_loss)) out << r.val_loss;
    out << '\n';
  }
}

// Single-writer training loop over one stage. All randomness (shuffling,
// augmentation draws, dropout, diffusion steps and noise) comes from one
// seeded generator whose state is part of the checkpoint.
class Trainer {
public:
  Trainer(Model& model, TrainConfig cfg, std::vector<data::Utterance> train, std::vector<data::Utterance> val = {})
      : model_(model), cfg_(std::move(cfg)), train_(std::move(train)), val_(std::move(val)), opt_(cfg_.optimizer),
        rng_(cfg_.seed) {
    cfg_.validate();
    if (train_.empty()) throw ConfigError("training set is empty");
    for (auto& u : train_) u.wave = cap_duration(u.wave, cfg_.max_audio_s);
    for (auto& u : val_) u.wave = cap_duration(u.wave, cfg_.max_audio_s);
    apply_trainable();
    order_.resize(train_.size());
    reshuffle();
  }

  const TrainConfig& config() const { return cfg_; }
  std::size_t step_count() const { return step_; }
  std::size_t epoch() const { return epoch_; }
  std::size_t evaluations() const { return evaluations_; }
  bool stopped_early() const { return stopped_; }
  const std::vector<HistoryRow>& history() const { return history_; }
  optim::AdamW& optimizer() { return opt_; }

  std::size_t steps_per_epoch() const {
    const std::size_t per_step = cfg_.micro_batch * cfg_.accum_steps;
    return (train_.size() + per_step - 1) / per_step;
  }

  // Builds the (clean, noisy) pair for one utterance: the speed factor is
  // applied to the clean copy first so both stay the same length, then gain
  // and noise yield the noisy copy.
  PairedExample make_pair(const data::Utterance& u, std::uint64_t seed) const {
    PairedExample ex;
    ex.id = u.id;
    ex.target = u.target;
    ex.labels = u.labels;
    ex.clean = u.wave;
    if (!cfg_.augment) {
      ex.noisy = ex.clean;
      return ex;
    }
    Rng r(seed);
    if (cfg_.augmentation.speed_enabled) {
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      const auto& s = cfg_.augmentation.speed;
      ex.clean = augment::speed_perturb(ex.clean, s.min + (s.max - s.min) * unit(r));
    }
    augment::AugmentConfig rest = cfg_.augmentation;
    rest.speed_enabled = false;
    ex.noisy = augment::augment_policy(ex.clean, rest, r(), &noise_bank_);
    return ex;
  }

  // One optimizer step over accum_steps micro-batches. Returns the mean loss.
  double step() {
    std::vector<std::vector<PairedExample>> micro(cfg_.accum_steps);
    for (auto& mb : micro) {
      for (std::size_t i = 0; i < cfg_.micro_batch; ++i) {
        const data::Utterance& u = next_utterance();
        mb.push_back(make_pair(u, rng_()));
      }
      pad_batch(mb);
    }
    HistoryRow row;
    row.step = step_ + 1;
    row.stage = cfg_.stage;
    const double inv_accum = 1.0 / static_cast<double>(cfg_.accum_steps);
    const auto loss_fn = [&](const std::vector<PairedExample>& mb) {
      const double inv = 1.0 / static_cast<double>(mb.size());
      ad::Var total;
      for (const auto& ex : mb) {
        ad::Var l = item_loss(ex, row, inv * inv_accum, rng_, true);
        total = total.ptr() ? ad::add(total, l) : l;
      }
      return ad::scale(total, inv);
    };
    row.loss = optim::accumulate_step(model_.params(), opt_, std::span<const std::vector<PairedExample>>(micro), loss_fn);
    ++step_;
    history_.push_back(row);
    return row.loss;
  }

  // Mean stage loss on the validation set with fixed per-item seeds, no
  // dropout and no gradient recording.
  double evaluate() const {
    if (val_.empty()) throw ConfigError("no validation set");
    ad::NoGradGuard guard;
    double sum = 0.0;
    HistoryRow scratch;
    for (std::size_t i = 0; i < val_.size(); ++i) {
      const std::uint64_t seed = cfg_.seed ^ (0x9E3779B97F4A7C15ULL * (i + 1));
      Rng r(seed);
      const PairedExample ex = make_pair(val_[i], r());
      sum += item_loss(ex, scratch, 0.0, r, false).item();
    }
    return sum / static_cast<double>(val_.size());
  }

  bool done() const {
    if (stopped_) return true;
    if (cfg_.max_steps > 0 && step_ >= cfg_.max_steps) return true;
    return cfg_.epochs > 0 && epoch_ >= cfg_.epochs;
  }

  // Trains until max_steps, the epoch budget or early stopping. `on_step` is
  // called after every step with the latest history row.
  template <class Callback>
  void run(Callback&& on_step) {
    const std::size_t eval_every = cfg_.eval_every > 0 ? cfg_.eval_every : steps_per_epoch();
    while (!done()) {
      step();
      if (!val_.empty() && step_ % eval_every == 0) {
        const double v = evaluate();
        history_.back().val_loss = v;
        ++evaluations_;
        if (v < best_val_) {
          best_val_ = v;
          bad_evals_ = 0;
        } else if (++bad_evals_ >= cfg_.patience) {
          stopped_ = true;
        }
      }
      if (!cfg_.checkpoint_dir.empty() && cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0)
        save(std::filesystem::path(cfg_.checkpoint_dir) / ("step-" + std::to_string(step_)));
      on_step(history_.back());
    }
  }
  void run() {
    run([](const HistoryRow&) {});
  }

  void save(const std::filesystem::path& dir) const {
    CheckpointData ck;
    for (const auto& [name, t] : model_.params().snapshot()) ck.tensors["param/" + name] = t;
    for (const auto& [name, t] : opt_.state().m) ck.tensors["adam.m/" + name] = t;
    for (const auto& [name, t] : opt_.state().v) ck.tensors["adam.v/" + name] = t;
    std::ostringstream rng_state;
    rng_state << rng_;
    auto& m = ck.meta;
    m["kind"] = "trainer";
    m["model"] = model_.config();
    m["train"] = cfg_;
    m["optimizer_step"] = opt_.state().step;
    m["step"] = step_;
    m["epoch"] = epoch_;
    m["cursor"] = cursor_;
    m["order"] = order_;
    m["rng"] = rng_state.str();
    m["best_val"] = std::isfinite(best_val_) ? nlohmann::json(best_val_) : nlohmann::json(nullptr);
    m["bad_evals"] = bad_evals_;
    m["evaluations"] = evaluations_;
    m["stopped"] = stopped_;
    m["history"] = history_;
    save_checkpoint(dir, ck);
  }

  void load(const std::filesystem::path& dir) {
    const CheckpointData ck = load_checkpoint(dir);
    std::map<std::string, Tensor> params;
    optim::OptimizerState st;
    for (const auto& [key, t] : ck.tensors) {
      const auto slash = key.find('/');
      const std::string kind = key.substr(0, slash), name = key.substr(slash + 1);
      if (kind == "param") params[name] = t;
      else if (kind == "adam.m") st.m[name] = t;
      else if (kind == "adam.v") st.v[name] = t;
    }
    model_.params().load(params);
    const auto& m = ck.meta;
    if (m.value("kind", "") != "trainer") throw FormatError("checkpoint does not hold trainer state");
    st.step = m.at("optimizer_step");
    opt_.state() = std::move(st);
    step_ = m.at("step");
    epoch_ = m.at("epoch");
    cursor_ = m.at("cursor");
    order_ = m.at("order").get<std::vector<std::size_t>>();
    if (order_.size() != train_.size()) throw FormatError("checkpoint was written for a different training set");
    std::istringstream rng_state(m.at("rng").get<std::string>());
    rng_state >> rng_;
    best_val_ = m.at("best_val").is_null() ? std::numeric_limits<double>::infinity() : m.at("best_val").get<double>();
    bad_evals_ = m.at("bad_evals");
    evaluations_ = m.at("evaluations");
    stopped_ = m.at("stopped");
    history_ = m.at("history").get<std::vector<HistoryRow>>();
  }

private:
  void apply_trainable() {
    auto& ps = model_.params();
    if (cfg_.stage == Stage::Diffusion) {
      ps.set_trainable_prefix("", false);
      ps.set_trainable_prefix("dbdm.", true);
    } else {
      ps.set_trainable_prefix("", true);
    }
  }

  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_() % i]);
    cursor_ = 0;
  }

  const data::Utterance& next_utterance() {
    const data::Utterance& u = train_[order_[cursor_++]];
    if (cursor_ >= order_.size()) {
      ++epoch_;
      reshuffle();
    }
    return u;
  }

  // Stage loss of one item. Components are added into `row` with `weight`.
  ad::Var item_loss(const PairedExample& ex, HistoryRow& row, double weight, Rng& rng, bool train) const {
    if (cfg_.stage == Stage::Joint) {
      ForwardOptions fo;
      fo.train = train;
      fo.rng = &rng;
      const LossBreakdown l = model_.forward_losses(ex, cfg_.loss, fo);
      row.ctc += weight * l.ctc.item();
      row.phonetic += weight * l.phonetic.item();
      row.speaker += weight * l.speaker.item();
      row.consistency += weight * l.consistency.item();
      return l.total;
    }
    const std::size_t n = ex.valid_samples.value_or(ex.clean.samples.size());
    const std::size_t rows = model_.feature_rows(n);
    std::uniform_int_distribution<std::size_t> pick_t(1, model_.config().diffusion_steps);
    const std::size_t t = pick_t(rng);
    std::normal_distribution<double> normal(0.0, 1.0);
    Tensor eps = Tensor::matrix(rows, EncoderConfig::kFeatureWidth);
    for (double& v : eps.storage()) v = normal(rng);
    const dbdm::DbdmLoss l = model_.diffusion_loss(ex.clean, t, eps, cfg_.loss.lambda1, ex.valid_samples);
    row.noise_mse += weight * l.noise_mse.item();
    row.phonetic += weight * l.phonetic.item();
    return l.total;
  }

  Model& model_;
  TrainConfig cfg_;
  std::vector<data::Utterance> train_;
  std::vector<data::Utterance> val_;
  optim::AdamW opt_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t step_ = 0;
  std::size_t epoch_ = 0;
  std::size_t evaluations_ = 0;
  std::size_t bad_evals_ = 0;
  double best_val_ = std::numeric_limits<double>::infinity();
  bool stopped_ = false;
  std::vector<HistoryRow> history_;
  mutable augment::NoiseBank noise_bank_;
};

} // namespace rasr
