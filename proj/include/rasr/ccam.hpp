#pragma once

#include <array>
#include <cmath>
#include <string>

#include "rasr/nn.hpp"

// Speaker trait classification and speaker-conditioned cross-attention.
namespace rasr::ccam {

using ad::Var;

inline constexpr std::size_t kGenders = 2;
inline constexpr std::size_t kAgeGroups = 4; // 18-25, 26-40, 41-60, 60+
inline constexpr std::size_t kDialects = 6;
inline constexpr std::size_t kEmbeddingDim = 128;

// Posteriors of the three heads, each a (1 x k) row on the simplex.
struct SpeakerPrediction {
  Var gender;
  Var age;
  Var dialect;

  std::array<const Var*, 3> heads() const { return {&gender, &age, &dialect}; }
};

struct SpeakerLabels {
  int gender = 0;
  int age = 0;
  int dialect = 0;

  void validate() const {
    if (gender < 0 || gender >= static_cast<int>(kGenders)) throw ConfigError("gender id out of range");
    if (age < 0 || age >= static_cast<int>(kAgeGroups)) throw ConfigError("age group id out of range");
    if (dialect < 0 || dialect >= static_cast<int>(kDialects)) throw ConfigError("dialect id out of range");
  }
};

struct SpeakerOutput {
  SpeakerPrediction prediction;
  Var embedding; // (1 x 128)
};

// Time-mean pooling, MLP 512 -> 256 -> 128 -> 64 with GELU between layers,
// then softmax heads on the 64-dim trunk. The embedding concatenates three
// task projections of the trunk, 64 + 32 + 32 = 128 wide.
class SpeakerClassifier {
public:
  SpeakerClassifier() = default;
  SpeakerClassifier(nn::ParameterStore& ps, const std::string& name, std::size_t feature_width, Rng& rng)
      : fc1_(ps, name + ".mlp0", feature_width, 256, rng), fc2_(ps, name + ".mlp1", 256, 128, rng),
        fc3_(ps, name + ".mlp2", 128, 64, rng), gender_(ps, name + ".gender", 64, kGenders, rng),
        age_(ps, name + ".age", 64, kAgeGroups, rng), dialect_(ps, name + ".dialect", 64, kDialects, rng),
        emb_gender_(ps, name + ".emb_gender", 64, 64, rng), emb_age_(ps, name + ".emb_age", 64, 32, rng),
        emb_dialect_(ps, name + ".emb_dialect", 64, 32, rng) {}

  SpeakerOutput operator()(const Var& z) const {
    if (z.rows() == 0) throw SequenceTooShort("speaker classifier needs at least one frame");
    const Var pooled = ad::mean_rows(z);
    const Var trunk = fc3_(ad::gelu(fc2_(ad::gelu(fc1_(pooled)))));
    SpeakerOutput out;
    out.prediction.gender = ad::softmax_rows(gender_(trunk));
    out.prediction.age = ad::softmax_rows(age_(trunk));
    out.prediction.dialect = ad::softmax_rows(dialect_(trunk));
    out.embedding = ad::concat_cols({emb_gender_(trunk), emb_age_(trunk), emb_dialect_(trunk)});
    return out;
  }

private:
  nn::Linear fc1_, fc2_, fc3_;
  nn::Linear gender_, age_, dialect_;
  nn::Linear emb_gender_, emb_age_, emb_dialect_;
};

struct CrossAttentionResult {
  Var output;       // A V + H
  Var attended;     // A V
  Tensor attention; // A, (T x T)
};

// Single-head attention whose queries are modulated by a projection of the
// speaker embedding broadcast over time:
// A = softmax(((Q_s * Q) K^T) / sqrt(d)), output = A V + H.
class CrossAttention {
public:
  CrossAttention() = default;
  CrossAttention(nn::ParameterStore& ps, const std::string& name, std::size_t hidden, Rng& rng)
      : hidden_(hidden), q_(ps, name + ".q_proj", hidden, hidden, rng), k_(ps, name + ".k_proj", hidden, hidden, rng),
        v_(ps, name + ".v_proj", hidden, hidden, rng), qs_(ps, name + ".speaker_proj", kEmbeddingDim, hidden, rng) {}

  CrossAttentionResult forward(const Var& h, const Var& s) const {
    if (h.cols() != hidden_)
      throw ShapeError("cross-attention expects width " + std::to_string(hidden_) + ", got " + std::to_string(h.cols()));
    if (s.size() != kEmbeddingDim) throw ShapeError("speaker embedding must be 128-dimensional");
    const Var q = ad::mul(q_(h), qs_(ad::reshape(s, {1, kEmbeddingDim})));
    const Var scores = ad::scale(ad::matmul(q, ad::transpose(k_(h))), 1.0 / std::sqrt(static_cast<double>(hidden_)));
    const Var a = ad::softmax_rows(scores);
    CrossAttentionResult r;
    r.attended = ad::matmul(a, v_(h));
    r.output = ad::add(r.attended, h);
    r.attention = a.value();
    return r;
  }

  Var operator()(const Var& h, const Var& s) const { return forward(h, s).output; }

private:
  std::size_t hidden_ = 0;
  nn::Linear q_, k_, v_, qs_;
};

// Probabilities below this are clamped before taking logs.
inline constexpr double kProbFloor = 1e-300;

// lambda2 CE(gender) + lambda3 CE(age) + lambda4 CE(dialect), CE = -log p(true).
inline Var speaker_loss(const SpeakerPrediction& p, const SpeakerLabels& y, double lambda2, double lambda3, double lambda4) {
  y.validate();
  const auto ce = [](const Var& probs, int label) {
    return ad::scale(ad::log_floor(ad::pick(probs, static_cast<std::size_t>(label)), kProbFloor), -1.0);
  };
  return ad::add(ad::add(ad::scale(ce(p.gender, y.gender), lambda2), ad::scale(ce(p.age, y.age), lambda3)),
                 ad::scale(ce(p.dialect, y.dialect), lambda4));
}

inline constexpr double kKlFloor = 1e-12;

// Sum over heads of KL(p_clean || p_denoised), 0 log 0 = 0, q floored at 1e-12.
inline Var consistency_loss(const SpeakerPrediction& clean, const SpeakerPrediction& denoised) {
  Var total;
  const auto c = clean.heads();
  const auto d = denoised.heads();
  for (std::size_t h = 0; h < 3; ++h) {
    const Var& p = *c[h];
    const Var& q = *d[h];
    if (p.size() != q.size()) throw ShapeError("KL between heads of different size");
    // p log p with the 0 log 0 = 0 convention (log_floor slope is zero there).
    const Var plogp = ad::mul(p, ad::log_floor(p, kProbFloor));
    const Var plogq = ad::mul(p, ad::log_floor(q, kKlFloor));
    const Var kl = ad::sum(ad::sub(plogp, plogq));
    total = total.defined() ? ad::add(total, kl) : kl;
  }
  return total;
}

inline std::size_t argmax(const Tensor& row) {
  return static_cast<std::size_t>(std::max_element(row.data().begin(), row.data().end()) - row.data().begin());
}

} // namespace rasr::ccam
