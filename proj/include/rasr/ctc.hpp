#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "rasr/nn.hpp"

namespace rasr::ctc {

using ad::Var;

inline constexpr int kBlank = 0;
inline constexpr int kSeparator = 1;
inline constexpr std::size_t kVocabularySize = 52;
inline constexpr const char* kBlankTag = "<b>";
inline constexpr const char* kSeparatorTag = "<sp>";

// 11 vowels then 39 consonants (including the dependent signs ং ঃ ঁ and ৎ).
// ড় ঢ় য় are stored in their NFC (base + nukta) spelling.
inline const std::vector<std::string>& default_graphemes() {
  static const std::vector<std::string> g = {
      "অ", "আ", "ই", "ঈ", "উ", "ঊ", "ঋ", "এ", "ঐ", "ও", "ঔ",
      "ক", "খ", "গ", "ঘ", "ঙ", "চ", "ছ", "জ", "ঝ", "ঞ", "ট", "ঠ", "ড", "ঢ", "ণ", "ত", "থ", "দ", "ধ", "ন",
      "প", "ফ", "ব", "ভ", "ম", "য", "র", "ল", "শ", "ষ", "স", "হ",
      "ড়", "ঢ়", "য়", "ৎ", "ং", "ঃ", "ঁ"};
  return g;
}

// Ordered symbol inventory; id 0 is the CTC blank, id 1 the word separator.
class Vocabulary {
public:
  Vocabulary() : Vocabulary(standard_symbols()) {}

  explicit Vocabulary(std::vector<std::string> symbols) : symbols_(std::move(symbols)) {
    if (symbols_.size() < 2) throw ConfigError("vocabulary needs a blank and at least one symbol");
    if (symbols_[0] != kBlankTag) throw ConfigError(std::string("vocabulary id 0 must be ") + kBlankTag);
    for (std::size_t i = 0; i < symbols_.size(); ++i) {
      if (symbols_[i].empty()) throw ConfigError("empty vocabulary symbol at id " + std::to_string(i));
      if (!ids_.emplace(symbols_[i], static_cast<int>(i)).second)
        throw ConfigError("duplicate vocabulary symbol '" + symbols_[i] + "'");
      longest_ = std::max(longest_, symbols_[i].size());
    }
  }

  static std::vector<std::string> standard_symbols() {
    std::vector<std::string> s{kBlankTag, kSeparatorTag};
    const auto& g = default_graphemes();
    s.insert(s.end(), g.begin(), g.end());
    return s;
  }

  // UTF-8 text, one symbol per line, line number = id. Must hold 52 entries.
  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open vocabulary " + path.string());
    std::vector<std::string> s;
    for (std::string line; std::getline(in, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      s.push_back(line);
    }
    while (!s.empty() && s.back().empty()) s.pop_back();
    if (s.size() != kVocabularySize)
      throw ConfigError("vocabulary file must list " + std::to_string(kVocabularySize) + " symbols, found " +
                        std::to_string(s.size()));
    return Vocabulary(std::move(s));
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    for (const auto& s : symbols_) out << s << '\n';
  }

  std::size_t size() const { return symbols_.size(); }
  const std::string& symbol(int id) const { return symbols_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& symbols() const { return symbols_; }
  bool has_separator() const { return symbols_.size() > 1 && symbols_[kSeparator] == kSeparatorTag; }

  int id(const std::string& symbol) const {
    auto it = ids_.find(symbol);
    if (it == ids_.end()) throw ConfigError("symbol '" + symbol + "' is not in the vocabulary");
    return it->second;
  }

  // Greedy longest match; runs of whitespace become one separator. Leading
  // and trailing whitespace is dropped.
  std::vector<int> encode(const std::string& text) const {
    std::vector<int> ids;
    std::size_t i = 0;
    while (i < text.size()) {
      if (is_space(text[i])) {
        while (i < text.size() && is_space(text[i])) ++i;
        if (!ids.empty() && i < text.size()) {
          if (!has_separator()) throw ConfigError("vocabulary has no word separator");
          ids.push_back(kSeparator);
        }
        continue;
      }
      bool matched = false;
      for (std::size_t len = std::min(longest_, text.size() - i); len > 0; --len) {
        auto it = ids_.find(text.substr(i, len));
        if (it != ids_.end() && it->second != kBlank && !(has_separator() && it->second == kSeparator)) {
          ids.push_back(it->second);
          i += len;
          matched = true;
          break;
        }
      }
      if (!matched) {
        std::size_t len = 1;
        const auto lead = static_cast<unsigned char>(text[i]);
        if (lead >= 0xF0) len = 4;
        else if (lead >= 0xE0) len = 3;
        else if (lead >= 0xC0) len = 2;
        throw ConfigError("out-of-vocabulary symbol '" + text.substr(i, len) + "'");
      }
    }
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string s;
    for (int id : ids) {
      if (id == kBlank) continue;
      s += (has_separator() && id == kSeparator) ? std::string(" ") : symbol(id);
    }
    return s;
  }

private:
  static bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

  std::vector<std::string> symbols_;
  std::map<std::string, int> ids_;
  std::size_t longest_ = 0;
};

// P = softmax(H W) row-wise; returns the log-posteriors, which the loss uses.
inline Var ctc_head_log_probs(const Var& h, const Var& w) { return ad::log_softmax_rows(ad::matmul(h, w)); }
inline Var ctc_head(const Var& h, const Var& w) { return ad::softmax_rows(ad::matmul(h, w)); }

inline std::size_t required_frames(const std::vector<int>& target) {
  std::size_t n = target.size();
  for (std::size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++n;
  return n;
}

namespace detail {
inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}
} // namespace detail

struct ForwardBackward {
  double nll = 0.0;
  Tensor grad; // d nll / d log_probs
};

// Exact CTC negative log-likelihood from (T x V) log-posteriors by the
// forward recursion over the blank-interleaved target; the backward
// recursion yields the gradient with respect to the log-posteriors.
inline ForwardBackward forward_backward(const Tensor& log_probs, const std::vector<int>& target) {
  using detail::kNegInf;
  using detail::log_add;
  const std::size_t T = log_probs.rows(), V = log_probs.cols();
  if (target.empty()) throw ConfigError("CTC target must be non-empty");
  for (int id : target) {
    if (id == kBlank) throw ConfigError("CTC target contains the blank id");
    if (id < 0 || static_cast<std::size_t>(id) >= V) throw ConfigError("CTC target id " + std::to_string(id) + " out of range");
  }
  const std::size_t need = required_frames(target);
  if (T < need)
    throw InfeasibleTarget("target needs " + std::to_string(need) + " frames, only " + std::to_string(T) + " available");

  const std::size_t S = 2 * target.size() + 1;
  std::vector<int> ext(S, kBlank);
  for (std::size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = target[i];
  const auto skip_ok = [&](std::size_t s) { return s >= 2 && ext[s] != kBlank && ext[s] != ext[s - 2]; };

  std::vector<double> alpha(T * S, kNegInf), beta(T * S, kNegInf);
  alpha[0] = log_probs(0, static_cast<std::size_t>(ext[0]));
  if (S > 1) alpha[1] = log_probs(0, static_cast<std::size_t>(ext[1]));
  for (std::size_t t = 1; t < T; ++t)
    for (std::size_t s = 0; s < S; ++s) {
      double a = alpha[(t - 1) * S + s];
      if (s >= 1) a = log_add(a, alpha[(t - 1) * S + s - 1]);
      if (skip_ok(s)) a = log_add(a, alpha[(t - 1) * S + s - 2]);
      alpha[t * S + s] = a == kNegInf ? kNegInf : a + log_probs(t, static_cast<std::size_t>(ext[s]));
    }
  const double log_p = log_add(alpha[(T - 1) * S + S - 1], S > 1 ? alpha[(T - 1) * S + S - 2] : kNegInf);
  if (log_p == kNegInf) throw InfeasibleTarget("target has zero probability under the posteriors");

  // beta(t, s): log-probability of finishing from state s at time t, not
  // counting the emission at t.
  beta[(T - 1) * S + S - 1] = 0.0;
  if (S > 1) beta[(T - 1) * S + S - 2] = 0.0;
  for (std::size_t t = T - 1; t-- > 0;)
    for (std::size_t s = 0; s < S; ++s) {
      const auto next = [&](std::size_t s2) {
        return beta[(t + 1) * S + s2] + log_probs(t + 1, static_cast<std::size_t>(ext[s2]));
      };
      double b = next(s);
      if (s + 1 < S) b = log_add(b, next(s + 1));
      if (s + 2 < S && skip_ok(s + 2)) b = log_add(b, next(s + 2));
      beta[t * S + s] = b;
    }

  ForwardBackward out;
  out.nll = -log_p;
  out.grad = Tensor::matrix(T, V);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t s = 0; s < S; ++s) {
      const double occ = alpha[t * S + s] + beta[t * S + s];
      if (occ == kNegInf) continue;
      out.grad(t, static_cast<std::size_t>(ext[s])) -= std::exp(occ - log_p);
    }
  return out;
}

// CTC loss on log-posteriors, differentiable.
inline Var ctc_loss(const Var& log_probs, const std::vector<int>& target) {
  ForwardBackward fb = forward_backward(log_probs.value(), target);
  return ad::make_op(Tensor::scalar(fb.nll), {log_probs}, [grad = std::move(fb.grad)](ad::Node& n) {
    Tensor& g = n.parents[0]->grad_buffer();
    const double gv = n.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += gv * grad[i];
  });
}

// CTC loss on posterior probabilities (rows on the simplex).
inline double ctc_loss(const Tensor& posteriors, const std::vector<int>& target) {
  Tensor lp(posteriors.shape());
  for (std::size_t i = 0; i < lp.size(); ++i)
    lp[i] = posteriors[i] > 0.0 ? std::log(posteriors[i]) : detail::kNegInf;
  return forward_backward(lp, target).nll;
}

// Framewise argmax path.
inline std::vector<int> best_path(const Tensor& posteriors) {
  std::vector<int> path(posteriors.rows());
  for (std::size_t t = 0; t < posteriors.rows(); ++t) {
    const auto row = posteriors.row(t);
    path[t] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return path;
}

// Merge repeats, then drop blanks.
inline std::vector<int> collapse(const std::vector<int>& path) {
  std::vector<int> out;
  int prev = -1;
  for (int id : path) {
    if (id != prev && id != kBlank) out.push_back(id);
    prev = id;
  }
  return out;
}

inline std::string greedy_decode(const Tensor& posteriors, const Vocabulary& vocab) {
  return vocab.decode(collapse(best_path(posteriors)));
}

struct LossWeights {
  double alpha1 = 1.0; // phonetic
  double alpha2 = 1.0; // speaker
  double alpha3 = 1.0; // consistency
};

// L_CTC + a1 L_phonetic + a2 L_speaker + a3 L_consistency.
inline Var joint_loss(const Var& ctc, const Var& phonetic, const Var& speaker, const Var& consistency, const LossWeights& w) {
  return ad::add(ad::add(ad::add(ctc, ad::scale(phonetic, w.alpha1)), ad::scale(speaker, w.alpha2)),
                 ad::scale(consistency, w.alpha3));
}

inline double joint_loss(double ctc, double phonetic, double speaker, double consistency, const LossWeights& w) {
  return ctc + w.alpha1 * phonetic + w.alpha2 * speaker + w.alpha3 * consistency;
}

} // namespace rasr::ctc
