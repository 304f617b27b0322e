#pragma once

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>

#include "rasr/ccam.hpp"

namespace rasr::metrics {

struct EditCounts {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  std::size_t reference_length = 0;

  std::size_t errors() const { return substitutions + deletions + insertions; }
  double rate_pct() const {
    return 100.0 * static_cast<double>(errors()) / static_cast<double>(reference_length);
  }
};

// Unit-cost Levenshtein alignment. Among optimal alignments the backtrace
// prefers match/substitution, then deletion, then insertion.
template <class T>
EditCounts align(std::span<const T> ref, std::span<const T> hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> d((n + 1) * (m + 1));
  const auto at = [m](std::size_t i, std::size_t j) { return i * (m + 1) + j; };
  for (std::size_t i = 0; i <= n; ++i) d[at(i, 0)] = i;
  for (std::size_t j = 0; j <= m; ++j) d[at(0, j)] = j;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      d[at(i, j)] = std::min({d[at(i - 1, j - 1)] + (ref[i - 1] == hyp[j - 1] ? 0u : 1u), d[at(i - 1, j)] + 1,
                              d[at(i, j - 1)] + 1});
  EditCounts c;
  c.reference_length = n;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && d[at(i, j)] == d[at(i - 1, j - 1)] + (ref[i - 1] == hyp[j - 1] ? 0u : 1u)) {
      if (ref[i - 1] != hyp[j - 1]) ++c.substitutions;
      --i;
      --j;
    } else if (i > 0 && d[at(i, j)] == d[at(i - 1, j)] + 1) {
      ++c.deletions;
      --i;
    } else {
      ++c.insertions;
      --j;
    }
  }
  return c;
}

template <class T>
EditCounts align(const std::vector<T>& ref, const std::vector<T>& hyp) {
  return align(std::span<const T>(ref), std::span<const T>(hyp));
}

// ---------------------------------------------------------------- text

inline std::string nfc(const std::string& utf8) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* norm = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) throw ConfigError("ICU NFC normalizer unavailable");
  icu::UnicodeString out = norm->normalize(icu::UnicodeString::fromUTF8(utf8), status);
  if (U_FAILURE(status)) throw FormatError("NFC normalization failed");
  std::string s;
  out.toUTF8String(s);
  return s;
}

inline std::u32string code_points(const std::string& utf8) {
  const icu::UnicodeString us = icu::UnicodeString::fromUTF8(utf8);
  std::u32string out;
  for (int32_t i = 0; i < us.length();) {
    const UChar32 c = us.char32At(i);
    out.push_back(static_cast<char32_t>(c));
    i += U16_LENGTH(c);
  }
  return out;
}

// NFC, then split on Unicode whitespace.
inline std::vector<std::string> words(const std::string& text) {
  const std::u32string cps = code_points(nfc(text));
  std::vector<std::string> out;
  icu::UnicodeString cur;
  const auto flush = [&] {
    if (cur.isEmpty()) return;
    std::string s;
    cur.toUTF8String(s);
    out.push_back(std::move(s));
    cur.remove();
  };
  for (char32_t c : cps) {
    if (u_isUWhiteSpace(static_cast<UChar32>(c))) flush();
    else cur.append(static_cast<UChar32>(c));
  }
  flush();
  return out;
}

struct WerResult {
  double wer_pct = 0.0;
  std::size_t substitutions = 0, deletions = 0, insertions = 0, reference_words = 0;
};

inline WerResult wer(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
  if (ref.empty()) throw EmptyReference("WER needs a non-empty reference");
  const EditCounts c = align(ref, hyp);
  return {c.rate_pct(), c.substitutions, c.deletions, c.insertions, c.reference_length};
}

inline WerResult wer(const std::string& ref, const std::string& hyp) { return wer(words(ref), words(hyp)); }

// Edit distance over NFC code points / reference length x 100.
inline double cer(const std::string& ref, const std::string& hyp) {
  const std::u32string r = code_points(nfc(ref)), h = code_points(nfc(hyp));
  if (r.empty()) throw EmptyReference("CER needs a non-empty reference");
  return align(std::span<const char32_t>(r.data(), r.size()), std::span<const char32_t>(h.data(), h.size())).rate_pct();
}

inline double per(const std::vector<int>& ref, const std::vector<int>& hyp) {
  if (ref.empty()) throw EmptyReference("PER needs a non-empty reference");
  return align(ref, hyp).rate_pct();
}

// Sentence BLEU-4: clipped n-gram precisions (add-one smoothing for n >= 2),
// geometric mean, brevity penalty exp(1 - r/h) when h < r.
inline double bleu4(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
  if (hyp.empty() || ref.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    std::map<std::vector<std::string>, std::size_t> ref_counts, hyp_counts;
    for (std::size_t i = 0; i + n <= ref.size(); ++i) ++ref_counts[{ref.begin() + i, ref.begin() + i + n}];
    for (std::size_t i = 0; i + n <= hyp.size(); ++i) ++hyp_counts[{hyp.begin() + i, hyp.begin() + i + n}];
    std::size_t matched = 0, total = 0;
    for (const auto& [gram, cnt] : hyp_counts) {
      total += cnt;
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) matched += std::min(cnt, it->second);
    }
    double p;
    if (n == 1) {
      if (matched == 0) return 0.0;
      p = static_cast<double>(matched) / static_cast<double>(total);
    } else {
      p = (static_cast<double>(matched) + 1.0) / (static_cast<double>(total) + 1.0);
    }
    log_sum += 0.25 * std::log(p);
  }
  const double r = static_cast<double>(ref.size()), h = static_cast<double>(hyp.size());
  const double bp = h < r ? std::exp(1.0 - r / h) : 1.0;
  return bp * std::exp(log_sum);
}

inline double bleu4(const std::string& ref, const std::string& hyp) { return bleu4(words(ref), words(hyp)); }

inline double rtf(double processing_s, double audio_duration_s) {
  if (!(audio_duration_s > 0.0)) throw ConfigError("audio duration must be positive");
  if (processing_s < 0.0) throw ConfigError("processing time must be non-negative");
  return processing_s / audio_duration_s;
}

struct SpeakerAccuracy {
  double gender = 0.0;
  double age = 0.0;
  double dialect = 0.0;
};

inline SpeakerAccuracy speaker_accuracy(const std::vector<ccam::SpeakerPrediction>& preds,
                                        const std::vector<ccam::SpeakerLabels>& labels) {
  if (preds.empty()) throw ConfigError("speaker accuracy over an empty list");
  if (preds.size() != labels.size()) throw ConfigError("prediction and label counts differ");
  SpeakerAccuracy a;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    a.gender += ccam::argmax(preds[i].gender.value()) == static_cast<std::size_t>(labels[i].gender);
    a.age += ccam::argmax(preds[i].age.value()) == static_cast<std::size_t>(labels[i].age);
    a.dialect += ccam::argmax(preds[i].dialect.value()) == static_cast<std::size_t>(labels[i].dialect);
  }
  const double n = static_cast<double>(preds.size());
  return {a.gender / n, a.age / n, a.dialect / n};
}

} // namespace rasr::metrics
