#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "rasr/ccam.hpp"
#include "rasr/ctc.hpp"
#include "rasr/dsp.hpp"
#include "rasr/metrics.hpp"
#include "rasr/nn.hpp"

namespace rasr::data {

struct ManifestEntry {
  std::string id;
  std::filesystem::path audio_path;
  std::string transcript;
  ccam::SpeakerLabels labels;
  std::optional<double> snr_db;
  std::optional<std::vector<int>> phonemes;
};

// A loaded utterance ready for training or evaluation.
struct Utterance {
  std::string id;
  WaveForm wave;
  std::string transcript;
  std::vector<int> target;
  ccam::SpeakerLabels labels;
  std::optional<double> snr_db;
};

inline nlohmann::json to_json(const ManifestEntry& e, const std::filesystem::path& base = {}) {
  nlohmann::json j;
  j["id"] = e.id;
  j["audio"] = base.empty() ? e.audio_path.string() : std::filesystem::relative(e.audio_path, base).string();
  j["text"] = e.transcript;
  j["gender"] = e.labels.gender;
  j["age"] = e.labels.age;
  j["dialect"] = e.labels.dialect;
  if (e.snr_db) j["snr_db"] = *e.snr_db;
  if (e.phonemes) j["phonemes"] = *e.phonemes;
  return j;
}

// JSONL, one object per line:
//   {"id", "audio", "text", "gender", "age", "dialect", "snr_db"?, "phonemes"?}
// Relative audio paths resolve against the manifest's directory. Blank lines
// are skipped. Errors carry the 1-based line number.
inline std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path,
                                                const ctc::Vocabulary& vocab = {}, bool check_audio = true) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  const std::filesystem::path base = path.parent_path();
  std::vector<ManifestEntry> out;
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(where + "invalid JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw FormatError(where + "expected a JSON object");
    ManifestEntry e;
    try {
      e.audio_path = j.at("audio").get<std::string>();
      e.transcript = metrics::nfc(j.at("text").get<std::string>());
      e.labels.gender = j.at("gender").get<int>();
      e.labels.age = j.at("age").get<int>();
      e.labels.dialect = j.at("dialect").get<int>();
      e.id = j.value("id", e.audio_path.stem().string());
      if (j.contains("snr_db") && !j["snr_db"].is_null()) e.snr_db = j["snr_db"].get<double>();
      if (j.contains("phonemes") && !j["phonemes"].is_null()) e.phonemes = j["phonemes"].get<std::vector<int>>();
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(where + ex.what());
    }
    try {
      e.labels.validate();
    } catch (const Error& ex) {
      throw ConfigError(where + ex.what());
    }
    try {
      (void)vocab.encode(e.transcript);
    } catch (const Error& ex) {
      throw ConfigError(where + ex.what());
    }
    if (e.audio_path.is_relative()) e.audio_path = base / e.audio_path;
    if (check_audio && !std::filesystem::exists(e.audio_path))
      throw ConfigError(where + "audio file not found: " + e.audio_path.string());
    out.push_back(std::move(e));
  }
  return out;
}

inline void save_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& e : entries) out << to_json(e, path.parent_path()).dump() << '\n';
}

inline std::vector<Utterance> load_utterances(const std::vector<ManifestEntry>& entries,
                                              const ctc::Vocabulary& vocab = {}) {
  std::vector<Utterance> out;
  out.reserve(entries.size());
  for (const auto& e : entries) {
    Utterance u;
    u.id = e.id;
    u.wave = dsp::read_wav(e.audio_path);
    u.transcript = e.transcript;
    u.target = vocab.encode(e.transcript);
    u.labels = e.labels;
    u.snr_db = e.snr_db;
    out.push_back(std::move(u));
  }
  return out;
}

// ---------------------------------------------------------------- synthetic

inline constexpr double kToneSeconds = 0.120;
inline constexpr double kToneBaseHz = 200.0;
inline constexpr double kToneSpacingHz = 140.0;
inline constexpr double kToneAmplitude = 0.5;
inline constexpr double kMarginSeconds = 0.100; // leading and trailing silence

// Distinct tone per grapheme id (2..51); the separator is silence.
inline double tone_hz(int id) { return kToneBaseHz + kToneSpacingHz * static_cast<double>(id - 2); }

inline std::vector<double> tone_segment(int id) {
  const auto n = static_cast<std::size_t>(std::lround(kToneSeconds * dsp::kSampleRate));
  std::vector<double> seg(n, 0.0);
  if (id == ctc::kSeparator) return seg;
  const std::size_t ramp = n / 24; // 5 ms fades
  const double w = 2.0 * std::numbers::pi * tone_hz(id) / dsp::kSampleRate;
  for (std::size_t i = 0; i < n; ++i) {
    double env = 1.0;
    if (i < ramp) env = static_cast<double>(i) / static_cast<double>(ramp);
    else if (i >= n - ramp) env = static_cast<double>(n - 1 - i) / static_cast<double>(ramp);
    seg[i] = kToneAmplitude * env * std::sin(w * static_cast<double>(i));
  }
  return seg;
}

inline WaveForm synthesize(const std::vector<int>& ids) {
  const auto margin = static_cast<std::size_t>(std::lround(kMarginSeconds * dsp::kSampleRate));
  WaveForm w;
  w.samples.assign(margin, 0.0);
  for (int id : ids) {
    const auto seg = tone_segment(id);
    w.samples.insert(w.samples.end(), seg.begin(), seg.end());
  }
  w.samples.resize(w.samples.size() + margin, 0.0);
  return w;
}

struct SynthOptions {
  std::size_t min_symbols = 3;
  std::size_t max_symbols = 6;
  bool with_separator = true; // allow one word break
};

// n utterances of 3-6 tone-coded graphemes (no immediate repeats) with random
// speaker labels. Writes out_dir/wav/utt_NNN.wav and out_dir/manifest.jsonl.
inline std::vector<ManifestEntry> synth_corpus(std::size_t n, std::uint64_t seed, const std::filesystem::path& out_dir,
                                               const ctc::Vocabulary& vocab = {}, SynthOptions opt = {}) {
  if (n == 0) throw ConfigError("synth_corpus needs at least one utterance");
  if (opt.min_symbols < 1 || opt.min_symbols > opt.max_symbols) throw ConfigError("bad symbol count range");
  std::filesystem::create_directories(out_dir / "wav");
  Rng rng(seed);
  const int n_graphemes = static_cast<int>(vocab.size()) - 2;
  std::vector<ManifestEntry> entries;
  for (std::size_t u = 0; u < n; ++u) {
    const std::size_t len = opt.min_symbols + rng() % (opt.max_symbols - opt.min_symbols + 1);
    std::vector<int> ids;
    int prev = -1;
    for (std::size_t k = 0; k < len; ++k) {
      int id;
      do id = 2 + static_cast<int>(rng() % static_cast<std::uint64_t>(n_graphemes));
      while (id == prev);
      ids.push_back(id);
      prev = id;
    }
    if (opt.with_separator && len >= 4 && rng() % 2 == 0) {
      const std::size_t at = 1 + rng() % (len - 2);
      ids.insert(ids.begin() + static_cast<std::ptrdiff_t>(at + 1), ctc::kSeparator);
    }
    char name[32];
    std::snprintf(name, sizeof name, "utt_%03zu", u);
    ManifestEntry e;
    e.id = name;
    e.audio_path = out_dir / "wav" / (std::string(name) + ".wav");
    e.transcript = vocab.decode(ids);
    e.labels.gender = static_cast<int>(rng() % ccam::kGenders);
    e.labels.age = static_cast<int>(rng() % ccam::kAgeGroups);
    e.labels.dialect = static_cast<int>(rng() % ccam::kDialects);
    dsp::write_wav(e.audio_path, synthesize(ids), dsp::WavEncoding::Float32);
    entries.push_back(std::move(e));
  }
  save_manifest(out_dir / "manifest.jsonl", entries);
  return entries;
}

} // namespace rasr::data
