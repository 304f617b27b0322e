// Command-line front end. Exit codes: 0 success, 1 invalid input or usage,
// 2 failure while running.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "rasr/augment.hpp"
#include "rasr/ctc.hpp"
#include "rasr/data.hpp"
#include "rasr/dsp.hpp"
#include "rasr/metrics.hpp"
#include "rasr/pipeline.hpp"
#include "rasr/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace rasr;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string preset;
};

// Reads a config file, following "extends" chains. Child keys patch parent keys.
json read_config(const fs::path& path, int depth = 0) {
  if (depth > 16) throw ConfigError("config 'extends' chain is too deep at " + path.string());
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(path.string() + ": config must be a JSON object");
  if (!j.contains("extends")) return j;
  fs::path parent = j["extends"].get<std::string>();
  if (parent.is_relative()) parent = path.parent_path() / parent;
  json base = read_config(parent, depth + 1);
  j.erase("extends");
  base.merge_patch(j);
  return base;
}

struct Settings {
  std::string preset = "desk";
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainConfig train;
  augment::AugmentConfig augmentation;
  fs::path vocabulary;
};

// Flags beat ASR_CONFIG / ASR_SEED, which beat config file values, which beat
// preset defaults.
Settings resolve(const Globals& g) {
  json cfg = json::object();
  std::string path = g.config_path;
  if (path.empty())
    if (const char* env = std::getenv("ASR_CONFIG")) path = env;
  if (!path.empty()) cfg = read_config(path);

  Settings s;
  s.preset = g.preset.empty() ? cfg.value("preset", std::string("desk")) : g.preset;
  if (s.preset != "desk" && s.preset != "paper") throw ConfigError("unknown preset '" + s.preset + "'");
  s.seed = cfg.value("seed", std::uint64_t{0});
  if (const char* env = std::getenv("ASR_SEED")) {
    try {
      s.seed = std::stoull(env);
    } catch (const std::exception&) {
      throw ConfigError("ASR_SEED is not an unsigned integer: '" + std::string(env) + "'");
    }
  }
  if (g.seed) s.seed = *g.seed;

  try {
    s.model = ModelConfig::from_preset(s.preset);
    s.model.init_seed = s.seed;
    if (cfg.contains("model")) {
      json m = cfg["model"];
      if (m.contains("encoder") && !m["encoder"].contains("preset")) m["encoder"]["preset"] = s.preset;
      m.get_to(s.model);
    }
    s.model.validate();
    s.train.seed = s.seed;
    if (cfg.contains("train")) cfg["train"].get_to(s.train);
    if (cfg.contains("augmentation")) cfg["augmentation"].get_to(s.augmentation);
    if (cfg.contains("vocabulary")) s.vocabulary = cfg["vocabulary"].get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  return s;
}

ctc::Vocabulary vocabulary(const Settings& s) {
  return s.vocabulary.empty() ? ctc::Vocabulary{} : ctc::Vocabulary::load(s.vocabulary);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

void emit(const std::string& out_path, const std::string& text) {
  if (out_path.empty() || out_path == "-") std::cout << text;
  else write_text(out_path, text);
}

// Restores parameters from a trainer checkpoint; the model config stored with
// it wins over the command-line config.
Model load_model(const Settings& s, const std::string& checkpoint) {
  if (checkpoint.empty()) return Model(s.model, vocabulary(s));
  const CheckpointData ck = load_checkpoint(checkpoint);
  ModelConfig mc = s.model;
  if (ck.meta.contains("model")) ck.meta["model"].get_to(mc);
  Model m(mc, vocabulary(s));
  std::map<std::string, Tensor> params;
  for (const auto& [key, t] : ck.tensors)
    if (key.rfind("param/", 0) == 0) params[key.substr(6)] = t;
  m.params().load(params);
  return m;
}

std::vector<data::Utterance> utterances(const std::string& manifest, const ctc::Vocabulary& vocab) {
  return data::load_utterances(data::load_manifest(manifest, vocab), vocab);
}

json probs(const Tensor& p) {
  return {{"id", ccam::argmax(p)}, {"probs", std::vector<double>(p.storage().begin(), p.storage().end())}};
}

// -log P(target) by summing every label path; exponential in T.
double ctc_enumerate(const Tensor& p, const std::vector<int>& target) {
  const std::size_t t = p.rows(), v = p.cols();
  std::vector<std::size_t> path(t, 0);
  double total = 0.0;
  for (;;) {
    std::vector<int> seq;
    std::size_t prev = v;
    for (std::size_t s : path) {
      if (s != prev && s != 0) seq.push_back(static_cast<int>(s));
      prev = s;
    }
    if (seq == target) {
      double pr = 1.0;
      for (std::size_t i = 0; i < t; ++i) pr *= p(i, path[i]);
      total += pr;
    }
    std::size_t k = 0;
    while (k < t && ++path[k] == v) path[k++] = 0;
    if (k == t) break;
  }
  return -std::log(total);
}

// ---------------------------------------------------------------- commands

int cmd_featurize(const Settings&, const std::string& in, const std::string& out) {
  const Tensor x = dsp::featurize(dsp::read_wav(in));
  dsp::write_lmel(out, x);
  std::cout << json{{"frames", x.rows()}, {"mels", x.cols()}, {"output", out}}.dump() << '\n';
  return 0;
}

int cmd_augment(const Settings& s, const std::string& in, const std::string& out) {
  augment::NoiseBank bank;
  augment::AugmentTrace tr;
  const WaveForm w = augment::augment_policy(dsp::read_wav(in), s.augmentation, s.seed, &bank, &tr);
  dsp::write_wav(out, w);
  json j{{"speed", tr.speed}, {"gain_db", tr.gain_db}, {"noise", tr.noise}, {"samples", w.samples.size()}};
  j["snr_db"] = std::isnan(tr.snr_db) ? json(nullptr) : json(tr.snr_db);
  std::cout << j.dump() << '\n';
  return 0;
}

int cmd_synth(const Settings& s, std::size_t n, const std::string& out) {
  const auto entries = data::synth_corpus(n, s.seed, out, vocabulary(s));
  std::cout << json{{"utterances", entries.size()}, {"manifest", (fs::path(out) / "manifest.jsonl").string()}}.dump()
            << '\n';
  return 0;
}

struct TrainArgs {
  std::string stage = "joint", manifest, val, out, resume;
  std::optional<std::size_t> max_steps;
};

int cmd_train(Settings s, const TrainArgs& a) {
  const Stage stage = parse_stage(a.stage);
  if (stage != s.train.stage) {
    const TrainConfig d = TrainConfig::for_stage(stage);
    s.train.stage = stage;
    s.train.optimizer.lr = d.optimizer.lr;
    s.train.epochs = d.epochs;
  }
  if (a.max_steps) s.train.max_steps = *a.max_steps;
  const ctc::Vocabulary vocab = vocabulary(s);
  auto train = utterances(a.manifest, vocab);
  std::vector<data::Utterance> val;
  if (!a.val.empty()) val = utterances(a.val, vocab);
  Model model = a.resume.empty() ? Model(s.model, vocab) : load_model(s, a.resume);
  Trainer tr(model, s.train, std::move(train), std::move(val));
  if (!a.resume.empty()) {
    const CheckpointData ck = load_checkpoint(a.resume);
    if (ck.meta.value("train", json::object()).value("stage", "") == a.stage) tr.load(a.resume);
  }
  tr.run([](const HistoryRow& r) {
    std::cerr << "step " << r.step << " loss " << r.loss << '\n';
  });
  fs::create_directories(a.out);
  tr.save(fs::path(a.out) / "checkpoint");
  write_history_csv(fs::path(a.out) / "history.csv", tr.history());
  std::cout << json{{"steps", tr.step_count()},
                    {"final_loss", tr.history().empty() ? json(nullptr) : json(tr.history().back().loss)},
                    {"stopped_early", tr.stopped_early()},
                    {"checkpoint", (fs::path(a.out) / "checkpoint").string()}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_transcribe(const Settings& s, const std::string& checkpoint, const std::string& manifest,
                   const std::vector<std::string>& wavs, std::optional<std::size_t> steps, const std::string& out) {
  if (manifest.empty() == wavs.empty()) throw ConfigError("give either --manifest or WAV files");
  const Model model = load_model(s, checkpoint);
  std::vector<std::pair<std::string, WaveForm>> inputs;
  if (!manifest.empty())
    for (const auto& e : data::load_manifest(manifest, model.vocabulary())) inputs.emplace_back(e.id, dsp::read_wav(e.audio_path));
  for (const auto& w : wavs) inputs.emplace_back(fs::path(w).stem().string(), dsp::read_wav(w));
  std::string lines;
  for (const auto& [id, wave] : inputs) {
    const Transcription t = model.transcribe(wave, steps, s.seed);
    json j{{"id", id}, {"text", t.text}, {"rtf", t.rtf}};
    j["speaker"] = {{"gender", probs(t.gender)}, {"age", probs(t.age)}, {"dialect", probs(t.dialect)}};
    lines += j.dump() + '\n';
  }
  emit(out, lines);
  return 0;
}

// Hypotheses are transcribe output or another manifest, matched by id.
int cmd_evaluate(const std::string& ref_path, const std::string& hyp_path, const std::string& out) {
  const auto refs = data::load_manifest(ref_path);
  std::map<std::string, json> hyps;
  std::ifstream in(hyp_path);
  if (!in) throw IoError("cannot open " + hyp_path);
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw FormatError(hyp_path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (!j.contains("id")) throw FormatError(hyp_path + ":" + std::to_string(line_no) + ": missing 'id'");
    hyps[j["id"].get<std::string>()] = j;
  }
  std::size_t edits = 0, words = 0, exact = 0, with_speaker = 0;
  double cer_sum = 0.0, bleu_sum = 0.0;
  std::array<std::size_t, 3> speaker_hits{};
  json per_utt = json::array();
  for (const auto& r : refs) {
    auto it = hyps.find(r.id);
    if (it == hyps.end()) throw FormatError("no hypothesis for '" + r.id + "'");
    const json& h = it->second;
    const std::string text = h.value("text", "");
    const auto w = metrics::wer(r.transcript, text);
    edits += w.substitutions + w.deletions + w.insertions;
    words += w.reference_words;
    exact += w.wer_pct == 0.0;
    const double c = metrics::cer(r.transcript, text), b = metrics::bleu4(r.transcript, text);
    cer_sum += c;
    bleu_sum += b;
    if (h.contains("speaker")) {
      ++with_speaker;
      const auto& sp = h["speaker"];
      speaker_hits[0] += sp["gender"]["id"].get<int>() == r.labels.gender;
      speaker_hits[1] += sp["age"]["id"].get<int>() == r.labels.age;
      speaker_hits[2] += sp["dialect"]["id"].get<int>() == r.labels.dialect;
    }
    per_utt.push_back({{"id", r.id}, {"wer", w.wer_pct}, {"cer", c}, {"bleu", b}});
  }
  const double n = static_cast<double>(refs.size());
  json report{{"utterances", refs.size()},
              {"wer", 100.0 * static_cast<double>(edits) / static_cast<double>(words)},
              {"cer", cer_sum / n},
              {"bleu", bleu_sum / n},
              {"exact", exact},
              {"per_utterance", per_utt}};
  if (with_speaker == refs.size()) {
    report["speaker_accuracy"] = {{"gender", speaker_hits[0] / n}, {"age", speaker_hits[1] / n},
                                  {"dialect", speaker_hits[2] / n}};
  }
  emit(out, report.dump(2) + '\n');
  return 0;
}

int cmd_speaker_probe(const Settings& s, const std::string& checkpoint, const std::string& manifest) {
  const Model model = load_model(s, checkpoint);
  const auto entries = data::load_manifest(manifest, model.vocabulary());
  ad::NoGradGuard no_grad;
  std::vector<ccam::SpeakerPrediction> preds;
  std::vector<ccam::SpeakerLabels> labels;
  for (const auto& e : entries) {
    preds.push_back(model.classify_speaker(model.encode(dsp::read_wav(e.audio_path))).prediction);
    labels.push_back(e.labels);
  }
  const auto acc = metrics::speaker_accuracy(preds, labels);
  std::cout << json{{"utterances", entries.size()}, {"gender", acc.gender}, {"age", acc.age}, {"dialect", acc.dialect}}
                   .dump()
            << '\n';
  return 0;
}

// Central differences on randomly chosen parameter entries of a small model,
// compared with the reverse-mode gradient of the joint loss.
int cmd_grad_check(const Settings& s, std::size_t entries, double tolerance) {
  ModelConfig mc = ModelConfig::from_preset("desk");
  mc.encoder.conv_layers = {{10, 5, 8, "gelu"}, {3, 2, 512, "gelu"}};
  mc.encoder.tf_layers = 1;
  mc.encoder.hidden = 8;
  mc.encoder.heads = 2;
  mc.encoder.ffn = 8;
  mc.unet.widths = {512, 8};
  mc.unet.time_dim = 8;
  mc.diffusion_steps = 8;
  mc.denoise_steps = mc.train_denoise_steps = 2;
  mc.init_seed = s.seed;
  const Model model(mc);
  PairedExample ex;
  ex.id = "probe";
  ex.target = {13, 1, 14};
  ex.clean = data::synthesize(ex.target);
  ex.noisy = augment::mix_at_snr(ex.clean, augment::gaussian_noise(ex.clean.samples.size(), s.seed), 10.0);
  ex.labels = {1, 2, 3};
  const LossConfig lc;
  const auto loss = [&] {
    Rng rng(s.seed);
    return model.forward_losses(ex, lc, {false, {}, &rng}).total;
  };
  const auto grads = ad::backward(loss());

  std::vector<std::pair<std::string, std::size_t>> picks;
  Rng rng(s.seed + 1);
  const auto& names = model.params().names();
  while (picks.size() < entries) {
    const std::string& name = names[rng() % names.size()];
    if (!grads.count(name)) continue;
    picks.emplace_back(name, rng() % model.params().get(name).size());
  }
  ad::NoGradGuard no_grad;
  const double h = 1e-5;
  double worst = 0.0;
  std::string worst_at;
  for (const auto& [name, k] : picks) {
    ad::Var p = model.params().get(name);
    const double x = p.value()[k];
    p.mutable_value()[k] = x + h;
    const double up = loss().value().item();
    p.mutable_value()[k] = x - h;
    const double down = loss().value().item();
    p.mutable_value()[k] = x;
    const double fd = (up - down) / (2.0 * h), an = grads.at(name)[k];
    const double err = std::abs(fd - an) / (1.0 + std::abs(fd));
    if (err > worst) {
      worst = err;
      worst_at = name + "[" + std::to_string(k) + "]";
    }
  }
  const bool ok = worst < tolerance;
  std::cout << json{{"entries", picks.size()}, {"max_rel_error", worst}, {"worst", worst_at}, {"pass", ok}}.dump()
            << '\n';
  return ok ? 0 : 2;
}

int cmd_ctc_oracle(const Settings& s, std::size_t cases, double tolerance) {
  std::mt19937_64 rng(s.seed);
  std::uniform_int_distribution<std::size_t> td(1, 6), vd(2, 4), ld(1, 3);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  double worst = 0.0;
  std::size_t done = 0;
  while (done < cases) {
    const std::size_t t = td(rng), v = vd(rng);
    std::vector<int> target(ld(rng));
    for (int& x : target) x = 1 + static_cast<int>(rng() % (v - 1));
    if (ctc::required_frames(target) > t) continue;
    Tensor p = Tensor::matrix(t, v);
    for (std::size_t r = 0; r < t; ++r) {
      double z = 0.0;
      for (std::size_t c = 0; c < v; ++c) z += (p(r, c) = u(rng));
      for (std::size_t c = 0; c < v; ++c) p(r, c) /= z;
    }
    const double want = ctc_enumerate(p, target);
    worst = std::max(worst, std::abs(ctc::ctc_loss(p, target) - want) / std::max(1.0, std::abs(want)));
    ++done;
  }
  const bool ok = worst < tolerance;
  std::cout << json{{"cases", done}, {"max_rel_error", worst}, {"pass", ok}}.dump() << '\n';
  return ok ? 0 : 2;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Noise-robust Bangla speech recognition"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "JSON config file (env ASR_CONFIG)")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Random seed (env ASR_SEED)");
  app.add_option("--preset", g.preset, "Model size preset")->check(CLI::IsMember({"paper", "desk"}));
  std::function<int(const Settings&)> action;

  std::string in, out;
  auto* feat = app.add_subcommand("featurize", "WAV to log-mel features (.lmel)");
  feat->add_option("input", in, "Input WAV")->required()->check(CLI::ExistingFile);
  feat->add_option("-o,--output", out, "Output .lmel")->required();
  feat->callback([&] { action = [&](const Settings& s) { return cmd_featurize(s, in, out); }; });

  auto* aug = app.add_subcommand("augment", "Apply the augmentation policy to one WAV");
  aug->add_option("input", in, "Input WAV")->required()->check(CLI::ExistingFile);
  aug->add_option("-o,--output", out, "Output WAV")->required();
  aug->callback([&] { action = [&](const Settings& s) { return cmd_augment(s, in, out); }; });

  std::size_t n = 5;
  auto* synth = app.add_subcommand("synth-corpus", "Write a tone-coded toy corpus");
  synth->add_option("-n,--count", n, "Number of utterances")->check(CLI::PositiveNumber);
  synth->add_option("-o,--output", out, "Output directory")->required();
  synth->callback([&] { action = [&](const Settings& s) { return cmd_synth(s, n, out); }; });

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train one stage");
  train->add_option("--stage", ta.stage, "Training stage")->check(CLI::IsMember({"diffusion", "joint"}));
  train->add_option("--manifest", ta.manifest, "Training manifest")->required()->check(CLI::ExistingFile);
  train->add_option("--val", ta.val, "Held-out manifest for early stopping")->check(CLI::ExistingFile);
  train->add_option("-o,--output", ta.out, "Output directory")->required();
  train->add_option("--resume", ta.resume, "Checkpoint to start from")->check(CLI::ExistingDirectory);
  train->add_option("--max-steps", ta.max_steps, "Optimizer step budget");
  train->callback([&] { action = [&](const Settings& s) { return cmd_train(s, ta); }; });

  std::string checkpoint, manifest;
  std::vector<std::string> wavs;
  std::optional<std::size_t> steps;
  auto* tx = app.add_subcommand("transcribe", "Transcribe WAVs to JSONL");
  tx->add_option("--checkpoint", checkpoint, "Checkpoint directory")->check(CLI::ExistingDirectory);
  tx->add_option("--manifest", manifest, "Manifest of inputs")->check(CLI::ExistingFile);
  tx->add_option("wavs", wavs, "WAV files")->check(CLI::ExistingFile);
  tx->add_option("--denoise-steps", steps, "Reverse diffusion steps (0 bypasses)");
  tx->add_option("-o,--output", out, "Output JSONL (default stdout)");
  tx->callback([&] { action = [&](const Settings& s) { return cmd_transcribe(s, checkpoint, manifest, wavs, steps, out); }; });

  std::string ref, hyp;
  auto* ev = app.add_subcommand("evaluate", "Score hypotheses against a reference manifest");
  ev->add_option("--ref", ref, "Reference manifest")->required()->check(CLI::ExistingFile);
  ev->add_option("--hyp", hyp, "Hypothesis JSONL or manifest")->required()->check(CLI::ExistingFile);
  ev->add_option("-o,--output", out, "Output JSON report (default stdout)");
  ev->callback([&] { action = [&](const Settings&) { return cmd_evaluate(ref, hyp, out); }; });

  auto* probe = app.add_subcommand("speaker-probe", "Speaker attribute accuracy on a manifest");
  probe->add_option("--checkpoint", checkpoint, "Checkpoint directory")->check(CLI::ExistingDirectory);
  probe->add_option("--manifest", manifest, "Manifest")->required()->check(CLI::ExistingFile);
  probe->callback([&] { action = [&](const Settings& s) { return cmd_speaker_probe(s, checkpoint, manifest); }; });

  std::size_t count = 20;
  double tol = 1e-4;
  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of the joint loss gradient");
  gc->add_option("--entries", count, "Parameter entries to probe")->check(CLI::PositiveNumber);
  gc->add_option("--tolerance", tol, "Maximum relative error");
  gc->callback([&] { action = [&](const Settings& s) { return cmd_grad_check(s, count, tol); }; });

  std::size_t cases = 100;
  double ctc_tol = 1e-10;
  auto* co = app.add_subcommand("ctc-oracle", "Compare CTC loss with path enumeration");
  co->add_option("--cases", cases, "Random cases")->check(CLI::PositiveNumber);
  co->add_option("--tolerance", ctc_tol, "Maximum relative error");
  co->callback([&] { action = [&](const Settings& s) { return cmd_ctc_oracle(s, cases, ctc_tol); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 1;
  }
  try {
    return action(resolve(g));
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.validation() ? 1 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
