#pragma once

// Command-line front end: normalize, train, generate, evaluate.
//
// Exit codes: 0 success, 1 usage error, 2 data error.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "bachprop/checkpoint.hpp"
#include "bachprop/generator.hpp"
#include "bachprop/midi.hpp"
#include "bachprop/normalizer.hpp"
#include "bachprop/score_io.hpp"
#include "bachprop/trainer.hpp"

namespace bachprop::cli {

namespace fs = std::filesystem;

inline constexpr int kOk = 0;
inline constexpr int kUsageError = 1;
inline constexpr int kDataError = 2;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Merged view of every tunable.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  GenConfig gen;
  std::vector<std::string> durations;  // empty: default alphabet
  int lowest_pitch = 21;

  Alphabets alphabets() const {
    if (durations.empty()) return Alphabets(Alphabets::default_durations(), lowest_pitch);
    std::vector<Rational> d;
    for (const auto& s : durations) d.push_back(Rational::parse(s));
    return Alphabets(d, lowest_pitch);
  }
};

inline std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

inline bool is_midi(const fs::path& p) {
  const std::string e = lower(p.extension().string());
  return e == ".mid" || e == ".midi";
}

inline bool is_score_text(const fs::path& p) { return lower(p.extension().string()) == kScoreExtension; }

// Files under `dir` (recursively) accepted by `keep`, in a stable order.
template <typename Pred>
std::vector<fs::path> collect(const fs::path& dir, Pred keep) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file() && keep(entry.path())) out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline midi::MidiFile read_midi(const fs::path& p) {
  return midi::parse_midi(midi::read_file(p));
}

// Normalized scores from every MIDI or score-text file under `dir`.
// Unreadable files become warnings.
inline std::vector<Score> load_corpus(const fs::path& dir, const Alphabets& alphabets,
                                      std::ostream& err) {
  const auto files = collect(dir, [](const fs::path& p) { return is_midi(p) || is_score_text(p); });
  std::vector<Score> scores;
  for (const auto& f : files) {
    const std::string name = fs::relative(f, dir).generic_string();
    try {
      Score s = is_midi(f) ? normalize(read_midi(f), alphabets, name) : load_score(f, alphabets);
      s.name = name;
      scores.push_back(std::move(s));
    } catch (const std::exception& e) {
      err << "warning: skipping " << name << ": " << e.what() << '\n';
    }
  }
  if (scores.empty()) throw DataError("no usable scores under " + dir.string());
  return scores;
}

inline void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + p.string());
  f << text;
}

inline std::string report_csv_header() { return "acc_dt,acc_t,acc_p,nll,notes"; }

inline std::string report_csv(const AccuracyReport& r) {
  std::ostringstream os;
  os << std::setprecision(6) << r.acc_dt << ',' << r.acc_t << ',' << r.acc_p << ',' << r.nll
     << ',' << r.notes;
  return os.str();
}

inline nlohmann::json config_json(const RunConfig& rc) {
  const auto& m = rc.model;
  const auto& t = rc.train;
  const auto& g = rc.gen;
  return {{"model",
           {{"layers", m.layer_sizes},
            {"dropout", m.dropout_rate},
            {"seed", m.seed},
            {"auxiliary_supervision", m.auxiliary_supervision}}},
          {"train",
           {{"epochs", t.epochs},
            {"batch_songs", t.batch_songs},
            {"window_notes", t.window_notes},
            {"valid_fraction", t.valid_fraction},
            {"lr", t.lr},
            {"clip_norm", t.clip_norm},
            {"seed", t.seed},
            {"augmentation", t.augmentation}}},
          {"generate",
           {{"m", g.m},
            {"length", g.length_notes},
            {"seed", g.seed},
            {"bpm", g.bpm},
            {"ppq", g.ppq},
            {"velocity", g.velocity}}}};
}

// --- commands -------------------------------------------------------------

inline int cmd_normalize(const fs::path& in, const fs::path& out, const RunConfig& rc,
                         std::ostream& os, std::ostream& err) {
  const Alphabets alphabets = rc.alphabets();
  const auto files = collect(in, is_midi);
  if (files.empty()) throw DataError("no .mid or .midi files under " + in.string());
  os << "file,notes,mean_timing_distortion,mean_duration_distortion\n";
  int written = 0;
  for (const auto& f : files) {
    const fs::path rel = fs::relative(f, in);
    try {
      const NormalizeResult r = normalize_detailed(read_midi(f), alphabets, rel.generic_string());
      for (const auto& w : r.warnings) err << "warning: " << rel.generic_string() << ": " << w << '\n';
      fs::path target = out / rel;
      target.replace_extension(kScoreExtension);
      write_text(target, score_to_string(r.score, alphabets));
      os << rel.generic_string() << ',' << r.score.notes.size() << ',' << r.mean_timing_distortion
         << ',' << r.mean_duration_distortion << '\n';
      ++written;
    } catch (const std::exception& e) {
      err << "warning: skipping " << rel.generic_string() << ": " << e.what() << '\n';
    }
  }
  if (written == 0) throw DataError("none of the input files could be normalized");
  return kOk;
}

inline int cmd_train(const fs::path& corpus_dir, const fs::path& out, const fs::path& resume,
                     const RunConfig& rc, std::ostream& os, std::ostream& err) {
  const Alphabets alphabets = rc.alphabets();
  const std::vector<Score> corpus = load_corpus(corpus_dir, alphabets, err);
  if (corpus.size() < 2) throw DataError("corpus too small to split: need at least 2 scores");

  std::optional<Checkpoint> from;
  if (!resume.empty()) from = load_checkpoint(resume);

  const fs::path log_path = fs::path(out).concat(".csv");
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  // A resumed run appends to the existing log.
  const bool append = from.has_value() && fs::exists(log_path);
  std::ofstream log(log_path, append ? std::ios::app : std::ios::trunc);
  if (!log) throw DataError("cannot write " + log_path.string());
  if (!append) log << epoch_log_header() << '\n';

  FitHooks hooks;
  hooks.on_epoch = [&](const EpochLog& e) {
    log << to_csv(e) << '\n';
    log.flush();
  };
  const FitResult r = fit(corpus, alphabets, rc.train, rc.model, from ? &*from : nullptr, &hooks);
  for (const auto& w : r.warnings) err << "warning: " << w << '\n';

  save_checkpoint(r.best, out);
  save_checkpoint(r.last, fs::path(out).concat(".last"));

  const CorpusSplit& split = r.split;
  nlohmann::json manifest = config_json(rc);
  manifest["corpus"] = corpus_dir.string();
  manifest["best_epoch"] = r.best.epoch;
  nlohmann::json train_names = nlohmann::json::array(), valid_names = nlohmann::json::array();
  for (const auto& s : split.train) train_names.push_back(s.name);
  for (const auto& s : split.valid) valid_names.push_back(s.name);
  manifest["train_scores"] = train_names;
  manifest["valid_scores"] = valid_names;
  write_text(fs::path(out).concat(".json"), manifest.dump(2) + "\n");

  os << "set," << report_csv_header() << '\n';
  os << "train," << report_csv(evaluate(r.best.params, split.train)) << '\n';
  os << "valid," << report_csv(r.best.metrics) << '\n';
  os << "best epoch " << r.best.epoch << " of " << r.last.epoch << '\n';
  return kOk;
}

inline int cmd_generate(const fs::path& ckpt, const fs::path& out, int n, bool write_notes,
                        const RunConfig& rc, std::ostream& os) {
  if (n < 1) throw UsageError("-n must be at least 1");
  rc.gen.validate();
  const Checkpoint cp = load_checkpoint(ckpt);
  fs::create_directories(out);
  nlohmann::json manifest;
  manifest["checkpoint"] = ckpt.string();
  manifest["m"] = rc.gen.m;
  manifest["length"] = rc.gen.length_notes;
  manifest["bpm"] = rc.gen.bpm;
  manifest["ppq"] = rc.gen.ppq;
  manifest["velocity"] = rc.gen.velocity;
  manifest["base_seed"] = rc.gen.seed;
  nlohmann::json scores = nlohmann::json::array();
  for (int i = 0; i < n; ++i) {
    GenConfig g = rc.gen;
    g.seed = rc.gen.seed + static_cast<std::uint64_t>(i);
    const Score s = generate(cp, g);
    std::ostringstream stem;
    stem << "generated_" << std::setw(3) << std::setfill('0') << i;
    const fs::path mid = out / (stem.str() + ".mid");
    midi::write_file(mid, export_midi(s, g, cp.alphabets));
    if (write_notes) {
      write_text(out / (stem.str() + kScoreExtension), score_to_string(s, cp.alphabets));
    }
    scores.push_back({{"file", mid.filename().string()}, {"seed", g.seed}});
    os << mid.string() << ',' << s.notes.size() << '\n';
  }
  manifest["scores"] = scores;
  write_text(out / "manifest.json", manifest.dump(2) + "\n");
  return kOk;
}

inline int cmd_evaluate(const fs::path& ckpt, const fs::path& corpus_dir, std::ostream& os,
                        std::ostream& err) {
  const Checkpoint cp = load_checkpoint(ckpt);
  const std::vector<Score> corpus = load_corpus(corpus_dir, cp.alphabets, err);
  os << report_csv_header() << '\n' << report_csv(evaluate(cp.params, corpus)) << '\n';
  return kOk;
}

// --- argument parsing -----------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& os, std::ostream& err) {
  CLI::App app{"Normalize MIDI corpora, train a note-level LSTM and sample new scores."};
  app.name("bachprop");
  app.set_config("--config", "", "TOML or INI file with option values (flags override it)");
  app.require_subcommand(1);

  RunConfig rc;
  std::vector<int> layers{rc.model.layer_sizes.begin(), rc.model.layer_sizes.end()};
  std::uint64_t seed = 0;
  bool no_augmentation = false;
  bool final_only = false;

  app.add_option("--seed", seed, "Seed for initialization, splitting, training and sampling")
      ->capture_default_str();
  app.add_option("--layers", layers, "Three LSTM layer widths")->expected(3)->delimiter(',')
      ->capture_default_str();
  app.add_option("--dropout", rc.model.dropout_rate, "Dropout rate")->capture_default_str();
  app.add_flag("--final-only", final_only, "Supervise each head only at its readout substep");
  app.add_option("--epochs", rc.train.epochs, "Training epochs")->capture_default_str();
  app.add_option("--batch-songs", rc.train.batch_songs, "Songs per batch")->capture_default_str();
  app.add_option("--window", rc.train.window_notes, "Notes per BPTT window")->capture_default_str();
  app.add_option("--valid-fraction", rc.train.valid_fraction, "Validation share of the corpus")
      ->capture_default_str();
  app.add_option("--lr", rc.train.lr, "Adam learning rate")->capture_default_str();
  app.add_option("--clip-norm", rc.train.clip_norm, "Gradient norm limit")->capture_default_str();
  app.add_flag("--no-augmentation", no_augmentation, "Disable random transposition");
  app.add_option("--m", rc.gen.m, "Sample among the M most likely symbols")->capture_default_str();
  app.add_option("--length", rc.gen.length_notes, "Notes per generated score")
      ->capture_default_str();
  app.add_option("--bpm", rc.gen.bpm, "Tempo of exported MIDI")->capture_default_str();
  app.add_option("--ppq", rc.gen.ppq, "Resolution of exported MIDI")->capture_default_str();
  app.add_option("--velocity", rc.gen.velocity, "Note-on velocity of exported MIDI")
      ->capture_default_str();
  app.add_option("--durations", rc.durations, "21 note lengths in quarter notes (e.g. 1/16,3/8)")
      ->delimiter(',');
  app.add_option("--lowest-pitch", rc.lowest_pitch, "MIDI key of the lowest pitch symbol")
      ->capture_default_str();

  std::string in_dir, out_path, corpus_dir, ckpt, resume;
  int count = 1;
  bool write_notes = false;

  auto* norm = app.add_subcommand("normalize", "Convert MIDI files to normalized score text");
  norm->fallthrough();
  norm->add_option("input_dir", in_dir, "Directory searched recursively for .mid/.midi")
      ->required();
  norm->add_option("--out", out_path, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train on a corpus and write a checkpoint");
  train->fallthrough();
  train->add_option("corpus_dir", corpus_dir, "Directory of .mid/.midi/.notes files")->required();
  train->add_option("--out", out_path, "Checkpoint path")->required();
  train->add_option("--resume", resume, "Continue from a .last checkpoint");

  auto* gen = app.add_subcommand("generate", "Sample scores and export them as MIDI");
  gen->fallthrough();
  gen->add_option("checkpoint", ckpt, "Checkpoint path")->required();
  gen->add_option("--out", out_path, "Output directory")->required();
  gen->add_option("-n", count, "Number of scores")->capture_default_str();
  gen->add_flag("--notes", write_notes, "Also write normalized score text");

  auto* eval = app.add_subcommand("evaluate", "Teacher-forced accuracy on a corpus");
  eval->fallthrough();
  eval->add_option("checkpoint", ckpt, "Checkpoint path")->required();
  eval->add_option("corpus_dir", corpus_dir, "Directory of .mid/.midi/.notes files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    os << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    os << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  }

  try {
    std::copy(layers.begin(), layers.end(), rc.model.layer_sizes.begin());
    rc.model.seed = seed;
    rc.model.auxiliary_supervision = !final_only;
    rc.train.seed = seed;
    rc.train.augmentation = !no_augmentation;
    rc.gen.seed = seed;
    rc.model.validate();
    rc.train.validate();
    rc.gen.validate();
    (void)rc.alphabets();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  }

  try {
    if (*norm) return cmd_normalize(in_dir, out_path, rc, os, err);
    if (*train) return cmd_train(corpus_dir, out_path, resume, rc, os, err);
    if (*gen) return cmd_generate(ckpt, out_path, count, write_notes, rc, os);
    return cmd_evaluate(ckpt, corpus_dir, os, err);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  }
}

}  // namespace bachprop::cli
