#pragma once

// Corpus splitting, the epoch loop and teacher-forced evaluation.
//
// A batch of songs is processed in lockstep: update k averages the gradients
// of window k of every song in the batch that has one, clips the global norm
// and takes one Adam step. Hidden state is carried from one window of a song
// to the next and reset only at the start of a song.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bachprop/model.hpp"
#include "bachprop/normalizer.hpp"

namespace bachprop {

using Rng = std::mt19937_64;

struct TrainConfig {
  int epochs = 50;
  int batch_songs = 32;
  int window_notes = 64;
  double valid_fraction = 0.10;
  double lr = 1e-3;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  bool augmentation = true;

  void validate() const {
    if (epochs < 0) throw std::invalid_argument("epochs must be non-negative");
    if (batch_songs < 1) throw std::invalid_argument("batch_songs must be positive");
    if (window_notes < 2) throw std::invalid_argument("window_notes must be at least 2");
    if (!(valid_fraction > 0.0 && valid_fraction < 1.0)) {
      throw std::invalid_argument("valid_fraction must be in (0, 1)");
    }
    if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
    if (!(clip_norm > 0.0)) throw std::invalid_argument("clip norm must be positive");
  }

  bool operator==(const TrainConfig&) const = default;
};

// Accuracies are pooled over every predicted note of every song. nll is the
// mean joint negative log-likelihood of a note under the final readouts.
struct AccuracyReport {
  double acc_dt = 0.0;
  double acc_t = 0.0;
  double acc_p = 0.0;
  double nll = 0.0;
  std::size_t notes = 0;

  double mean_accuracy() const { return (acc_dt + acc_t + acc_p) / 3.0; }
  bool operator==(const AccuracyReport&) const = default;
};

// Empirical distribution of the first note of each training score.
struct FirstNoteTable {
  std::vector<std::pair<NoteEvent, std::int64_t>> entries;  // sorted by note

  static FirstNoteTable from_scores(std::span<const Score> scores) {
    std::map<NoteEvent, std::int64_t> counts;
    for (const Score& s : scores) {
      if (!s.notes.empty()) ++counts[s.notes.front()];
    }
    FirstNoteTable t;
    t.entries.assign(counts.begin(), counts.end());
    return t;
  }

  bool empty() const { return entries.empty(); }
  std::int64_t total() const {
    std::int64_t n = 0;
    for (const auto& e : entries) n += e.second;
    return n;
  }
  double probability(std::size_t i) const {
    return static_cast<double>(entries.at(i).second) / static_cast<double>(total());
  }
  bool operator==(const FirstNoteTable&) const = default;
};

struct OptimizerState {
  AdamMoments moments;
  long step = 0;
  bool operator==(const OptimizerState&) const = default;
};

// Everything needed to continue a run exactly where it stopped.
struct TrainingState {
  OptimizerState optimizer;
  std::string rng_state;
  ParamVector best_params;
  AccuracyReport best_metrics;
  int best_epoch = 0;

  bool operator==(const TrainingState& o) const {
    return optimizer == o.optimizer && rng_state == o.rng_state &&
           best_params.size() == o.best_params.size() && best_params == o.best_params &&
           best_metrics == o.best_metrics && best_epoch == o.best_epoch;
  }
};

struct Checkpoint {
  ModelParams params{ModelConfig{}};
  Alphabets alphabets;
  TrainConfig train;
  AccuracyReport metrics;  // on the validation set
  int epoch = 0;
  FirstNoteTable first_notes;
  std::optional<TrainingState> state;

  bool operator==(const Checkpoint&) const = default;
};

struct EpochLog {
  int epoch = 0;
  double train_nll = 0.0;
  AccuracyReport valid;
};

inline std::string epoch_log_header() { return "epoch,train_nll,acc_dt,acc_t,acc_p"; }

inline std::string to_csv(const EpochLog& e) {
  std::ostringstream os;
  os.precision(17);
  os << e.epoch << ',' << e.train_nll << ',' << e.valid.acc_dt << ',' << e.valid.acc_t << ','
     << e.valid.acc_p;
  return os.str();
}

// Optional observers. on_train_song sees every song that contributes a
// gradient, after augmentation.
struct FitHooks {
  std::function<void(const Score&)> on_train_song;
  std::function<void(const EpochLog&)> on_epoch;
};

struct CorpusSplit {
  std::vector<Score> train;
  std::vector<Score> valid;
};

inline CorpusSplit split_corpus(std::span<const Score> scores, double valid_fraction,
                                std::uint64_t seed) {
  if (scores.size() < 2) throw std::invalid_argument("need at least two scores to split");
  if (!(valid_fraction > 0.0 && valid_fraction < 1.0)) {
    throw std::invalid_argument("valid_fraction must be in (0, 1)");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  // A tiny epsilon keeps 0.1 * 10 from rounding up to 2.
  auto n_valid = static_cast<std::size_t>(
      std::ceil(valid_fraction * static_cast<double>(scores.size()) - 1e-9));
  n_valid = std::clamp<std::size_t>(n_valid, 1, scores.size() - 1);
  CorpusSplit out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_valid ? out.valid : out.train).push_back(scores[order[i]]);
  }
  return out;
}

namespace detail {

struct SongCursor {
  std::vector<NoteEvent> notes;
  ModelState state;
  std::size_t windows = 0;
};

inline std::size_t window_count(std::size_t notes, int window) {
  if (notes < 2) return 0;
  return (notes - 2) / static_cast<std::size_t>(window) + 1;
}

}  // namespace detail

// One pass over `train`. Returns the mean of the per-window losses.
inline double train_epoch(ModelParams& params, OptimizerState& opt, std::span<const Score> train,
                          const TrainConfig& cfg, Rng& rng, Warnings* warnings = nullptr,
                          const FitHooks* hooks = nullptr) {
  cfg.validate();
  const ModelConfig& mcfg = params.config();
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  const AdamOptions adam{cfg.lr};
  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch_songs)) {
    const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch_songs));
    std::vector<detail::SongCursor> batch;
    std::size_t max_windows = 0;
    for (std::size_t i = b0; i < b1; ++i) {
      const Score& song = train[order[i]];
      if (song.notes.size() < 2) {
        if (warnings != nullptr) {
          warnings->push_back("skipping '" + song.name + "': fewer than 2 notes");
        }
        continue;
      }
      Score used = song;
      if (cfg.augmentation) {
        const ShiftRange r = transposition_bounds(song);
        used = transpose(song, std::uniform_int_distribution<int>(r.min_shift, r.max_shift)(rng));
      }
      if (hooks != nullptr && hooks->on_train_song) hooks->on_train_song(used);
      detail::SongCursor c;
      c.notes = std::move(used.notes);
      c.state = ModelState::zeros(mcfg);
      c.windows = detail::window_count(c.notes.size(), cfg.window_notes);
      max_windows = std::max(max_windows, c.windows);
      batch.push_back(std::move(c));
    }

    for (std::size_t k = 0; k < max_windows; ++k) {
      ParamVector grad = ParamVector::Zero(params.values().size());
      int contributors = 0;
      for (auto& song : batch) {
        if (k >= song.windows) continue;
        const std::size_t first = k * static_cast<std::size_t>(cfg.window_notes);
        const std::size_t last =
            std::min(song.notes.size() - 1, first + static_cast<std::size_t>(cfg.window_notes));
        const std::span<const NoteEvent> window(song.notes.data() + first, last - first + 1);
        std::vector<DropoutMask> masks;
        if (mcfg.dropout_rate > 0.0) {
          masks.reserve((window.size() - 1) * kSubsteps);
          for (std::size_t m = 0; m < (window.size() - 1) * kSubsteps; ++m) {
            masks.push_back(sample_dropout_mask(mcfg, rng));
          }
        }
        const WindowCache cache = forward_window(params, song.state, window, masks);
        const BackwardResult r = backward(params, cache);
        grad += r.gradient;
        loss_sum += r.loss;
        ++loss_count;
        ++contributors;
        song.state = cache.final_state;
      }
      grad /= static_cast<double>(contributors);
      clip_gradients(grad, cfg.clip_norm);
      adam_step(params.values(), grad, opt.moments, ++opt.step, adam);
    }
  }
  if (!params.values().allFinite()) throw NumericError("parameters became non-finite");
  return loss_count == 0 ? 0.0 : loss_sum / static_cast<double>(loss_count);
}

inline int argmax(const Vector& v) {
  Eigen::Index i = 0;
  v.maxCoeff(&i);
  return static_cast<int>(i);
}

// Teacher-forced accuracy of the final readouts, without dropout.
inline AccuracyReport evaluate(const ModelParams& params, std::span<const Score> scores) {
  std::size_t notes = 0, hit_dt = 0, hit_t = 0, hit_p = 0;
  double nll = 0.0;
  for (const Score& s : scores) {
    ModelState state = ModelState::zeros(params.config());
    for (std::size_t n = 0; n + 1 < s.notes.size(); ++n) {
      const NoteEvent& next = s.notes[n + 1];
      NoteStepOutput out = note_step(params, state, s.notes[n], next);
      state = std::move(out.state);
      const Vector& pdt = out.readout[0][kTiming];
      const Vector& pt = out.readout[1][kDuration];
      const Vector& pp = out.readout[2][kPitch];
      hit_dt += argmax(pdt) == next.dt;
      hit_t += argmax(pt) == next.t;
      hit_p += argmax(pp) == next.p;
      nll -= std::log(std::max(pdt[next.dt], kMinProbability)) +
             std::log(std::max(pt[next.t], kMinProbability)) +
             std::log(std::max(pp[next.p], kMinProbability));
      ++notes;
    }
  }
  if (notes == 0) throw std::invalid_argument("nothing to evaluate: no score has two notes");
  const auto d = static_cast<double>(notes);
  return {static_cast<double>(hit_dt) / d, static_cast<double>(hit_t) / d,
          static_cast<double>(hit_p) / d, nll / d, notes};
}

inline std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline Rng rng_from_state(const std::string& text) {
  Rng rng;
  std::istringstream is(text);
  is >> rng;
  if (!is) throw std::invalid_argument("malformed rng state");
  return rng;
}

struct FitResult {
  CorpusSplit split;
  Checkpoint best;
  Checkpoint last;
  std::vector<EpochLog> log;
  Warnings warnings;
};

// Trains for train_cfg.epochs epochs, evaluating on the validation split after
// each one. Epoch 0 is the initial model. `resume` continues from a `last`
// checkpoint of an earlier run with the same corpus and configuration.
inline FitResult fit(std::span<const Score> corpus, const Alphabets& alphabets,
                     const TrainConfig& train_cfg, const ModelConfig& model_cfg,
                     const Checkpoint* resume = nullptr, const FitHooks* hooks = nullptr) {
  train_cfg.validate();
  ModelConfig mcfg = model_cfg;
  mcfg.clip_norm = train_cfg.clip_norm;
  mcfg.validate();

  FitResult out;
  std::vector<Score> usable;
  for (const Score& s : corpus) {
    if (s.notes.size() < 2) {
      out.warnings.push_back("skipping '" + s.name + "': fewer than 2 notes");
    } else {
      usable.push_back(s);
    }
  }
  out.split = split_corpus(usable, train_cfg.valid_fraction, train_cfg.seed);
  const CorpusSplit& split = out.split;

  Checkpoint cp;
  cp.alphabets = alphabets;
  cp.train = train_cfg;
  cp.first_notes = FirstNoteTable::from_scores(split.train);

  // Distinct from the split shuffle's stream.
  Rng rng(train_cfg.seed ^ 0x9E3779B97F4A7C15ULL);
  ModelParams params = init_params(mcfg);
  OptimizerState opt{AdamMoments::zeros(params.values().size()), 0};
  Checkpoint best;
  int start = 0;

  if (resume != nullptr) {
    if (!resume->state) throw std::invalid_argument("checkpoint has no training state to resume");
    if (resume->params.config() != mcfg || !(resume->alphabets == alphabets)) {
      throw std::invalid_argument("resume checkpoint was trained with a different configuration");
    }
    if (resume->first_notes != cp.first_notes) {
      throw std::invalid_argument("resume checkpoint was trained on a different corpus");
    }
    params = resume->params;
    opt = resume->state->optimizer;
    rng = rng_from_state(resume->state->rng_state);
    start = resume->epoch;
    best = cp;
    best.params = ModelParams(mcfg, resume->state->best_params);
    best.metrics = resume->state->best_metrics;
    best.epoch = resume->state->best_epoch;
    cp.metrics = resume->metrics;
  } else {
    best = cp;
    best.params = params;
    best.metrics = evaluate(params, split.valid);
    best.epoch = 0;
    cp.metrics = best.metrics;
  }

  for (int epoch = start + 1; epoch <= train_cfg.epochs; ++epoch) {
    const double loss = train_epoch(params, opt, split.train, train_cfg, rng, &out.warnings, hooks);
    const AccuracyReport valid = evaluate(params, split.valid);
    cp.metrics = valid;
    if (valid.mean_accuracy() > best.metrics.mean_accuracy()) {
      best.params = params;
      best.metrics = valid;
      best.epoch = epoch;
    }
    EpochLog row{epoch, loss, valid};
    out.log.push_back(row);
    if (hooks != nullptr && hooks->on_epoch) hooks->on_epoch(row);
  }

  cp.params = params;
  cp.epoch = std::max(start, train_cfg.epochs);
  cp.state = TrainingState{opt, rng_state(rng), best.params.values(), best.metrics, best.epoch};
  out.best = std::move(best);
  out.last = std::move(cp);
  return out;
}

}  // namespace bachprop
