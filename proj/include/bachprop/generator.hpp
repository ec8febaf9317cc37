#pragma once

// Sampling new scores from a trained model and exporting them as MIDI.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "bachprop/midi.hpp"
#include "bachprop/model.hpp"
#include "bachprop/normalizer.hpp"
#include "bachprop/trainer.hpp"

namespace bachprop {

struct GenConfig {
  int m = 3;
  int length_notes = 100;
  std::uint64_t seed = 0;
  double bpm = 120.0;
  int ppq = 192;
  int velocity = 80;

  void validate() const {
    if (m < 1 || m > kDurationCount) {
      throw std::invalid_argument("m must be between 1 and " + std::to_string(kDurationCount));
    }
    if (length_notes < 1) throw std::invalid_argument("length must be at least one note");
    if (!(bpm > 0.0)) throw std::invalid_argument("bpm must be positive");
    if (ppq < 1 || ppq > 0x7FFF) throw std::invalid_argument("ppq must be in 1..32767");
    if (velocity < 1 || velocity > 127) throw std::invalid_argument("velocity must be in 1..127");
  }
};

// Indices of the m largest entries, largest first; equal values keep index
// order.
inline std::vector<int> top_m_indices(const Vector& probs, int m) {
  std::vector<int> idx(static_cast<std::size_t>(probs.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return probs[a] > probs[b]; });
  idx.resize(static_cast<std::size_t>(std::clamp<Eigen::Index>(m, 0, probs.size())));
  return idx;
}

// Draws from the m most probable symbols, weighted by their probabilities.
// m = 1 is argmax and consumes no randomness.
template <typename Rng>
int sample_top_m(const Vector& probs, int m, Rng& rng) {
  if (probs.size() == 0) throw std::invalid_argument("empty distribution");
  if (m < 1) throw std::invalid_argument("m must be positive");
  const std::vector<int> top = top_m_indices(probs, m);
  if (top.size() == 1) return top[0];
  double total = 0.0;
  for (int i : top) total += probs[i];
  if (!(total > 0.0)) return top[0];
  const double u = std::uniform_real_distribution<double>(0.0, total)(rng);
  double acc = 0.0;
  for (int i : top) {
    acc += probs[i];
    if (u < acc) return i;
  }
  // u can only reach here through rounding in the running sum.
  for (auto it = top.rbegin(); it != top.rend(); ++it) {
    if (probs[*it] > 0.0) return *it;
  }
  return top[0];
}

template <typename Rng>
NoteEvent sample_first_note(const FirstNoteTable& table, Rng& rng) {
  if (table.empty()) throw std::invalid_argument("first-note table is empty");
  std::int64_t k = std::uniform_int_distribution<std::int64_t>(0, table.total() - 1)(rng);
  for (const auto& [note, count] : table.entries) {
    if (k < count) return note;
    k -= count;
  }
  return table.entries.back().first;
}

// One sampled symbol with the distribution it was drawn from.
struct SampleRecord {
  std::size_t note = 0;  // index of the note being completed
  Feature feature = kTiming;
  int symbol = 0;
  Vector probs;
};

struct GenerationTrace {
  std::vector<NoteEvent> raw_notes;  // in sampling order
  std::vector<SampleRecord> samples;
  int m = 0;
};

// Samples length_notes notes. The result is in canonical order (notes that
// share an onset sorted by pitch); the sampling order is kept in `trace`.
inline Score generate(const Checkpoint& cp, const GenConfig& cfg,
                      GenerationTrace* trace = nullptr) {
  cfg.validate();
  const ModelParams& params = cp.params;
  Rng rng(cfg.seed);
  std::vector<NoteEvent> notes{sample_first_note(cp.first_notes, rng)};
  ModelState state = ModelState::zeros(params.config());
  if (trace != nullptr) {
    *trace = GenerationTrace{};
    trace->m = cfg.m;
  }

  auto draw = [&](const SubstepInput& in, Feature f) {
    SubstepOutput out = forward_substep(params, state, in);
    state = std::move(out.state);
    Vector p = softmax(out.logits[f]);
    const int s = sample_top_m(p, cfg.m, rng);
    if (trace != nullptr) trace->samples.push_back({notes.size(), f, s, std::move(p)});
    return s;
  };

  while (notes.size() < static_cast<std::size_t>(cfg.length_notes)) {
    const NoteEvent& cur = notes.back();
    NoteEvent next;
    next.dt = draw({cur.dt, cur.t, cur.p}, kTiming);
    next.t = draw({next.dt, -1, -1}, kDuration);
    next.p = draw({next.dt, next.t, -1}, kPitch);
    notes.push_back(next);
  }

  if (trace != nullptr) trace->raw_notes = notes;
  Score s;
  s.notes = std::move(notes);
  s.name = "generated seed " + std::to_string(cfg.seed);
  s.source_ppq = cfg.ppq;
  return canonicalize(s, cp.alphabets);
}

// Format-0 MIDI bytes for `score`.
inline midi::Bytes export_midi(const Score& score, const GenConfig& cfg,
                               const Alphabets& alphabets) {
  if (score.notes.empty()) throw EmptyScoreError("cannot export an empty score");
  return midi::serialize_midi(
      denormalize(score, alphabets, cfg.ppq, cfg.bpm, cfg.velocity));
}

}  // namespace bachprop
