#pragma once

// Conversion between Standard MIDI Files and normalized note sequences.
//
// A normalized note is a triple of symbol indices (dt, t, p): the onset
// distance to the previous note, the note duration, and the pitch. Timing and
// duration are snapped to a fixed set of note lengths measured in quarter
// notes, which removes performance jitter and software-specific tick grids.

#include <algorithm>
#include <array>
#include <compare>
#include <cstdint>
#include <deque>
#include <map>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "bachprop/midi.hpp"
#include "bachprop/rational.hpp"

namespace bachprop {

inline constexpr int kDurationCount = 21;
inline constexpr int kTimingCount = kDurationCount + 1;
inline constexpr int kPitchCount = 88;

using Warnings = std::vector<std::string>;

// Thrown when a file yields no usable notes.
class EmptyScoreError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace detail

// The symbol sets for the three note features.
//
// `timings` is `{0}` followed by the durations; index 0 encodes notes that
// start together with the previous one (chords). Pitches are 88 consecutive
// MIDI keys starting at `lowest_pitch`.
class Alphabets {
 public:
  Alphabets() : Alphabets(default_durations()) {}

  explicit Alphabets(std::vector<Rational> durations, int lowest_pitch = 21)
      : durations_(std::move(durations)), lowest_pitch_(lowest_pitch) {
    if (durations_.size() != kDurationCount) {
      throw std::invalid_argument("duration alphabet must have exactly 21 entries, got " +
                                  std::to_string(durations_.size()));
    }
    for (std::size_t i = 0; i < durations_.size(); ++i) {
      if (durations_[i] <= Rational(0)) {
        throw std::invalid_argument("durations must be positive");
      }
      if (i > 0 && !(durations_[i - 1] < durations_[i])) {
        throw std::invalid_argument("durations must be strictly increasing");
      }
    }
    if (std::find(durations_.begin(), durations_.end(), Rational(1)) == durations_.end()) {
      throw std::invalid_argument("duration alphabet must contain the quarter note (1)");
    }
    if (lowest_pitch_ < 0 || lowest_pitch_ + kPitchCount - 1 > 127) {
      throw std::invalid_argument("pitch range must lie within MIDI 0..127");
    }
    timings_.reserve(kTimingCount);
    timings_.push_back(Rational(0));
    timings_.insert(timings_.end(), durations_.begin(), durations_.end());
  }

  // Binary, dotted and triplet lengths from a 64th note up to six whole notes.
  static std::vector<Rational> default_durations() {
    return {Rational(1, 16), Rational(1, 8), Rational(1, 6), Rational(1, 4), Rational(1, 3),
            Rational(3, 8),  Rational(1, 2), Rational(2, 3), Rational(3, 4), Rational(1),
            Rational(4, 3),  Rational(3, 2), Rational(2),    Rational(8, 3), Rational(3),
            Rational(4),     Rational(6),    Rational(8),    Rational(12),   Rational(16),
            Rational(24)};
  }

  std::span<const Rational> durations() const { return durations_; }
  std::span<const Rational> timings() const { return timings_; }
  int lowest_pitch() const { return lowest_pitch_; }
  int highest_pitch() const { return lowest_pitch_ + kPitchCount - 1; }

  std::uint64_t timing_fingerprint() const { return fingerprint(timings_); }
  std::uint64_t duration_fingerprint() const { return fingerprint(durations_); }
  std::uint64_t pitch_fingerprint() const {
    return detail::fnv1a("pitch:" + std::to_string(lowest_pitch_) + ".." +
                         std::to_string(highest_pitch()));
  }

  bool operator==(const Alphabets& o) const {
    return durations_ == o.durations_ && lowest_pitch_ == o.lowest_pitch_;
  }

 private:
  static std::uint64_t fingerprint(std::span<const Rational> values) {
    std::string s;
    for (const auto& v : values) s += v.str() + ",";
    return detail::fnv1a(s);
  }

  std::vector<Rational> durations_;
  std::vector<Rational> timings_;
  int lowest_pitch_ = 21;
};

struct NoteEvent {
  int dt = 0;
  int t = 0;
  int p = 0;
  auto operator<=>(const NoteEvent&) const = default;
};

struct Score {
  std::vector<NoteEvent> notes;
  std::string name;
  int source_ppq = 192;
  bool operator==(const Score&) const = default;
};

// A note recovered from a MIDI file, in quarter notes.
struct NoteSpan {
  Rational onset;
  Rational duration;
  int pitch = 0;
  bool operator==(const NoteSpan&) const = default;
};

struct NoteExtraction {
  std::vector<NoteSpan> notes;
  Warnings warnings;
};

// Pairs note-on/note-off messages per (track, channel, pitch) in FIFO order
// and returns notes sorted by onset, then pitch, then duration.
inline NoteExtraction extract_notes(const midi::MidiFile& file) {
  NoteExtraction out;
  auto at = [&](std::int64_t tick) { return Rational(tick, file.header.ppq); };

  for (std::size_t ti = 0; ti < file.tracks.size(); ++ti) {
    std::map<std::pair<int, int>, std::deque<std::int64_t>> open;
    std::int64_t tick = 0;
    auto close = [&](std::int64_t on, std::int64_t off, int pitch) {
      if (off <= on) {
        out.warnings.push_back("track " + std::to_string(ti) + ": dropped zero-duration note " +
                               std::to_string(pitch) + " at tick " + std::to_string(on));
        return;
      }
      out.notes.push_back({at(on), at(off - on), pitch});
    };

    for (const midi::MidiEvent& ev : file.tracks[ti]) {
      tick += ev.delta_ticks;
      if (const auto* on = std::get_if<midi::NoteOn>(&ev.kind)) {
        open[{on->channel, on->pitch}].push_back(tick);
      } else if (const auto* off = std::get_if<midi::NoteOff>(&ev.kind)) {
        auto it = open.find({off->channel, off->pitch});
        if (it == open.end() || it->second.empty()) {
          out.warnings.push_back("track " + std::to_string(ti) + ": unmatched note_off " +
                                 std::to_string(off->pitch) + " at tick " + std::to_string(tick));
          continue;
        }
        const std::int64_t start = it->second.front();
        it->second.pop_front();
        close(start, tick, off->pitch);
      }
    }
    for (auto& [key, starts] : open) {
      for (std::int64_t start : starts) {
        out.warnings.push_back("track " + std::to_string(ti) + ": note " +
                               std::to_string(key.second) + " still sounding at end of track");
        close(start, tick, key.second);
      }
    }
  }

  std::stable_sort(out.notes.begin(), out.notes.end(), [](const NoteSpan& a, const NoteSpan& b) {
    return std::tie(a.onset, a.pitch, a.duration) < std::tie(b.onset, b.pitch, b.duration);
  });
  return out;
}

// Index of the alphabet entry nearest to `value`; the smaller entry wins an
// exact tie. `alphabet` must be sorted ascending.
inline int quantize(const Rational& value, std::span<const Rational> alphabet) {
  if (alphabet.empty()) throw std::invalid_argument("empty alphabet");
  auto it = std::lower_bound(alphabet.begin(), alphabet.end(), value);
  if (it == alphabet.begin()) return 0;
  if (it == alphabet.end()) return static_cast<int>(alphabet.size() - 1);
  const auto hi = static_cast<int>(it - alphabet.begin());
  const Rational up = *it - value;
  const Rational down = value - *(it - 1);
  return up < down ? hi : hi - 1;
}

struct NormalizeResult {
  Score score;
  Warnings warnings;
  // Mean |original - quantized| in quarter notes, over all notes.
  double mean_timing_distortion = 0.0;
  double mean_duration_distortion = 0.0;
};

inline NormalizeResult normalize_detailed(const midi::MidiFile& file, const Alphabets& alphabets,
                                          std::string name = {}) {
  NoteExtraction extraction = extract_notes(file);
  if (extraction.notes.empty()) throw EmptyScoreError("no notes found in '" + name + "'");

  NormalizeResult result;
  result.warnings = std::move(extraction.warnings);
  result.score.name = std::move(name);
  result.score.source_ppq = file.header.ppq;

  const auto timings = alphabets.timings();
  const auto durations = alphabets.durations();
  double timing_err = 0.0;
  double duration_err = 0.0;
  const auto& notes = extraction.notes;
  result.score.notes.reserve(notes.size());
  for (std::size_t i = 0; i < notes.size(); ++i) {
    NoteEvent ev;
    if (i > 0) {
      const Rational gap = notes[i].onset - notes[i - 1].onset;
      ev.dt = quantize(gap, timings);
      timing_err += abs(gap - timings[static_cast<std::size_t>(ev.dt)]).to_double();
    }
    ev.t = quantize(notes[i].duration, durations);
    duration_err += abs(notes[i].duration - durations[static_cast<std::size_t>(ev.t)]).to_double();

    int pitch = notes[i].pitch;
    if (pitch < alphabets.lowest_pitch() || pitch > alphabets.highest_pitch()) {
      const int clamped = std::clamp(pitch, alphabets.lowest_pitch(), alphabets.highest_pitch());
      result.warnings.push_back("pitch " + std::to_string(pitch) + " clamped to " +
                                std::to_string(clamped));
      pitch = clamped;
    }
    ev.p = pitch - alphabets.lowest_pitch();
    result.score.notes.push_back(ev);
  }
  const auto n = static_cast<double>(notes.size());
  result.mean_timing_distortion = timing_err / n;
  result.mean_duration_distortion = duration_err / n;
  return result;
}

inline Score normalize(const midi::MidiFile& file, const Alphabets& alphabets,
                       std::string name = {}) {
  return normalize_detailed(file, alphabets, std::move(name)).score;
}

// Onset of every note in quarter notes, accumulated from the dt symbols.
inline std::vector<Rational> onsets(const Score& score, const Alphabets& alphabets) {
  std::vector<Rational> out;
  out.reserve(score.notes.size());
  Rational pos(0);
  for (std::size_t i = 0; i < score.notes.size(); ++i) {
    if (i > 0) pos = pos + alphabets.timings()[static_cast<std::size_t>(score.notes[i].dt)];
    out.push_back(pos);
  }
  return out;
}

// Smallest ppq for which denormalize() reproduces every symbol exactly.
inline int min_round_trip_ppq(const Alphabets& alphabets) {
  Rational gap = alphabets.timings()[1];
  for (std::size_t i = 2; i < alphabets.timings().size(); ++i) {
    gap = std::min(gap, alphabets.timings()[i] - alphabets.timings()[i - 1]);
  }
  // One tick of rounding error must stay below half the smallest gap:
  // 1/ppq < gap/2  <=>  ppq > 2/gap.
  const Rational bound = Rational(2) * Rational(gap.den(), gap.num());
  return static_cast<int>(bound.num() / bound.den()) + 1;
}

// Renders a score as a single-track MIDI file. Same-pitch notes that sound at
// the same time are spread over distinct channels so that note-off pairing
// recovers every duration.
inline midi::MidiFile denormalize(const Score& score, const Alphabets& alphabets, int ppq = 192,
                                  double bpm = 120.0, int velocity = 80) {
  if (score.notes.empty()) throw EmptyScoreError("cannot render an empty score");
  if (ppq <= 0 || ppq > 0x7FFF) throw std::invalid_argument("ppq must be in 1..32767");
  if (ppq < min_round_trip_ppq(alphabets)) {
    throw std::invalid_argument("ppq " + std::to_string(ppq) +
                                " is too coarse for the duration alphabet (minimum " +
                                std::to_string(min_round_trip_ppq(alphabets)) + ")");
  }
  if (velocity < 1 || velocity > 127) throw std::invalid_argument("velocity must be in 1..127");
  if (!(bpm > 0.0)) throw std::invalid_argument("bpm must be positive");
  const double us = 60'000'000.0 / bpm;
  if (us < 1.0 || us > 16'777'215.0) throw std::invalid_argument("bpm out of MIDI tempo range");

  struct Timed {
    std::int64_t tick;
    int order;  // offs before ons at the same tick
    int channel;
    int pitch;
    bool on;
  };
  std::vector<Timed> timed;
  timed.reserve(score.notes.size() * 2);

  std::map<int, std::array<std::int64_t, 16>> busy_until;
  const auto starts = onsets(score, alphabets);
  for (std::size_t i = 0; i < score.notes.size(); ++i) {
    const NoteEvent& n = score.notes[i];
    const Rational end = starts[i] + alphabets.durations()[static_cast<std::size_t>(n.t)];
    const std::int64_t on = (starts[i] * Rational(ppq)).round();
    const std::int64_t off = (end * Rational(ppq)).round();
    const int pitch = alphabets.lowest_pitch() + n.p;

    auto [it, inserted] = busy_until.try_emplace(pitch);
    if (inserted) it->second.fill(-1);
    int channel = -1;
    for (int c = 0; c < 16; ++c) {
      if (it->second[static_cast<std::size_t>(c)] <= on) {
        channel = c;
        break;
      }
    }
    if (channel < 0) {
      throw std::invalid_argument("more than 16 overlapping notes of pitch " +
                                  std::to_string(pitch));
    }
    it->second[static_cast<std::size_t>(channel)] = off;
    timed.push_back({on, 1, channel, pitch, true});
    timed.push_back({off, 0, channel, pitch, false});
  }
  std::sort(timed.begin(), timed.end(), [](const Timed& a, const Timed& b) {
    return std::tie(a.tick, a.order, a.channel, a.pitch) <
           std::tie(b.tick, b.order, b.channel, b.pitch);
  });

  midi::MidiFile file;
  file.header = {midi::Format::single_track, 1, static_cast<std::uint16_t>(ppq)};
  midi::Track track;
  track.reserve(timed.size() + 2);
  track.push_back({0, midi::Tempo{static_cast<std::uint32_t>(us + 0.5)}});
  std::int64_t last = 0;
  for (const Timed& e : timed) {
    const std::int64_t delta = e.tick - last;
    if (delta > midi::kMaxVlq) throw std::out_of_range("delta time exceeds MIDI range");
    last = e.tick;
    const auto ch = static_cast<std::uint8_t>(e.channel);
    const auto pitch = static_cast<std::uint8_t>(e.pitch);
    if (e.on) {
      track.push_back({static_cast<std::uint32_t>(delta),
                       midi::NoteOn{ch, pitch, static_cast<std::uint8_t>(velocity)}});
    } else {
      track.push_back({static_cast<std::uint32_t>(delta), midi::NoteOff{ch, pitch, 0}});
    }
  }
  track.push_back(midi::end_of_track());
  file.tracks.push_back(std::move(track));
  return file;
}

// Reorders notes that share an onset by (pitch, duration), the order in which
// normalize() reports them, and rewrites dt accordingly.
inline Score canonicalize(const Score& score, const Alphabets& alphabets) {
  const auto starts = onsets(score, alphabets);
  std::vector<std::size_t> order(score.notes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& na = score.notes[a];
    const auto& nb = score.notes[b];
    return std::tie(starts[a], na.p, na.t) < std::tie(starts[b], nb.p, nb.t);
  });
  Score out = score;
  for (std::size_t i = 0; i < order.size(); ++i) {
    NoteEvent n = score.notes[order[i]];
    n.dt = i == 0 ? 0 : quantize(starts[order[i]] - starts[order[i - 1]], alphabets.timings());
    out.notes[i] = n;
  }
  return out;
}

struct ShiftRange {
  int min_shift = 0;
  int max_shift = 0;
  bool operator==(const ShiftRange&) const = default;
};

// Semitone shifts that keep every pitch of `score` inside the alphabet.
inline ShiftRange transposition_bounds(const Score& score) {
  if (score.notes.empty()) throw EmptyScoreError("transposition bounds of an empty score");
  const auto [lo, hi] = std::minmax_element(
      score.notes.begin(), score.notes.end(),
      [](const NoteEvent& a, const NoteEvent& b) { return a.p < b.p; });
  return {-lo->p, kPitchCount - 1 - hi->p};
}

inline Score transpose(const Score& score, int shift) {
  if (shift == 0) return score;
  const ShiftRange r = transposition_bounds(score);
  if (shift < r.min_shift || shift > r.max_shift) {
    throw std::out_of_range("transposition by " + std::to_string(shift) +
                            " leaves the pitch alphabet");
  }
  Score out = score;
  for (auto& n : out.notes) n.p += shift;
  return out;
}

}  // namespace bachprop
