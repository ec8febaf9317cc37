#pragma once

// Random generators shared by the unit and acceptance tests.

#include <filesystem>
#include <random>
#include <string>

#include "bachprop/midi.hpp"
#include "bachprop/normalizer.hpp"

namespace bachprop::testing {

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline midi::MidiEvent random_event(std::mt19937_64& rng) {
  const auto ch = static_cast<std::uint8_t>(uniform_int(rng, 0, 15));
  const auto b7 = [&] { return static_cast<std::uint8_t>(uniform_int(rng, 0, 127)); };
  std::uint32_t delta = 0;
  switch (uniform_int(rng, 0, 3)) {
    case 0: delta = 0; break;
    case 1: delta = static_cast<std::uint32_t>(uniform_int(rng, 0, 127)); break;
    case 2: delta = static_cast<std::uint32_t>(uniform_int(rng, 128, 20000)); break;
    default: delta = static_cast<std::uint32_t>(uniform_int(rng, 0, int(midi::kMaxVlq)));
  }
  midi::MidiEvent ev{delta, midi::Other{}};
  switch (uniform_int(rng, 0, 7)) {
    case 0:
    case 1:
    case 2:
      ev.kind = midi::NoteOn{ch, b7(), static_cast<std::uint8_t>(uniform_int(rng, 1, 127))};
      break;
    case 3:
    case 4:
      ev.kind = midi::NoteOff{ch, b7(), b7()};
      break;
    case 5:
      ev.kind = midi::Tempo{static_cast<std::uint32_t>(uniform_int(rng, 1, 0xFFFFFF))};
      break;
    case 6: {
      // Control change or program change.
      if (uniform_int(rng, 0, 1) == 0) {
        ev.kind = midi::Other{{static_cast<std::uint8_t>(0xB0 | ch), b7(), b7()}};
      } else {
        ev.kind = midi::Other{{static_cast<std::uint8_t>(0xC0 | ch), b7()}};
      }
      break;
    }
    default: {
      // Text meta event.
      const int len = uniform_int(rng, 0, 140);
      midi::Bytes raw{0xFF, 0x01};
      const auto l = midi::write_vlq(static_cast<std::uint32_t>(len));
      raw.insert(raw.end(), l.begin(), l.end());
      for (int i = 0; i < len; ++i) raw.push_back(static_cast<std::uint8_t>(uniform_int(rng, 0, 255)));
      ev.kind = midi::Other{raw};
    }
  }
  return ev;
}

inline midi::MidiFile random_midi_file(std::mt19937_64& rng) {
  midi::MidiFile f;
  const int tracks = uniform_int(rng, 0, 4);
  f.header.format = tracks <= 1 && uniform_int(rng, 0, 1) == 0 ? midi::Format::single_track
                                                              : midi::Format::multi_track;
  f.header.track_count = static_cast<std::uint16_t>(tracks);
  f.header.ppq = static_cast<std::uint16_t>(uniform_int(rng, 1, 0x7FFF));
  for (int t = 0; t < tracks; ++t) {
    midi::Track track;
    const int n = uniform_int(rng, 0, 60);
    for (int i = 0; i < n; ++i) track.push_back(random_event(rng));
    track.push_back(midi::end_of_track(static_cast<std::uint32_t>(uniform_int(rng, 0, 500))));
    f.tracks.push_back(std::move(track));
  }
  return f;
}

// A random score in canonical order (the form normalize() produces).
inline Score random_score(std::mt19937_64& rng, const Alphabets& alphabets, int min_notes = 1,
                          int max_notes = 120) {
  Score s;
  s.name = "random";
  const int n = uniform_int(rng, min_notes, max_notes);
  const int chord_bias = uniform_int(rng, 0, 3);
  for (int i = 0; i < n; ++i) {
    NoteEvent e;
    e.dt = i == 0 ? 0
                  : (uniform_int(rng, 0, 3) < chord_bias ? 0 : uniform_int(rng, 0, kTimingCount - 1));
    e.t = uniform_int(rng, 0, kDurationCount - 1);
    e.p = uniform_int(rng, 0, kPitchCount - 1);
    s.notes.push_back(e);
  }
  return canonicalize(s, alphabets);
}

inline std::filesystem::path fresh_temp_dir(const std::string& tag) {
  std::random_device rd;
  auto dir = std::filesystem::temp_directory_path() /
             ("bachprop_" + tag + "_" + std::to_string(rd()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace bachprop::testing
