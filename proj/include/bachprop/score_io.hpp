#pragma once

// Line-oriented text form of a normalized Score.
//
//   bachprop-score 1 timing=<hex> duration=<hex> pitch=<hex> ppq=<n> name=<rest of line>
//   <dt> <t> <p>
//   ...
//
// The fingerprints identify the alphabets the indices refer to; reading with
// different alphabets is an error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "bachprop/normalizer.hpp"

namespace bachprop {

class ScoreFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace detail

inline constexpr const char* kScoreMagic = "bachprop-score";
inline constexpr const char* kScoreExtension = ".notes";

inline void write_score(std::ostream& os, const Score& score, const Alphabets& alphabets) {
  os << kScoreMagic << " 1"
     << " timing=" << detail::hex64(alphabets.timing_fingerprint())
     << " duration=" << detail::hex64(alphabets.duration_fingerprint())
     << " pitch=" << detail::hex64(alphabets.pitch_fingerprint()) << " ppq=" << score.source_ppq
     << " name=" << score.name << '\n';
  for (const NoteEvent& n : score.notes) os << n.dt << ' ' << n.t << ' ' << n.p << '\n';
}

inline std::string score_to_string(const Score& score, const Alphabets& alphabets) {
  std::ostringstream os;
  write_score(os, score, alphabets);
  return os.str();
}

inline Score read_score(std::istream& is, const Alphabets& alphabets) {
  std::string header;
  if (!std::getline(is, header)) throw ScoreFormatError("missing score header");
  std::istringstream hs(header);
  std::string magic;
  int version = 0;
  hs >> magic >> version;
  if (magic != kScoreMagic) throw ScoreFormatError("not a normalized score file");
  if (version != 1) throw ScoreFormatError("unsupported score version " + std::to_string(version));

  auto field = [&](const std::string& key) {
    std::string tok;
    if (!(hs >> tok) || tok.rfind(key + "=", 0) != 0) {
      throw ScoreFormatError("score header is missing '" + key + "='");
    }
    return tok.substr(key.size() + 1);
  };
  if (field("timing") != detail::hex64(alphabets.timing_fingerprint()) ||
      field("duration") != detail::hex64(alphabets.duration_fingerprint()) ||
      field("pitch") != detail::hex64(alphabets.pitch_fingerprint())) {
    throw ScoreFormatError("score was written with different alphabets");
  }
  Score score;
  try {
    score.source_ppq = std::stoi(field("ppq"));
  } catch (const std::logic_error&) {
    throw ScoreFormatError("bad ppq in score header");
  }
  const auto name_pos = header.find(" name=");
  if (name_pos == std::string::npos) throw ScoreFormatError("score header is missing 'name='");
  score.name = header.substr(name_pos + 6);

  std::string line;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    NoteEvent n;
    std::string extra;
    if (!(ls >> n.dt >> n.t >> n.p) || (ls >> extra)) {
      throw ScoreFormatError("malformed note on line " + std::to_string(line_no));
    }
    if (n.dt < 0 || n.dt >= kTimingCount || n.t < 0 || n.t >= kDurationCount || n.p < 0 ||
        n.p >= kPitchCount) {
      throw ScoreFormatError("symbol out of range on line " + std::to_string(line_no));
    }
    score.notes.push_back(n);
  }
  return score;
}

inline Score score_from_string(const std::string& text, const Alphabets& alphabets) {
  std::istringstream is(text);
  return read_score(is, alphabets);
}

inline void save_score(const std::filesystem::path& path, const Score& score,
                       const Alphabets& alphabets) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  write_score(os, score, alphabets);
}

inline Score load_score(const std::filesystem::path& path, const Alphabets& alphabets) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return read_score(is, alphabets);
}

}  // namespace bachprop
