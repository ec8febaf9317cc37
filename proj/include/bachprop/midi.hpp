#pragma once

// Standard MIDI File (SMF) reader and writer.
//
// Supports format 0 and 1 files with a ticks-per-quarter-note time division.
// Note on/off and tempo messages are decoded; every other message is kept as
// raw bytes so that a parsed file serializes back to the same event list.
// Running status is accepted on read and never produced on write.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace bachprop::midi {

using Bytes = std::vector<std::uint8_t>;

inline constexpr std::uint32_t kMaxVlq = (1u << 28) - 1;

// Raised on malformed input. `offset` is the byte position where decoding
// failed.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " at byte " + std::to_string(offset)),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

struct VlqResult {
  std::uint32_t value;
  std::size_t next_offset;
};

inline VlqResult read_vlq(std::span<const std::uint8_t> bytes,
                          std::size_t offset) {
  std::uint32_t value = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    if (offset + i >= bytes.size()) {
      throw ParseError("truncated variable-length quantity", offset + i);
    }
    const std::uint8_t b = bytes[offset + i];
    value = (value << 7) | (b & 0x7Fu);
    if ((b & 0x80u) == 0) return {value, offset + i + 1};
  }
  throw ParseError("variable-length quantity longer than 4 bytes", offset);
}

inline Bytes write_vlq(std::uint32_t value) {
  if (value > kMaxVlq) {
    throw std::out_of_range("value " + std::to_string(value) +
                            " exceeds variable-length quantity range");
  }
  std::uint8_t buf[4];
  int n = 0;
  buf[n++] = static_cast<std::uint8_t>(value & 0x7Fu);
  while ((value >>= 7) != 0) {
    buf[n++] = static_cast<std::uint8_t>(0x80u | (value & 0x7Fu));
  }
  Bytes out;
  out.reserve(static_cast<std::size_t>(n));
  while (n > 0) out.push_back(buf[--n]);
  return out;
}

// One tick in milliseconds at the given tempo and resolution.
inline double tick_duration_ms(double bpm, int ppq) {
  if (!(bpm > 0.0)) throw std::invalid_argument("bpm must be positive");
  if (ppq <= 0) throw std::invalid_argument("ppq must be positive");
  return 60000.0 / (bpm * static_cast<double>(ppq));
}

inline double bpm_from_tempo(std::uint32_t microseconds_per_quarter) {
  return 60'000'000.0 / static_cast<double>(microseconds_per_quarter);
}

struct NoteOn {
  std::uint8_t channel = 0;
  std::uint8_t pitch = 0;
  std::uint8_t velocity = 0;
  bool operator==(const NoteOn&) const = default;
};

struct NoteOff {
  std::uint8_t channel = 0;
  std::uint8_t pitch = 0;
  std::uint8_t velocity = 0;
  bool operator==(const NoteOff&) const = default;
};

struct Tempo {
  std::uint32_t microseconds_per_quarter = 500'000;
  bool operator==(const Tempo&) const = default;
};

// Any message not decoded above, stored exactly as it appears in the track
// (status byte included, running status expanded).
struct Other {
  Bytes raw;
  bool operator==(const Other&) const = default;
};

using EventKind = std::variant<NoteOn, NoteOff, Tempo, Other>;

struct MidiEvent {
  std::uint32_t delta_ticks = 0;
  EventKind kind;
  bool operator==(const MidiEvent&) const = default;
};

inline MidiEvent end_of_track(std::uint32_t delta = 0) {
  return {delta, Other{{0xFF, 0x2F, 0x00}}};
}

inline bool is_end_of_track(const MidiEvent& e) {
  const auto* o = std::get_if<Other>(&e.kind);
  return o != nullptr && o->raw.size() >= 2 && o->raw[0] == 0xFF &&
         o->raw[1] == 0x2F;
}

enum class Format : std::uint16_t { single_track = 0, multi_track = 1 };

struct MidiHeader {
  Format format = Format::single_track;
  std::uint16_t track_count = 0;
  std::uint16_t ppq = 192;
  bool operator==(const MidiHeader&) const = default;
};

using Track = std::vector<MidiEvent>;

struct MidiFile {
  MidiHeader header;
  std::vector<Track> tracks;
  bool operator==(const MidiFile&) const = default;
};

namespace detail {

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void require(std::size_t n, const char* what) const {
    if (remaining() < n) throw ParseError(std::string("truncated ") + what, pos_);
  }

  std::uint8_t u8(const char* what = "data") {
    require(1, what);
    return bytes_[pos_++];
  }

  std::uint16_t u16() {
    require(2, "header");
    const auto v = static_cast<std::uint16_t>((bytes_[pos_] << 8) | bytes_[pos_ + 1]);
    pos_ += 2;
    return v;
  }

  std::uint32_t u32(const char* what) {
    require(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | bytes_[pos_ + i];
    pos_ += 4;
    return v;
  }

  std::uint32_t vlq() {
    const auto r = read_vlq(bytes_, pos_);
    pos_ = r.next_offset;
    return r.value;
  }

  bool tag(const char (&expected)[5]) {
    if (remaining() < 4) return false;
    for (int i = 0; i < 4; ++i) {
      if (bytes_[pos_ + i] != static_cast<std::uint8_t>(expected[i])) return false;
    }
    return true;
  }

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    require(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  void skip(std::size_t n, const char* what) { take(n, what); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::size_t channel_data_length(std::uint8_t status) {
  switch (status & 0xF0) {
    case 0xC0:
    case 0xD0:
      return 1;
    default:
      return 2;
  }
}

inline Track parse_track(Reader& in, std::size_t end) {
  Track track;
  std::uint8_t running = 0;
  while (in.pos() < end) {
    MidiEvent ev;
    ev.delta_ticks = in.vlq();
    if (in.pos() >= end) throw ParseError("event runs past end of track chunk", in.pos());

    const std::size_t status_pos = in.pos();
    std::uint8_t status = in.u8("event");
    bool has_first_data = false;
    std::uint8_t first_data = 0;
    if (status < 0x80) {
      if (running == 0) throw ParseError("data byte without running status", status_pos);
      first_data = status;
      has_first_data = true;
      status = running;
    }

    if (status == 0xFF) {
      const std::uint8_t type = in.u8("meta event");
      const std::uint32_t len = in.vlq();
      auto payload = in.take(len, "meta event payload");
      if (type == 0x51 && len == 3) {
        ev.kind = Tempo{(std::uint32_t{payload[0]} << 16) |
                        (std::uint32_t{payload[1]} << 8) | payload[2]};
      } else {
        Other o;
        o.raw.push_back(0xFF);
        o.raw.push_back(type);
        const auto lenbytes = write_vlq(len);
        o.raw.insert(o.raw.end(), lenbytes.begin(), lenbytes.end());
        o.raw.insert(o.raw.end(), payload.begin(), payload.end());
        ev.kind = std::move(o);
      }
    } else if (status == 0xF0 || status == 0xF7) {
      const std::uint32_t len = in.vlq();
      auto payload = in.take(len, "sysex payload");
      Other o;
      o.raw.push_back(status);
      const auto lenbytes = write_vlq(len);
      o.raw.insert(o.raw.end(), lenbytes.begin(), lenbytes.end());
      o.raw.insert(o.raw.end(), payload.begin(), payload.end());
      ev.kind = std::move(o);
    } else if (status >= 0xF0) {
      throw ParseError("unsupported system message in track", status_pos);
    } else {
      running = status;
      const std::size_t n = channel_data_length(status);
      std::uint8_t data[2] = {0, 0};
      for (std::size_t i = 0; i < n; ++i) {
        if (i == 0 && has_first_data) {
          data[0] = first_data;
          continue;
        }
        const std::size_t p = in.pos();
        data[i] = in.u8("channel message");
        if (data[i] >= 0x80) throw ParseError("data byte with high bit set", p);
      }
      const auto channel = static_cast<std::uint8_t>(status & 0x0F);
      switch (status & 0xF0) {
        case 0x80:
          ev.kind = NoteOff{channel, data[0], data[1]};
          break;
        case 0x90:
          if (data[1] == 0) {
            ev.kind = NoteOff{channel, data[0], 0};
          } else {
            ev.kind = NoteOn{channel, data[0], data[1]};
          }
          break;
        default: {
          Other o;
          o.raw.push_back(status);
          o.raw.insert(o.raw.end(), data, data + n);
          ev.kind = std::move(o);
        }
      }
    }
    if (in.pos() > end) throw ParseError("event runs past end of track chunk", status_pos);
    track.push_back(std::move(ev));
  }
  return track;
}

inline void put_u16(Bytes& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
}

inline void put_u32(Bytes& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) {
    out.push_back(static_cast<std::uint8_t>((v >> shift) & 0xFF));
  }
}

inline void check_7bit(std::uint8_t v, const char* what) {
  if (v > 0x7F) throw std::invalid_argument(std::string(what) + " exceeds 7-bit range");
}

inline void check_channel(std::uint8_t c) {
  if (c > 0x0F) throw std::invalid_argument("channel exceeds 4-bit range");
}

struct EventWriter {
  Bytes& out;

  void operator()(const NoteOn& e) const {
    check_channel(e.channel);
    check_7bit(e.pitch, "pitch");
    check_7bit(e.velocity, "velocity");
    out.insert(out.end(), {static_cast<std::uint8_t>(0x90 | e.channel), e.pitch, e.velocity});
  }
  void operator()(const NoteOff& e) const {
    check_channel(e.channel);
    check_7bit(e.pitch, "pitch");
    check_7bit(e.velocity, "velocity");
    out.insert(out.end(), {static_cast<std::uint8_t>(0x80 | e.channel), e.pitch, e.velocity});
  }
  void operator()(const Tempo& e) const {
    if (e.microseconds_per_quarter > 0xFFFFFF) {
      throw std::invalid_argument("tempo exceeds 24-bit range");
    }
    out.insert(out.end(), {0xFF, 0x51, 0x03,
                           static_cast<std::uint8_t>(e.microseconds_per_quarter >> 16),
                           static_cast<std::uint8_t>((e.microseconds_per_quarter >> 8) & 0xFF),
                           static_cast<std::uint8_t>(e.microseconds_per_quarter & 0xFF)});
  }
  void operator()(const Other& e) const {
    if (e.raw.empty() || e.raw[0] < 0x80) {
      throw std::invalid_argument("raw event must start with a status byte");
    }
    out.insert(out.end(), e.raw.begin(), e.raw.end());
  }
};

}  // namespace detail

inline MidiFile parse_midi(std::span<const std::uint8_t> bytes) {
  detail::Reader in(bytes);
  if (!in.tag("MThd")) throw ParseError("missing MThd header chunk", 0);
  in.skip(4, "header");
  const std::uint32_t header_len = in.u32("header length");
  if (header_len < 6) throw ParseError("header chunk shorter than 6 bytes", 4);
  const std::size_t header_start = in.pos();
  in.require(header_len, "header chunk");

  MidiFile file;
  const std::uint16_t format = in.u16();
  if (format > 1) {
    throw ParseError("unsupported SMF format " + std::to_string(format), header_start);
  }
  file.header.format = static_cast<Format>(format);
  file.header.track_count = in.u16();
  const std::size_t division_pos = in.pos();
  const std::uint16_t division = in.u16();
  if (division & 0x8000) throw ParseError("SMPTE time division not supported", division_pos);
  if (division == 0) throw ParseError("ppq must be positive", division_pos);
  file.header.ppq = division;
  in.skip(header_len - 6, "header chunk");

  while (file.tracks.size() < file.header.track_count) {
    in.require(8, "chunk header");
    const bool is_track = in.tag("MTrk");
    in.skip(4, "chunk header");
    const std::uint32_t len = in.u32("chunk length");
    in.require(len, "chunk");
    if (!is_track) {
      in.skip(len, "chunk");
      continue;
    }
    file.tracks.push_back(detail::parse_track(in, in.pos() + len));
  }
  return file;
}

inline Bytes serialize_midi(const MidiFile& file) {
  if (file.header.track_count != file.tracks.size()) {
    throw std::invalid_argument("track_count does not match number of tracks");
  }
  if (file.header.ppq == 0 || (file.header.ppq & 0x8000)) {
    throw std::invalid_argument("ppq must be in 1..32767");
  }
  Bytes out{'M', 'T', 'h', 'd'};
  detail::put_u32(out, 6);
  detail::put_u16(out, static_cast<std::uint16_t>(file.header.format));
  detail::put_u16(out, file.header.track_count);
  detail::put_u16(out, file.header.ppq);

  for (const Track& track : file.tracks) {
    Bytes body;
    for (const MidiEvent& ev : track) {
      const Bytes d = write_vlq(ev.delta_ticks);
      body.insert(body.end(), d.begin(), d.end());
      std::visit(detail::EventWriter{body}, ev.kind);
    }
    if (track.empty() || !is_end_of_track(track.back())) {
      body.insert(body.end(), {0x00, 0xFF, 0x2F, 0x00});
    }
    out.insert(out.end(), {'M', 'T', 'r', 'k'});
    detail::put_u32(out, static_cast<std::uint32_t>(body.size()));
    out.insert(out.end(), body.begin(), body.end());
  }
  return out;
}

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace bachprop::midi
