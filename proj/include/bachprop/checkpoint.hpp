#pragma once

// Checkpoint container:
//
//   "BPCK"  u32 version  u64 header_bytes  header (JSON, UTF-8)
//   float64 arrays, little-endian, in the order listed in header["arrays"]
//   u64 FNV-1a of every preceding byte
//
// All integers are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "bachprop/trainer.hpp"

namespace bachprop {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class CorruptCheckpointError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline std::uint64_t fnv1a_bytes(const std::uint8_t* p, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline nlohmann::json report_json(const AccuracyReport& r) {
  return {{"acc_dt", r.acc_dt}, {"acc_t", r.acc_t}, {"acc_p", r.acc_p},
          {"nll", r.nll},       {"notes", r.notes}};
}

inline AccuracyReport report_from(const nlohmann::json& j) {
  return {j.at("acc_dt").get<double>(), j.at("acc_t").get<double>(), j.at("acc_p").get<double>(),
          j.at("nll").get<double>(), j.at("notes").get<std::size_t>()};
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& cp) {
  using nlohmann::json;
  const ModelConfig& mc = cp.params.config();
  json h;
  h["model"] = {{"layer_sizes", mc.layer_sizes},
                {"dropout_rate", mc.dropout_rate},
                {"alphabet_sizes", mc.alphabet_sizes},
                {"clip_norm", mc.clip_norm},
                {"seed", mc.seed},
                {"auxiliary_supervision", mc.auxiliary_supervision}};
  const TrainConfig& tc = cp.train;
  h["train"] = {{"epochs", tc.epochs},
                {"batch_songs", tc.batch_songs},
                {"window_notes", tc.window_notes},
                {"valid_fraction", tc.valid_fraction},
                {"lr", tc.lr},
                {"clip_norm", tc.clip_norm},
                {"seed", tc.seed},
                {"augmentation", tc.augmentation}};
  json durations = json::array();
  for (const Rational& d : cp.alphabets.durations()) durations.push_back(d.str());
  h["alphabets"] = {{"durations", durations}, {"lowest_pitch", cp.alphabets.lowest_pitch()}};
  h["metrics"] = detail::report_json(cp.metrics);
  h["epoch"] = cp.epoch;
  json first = json::array();
  for (const auto& [note, count] : cp.first_notes.entries) {
    first.push_back({note.dt, note.t, note.p, count});
  }
  h["first_notes"] = first;

  std::vector<const ParamVector*> arrays{&cp.params.values()};
  json names = json::array({json{{"name", "params"}, {"length", cp.params.values().size()}}});
  if (cp.state) {
    const TrainingState& s = *cp.state;
    h["state"] = {{"adam_step", s.optimizer.step},
                  {"rng", s.rng_state},
                  {"best_epoch", s.best_epoch},
                  {"best_metrics", detail::report_json(s.best_metrics)}};
    for (const auto& [name, vec] : {std::pair{"adam_m", &s.optimizer.moments.m},
                                    std::pair{"adam_v", &s.optimizer.moments.v},
                                    std::pair{"best_params", &s.best_params}}) {
      names.push_back({{"name", name}, {"length", vec->size()}});
      arrays.push_back(vec);
    }
  }
  h["arrays"] = names;

  const std::string header = h.dump();
  std::vector<std::uint8_t> out{'B', 'P', 'C', 'K'};
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, header.size());
  out.insert(out.end(), header.begin(), header.end());
  for (const ParamVector* a : arrays) {
    for (Eigen::Index i = 0; i < a->size(); ++i) {
      detail::put_u64(out, std::bit_cast<std::uint64_t>((*a)[i]));
    }
  }
  detail::put_u64(out, detail::fnv1a_bytes(out.data(), out.size()));
  return out;
}

inline Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  using nlohmann::json;
  if (bytes.size() < 24 || std::memcmp(bytes.data(), "BPCK", 4) != 0) {
    throw CorruptCheckpointError("not a checkpoint file");
  }
  const std::uint32_t version = detail::get_u32(bytes.data() + 4);
  if (version != kCheckpointVersion) {
    throw CheckpointVersionError("checkpoint version " + std::to_string(version) +
                                 " is not supported (expected " +
                                 std::to_string(kCheckpointVersion) + ")");
  }
  const std::size_t body = bytes.size() - 8;
  if (detail::get_u64(bytes.data() + body) != detail::fnv1a_bytes(bytes.data(), body)) {
    throw CorruptCheckpointError("checkpoint checksum mismatch");
  }
  const std::uint64_t header_len = detail::get_u64(bytes.data() + 8);
  if (header_len > body - 16) throw CorruptCheckpointError("header length out of range");

  try {
    const json h = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<long>(header_len));
    std::size_t pos = 16 + header_len;
    auto read_array = [&](std::int64_t length) {
      if (length < 0 || static_cast<std::uint64_t>(length) > (body - pos) / 8) {
        throw CorruptCheckpointError("array extends past the end of the file");
      }
      ParamVector v(length);
      for (std::int64_t i = 0; i < length; ++i, pos += 8) {
        v[i] = std::bit_cast<double>(detail::get_u64(bytes.data() + pos));
      }
      return v;
    };
    std::map<std::string, ParamVector> arrays;
    for (const json& a : h.at("arrays")) {
      arrays[a.at("name").get<std::string>()] = read_array(a.at("length").get<std::int64_t>());
    }
    if (pos != body) throw CorruptCheckpointError("trailing bytes after the arrays");

    const json& m = h.at("model");
    ModelConfig mc;
    mc.layer_sizes = m.at("layer_sizes").get<std::array<int, kLayers>>();
    mc.dropout_rate = m.at("dropout_rate").get<double>();
    mc.alphabet_sizes = m.at("alphabet_sizes").get<std::array<int, kFeatures>>();
    mc.clip_norm = m.at("clip_norm").get<double>();
    mc.seed = m.at("seed").get<std::uint64_t>();
    mc.auxiliary_supervision = m.at("auxiliary_supervision").get<bool>();

    Checkpoint cp;
    cp.params = ModelParams(mc, arrays.at("params"));
    const json& t = h.at("train");
    cp.train.epochs = t.at("epochs").get<int>();
    cp.train.batch_songs = t.at("batch_songs").get<int>();
    cp.train.window_notes = t.at("window_notes").get<int>();
    cp.train.valid_fraction = t.at("valid_fraction").get<double>();
    cp.train.lr = t.at("lr").get<double>();
    cp.train.clip_norm = t.at("clip_norm").get<double>();
    cp.train.seed = t.at("seed").get<std::uint64_t>();
    cp.train.augmentation = t.at("augmentation").get<bool>();

    std::vector<Rational> durations;
    for (const json& d : h.at("alphabets").at("durations")) {
      durations.push_back(Rational::parse(d.get<std::string>()));
    }
    cp.alphabets = Alphabets(durations, h.at("alphabets").at("lowest_pitch").get<int>());
    cp.metrics = detail::report_from(h.at("metrics"));
    cp.epoch = h.at("epoch").get<int>();
    for (const json& e : h.at("first_notes")) {
      const NoteEvent n{e.at(0).get<int>(), e.at(1).get<int>(), e.at(2).get<int>()};
      if (n.dt < 0 || n.dt >= kTimingCount || n.t < 0 || n.t >= kDurationCount || n.p < 0 ||
          n.p >= kPitchCount) {
        throw CorruptCheckpointError("first-note table entry out of range");
      }
      cp.first_notes.entries.emplace_back(n, e.at(3).get<std::int64_t>());
    }
    if (h.contains("state")) {
      const json& s = h.at("state");
      TrainingState st;
      st.optimizer.step = s.at("adam_step").get<long>();
      st.optimizer.moments = {arrays.at("adam_m"), arrays.at("adam_v")};
      st.rng_state = s.at("rng").get<std::string>();
      st.best_epoch = s.at("best_epoch").get<int>();
      st.best_metrics = detail::report_from(s.at("best_metrics"));
      st.best_params = arrays.at("best_params");
      cp.state = std::move(st);
    }
    return cp;
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CorruptCheckpointError(std::string("malformed checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const Checkpoint& cp, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(cp);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("failed writing " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                        std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace bachprop
