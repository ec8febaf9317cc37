#pragma once

// Three-layer LSTM over note features with three softmax heads.
//
// Every note is presented in three substeps. The raw input is the
// concatenation of three one-hot (or all-zero) vectors for timing, duration
// and pitch; it is fed to every layer (skip connections) and to the heads
// together with the last layer's output. Dropout acts on each layer's output
// on its feed-forward paths only.
//
// All parameters live in one flat vector; ParamLayout maps named blocks onto
// it. Gradients and optimizer moments use the same layout.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bachprop/normalizer.hpp"

namespace bachprop {

using Vector = Eigen::VectorXd;
using ParamVector = Eigen::VectorXd;

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum Feature : int { kTiming = 0, kDuration = 1, kPitch = 2 };
inline constexpr int kFeatures = 3;
inline constexpr int kLayers = 3;
inline constexpr int kSubsteps = 3;

struct ModelConfig {
  std::array<int, kLayers> layer_sizes{64, 128, 256};
  double dropout_rate = 0.3;
  std::array<int, kFeatures> alphabet_sizes{kTimingCount, kDurationCount, kPitchCount};
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  // Train every head at every substep up to its readout substep, not only at
  // the readout itself.
  bool auxiliary_supervision = true;

  int input_size() const { return alphabet_sizes[0] + alphabet_sizes[1] + alphabet_sizes[2]; }

  void validate() const {
    for (int s : layer_sizes) {
      if (s <= 0) throw std::invalid_argument("layer sizes must be positive");
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
      throw std::invalid_argument("dropout rate must be in [0, 1)");
    }
    if (alphabet_sizes != std::array<int, kFeatures>{kTimingCount, kDurationCount, kPitchCount}) {
      throw std::invalid_argument("head sizes must match the alphabets (22, 21, 88)");
    }
    if (!(clip_norm > 0.0)) throw std::invalid_argument("clip norm must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

class ParamLayout {
 public:
  struct Block {
    Eigen::Index offset = 0;
    Eigen::Index rows = 0;
    Eigen::Index cols = 1;
    Eigen::Index size() const { return rows * cols; }
  };

  explicit ParamLayout(const ModelConfig& cfg) {
    const int in = cfg.input_size();
    Eigen::Index at = 0;
    auto take = [&at](Eigen::Index rows, Eigen::Index cols) {
      Block b{at, rows, cols};
      at += rows * cols;
      return b;
    };
    for (int l = 0; l < kLayers; ++l) {
      const int h = cfg.layer_sizes[l];
      const int feed = l == 0 ? in : cfg.layer_sizes[l - 1] + in;
      feed_size_[l] = feed;
      weights_[l] = take(4 * h, feed + h);
      bias_[l] = take(4 * h, 1);
    }
    for (int f = 0; f < kFeatures; ++f) {
      head_weights_[f] = take(cfg.alphabet_sizes[f], cfg.layer_sizes[2] + in);
      head_bias_[f] = take(cfg.alphabet_sizes[f], 1);
    }
    size_ = at;
  }

  Eigen::Index size() const { return size_; }
  // Width of the non-recurrent part of layer l's input.
  Eigen::Index feed_size(int l) const { return feed_size_[l]; }
  const Block& weights(int l) const { return weights_[l]; }
  const Block& bias(int l) const { return bias_[l]; }
  const Block& head_weights(int f) const { return head_weights_[f]; }
  const Block& head_bias(int f) const { return head_bias_[f]; }

  static Eigen::Map<Eigen::MatrixXd> matrix(ParamVector& v, const Block& b) {
    return {v.data() + b.offset, b.rows, b.cols};
  }
  static Eigen::Map<const Eigen::MatrixXd> matrix(const ParamVector& v, const Block& b) {
    return {v.data() + b.offset, b.rows, b.cols};
  }
  static Eigen::Map<Eigen::VectorXd> vector(ParamVector& v, const Block& b) {
    return {v.data() + b.offset, b.rows};
  }
  static Eigen::Map<const Eigen::VectorXd> vector(const ParamVector& v, const Block& b) {
    return {v.data() + b.offset, b.rows};
  }

 private:
  std::array<Block, kLayers> weights_;
  std::array<Block, kLayers> bias_;
  std::array<Block, kFeatures> head_weights_;
  std::array<Block, kFeatures> head_bias_;
  std::array<Eigen::Index, kLayers> feed_size_{};
  Eigen::Index size_ = 0;
};

class ModelParams {
 public:
  explicit ModelParams(ModelConfig cfg)
      : config_(validated(std::move(cfg))),
        layout_(config_),
        values_(Vector::Zero(layout_.size())) {}

  ModelParams(ModelConfig cfg, ParamVector values) : ModelParams(std::move(cfg)) {
    if (values.size() != values_.size()) {
      throw std::invalid_argument("parameter vector has " + std::to_string(values.size()) +
                                  " entries, layout needs " + std::to_string(values_.size()));
    }
    values_ = std::move(values);
  }

  const ModelConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }
  const ParamVector& values() const { return values_; }
  ParamVector& values() { return values_; }

  auto weights(int l) const { return ParamLayout::matrix(values_, layout_.weights(l)); }
  auto bias(int l) const { return ParamLayout::vector(values_, layout_.bias(l)); }
  auto head_weights(int f) const { return ParamLayout::matrix(values_, layout_.head_weights(f)); }
  auto head_bias(int f) const { return ParamLayout::vector(values_, layout_.head_bias(f)); }
  auto weights(int l) { return ParamLayout::matrix(values_, layout_.weights(l)); }
  auto bias(int l) { return ParamLayout::vector(values_, layout_.bias(l)); }
  auto head_weights(int f) { return ParamLayout::matrix(values_, layout_.head_weights(f)); }
  auto head_bias(int f) { return ParamLayout::vector(values_, layout_.head_bias(f)); }

  bool operator==(const ModelParams& o) const {
    return config_ == o.config_ && values_.size() == o.values_.size() && values_ == o.values_;
  }

 private:
  static ModelConfig validated(ModelConfig cfg) {
    cfg.validate();
    return cfg;
  }

  ModelConfig config_;
  ParamLayout layout_;
  ParamVector values_;
};

// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]; biases zero except the forget
// gate, which starts at 1.
inline ModelParams init_params(const ModelConfig& cfg) {
  ModelParams params(cfg);
  std::mt19937_64 rng(cfg.seed);
  auto fill = [&rng](auto&& m) {
    const double k = 1.0 / std::sqrt(static_cast<double>(m.cols()));
    std::uniform_real_distribution<double> dist(-k, k);
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = dist(rng);
    }
  };
  for (int l = 0; l < kLayers; ++l) {
    fill(params.weights(l));
    const int h = cfg.layer_sizes[l];
    params.bias(l).segment(h, h).setOnes();
  }
  for (int f = 0; f < kFeatures; ++f) fill(params.head_weights(f));
  return params;
}

struct ModelState {
  std::array<Vector, kLayers> h;
  std::array<Vector, kLayers> c;

  static ModelState zeros(const ModelConfig& cfg) {
    ModelState s;
    for (int l = 0; l < kLayers; ++l) {
      s.h[l] = Vector::Zero(cfg.layer_sizes[l]);
      s.c[l] = Vector::Zero(cfg.layer_sizes[l]);
    }
    return s;
  }

  bool operator==(const ModelState& o) const {
    for (int l = 0; l < kLayers; ++l) {
      if (h[l] != o.h[l] || c[l] != o.c[l]) return false;
    }
    return true;
  }
};

// Symbol index per feature, or -1 for an all-zero input vector.
struct SubstepInput {
  int dt = -1;
  int t = -1;
  int p = -1;

  // Substep i (0-based) of the transition from `note` to `next`.
  static SubstepInput for_substep(int i, const NoteEvent& note, const NoteEvent& next) {
    switch (i) {
      case 0: return {note.dt, note.t, note.p};
      case 1: return {next.dt, -1, -1};
      default: return {next.dt, next.t, -1};
    }
  }

  Vector encode(const ModelConfig& cfg) const {
    Vector x = Vector::Zero(cfg.input_size());
    const std::array<int, kFeatures> idx{dt, t, p};
    int offset = 0;
    for (int f = 0; f < kFeatures; ++f) {
      if (idx[f] >= cfg.alphabet_sizes[f]) throw std::out_of_range("input symbol out of range");
      if (idx[f] >= 0) x[offset + idx[f]] = 1.0;
      offset += cfg.alphabet_sizes[f];
    }
    return x;
  }
};

// Inverted-dropout multipliers for each layer output; empty means identity.
struct DropoutMask {
  std::array<Vector, kLayers> layer;

  bool active() const { return layer[0].size() > 0; }
};

template <typename Rng>
DropoutMask sample_dropout_mask(const ModelConfig& cfg, Rng& rng) {
  DropoutMask m;
  if (cfg.dropout_rate <= 0.0) return m;
  const double keep = 1.0 - cfg.dropout_rate;
  std::bernoulli_distribution draw(keep);
  for (int l = 0; l < kLayers; ++l) {
    m.layer[l].resize(cfg.layer_sizes[l]);
    for (Eigen::Index i = 0; i < m.layer[l].size(); ++i) m.layer[l][i] = draw(rng) ? 1.0 / keep : 0.0;
  }
  return m;
}

struct HeadValues {
  std::array<Vector, kFeatures> values;

  const Vector& operator[](int f) const { return values[static_cast<std::size_t>(f)]; }
  Vector& operator[](int f) { return values[static_cast<std::size_t>(f)]; }
};

inline Vector softmax(const Vector& logits) {
  const double m = logits.maxCoeff();
  Vector e = (logits.array() - m).exp();
  return e / e.sum();
}

namespace detail {

struct LayerCache {
  Vector v;  // [feed input; h_prev]
  Vector i, f, g, o;
  Vector c_prev, c, tanh_c, h;
};

struct SubstepCache {
  std::array<LayerCache, kLayers> layers;
  DropoutMask mask;
  Vector z;  // head input
  HeadValues probs;
};

inline Vector sigmoid(const Vector& x) { return (1.0 + (-x.array()).exp()).inverse().matrix(); }

inline Vector dropped(const Vector& h, const DropoutMask& mask, int l) {
  return mask.active() ? Vector(h.cwiseProduct(mask.layer[l])) : h;
}

inline HeadValues step(const ModelParams& params, ModelState& state, const Vector& x,
                       const DropoutMask& mask, SubstepCache* cache) {
  const ModelConfig& cfg = params.config();
  const Eigen::Index in = x.size();
  Vector below;
  for (int l = 0; l < kLayers; ++l) {
    const Eigen::Index h = cfg.layer_sizes[l];
    const Eigen::Index feed = params.layout().feed_size(l);
    Vector v(feed + h);
    if (l == 0) {
      v.head(in) = x;
    } else {
      v.head(feed - in) = dropped(below, mask, l - 1);
      v.segment(feed - in, in) = x;
    }
    v.tail(h) = state.h[l];
    const Vector pre = params.weights(l) * v + params.bias(l);
    Vector ig = sigmoid(pre.segment(0, h));
    Vector fg = sigmoid(pre.segment(h, h));
    Vector gg = pre.segment(2 * h, h).array().tanh().matrix();
    Vector og = sigmoid(pre.segment(3 * h, h));
    Vector c = fg.cwiseProduct(state.c[l]) + ig.cwiseProduct(gg);
    Vector tc = c.array().tanh().matrix();
    Vector hv = og.cwiseProduct(tc);
    if (!hv.allFinite() || !c.allFinite()) {
      throw NumericError("non-finite activation in layer " + std::to_string(l));
    }
    if (cache != nullptr) {
      LayerCache& lc = cache->layers[l];
      lc.v = std::move(v);
      lc.i = std::move(ig);
      lc.f = std::move(fg);
      lc.g = std::move(gg);
      lc.o = std::move(og);
      lc.c_prev = state.c[l];
      lc.c = c;
      lc.tanh_c = std::move(tc);
      lc.h = hv;
    }
    state.c[l] = std::move(c);
    state.h[l] = hv;
    below = std::move(hv);
  }
  const Eigen::Index top = cfg.layer_sizes[2];
  Vector z(top + in);
  z.head(top) = dropped(below, mask, 2);
  z.tail(in) = x;
  HeadValues logits;
  for (int f = 0; f < kFeatures; ++f) {
    logits[f] = params.head_weights(f) * z + params.head_bias(f);
    if (!logits[f].allFinite()) throw NumericError("non-finite logits");
  }
  if (cache != nullptr) {
    cache->mask = mask;
    cache->z = std::move(z);
    for (int f = 0; f < kFeatures; ++f) cache->probs[f] = softmax(logits[f]);
  }
  return logits;
}

}  // namespace detail

struct SubstepOutput {
  ModelState state;
  HeadValues logits;
};

// One network evaluation. Pass a sampled mask to train with dropout; the
// default (empty) mask is inference mode.
inline SubstepOutput forward_substep(const ModelParams& params, const ModelState& state,
                                     const SubstepInput& input, const DropoutMask& mask = {}) {
  SubstepOutput out{state, {}};
  out.logits = detail::step(params, out.state, input.encode(params.config()), mask, nullptr);
  return out;
}

inline HeadValues probabilities(const HeadValues& logits) {
  HeadValues p;
  for (int f = 0; f < kFeatures; ++f) p[f] = softmax(logits[f]);
  return p;
}

// Head distributions after each of the three substeps of one note.
using NoteReadout = std::array<HeadValues, kSubsteps>;

struct NoteStepOutput {
  ModelState state;
  NoteReadout readout;
};

// Presents `note` and the known features of `next`. The conditional
// distributions are readout[0][kTiming], readout[1][kDuration] and
// readout[2][kPitch].
inline NoteStepOutput note_step(const ModelParams& params, const ModelState& state,
                                const NoteEvent& note, const NoteEvent& next,
                                const std::array<DropoutMask, kSubsteps>& masks = {}) {
  NoteStepOutput out{state, {}};
  for (int i = 0; i < kSubsteps; ++i) {
    const Vector x = SubstepInput::for_substep(i, note, next).encode(params.config());
    out.readout[i] = probabilities(detail::step(params, out.state, x, masks[i], nullptr));
  }
  return out;
}

inline int target_of(const NoteEvent& n, int feature) {
  return feature == kTiming ? n.dt : feature == kDuration ? n.t : n.p;
}

// Whether head `feature` is trained at `substep`.
inline bool supervised(int substep, int feature, bool auxiliary) {
  return auxiliary ? substep <= feature : substep == feature;
}

inline int supervised_terms(bool auxiliary) { return auxiliary ? 6 : 3; }

inline constexpr double kMinProbability = 1e-12;

// Mean negative log-likelihood over all supervised (substep, head) pairs.
// readouts[n] holds the distributions that predict targets[n].
inline double nll_loss(std::span<const NoteReadout> readouts, std::span<const NoteEvent> targets,
                       bool auxiliary = true, Warnings* warnings = nullptr) {
  if (readouts.size() != targets.size()) {
    throw std::invalid_argument("readouts and targets differ in length");
  }
  double total = 0.0;
  std::size_t terms = 0;
  for (std::size_t n = 0; n < readouts.size(); ++n) {
    for (int s = 0; s < kSubsteps; ++s) {
      for (int f = 0; f < kFeatures; ++f) {
        if (!supervised(s, f, auxiliary)) continue;
        const Vector& p = readouts[n][s][f];
        const int target = target_of(targets[n], f);
        if (target < 0 || target >= p.size()) throw std::out_of_range("target out of range");
        double q = p[target];
        if (q < kMinProbability) {
          if (warnings != nullptr) warnings->push_back("probability clamped to 1e-12");
          q = kMinProbability;
        }
        total -= std::log(q);
        ++terms;
      }
    }
  }
  return terms == 0 ? 0.0 : total / static_cast<double>(terms);
}

// Forward activations over a window of consecutive note transitions, kept
// for backpropagation through time.
struct WindowCache {
  ModelState initial;
  ModelState final_state;
  std::vector<detail::SubstepCache> steps;
  std::vector<NoteEvent> targets;

  std::vector<NoteReadout> readouts() const {
    std::vector<NoteReadout> out(targets.size());
    for (std::size_t n = 0; n < targets.size(); ++n) {
      for (int s = 0; s < kSubsteps; ++s) out[n][s] = steps[n * kSubsteps + s].probs;
    }
    return out;
  }
};

// `notes` holds W+1 notes; transition n feeds notes[n] and predicts
// notes[n+1]. `masks` is empty (no dropout) or has one mask per substep.
inline WindowCache forward_window(const ModelParams& params, const ModelState& state,
                                  std::span<const NoteEvent> notes,
                                  std::span<const DropoutMask> masks = {}) {
  if (notes.size() < 2) throw std::invalid_argument("a window needs at least two notes");
  const std::size_t transitions = notes.size() - 1;
  if (!masks.empty() && masks.size() != transitions * kSubsteps) {
    throw std::invalid_argument("need one dropout mask per substep");
  }
  WindowCache cache;
  cache.initial = state;
  cache.steps.resize(transitions * kSubsteps);
  cache.targets.assign(notes.begin() + 1, notes.end());
  ModelState s = state;
  static const DropoutMask kNoDropout;
  for (std::size_t n = 0; n < transitions; ++n) {
    for (int i = 0; i < kSubsteps; ++i) {
      const std::size_t k = n * kSubsteps + static_cast<std::size_t>(i);
      const Vector x = SubstepInput::for_substep(i, notes[n], notes[n + 1]).encode(params.config());
      detail::step(params, s, x, masks.empty() ? kNoDropout : masks[k], &cache.steps[k]);
    }
  }
  cache.final_state = std::move(s);
  return cache;
}

struct BackwardResult {
  ParamVector gradient;
  double loss = 0.0;
};

// Exact gradient of nll_loss over the cached window. The window's initial
// state is treated as a constant (truncated BPTT).
inline BackwardResult backward(const ModelParams& params, const WindowCache& cache) {
  const ModelConfig& cfg = params.config();
  const ParamLayout& layout = params.layout();
  const bool aux = cfg.auxiliary_supervision;
  BackwardResult out;
  out.gradient = ParamVector::Zero(layout.size());
  ParamVector& g = out.gradient;

  const std::size_t transitions = cache.targets.size();
  const double scale =
      1.0 / static_cast<double>(transitions * static_cast<std::size_t>(supervised_terms(aux)));

  std::array<Vector, kLayers> dh_next;
  std::array<Vector, kLayers> dc_next;
  for (int l = 0; l < kLayers; ++l) {
    dh_next[l] = Vector::Zero(cfg.layer_sizes[l]);
    dc_next[l] = Vector::Zero(cfg.layer_sizes[l]);
  }
  const Eigen::Index top = cfg.layer_sizes[2];
  double loss = 0.0;

  for (std::size_t k = cache.steps.size(); k-- > 0;) {
    const detail::SubstepCache& sc = cache.steps[k];
    const int s = static_cast<int>(k % kSubsteps);
    const NoteEvent& target = cache.targets[k / kSubsteps];

    Vector dz = Vector::Zero(sc.z.size());
    for (int f = 0; f < kFeatures; ++f) {
      if (!supervised(s, f, aux)) continue;
      const int y = target_of(target, f);
      loss -= std::log(std::max(sc.probs[f][y], kMinProbability));
      Vector dlogits = sc.probs[f] * scale;
      dlogits[y] -= scale;
      ParamLayout::matrix(g, layout.head_weights(f)).noalias() += dlogits * sc.z.transpose();
      ParamLayout::vector(g, layout.head_bias(f)) += dlogits;
      dz.noalias() += params.head_weights(f).transpose() * dlogits;
    }

    Vector dh_above = dz.head(top);
    if (sc.mask.active()) dh_above = dh_above.cwiseProduct(sc.mask.layer[2]);

    for (int l = kLayers - 1; l >= 0; --l) {
      const detail::LayerCache& lc = sc.layers[l];
      const Eigen::Index h = cfg.layer_sizes[l];
      const Vector dh = dh_above + dh_next[l];
      const Vector d_o = dh.cwiseProduct(lc.tanh_c);
      const Vector dc = dh.cwiseProduct(lc.o).cwiseProduct(
                            (1.0 - lc.tanh_c.array().square()).matrix()) +
                        dc_next[l];
      Vector dpre(4 * h);
      dpre.segment(0, h) = dc.cwiseProduct(lc.g).cwiseProduct(
          lc.i.cwiseProduct((1.0 - lc.i.array()).matrix()));
      dpre.segment(h, h) = dc.cwiseProduct(lc.c_prev).cwiseProduct(
          lc.f.cwiseProduct((1.0 - lc.f.array()).matrix()));
      dpre.segment(2 * h, h) =
          dc.cwiseProduct(lc.i).cwiseProduct((1.0 - lc.g.array().square()).matrix());
      dpre.segment(3 * h, h) = d_o.cwiseProduct(lc.o.cwiseProduct((1.0 - lc.o.array()).matrix()));
      dc_next[l] = dc.cwiseProduct(lc.f);

      ParamLayout::matrix(g, layout.weights(l)).noalias() += dpre * lc.v.transpose();
      ParamLayout::vector(g, layout.bias(l)) += dpre;
      const Vector dv = params.weights(l).transpose() * dpre;
      dh_next[l] = dv.tail(h);
      if (l > 0) {
        const Eigen::Index below = cfg.layer_sizes[l - 1];
        dh_above = dv.head(below);
        if (sc.mask.active()) dh_above = dh_above.cwiseProduct(sc.mask.layer[l - 1]);
      }
    }
  }
  out.loss = loss * scale;
  return out;
}

// Scales `grads` in place so that their global L2 norm is at most max_norm.
// Returns the norm before clipping.
inline double clip_gradients(ParamVector& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("max_norm must be positive");
  const double norm = grads.norm();
  if (norm > max_norm) grads *= max_norm / norm;
  return norm;
}

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamMoments {
  ParamVector m;
  ParamVector v;

  static AdamMoments zeros(Eigen::Index n) { return {ParamVector::Zero(n), ParamVector::Zero(n)}; }
  bool operator==(const AdamMoments& o) const {
    return m.size() == o.m.size() && v.size() == o.v.size() && m == o.m && v == o.v;
  }
};

// One bias-corrected Adam update at step t >= 1.
inline void adam_step(ParamVector& params, const ParamVector& grads, AdamMoments& moments,
                      long t, const AdamOptions& opt = {}) {
  if (t < 1) throw std::invalid_argument("Adam step count starts at 1");
  if (grads.size() != params.size()) throw std::invalid_argument("gradient size mismatch");
  if (moments.m.size() != params.size()) moments = AdamMoments::zeros(params.size());
  moments.m = opt.beta1 * moments.m + (1.0 - opt.beta1) * grads;
  moments.v = opt.beta2 * moments.v + (1.0 - opt.beta2) * grads.cwiseAbs2();
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(t));
  params.array() -=
      opt.lr * (moments.m.array() / c1) / ((moments.v.array() / c2).sqrt() + opt.eps);
}

}  // namespace bachprop
