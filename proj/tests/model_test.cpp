#include "bachprop/model.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "lstm_oracle.hpp"
#include "support.hpp"

namespace bachprop {
namespace {

ModelConfig tiny(std::uint64_t seed = 1) {
  ModelConfig c;
  c.layer_sizes = {4, 4, 4};
  c.seed = seed;
  return c;
}

std::vector<NoteEvent> random_notes(std::mt19937_64& rng, int n) {
  std::vector<NoteEvent> out;
  for (int i = 0; i < n; ++i) {
    out.push_back({testing::uniform_int(rng, 0, kTimingCount - 1),
                   testing::uniform_int(rng, 0, kDurationCount - 1),
                   testing::uniform_int(rng, 0, kPitchCount - 1)});
  }
  return out;
}

// Loss computed through note_step and nll_loss only, independent of the
// cached window path.
double reference_loss(const ModelParams& p, std::span<const NoteEvent> notes,
                      std::span<const DropoutMask> masks) {
  ModelState s = ModelState::zeros(p.config());
  std::vector<NoteReadout> readouts;
  for (std::size_t n = 0; n + 1 < notes.size(); ++n) {
    std::array<DropoutMask, kSubsteps> m{};
    if (!masks.empty()) {
      for (int i = 0; i < kSubsteps; ++i) m[i] = masks[n * kSubsteps + i];
    }
    auto out = note_step(p, s, notes[n], notes[n + 1], m);
    s = out.state;
    readouts.push_back(out.readout);
  }
  return nll_loss(readouts, notes.subspan(1), p.config().auxiliary_supervision);
}

TEST(Init, DeterministicAndShaped) {
  const ModelParams a = init_params(ModelConfig{});
  const ModelParams b = init_params(ModelConfig{});
  EXPECT_EQ(a, b);
  ModelConfig other;
  other.seed = 2;
  EXPECT_NE(a.values(), init_params(other).values());

  const ModelConfig& c = a.config();
  const int in = 22 + 21 + 88;
  EXPECT_EQ(a.weights(0).rows(), 4 * 64);
  EXPECT_EQ(a.weights(0).cols(), in + 64);
  EXPECT_EQ(a.weights(1).rows(), 4 * 128);
  EXPECT_EQ(a.weights(1).cols(), 64 + in + 128);
  EXPECT_EQ(a.weights(2).rows(), 4 * 256);
  EXPECT_EQ(a.weights(2).cols(), 128 + in + 256);
  EXPECT_EQ(a.head_weights(kTiming).rows(), 22);
  EXPECT_EQ(a.head_weights(kDuration).rows(), 21);
  EXPECT_EQ(a.head_weights(kPitch).rows(), 88);
  EXPECT_EQ(a.head_weights(kPitch).cols(), 256 + in);
  for (int l = 0; l < kLayers; ++l) {
    const int h = c.layer_sizes[l];
    EXPECT_TRUE(a.bias(l).segment(h, h).isOnes());
    EXPECT_TRUE(a.bias(l).head(h).isZero());
    EXPECT_TRUE(a.bias(l).tail(2 * h).isZero());
    const double k = 1.0 / std::sqrt(static_cast<double>(a.weights(l).cols()));
    EXPECT_LE(a.weights(l).cwiseAbs().maxCoeff(), k);
  }
}

TEST(Init, RejectsBadConfig) {
  ModelConfig c;
  c.dropout_rate = 1.0;
  EXPECT_THROW(init_params(c), std::invalid_argument);
  c = ModelConfig{};
  c.layer_sizes[1] = 0;
  EXPECT_THROW(init_params(c), std::invalid_argument);
  c = ModelConfig{};
  c.alphabet_sizes[2] = 87;
  EXPECT_THROW(init_params(c), std::invalid_argument);
}

TEST(Forward, ZeroStateZeroInputGivesHeadBiases) {
  ModelParams p = init_params(tiny());
  std::mt19937_64 rng(4);
  for (int f = 0; f < kFeatures; ++f) {
    for (Eigen::Index i = 0; i < p.head_bias(f).size(); ++i) {
      p.head_bias(f)[i] = std::uniform_real_distribution<double>(-1, 1)(rng);
    }
  }
  const auto out = forward_substep(p, ModelState::zeros(p.config()), SubstepInput{});
  for (int f = 0; f < kFeatures; ++f) {
    EXPECT_TRUE(out.logits[f].isApprox(p.head_bias(f), 1e-15));
  }
}

TEST(Forward, SoftmaxIsDistribution) {
  const ModelParams p = init_params(ModelConfig{});
  std::mt19937_64 rng(1);
  const auto notes = random_notes(rng, 20);
  ModelState s = ModelState::zeros(p.config());
  for (std::size_t n = 0; n + 1 < notes.size(); ++n) {
    auto out = note_step(p, s, notes[n], notes[n + 1]);
    s = out.state;
    for (const auto& heads : out.readout) {
      for (int f = 0; f < kFeatures; ++f) {
        EXPECT_NEAR(heads[f].sum(), 1.0, 1e-9);
        EXPECT_GE(heads[f].minCoeff(), 0.0);
      }
    }
  }
}

TEST(Forward, InferenceIgnoresDropout) {
  ModelConfig c = tiny();
  c.dropout_rate = 0.5;
  const ModelParams p = init_params(c);
  const SubstepInput in{3, 4, 50};
  const ModelState s = ModelState::zeros(c);
  const auto a = forward_substep(p, s, in);
  const auto b = forward_substep(p, s, in);
  for (int f = 0; f < kFeatures; ++f) EXPECT_EQ(a.logits[f], b.logits[f]);

  std::mt19937_64 rng(3);
  DropoutMask ones = sample_dropout_mask(c, rng);
  for (auto& v : ones.layer) v.setOnes();
  const auto d = forward_substep(p, s, in, ones);
  for (int f = 0; f < kFeatures; ++f) EXPECT_EQ(a.logits[f], d.logits[f]);

  // A real mask changes the output.
  bool changed = false;
  for (int trial = 0; trial < 10 && !changed; ++trial) {
    const auto e = forward_substep(p, s, in, sample_dropout_mask(c, rng));
    changed = e.logits[kPitch] != a.logits[kPitch];
  }
  EXPECT_TRUE(changed);
}

TEST(Forward, ZeroRateDropoutIsIdentity) {
  ModelConfig c = tiny();
  c.dropout_rate = 0.0;
  std::mt19937_64 rng(3);
  EXPECT_FALSE(sample_dropout_mask(c, rng).active());

  c.dropout_rate = 0.3;
  const DropoutMask m = sample_dropout_mask(c, rng);
  for (const auto& v : m.layer) {
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      EXPECT_TRUE(v[i] == 0.0 || v[i] == 1.0 / 0.7);
    }
  }
}

TEST(Forward, ZeroParamsGiveUniformHeads) {
  const ModelParams p(tiny());
  const auto out = note_step(p, ModelState::zeros(p.config()), {1, 2, 3}, {4, 5, 6});
  for (const auto& heads : out.readout) {
    for (int f = 0; f < kFeatures; ++f) {
      const double u = 1.0 / static_cast<double>(heads[f].size());
      EXPECT_LE((heads[f].array() - u).abs().maxCoeff(), 1e-15);
    }
  }
}

TEST(Forward, RejectsOutOfRangeInput) {
  const ModelParams p(tiny());
  EXPECT_THROW(forward_substep(p, ModelState::zeros(p.config()), SubstepInput{22, -1, -1}),
               std::out_of_range);
}

TEST(Forward, NonFiniteParametersRaise) {
  ModelParams p = init_params(tiny());
  p.weights(0)(0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(forward_substep(p, ModelState::zeros(p.config()), SubstepInput{0, 0, 0}),
               NumericError);
}

TEST(NoteStep, ConditionsOnUpcomingTiming) {
  const ModelParams p = init_params(tiny(9));
  const ModelState s = ModelState::zeros(p.config());
  const NoteEvent note{2, 9, 40};
  const auto a = note_step(p, s, note, {3, 9, 41});
  const auto b = note_step(p, s, note, {7, 9, 41});
  // Substep 1 sees only the current note.
  EXPECT_EQ(a.readout[0][kTiming], b.readout[0][kTiming]);
  EXPECT_GT((a.readout[1][kDuration] - b.readout[1][kDuration]).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_FALSE(a.state == s);
  // The pitch of the next note is never an input.
  const auto c = note_step(p, s, note, {3, 9, 80});
  EXPECT_EQ(a.readout[2][kPitch], c.readout[2][kPitch]);
  EXPECT_TRUE(a.state == c.state);
}

TEST(Loss, Examples) {
  NoteReadout certain;
  const NoteEvent target{1, 2, 3};
  for (int s = 0; s < kSubsteps; ++s) {
    certain[s][kTiming] = Vector::Zero(22);
    certain[s][kDuration] = Vector::Zero(21);
    certain[s][kPitch] = Vector::Zero(88);
    certain[s][kTiming][1] = 1.0;
    certain[s][kDuration][2] = 1.0;
    certain[s][kPitch][3] = 1.0;
  }
  const std::vector<NoteReadout> one{certain};
  const std::vector<NoteEvent> targets{target};
  EXPECT_EQ(nll_loss(one, targets), 0.0);

  NoteReadout uniform;
  for (int s = 0; s < kSubsteps; ++s) {
    uniform[s][kTiming] = Vector::Constant(22, 1.0 / 22);
    uniform[s][kDuration] = Vector::Constant(21, 1.0 / 21);
    uniform[s][kPitch] = Vector::Constant(88, 1.0 / 88);
  }
  const std::vector<NoteReadout> u{uniform};
  EXPECT_NEAR(std::log(88.0), 4.4773, 1e-4);
  // dt once, t twice, p three times.
  const double aux = (std::log(22.0) + 2 * std::log(21.0) + 3 * std::log(88.0)) / 6;
  EXPECT_NEAR(nll_loss(u, targets, true), aux, 1e-12);
  const double final_only = (std::log(22.0) + std::log(21.0) + std::log(88.0)) / 3;
  EXPECT_NEAR(nll_loss(u, targets, false), final_only, 1e-12);

  Warnings w;
  NoteReadout zero = certain;
  zero[2][kPitch].setZero();
  const std::vector<NoteReadout> z{zero};
  EXPECT_NEAR(nll_loss(z, targets, false, &w), -std::log(1e-12) / 3, 1e-9);
  EXPECT_EQ(w.size(), 1u);
}

TEST(Loss, NonNegative) {
  const ModelParams p = init_params(tiny(5));
  std::mt19937_64 rng(2);
  for (int i = 0; i < 20; ++i) {
    const auto notes = random_notes(rng, 6);
    EXPECT_GE(reference_loss(p, notes, {}), 0.0);
  }
}

TEST(Backward, LossMatchesReference) {
  const ModelParams p = init_params(tiny(3));
  std::mt19937_64 rng(8);
  const auto notes = random_notes(rng, 7);
  const auto cache = forward_window(p, ModelState::zeros(p.config()), notes);
  const auto r = backward(p, cache);
  EXPECT_NEAR(r.loss, reference_loss(p, notes, {}), 1e-12);
  EXPECT_NEAR(nll_loss(cache.readouts(), cache.targets), r.loss, 1e-12);
}

// Central differences of the long-double oracle against the analytic
// gradient, with dropout masks held fixed.
void check_gradient(const ModelConfig& cfg, std::uint64_t seed, int notes_count) {
  const ModelParams p = init_params(cfg);
  std::mt19937_64 rng(seed);
  const auto notes = random_notes(rng, notes_count + 1);
  std::vector<DropoutMask> masks;
  for (int k = 0; k < notes_count * kSubsteps; ++k) masks.push_back(sample_dropout_mask(cfg, rng));

  const auto cache = forward_window(p, ModelState::zeros(cfg), notes, masks);
  const ParamVector g = backward(p, cache).gradient;
  const auto r = testing::check_gradient(p, g, notes, masks);
  EXPECT_LT(r.max_relative_error, 1e-4) << "seed " << seed << " abs " << r.max_absolute_error;
}

TEST(Backward, OracleMatchesLibraryLoss) {
  ModelConfig c = tiny(6);
  const ModelParams p = init_params(c);
  std::mt19937_64 rng(4);
  const auto notes = random_notes(rng, 5);
  std::vector<DropoutMask> masks;
  for (int k = 0; k < 4 * kSubsteps; ++k) masks.push_back(sample_dropout_mask(c, rng));
  std::vector<long double> theta(p.values().data(), p.values().data() + p.values().size());
  const double oracle =
      static_cast<double>(testing::oracle_loss(c, p.layout(), theta, notes, masks));
  EXPECT_NEAR(oracle, reference_loss(p, notes, masks), 1e-12);
}

TEST(Backward, FiniteDifferences) {
  ModelConfig c = tiny(11);
  check_gradient(c, 1, 4);
  c.auxiliary_supervision = false;
  c.dropout_rate = 0.0;
  c.seed = 12;
  check_gradient(c, 2, 3);
}

TEST(Backward, UnusedInputColumnsHaveZeroGradient) {
  const ModelParams p = init_params(tiny(2));
  std::vector<NoteEvent> notes{{0, 3, 10}, {0, 3, 10}, {5, 3, 10}};
  const auto g = backward(p, forward_window(p, ModelState::zeros(p.config()), notes)).gradient;
  const auto w0 = ParamLayout::matrix(g, p.layout().weights(0));
  // Pitch 60 is never presented, so its input column in layer 0 is unused.
  EXPECT_TRUE(w0.col(22 + 21 + 60).isZero(0.0));
  EXPECT_FALSE(w0.col(22 + 21 + 10).isZero(0.0));
}

TEST(Backward, DeterministicWithFixedMasks) {
  ModelConfig c = tiny(4);
  const ModelParams p = init_params(c);
  std::mt19937_64 rng(1);
  const auto notes = random_notes(rng, 5);
  std::vector<DropoutMask> masks;
  for (int k = 0; k < 4 * kSubsteps; ++k) masks.push_back(sample_dropout_mask(c, rng));
  const auto a = backward(p, forward_window(p, ModelState::zeros(c), notes, masks));
  const auto b = backward(p, forward_window(p, ModelState::zeros(c), notes, masks));
  EXPECT_EQ(a.gradient, b.gradient);
  EXPECT_EQ(a.loss, b.loss);
}

TEST(Window, ChainedWindowsMatchSinglePass) {
  const ModelParams p = init_params(ModelConfig{});
  std::mt19937_64 rng(6);
  const auto notes = random_notes(rng, 41);
  const std::span<const NoteEvent> all(notes);
  const auto whole = forward_window(p, ModelState::zeros(p.config()), all);
  const auto first = forward_window(p, ModelState::zeros(p.config()), all.subspan(0, 21));
  const auto second = forward_window(p, first.final_state, all.subspan(20));
  ASSERT_EQ(whole.steps.size(), first.steps.size() + second.steps.size());
  double worst = 0.0;
  for (std::size_t k = 0; k < whole.steps.size(); ++k) {
    const auto& other = k < first.steps.size() ? first.steps[k] : second.steps[k - first.steps.size()];
    for (int l = 0; l < kLayers; ++l) {
      worst = std::max(worst, (whole.steps[k].layers[l].h - other.layers[l].h).cwiseAbs().maxCoeff());
      worst = std::max(worst, (whole.steps[k].layers[l].c - other.layers[l].c).cwiseAbs().maxCoeff());
    }
  }
  EXPECT_LE(worst, 1e-12);
}

TEST(Clip, Behaviour) {
  ParamVector g(3);
  g << 0.3, 0.4, 0.0;
  ParamVector c = g;
  EXPECT_NEAR(clip_gradients(c, 1.0), 0.5, 1e-15);
  EXPECT_EQ(c, g);

  ParamVector big(4);
  big << 6.0, 8.0, 0.0, 0.0;  // norm 10
  ParamVector clipped = big;
  clip_gradients(clipped, 1.0);
  EXPECT_NEAR(clipped.norm(), 1.0, 1e-9);
  EXPECT_TRUE(clipped.isApprox(big * 0.1, 1e-15));
  EXPECT_NEAR(clipped.dot(big) / (clipped.norm() * big.norm()), 1.0, 1e-9);
  EXPECT_THROW(clip_gradients(clipped, 0.0), std::invalid_argument);
}

TEST(Adam, ZeroGradientKeepsParams) {
  ParamVector p = ParamVector::LinSpaced(5, -1, 1);
  const ParamVector before = p;
  AdamMoments m = AdamMoments::zeros(5);
  adam_step(p, ParamVector::Zero(5), m, 1);
  EXPECT_EQ(p, before);
  EXPECT_THROW(adam_step(p, ParamVector::Zero(5), m, 0), std::invalid_argument);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParamVector p = ParamVector::Zero(4);
  ParamVector g(4);
  g << 0.5, -2.0, 1e-3, 7.0;
  AdamMoments m = AdamMoments::zeros(4);
  const AdamOptions opt;
  adam_step(p, g, m, 1, opt);
  // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
  for (Eigen::Index i = 0; i < 4; ++i) {
    const double expected = -opt.lr * g[i] / (std::abs(g[i]) + opt.eps);
    EXPECT_NEAR(p[i], expected, 1e-15);
    EXPECT_NEAR(std::abs(p[i]), opt.lr, 1e-5 * opt.lr + 1e-8);
  }
}

TEST(Adam, Deterministic) {
  ParamVector g = ParamVector::LinSpaced(6, -3, 2);
  ParamVector p1 = ParamVector::Ones(6), p2 = p1;
  AdamMoments m1 = AdamMoments::zeros(6), m2 = m1;
  for (long t = 1; t <= 3; ++t) {
    adam_step(p1, g, m1, t);
    adam_step(p2, g, m2, t);
  }
  EXPECT_EQ(p1, p2);
  EXPECT_EQ(m1, m2);
}

}  // namespace
}  // namespace bachprop
