#pragma once

// Scalar long-double re-implementation of the network's loss, used as the
// finite-difference oracle for backward(). It reads the same flat parameter
// vector but shares no arithmetic with the library's Eigen path.

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "bachprop/model.hpp"

namespace bachprop::testing {

using Real = long double;
using RealVec = std::vector<Real>;

inline Real oracle_loss(const ModelConfig& cfg, const ParamLayout& layout,
                        std::span<const Real> theta, std::span<const NoteEvent> notes,
                        std::span<const DropoutMask> masks,
                        std::vector<char>* touched = nullptr) {
  const int in = cfg.input_size();
  const std::array<int, 3> sizes = cfg.layer_sizes;
  std::array<RealVec, 3> h, c;
  for (int l = 0; l < 3; ++l) {
    h[l].assign(static_cast<std::size_t>(sizes[l]), 0.0L);
    c[l].assign(static_cast<std::size_t>(sizes[l]), 0.0L);
  }
  auto read = [&](Eigen::Index i) {
    if (touched != nullptr) (*touched)[static_cast<std::size_t>(i)] = 1;
    return theta[static_cast<std::size_t>(i)];
  };
  auto W = [&](const ParamLayout::Block& b, int r, int col) {
    return read(b.offset + static_cast<Eigen::Index>(col) * b.rows + r);
  };
  auto B = [&](const ParamLayout::Block& b, int r) { return read(b.offset + r); };
  // Exact zeros contribute nothing; most of the input is one-hot padding.
  auto nonzero = [](const RealVec& v) {
    std::vector<int> idx;
    for (std::size_t k = 0; k < v.size(); ++k) {
      if (v[k] != 0.0L) idx.push_back(static_cast<int>(k));
    }
    return idx;
  };
  auto sig = [](Real x) { return 1.0L / (1.0L + std::exp(-x)); };

  Real total = 0.0L;
  int terms = 0;
  for (std::size_t n = 0; n + 1 < notes.size(); ++n) {
    const NoteEvent& next = notes[n + 1];
    for (int s = 0; s < 3; ++s) {
      const SubstepInput si = SubstepInput::for_substep(s, notes[n], next);
      RealVec x(static_cast<std::size_t>(in), 0.0L);
      if (si.dt >= 0) x[static_cast<std::size_t>(si.dt)] = 1.0L;
      if (si.t >= 0) x[static_cast<std::size_t>(22 + si.t)] = 1.0L;
      if (si.p >= 0) x[static_cast<std::size_t>(43 + si.p)] = 1.0L;
      const DropoutMask* mask =
          masks.empty() ? nullptr : &masks[n * 3 + static_cast<std::size_t>(s)];
      auto keep = [&](int l, int i) -> Real {
        return mask == nullptr || !mask->active() ? 1.0L
                                                  : static_cast<Real>(mask->layer[l][i]);
      };

      RealVec below;
      for (int l = 0; l < 3; ++l) {
        RealVec v;
        if (l > 0) {
          for (int i = 0; i < sizes[l - 1]; ++i) v.push_back(below[static_cast<std::size_t>(i)] * keep(l - 1, i));
        }
        v.insert(v.end(), x.begin(), x.end());
        v.insert(v.end(), h[l].begin(), h[l].end());
        const auto& wb = layout.weights(l);
        const auto& bb = layout.bias(l);
        const int H = sizes[l];
        const auto nz = nonzero(v);
        RealVec nh(static_cast<std::size_t>(H)), nc(static_cast<std::size_t>(H));
        for (int u = 0; u < H; ++u) {
          Real pre[4];
          for (int gate = 0; gate < 4; ++gate) {
            const int row = gate * H + u;
            Real acc = B(bb, row);
            for (int k : nz) acc += W(wb, row, k) * v[static_cast<std::size_t>(k)];
            pre[gate] = acc;
          }
          const Real ig = sig(pre[0]);
          const Real fg = sig(pre[1]);
          const Real gg = std::tanh(pre[2]);
          const Real og = sig(pre[3]);
          nc[static_cast<std::size_t>(u)] = fg * c[l][static_cast<std::size_t>(u)] + ig * gg;
          nh[static_cast<std::size_t>(u)] = og * std::tanh(nc[static_cast<std::size_t>(u)]);
        }
        h[l] = nh;
        c[l] = nc;
        below = nh;
      }

      RealVec z;
      for (int i = 0; i < sizes[2]; ++i) z.push_back(below[static_cast<std::size_t>(i)] * keep(2, i));
      z.insert(z.end(), x.begin(), x.end());
      for (int f = 0; f < 3; ++f) {
        if (!supervised(s, f, cfg.auxiliary_supervision)) continue;
        const auto& vb = layout.head_weights(f);
        const auto& ab = layout.head_bias(f);
        const auto nz = nonzero(z);
        RealVec logits(static_cast<std::size_t>(vb.rows));
        Real mx = -1e300L;
        for (int r = 0; r < vb.rows; ++r) {
          Real acc = B(ab, r);
          for (int k : nz) acc += W(vb, r, k) * z[static_cast<std::size_t>(k)];
          logits[static_cast<std::size_t>(r)] = acc;
          mx = std::max(mx, acc);
        }
        Real sum = 0.0L;
        for (Real l : logits) sum += std::exp(l - mx);
        const int y = target_of(next, f);
        total -= logits[static_cast<std::size_t>(y)] - mx - std::log(sum);
        ++terms;
      }
    }
  }
  return total / static_cast<Real>(terms);
}

struct GradientCheck {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::size_t evaluated = 0;
};

// Central differences of oracle_loss at `step`, compared with `analytic`.
// Relative error is |a-b| / max(|a|, |b|, floor). Parameters the oracle never
// reads (weights on inputs that stay zero) have a difference of exactly 0.
inline GradientCheck check_gradient(const ModelParams& params, const ParamVector& analytic,
                                    std::span<const NoteEvent> notes,
                                    std::span<const DropoutMask> masks, double step = 1e-5,
                                    double floor = 1e-6) {
  std::vector<Real> theta(static_cast<std::size_t>(params.values().size()));
  for (std::size_t i = 0; i < theta.size(); ++i) theta[i] = params.values()[static_cast<Eigen::Index>(i)];
  std::vector<char> touched(theta.size(), 0);
  (void)oracle_loss(params.config(), params.layout(), theta, notes, masks, &touched);
  GradientCheck out;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    if (!touched[i]) {
      const double a = std::abs(analytic[static_cast<Eigen::Index>(i)]);
      out.max_absolute_error = std::max(out.max_absolute_error, a);
      if (a != 0.0) out.max_relative_error = std::max(out.max_relative_error, 1.0);
      continue;
    }
    ++out.evaluated;
    const Real saved = theta[i];
    theta[i] = saved + step;
    const Real up = oracle_loss(params.config(), params.layout(), theta, notes, masks);
    theta[i] = saved - step;
    const Real down = oracle_loss(params.config(), params.layout(), theta, notes, masks);
    theta[i] = saved;
    const double fd = static_cast<double>((up - down) / (2.0L * step));
    const double a = analytic[static_cast<Eigen::Index>(i)];
    const double diff = std::abs(fd - a);
    out.max_absolute_error = std::max(out.max_absolute_error, diff);
    out.max_relative_error =
        std::max(out.max_relative_error, diff / std::max({std::abs(fd), std::abs(a), floor}));
  }
  return out;
}

}  // namespace bachprop::testing
