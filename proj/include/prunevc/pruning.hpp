#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "prunevc/autograd.hpp"
#include "prunevc/ops.hpp"
#include "prunevc/tensor.hpp"
#include "prunevc/topology.hpp"

namespace prunevc {

// ---------------------------------------------------------------------------
// schedules

struct ScheduleSet {
  double L0 = -6.0;
  double L1 = 6.0;
  double tau = 20.0;
  double s_tar = 0.5;
  std::int64_t K = 1;
  enum class Mode { corrected_cubic, as_written } mode = Mode::corrected_cubic;
};

inline double sigmoid_d(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// decay factor for pruned-row gradients; 1 at the start, ~0 at the end
inline double beta_schedule(std::int64_t k, const ScheduleSet& s) {
  const double r = static_cast<double>(k) / static_cast<double>(s.K);
  return 1.0 - sigmoid_d(s.L0 + (s.L1 - s.L0) * r);
}

// cubic ramp reaching s_tar at 70% of training and holding it after
inline double target_sparsity(std::int64_t k, const ScheduleSet& s) {
  const double r = static_cast<double>(k) / static_cast<double>(s.K);
  if (r >= 0.7) return s.s_tar;
  const double u = 1.0 - r / 0.7;
  const double cu = u * u * u;
  if (s.mode == ScheduleSet::Mode::corrected_cubic)
    return s.s_tar * (1.0 - cu);
  return s.s_tar + (1.0 - s.s_tar) * cu;  // literal form: starts at 1
}

// ---------------------------------------------------------------------------
// importance scores and masks

// per-row L2 norms of a (rows, fan_in) weight; plain value, no graph
template <typename S>
TensorT<S> row_norms(const TensorT<S>& w) {
  if (w.ndim() != 2)
    throw ShapeError("row_norms: expected 2-d weight, got " +
                     shape_str(w.shape));
  const std::int64_t r = w.shape[0], c = w.shape[1];
  TensorT<S> out(Shape{r});
  auto m = w.mat_view(r, c);
  for (std::int64_t i = 0; i < r; ++i) out.data[i] = m.row(i).norm();
  return out;
}

// keep iff norm - threshold > 0 strictly; the tie goes to pruned
template <typename S>
std::vector<char> keep_mask(const TensorT<S>& norms, S threshold) {
  std::vector<char> keep(static_cast<std::size_t>(norms.numel()));
  for (std::int64_t i = 0; i < norms.numel(); ++i)
    keep[static_cast<std::size_t>(i)] = norms.data[i] - threshold > S(0);
  return keep;
}

// Mismatched forward/backward on dim-0 slices: kept slices pass through
// both ways; pruned slices are zeroed forward and their upstream gradient
// is scaled by beta backward. Works for (rows, fan) weights and {rows}
// biases alike.
template <typename S>
ValueT<S> masked_rows(ValueT<S> param, std::vector<char> keep, S beta) {
  const Shape& ps = param.shape();
  if (ps.empty() || static_cast<std::size_t>(ps[0]) != keep.size())
    throw ShapeError("masked_rows: mask length " +
                     std::to_string(keep.size()) + " does not match dim 0 of " +
                     shape_str(ps));
  const std::int64_t rows = ps[0];
  const std::int64_t rv = shape_numel(ps) / rows;  // elements per slice

  auto fwd = [keep, rows, rv](const std::vector<const TensorT<S>*>& in) {
    TensorT<S> out = *in[0];
    for (std::int64_t r = 0; r < rows; ++r)
      if (!keep[static_cast<std::size_t>(r)])
        out.data.segment(r * rv, rv).setZero();
    return out;
  };
  auto bwd = [keep, rows, rv, beta](const TensorT<S>& up,
                                    const std::vector<const TensorT<S>*>&) {
    TensorT<S> g = up;
    if (beta != S(1)) {
      for (std::int64_t r = 0; r < rows; ++r)
        if (!keep[static_cast<std::size_t>(r)])
          g.data.segment(r * rv, rv) *= beta;
    }
    return std::vector<TensorT<S>>{std::move(g)};
  };
  return custom_grad_op<S>(*param.tape, fwd, bwd, {param});
}

// ---------------------------------------------------------------------------
// sparsity measures

// Smooth global pruned-filter fraction: 1 - mean over all filters of
// sigmoid(tau * (N - T)). Differentiable in both norms and thresholds;
// pass detached norms to confine the gradient to thresholds.
template <typename S>
ValueT<S> soft_sparsity(const std::vector<ValueT<S>>& norms,
                        const std::vector<ValueT<S>>& thresholds, S tau) {
  if (norms.empty() || norms.size() != thresholds.size())
    throw ShapeError("soft_sparsity: " + std::to_string(norms.size()) +
                     " norm vectors vs " + std::to_string(thresholds.size()) +
                     " thresholds");
  std::int64_t total = 0;
  ValueT<S> acc;
  for (std::size_t l = 0; l < norms.size(); ++l) {
    total += norms[l].numel();
    ValueT<S> kept =
        sum(sigmoid(mul_const(sub(norms[l], thresholds[l]), tau)));
    acc = (l == 0) ? kept : add(acc, kept);
  }
  return add_const(mul_const(acc, S(-1) / static_cast<S>(total)), S(1));
}

// exact pruned fraction, uniform weight per filter across layers
template <typename S>
double hard_sparsity(const std::vector<TensorT<S>>& norms,
                     const std::vector<S>& thresholds) {
  std::int64_t total = 0, pruned = 0;
  for (std::size_t l = 0; l < norms.size(); ++l) {
    total += norms[l].numel();
    for (std::int64_t j = 0; j < norms[l].numel(); ++j)
      if (!(norms[l].data[j] - thresholds[l] > S(0))) ++pruned;
  }
  if (total == 0) throw ShapeError("hard_sparsity: no prunable filters");
  return static_cast<double>(pruned) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// compaction planning

struct CompactionPlan {
  std::vector<std::string> order;  // topology order
  std::map<std::string, std::vector<std::int64_t>> kept_out;
  std::map<std::string, std::vector<std::int64_t>> kept_in;
};

// Maps masks to kept-channel index lists and propagates removals to every
// consumer, remapping concatenation offsets. Masks are keyed by layer id
// and required for every prunable layer.
inline CompactionPlan compaction_plan(
    const Topology& topo,
    const std::map<std::string, std::vector<char>>& masks) {
  validate_topology(topo);
  CompactionPlan plan;
  for (const auto& l : topo) {
    std::vector<std::int64_t> out;
    if (l.prunable) {
      auto it = masks.find(l.id);
      if (it == masks.end())
        throw ConfigError("compaction: no mask for prunable layer '" + l.id +
                          "'");
      if (static_cast<std::int64_t>(it->second.size()) != l.out_ch)
        throw ShapeError("compaction: mask for '" + l.id + "' has " +
                         std::to_string(it->second.size()) + " entries for " +
                         std::to_string(l.out_ch) + " filters");
      for (std::int64_t j = 0; j < l.out_ch; ++j)
        if (it->second[static_cast<std::size_t>(j)]) out.push_back(j);
      if (out.empty())
        throw NumericFault("compaction: layer '" + l.id +
                           "' keeps zero filters; the network is degenerate");
    } else {
      for (std::int64_t j = 0; j < l.out_ch; ++j) out.push_back(j);
    }

    std::vector<std::int64_t> in;
    std::int64_t offset = 0;
    for (const auto& s : l.sources) {
      if (s.producer.empty()) {
        for (std::int64_t j = 0; j < s.channels; ++j)
          in.push_back(offset + j);
      } else {
        for (std::int64_t j : plan.kept_out.at(s.producer))
          in.push_back(offset + j);
      }
      offset += s.channels;
    }

    plan.order.push_back(l.id);
    plan.kept_out[l.id] = std::move(out);
    plan.kept_in[l.id] = std::move(in);
  }
  return plan;
}

}  // namespace prunevc
