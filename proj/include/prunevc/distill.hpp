#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "prunevc/autograd.hpp"
#include "prunevc/ops.hpp"
#include "prunevc/pruning.hpp"
#include "prunevc/tensor.hpp"

namespace prunevc {

// Staged feature matching: each stage distills one subset of layers for a
// fraction of the step budget; pruning stays global throughout.
struct StagePlan {
  struct Stage {
    std::string name;
    std::set<std::string> layers;
    double fraction = 0.0;
  };
  std::vector<Stage> stages;

  void validate(const std::set<std::string>& known_layers) const {
    if (stages.empty()) throw ConfigError("stage plan: no stages");
    double total = 0.0;
    for (const auto& st : stages) {
      if (st.fraction <= 0.0)
        throw ConfigError("stage plan: stage '" + st.name +
                          "' has non-positive budget");
      total += st.fraction;
      for (const auto& id : st.layers)
        if (!known_layers.count(id))
          throw ConfigError("stage plan: stage '" + st.name +
                            "' names unknown layer '" + id + "'");
    }
    if (std::abs(total - 1.0) > 1e-9)
      throw ConfigError("stage plan: budget fractions sum to " +
                        std::to_string(total) + ", expected 1");
    for (const auto& id : known_layers)
      if (!stages.back().layers.count(id))
        throw ConfigError("stage plan: final stage must cover all prunable "
                          "layers; missing '" + id + "'");
  }
};

// Stage whose cumulative budget interval contains k; boundaries belong to
// the later stage.
inline const StagePlan::Stage& active_stage(std::int64_t k, std::int64_t K,
                                            const StagePlan& plan) {
  const double r = static_cast<double>(k) / static_cast<double>(K);
  double cum = 0.0;
  for (const auto& st : plan.stages) {
    cum += st.fraction;
    if (r < cum) return st;
  }
  return plan.stages.back();
}

// distillation weight, decayed with the same sigmoid ramp as beta_schedule
inline double lambda3_schedule(std::int64_t k, std::int64_t K,
                               double lambda3_init, double L0, double L1) {
  const double r = static_cast<double>(k) / static_cast<double>(K);
  return lambda3_init * (1.0 - sigmoid_d(L0 + (L1 - L0) * r));
}

// Sum over the distilled set of mean-squared distances between unit-
// normalized per-sample feature maps, averaged over the batch. Teacher
// features must be gradient-free (constants or requires_grad=false chains).
template <typename S>
ValueT<S> distill_loss(const std::map<std::string, ValueT<S>>& student,
                       const std::map<std::string, ValueT<S>>& teacher,
                       const std::set<std::string>& P) {
  if (P.empty()) throw ConfigError("distill_loss: empty layer set");
  ValueT<S> acc;
  bool first = true;
  for (const auto& id : P) {
    auto si = student.find(id);
    auto ti = teacher.find(id);
    if (si == student.end())
      throw ConfigError("distill_loss: student has no feature '" + id + "'");
    if (ti == teacher.end())
      throw ConfigError("distill_loss: teacher has no feature '" + id + "'");
    ValueT<S> hs = si->second;
    ValueT<S> ht = ti->second;
    if (hs.shape() != ht.shape())
      throw ShapeError("distill_loss: feature '" + id + "' shapes differ: " +
                       shape_str(hs.shape()) + " vs " + shape_str(ht.shape()));
    const std::int64_t n = hs.shape()[0];
    const std::int64_t d = hs.numel() / n;
    ValueT<S> ns = normalize_rows(reshape(hs, {n, d}), S(1e-12));
    ValueT<S> nt = normalize_rows(reshape(ht, {n, d}), S(1e-12));
    ValueT<S> term =
        mul_const(sum(square(sub(ns, nt))), S(1) / static_cast<S>(n));
    acc = first ? term : add(acc, term);
    first = false;
  }
  return acc;
}

}  // namespace prunevc
