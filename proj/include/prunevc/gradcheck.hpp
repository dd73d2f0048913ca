#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "prunevc/autograd.hpp"
#include "prunevc/tensor.hpp"

namespace prunevc {

template <typename S>
struct GradCheckEntry {
  std::string name;
  S max_rel_err = S(0);
  bool ok = true;
};

template <typename S>
struct GradCheckReport {
  std::vector<GradCheckEntry<S>> entries;
  S worst = S(0);
  bool all_ok = true;
};

// Compares analytic gradients against central differences for a scalar
// function rebuilt from scratch at every evaluation point. `f` receives a
// fresh tape plus one leaf per parameter, in order, and returns the loss.
// Pass criterion per element: |a-n| <= tol*max(|a|,|n|) + abs_tol, with
// abs_tol defaulting to the h^2 truncation scale.
template <typename S>
GradCheckReport<S> finite_diff_check(
    const std::function<ValueT<S>(TapeT<S>&, std::vector<ValueT<S>>&)>& f,
    const std::vector<std::pair<std::string, TensorT<S>>>& params, S h, S tol,
    S abs_tol = S(-1)) {
  if (abs_tol < S(0)) abs_tol = S(10) * h * h;

  auto eval = [&](const std::vector<TensorT<S>>& vals) -> S {
    TapeT<S> tape;
    std::vector<ValueT<S>> leaves;
    leaves.reserve(vals.size());
    for (const auto& v : vals) leaves.push_back(tape.leaf(v, true));
    ValueT<S> loss = f(tape, leaves);
    return loss.val().scalar_value();
  };

  // analytic pass
  std::vector<TensorT<S>> base;
  base.reserve(params.size());
  for (const auto& [name, t] : params) base.push_back(t);

  std::vector<TensorT<S>> analytic;
  {
    TapeT<S> tape;
    std::vector<ValueT<S>> leaves;
    for (const auto& v : base) leaves.push_back(tape.leaf(v, true));
    ValueT<S> loss = f(tape, leaves);
    tape.backward(loss);
    for (auto& l : leaves)
      analytic.push_back(l.has_grad() ? l.grad()
                                      : TensorT<S>::zeros(l.val().shape));
  }

  GradCheckReport<S> report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    GradCheckEntry<S> entry;
    entry.name = params[pi].first;
    for (std::int64_t i = 0; i < base[pi].numel(); ++i) {
      std::vector<TensorT<S>> vals = base;
      vals[pi].data[i] += h;
      const S fp = eval(vals);
      vals[pi].data[i] -= S(2) * h;
      const S fm = eval(vals);
      const S numeric = (fp - fm) / (S(2) * h);
      const S a = analytic[pi].data[i];
      const S err = std::abs(a - numeric);
      const S denom = std::max(std::abs(a), std::abs(numeric)) + abs_tol;
      entry.max_rel_err = std::max(entry.max_rel_err, err / denom);
      if (err > tol * std::max(std::abs(a), std::abs(numeric)) + abs_tol)
        entry.ok = false;
    }
    report.worst = std::max(report.worst, entry.max_rel_err);
    report.all_ok = report.all_ok && entry.ok;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace prunevc
