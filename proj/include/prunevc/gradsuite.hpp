#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "prunevc/distill.hpp"
#include "prunevc/entropy.hpp"
#include "prunevc/gradcheck.hpp"
#include "prunevc/ops.hpp"
#include "prunevc/pruning.hpp"
#include "prunevc/rng.hpp"

namespace prunevc {

struct GradSuiteResult {
  std::string family;
  int configs = 0;
  double worst_rel_err = 0.0;
  bool ok = true;
};

namespace detail_gradsuite {

using DTensor = TensorT<double>;
using DValue = ValueT<double>;
using DTape = TapeT<double>;

inline DTensor rand_tensor(const Shape& s, double lo, double hi,
                           std::uint64_t seed, std::uint64_t counter) {
  RngStream rng(seed, rngstream::test, counter);
  DTensor t(s);
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t.data[i] = lo + (hi - lo) * rng.uniform_d();
  return t;
}

// values bounded away from zero so kinked ops stay locally smooth under
// the finite-difference step
inline DTensor rand_signed_away(const Shape& s, double margin, double hi,
                                std::uint64_t seed, std::uint64_t counter) {
  RngStream rng(seed, rngstream::test, counter);
  DTensor t(s);
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    const double m = margin + (hi - margin) * rng.uniform_d();
    t.data[i] = rng.uniform_d() < 0.5 ? -m : m;
  }
  return t;
}

using Builder = std::function<GradCheckReport<double>(std::uint64_t cfg_seed)>;

inline GradCheckReport<double> check(
    const std::function<DValue(DTape&, std::vector<DValue>&)>& f,
    const std::vector<std::pair<std::string, DTensor>>& params) {
  return finite_diff_check<double>(f, params, 1e-3, 1e-3);
}

}  // namespace detail_gradsuite

// Finite-difference verification of every differentiable loss term and
// smooth op family, `configs` random configurations each (h=1e-3,
// rel tol 1e-3, run in double).
inline std::vector<GradSuiteResult> run_grad_suite(int configs,
                                                   std::uint64_t seed) {
  using namespace detail_gradsuite;

  std::vector<std::pair<std::string, Builder>> families;

  families.emplace_back("rate", [](std::uint64_t s) {
    const std::int64_t c = 2 + (s % 3);
    DTensor y = rand_tensor({1, c, 3, 4}, -3.0, 3.0, s, 1);
    DTensor mu = rand_tensor({c}, -1.0, 1.0, s, 2);
    DTensor raw = rand_tensor({c}, -1.0, 1.5, s, 3);
    return check(
        [](DTape&, std::vector<DValue>& l) {
          return rate_estimate(l[0], l[1], l[2]);
        },
        {{"y", y}, {"mu", mu}, {"raw_scale", raw}});
  });

  families.emplace_back("distill", [](std::uint64_t s) {
    const Shape fs{2, 3, 4, 4};
    DTensor s0 = rand_tensor(fs, -1.0, 1.0, s, 1);
    DTensor s1 = rand_tensor(fs, -1.0, 1.0, s, 2);
    DTensor t0 = rand_tensor(fs, -1.0, 1.0, s, 3);
    DTensor t1 = rand_tensor(fs, -1.0, 1.0, s, 4);
    return check(
        [](DTape&, std::vector<DValue>& l) {
          std::map<std::string, DValue> st{{"a", l[0]}, {"b", l[1]}};
          std::map<std::string, DValue> te{{"a", l[2]}, {"b", l[3]}};
          return distill_loss(st, te, std::set<std::string>{"a", "b"});
        },
        {{"student.a", s0}, {"student.b", s1}, {"teacher.a", t0},
         {"teacher.b", t1}});
  });

  families.emplace_back("soft_sparsity_T", [](std::uint64_t s) {
    DTensor n0 = rand_tensor({8}, 0.1, 1.2, s, 1);
    DTensor n1 = rand_tensor({6}, 0.1, 1.2, s, 2);
    DTensor t0 = rand_tensor({1}, 0.0, 1.0, s, 3);
    DTensor t1 = rand_tensor({1}, 0.0, 1.0, s, 4);
    return check(
        [n0, n1](DTape& tape, std::vector<DValue>& l) {
          std::vector<DValue> norms{tape.constant(n0), tape.constant(n1)};
          std::vector<DValue> thr{l[0], l[1]};
          return soft_sparsity(norms, thr, 20.0);
        },
        {{"T0", t0}, {"T1", t1}});
  });

  families.emplace_back("conv", [](std::uint64_t s) {
    DTensor x = rand_tensor({2, 3, 5, 5}, -1.0, 1.0, s, 1);
    DTensor w = rand_tensor({4, 3 * 9}, -0.5, 0.5, s, 2);
    DTensor b = rand_tensor({4}, -0.2, 0.2, s, 3);
    return check(
        [](DTape&, std::vector<DValue>& l) {
          return mean(square(conv2d(l[0], l[1], l[2], 3, 1, 1)));
        },
        {{"x", x}, {"w", w}, {"b", b}});
  });

  families.emplace_back("tconv", [](std::uint64_t s) {
    DTensor x = rand_tensor({1, 3, 4, 4}, -1.0, 1.0, s, 1);
    DTensor w = rand_tensor({2, 3 * 16}, -0.5, 0.5, s, 2);
    DTensor b = rand_tensor({2}, -0.2, 0.2, s, 3);
    return check(
        [](DTape&, std::vector<DValue>& l) {
          return mean(square(tconv2d(l[0], l[1], l[2], 4, 2, 1)));
        },
        {{"x", x}, {"w", w}, {"b", b}});
  });

  families.emplace_back("pointwise", [](std::uint64_t s) {
    const Shape fs{2, 2, 3, 3};
    DTensor x = rand_tensor(fs, -2.0, 2.0, s, 1);
    DTensor y = rand_tensor(fs, -2.0, 2.0, s, 2);
    DTensor z = rand_tensor(fs, -1.5, 1.5, s, 3);
    return check(
        [](DTape&, std::vector<DValue>& l) {
          DValue a = mean(mul(sigmoid(l[0]), softplus(l[1])));
          DValue b = mean(log_op(add_const(square(l[2]), 0.5)));
          DValue c = mean(sqrt_op(add_const(square(l[0]), 0.1)));
          return add(a, add(b, c));
        },
        {{"x", x}, {"y", y}, {"z", z}});
  });

  families.emplace_back("matmul_rows", [](std::uint64_t s) {
    DTensor a = rand_tensor({3, 4}, 0.2, 1.0, s, 1);
    DTensor b = rand_tensor({4, 2}, -1.0, 1.0, s, 2);
    return check(
        [](DTape&, std::vector<DValue>& l) {
          DValue mm = mean(square(matmul(l[0], l[1])));
          DValue nr = mean(square(normalize_rows(l[0], 1e-12)));
          DValue rn = mean(row_norms_op(l[0]));
          return add(mm, add(nr, rn));
        },
        {{"a", a}, {"b", b}});
  });

  families.emplace_back("kinked_away", [](std::uint64_t s) {
    DTensor x = rand_signed_away({2, 3, 3, 3}, 0.1, 1.0, s, 1);
    return check(
        [](DTape&, std::vector<DValue>& l) {
          DValue a = mean(square(leaky_relu(l[0])));
          DValue b = mean(abs_op(l[0]));
          return add(a, b);
        },
        {{"x", x}});
  });

  families.emplace_back("structure", [](std::uint64_t s) {
    DTensor x = rand_tensor({2, 3, 3, 3}, -1.0, 1.0, s, 1);
    DTensor y = rand_tensor({2, 2, 3, 3}, -1.0, 1.0, s, 2);
    DTensor c = rand_tensor({3}, 0.5, 1.5, s, 3);
    return check(
        [](DTape&, std::vector<DValue>& l) {
          DValue cat = concat_channels(l[0], l[1]);
          DValue sl = slice_channels(cat, 1, 4);
          DValue bc = mul(l[0], l[2]);  // channel broadcast
          return add(mean(square(sl)),
                     mean(square(reshape(bc, Shape{2, 27}))));
        },
        {{"x", x}, {"y", y}, {"c", c}});
  });

  std::vector<GradSuiteResult> out;
  for (const auto& [name, build] : families) {
    GradSuiteResult r;
    r.family = name;
    r.configs = configs;
    for (int i = 0; i < configs; ++i) {
      const std::uint64_t cfg_seed =
          mix64(seed ^ (fnv1a(name) + static_cast<std::uint64_t>(i)));
      GradCheckReport<double> rep = build(cfg_seed);
      r.worst_rel_err = std::max(r.worst_rel_err,
                                 static_cast<double>(rep.worst));
      r.ok = r.ok && rep.all_ok;
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace prunevc
