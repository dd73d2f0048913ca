#pragma once

#include <cmath>
#include <cstdint>

#include "prunevc/autograd.hpp"
#include "prunevc/ops.hpp"
#include "prunevc/rng.hpp"
#include "prunevc/tensor.hpp"

namespace prunevc {

enum class CodingMode { train, eval };

// Training relaxation of rounding: additive uniform noise in [-0.5, 0.5),
// drawn from the (seed, stream, counter) key so the draw is identified by
// the step alone. Eval rounds half away from zero.
template <typename S>
ValueT<S> quantize(ValueT<S> y, CodingMode mode, std::uint64_t seed,
                   std::uint64_t counter) {
  if (mode == CodingMode::eval) return round_op(y);
  RngStream rng(seed, rngstream::quantizer, counter);
  TensorT<S> noise(y.shape());
  for (std::int64_t i = 0; i < noise.numel(); ++i)
    noise.data[i] = static_cast<S>(rng.uniform() - 0.5f);
  return add(y, y.tape->constant(std::move(noise)));
}

// Factorized per-channel logistic rate proxy:
//   bits = sum over symbols of -log2(CDF(y+1/2) - CDF(y-1/2)),
//   CDF(v) = sigmoid((v - mu_c) / scale_c),  scale_c = softplus(raw_scale_c),
// with the likelihood floored at 1e-9 so tail symbols stay finite.
// y is NCHW with C channels; mu and raw_scale are {C} parameter vectors.
template <typename S>
ValueT<S> rate_estimate(ValueT<S> y, ValueT<S> mu, ValueT<S> raw_scale) {
  if (y.shape().size() != 4)
    throw ShapeError("rate_estimate: symbols must be NCHW, got " +
                     shape_str(y.shape()));
  if (mu.shape() != Shape{y.shape()[1]} ||
      raw_scale.shape() != Shape{y.shape()[1]})
    throw ShapeError("rate_estimate: channel parameters must be {" +
                     std::to_string(y.shape()[1]) + "}, got " +
                     shape_str(mu.shape()) + " and " +
                     shape_str(raw_scale.shape()));
  ValueT<S> scale = softplus(raw_scale);
  ValueT<S> centered = sub(y, mu);
  ValueT<S> upper = sigmoid(div(add_const(centered, S(0.5)), scale));
  ValueT<S> lower = sigmoid(div(add_const(centered, S(-0.5)), scale));
  ValueT<S> p = clamp_min(sub(upper, lower), S(1e-9));
  const S inv_ln2 = S(1) / static_cast<S>(std::log(2.0));
  return mul_const(sum(log_op(p)), -inv_ln2);
}

}  // namespace prunevc
