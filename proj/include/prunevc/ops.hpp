#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "prunevc/autograd.hpp"
#include "prunevc/tensor.hpp"

namespace prunevc {

namespace detail {

template <typename S>
void accum_if(NodeT<S>* p, const TensorT<S>& g) {
  if (p->requires_grad) p->accumulate(g);
}

// Broadcast rules are trailing-dimension only: scalar against anything,
// and a per-channel vector (shape {C} or {1,C,1,1}) against NCHW.
enum class Bc { same, b_scalar, a_scalar, b_channel, a_channel };

inline bool is_channel_vec(const Shape& v, const Shape& full) {
  if (full.size() != 4) return false;
  const std::int64_t c = full[1];
  if (v.size() == 1 && v[0] == c) return true;
  if (v.size() == 4 && v[0] == 1 && v[1] == c && v[2] == 1 && v[3] == 1)
    return true;
  return false;
}

inline Bc classify(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return Bc::same;
  if (shape_numel(b) == 1) return Bc::b_scalar;
  if (shape_numel(a) == 1) return Bc::a_scalar;
  if (is_channel_vec(b, a)) return Bc::b_channel;
  if (is_channel_vec(a, b)) return Bc::a_channel;
  throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                   shape_str(b) + " are not broadcast-compatible");
}

template <typename S>
TensorT<S> broadcast_to(const TensorT<S>& t, const Shape& target) {
  if (t.shape == target) return t;
  TensorT<S> out(target);
  if (t.numel() == 1) {
    out.data.setConstant(t.data[0]);
    return out;
  }
  // per-channel vector over NCHW
  const std::int64_t n = target[0], c = target[1], hw = target[2] * target[3];
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < c; ++j)
      out.data.segment((i * c + j) * hw, hw).setConstant(t.data[j]);
  return out;
}

// Adjoint of broadcast_to: sum g over the expanded dimensions.
template <typename S>
TensorT<S> reduce_to(const TensorT<S>& g, const Shape& target) {
  if (g.shape == target) return g;
  TensorT<S> out(target);
  if (shape_numel(target) == 1) {
    out.data[0] = g.data.sum();
    return out;
  }
  const std::int64_t n = g.shape[0], c = g.shape[1],
                     hw = g.shape[2] * g.shape[3];
  for (std::int64_t j = 0; j < c; ++j) {
    S acc = S(0);
    for (std::int64_t i = 0; i < n; ++i)
      acc += g.data.segment((i * c + j) * hw, hw).sum();
    out.data[j] = acc;
  }
  return out;
}

// patches(ci*k*k, N*Ho*Wo); column order (n, oh, ow), row order (c, kh, kw)
template <typename S>
typename TensorT<S>::MatrixRM im2col(const TensorT<S>& x, int k, int stride,
                                     int pad) {
  const std::int64_t n = x.shape[0], c = x.shape[1], h = x.shape[2],
                     w = x.shape[3];
  const std::int64_t ho = (h + 2 * pad - k) / stride + 1;
  const std::int64_t wo = (w + 2 * pad - k) / stride + 1;
  typename TensorT<S>::MatrixRM cols(c * k * k, n * ho * wo);
  cols.setZero();
  for (std::int64_t ni = 0; ni < n; ++ni)
    for (std::int64_t oh = 0; oh < ho; ++oh)
      for (std::int64_t ow = 0; ow < wo; ++ow) {
        const std::int64_t col = (ni * ho + oh) * wo + ow;
        for (std::int64_t ci = 0; ci < c; ++ci)
          for (int kh = 0; kh < k; ++kh) {
            const std::int64_t ih = oh * stride - pad + kh;
            if (ih < 0 || ih >= h) continue;
            for (int kw = 0; kw < k; ++kw) {
              const std::int64_t iw = ow * stride - pad + kw;
              if (iw < 0 || iw >= w) continue;
              cols((ci * k + kh) * k + kw, col) = x.at4(ni, ci, ih, iw);
            }
          }
      }
  return cols;
}

// scatter-add adjoint of im2col
template <typename S>
TensorT<S> col2im(const typename TensorT<S>::MatrixRM& cols, const Shape& xs,
                  int k, int stride, int pad) {
  const std::int64_t n = xs[0], c = xs[1], h = xs[2], w = xs[3];
  const std::int64_t ho = (h + 2 * pad - k) / stride + 1;
  const std::int64_t wo = (w + 2 * pad - k) / stride + 1;
  TensorT<S> x(xs);
  for (std::int64_t ni = 0; ni < n; ++ni)
    for (std::int64_t oh = 0; oh < ho; ++oh)
      for (std::int64_t ow = 0; ow < wo; ++ow) {
        const std::int64_t col = (ni * ho + oh) * wo + ow;
        for (std::int64_t ci = 0; ci < c; ++ci)
          for (int kh = 0; kh < k; ++kh) {
            const std::int64_t ih = oh * stride - pad + kh;
            if (ih < 0 || ih >= h) continue;
            for (int kw = 0; kw < k; ++kw) {
              const std::int64_t iw = ow * stride - pad + kw;
              if (iw < 0 || iw >= w) continue;
              x.at4(ni, ci, ih, iw) += cols((ci * k + kh) * k + kw, col);
            }
          }
      }
  return x;
}

// (N,C,H,W) <-> (C, N*H*W) channel-major gather/scatter
template <typename S>
typename TensorT<S>::MatrixRM to_cmat(const TensorT<S>& x) {
  const std::int64_t n = x.shape[0], c = x.shape[1], hw = x.shape[2] * x.shape[3];
  typename TensorT<S>::MatrixRM m(c, n * hw);
  for (std::int64_t ni = 0; ni < n; ++ni)
    for (std::int64_t ci = 0; ci < c; ++ci)
      m.row(ci).segment(ni * hw, hw) =
          x.data.segment((ni * c + ci) * hw, hw).transpose();
  return m;
}

template <typename S>
TensorT<S> from_cmat(const typename TensorT<S>::MatrixRM& m, const Shape& s) {
  const std::int64_t n = s[0], c = s[1], hw = s[2] * s[3];
  TensorT<S> x(s);
  for (std::int64_t ni = 0; ni < n; ++ni)
    for (std::int64_t ci = 0; ci < c; ++ci)
      x.data.segment((ni * c + ci) * hw, hw) =
          m.row(ci).segment(ni * hw, hw).transpose();
  return x;
}

// tconv weight (Co, Ci*k*k) rearranged to (Co*k*k, Ci) for the scatter GEMM
template <typename S>
typename TensorT<S>::MatrixRM tconv_pmat(const TensorT<S>& w, std::int64_t co,
                                         std::int64_t ci, int k) {
  typename TensorT<S>::MatrixRM m(co * k * k, ci);
  for (std::int64_t o = 0; o < co; ++o)
    for (std::int64_t i = 0; i < ci; ++i)
      for (int kh = 0; kh < k; ++kh)
        for (int kw = 0; kw < k; ++kw)
          m((o * k + kh) * k + kw, i) = w.data[o * ci * k * k + (i * k + kh) * k + kw];
  return m;
}

template <typename S>
TensorT<S> tconv_unpmat(const typename TensorT<S>::MatrixRM& m, std::int64_t co,
                        std::int64_t ci, int k) {
  TensorT<S> w(Shape{co, ci * k * k});
  for (std::int64_t o = 0; o < co; ++o)
    for (std::int64_t i = 0; i < ci; ++i)
      for (int kh = 0; kh < k; ++kh)
        for (int kw = 0; kw < k; ++kw)
          w.data[o * ci * k * k + (i * k + kh) * k + kw] = m((o * k + kh) * k + kw, i);
  return w;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binaries with trailing-dimension broadcasting

template <typename S>
ValueT<S> add(ValueT<S> a, ValueT<S> b) {
  using detail::Bc;
  const Bc bc = detail::classify("add", a.shape(), b.shape());
  const Shape& out_shape = (bc == Bc::a_scalar || bc == Bc::a_channel)
                               ? b.shape()
                               : a.shape();
  TensorT<S> av = detail::broadcast_to(a.val(), out_shape);
  TensorT<S> bv = detail::broadcast_to(b.val(), out_shape);
  TensorT<S> out(out_shape, av.data + bv.data);
  return a.tape->make("add", std::move(out), {a.node, b.node},
                      [](NodeT<S>& n) {
                        detail::accum_if(n.parents[0], detail::reduce_to(
                                             n.grad, n.parents[0]->value.shape));
                        detail::accum_if(n.parents[1], detail::reduce_to(
                                             n.grad, n.parents[1]->value.shape));
                      });
}

template <typename S>
ValueT<S> sub(ValueT<S> a, ValueT<S> b) {
  using detail::Bc;
  const Bc bc = detail::classify("sub", a.shape(), b.shape());
  const Shape& out_shape = (bc == Bc::a_scalar || bc == Bc::a_channel)
                               ? b.shape()
                               : a.shape();
  TensorT<S> av = detail::broadcast_to(a.val(), out_shape);
  TensorT<S> bv = detail::broadcast_to(b.val(), out_shape);
  TensorT<S> out(out_shape, av.data - bv.data);
  return a.tape->make("sub", std::move(out), {a.node, b.node},
                      [](NodeT<S>& n) {
                        detail::accum_if(n.parents[0], detail::reduce_to(
                                             n.grad, n.parents[0]->value.shape));
                        TensorT<S> gneg(n.grad.shape, -n.grad.data);
                        detail::accum_if(n.parents[1], detail::reduce_to(
                                             gneg, n.parents[1]->value.shape));
                      });
}

template <typename S>
ValueT<S> mul(ValueT<S> a, ValueT<S> b) {
  using detail::Bc;
  const Bc bc = detail::classify("mul", a.shape(), b.shape());
  const Shape& out_shape = (bc == Bc::a_scalar || bc == Bc::a_channel)
                               ? b.shape()
                               : a.shape();
  TensorT<S> av = detail::broadcast_to(a.val(), out_shape);
  TensorT<S> bv = detail::broadcast_to(b.val(), out_shape);
  TensorT<S> out(out_shape, av.data * bv.data);
  return a.tape->make(
      "mul", std::move(out), {a.node, b.node}, [out_shape](NodeT<S>& n) {
        if (n.parents[0]->requires_grad) {
          TensorT<S> bv = detail::broadcast_to(n.parents[1]->value, out_shape);
          TensorT<S> ga(out_shape, n.grad.data * bv.data);
          n.parents[0]->accumulate(
              detail::reduce_to(ga, n.parents[0]->value.shape));
        }
        if (n.parents[1]->requires_grad) {
          TensorT<S> av = detail::broadcast_to(n.parents[0]->value, out_shape);
          TensorT<S> gb(out_shape, n.grad.data * av.data);
          n.parents[1]->accumulate(
              detail::reduce_to(gb, n.parents[1]->value.shape));
        }
      });
}

template <typename S>
ValueT<S> div(ValueT<S> a, ValueT<S> b) {
  using detail::Bc;
  const Bc bc = detail::classify("div", a.shape(), b.shape());
  const Shape& out_shape = (bc == Bc::a_scalar || bc == Bc::a_channel)
                               ? b.shape()
                               : a.shape();
  TensorT<S> av = detail::broadcast_to(a.val(), out_shape);
  TensorT<S> bv = detail::broadcast_to(b.val(), out_shape);
  TensorT<S> out(out_shape, av.data / bv.data);
  return a.tape->make(
      "div", std::move(out), {a.node, b.node}, [out_shape](NodeT<S>& n) {
        TensorT<S> bv = detail::broadcast_to(n.parents[1]->value, out_shape);
        if (n.parents[0]->requires_grad) {
          TensorT<S> ga(out_shape, n.grad.data / bv.data);
          n.parents[0]->accumulate(
              detail::reduce_to(ga, n.parents[0]->value.shape));
        }
        if (n.parents[1]->requires_grad) {
          TensorT<S> av = detail::broadcast_to(n.parents[0]->value, out_shape);
          TensorT<S> gb(out_shape,
                        -n.grad.data * av.data / (bv.data * bv.data));
          n.parents[1]->accumulate(
              detail::reduce_to(gb, n.parents[1]->value.shape));
        }
      });
}

template <typename S>
ValueT<S> add_const(ValueT<S> a, S c) {
  TensorT<S> out(a.shape(), a.val().data + c);
  return a.tape->make("add_const", std::move(out), {a.node}, [](NodeT<S>& n) {
    detail::accum_if(n.parents[0], n.grad);
  });
}

template <typename S>
ValueT<S> mul_const(ValueT<S> a, S c) {
  TensorT<S> out(a.shape(), a.val().data * c);
  return a.tape->make("mul_const", std::move(out), {a.node}, [c](NodeT<S>& n) {
    TensorT<S> g(n.grad.shape, n.grad.data * c);
    detail::accum_if(n.parents[0], g);
  });
}

template <typename S>
ValueT<S> neg(ValueT<S> a) {
  return mul_const(a, S(-1));
}

template <typename S>
ValueT<S> operator+(ValueT<S> a, ValueT<S> b) { return add(a, b); }
template <typename S>
ValueT<S> operator-(ValueT<S> a, ValueT<S> b) { return sub(a, b); }
template <typename S>
ValueT<S> operator*(ValueT<S> a, ValueT<S> b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// unaries

namespace detail {
template <typename S, typename F, typename DF>
ValueT<S> unary(const char* name, ValueT<S> a, F f, DF df_from_input) {
  TensorT<S> out(a.shape(), a.val().data.unaryExpr(f));
  return a.tape->make(name, std::move(out), {a.node},
                      [df_from_input](NodeT<S>& n) {
                        if (!n.parents[0]->requires_grad) return;
                        TensorT<S> g(n.grad.shape,
                                     n.grad.data *
                                         n.parents[0]->value.data.unaryExpr(
                                             df_from_input));
                        n.parents[0]->accumulate(g);
                      });
}
template <typename S>
S stable_sigmoid(S x) {
  if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
  const S e = std::exp(x);
  return e / (S(1) + e);
}
}  // namespace detail

template <typename S>
ValueT<S> relu(ValueT<S> a) {
  return detail::unary<S>(
      "relu", a, [](S x) { return x > S(0) ? x : S(0); },
      [](S x) { return x > S(0) ? S(1) : S(0); });
}

template <typename S>
ValueT<S> leaky_relu(ValueT<S> a, S slope = S(0.1)) {
  return detail::unary<S>(
      "leaky_relu", a, [slope](S x) { return x > S(0) ? x : slope * x; },
      [slope](S x) { return x > S(0) ? S(1) : slope; });
}

template <typename S>
ValueT<S> sigmoid(ValueT<S> a) {
  TensorT<S> out(a.shape(),
                 a.val().data.unaryExpr([](S x) { return detail::stable_sigmoid(x); }));
  return a.tape->make("sigmoid", std::move(out), {a.node}, [](NodeT<S>& n) {
    if (!n.parents[0]->requires_grad) return;
    // derivative from the input, not y*(1-y): when y rounds to 1 the
    // product form collapses to exactly 0 and kills threshold gradients
    // deep in the saturated tail
    const auto& x = n.parents[0]->value;
    TensorT<S> g(n.grad.shape,
                 n.grad.data * x.data.unaryExpr([](S v) {
                   const S e = std::exp(-std::abs(v));
                   const S d = S(1) + e;
                   return e / (d * d);
                 }));
    n.parents[0]->accumulate(g);
  });
}

template <typename S>
ValueT<S> softplus(ValueT<S> a) {
  return detail::unary<S>(
      "softplus", a,
      [](S x) { return std::max(x, S(0)) + std::log1p(std::exp(-std::abs(x))); },
      [](S x) { return detail::stable_sigmoid(x); });
}

template <typename S>
ValueT<S> log_op(ValueT<S> a) {
  return detail::unary<S>(
      "log", a, [](S x) { return std::log(x); },
      [](S x) { return S(1) / x; });
}

template <typename S>
ValueT<S> exp_op(ValueT<S> a) {
  return detail::unary<S>(
      "exp", a, [](S x) { return std::exp(x); },
      [](S x) { return std::exp(x); });
}

template <typename S>
ValueT<S> square(ValueT<S> a) {
  return detail::unary<S>(
      "square", a, [](S x) { return x * x; }, [](S x) { return S(2) * x; });
}

template <typename S>
ValueT<S> sqrt_op(ValueT<S> a) {
  return detail::unary<S>(
      "sqrt", a, [](S x) { return std::sqrt(x); },
      [](S x) { return S(0.5) / std::sqrt(x); });
}

// subgradient 0 at the kink
template <typename S>
ValueT<S> abs_op(ValueT<S> a) {
  return detail::unary<S>(
      "abs", a, [](S x) { return std::abs(x); },
      [](S x) { return x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0)); });
}

// floored region receives zero gradient
template <typename S>
ValueT<S> clamp_min(ValueT<S> a, S floor) {
  return detail::unary<S>(
      "clamp_min", a, [floor](S x) { return x > floor ? x : floor; },
      [floor](S x) { return x > floor ? S(1) : S(0); });
}

template <typename S>
ValueT<S> clamp01(ValueT<S> a) {
  return detail::unary<S>(
      "clamp01", a,
      [](S x) { return std::min(std::max(x, S(0)), S(1)); },
      [](S x) { return (x > S(0) && x < S(1)) ? S(1) : S(0); });
}

// round-half-away-from-zero; straight-through backward (eval-only path)
template <typename S>
ValueT<S> round_op(ValueT<S> a) {
  return detail::unary<S>(
      "round", a, [](S x) { return std::round(x); }, [](S) { return S(1); });
}

// ---------------------------------------------------------------------------
// reductions, shape ops

template <typename S>
ValueT<S> sum(ValueT<S> a) {
  TensorT<S> out = TensorT<S>::scalar(a.val().data.sum());
  return a.tape->make("sum", std::move(out), {a.node}, [](NodeT<S>& n) {
    if (!n.parents[0]->requires_grad) return;
    TensorT<S> g = TensorT<S>::full(n.parents[0]->value.shape, n.grad.data[0]);
    n.parents[0]->accumulate(g);
  });
}

template <typename S>
ValueT<S> mean(ValueT<S> a) {
  const S inv = S(1) / static_cast<S>(a.numel());
  TensorT<S> out = TensorT<S>::scalar(a.val().data.sum() * inv);
  return a.tape->make("mean", std::move(out), {a.node}, [inv](NodeT<S>& n) {
    if (!n.parents[0]->requires_grad) return;
    TensorT<S> g =
        TensorT<S>::full(n.parents[0]->value.shape, n.grad.data[0] * inv);
    n.parents[0]->accumulate(g);
  });
}

template <typename S>
ValueT<S> reshape(ValueT<S> a, Shape s) {
  if (shape_numel(s) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(s));
  TensorT<S> out(s, a.val().data);
  return a.tape->make("reshape", std::move(out), {a.node}, [](NodeT<S>& n) {
    if (!n.parents[0]->requires_grad) return;
    TensorT<S> g(n.parents[0]->value.shape, n.grad.data);
    n.parents[0]->accumulate(g);
  });
}

template <typename S>
ValueT<S> concat_channels(ValueT<S> a, ValueT<S> b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != 4 || bs.size() != 4 || as[0] != bs[0] || as[2] != bs[2] ||
      as[3] != bs[3])
    throw ShapeError("concat: incompatible shapes " + shape_str(as) + " and " +
                     shape_str(bs));
  const std::int64_t n = as[0], ca = as[1], cb = bs[1], hw = as[2] * as[3];
  TensorT<S> out(Shape{n, ca + cb, as[2], as[3]});
  for (std::int64_t i = 0; i < n; ++i) {
    out.data.segment(i * (ca + cb) * hw, ca * hw) =
        a.val().data.segment(i * ca * hw, ca * hw);
    out.data.segment(i * (ca + cb) * hw + ca * hw, cb * hw) =
        b.val().data.segment(i * cb * hw, cb * hw);
  }
  return a.tape->make(
      "concat", std::move(out), {a.node, b.node}, [n, ca, cb, hw](NodeT<S>& n_) {
        if (n_.parents[0]->requires_grad) {
          TensorT<S> ga(n_.parents[0]->value.shape);
          for (std::int64_t i = 0; i < n; ++i)
            ga.data.segment(i * ca * hw, ca * hw) =
                n_.grad.data.segment(i * (ca + cb) * hw, ca * hw);
          n_.parents[0]->accumulate(ga);
        }
        if (n_.parents[1]->requires_grad) {
          TensorT<S> gb(n_.parents[1]->value.shape);
          for (std::int64_t i = 0; i < n; ++i)
            gb.data.segment(i * cb * hw, cb * hw) =
                n_.grad.data.segment(i * (ca + cb) * hw + ca * hw, cb * hw);
          n_.parents[1]->accumulate(gb);
        }
      });
}

template <typename S>
ValueT<S> slice_channels(ValueT<S> a, std::int64_t c0, std::int64_t c1) {
  const Shape& as = a.shape();
  if (as.size() != 4 || c0 < 0 || c1 > as[1] || c0 >= c1)
    throw ShapeError("slice: invalid channel range [" + std::to_string(c0) +
                     "," + std::to_string(c1) + ") for " + shape_str(as));
  const std::int64_t n = as[0], c = as[1], hw = as[2] * as[3];
  TensorT<S> out(Shape{n, c1 - c0, as[2], as[3]});
  for (std::int64_t i = 0; i < n; ++i)
    out.data.segment(i * (c1 - c0) * hw, (c1 - c0) * hw) =
        a.val().data.segment((i * c + c0) * hw, (c1 - c0) * hw);
  return a.tape->make(
      "slice", std::move(out), {a.node}, [n, c, c0, c1, hw](NodeT<S>& n_) {
        if (!n_.parents[0]->requires_grad) return;
        TensorT<S> g(n_.parents[0]->value.shape);
        for (std::int64_t i = 0; i < n; ++i)
          g.data.segment((i * c + c0) * hw, (c1 - c0) * hw) =
              n_.grad.data.segment(i * (c1 - c0) * hw, (c1 - c0) * hw);
        n_.parents[0]->accumulate(g);
      });
}

template <typename S>
ValueT<S> matmul(ValueT<S> a, ValueT<S> b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0])
    throw ShapeError("matmul: shapes " + shape_str(as) + " x " +
                     shape_str(bs) + " do not chain");
  TensorT<S> out(Shape{as[0], bs[1]});
  out.mat_view(as[0], bs[1]).noalias() =
      a.val().mat_view(as[0], as[1]) * b.val().mat_view(bs[0], bs[1]);
  return a.tape->make("matmul", std::move(out), {a.node, b.node},
                      [](NodeT<S>& n) {
    const auto& A = n.parents[0]->value;
    const auto& B = n.parents[1]->value;
    const std::int64_t m = A.shape[0], k = A.shape[1], p = B.shape[1];
    if (n.parents[0]->requires_grad) {
      TensorT<S> ga(A.shape);
      ga.mat_view(m, k).noalias() =
          n.grad.mat_view(m, p) * B.mat_view(k, p).transpose();
      n.parents[0]->accumulate(ga);
    }
    if (n.parents[1]->requires_grad) {
      TensorT<S> gb(B.shape);
      gb.mat_view(k, p).noalias() =
          A.mat_view(m, k).transpose() * n.grad.mat_view(m, p);
      n.parents[1]->accumulate(gb);
    }
  });
}

// ---------------------------------------------------------------------------
// convolutions: x (N,Ci,H,W), weight (Co, Ci*k*k) row per output filter,
// optional bias (Co). Square kernels, symmetric zero padding.

namespace detail {
inline void check_conv_geom(const char* op, const Shape& xs, const Shape& ws,
                            int k, int stride, int pad) {
  if (xs.size() != 4)
    throw ShapeError(std::string(op) + ": input must be NCHW, got " +
                     shape_str(xs));
  if (ws.size() != 2)
    throw ShapeError(std::string(op) + ": weight must be (out, in*k*k), got " +
                     shape_str(ws));
  if (stride != 1 && stride != 2)
    throw ShapeError(std::string(op) + ": stride must be 1 or 2, got " +
                     std::to_string(stride));
  if (k < 1 || pad < 0)
    throw ShapeError(std::string(op) + ": bad kernel/pad");
  if (ws[1] % (static_cast<std::int64_t>(k) * k) != 0 ||
      ws[1] / (static_cast<std::int64_t>(k) * k) != xs[1])
    throw ShapeError(std::string(op) + ": weight fan-in " +
                     std::to_string(ws[1]) + " does not match " +
                     std::to_string(xs[1]) + " input channels with k=" +
                     std::to_string(k));
}
}  // namespace detail

template <typename S>
ValueT<S> conv2d(ValueT<S> x, ValueT<S> w, int k, int stride, int pad) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  detail::check_conv_geom("conv2d", xs, ws, k, stride, pad);
  const std::int64_t n = xs[0], h = xs[2], wd = xs[3], co = ws[0];
  if ((h + 2 * pad - k) % stride != 0 || (wd + 2 * pad - k) % stride != 0 ||
      h + 2 * pad < k || wd + 2 * pad < k)
    throw ShapeError("conv2d: geometry (" + std::to_string(h) + "x" +
                     std::to_string(wd) + ", k=" + std::to_string(k) +
                     ", s=" + std::to_string(stride) + ", p=" +
                     std::to_string(pad) + ") does not tile");
  const std::int64_t ho = (h + 2 * pad - k) / stride + 1;
  const std::int64_t wo = (wd + 2 * pad - k) / stride + 1;

  auto cols = detail::im2col(x.val(), k, stride, pad);
  typename TensorT<S>::MatrixRM ymat(co, n * ho * wo);
  ymat.noalias() = w.val().mat_view(co, ws[1]) * cols;
  TensorT<S> out = detail::from_cmat<S>(
      typename TensorT<S>::MatrixRM(ymat), Shape{n, co, ho, wo});

  return x.tape->make(
      "conv2d", std::move(out), {x.node, w.node},
      [k, stride, pad](NodeT<S>& nd) {
        const auto& xv = nd.parents[0]->value;
        const auto& wv = nd.parents[1]->value;
        const std::int64_t co_ = wv.shape[0], fan = wv.shape[1];
        auto gmat = detail::to_cmat(nd.grad);  // (Co, N*Ho*Wo)
        if (nd.parents[1]->requires_grad) {
          auto cols = detail::im2col(xv, k, stride, pad);
          TensorT<S> gw(wv.shape);
          gw.mat_view(co_, fan).noalias() = gmat * cols.transpose();
          nd.parents[1]->accumulate(gw);
        }
        if (nd.parents[0]->requires_grad) {
          typename TensorT<S>::MatrixRM gcols(fan, gmat.cols());
          gcols.noalias() = wv.mat_view(co_, fan).transpose() * gmat;
          nd.parents[0]->accumulate(
              detail::col2im<S>(gcols, xv.shape, k, stride, pad));
        }
      });
}

template <typename S>
ValueT<S> conv2d(ValueT<S> x, ValueT<S> w, ValueT<S> bias, int k, int stride,
                 int pad) {
  ValueT<S> y = conv2d(x, w, k, stride, pad);
  return add(y, bias);
}

// output spatial size (I-1)*stride + k - 2*pad
template <typename S>
ValueT<S> tconv2d(ValueT<S> x, ValueT<S> w, int k, int stride, int pad) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  detail::check_conv_geom("tconv2d", xs, ws, k, stride, pad);
  const std::int64_t n = xs[0], ci = xs[1], h = xs[2], wd = xs[3],
                     co = ws[0];
  const std::int64_t oh = (h - 1) * stride + k - 2 * pad;
  const std::int64_t ow = (wd - 1) * stride + k - 2 * pad;
  if (oh < 1 || ow < 1)
    throw ShapeError("tconv2d: degenerate output " + std::to_string(oh) + "x" +
                     std::to_string(ow));

  auto pmat = detail::tconv_pmat(w.val(), co, ci, k);        // (Co*k*k, Ci)
  auto xmat = detail::to_cmat(x.val());                      // (Ci, N*H*W)
  typename TensorT<S>::MatrixRM cols(co * k * k, n * h * wd);
  cols.noalias() = pmat * xmat;
  TensorT<S> out =
      detail::col2im<S>(cols, Shape{n, co, oh, ow}, k, stride, pad);

  return x.tape->make(
      "tconv2d", std::move(out), {x.node, w.node},
      [k, stride, pad](NodeT<S>& nd) {
        const auto& xv = nd.parents[0]->value;
        const auto& wv = nd.parents[1]->value;
        const std::int64_t ci_ = xv.shape[1], co_ = wv.shape[0];
        auto gcols = detail::im2col(nd.grad, k, stride, pad);  // (Co*k*k, N*H*W)
        if (nd.parents[0]->requires_grad) {
          auto pmat = detail::tconv_pmat(wv, co_, ci_, k);
          typename TensorT<S>::MatrixRM gx(ci_, gcols.cols());
          gx.noalias() = pmat.transpose() * gcols;
          nd.parents[0]->accumulate(detail::from_cmat<S>(gx, xv.shape));
        }
        if (nd.parents[1]->requires_grad) {
          auto xmat = detail::to_cmat(xv);
          typename TensorT<S>::MatrixRM gp(co_ * k * k, ci_);
          gp.noalias() = gcols * xmat.transpose();
          nd.parents[1]->accumulate(detail::tconv_unpmat<S>(gp, co_, ci_, k));
        }
      });
}

template <typename S>
ValueT<S> tconv2d(ValueT<S> x, ValueT<S> w, ValueT<S> bias, int k, int stride,
                  int pad) {
  ValueT<S> y = tconv2d(x, w, k, stride, pad);
  return add(y, bias);
}

// ---------------------------------------------------------------------------
// row structure ops

// per-row L2 norms of a (rows, cols) matrix view
template <typename S>
ValueT<S> row_norms_op(ValueT<S> w) {
  const Shape& ws = w.shape();
  if (ws.size() != 2)
    throw ShapeError("row_norms: expected 2-d weight, got " + shape_str(ws));
  const std::int64_t r = ws[0], c = ws[1];
  TensorT<S> out(Shape{r});
  auto m = w.val().mat_view(r, c);
  for (std::int64_t i = 0; i < r; ++i) out.data[i] = m.row(i).norm();
  return w.tape->make("row_norms", std::move(out), {w.node}, [](NodeT<S>& n) {
    if (!n.parents[0]->requires_grad) return;
    const auto& wv = n.parents[0]->value;
    const std::int64_t r = wv.shape[0], c = wv.shape[1];
    TensorT<S> g(wv.shape);
    auto gm = g.mat_view(r, c);
    auto wm = wv.mat_view(r, c);
    for (std::int64_t i = 0; i < r; ++i) {
      const S nrm = std::max(n.value.data[i], S(1e-12));
      gm.row(i) = wm.row(i) * (n.grad.data[i] / nrm);
    }
    n.parents[0]->accumulate(g);
  });
}

// rows of x (N, D) scaled to unit L2 norm; norms below `floor` use `floor`
template <typename S>
ValueT<S> normalize_rows(ValueT<S> x, S floor) {
  const Shape& xs = x.shape();
  if (xs.size() != 2)
    throw ShapeError("normalize_rows: expected 2-d input, got " +
                     shape_str(xs));
  const std::int64_t r = xs[0], c = xs[1];
  TensorT<S> out(xs);
  auto xm = x.val().mat_view(r, c);
  auto om = out.mat_view(r, c);
  for (std::int64_t i = 0; i < r; ++i) {
    const S d = std::max(xm.row(i).norm(), floor);
    om.row(i) = xm.row(i) / d;
  }
  return x.tape->make(
      "normalize_rows", std::move(out), {x.node}, [floor](NodeT<S>& n) {
        if (!n.parents[0]->requires_grad) return;
        const auto& xv = n.parents[0]->value;
        const std::int64_t r = xv.shape[0], c = xv.shape[1];
        TensorT<S> g(xv.shape);
        auto xm = xv.mat_view(r, c);
        auto ym = n.value.mat_view(r, c);
        auto gm = n.grad.mat_view(r, c);
        auto om = g.mat_view(r, c);
        for (std::int64_t i = 0; i < r; ++i) {
          const S nrm = xm.row(i).norm();
          const S d = std::max(nrm, floor);
          if (nrm > floor) {
            const S dotp = ym.row(i).dot(gm.row(i));
            om.row(i) = (gm.row(i) - ym.row(i) * dotp) / d;
          } else {
            om.row(i) = gm.row(i) / d;  // linear region below the floor
          }
        }
        n.parents[0]->accumulate(g);
      });
}

// value copy with gradient flow severed
template <typename S>
ValueT<S> detach(ValueT<S> x) {
  return x.tape->constant(x.val());
}

}  // namespace prunevc
