#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "prunevc/autograd.hpp"
#include "prunevc/gradcheck.hpp"
#include "prunevc/ops.hpp"
#include "prunevc/rng.hpp"
#include "prunevc/tensor.hpp"

using namespace prunevc;

namespace {

TensorT<double> random_tensor(Shape s, std::uint64_t key, double lo = -1.0,
                              double hi = 1.0) {
  TensorT<double> t(std::move(s));
  RngStream rng(key, rngstream::test, 0);
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t.data[i] = lo + (hi - lo) * rng.uniform_d();
  return t;
}

}  // namespace

TEST_CASE("tensor shape/data invariant") {
  CHECK_THROWS_AS(Tensor(Shape{2, 3}, Tensor::Array::Zero(5)), ShapeError);
  Tensor t = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK(t.numel() == 4);
  CHECK(t.at4(0, 0, 0, 0) == 1);  // degenerate use is on caller
}

TEST_CASE("sigmoid symmetry at zero") {
  Tape tape;
  auto x = tape.leaf(Tensor::scalar(0.0f), false);
  auto y = sigmoid(x);
  CHECK(y.val().scalar_value() == doctest::Approx(0.5f).epsilon(1e-7));
}

TEST_CASE("conv2d all-ones 3x3 kernel center value") {
  Tape tape;
  auto x = tape.leaf(Tensor::full({1, 1, 4, 4}, 1.0f), false);
  auto w = tape.leaf(Tensor::full({1, 9}, 1.0f), false);
  auto y = conv2d(x, w, 3, 1, 1);
  REQUIRE(y.shape() == Shape{1, 1, 4, 4});
  // interior positions see the full 3x3 window of ones
  CHECK(y.val().at4(0, 0, 1, 1) == doctest::Approx(9.0f));
  CHECK(y.val().at4(0, 0, 2, 2) == doctest::Approx(9.0f));
  // corner sees a 2x2 window
  CHECK(y.val().at4(0, 0, 0, 0) == doctest::Approx(4.0f));
}

TEST_CASE("gradient of mean(x^2) matches central differences and frozen values") {
  auto f = [](TapeT<double>& t, std::vector<ValueT<double>>& leaves) {
    return mean(square(leaves[0]));
  };
  TensorT<double> x = TensorT<double>::from({3}, {1.0, 2.0, 3.0});
  auto report = finite_diff_check<double>(f, {{"x", x}}, 1e-3, 1e-6);
  CHECK(report.all_ok);

  TapeT<double> tape;
  auto leaf = tape.leaf(x, true);
  auto loss = mean(square(leaf));
  tape.backward(loss);
  // frozen from the central-difference oracle above: d/dx mean(x^2) = 2x/3
  CHECK(leaf.grad().data[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(leaf.grad().data[1] == doctest::Approx(4.0 / 3.0).epsilon(1e-12));
  CHECK(leaf.grad().data[2] == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("custom_grad_op straight-through and decayed variants") {
  const float threshold = 1.0f;

  auto hard_threshold = [&](const std::vector<const Tensor*>& in) {
    Tensor out = *in[0];
    for (std::int64_t i = 0; i < out.numel(); ++i)
      if (std::abs(out.data[i]) <= threshold) out.data[i] = 0.0f;
    return out;
  };
  auto make_backward = [&](float beta) {
    return [&, beta](const Tensor& up, const std::vector<const Tensor*>& in) {
      Tensor g = up;
      for (std::int64_t i = 0; i < g.numel(); ++i)
        if (std::abs(in[0]->data[i]) <= threshold) g.data[i] *= beta;
      return std::vector<Tensor>{g};
    };
  };

  SUBCASE("backward identity equals STE") {
    Tape tape;
    auto x = tape.leaf(Tensor::from({2}, {0.5f, 2.0f}), true);
    auto y = custom_grad_op<float>(tape, hard_threshold, make_backward(1.0f),
                                   {x});
    CHECK(y.val().data[0] == 0.0f);
    CHECK(y.val().data[1] == 2.0f);
    auto loss = sum(mul_const(y, 3.0f));
    tape.backward(loss);
    CHECK(x.grad().data[0] == 3.0f);  // below threshold, still full gradient
    CHECK(x.grad().data[1] == 3.0f);
  }

  SUBCASE("backward beta=0.5 halves pruned-entry gradient") {
    Tape tape;
    auto x = tape.leaf(Tensor::from({2}, {0.5f, 2.0f}), true);
    auto y = custom_grad_op<float>(tape, hard_threshold, make_backward(0.5f),
                                   {x});
    auto loss = sum(mul_const(y, 4.0f));
    tape.backward(loss);
    CHECK(x.grad().data[0] == 2.0f);
    CHECK(x.grad().data[1] == 4.0f);
  }

  SUBCASE("identity forward and backward is a no-op") {
    auto fwd = [](const std::vector<const Tensor*>& in) { return *in[0]; };
    auto bwd = [](const Tensor& up, const std::vector<const Tensor*>&) {
      return std::vector<Tensor>{up};
    };
    Tape tape;
    auto x = tape.leaf(Tensor::from({3}, {1.0f, -2.0f, 3.0f}), true);
    auto y = custom_grad_op<float>(tape, fwd, bwd, {x});
    auto loss = sum(square(y));
    tape.backward(loss);
    for (int i = 0; i < 3; ++i)
      CHECK(x.grad().data[i] ==
            doctest::Approx(2.0f * x.val().data[i]).epsilon(1e-6));
  }

  SUBCASE("gradient shape mismatch is a structured error") {
    auto fwd = [](const std::vector<const Tensor*>& in) { return *in[0]; };
    auto bwd = [](const Tensor& up, const std::vector<const Tensor*>&) {
      return std::vector<Tensor>{Tensor::zeros({7})};
    };
    Tape tape;
    auto x = tape.leaf(Tensor::from({3}, {1.0f, 2.0f, 3.0f}), true);
    auto y = custom_grad_op<float>(tape, fwd, bwd, {x});
    auto loss = sum(y);
    CHECK_THROWS_AS(tape.backward(loss), ShapeError);
  }
}

TEST_CASE("fan-out gradients accumulate additively") {
  Tape tape;
  auto x = tape.leaf(Tensor::from({2}, {1.0f, 2.0f}), true);
  auto a = mul_const(x, 3.0f);
  auto b = square(x);
  auto loss = sum(add(a, b));  // d/dx = 3 + 2x
  tape.backward(loss);
  CHECK(x.grad().data[0] == doctest::Approx(5.0f));
  CHECK(x.grad().data[1] == doctest::Approx(7.0f));
}

TEST_CASE("backward contract") {
  SUBCASE("non-scalar loss rejected") {
    Tape tape;
    auto x = tape.leaf(Tensor::from({2}, {1.0f, 2.0f}), true);
    auto y = square(x);
    CHECK_THROWS_AS(tape.backward(y), ShapeError);
  }
  SUBCASE("second backward on the same tape rejected") {
    Tape tape;
    auto x = tape.leaf(Tensor::scalar(2.0f), true);
    auto loss = square(x);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), ShapeError);
  }
  SUBCASE("constant parents receive no gradient") {
    Tape tape;
    auto x = tape.leaf(Tensor::scalar(2.0f), true);
    auto c = tape.constant(Tensor::scalar(5.0f));
    auto loss = sum(mul(x, c));
    tape.backward(loss);
    CHECK(x.grad().data[0] == 5.0f);
    CHECK(!c.has_grad());
  }
}

TEST_CASE("non-finite forward raises numeric fault") {
  Tape tape;
  auto x = tape.leaf(Tensor::from({2}, {-1.0f, 1.0f}), false);
  CHECK_THROWS_AS(log_op(x), NumericFault);
  auto big = tape.leaf(Tensor::full({2}, 1e30f), false);
  CHECK_THROWS_AS(square(big), NumericFault);
}

TEST_CASE("shape mismatch errors name the op") {
  Tape tape;
  auto a = tape.leaf(Tensor::zeros({2, 3}), false);
  auto b = tape.leaf(Tensor::zeros({4, 5}), false);
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("add"), ShapeError);
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("matmul"), ShapeError);
}

TEST_CASE("evaluation is bit-deterministic") {
  TensorT<float> x(Shape{2, 3, 8, 8});
  TensorT<float> w(Shape{4, 3 * 9});
  RngStream rng(7, rngstream::test, 1);
  for (std::int64_t i = 0; i < x.numel(); ++i) x.data[i] = rng.uniform(-1, 1);
  for (std::int64_t i = 0; i < w.numel(); ++i) w.data[i] = rng.uniform(-1, 1);

  auto run = [&]() {
    Tape tape;
    auto xv = tape.leaf(x, true);
    auto wv = tape.leaf(w, true);
    auto loss = mean(square(leaky_relu(conv2d(xv, wv, 3, 1, 1))));
    tape.backward(loss);
    return std::make_pair(loss.val().scalar_value(), wv.grad());
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  CHECK(std::memcmp(&l1, &l2, sizeof(float)) == 0);
  CHECK(std::memcmp(g1.data.data(), g2.data.data(),
                    sizeof(float) * static_cast<std::size_t>(g1.numel())) == 0);
}

TEST_CASE("smooth op gradients match central differences (double)") {
  const double h = 1e-5;
  const double tol = 1e-6;
  int checks = 0;

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    // inputs kept away from relu/sqrt kinks
    auto x = random_tensor({2, 5}, seed, 0.2, 1.5);
    auto y = random_tensor({2, 5}, seed + 100, 0.2, 1.5);

    auto composite = [](TapeT<double>& t, std::vector<ValueT<double>>& v) {
      auto a = sigmoid(v[0]);
      auto b = softplus(v[1]);
      auto c = mul(a, b);
      auto d = log_op(add_const(square(v[0]), 0.5));
      auto e = sqrt_op(add_const(abs_op(v[1]), 0.1));
      return mean(add(add(c, d), e));
    };
    auto report = finite_diff_check<double>(
        composite, {{"x", x}, {"y", y}}, h, tol);
    CHECK_MESSAGE(report.all_ok, "seed ", seed, " worst ", report.worst);
    ++checks;
  }
  CHECK(checks == 20);
}

TEST_CASE("conv, tconv, matmul, normalize gradients match central differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto x = random_tensor({2, 3, 6, 6}, seed * 3 + 1);
    auto w = random_tensor({4, 3 * 16}, seed * 3 + 2, -0.5, 0.5);
    auto b = random_tensor({4}, seed * 3 + 3, -0.2, 0.2);

    auto conv_f = [](TapeT<double>& t, std::vector<ValueT<double>>& v) {
      return mean(square(conv2d(v[0], v[1], v[2], 4, 2, 1)));
    };
    auto r1 = finite_diff_check<double>(
        conv_f, {{"x", x}, {"w", w}, {"b", b}}, 1e-4, 1e-5);
    CHECK_MESSAGE(r1.all_ok, "conv2d seed ", seed, " worst ", r1.worst);

    auto xt = random_tensor({2, 3, 4, 4}, seed * 5 + 1);
    auto wt = random_tensor({5, 3 * 16}, seed * 5 + 2, -0.5, 0.5);
    auto bt = random_tensor({5}, seed * 5 + 3, -0.2, 0.2);
    auto tconv_f = [](TapeT<double>& t, std::vector<ValueT<double>>& v) {
      return mean(square(tconv2d(v[0], v[1], v[2], 4, 2, 1)));
    };
    auto r2 = finite_diff_check<double>(
        tconv_f, {{"x", xt}, {"w", wt}, {"b", bt}}, 1e-4, 1e-5);
    CHECK_MESSAGE(r2.all_ok, "tconv2d seed ", seed, " worst ", r2.worst);

    auto ma = random_tensor({3, 4}, seed * 7 + 1);
    auto mb = random_tensor({4, 2}, seed * 7 + 2);
    auto mm_f = [](TapeT<double>& t, std::vector<ValueT<double>>& v) {
      return sum(square(matmul(v[0], v[1])));
    };
    auto r3 = finite_diff_check<double>(mm_f, {{"a", ma}, {"b", mb}}, 1e-5,
                                        1e-6);
    CHECK_MESSAGE(r3.all_ok, "matmul seed ", seed, " worst ", r3.worst);

    auto nx = random_tensor({3, 6}, seed * 11 + 1, 0.3, 1.0);
    auto nrm_f = [](TapeT<double>& t, std::vector<ValueT<double>>& v) {
      auto y = normalize_rows(v[0], 1e-12);
      return sum(square(add_const(y, -0.3)));
    };
    auto r4 = finite_diff_check<double>(nrm_f, {{"x", nx}}, 1e-5, 1e-6);
    CHECK_MESSAGE(r4.all_ok, "normalize seed ", seed, " worst ", r4.worst);

    auto norms_f = [](TapeT<double>& t, std::vector<ValueT<double>>& v) {
      return sum(square(row_norms_op(v[0])));
    };
    auto r5 = finite_diff_check<double>(norms_f, {{"w", w}}, 1e-5, 1e-6);
    CHECK_MESSAGE(r5.all_ok, "row_norms seed ", seed, " worst ", r5.worst);
  }
}

TEST_CASE("broadcast arithmetic: scalar and per-channel") {
  SUBCASE("forward values") {
    Tape tape;
    auto x = tape.leaf(Tensor::full({2, 3, 2, 2}, 1.0f), false);
    auto c = tape.leaf(Tensor::from({3}, {1.0f, 2.0f, 3.0f}), false);
    auto y = add(x, c);
    CHECK(y.val().at4(0, 0, 0, 0) == 2.0f);
    CHECK(y.val().at4(1, 2, 1, 1) == 4.0f);
    auto s = tape.leaf(Tensor::scalar(10.0f), false);
    auto z = mul(x, s);
    CHECK(z.val().at4(1, 1, 0, 1) == 10.0f);
  }
  SUBCASE("gradients reduce over broadcast dims") {
    auto x = random_tensor({2, 3, 2, 2}, 42);
    auto c = random_tensor({3}, 43, 0.5, 1.5);
    auto f = [](TapeT<double>& t, std::vector<ValueT<double>>& v) {
      return mean(square(div(mul(v[0], v[1]), add_const(v[1], 1.0))));
    };
    auto r = finite_diff_check<double>(f, {{"x", x}, {"c", c}}, 1e-5, 1e-6);
    CHECK_MESSAGE(r.all_ok, "worst ", r.worst);
  }
}

TEST_CASE("reshape, concat, slice round trip gradients") {
  auto a = random_tensor({2, 2, 3, 3}, 5);
  auto b = random_tensor({2, 3, 3, 3}, 6);
  auto f = [](TapeT<double>& t, std::vector<ValueT<double>>& v) {
    auto cat = concat_channels(v[0], v[1]);
    auto sl = slice_channels(cat, 1, 4);
    auto flat = reshape(sl, {2, 27});
    return mean(square(flat));
  };
  auto r = finite_diff_check<double>(f, {{"a", a}, {"b", b}}, 1e-5, 1e-6);
  CHECK_MESSAGE(r.all_ok, "worst ", r.worst);
}

TEST_CASE("finite_diff_check on f=sum has zero error") {
  auto x = random_tensor({4}, 9);
  auto f = [](TapeT<double>& t, std::vector<ValueT<double>>& v) {
    return sum(v[0]);
  };
  auto r = finite_diff_check<double>(f, {{"x", x}}, 1e-3, 1e-9);
  CHECK(r.all_ok);
  CHECK(r.worst < 1e-9);
}
