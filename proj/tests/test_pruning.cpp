#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "prunevc/autograd.hpp"
#include "prunevc/gradcheck.hpp"
#include "prunevc/ops.hpp"
#include "prunevc/pruning.hpp"
#include "prunevc/rng.hpp"
#include "prunevc/tensor.hpp"
#include "prunevc/topology.hpp"

using namespace prunevc;

namespace {

Tensor rand_tensor(Shape s, std::uint64_t key, float lo = -1.0f,
                   float hi = 1.0f) {
  Tensor t(std::move(s));
  RngStream rng(key, rngstream::test, 0);
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t.data[i] = lo + (hi - lo) * rng.uniform();
  return t;
}

}  // namespace

TEST_CASE("beta schedule endpoints and midpoint") {
  ScheduleSet s;
  s.K = 1000;
  CHECK(beta_schedule(0, s) ==
        doctest::Approx(0.9975273768433652).epsilon(1e-12));
  CHECK(beta_schedule(1000, s) ==
        doctest::Approx(0.002472623156634657).epsilon(1e-12));
  CHECK(beta_schedule(500, s) == 0.5);  // sigmoid(0) is exact
  double prev = 2.0;
  for (std::int64_t k = 0; k <= 1000; k += 5) {
    const double b = beta_schedule(k, s);
    CHECK(b <= prev);
    CHECK(b > 0.0);
    CHECK(b < 1.0);
    prev = b;
  }
}

TEST_CASE("corrected cubic target ramp") {
  ScheduleSet s;
  s.s_tar = 0.75;
  s.K = 100;
  CHECK(target_sparsity(0, s) == 0.0);
  CHECK(target_sparsity(35, s) == doctest::Approx(0.65625).epsilon(1e-9));
  CHECK(target_sparsity(70, s) == 0.75);
  CHECK(target_sparsity(85, s) == 0.75);
  CHECK(target_sparsity(100, s) == 0.75);
  double prev = -1.0;
  for (std::int64_t k = 0; k <= 100; ++k) {
    const double v = target_sparsity(k, s);
    CHECK(v >= prev - 1e-12);
    CHECK(v <= 0.75 + 1e-12);
    prev = v;
  }
}

TEST_CASE("literal cubic form starts at full sparsity") {
  ScheduleSet s;
  s.s_tar = 0.75;
  s.K = 100;
  s.mode = ScheduleSet::Mode::as_written;
  CHECK(target_sparsity(0, s) == 1.0);
  CHECK(target_sparsity(70, s) == 0.75);
  CHECK(target_sparsity(100, s) == 0.75);
  double prev = 2.0;
  for (std::int64_t k = 0; k <= 100; ++k) {
    const double v = target_sparsity(k, s);
    CHECK(v <= prev + 1e-12);
    prev = v;
  }
}

TEST_CASE("row norms oracle") {
  Tensor w = Tensor::from({3, 2}, {3, 4, 0, 0, 1, 0});
  Tensor n = row_norms(w);
  CHECK(n.shape == Shape{3});
  CHECK(n.data[0] == doctest::Approx(5.0f));
  CHECK(n.data[1] == 0.0f);
  CHECK(n.data[2] == 1.0f);
  CHECK_THROWS_AS(row_norms(Tensor::from({4}, {1, 2, 3, 4})), ShapeError);
}

TEST_CASE("keep mask: tie goes to pruned") {
  Tensor n = Tensor::from({3}, {0.5f, 1.0f, 1.5f});
  auto keep = keep_mask(n, 1.0f);
  CHECK(keep == std::vector<char>({0, 0, 1}));
  CHECK(hard_sparsity<float>({n}, {1.0f}) == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("masked rows: forward zeroes pruned slices only") {
  Tensor w = rand_tensor({4, 6}, 11);
  std::vector<char> keep{1, 0, 1, 0};
  Tape tape;
  auto wl = tape.leaf(w, false);
  Tensor out = masked_rows(wl, keep, 1.0f).val();
  for (std::int64_t r = 0; r < 4; ++r)
    for (std::int64_t c = 0; c < 6; ++c) {
      const float v = out.data[r * 6 + c];
      if (keep[static_cast<std::size_t>(r)])
        CHECK(v == w.data[r * 6 + c]);
      else
        CHECK(v == 0.0f);
    }
}

TEST_CASE("masked rows: pruned-row gradient is exactly beta-scaled") {
  Tensor w = rand_tensor({4, 6}, 12);
  Tensor c = rand_tensor({4, 6}, 13);
  std::vector<char> keep{1, 0, 0, 1};

  auto grad_for = [&](float beta) {
    Tape tape;
    auto wl = tape.leaf(w, true);
    auto cc = tape.constant(c);
    auto loss = sum(mul(masked_rows(wl, keep, beta), cc));
    tape.backward(loss);
    return wl.grad();
  };
  Tensor g1 = grad_for(1.0f);
  Tensor gh = grad_for(0.5f);
  Tensor g0 = grad_for(0.0f);

  for (std::int64_t r = 0; r < 4; ++r)
    for (std::int64_t i = r * 6; i < (r + 1) * 6; ++i) {
      // surrogate backward sees d(loss)/d(masked) = c everywhere
      if (keep[static_cast<std::size_t>(r)]) {
        CHECK(g1.data[i] == c.data[i]);
        CHECK(gh.data[i] == c.data[i]);
        CHECK(g0.data[i] == c.data[i]);
      } else {
        CHECK(g1.data[i] == c.data[i]);  // beta=1 passes straight through
        CHECK(gh.data[i] == 0.5f * c.data[i]);
        CHECK(g0.data[i] == 0.0f);
      }
    }
}

TEST_CASE("masked rows handles bias vectors and rejects bad masks") {
  Tensor b = Tensor::from({3}, {0.25f, -0.5f, 1.0f});
  std::vector<char> keep{0, 1, 0};
  Tape tape;
  auto bl = tape.leaf(b, true);
  auto out = masked_rows(bl, keep, 0.5f);
  CHECK(out.val().data[0] == 0.0f);
  CHECK(out.val().data[1] == -0.5f);
  CHECK(out.val().data[2] == 0.0f);
  tape.backward(sum(out));
  CHECK(bl.grad().data[0] == 0.5f);
  CHECK(bl.grad().data[1] == 1.0f);
  CHECK(bl.grad().data[2] == 0.5f);

  Tape t2;
  auto wl = t2.leaf(rand_tensor({4, 2}, 14), false);
  CHECK_THROWS_AS(masked_rows(wl, std::vector<char>{1, 0, 1}, 1.0f),
                  ShapeError);
}

TEST_CASE("soft sparsity approaches hard sparsity at high tau") {
  RngStream rng(41, rngstream::test, 0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Tensor> norms;
    std::vector<float> thresholds;
    for (std::int64_t len : {std::int64_t(16), std::int64_t(8)}) {
      const float t = 0.2f + 1.6f * rng.uniform();
      Tensor n(Shape{len});
      for (std::int64_t j = 0; j < len; ++j) {
        const float gap = 1e-3f + 0.8f * rng.uniform();
        const bool above = rng.uniform() < 0.5f;
        const float v = above ? t + gap : t - gap;
        n.data[j] = v < 0.0f ? t + gap : v;
      }
      norms.push_back(std::move(n));
      thresholds.push_back(t);
    }
    const double hard = hard_sparsity<float>(norms, thresholds);

    Tape tape;
    std::vector<Value> nv, tv;
    for (std::size_t l = 0; l < norms.size(); ++l) {
      nv.push_back(tape.constant(norms[l]));
      tv.push_back(tape.constant(Tensor::scalar(thresholds[l])));
    }
    const double soft = soft_sparsity(nv, tv, 1e4f).val().scalar_value();
    CHECK(std::abs(soft - hard) < 1e-3);
  }
}

TEST_CASE("soft sparsity: half the filters pruned reads one half") {
  Tensor n(Shape{8});
  for (int j = 0; j < 4; ++j) n.data[j] = 5.0f;
  for (int j = 4; j < 8; ++j) n.data[j] = 0.1f;
  CHECK(hard_sparsity<float>({n}, {1.0f}) == 0.5);

  Tape tape;
  std::vector<Value> nv{tape.constant(n)};
  std::vector<Value> tv{tape.constant(Tensor::scalar(1.0f))};
  const double soft = soft_sparsity(nv, tv, 20.0f).val().scalar_value();
  CHECK(soft == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("soft sparsity rises with the threshold in the active band") {
  Tensor n = Tensor::from({3}, {0.5f, 1.0f, 1.5f});
  Tape tape;
  std::vector<Value> nv{tape.constant(n)};
  auto tl = tape.leaf(Tensor::scalar(0.98f), true);
  std::vector<Value> tv{tl};
  auto s = soft_sparsity(nv, tv, 20.0f);
  tape.backward(s);
  const double g = tl.grad().scalar_value();
  CHECK(g > 0.0);

  // closed-form slope: (tau/total) * sum_j sigmoid'(tau*(N_j - T))
  double expect = 0.0;
  for (float v : {0.5f, 1.0f, 1.5f}) {
    const double x = 20.0 * (static_cast<double>(v) - 0.98);
    const double sx = sigmoid_d(x);
    expect += sx * (1.0 - sx);
  }
  expect *= 20.0 / 3.0;
  CHECK(g == doctest::Approx(expect).epsilon(1e-3));
}

TEST_CASE("soft sparsity threshold gradient passes finite differences") {
  using DT = TensorT<double>;
  std::vector<std::pair<std::string, DT>> params;
  DT t0(Shape{1});
  t0.data[0] = 0.9;
  DT t1(Shape{1});
  t1.data[0] = 0.4;
  params.emplace_back("T0", t0);
  params.emplace_back("T1", t1);

  auto f = [](TapeT<double>& tape, std::vector<ValueT<double>>& leaves) {
    TensorT<double> n0 = TensorT<double>::from({4}, {0.3, 0.85, 0.95, 1.4});
    TensorT<double> n1 = TensorT<double>::from({3}, {0.2, 0.45, 0.6});
    std::vector<ValueT<double>> nv{tape.constant(n0), tape.constant(n1)};
    std::vector<ValueT<double>> tv{leaves[0], leaves[1]};
    return soft_sparsity(nv, tv, 20.0);
  };
  auto rep = finite_diff_check<double>(f, params, 1e-4, 1e-3);
  CHECK(rep.all_ok);
}

TEST_CASE("pruned filters can re-activate while the surrogate is positive") {
  // row 1 starts below threshold; a constant pull with beta=0.5 leaks
  // through the mask and regrows it past the boundary
  Tensor w = Tensor::from({2, 4}, {0.8f, 0.8f, 0.8f, 0.8f,  //
                                   0.45f, 0.45f, 0.45f, 0.45f});
  const float threshold = 1.0f;
  const float beta = 0.5f;
  const float lr = 0.5f;

  auto keep0 = keep_mask(row_norms(w), threshold);
  CHECK(keep0 == std::vector<char>({1, 0}));

  bool flipped = false;
  for (int it = 0; it < 6 && !flipped; ++it) {
    auto keep = keep_mask(row_norms(w), threshold);
    Tape tape;
    auto wl = tape.leaf(w, true);
    // pushing every coefficient up == descending on -sum(masked)
    auto loss = mul_const(sum(masked_rows(wl, keep, beta)), -1.0f);
    tape.backward(loss);
    w.data -= lr * wl.grad().data;
    flipped = keep_mask(row_norms(w), threshold) == std::vector<char>({1, 1});
  }
  CHECK(flipped);

  // once kept, the filter contributes to the forward pass again
  auto keep = keep_mask(row_norms(w), threshold);
  Tape tape;
  auto wl = tape.leaf(w, false);
  Tensor out = masked_rows(wl, keep, beta).val();
  CHECK(out.data.segment(4, 4).cwiseAbs().sum() > 0.0f);
}

TEST_CASE("zero-beta masks freeze pruned rows") {
  Tensor w = Tensor::from({2, 2}, {2.0f, 2.0f, 0.1f, 0.1f});
  auto keep = keep_mask(row_norms(w), 1.0f);
  CHECK(keep == std::vector<char>({1, 0}));
  Tape tape;
  auto wl = tape.leaf(w, true);
  tape.backward(mul_const(sum(masked_rows(wl, keep, 0.0f)), -1.0f));
  CHECK(wl.grad().data[2] == 0.0f);
  CHECK(wl.grad().data[3] == 0.0f);
}

namespace {

Topology chain_topology() {
  Topology topo;
  LayerSpec a;
  a.id = "a";
  a.in_ch = 3;
  a.out_ch = 4;
  a.prunable = true;
  a.decoder = true;
  a.sources = {{"", 3, 1.0}};
  LayerSpec b;
  b.id = "b";
  b.in_ch = 4;
  b.out_ch = 2;
  b.sources = {{"a", 4, 1.0}};
  topo.push_back(a);
  topo.push_back(b);
  return topo;
}

}  // namespace

TEST_CASE("compaction plan: all-keep masks are the identity") {
  auto topo = chain_topology();
  std::map<std::string, std::vector<char>> masks{{"a", {1, 1, 1, 1}}};
  auto plan = compaction_plan(topo, masks);
  CHECK(plan.order == std::vector<std::string>({"a", "b"}));
  CHECK(plan.kept_out.at("a") == std::vector<std::int64_t>({0, 1, 2, 3}));
  CHECK(plan.kept_in.at("a") == std::vector<std::int64_t>({0, 1, 2}));
  CHECK(plan.kept_in.at("b") == std::vector<std::int64_t>({0, 1, 2, 3}));
}

TEST_CASE("compaction plan: consumers lose the input slices of pruned filters") {
  auto topo = chain_topology();
  std::map<std::string, std::vector<char>> masks{{"a", {1, 0, 1, 0}}};
  auto plan = compaction_plan(topo, masks);
  CHECK(plan.kept_out.at("a") == std::vector<std::int64_t>({0, 2}));
  CHECK(plan.kept_in.at("b") == std::vector<std::int64_t>({0, 2}));
}

TEST_CASE("compaction plan: concat offsets are remapped") {
  auto topo = chain_topology();
  LayerSpec c;
  c.id = "c";
  c.in_ch = 6;
  c.out_ch = 2;
  c.sources = {{"", 2, 1.0}, {"a", 4, 1.0}};
  topo.push_back(c);
  std::map<std::string, std::vector<char>> masks{{"a", {0, 1, 1, 0}}};
  auto plan = compaction_plan(topo, masks);
  CHECK(plan.kept_in.at("c") == std::vector<std::int64_t>({0, 1, 3, 4}));
}

TEST_CASE("compaction plan failure modes") {
  auto topo = chain_topology();

  std::map<std::string, std::vector<char>> none;
  try {
    compaction_plan(topo, none);
    CHECK(false);
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("'a'") != std::string::npos);
  }

  std::map<std::string, std::vector<char>> empty{{"a", {0, 0, 0, 0}}};
  try {
    compaction_plan(topo, empty);
    CHECK(false);
  } catch (const NumericFault& e) {
    CHECK(std::string(e.what()).find("'a'") != std::string::npos);
  }

  std::map<std::string, std::vector<char>> bad{{"a", {1, 0}}};
  CHECK_THROWS_AS(compaction_plan(topo, bad), ShapeError);
}

TEST_CASE("hard sparsity extremes and empty input") {
  Tensor hi = Tensor::from({4}, {2, 2, 2, 2});
  Tensor lo = Tensor::from({4}, {0.1f, 0.1f, 0.1f, 0.1f});
  CHECK(hard_sparsity<float>({hi}, {1.0f}) == 0.0);
  CHECK(hard_sparsity<float>({lo}, {1.0f}) == 1.0);
  CHECK_THROWS_AS(hard_sparsity<float>({}, {}), ShapeError);
}
