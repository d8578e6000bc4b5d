// Tensor and tape tests. Forward values are checked against small hand-worked
// cases; every primitive's backward pass is checked against the central
// finite-difference oracle at points kept away from non-differentiable loci
// (lattice planes for the interpolation ops, zero vectors for the norm ops).
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>
#include <vector>

#include "alocc/tape.hpp"
#include "alocc/tensor.hpp"

using alocc::ContractError;
using alocc::NumericError;
using alocc::ng::close;
using alocc::ng::finite_diff;
using alocc::ng::Shape;
using alocc::ng::Tape;
using alocc::ng::Tensor;

namespace {

// Uniform values in [lo, hi] from a fixed seed, so every run sees the same
// evaluation points.
Tensor random_tensor(Shape shape, std::uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> data(alocc::ng::shape_numel(shape));
  for (double& v : data) v = dist(rng);
  return Tensor(std::move(shape), std::move(data));
}

using GraphBuilder = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

// Runs the builder once with tracked leaves and compares every tape gradient
// against central finite differences of the same builder.
void check_grads(const GraphBuilder& build, const std::vector<Tensor>& leaves,
                 double rel = 1e-5, double abs_floor = 1e-8) {
  Tape tape;
  std::vector<Tensor> tracked;
  tracked.reserve(leaves.size());
  for (const Tensor& leaf : leaves) tracked.push_back(tape.leaf(leaf));
  const Tensor root = build(tape, tracked);
  REQUIRE(root.numel() == 1);
  const auto grads = tape.backward(root);
  REQUIRE(grads.size() == leaves.size());

  for (std::size_t i = 0; i < leaves.size(); ++i) {
    const Tensor fd = finite_diff(
        [&](const Tensor& x) {
          Tape probe;
          std::vector<Tensor> probe_leaves;
          probe_leaves.reserve(leaves.size());
          for (std::size_t j = 0; j < leaves.size(); ++j)
            probe_leaves.push_back(probe.leaf(j == i ? x : leaves[j]));
          return build(probe, probe_leaves).scalar_value();
        },
        leaves[i], 1e-5);
    const Tensor& ad = grads.at(tracked[i].node());
    REQUIRE(ad.numel() == fd.numel());
    for (std::size_t e = 0; e < fd.numel(); ++e) {
      INFO("leaf ", i, " element ", e, ": tape ", ad.at(e), " vs fd ", fd.at(e));
      CHECK(close(ad.at(e), fd.at(e), rel, abs_floor));
    }
  }
}

// Weighted reduction to a scalar so gradcheck sees a non-uniform cotangent.
Tensor weighted_sum(Tape& tape, const Tensor& t, std::uint64_t seed) {
  const Tensor w = random_tensor(t.shape(), seed, -1.0, 1.0);
  return tape.sum(tape.mul(t, w));
}

}  // namespace

TEST_CASE("tensor construction enforces shape and finiteness") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), ContractError);
  CHECK_THROWS_AS(Tensor({2}, {1.0, std::nan("")}), NumericError);
  CHECK_THROWS_AS(Tensor({1}, {INFINITY}), NumericError);
  const Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.reshaped({6}).shape() == Shape{6});
  CHECK_THROWS_AS(t.reshaped({4}), ContractError);
  CHECK(Tensor::scalar(2.5).scalar_value() == 2.5);
}

TEST_CASE("add and mul broadcast a constant against trailing dimensions") {
  Tape tape;
  const Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor row({3}, {10, 20, 30});
  const Tensor col({2, 1}, {100, 200});

  const Tensor s1 = tape.add(a, row);
  const std::vector<double> want1 = {11, 22, 33, 14, 25, 36};
  for (std::size_t i = 0; i < 6; ++i) CHECK(s1.at(i) == want1[i]);

  const Tensor s2 = tape.add(a, col);
  const std::vector<double> want2 = {101, 102, 103, 204, 205, 206};
  for (std::size_t i = 0; i < 6; ++i) CHECK(s2.at(i) == want2[i]);

  const Tensor p = tape.mul(a, Tensor::scalar(-2.0));
  for (std::size_t i = 0; i < 6; ++i) CHECK(p.at(i) == -2.0 * a.at(i));

  const Tensor q = tape.div(a, col);
  const std::vector<double> want3 = {0.01, 0.02, 0.03, 0.02, 0.025, 0.03};
  for (std::size_t i = 0; i < 6; ++i) CHECK(q.at(i) == doctest::Approx(want3[i]));
  CHECK_THROWS_AS(tape.div(a, Tensor::scalar(0.0)), NumericError);

  CHECK_THROWS_AS(tape.add(a, Tensor({2}, {1, 2})), ContractError);
}

TEST_CASE("matmul matches a hand-worked product and its transposed flavor") {
  Tape tape;
  const Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor b({3, 2}, {7, 8, 9, 10, 11, 12});
  const Tensor c = tape.matmul(a, b);
  CHECK(c.shape() == Shape{2, 2});
  CHECK(c.at(0) == 58);
  CHECK(c.at(1) == 64);
  CHECK(c.at(2) == 139);
  CHECK(c.at(3) == 154);

  // a * bt^T with bt = b^T must reproduce the plain product.
  const Tensor bt({2, 3}, {7, 9, 11, 8, 10, 12});
  const Tensor c2 = tape.matmul_nt(a, bt);
  for (std::size_t i = 0; i < 4; ++i) CHECK(c2.at(i) == c.at(i));

  CHECK_THROWS_AS(tape.matmul(a, a), ContractError);
}

TEST_CASE("gather and scatter_add move rows and merge duplicates") {
  Tape tape;
  const Tensor src({3, 2}, {1, 2, 3, 4, 5, 6});
  const Tensor g = tape.gather(src, {2, 0, 2});
  CHECK(g.shape() == Shape{3, 2});
  CHECK(g.at(0) == 5);
  CHECK(g.at(3) == 2);
  CHECK(g.at(4) == 5);

  const Tensor s = tape.scatter_add(src, {1, 1, 0}, 2);
  CHECK(s.shape() == Shape{2, 2});
  CHECK(s.at(0) == 5);  // row 2 of src
  CHECK(s.at(1) == 6);
  CHECK(s.at(2) == 1 + 3);  // rows 0 and 1 merged
  CHECK(s.at(3) == 2 + 4);

  CHECK_THROWS_AS(tape.gather(src, {3}), ContractError);
  CHECK_THROWS_AS(tape.scatter_add(src, {0, 1}, 2), ContractError);
  CHECK_THROWS_AS(tape.scatter_add(src, {0, 1, 2}, 2), ContractError);
}

TEST_CASE("softmax rows are positive, sum to one, and are shift invariant") {
  Tape tape;
  const Tensor z = tape.softmax_lastdim(Tensor({4}, {0, 0, 0, 0}));
  for (std::size_t i = 0; i < 4; ++i) CHECK(z.at(i) == doctest::Approx(0.25));

  const Tensor x = random_tensor({5, 7}, 11, -4.0, 4.0);
  const Tensor y = tape.softmax_lastdim(x);
  for (std::size_t r = 0; r < 5; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 7; ++c) {
      CHECK(y.at(r * 7 + c) > 0.0);
      total += y.at(r * 7 + c);
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }

  std::vector<double> shifted(x.data().begin(), x.data().end());
  for (double& v : shifted) v += 123.0;
  const Tensor y2 = tape.softmax_lastdim(Tensor({5, 7}, shifted));
  for (std::size_t i = 0; i < y.numel(); ++i)
    CHECK(y2.at(i) == doctest::Approx(y.at(i)).epsilon(1e-12));

  CHECK_THROWS_AS(tape.softmax_lastdim(Tensor({2, 0}, {})), ContractError);
}

TEST_CASE("pointwise and reduction forwards match hand values") {
  Tape tape;
  CHECK(tape.sigmoid(Tensor::scalar(0.0)).scalar_value() == 0.5);
  CHECK(tape.log(Tensor::scalar(std::exp(1.0))).scalar_value() ==
        doctest::Approx(1.0).epsilon(1e-15));
  CHECK_THROWS_AS(tape.log(Tensor::scalar(0.0)), NumericError);
  CHECK(tape.square(Tensor::scalar(-3.0)).scalar_value() == 9.0);

  const Tensor v({4}, {1, 2, 3, 4});
  CHECK(tape.sum(v).scalar_value() == 10.0);
  CHECK(tape.mean(v).scalar_value() == 2.5);
  CHECK_THROWS_AS(tape.mean(Tensor({0}, {})), ContractError);

  const Tensor n = tape.l2norm_lastdim(Tensor({1, 2}, {3, 4}));
  CHECK(n.shape() == Shape{1});
  CHECK(n.at(0) == 5.0);
}

TEST_CASE("cosine similarity handles aligned, opposed, and degenerate rows") {
  Tape tape;
  const Tensor a({4, 3}, {1, 0, 0, 2, 0, 0, 1, 0, 0, 0, 0, 0});
  const Tensor b({4, 3}, {3, 0, 0, -5, 0, 0, 0, 7, 0, 1, 1, 1});
  const Tensor c = tape.cosine_sim_lastdim(a, b);
  CHECK(c.at(0) == 1.0);
  CHECK(c.at(1) == -1.0);
  CHECK(c.at(2) == 0.0);
  CHECK(c.at(3) == 0.0);  // zero-norm row reads as similarity 0
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(c.at(i) <= 1.0);
    CHECK(c.at(i) >= -1.0);
  }
}

TEST_CASE("bilinear sampling interpolates and zero-pads outside the map") {
  Tape tape;
  // 2x2 single-channel map: values 1,2 / 3,4.
  const Tensor src({2, 2, 1}, {1, 2, 3, 4});
  const Tensor at_corner = tape.bilinear_sample_2d(src, {0.0, 0.0});
  CHECK(at_corner.at(0) == 1.0);
  const Tensor at_center = tape.bilinear_sample_2d(src, {0.5, 0.5});
  CHECK(at_center.at(0) == doctest::Approx(2.5));
  const Tensor outside = tape.bilinear_sample_2d(src, {-5.0, 0.0});
  CHECK(outside.at(0) == 0.0);
  // Half outside: only the in-range corners contribute.
  const Tensor edge = tape.bilinear_sample_2d(src, {-0.5, 0.0});
  CHECK(edge.at(0) == doctest::Approx(0.5));

  CHECK_THROWS_AS(tape.bilinear_sample_2d(Tensor({2, 2}, {1, 2, 3, 4}), {0, 0}),
                  ContractError);
}

TEST_CASE("trilinear weights are nonnegative, sum to one, and match hand cases") {
  Tape tape;

  SUBCASE("lattice point concentrates all mass on one corner") {
    const auto r = tape.trilinear_scatter_weights(Tensor({1, 3}, {2.0, 5.0, 7.0}));
    CHECK(r.weights.at(0) == 1.0);
    for (int s = 1; s < 8; ++s) CHECK(r.weights.at(s) == 0.0);
    CHECK(r.corners[0] == 2);
    CHECK(r.corners[1] == 5);
    CHECK(r.corners[2] == 7);
  }

  SUBCASE("cell center splits mass evenly") {
    const auto r = tape.trilinear_scatter_weights(Tensor({1, 3}, {1.5, 2.5, 3.5}));
    for (int s = 0; s < 8; ++s) CHECK(r.weights.at(s) == doctest::Approx(0.125));
  }

  SUBCASE("mixed fractional point matches the worked example") {
    const auto r = tape.trilinear_scatter_weights(Tensor({1, 3}, {1.25, 2.0, 3.5}));
    // Nonzero corners: (1,2,3) and (1,2,4) get 0.375; (2,2,3) and (2,2,4) get 0.125.
    auto weight_at = [&](std::int64_t h, std::int64_t w, std::int64_t z) {
      for (int s = 0; s < 8; ++s) {
        if (r.corners[s * 3] == h && r.corners[s * 3 + 1] == w &&
            r.corners[s * 3 + 2] == z)
          return r.weights.at(static_cast<std::size_t>(s));
      }
      return -1.0;
    };
    CHECK(weight_at(1, 2, 3) == doctest::Approx(0.375));
    CHECK(weight_at(1, 2, 4) == doctest::Approx(0.375));
    CHECK(weight_at(2, 2, 3) == doctest::Approx(0.125));
    CHECK(weight_at(2, 2, 4) == doctest::Approx(0.125));
  }

  SUBCASE("random points: weights nonnegative and exactly normalized") {
    const Tensor pts = random_tensor({64, 3}, 17, -3.0, 9.0);
    const auto r = tape.trilinear_scatter_weights(pts);
    for (std::size_t i = 0; i < 64; ++i) {
      double total = 0.0;
      for (int s = 0; s < 8; ++s) {
        CHECK(r.weights.at(i * 8 + s) >= 0.0);
        total += r.weights.at(i * 8 + s);
      }
      CHECK(std::abs(total - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("backward matches central finite differences for every primitive") {
  SUBCASE("add with broadcast") {
    check_grads(
        [](Tape& t, const std::vector<Tensor>& l) {
          return weighted_sum(t, t.add(l[0], l[1]), 1);
        },
        {random_tensor({3, 4}, 2, -2, 2), random_tensor({4}, 3, -2, 2)});
  }
  SUBCASE("mul with column broadcast") {
    check_grads(
        [](Tape& t, const std::vector<Tensor>& l) {
          return weighted_sum(t, t.mul(l[0], l[1]), 4);
        },
        {random_tensor({3, 4}, 5, -2, 2), random_tensor({3, 1}, 6, -2, 2)});
  }
  SUBCASE("div with column broadcast, denominators away from zero") {
    check_grads(
        [](Tape& t, const std::vector<Tensor>& l) {
          return weighted_sum(t, t.div(l[0], l[1]), 30);
        },
        {random_tensor({3, 4}, 31, -2, 2), random_tensor({3, 1}, 32, 0.5, 2.0)});
  }
  SUBCASE("matmul both operands") {
    check_grads(
        [](Tape& t, const std::vector<Tensor>& l) {
          return weighted_sum(t, t.matmul(l[0], l[1]), 7);
        },
        {random_tensor({3, 4}, 8, -2, 2), random_tensor({4, 2}, 9, -2, 2)});
  }
  SUBCASE("matmul_nt both operands") {
    check_grads(
        [](Tape& t, const std::vector<Tensor>& l) {
          return weighted_sum(t, t.matmul_nt(l[0], l[1]), 10);
        },
        {random_tensor({3, 4}, 11, -2, 2), random_tensor({5, 4}, 12, -2, 2)});
  }
  SUBCASE("gather then scatter_add with duplicate destinations") {
    check_grads(
        [](Tape& t, const std::vector<Tensor>& l) {
          const Tensor g = t.gather(l[0], {0, 2, 2, 1});
          const Tensor s = t.scatter_add(g, {1, 0, 1, 1}, 3);
          return weighted_sum(t, s, 13);
        },
        {random_tensor({3, 2}, 14, -2, 2)});
  }
  SUBCASE("softmax") {
    check_grads(
        [](Tape& t, const std::vector<Tensor>& l) {
          return weighted_sum(t, t.softmax_lastdim(l[0]), 15);
        },
        {random_tensor({4, 5}, 16, -3, 3)});
  }
  SUBCASE("sigmoid, log, square chain") {
    check_grads(
        [](Tape& t, const std::vector<Tensor>& l) {
          return weighted_sum(t, t.log(t.sigmoid(t.square(l[0]))), 17);
        },
        {random_tensor({6}, 18, 0.5, 2.0)});
  }
  SUBCASE("sum and mean") {
    check_grads(
        [](Tape& t, const std::vector<Tensor>& l) {
          return t.add(t.sum(l[0]), t.mean(t.square(l[0])));
        },
        {random_tensor({7}, 19, -2, 2)});
  }
  SUBCASE("l2norm away from the zero vector") {
    check_grads(
        [](Tape& t, const std::vector<Tensor>& l) {
          return weighted_sum(t, t.l2norm_lastdim(l[0]), 20);
        },
        {random_tensor({4, 3}, 21, 0.5, 2.0)});
  }
  SUBCASE("cosine similarity on well-separated rows") {
    check_grads(
        [](Tape& t, const std::vector<Tensor>& l) {
          return weighted_sum(t, t.cosine_sim_lastdim(l[0], l[1]), 22);
        },
        {random_tensor({4, 3}, 23, 0.5, 2.0), random_tensor({4, 3}, 24, -2.0, -0.5)});
  }
  SUBCASE("bilinear sampling into the source map") {
    check_grads(
        [](Tape& t, const std::vector<Tensor>& l) {
          return weighted_sum(
              t, t.bilinear_sample_2d(l[0], {0.25, 0.75, 1.5, 0.25, -0.4, 1.6}), 25);
        },
        {random_tensor({3, 3, 2}, 26, -2, 2)});
  }
  SUBCASE("trilinear weights with respect to the points") {
    // Fractional parts kept in [0.2, 0.8]: the weights are not differentiable
    // on lattice planes.
    check_grads(
        [](Tape& t, const std::vector<Tensor>& l) {
          return weighted_sum(t, t.trilinear_scatter_weights(l[0]).weights, 27);
        },
        {random_tensor({5, 3}, 28, 1.2, 1.8)});
  }
}

TEST_CASE("backward accumulates across reuses and reports untouched leaves as zero") {
  Tape tape;
  const Tensor x = tape.leaf(Tensor({2}, {3.0, -1.0}));
  const Tensor unused = tape.leaf(Tensor({3}, {1.0, 2.0, 3.0}));
  // root = sum(x*x) + sum(x): d/dx = 2x + 1.
  const Tensor root = tape.add(tape.sum(tape.mul(x, x)), tape.sum(x));
  const auto grads = tape.backward(root);
  REQUIRE(grads.size() == 2);
  CHECK(grads.at(x.node()).at(0) == doctest::Approx(7.0));
  CHECK(grads.at(x.node()).at(1) == doctest::Approx(-1.0));
  CHECK(grads.at(unused.node()).at(0) == 0.0);
  CHECK(grads.at(unused.node()).at(1) == 0.0);
  CHECK(grads.at(unused.node()).at(2) == 0.0);
}

TEST_CASE("backward requires a scalar root on the tape") {
  Tape tape;
  const Tensor x = tape.leaf(Tensor({2}, {1.0, 2.0}));
  CHECK_THROWS_AS(tape.backward(x), ContractError);
  CHECK_THROWS_AS(tape.backward(Tensor::scalar(1.0)), ContractError);
}

TEST_CASE("forward_op dispatches the closed op set by name") {
  Tape tape;
  const Tensor a({2}, {1.0, 2.0});
  CHECK(tape.forward_op("add", {a, a}).at(1) == 4.0);
  CHECK(tape.forward_op("div", {a, a}).at(1) == 1.0);
  CHECK(tape.forward_op("sum", {a}).scalar_value() == 3.0);
  const Tensor picked = tape.forward_op("gather", {a, Tensor({1}, {1.0})});
  CHECK(picked.at(0) == 2.0);
  const Tensor spread = tape.forward_op(
      "scatter_add", {a, Tensor({2}, {0.0, 0.0}), Tensor::scalar(2.0)});
  CHECK(spread.at(0) == 3.0);
  CHECK(spread.at(1) == 0.0);
  const Tensor tri =
      tape.forward_op("trilinear_scatter_weights", {Tensor({1, 3}, {0.5, 0.5, 0.5})});
  CHECK(tri.shape() == Shape{1, 8});

  CHECK_THROWS_AS(tape.forward_op("conv2d", {a}), ContractError);
  CHECK_THROWS_AS(tape.forward_op("add", {a}), ContractError);
  CHECK_THROWS_AS(tape.forward_op("gather", {a, Tensor({1}, {0.5})}), ContractError);
}

TEST_CASE("finite differences recover the analytic gradient of a quadratic") {
  const Tensor x = random_tensor({5}, 31, -2, 2);
  const Tensor g = finite_diff(
      [](const Tensor& t) {
        double acc = 0.0;
        for (double v : t.data()) acc += v * v;
        return acc;
      },
      x, 1e-5);
  for (std::size_t i = 0; i < 5; ++i)
    CHECK(close(g.at(i), 2.0 * x.at(i), 1e-8, 1e-10));

  CHECK_THROWS_AS(
      finite_diff([](const Tensor&) { return std::nan(""); }, x, 1e-5),
      NumericError);
  CHECK_THROWS_AS(finite_diff([](const Tensor&) { return 0.0; }, x, 0.0),
                  ContractError);
}

TEST_CASE("identical graphs produce bit-identical values and gradients") {
  auto run = [](std::vector<double>* values, std::vector<double>* grads) {
    Tape tape;
    const Tensor x = tape.leaf(random_tensor({40}, 33, -2, 2));
    const Tensor y = tape.softmax_lastdim(x.reshaped({8, 5}));
    const Tensor s = tape.scatter_add(y.reshaped({40}),
                                      [] {
                                        std::vector<std::int64_t> idx(40);
                                        for (int i = 0; i < 40; ++i) idx[i] = i % 7;
                                        return idx;
                                      }(),
                                      7);
    const Tensor root = tape.mean(tape.square(s));
    const auto g = tape.backward(root);
    values->assign(s.data().begin(), s.data().end());
    const Tensor& gx = g.at(x.node());
    grads->assign(gx.data().begin(), gx.data().end());
  };
  std::vector<double> v1, g1, v2, g2;
  run(&v1, &g1);
  run(&v2, &g2);
  CHECK(std::memcmp(v1.data(), v2.data(), v1.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(double)) == 0);
}
