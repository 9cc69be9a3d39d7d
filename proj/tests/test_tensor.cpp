#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <string>
#include <tuple>

#include "morphgrad/gradcheck.hpp"
#include "morphgrad/ops.hpp"
#include "morphgrad/rng.hpp"
#include "morphgrad/tape.hpp"
#include "oracles.hpp"

using namespace morphgrad;

TEST_CASE("elementwise arithmetic basics") {
  CHECK(pow(Tensor::of({4.0}), -1.0)[0] == doctest::Approx(0.25));

  Rng rng(7);
  Tensor img = oracle::random_tensor({2, 3}, rng, 0.2, 2.0);
  Tensor ones = pow(img, 0.0);
  for (std::size_t i = 0; i < ones.numel(); ++i) CHECK(ones[i] == 1.0);

  Tensor q = div(Tensor::of({1.0, 2.0}), Tensor::of({2.0, 4.0}));
  CHECK(q[0] == 0.5);
  CHECK(q[1] == 0.5);

  CHECK_THROWS_AS(add(Tensor::of({1.0}), Tensor::of({1.0, 2.0})), ShapeError);
  try {
    div(Tensor::of({1.0, 1.0}), Tensor::of({1.0, 0.0}));
    FAIL("expected DomainError");
  } catch (const DomainError& e) {
    CHECK(std::string(e.what()).find("index 1") != std::string::npos);
  }
  CHECK_THROWS_AS(pow(Tensor::of({-1.0}), 0.5), DomainError);
  CHECK_THROWS_AS(pow(Tensor::of({0.0}), -1.0), DomainError);
}

TEST_CASE("activations") {
  CHECK(sigmoid(Tensor::of({0.0}))[0] == doctest::Approx(0.5));
  Tensor lr = leaky_relu(Tensor::of({-1.0, 2.0}), 0.01);
  CHECK(lr[0] == doctest::Approx(-0.01));
  CHECK(lr[1] == 2.0);
  // Strictly inside the open unit interval even deep in the tails.
  for (double x : {-50.0, 50.0, -800.0, 800.0}) {
    const double s = sigmoid(Tensor::of({x}))[0];
    CHECK(s > 0.0);
    CHECK(s < 1.0);
  }
}

TEST_CASE("conv3d: constant field under replicate padding") {
  Tensor in = Tensor::full({1, 1, 3, 3, 3}, 1.0);
  Tensor k = Tensor::full({1, 1, 3, 3, 3}, 1.0);
  Tensor out = conv3d(in, k, PadMode::Replicate);
  CHECK(out.shape() == Shape{1, 1, 3, 3, 3});
  for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out[i] == doctest::Approx(27.0));
}

TEST_CASE("conv3d: impulse response is the index-flipped kernel") {
  Rng rng(3);
  Tensor in({1, 1, 5, 5, 5});
  in.mutable_data()[2 * 25 + 2 * 5 + 2] = 1.0;  // center voxel
  Tensor k = oracle::random_tensor({1, 1, 3, 3, 3}, rng);
  Tensor out = conv3d(in, k, PadMode::Zero);
  CHECK(out[2 * 25 + 2 * 5 + 2] == doctest::Approx(k[13]));  // kernel center
  for (std::ptrdiff_t dz = -1; dz <= 1; ++dz)
    for (std::ptrdiff_t dy = -1; dy <= 1; ++dy)
      for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) {
        const std::size_t oi = (2 + dz) * 25 + (2 + dy) * 5 + (2 + dx);
        const std::size_t ki = (1 - dz) * 9 + (1 - dy) * 3 + (1 - dx);
        CHECK(out[oi] == doctest::Approx(k[ki]));
      }
}

TEST_CASE("conv3d matches the nested-loop oracle") {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor in = oracle::random_tensor({1, 1, 5, 5, 5}, rng);
    Tensor k = oracle::random_tensor({1, 1, 3, 3, 3}, rng);
    for (PadMode pad : {PadMode::Zero, PadMode::Replicate}) {
      CHECK(oracle::max_abs_diff(conv3d(in, k, pad), oracle::conv3d(in, k, pad)) < 1e-12);
    }
  }
  // multi-channel, strided, depthwise
  Tensor in = oracle::random_tensor({2, 3, 6, 6, 6}, rng);
  Tensor k = oracle::random_tensor({4, 3, 3, 3, 3}, rng);
  CHECK(oracle::max_abs_diff(conv3d(in, k, PadMode::Replicate, 2),
                             oracle::conv3d(in, k, PadMode::Replicate, 2)) < 1e-12);
  Tensor dk = oracle::random_tensor({3, 1, 3, 3, 3}, rng);
  CHECK(oracle::max_abs_diff(conv3d_depthwise(in, dk, PadMode::Replicate),
                             oracle::conv3d_depthwise(in, dk, PadMode::Replicate)) < 1e-12);

  CHECK_THROWS_AS(conv3d(in, oracle::random_tensor({1, 3, 2, 3, 3}, rng), PadMode::Zero),
                  ConfigError);
}

TEST_CASE("sliding extremum: impulse, constant, oracle equality") {
  Tensor spike({1, 1, 7, 7, 7});
  spike.mutable_data()[3 * 49 + 3 * 7 + 3] = 1.0;
  Tensor dil = sliding_extremum(ExtremumKind::Max, spike, {3, 3, 3});
  for (std::size_t z = 0; z < 7; ++z)
    for (std::size_t y = 0; y < 7; ++y)
      for (std::size_t x = 0; x < 7; ++x) {
        const bool in_box = z >= 2 && z <= 4 && y >= 2 && y <= 4 && x >= 2 && x <= 4;
        CHECK(dil[z * 49 + y * 7 + x] == (in_box ? 1.0 : 0.0));
      }

  Tensor constant = Tensor::full({1, 2, 4, 4, 4}, 3.25);
  Tensor ero = sliding_extremum(ExtremumKind::Min, constant, {3, 3, 3});
  CHECK(oracle::bitwise_equal(ero, constant));

  Rng rng(5);
  for (int trial = 0; trial < 8; ++trial) {
    Tensor vol = oracle::random_tensor({1, 1, 6, 6, 6}, rng);
    for (auto kind : {ExtremumKind::Min, ExtremumKind::Max}) {
      Tensor got = sliding_extremum(kind, vol, {3, 3, 3});
      CHECK(oracle::bitwise_equal(got, oracle::extremum(kind, vol, {3, 3, 3})));
    }
  }
  CHECK_THROWS_AS(sliding_extremum(ExtremumKind::Min, constant, {2, 3, 3}), ConfigError);
}

TEST_CASE("separable fast path matches the naive scan bitwise, gradients included") {
  Rng rng(17);
  for (const Window3 win : {Window3{1, 1, 1}, Window3{3, 3, 3}, Window3{5, 3, 1},
                            Window3{5, 5, 5}}) {
    for (auto kind : {ExtremumKind::Min, ExtremumKind::Max}) {
      Tensor vol = oracle::random_tensor({2, 2, 6, 5, 7}, rng);

      Tape tape_a;
      Tensor va = tape_a.watch(vol);
      Tensor naive = detail::sliding_extremum_naive(kind, va, win, nullptr);
      tape_a.backward(sum_all(mul(naive, naive)));

      Tape tape_b;
      Tensor vb = tape_b.watch(vol);
      Tensor fast = detail::sliding_extremum_separable(kind, vb, win);
      tape_b.backward(sum_all(mul(fast, fast)));

      CHECK(oracle::bitwise_equal(naive.detached(), fast.detached()));
      CHECK(oracle::bitwise_equal(tape_a.grad(va), tape_b.grad(vb)));
    }
  }
}

TEST_CASE("sliding extremum with additive offsets") {
  // A large offset at the window center forces the center voxel to win the
  // max; the impulse spreads it.
  Tensor vol = Tensor::full({1, 1, 5, 5, 5}, 1.0);
  Tensor off({3, 3, 3});
  off.mutable_data()[13] = 2.0;  // center cell
  Tensor out = sliding_extremum(ExtremumKind::Max, vol, {3, 3, 3}, &off);
  for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out[i] == 3.0);
  Tensor out_min = sliding_extremum(ExtremumKind::Min, vol, {3, 3, 3}, &off);
  for (std::size_t i = 0; i < out_min.numel(); ++i) CHECK(out_min[i] == -1.0);

  Rng rng(23);
  Tensor rvol = oracle::random_tensor({1, 2, 5, 5, 5}, rng);
  Tensor roff = oracle::random_tensor({3, 3, 3}, rng, 0.0, 0.5);
  for (auto kind : {ExtremumKind::Min, ExtremumKind::Max}) {
    CHECK(oracle::bitwise_equal(sliding_extremum(kind, rvol, {3, 3, 3}, &roff),
                                oracle::extremum(kind, rvol, {3, 3, 3}, &roff)));
  }
}

TEST_CASE("concat and slice channels") {
  Rng rng(29);
  Tensor a = oracle::random_tensor({2, 2, 3, 3, 3}, rng);
  Tensor b = oracle::random_tensor({2, 3, 3, 3, 3}, rng);
  Tensor cat = concat_channels({a, b});
  CHECK(cat.shape() == Shape{2, 5, 3, 3, 3});
  CHECK(oracle::bitwise_equal(slice_channels(cat, 0, 2), a));
  CHECK(oracle::bitwise_equal(slice_channels(cat, 2, 5), b));
  CHECK_THROWS_AS(concat_channels({a, oracle::random_tensor({2, 2, 4, 3, 3}, rng)}),
                  ShapeError);

  // Gradient of concat splits exactly like slicing the upstream gradient.
  Tape tape;
  Tensor ta = tape.watch(a), tb = tape.watch(b);
  Tensor cat2 = concat_channels({ta, tb});
  Tensor weights = oracle::random_tensor({2, 5, 3, 3, 3}, rng);
  tape.backward(sum_all(mul(cat2, weights)));
  CHECK(oracle::bitwise_equal(tape.grad(ta), slice_channels(weights, 0, 2)));
  CHECK(oracle::bitwise_equal(tape.grad(tb), slice_channels(weights, 2, 5)));
}

TEST_CASE("backward basics") {
  Rng rng(31);
  Tensor x = oracle::random_tensor({2, 3, 2}, rng);
  {
    Tape tape;
    Tensor tx = tape.watch(x);
    tape.backward(sum_all(tx));
    Tensor g = tape.grad(tx);
    for (std::size_t i = 0; i < g.numel(); ++i) CHECK(g[i] == 1.0);
  }
  {
    Tape tape;
    Tensor tx = tape.watch(Tensor::of({1.0, 2.0}));
    tape.backward(sum_all(mul(tx, tx)));
    Tensor g = tape.grad(tx);
    CHECK(g[0] == doctest::Approx(2.0));
    CHECK(g[1] == doctest::Approx(4.0));
  }
  {
    Tape tape;
    Tensor tx = tape.watch(x);
    CHECK_THROWS_AS(tape.backward(mul(tx, 2.0)), UsageError);  // non-scalar loss
  }
  {
    // Mixing tapes is rejected.
    Tape t1, t2;
    Tensor a = t1.watch(x), b = t2.watch(x);
    CHECK_THROWS_AS(add(a, b), UsageError);
  }
}

TEST_CASE("tape invariants: topological parents, gradient buffer shapes") {
  Tape tape;
  Tensor x = tape.watch(Tensor::of({1.0, 2.0, 3.0}));
  Tensor y = mul(x, x);
  Tensor z = add(y, 1.0);
  Tensor loss = sum_all(z);
  for (std::size_t n = 0; n < tape.node_count(); ++n)
    for (int p : tape.parents_of(static_cast<int>(n)))
      CHECK(p < static_cast<int>(n));
  tape.backward(loss);
  for (const Tensor* t : {&x, &y, &z, &loss}) {
    CHECK(tape.has_grad(*t));
    CHECK(tape.grad(*t).shape() == t->shape());
  }
}

TEST_CASE("finite differences: every primitive under 1e-4 relative error") {
  for (const GradCheckResult& r : gradcheck_tensor_ops(12345)) {
    INFO(r.name, " rel err ", r.max_rel_error);
    CHECK(r.max_rel_error < r.threshold);
  }
}

TEST_CASE("instance norm") {
  Tensor constant = Tensor::full({1, 1, 2, 2, 2}, 4.0);
  Tensor out = instance_norm(constant, Tensor::of({1.0}), Tensor::of({0.0}));
  for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out[i] == doctest::Approx(0.0));

  Tensor two({1, 1, 1, 1, 2}, {1.0, 3.0});
  Tensor stdized = instance_norm(two, Tensor::of({1.0}), Tensor::of({0.0}), 1e-15);
  CHECK(stdized[0] == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(stdized[1] == doctest::Approx(1.0).epsilon(1e-9));

  Rng rng(37);
  Tensor x = oracle::random_tensor({2, 3, 4, 4, 4}, rng);
  Tensor normed = instance_norm(x, Tensor::full({3}, 1.0), Tensor({3}), 1e-12);
  const std::size_t m = 64;
  for (std::size_t s = 0; s < 6; ++s) {
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < m; ++i) mean += normed[s * m + i];
    mean /= m;
    for (std::size_t i = 0; i < m; ++i) {
      const double d = normed[s * m + i] - mean;
      var += d * d;
    }
    var /= m;
    CHECK(std::fabs(mean) < 1e-10);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("softmax, upsample, reductions") {
  Rng rng(41);
  Tensor x = oracle::random_tensor({1, 4, 2, 2, 2}, rng, -5.0, 5.0);
  Tensor p = softmax_channels(x);
  for (std::size_t i = 0; i < 8; ++i) {
    double sum = 0.0;
    for (std::size_t c = 0; c < 4; ++c) sum += p[c * 8 + i];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }

  Tensor small({1, 1, 1, 1, 2}, {1.0, 2.0});
  Tensor up = upsample_nearest2(small);
  CHECK(up.shape() == Shape{1, 1, 2, 2, 4});
  CHECK(up[0] == 1.0);
  CHECK(up[3] == 2.0);

  Tensor v({2, 2, 1, 1, 1}, {1.0, 2.0, 3.0, 4.0});
  Tensor per = sum_per_channel(v);
  CHECK(per.shape() == Shape{2});
  CHECK(per[0] == 4.0);  // 1 + 3
  CHECK(per[1] == 6.0);  // 2 + 4
  CHECK(sum_all(v)[0] == 10.0);
  CHECK(mean_all(v)[0] == 2.5);
}

TEST_CASE("shape algebra table") {
  struct Case {
    Shape in, kernel, out;
    std::size_t stride;
  };
  const std::vector<Case> conv_cases{
      {{1, 1, 4, 4, 4}, {2, 1, 3, 3, 3}, {1, 2, 4, 4, 4}, 1},
      {{2, 3, 8, 6, 4}, {5, 3, 3, 3, 3}, {2, 5, 8, 6, 4}, 1},
      {{1, 2, 8, 8, 8}, {4, 2, 3, 3, 3}, {1, 4, 4, 4, 4}, 2},
      {{1, 2, 7, 7, 7}, {4, 2, 1, 1, 1}, {1, 4, 7, 7, 7}, 1},
      {{1, 2, 7, 9, 5}, {4, 2, 3, 3, 3}, {1, 4, 4, 5, 3}, 2},
  };
  Rng rng(43);
  for (const Case& c : conv_cases) {
    Tensor in = oracle::random_tensor(c.in, rng);
    Tensor k = oracle::random_tensor(c.kernel, rng);
    CHECK(conv3d(in, k, PadMode::Replicate, c.stride).shape() == c.out);
  }
  Tensor x = oracle::random_tensor({2, 3, 4, 5, 6}, rng);
  CHECK(sliding_extremum(ExtremumKind::Min, x, {3, 1, 5}).shape() == x.shape());
  CHECK(upsample_nearest2(x).shape() == Shape{2, 3, 8, 10, 12});
  CHECK(sum_per_channel(x).shape() == Shape{3});
  CHECK(sum_all(x).shape() == Shape{1});
  CHECK(concat_channels({x, x}).shape() == Shape{2, 6, 4, 5, 6});
  CHECK(slice_channels(x, 1, 2).shape() == Shape{2, 1, 4, 5, 6});
  CHECK(instance_norm(x, Tensor::full({3}, 1.0), Tensor({3})).shape() == x.shape());
  CHECK(softmax_channels(x).shape() == x.shape());
}

TEST_CASE("determinism: identical runs produce bit-identical values and gradients") {
  auto run = [] {
    Rng rng(99);
    Tensor x = oracle::random_tensor({1, 2, 5, 5, 5}, rng);
    Tensor k = oracle::random_tensor({2, 2, 3, 3, 3}, rng);
    Tape tape;
    Tensor tx = tape.watch(x), tk = tape.watch(k);
    Tensor y = sliding_extremum(ExtremumKind::Max, sigmoid(conv3d(tx, tk, PadMode::Replicate)),
                                {3, 3, 3});
    Tensor loss = sum_all(mul(y, y));
    tape.backward(loss);
    return std::tuple{y.detached(), tape.grad(tx), tape.grad(tk)};
  };
  auto [y1, gx1, gk1] = run();
  auto [y2, gx2, gk2] = run();
  CHECK(oracle::bitwise_equal(y1, y2));
  CHECK(oracle::bitwise_equal(gx1, gx2));
  CHECK(oracle::bitwise_equal(gk1, gk2));
}
