#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <string>

#include "morphgrad/gradcheck.hpp"
#include "morphgrad/morphology.hpp"
#include "oracles.hpp"

using namespace morphgrad;

namespace {
const StructElement kBox3 = StructElement::flat({3, 3, 3});

Tensor shifted_x(const Tensor& vol) {
  // Shift content one voxel in +x; the vacated plane repeats the border.
  Tensor out(vol.shape());
  auto o = out.mutable_data();
  const std::size_t w = vol.extent(4);
  for (std::size_t row = 0; row < vol.numel() / w; ++row)
    for (std::size_t x = 0; x < w; ++x)
      o[row * w + x] = vol[row * w + (x == 0 ? 0 : x - 1)];
  return out;
}
}  // namespace

TEST_CASE("flat erosion and dilation basics") {
  Tensor constant = Tensor::full({1, 1, 4, 4, 4}, 5.0);
  CHECK(oracle::bitwise_equal(erode_flat(constant, kBox3), constant));

  Tensor spike({1, 1, 7, 7, 7});
  spike.mutable_data()[3 * 49 + 3 * 7 + 3] = 1.0;
  Tensor eroded = erode_flat(spike, kBox3);
  for (std::size_t i = 0; i < eroded.numel(); ++i) CHECK(eroded[i] == 0.0);

  Tensor dilated = dilate_flat(spike, kBox3);
  for (std::size_t z = 0; z < 7; ++z)
    for (std::size_t y = 0; y < 7; ++y)
      for (std::size_t x = 0; x < 7; ++x) {
        const bool in_box = z >= 2 && z <= 4 && y >= 2 && y <= 4 && x >= 2 && x <= 4;
        CHECK(dilated[z * 49 + y * 7 + x] == (in_box ? 1.0 : 0.0));
      }

  Rng rng(101);
  for (int t = 0; t < 10; ++t) {
    Tensor vol = oracle::random_tensor({1, 1, 6, 6, 6}, rng);
    CHECK(oracle::bitwise_equal(erode_flat(vol, kBox3),
                                oracle::extremum(ExtremumKind::Min, vol, {3, 3, 3})));
    CHECK(oracle::bitwise_equal(dilate_flat(vol, kBox3),
                                oracle::extremum(ExtremumKind::Max, vol, {3, 3, 3})));
  }

  Rng r2(102);
  StructElement chm_se = StructElement::chm({3, 3, 3}, 1, r2);
  CHECK_THROWS_AS(erode_flat(constant, chm_se), UsageError);
}

TEST_CASE("duality: dilation is negated erosion of the negated image") {
  Rng rng(103);
  for (int t = 0; t < 10; ++t) {
    Tensor vol = oracle::random_tensor({1, 2, 5, 6, 4}, rng);
    Tensor lhs = dilate_flat(vol, kBox3);
    Tensor rhs = mul(erode_flat(mul(vol, -1.0), kBox3), -1.0);
    CHECK(oracle::bitwise_equal(lhs, rhs));
  }
}

TEST_CASE("monotonicity of the four flat operators") {
  Rng rng(104);
  for (int t = 0; t < 10; ++t) {
    Tensor lo = oracle::random_tensor({1, 1, 5, 5, 5}, rng);
    Tensor hi = lo;
    {
      Tensor bump = oracle::random_tensor({1, 1, 5, 5, 5}, rng, 0.0, 1.0);
      hi = add(lo, bump);
    }
    for (auto op : {erode_flat, dilate_flat, open_flat, close_flat}) {
      Tensor a = op(lo, kBox3), b = op(hi, kBox3);
      for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] <= b[i]);
    }
  }
}

TEST_CASE("translation invariance on the interior") {
  Rng rng(105);
  for (int t = 0; t < 5; ++t) {
    Tensor vol = oracle::random_tensor({1, 1, 9, 9, 9}, rng);
    Tensor moved = shifted_x(vol);
    for (auto op : {erode_flat, dilate_flat, open_flat, close_flat}) {
      Tensor direct = op(moved, kBox3);
      Tensor shifted = shifted_x(op(vol, kBox3));
      // Margin 3: one voxel of shift plus the reach of the composed window.
      for (std::size_t z = 3; z < 6; ++z)
        for (std::size_t y = 3; y < 6; ++y)
          for (std::size_t x = 3; x < 6; ++x)
            CHECK(direct[(z * 9 + y) * 9 + x] == shifted[(z * 9 + y) * 9 + x]);
    }
  }
}

TEST_CASE("opening/closing: spike removal, idempotence, ordering sandwich") {
  Tensor spike({1, 1, 7, 7, 7});
  spike.mutable_data()[3 * 49 + 3 * 7 + 3] = 1.0;
  Tensor opened = open_flat(spike, kBox3);
  for (std::size_t i = 0; i < opened.numel(); ++i) CHECK(opened[i] == 0.0);

  Rng rng(106);
  for (int t = 0; t < 10; ++t) {
    Tensor vol = oracle::random_tensor({1, 1, 6, 6, 6}, rng);
    Tensor once = open_flat(vol, kBox3);
    CHECK(oracle::bitwise_equal(open_flat(once, kBox3), once));
    Tensor closed = close_flat(vol, kBox3);
    CHECK(oracle::bitwise_equal(close_flat(closed, kBox3), closed));
    for (std::size_t i = 0; i < vol.numel(); ++i) {
      CHECK(once[i] <= vol[i]);
      CHECK(vol[i] <= closed[i]);
    }
    // Oracle composition agrees.
    Tensor composed = oracle::extremum(ExtremumKind::Max,
                                       oracle::extremum(ExtremumKind::Min, vol, {3, 3, 3}),
                                       {3, 3, 3});
    CHECK(oracle::bitwise_equal(once, composed));
  }
}

TEST_CASE("chm: constants are fixed points") {
  Rng rng(107);
  StructElement se = StructElement::chm({3, 3, 3}, 2, rng);
  Tensor constant = Tensor::full({1, 2, 4, 4, 4}, 0.7);
  for (auto op : {chm_erode, chm_dilate, chm_open, chm_close}) {
    Tensor out = op(constant, se);
    for (std::size_t i = 0; i < out.numel(); ++i)
      CHECK(std::fabs(out[i] - 0.7) < 1e-12);
  }
}

TEST_CASE("chm: two-voxel window pulls toward the min (erosion) or max (dilation)") {
  // Kernel [0,1,1] over values [9.0, 1.0, 0.5] evaluated at the center:
  // erosion  (1+1)/(1/1 + 1/0.5)      = 2/3
  // dilation (1^2+0.5^2)/(1 + 0.5)    = 1.25/1.5
  Tensor vol({1, 1, 1, 1, 3}, {9.0, 1.0, 0.5});
  Tensor weights({1, 1, 1, 1, 3}, {0.0, 1.0, 1.0});
  StructElement se = StructElement::chm_from_weights({1, 1, 3}, weights);
  CHECK(chm_erode(vol, se)[1] == doctest::Approx(2.0 / 3.0));
  CHECK(chm_dilate(vol, se)[1] == doctest::Approx(1.25 / 1.5));
}

TEST_CASE("chm operators match the loop oracle") {
  Rng rng(108);
  for (int t = 0; t < 6; ++t) {
    Tensor vol = oracle::random_tensor({1, 2, 6, 6, 6}, rng, 0.2, 1.0);
    Tensor w = oracle::random_tensor({2, 1, 3, 3, 3}, rng, 0.01, 0.1);
    StructElement se = StructElement::chm_from_weights({3, 3, 3}, w);
    CHECK(oracle::max_abs_diff(chm_erode(vol, se), oracle::chm(vol, w, -1.0)) < 1e-12);
    CHECK(oracle::max_abs_diff(chm_dilate(vol, se), oracle::chm(vol, w, 1.0)) < 1e-12);
  }
  for (int t = 0; t < 4; ++t) {
    Tensor vol = oracle::random_tensor({1, 1, 5, 5, 5}, rng, 0.2, 1.0);
    Tensor w = oracle::random_tensor({1, 1, 3, 3, 3}, rng, 0.01, 0.1);
    StructElement se = StructElement::chm_from_weights({3, 3, 3}, w);
    CHECK(oracle::max_abs_diff(chm_open(vol, se),
                               oracle::chm(oracle::chm(vol, w, -1.0), w, 1.0)) < 1e-10);
    CHECK(oracle::max_abs_diff(chm_close(vol, se),
                               oracle::chm(oracle::chm(vol, w, 1.0), w, -1.0)) < 1e-10);
  }
}

TEST_CASE("chm orderings: dilate >= erode; open <= close under a uniform kernel") {
  Rng rng(109);
  for (int t = 0; t < 10; ++t) {
    Tensor vol = oracle::random_tensor({1, 1, 5, 5, 5}, rng, 0.2, 1.0);
    Tensor w = oracle::random_tensor({1, 1, 3, 3, 3}, rng, 0.01, 0.1);
    StructElement se = StructElement::chm_from_weights({3, 3, 3}, w);
    Tensor ero = chm_erode(vol, se), dil = chm_dilate(vol, se);
    for (std::size_t i = 0; i < vol.numel(); ++i) CHECK(ero[i] <= dil[i] + 1e-12);

    StructElement uniform = StructElement::chm_from_weights(
        {3, 3, 3}, Tensor::full({1, 1, 3, 3, 3}, 1.0 / 27.0));
    Tensor opened = chm_open(vol, uniform), closed = chm_close(vol, uniform);
    for (std::size_t i = 0; i < vol.numel(); ++i) CHECK(opened[i] <= closed[i] + 1e-12);
  }
}

TEST_CASE("chm_general: specialization, mean at p=0, flat limits") {
  Rng rng(110);
  Tensor vol = oracle::random_tensor({1, 1, 5, 5, 5}, rng, 0.2, 1.0);
  Tensor w = oracle::random_tensor({1, 1, 3, 3, 3}, rng, 0.01, 0.1);
  StructElement se = StructElement::chm_from_weights({3, 3, 3}, w);
  CHECK(oracle::bitwise_equal(chm_general(vol, se, 1.0), chm_dilate(vol, se)));
  CHECK(oracle::bitwise_equal(chm_general(vol, se, -1.0), chm_erode(vol, se)));

  StructElement uniform = StructElement::chm_from_weights(
      {3, 3, 3}, Tensor::full({1, 1, 3, 3, 3}, 1.0 / 27.0));
  Tensor mean = chm_general(vol, uniform, 0.0);
  Tensor direct = oracle::conv3d_depthwise(vol, uniform.weights, PadMode::Replicate);
  CHECK(oracle::max_abs_diff(mean, direct) < 1e-12);

  // Two-level volumes: at p = +-20 the counter-harmonic filter sits within
  // 1e-3 of the flat operators (worst case ~26 * 0.5^20).
  for (int t = 0; t < 5; ++t) {
    Tensor binary({1, 1, 6, 6, 6});
    for (double& v : binary.mutable_data()) v = rng.below(2) ? 1.0 : 0.5;
    CHECK(oracle::max_abs_diff(chm_general(binary, uniform, 20.0),
                               dilate_flat(binary, kBox3)) < 1e-3);
    CHECK(oracle::max_abs_diff(chm_general(binary, uniform, -20.0),
                               erode_flat(binary, kBox3)) < 1e-3);
  }
}

TEST_CASE("chm error contracts") {
  Rng rng(111);
  StructElement se = StructElement::chm({3, 3, 3}, 1, rng);
  Tensor with_zero = Tensor::full({1, 1, 3, 3, 3}, 1.0);
  with_zero.mutable_data()[5] = 0.0;
  try {
    chm_erode(with_zero, se);
    FAIL("expected DomainError");
  } catch (const DomainError& e) {
    CHECK(std::string(e.what()).find("index 5") != std::string::npos);
  }
  CHECK_THROWS_AS(chm_dilate(Tensor::full({1, 1, 3, 3, 3}, -1.0), se), DomainError);

  // A kernel whose weighted reciprocal sums cancel produces a vanishing
  // denominator.
  Tensor wz({1, 1, 1, 1, 3}, {1.0, -1.0, 0.0});
  StructElement cancel = StructElement::chm_from_weights({1, 1, 3}, wz);
  CHECK_THROWS_AS(chm_erode(Tensor::full({1, 1, 1, 1, 4}, 1.0), cancel), NumericalError);

  CHECK_THROWS_AS(chm_erode(Tensor::full({1, 2, 3, 3, 3}, 1.0), se), ShapeError);
  CHECK_THROWS_AS(chm_erode(Tensor::full({1, 1, 3, 3, 3}, 1.0), kBox3), UsageError);
}

TEST_CASE("chm kernel initialization stays near the uniform mean kernel") {
  Rng rng(112);
  StructElement se = StructElement::chm({3, 3, 3}, 4, rng);
  CHECK(se.weights.shape() == Shape{4, 1, 3, 3, 3});
  const double base = 1.0 / 27.0;
  for (double v : se.weights.data()) {
    CHECK(v >= base * 0.9);
    CHECK(v <= base * 1.1);
  }
}

TEST_CASE("gradient checks for all morphological operators") {
  for (const GradCheckResult& r : gradcheck_morphology(777)) {
    INFO(r.name, " rel err ", r.max_rel_error);
    CHECK(r.max_rel_error < r.threshold);
  }
}
