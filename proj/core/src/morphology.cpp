#include "morphgrad/morphology.hpp"

#include <cmath>
#include <string>

namespace morphgrad {

namespace {

void check_window(Window3 win) {
  if (win.d % 2 == 0 || win.h % 2 == 0 || win.w % 2 == 0)
    throw ConfigError("struct element window extents must be odd, got [" +
                      std::to_string(win.d) + "," + std::to_string(win.h) + "," +
                      std::to_string(win.w) + "]");
}

void require_flat(const StructElement& se, const char* what) {
  if (se.kind != SeKind::Flat)
    throw UsageError(std::string(what) + ": needs a flat struct element");
}

void require_image(const Tensor& image, const char* what) {
  if (image.rank() != 5)
    throw ShapeError(std::string(what) + ": image must be [N,C,D,H,W], got " +
                     shape_str(image.shape()));
}

void check_positive(const Tensor& image, const char* what) {
  auto v = image.data();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!(v[i] > 0.0))
      throw DomainError(std::string(what) + ": input must be strictly positive, found " +
                        std::to_string(v[i]) + " at flat index " + std::to_string(i));
  }
}

void check_denominator(const Tensor& den, const char* what) {
  auto v = den.data();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (std::fabs(v[i]) < kChmDenominatorFloor)
      throw NumericalError(std::string(what) + ": denominator magnitude " +
                           std::to_string(v[i]) + " below " +
                           std::to_string(kChmDenominatorFloor) + " at flat index " +
                           std::to_string(i));
  }
}

}  // namespace

StructElement StructElement::flat(Window3 window) {
  check_window(window);
  return StructElement{window, SeKind::Flat, Tensor()};
}

StructElement StructElement::chm(Window3 window, std::size_t channels, Rng& rng) {
  check_window(window);
  const double base = 1.0 / static_cast<double>(window.volume());
  Tensor w({channels, 1, window.d, window.h, window.w});
  for (double& v : w.mutable_data()) v = base * (1.0 + rng.uniform(-0.1, 0.1));
  return StructElement{window, SeKind::ChmKernel, std::move(w)};
}

StructElement StructElement::chm_from_weights(Window3 window, Tensor weights) {
  check_window(window);
  const Shape want{weights.extent(0), 1, window.d, window.h, window.w};
  if (weights.rank() != 5 || weights.shape() != want)
    throw ShapeError("chm weights must be [C,1,kd,kh,kw] matching the window, got " +
                     shape_str(weights.shape()));
  return StructElement{window, SeKind::ChmKernel, std::move(weights)};
}

void StructElement::validate(std::size_t channels) const {
  check_window(window);
  if (kind == SeKind::Flat) {
    if (weights.defined())
      throw ConfigError("flat struct element must not carry weights");
    return;
  }
  if (!weights.defined())
    throw ConfigError("chm struct element needs weights");
  const Shape want{channels, 1, window.d, window.h, window.w};
  if (weights.shape() != want)
    throw ShapeError("chm weights " + shape_str(weights.shape()) + " do not match " +
                     shape_str(want));
  if (!weights.detached().all_finite())
    throw NumericalError("chm weights contain non-finite values");
}

Tensor erode_flat(const Tensor& image, const StructElement& se) {
  require_image(image, "erode_flat");
  require_flat(se, "erode_flat");
  return sliding_extremum(ExtremumKind::Min, image, se.window);
}

Tensor dilate_flat(const Tensor& image, const StructElement& se) {
  require_image(image, "dilate_flat");
  require_flat(se, "dilate_flat");
  return sliding_extremum(ExtremumKind::Max, image, se.window);
}

Tensor open_flat(const Tensor& image, const StructElement& se) {
  return dilate_flat(erode_flat(image, se), se);
}

Tensor close_flat(const Tensor& image, const StructElement& se) {
  return erode_flat(dilate_flat(image, se), se);
}

Tensor chm_general(const Tensor& image, const StructElement& se, double p) {
  require_image(image, "chm");
  if (se.kind != SeKind::ChmKernel)
    throw UsageError("chm: needs a ChmKernel struct element");
  se.validate(image.extent(1));
  check_positive(image, "chm");
  Tensor numerator = conv3d_depthwise(pow(image, p + 1.0), se.weights, PadMode::Replicate);
  Tensor denominator = conv3d_depthwise(pow(image, p), se.weights, PadMode::Replicate);
  check_denominator(denominator, "chm");
  return div(numerator, denominator);
}

Tensor chm_erode(const Tensor& image, const StructElement& se) {
  return chm_general(image, se, -1.0);
}

Tensor chm_dilate(const Tensor& image, const StructElement& se) {
  return chm_general(image, se, 1.0);
}

namespace {
void check_intermediate_positive(const Tensor& t, const char* what) {
  auto v = t.data();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!(v[i] > 0.0))
      throw NumericalError(std::string(what) + ": intermediate value " + std::to_string(v[i]) +
                           " is not positive at flat index " + std::to_string(i));
  }
}
}  // namespace

Tensor chm_open(const Tensor& image, const StructElement& se) {
  Tensor eroded = chm_erode(image, se);
  check_intermediate_positive(eroded, "chm_open");
  return chm_dilate(eroded, se);
}

Tensor chm_close(const Tensor& image, const StructElement& se) {
  Tensor dilated = chm_dilate(image, se);
  check_intermediate_positive(dilated, "chm_close");
  return chm_erode(dilated, se);
}

}  // namespace morphgrad
