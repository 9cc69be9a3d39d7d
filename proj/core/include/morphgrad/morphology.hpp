#pragma once

#include "morphgrad/ops.hpp"
#include "morphgrad/rng.hpp"
#include "morphgrad/tensor.hpp"

namespace morphgrad {

/// Inputs to the counter-harmonic operators are clamped to at least this
/// value by the surrounding block, guarding reciprocal powers.
inline constexpr double kChmInputFloor = 1e-7;
/// A counter-harmonic denominator smaller than this in magnitude aborts the
/// operation.
inline constexpr double kChmDenominatorFloor = 1e-12;

enum class SeKind { Flat, ChmKernel };

/// Morphological window. Flat carries no weights (additive offsets are
/// identically zero, making erosion/dilation plain sliding min/max). A
/// ChmKernel holds one learnable [1,kd,kh,kw] kernel per channel, applied
/// depthwise.
struct StructElement {
  Window3 window;
  SeKind kind = SeKind::Flat;
  Tensor weights;  // [C,1,kd,kh,kw] iff kind == ChmKernel

  static StructElement flat(Window3 window);
  /// Learnable kernel initialised to 1/(kd*kh*kw) with +-10% uniform noise.
  static StructElement chm(Window3 window, std::size_t channels, Rng& rng);
  static StructElement chm_from_weights(Window3 window, Tensor weights);

  void validate(std::size_t channels) const;
};

// Flat operators: sliding window minimum / maximum and their compositions.
Tensor erode_flat(const Tensor& image, const StructElement& se);
Tensor dilate_flat(const Tensor& image, const StructElement& se);
Tensor open_flat(const Tensor& image, const StructElement& se);   // dilate(erode(.))
Tensor close_flat(const Tensor& image, const StructElement& se);  // erode(dilate(.))

/// Counter-harmonic filter (I^{p+1} * w) / (I^p * w) with depthwise
/// convolutions and replicate padding. p = -1 gives the erosion filter,
/// p = +1 the dilation filter; large |p| approaches the flat operators.
/// The image must be strictly positive.
Tensor chm_general(const Tensor& image, const StructElement& se, double p);
Tensor chm_erode(const Tensor& image, const StructElement& se);
Tensor chm_dilate(const Tensor& image, const StructElement& se);
Tensor chm_open(const Tensor& image, const StructElement& se);
Tensor chm_close(const Tensor& image, const StructElement& se);

}  // namespace morphgrad
