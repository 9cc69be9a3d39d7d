#pragma once

#include <cstddef>
#include <vector>

#include "morphgrad/tape.hpp"
#include "morphgrad/tensor.hpp"

namespace morphgrad {

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

enum class EwOp { Add, Sub, Mul, Div, Pow };

Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b);
Tensor elementwise(EwOp op, const Tensor& a, double b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor sub(const Tensor& a, double b);
Tensor mul(const Tensor& a, double b);
Tensor div(const Tensor& a, double b);
/// Voxel-wise power with a constant exponent. Fractional exponents require
/// strictly positive bases; negative exponents require nonzero bases.
Tensor pow(const Tensor& base, double exponent);
Tensor pow(const Tensor& base, const Tensor& exponent);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, b); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, b); }

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

enum class Activation { Sigmoid, LeakyRelu };

Tensor activation(Activation kind, const Tensor& x, double param = 0.0);
/// Logistic function, clamped to the open unit interval at f64 resolution so
/// downstream reciprocal powers stay finite.
Tensor sigmoid(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double negative_slope);

/// max(x, floor) with pass-through gradient strictly above the floor.
Tensor clamp_min(const Tensor& x, double floor);

// ---------------------------------------------------------------------------
// Spatial operations on [N, C, D, H, W] tensors
// ---------------------------------------------------------------------------

enum class PadMode { Zero, Replicate };

struct Window3 {
  std::size_t d = 1, h = 1, w = 1;
  std::size_t volume() const { return d * h * w; }
  bool operator==(const Window3&) const = default;
};

/// 3-D cross-correlation (machine-learning convention, no kernel flip),
/// "same" output extents at stride 1. kernel is [Cout, Cin, kd, kh, kw] with
/// odd spatial extents.
Tensor conv3d(const Tensor& input, const Tensor& kernel, PadMode pad,
              std::size_t stride = 1);

/// Per-channel convolution, kernel [C, 1, kd, kh, kw]; no cross-channel
/// mixing.
Tensor conv3d_depthwise(const Tensor& input, const Tensor& kernel, PadMode pad);

/// x + bias[c] broadcast over batch and space; bias is [C].
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

enum class ExtremumKind { Min, Max };

/// Sliding window minimum / maximum per channel. With `offsets` (shape
/// [kd, kh, kw]) the result is min{I(v) - w(v-x)} or max{I(v) + w(v-x)};
/// without, the flat case. Windows are truncated at the volume border.
/// The gradient routes each output voxel to its arg-extremum input voxel
/// (first in row-major scan order on ties).
Tensor sliding_extremum(ExtremumKind kind, const Tensor& input, Window3 window,
                        const Tensor* offsets = nullptr);

namespace detail {
/// O(n*k^3) full window scan: the reference path, also the only one
/// supporting additive offsets.
Tensor sliding_extremum_naive(ExtremumKind kind, const Tensor& input,
                              Window3 window, const Tensor* offsets);
/// Separable axis-by-axis scan for flat windows; bitwise-identical to the
/// naive path including gradient routing.
Tensor sliding_extremum_separable(ExtremumKind kind, const Tensor& input,
                                  Window3 window);
}  // namespace detail

/// Concatenate along the channel axis (axis 1).
Tensor concat_channels(const std::vector<Tensor>& parts);
/// Channels [begin, end) of x.
Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t end);

/// Per-(batch, channel) standardization followed by a learnable per-channel
/// affine map; scale and shift are [C].
Tensor instance_norm(const Tensor& x, const Tensor& scale, const Tensor& shift,
                     double epsilon = 1e-5);

/// Numerically stable softmax over the channel axis.
Tensor softmax_channels(const Tensor& x);

/// Nearest-neighbour x2 upsampling of the three spatial axes.
Tensor upsample_nearest2(const Tensor& x);

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor sum_all(const Tensor& x);   // shape {1}
Tensor mean_all(const Tensor& x);  // shape {1}
/// Sum over every axis except channels (axis 1); result is [C].
Tensor sum_per_channel(const Tensor& x);

}  // namespace morphgrad
