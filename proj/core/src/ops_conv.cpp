#include <algorithm>
#include <string>

#include "gemm.hpp"
#include "morphgrad/ops.hpp"

namespace morphgrad {

namespace {

struct ConvDims {
  std::size_t n, cin, d, h, w;        // input
  std::size_t cout, kd, kh, kw;       // kernel
  std::size_t stride;
  std::size_t od, oh, ow;             // output
  std::size_t rows() const { return od * oh * ow; }
  std::size_t cols() const { return cin * kd * kh * kw; }
};

void check_window_odd(const char* what, std::size_t kd, std::size_t kh, std::size_t kw) {
  if (kd % 2 == 0 || kh % 2 == 0 || kw % 2 == 0)
    throw ConfigError(std::string(what) + ": window extents must be odd, got [" +
                      std::to_string(kd) + "," + std::to_string(kh) + "," +
                      std::to_string(kw) + "]");
}

ConvDims conv_dims(const Tensor& input, const Tensor& kernel, std::size_t stride,
                   bool depthwise) {
  if (input.rank() != 5)
    throw ShapeError("conv3d: input must be [N,C,D,H,W], got " + shape_str(input.shape()));
  if (kernel.rank() != 5)
    throw ShapeError("conv3d: kernel must be rank 5, got " + shape_str(kernel.shape()));
  if (stride == 0) throw ConfigError("conv3d: stride must be >= 1");
  ConvDims dm;
  dm.n = input.extent(0);
  dm.cin = input.extent(1);
  dm.d = input.extent(2);
  dm.h = input.extent(3);
  dm.w = input.extent(4);
  dm.cout = kernel.extent(0);
  dm.kd = kernel.extent(2);
  dm.kh = kernel.extent(3);
  dm.kw = kernel.extent(4);
  dm.stride = stride;
  check_window_odd("conv3d", dm.kd, dm.kh, dm.kw);
  if (depthwise) {
    if (kernel.extent(0) != dm.cin || kernel.extent(1) != 1)
      throw ShapeError("conv3d_depthwise: kernel must be [C,1,kd,kh,kw] with C=" +
                       std::to_string(dm.cin) + ", got " + shape_str(kernel.shape()));
  } else if (kernel.extent(1) != dm.cin) {
    throw ShapeError("conv3d: kernel input channels " + std::to_string(kernel.extent(1)) +
                     " do not match input channels " + std::to_string(dm.cin));
  }
  dm.od = (dm.d - 1) / stride + 1;
  dm.oh = (dm.h - 1) / stride + 1;
  dm.ow = (dm.w - 1) / stride + 1;
  return dm;
}

inline std::ptrdiff_t clamp_idx(std::ptrdiff_t v, std::ptrdiff_t hi) {
  return v < 0 ? 0 : (v > hi ? hi : v);
}

// Gathers one batch slice into a [rows x cols] patch matrix.
void im2col(const double* in, const ConvDims& dm, PadMode pad, double* col) {
  const std::ptrdiff_t rd = static_cast<std::ptrdiff_t>(dm.kd / 2);
  const std::ptrdiff_t rh = static_cast<std::ptrdiff_t>(dm.kh / 2);
  const std::ptrdiff_t rw = static_cast<std::ptrdiff_t>(dm.kw / 2);
  const std::size_t plane = dm.h * dm.w;
  const std::size_t chan = dm.d * plane;
  std::size_t row = 0;
  for (std::size_t oz = 0; oz < dm.od; ++oz)
    for (std::size_t oy = 0; oy < dm.oh; ++oy)
      for (std::size_t ox = 0; ox < dm.ow; ++ox, ++row) {
        double* dst = col + row * dm.cols();
        const std::ptrdiff_t bz = static_cast<std::ptrdiff_t>(oz * dm.stride) - rd;
        const std::ptrdiff_t by = static_cast<std::ptrdiff_t>(oy * dm.stride) - rh;
        const std::ptrdiff_t bx = static_cast<std::ptrdiff_t>(ox * dm.stride) - rw;
        for (std::size_t c = 0; c < dm.cin; ++c) {
          const double* src = in + c * chan;
          for (std::size_t dz = 0; dz < dm.kd; ++dz)
            for (std::size_t dy = 0; dy < dm.kh; ++dy)
              for (std::size_t dx = 0; dx < dm.kw; ++dx, ++dst) {
                const std::ptrdiff_t z = bz + static_cast<std::ptrdiff_t>(dz);
                const std::ptrdiff_t y = by + static_cast<std::ptrdiff_t>(dy);
                const std::ptrdiff_t x = bx + static_cast<std::ptrdiff_t>(dx);
                if (pad == PadMode::Zero) {
                  const bool in_range = z >= 0 && z < static_cast<std::ptrdiff_t>(dm.d) &&
                                        y >= 0 && y < static_cast<std::ptrdiff_t>(dm.h) &&
                                        x >= 0 && x < static_cast<std::ptrdiff_t>(dm.w);
                  *dst = in_range ? src[static_cast<std::size_t>(z) * plane +
                                        static_cast<std::size_t>(y) * dm.w +
                                        static_cast<std::size_t>(x)]
                                  : 0.0;
                } else {
                  const std::size_t cz = static_cast<std::size_t>(clamp_idx(z, static_cast<std::ptrdiff_t>(dm.d) - 1));
                  const std::size_t cy = static_cast<std::size_t>(clamp_idx(y, static_cast<std::ptrdiff_t>(dm.h) - 1));
                  const std::size_t cx = static_cast<std::size_t>(clamp_idx(x, static_cast<std::ptrdiff_t>(dm.w) - 1));
                  *dst = src[cz * plane + cy * dm.w + cx];
                }
              }
        }
      }
}

// Scatter-add of a patch-matrix gradient back onto one input slice; the
// adjoint of im2col (replicate padding accumulates onto clamped voxels).
void col2im_add(const double* col, const ConvDims& dm, PadMode pad, double* gin) {
  const std::ptrdiff_t rd = static_cast<std::ptrdiff_t>(dm.kd / 2);
  const std::ptrdiff_t rh = static_cast<std::ptrdiff_t>(dm.kh / 2);
  const std::ptrdiff_t rw = static_cast<std::ptrdiff_t>(dm.kw / 2);
  const std::size_t plane = dm.h * dm.w;
  const std::size_t chan = dm.d * plane;
  std::size_t row = 0;
  for (std::size_t oz = 0; oz < dm.od; ++oz)
    for (std::size_t oy = 0; oy < dm.oh; ++oy)
      for (std::size_t ox = 0; ox < dm.ow; ++ox, ++row) {
        const double* src = col + row * dm.cols();
        const std::ptrdiff_t bz = static_cast<std::ptrdiff_t>(oz * dm.stride) - rd;
        const std::ptrdiff_t by = static_cast<std::ptrdiff_t>(oy * dm.stride) - rh;
        const std::ptrdiff_t bx = static_cast<std::ptrdiff_t>(ox * dm.stride) - rw;
        for (std::size_t c = 0; c < dm.cin; ++c) {
          double* dst = gin + c * chan;
          for (std::size_t dz = 0; dz < dm.kd; ++dz)
            for (std::size_t dy = 0; dy < dm.kh; ++dy)
              for (std::size_t dx = 0; dx < dm.kw; ++dx, ++src) {
                std::ptrdiff_t z = bz + static_cast<std::ptrdiff_t>(dz);
                std::ptrdiff_t y = by + static_cast<std::ptrdiff_t>(dy);
                std::ptrdiff_t x = bx + static_cast<std::ptrdiff_t>(dx);
                if (pad == PadMode::Zero) {
                  if (z < 0 || z >= static_cast<std::ptrdiff_t>(dm.d) || y < 0 ||
                      y >= static_cast<std::ptrdiff_t>(dm.h) || x < 0 ||
                      x >= static_cast<std::ptrdiff_t>(dm.w))
                    continue;
                } else {
                  z = clamp_idx(z, static_cast<std::ptrdiff_t>(dm.d) - 1);
                  y = clamp_idx(y, static_cast<std::ptrdiff_t>(dm.h) - 1);
                  x = clamp_idx(x, static_cast<std::ptrdiff_t>(dm.w) - 1);
                }
                dst[static_cast<std::size_t>(z) * plane + static_cast<std::size_t>(y) * dm.w +
                    static_cast<std::size_t>(x)] += *src;
              }
        }
      }
}

}  // namespace

Tensor conv3d(const Tensor& input, const Tensor& kernel, PadMode pad, std::size_t stride) {
  const ConvDims dm = conv_dims(input, kernel, stride, /*depthwise=*/false);
  const std::size_t rows = dm.rows(), cols = dm.cols();
  const std::size_t in_slice = dm.cin * dm.d * dm.h * dm.w;
  const std::size_t out_slice = dm.cout * rows;

  std::vector<double> out(dm.n * out_slice, 0.0);
  {
    std::vector<double> col(rows * cols);
    std::vector<double> tmp(rows * dm.cout);
    for (std::size_t n = 0; n < dm.n; ++n) {
      im2col(input.data().data() + n * in_slice, dm, pad, col.data());
      std::fill(tmp.begin(), tmp.end(), 0.0);
      detail::gemm_nt(col.data(), kernel.data().data(), tmp.data(), rows, dm.cout, cols);
      double* dst = out.data() + n * out_slice;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t co = 0; co < dm.cout; ++co)
          dst[co * rows + r] = tmp[r * dm.cout + co];
    }
  }
  Tensor result({dm.n, dm.cout, dm.od, dm.oh, dm.ow}, std::move(out));

  Tape* tape = common_tape({&input, &kernel});
  if (!tape) return result;
  const int in_node = input.tracked() ? input.node() : -1;
  const int k_node = kernel.tracked() ? kernel.node() : -1;
  auto in_data = input.payload();
  auto k_data = kernel.payload();
  int node = tape->append(result.shape(), {in_node, k_node},
    [dm, pad, in_node, k_node, in_data, k_data, rows, cols, in_slice, out_slice](
        std::span<const double> g, Tape& t) {
      std::vector<double> col;
      if (k_node >= 0) col.resize(rows * cols);
      std::vector<double> dcol;
      if (in_node >= 0) dcol.resize(rows * cols);
      for (std::size_t n = 0; n < dm.n; ++n) {
        const double* gn = g.data() + n * out_slice;  // [Cout x rows]
        if (k_node >= 0) {
          im2col(in_data->data() + n * in_slice, dm, pad, col.data());
          detail::gemm_nn(gn, col.data(), t.grad_buffer(k_node).data(), dm.cout, cols, rows);
        }
        if (in_node >= 0) {
          std::fill(dcol.begin(), dcol.end(), 0.0);
          detail::gemm_tn(gn, k_data->data(), dcol.data(), rows, cols, dm.cout);
          col2im_add(dcol.data(), dm, pad, t.grad_buffer(in_node).data() + n * in_slice);
        }
      }
    });
  result.bind(tape, node);
  return result;
}

Tensor conv3d_depthwise(const Tensor& input, const Tensor& kernel, PadMode pad) {
  const ConvDims dm = conv_dims(input, kernel, 1, /*depthwise=*/true);
  const std::ptrdiff_t rd = static_cast<std::ptrdiff_t>(dm.kd / 2);
  const std::ptrdiff_t rh = static_cast<std::ptrdiff_t>(dm.kh / 2);
  const std::ptrdiff_t rw = static_cast<std::ptrdiff_t>(dm.kw / 2);
  const std::size_t plane = dm.h * dm.w;
  const std::size_t chan = dm.d * plane;
  const std::size_t kvol = dm.kd * dm.kh * dm.kw;
  const std::size_t slices = dm.n * dm.cin;

  std::vector<double> out(input.numel(), 0.0);
  auto in = input.data();
  auto kw_ = kernel.data();
  for (std::size_t s = 0; s < slices; ++s) {
    const std::size_t c = s % dm.cin;
    const double* src = in.data() + s * chan;
    const double* kc = kw_.data() + c * kvol;
    double* dst = out.data() + s * chan;
    for (std::size_t oz = 0; oz < dm.d; ++oz)
      for (std::size_t oy = 0; oy < dm.h; ++oy)
        for (std::size_t ox = 0; ox < dm.w; ++ox) {
          double acc = 0.0;
          std::size_t ki = 0;
          for (std::size_t dz = 0; dz < dm.kd; ++dz)
            for (std::size_t dy = 0; dy < dm.kh; ++dy)
              for (std::size_t dx = 0; dx < dm.kw; ++dx, ++ki) {
                const std::ptrdiff_t z = static_cast<std::ptrdiff_t>(oz) - rd + static_cast<std::ptrdiff_t>(dz);
                const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy) - rh + static_cast<std::ptrdiff_t>(dy);
                const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox) - rw + static_cast<std::ptrdiff_t>(dx);
                double v;
                if (pad == PadMode::Zero) {
                  if (z < 0 || z >= static_cast<std::ptrdiff_t>(dm.d) || y < 0 ||
                      y >= static_cast<std::ptrdiff_t>(dm.h) || x < 0 ||
                      x >= static_cast<std::ptrdiff_t>(dm.w))
                    continue;
                  v = src[static_cast<std::size_t>(z) * plane + static_cast<std::size_t>(y) * dm.w + static_cast<std::size_t>(x)];
                } else {
                  const std::size_t cz = static_cast<std::size_t>(clamp_idx(z, static_cast<std::ptrdiff_t>(dm.d) - 1));
                  const std::size_t cy = static_cast<std::size_t>(clamp_idx(y, static_cast<std::ptrdiff_t>(dm.h) - 1));
                  const std::size_t cx = static_cast<std::size_t>(clamp_idx(x, static_cast<std::ptrdiff_t>(dm.w) - 1));
                  v = src[cz * plane + cy * dm.w + cx];
                }
                acc += v * kc[ki];
              }
          dst[oz * plane + oy * dm.w + ox] = acc;
        }
  }
  Tensor result(input.shape(), std::move(out));

  Tape* tape = common_tape({&input, &kernel});
  if (!tape) return result;
  const int in_node = input.tracked() ? input.node() : -1;
  const int k_node = kernel.tracked() ? kernel.node() : -1;
  auto in_data = input.payload();
  auto k_data = kernel.payload();
  int node = tape->append(result.shape(), {in_node, k_node},
    [dm, pad, in_node, k_node, in_data, k_data, rd, rh, rw, plane, chan, kvol, slices](
        std::span<const double> g, Tape& t) {
      double* gin = in_node >= 0 ? t.grad_buffer(in_node).data() : nullptr;
      double* gk = k_node >= 0 ? t.grad_buffer(k_node).data() : nullptr;
      for (std::size_t s = 0; s < slices; ++s) {
        const std::size_t c = s % dm.cin;
        const double* src = in_data->data() + s * chan;
        const double* kc = k_data->data() + c * kvol;
        const double* go = g.data() + s * chan;
        for (std::size_t oz = 0; oz < dm.d; ++oz)
          for (std::size_t oy = 0; oy < dm.h; ++oy)
            for (std::size_t ox = 0; ox < dm.w; ++ox) {
              const double gv = go[oz * plane + oy * dm.w + ox];
              if (gv == 0.0) continue;
              std::size_t ki = 0;
              for (std::size_t dz = 0; dz < dm.kd; ++dz)
                for (std::size_t dy = 0; dy < dm.kh; ++dy)
                  for (std::size_t dx = 0; dx < dm.kw; ++dx, ++ki) {
                    std::ptrdiff_t z = static_cast<std::ptrdiff_t>(oz) - rd + static_cast<std::ptrdiff_t>(dz);
                    std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy) - rh + static_cast<std::ptrdiff_t>(dy);
                    std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox) - rw + static_cast<std::ptrdiff_t>(dx);
                    if (pad == PadMode::Zero) {
                      if (z < 0 || z >= static_cast<std::ptrdiff_t>(dm.d) || y < 0 ||
                          y >= static_cast<std::ptrdiff_t>(dm.h) || x < 0 ||
                          x >= static_cast<std::ptrdiff_t>(dm.w))
                        continue;
                    } else {
                      z = clamp_idx(z, static_cast<std::ptrdiff_t>(dm.d) - 1);
                      y = clamp_idx(y, static_cast<std::ptrdiff_t>(dm.h) - 1);
                      x = clamp_idx(x, static_cast<std::ptrdiff_t>(dm.w) - 1);
                    }
                    const std::size_t vi = static_cast<std::size_t>(z) * plane +
                                           static_cast<std::size_t>(y) * dm.w +
                                           static_cast<std::size_t>(x);
                    if (gin) gin[s * chan + vi] += gv * kc[ki];
                    if (gk) gk[c * kvol + ki] += gv * src[vi];
                  }
            }
      }
    });
  result.bind(tape, node);
  return result;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() < 2)
    throw ShapeError("add_channel_bias: input rank must be >= 2, got " + shape_str(x.shape()));
  const std::size_t c = x.extent(1);
  if (bias.rank() != 1 || bias.extent(0) != c)
    throw ShapeError("add_channel_bias: bias must be [" + std::to_string(c) + "], got " +
                     shape_str(bias.shape()));
  const std::size_t batch = x.extent(0);
  const std::size_t inner = x.numel() / (batch * c);
  std::vector<double> out(x.numel());
  auto xv = x.data();
  auto bv = bias.data();
  std::size_t i = 0;
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double b = bv[ch];
      for (std::size_t k = 0; k < inner; ++k, ++i) out[i] = xv[i] + b;
    }
  Tensor result(x.shape(), std::move(out));
  Tape* tape = common_tape({&x, &bias});
  if (!tape) return result;
  const int xn = x.tracked() ? x.node() : -1;
  const int bn = bias.tracked() ? bias.node() : -1;
  int node = tape->append(result.shape(), {xn, bn},
    [xn, bn, batch, c, inner](std::span<const double> g, Tape& t) {
      if (xn >= 0) {
        auto& gx = t.grad_buffer(xn);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bn >= 0) {
        auto& gb = t.grad_buffer(bn);
        std::size_t i = 0;
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            for (std::size_t k = 0; k < inner; ++k, ++i) acc += g[i];
            gb[ch] += acc;
          }
      }
    });
  result.bind(tape, node);
  return result;
}

}  // namespace morphgrad
