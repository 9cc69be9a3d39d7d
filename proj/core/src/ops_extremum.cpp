#include <cstdint>
#include <string>

#include "morphgrad/ops.hpp"

namespace morphgrad {

namespace {

void check_extremum_args(const Tensor& input, Window3 win, const Tensor* offsets) {
  if (input.rank() != 5)
    throw ShapeError("sliding_extremum: input must be [N,C,D,H,W], got " +
                     shape_str(input.shape()));
  if (win.d % 2 == 0 || win.h % 2 == 0 || win.w % 2 == 0)
    throw ConfigError("sliding_extremum: window extents must be odd, got [" +
                      std::to_string(win.d) + "," + std::to_string(win.h) + "," +
                      std::to_string(win.w) + "]");
  if (offsets) {
    const Shape want{win.d, win.h, win.w};
    if (offsets->shape() != want)
      throw ShapeError("sliding_extremum: offsets must be " + shape_str(want) + ", got " +
                       shape_str(offsets->shape()));
  }
}

struct VolDims {
  std::size_t n, c, d, h, w;
  std::size_t plane() const { return h * w; }
  std::size_t chan() const { return d * plane(); }
};

VolDims vol_dims(const Tensor& t) {
  return {t.extent(0), t.extent(1), t.extent(2), t.extent(3), t.extent(4)};
}

}  // namespace

namespace detail {

Tensor sliding_extremum_naive(ExtremumKind kind, const Tensor& input, Window3 win,
                              const Tensor* offsets) {
  check_extremum_args(input, win, offsets);
  const VolDims dm = vol_dims(input);
  const std::ptrdiff_t rd = static_cast<std::ptrdiff_t>(win.d / 2);
  const std::ptrdiff_t rh = static_cast<std::ptrdiff_t>(win.h / 2);
  const std::ptrdiff_t rw = static_cast<std::ptrdiff_t>(win.w / 2);
  const bool is_min = kind == ExtremumKind::Min;
  const double sign = is_min ? -1.0 : 1.0;

  auto in = input.data();
  const double* off = offsets ? offsets->data().data() : nullptr;
  const std::size_t numel = input.numel();
  std::vector<double> out(numel);
  // Saved for the backward pass: winning input voxel and window cell.
  auto arg_voxel = std::make_shared<std::vector<std::int64_t>>(numel);
  auto arg_cell = std::make_shared<std::vector<std::int32_t>>(off ? numel : 0);

  const std::size_t slices = dm.n * dm.c;
  for (std::size_t s = 0; s < slices; ++s) {
    const double* src = in.data() + s * dm.chan();
    const std::size_t base = s * dm.chan();
    std::size_t o = 0;
    for (std::size_t oz = 0; oz < dm.d; ++oz)
      for (std::size_t oy = 0; oy < dm.h; ++oy)
        for (std::size_t ox = 0; ox < dm.w; ++ox, ++o) {
          double best = 0.0;
          std::size_t best_voxel = 0;
          std::int32_t best_cell = -1;
          // Row-major window scan; strict comparisons keep the first winner.
          std::int32_t cell = 0;
          for (std::size_t dz = 0; dz < win.d; ++dz)
            for (std::size_t dy = 0; dy < win.h; ++dy)
              for (std::size_t dx = 0; dx < win.w; ++dx, ++cell) {
                const std::ptrdiff_t z = static_cast<std::ptrdiff_t>(oz) - rd + static_cast<std::ptrdiff_t>(dz);
                const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy) - rh + static_cast<std::ptrdiff_t>(dy);
                const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox) - rw + static_cast<std::ptrdiff_t>(dx);
                if (z < 0 || z >= static_cast<std::ptrdiff_t>(dm.d) || y < 0 ||
                    y >= static_cast<std::ptrdiff_t>(dm.h) || x < 0 ||
                    x >= static_cast<std::ptrdiff_t>(dm.w))
                  continue;  // window truncated at the border
                const std::size_t vi = static_cast<std::size_t>(z) * dm.plane() +
                                       static_cast<std::size_t>(y) * dm.w +
                                       static_cast<std::size_t>(x);
                const double cand = off ? src[vi] + sign * off[cell] : src[vi];
                if (best_cell < 0 || (is_min ? cand < best : cand > best)) {
                  best = cand;
                  best_voxel = vi;
                  best_cell = cell;
                }
              }
          out[base + o] = best;
          (*arg_voxel)[base + o] = static_cast<std::int64_t>(base + best_voxel);
          if (off) (*arg_cell)[base + o] = best_cell;
        }
  }
  Tensor result(input.shape(), std::move(out));

  Tape* tape = common_tape({&input, offsets});
  if (!tape) return result;
  const int in_node = input.tracked() ? input.node() : -1;
  const int off_node = offsets && offsets->tracked() ? offsets->node() : -1;
  int node = tape->append(result.shape(), {in_node, off_node},
    [in_node, off_node, arg_voxel, arg_cell, sign](std::span<const double> g, Tape& t) {
      if (in_node >= 0) {
        auto& gi = t.grad_buffer(in_node);
        for (std::size_t i = 0; i < g.size(); ++i) gi[(*arg_voxel)[i]] += g[i];
      }
      if (off_node >= 0) {
        auto& go = t.grad_buffer(off_node);
        for (std::size_t i = 0; i < g.size(); ++i) go[(*arg_cell)[i]] += sign * g[i];
      }
    });
  result.bind(tape, node);
  return result;
}

Tensor sliding_extremum_separable(ExtremumKind kind, const Tensor& input, Window3 win) {
  check_extremum_args(input, win, nullptr);
  const VolDims dm = vol_dims(input);
  const bool is_min = kind == ExtremumKind::Min;
  const std::size_t numel = input.numel();

  std::vector<double> val(input.data().begin(), input.data().end());
  auto arg = std::make_shared<std::vector<std::int64_t>>(numel);
  for (std::size_t i = 0; i < numel; ++i) (*arg)[i] = static_cast<std::int64_t>(i);
  std::vector<double> val2(numel);
  std::vector<std::int64_t> arg2(numel);

  // One truncated scan along `axis`; composing x, then y, then z reproduces
  // the naive path's row-major-first tie-breaking exactly.
  auto pass = [&](std::size_t axis, std::size_t k) {
    if (k == 1) return;
    const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(k / 2);
    const std::size_t ext[3] = {dm.d, dm.h, dm.w};
    const std::size_t len = ext[axis];
    const std::size_t stride_by_axis[3] = {dm.plane(), dm.w, 1};
    const std::size_t stride = stride_by_axis[axis];
    const std::size_t slices = dm.n * dm.c;
    for (std::size_t s = 0; s < slices; ++s) {
      const std::size_t base = s * dm.chan();
      // Iterate all lines along `axis` within this channel slice.
      const std::size_t o1 = axis == 0 ? dm.h : dm.d;
      const std::size_t o2 = axis == 2 ? dm.h : dm.w;
      const std::size_t s1 = axis == 0 ? dm.w : dm.plane();
      const std::size_t s2 = axis == 2 ? dm.w : 1;
      for (std::size_t a = 0; a < o1; ++a)
        for (std::size_t b = 0; b < o2; ++b) {
          const std::size_t line = base + a * s1 + b * s2;
          for (std::size_t i = 0; i < len; ++i) {
            const std::size_t lo = static_cast<std::size_t>(
                std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(i) - r));
            const std::size_t hi = std::min(len - 1, i + static_cast<std::size_t>(r));
            std::size_t j = lo;
            double best = val[line + j * stride];
            std::size_t bj = j;
            for (++j; j <= hi; ++j) {
              const double cand = val[line + j * stride];
              if (is_min ? cand < best : cand > best) {
                best = cand;
                bj = j;
              }
            }
            val2[line + i * stride] = best;
            arg2[line + i * stride] = (*arg)[line + bj * stride];
          }
        }
    }
    val.swap(val2);
    arg->swap(arg2);
  };

  pass(2, win.w);
  pass(1, win.h);
  pass(0, win.d);

  Tensor result(input.shape(), std::move(val));
  Tape* tape = common_tape({&input});
  if (!tape) return result;
  const int in_node = input.node();
  int node = tape->append(result.shape(), {in_node},
    [in_node, arg](std::span<const double> g, Tape& t) {
      auto& gi = t.grad_buffer(in_node);
      for (std::size_t i = 0; i < g.size(); ++i) gi[(*arg)[i]] += g[i];
    });
  result.bind(tape, node);
  return result;
}

}  // namespace detail

Tensor sliding_extremum(ExtremumKind kind, const Tensor& input, Window3 window,
                        const Tensor* offsets) {
  if (offsets) return detail::sliding_extremum_naive(kind, input, window, offsets);
  return detail::sliding_extremum_separable(kind, input, window);
}

}  // namespace morphgrad
