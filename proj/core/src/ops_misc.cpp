#include <cmath>
#include <string>

#include "morphgrad/ops.hpp"

namespace morphgrad {

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw UsageError("concat_channels: no parts");
  const Tensor& first = parts.front();
  if (first.rank() < 2)
    throw ShapeError("concat_channels: rank must be >= 2, got " + shape_str(first.shape()));
  std::size_t channels = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != first.rank())
      throw ShapeError("concat_channels: rank mismatch between parts");
    for (std::size_t ax = 0; ax < p.rank(); ++ax) {
      if (ax == 1) continue;
      if (p.extent(ax) != first.extent(ax))
        throw ShapeError("concat_channels: non-channel extents differ: " +
                         shape_str(p.shape()) + " vs " + shape_str(first.shape()));
    }
    channels += p.extent(1);
  }
  Shape out_shape = first.shape();
  out_shape[1] = channels;
  const std::size_t batch = first.extent(0);
  const std::size_t inner = first.numel() / (batch * first.extent(1));

  std::vector<double> out(shape_numel(out_shape));
  std::size_t coff = 0;
  for (const Tensor& p : parts) {
    const std::size_t pc = p.extent(1);
    auto pv = p.data();
    for (std::size_t n = 0; n < batch; ++n) {
      const double* src = pv.data() + n * pc * inner;
      double* dst = out.data() + (n * channels + coff) * inner;
      std::copy(src, src + pc * inner, dst);
    }
    coff += pc;
  }
  Tensor result(std::move(out_shape), std::move(out));

  std::vector<const Tensor*> ptrs;
  for (const Tensor& p : parts) ptrs.push_back(&p);
  Tape* tape = nullptr;
  for (const Tensor* p : ptrs) {
    Tape* t = common_tape({p});
    if (t && tape && t != tape) throw UsageError("operands were recorded on different tapes");
    if (t) tape = t;
  }
  if (!tape) return result;

  std::vector<int> parent_nodes;
  std::vector<std::size_t> part_channels;
  for (const Tensor& p : parts) {
    parent_nodes.push_back(p.tracked() ? p.node() : -1);
    part_channels.push_back(p.extent(1));
  }
  int node = tape->append(result.shape(), parent_nodes,
    [parent_nodes, part_channels, batch, inner, channels](std::span<const double> g, Tape& t) {
      std::size_t coff = 0;
      for (std::size_t pi = 0; pi < parent_nodes.size(); ++pi) {
        const std::size_t pc = part_channels[pi];
        if (parent_nodes[pi] >= 0) {
          auto& gp = t.grad_buffer(parent_nodes[pi]);
          for (std::size_t n = 0; n < batch; ++n) {
            const double* src = g.data() + (n * channels + coff) * inner;
            double* dst = gp.data() + n * pc * inner;
            for (std::size_t i = 0; i < pc * inner; ++i) dst[i] += src[i];
          }
        }
        coff += pc;
      }
    });
  result.bind(tape, node);
  return result;
}

Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t end) {
  if (x.rank() < 2)
    throw ShapeError("slice_channels: rank must be >= 2, got " + shape_str(x.shape()));
  const std::size_t c = x.extent(1);
  if (begin >= end || end > c)
    throw UsageError("slice_channels: range [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") invalid for " + std::to_string(c) + " channels");
  const std::size_t batch = x.extent(0);
  const std::size_t inner = x.numel() / (batch * c);
  const std::size_t sc = end - begin;
  Shape out_shape = x.shape();
  out_shape[1] = sc;
  std::vector<double> out(shape_numel(out_shape));
  auto xv = x.data();
  for (std::size_t n = 0; n < batch; ++n) {
    const double* src = xv.data() + (n * c + begin) * inner;
    std::copy(src, src + sc * inner, out.data() + n * sc * inner);
  }
  Tensor result(std::move(out_shape), std::move(out));
  Tape* tape = common_tape({&x});
  if (!tape) return result;
  const int xn = x.node();
  int node = tape->append(result.shape(), {xn},
    [xn, begin, batch, c, sc, inner](std::span<const double> g, Tape& t) {
      auto& gx = t.grad_buffer(xn);
      for (std::size_t n = 0; n < batch; ++n) {
        const double* src = g.data() + n * sc * inner;
        double* dst = gx.data() + (n * c + begin) * inner;
        for (std::size_t i = 0; i < sc * inner; ++i) dst[i] += src[i];
      }
    });
  result.bind(tape, node);
  return result;
}

Tensor instance_norm(const Tensor& x, const Tensor& scale, const Tensor& shift,
                     double epsilon) {
  if (x.rank() != 5)
    throw ShapeError("instance_norm: input must be [N,C,D,H,W], got " + shape_str(x.shape()));
  const std::size_t c = x.extent(1);
  if (scale.rank() != 1 || scale.extent(0) != c || shift.rank() != 1 || shift.extent(0) != c)
    throw ShapeError("instance_norm: scale/shift must be [" + std::to_string(c) + "]");
  if (epsilon <= 0.0) throw ConfigError("instance_norm: epsilon must be > 0");
  const std::size_t batch = x.extent(0);
  const std::size_t m = x.extent(2) * x.extent(3) * x.extent(4);
  if (m < 2) throw ConfigError("instance_norm: needs >= 2 voxels per slice");

  const std::size_t slices = batch * c;
  auto mean = std::make_shared<std::vector<double>>(slices);
  auto inv_std = std::make_shared<std::vector<double>>(slices);
  std::vector<double> out(x.numel());
  auto xv = x.data();
  auto sv = scale.data();
  auto bv = shift.data();
  for (std::size_t s = 0; s < slices; ++s) {
    const double* src = xv.data() + s * m;
    double mu = 0.0;
    for (std::size_t i = 0; i < m; ++i) mu += src[i];
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double d = src[i] - mu;
      var += d * d;
    }
    var /= static_cast<double>(m);
    const double istd = 1.0 / std::sqrt(var + epsilon);
    (*mean)[s] = mu;
    (*inv_std)[s] = istd;
    const double gamma = sv[s % c];
    const double beta = bv[s % c];
    double* dst = out.data() + s * m;
    for (std::size_t i = 0; i < m; ++i) dst[i] = (src[i] - mu) * istd * gamma + beta;
  }
  Tensor result(x.shape(), std::move(out));

  Tape* tape = common_tape({&x, &scale, &shift});
  if (!tape) return result;
  const int xn = x.tracked() ? x.node() : -1;
  const int sn = scale.tracked() ? scale.node() : -1;
  const int bn = shift.tracked() ? shift.node() : -1;
  auto xd = x.payload();
  auto sd = scale.payload();
  int node = tape->append(result.shape(), {xn, sn, bn},
    [xn, sn, bn, xd, sd, mean, inv_std, slices, m, c](std::span<const double> g, Tape& t) {
      for (std::size_t s = 0; s < slices; ++s) {
        const double* src = xd->data() + s * m;
        const double* gs = g.data() + s * m;
        const double mu = (*mean)[s];
        const double istd = (*inv_std)[s];
        const double gamma = (*sd)[s % c];
        if (bn >= 0) {
          double acc = 0.0;
          for (std::size_t i = 0; i < m; ++i) acc += gs[i];
          t.grad_buffer(bn)[s % c] += acc;
        }
        if (sn >= 0) {
          double acc = 0.0;
          for (std::size_t i = 0; i < m; ++i) acc += gs[i] * (src[i] - mu) * istd;
          t.grad_buffer(sn)[s % c] += acc;
        }
        if (xn >= 0) {
          double mean_g = 0.0, mean_gx = 0.0;
          for (std::size_t i = 0; i < m; ++i) {
            const double xh = (src[i] - mu) * istd;
            mean_g += gs[i];
            mean_gx += gs[i] * xh;
          }
          mean_g /= static_cast<double>(m);
          mean_gx /= static_cast<double>(m);
          double* gx = t.grad_buffer(xn).data() + s * m;
          for (std::size_t i = 0; i < m; ++i) {
            const double xh = (src[i] - mu) * istd;
            gx[i] += gamma * istd * (gs[i] - mean_g - xh * mean_gx);
          }
        }
      }
    });
  result.bind(tape, node);
  return result;
}

Tensor softmax_channels(const Tensor& x) {
  if (x.rank() < 2)
    throw ShapeError("softmax_channels: rank must be >= 2, got " + shape_str(x.shape()));
  const std::size_t batch = x.extent(0);
  const std::size_t c = x.extent(1);
  const std::size_t inner = x.numel() / (batch * c);
  std::vector<double> out(x.numel());
  auto xv = x.data();
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = n * c * inner + i;
      double mx = xv[base];
      for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, xv[base + k * inner]);
      double norm = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        const double e = std::exp(xv[base + k * inner] - mx);
        out[base + k * inner] = e;
        norm += e;
      }
      for (std::size_t k = 0; k < c; ++k) out[base + k * inner] /= norm;
    }
  Tensor result(x.shape(), std::move(out));
  Tape* tape = common_tape({&x});
  if (!tape) return result;
  const int xn = x.node();
  auto rd = result.payload();
  int node = tape->append(result.shape(), {xn},
    [xn, rd, batch, c, inner](std::span<const double> g, Tape& t) {
      auto& gx = t.grad_buffer(xn);
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t base = n * c * inner + i;
          double dot = 0.0;
          for (std::size_t k = 0; k < c; ++k) dot += g[base + k * inner] * (*rd)[base + k * inner];
          for (std::size_t k = 0; k < c; ++k) {
            const std::size_t j = base + k * inner;
            gx[j] += (*rd)[j] * (g[j] - dot);
          }
        }
    });
  result.bind(tape, node);
  return result;
}

Tensor upsample_nearest2(const Tensor& x) {
  if (x.rank() != 5)
    throw ShapeError("upsample_nearest2: input must be [N,C,D,H,W], got " + shape_str(x.shape()));
  const std::size_t batch = x.extent(0), c = x.extent(1);
  const std::size_t d = x.extent(2), h = x.extent(3), w = x.extent(4);
  const Shape out_shape{batch, c, 2 * d, 2 * h, 2 * w};
  std::vector<double> out(shape_numel(out_shape));
  auto xv = x.data();
  const std::size_t slices = batch * c;
  for (std::size_t s = 0; s < slices; ++s) {
    const double* src = xv.data() + s * d * h * w;
    double* dst = out.data() + s * 8 * d * h * w;
    for (std::size_t z = 0; z < 2 * d; ++z)
      for (std::size_t y = 0; y < 2 * h; ++y)
        for (std::size_t xx = 0; xx < 2 * w; ++xx)
          dst[(z * 2 * h + y) * 2 * w + xx] = src[((z / 2) * h + y / 2) * w + xx / 2];
  }
  Tensor result(out_shape, std::move(out));
  Tape* tape = common_tape({&x});
  if (!tape) return result;
  const int xn = x.node();
  int node = tape->append(result.shape(), {xn},
    [xn, slices, d, h, w](std::span<const double> g, Tape& t) {
      auto& gx = t.grad_buffer(xn);
      for (std::size_t s = 0; s < slices; ++s) {
        const double* src = g.data() + s * 8 * d * h * w;
        double* dst = gx.data() + s * d * h * w;
        for (std::size_t z = 0; z < 2 * d; ++z)
          for (std::size_t y = 0; y < 2 * h; ++y)
            for (std::size_t xx = 0; xx < 2 * w; ++xx)
              dst[((z / 2) * h + y / 2) * w + xx / 2] += src[(z * 2 * h + y) * 2 * w + xx];
      }
    });
  result.bind(tape, node);
  return result;
}

Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor result = Tensor::scalar(acc);
  Tape* tape = common_tape({&x});
  if (!tape) return result;
  const int xn = x.node();
  const std::size_t n = x.numel();
  int node = tape->append(result.shape(), {xn},
    [xn, n](std::span<const double> g, Tape& t) {
      auto& gx = t.grad_buffer(xn);
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[0];
    });
  result.bind(tape, node);
  return result;
}

Tensor mean_all(const Tensor& x) {
  return mul(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_per_channel(const Tensor& x) {
  if (x.rank() < 2)
    throw ShapeError("sum_per_channel: rank must be >= 2, got " + shape_str(x.shape()));
  const std::size_t batch = x.extent(0);
  const std::size_t c = x.extent(1);
  const std::size_t inner = x.numel() / (batch * c);
  std::vector<double> out(c, 0.0);
  auto xv = x.data();
  std::size_t i = 0;
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (std::size_t k = 0; k < inner; ++k, ++i) acc += xv[i];
      out[ch] += acc;
    }
  Tensor result({c}, std::move(out));
  Tape* tape = common_tape({&x});
  if (!tape) return result;
  const int xn = x.node();
  int node = tape->append(result.shape(), {xn},
    [xn, batch, c, inner](std::span<const double> g, Tape& t) {
      auto& gx = t.grad_buffer(xn);
      std::size_t i = 0;
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t k = 0; k < inner; ++k, ++i) gx[i] += g[ch];
    });
  result.bind(tape, node);
  return result;
}

}  // namespace morphgrad
