#include "morphgrad/blocks.hpp"

#include <cassert>
#include <cmath>
#include <string>

namespace morphgrad {

const char* pathway_name(PathwayOp op) {
  switch (op) {
    case PathwayOp::Erosion: return "erosion";
    case PathwayOp::Dilation: return "dilation";
    case PathwayOp::Opening: return "opening";
    case PathwayOp::Closing: return "closing";
  }
  return "?";
}

void MorphBlockConfig::validate() const {
  if (in_channels == 0 || out_channels == 0)
    throw ConfigError("morph block: channel counts must be positive");
  if (pathways.empty()) throw ConfigError("morph block: needs at least one pathway");
  if (out_channels % pathways.size() != 0)
    throw ConfigError("morph block: out_channels " + std::to_string(out_channels) +
                      " not divisible by " + std::to_string(pathways.size()) + " pathways");
  if (window.d % 2 == 0 || window.h % 2 == 0 || window.w % 2 == 0)
    throw ConfigError("morph block: window extents must be odd");
}

namespace {

Tensor he_uniform_kernel(Shape shape, Rng& rng) {
  std::size_t fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  Tensor k(std::move(shape));
  for (double& v : k.mutable_data()) v = rng.uniform(-bound, bound);
  return k;
}

Tensor apply_morph(const Tensor& x, const MorphBlockConfig& cfg, PathwayOp op,
                   const MorphPathwayParams& params) {
  if (cfg.op_impl == OpImpl::NonLearnable) {
    const StructElement se = StructElement::flat(cfg.window);
    switch (op) {
      case PathwayOp::Erosion: return erode_flat(x, se);
      case PathwayOp::Dilation: return dilate_flat(x, se);
      case PathwayOp::Opening: return open_flat(x, se);
      case PathwayOp::Closing: return close_flat(x, se);
    }
  }
  const StructElement se = StructElement::chm_from_weights(cfg.window, params.se_weights);
  switch (op) {
    case PathwayOp::Erosion: return chm_erode(x, se);
    case PathwayOp::Dilation: return chm_dilate(x, se);
    case PathwayOp::Opening: return chm_open(x, se);
    case PathwayOp::Closing: return chm_close(x, se);
  }
  throw UsageError("unknown pathway op");
}

}  // namespace

MorphPathwayParams init_pathway_params(const MorphBlockConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t reduce = cfg.effective_reduce();
  const std::size_t out = cfg.pathway_out_channels();
  MorphPathwayParams p;
  p.conv1_kernel = he_uniform_kernel({reduce, cfg.in_channels, 3, 3, 3}, rng);
  p.conv1_bias = Tensor({reduce});
  p.conv2_kernel = he_uniform_kernel({out, reduce, 3, 3, 3}, rng);
  p.conv2_bias = Tensor({out});
  if (cfg.op_impl == OpImpl::Chm) {
    p.se_weights = StructElement::chm(cfg.window, reduce, rng).weights;
  }
  return p;
}

MorphBlockParams init_block_params(const MorphBlockConfig& cfg, Rng& rng) {
  cfg.validate();
  MorphBlockParams p;
  for (std::size_t i = 0; i < cfg.pathways.size(); ++i)
    p.pathways.push_back(init_pathway_params(cfg, rng));
  return p;
}

std::size_t block_parameter_count(const MorphBlockConfig& cfg) {
  cfg.validate();
  const std::size_t reduce = cfg.effective_reduce();
  const std::size_t out = cfg.pathway_out_channels();
  std::size_t per_pathway = reduce * cfg.in_channels * 27 + reduce  // conv1
                          + out * reduce * 27 + out;                // conv2
  if (cfg.op_impl == OpImpl::Chm) per_pathway += reduce * cfg.window.volume();
  return per_pathway * cfg.pathways.size();
}

Tensor morph_pathway_forward_with(const Tensor& x, const MorphBlockConfig& cfg,
                                  const MorphPathwayParams& params,
                                  const MorphOpFn& morph_op) {
  cfg.validate();
  if (x.rank() != 5 || x.extent(1) != cfg.in_channels)
    throw ShapeError("morph pathway: input " + shape_str(x.shape()) + " does not carry " +
                     std::to_string(cfg.in_channels) + " channels");
  Tensor h = add_channel_bias(conv3d(x, params.conv1_kernel, PadMode::Replicate),
                              params.conv1_bias);
  Tensor pre = sigmoid(h);
  if (cfg.op_impl == OpImpl::Chm) pre = clamp_min(pre, kChmInputFloor);
#ifndef NDEBUG
  if (cfg.op_impl == OpImpl::Chm)
    for (double v : pre.data()) assert(v > 0.0);
#endif
  Tensor m = morph_op(pre);
  Tensor merged = cfg.skip ? add(m, h) : m;
  Tensor activated = leaky_relu(merged, cfg.leaky_slope);
  return add_channel_bias(conv3d(activated, params.conv2_kernel, PadMode::Replicate),
                          params.conv2_bias);
}

Tensor morph_pathway_forward(const Tensor& x, const MorphBlockConfig& cfg, PathwayOp op,
                             const MorphPathwayParams& params) {
  return morph_pathway_forward_with(
      x, cfg, params, [&](const Tensor& pre) { return apply_morph(pre, cfg, op, params); });
}

Tensor morph_block_forward(const Tensor& x, const MorphBlockConfig& cfg,
                           const MorphBlockParams& params) {
  cfg.validate();
  if (params.pathways.size() != cfg.pathways.size())
    throw UsageError("morph block: parameter set does not match pathway list");
  std::vector<Tensor> outputs;
  outputs.reserve(cfg.pathways.size());
  for (std::size_t i = 0; i < cfg.pathways.size(); ++i)
    outputs.push_back(morph_pathway_forward(x, cfg, cfg.pathways[i], params.pathways[i]));
  return concat_channels(outputs);
}

}  // namespace morphgrad
