#pragma once

#include <functional>
#include <vector>

#include "morphgrad/morphology.hpp"
#include "morphgrad/ops.hpp"
#include "morphgrad/rng.hpp"

namespace morphgrad {

enum class OpImpl { NonLearnable, Chm };
enum class PathwayOp { Erosion, Dilation, Opening, Closing };

const char* pathway_name(PathwayOp op);

/// Configuration of one morphological operation residual block: parallel
/// pathways, each {reduce conv -> sigmoid pre-activation -> morphological
/// operator -> optional identity skip -> LeakyReLU -> second conv}, with the
/// pathway outputs concatenated along channels.
struct MorphBlockConfig {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  OpImpl op_impl = OpImpl::NonLearnable;
  bool skip = false;
  std::vector<PathwayOp> pathways{PathwayOp::Erosion, PathwayOp::Dilation,
                                  PathwayOp::Opening, PathwayOp::Closing};
  Window3 window{3, 3, 3};
  std::size_t reduce_channels = 0;  // 0 -> out_channels / pathways.size()
  double leaky_slope = 0.01;

  void validate() const;
  std::size_t pathway_out_channels() const { return out_channels / pathways.size(); }
  std::size_t effective_reduce() const {
    return reduce_channels ? reduce_channels : pathway_out_channels();
  }
};

/// Learnable tensors of one pathway. `se_weights` is defined only for the
/// CHM implementation (one depthwise kernel per reduced channel, shared by
/// both stages of opening/closing).
struct MorphPathwayParams {
  Tensor conv1_kernel, conv1_bias;
  Tensor conv2_kernel, conv2_bias;
  Tensor se_weights;
};

struct MorphBlockParams {
  std::vector<MorphPathwayParams> pathways;
};

MorphPathwayParams init_pathway_params(const MorphBlockConfig& cfg, Rng& rng);
MorphBlockParams init_block_params(const MorphBlockConfig& cfg, Rng& rng);

/// Number of learnable scalars in one block with this configuration.
std::size_t block_parameter_count(const MorphBlockConfig& cfg);

Tensor morph_pathway_forward(const Tensor& x, const MorphBlockConfig& cfg, PathwayOp op,
                             const MorphPathwayParams& params);

/// Seam for tests: run the pathway with an arbitrary operator in place of
/// the morphological unit (e.g. the zero map, to isolate the skip path).
using MorphOpFn = std::function<Tensor(const Tensor&)>;
Tensor morph_pathway_forward_with(const Tensor& x, const MorphBlockConfig& cfg,
                                  const MorphPathwayParams& params, const MorphOpFn& morph_op);

Tensor morph_block_forward(const Tensor& x, const MorphBlockConfig& cfg,
                           const MorphBlockParams& params);

}  // namespace morphgrad
