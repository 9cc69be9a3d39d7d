#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "morphgrad/blocks.hpp"
#include "morphgrad/gradcheck.hpp"
#include "oracles.hpp"

using namespace morphgrad;

namespace {
MorphBlockConfig base_config() {
  MorphBlockConfig cfg;
  cfg.in_channels = 8;
  cfg.out_channels = 8;
  return cfg;
}
}  // namespace

TEST_CASE("pathway and block output shapes") {
  MorphBlockConfig cfg = base_config();
  Rng rng(1);
  Tensor x = oracle::random_tensor({1, 8, 8, 8, 8}, rng);
  MorphPathwayParams pp = init_pathway_params(cfg, rng);
  Tensor y = morph_pathway_forward(x, cfg, PathwayOp::Erosion, pp);
  CHECK(y.shape() == Shape{1, 2, 8, 8, 8});

  MorphBlockParams bp = init_block_params(cfg, rng);
  CHECK(morph_block_forward(x, cfg, bp).shape() == Shape{1, 8, 8, 8, 8});

  // Odd spatial extents survive unchanged.
  Tensor odd = oracle::random_tensor({1, 8, 5, 7, 3}, rng);
  CHECK(morph_block_forward(odd, cfg, bp).shape() == Shape{1, 8, 5, 7, 3});

  MorphBlockConfig bad = cfg;
  bad.out_channels = 6;  // not divisible by 4 pathways
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("1x1x1 flat window makes the morphological unit the identity") {
  MorphBlockConfig cfg = base_config();
  cfg.in_channels = 2;
  cfg.out_channels = 4;
  cfg.window = {1, 1, 1};
  cfg.skip = true;
  Rng rng(2);
  MorphPathwayParams pp = init_pathway_params(cfg, rng);
  Tensor x = oracle::random_tensor({1, 2, 4, 4, 4}, rng);

  Tensor got = morph_pathway_forward(x, cfg, PathwayOp::Erosion, pp);
  Tensor h = add_channel_bias(conv3d(x, pp.conv1_kernel, PadMode::Replicate), pp.conv1_bias);
  Tensor manual = add_channel_bias(
      conv3d(leaky_relu(add(sigmoid(h), h), cfg.leaky_slope), pp.conv2_kernel,
             PadMode::Replicate),
      pp.conv2_bias);
  CHECK(oracle::bitwise_equal(got, manual));
}

TEST_CASE("zero-map hook: skip reduces to the plain two-conv path") {
  MorphBlockConfig cfg = base_config();
  cfg.in_channels = 4;
  cfg.out_channels = 4;
  cfg.skip = true;
  Rng rng(3);
  MorphPathwayParams pp = init_pathway_params(cfg, rng);
  Tensor x = oracle::random_tensor({1, 4, 5, 5, 5}, rng);

  auto zero_op = [](const Tensor& t) { return mul(t, 0.0); };
  Tensor got = morph_pathway_forward_with(x, cfg, pp, zero_op);

  Tensor h = add_channel_bias(conv3d(x, pp.conv1_kernel, PadMode::Replicate), pp.conv1_bias);
  Tensor manual = add_channel_bias(
      conv3d(leaky_relu(h, cfg.leaky_slope), pp.conv2_kernel, PadMode::Replicate),
      pp.conv2_bias);
  CHECK(oracle::bitwise_equal(got, manual));

  // Without the skip connection the zero map blanks the pathway input.
  MorphBlockConfig no_skip = cfg;
  no_skip.skip = false;
  Tensor blanked = morph_pathway_forward_with(x, no_skip, pp, zero_op);
  Tensor zeros = add_channel_bias(
      conv3d(leaky_relu(mul(h, 0.0), cfg.leaky_slope), pp.conv2_kernel, PadMode::Replicate),
      pp.conv2_bias);
  CHECK(oracle::bitwise_equal(blanked, zeros));
}

TEST_CASE("permuting pathways permutes the concatenated channel groups") {
  MorphBlockConfig cfg = base_config();
  cfg.pathways = {PathwayOp::Erosion, PathwayOp::Dilation};
  cfg.out_channels = 8;  // 4 channels per pathway
  Rng rng(4);
  MorphBlockParams params = init_block_params(cfg, rng);
  Tensor x = oracle::random_tensor({1, 8, 4, 4, 4}, rng);
  Tensor forward_ed = morph_block_forward(x, cfg, params);

  MorphBlockConfig swapped = cfg;
  swapped.pathways = {PathwayOp::Dilation, PathwayOp::Erosion};
  MorphBlockParams swapped_params;
  swapped_params.pathways = {params.pathways[1], params.pathways[0]};
  Tensor forward_de = morph_block_forward(x, swapped, swapped_params);

  CHECK(oracle::bitwise_equal(slice_channels(forward_ed, 0, 4),
                              slice_channels(forward_de, 4, 8)));
  CHECK(oracle::bitwise_equal(slice_channels(forward_ed, 4, 8),
                              slice_channels(forward_de, 0, 4)));
}

TEST_CASE("parameter counts match the hand-computed table") {
  // in=8, out=8, 4 pathways, reduce = 8/4 = 2, 3x3x3 window:
  //   conv1: 2*8*27 + 2 = 434
  //   conv2: 2*2*27 + 2 = 110
  //   per flat pathway 544, per CHM pathway 544 + 2*27 = 598
  MorphBlockConfig cfg = base_config();
  Rng rng(5);
  for (bool skip : {false, true}) {
    cfg.skip = skip;  // the skip connection adds no parameters
    cfg.op_impl = OpImpl::NonLearnable;
    CHECK(block_parameter_count(cfg) == 4 * 544);
    cfg.op_impl = OpImpl::Chm;
    CHECK(block_parameter_count(cfg) == 4 * 598);
  }
  for (OpImpl impl : {OpImpl::NonLearnable, OpImpl::Chm}) {
    cfg.op_impl = impl;
    MorphBlockParams params = init_block_params(cfg, rng);
    std::size_t total = 0;
    for (const MorphPathwayParams& p : params.pathways) {
      total += p.conv1_kernel.numel() + p.conv1_bias.numel() + p.conv2_kernel.numel() +
               p.conv2_bias.numel();
      if (p.se_weights.defined()) total += p.se_weights.numel();
    }
    CHECK(total == block_parameter_count(cfg));
  }
}

TEST_CASE("chm pathway keeps its operator input strictly positive") {
  MorphBlockConfig cfg = base_config();
  cfg.in_channels = 4;
  cfg.out_channels = 4;
  cfg.op_impl = OpImpl::Chm;
  Rng rng(6);
  MorphBlockParams params = init_block_params(cfg, rng);
  // Strongly negative inputs push the sigmoid toward zero; the clamp keeps
  // the counter-harmonic powers finite.
  Tensor x = Tensor::full({1, 4, 4, 4, 4}, -400.0);
  Tensor y = morph_block_forward(x, cfg, params);
  CHECK(y.detached().all_finite());
}

TEST_CASE("block gradient checks across the four variant combinations") {
  for (const GradCheckResult& r : gradcheck_blocks(4242)) {
    INFO(r.name, " rel err ", r.max_rel_error);
    CHECK(r.max_rel_error < r.threshold);
  }
}
