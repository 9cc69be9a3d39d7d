#include "morphgrad/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "morphgrad/blocks.hpp"
#include "morphgrad/morphology.hpp"
#include "morphgrad/network.hpp"
#include "morphgrad/ops.hpp"
#include "morphgrad/rng.hpp"

namespace morphgrad {

namespace {

double rel_error(double a, double n) {
  return std::fabs(a - n) / std::max({std::fabs(a), std::fabs(n), 1e-4});
}

// Fixed random weights turn a tensor output into a scalar with generic
// sensitivities to every output entry.
std::vector<double> loss_weights(std::size_t n, std::uint64_t seed) {
  Rng rng(seed ^ 0xc0ffee);
  std::vector<double> w(n);
  for (double& v : w) v = rng.uniform(-1.0, 1.0);
  return w;
}

double weighted(const Tensor& out, const std::vector<double>& w) {
  double acc = 0.0;
  auto v = out.data();
  for (std::size_t i = 0; i < v.size(); ++i) acc += v[i] * w[i];
  return acc;
}

// Values on a shuffled evenly spaced grid: every pairwise gap is at least
// `step_size`, keeping extremum ties (and FD step crossings) out of reach.
Tensor distinct_grid(const Shape& shape, Rng& rng, double lo = 0.1,
                     double step_size = 0.01) {
  const std::size_t n = shape_numel(shape);
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = lo + step_size * static_cast<double>(i);
  for (std::size_t i = n; i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
  return Tensor(shape, std::move(v));
}

Tensor uniform_tensor(const Shape& shape, Rng& rng, double lo, double hi) {
  Tensor t(shape);
  for (double& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

double fd_max_rel_error(const BuildFn& fn, const std::vector<Tensor>& inputs,
                        std::uint64_t seed, double step) {
  std::vector<Tensor> detached;
  for (const Tensor& t : inputs) detached.push_back(t.detached());

  Tape tape;
  std::vector<Tensor> tracked;
  for (const Tensor& t : detached) tracked.push_back(tape.watch(t));
  Tensor out = fn(tracked);
  const std::vector<double> w = loss_weights(out.numel(), seed);
  Tensor loss = sum_all(mul(out, Tensor(out.shape(), w)));
  tape.backward(loss);

  double worst = 0.0;
  for (std::size_t ti = 0; ti < detached.size(); ++ti) {
    const Tensor analytic = tape.grad(tracked[ti]);
    for (std::size_t i = 0; i < detached[ti].numel(); ++i) {
      auto probe = [&](double delta) {
        std::vector<Tensor> probe_inputs = detached;
        std::vector<double> values(detached[ti].data().begin(), detached[ti].data().end());
        values[i] += delta;
        probe_inputs[ti] = Tensor(detached[ti].shape(), std::move(values));
        return weighted(fn(probe_inputs), w);
      };
      const double numeric = (probe(step) - probe(-step)) / (2.0 * step);
      worst = std::max(worst, rel_error(analytic[i], numeric));
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Tensor-op suite
// ---------------------------------------------------------------------------

std::vector<GradCheckResult> gradcheck_tensor_ops(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<GradCheckResult> results;
  auto run = [&](const std::string& name, const BuildFn& fn, std::vector<Tensor> inputs) {
    results.push_back({name, fd_max_rel_error(fn, inputs, seed), 1e-4});
  };

  const Shape s4{1, 1, 4, 4, 4};
  Tensor a = uniform_tensor({2, 3}, rng, -1.0, 1.0);
  Tensor b = uniform_tensor({2, 3}, rng, 0.5, 1.5);
  run("add", [](const auto& in) { return add(in[0], in[1]); }, {a, b});
  run("sub", [](const auto& in) { return sub(in[0], in[1]); }, {a, b});
  run("mul", [](const auto& in) { return mul(in[0], in[1]); }, {a, b});
  run("div", [](const auto& in) { return div(in[0], in[1]); }, {a, b});
  Tensor base = uniform_tensor({2, 3}, rng, 0.4, 2.0);
  run("pow_scalar_exponent", [](const auto& in) { return pow(in[0], 2.5); }, {base});
  Tensor expo = uniform_tensor({2, 3}, rng, -1.5, 1.5);
  run("pow_tensor_exponent", [](const auto& in) { return pow(in[0], in[1]); }, {base, expo});
  run("add_scalar", [](const auto& in) { return add(in[0], 0.7); }, {a});
  run("mul_scalar", [](const auto& in) { return mul(in[0], -1.3); }, {a});

  Tensor act_in = uniform_tensor({3, 4}, rng, -3.0, 3.0);
  run("sigmoid", [](const auto& in) { return sigmoid(in[0]); }, {act_in});
  Tensor lrelu_in = distinct_grid({3, 4}, rng, 0.05);
  {
    auto vals = lrelu_in.mutable_data();
    for (std::size_t i = 0; i < vals.size(); ++i)
      if (i % 2 == 0) vals[i] = -vals[i];  // both branches, margin from 0
  }
  run("leaky_relu", [](const auto& in) { return leaky_relu(in[0], 0.01); }, {lrelu_in});
  // Floor between grid points, so no input sits on the clamp kink.
  Tensor clamp_in = distinct_grid({3, 4}, rng, 0.05);
  run("clamp_min", [](const auto& in) { return clamp_min(in[0], 0.095); }, {clamp_in});

  Tensor conv_in = uniform_tensor({1, 2, 4, 4, 4}, rng, -1.0, 1.0);
  Tensor kern = uniform_tensor({3, 2, 3, 3, 3}, rng, -0.5, 0.5);
  run("conv3d_zero",
      [](const auto& in) { return conv3d(in[0], in[1], PadMode::Zero); }, {conv_in, kern});
  run("conv3d_replicate",
      [](const auto& in) { return conv3d(in[0], in[1], PadMode::Replicate); },
      {conv_in, kern});
  run("conv3d_stride2",
      [](const auto& in) { return conv3d(in[0], in[1], PadMode::Replicate, 2); },
      {conv_in, kern});
  Tensor dw_kern = uniform_tensor({2, 1, 3, 3, 3}, rng, -0.5, 0.5);
  run("conv3d_depthwise",
      [](const auto& in) { return conv3d_depthwise(in[0], in[1], PadMode::Replicate); },
      {conv_in, dw_kern});
  Tensor bias = uniform_tensor({2}, rng, -0.5, 0.5);
  run("add_channel_bias",
      [](const auto& in) { return add_channel_bias(in[0], in[1]); }, {conv_in, bias});

  Tensor vol = distinct_grid(s4, rng);
  run("sliding_min_flat",
      [](const auto& in) { return sliding_extremum(ExtremumKind::Min, in[0], {3, 3, 3}); },
      {vol});
  run("sliding_max_flat",
      [](const auto& in) { return sliding_extremum(ExtremumKind::Max, in[0], {3, 3, 3}); },
      {vol});
  // Offset spacing incommensurate with the volume grid: candidate values
  // I(v) -/+ w stay pairwise separated, so no arg-extremum flips under the
  // FD step.
  Tensor offsets = distinct_grid({3, 3, 3}, rng, 0.02, 0.0137);
  run("sliding_min_offsets",
      [](const auto& in) {
        return detail::sliding_extremum_naive(ExtremumKind::Min, in[0], {3, 3, 3}, &in[1]);
      },
      {vol, offsets});
  run("sliding_max_offsets",
      [](const auto& in) {
        return detail::sliding_extremum_naive(ExtremumKind::Max, in[0], {3, 3, 3}, &in[1]);
      },
      {vol, offsets});

  Tensor part_a = uniform_tensor({1, 2, 2, 2, 2}, rng, -1.0, 1.0);
  Tensor part_b = uniform_tensor({1, 3, 2, 2, 2}, rng, -1.0, 1.0);
  run("concat_channels",
      [](const auto& in) { return concat_channels({in[0], in[1]}); }, {part_a, part_b});
  run("slice_channels",
      [](const auto& in) { return slice_channels(in[0], 1, 3); }, {part_b});

  Tensor norm_in = uniform_tensor({2, 3, 3, 3, 3}, rng, -1.0, 1.0);
  Tensor scale = uniform_tensor({3}, rng, 0.5, 1.5);
  Tensor shift = uniform_tensor({3}, rng, -0.5, 0.5);
  run("instance_norm",
      [](const auto& in) { return instance_norm(in[0], in[1], in[2]); },
      {norm_in, scale, shift});
  run("softmax_channels",
      [](const auto& in) { return softmax_channels(in[0]); }, {norm_in});
  Tensor up_in = uniform_tensor({1, 2, 2, 2, 2}, rng, -1.0, 1.0);
  run("upsample_nearest2", [](const auto& in) { return upsample_nearest2(in[0]); }, {up_in});
  run("sum_all", [](const auto& in) { return sum_all(in[0]); }, {norm_in});
  run("sum_per_channel", [](const auto& in) { return sum_per_channel(in[0]); }, {norm_in});
  return results;
}

// ---------------------------------------------------------------------------
// Morphology suite
// ---------------------------------------------------------------------------

std::vector<GradCheckResult> gradcheck_morphology(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<GradCheckResult> results;
  auto run = [&](const std::string& name, const BuildFn& fn, std::vector<Tensor> inputs) {
    results.push_back({name, fd_max_rel_error(fn, inputs, seed), 1e-4});
  };

  const Window3 win{3, 3, 3};
  Tensor vol = distinct_grid({1, 2, 4, 4, 4}, rng);
  run("erode_flat",
      [&](const auto& in) { return erode_flat(in[0], StructElement::flat(win)); }, {vol});
  run("dilate_flat",
      [&](const auto& in) { return dilate_flat(in[0], StructElement::flat(win)); }, {vol});
  run("open_flat",
      [&](const auto& in) { return open_flat(in[0], StructElement::flat(win)); }, {vol});
  run("close_flat",
      [&](const auto& in) { return close_flat(in[0], StructElement::flat(win)); }, {vol});

  // CHM checks differentiate w.r.t. both the image and the kernel.
  Tensor pos = uniform_tensor({1, 2, 4, 4, 4}, rng, 0.3, 1.0);
  Tensor weights = uniform_tensor({2, 1, 3, 3, 3}, rng, 0.02, 0.08);
  auto chm_case = [&](const std::string& name, auto op) {
    run(name,
        [&, op](const auto& in) {
          return op(in[0], StructElement::chm_from_weights(win, in[1]));
        },
        {pos, weights});
  };
  chm_case("chm_erode", [](const Tensor& i, const StructElement& se) { return chm_erode(i, se); });
  chm_case("chm_dilate", [](const Tensor& i, const StructElement& se) { return chm_dilate(i, se); });
  chm_case("chm_open", [](const Tensor& i, const StructElement& se) { return chm_open(i, se); });
  chm_case("chm_close", [](const Tensor& i, const StructElement& se) { return chm_close(i, se); });
  run("chm_general_p0.5",
      [&](const auto& in) {
        return chm_general(in[0], StructElement::chm_from_weights(win, in[1]), 0.5);
      },
      {pos, weights});
  return results;
}

// ---------------------------------------------------------------------------
// Block suite: all four variant combinations, w.r.t. input and parameters
// ---------------------------------------------------------------------------

std::vector<GradCheckResult> gradcheck_blocks(std::uint64_t seed) {
  std::vector<GradCheckResult> results;
  for (OpImpl impl : {OpImpl::NonLearnable, OpImpl::Chm}) {
    for (bool skip : {false, true}) {
      Rng rng(seed);
      MorphBlockConfig cfg;
      cfg.in_channels = 4;
      cfg.out_channels = 4;
      cfg.op_impl = impl;
      cfg.skip = skip;
      MorphBlockParams params = init_block_params(cfg, rng);
      Tensor x = uniform_tensor({1, 4, 5, 5, 5}, rng, -1.0, 1.0);

      std::vector<Tensor> inputs{x};
      // Layout of the flattened parameter list, pathway-major.
      for (const MorphPathwayParams& p : params.pathways) {
        inputs.push_back(p.conv1_kernel);
        inputs.push_back(p.conv1_bias);
        inputs.push_back(p.conv2_kernel);
        inputs.push_back(p.conv2_bias);
        if (impl == OpImpl::Chm) inputs.push_back(p.se_weights);
      }
      const std::size_t per = impl == OpImpl::Chm ? 5 : 4;
      auto fn = [cfg, per](const std::vector<Tensor>& in) {
        MorphBlockParams tracked;
        for (std::size_t p = 0; p < cfg.pathways.size(); ++p) {
          MorphPathwayParams pp;
          pp.conv1_kernel = in[1 + p * per + 0];
          pp.conv1_bias = in[1 + p * per + 1];
          pp.conv2_kernel = in[1 + p * per + 2];
          pp.conv2_bias = in[1 + p * per + 3];
          if (per == 5) pp.se_weights = in[1 + p * per + 4];
          tracked.pathways.push_back(pp);
        }
        return morph_block_forward(in[0], cfg, tracked);
      };
      std::string name = std::string("block_") +
                         (impl == OpImpl::Chm ? "chm" : "flat") + (skip ? "_skip" : "");
      results.push_back({name, fd_max_rel_error(fn, inputs, seed), 1e-4});
    }
  }
  return results;
}

// ---------------------------------------------------------------------------
// Network spot check
// ---------------------------------------------------------------------------

std::vector<GradCheckResult> gradcheck_network(std::uint64_t seed) {
  NetworkConfig cfg;
  cfg.variant = Variant::ChmSkip;
  cfg.depth = 2;
  cfg.base_channels = 8;
  cfg.num_classes = 3;
  cfg.deep_supervision_levels = 1;
  SegmentationModel model = build_network(cfg, seed);

  Rng rng(seed ^ 0xbead);
  Tensor x = uniform_tensor({1, 1, 6, 6, 6}, rng, -1.0, 1.0);
  Tensor labels({6, 6, 6});
  {
    auto lv = labels.mutable_data();
    for (double& v : lv) v = static_cast<double>(rng.below(cfg.num_classes));
  }
  const Tensor target = one_hot(labels, cfg.num_classes);

  auto loss_of = [&](const SegmentationModel& m) {
    return dice_loss(softmax_channels(forward(m, x).logits), target)[0];
  };

  Tape tape;
  SegmentationModel tracked;
  tracked.config = cfg;
  tracked.params = model.params.tracked_on(tape);
  Tensor loss = dice_loss(softmax_channels(forward(tracked, x).logits), target);
  tape.backward(loss);

  // 50 parameter entries sampled across the whole store.
  std::vector<std::pair<std::size_t, std::size_t>> picks;
  for (std::size_t i = 0; i < 50; ++i) {
    const std::size_t pi = rng.below(model.params.entries().size());
    const std::size_t ei = rng.below(model.params.entries()[pi].second.numel());
    picks.emplace_back(pi, ei);
  }

  const double step = 1e-6;
  double worst = 0.0;
  for (const auto& [pi, ei] : picks) {
    const auto& [name, tensor] = model.params.entries()[pi];
    const double analytic = tape.grad(tracked.params.at(name))[ei];
    auto probe = [&](double delta) {
      SegmentationModel m2;
      m2.config = cfg;
      m2.params = model.params.clone();
      std::vector<double> vals(tensor.data().begin(), tensor.data().end());
      vals[ei] += delta;
      m2.params.set(name, Tensor(tensor.shape(), std::move(vals)));
      return loss_of(m2);
    };
    const double numeric = (probe(step) - probe(-step)) / (2.0 * step);
    worst = std::max(worst, rel_error(analytic, numeric));
  }
  return {{"network_depth2_spot50", worst, 1e-3}};
}

std::vector<GradCheckResult> gradcheck_scope(const std::string& scope, std::uint64_t seed) {
  if (scope == "tensor") return gradcheck_tensor_ops(seed);
  if (scope == "morph") return gradcheck_morphology(seed);
  if (scope == "block") return gradcheck_blocks(seed);
  if (scope == "network") return gradcheck_network(seed);
  throw ConfigError("unknown gradcheck scope \"" + scope +
                    "\"; valid: tensor, morph, block, network");
}

}  // namespace morphgrad
