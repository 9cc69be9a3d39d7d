#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "morphgrad/tensor.hpp"

namespace morphgrad {

/// Outcome of one finite-difference comparison.
struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  double threshold = 1e-4;
  bool passed() const { return max_rel_error < threshold; }
};

/// Central finite differences (step `step`) of a scalarized output of `fn`
/// against the tape gradients, over every entry of every input. Relative
/// error uses max(|analytic|, |numeric|, 1e-4) as the scale.
using BuildFn = std::function<Tensor(const std::vector<Tensor>&)>;
double fd_max_rel_error(const BuildFn& fn, const std::vector<Tensor>& inputs,
                        std::uint64_t seed, double step = 1e-6);

std::vector<GradCheckResult> gradcheck_tensor_ops(std::uint64_t seed);
std::vector<GradCheckResult> gradcheck_morphology(std::uint64_t seed);
std::vector<GradCheckResult> gradcheck_blocks(std::uint64_t seed);
/// Depth-2 network: analytic vs numeric on a spot check of 50 parameters.
std::vector<GradCheckResult> gradcheck_network(std::uint64_t seed);

std::vector<GradCheckResult> gradcheck_scope(const std::string& scope, std::uint64_t seed);

}  // namespace morphgrad
