#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "morphgrad/tensor.hpp"

namespace morphgrad {

/// One (image, label) pair. Image is [C,D,H,W]; label is [D,H,W] holding
/// class ids in [0, K).
struct VolumeSample {
  Tensor image;
  Tensor label;
  std::string id;
};

/// Parameters of the synthetic nested-ellipsoid task: class 0 background,
/// class 1 the outer shell, higher classes nested inside with multiplicative
/// radius margins, plus Gaussian intensity noise.
struct SynthSpec {
  std::size_t extent = 32;
  std::size_t num_classes = 4;  // K
  std::size_t num_samples = 20;
  std::size_t channels = 1;
  std::size_t min_ellipsoids = 1;
  std::size_t max_ellipsoids = 3;
  double radius_min = 9.0;
  double radius_max = 13.0;
  std::vector<double> margins{0.75, 0.7};  // K-2 nested shrink factors in (0,1)
  double noise_sigma = 0.05;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Deterministic sample generation; every class is guaranteed at least 1% of
/// the voxels (violating draws are regenerated from derived sub-seeds).
std::vector<VolumeSample> gen_synthetic(const SynthSpec& spec);

/// Per-channel z-score over the nonzero voxels (the synthetic stand-in for a
/// brain mask), applied to those voxels, then clipped to [-5, 5]. A
/// zero-variance channel comes back all zeros.
Tensor normalize_clip(const Tensor& image);

std::string synth_spec_to_json(const SynthSpec& spec);
SynthSpec synth_spec_from_json(const std::string& text);

}  // namespace morphgrad
