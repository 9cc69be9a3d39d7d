#include "morphgrad/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>

#include "morphgrad/rng.hpp"

namespace morphgrad {

using nlohmann::json;

void SynthSpec::validate() const {
  if (extent < 8) throw ConfigError("synth spec: extent must be >= 8");
  if (num_classes < 2) throw ConfigError("synth spec: num_classes must be >= 2");
  if (num_samples < 1) throw ConfigError("synth spec: num_samples must be >= 1");
  if (channels < 1) throw ConfigError("synth spec: channels must be >= 1");
  if (min_ellipsoids < 1 || max_ellipsoids < min_ellipsoids)
    throw ConfigError("synth spec: ellipsoid count range invalid");
  if (!(radius_min > 0.0) || radius_max < radius_min)
    throw ConfigError("synth spec: radius range invalid");
  if (margins.size() != num_classes - 2)
    throw ConfigError("synth spec: needs " + std::to_string(num_classes - 2) +
                      " margins for " + std::to_string(num_classes) + " classes, got " +
                      std::to_string(margins.size()));
  double scale = 1.0;
  for (double m : margins) {
    if (!(m > 0.0) || !(m < 1.0))
      throw ConfigError("synth spec: margins must lie in (0,1)");
    scale *= m;
  }
  // The innermost region must keep a usable radius, otherwise the deepest
  // class can never reach its voxel-count floor.
  if (radius_min * scale < 1.5)
    throw ConfigError("synth spec: margins shrink the innermost radius below 1.5 voxels");
  if (noise_sigma < 0.0) throw ConfigError("synth spec: noise_sigma must be >= 0");
  if (2.0 * (radius_max + 1.0) > static_cast<double>(extent))
    throw ConfigError("synth spec: radius_max does not fit inside the volume");
}

namespace {

struct Ellipsoid {
  double cz, cy, cx;
  double rz, ry, rx;
};

// Label volume for one draw; returns false when any class covers less than
// 1% of the voxels.
bool generate_label(const SynthSpec& spec, Rng& rng, std::vector<double>& label) {
  const std::size_t e = spec.extent;
  std::fill(label.begin(), label.end(), 0.0);

  const std::size_t count =
      spec.min_ellipsoids + rng.below(spec.max_ellipsoids - spec.min_ellipsoids + 1);
  std::vector<Ellipsoid> blobs;
  for (std::size_t i = 0; i < count; ++i) {
    Ellipsoid b;
    b.rz = rng.uniform(spec.radius_min, spec.radius_max);
    b.ry = rng.uniform(spec.radius_min, spec.radius_max);
    b.rx = rng.uniform(spec.radius_min, spec.radius_max);
    b.cz = rng.uniform(b.rz + 1.0, static_cast<double>(e) - b.rz - 1.0);
    b.cy = rng.uniform(b.ry + 1.0, static_cast<double>(e) - b.ry - 1.0);
    b.cx = rng.uniform(b.rx + 1.0, static_cast<double>(e) - b.rx - 1.0);
    blobs.push_back(b);
  }

  // Cumulative shrink factor per class level: class 1 is the full ellipsoid,
  // deeper classes are scaled-down copies.
  std::vector<double> level_scale{1.0};
  for (double m : spec.margins) level_scale.push_back(level_scale.back() * m);

  for (std::size_t z = 0; z < e; ++z)
    for (std::size_t y = 0; y < e; ++y)
      for (std::size_t x = 0; x < e; ++x) {
        double cls = 0.0;
        for (const Ellipsoid& b : blobs) {
          const double dz = (static_cast<double>(z) - b.cz);
          const double dy = (static_cast<double>(y) - b.cy);
          const double dx = (static_cast<double>(x) - b.cx);
          for (std::size_t lvl = level_scale.size(); lvl-- > 0;) {
            const double s = level_scale[lvl];
            const double q = dz * dz / (b.rz * b.rz * s * s) +
                             dy * dy / (b.ry * b.ry * s * s) +
                             dx * dx / (b.rx * b.rx * s * s);
            if (q <= 1.0) {
              cls = std::max(cls, static_cast<double>(lvl + 1));
              break;  // deepest containing level found for this blob
            }
          }
        }
        label[(z * e + y) * e + x] = cls;
      }

  const std::size_t total = e * e * e;
  const std::size_t floor_count = total / 100;  // 1% of the volume
  std::vector<std::size_t> counts(spec.num_classes, 0);
  for (double v : label) counts[static_cast<std::size_t>(v)]++;
  for (std::size_t k = 0; k < spec.num_classes; ++k)
    if (counts[k] < std::max<std::size_t>(floor_count, 1)) return false;
  return true;
}

}  // namespace

std::vector<VolumeSample> gen_synthetic(const SynthSpec& spec) {
  spec.validate();
  const std::size_t e = spec.extent;
  const std::size_t voxels = e * e * e;
  std::vector<VolumeSample> samples;
  samples.reserve(spec.num_samples);

  for (std::size_t s = 0; s < spec.num_samples; ++s) {
    std::vector<double> label(voxels);
    bool ok = false;
    for (std::size_t attempt = 0; attempt < 200 && !ok; ++attempt) {
      Rng rng(Rng::derive(spec.seed, s * 1000 + attempt));
      ok = generate_label(spec, rng, label);
    }
    if (!ok)
      throw ConfigError("synth spec: could not satisfy the 1% class floor for sample " +
                        std::to_string(s) + "; widen the radius range or margins");

    // Per-class intensity plateaus plus channel-independent Gaussian noise.
    Rng noise_rng(Rng::derive(spec.seed ^ 0x5eed5eedULL, s));
    std::vector<double> image(spec.channels * voxels);
    const double denom = static_cast<double>(spec.num_classes - 1);
    for (std::size_t c = 0; c < spec.channels; ++c)
      for (std::size_t i = 0; i < voxels; ++i) {
        const double level = label[i] / denom;
        image[c * voxels + i] =
            level + (spec.noise_sigma > 0.0 ? noise_rng.normal(0.0, spec.noise_sigma) : 0.0);
      }

    VolumeSample sample;
    sample.image = Tensor({spec.channels, e, e, e}, std::move(image));
    sample.label = Tensor({e, e, e}, std::move(label));
    sample.id = "sample" + std::to_string(s);
    samples.push_back(std::move(sample));
  }
  return samples;
}

Tensor normalize_clip(const Tensor& image) {
  if (image.rank() != 4)
    throw ShapeError("normalize_clip: image must be [C,D,H,W], got " +
                     shape_str(image.shape()));
  const std::size_t c = image.extent(0);
  const std::size_t voxels = image.numel() / c;
  std::vector<double> out(image.numel(), 0.0);
  auto v = image.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* src = v.data() + ch * voxels;
    double* dst = out.data() + ch * voxels;
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < voxels; ++i) {
      if (src[i] != 0.0) {
        sum += src[i];
        ++count;
      }
    }
    if (count == 0) continue;  // nothing to normalize; channel stays zero
    const double mean = sum / static_cast<double>(count);
    double var = 0.0;
    for (std::size_t i = 0; i < voxels; ++i) {
      if (src[i] != 0.0) {
        const double d = src[i] - mean;
        var += d * d;
      }
    }
    var /= static_cast<double>(count);
    if (var == 0.0) continue;  // zero-variance channel -> zeros
    const double inv = 1.0 / std::sqrt(var);
    for (std::size_t i = 0; i < voxels; ++i) {
      if (src[i] != 0.0) {
        dst[i] = std::clamp((src[i] - mean) * inv, -5.0, 5.0);
      }
    }
  }
  return Tensor(image.shape(), std::move(out));
}

std::string synth_spec_to_json(const SynthSpec& spec) {
  json j;
  j["extent"] = spec.extent;
  j["num_classes"] = spec.num_classes;
  j["num_samples"] = spec.num_samples;
  j["channels"] = spec.channels;
  j["min_ellipsoids"] = spec.min_ellipsoids;
  j["max_ellipsoids"] = spec.max_ellipsoids;
  j["radius_min"] = spec.radius_min;
  j["radius_max"] = spec.radius_max;
  j["margins"] = spec.margins;
  j["noise_sigma"] = spec.noise_sigma;
  j["seed"] = spec.seed;
  return j.dump(2);
}

SynthSpec synth_spec_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("synth spec: invalid JSON: ") + e.what());
  }
  SynthSpec spec;
  try {
    spec.extent = j.at("extent").get<std::size_t>();
    spec.num_classes = j.at("num_classes").get<std::size_t>();
    spec.num_samples = j.at("num_samples").get<std::size_t>();
    if (j.contains("channels")) spec.channels = j.at("channels").get<std::size_t>();
    if (j.contains("min_ellipsoids")) spec.min_ellipsoids = j.at("min_ellipsoids").get<std::size_t>();
    if (j.contains("max_ellipsoids")) spec.max_ellipsoids = j.at("max_ellipsoids").get<std::size_t>();
    if (j.contains("radius_min")) spec.radius_min = j.at("radius_min").get<double>();
    if (j.contains("radius_max")) spec.radius_max = j.at("radius_max").get<double>();
    if (j.contains("margins")) {
      spec.margins = j.at("margins").get<std::vector<double>>();
    } else {
      // Default nesting: 0.75 then 0.7 shrinks, extended as needed.
      spec.margins = {0.75, 0.7};
      while (spec.margins.size() + 2 > spec.num_classes) spec.margins.pop_back();
      while (spec.margins.size() + 2 < spec.num_classes) spec.margins.push_back(0.7);
    }
    if (j.contains("noise_sigma")) spec.noise_sigma = j.at("noise_sigma").get<double>();
    spec.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("synth spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

}  // namespace morphgrad
