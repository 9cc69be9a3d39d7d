#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "morphgrad/blocks.hpp"
#include "morphgrad/tape.hpp"

namespace morphgrad {

enum class Variant { Baseline, NonLearnable, NonLearnableSkip, Chm, ChmSkip };

/// All variants in reporting order.
const std::vector<Variant>& all_variants();
std::string_view variant_name(Variant v);
Variant variant_from_name(std::string_view name);  // throws ConfigError

struct NetworkConfig {
  Variant variant = Variant::Baseline;
  std::size_t depth = 3;           // resolution levels
  std::size_t base_channels = 8;   // channels at level 0
  std::size_t num_classes = 4;     // K
  std::size_t deep_supervision_levels = 2;
  std::size_t input_channels = 1;
  Window3 window{3, 3, 3};
  double leaky_slope = 0.01;

  void validate() const;
  std::size_t channels_at(std::size_t level) const { return base_channels << level; }
  bool has_morph_blocks() const { return variant != Variant::Baseline; }
  OpImpl op_impl() const;
  bool skip() const;
};

/// Ordered, uniquely named parameter collection.
class ParamStore {
 public:
  Tensor& add(std::string name, Tensor t);
  const Tensor& at(std::string_view name) const;
  bool contains(std::string_view name) const;
  void set(std::string_view name, Tensor t);
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t total_parameters() const;
  /// Copy whose tensors are leaves on `tape`.
  ParamStore tracked_on(Tape& tape) const;
  /// Deep copy of all payloads.
  ParamStore clone() const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

struct SegmentationModel {
  NetworkConfig config;
  ParamStore params;
};

/// Deterministic parameter initialization for the configured variant.
SegmentationModel build_network(const NetworkConfig& cfg, std::uint64_t seed);

struct ForwardOutput {
  Tensor logits;            // [N, K, D, H, W]
  std::vector<Tensor> aux;  // deeper supervision maps at native resolution
};

ForwardOutput forward(const SegmentationModel& model, const Tensor& x);

/// Channel split of a non-baseline encoder level: {context half, morph half}.
std::pair<std::size_t, std::size_t> encoder_channel_split(const NetworkConfig& cfg,
                                                          std::size_t level);

/// Soft multiclass Dice loss: 1 - mean_k (2*sum(u_k v_k)+eps)/(sum u_k + sum v_k + eps).
/// probs must lie in [0,1]; target must be one-hot over the channel axis.
Tensor dice_loss(const Tensor& probs, const Tensor& target, double epsilon = 1e-5);

/// One-hot encoding of a [D,H,W] (or [N,D,H,W]) label volume into
/// [N,K,D,H,W]. Labels must be integral values in [0, K).
Tensor one_hot(const Tensor& labels, std::size_t num_classes);

/// Arg-max class per voxel of a [N,K,D,H,W] probability map -> [N,D,H,W].
Tensor argmax_channels(const Tensor& probs);

// Checkpoint container: magic "MORPHNET1\n", one JSON manifest line (config,
// parameter names/shapes/offsets), then raw little-endian f64 payload.
inline constexpr std::string_view kCheckpointMagic = "MORPHNET1";
void save_model(const std::filesystem::path& path, const SegmentationModel& model);
SegmentationModel load_model(const std::filesystem::path& path);

std::string network_config_to_json(const NetworkConfig& cfg);
NetworkConfig network_config_from_json(const std::string& text);

}  // namespace morphgrad
