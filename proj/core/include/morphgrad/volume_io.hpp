#pragma once

#include <filesystem>
#include <string_view>
#include <vector>

#include "morphgrad/datagen.hpp"

namespace morphgrad {

// MORV1 volume container: 5-byte magic "MORV1", '\n', one JSON manifest line
// (dims, channels, num_classes, dtype "f64", id), then the raw little-endian
// f64 payload, image first, label second.
inline constexpr std::string_view kVolumeMagic = "MORV1";

void save_volume(const std::filesystem::path& path, const VolumeSample& sample,
                 std::size_t num_classes);
struct LoadedVolume {
  VolumeSample sample;
  std::size_t num_classes = 0;
};
LoadedVolume load_volume(const std::filesystem::path& path);

/// Dataset index: ids of the MORV1 files in a directory, in generation order.
void save_index(const std::filesystem::path& dir, const std::vector<std::string>& ids,
                std::size_t num_classes);
struct DatasetIndex {
  std::vector<std::string> ids;
  std::size_t num_classes = 0;
};
DatasetIndex load_index(const std::filesystem::path& dir);

/// 8-bit binary PGM, values linearly rescaled per image; constant images map
/// to black.
void write_pgm(const std::filesystem::path& path, const std::vector<double>& values,
               std::size_t height, std::size_t width);

}  // namespace morphgrad
