#include "morphgrad/volume_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>

namespace morphgrad {

using nlohmann::json;

namespace {
void require_little_endian() {
  if constexpr (std::endian::native != std::endian::little)
    throw IoError("MORV1 format requires a little-endian host");
}
}  // namespace

void save_volume(const std::filesystem::path& path, const VolumeSample& sample,
                 std::size_t num_classes) {
  require_little_endian();
  if (sample.image.rank() != 4)
    throw ShapeError("save_volume: image must be [C,D,H,W], got " +
                     shape_str(sample.image.shape()));
  if (sample.label.rank() != 3)
    throw ShapeError("save_volume: label must be [D,H,W], got " +
                     shape_str(sample.label.shape()));

  json manifest;
  manifest["dims"] = {sample.label.extent(0), sample.label.extent(1), sample.label.extent(2)};
  manifest["channels"] = sample.image.extent(0);
  manifest["num_classes"] = num_classes;
  manifest["dtype"] = "f64";
  manifest["id"] = sample.id;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open \"" + path.string() + "\" for writing");
  out << kVolumeMagic << '\n' << manifest.dump() << '\n';
  auto img = sample.image.data();
  out.write(reinterpret_cast<const char*>(img.data()),
            static_cast<std::streamsize>(img.size() * sizeof(double)));
  auto lbl = sample.label.data();
  out.write(reinterpret_cast<const char*>(lbl.data()),
            static_cast<std::streamsize>(lbl.size() * sizeof(double)));
  if (!out) throw IoError("failed writing volume \"" + path.string() + "\"");
}

LoadedVolume load_volume(const std::filesystem::path& path) {
  require_little_endian();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open \"" + path.string() + "\"");
  std::string magic;
  if (!std::getline(in, magic) || magic != kVolumeMagic)
    throw IoError("\"" + path.string() + "\": bad magic \"" + magic + "\", expected \"" +
                  std::string(kVolumeMagic) + "\"");
  std::string manifest_line;
  if (!std::getline(in, manifest_line))
    throw IoError("\"" + path.string() + "\": missing manifest line");
  json manifest;
  try {
    manifest = json::parse(manifest_line);
  } catch (const json::exception& e) {
    throw IoError("\"" + path.string() + "\": manifest is not valid JSON: " + e.what());
  }

  LoadedVolume lv;
  std::size_t d = 0, h = 0, w = 0, c = 0;
  try {
    auto dims = manifest.at("dims").get<std::vector<std::size_t>>();
    if (dims.size() != 3)
      throw IoError("\"" + path.string() + "\": dims must have 3 entries");
    d = dims[0]; h = dims[1]; w = dims[2];
    c = manifest.at("channels").get<std::size_t>();
    lv.num_classes = manifest.at("num_classes").get<std::size_t>();
    if (manifest.at("dtype").get<std::string>() != "f64")
      throw IoError("\"" + path.string() + "\": unsupported dtype, expected f64");
    lv.sample.id = manifest.at("id").get<std::string>();
  } catch (const json::exception& e) {
    throw IoError("\"" + path.string() + "\": manifest field error: " + e.what());
  }
  if (d == 0 || h == 0 || w == 0 || c == 0)
    throw IoError("\"" + path.string() + "\": manifest declares empty extents");

  const std::size_t voxels = d * h * w;
  const std::size_t want = (c + 1) * voxels * sizeof(double);
  std::vector<char> payload(want);
  in.read(payload.data(), static_cast<std::streamsize>(want));
  if (static_cast<std::size_t>(in.gcount()) != want)
    throw IoError("\"" + path.string() + "\": payload truncated: manifest declares " +
                  std::to_string(want) + " bytes, read " + std::to_string(in.gcount()));

  std::vector<double> img(c * voxels), lbl(voxels);
  std::memcpy(img.data(), payload.data(), c * voxels * sizeof(double));
  std::memcpy(lbl.data(), payload.data() + c * voxels * sizeof(double),
              voxels * sizeof(double));
  lv.sample.image = Tensor({c, d, h, w}, std::move(img));
  lv.sample.label = Tensor({d, h, w}, std::move(lbl));
  return lv;
}

void save_index(const std::filesystem::path& dir, const std::vector<std::string>& ids,
                std::size_t num_classes) {
  json j;
  j["format"] = "morphgrad-index v1";
  j["num_classes"] = num_classes;
  j["ids"] = ids;
  std::ofstream out(dir / "index.json");
  if (!out) throw IoError("cannot write index in \"" + dir.string() + "\"");
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing index in \"" + dir.string() + "\"");
}

DatasetIndex load_index(const std::filesystem::path& dir) {
  std::ifstream in(dir / "index.json");
  if (!in) throw IoError("cannot open index in \"" + dir.string() + "\"");
  json j;
  try {
    in >> j;
    DatasetIndex idx;
    idx.ids = j.at("ids").get<std::vector<std::string>>();
    idx.num_classes = j.at("num_classes").get<std::size_t>();
    return idx;
  } catch (const json::exception& e) {
    throw IoError("\"" + (dir / "index.json").string() + "\": " + e.what());
  }
}

void write_pgm(const std::filesystem::path& path, const std::vector<double>& values,
               std::size_t height, std::size_t width) {
  if (values.size() != height * width)
    throw ShapeError("write_pgm: " + std::to_string(values.size()) + " values for " +
                     std::to_string(height) + "x" + std::to_string(width));
  const auto [mn_it, mx_it] = std::minmax_element(values.begin(), values.end());
  const double mn = *mn_it, mx = *mx_it;
  const double scale = mx > mn ? 255.0 / (mx - mn) : 0.0;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open \"" + path.string() + "\" for writing");
  out << "P5\n" << width << ' ' << height << "\n255\n";
  for (double v : values) {
    const int byte = static_cast<int>(std::lround((v - mn) * scale));
    out.put(static_cast<char>(std::clamp(byte, 0, 255)));
  }
  if (!out) throw IoError("failed writing \"" + path.string() + "\"");
}

}  // namespace morphgrad
