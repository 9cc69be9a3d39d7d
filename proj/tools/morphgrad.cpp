// morphgrad: synthetic data generation, morphological filtering, five-way
// architecture training and comparison, and gradient verification.
//
// Exit codes: 0 success, 2 configuration/usage, 3 I/O, 4 numerical/domain,
// 5 verification failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "morphgrad/datagen.hpp"
#include "morphgrad/gradcheck.hpp"
#include "morphgrad/morphology.hpp"
#include "morphgrad/network.hpp"
#include "morphgrad/training.hpp"
#include "morphgrad/volume_io.hpp"

namespace fs = std::filesystem;
using namespace morphgrad;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumerical = 4;
constexpr int kExitVerification = 5;

std::string read_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open \"" + path.string() + "\"");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open \"" + path.string() + "\" for writing");
  out << text;
  if (!out) throw IoError("failed writing \"" + path.string() + "\"");
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

Window3 parse_window(const std::string& text) {
  Window3 win;
  if (std::sscanf(text.c_str(), "%zu,%zu,%zu", &win.d, &win.h, &win.w) != 3)
    throw ConfigError("window must be d,h,w (e.g. 3,3,3), got \"" + text + "\"");
  return win;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const fs::path& spec_path, const fs::path& out_dir) {
  const SynthSpec spec = synth_spec_from_json(read_file(spec_path));
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  const std::vector<VolumeSample> samples = gen_synthetic(spec);
  std::vector<std::string> ids;
  for (const VolumeSample& s : samples) {
    save_volume(out_dir / (s.id + ".morv"), s, spec.num_classes);
    ids.push_back(s.id);
  }
  save_index(out_dir, ids, spec.num_classes);
  std::cout << "wrote " << samples.size() << " volumes to " << out_dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_filter(const fs::path& in_path, const std::string& op, const std::string& impl,
               double p, const std::string& window_text, const fs::path& out_path,
               const std::string& pgm_dir) {
  const Window3 win = parse_window(window_text);
  LoadedVolume lv = load_volume(in_path);
  const Tensor& img = lv.sample.image;  // [C,D,H,W]
  Shape batched{1, img.extent(0), img.extent(1), img.extent(2), img.extent(3)};
  Tensor x(batched, std::vector<double>(img.data().begin(), img.data().end()));

  Tensor y;
  if (impl == "flat") {
    const StructElement se = StructElement::flat(win);
    if (op == "erode") y = erode_flat(x, se);
    else if (op == "dilate") y = dilate_flat(x, se);
    else if (op == "open") y = open_flat(x, se);
    else if (op == "close") y = close_flat(x, se);
    else throw ConfigError("unknown op \"" + op + "\"; valid: erode, dilate, open, close");
  } else if (impl == "chm") {
    // A uniform kernel; |p| sets the exponent magnitude, the operation the sign.
    Tensor w = Tensor::full({img.extent(0), 1, win.d, win.h, win.w},
                            1.0 / static_cast<double>(win.volume()));
    const StructElement se = StructElement::chm_from_weights(win, w);
    const double mag = std::fabs(p);
    if (op == "erode") y = chm_general(x, se, -mag);
    else if (op == "dilate") y = chm_general(x, se, mag);
    else if (op == "open") y = chm_general(chm_general(x, se, -mag), se, mag);
    else if (op == "close") y = chm_general(chm_general(x, se, mag), se, -mag);
    else throw ConfigError("unknown op \"" + op + "\"; valid: erode, dilate, open, close");
  } else {
    throw ConfigError("unknown impl \"" + impl + "\"; valid: flat, chm");
  }

  VolumeSample out_sample;
  out_sample.image = Tensor(img.shape(),
                            std::vector<double>(y.data().begin(), y.data().end()));
  out_sample.label = lv.sample.label;
  out_sample.id = lv.sample.id;
  save_volume(out_path, out_sample, lv.num_classes);

  if (!pgm_dir.empty()) {
    fs::create_directories(pgm_dir);
    const std::size_t c = img.extent(0), d = img.extent(1), h = img.extent(2),
                      w = img.extent(3);
    auto v = out_sample.image.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* vol = v.data() + ch * d * h * w;
      std::vector<double> axial(h * w), coronal(d * w), sagittal(d * h);
      for (std::size_t y_ = 0; y_ < h; ++y_)
        for (std::size_t x_ = 0; x_ < w; ++x_)
          axial[y_ * w + x_] = vol[(d / 2) * h * w + y_ * w + x_];
      for (std::size_t z = 0; z < d; ++z)
        for (std::size_t x_ = 0; x_ < w; ++x_)
          coronal[z * w + x_] = vol[z * h * w + (h / 2) * w + x_];
      for (std::size_t z = 0; z < d; ++z)
        for (std::size_t y_ = 0; y_ < h; ++y_)
          sagittal[z * h + y_] = vol[z * h * w + y_ * w + w / 2];
      const std::string stem = out_sample.id + "_c" + std::to_string(ch);
      write_pgm(fs::path(pgm_dir) / (stem + "_axial.pgm"), axial, h, w);
      write_pgm(fs::path(pgm_dir) / (stem + "_coronal.pgm"), coronal, d, w);
      write_pgm(fs::path(pgm_dir) / (stem + "_sagittal.pgm"), sagittal, d, h);
    }
  }
  std::cout << "wrote " << out_path.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

std::vector<VolumeSample> load_dataset(const fs::path& dir, bool normalize,
                                       std::size_t* num_classes) {
  const DatasetIndex idx = load_index(dir);
  std::vector<VolumeSample> data;
  for (const std::string& id : idx.ids) {
    LoadedVolume lv = load_volume(dir / (id + ".morv"));
    if (normalize) lv.sample.image = normalize_clip(lv.sample.image);
    data.push_back(std::move(lv.sample));
  }
  if (num_classes) *num_classes = idx.num_classes;
  return data;
}

int cmd_train(const fs::path& data_dir, const std::string& variant_text,
              const fs::path& config_path, const fs::path& out_dir) {
  const Variant variant = variant_from_name(variant_text);
  json config;
  try {
    config = json::parse(read_file(config_path));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  if (!config.contains("network") || !config.contains("train"))
    throw ConfigError("config must contain \"network\" and \"train\" objects");

  ExperimentConfig cfg;
  cfg.network = network_config_from_json(config.at("network").dump());
  cfg.network.variant = variant;
  cfg.train = train_config_from_json(config.at("train").dump());

  std::size_t num_classes = 0;
  const std::vector<VolumeSample> data = load_dataset(data_dir, cfg.train.normalize,
                                                      &num_classes);
  if (num_classes != cfg.network.num_classes)
    throw ConfigError("dataset has " + std::to_string(num_classes) +
                      " classes but the network is configured for " +
                      std::to_string(cfg.network.num_classes));

  std::error_code ec;
  fs::create_directories(out_dir, ec);

  // The manifest pins everything needed to reproduce the run, and is
  // written before training starts.
  json manifest;
  manifest["tool_version"] = std::string(kToolVersion);
  manifest["created_utc"] = utc_timestamp();
  manifest["command"] = "train";
  manifest["variant"] = std::string(variant_name(variant));
  manifest["data_dir"] = data_dir.string();
  manifest["output_dir"] = out_dir.string();
  manifest["network"] = json::parse(network_config_to_json(cfg.network));
  manifest["train"] = json::parse(train_config_to_json(cfg.train));
  manifest["workers"] = env_worker_count();
  json outputs;
  outputs["history_csv"] = "history.csv";
  outputs["metrics_json"] = "metrics.json";
  outputs["metrics_csv"] = "metrics.csv";
  json ckpts = json::array();
  for (std::size_t f = 0; f < cfg.train.folds; ++f)
    ckpts.push_back("fold" + std::to_string(f) + ".morphnet");
  outputs["checkpoints"] = ckpts;
  manifest["outputs"] = outputs;
  write_file(out_dir / "manifest.json", manifest.dump(2) + "\n");

  const ExperimentResult result = run_experiment(data, cfg, env_worker_count());

  for (std::size_t f = 0; f < result.folds.size(); ++f)
    save_model(out_dir / ("fold" + std::to_string(f) + ".morphnet"),
               result.folds[f].result.model);
  write_file(out_dir / "history.csv", history_csv(result.folds));
  write_file(out_dir / "metrics.json", metrics_to_json(variant, result.ensemble) + "\n");
  write_file(out_dir / "metrics.csv", metrics_csv(variant, result.ensemble));

  std::cout << "variant " << variant_name(variant) << ": whole dice "
            << result.ensemble.whole_dice << ", core dice " << result.ensemble.core_dice
            << ", enhancing dice " << result.ensemble.enhancing_dice << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_compare(const std::vector<std::string>& runs, const fs::path& out_csv) {
  std::vector<std::pair<Variant, Metrics>> rows;
  for (const std::string& run : runs) {
    const fs::path metrics_path = fs::path(run) / "metrics.json";
    if (!fs::exists(metrics_path))
      throw NumericalError("run \"" + run + "\" has no metrics.json (incomplete run?)");
    rows.push_back(metrics_from_json(read_file(metrics_path)));
  }
  write_file(out_csv, compare_table_csv(rows));
  std::cout << "wrote " << out_csv.string() << " (" << rows.size() << " rows)\n";
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_gradcheck(const std::string& scope, std::uint64_t seed) {
  const std::vector<GradCheckResult> results = gradcheck_scope(scope, seed);
  bool all_passed = true;
  for (const GradCheckResult& r : results) {
    std::printf("%-28s max_rel_error %.3e (threshold %.0e) %s\n", r.name.c_str(),
                r.max_rel_error, r.threshold, r.passed() ? "PASS" : "FAIL");
    all_passed = all_passed && r.passed();
  }
  if (!all_passed) {
    for (const GradCheckResult& r : results)
      if (!r.passed()) std::printf("verification failed: %s\n", r.name.c_str());
    return kExitVerification;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"differentiable 3-D morphology segmentation workbench"};
  app.require_subcommand(1);

  std::string spec_path, out_dir;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic MORV1 dataset");
  gen->add_option("--spec", spec_path, "JSON generation spec")->required();
  gen->add_option("--out", out_dir, "output directory")->required();

  std::string f_in, f_op, f_impl = "flat", f_window = "3,3,3", f_out, f_pgm;
  double f_p = 1.0;
  auto* filter = app.add_subcommand("filter", "apply a morphological operator to a volume");
  filter->add_option("--in", f_in, "input MORV1 volume")->required();
  filter->add_option("--op", f_op, "erode|dilate|open|close")->required();
  filter->add_option("--impl", f_impl, "flat|chm");
  filter->add_option("--p", f_p, "CHM exponent magnitude (default 1)");
  filter->add_option("--window", f_window, "window extents d,h,w");
  filter->add_option("--out", f_out, "output MORV1 volume")->required();
  filter->add_option("--slice-pgm", f_pgm, "directory for mid-axis PGM cross-sections");

  std::string t_data, t_variant, t_config, t_out;
  auto* train = app.add_subcommand("train", "k-fold training of one architecture variant");
  train->add_option("--data", t_data, "dataset directory (gen-data output)")->required();
  train->add_option("--variant", t_variant,
                    "baseline|nonlearnable|nonlearnable-skip|chm|chm-skip")->required();
  train->add_option("--config", t_config, "JSON config with network and train sections")
      ->required();
  train->add_option("--out", t_out, "run output directory")->required();

  std::vector<std::string> c_runs;
  std::string c_out;
  auto* compare = app.add_subcommand("compare", "collate run metrics into one CSV table");
  compare->add_option("--runs", c_runs, "run directories")->required()->expected(-1);
  compare->add_option("--out", c_out, "output CSV path")->required();

  std::string g_scope;
  std::uint64_t g_seed = 1;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  gradcheck->add_option("--scope", g_scope, "tensor|morph|block|network")->required();
  gradcheck->add_option("--seed", g_seed, "random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(spec_path, out_dir);
    if (filter->parsed()) return cmd_filter(f_in, f_op, f_impl, f_p, f_window, f_out, f_pgm);
    if (train->parsed()) return cmd_train(t_data, t_variant, t_config, t_out);
    if (compare->parsed()) return cmd_compare(c_runs, c_out);
    if (gradcheck->parsed()) return cmd_gradcheck(g_scope, g_seed);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
