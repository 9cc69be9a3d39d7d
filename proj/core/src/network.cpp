#include "morphgrad/network.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

namespace morphgrad {

using nlohmann::json;

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v{Variant::Baseline, Variant::NonLearnable,
                                      Variant::NonLearnableSkip, Variant::Chm,
                                      Variant::ChmSkip};
  return v;
}

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::Baseline: return "baseline";
    case Variant::NonLearnable: return "nonlearnable";
    case Variant::NonLearnableSkip: return "nonlearnable-skip";
    case Variant::Chm: return "chm";
    case Variant::ChmSkip: return "chm-skip";
  }
  return "?";
}

Variant variant_from_name(std::string_view name) {
  for (Variant v : all_variants())
    if (variant_name(v) == name) return v;
  std::string valid;
  for (Variant v : all_variants()) {
    if (!valid.empty()) valid += ", ";
    valid += variant_name(v);
  }
  throw ConfigError("unknown variant \"" + std::string(name) + "\"; valid: " + valid);
}

OpImpl NetworkConfig::op_impl() const {
  return (variant == Variant::Chm || variant == Variant::ChmSkip) ? OpImpl::Chm
                                                                  : OpImpl::NonLearnable;
}

bool NetworkConfig::skip() const {
  return variant == Variant::NonLearnableSkip || variant == Variant::ChmSkip;
}

void NetworkConfig::validate() const {
  if (depth < 2) throw ConfigError("network: depth must be >= 2");
  if (num_classes < 2) throw ConfigError("network: num_classes must be >= 2");
  if (input_channels < 1) throw ConfigError("network: input_channels must be >= 1");
  if (base_channels % 2 != 0)
    throw ConfigError("network: base_channels must be even for the half split");
  if (has_morph_blocks() && (base_channels / 2) % 4 != 0)
    throw ConfigError("network: morph half (" + std::to_string(base_channels / 2) +
                      " channels) must be divisible by the 4 pathways");
  if (deep_supervision_levels < 1 || deep_supervision_levels > depth - 1)
    throw ConfigError("network: deep_supervision_levels must be in [1, depth-1]");
  if (window.d % 2 == 0 || window.h % 2 == 0 || window.w % 2 == 0)
    throw ConfigError("network: window extents must be odd");
}

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

Tensor& ParamStore::add(std::string name, Tensor t) {
  if (contains(name)) throw UsageError("duplicate parameter name \"" + name + "\"");
  entries_.emplace_back(std::move(name), std::move(t));
  return entries_.back().second;
}

const Tensor& ParamStore::at(std::string_view name) const {
  for (const auto& [n, t] : entries_)
    if (n == name) return t;
  throw UsageError("unknown parameter \"" + std::string(name) + "\"");
}

bool ParamStore::contains(std::string_view name) const {
  for (const auto& [n, t] : entries_)
    if (n == name) return true;
  return false;
}

void ParamStore::set(std::string_view name, Tensor t) {
  for (auto& [n, existing] : entries_) {
    if (n == name) {
      if (existing.shape() != t.shape())
        throw ShapeError("parameter \"" + std::string(name) + "\" shape change from " +
                         shape_str(existing.shape()) + " to " + shape_str(t.shape()));
      existing = std::move(t);
      return;
    }
  }
  throw UsageError("unknown parameter \"" + std::string(name) + "\"");
}

std::size_t ParamStore::total_parameters() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.numel();
  return n;
}

ParamStore ParamStore::tracked_on(Tape& tape) const {
  ParamStore out;
  for (const auto& [name, t] : entries_) out.add(name, tape.watch(t));
  return out;
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [name, t] : entries_) {
    out.add(name, Tensor(t.shape(), std::vector<double>(t.data().begin(), t.data().end())));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

namespace {

Tensor he_uniform(Shape shape, Rng& rng) {
  std::size_t fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  Tensor k(std::move(shape));
  for (double& v : k.mutable_data()) v = rng.uniform(-bound, bound);
  return k;
}

void add_conv(ParamStore& ps, const std::string& prefix, std::size_t cout, std::size_t cin,
              std::size_t k, Rng& rng) {
  ps.add(prefix + ".kernel", he_uniform({cout, cin, k, k, k}, rng));
  ps.add(prefix + ".bias", Tensor({cout}));
}

void add_norm(ParamStore& ps, const std::string& prefix, std::size_t c) {
  ps.add(prefix + ".scale", Tensor::full({c}, 1.0));
  ps.add(prefix + ".shift", Tensor({c}));
}

// {instance_norm -> leaky_relu -> conv3} x2 with a residual sum; a 1^3
// projection aligns the residual when the channel count changes.
void add_context_block(ParamStore& ps, const std::string& prefix, std::size_t cin,
                       std::size_t cout, Rng& rng) {
  add_norm(ps, prefix + ".norm1", cin);
  add_conv(ps, prefix + ".conv1", cout, cin, 3, rng);
  add_norm(ps, prefix + ".norm2", cout);
  add_conv(ps, prefix + ".conv2", cout, cout, 3, rng);
  if (cin != cout) add_conv(ps, prefix + ".proj", cout, cin, 1, rng);
}

MorphBlockConfig level_morph_config(const NetworkConfig& cfg, std::size_t level) {
  MorphBlockConfig mb;
  mb.in_channels = cfg.channels_at(level);
  mb.out_channels = cfg.channels_at(level) / 2;
  mb.op_impl = cfg.op_impl();
  mb.skip = cfg.skip();
  mb.window = cfg.window;
  mb.leaky_slope = cfg.leaky_slope;
  return mb;
}

void add_morph_block(ParamStore& ps, const std::string& prefix, const MorphBlockConfig& mb,
                     Rng& rng) {
  for (std::size_t i = 0; i < mb.pathways.size(); ++i) {
    MorphPathwayParams p = init_pathway_params(mb, rng);
    const std::string pp = prefix + ".p" + std::to_string(i);
    ps.add(pp + ".conv1.kernel", p.conv1_kernel);
    ps.add(pp + ".conv1.bias", p.conv1_bias);
    ps.add(pp + ".conv2.kernel", p.conv2_kernel);
    ps.add(pp + ".conv2.bias", p.conv2_bias);
    if (mb.op_impl == OpImpl::Chm) ps.add(pp + ".se", p.se_weights);
  }
}

}  // namespace

std::pair<std::size_t, std::size_t> encoder_channel_split(const NetworkConfig& cfg,
                                                          std::size_t level) {
  cfg.validate();
  const std::size_t c = cfg.channels_at(level);
  if (!cfg.has_morph_blocks()) return {c, 0};
  return {c / 2, c / 2};
}

SegmentationModel build_network(const NetworkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  SegmentationModel model;
  model.config = cfg;
  ParamStore& ps = model.params;

  add_conv(ps, "stem", cfg.base_channels, cfg.input_channels, 3, rng);
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    const std::string enc = "enc" + std::to_string(l);
    const std::size_t c = cfg.channels_at(l);
    if (l > 0) add_conv(ps, enc + ".down", c, cfg.channels_at(l - 1), 3, rng);
    const auto [ctx_c, morph_c] = encoder_channel_split(cfg, l);
    add_context_block(ps, enc + ".ctx", c, ctx_c, rng);
    if (morph_c > 0) add_morph_block(ps, enc + ".morph", level_morph_config(cfg, l), rng);
  }
  for (std::size_t j = cfg.depth - 1; j-- > 0;) {
    const std::string dec = "dec" + std::to_string(j);
    const std::size_t c = cfg.channels_at(j);
    add_conv(ps, dec + ".up", c, cfg.channels_at(j + 1), 3, rng);
    add_norm(ps, dec + ".loc.norm1", 2 * c);
    add_conv(ps, dec + ".loc.conv1", c, 2 * c, 3, rng);
    add_norm(ps, dec + ".loc.norm2", c);
    add_conv(ps, dec + ".loc.conv2", c, c, 1, rng);
  }
  for (std::size_t j = 0; j < cfg.deep_supervision_levels; ++j) {
    add_conv(ps, "head" + std::to_string(j), cfg.num_classes, cfg.channels_at(j), 1, rng);
  }
  return model;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace {

Tensor conv_biased(const ParamStore& ps, const std::string& prefix, const Tensor& x,
                   std::size_t stride = 1) {
  return add_channel_bias(conv3d(x, ps.at(prefix + ".kernel"), PadMode::Replicate, stride),
                          ps.at(prefix + ".bias"));
}

Tensor norm_act(const ParamStore& ps, const std::string& prefix, const Tensor& x,
                double slope) {
  return leaky_relu(instance_norm(x, ps.at(prefix + ".scale"), ps.at(prefix + ".shift")),
                    slope);
}

Tensor context_block(const ParamStore& ps, const std::string& prefix, const Tensor& x,
                     std::size_t cin, std::size_t cout, double slope) {
  Tensor u = norm_act(ps, prefix + ".norm1", x, slope);
  u = conv_biased(ps, prefix + ".conv1", u);
  u = norm_act(ps, prefix + ".norm2", u, slope);
  u = conv_biased(ps, prefix + ".conv2", u);
  Tensor res = (cin == cout) ? x : conv_biased(ps, prefix + ".proj", x);
  return add(res, u);
}

MorphBlockParams morph_params_from_store(const ParamStore& ps, const std::string& prefix,
                                         const MorphBlockConfig& mb) {
  MorphBlockParams out;
  for (std::size_t i = 0; i < mb.pathways.size(); ++i) {
    const std::string pp = prefix + ".p" + std::to_string(i);
    MorphPathwayParams p;
    p.conv1_kernel = ps.at(pp + ".conv1.kernel");
    p.conv1_bias = ps.at(pp + ".conv1.bias");
    p.conv2_kernel = ps.at(pp + ".conv2.kernel");
    p.conv2_bias = ps.at(pp + ".conv2.bias");
    if (mb.op_impl == OpImpl::Chm) p.se_weights = ps.at(pp + ".se");
    out.pathways.push_back(std::move(p));
  }
  return out;
}

}  // namespace

ForwardOutput forward(const SegmentationModel& model, const Tensor& x) {
  const NetworkConfig& cfg = model.config;
  cfg.validate();
  if (x.rank() != 5)
    throw ShapeError("forward: input must be [N,C,D,H,W], got " + shape_str(x.shape()));
  if (x.extent(1) != cfg.input_channels)
    throw ShapeError("forward: expected " + std::to_string(cfg.input_channels) +
                     " input channels, got " + std::to_string(x.extent(1)));
  const std::size_t div = std::size_t{1} << (cfg.depth - 1);
  for (std::size_t ax = 2; ax < 5; ++ax) {
    if (x.extent(ax) % div != 0)
      throw ShapeError("forward: spatial extent " + std::to_string(x.extent(ax)) +
                       " not divisible by " + std::to_string(div));
  }
  const ParamStore& ps = model.params;
  const double slope = cfg.leaky_slope;

  Tensor t = conv_biased(ps, "stem", x);
  std::vector<Tensor> skips;
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    const std::string enc = "enc" + std::to_string(l);
    if (l > 0) t = conv_biased(ps, enc + ".down", t, 2);
    const std::size_t c = cfg.channels_at(l);
    const auto [ctx_c, morph_c] = encoder_channel_split(cfg, l);
    if (morph_c == 0) {
      t = context_block(ps, enc + ".ctx", t, c, c, slope);
    } else {
      const MorphBlockConfig mb = level_morph_config(cfg, l);
      Tensor ctx_half = context_block(ps, enc + ".ctx", t, c, ctx_c, slope);
      Tensor morph_half =
          morph_block_forward(t, mb, morph_params_from_store(ps, enc + ".morph", mb));
      t = concat_channels({ctx_half, morph_half});
    }
    skips.push_back(t);
  }

  std::vector<Tensor> dec_feats(cfg.depth - 1);  // indexed by level
  Tensor d = skips[cfg.depth - 1];
  for (std::size_t j = cfg.depth - 1; j-- > 0;) {
    const std::string dec = "dec" + std::to_string(j);
    d = upsample_nearest2(d);
    d = conv_biased(ps, dec + ".up", d);
    d = concat_channels({d, skips[j]});
    d = norm_act(ps, dec + ".loc.norm1", d, slope);
    d = conv_biased(ps, dec + ".loc.conv1", d);
    d = norm_act(ps, dec + ".loc.norm2", d, slope);
    d = conv_biased(ps, dec + ".loc.conv2", d);
    dec_feats[j] = d;
  }

  // Deep supervision: class maps from the deepest levels, upsampled and
  // summed into the full-resolution logits.
  std::vector<Tensor> seg(cfg.deep_supervision_levels);
  for (std::size_t j = 0; j < cfg.deep_supervision_levels; ++j)
    seg[j] = conv_biased(ps, "head" + std::to_string(j), dec_feats[j]);
  Tensor acc = seg[cfg.deep_supervision_levels - 1];
  for (std::size_t j = cfg.deep_supervision_levels - 1; j-- > 0;)
    acc = add(upsample_nearest2(acc), seg[j]);

  ForwardOutput out;
  out.logits = acc;
  for (std::size_t j = 1; j < cfg.deep_supervision_levels; ++j) out.aux.push_back(seg[j]);
  return out;
}

// ---------------------------------------------------------------------------
// Dice loss and label utilities
// ---------------------------------------------------------------------------

Tensor dice_loss(const Tensor& probs, const Tensor& target, double epsilon) {
  if (probs.rank() != 5 || target.rank() != 5 || probs.shape() != target.shape())
    throw ShapeError("dice_loss: probs " + shape_str(probs.shape()) + " and target " +
                     shape_str(target.shape()) + " must be equal rank-5 shapes");
  auto pv = probs.data();
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (pv[i] < -1e-9 || pv[i] > 1.0 + 1e-9)
      throw UsageError("dice_loss: probability " + std::to_string(pv[i]) +
                       " outside [0,1] at flat index " + std::to_string(i));
  }
  auto tv = target.data();
  const std::size_t n = target.extent(0), k = target.extent(1);
  const std::size_t inner = target.numel() / (n * k);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < inner; ++i) {
      double sum = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        const double v = tv[(b * k + c) * inner + i];
        if (v != 0.0 && v != 1.0) throw UsageError("dice_loss: target is not one-hot");
        sum += v;
      }
      if (sum != 1.0) throw UsageError("dice_loss: target channel sums must be exactly 1");
    }

  Tensor intersection = sum_per_channel(mul(probs, target));
  Tensor psum = sum_per_channel(probs);
  Tensor tsum = sum_per_channel(target);
  Tensor ratio = div(add(mul(intersection, 2.0), epsilon), add(add(psum, tsum), epsilon));
  return sub(Tensor::scalar(1.0), mean_all(ratio));
}

Tensor one_hot(const Tensor& labels, std::size_t num_classes) {
  if (labels.rank() != 3 && labels.rank() != 4)
    throw ShapeError("one_hot: labels must be [D,H,W] or [N,D,H,W], got " +
                     shape_str(labels.shape()));
  const bool batched = labels.rank() == 4;
  const std::size_t n = batched ? labels.extent(0) : 1;
  const std::size_t inner = labels.numel() / n;
  Shape out_shape;
  if (batched)
    out_shape = {n, num_classes, labels.extent(1), labels.extent(2), labels.extent(3)};
  else
    out_shape = {1, num_classes, labels.extent(0), labels.extent(1), labels.extent(2)};
  std::vector<double> out(shape_numel(out_shape), 0.0);
  auto lv = labels.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < inner; ++i) {
      const double v = lv[b * inner + i];
      if (std::floor(v) != v || v < 0.0 || v >= static_cast<double>(num_classes))
        throw UsageError("one_hot: label " + std::to_string(v) + " outside [0," +
                         std::to_string(num_classes) + ") at flat index " +
                         std::to_string(b * inner + i));
      out[(b * num_classes + static_cast<std::size_t>(v)) * inner + i] = 1.0;
    }
  return Tensor(std::move(out_shape), std::move(out));
}

Tensor argmax_channels(const Tensor& probs) {
  if (probs.rank() != 5)
    throw ShapeError("argmax_channels: input must be [N,K,D,H,W], got " +
                     shape_str(probs.shape()));
  const std::size_t n = probs.extent(0), k = probs.extent(1);
  const std::size_t inner = probs.numel() / (n * k);
  Shape out_shape{n, probs.extent(2), probs.extent(3), probs.extent(4)};
  std::vector<double> out(n * inner);
  auto pv = probs.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < inner; ++i) {
      double best = pv[(b * k) * inner + i];
      std::size_t arg = 0;
      for (std::size_t c = 1; c < k; ++c) {
        const double v = pv[(b * k + c) * inner + i];
        if (v > best) {
          best = v;
          arg = c;
        }
      }
      out[b * inner + i] = static_cast<double>(arg);
    }
  return Tensor(std::move(out_shape), std::move(out));
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

std::string network_config_to_json(const NetworkConfig& cfg) {
  json j;
  j["variant"] = std::string(variant_name(cfg.variant));
  j["depth"] = cfg.depth;
  j["base_channels"] = cfg.base_channels;
  j["num_classes"] = cfg.num_classes;
  j["deep_supervision_levels"] = cfg.deep_supervision_levels;
  j["input_channels"] = cfg.input_channels;
  j["window"] = {cfg.window.d, cfg.window.h, cfg.window.w};
  j["leaky_slope"] = cfg.leaky_slope;
  return j.dump();
}

NetworkConfig network_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("network config: invalid JSON: ") + e.what());
  }
  NetworkConfig cfg;
  try {
    cfg.variant = variant_from_name(j.at("variant").get<std::string>());
    cfg.depth = j.at("depth").get<std::size_t>();
    cfg.base_channels = j.at("base_channels").get<std::size_t>();
    cfg.num_classes = j.at("num_classes").get<std::size_t>();
    cfg.deep_supervision_levels = j.at("deep_supervision_levels").get<std::size_t>();
    cfg.input_channels = j.at("input_channels").get<std::size_t>();
    auto win = j.at("window").get<std::vector<std::size_t>>();
    if (win.size() != 3) throw ConfigError("network config: window must have 3 extents");
    cfg.window = Window3{win[0], win[1], win[2]};
    if (j.contains("leaky_slope")) cfg.leaky_slope = j.at("leaky_slope").get<double>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("network config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

namespace {
void require_little_endian() {
  if constexpr (std::endian::native != std::endian::little)
    throw IoError("checkpoint format requires a little-endian host");
}
}  // namespace

void save_model(const std::filesystem::path& path, const SegmentationModel& model) {
  require_little_endian();
  json manifest;
  manifest["version"] = 1;
  manifest["config"] = json::parse(network_config_to_json(model.config));
  json params = json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : model.params.entries()) {
    json p;
    p["name"] = name;
    p["shape"] = t.shape();
    p["offset"] = offset;
    params.push_back(p);
    offset += t.numel() * sizeof(double);
  }
  manifest["params"] = params;
  manifest["payload_bytes"] = offset;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open \"" + path.string() + "\" for writing");
  out << kCheckpointMagic << '\n' << manifest.dump() << '\n';
  for (const auto& [name, t] : model.params.entries()) {
    auto d = t.data();
    out.write(reinterpret_cast<const char*>(d.data()),
              static_cast<std::streamsize>(d.size() * sizeof(double)));
  }
  if (!out) throw IoError("failed writing checkpoint \"" + path.string() + "\"");
}

SegmentationModel load_model(const std::filesystem::path& path) {
  require_little_endian();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open \"" + path.string() + "\"");
  std::string magic;
  if (!std::getline(in, magic) || magic != kCheckpointMagic)
    throw IoError("\"" + path.string() + "\": bad magic \"" + magic + "\", expected \"" +
                  std::string(kCheckpointMagic) + "\"");
  std::string manifest_line;
  if (!std::getline(in, manifest_line))
    throw IoError("\"" + path.string() + "\": missing manifest line");
  json manifest;
  try {
    manifest = json::parse(manifest_line);
  } catch (const json::exception& e) {
    throw IoError("\"" + path.string() + "\": manifest is not valid JSON: " + e.what());
  }

  SegmentationModel model;
  std::size_t declared = 0;
  try {
    model.config = network_config_from_json(manifest.at("config").dump());
    declared = manifest.at("payload_bytes").get<std::size_t>();
    std::vector<char> payload(declared);
    in.read(payload.data(), static_cast<std::streamsize>(declared));
    if (static_cast<std::size_t>(in.gcount()) != declared)
      throw IoError("\"" + path.string() + "\": payload truncated: manifest declares " +
                    std::to_string(declared) + " bytes, read " + std::to_string(in.gcount()));
    for (const auto& p : manifest.at("params")) {
      const std::string name = p.at("name").get<std::string>();
      const Shape shape = p.at("shape").get<Shape>();
      const std::size_t offset = p.at("offset").get<std::size_t>();
      const std::size_t bytes = shape_numel(shape) * sizeof(double);
      if (offset + bytes > declared)
        throw IoError("\"" + path.string() + "\": parameter \"" + name +
                      "\" extends past the declared payload");
      std::vector<double> values(shape_numel(shape));
      std::memcpy(values.data(), payload.data() + offset, bytes);
      model.params.add(name, Tensor(shape, std::move(values)));
    }
  } catch (const json::exception& e) {
    throw IoError("\"" + path.string() + "\": manifest field error: " + e.what());
  }
  return model;
}

}  // namespace morphgrad
