#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "morphgrad/gradcheck.hpp"
#include "morphgrad/network.hpp"
#include "morphgrad/training.hpp"
#include "oracles.hpp"

using namespace morphgrad;
namespace fs = std::filesystem;

namespace {
NetworkConfig small_config(Variant v) {
  NetworkConfig cfg;
  cfg.variant = v;
  cfg.depth = 2;
  cfg.base_channels = 8;
  cfg.num_classes = 3;
  cfg.deep_supervision_levels = 1;
  cfg.input_channels = 1;
  return cfg;
}
}  // namespace

TEST_CASE("construction rule: variants share the whole decoder") {
  SegmentationModel baseline = build_network(small_config(Variant::Baseline), 1);
  SegmentationModel chm_skip = build_network(small_config(Variant::ChmSkip), 1);

  auto decoder_signature = [](const SegmentationModel& m) {
    std::vector<std::pair<std::string, Shape>> sig;
    for (const auto& [name, t] : m.params.entries())
      if (name.rfind("dec", 0) == 0 || name.rfind("head", 0) == 0 ||
          name.rfind("stem", 0) == 0 || name.find(".down.") != std::string::npos)
        sig.emplace_back(name, t.shape());
    return sig;
  };
  CHECK(decoder_signature(baseline) == decoder_signature(chm_skip));

  // Differences are confined to the encoder blocks.
  for (const auto& [name, t] : chm_skip.params.entries()) {
    if (!baseline.params.contains(name)) {
      CHECK(name.rfind("enc", 0) == 0);
      const bool block_param = name.find(".morph.") != std::string::npos ||
                               name.find(".ctx.") != std::string::npos;
      CHECK(block_param);
    }
  }
}

TEST_CASE("logits shape and deep supervision bookkeeping") {
  NetworkConfig cfg;
  cfg.variant = Variant::Baseline;
  cfg.depth = 3;
  cfg.base_channels = 8;
  cfg.num_classes = 3;
  cfg.deep_supervision_levels = 2;
  SegmentationModel model = build_network(cfg, 7);
  Rng rng(8);
  Tensor x = oracle::random_tensor({1, 1, 16, 16, 16}, rng);
  ForwardOutput out = forward(model, x);
  CHECK(out.logits.shape() == Shape{1, 3, 16, 16, 16});
  CHECK(out.aux.size() == 1);
  CHECK(out.aux[0].shape() == Shape{1, 3, 8, 8, 8});

  Tensor probs = softmax_channels(out.logits);
  for (std::size_t i = 0; i < 16 * 16 * 16; ++i) {
    double sum = 0.0;
    for (std::size_t c = 0; c < 3; ++c) sum += probs[c * 4096 + i];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }

  SegmentationModel plain = build_network(small_config(Variant::Baseline), 7);
  ForwardOutput plain_out = forward(plain, oracle::random_tensor({1, 1, 8, 8, 8}, rng));
  CHECK(plain_out.aux.empty());  // one supervision level = plain head

  CHECK_THROWS_AS(forward(model, oracle::random_tensor({1, 1, 10, 10, 10}, rng)),
                  ShapeError);  // 10 not divisible by 4
}

TEST_CASE("identical seeds build bit-identical parameters") {
  for (Variant v : all_variants()) {
    SegmentationModel a = build_network(small_config(v), 31337);
    SegmentationModel b = build_network(small_config(v), 31337);
    REQUIRE(a.params.size() == b.params.size());
    for (std::size_t i = 0; i < a.params.size(); ++i) {
      CHECK(a.params.entries()[i].first == b.params.entries()[i].first);
      CHECK(oracle::bitwise_equal(a.params.entries()[i].second,
                                  b.params.entries()[i].second));
    }
  }
}

TEST_CASE("parameter counts match the hand-computed table") {
  // depth=2, base=8, K=3, 1 input channel, one supervision head, 3x3x3:
  //   stem                    8*1*27+8              = 224
  //   enc0 baseline context   16+1736+16+1736       = 3504
  //   enc0 context half       16+868+8+436+36       = 1364
  //   enc0 morph half (flat)  4*(217+28)            = 980
  //   enc0 morph half (chm)   4*(217+28+27)         = 1088
  //   enc1 downsample         16*8*27+16            = 3472
  //   enc1 baseline context   32+6928+32+6928       = 13920
  //   enc1 context half       32+3464+16+1736+136   = 5384
  //   enc1 morph half (flat)  4*(866+110)           = 3904
  //   enc1 morph half (chm)   4*(866+110+54)        = 4120
  //   dec0 upsample conv      8*16*27+8             = 3464
  //   dec0 localization       32+3464+16+72         = 3584
  //   head0                   3*8+3                 = 27
  const std::size_t shared = 224 + 3472 + 3464 + 3584 + 27;
  CHECK(build_network(small_config(Variant::Baseline), 1).params.total_parameters() ==
        shared + 3504 + 13920);
  CHECK(build_network(small_config(Variant::NonLearnable), 1).params.total_parameters() ==
        shared + 1364 + 980 + 5384 + 3904);
  CHECK(build_network(small_config(Variant::NonLearnableSkip), 1).params.total_parameters() ==
        shared + 1364 + 980 + 5384 + 3904);
  CHECK(build_network(small_config(Variant::Chm), 1).params.total_parameters() ==
        shared + 1364 + 1088 + 5384 + 4120);
  CHECK(build_network(small_config(Variant::ChmSkip), 1).params.total_parameters() ==
        shared + 1364 + 1088 + 5384 + 4120);
}

TEST_CASE("encoder half split bookkeeping") {
  for (Variant v : all_variants()) {
    NetworkConfig cfg = small_config(v);
    for (std::size_t level = 0; level < cfg.depth; ++level) {
      const auto [ctx_c, morph_c] = encoder_channel_split(cfg, level);
      const std::size_t c = cfg.channels_at(level);
      if (v == Variant::Baseline) {
        CHECK(ctx_c == c);
        CHECK(morph_c == 0);
      } else {
        CHECK(ctx_c == c / 2);
        CHECK(morph_c == c / 2);
      }
    }
  }
  // The stored parameter shapes agree with the split: the context half's
  // final conv and the four pathway convs together emit the level width.
  SegmentationModel m = build_network(small_config(Variant::Chm), 5);
  for (std::size_t level = 0; level < 2; ++level) {
    const std::string enc = "enc" + std::to_string(level);
    const std::size_t c = small_config(Variant::Chm).channels_at(level);
    CHECK(m.params.at(enc + ".ctx.conv2.kernel").extent(0) == c / 2);
    std::size_t morph_out = 0;
    for (int p = 0; p < 4; ++p)
      morph_out += m.params.at(enc + ".morph.p" + std::to_string(p) + ".conv2.kernel").extent(0);
    CHECK(morph_out == c / 2);
  }
}

TEST_CASE("dice loss") {
  // Perfect one-hot prediction: numerator and denominator coincide.
  Tensor target = one_hot(Tensor({2, 2, 2}, {0, 1, 1, 0, 1, 0, 0, 1}), 2);
  CHECK(dice_loss(target, target)[0] == doctest::Approx(0.0).epsilon(1e-5));

  // Uniform 0.5 probabilities on a balanced two-class target.
  Tensor half = Tensor::full({1, 2, 2, 2, 2}, 0.5);
  CHECK(dice_loss(half, target)[0] == doctest::Approx(0.5).epsilon(1e-4));

  Rng rng(9);
  for (int t = 0; t < 10; ++t) {
    Tensor labels({4, 4, 4});
    for (double& v : labels.mutable_data()) v = static_cast<double>(rng.below(3));
    Tensor onehot = one_hot(labels, 3);
    Tensor logits = oracle::random_tensor({1, 3, 4, 4, 4}, rng, -2.0, 2.0);
    Tensor probs = softmax_channels(logits);
    const double loss = dice_loss(probs, onehot)[0];
    CHECK(loss >= 0.0);
    CHECK(loss <= 1.0);
    CHECK(loss == doctest::Approx(oracle::dice_loss(probs, onehot)).epsilon(1e-12));
  }

  Tensor not_onehot = Tensor::full({1, 2, 2, 2, 2}, 0.5);
  CHECK_THROWS_AS(dice_loss(half, not_onehot), UsageError);
  Tensor bad_probs = Tensor::full({1, 2, 2, 2, 2}, 1.5);
  CHECK_THROWS_AS(dice_loss(bad_probs, target), UsageError);
}

TEST_CASE("checkpoint round trip is bitwise, forward included") {
  const fs::path dir = fs::temp_directory_path() / "morphgrad_ckpt_test";
  fs::create_directories(dir);
  const fs::path path = dir / "model.morphnet";

  SegmentationModel model = build_network(small_config(Variant::ChmSkip), 99);
  Rng rng(10);
  Tensor x = oracle::random_tensor({1, 1, 8, 8, 8}, rng);
  Tensor before = forward(model, x).logits;

  save_model(path, model);
  SegmentationModel loaded = load_model(path);
  REQUIRE(loaded.params.size() == model.params.size());
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    CHECK(loaded.params.entries()[i].first == model.params.entries()[i].first);
    CHECK(oracle::bitwise_equal(loaded.params.entries()[i].second,
                                model.params.entries()[i].second));
  }
  CHECK(oracle::bitwise_equal(forward(loaded, x).logits, before));

  // Corrupted magic names the expected string.
  {
    std::ofstream out(dir / "bad.morphnet", std::ios::binary);
    out << "NOTMAGIC1\n{}\n";
  }
  try {
    load_model(dir / "bad.morphnet");
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("MORPHNET1") != std::string::npos);
  }

  // Truncated payload is reported as such.
  {
    std::ifstream in(path, std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(in)), {});
    std::ofstream out(dir / "short.morphnet", std::ios::binary);
    out.write(all.data(), static_cast<std::streamsize>(all.size() - 64));
  }
  try {
    load_model(dir / "short.morphnet");
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("truncated") != std::string::npos);
  }
}

TEST_CASE("one optimizer step decreases the dice loss for every variant") {
  Tensor labels({8, 8, 8});
  {
    auto lv = labels.mutable_data();
    for (std::size_t z = 0; z < 8; ++z)
      for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x)
          lv[(z * 8 + y) * 8 + x] = (z >= 2 && z < 6 && y >= 2 && y < 6) ? 1.0 : 0.0;
  }
  Rng rng(11);
  Tensor image = oracle::random_tensor({1, 1, 8, 8, 8}, rng, 0.0, 0.2);
  {
    auto iv = image.mutable_data();
    for (std::size_t i = 0; i < labels.numel(); ++i) iv[i] += labels[i];
  }
  const Tensor target = one_hot(labels, 2);

  for (Variant v : all_variants()) {
    NetworkConfig cfg = small_config(v);
    cfg.num_classes = 2;
    SegmentationModel model = build_network(cfg, 1234);
    TrainConfig tc;
    tc.learning_rate = 1e-3;
    AdamOptimizer opt(tc);

    auto loss_of = [&](const SegmentationModel& m) {
      return dice_loss(softmax_channels(forward(m, image).logits), target)[0];
    };
    const double before = loss_of(model);
    Tape tape;
    SegmentationModel tracked{model.config, model.params.tracked_on(tape)};
    Tensor loss = dice_loss(softmax_channels(forward(tracked, image).logits), target);
    tape.backward(loss);
    opt.step(model.params, tracked.params, tape);
    const double after = loss_of(model);
    INFO(variant_name(v), ": ", before, " -> ", after);
    CHECK(after < before);
  }
}

TEST_CASE("depth-2 network gradient spot check") {
  for (const GradCheckResult& r : gradcheck_network(2024)) {
    INFO(r.name, " rel err ", r.max_rel_error);
    CHECK(r.max_rel_error < r.threshold);
  }
}
