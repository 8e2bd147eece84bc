#include "doctest.h"

#include <cmath>
#include <vector>

#include "cellprompt/error.hpp"
#include "cellprompt/synthetic.hpp"
#include "cellprompt/training.hpp"

#include "test_support.hpp"

using namespace cellprompt;
using nn::Matrix;

namespace {

RealGrid random_logits(Rng& rng, int h, int w, double s) {
  RealGrid g(h, w);
  for (auto& v : g.values()) v = s * rng.normal();
  return g;
}

BinaryMask random_binary(Rng& rng, int h, int w) {
  BinaryMask m(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.set(y, x, rng.bernoulli(0.4));
  return m;
}

BackboneConfig small_config() {
  BackboneConfig c;
  c.input_resolution = 64;
  c.patch_size = 16;
  c.pe_grid = 8;
  c.depth = 1;
  c.decoder_depth = 1;
  return c;
}

ImageRecord small_blobs(std::uint64_t seed) {
  Rng rng(seed);
  synthetic::BlobImageConfig cfg;
  cfg.size = 64;
  cfg.blob_count = 5;
  cfg.min_radius = 4;
  cfg.max_radius = 9;
  return synthetic::blob_image(rng, cfg, "blobs");
}

TrainConfig small_train_config(int epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.patch_size = 64;
  c.min_patches = 4;
  return c;
}

} // namespace

TEST_CASE("bce_loss against the direct formula") {
  Rng rng(1);
  const BinaryMask target = random_binary(rng, 8, 8);
  CHECK(bce_loss(RealGrid(8, 8, 0.0), target) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(bce_loss(RealGrid(3, 5, 0.0), BinaryMask(3, 5)) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  for (int trial = 0; trial < 50; ++trial) {
    const auto logits = random_logits(rng, 8, 8, 3.0);
    const auto t = random_binary(rng, 8, 8);
    CHECK(std::abs(bce_loss(logits, t) - testing::direct_bce(logits, t)) < 1e-6);
  }
  // Saturated correct logits drive the loss to zero without overflow.
  RealGrid sat(4, 4, -800.0);
  BinaryMask on(4, 4);
  for (int y = 0; y < 4; ++y) {
    on.set(y, 1, true);
    sat(y, 1) = 800.0;
  }
  CHECK(bce_loss(sat, on) == 0.0);
  CHECK(bce_loss(RealGrid(4, 4, 40.0), BinaryMask(4, 4)) == doctest::Approx(40.0).epsilon(1e-9));
  CHECK_THROWS_AS(bce_loss(RealGrid(4, 4), BinaryMask(4, 5)), DimensionMismatch);
}

TEST_CASE("mse_loss against the direct formula") {
  const std::vector<double> y{1.0, 0.0, 1.0};
  CHECK(mse_loss(y, y) == 0.0);
  CHECK(mse_loss(std::vector<double>{0.5}, std::vector<double>{1.0}) == 0.25);
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = rng.uniform_int(1, 40);
    std::vector<double> p(n), t(n);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
      p[i] = rng.normal();
      t[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
      sum += (t[i] - p[i]) * (t[i] - p[i]);
    }
    CHECK(std::abs(mse_loss(p, t) - sum / n) < 1e-12);
  }
  CHECK_THROWS_AS(mse_loss(std::vector<double>{}, std::vector<double>{}), InvalidArgument);
  CHECK_THROWS_AS(mse_loss(std::vector<double>{1.0}, std::vector<double>{1.0, 0.0}), DimensionMismatch);
}

TEST_CASE("combined_loss per-sample composition under each negative mode") {
  Rng rng(3);
  LossBatch batch;
  const std::vector<Polarity> pol{Polarity::positive, Polarity::negative, Polarity::positive, Polarity::negative};
  for (auto p : pol) {
    batch.polarities.push_back(p);
    batch.mask_logits.push_back(random_logits(rng, 6, 6, 2.0));
    batch.mask_targets.push_back(p == Polarity::positive ? random_binary(rng, 6, 6) : BinaryMask(6, 6));
    batch.prob_targets.push_back(p == Polarity::positive ? 1.0 : 0.0);
    batch.prob_predictions.push_back(rng.uniform());
  }
  for (auto mode : {NegativeLossMode::bce_only, NegativeLossMode::mse_only, NegativeLossMode::both}) {
    double hand = 0.0;
    for (std::size_t i = 0; i < pol.size(); ++i) {
      const double bce = testing::direct_bce(batch.mask_logits[i], batch.mask_targets[i]);
      const double se = (batch.prob_targets[i] - batch.prob_predictions[i]) * (batch.prob_targets[i] - batch.prob_predictions[i]);
      if (pol[i] == Polarity::positive)
        hand += bce + se;
      else if (mode == NegativeLossMode::bce_only)
        hand += bce;
      else if (mode == NegativeLossMode::mse_only)
        hand += se;
      else
        hand += bce + se;
    }
    CHECK(combined_loss(batch, mode) == doctest::Approx(hand / 4).epsilon(1e-9));
    CHECK(combined_loss(batch, mode) >= 0.0);
  }

  // Perfect predictions give zero loss.
  LossBatch perfect;
  BinaryMask cell(4, 4);
  cell.set(1, 1, true);
  RealGrid logits(4, 4, -1000.0);
  logits(1, 1) = 1000.0;
  perfect.polarities = {Polarity::positive};
  perfect.mask_logits = {logits};
  perfect.mask_targets = {cell};
  perfect.prob_targets = {1.0};
  perfect.prob_predictions = {1.0};
  CHECK(combined_loss(perfect, NegativeLossMode::both) == 0.0);

  LossBatch negatives;
  negatives.polarities = {Polarity::negative, Polarity::negative};
  negatives.mask_logits = {RealGrid(4, 4, 0.3), RealGrid(4, 4, -2.0)};
  negatives.mask_targets = {BinaryMask(4, 4), BinaryMask(4, 4)};
  negatives.prob_targets = {0.0, 0.0};
  negatives.prob_predictions = {0.0, 0.0};
  CHECK(combined_loss(negatives, NegativeLossMode::mse_only) == 0.0);
  CHECK(combined_loss(negatives, NegativeLossMode::bce_only) > 0.0);

  auto broken = negatives;
  broken.prob_targets[0] = 1.0;
  CHECK_THROWS_AS(combined_loss(broken, NegativeLossMode::both), InvalidArgument);
  broken = negatives;
  broken.mask_targets.pop_back();
  CHECK_THROWS_AS(combined_loss(broken, NegativeLossMode::both), InvalidArgument);
}

TEST_CASE("prompt_loss equals combined_loss on decoded outputs") {
  PromptableSegmenter model(small_config(), 4);
  inject_lora(model, LoRAConfig{}, 5);
  const auto rec = small_blobs(6);
  Rng rng(7);
  const auto samples = sample_prompts(*rec.labels, SamplerConfig{}, rng);
  REQUIRE(samples.size() > 2);
  std::vector<Point> points;
  nn::ByteMatrix targets(static_cast<Eigen::Index>(samples.size()), 64 * 64);
  LossBatch batch;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    points.push_back(samples[i].point);
    const auto px = samples[i].target_mask.pixels().values();
    std::copy(px.begin(), px.end(), targets.row(static_cast<Eigen::Index>(i)).data());
  }
  const auto emb = model.encode_image(rec.image);
  const auto out = model.decode(emb, points);
  const Matrix full = model.upsample(out.low_res_logits).value();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    RealGrid g(64, 64);
    for (int p = 0; p < 64 * 64; ++p) g.values()[static_cast<std::size_t>(p)] = full(static_cast<Eigen::Index>(i), p);
    batch.mask_logits.push_back(g);
    batch.mask_targets.push_back(samples[i].target_mask);
    batch.polarities.push_back(samples[i].polarity);
    batch.prob_targets.push_back(samples[i].target_probability);
    batch.prob_predictions.push_back(out.iou.value()(static_cast<Eigen::Index>(i), 0));
  }
  for (auto mode : {NegativeLossMode::bce_only, NegativeLossMode::mse_only, NegativeLossMode::both})
    CHECK(prompt_loss(model, out, targets, samples, mode).item() ==
          doctest::Approx(combined_loss(batch, mode)).epsilon(1e-9));
}

TEST_CASE("prompt_loss adapter gradients match finite differences") {
  PromptableSegmenter model(small_config(), 8);
  LoRAConfig lora;
  lora.dropout = 0.0;
  inject_lora(model, lora, 9);
  Rng init(10);
  for (auto& p : model.parameters())
    if (p.is_adapter)
      for (Eigen::Index i = 0; i < p.tensor.value().size(); ++i) p.tensor.mutable_value().data()[i] = 0.3 * init.normal();
  const auto rec = small_blobs(11);
  Rng rng(12);
  const auto samples = sample_prompts(*rec.labels, SamplerConfig{}, rng);
  std::vector<Point> points;
  nn::ByteMatrix targets(static_cast<Eigen::Index>(samples.size()), 64 * 64);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    points.push_back(samples[i].point);
    const auto px = samples[i].target_mask.pixels().values();
    std::copy(px.begin(), px.end(), targets.row(static_cast<Eigen::Index>(i)).data());
  }
  for (auto mode : {NegativeLossMode::bce_only, NegativeLossMode::both}) {
    auto loss = [&] { return prompt_loss(model, model.decode(model.encode_image(rec.image), points), targets, samples, mode); };
    for (auto& t : model.trainable_tensors()) t.zero_grad();
    nn::backward(loss());
    double worst = 0.0;
    int k = 0;
    for (auto& p : model.parameters()) {
      if (!p.is_adapter || ++k % 3 != 0) continue;
      const Matrix g = p.tensor.grad();
      for (int trial = 0; trial < 4; ++trial) {
        const auto i = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(g.size())));
        nn::NoGradGuard guard;
        auto& v = p.tensor.mutable_value().data()[i];
        const double orig = v;
        v = orig + 1e-5;
        const double up = loss().item();
        v = orig - 1e-5;
        const double down = loss().item();
        v = orig;
        const double numeric = (up - down) / 2e-5;
        worst = std::max(worst, std::abs(g.data()[i] - numeric) / std::max({std::abs(g.data()[i]), std::abs(numeric), 1e-6}));
      }
    }
    CHECK(worst < 1e-3);
  }
}

TEST_CASE("one-cycle learning rate") {
  const TrainConfig cfg;
  const std::int64_t total = 300;
  CHECK(lr_at_step(90, total, cfg) == doctest::Approx(0.003).epsilon(1e-12));
  CHECK(lr_at_step(0, total, cfg) == doctest::Approx(1.2e-4).epsilon(1e-12));
  CHECK(lr_at_step(total - 1, total, cfg) == doctest::Approx(0.003 / 25 / 1e4).epsilon(1e-9));
  for (std::int64_t s = 1; s < total; ++s) {
    if (s <= 90)
      CHECK(lr_at_step(s, total, cfg) >= lr_at_step(s - 1, total, cfg));
    else
      CHECK(lr_at_step(s, total, cfg) <= lr_at_step(s - 1, total, cfg));
  }
  CHECK(lr_at_step(5, 17, cfg) == doctest::Approx(0.003));
  CHECK_THROWS_AS(lr_at_step(total, total, cfg), InvalidArgument);
  CHECK_THROWS_AS(lr_at_step(-1, total, cfg), InvalidArgument);
}

TEST_CASE("train config validation and json") {
  TrainConfig c;
  CHECK(c.effective_batch() == 32);
  CHECK(c.issues().empty());
  CHECK(TrainConfig::from_json(c.to_json()).to_json() == c.to_json());

  c.grad_accum = 7;
  const auto issues = c.issues();
  REQUIRE(issues.size() == 1);
  CHECK(issues[0].field == "grad_accum");
  CHECK_THROWS_AS(c.validate(), ConfigError);

  const auto split = TrainConfig::from_json({{"batch_size", 2}, {"grad_accum", 16}, {"negative_loss_mode", "mse_only"}});
  CHECK(split.effective_batch() == 32);
  CHECK(split.negative_loss_mode == NegativeLossMode::mse_only);

  try {
    TrainConfig::from_json({{"batch_size", 8}, {"bogus", 1}});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.issues().size() == 1);
    CHECK(e.issues()[0].field == "bogus");
  }
  try {
    TrainConfig::from_json({{"batch_size", 8}});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.issues()[0].field == "grad_accum");
    CHECK(std::string(e.what()).find("32") != std::string::npos);
  }
  CHECK_THROWS_AS(TrainConfig::from_json({{"epochs", "many"}}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"negative_loss_mode", "neither"}}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json(nlohmann::json::array()), ConfigError);
}

TEST_CASE("training patches and preconditions") {
  const auto rec = small_blobs(13);
  const auto ps = training_patches({rec}, small_train_config(1));
  CHECK(ps.patches.size() == 4);
  CHECK(ps.replication_factor == 4);

  auto unlabeled = rec;
  unlabeled.labels.reset();
  CHECK_THROWS_AS(training_patches({unlabeled}, small_train_config(1)), InvalidArgument);
  auto empty = rec;
  empty.labels = LabelMap(64, 64, 0);
  CHECK_THROWS_AS(training_patches({empty}, small_train_config(1)), InvalidArgument);

  PromptableSegmenter bare(small_config(), 1);
  CHECK_THROWS_AS(fit({rec}, small_train_config(1), bare), InvalidArgument);
}

TEST_CASE("fit is deterministic, touches only adapters and counts encoder passes") {
  const auto rec = small_blobs(14);
  const auto cfg = small_train_config(3);
  PromptableSegmenter base(small_config(), 15);

  auto run = [&] {
    auto m = base.clone_base();
    inject_lora(*m, cfg.lora, 16);
    std::vector<int> epochs_seen;
    auto result = fit({rec}, cfg, *m, [&](const EpochProgress& p) { epochs_seen.push_back(p.epoch); });
    CHECK(epochs_seen == std::vector<int>{1, 2, 3});
    return std::make_pair(std::move(m), std::move(result));
  };
  auto [m1, r1] = run();
  auto [m2, r2] = run();

  CHECK(r1.report.loss_per_epoch.size() == 3);
  CHECK(r1.report.lr_per_epoch.size() == 3);
  CHECK(r1.report.loss_per_epoch == r2.report.loss_per_epoch);
  CHECK(r1.report.frozen_hash_before == base.fingerprint());
  CHECK(r1.report.frozen_hash_after == base.fingerprint());
  CHECK(m1->fingerprint() == base.fingerprint());
  CHECK(r1.report.optimizer_steps == 3);
  CHECK(r1.report.patch_steps == 12);
  CHECK(r1.report.encoder_calls == r1.report.patch_steps);
  CHECK(r1.checkpoint.backbone_fingerprint == base.fingerprint());

  bool moved = false;
  for (std::size_t i = 0; i < m1->parameters().size(); ++i) {
    const auto& p = m1->parameters()[i];
    CHECK(p.tensor.value() == m2->parameters()[i].tensor.value());
    if (p.is_adapter && p.name.ends_with(".lora_b") && !p.tensor.value().isZero(0.0)) moved = true;
  }
  CHECK(moved);

  const auto j = r1.report.to_json();
  for (const char* key : {"epochs", "loss_per_epoch", "lr_per_epoch", "config_echo", "seed", "wall_time_s"})
    CHECK_MESSAGE(j.contains(key), key);
  CHECK(j.at("config_echo").at("epochs") == 3);
}
