#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <vector>

#include "cellprompt/checkpoint.hpp"
#include "cellprompt/error.hpp"
#include "cellprompt/model.hpp"

using namespace cellprompt;
using nn::Matrix;
using nn::Tensor;

namespace {

BackboneConfig small_config(int depth = 2, int decoder_depth = 2) {
  BackboneConfig c;
  c.input_resolution = 64;
  c.patch_size = 16;
  c.pe_grid = 8;
  c.depth = depth;
  c.decoder_depth = decoder_depth;
  return c;
}

Image random_image(Rng& rng, int size) {
  Image img(size, size);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  return img;
}

LoRAConfig no_dropout() {
  LoRAConfig c;
  c.dropout = 0.0;
  return c;
}

void randomize_adapters(PromptableSegmenter& m, std::uint64_t seed, double s = 0.2) {
  Rng rng(seed);
  for (auto& p : m.parameters())
    if (p.is_adapter)
      for (Eigen::Index i = 0; i < p.tensor.value().size(); ++i) p.tensor.mutable_value().data()[i] = s * rng.normal();
}

double max_abs_diff(const Matrix& a, const Matrix& b) { return (a - b).cwiseAbs().maxCoeff(); }

const NamedParameter& find_param(const PromptableSegmenter& m, const std::string& name) {
  for (const auto& p : m.parameters())
    if (p.name == name) return p;
  throw NotFound(name);
}

std::filesystem::path temp_dir(const std::string& leaf) {
  const auto dir = std::filesystem::temp_directory_path() / ("cellprompt_test_model_" + leaf);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

} // namespace

TEST_CASE("positional-encoding interpolation") {
  Rng rng(1);
  Matrix pe(16, 5);
  for (Eigen::Index i = 0; i < pe.size(); ++i) pe.data()[i] = rng.normal();
  CHECK(max_abs_diff(interpolate_positional_encodings(pe, 4, 4), pe) == 0.0);

  const Matrix flat = Matrix::Constant(9, 3, 2.5);
  const Matrix up = interpolate_positional_encodings(flat, 3, 7);
  CHECK(up.rows() == 49);
  CHECK(up.cols() == 3);
  CHECK(max_abs_diff(up, Matrix::Constant(49, 3, 2.5)) < 1e-12);

  Matrix corners(4, 2);
  corners << 1, 10, 2, 20, 3, 30, 4, 40;
  const Matrix three = interpolate_positional_encodings(corners, 2, 3);
  CHECK(three(4, 0) == doctest::Approx(2.5).epsilon(1e-12));
  CHECK(three(4, 1) == doctest::Approx(25.0).epsilon(1e-12));

  CHECK_THROWS_AS(interpolate_positional_encodings(corners, 3, 3), DimensionMismatch);
  CHECK_THROWS_AS(interpolate_positional_encodings(corners, 0, 3), InvalidArgument);
}

TEST_CASE("config validation and json round trip") {
  auto bad = small_config();
  bad.patch_size = 15;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  const auto c = small_config(1, 1);
  CHECK(BackboneConfig::from_json(c.to_json()).to_json() == c.to_json());

  LoRAConfig l;
  l.rank = 8;
  l.targets = {LoraTarget::prompt_encoder, LoraTarget::mask_decoder};
  CHECK(LoRAConfig::from_json(l.to_json()).to_json() == l.to_json());
  CHECK(LoRAConfig::from_json({{"rank", 2}}).alpha == 2.0);
  CHECK_THROWS_AS(LoRAConfig::from_json({{"rank", 0}}), InvalidArgument);
  CHECK_THROWS_AS(LoRAConfig::from_json({{"dropout", 1.0}}), InvalidArgument);
  CHECK_THROWS_AS(LoRAConfig::from_json({{"targets", {"neck"}}}), InvalidArgument);
}

TEST_CASE("encode_image is deterministic with the documented shape") {
  PromptableSegmenter m(small_config(), 3);
  Rng rng(2);
  const auto img = random_image(rng, 64);
  const auto a = m.encode_image(img);
  const auto b = m.encode_image(img);
  CHECK(a.grid == 4);
  CHECK(a.resolution == 64);
  CHECK(a.features.rows() == 16);
  CHECK(a.features.cols() == m.config().decoder_dim);
  CHECK(a.features.value() == b.features.value());
  CHECK(m.encoder_invocations() == 2);
  CHECK_THROWS_AS(m.encode_image(random_image(rng, 32)), InvalidArgument);
}

TEST_CASE("predict_from_points contract") {
  PromptableSegmenter m(small_config(), 4);
  Rng rng(3);
  const auto emb = m.encode_image(random_image(rng, 64));
  CHECK(m.predict_from_points(emb, {}).empty());

  std::vector<Point> pts{{0, 0}, {63, 63}, {10.5, 40.25}};
  const auto out = m.predict_from_points(emb, pts);
  REQUIRE(out.size() == 3);
  for (const auto& p : out) {
    CHECK(p.mask_logits.height() == 64);
    CHECK(p.mask_logits.width() == 64);
    CHECK(p.cell_probability >= 0.0);
    CHECK(p.cell_probability <= 1.0);
    for (double v : p.mask_logits.values()) REQUIRE(std::isfinite(v));
  }
  // Each prompt is decoded independently of its batch mates (up to summation order).
  const auto single = m.predict_from_points(emb, std::vector<Point>{pts[2]});
  double worst = 0.0;
  for (std::size_t i = 0; i < single[0].mask_logits.size(); ++i)
    worst = std::max(worst, std::abs(single[0].mask_logits.values()[i] - out[2].mask_logits.values()[i]));
  CHECK(worst < 1e-9);

  CHECK_THROWS_AS(m.predict_from_points(emb, std::vector<Point>{{-0.5, 3}}), InvalidArgument);
  CHECK_THROWS_AS(m.predict_from_points(emb, std::vector<Point>{{3, 64}}), InvalidArgument);
}

TEST_CASE("one encoder pass serves a full 32x32 prompt grid") {
  PromptableSegmenter m(small_config(1, 1), 5);
  Rng rng(4);
  std::vector<Point> grid;
  for (int i = 0; i < 32; ++i)
    for (int j = 0; j < 32; ++j) grid.push_back({(j + 0.5) * 2.0, (i + 0.5) * 2.0});
  m.reset_encoder_invocations();
  const auto emb = m.encode_image(random_image(rng, 64));
  const auto out = m.predict_from_points(emb, grid);
  CHECK(out.size() == 1024);
  CHECK(m.encoder_invocations() == 1);
}

TEST_CASE("LoRA injection: zero init, parameter counts, freezing") {
  PromptableSegmenter base(small_config(), 6);
  auto adapted = base.clone_base();
  CHECK(adapted->fingerprint() == base.fingerprint());
  const auto total_before = adapted->parameter_count();
  inject_lora(*adapted, no_dropout(), 7);
  CHECK(adapted->has_adapters());

  // Adapter factors on one 64 -> 64 encoder projection: 4·(64 + 64).
  const auto& a = find_param(*adapted, "image_encoder.blocks.0.attn.q.lora_a");
  const auto& b = find_param(*adapted, "image_encoder.blocks.0.attn.q.lora_b");
  CHECK(a.tensor.value().size() + b.tensor.value().size() == 512);
  CHECK(b.tensor.value().isZero(0.0));
  CHECK(a.tensor.value().norm() > 0.0);

  // Only q and v projections receive adapters, and only adapters train.
  for (const auto& p : adapted->parameters()) {
    if (p.is_adapter) {
      const bool qv = p.name.find(".q.lora_") != std::string::npos || p.name.find(".v.lora_") != std::string::npos;
      CHECK_MESSAGE(qv, p.name);
      CHECK(p.part != ModulePart::prompt_encoder);
      CHECK(p.tensor.requires_grad());
    } else {
      CHECK_FALSE(p.tensor.requires_grad());
    }
  }
  CHECK(adapted->parameter_count() - total_before == adapted->trainable_parameter_count());

  Rng rng(8);
  const auto img = random_image(rng, 64);
  std::vector<Point> pts{{5, 7}, {32, 32}, {60, 2}};
  const auto e0 = base.encode_image(img);
  const auto e1 = adapted->encode_image(img);
  CHECK(max_abs_diff(e0.features.value(), e1.features.value()) < 1e-6);
  const auto d0 = base.decode(e0, pts);
  const auto d1 = adapted->decode(e1, pts);
  CHECK(max_abs_diff(d0.low_res_logits.value(), d1.low_res_logits.value()) < 1e-6);
  CHECK(max_abs_diff(d0.iou.value(), d1.iou.value()) < 1e-6);

  randomize_adapters(*adapted, 9);
  CHECK(max_abs_diff(d0.low_res_logits.value(), adapted->decode(adapted->encode_image(img), pts).low_res_logits.value()) >
        1e-6);
  CHECK(adapted->fingerprint() == base.fingerprint());

  CHECK_THROWS_AS(adapted->inject_lora(no_dropout(), 1), InvalidArgument);
  auto other = base.clone_base();
  LoRAConfig prompt_only;
  prompt_only.targets = {LoraTarget::prompt_encoder};
  CHECK_THROWS_AS(other->inject_lora(prompt_only, 1), InvalidArgument);
}

TEST_CASE("tiny backbone trains under 2% of its parameters") {
  PromptableSegmenter m(BackboneConfig::tiny(), 0);
  inject_lora(m, LoRAConfig{}, 0);
  const double ratio = static_cast<double>(m.trainable_parameter_count()) / static_cast<double>(m.parameter_count());
  CHECK(ratio > 0.0);
  CHECK(ratio < 0.02);
}

TEST_CASE("adapter gradients match central finite differences") {
  PromptableSegmenter m(small_config(1, 1), 10);
  inject_lora(m, no_dropout(), 11);
  randomize_adapters(m, 12, 0.3);
  Rng rng(13);
  const auto img = random_image(rng, 64);
  const std::vector<Point> pts{{12, 20}, {40, 33}, {55, 8}};
  nn::ByteMatrix targets(3, 64 * 64);
  for (Eigen::Index i = 0; i < targets.size(); ++i) targets.data()[i] = rng.bernoulli(0.3) ? 1 : 0;
  const Matrix prob_targets = (Matrix(3, 1) << 1.0, 0.0, 1.0).finished();
  const std::vector<nn::real> ones(3, 1.0);

  auto loss = [&] {
    const auto emb = m.encode_image(img);
    const auto out = m.decode(emb, pts);
    const auto bce = nn::upsampled_bce_rows(out.low_res_logits, m.mask_upsample_table(), targets);
    const auto mse = nn::squared_error(out.iou, prob_targets);
    return nn::add(nn::weighted_sum(bce, ones), nn::weighted_sum(mse, ones));
  };

  for (auto& t : m.trainable_tensors()) t.zero_grad();
  nn::backward(loss());
  for (const auto& p : m.parameters())
    if (!p.is_adapter) CHECK(p.tensor.grad().size() == 0);

  const double h = 1e-5;
  double worst = 0.0;
  int checked = 0;
  for (auto& p : m.parameters()) {
    if (!p.is_adapter) continue;
    const Matrix analytic = p.tensor.grad();
    REQUIRE(analytic.size() == p.tensor.value().size());
    Rng pick(static_cast<std::uint64_t>(checked) + 100);
    for (int k = 0; k < 8; ++k) {
      const auto i = static_cast<Eigen::Index>(pick.below(static_cast<std::uint64_t>(analytic.size())));
      nn::NoGradGuard guard;
      auto& v = p.tensor.mutable_value().data()[i];
      const double orig = v;
      v = orig + h;
      const double up = loss().item();
      v = orig - h;
      const double down = loss().item();
      v = orig;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic.data()[i];
      worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6}));
      ++checked;
    }
  }
  CHECK(checked > 100);
  CHECK(worst < 1e-3);
}

TEST_CASE("base parameter gradients match central finite differences") {
  PromptableSegmenter m(small_config(1, 1), 14);
  m.set_base_trainable(true);
  Rng rng(15);
  const auto img = random_image(rng, 64);
  const std::vector<Point> pts{{12, 20}, {40, 33}};
  nn::ByteMatrix targets(2, 64 * 64);
  for (Eigen::Index i = 0; i < targets.size(); ++i) targets.data()[i] = rng.bernoulli(0.3) ? 1 : 0;
  const Matrix prob_targets = (Matrix(2, 1) << 1.0, 0.0).finished();
  const std::vector<nn::real> ones(2, 1.0);
  auto loss = [&] {
    const auto out = m.decode(m.encode_image(img), pts);
    const auto bce = nn::upsampled_bce_rows(out.low_res_logits, m.mask_upsample_table(), targets);
    const auto dice = nn::upsampled_dice_rows(out.low_res_logits, m.mask_upsample_table(), targets);
    const auto mse = nn::squared_error(out.iou, prob_targets);
    return nn::add(nn::add(nn::weighted_sum(bce, ones), nn::weighted_sum(dice, ones)), nn::weighted_sum(mse, ones));
  };
  for (auto& t : m.trainable_tensors()) t.zero_grad();
  nn::backward(loss());

  const double h = 1e-6;
  double worst = 0.0;
  std::string worst_name;
  int checked = 0;
  for (auto& p : m.parameters()) {
    if (p.is_buffer) continue;
    const Matrix analytic = p.tensor.grad();
    REQUIRE_MESSAGE(analytic.size() == p.tensor.value().size(), p.name);
    Rng pick(static_cast<std::uint64_t>(checked) + 200);
    for (int k = 0; k < 3; ++k) {
      const auto i = static_cast<Eigen::Index>(pick.below(static_cast<std::uint64_t>(analytic.size())));
      nn::NoGradGuard guard;
      auto& v = p.tensor.mutable_value().data()[i];
      const double orig = v;
      v = orig + h;
      const double up = loss().item();
      v = orig - h;
      const double down = loss().item();
      v = orig;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic.data()[i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
      if (err > worst) {
        worst = err;
        worst_name = p.name;
      }
      ++checked;
    }
  }
  CHECK(checked > 100);
  CHECK_MESSAGE(worst < 1e-3, worst_name);
}

TEST_CASE("adapter save/load round trip and fingerprint checks") {
  const auto dir = temp_dir("roundtrip");
  PromptableSegmenter base(small_config(), 20);
  auto trained = base.clone_base();
  inject_lora(*trained, no_dropout(), 21);
  randomize_adapters(*trained, 22);
  const auto ckpt = save_adapter(*trained, dir / "a.cpk", {{"note", "x"}});
  CHECK(ckpt.backbone_fingerprint == base.fingerprint());
  for (const auto& [name, pair] : ckpt.lora_weights) {
    CHECK(pair.a.rows() == 4);
    CHECK(pair.b.cols() == 4);
  }

  auto restored = base.clone_base();
  load_adapter(*restored, dir / "a.cpk");
  CHECK(restored->lora_config().to_json() == trained->lora_config().to_json());
  for (std::size_t i = 0; i < trained->parameters().size(); ++i) {
    CHECK(trained->parameters()[i].name == restored->parameters()[i].name);
    CHECK(trained->parameters()[i].tensor.value() == restored->parameters()[i].tensor.value());
  }
  Rng rng(23);
  const auto img = random_image(rng, 64);
  const std::vector<Point> pts{{3, 4}, {50, 50}};
  const auto p0 = trained->predict_from_points(trained->encode_image(img), pts);
  const auto p1 = restored->predict_from_points(restored->encode_image(img), pts);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    CHECK(p0[i].mask_logits == p1[i].mask_logits);
    CHECK(p0[i].cell_probability == p1[i].cell_probability);
  }
  CHECK(read_adapter(dir / "a.cpk").extra.at("note") == "x");

  PromptableSegmenter stranger(small_config(), 99);
  CHECK_THROWS_AS(load_adapter(stranger, dir / "a.cpk"), FormatError);

  auto future = ckpt;
  future.schema_version = 99;
  write_adapter(dir / "future.cpk", future);
  CHECK_THROWS_AS(read_adapter(dir / "future.cpk"), FormatError);
  auto fresh = base.clone_base();
  CHECK_THROWS_AS(apply_adapter(*fresh, future), FormatError);

  save_backbone(base, dir / "backbone.cpk");
  CHECK_THROWS_AS(read_adapter(dir / "backbone.cpk"), FormatError);
  const auto adapter_bytes = std::filesystem::file_size(dir / "a.cpk");
  const auto backbone_bytes = std::filesystem::file_size(dir / "backbone.cpk");
  CHECK(adapter_bytes * 10 < backbone_bytes);

  const auto container = read_container(dir / "a.cpk");
  for (const auto& t : container.tensors) CHECK((t.name.ends_with(".A") || t.name.ends_with(".B")));
}

TEST_CASE("backbone save/load preserves weights and fingerprint") {
  const auto dir = temp_dir("backbone");
  PromptableSegmenter base(small_config(), 30);
  save_backbone(base, dir / "b.cpk");
  const auto loaded = load_backbone(dir / "b.cpk");
  CHECK(loaded->fingerprint() == base.fingerprint());
  CHECK(loaded->config().to_json() == base.config().to_json());

  auto c = read_container(dir / "b.cpk");
  c.tensors[0].value(0, 0) += 1.0;
  write_container(dir / "tampered.cpk", c);
  CHECK_THROWS_AS(load_backbone(dir / "tampered.cpk"), FormatError);
  CHECK_THROWS_AS(load_backbone(dir / "missing.cpk"), NotFound);
}
