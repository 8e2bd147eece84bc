#include "cellprompt/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "cellprompt/checkpoint.hpp"
#include "cellprompt/error.hpp"

#ifndef CELLPROMPT_ASSET_DIR
#define CELLPROMPT_ASSET_DIR "assets"
#endif

namespace cellprompt {

using nn::Matrix;
using nn::Tensor;

namespace {

constexpr double kPixelMean[3] = {123.675, 116.28, 103.53};
constexpr double kPixelStd[3] = {58.395, 57.12, 57.375};
constexpr int kPredictChunk = 64;

Matrix gaussian(Rng& rng, int rows, int cols, double stddev) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
  return m;
}

const char* part_name(ModulePart p) {
  switch (p) {
    case ModulePart::image_encoder: return "image_encoder";
    case ModulePart::prompt_encoder: return "prompt_encoder";
    case ModulePart::mask_decoder: return "mask_decoder";
  }
  return "";
}

ModulePart part_of(LoraTarget t) {
  switch (t) {
    case LoraTarget::image_encoder: return ModulePart::image_encoder;
    case LoraTarget::prompt_encoder: return ModulePart::prompt_encoder;
    case LoraTarget::mask_decoder: return ModulePart::mask_decoder;
  }
  return ModulePart::image_encoder;
}

} // namespace

// ---- configs -----------------------------------------------------------------

BackboneConfig BackboneConfig::tiny() {
  BackboneConfig c;
  c.input_resolution = 256;
  // A 32-wide decoder leaves four channels for the per-pixel mask product and cannot
  // separate neighbouring instances; 64 matches the encoder width.
  c.decoder_dim = 64;
  c.decoder_mlp_dim = 256;
  return c;
}

void BackboneConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v < 1) throw InvalidArgument(std::string("backbone config: ") + what + " must be positive");
  };
  positive(input_resolution, "input_resolution");
  positive(patch_size, "patch_size");
  positive(embed_dim, "embed_dim");
  positive(depth, "depth");
  positive(heads, "heads");
  positive(mlp_ratio, "mlp_ratio");
  positive(pe_grid, "pe_grid");
  positive(decoder_dim, "decoder_dim");
  positive(decoder_heads, "decoder_heads");
  positive(decoder_mlp_dim, "decoder_mlp_dim");
  positive(attention_downsample, "attention_downsample");
  positive(num_mask_tokens, "num_mask_tokens");
  positive(iou_head_hidden, "iou_head_hidden");
  if (decoder_depth < 0) throw InvalidArgument("backbone config: decoder_depth must be non-negative");
  if (input_resolution % patch_size != 0)
    throw InvalidArgument("backbone config: input_resolution must be divisible by patch_size");
  if (embed_dim % heads != 0) throw InvalidArgument("backbone config: embed_dim must be divisible by heads");
  if (decoder_dim % 8 != 0) throw InvalidArgument("backbone config: decoder_dim must be a multiple of 8");
  if ((decoder_dim / attention_downsample) % decoder_heads != 0 || decoder_dim % attention_downsample != 0)
    throw InvalidArgument("backbone config: decoder attention width must split evenly across heads");
}

nlohmann::json BackboneConfig::to_json() const {
  return {{"input_resolution", input_resolution},
          {"patch_size", patch_size},
          {"embed_dim", embed_dim},
          {"depth", depth},
          {"heads", heads},
          {"mlp_ratio", mlp_ratio},
          {"pe_grid", pe_grid},
          {"decoder_dim", decoder_dim},
          {"decoder_depth", decoder_depth},
          {"decoder_heads", decoder_heads},
          {"decoder_mlp_dim", decoder_mlp_dim},
          {"attention_downsample", attention_downsample},
          {"num_mask_tokens", num_mask_tokens},
          {"iou_head_hidden", iou_head_hidden},
          {"variant", variant == BackboneVariant::tiny ? "tiny" : "external"}};
}

BackboneConfig BackboneConfig::from_json(const nlohmann::json& j) {
  BackboneConfig c;
  auto read = [&](const char* key, int& field) {
    if (j.contains(key)) field = j.at(key).get<int>();
  };
  read("input_resolution", c.input_resolution);
  read("patch_size", c.patch_size);
  read("embed_dim", c.embed_dim);
  read("depth", c.depth);
  read("heads", c.heads);
  read("mlp_ratio", c.mlp_ratio);
  read("pe_grid", c.pe_grid);
  read("decoder_dim", c.decoder_dim);
  read("decoder_depth", c.decoder_depth);
  read("decoder_heads", c.decoder_heads);
  read("decoder_mlp_dim", c.decoder_mlp_dim);
  read("attention_downsample", c.attention_downsample);
  read("num_mask_tokens", c.num_mask_tokens);
  read("iou_head_hidden", c.iou_head_hidden);
  if (j.contains("variant")) {
    const auto v = j.at("variant").get<std::string>();
    if (v == "tiny")
      c.variant = BackboneVariant::tiny;
    else if (v == "external")
      c.variant = BackboneVariant::external;
    else
      throw InvalidArgument("backbone config: unknown variant '" + v + "'");
  }
  c.validate();
  return c;
}

std::string to_string(LoraTarget t) { return part_name(part_of(t)); }

LoraTarget lora_target_from_string(const std::string& s) {
  if (s == "image_encoder") return LoraTarget::image_encoder;
  if (s == "prompt_encoder") return LoraTarget::prompt_encoder;
  if (s == "mask_decoder") return LoraTarget::mask_decoder;
  throw InvalidArgument("unknown LoRA target '" + s + "'");
}

void LoRAConfig::validate() const {
  if (rank < 1) throw InvalidArgument("lora: rank must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw InvalidArgument("lora: dropout must lie in [0,1)");
  if (!std::isfinite(alpha) || alpha <= 0.0) throw InvalidArgument("lora: alpha must be positive");
  if (targets.empty()) throw InvalidArgument("lora: target set is empty");
}

nlohmann::json LoRAConfig::to_json() const {
  nlohmann::json t = nlohmann::json::array();
  for (auto target : targets) t.push_back(to_string(target));
  return {{"rank", rank}, {"dropout", dropout}, {"alpha", alpha}, {"targets", t}};
}

LoRAConfig LoRAConfig::from_json(const nlohmann::json& j) {
  LoRAConfig c;
  if (j.contains("rank")) c.rank = j.at("rank").get<int>();
  c.alpha = c.rank;
  if (j.contains("dropout")) c.dropout = j.at("dropout").get<double>();
  if (j.contains("alpha")) c.alpha = j.at("alpha").get<double>();
  if (j.contains("targets")) {
    c.targets.clear();
    for (const auto& t : j.at("targets")) c.targets.insert(lora_target_from_string(t.get<std::string>()));
  }
  c.validate();
  return c;
}

// ---- layers ------------------------------------------------------------------

Tensor LinearLayer::forward(const Tensor& x, const ForwardContext& ctx) const {
  if (!lora_a.defined()) return nn::linear(x, weight, bias);
  return nn::lora_linear(x, weight, bias, lora_a, lora_b, lora_scaling, lora_dropout, ctx.training ? ctx.rng : nullptr);
}

Tensor AttentionLayer::forward(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in, int batch, bool q_shared,
                               bool kv_shared, const ForwardContext& ctx) const {
  Tensor qp = q.forward(q_in, ctx);
  if (q_shared && batch > 1) qp = nn::tile_rows(qp, batch);
  const Tensor kp = k.forward(k_in, ctx);
  const Tensor vp = v.forward(v_in, ctx);
  return out.forward(nn::attention(qp, kp, vp, batch, heads, kv_shared), ctx);
}

Matrix interpolate_positional_encodings(const Matrix& pe, int r0, int r1) {
  if (r0 < 1 || r1 < 1) throw InvalidArgument("interpolate_positional_encodings: sizes must be positive");
  if (pe.rows() != static_cast<Eigen::Index>(r0) * r0) throw DimensionMismatch("interpolate_positional_encodings: rows != r0²");
  return nn::resample_rows(pe, nn::make_resample_table(r0, r0, r1, r1));
}

// ---- construction ------------------------------------------------------------

Tensor PromptableSegmenter::add_param(const std::string& name, ModulePart part, Matrix value, bool buffer) {
  Tensor t(std::move(value), !buffer);
  params_.push_back({name, t, part, false, buffer});
  return t;
}

LinearLayer PromptableSegmenter::make_linear(const std::string& name, ModulePart part, int in, int out, bool bias,
                                             Rng& rng) {
  LinearLayer l;
  l.name = name;
  l.weight = add_param(name + ".weight", part, gaussian(rng, in, out, 1.0 / std::sqrt(static_cast<double>(in))));
  if (bias) l.bias = add_param(name + ".bias", part, Matrix::Zero(1, out));
  return l;
}

LayerNormLayer PromptableSegmenter::make_norm(const std::string& name, ModulePart part, int dim, double eps) {
  LayerNormLayer n;
  n.gamma = add_param(name + ".gamma", part, Matrix::Ones(1, dim));
  n.beta = add_param(name + ".beta", part, Matrix::Zero(1, dim));
  n.eps = eps;
  return n;
}

AttentionLayer PromptableSegmenter::make_attention(const std::string& name, ModulePart part, int dim, int internal,
                                                   int heads, Rng& rng) {
  AttentionLayer a;
  a.heads = heads;
  a.q = make_linear(name + ".q", part, dim, internal, true, rng);
  a.k = make_linear(name + ".k", part, dim, internal, true, rng);
  a.v = make_linear(name + ".v", part, dim, internal, true, rng);
  a.out = make_linear(name + ".out", part, internal, dim, true, rng);
  return a;
}

PromptableSegmenter::PromptableSegmenter(const BackboneConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const int d = cfg_.embed_dim, dd = cfg_.decoder_dim, g = cfg_.grid();
  const auto enc = ModulePart::image_encoder, pe = ModulePart::prompt_encoder, dec = ModulePart::mask_decoder;

  patch_embed_ = make_linear("image_encoder.patch_embed", enc, cfg_.patch_size * cfg_.patch_size * 3, d, true, rng);
  pos_embed_ = add_param("image_encoder.pos_embed", enc, gaussian(rng, cfg_.pe_grid * cfg_.pe_grid, d, 0.02));
  blocks_.resize(cfg_.depth);
  for (int i = 0; i < cfg_.depth; ++i) {
    const auto p = "image_encoder.blocks." + std::to_string(i);
    auto& b = blocks_[i];
    b.norm1 = make_norm(p + ".norm1", enc, d, 1e-6);
    b.attn = make_attention(p + ".attn", enc, d, d, cfg_.heads, rng);
    b.norm2 = make_norm(p + ".norm2", enc, d, 1e-6);
    b.fc1 = make_linear(p + ".mlp.fc1", enc, d, d * cfg_.mlp_ratio, true, rng);
    b.fc2 = make_linear(p + ".mlp.fc2", enc, d * cfg_.mlp_ratio, d, true, rng);
  }
  neck_conv1_ = make_linear("image_encoder.neck.conv1", enc, d, dd, false, rng);
  neck_norm1_ = make_norm("image_encoder.neck.norm1", enc, dd, 1e-6);
  neck_conv3_ = make_linear("image_encoder.neck.conv3", enc, 9 * dd, dd, false, rng);
  neck_norm2_ = make_norm("image_encoder.neck.norm2", enc, dd, 1e-6);
  pe_table_ = nn::make_resample_table(cfg_.pe_grid, cfg_.pe_grid, g, g);

  fourier_basis_ = add_param("prompt_encoder.fourier_basis", pe, gaussian(rng, 2, dd / 2, 1.0), true);
  point_embed_ = add_param("prompt_encoder.point_embed", pe, gaussian(rng, 1, dd, 1.0));
  not_a_point_embed_ = add_param("prompt_encoder.not_a_point_embed", pe, gaussian(rng, 1, dd, 1.0));
  no_mask_embed_ = add_param("prompt_encoder.no_mask_embed", pe, gaussian(rng, 1, dd, 1.0));

  iou_token_ = add_param("mask_decoder.iou_token", dec, gaussian(rng, 1, dd, 1.0));
  mask_tokens_ = add_param("mask_decoder.mask_tokens", dec, gaussian(rng, cfg_.num_mask_tokens, dd, 1.0));
  const int internal = dd / cfg_.attention_downsample;
  decoder_blocks_.resize(cfg_.decoder_depth);
  for (int i = 0; i < cfg_.decoder_depth; ++i) {
    const auto p = "mask_decoder.transformer.layers." + std::to_string(i);
    auto& b = decoder_blocks_[i];
    b.self_attn = make_attention(p + ".self_attn", dec, dd, dd, cfg_.decoder_heads, rng);
    b.norm1 = make_norm(p + ".norm1", dec, dd, 1e-5);
    b.cross_token_to_image = make_attention(p + ".cross_token_to_image", dec, dd, internal, cfg_.decoder_heads, rng);
    b.norm2 = make_norm(p + ".norm2", dec, dd, 1e-5);
    b.mlp1 = make_linear(p + ".mlp.lin1", dec, dd, cfg_.decoder_mlp_dim, true, rng);
    b.mlp2 = make_linear(p + ".mlp.lin2", dec, cfg_.decoder_mlp_dim, dd, true, rng);
    b.norm3 = make_norm(p + ".norm3", dec, dd, 1e-5);
    b.cross_image_to_token = make_attention(p + ".cross_image_to_token", dec, dd, internal, cfg_.decoder_heads, rng);
    b.norm4 = make_norm(p + ".norm4", dec, dd, 1e-5);
  }
  final_attn_ = make_attention("mask_decoder.transformer.final_attn", dec, dd, internal, cfg_.decoder_heads, rng);
  final_norm_ = make_norm("mask_decoder.transformer.norm_final", dec, dd, 1e-5);
  const int c1 = dd / 4, c2 = dd / 8;
  upscale1_ = make_linear("mask_decoder.upscale1", dec, dd, 4 * c1, false, rng);
  upscale1_bias_ = add_param("mask_decoder.upscale1.bias", dec, Matrix::Zero(1, c1));
  upscale_norm_ = make_norm("mask_decoder.upscale_norm", dec, c1, 1e-6);
  upscale2_ = make_linear("mask_decoder.upscale2", dec, c1, 4 * c2, false, rng);
  upscale2_bias_ = add_param("mask_decoder.upscale2.bias", dec, Matrix::Zero(1, c2));
  hyper_mlp_ = {make_linear("mask_decoder.hyper_mlp.0", dec, dd, dd, true, rng),
                make_linear("mask_decoder.hyper_mlp.1", dec, dd, dd, true, rng),
                make_linear("mask_decoder.hyper_mlp.2", dec, dd, c2, true, rng)};
  iou_head_ = {make_linear("mask_decoder.iou_head.0", dec, dd, cfg_.iou_head_hidden, true, rng),
               make_linear("mask_decoder.iou_head.1", dec, cfg_.iou_head_hidden, cfg_.iou_head_hidden, true, rng),
               make_linear("mask_decoder.iou_head.2", dec, cfg_.iou_head_hidden, 1, true, rng)};
  mask_table_ = nn::make_resample_table(4 * g, 4 * g, cfg_.input_resolution, cfg_.input_resolution);

  for (auto& b : blocks_) {
    qv_projections_.emplace_back(&b.attn.q, enc);
    qv_projections_.emplace_back(&b.attn.v, enc);
  }
  for (auto& b : decoder_blocks_)
    for (auto* a : {&b.self_attn, &b.cross_token_to_image, &b.cross_image_to_token}) {
      qv_projections_.emplace_back(&a->q, dec);
      qv_projections_.emplace_back(&a->v, dec);
    }
  qv_projections_.emplace_back(&final_attn_.q, dec);
  qv_projections_.emplace_back(&final_attn_.v, dec);

}

// ---- forward -----------------------------------------------------------------

ImageEmbedding PromptableSegmenter::encode_image(const Image& image, const ForwardContext& ctx) const {
  const int r = cfg_.input_resolution, p = cfg_.patch_size, g = cfg_.grid();
  if (image.height != r || image.width != r)
    throw InvalidArgument("encode_image: expected " + std::to_string(r) + "x" + std::to_string(r) + " input, got " +
                          std::to_string(image.height) + "x" + std::to_string(image.width));
  ++encoder_calls_;

  Matrix patches(g * g, p * p * 3);
  for (int ty = 0; ty < g; ++ty)
    for (int tx = 0; tx < g; ++tx)
      for (int py = 0; py < p; ++py)
        for (int px = 0; px < p; ++px)
          for (int c = 0; c < 3; ++c)
            patches(ty * g + tx, (py * p + px) * 3 + c) = (image.at(ty * p + py, tx * p + px, c) - kPixelMean[c]) / kPixelStd[c];

  Tensor x = patch_embed_.forward(Tensor(std::move(patches)), ctx);
  x = nn::add(x, nn::resample_spatial_rows(pos_embed_, pe_table_));
  for (const auto& b : blocks_) {
    Tensor h = b.norm1.forward(x);
    x = nn::add(x, b.attn.forward(h, h, h, 1, false, false, ctx));
    h = b.fc2.forward(nn::gelu(b.fc1.forward(b.norm2.forward(x), ctx)), ctx);
    x = nn::add(x, h);
  }
  Tensor y = neck_norm1_.forward(neck_conv1_.forward(x, ctx));
  y = neck_norm2_.forward(neck_conv3_.forward(nn::im2col3x3(y, g, g), ctx));
  return {y, g, r};
}

Matrix PromptableSegmenter::dense_positional_encoding() const {
  const int g = cfg_.grid();
  std::vector<Point> centres;
  for (int y = 0; y < g; ++y)
    for (int x = 0; x < g; ++x) centres.push_back({(x + 0.5) / g, (y + 0.5) / g});
  return fourier_features(centres);
}

Matrix PromptableSegmenter::point_encoding(std::span<const Point> points) const {
  std::vector<Point> unit;
  const double r = cfg_.input_resolution;
  for (const auto& p : points) unit.push_back({(p.x + 0.5) / r, (p.y + 0.5) / r});
  return fourier_features(unit);
}

Matrix PromptableSegmenter::fourier_features(const std::vector<Point>& unit_points) const {
  const int dd = cfg_.decoder_dim;
  const Matrix& basis = fourier_basis_.value();
  Matrix out(static_cast<Eigen::Index>(unit_points.size()), dd);
  for (std::size_t i = 0; i < unit_points.size(); ++i) {
    const double cx = 2.0 * unit_points[i].x - 1.0;
    const double cy = 2.0 * unit_points[i].y - 1.0;
    for (int f = 0; f < dd / 2; ++f) {
      const double a = 2.0 * M_PI * (cx * basis(0, f) + cy * basis(1, f));
      out(static_cast<Eigen::Index>(i), f) = std::sin(a);
      out(static_cast<Eigen::Index>(i), f + dd / 2) = std::cos(a);
    }
  }
  return out;
}

Tensor PromptableSegmenter::mlp3(const std::vector<LinearLayer>& layers, const Tensor& x, const ForwardContext& ctx) const {
  Tensor h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i].forward(h, ctx);
    if (i + 1 < layers.size()) h = nn::relu(h);
  }
  return h;
}

DecoderOutput PromptableSegmenter::decode(const ImageEmbedding& emb, std::span<const Point> points,
                                          const ForwardContext& ctx) const {
  const int g = cfg_.grid(), r = cfg_.input_resolution;
  if (emb.grid != g || emb.resolution != r) throw DimensionMismatch("decode: embedding does not match the model");
  const int batch = static_cast<int>(points.size());
  if (batch == 0) throw InvalidArgument("decode: no points");
  for (const auto& p : points)
    if (!(p.x >= 0.0 && p.y >= 0.0 && p.x < r && p.y < r)) throw InvalidArgument("decode: point outside the image");

  // Tokens per item: iou, mask tokens, the point, the padding point.
  const int m = cfg_.num_mask_tokens;
  const int per_item = m + 3;
  const Tensor sparse = nn::add_row(Tensor(point_encoding(points)), point_embed_);
  const Tensor pool = nn::concat_rows({iou_token_, mask_tokens_, not_a_point_embed_, sparse});
  std::vector<int> order;
  for (int b = 0; b < batch; ++b) {
    for (int t = 0; t <= m; ++t) order.push_back(t);
    order.push_back(m + 2 + b);
    order.push_back(m + 1);
  }
  const Tensor tokens = nn::take_rows(pool, std::move(order));

  const Tensor key_pe_single(dense_positional_encoding());
  Tensor key_pe_tiled;
  auto key_pe = [&](bool shared) {
    if (shared) return key_pe_single;
    if (!key_pe_tiled.defined()) key_pe_tiled = nn::tile_rows(key_pe_single, batch);
    return key_pe_tiled;
  };

  Tensor queries = tokens;
  Tensor keys = nn::add_row(emb.features, no_mask_embed_);
  bool keys_shared = true;
  for (std::size_t i = 0; i < decoder_blocks_.size(); ++i) {
    const auto& blk = decoder_blocks_[i];
    if (i == 0) {
      queries = blk.self_attn.forward(queries, queries, queries, batch, false, false, ctx);
    } else {
      const Tensor q = nn::add(queries, tokens);
      queries = nn::add(queries, blk.self_attn.forward(q, q, queries, batch, false, false, ctx));
    }
    queries = blk.norm1.forward(queries);

    Tensor q = nn::add(queries, tokens);
    Tensor k = nn::add(keys, key_pe(keys_shared));
    queries = blk.norm2.forward(
        nn::add(queries, blk.cross_token_to_image.forward(q, k, keys, batch, false, keys_shared, ctx)));

    const Tensor mlp = blk.mlp2.forward(nn::relu(blk.mlp1.forward(queries, ctx)), ctx);
    queries = blk.norm3.forward(nn::add(queries, mlp));

    q = nn::add(queries, tokens);
    const Tensor upd = blk.cross_image_to_token.forward(k, q, queries, batch, keys_shared, false, ctx);
    keys = blk.norm4.forward(nn::add(keys_shared ? nn::tile_rows(keys, batch) : keys, upd));
    keys_shared = false;
  }
  {
    const Tensor q = nn::add(queries, tokens);
    const Tensor k = nn::add(keys, key_pe(keys_shared));
    queries = final_norm_.forward(nn::add(queries, final_attn_.forward(q, k, keys, batch, false, keys_shared, ctx)));
  }
  if (keys_shared) keys = nn::tile_rows(keys, batch);

  std::vector<int> iou_rows, mask_rows;
  for (int b = 0; b < batch; ++b) {
    iou_rows.push_back(b * per_item);
    mask_rows.push_back(b * per_item + 1);
  }
  const Tensor iou_token_out = nn::take_rows(queries, std::move(iou_rows));
  const Tensor mask_token_out = nn::take_rows(queries, std::move(mask_rows));

  Tensor up = nn::pixel_shuffle2(upscale1_.forward(keys, ctx), batch, g, g);
  up = nn::gelu(upscale_norm_.forward(nn::add_row(up, upscale1_bias_)));
  up = nn::pixel_shuffle2(upscale2_.forward(up, ctx), batch, 2 * g, 2 * g);
  up = nn::gelu(nn::add_row(up, upscale2_bias_));

  const Tensor low_res = nn::batched_rowdot(up, mlp3(hyper_mlp_, mask_token_out, ctx));
  return {low_res, mlp3(iou_head_, iou_token_out, ctx)};
}

std::vector<PromptedPrediction> PromptableSegmenter::predict_from_points(const ImageEmbedding& emb,
                                                                         std::span<const Point> points) const {
  std::vector<PromptedPrediction> out;
  if (points.empty()) return out;
  nn::NoGradGuard guard;
  const int r = cfg_.input_resolution;
  for (std::size_t start = 0; start < points.size(); start += kPredictChunk) {
    const auto count = std::min<std::size_t>(kPredictChunk, points.size() - start);
    const auto res = decode(emb, points.subspan(start, count));
    const auto full = upsample(res.low_res_logits);
    for (std::size_t i = 0; i < count; ++i) {
      PromptedPrediction p;
      p.mask_logits = RealGrid(r, r, 0.0);
      const auto row = full.value().row(static_cast<Eigen::Index>(i));
      std::copy(row.data(), row.data() + row.size(), p.mask_logits.values().begin());
      p.cell_probability = std::clamp<double>(res.iou.value()(static_cast<Eigen::Index>(i), 0), 0.0, 1.0);
      out.push_back(std::move(p));
    }
  }
  return out;
}

// ---- adapters ----------------------------------------------------------------

void PromptableSegmenter::inject_lora(const LoRAConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (lora_) throw InvalidArgument("inject_lora: model already carries adapters");
  std::vector<std::pair<LinearLayer*, ModulePart>> selected;
  for (const auto& [layer, part] : qv_projections_)
    for (auto t : cfg.targets)
      if (part_of(t) == part) selected.emplace_back(layer, part);
  if (selected.empty()) throw InvalidArgument("inject_lora: the targeted modules contain no query/value projections");

  set_base_trainable(false);
  Rng rng(seed);
  for (auto& [layer, part] : selected) {
    const auto in = static_cast<int>(layer->weight.rows()), out = static_cast<int>(layer->weight.cols());
    layer->lora_a = Tensor(gaussian(rng, in, cfg.rank, 1.0 / cfg.rank), true);
    layer->lora_b = Tensor(Matrix::Zero(cfg.rank, out), true);
    layer->lora_scaling = cfg.alpha / cfg.rank;
    layer->lora_dropout = cfg.dropout;
    params_.push_back({layer->name + ".lora_a", layer->lora_a, part, true, false});
    params_.push_back({layer->name + ".lora_b", layer->lora_b, part, true, false});
  }
  lora_ = cfg;
}

void inject_lora(PromptableSegmenter& model, const LoRAConfig& cfg, std::uint64_t seed) { model.inject_lora(cfg, seed); }

const LoRAConfig& PromptableSegmenter::lora_config() const {
  if (!lora_) throw InvalidArgument("model carries no adapters");
  return *lora_;
}

void PromptableSegmenter::set_base_trainable(bool on) {
  for (auto& p : params_)
    if (!p.is_adapter && !p.is_buffer) p.tensor.set_requires_grad(on);
}

std::vector<Tensor> PromptableSegmenter::trainable_tensors() const {
  std::vector<Tensor> out;
  for (const auto& p : params_)
    if (p.tensor.requires_grad()) out.push_back(p.tensor);
  return out;
}

std::int64_t PromptableSegmenter::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_)
    if (!p.is_buffer) n += p.tensor.value().size();
  return n;
}

std::int64_t PromptableSegmenter::trainable_parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_)
    if (p.tensor.requires_grad()) n += p.tensor.value().size();
  return n;
}

std::string PromptableSegmenter::fingerprint() const {
  Sha256 h;
  h.update(cfg_.to_json().dump());
  for (const auto& p : params_) {
    if (p.is_adapter) continue;
    h.update(p.name);
    h.update(p.tensor.value());
  }
  return h.hex_digest();
}

std::unique_ptr<PromptableSegmenter> PromptableSegmenter::clone_base() const {
  auto copy = std::make_unique<PromptableSegmenter>(cfg_, 0);
  std::size_t j = 0;
  for (const auto& p : params_) {
    if (p.is_adapter) continue;
    copy->params_[j++].tensor.mutable_value() = p.tensor.value();
  }
  return copy;
}

// ---- persistence -------------------------------------------------------------

AdapterCheckpoint extract_adapter(const PromptableSegmenter& model) {
  AdapterCheckpoint ckpt;
  ckpt.lora_config = model.lora_config();
  ckpt.backbone_fingerprint = model.fingerprint();
  ckpt.backbone_config = model.config().to_json();
  const auto& params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].is_adapter) continue;
    const auto& name = params[i].name;
    const auto layer = name.substr(0, name.rfind(".lora_"));
    auto& pair = ckpt.lora_weights[layer];
    if (name.ends_with(".lora_a"))
      pair.a = params[i].tensor.value().transpose();
    else
      pair.b = params[i].tensor.value().transpose();
  }
  return ckpt;
}

void apply_adapter(PromptableSegmenter& model, const AdapterCheckpoint& ckpt) {
  if (ckpt.schema_version != kAdapterSchemaVersion)
    throw FormatError("adapter: unknown schema version " + std::to_string(ckpt.schema_version));
  if (ckpt.backbone_fingerprint != model.fingerprint())
    throw FormatError("adapter: backbone fingerprint mismatch (checkpoint was trained on a different backbone)");
  model.inject_lora(ckpt.lora_config, 0);
  std::size_t seen = 0;
  for (auto& p : model.parameters()) {
    if (!p.is_adapter) continue;
    const auto layer = p.name.substr(0, p.name.rfind(".lora_"));
    const auto it = ckpt.lora_weights.find(layer);
    if (it == ckpt.lora_weights.end()) throw FormatError("adapter: missing weights for " + layer);
    const Matrix& src = p.name.ends_with(".lora_a") ? it->second.a : it->second.b;
    Matrix value = src.transpose();
    if (value.rows() != p.tensor.rows() || value.cols() != p.tensor.cols())
      throw FormatError("adapter: shape mismatch for " + p.name);
    p.tensor.mutable_value() = std::move(value);
    ++seen;
  }
  if (seen != 2 * ckpt.lora_weights.size()) throw FormatError("adapter: checkpoint holds projections the model lacks");
}

void write_adapter(const std::filesystem::path& path, const AdapterCheckpoint& ckpt) {
  Container c;
  c.kind = "adapter";
  c.schema_version = ckpt.schema_version;
  c.metadata = {{"lora_config", ckpt.lora_config.to_json()},
                {"backbone_fingerprint", ckpt.backbone_fingerprint},
                {"backbone_config", ckpt.backbone_config},
                {"extra", ckpt.extra.is_null() ? nlohmann::json::object() : ckpt.extra}};
  for (const auto& [name, pair] : ckpt.lora_weights) {
    c.tensors.push_back({name + ".A", pair.a});
    c.tensors.push_back({name + ".B", pair.b});
  }
  write_container(path, c);
}

AdapterCheckpoint read_adapter(const std::filesystem::path& path) {
  const auto c = read_container(path);
  if (c.kind != "adapter") throw FormatError("expected an adapter checkpoint, found '" + c.kind + "'");
  if (c.schema_version != kAdapterSchemaVersion)
    throw FormatError("adapter: unknown schema version " + std::to_string(c.schema_version));
  AdapterCheckpoint ckpt;
  try {
    ckpt.schema_version = c.schema_version;
    ckpt.lora_config = LoRAConfig::from_json(c.metadata.at("lora_config"));
    ckpt.backbone_fingerprint = c.metadata.at("backbone_fingerprint").get<std::string>();
    ckpt.backbone_config = c.metadata.value("backbone_config", nlohmann::json::object());
    ckpt.extra = c.metadata.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("adapter: malformed metadata: ") + e.what());
  }
  for (const auto& t : c.tensors) {
    if (t.name.size() < 3) throw FormatError("adapter: bad tensor name " + t.name);
    const auto layer = t.name.substr(0, t.name.size() - 2);
    if (t.name.ends_with(".A"))
      ckpt.lora_weights[layer].a = t.value;
    else if (t.name.ends_with(".B"))
      ckpt.lora_weights[layer].b = t.value;
    else
      throw FormatError("adapter: bad tensor name " + t.name);
  }
  return ckpt;
}

AdapterCheckpoint save_adapter(const PromptableSegmenter& model, const std::filesystem::path& path,
                               const nlohmann::json& extra) {
  auto ckpt = extract_adapter(model);
  ckpt.extra = extra;
  write_adapter(path, ckpt);
  return ckpt;
}

void load_adapter(PromptableSegmenter& model, const std::filesystem::path& path) { apply_adapter(model, read_adapter(path)); }

void save_backbone(const PromptableSegmenter& model, const std::filesystem::path& path) {
  Container c;
  c.kind = "backbone";
  c.schema_version = kBackboneSchemaVersion;
  c.metadata = {{"config", model.config().to_json()}, {"fingerprint", model.fingerprint()}};
  for (const auto& p : model.parameters())
    if (!p.is_adapter) c.tensors.push_back({p.name, p.tensor.value()});
  write_container(path, c);
}

std::unique_ptr<PromptableSegmenter> load_backbone(const std::filesystem::path& path) {
  const auto c = read_container(path);
  if (c.kind != "backbone") throw FormatError("expected a backbone checkpoint, found '" + c.kind + "'");
  if (c.schema_version != kBackboneSchemaVersion)
    throw FormatError("backbone: unknown schema version " + std::to_string(c.schema_version));
  BackboneConfig cfg;
  try {
    cfg = BackboneConfig::from_json(c.metadata.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("backbone: malformed metadata: ") + e.what());
  }
  auto model = std::make_unique<PromptableSegmenter>(cfg, 0);
  for (auto& p : model->parameters()) {
    const Matrix& src = c.tensor(p.name);
    if (src.rows() != p.tensor.rows() || src.cols() != p.tensor.cols())
      throw FormatError("backbone: shape mismatch for " + p.name);
    p.tensor.mutable_value() = src;
  }
  if (c.tensors.size() != model->parameters().size()) throw FormatError("backbone: unexpected extra tensors");
  if (c.metadata.contains("fingerprint") && c.metadata.at("fingerprint").get<std::string>() != model->fingerprint())
    throw FormatError("backbone: content does not match its recorded fingerprint");
  return model;
}

std::filesystem::path bundled_backbone_path() {
  if (const char* env = std::getenv("CELLPROMPT_TINY_BACKBONE"); env && *env) return env;
  return std::filesystem::path(CELLPROMPT_ASSET_DIR) / "tiny_backbone.cpk";
}

std::unique_ptr<PromptableSegmenter> load_bundled_backbone() {
  const auto path = bundled_backbone_path();
  if (!std::filesystem::exists(path))
    throw NotFound("bundled tiny backbone not found at " + path.string() +
                   " (set CELLPROMPT_TINY_BACKBONE or run the pretrain tool)");
  return load_backbone(path);
}

} // namespace cellprompt
