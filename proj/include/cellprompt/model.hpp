#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cellprompt/geometry.hpp"
#include "cellprompt/image.hpp"
#include "cellprompt/nn.hpp"
#include "cellprompt/random.hpp"

namespace cellprompt {

enum class BackboneVariant { tiny, external };

struct BackboneConfig {
  int input_resolution = 512;
  int patch_size = 16;
  int embed_dim = 64;
  int depth = 4;
  int heads = 4;
  int mlp_ratio = 4;
  /// Side of the stored positional-encoding grid; resampled to input_resolution / patch_size.
  int pe_grid = 32;
  int decoder_dim = 32;
  int decoder_depth = 2;
  int decoder_heads = 2;
  int decoder_mlp_dim = 128;
  int attention_downsample = 2;
  int num_mask_tokens = 4;
  int iou_head_hidden = 64;
  BackboneVariant variant = BackboneVariant::tiny;

  /// Preset for the bundled backbone; takes 256 px patches at native size.
  static BackboneConfig tiny();
  int grid() const { return input_resolution / patch_size; }
  void validate() const;
  nlohmann::json to_json() const;
  static BackboneConfig from_json(const nlohmann::json& j);
};

enum class LoraTarget { image_encoder, prompt_encoder, mask_decoder };

struct LoRAConfig {
  int rank = 4;
  double dropout = 0.1;
  double alpha = 4.0;
  std::set<LoraTarget> targets{LoraTarget::image_encoder, LoraTarget::mask_decoder};

  void validate() const;
  nlohmann::json to_json() const;
  static LoRAConfig from_json(const nlohmann::json& j);
};

std::string to_string(LoraTarget t);
LoraTarget lora_target_from_string(const std::string& s);

/// One point prompt's output.
struct PromptedPrediction {
  RealGrid mask_logits;  ///< input_resolution × input_resolution
  double cell_probability = 0.0;
};

/// Dense image features plus the resolution they were computed at.
struct ImageEmbedding {
  nn::Tensor features;  ///< (grid·grid) × decoder_dim
  int grid = 0;
  int resolution = 0;
};

/// Differentiable decoder output for a batch of point prompts.
struct DecoderOutput {
  nn::Tensor low_res_logits;  ///< B × (4·grid)², row-major; upsample with PromptableSegmenter::upsample
  nn::Tensor iou;             ///< B × 1, unclamped head output
};

/// Training-time switches. Dropout is applied only when `training` and an rng is given.
struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;
};

enum class ModulePart { image_encoder, prompt_encoder, mask_decoder };

struct NamedParameter {
  std::string name;
  nn::Tensor tensor;
  ModulePart part = ModulePart::image_encoder;
  bool is_adapter = false;
  bool is_buffer = false;  ///< fixed by construction, never trained
};

struct LinearLayer {
  std::string name;
  nn::Tensor weight;  ///< in × out
  nn::Tensor bias;    ///< 1 × out, may be undefined
  // Low-rank adapter, stored transposed for row-major products: x·a·b.
  nn::Tensor lora_a;  ///< in × rank
  nn::Tensor lora_b;  ///< rank × out
  double lora_scaling = 0.0;
  double lora_dropout = 0.0;

  nn::Tensor forward(const nn::Tensor& x, const ForwardContext& ctx) const;
};

struct LayerNormLayer {
  nn::Tensor gamma, beta;
  double eps = 1e-5;
  nn::Tensor forward(const nn::Tensor& x) const { return nn::layer_norm(x, gamma, beta, eps); }
};

struct AttentionLayer {
  LinearLayer q, k, v, out;
  int heads = 1;
  /// A shared input holds one item used by all `batch` items; otherwise it holds `batch` items.
  nn::Tensor forward(const nn::Tensor& q_in, const nn::Tensor& k_in, const nn::Tensor& v_in, int batch, bool q_shared,
                     bool kv_shared, const ForwardContext& ctx) const;
};

struct EncoderBlock {
  LayerNormLayer norm1, norm2;
  AttentionLayer attn;
  LinearLayer fc1, fc2;
};

struct TwoWayBlock {
  AttentionLayer self_attn, cross_token_to_image, cross_image_to_token;
  LayerNormLayer norm1, norm2, norm3, norm4;
  LinearLayer mlp1, mlp2;
};

/// Bilinear resampling of a (r0·r0 × C) positional-encoding grid to (r1·r1 × C).
nn::Matrix interpolate_positional_encodings(const nn::Matrix& pe, int r0, int r1);

/// ViT image encoder, point prompt encoder and two-way mask decoder.
class PromptableSegmenter {
public:
  /// Random initialisation from `seed`; every base parameter starts trainable.
  PromptableSegmenter(const BackboneConfig& cfg, std::uint64_t seed);
  PromptableSegmenter(const PromptableSegmenter&) = delete;
  PromptableSegmenter& operator=(const PromptableSegmenter&) = delete;

  const BackboneConfig& config() const { return cfg_; }

  /// Throws InvalidArgument on a resolution mismatch. Counts invocations.
  ImageEmbedding encode_image(const Image& image, const ForwardContext& ctx = {}) const;
  DecoderOutput decode(const ImageEmbedding& emb, std::span<const Point> points, const ForwardContext& ctx = {}) const;
  /// Bilinear map from decoder low-res logits to input resolution: (B × (4·grid)²) -> (B × resolution²).
  nn::Tensor upsample(const nn::Tensor& low_res_logits) const { return nn::resample_spatial_cols(low_res_logits, mask_table_); }
  const nn::ResampleTable& mask_upsample_table() const { return mask_table_; }
  /// Eval-mode prediction, one entry per point. Throws on out-of-bounds points.
  std::vector<PromptedPrediction> predict_from_points(const ImageEmbedding& emb, std::span<const Point> points) const;

  std::uint64_t encoder_invocations() const { return encoder_calls_.load(); }
  void reset_encoder_invocations() { encoder_calls_ = 0; }

  /// Wraps every q/v projection of the targeted parts; freezes the base. Throws if nothing matches.
  void inject_lora(const LoRAConfig& cfg, std::uint64_t seed);
  bool has_adapters() const { return lora_.has_value(); }
  const LoRAConfig& lora_config() const;
  void set_base_trainable(bool on);

  std::vector<NamedParameter>& parameters() { return params_; }
  const std::vector<NamedParameter>& parameters() const { return params_; }
  std::vector<nn::Tensor> trainable_tensors() const;
  std::int64_t parameter_count() const;
  std::int64_t trainable_parameter_count() const;

  /// SHA-256 over the config and all base tensors (adapters excluded).
  std::string fingerprint() const;

  /// Fresh model with the same config and copied base weights, no adapters.
  std::unique_ptr<PromptableSegmenter> clone_base() const;

private:
  nn::Tensor add_param(const std::string& name, ModulePart part, nn::Matrix value, bool buffer = false);
  LinearLayer make_linear(const std::string& name, ModulePart part, int in, int out, bool bias, Rng& rng);
  LayerNormLayer make_norm(const std::string& name, ModulePart part, int dim, double eps);
  AttentionLayer make_attention(const std::string& name, ModulePart part, int dim, int internal, int heads, Rng& rng);
  /// Fourier features of points given in [0,1]² image units.
  nn::Matrix fourier_features(const std::vector<Point>& unit_points) const;
  nn::Matrix point_encoding(std::span<const Point> points) const;
  nn::Matrix dense_positional_encoding() const;
  nn::Tensor mlp3(const std::vector<LinearLayer>& layers, const nn::Tensor& x, const ForwardContext& ctx) const;

  BackboneConfig cfg_;
  std::vector<NamedParameter> params_;
  std::optional<LoRAConfig> lora_;
  mutable std::atomic<std::uint64_t> encoder_calls_{0};

  // image encoder
  LinearLayer patch_embed_;
  nn::Tensor pos_embed_;
  std::vector<EncoderBlock> blocks_;
  LinearLayer neck_conv1_, neck_conv3_;
  LayerNormLayer neck_norm1_, neck_norm2_;
  nn::ResampleTable pe_table_;

  // prompt encoder
  nn::Tensor fourier_basis_;  ///< 2 × decoder_dim/2 gaussian buffer
  nn::Tensor point_embed_, not_a_point_embed_, no_mask_embed_;

  // mask decoder
  nn::Tensor iou_token_, mask_tokens_;
  std::vector<TwoWayBlock> decoder_blocks_;
  AttentionLayer final_attn_;
  LayerNormLayer final_norm_;
  LinearLayer upscale1_, upscale2_;
  nn::Tensor upscale1_bias_, upscale2_bias_;
  LayerNormLayer upscale_norm_;
  std::vector<LinearLayer> hyper_mlp_, iou_head_;
  nn::ResampleTable mask_table_;

  // q/v projections eligible for adapters, with their part
  std::vector<std::pair<LinearLayer*, ModulePart>> qv_projections_;
};

/// Free-function form of PromptableSegmenter::inject_lora.
void inject_lora(PromptableSegmenter& model, const LoRAConfig& cfg, std::uint64_t seed);

// ---- persistence -------------------------------------------------------------

inline constexpr int kAdapterSchemaVersion = 1;
inline constexpr int kBackboneSchemaVersion = 1;

struct LoraPair {
  nn::Matrix a;  ///< rank × d_in
  nn::Matrix b;  ///< d_out × rank
};

struct AdapterCheckpoint {
  std::map<std::string, LoraPair> lora_weights;
  LoRAConfig lora_config;
  std::string backbone_fingerprint;
  int schema_version = kAdapterSchemaVersion;
  nlohmann::json backbone_config;
  nlohmann::json extra;  ///< e.g. training config echo
};

AdapterCheckpoint extract_adapter(const PromptableSegmenter& model);
/// Injects adapters with the checkpoint's config and copies its weights. Throws
/// FormatError on fingerprint or schema mismatch.
void apply_adapter(PromptableSegmenter& model, const AdapterCheckpoint& ckpt);

void write_adapter(const std::filesystem::path& path, const AdapterCheckpoint& ckpt);
AdapterCheckpoint read_adapter(const std::filesystem::path& path);
AdapterCheckpoint save_adapter(const PromptableSegmenter& model, const std::filesystem::path& path,
                               const nlohmann::json& extra = {});
void load_adapter(PromptableSegmenter& model, const std::filesystem::path& path);

void save_backbone(const PromptableSegmenter& model, const std::filesystem::path& path);
std::unique_ptr<PromptableSegmenter> load_backbone(const std::filesystem::path& path);

/// Location of the bundled tiny backbone: $CELLPROMPT_TINY_BACKBONE if set, else the
/// copy shipped in the source tree's assets/ directory.
std::filesystem::path bundled_backbone_path();
std::unique_ptr<PromptableSegmenter> load_bundled_backbone();

} // namespace cellprompt
