#pragma once

// Minimal reverse-mode autograd over row-major matrices. Rows are tokens (or
// pixels), columns are channels. Batched tensors stack their items row-wise.

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cellprompt/random.hpp"

namespace cellprompt::nn {

/// Scalar type of every tensor. float by default; the cellprompt_f64 library
/// variant defines CELLPROMPT_DOUBLE for gradient checks.
#ifdef CELLPROMPT_DOUBLE
using real = double;
#else
using real = float;
#endif
using Matrix = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ByteMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  /// Adds g into grad, allocating a zero buffer first if needed.
  void accumulate(const Matrix& g);
  template <class Expr>
  void accumulate_expr(const Expr& g) {
    if (grad.size() == 0) grad = Matrix::Zero(value.rows(), value.cols());
    grad.noalias() += g;
  }
};

class Tensor {
public:
  Tensor() = default;
  explicit Tensor(Matrix value, bool requires_grad = false);

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  Matrix& mutable_grad() { return node_->grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool defined() const { return node_ != nullptr; }
  real item() const;
  void zero_grad() { node_->grad.resize(0, 0); }

  const std::shared_ptr<Node>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<Node> n);

private:
  std::shared_ptr<Node> node_;
};

/// Graph recording is on by default; the guard disables it for the current thread.
bool grad_enabled();
class NoGradGuard {
public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
  bool previous_;
};

/// Back-propagates from a 1x1 tensor. Leaf gradients accumulate across calls.
void backward(const Tensor& loss);

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
/// x·w (+ bias row). w is in×out, bias 1×out or undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});
/// x·w (+ bias) + scaling·(dropout(x)·a)·b, with a in×rank and b rank×out. Dropout
/// is applied only when `rng` is given.
Tensor lora_linear(const Tensor& x, const Tensor& w, const Tensor& bias, const Tensor& a, const Tensor& b, real scaling,
                   real dropout_p = 0.0, Rng* rng = nullptr);
Tensor add(const Tensor& a, const Tensor& b);
Tensor add_row(const Tensor& a, const Tensor& row);
Tensor scale(const Tensor& a, real s);
/// GELU, tanh approximation.
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps);

/// Multi-head scaled dot-product attention. q holds `batch` items of equal row
/// count; k and v hold either `batch` items or a single item shared by all.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int batch, int heads, bool shared_kv);

Tensor tile_rows(const Tensor& x, int times);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor take_rows(const Tensor& x, std::vector<int> indices);
Tensor dropout(const Tensor& x, real p, Rng& rng);

/// 3x3 neighbourhood gather with zero padding: (H·W × C) -> (H·W × 9C).
Tensor im2col3x3(const Tensor& x, int height, int width);
/// (batch·H·W × 4C) -> (batch·2H·2W × C); column block (dy·2+dx) lands at (2y+dy, 2x+dx).
Tensor pixel_shuffle2(const Tensor& x, int batch, int height, int width);
/// Per item b: (P × C) block of u times row b of h -> row b of the (batch × P) result.
Tensor batched_rowdot(const Tensor& u, const Tensor& h);

/// Separable bilinear resampling with half-pixel centres and edge clamping.
struct ResampleTable {
  int in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  std::vector<int> y0, y1, x0, x1;
  std::vector<real> wy, wx;
};
ResampleTable make_resample_table(int in_h, int in_w, int out_h, int out_w);
Matrix resample_rows(const Matrix& x, const ResampleTable& t);
/// Spatial positions along rows: (in_h·in_w × C) -> (out_h·out_w × C).
Tensor resample_spatial_rows(const Tensor& x, const ResampleTable& t);
/// Spatial positions along columns: (B × in_h·in_w) -> (B × out_h·out_w).
Tensor resample_spatial_cols(const Tensor& x, const ResampleTable& t);

/// Row-wise mean of the numerically stable binary cross-entropy with logits.
Tensor bce_with_logits_rows(const Tensor& logits, const Matrix& targets);
/// bce_with_logits_rows(resample_spatial_cols(low_res, t), targets) without
/// materialising the upsampled logits. Targets are 0/1.
Tensor upsampled_bce_rows(const Tensor& low_res, const ResampleTable& t, const ByteMatrix& targets);
/// Row-wise soft Dice loss 1 - (2·Σσ(z)y + 1) / (Σσ(z) + Σy + 1) on the upsampled logits z,
/// fused like upsampled_bce_rows. Insensitive to the foreground fraction of each row.
Tensor upsampled_dice_rows(const Tensor& low_res, const ResampleTable& t, const ByteMatrix& targets);
/// Elementwise (x - target)^2.
Tensor squared_error(const Tensor& x, const Matrix& targets);
/// Σ_i weights_i · x_i over an n×1 tensor.
Tensor weighted_sum(const Tensor& x, std::span<const real> weights);
/// Σ x∘weights over all entries.
Tensor frobenius_dot(const Tensor& x, const Matrix& weights);

// ---- optimizer -------------------------------------------------------------

struct AdamWConfig {
  real beta1 = 0.9;
  real beta2 = 0.999;
  real eps = 1e-8;
  real weight_decay = 0.01;
};

/// Adam with decoupled weight decay.
class AdamW {
public:
  AdamW(std::vector<Tensor> params, AdamWConfig cfg);
  void step(real lr);
  void zero_grad();
  std::int64_t steps() const { return t_; }

private:
  std::vector<Tensor> params_;
  std::vector<Matrix> m_, v_;
  AdamWConfig cfg_;
  std::int64_t t_ = 0;
};

} // namespace cellprompt::nn
