#include "cellprompt/nn.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "cellprompt/error.hpp"

namespace cellprompt::nn {

namespace {

thread_local bool g_grad_enabled = true;

Matrix& grad_buffer(Node& n) {
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

// Adds a full-shape gradient expression, assigning on first use to skip the zero fill.
template <class Expr>
void add_grad(Node& n, const Expr& g) {
  if (n.grad.size() == 0)
    n.grad.noalias() = g;
  else
    n.grad.noalias() += g;
}

void add_grad(Node& n, Matrix&& g) {
  if (n.grad.size() == 0)
    n.grad = std::move(g);
  else
    n.grad += g;
}

Tensor make_op(Matrix value, std::vector<Tensor> inputs, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (g_grad_enabled) {
    for (const auto& t : inputs)
      if (t.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    for (const auto& t : inputs) n->parents.push_back(t.node());
    n->backward_fn = std::move(fn);
  }
  return Tensor::from_node(std::move(n));
}

// Inverted-dropout mask: 1/(1-p) with probability 1-p, else 0. One engine draw seeds a
// counter-based splitmix64 stream, one 32-bit uniform per entry.
Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, real p, Rng& rng) {
  const real keep = 1.0 - p;
  const auto threshold = static_cast<std::uint64_t>(keep * 4294967296.0);
  const std::uint64_t seed = rng.next();
  Matrix mask(rows, cols);
  real* m = mask.data();
  const Eigen::Index size = mask.size();
  for (Eigen::Index i = 0; i < size; ++i) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(i + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    z ^= z >> 31;
    m[i] = (z >> 32) < threshold ? 1.0 / keep : 0.0;
  }
  return mask;
}

bool wants(const Node& n, std::size_t i) { return n.parents[i] && n.parents[i]->requires_grad; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionMismatch(std::string(op) + ": shape mismatch");
}

} // namespace

void Node::accumulate(const Matrix& g) {
  if (grad.size() == 0)
    grad = g;
  else
    grad += g;
}

Tensor::Tensor(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::from_node(std::shared_ptr<Node> n) {
  Tensor t;
  t.node_ = std::move(n);
  return t;
}

real Tensor::item() const {
  if (rows() != 1 || cols() != 1) throw InvalidArgument("item: tensor is not 1x1");
  return node_->value(0, 0);
}

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.rows() != 1 || loss.cols() != 1)
    throw InvalidArgument("backward: loss must be a 1x1 tensor");
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p && p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backward_fn) continue;
    if (n->grad.size() != 0) n->backward_fn(*n);
    n->grad.resize(0, 0);
  }
}

// ---- elementwise and linear algebra ----------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw DimensionMismatch("matmul: inner dimensions differ");
  Matrix out = a.value() * b.value();
  return make_op(std::move(out), {a, b}, [](Node& n) {
    const auto& a = n.parents[0]->value;
    const auto& b = n.parents[1]->value;
    if (wants(n, 0)) add_grad(*n.parents[0], n.grad * b.transpose());
    if (wants(n, 1)) add_grad(*n.parents[1], a.transpose() * n.grad);
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.cols() != w.rows()) throw DimensionMismatch("linear: input width does not match weight");
  Matrix out = x.value() * w.value();
  if (bias.defined()) {
    if (bias.rows() != 1 || bias.cols() != w.cols()) throw DimensionMismatch("linear: bad bias shape");
    out.rowwise() += bias.value().row(0);
    return make_op(std::move(out), {x, w, bias}, [](Node& n) {
      const auto& x = n.parents[0]->value;
      const auto& w = n.parents[1]->value;
      if (wants(n, 0)) add_grad(*n.parents[0], n.grad * w.transpose());
      if (wants(n, 1)) add_grad(*n.parents[1], x.transpose() * n.grad);
      if (wants(n, 2)) add_grad(*n.parents[2], n.grad.colwise().sum());
    });
  }
  return make_op(std::move(out), {x, w}, [](Node& n) {
    const auto& x = n.parents[0]->value;
    const auto& w = n.parents[1]->value;
    if (wants(n, 0)) add_grad(*n.parents[0], n.grad * w.transpose());
    if (wants(n, 1)) add_grad(*n.parents[1], x.transpose() * n.grad);
  });
}

Tensor lora_linear(const Tensor& x, const Tensor& w, const Tensor& bias, const Tensor& a, const Tensor& b, real scaling,
                   real dropout_p, Rng* rng) {
  if (x.cols() != w.rows()) throw DimensionMismatch("lora_linear: input width does not match weight");
  if (a.rows() != w.rows() || b.cols() != w.cols() || a.cols() != b.rows())
    throw DimensionMismatch("lora_linear: adapter shapes do not match the weight");
  if (bias.defined() && (bias.rows() != 1 || bias.cols() != w.cols()))
    throw DimensionMismatch("lora_linear: bad bias shape");
  if (dropout_p < 0.0 || dropout_p >= 1.0) throw InvalidArgument("lora_linear: dropout must lie in [0,1)");

  Matrix mask;
  if (rng && dropout_p > 0.0) mask = dropout_mask(x.rows(), x.cols(), dropout_p, *rng);
  Matrix xa = mask.size() ? Matrix(x.value().cwiseProduct(mask) * a.value()) : Matrix(x.value() * a.value());
  Matrix out = x.value() * w.value();
  out.noalias() += (scaling * xa) * b.value();
  if (bias.defined()) out.rowwise() += bias.value().row(0);

  std::vector<Tensor> inputs{x, w, a, b};
  if (bias.defined()) inputs.push_back(bias);
  return make_op(std::move(out), std::move(inputs), [xa = std::move(xa), mask = std::move(mask), scaling](Node& n) {
    const auto& x = n.parents[0]->value;
    const auto& w = n.parents[1]->value;
    const auto& a = n.parents[2]->value;
    const auto& b = n.parents[3]->value;
    const Matrix gxa = scaling * (n.grad * b.transpose());
    if (wants(n, 2)) {
      if (mask.size())
        add_grad(*n.parents[2], x.cwiseProduct(mask).transpose() * gxa);
      else
        add_grad(*n.parents[2], x.transpose() * gxa);
    }
    if (wants(n, 3)) add_grad(*n.parents[3], (scaling * xa).transpose() * n.grad);
    if (wants(n, 1)) add_grad(*n.parents[1], x.transpose() * n.grad);
    if (n.parents.size() > 4 && wants(n, 4)) add_grad(*n.parents[4], n.grad.colwise().sum());
    if (wants(n, 0)) {
      Matrix gx = n.grad * w.transpose();
      if (mask.size())
        gx.noalias() += (gxa * a.transpose()).cwiseProduct(mask);
      else
        gx.noalias() += gxa * a.transpose();
      add_grad(*n.parents[0], std::move(gx));
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  return make_op(a.value() + b.value(), {a, b}, [](Node& n) {
    if (wants(n, 0)) add_grad(*n.parents[0], n.grad);
    if (wants(n, 1)) add_grad(*n.parents[1], n.grad);
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw DimensionMismatch("add_row: bad row shape");
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return make_op(std::move(out), {a, row}, [](Node& n) {
    if (wants(n, 0)) add_grad(*n.parents[0], n.grad);
    if (wants(n, 1)) add_grad(*n.parents[1], n.grad.colwise().sum());
  });
}

Tensor scale(const Tensor& a, real s) {
  return make_op(a.value() * s, {a}, [s](Node& n) { add_grad(*n.parents[0], n.grad * s); });
}

Tensor gelu(const Tensor& x) {
  // tanh form, written as x·σ(2u) so it vectorises through exp
  constexpr real c = 0.79788456080286535588;  // sqrt(2/pi)
  constexpr real k = 0.044715;
  const auto v = x.value().array();
  Matrix s = (1.0 + (-2.0 * c * (v + k * v.cube())).exp()).inverse().matrix();
  Matrix out = (v * s.array()).matrix();
  return make_op(std::move(out), {x}, [s = std::move(s)](Node& n) {
    const auto v = n.parents[0]->value.array();
    const auto sa = s.array();
    add_grad(*n.parents[0],
             (n.grad.array() * (sa + v * sa * (1.0 - sa) * (2.0 * c) * (1.0 + 3.0 * k * v.square()))).matrix());
  });
}

Tensor relu(const Tensor& x) {
  return make_op(x.value().cwiseMax(0.0), {x}, [](Node& n) {
    const auto& x = n.parents[0]->value;
    add_grad(*n.parents[0], (x.array() > 0.0).select(n.grad, 0.0).matrix());
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps) {
  const auto c = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != c || beta.rows() != 1 || beta.cols() != c)
    throw DimensionMismatch("layer_norm: bad affine shape");
  Matrix xhat(x.rows(), c);
  Eigen::VectorX<real> inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const auto row = x.value().row(r);
    const real mean = row.mean();
    const real var = (row.array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (row.array() - mean) * inv_std(r);
  }
  Matrix out = xhat.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  return make_op(std::move(out), {x, gamma, beta}, [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
    const auto& g = n.grad;
    if (wants(n, 1)) add_grad(*n.parents[1], g.cwiseProduct(xhat).colwise().sum());
    if (wants(n, 2)) add_grad(*n.parents[2], g.colwise().sum());
    if (wants(n, 0)) {
      auto& gx = grad_buffer(*n.parents[0]);
      const auto& gamma = n.parents[1]->value;
      for (Eigen::Index r = 0; r < g.rows(); ++r) {
        const Eigen::RowVectorX<real> gh = g.row(r).cwiseProduct(gamma.row(0));
        const real m1 = gh.mean();
        const real m2 = gh.cwiseProduct(xhat.row(r)).mean();
        gx.row(r).array() += inv_std(r) * (gh.array() - m1 - xhat.row(r).array() * m2);
      }
    }
  });
}

// ---- attention --------------------------------------------------------------

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int batch, int heads, bool shared_kv) {
  if (batch < 1 || heads < 1) throw InvalidArgument("attention: batch and heads must be positive");
  const auto c = q.cols();
  if (k.cols() != c || v.cols() != c || c % heads != 0) throw DimensionMismatch("attention: channel mismatch");
  const int kv_batch = shared_kv ? 1 : batch;
  if (q.rows() % batch != 0 || k.rows() % kv_batch != 0 || k.rows() != v.rows())
    throw DimensionMismatch("attention: rows not divisible by batch");
  const auto nq = q.rows() / batch;
  const auto nk = k.rows() / kv_batch;
  const auto d = c / heads;
  const real sc = 1.0 / std::sqrt(static_cast<real>(d));

  Matrix out(q.rows(), c);
  auto probs = std::make_shared<std::vector<Matrix>>(static_cast<std::size_t>(batch) * heads);
  for (int b = 0; b < batch; ++b) {
    const auto kb = shared_kv ? 0 : b;
    for (int h = 0; h < heads; ++h) {
      Matrix s = (q.value().block(b * nq, h * d, nq, d) * k.value().block(kb * nk, h * d, nk, d).transpose()) * sc;
      for (Eigen::Index r = 0; r < nq; ++r) {
        const real mx = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - mx).exp();
        s.row(r) /= s.row(r).sum();
      }
      out.block(b * nq, h * d, nq, d).noalias() = s * v.value().block(kb * nk, h * d, nk, d);
      (*probs)[b * heads + h] = std::move(s);
    }
  }
  return make_op(std::move(out), {q, k, v}, [=](Node& n) {
    const auto& qv = n.parents[0]->value;
    const auto& kv = n.parents[1]->value;
    const auto& vv = n.parents[2]->value;
    Matrix* gq = wants(n, 0) ? &grad_buffer(*n.parents[0]) : nullptr;
    Matrix* gk = wants(n, 1) ? &grad_buffer(*n.parents[1]) : nullptr;
    Matrix* gv = wants(n, 2) ? &grad_buffer(*n.parents[2]) : nullptr;
    for (int b = 0; b < batch; ++b) {
      const auto kb = shared_kv ? 0 : b;
      for (int h = 0; h < heads; ++h) {
        const Matrix& p = (*probs)[b * heads + h];
        const auto go = n.grad.block(b * nq, h * d, nq, d);
        if (gv) gv->block(kb * nk, h * d, nk, d).noalias() += p.transpose() * go;
        if (!gq && !gk) continue;
        Matrix dp = go * vv.block(kb * nk, h * d, nk, d).transpose();
        const Eigen::VectorX<real> dot = dp.cwiseProduct(p).rowwise().sum();
        Matrix ds = p.cwiseProduct(dp.colwise() - dot) * sc;
        if (gq) gq->block(b * nq, h * d, nq, d).noalias() += ds * kv.block(kb * nk, h * d, nk, d);
        if (gk) gk->block(kb * nk, h * d, nk, d).noalias() += ds.transpose() * qv.block(b * nq, h * d, nq, d);
      }
    }
  });
}

// ---- reshaping --------------------------------------------------------------

Tensor tile_rows(const Tensor& x, int times) {
  if (times < 1) throw InvalidArgument("tile_rows: times must be positive");
  const auto r = x.rows();
  Matrix out(r * times, x.cols());
  for (int t = 0; t < times; ++t) out.middleRows(t * r, r) = x.value();
  return make_op(std::move(out), {x}, [r, times](Node& n) {
    auto& g = grad_buffer(*n.parents[0]);
    for (int t = 0; t < times; ++t) g += n.grad.middleRows(t * r, r);
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw InvalidArgument("concat_rows: no inputs");
  Eigen::Index total = 0;
  for (const auto& p : parts) {
    if (p.cols() != parts[0].cols()) throw DimensionMismatch("concat_rows: column counts differ");
    total += p.rows();
  }
  Matrix out(total, parts[0].cols());
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return make_op(std::move(out), parts, [](Node& n) {
    Eigen::Index at = 0;
    for (std::size_t i = 0; i < n.parents.size(); ++i) {
      const auto r = n.parents[i]->value.rows();
      if (wants(n, i)) add_grad(*n.parents[i], n.grad.middleRows(at, r));
      at += r;
    }
  });
}

Tensor take_rows(const Tensor& x, std::vector<int> indices) {
  Matrix out(static_cast<Eigen::Index>(indices.size()), x.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= x.rows()) throw InvalidArgument("take_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = x.value().row(indices[i]);
  }
  return make_op(std::move(out), {x}, [indices = std::move(indices)](Node& n) {
    auto& g = grad_buffer(*n.parents[0]);
    for (std::size_t i = 0; i < indices.size(); ++i) g.row(indices[i]) += n.grad.row(static_cast<Eigen::Index>(i));
  });
}


Tensor dropout(const Tensor& x, real p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw InvalidArgument("dropout: p must lie in [0,1)");
  if (p == 0.0) return x;
  Matrix mask = dropout_mask(x.rows(), x.cols(), p, rng);
  Matrix out = x.value().cwiseProduct(mask);
  return make_op(std::move(out), {x}, [mask = std::move(mask)](Node& n) {
    add_grad(*n.parents[0], n.grad.cwiseProduct(mask));
  });
}

Tensor im2col3x3(const Tensor& x, int height, int width) {
  if (x.rows() != static_cast<Eigen::Index>(height) * width) throw DimensionMismatch("im2col3x3: rows != H*W");
  const auto c = x.cols();
  Matrix out = Matrix::Zero(x.rows(), 9 * c);
  for (int y = 0; y < height; ++y)
    for (int xx = 0; xx < width; ++xx)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const int sy = y + ky - 1, sx = xx + kx - 1;
          if (sy < 0 || sx < 0 || sy >= height || sx >= width) continue;
          out.row(y * width + xx).segment((ky * 3 + kx) * c, c) = x.value().row(sy * width + sx);
        }
  return make_op(std::move(out), {x}, [height, width, c](Node& n) {
    auto& g = grad_buffer(*n.parents[0]);
    for (int y = 0; y < height; ++y)
      for (int xx = 0; xx < width; ++xx)
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const int sy = y + ky - 1, sx = xx + kx - 1;
            if (sy < 0 || sx < 0 || sy >= height || sx >= width) continue;
            g.row(sy * width + sx) += n.grad.row(y * width + xx).segment((ky * 3 + kx) * c, c);
          }
  });
}

Tensor pixel_shuffle2(const Tensor& x, int batch, int height, int width) {
  const Eigen::Index hw = static_cast<Eigen::Index>(height) * width;
  if (x.rows() != batch * hw || x.cols() % 4 != 0) throw DimensionMismatch("pixel_shuffle2: bad shape");
  const auto c = x.cols() / 4;
  const int ow = 2 * width;
  auto target = [=](int b, int y, int xx, int k) {
    return static_cast<Eigen::Index>(b) * 4 * hw + static_cast<Eigen::Index>(2 * y + k / 2) * ow + (2 * xx + k % 2);
  };
  Matrix out(4 * batch * hw, c);
  for (int b = 0; b < batch; ++b)
    for (int y = 0; y < height; ++y)
      for (int xx = 0; xx < width; ++xx) {
        const auto src = b * hw + static_cast<Eigen::Index>(y) * width + xx;
        for (int k = 0; k < 4; ++k) out.row(target(b, y, xx, k)) = x.value().row(src).segment(k * c, c);
      }
  return make_op(std::move(out), {x}, [=](Node& n) {
    auto& g = grad_buffer(*n.parents[0]);
    for (int b = 0; b < batch; ++b)
      for (int y = 0; y < height; ++y)
        for (int xx = 0; xx < width; ++xx) {
          const auto src = b * hw + static_cast<Eigen::Index>(y) * width + xx;
          for (int k = 0; k < 4; ++k) g.row(src).segment(k * c, c) += n.grad.row(target(b, y, xx, k));
        }
  });
}

Tensor batched_rowdot(const Tensor& u, const Tensor& h) {
  const auto batch = h.rows();
  if (u.cols() != h.cols() || batch == 0 || u.rows() % batch != 0)
    throw DimensionMismatch("batched_rowdot: bad shapes");
  const auto p = u.rows() / batch;
  Matrix out(batch, p);
  for (Eigen::Index b = 0; b < batch; ++b)
    out.row(b).noalias() = (u.value().middleRows(b * p, p) * h.value().row(b).transpose()).transpose();
  return make_op(std::move(out), {u, h}, [batch, p](Node& n) {
    const auto& u = n.parents[0]->value;
    const auto& h = n.parents[1]->value;
    for (Eigen::Index b = 0; b < batch; ++b) {
      if (wants(n, 0)) grad_buffer(*n.parents[0]).middleRows(b * p, p).noalias() += n.grad.row(b).transpose() * h.row(b);
      if (wants(n, 1)) grad_buffer(*n.parents[1]).row(b).noalias() += n.grad.row(b) * u.middleRows(b * p, p);
    }
  });
}

// ---- bilinear resampling ----------------------------------------------------

ResampleTable make_resample_table(int in_h, int in_w, int out_h, int out_w) {
  if (in_h < 1 || in_w < 1 || out_h < 1 || out_w < 1) throw InvalidArgument("resample: sizes must be positive");
  ResampleTable t{in_h, in_w, out_h, out_w, {}, {}, {}, {}, {}, {}};
  auto axis = [](int in, int out, std::vector<int>& i0, std::vector<int>& i1, std::vector<real>& w) {
    const real ratio = static_cast<real>(in) / out;
    for (int o = 0; o < out; ++o) {
      const real src = std::max<real>(0.0, (o + 0.5) * ratio - 0.5);
      const int lo = std::min(static_cast<int>(src), in - 1);
      i0.push_back(lo);
      i1.push_back(std::min(lo + 1, in - 1));
      w.push_back(src - lo);
    }
  };
  axis(in_h, out_h, t.y0, t.y1, t.wy);
  axis(in_w, out_w, t.x0, t.x1, t.wx);
  return t;
}

namespace {

// Resamples spatial planes stored along rows: each spatial position is a row of C values.
Matrix resample_rows_forward(const Matrix& x, const ResampleTable& t) {
  const auto c = x.cols();
  Matrix tmp(static_cast<Eigen::Index>(t.in_h) * t.out_w, c);
  for (int iy = 0; iy < t.in_h; ++iy)
    for (int ox = 0; ox < t.out_w; ++ox)
      tmp.row(iy * t.out_w + ox) = (1.0 - t.wx[ox]) * x.row(iy * t.in_w + t.x0[ox]) + t.wx[ox] * x.row(iy * t.in_w + t.x1[ox]);
  Matrix out(static_cast<Eigen::Index>(t.out_h) * t.out_w, c);
  for (int oy = 0; oy < t.out_h; ++oy)
    for (int ox = 0; ox < t.out_w; ++ox)
      out.row(oy * t.out_w + ox) = (1.0 - t.wy[oy]) * tmp.row(t.y0[oy] * t.out_w + ox) + t.wy[oy] * tmp.row(t.y1[oy] * t.out_w + ox);
  return out;
}

void resample_rows_backward(const Matrix& g, const ResampleTable& t, Matrix& gx) {
  Matrix gtmp = Matrix::Zero(static_cast<Eigen::Index>(t.in_h) * t.out_w, g.cols());
  for (int oy = 0; oy < t.out_h; ++oy)
    for (int ox = 0; ox < t.out_w; ++ox) {
      gtmp.row(t.y0[oy] * t.out_w + ox) += (1.0 - t.wy[oy]) * g.row(oy * t.out_w + ox);
      gtmp.row(t.y1[oy] * t.out_w + ox) += t.wy[oy] * g.row(oy * t.out_w + ox);
    }
  for (int iy = 0; iy < t.in_h; ++iy)
    for (int ox = 0; ox < t.out_w; ++ox) {
      gx.row(iy * t.in_w + t.x0[ox]) += (1.0 - t.wx[ox]) * gtmp.row(iy * t.out_w + ox);
      gx.row(iy * t.in_w + t.x1[ox]) += t.wx[ox] * gtmp.row(iy * t.out_w + ox);
    }
}

// Same resampling for one plane stored as a contiguous row of values.
void resample_plane(const real* in, real* tmp, real* out, const ResampleTable& t) {
  for (int iy = 0; iy < t.in_h; ++iy) {
    const real* src = in + static_cast<std::ptrdiff_t>(iy) * t.in_w;
    real* dst = tmp + static_cast<std::ptrdiff_t>(iy) * t.out_w;
    for (int ox = 0; ox < t.out_w; ++ox) dst[ox] = (1.0 - t.wx[ox]) * src[t.x0[ox]] + t.wx[ox] * src[t.x1[ox]];
  }
  for (int oy = 0; oy < t.out_h; ++oy) {
    const real* a = tmp + static_cast<std::ptrdiff_t>(t.y0[oy]) * t.out_w;
    const real* b = tmp + static_cast<std::ptrdiff_t>(t.y1[oy]) * t.out_w;
    real* dst = out + static_cast<std::ptrdiff_t>(oy) * t.out_w;
    const real w = t.wy[oy];
    for (int ox = 0; ox < t.out_w; ++ox) dst[ox] = (1.0 - w) * a[ox] + w * b[ox];
  }
}

void resample_plane_backward(const real* g, real* gtmp, real* gin, const ResampleTable& t) {
  std::fill(gtmp, gtmp + static_cast<std::ptrdiff_t>(t.in_h) * t.out_w, 0.0);
  for (int oy = 0; oy < t.out_h; ++oy) {
    real* a = gtmp + static_cast<std::ptrdiff_t>(t.y0[oy]) * t.out_w;
    real* b = gtmp + static_cast<std::ptrdiff_t>(t.y1[oy]) * t.out_w;
    const real* src = g + static_cast<std::ptrdiff_t>(oy) * t.out_w;
    const real w = t.wy[oy];
    for (int ox = 0; ox < t.out_w; ++ox) {
      a[ox] += (1.0 - w) * src[ox];
      b[ox] += w * src[ox];
    }
  }
  for (int iy = 0; iy < t.in_h; ++iy) {
    const real* src = gtmp + static_cast<std::ptrdiff_t>(iy) * t.out_w;
    real* dst = gin + static_cast<std::ptrdiff_t>(iy) * t.in_w;
    for (int ox = 0; ox < t.out_w; ++ox) {
      dst[t.x0[ox]] += (1.0 - t.wx[ox]) * src[ox];
      dst[t.x1[ox]] += t.wx[ox] * src[ox];
    }
  }
}

} // namespace

Matrix resample_rows(const Matrix& x, const ResampleTable& t) {
  if (x.rows() != static_cast<Eigen::Index>(t.in_h) * t.in_w) throw DimensionMismatch("resample: bad input rows");
  return resample_rows_forward(x, t);
}

Tensor resample_spatial_rows(const Tensor& x, const ResampleTable& t) {
  Matrix out = resample_rows(x.value(), t);
  return make_op(std::move(out), {x}, [t](Node& n) { resample_rows_backward(n.grad, t, grad_buffer(*n.parents[0])); });
}

Tensor resample_spatial_cols(const Tensor& x, const ResampleTable& t) {
  if (x.cols() != static_cast<Eigen::Index>(t.in_h) * t.in_w) throw DimensionMismatch("resample: bad input cols");
  Matrix out(x.rows(), static_cast<Eigen::Index>(t.out_h) * t.out_w);
  std::vector<real> tmp(static_cast<std::size_t>(t.in_h) * t.out_w);
  for (Eigen::Index b = 0; b < x.rows(); ++b) resample_plane(x.value().row(b).data(), tmp.data(), out.row(b).data(), t);
  return make_op(std::move(out), {x}, [t](Node& n) {
    auto& g = grad_buffer(*n.parents[0]);
    std::vector<real> tmp(static_cast<std::size_t>(t.in_h) * t.out_w);
    for (Eigen::Index b = 0; b < g.rows(); ++b) resample_plane_backward(n.grad.row(b).data(), tmp.data(), g.row(b).data(), t);
  });
}

// ---- losses -----------------------------------------------------------------

namespace {

// Σ of the stable BCE over `len` logits; writes σ(x) - y to `residual` when given
// (which may alias x). Works in L1-sized chunks.
template <class Y>
real bce_sum(const real* x, const Y* y, Eigen::Index len, real* residual, bool want_loss = true) {
  constexpr Eigen::Index kChunk = 1024;
  Eigen::Array<real, kChunk, 1> e, yv;
  double acc = 0.0;
  for (Eigen::Index at = 0; at < len; at += kChunk) {
    const auto n = std::min(kChunk, len - at);
    const Eigen::Map<const Eigen::Array<real, Eigen::Dynamic, 1>> xc(x + at, n);
    auto yc = yv.head(n);
    // separate conversion keeps the expression below vectorised
    yc = Eigen::Map<const Eigen::Array<Y, Eigen::Dynamic, 1>>(y + at, n).template cast<real>();
    auto ec = e.head(n);
    // softplus(x) = max(x,0) + log(1 + e^-|x|)
    ec = (-xc.abs()).exp();
    if (want_loss) acc += (xc.max(0.0) - xc * yc + (1.0 + ec).log()).sum();
    if (residual) {
      // σ(x) = 1/2 + sign(x)·(1 - e)/(2(1 + e)), branch-free
      const real* xp = x + at;
      real* dp = residual + at;
      for (Eigen::Index i = 0; i < n; ++i) dp[i] = 0.5 + std::copysign(0.5 * (1.0 - ec(i)) / (1.0 + ec(i)), xp[i]) - yc(i);
    }
  }
  return acc;
}

} // namespace

Tensor bce_with_logits_rows(const Tensor& logits, const Matrix& targets) {
  if (logits.rows() != targets.rows() || logits.cols() != targets.cols())
    throw DimensionMismatch("bce_with_logits_rows: target shape mismatch");
  const auto p = logits.cols();
  const bool keep_residual = grad_enabled() && logits.requires_grad();
  Matrix out(logits.rows(), 1);
  Matrix d = keep_residual ? Matrix(logits.rows(), p) : Matrix();
  for (Eigen::Index r = 0; r < logits.rows(); ++r)
    out(r, 0) = bce_sum(logits.value().row(r).data(), targets.row(r).data(), p,
                        keep_residual ? d.row(r).data() : nullptr) /
                static_cast<real>(p);
  if (!keep_residual) return make_op(std::move(out), {logits}, {});
  return make_op(std::move(out), {logits}, [d = std::move(d), p](Node& n) {
    const Eigen::VectorX<real> s = n.grad.col(0) / static_cast<real>(p);
    add_grad(*n.parents[0], (d.array().colwise() * s.array()).matrix());
  });
}

Tensor upsampled_bce_rows(const Tensor& low_res, const ResampleTable& t, const ByteMatrix& targets) {
  const auto in_size = static_cast<Eigen::Index>(t.in_h) * t.in_w;
  const auto p = static_cast<Eigen::Index>(t.out_h) * t.out_w;
  if (low_res.cols() != in_size) throw DimensionMismatch("upsampled_bce_rows: bad input cols");
  if (targets.rows() != low_res.rows() || targets.cols() != p)
    throw DimensionMismatch("upsampled_bce_rows: target shape mismatch");
  std::vector<real> tmp(static_cast<std::size_t>(t.in_h) * t.out_w), plane(static_cast<std::size_t>(p));
  Matrix out(low_res.rows(), 1);
  for (Eigen::Index b = 0; b < low_res.rows(); ++b) {
    resample_plane(low_res.value().row(b).data(), tmp.data(), plane.data(), t);
    out(b, 0) = bce_sum(plane.data(), targets.row(b).data(), p, nullptr) / static_cast<real>(p);
  }
  // Backward recomputes the upsampled plane rather than keeping B full-size maps.
  return make_op(std::move(out), {low_res}, [t, targets, p](Node& n) {
    auto& g = grad_buffer(*n.parents[0]);
    const auto& x = n.parents[0]->value;
    std::vector<real> tmp(static_cast<std::size_t>(t.in_h) * t.out_w), plane(static_cast<std::size_t>(p));
    for (Eigen::Index b = 0; b < x.rows(); ++b) {
      resample_plane(x.row(b).data(), tmp.data(), plane.data(), t);
      bce_sum(plane.data(), targets.row(b).data(), p, plane.data(), false);
      const real s = n.grad(b, 0) / static_cast<real>(p);
      for (auto& v : plane) v *= s;
      resample_plane_backward(plane.data(), tmp.data(), g.row(b).data(), t);
    }
  });
}

Tensor upsampled_dice_rows(const Tensor& low_res, const ResampleTable& t, const ByteMatrix& targets) {
  const auto in_size = static_cast<Eigen::Index>(t.in_h) * t.in_w;
  const auto p = static_cast<Eigen::Index>(t.out_h) * t.out_w;
  if (low_res.cols() != in_size) throw DimensionMismatch("upsampled_dice_rows: bad input cols");
  if (targets.rows() != low_res.rows() || targets.cols() != p)
    throw DimensionMismatch("upsampled_dice_rows: target shape mismatch");
  // Per row: the sigmoid plane and the sums I = Σσy, S = Σσ + Σy, kept for backward.
  auto sig = std::make_shared<Matrix>(low_res.rows(), p);
  Eigen::VectorX<real> inter(low_res.rows()), total(low_res.rows());
  std::vector<real> tmp(static_cast<std::size_t>(t.in_h) * t.out_w);
  Matrix out(low_res.rows(), 1);
  for (Eigen::Index b = 0; b < low_res.rows(); ++b) {
    real* s = sig->row(b).data();
    resample_plane(low_res.value().row(b).data(), tmp.data(), s, t);
    const std::uint8_t* y = targets.row(b).data();
    real i_sum = 0, s_sum = 0;
    for (Eigen::Index k = 0; k < p; ++k) {
      s[k] = real(1) / (real(1) + std::exp(-s[k]));
      i_sum += s[k] * y[k];
      s_sum += s[k] + y[k];
    }
    inter(b) = i_sum;
    total(b) = s_sum;
    out(b, 0) = real(1) - (real(2) * i_sum + real(1)) / (s_sum + real(1));
  }
  return make_op(std::move(out), {low_res}, [t, targets, p, sig, inter, total](Node& n) {
    auto& g = grad_buffer(*n.parents[0]);
    std::vector<real> tmp(static_cast<std::size_t>(t.in_h) * t.out_w), plane(static_cast<std::size_t>(p));
    for (Eigen::Index b = 0; b < sig->rows(); ++b) {
      const real* s = sig->row(b).data();
      const std::uint8_t* y = targets.row(b).data();
      const real d = total(b) + real(1);
      const real num = real(2) * inter(b) + real(1);
      const real scale = n.grad(b, 0) / (d * d);
      for (Eigen::Index k = 0; k < p; ++k)
        plane[static_cast<std::size_t>(k)] = scale * (num - real(2) * y[k] * d) * s[k] * (real(1) - s[k]);
      resample_plane_backward(plane.data(), tmp.data(), g.row(b).data(), t);
    }
  });
}

Tensor squared_error(const Tensor& x, const Matrix& targets) {
  if (x.rows() != targets.rows() || x.cols() != targets.cols()) throw DimensionMismatch("squared_error: shape mismatch");
  Matrix diff = x.value() - targets;
  Matrix out = diff.array().square();
  return make_op(std::move(out), {x}, [diff = std::move(diff)](Node& n) {
    add_grad(*n.parents[0], 2.0 * n.grad.cwiseProduct(diff));
  });
}

Tensor weighted_sum(const Tensor& x, std::span<const real> weights) {
  if (x.cols() != 1 || static_cast<std::size_t>(x.rows()) != weights.size())
    throw DimensionMismatch("weighted_sum: expects an n×1 tensor and n weights");
  Eigen::Map<const Eigen::VectorX<real>> w(weights.data(), x.rows());
  Matrix out(1, 1);
  out(0, 0) = x.value().col(0).dot(w);
  return make_op(std::move(out), {x}, [wv = Eigen::VectorX<real>(w)](Node& n) {
    grad_buffer(*n.parents[0]).col(0) += n.grad(0, 0) * wv;
  });
}

Tensor frobenius_dot(const Tensor& x, const Matrix& weights) {
  if (x.rows() != weights.rows() || x.cols() != weights.cols()) throw DimensionMismatch("frobenius_dot: shape mismatch");
  Matrix out(1, 1);
  out(0, 0) = x.value().cwiseProduct(weights).sum();
  return make_op(std::move(out), {x}, [weights](Node& n) { add_grad(*n.parents[0], n.grad(0, 0) * weights); });
}

// ---- optimizer --------------------------------------------------------------

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.push_back(Matrix::Zero(p.rows(), p.cols()));
    v_.push_back(Matrix::Zero(p.rows(), p.cols()));
  }
}

void AdamW::step(real lr) {
  ++t_;
  const real bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<real>(t_));
  const real bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<real>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& g = params_[i].grad();
    if (g.size() == 0) continue;
    auto& p = params_[i].mutable_value();
    p *= 1.0 - lr * cfg_.weight_decay;
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseAbs2();
    p.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + cfg_.eps);
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

} // namespace cellprompt::nn
