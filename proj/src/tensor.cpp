#include "stylelab/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace stylelab {
STYLELAB_BEGIN_PRECISION

namespace {

#if defined(__GLIBC__)
// no mmap/munmap round trip per tensor buffer
const bool allocator_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
  return true;
}();
#endif

using RowMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using CStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

thread_local ComputeGraph* g_active_graph = nullptr;

using detail::TensorNode;

real* grad_target(TensorNode* n) {
  if (!n->requires_grad) return nullptr;
  n->ensure_grad();
  return n->grad.data();
}

void require_rank2(const Tensor& x, const char* op) {
  if (!x.defined() || x.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " +
                         (x.defined() ? shape_string(x.shape()) : std::string("<undefined>")));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

}  // namespace

namespace detail {

struct OpBuilder {
  static Tensor make(Shape shape, std::vector<real> data) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    return Tensor(std::move(node));
  }

  static bool tracking(std::initializer_list<const Tensor*> inputs) {
    if (g_active_graph == nullptr) return false;
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor* t) { return t->defined() && t->requires_grad(); });
  }

  static void record(const char* op, std::initializer_list<const Tensor*> inputs, Tensor& out,
                     BackwardFn fn) {
    out.node_->requires_grad = true;
    out.node_->is_output = true;
    OpRecord rec;
    rec.op = op;
    for (const Tensor* t : inputs) rec.inputs.push_back(t->node_);
    rec.output = out.node_;
    rec.backward = std::move(fn);
    g_active_graph->push(std::move(rec));
  }
};

}  // namespace detail

using detail::OpBuilder;

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<real> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("Tensor: shape " + shape_string(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(data.size()));
  }
  node_ = std::make_shared<TensorNode>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  set_requires_grad(requires_grad);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<real>(n, real(0)), requires_grad);
}

Tensor Tensor::full(Shape shape, real value) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<real>(n, value));
}

Tensor Tensor::scalar(real value) { return Tensor(Shape{}, {value}); }

const Shape& Tensor::shape() const {
  static const Shape kEmpty{0};
  return node_ ? node_->shape : kEmpty;
}

std::size_t Tensor::dim(std::size_t i) const {
  if (i >= rank()) {
    throw DimensionError("dim " + std::to_string(i) + " out of range for " + shape_string(shape()));
  }
  return shape()[i];
}

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::span<const real> Tensor::data() const {
  if (!node_) return {};
  return node_->data;
}

std::span<real> Tensor::mutable_data() {
  if (!node_) return {};
  return node_->data;
}

real Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  if (!node_) return;
  node_->requires_grad = value;
  if (value) node_->ensure_grad();
}

bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->data.size(); }

std::span<const real> Tensor::grad() const {
  if (!has_grad()) return {};
  return node_->grad;
}

std::span<real> Tensor::mutable_grad() {
  if (!node_) return {};
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), real(0));
}

Tensor Tensor::clone() const {
  if (!node_) return {};
  return Tensor(node_->shape, node_->data, false);
}

// ---- ComputeGraph ------------------------------------------------------------

ComputeGraph::~ComputeGraph() {
  if (g_active_graph == this) g_active_graph = nullptr;
}

ComputeGraph::Scope::Scope(ComputeGraph& graph) : previous_(g_active_graph) {
  g_active_graph = &graph;
}

ComputeGraph::Scope::~Scope() { g_active_graph = previous_; }

ComputeGraph* ComputeGraph::active() { return g_active_graph; }

void ComputeGraph::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
  }
  for (auto& rec : records_) {
    rec.output->grad.assign(rec.output->data.size(), real(0));
    for (auto& in : rec.inputs) {
      if (in->requires_grad) in->ensure_grad();
    }
  }
  auto* loss_node = loss.node().get();
  if (loss_node->requires_grad) {
    loss_node->ensure_grad();
    loss_node->grad[0] += real(1);
  }
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->backward();
}

// ---- linear algebra --------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  std::vector<real> out(m * n);
  MatMap(out.data(), m, n).noalias() = CMatMap(a.data().data(), m, k) * CMatMap(b.data().data(), k, n);
  Tensor result = OpBuilder::make({m, n}, std::move(out));
  if (OpBuilder::tracking({&a, &b})) {
    auto* an = a.node().get();
    auto* bn = b.node().get();
    auto* on = result.node().get();
    OpBuilder::record("matmul", {&a, &b}, result, [an, bn, on, m, k, n] {
      CMatMap dc(on->grad.data(), m, n);
      if (real* ga = grad_target(an)) {
        MatMap(ga, m, k).noalias() += dc * CMatMap(bn->data.data(), k, n).transpose();
      }
      if (real* gb = grad_target(bn)) {
        MatMap(gb, k, n).noalias() += CMatMap(an->data.data(), m, k).transpose() * dc;
      }
    });
  }
  return result;
}

Tensor transpose(const Tensor& x) {
  require_rank2(x, "transpose");
  const auto m = x.dim(0), n = x.dim(1);
  std::vector<real> out(m * n);
  MatMap(out.data(), n, m) = CMatMap(x.data().data(), m, n).transpose();
  Tensor result = OpBuilder::make({n, m}, std::move(out));
  if (OpBuilder::tracking({&x})) {
    auto* xn = x.node().get();
    auto* on = result.node().get();
    OpBuilder::record("transpose", {&x}, result, [xn, on, m, n] {
      if (real* g = grad_target(xn)) {
        MatMap(g, m, n) += CMatMap(on->grad.data(), n, m).transpose();
      }
    });
  }
  return result;
}

// ---- elementwise ---------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<real> out(a.numel());
  const auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  Tensor result = OpBuilder::make(a.shape(), std::move(out));
  if (OpBuilder::tracking({&a, &b})) {
    auto* an = a.node().get();
    auto* bn = b.node().get();
    auto* on = result.node().get();
    OpBuilder::record("add", {&a, &b}, result, [an, bn, on] {
      const auto& g = on->grad;
      if (real* ga = grad_target(an)) for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      if (real* gb = grad_target(bn)) for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    });
  }
  return result;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<real> out(a.numel());
  const auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
  Tensor result = OpBuilder::make(a.shape(), std::move(out));
  if (OpBuilder::tracking({&a, &b})) {
    auto* an = a.node().get();
    auto* bn = b.node().get();
    auto* on = result.node().get();
    OpBuilder::record("sub", {&a, &b}, result, [an, bn, on] {
      const auto& g = on->grad;
      if (real* ga = grad_target(an)) for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      if (real* gb = grad_target(bn)) for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    });
  }
  return result;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<real> out(a.numel());
  const auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  Tensor result = OpBuilder::make(a.shape(), std::move(out));
  if (OpBuilder::tracking({&a, &b})) {
    auto* an = a.node().get();
    auto* bn = b.node().get();
    auto* on = result.node().get();
    OpBuilder::record("mul", {&a, &b}, result, [an, bn, on] {
      const auto& g = on->grad;
      if (real* ga = grad_target(an))
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->data[i];
      if (real* gb = grad_target(bn))
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->data[i];
    });
  }
  return result;
}

Tensor scale(const Tensor& x, real factor) {
  std::vector<real> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * factor;
  Tensor result = OpBuilder::make(x.shape(), std::move(out));
  if (OpBuilder::tracking({&x})) {
    auto* xn = x.node().get();
    auto* on = result.node().get();
    OpBuilder::record("scale", {&x}, result, [xn, on, factor] {
      if (real* g = grad_target(xn))
        for (std::size_t i = 0; i < on->grad.size(); ++i) g[i] += on->grad[i] * factor;
    });
  }
  return result;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank2(x, "add_bias");
  const auto m = x.dim(0), n = x.dim(1);
  if (bias.numel() != n) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " does not match rows of " +
                         shape_string(x.shape()));
  }
  std::vector<real> out(x.data().begin(), x.data().end());
  const auto bd = bias.data();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bd[c];
  Tensor result = OpBuilder::make(x.shape(), std::move(out));
  if (OpBuilder::tracking({&x, &bias})) {
    auto* xn = x.node().get();
    auto* bn = bias.node().get();
    auto* on = result.node().get();
    OpBuilder::record("add_bias", {&x, &bias}, result, [xn, bn, on, m, n] {
      const auto& g = on->grad;
      if (real* gx = grad_target(xn)) for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      if (real* gb = grad_target(bn))
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
    });
  }
  return result;
}

// ---- indexing ------------------------------------------------------------------

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
  require_rank2(x, "gather_rows");
  const auto rows = x.dim(0), n = x.dim(1);
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<real> out(idx.size() * n);
  const auto xd = x.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= rows) {
      throw DimensionError("gather_rows: row " + std::to_string(idx[i]) + " out of range for " +
                           shape_string(x.shape()));
    }
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(idx[i] * n), n, out.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  Tensor result = OpBuilder::make({idx.size(), n}, std::move(out));
  if (OpBuilder::tracking({&x})) {
    auto* xn = x.node().get();
    auto* on = result.node().get();
    OpBuilder::record("gather_rows", {&x}, result, [xn, on, idx = std::move(idx), n] {
      if (real* g = grad_target(xn))
        for (std::size_t i = 0; i < idx.size(); ++i)
          for (std::size_t c = 0; c < n; ++c) g[idx[i] * n + c] += on->grad[i * n + c];
    });
  }
  return result;
}

Tensor gather(const Tensor& x, std::span<const std::size_t> index, Shape out_shape) {
  if (shape_numel(out_shape) != index.size()) {
    throw DimensionError("gather: index length " + std::to_string(index.size()) +
                         " does not match output shape " + shape_string(out_shape));
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<real> out(idx.size());
  const auto xd = x.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= xd.size()) {
      throw DimensionError("gather: index " + std::to_string(idx[i]) + " out of range for " +
                           shape_string(x.shape()));
    }
    out[i] = xd[idx[i]];
  }
  Tensor result = OpBuilder::make(std::move(out_shape), std::move(out));
  if (OpBuilder::tracking({&x})) {
    auto* xn = x.node().get();
    auto* on = result.node().get();
    OpBuilder::record("gather", {&x}, result, [xn, on, idx = std::move(idx)] {
      if (real* g = grad_target(xn))
        for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += on->grad[i];
    });
  }
  return result;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  }
  Tensor result = OpBuilder::make(std::move(shape), std::vector<real>(x.data().begin(), x.data().end()));
  if (OpBuilder::tracking({&x})) {
    auto* xn = x.node().get();
    auto* on = result.node().get();
    OpBuilder::record("reshape", {&x}, result, [xn, on] {
      if (real* g = grad_target(xn))
        for (std::size_t i = 0; i < on->grad.size(); ++i) g[i] += on->grad[i];
    });
  }
  return result;
}

// ---- activations -----------------------------------------------------------------

Tensor silu(const Tensor& x) {
  const auto xd = x.data();
  std::vector<real> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] / (real(1) + std::exp(-xd[i]));
  Tensor result = OpBuilder::make(x.shape(), std::move(out));
  if (OpBuilder::tracking({&x})) {
    auto* xn = x.node().get();
    auto* on = result.node().get();
    OpBuilder::record("silu", {&x}, result, [xn, on] {
      if (real* g = grad_target(xn)) {
        for (std::size_t i = 0; i < on->grad.size(); ++i) {
          const real v = xn->data[i];
          const real s = real(1) / (real(1) + std::exp(-v));
          g[i] += on->grad[i] * s * (real(1) + v * (real(1) - s));
        }
      }
    });
  }
  return result;
}

Tensor tanh(const Tensor& x) {
  const auto xd = x.data();
  std::vector<real> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = std::tanh(xd[i]);
  Tensor result = OpBuilder::make(x.shape(), std::move(out));
  if (OpBuilder::tracking({&x})) {
    auto* xn = x.node().get();
    auto* on = result.node().get();
    OpBuilder::record("tanh", {&x}, result, [xn, on] {
      if (real* g = grad_target(xn))
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          g[i] += on->grad[i] * (real(1) - on->data[i] * on->data[i]);
    });
  }
  return result;
}

// ---- normalization -----------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps) {
  require_rank2(x, "layer_norm");
  const auto m = x.dim(0), n = x.dim(1);
  if (gamma.numel() != n || beta.numel() != n) {
    throw DimensionError("layer_norm: affine parameters must have " + std::to_string(n) + " entries");
  }
  const auto xd = x.data(), gd = gamma.data(), bd = beta.data();
  std::vector<real> out(m * n), xhat(m * n), inv_std(m);
  for (std::size_t r = 0; r < m; ++r) {
    const real* row = xd.data() + r * n;
    real mu = 0;
    for (std::size_t c = 0; c < n; ++c) mu += row[c];
    mu /= real(n);
    real var = 0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= real(n);
    const real is = real(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      const real h = (row[c] - mu) * is;
      xhat[r * n + c] = h;
      out[r * n + c] = h * gd[c] + bd[c];
    }
  }
  Tensor result = OpBuilder::make(x.shape(), std::move(out));
  if (OpBuilder::tracking({&x, &gamma, &beta})) {
    auto* xn = x.node().get();
    auto* gn = gamma.node().get();
    auto* bn = beta.node().get();
    auto* on = result.node().get();
    OpBuilder::record("layer_norm", {&x, &gamma, &beta}, result,
                      [xn, gn, bn, on, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
                        const auto& dy = on->grad;
                        real* gx = grad_target(xn);
                        real* gg = grad_target(gn);
                        real* gb = grad_target(bn);
                        std::vector<real> dxhat(n);
                        for (std::size_t r = 0; r < m; ++r) {
                          real mean_d = 0, mean_dx = 0;
                          for (std::size_t c = 0; c < n; ++c) {
                            const std::size_t i = r * n + c;
                            if (gg) gg[c] += dy[i] * xhat[i];
                            if (gb) gb[c] += dy[i];
                            dxhat[c] = dy[i] * gn->data[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xhat[i];
                          }
                          if (!gx) continue;
                          mean_d /= real(n);
                          mean_dx /= real(n);
                          for (std::size_t c = 0; c < n; ++c) {
                            const std::size_t i = r * n + c;
                            gx[i] += inv_std[r] * (dxhat[c] - mean_d - xhat[i] * mean_dx);
                          }
                        }
                      });
  }
  return result;
}

Tensor softmax_rows(const Tensor& x) {
  require_rank2(x, "softmax_rows");
  const auto m = x.dim(0), n = x.dim(1);
  const auto xd = x.data();
  std::vector<real> out(m * n);
  for (std::size_t r = 0; r < m; ++r) {
    const real* row = xd.data() + r * n;
    real* o = out.data() + r * n;
    const real mx = *std::max_element(row, row + n);
    real total = 0;
    for (std::size_t c = 0; c < n; ++c) {
      o[c] = std::exp(row[c] - mx);
      total += o[c];
    }
    for (std::size_t c = 0; c < n; ++c) o[c] /= total;
  }
  Tensor result = OpBuilder::make(x.shape(), std::move(out));
  if (OpBuilder::tracking({&x})) {
    auto* xn = x.node().get();
    auto* on = result.node().get();
    OpBuilder::record("softmax_rows", {&x}, result, [xn, on, m, n] {
      real* g = grad_target(xn);
      if (!g) return;
      for (std::size_t r = 0; r < m; ++r) {
        const real* y = on->data.data() + r * n;
        const real* dy = on->grad.data() + r * n;
        real dot = 0;
        for (std::size_t c = 0; c < n; ++c) dot += dy[c] * y[c];
        for (std::size_t c = 0; c < n; ++c) g[r * n + c] += y[c] * (dy[c] - dot);
      }
    });
  }
  return result;
}

// ---- attention -----------------------------------------------------------------------

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t groups,
                 std::size_t heads) {
  require_rank2(q, "attention");
  require_rank2(k, "attention");
  require_rank2(v, "attention");
  const auto width = q.dim(1);
  if (groups == 0 || heads == 0 || width % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(width) + " not divisible into " +
                         std::to_string(heads) + " heads");
  }
  if (k.dim(1) != width || v.dim(1) != width || k.dim(0) != v.dim(0)) {
    throw DimensionError("attention: q " + shape_string(q.shape()) + ", k " + shape_string(k.shape()) +
                         ", v " + shape_string(v.shape()) + " are incompatible");
  }
  if (q.dim(0) % groups != 0 || k.dim(0) % groups != 0) {
    throw DimensionError("attention: rows not divisible into " + std::to_string(groups) + " groups");
  }
  const auto nq = q.dim(0) / groups, nk = k.dim(0) / groups, dh = width / heads;
  const real inv_sqrt = real(1) / std::sqrt(real(dh));
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(width));

  std::vector<real> out(q.dim(0) * width, real(0));
  std::vector<real> probs(groups * heads * nq * nk);
  const real* qd = q.data().data();
  const real* kd = k.data().data();
  const real* vd = v.data().data();
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t h = 0; h < heads; ++h) {
      CStridedMap qm(qd + g * nq * width + h * dh, nq, dh, stride);
      CStridedMap km(kd + g * nk * width + h * dh, nk, dh, stride);
      CStridedMap vm(vd + g * nk * width + h * dh, nk, dh, stride);
      MatMap p(probs.data() + (g * heads + h) * nq * nk, nq, nk);
      p.noalias() = (qm * km.transpose()) * inv_sqrt;
      for (Eigen::Index r = 0; r < p.rows(); ++r) {
        auto row = p.row(r);
        row = (row.array() - row.maxCoeff()).exp();
        row /= row.sum();
      }
      StridedMap om(out.data() + g * nq * width + h * dh, nq, dh, stride);
      om.noalias() = p * vm;
    }
  }
  Tensor result = OpBuilder::make({q.dim(0), width}, std::move(out));
  if (OpBuilder::tracking({&q, &k, &v})) {
    auto* qn = q.node().get();
    auto* kn = k.node().get();
    auto* vn = v.node().get();
    auto* on = result.node().get();
    OpBuilder::record(
        "attention", {&q, &k, &v}, result,
        [qn, kn, vn, on, groups, heads, nq, nk, dh, width, inv_sqrt, probs = std::move(probs)] {
          real* gq = grad_target(qn);
          real* gk = grad_target(kn);
          real* gv = grad_target(vn);
          const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(width));
          RowMat dp(nq, nk);
          for (std::size_t g = 0; g < groups; ++g) {
            for (std::size_t h = 0; h < heads; ++h) {
              const std::size_t qoff = g * nq * width + h * dh;
              const std::size_t koff = g * nk * width + h * dh;
              CMatMap p(probs.data() + (g * heads + h) * nq * nk, nq, nk);
              CStridedMap dout(on->grad.data() + qoff, nq, dh, stride);
              CStridedMap qm(qn->data.data() + qoff, nq, dh, stride);
              CStridedMap km(kn->data.data() + koff, nk, dh, stride);
              CStridedMap vm(vn->data.data() + koff, nk, dh, stride);
              if (gv) StridedMap(gv + koff, nk, dh, stride).noalias() += p.transpose() * dout;
              if (!gq && !gk) continue;
              dp.noalias() = dout * vm.transpose();
              for (Eigen::Index r = 0; r < dp.rows(); ++r) {
                const real dot = dp.row(r).dot(p.row(r));
                dp.row(r) = (p.row(r).array() * (dp.row(r).array() - dot)).matrix();
              }
              dp *= inv_sqrt;
              if (gq) StridedMap(gq + qoff, nq, dh, stride).noalias() += dp * km;
              if (gk) StridedMap(gk + koff, nk, dh, stride).noalias() += dp.transpose() * qm;
            }
          }
        });
  }
  return result;
}

// ---- reductions ------------------------------------------------------------------------

Tensor sum(const Tensor& x) {
  real total = 0;
  for (real v : x.data()) total += v;
  Tensor result = OpBuilder::make({}, {total});
  if (OpBuilder::tracking({&x})) {
    auto* xn = x.node().get();
    auto* on = result.node().get();
    OpBuilder::record("sum", {&x}, result, [xn, on] {
      if (real* g = grad_target(xn))
        for (std::size_t i = 0; i < xn->data.size(); ++i) g[i] += on->grad[0];
    });
  }
  return result;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(x), real(1) / real(x.numel()));
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "mse_loss");
  const auto n = pred.numel();
  if (n == 0) throw DimensionError("mse_loss: empty tensors");
  const auto pd = pred.data(), td = target.data();
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = double(pd[i]) - double(td[i]);
    total += d * d;
  }
  Tensor result = OpBuilder::make({}, {real(total / double(n))});
  if (OpBuilder::tracking({&pred, &target})) {
    auto* pn = pred.node().get();
    auto* tn = target.node().get();
    auto* on = result.node().get();
    OpBuilder::record("mse_loss", {&pred, &target}, result, [pn, tn, on, n] {
      const real coeff = real(2) * on->grad[0] / real(n);
      real* gp = grad_target(pn);
      real* gt = grad_target(tn);
      for (std::size_t i = 0; i < n; ++i) {
        const real d = coeff * (pn->data[i] - tn->data[i]);
        if (gp) gp[i] += d;
        if (gt) gt[i] -= d;
      }
    });
  }
  return result;
}

// ---- helpers -------------------------------------------------------------------------

double cosine(std::span<const real> a, std::span<const real> b) {
  if (a.size() != b.size()) {
    throw DimensionError("cosine: length mismatch " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  }
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += double(a[i]) * double(b[i]);
    na += double(a[i]) * double(a[i]);
    nb += double(b[i]) * double(b[i]);
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < 1e-12 || nb < 1e-12) return 0.0;
  return std::clamp(dot / (na * nb), -1.0, 1.0);
}

double cosine(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "cosine");
  return cosine(a.data(), b.data());
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double worst = 0;
  const auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i)
    worst = std::max(worst, std::abs(double(ad[i]) - double(bd[i])));
  return worst;
}

bool all_finite(std::span<const real> values) {
  return std::all_of(values.begin(), values.end(), [](real v) { return std::isfinite(v); });
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(real)) == 0;
}

STYLELAB_END_PRECISION
}  // namespace stylelab
