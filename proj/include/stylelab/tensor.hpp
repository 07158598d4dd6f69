#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "stylelab/errors.hpp"
#include "stylelab/precision.hpp"

namespace stylelab {
STYLELAB_BEGIN_PRECISION

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {
struct TensorNode;
struct OpBuilder;
}

// Dense row-major tensor handle. Copies share storage; use clone() for a deep
// copy. Gradients accumulate into grad() when the tensor participates in a
// recorded ComputeGraph and requires_grad() is set.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<real> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, real value);
  static Tensor scalar(real value);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const;

  std::span<const real> data() const;
  // In-place access for optimizers and loaders; not recorded in any graph.
  std::span<real> mutable_data();
  real item() const;
  real at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const real> grad() const;
  std::span<real> mutable_grad();
  void zero_grad();

  Tensor clone() const;
  // Same values, no graph connection, requires_grad off.
  Tensor detach() const { return clone(); }

  const void* id() const { return node_.get(); }
  const std::shared_ptr<detail::TensorNode>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::TensorNode> node_;

  friend struct detail::OpBuilder;
};

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<real> data;
  std::vector<real> grad;
  bool requires_grad = false;
  // Set for tensors produced by a recorded op (non-leaves).
  bool is_output = false;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), real(0));
  }
};

using BackwardFn = std::function<void()>;

struct OpRecord {
  const char* op;
  std::vector<std::shared_ptr<TensorNode>> inputs;
  std::shared_ptr<TensorNode> output;
  BackwardFn backward;
};

}  // namespace detail

// Tape of operation records. Ops executed while a graph is active on the
// current thread (see Scope) are appended in execution order, which is a
// topological order; backward() walks the tape in exact reverse.
//
// A graph and its tensors must stay on one thread during forward/backward.
class ComputeGraph {
 public:
  ComputeGraph() = default;
  ComputeGraph(const ComputeGraph&) = delete;
  ComputeGraph& operator=(const ComputeGraph&) = delete;
  ~ComputeGraph();

  class Scope {
   public:
    explicit Scope(ComputeGraph& graph);
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;
    ~Scope();

   private:
    ComputeGraph* previous_;
  };

  [[nodiscard]] Scope activate() { return Scope(*this); }

  // Propagates d(loss)/d(x) to every requires_grad tensor reachable from the
  // tape. Leaf gradients accumulate across calls; call zero_grad() on the
  // leaves to reset. Intermediate gradients are reset at the start of each
  // call so repeated calls add exactly one more gradient to each leaf.
  void backward(const Tensor& loss);

  std::size_t size() const { return records_.size(); }
  const detail::OpRecord& record(std::size_t i) const { return records_.at(i); }
  void clear() { records_.clear(); }

  static ComputeGraph* active();
  void push(detail::OpRecord record) { records_.push_back(std::move(record)); }

 private:
  std::vector<detail::OpRecord> records_;
};

inline void backward(ComputeGraph& graph, const Tensor& loss) { graph.backward(loss); }

// ---- differentiable ops --------------------------------------------------

// [m x k] x [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);
// 2-D transpose.
Tensor transpose(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, real factor);
// x[m x n] + bias[n] added to every row. The only broadcast supported.
Tensor add_bias(const Tensor& x, const Tensor& bias);

// out row i = x row index[i]; backward scatter-adds. Covers embedding lookup,
// per-sample repetition and tiling.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index);
// out flat element i = x flat element index[i], reshaped to out_shape.
Tensor gather(const Tensor& x, std::span<const std::size_t> index, Shape out_shape);
Tensor reshape(const Tensor& x, Shape shape);

Tensor silu(const Tensor& x);
Tensor tanh(const Tensor& x);

// Per-row normalization of a 2-D tensor with affine gamma/beta of length n.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps = real(1e-5));

// Row-wise softmax with per-row max subtraction.
Tensor softmax_rows(const Tensor& x);

// Multi-head scaled dot-product attention over `groups` independent blocks.
// q: [groups*nq x heads*dh], k: [groups*nk x heads*dh], v: [groups*nk x heads*dh].
// Each group attends only within itself. Returns [groups*nq x heads*dh].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t groups,
                 std::size_t heads);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// mean((pred - target)^2) over all elements.
Tensor mse_loss(const Tensor& pred, const Tensor& target);

// ---- non-differentiable helpers -----------------------------------------

// Cosine similarity of the flattened tensors; 0 if either norm < 1e-12.
double cosine(const Tensor& a, const Tensor& b);
double cosine(std::span<const real> a, std::span<const real> b);

double max_abs_diff(const Tensor& a, const Tensor& b);
bool all_finite(std::span<const real> values);
bool bit_equal(const Tensor& a, const Tensor& b);

STYLELAB_END_PRECISION
}  // namespace stylelab
