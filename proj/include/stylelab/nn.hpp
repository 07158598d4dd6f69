#pragma once

#include <optional>
#include <string>
#include <vector>

#include "stylelab/rng.hpp"
#include "stylelab/tensor.hpp"

namespace stylelab {
STYLELAB_BEGIN_PRECISION

struct NamedTensor {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedTensor>;

std::vector<Tensor> tensors_of(const ParamList& params);
std::size_t count_parameters(const ParamList& params);
void set_trainable(const ParamList& params, bool trainable);

// Low-rank delta attached to a Linear: y += scaling * (x A^T) B^T, with
// A: [rank x in] and B: [out x rank].
struct LoraSlot {
  Tensor a;
  Tensor b;
  real scaling = 1;
};

// y = x W (+ bias), W stored as [in x out].
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, bool with_bias, Rng& rng, double init_std);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor weight;
  Tensor bias;  // undefined when bias-free
  std::optional<LoraSlot> lora;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t width);

  Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta); }
  void collect(const std::string& prefix, ParamList& out) const;

  Tensor gamma;
  Tensor beta;
};

Tensor random_tensor(Shape shape, Rng& rng, double stddev);

// Row index list mapping row (g * per_group + j) -> g, for broadcasting a
// per-sample row to each of its tokens.
std::vector<std::size_t> repeat_index(std::size_t groups, std::size_t per_group);
// Row index list mapping row (g * n + j) -> j, for tiling an [n x w] table.
std::vector<std::size_t> tile_index(std::size_t groups, std::size_t n);

STYLELAB_END_PRECISION
}  // namespace stylelab
