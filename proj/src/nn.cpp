#include "stylelab/nn.hpp"

namespace stylelab {
STYLELAB_BEGIN_PRECISION

std::vector<Tensor> tensors_of(const ParamList& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

std::size_t count_parameters(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

void set_trainable(const ParamList& params, bool trainable) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.set_requires_grad(trainable);
  }
}

Tensor random_tensor(Shape shape, Rng& rng, double stddev) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), rng.normal_vector(n, stddev));
}

Linear::Linear(std::size_t in, std::size_t out, bool with_bias, Rng& rng, double init_std)
    : weight(random_tensor({in, out}, rng, init_std)) {
  if (with_bias) bias = Tensor::zeros({out});
}

Tensor Linear::forward(const Tensor& x) const {
  Tensor y = matmul(x, weight);
  if (bias.defined()) y = add_bias(y, bias);
  if (lora) {
    Tensor low = matmul(x, transpose(lora->a));
    y = add(y, scale(matmul(low, transpose(lora->b)), lora->scaling));
  }
  return y;
}

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight});
  if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

LayerNorm::LayerNorm(std::size_t width)
    : gamma(Tensor::full({width}, real(1))), beta(Tensor::zeros({width})) {}

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

std::vector<std::size_t> repeat_index(std::size_t groups, std::size_t per_group) {
  std::vector<std::size_t> idx(groups * per_group);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i / per_group;
  return idx;
}

std::vector<std::size_t> tile_index(std::size_t groups, std::size_t n) {
  std::vector<std::size_t> idx(groups * n);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i % n;
  return idx;
}

STYLELAB_END_PRECISION
}  // namespace stylelab
