#include "stylelab/optim.hpp"

#include <cmath>

namespace stylelab {
STYLELAB_BEGIN_PRECISION

Adam::Adam(std::vector<Tensor> params, AdamOptions options) : params_(std::move(params)), options_(options) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (auto& p : params_) {
    if (!p.requires_grad()) throw ParameterError("Adam: parameter does not require grad");
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

double grad_norm(const std::vector<Tensor>& params) {
  double sq = 0.0;
  for (const auto& p : params)
    for (real g : p.grad()) sq += double(g) * double(g);
  return std::sqrt(sq);
}

double Adam::step() {
  ++t_;
  const double norm = grad_norm(params_);
  const double clip = options_.grad_clip > 0 && norm > options_.grad_clip ? options_.grad_clip / norm : 1.0;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, double(t_));
  const double c2 = 1.0 - std::pow(b2, double(t_));
  const double step = options_.lr / c1;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto data = params_[k].mutable_data();
    const auto grad = params_[k].grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = double(grad[i]) * clip;
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      data[i] = static_cast<real>(double(data[i]) - step * m[i] / (std::sqrt(v[i] / c2) + options_.eps));
    }
  }
  return norm;
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

STYLELAB_END_PRECISION
}  // namespace stylelab
