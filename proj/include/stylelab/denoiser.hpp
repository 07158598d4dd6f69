#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "stylelab/nn.hpp"

namespace stylelab {
STYLELAB_BEGIN_PRECISION

struct DenoiserConfig {
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t patch = 4;
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t layers = 8;
  std::size_t text_width = 64;
  std::size_t image_width = 64;
  std::size_t time_width = 64;
  std::size_t mlp_ratio = 2;
  // Data std for input/output preconditioning; 0 makes the network output eps
  // directly.
  double sigma_data = 0.5;

  std::size_t tokens() const { return (image_size / patch) * (image_size / patch); }
  std::size_t patch_dim() const { return channels * patch * patch; }
  // Throws ParameterError describing the first violated constraint.
  void validate() const;
};

// Text and image conditions for a batch. text: [batch*Lt x text_width];
// image: [batch*Li x image_width], or undefined for the text-only pipeline.
struct ConditionPair {
  Tensor text;
  Tensor image;
  std::size_t batch = 0;

  bool has_image() const { return image.defined(); }
};

// Receives the per-layer attention outputs during a forward pass. Hooks are
// read-only observers and must not modify the tensors they are given.
class AttentionProbe {
 public:
  virtual ~AttentionProbe() = default;
  // Called by the sampler before each denoiser evaluation.
  virtual void begin_step(std::size_t step) { (void)step; }
  // z, z_text, z_image: [groups*tokens x width]. z_image is undefined when
  // the forward pass carries no image condition.
  virtual void on_layer(std::size_t layer, const Tensor& z, const Tensor& z_text, const Tensor& z_image,
                        std::size_t groups) = 0;
};

struct DualAttentionOutput {
  Tensor z;        // z_text + effective_scale * z_image
  Tensor z_text;   // Softmax(Q K^T / sqrt(d)) V
  Tensor z_image;  // Softmax(Q K_i^T / sqrt(d)) V_i, undefined if no image condition
};

// Cross-attention with a text branch and a decoupled image branch that share
// the query projection. The image branch output is multiplied by
// effective_scale = image_scale * multiplier before the sum, and the output
// projection is applied to the sum.
class DualCrossAttention {
 public:
  DualCrossAttention() = default;
  DualCrossAttention(const DenoiserConfig& cfg, std::size_t layer_index, Rng& rng);

  DualAttentionOutput attend(const Tensor& z_in, const ConditionPair& cond) const;
  Tensor project(const Tensor& z) const { return w_out.forward(z); }

  void collect(const std::string& prefix, ParamList& out) const;

  Linear w_q, w_k, w_v, w_out;
  Linear w_ik, w_iv;
  std::size_t heads = 1;
  std::size_t layer = 0;
  real image_scale = 1;
  real multiplier = 1;

  real effective_scale() const { return image_scale * multiplier; }
};

struct DenoiserBlock {
  Linear time_proj;
  LayerNorm norm_self;
  Linear self_q, self_k, self_v, self_out;
  LayerNorm norm_cross;
  DualCrossAttention cross;
  LayerNorm norm_mlp;
  Linear mlp_in, mlp_out;
};

// Patch-token transformer predicting the noise eps from (x_t, t, c_t, c_i).
class Denoiser {
 public:
  Denoiser() = default;
  Denoiser(const DenoiserConfig& cfg, std::uint64_t seed);

  // x_t: [batch x C x H x W]; timesteps has one entry per sample.
  Tensor forward(const Tensor& x_t, std::span<const int> timesteps, const ConditionPair& cond,
                 AttentionProbe* probe = nullptr) const;

  const DenoiserConfig& config() const { return cfg_; }
  // Cumulative alpha per timestep (index 0..T), used by the preconditioning.
  // Defaults to the 1000-step linear schedule.
  void set_alpha_bar(std::vector<double> alpha_bar) { alpha_bar_ = std::move(alpha_bar); }
  const std::vector<double>& alpha_bar() const { return alpha_bar_; }
  // 1 / c_out(t)^2, so that eps error times it is the squared error of the
  // network output; 1 when sigma_data is 0.
  double output_weight(int t) const;
  ParamList parameters() const;

  std::size_t layer_count() const { return blocks_.size(); }
  DualCrossAttention& cross_layer(std::size_t d) { return blocks_.at(d).cross; }
  const DualCrossAttention& cross_layer(std::size_t d) const { return blocks_.at(d).cross; }
  // Attention projection of block d by name: self_q, self_k, self_v,
  // self_out, cross.w_q, cross.w_k, cross.w_v, cross.w_out, cross.w_ik,
  // cross.w_iv. Throws ParameterError for other names.
  Linear& projection(std::size_t d, const std::string& name);

 private:
  DenoiserConfig cfg_;
  std::vector<double> alpha_bar_;
  Linear patch_embed_;
  Tensor pos_embed_;
  Linear time_in_, time_hidden_;
  std::vector<DenoiserBlock> blocks_;
  LayerNorm final_norm_;
  Linear final_out_;
};

Denoiser build_denoiser(const DenoiserConfig& cfg, std::uint64_t seed);

// Installs effective per-layer image scales scales[d] * multiplier.
void set_layer_scales(Denoiser& model, std::span<const double> scales, double multiplier);

// Sinusoidal embedding of integer timesteps: [n x width], sin half then cos half.
Tensor timestep_embedding(std::span<const int> timesteps, std::size_t width);

// Index maps between [B x C x H x W] images and [B*tokens x C*p*p] patches.
std::vector<std::size_t> patchify_index(std::size_t batch, std::size_t channels, std::size_t size,
                                        std::size_t patch);
std::vector<std::size_t> unpatchify_index(std::size_t batch, std::size_t channels, std::size_t size,
                                          std::size_t patch);

STYLELAB_END_PRECISION
}  // namespace stylelab
