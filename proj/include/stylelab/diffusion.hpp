#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "stylelab/denoiser.hpp"
#include "stylelab/rng.hpp"

namespace stylelab {
STYLELAB_BEGIN_PRECISION

// Cumulative noise schedule. alpha_bar[0] = 1 (clean), alpha_bar[t] is the
// product of (1 - beta_s) for s = 1..t. Stored in double independent of the
// build precision.
struct NoiseSchedule {
  int steps = 0;                  // T
  std::vector<double> betas;      // length T+1, betas[0] = 0
  std::vector<double> alpha_bar;  // length T+1

  double at(int t) const { return alpha_bar.at(static_cast<std::size_t>(t)); }
};

// Linear beta ramp from beta_start (t=1) to beta_end (t=T).
NoiseSchedule make_schedule(int steps, double beta_start, double beta_end);
// Linear 1e-4 -> 0.02 over 1000 steps.
NoiseSchedule default_schedule();

// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps for a single t in [1, T].
Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched);
// Per-sample timesteps over the leading (batch) dimension.
Tensor forward_diffuse(const Tensor& x0, std::span<const int> t, const Tensor& eps, const NoiseSchedule& sched);

struct DiffusionBatch {
  Tensor x0;   // [B x C x H x W]
  std::vector<int> t;
  Tensor eps;  // standard normal draws
  Tensor xt;
};

// Draws t uniformly from [1, T] and eps ~ N(0, I) for each sample.
DiffusionBatch make_batch(const Tensor& x0, const NoiseSchedule& sched, Rng& rng);
// Same with caller-chosen timesteps; only eps is drawn from rng.
DiffusionBatch make_batch(const Tensor& x0, std::vector<int> t, const NoiseSchedule& sched, Rng& rng);

enum class LossWeighting {
  eps,     // plain mean squared eps error
  output,  // per-sample weight Denoiser::output_weight(t): uniform in network-output units
};

// Mean squared error between eps and the model's prediction.
Tensor denoise_loss(const Denoiser& model, const DiffusionBatch& batch, const ConditionPair& cond,
                    LossWeighting weighting = LossWeighting::eps);

enum class SamplerMode { ddim, ddpm };

// Predicts eps for a batch x_t at per-sample timesteps.
using EpsPredictor = std::function<Tensor(const Tensor& x_t, std::span<const int> t)>;

struct SampleOptions {
  int steps = 50;
  SamplerMode mode = SamplerMode::ddim;
  // Invoked before each model evaluation with the step index (0-based).
  std::function<void(std::size_t)> on_step;
};

// Reverse process from per-sample N(0, I) noise seeded by seeds[b]. Returns
// the final x_0 estimate clamped to [-1, 1]. Throws ParameterError when
// steps is outside [1, T].
Tensor sample_with(const EpsPredictor& predictor, const Shape& shape, const NoiseSchedule& sched,
                   std::span<const std::uint64_t> seeds, const SampleOptions& options);

// Samples from the denoiser; cond.batch must equal seeds.size().
Tensor sample(const Denoiser& model, const ConditionPair& cond, const NoiseSchedule& sched,
              std::span<const std::uint64_t> seeds, int steps, SamplerMode mode = SamplerMode::ddim,
              AttentionProbe* probe = nullptr);

// Timesteps visited by a `steps`-step sampler, descending from T.
std::vector<int> sampler_timesteps(const NoiseSchedule& sched, int steps);

STYLELAB_END_PRECISION
}  // namespace stylelab
