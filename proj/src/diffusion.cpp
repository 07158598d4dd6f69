#include "stylelab/diffusion.hpp"

#include <algorithm>
#include <cmath>

namespace stylelab {
STYLELAB_BEGIN_PRECISION

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ParameterError("make_schedule: T must be >= 1");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    throw ParameterError("make_schedule: need 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.steps = steps;
  s.betas.assign(static_cast<std::size_t>(steps) + 1, 0.0);
  s.alpha_bar.assign(static_cast<std::size_t>(steps) + 1, 1.0);
  for (int t = 1; t <= steps; ++t) {
    const double frac = steps == 1 ? 0.0 : double(t - 1) / double(steps - 1);
    const double beta = beta_start + (beta_end - beta_start) * frac;
    s.betas[t] = beta;
    s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - beta);
  }
  return s;
}

NoiseSchedule default_schedule() { return make_schedule(1000, 1e-4, 0.02); }

namespace {

void check_t(int t, const NoiseSchedule& sched) {
  if (t < 1 || t > sched.steps) {
    throw ParameterError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(sched.steps) + "]");
  }
}

}  // namespace

Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
  check_t(t, sched);
  if (x0.shape() != eps.shape()) {
    throw DimensionError("forward_diffuse: x0 " + shape_string(x0.shape()) + " vs eps " + shape_string(eps.shape()));
  }
  const double ab = sched.at(t);
  const real a = static_cast<real>(std::sqrt(ab)), b = static_cast<real>(std::sqrt(1.0 - ab));
  std::vector<real> out(x0.numel());
  const auto xd = x0.data(), ed = eps.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * xd[i] + b * ed[i];
  return Tensor(x0.shape(), std::move(out));
}

Tensor forward_diffuse(const Tensor& x0, std::span<const int> t, const Tensor& eps, const NoiseSchedule& sched) {
  if (x0.shape() != eps.shape()) {
    throw DimensionError("forward_diffuse: x0 " + shape_string(x0.shape()) + " vs eps " + shape_string(eps.shape()));
  }
  if (x0.rank() == 0 || x0.dim(0) != t.size()) {
    throw DimensionError("forward_diffuse: " + std::to_string(t.size()) + " timesteps for batch " +
                         shape_string(x0.shape()));
  }
  const std::size_t per = x0.numel() / t.size();
  std::vector<real> out(x0.numel());
  const auto xd = x0.data(), ed = eps.data();
  for (std::size_t b = 0; b < t.size(); ++b) {
    check_t(t[b], sched);
    const double ab = sched.at(t[b]);
    const real a = static_cast<real>(std::sqrt(ab)), s = static_cast<real>(std::sqrt(1.0 - ab));
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) out[i] = a * xd[i] + s * ed[i];
  }
  return Tensor(x0.shape(), std::move(out));
}

DiffusionBatch make_batch(const Tensor& x0, const NoiseSchedule& sched, Rng& rng) {
  DiffusionBatch batch;
  batch.x0 = x0;
  const std::size_t n = x0.dim(0);
  batch.t.resize(n);
  for (auto& t : batch.t) t = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(sched.steps)));
  batch.eps = Tensor(x0.shape(), rng.normal_vector(x0.numel()));
  batch.xt = forward_diffuse(x0, batch.t, batch.eps, sched);
  return batch;
}

DiffusionBatch make_batch(const Tensor& x0, std::vector<int> t, const NoiseSchedule& sched, Rng& rng) {
  if (t.size() != x0.dim(0)) throw DimensionError("make_batch: one timestep per sample required");
  DiffusionBatch batch;
  batch.x0 = x0;
  batch.t = std::move(t);
  batch.eps = Tensor(x0.shape(), rng.normal_vector(x0.numel()));
  batch.xt = forward_diffuse(x0, batch.t, batch.eps, sched);
  return batch;
}

Tensor denoise_loss(const Denoiser& model, const DiffusionBatch& batch, const ConditionPair& cond,
                    LossWeighting weighting) {
  const Tensor pred = model.forward(batch.xt, batch.t, cond);
  if (weighting == LossWeighting::eps) return mse_loss(pred, batch.eps);
  const std::size_t n = batch.t.size(), per = pred.numel() / n;
  std::vector<real> w(pred.numel());
  for (std::size_t b = 0; b < n; ++b)
    std::fill_n(w.begin() + static_cast<std::ptrdiff_t>(b * per), per, real(model.output_weight(batch.t[b])));
  const Tensor d = sub(pred, batch.eps);
  return mean(mul(mul(d, d), Tensor(pred.shape(), std::move(w))));
}

std::vector<int> sampler_timesteps(const NoiseSchedule& sched, int steps) {
  if (steps < 1 || steps > sched.steps) {
    throw ParameterError("sampler steps " + std::to_string(steps) + " outside [1, " + std::to_string(sched.steps) +
                         "]");
  }
  std::vector<int> ts(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    ts[i] = static_cast<int>(std::llround(double(sched.steps) * double(steps - i) / double(steps)));
  }
  return ts;
}

Tensor sample_with(const EpsPredictor& predictor, const Shape& shape, const NoiseSchedule& sched,
                   std::span<const std::uint64_t> seeds, const SampleOptions& options) {
  const auto ts = sampler_timesteps(sched, options.steps);
  if (shape.empty() || shape[0] != seeds.size()) {
    throw DimensionError("sample: " + std::to_string(seeds.size()) + " seeds for output " + shape_string(shape));
  }
  const std::size_t batch = seeds.size(), per = shape_numel(shape) / batch;
  std::vector<Rng> rngs;
  rngs.reserve(batch);
  std::vector<real> x(shape_numel(shape));
  for (std::size_t b = 0; b < batch; ++b) {
    rngs.emplace_back(seeds[b]);
    for (std::size_t i = 0; i < per; ++i) x[b * per + i] = static_cast<real>(rngs[b].normal());
  }

  std::vector<int> tvec(batch);
  for (std::size_t step = 0; step < ts.size(); ++step) {
    const int t = ts[step];
    const int prev = step + 1 < ts.size() ? ts[step + 1] : 0;
    const double ab = sched.at(t), ab_prev = sched.at(prev);
    std::fill(tvec.begin(), tvec.end(), t);
    if (options.on_step) options.on_step(step);
    const Tensor eps = predictor(Tensor(shape, x), tvec);
    const auto ed = eps.data();
    const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    const double alpha_step = ab / ab_prev, beta_step = 1.0 - alpha_step;
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
        const double xt = x[i];
        const double x0 = std::clamp((xt - sb * double(ed[i])) / sa, -1.0, 1.0);
        double next;
        if (options.mode == SamplerMode::ddim) {
          const double e = (xt - sa * x0) / sb;
          next = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * e;
        } else {
          const double c0 = std::sqrt(ab_prev) * beta_step / (1.0 - ab);
          const double ct = std::sqrt(alpha_step) * (1.0 - ab_prev) / (1.0 - ab);
          next = c0 * x0 + ct * xt;
          if (prev > 0) {
            const double var = beta_step * (1.0 - ab_prev) / (1.0 - ab);
            next += std::sqrt(var) * rngs[b].normal();
          }
        }
        x[i] = static_cast<real>(next);
      }
    }
  }
  for (auto& v : x) v = std::clamp(v, real(-1), real(1));
  return Tensor(shape, std::move(x));
}

Tensor sample(const Denoiser& model, const ConditionPair& cond, const NoiseSchedule& sched,
              std::span<const std::uint64_t> seeds, int steps, SamplerMode mode, AttentionProbe* probe) {
  if (cond.batch != seeds.size()) {
    throw DimensionError("sample: condition batch " + std::to_string(cond.batch) + " vs " +
                         std::to_string(seeds.size()) + " seeds");
  }
  const auto& c = model.config();
  SampleOptions options;
  options.steps = steps;
  options.mode = mode;
  if (probe) options.on_step = [probe](std::size_t s) { probe->begin_step(s); };
  const EpsPredictor predictor = [&](const Tensor& xt, std::span<const int> t) {
    return model.forward(xt, t, cond, probe);
  };
  return sample_with(predictor, {seeds.size(), c.channels, c.image_size, c.image_size}, sched, seeds, options);
}

STYLELAB_END_PRECISION
}  // namespace stylelab
