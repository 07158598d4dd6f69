#include "stylelab/denoiser.hpp"

#include <algorithm>
#include <cmath>

#include "stylelab/diffusion.hpp"

namespace stylelab {
STYLELAB_BEGIN_PRECISION

namespace {

double fan_in_std(std::size_t in) { return 1.0 / std::sqrt(static_cast<double>(in)); }

void require_param(bool ok, const std::string& what) {
  if (!ok) throw ParameterError("DenoiserConfig: " + what);
}

}  // namespace

void DenoiserConfig::validate() const {
  require_param(image_size > 0 && channels > 0 && patch > 0, "sizes must be positive");
  require_param(image_size % patch == 0, "image size " + std::to_string(image_size) +
                                             " not divisible by patch size " + std::to_string(patch));
  require_param(width > 0 && heads > 0, "width and heads must be positive");
  require_param(width % heads == 0, "width " + std::to_string(width) + " not divisible by " +
                                        std::to_string(heads) + " heads");
  require_param(layers > 0, "at least one layer is required");
  require_param(text_width > 0 && image_width > 0, "condition widths must be positive");
  require_param(time_width >= 2 && time_width % 2 == 0, "time width must be even and >= 2");
  require_param(mlp_ratio > 0, "mlp ratio must be positive");
  require_param(sigma_data >= 0 && std::isfinite(sigma_data), "sigma_data must be finite and >= 0");
}

// ---- DualCrossAttention ----------------------------------------------------------

DualCrossAttention::DualCrossAttention(const DenoiserConfig& cfg, std::size_t layer_index, Rng& rng)
    : w_q(cfg.width, cfg.width, false, rng, fan_in_std(cfg.width)),
      w_k(cfg.text_width, cfg.width, false, rng, fan_in_std(cfg.text_width)),
      w_v(cfg.text_width, cfg.width, false, rng, fan_in_std(cfg.text_width)),
      w_out(cfg.width, cfg.width, false, rng, fan_in_std(cfg.width) / std::sqrt(2.0 * cfg.layers)),
      heads(cfg.heads),
      layer(layer_index) {
  if (cfg.image_width == cfg.text_width) {
    // Image branch starts as a copy of the text projections.
    w_ik = Linear();
    w_ik.weight = w_k.weight.clone();
    w_iv = Linear();
    w_iv.weight = w_v.weight.clone();
  } else {
    w_ik = Linear(cfg.image_width, cfg.width, false, rng, fan_in_std(cfg.image_width));
    w_iv = Linear(cfg.image_width, cfg.width, false, rng, fan_in_std(cfg.image_width));
  }
}

DualAttentionOutput DualCrossAttention::attend(const Tensor& z_in, const ConditionPair& cond) const {
  const std::size_t groups = cond.batch;
  if (z_in.rank() != 2 || z_in.dim(1) != w_q.in_features()) {
    throw DimensionError("cross-attention input " + shape_string(z_in.shape()) + " does not match width " +
                         std::to_string(w_q.in_features()));
  }
  if (!cond.text.defined() || cond.text.rank() != 2 || cond.text.dim(1) != w_k.in_features()) {
    throw DimensionError("text condition " + shape_string(cond.text.shape()) + " does not match text width " +
                         std::to_string(w_k.in_features()));
  }
  const Tensor q = w_q.forward(z_in);
  DualAttentionOutput out;
  out.z_text = attention(q, w_k.forward(cond.text), w_v.forward(cond.text), groups, heads);
  if (!cond.has_image()) {
    out.z = out.z_text;
    return out;
  }
  if (cond.image.rank() != 2 || cond.image.dim(1) != w_ik.in_features()) {
    throw DimensionError("image condition " + shape_string(cond.image.shape()) +
                         " does not match image width " + std::to_string(w_ik.in_features()));
  }
  out.z_image = attention(q, w_ik.forward(cond.image), w_iv.forward(cond.image), groups, heads);
  const real s = std::max(real(0), effective_scale());
  out.z = s == real(0) ? out.z_text : add(out.z_text, scale(out.z_image, s));
  return out;
}

void DualCrossAttention::collect(const std::string& prefix, ParamList& out) const {
  w_q.collect(prefix + ".w_q", out);
  w_k.collect(prefix + ".w_k", out);
  w_v.collect(prefix + ".w_v", out);
  w_out.collect(prefix + ".w_out", out);
  w_ik.collect(prefix + ".w_ik", out);
  w_iv.collect(prefix + ".w_iv", out);
}

// ---- Denoiser ---------------------------------------------------------------------

Denoiser::Denoiser(const DenoiserConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  alpha_bar_ = default_schedule().alpha_bar;
  Rng rng(seed);
  const auto w = cfg.width;
  const double resid_std = fan_in_std(w) / std::sqrt(2.0 * cfg.layers);
  patch_embed_ = Linear(cfg.patch_dim(), w, true, rng, fan_in_std(cfg.patch_dim()));
  pos_embed_ = random_tensor({cfg.tokens(), w}, rng, 0.02);
  time_in_ = Linear(cfg.time_width, w, true, rng, fan_in_std(cfg.time_width));
  time_hidden_ = Linear(w, w, true, rng, fan_in_std(w));
  blocks_.reserve(cfg.layers);
  for (std::size_t d = 0; d < cfg.layers; ++d) {
    DenoiserBlock b;
    b.time_proj = Linear(w, w, true, rng, fan_in_std(w));
    b.norm_self = LayerNorm(w);
    b.self_q = Linear(w, w, false, rng, fan_in_std(w));
    b.self_k = Linear(w, w, false, rng, fan_in_std(w));
    b.self_v = Linear(w, w, false, rng, fan_in_std(w));
    b.self_out = Linear(w, w, false, rng, resid_std);
    b.norm_cross = LayerNorm(w);
    b.cross = DualCrossAttention(cfg, d, rng);
    b.norm_mlp = LayerNorm(w);
    b.mlp_in = Linear(w, w * cfg.mlp_ratio, true, rng, fan_in_std(w));
    b.mlp_out = Linear(w * cfg.mlp_ratio, w, true, rng, fan_in_std(w * cfg.mlp_ratio) / std::sqrt(2.0 * cfg.layers));
    blocks_.push_back(std::move(b));
  }
  final_norm_ = LayerNorm(w);
  final_out_ = Linear(w, cfg.patch_dim(), true, rng, 0.0);
}

double Denoiser::output_weight(int t) const {
  if (cfg_.sigma_data <= 0) return 1.0;
  if (t < 0 || static_cast<std::size_t>(t) >= alpha_bar_.size()) {
    throw ParameterError("timestep " + std::to_string(t) + " outside the schedule");
  }
  const double ab = alpha_bar_[static_cast<std::size_t>(t)], s2 = cfg_.sigma_data * cfg_.sigma_data;
  return (ab * s2 + 1.0 - ab) / (s2 * ab);
}

Tensor Denoiser::forward(const Tensor& x_t, std::span<const int> timesteps, const ConditionPair& cond,
                         AttentionProbe* probe) const {
  const auto& c = cfg_;
  if (x_t.rank() != 4 || x_t.dim(1) != c.channels || x_t.dim(2) != c.image_size || x_t.dim(3) != c.image_size) {
    throw DimensionError("denoiser input " + shape_string(x_t.shape()) + " does not match [B x " +
                         std::to_string(c.channels) + " x " + std::to_string(c.image_size) + " x " +
                         std::to_string(c.image_size) + "]");
  }
  const std::size_t batch = x_t.dim(0);
  if (timesteps.size() != batch || cond.batch != batch) {
    throw DimensionError("denoiser: batch " + std::to_string(batch) + " but " +
                         std::to_string(timesteps.size()) + " timesteps and condition batch " +
                         std::to_string(cond.batch));
  }
  const std::size_t n = c.tokens();
  // eps = k x_t + c_out F(c_in x_t): the linear part is the optimal
  // estimate for data of std sigma_data, F only learns the remainder.
  Tensor x_in = x_t, k_skip, c_out;
  if (c.sigma_data > 0) {
    const std::size_t per = x_t.numel() / batch;
    std::vector<real> cin(x_t.numel()), ks(x_t.numel()), co(x_t.numel());
    const double s2 = c.sigma_data * c.sigma_data;
    for (std::size_t b = 0; b < batch; ++b) {
      const int t = timesteps[b];
      if (t < 0 || static_cast<std::size_t>(t) >= alpha_bar_.size()) {
        throw ParameterError("timestep " + std::to_string(t) + " outside the schedule");
      }
      const double ab = alpha_bar_[static_cast<std::size_t>(t)];
      const double v = ab * s2 + (1.0 - ab);
      std::fill_n(cin.begin() + static_cast<std::ptrdiff_t>(b * per), per, real(1.0 / std::sqrt(v)));
      std::fill_n(ks.begin() + static_cast<std::ptrdiff_t>(b * per), per, real(std::sqrt(1.0 - ab) / v));
      std::fill_n(co.begin() + static_cast<std::ptrdiff_t>(b * per), per,
                  real(c.sigma_data * std::sqrt(ab) / std::sqrt(v)));
    }
    x_in = mul(x_t, Tensor(x_t.shape(), std::move(cin)));
    k_skip = Tensor(x_t.shape(), std::move(ks));
    c_out = Tensor(x_t.shape(), std::move(co));
  }
  const auto pidx = patchify_index(batch, c.channels, c.image_size, c.patch);
  Tensor h = patch_embed_.forward(gather(x_in, pidx, {batch * n, c.patch_dim()}));
  const auto tiles = tile_index(batch, n);
  h = add(h, gather_rows(pos_embed_, tiles));

  const Tensor temb = silu(time_hidden_.forward(silu(time_in_.forward(timestep_embedding(timesteps, c.time_width)))));
  const auto per_token = repeat_index(batch, n);

  for (std::size_t d = 0; d < blocks_.size(); ++d) {
    const auto& b = blocks_[d];
    h = add(h, gather_rows(b.time_proj.forward(temb), per_token));

    const Tensor a = b.norm_self.forward(h);
    const Tensor sa = attention(b.self_q.forward(a), b.self_k.forward(a), b.self_v.forward(a), batch, c.heads);
    h = add(h, b.self_out.forward(sa));

    const auto cross = b.cross.attend(b.norm_cross.forward(h), cond);
    if (probe) probe->on_layer(d, cross.z, cross.z_text, cross.z_image, batch);
    h = add(h, b.cross.project(cross.z));

    const Tensor m = b.norm_mlp.forward(h);
    h = add(h, b.mlp_out.forward(silu(b.mlp_in.forward(m))));
  }
  const Tensor patches = final_out_.forward(final_norm_.forward(h));
  const auto uidx = unpatchify_index(batch, c.channels, c.image_size, c.patch);
  const Tensor f = gather(patches, uidx, {batch, c.channels, c.image_size, c.image_size});
  if (c.sigma_data <= 0) return f;
  return add(mul(x_t, k_skip), mul(f, c_out));
}

ParamList Denoiser::parameters() const {
  ParamList out;
  patch_embed_.collect("patch_embed", out);
  out.push_back({"pos_embed", pos_embed_});
  time_in_.collect("time_in", out);
  time_hidden_.collect("time_hidden", out);
  for (std::size_t d = 0; d < blocks_.size(); ++d) {
    const auto& b = blocks_[d];
    const std::string p = "block" + std::to_string(d);
    b.time_proj.collect(p + ".time_proj", out);
    b.norm_self.collect(p + ".norm_self", out);
    b.self_q.collect(p + ".self_q", out);
    b.self_k.collect(p + ".self_k", out);
    b.self_v.collect(p + ".self_v", out);
    b.self_out.collect(p + ".self_out", out);
    b.norm_cross.collect(p + ".norm_cross", out);
    b.cross.collect(p + ".cross", out);
    b.norm_mlp.collect(p + ".norm_mlp", out);
    b.mlp_in.collect(p + ".mlp_in", out);
    b.mlp_out.collect(p + ".mlp_out", out);
  }
  final_norm_.collect("final_norm", out);
  final_out_.collect("final_out", out);
  return out;
}

Linear& Denoiser::projection(std::size_t d, const std::string& name) {
  auto& b = blocks_.at(d);
  if (name == "self_q") return b.self_q;
  if (name == "self_k") return b.self_k;
  if (name == "self_v") return b.self_v;
  if (name == "self_out") return b.self_out;
  if (name == "cross.w_q") return b.cross.w_q;
  if (name == "cross.w_k") return b.cross.w_k;
  if (name == "cross.w_v") return b.cross.w_v;
  if (name == "cross.w_out") return b.cross.w_out;
  if (name == "cross.w_ik") return b.cross.w_ik;
  if (name == "cross.w_iv") return b.cross.w_iv;
  throw ParameterError("unknown attention projection '" + name + "'");
}

Denoiser build_denoiser(const DenoiserConfig& cfg, std::uint64_t seed) { return Denoiser(cfg, seed); }

void set_layer_scales(Denoiser& model, std::span<const double> scales, double multiplier) {
  if (scales.size() != model.layer_count()) {
    throw ParameterError("set_layer_scales: got " + std::to_string(scales.size()) + " scales for " +
                         std::to_string(model.layer_count()) + " cross-attention layers");
  }
  if (!(multiplier >= 0.0)) throw ParameterError("set_layer_scales: multiplier must be >= 0");
  for (std::size_t d = 0; d < scales.size(); ++d) {
    auto& layer = model.cross_layer(d);
    layer.image_scale = static_cast<real>(scales[d]);
    layer.multiplier = static_cast<real>(multiplier);
  }
}

Tensor timestep_embedding(std::span<const int> timesteps, std::size_t width) {
  const std::size_t half = width / 2;
  std::vector<real> out(timesteps.size() * width);
  for (std::size_t i = 0; i < timesteps.size(); ++i) {
    for (std::size_t j = 0; j < half; ++j) {
      const double freq = std::exp(-std::log(10000.0) * double(j) / double(half));
      const double arg = double(timesteps[i]) * freq;
      out[i * width + j] = static_cast<real>(std::sin(arg));
      out[i * width + half + j] = static_cast<real>(std::cos(arg));
    }
  }
  return Tensor({timesteps.size(), width}, std::move(out));
}

std::vector<std::size_t> patchify_index(std::size_t batch, std::size_t channels, std::size_t size,
                                        std::size_t patch) {
  const std::size_t grid = size / patch, n = grid * grid, pd = channels * patch * patch;
  std::vector<std::size_t> idx(batch * n * pd);
  std::size_t o = 0;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t gy = 0; gy < grid; ++gy)
      for (std::size_t gx = 0; gx < grid; ++gx)
        for (std::size_t c = 0; c < channels; ++c)
          for (std::size_t py = 0; py < patch; ++py)
            for (std::size_t px = 0; px < patch; ++px)
              idx[o++] = ((b * channels + c) * size + gy * patch + py) * size + gx * patch + px;
  return idx;
}

std::vector<std::size_t> unpatchify_index(std::size_t batch, std::size_t channels, std::size_t size,
                                          std::size_t patch) {
  const std::size_t grid = size / patch, n = grid * grid, pd = channels * patch * patch;
  std::vector<std::size_t> idx(batch * channels * size * size);
  std::size_t o = 0;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x)
          idx[o++] = (b * n + (y / patch) * grid + x / patch) * pd + c * patch * patch + (y % patch) * patch +
                     x % patch;
  return idx;
}

STYLELAB_END_PRECISION
}  // namespace stylelab
