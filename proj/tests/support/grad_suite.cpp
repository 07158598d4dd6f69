// Built with STYLELAB_DOUBLE.
#include "grad_suite.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "stylelab/diffusion.hpp"
#include "stylelab/lora.hpp"

namespace gradsuite {

using namespace stylelab;
static_assert(sizeof(real) == 8, "gradient suite needs the 64-bit library");

namespace {

using LossFn = std::function<Tensor()>;

Tensor leaf(Shape shape, Rng& rng, double std = 1.0) {
  Tensor t = random_tensor(std::move(shape), rng, std);
  t.set_requires_grad(true);
  return t;
}

// sum(out * R) with a fixed random R so every output entry matters.
Tensor project_sum(const Tensor& out, Rng& rng) {
  Tensor r = random_tensor(out.shape(), rng, 1.0);
  return sum(mul(out, r));
}

double loss_value(const LossFn& f) { return f().item(); }

// Compares the tape gradient of every entry of every leaf with central
// differences.
void compare(std::vector<Tensor> leaves, const LossFn& f, CaseResult& r) {
  for (auto& l : leaves) l.zero_grad();
  {
    ComputeGraph g;
    auto scope = g.activate();
    const Tensor loss = f();
    g.backward(loss);
  }
  for (auto& l : leaves) {
    const std::vector<double> analytic = l.has_grad() ? std::vector<double>(l.grad().begin(), l.grad().end())
                                                      : std::vector<double>(l.numel(), 0.0);
    auto x = l.mutable_data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double orig = x[i];
      x[i] = orig + kStep;
      const double lp = loss_value(f);
      x[i] = orig - kStep;
      const double lm = loss_value(f);
      x[i] = orig;
      const double numeric = (lp - lm) / (2 * kStep);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), kRelFloor});
      r.max_rel_error = std::max(r.max_rel_error, std::abs(analytic[i] - numeric) / denom);
      if (std::abs(numeric) > kRelFloor) ++r.nonzero;
      ++r.checked;
    }
  }
}

CaseResult finish(CaseResult r) {
  // a case made only of zero gradients proves nothing; partial zeros (rows a
  // gather never picks, single-key attention groups) are still compared
  r.pass = r.checked > 0 && r.nonzero > 0 && r.max_rel_error <= r.tolerance;
  return r;
}

std::size_t dim(Rng& rng, std::size_t lo = 1, std::size_t hi = 5) { return lo + rng.index(hi - lo + 1); }

using CaseFn = std::function<void(Rng&, CaseResult&)>;

struct OpSpec {
  const char* name;
  int count;
  double tol;
  CaseFn run;
};

std::vector<OpSpec> specs() {
  std::vector<OpSpec> s;
  s.push_back({"matmul", 12, 1e-5, [](Rng& rng, CaseResult& r) {
                 const auto m = dim(rng), k = dim(rng), n = dim(rng);
                 Tensor a = leaf({m, k}, rng), b = leaf({k, n}, rng);
                 Rng pr(rng.next_u64());
                 compare({a, b}, [&] { Rng p = pr; return project_sum(matmul(a, b), p); }, r);
               }});
  s.push_back({"transpose", 6, 1e-4, [](Rng& rng, CaseResult& r) {
                 Tensor a = leaf({dim(rng), dim(rng)}, rng);
                 Rng pr(rng.next_u64());
                 compare({a}, [&] { Rng p = pr; return project_sum(transpose(a), p); }, r);
               }});
  for (int op = 0; op < 3; ++op) {
    static const char* names[] = {"add", "sub", "mul"};
    s.push_back({names[op], 6, 1e-4, [op](Rng& rng, CaseResult& r) {
                   const Shape sh{dim(rng), dim(rng)};
                   Tensor a = leaf(sh, rng), b = leaf(sh, rng);
                   Rng pr(rng.next_u64());
                   compare({a, b}, [&] {
                     Rng p = pr;
                     const Tensor y = op == 0 ? add(a, b) : op == 1 ? sub(a, b) : mul(a, b);
                     return project_sum(y, p);
                   }, r);
                 }});
  }
  s.push_back({"mul_shared_input", 4, 1e-4, [](Rng& rng, CaseResult& r) {
                 Tensor a = leaf({dim(rng), dim(rng)}, rng);
                 Rng pr(rng.next_u64());
                 compare({a}, [&] { Rng p = pr; return project_sum(mul(a, a), p); }, r);
               }});
  s.push_back({"scale", 6, 1e-4, [](Rng& rng, CaseResult& r) {
                 Tensor a = leaf({dim(rng), dim(rng)}, rng);
                 const real f = real(rng.uniform(-2, 2));
                 Rng pr(rng.next_u64());
                 compare({a}, [&] { Rng p = pr; return project_sum(scale(a, f), p); }, r);
               }});
  s.push_back({"add_bias", 6, 1e-4, [](Rng& rng, CaseResult& r) {
                 const auto m = dim(rng), n = dim(rng);
                 Tensor a = leaf({m, n}, rng), b = leaf({n}, rng);
                 Rng pr(rng.next_u64());
                 compare({a, b}, [&] { Rng p = pr; return project_sum(add_bias(a, b), p); }, r);
               }});
  s.push_back({"gather_rows", 6, 1e-4, [](Rng& rng, CaseResult& r) {
                 const auto m = dim(rng), n = dim(rng), out = dim(rng, 1, 7);
                 Tensor a = leaf({m, n}, rng);
                 std::vector<std::size_t> idx(out);
                 for (auto& i : idx) i = rng.index(m);
                 Rng pr(rng.next_u64());
                 compare({a}, [&] { Rng p = pr; return project_sum(gather_rows(a, idx), p); }, r);
               }});
  s.push_back({"gather", 6, 1e-4, [](Rng& rng, CaseResult& r) {
                 const auto m = dim(rng), n = dim(rng), o1 = dim(rng), o2 = dim(rng);
                 Tensor a = leaf({m, n}, rng);
                 std::vector<std::size_t> idx(o1 * o2);
                 for (auto& i : idx) i = rng.index(m * n);
                 Rng pr(rng.next_u64());
                 compare({a}, [&] { Rng p = pr; return project_sum(gather(a, idx, {o1, o2}), p); }, r);
               }});
  s.push_back({"reshape", 4, 1e-4, [](Rng& rng, CaseResult& r) {
                 const auto m = dim(rng), n = dim(rng);
                 Tensor a = leaf({m, n}, rng);
                 Rng pr(rng.next_u64());
                 compare({a}, [&] { Rng p = pr; return project_sum(reshape(a, {n, m}), p); }, r);
               }});
  s.push_back({"silu", 6, 1e-4, [](Rng& rng, CaseResult& r) {
                 Tensor a = leaf({dim(rng), dim(rng)}, rng, 2.0);
                 Rng pr(rng.next_u64());
                 compare({a}, [&] { Rng p = pr; return project_sum(silu(a), p); }, r);
               }});
  s.push_back({"tanh", 6, 1e-4, [](Rng& rng, CaseResult& r) {
                 Tensor a = leaf({dim(rng), dim(rng)}, rng, 1.5);
                 Rng pr(rng.next_u64());
                 compare({a}, [&] { Rng p = pr; return project_sum(stylelab::tanh(a), p); }, r);
               }});
  s.push_back({"layer_norm", 8, 1e-4, [](Rng& rng, CaseResult& r) {
                 const auto m = dim(rng), n = dim(rng, 2, 6);
                 Tensor x = leaf({m, n}, rng), g = leaf({n}, rng), b = leaf({n}, rng);
                 Rng pr(rng.next_u64());
                 compare({x, g, b}, [&] { Rng p = pr; return project_sum(layer_norm(x, g, b), p); }, r);
               }});
  s.push_back({"softmax_rows", 8, 1e-4, [](Rng& rng, CaseResult& r) {
                 Tensor x = leaf({dim(rng), dim(rng, 2, 6)}, rng, 2.0);
                 Rng pr(rng.next_u64());
                 compare({x}, [&] { Rng p = pr; return project_sum(softmax_rows(x), p); }, r);
               }});
  s.push_back({"attention", 10, 1e-4, [](Rng& rng, CaseResult& r) {
                 const auto groups = dim(rng, 1, 2), heads = dim(rng, 1, 2), dh = dim(rng, 1, 3);
                 const auto nq = dim(rng, 1, 4), nk = dim(rng, 1, 4);
                 Tensor q = leaf({groups * nq, heads * dh}, rng), k = leaf({groups * nk, heads * dh}, rng),
                        v = leaf({groups * nk, heads * dh}, rng);
                 Rng pr(rng.next_u64());
                 compare({q, k, v}, [&] { Rng p = pr; return project_sum(attention(q, k, v, groups, heads), p); }, r);
               }});
  s.push_back({"sum", 4, 1e-4, [](Rng& rng, CaseResult& r) {
                 Tensor a = leaf({dim(rng), dim(rng)}, rng);
                 compare({a}, [&] { return scale(sum(mul(a, a)), real(0.5)); }, r);
               }});
  s.push_back({"mean", 4, 1e-4, [](Rng& rng, CaseResult& r) {
                 Tensor a = leaf({dim(rng), dim(rng)}, rng);
                 Rng pr(rng.next_u64());
                 compare({a}, [&] { return mean(mul(a, a)); }, r);
               }});
  s.push_back({"mse_loss", 6, 1e-4, [](Rng& rng, CaseResult& r) {
                 const Shape sh{dim(rng), dim(rng)};
                 Tensor a = leaf(sh, rng), b = leaf(sh, rng);
                 compare({a, b}, [&] { return mse_loss(a, b); }, r);
               }});
  s.push_back({"composite", 6, 1e-4, [](Rng& rng, CaseResult& r) {
                 // linear -> layer norm -> silu -> softmax chain sharing one weight twice
                 const auto m = dim(rng), n = dim(rng, 2, 5);
                 Tensor x = leaf({m, n}, rng), w = leaf({n, n}, rng, 0.5), g = leaf({n}, rng), b = leaf({n}, rng);
                 Rng pr(rng.next_u64());
                 compare({x, w, g, b}, [&] {
                   Rng p = pr;
                   const Tensor h = silu(layer_norm(matmul(x, w), g, b));
                   return project_sum(softmax_rows(matmul(h, w)), p);
                 }, r);
               }});
  return s;
}

DenoiserConfig toy_config() {
  DenoiserConfig cfg;
  cfg.image_size = 8;
  cfg.patch = 4;
  cfg.width = 8;
  cfg.heads = 2;
  cfg.layers = 2;
  cfg.text_width = 8;
  cfg.image_width = 8;
  cfg.time_width = 8;
  cfg.mlp_ratio = 2;
  return cfg;
}

struct ToySetup {
  Denoiser model;
  DiffusionBatch batch;
  ConditionPair cond;
};

ToySetup toy_setup(std::uint64_t seed) {
  ToySetup s;
  s.model = Denoiser(toy_config(), seed);
  set_layer_scales(s.model, std::vector<double>{0.7, 1.0}, 1.0);
  Rng rng(mix_seed(seed, 99));
  // the output projection starts at zero; move every weight off its init
  for (auto& p : s.model.parameters())
    for (auto& v : p.tensor.mutable_data()) v += real(0.3 * rng.normal());
  const NoiseSchedule sched = default_schedule();
  const std::size_t B = 2;
  Tensor x0 = random_tensor({B, 3, 8, 8}, rng, 0.5);
  s.batch = make_batch(x0, std::vector<int>{37, 640}, sched, rng);
  s.cond = ConditionPair{random_tensor({B * 3, 8}, rng, 1.0), random_tensor({B * 2, 8}, rng, 1.0), B};
  return s;
}

}  // namespace

std::vector<CaseResult> op_cases(std::uint64_t seed) {
  std::vector<CaseResult> out;
  Rng rng(seed);
  for (const auto& spec : specs()) {
    for (int i = 0; i < spec.count; ++i) {
      CaseResult r;
      r.name = std::string(spec.name) + "#" + std::to_string(i);
      r.tolerance = spec.tol;
      Rng case_rng(rng.next_u64());
      spec.run(case_rng, r);
      out.push_back(finish(r));
    }
  }
  return out;
}

CaseResult denoiser_case(std::uint64_t seed) {
  ToySetup s = toy_setup(seed);
  const auto params = s.model.parameters();
  set_trainable(params, true);
  std::vector<Tensor> leaves = tensors_of(params);
  s.cond.text.set_requires_grad(true);
  s.cond.image.set_requires_grad(true);
  leaves.push_back(s.cond.text);
  leaves.push_back(s.cond.image);
  CaseResult r{"denoiser_loss_2layer", 0, 0, 0, 1e-4, false};
  compare(leaves, [&] { return denoise_loss(s.model, s.batch, s.cond); }, r);
  return finish(r);
}

CaseResult lora_case(std::uint64_t seed) {
  ToySetup s = toy_setup(seed);
  const auto params = s.model.parameters();
  set_trainable(params, false);
  LoraAdapter adapter = init_lora(s.model, 2, mix_seed(seed, 5), 2.0);
  Rng rng(mix_seed(seed, 6));
  for (auto& b : adapter.b)
    for (auto& v : b.mutable_data()) v = real(rng.normal() * 0.3);
  auto leaves = adapter.tensors();
  for (auto& t : leaves) t.set_requires_grad(true);
  CaseResult r{"lora_path_2layer", 0, 0, 0, 1e-4, false};
  compare(leaves, [&] { return denoise_loss(s.model, s.batch, s.cond); }, r);
  // the frozen base must not collect gradient
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (real g : p.tensor.grad())
      if (g != 0) r.max_rel_error = std::max(r.max_rel_error, 1.0);
  }
  return finish(r);
}

CaseResult encoder_case(std::uint64_t seed) {
  Rng rng(seed);
  TextEncoder text(6, 3, 8, rng);
  ImageEncoderConfig ic;
  ic.image_size = 8;
  ic.patch = 4;
  ic.width = 8;
  ic.heads = 2;
  ic.query_tokens = 2;
  ic.out_width = 8;
  ImageEncoder image(ic, rng);
  ToySetup s = toy_setup(mix_seed(seed, 1));
  set_trainable(s.model.parameters(), false);
  auto params = text.parameters();
  for (auto& p : image.parameters()) params.push_back(p);
  set_trainable(params, true);
  const std::vector<int> ids{1, 4, 0, 2, 5, 3};
  Tensor refs = random_tensor({2, 3, 8, 8}, rng, 0.5);
  CaseResult r{"encoders_into_denoiser", 0, 0, 0, 1e-4, false};
  compare(tensors_of(params), [&] {
    const ConditionPair cond{text.encode(ids), image.forward(refs), 2};
    return denoise_loss(s.model, s.batch, cond);
  }, r);
  return finish(r);
}

}  // namespace gradsuite
