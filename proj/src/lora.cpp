#include "stylelab/lora.hpp"

#include <cmath>
#include <sstream>

#include "json.hpp"
#include "stylelab/io.hpp"
#include "stylelab/optim.hpp"

namespace stylelab {
STYLELAB_BEGIN_PRECISION

using nlohmann::json;

namespace {

constexpr std::string_view kCheckpointMagic = "ADAPTR01";

// "block3.cross.w_q" -> (3, "cross.w_q")
std::pair<std::size_t, std::string> split_target(const std::string& target) {
  const auto dot = target.find('.');
  if (target.rfind("block", 0) != 0 || dot == std::string::npos || dot <= 5) {
    throw ParameterError("malformed LoRA target '" + target + "'");
  }
  std::size_t d = 0;
  try {
    d = std::stoul(target.substr(5, dot - 5));
  } catch (const std::exception&) {
    throw ParameterError("malformed LoRA target '" + target + "'");
  }
  return {d, target.substr(dot + 1)};
}

}  // namespace

const std::vector<std::string>& default_lora_targets() {
  static const std::vector<std::string> names{"self_q",    "self_k",    "self_v",      "self_out",   "cross.w_q",
                                              "cross.w_k", "cross.w_v", "cross.w_out", "cross.w_ik", "cross.w_iv"};
  return names;
}

std::vector<Tensor> LoraAdapter::tensors() const {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    out.push_back(a[i]);
    out.push_back(b[i]);
  }
  return out;
}

std::size_t LoraAdapter::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors()) n += t.numel();
  return n;
}

LoraAdapter init_lora(Denoiser& model, std::size_t rank, std::uint64_t seed, double alpha,
                      std::span<const std::string> projections) {
  if (rank == 0) throw ParameterError("LoRA rank must be >= 1");
  LoraAdapter adapter;
  adapter.rank = rank;
  adapter.alpha = alpha > 0 ? alpha : double(rank);
  Rng rng(seed);
  for (std::size_t d = 0; d < model.layer_count(); ++d) {
    for (const auto& name : projections) {
      const Linear& lin = model.projection(d, name);
      const std::size_t in = lin.in_features(), out = lin.out_features();
      if (rank > std::min(in, out)) {
        throw ParameterError("LoRA rank " + std::to_string(rank) + " exceeds min(in, out) = " +
                             std::to_string(std::min(in, out)) + " for block" + std::to_string(d) + "." + name);
      }
      adapter.targets.push_back("block" + std::to_string(d) + "." + name);
      adapter.a.push_back(random_tensor({rank, in}, rng, 1.0 / std::sqrt(double(in))));
      adapter.b.push_back(Tensor::zeros({out, rank}));
    }
  }
  attach_lora(model, adapter);
  return adapter;
}

void attach_lora(Denoiser& model, const LoraAdapter& adapter) {
  if (adapter.a.size() != adapter.targets.size() || adapter.b.size() != adapter.targets.size()) {
    throw ParameterError("LoRA adapter has mismatched target and tensor counts");
  }
  std::vector<Linear*> slots;
  for (std::size_t i = 0; i < adapter.targets.size(); ++i) {
    const auto [d, name] = split_target(adapter.targets[i]);
    if (d >= model.layer_count()) throw ParameterError("LoRA target " + adapter.targets[i] + " beyond model depth");
    Linear& lin = model.projection(d, name);
    const Shape want_a{adapter.rank, lin.in_features()}, want_b{lin.out_features(), adapter.rank};
    if (adapter.a[i].shape() != want_a || adapter.b[i].shape() != want_b) {
      throw DimensionError("LoRA tensors for " + adapter.targets[i] + " have shapes " +
                           shape_string(adapter.a[i].shape()) + ", " + shape_string(adapter.b[i].shape()) +
                           "; expected " + shape_string(want_a) + ", " + shape_string(want_b));
    }
    slots.push_back(&lin);
  }
  detach_lora(model);
  for (std::size_t i = 0; i < slots.size(); ++i) {
    slots[i]->lora = LoraSlot{adapter.a[i], adapter.b[i], static_cast<real>(adapter.scaling())};
  }
}

void detach_lora(Denoiser& model) {
  for (std::size_t d = 0; d < model.layer_count(); ++d)
    for (const auto& name : default_lora_targets()) model.projection(d, name).lora.reset();
}

// ---- fine-tuning ----------------------------------------------------------------------------

std::vector<FinetuneRecord> finetune(StyleModel& model, LoraAdapter& adapter, std::span<const Reference> refs,
                                     const HierarchicalScales& scales, const FinetuneOptions& options,
                                     const std::function<void(const FinetuneRecord&)>& on_step) {
  if (refs.empty()) throw ParameterError("finetune: no reference images");
  if (options.batch == 0) throw ParameterError("finetune: batch must be >= 1");
  const std::size_t steps =
      options.steps < 0 ? 100 * refs.size() : static_cast<std::size_t>(options.steps);
  std::vector<FinetuneRecord> log;
  if (steps == 0) return log;

  const auto base = model.parameters();
  set_trainable(base, false);
  const std::string frozen_before = model.base_hash();

  std::vector<Tensor> images;
  for (const auto& r : refs) images.push_back(r.image);
  const ImageEmbedding c_i = model.embed_average(images);
  set_layer_scales(model.denoiser, scales.scales, 1.0);
  attach_lora(model.denoiser, adapter);

  auto params = adapter.tensors();
  for (auto& p : params) p.set_requires_grad(true);
  AdamOptions ao;
  ao.lr = options.lr;
  Adam adam(params, ao);
  Rng rng(options.seed);
  const std::size_t B = options.batch;
  const Tensor image_cond = repeat_embedding(c_i, B);

  for (std::size_t step = 0; step < steps; ++step) {
    std::vector<Tensor> x;
    std::vector<Prompt> prompts;
    for (std::size_t b = 0; b < B; ++b) {
      const auto& r = refs[rng.index(refs.size())];
      x.push_back(r.image);
      prompts.push_back(r.caption);
    }
    const DiffusionBatch batch = make_batch(stack_images(x), model.schedule, rng);
    ComputeGraph graph;
    double loss_value = 0.0;
    {
      auto scope = graph.activate();
      ConditionPair cond{model.text_condition(prompts), image_cond, B};
      const Tensor loss = denoise_loss(model.denoiser, batch, cond, options.weighting);
      loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        for (auto& p : params) p.set_requires_grad(false);
        std::ostringstream os;
        os << "finetune: non-finite loss at step " << step << " (lr " << options.lr << ", rank " << adapter.rank
           << ", references " << refs.size() << ", last loss "
           << (log.empty() ? std::nan("") : log.back().loss) << ")";
        throw NumericError(os.str());
      }
      adam.zero_grad();
      graph.backward(loss);
    }
    const double gn = adam.step();
    FinetuneRecord rec{step + 1, loss_value, gn};
    log.push_back(rec);
    if (on_step) on_step(rec);
  }
  for (auto& p : params) p.set_requires_grad(false);
  if (model.base_hash() != frozen_before) throw StateError("finetune modified frozen base weights");
  return log;
}

std::string finetune_log_csv(std::span<const FinetuneRecord> log) {
  std::ostringstream os;
  os.precision(9);
  os << "step,loss,grad_norm\n";
  for (const auto& r : log) os << r.step << "," << r.loss << "," << r.grad_norm << "\n";
  return os.str();
}

// ---- checkpoints -----------------------------------------------------------------------------

void save_checkpoint(const StyleCheckpoint& ckpt, const std::filesystem::path& path) {
  if (!ckpt.embedding.tokens.defined()) throw ParameterError("checkpoint has no image embedding");
  json adapter{{"rank", ckpt.adapter.rank}, {"alpha", ckpt.adapter.alpha}, {"targets", ckpt.adapter.targets}};
  const json meta{{"version", ckpt.version},
                  {"base_hash", ckpt.base_hash},
                  {"scales", json::parse(ckpt.scales.to_json())},
                  {"adapter", adapter},
                  {"embedding", {{"count", ckpt.embedding.count},
                                 {"averaged", ckpt.embedding.source == ImageEmbedding::Source::averaged}}},
                  {"training",
                   {{"steps", ckpt.steps},
                    {"lr", ckpt.lr},
                    {"references", ckpt.references},
                    {"seed", ckpt.seed},
                    {"style", ckpt.style}}},
                  {"tensor_order", "embedding, then A and B per target"}};
  std::vector<Tensor> tensors{ckpt.embedding.tokens};
  for (auto& t : ckpt.adapter.tensors()) tensors.push_back(t);
  write_file_atomic(path, encode_bundle(kCheckpointMagic, meta.dump(), tensors));
}

StyleCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  const Bundle bundle = decode_bundle(bytes, kCheckpointMagic);
  constexpr std::size_t meta_at = 16;
  StyleCheckpoint c;
  try {
    const json meta = json::parse(bundle.meta);
    c.version = meta.at("version").get<std::uint32_t>();
    if (c.version != 1) throw FormatError("unsupported checkpoint version " + std::to_string(c.version), meta_at);
    c.base_hash = meta.at("base_hash").get<std::string>();
    c.scales = HierarchicalScales::from_json(meta.at("scales").dump());
    const auto& a = meta.at("adapter");
    c.adapter.rank = a.at("rank").get<std::size_t>();
    c.adapter.alpha = a.at("alpha").get<double>();
    c.adapter.targets = a.at("targets").get<std::vector<std::string>>();
    const auto& e = meta.at("embedding");
    c.embedding.count = e.at("count").get<std::size_t>();
    c.embedding.source = e.at("averaged").get<bool>() ? ImageEmbedding::Source::averaged
                                                      : ImageEmbedding::Source::single;
    const auto& t = meta.at("training");
    c.steps = t.at("steps").get<std::size_t>();
    c.lr = t.at("lr").get<double>();
    c.references = t.at("references").get<std::size_t>();
    c.seed = t.at("seed").get<std::uint64_t>();
    c.style = t.at("style").get<std::string>();
  } catch (const json::exception& ex) {
    throw FormatError(std::string("checkpoint metadata: ") + ex.what(), meta_at);
  }
  const std::size_t want = 1 + 2 * c.adapter.targets.size();
  if (bundle.tensors.size() != want) {
    throw FormatError("checkpoint holds " + std::to_string(bundle.tensors.size()) + " tensors, metadata declares " +
                          std::to_string(want),
                      bytes.size());
  }
  c.embedding.tokens = bundle.tensors[0];
  for (std::size_t i = 0; i < c.adapter.targets.size(); ++i) {
    const Tensor& a = bundle.tensors[1 + 2 * i];
    const Tensor& b = bundle.tensors[2 + 2 * i];
    if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != c.adapter.rank || b.dim(1) != c.adapter.rank) {
      throw FormatError("LoRA tensors for " + c.adapter.targets[i] + " do not have rank " +
                            std::to_string(c.adapter.rank),
                        0);
    }
    c.adapter.a.push_back(a);
    c.adapter.b.push_back(b);
  }
  return c;
}

StyleCheckpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_base_hash) {
  StyleCheckpoint c = load_checkpoint(path);
  if (c.base_hash != expected_base_hash) {
    throw IncompatibilityError("checkpoint was trained on base model " + c.base_hash + ", loaded model is " +
                               expected_base_hash);
  }
  return c;
}

void apply_checkpoint(StyleModel& model, const StyleCheckpoint& ckpt, double multiplier) {
  const std::string have = model.base_hash();
  if (ckpt.base_hash != have) {
    throw IncompatibilityError("checkpoint was trained on base model " + ckpt.base_hash + ", loaded model is " + have);
  }
  attach_lora(model.denoiser, ckpt.adapter);
  set_layer_scales(model.denoiser, ckpt.scales.scales, multiplier);
}

STYLELAB_END_PRECISION
}  // namespace stylelab
