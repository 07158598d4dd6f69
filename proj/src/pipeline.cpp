#include "stylelab/pipeline.hpp"

#include <cmath>
#include <map>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "stylelab/io.hpp"
#include "stylelab/optim.hpp"

namespace stylelab {
STYLELAB_BEGIN_PRECISION

using nlohmann::json;

namespace {

constexpr std::string_view kModelMagic = "STLMODL1";

json denoiser_json(const DenoiserConfig& c) {
  return {{"image_size", c.image_size}, {"channels", c.channels},     {"patch", c.patch},
          {"width", c.width},           {"heads", c.heads},           {"layers", c.layers},
          {"text_width", c.text_width}, {"image_width", c.image_width}, {"time_width", c.time_width},
          {"mlp_ratio", c.mlp_ratio},   {"sigma_data", c.sigma_data}};
}

json encoder_json(const ImageEncoderConfig& c) {
  return {{"image_size", c.image_size}, {"channels", c.channels},         {"patch", c.patch},
          {"width", c.width},           {"heads", c.heads},               {"query_tokens", c.query_tokens},
          {"out_width", c.out_width}};
}

}  // namespace

void ModelConfig::validate() const {
  denoiser.validate();
  encoder.validate();
  if (encoder.out_width != denoiser.image_width) {
    throw ParameterError("image encoder output width " + std::to_string(encoder.out_width) +
                         " does not match denoiser image width " + std::to_string(denoiser.image_width));
  }
  if (encoder.image_size != denoiser.image_size || encoder.channels != denoiser.channels) {
    throw ParameterError("image encoder and denoiser disagree on image shape");
  }
  if (text_length < 1) throw ParameterError("text length must be >= 1");
  if (schedule_steps < 1) throw ParameterError("schedule steps must be >= 1");
}

std::string ModelConfig::to_json() const {
  json j{{"denoiser", denoiser_json(denoiser)},
         {"encoder", encoder_json(encoder)},
         {"text_length", text_length},
         {"schedule_steps", schedule_steps},
         {"beta_start", beta_start},
         {"beta_end", beta_end}};
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  ModelConfig c;
  try {
    const json j = json::parse(text);
    const auto& d = j.at("denoiser");
    c.denoiser.image_size = d.at("image_size");
    c.denoiser.channels = d.at("channels");
    c.denoiser.patch = d.at("patch");
    c.denoiser.width = d.at("width");
    c.denoiser.heads = d.at("heads");
    c.denoiser.layers = d.at("layers");
    c.denoiser.text_width = d.at("text_width");
    c.denoiser.image_width = d.at("image_width");
    c.denoiser.time_width = d.at("time_width");
    c.denoiser.mlp_ratio = d.at("mlp_ratio");
    c.denoiser.sigma_data = d.at("sigma_data");
    const auto& e = j.at("encoder");
    c.encoder.image_size = e.at("image_size");
    c.encoder.channels = e.at("channels");
    c.encoder.patch = e.at("patch");
    c.encoder.width = e.at("width");
    c.encoder.heads = e.at("heads");
    c.encoder.query_tokens = e.at("query_tokens");
    c.encoder.out_width = e.at("out_width");
    c.text_length = j.at("text_length");
    c.schedule_steps = j.at("schedule_steps");
    c.beta_start = j.at("beta_start");
    c.beta_end = j.at("beta_end");
  } catch (const json::exception& ex) {
    throw FormatError(std::string("model config: ") + ex.what(), 0);
  }
  c.validate();
  return c;
}

std::string Prompt::text() const {
  std::string s = subject;
  for (const auto& m : modifiers) s += " " + m;
  return s;
}

Prompt Prompt::parse(const std::string& text) {
  std::istringstream in(text);
  Prompt p;
  std::string tok;
  while (in >> tok) {
    if (p.subject.empty()) {
      p.subject = tok;
    } else {
      p.modifiers.push_back(tok);
    }
  }
  if (p.subject.empty()) throw ParameterError("empty prompt");
  if (!is_subject(p.subject)) throw VocabularyError("unknown subject '" + p.subject + "'");
  for (const auto& m : p.modifiers) (void)size_from_modifier(m);
  return p;
}

// ---- StyleModel -----------------------------------------------------------------------

StyleModel::StyleModel(const ModelConfig& cfg, std::uint64_t seed) : config(cfg) {
  config.validate();
  vocab = Vocabulary::default_vocabulary();
  Rng text_rng(mix_seed(seed, 1));
  text_encoder = TextEncoder(vocab.size(), cfg.text_length, cfg.denoiser.text_width, text_rng);
  Rng image_rng(mix_seed(seed, 2));
  image_encoder = ImageEncoder(cfg.encoder, image_rng);
  denoiser = Denoiser(cfg.denoiser, mix_seed(seed, 3));
  schedule = make_schedule(cfg.schedule_steps, cfg.beta_start, cfg.beta_end);
  denoiser.set_alpha_bar(schedule.alpha_bar);
}

ParamList StyleModel::parameters() const {
  ParamList out = text_encoder.parameters();
  for (auto& p : image_encoder.parameters()) out.push_back(p);
  for (auto& p : denoiser.parameters()) out.push_back({"denoiser." + p.name, p.tensor});
  return out;
}

std::string StyleModel::base_hash() const {
  Fnv1a h;
  h.update(config.to_json());
  for (const auto& p : parameters()) {
    h.update(p.name);
    for (auto d : p.tensor.shape()) {
      const auto v = static_cast<std::uint64_t>(d);
      h.update(&v, sizeof v);
    }
    h.update_values(p.tensor.data());
  }
  return h.hex();
}

Tensor StyleModel::text_condition(std::span<const Prompt> prompts) const {
  std::vector<int> ids;
  ids.reserve(prompts.size() * config.text_length);
  for (const auto& p : prompts) {
    const auto one = tokenize_prompt(vocab, p.subject, p.modifiers, config.text_length);
    ids.insert(ids.end(), one.begin(), one.end());
  }
  return text_encoder.encode(ids);
}

Tensor StyleModel::text_condition(const Prompt& prompt, std::size_t batch) const {
  const std::vector<Prompt> prompts(batch, prompt);
  return text_condition(prompts);
}

ImageEmbedding StyleModel::embed(const Tensor& image) const { return encode_image(image_encoder, image); }

ImageEmbedding StyleModel::embed_average(std::span<const Tensor> images) const {
  std::vector<ImageEmbedding> embs;
  embs.reserve(images.size());
  for (const auto& im : images) embs.push_back(embed(im));
  return average_embeddings(embs);
}

void save_model(const StyleModel& model, const std::filesystem::path& path) {
  const auto params = model.parameters();
  json names = json::array();
  for (const auto& p : params) names.push_back(p.name);
  const json meta{{"version", 1},
                  {"config", json::parse(model.config.to_json())},
                  {"vocabulary", model.vocab.tokens()},
                  {"parameters", names},
                  {"base_hash", model.base_hash()}};
  const auto tensors = tensors_of(params);
  write_file_atomic(path, encode_bundle(kModelMagic, meta.dump(), tensors));
}

StyleModel load_model(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  const Bundle b = decode_bundle(bytes, kModelMagic);
  json meta;
  try {
    meta = json::parse(b.meta);
  } catch (const json::exception& ex) {
    throw FormatError(std::string("model metadata: ") + ex.what(), 16);
  }
  if (meta.value("version", 0) != 1) throw FormatError("unsupported model version", 8);
  StyleModel model(ModelConfig::from_json(meta.at("config").dump()), 0);
  model.vocab = Vocabulary(meta.at("vocabulary").get<std::vector<std::string>>());
  if (model.vocab.size() != model.text_encoder.vocab_size()) {
    throw FormatError("vocabulary size does not match the text encoder", 16);
  }
  const auto names = meta.at("parameters").get<std::vector<std::string>>();
  auto params = model.parameters();
  if (names.size() != params.size() || b.tensors.size() != params.size()) {
    throw FormatError("model file holds " + std::to_string(b.tensors.size()) + " tensors, expected " +
                          std::to_string(params.size()),
                      bytes.size());
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (names[i] != params[i].name || b.tensors[i].shape() != params[i].tensor.shape()) {
      throw FormatError("parameter " + std::to_string(i) + " (" + names[i] + ") does not match the model layout", 0);
    }
    auto dst = params[i].tensor.mutable_data();
    const auto src = b.tensors[i].data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  const std::string stored = meta.value("base_hash", "");
  // The hash covers f32 file values; only comparable in 32-bit builds.
  if (std::string(kPrecisionName) == "f32" && stored != model.base_hash()) {
    throw FormatError("model file hash mismatch", 0);
  }
  return model;
}

ConditionPair make_condition(const StyleModel& model, std::span<const Prompt> prompts, const ImageEmbedding* image) {
  ConditionPair cond;
  cond.batch = prompts.size();
  cond.text = model.text_condition(prompts);
  if (image) cond.image = repeat_embedding(*image, prompts.size());
  return cond;
}

Tensor generate(const StyleModel& model, std::span<const Prompt> prompts, const ImageEmbedding* image,
                std::span<const std::uint64_t> seeds, int steps, AttentionProbe* probe) {
  if (prompts.size() != seeds.size()) {
    throw ParameterError("generate: " + std::to_string(prompts.size()) + " prompts for " +
                         std::to_string(seeds.size()) + " seeds");
  }
  const ConditionPair cond = make_condition(model, prompts, image);
  return sample(model.denoiser, cond, model.schedule, seeds, steps, SamplerMode::ddim, probe);
}

// ---- pretraining ------------------------------------------------------------------------

std::vector<PretrainRecord> pretrain(StyleModel& model, const LoadedCorpus& corpus, const PretrainOptions& options,
                                     const std::function<void(const PretrainRecord&)>& on_log) {
  if (options.batch == 0) throw ParameterError("pretrain: batch must be >= 1");
  const auto& entries = corpus.manifest.entries;
  std::vector<std::size_t> pool;
  std::map<std::string, std::vector<std::size_t>> by_style;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].split != Split::pretrain) continue;
    pool.push_back(i);
    by_style[entries[i].style].push_back(i);
  }
  if (pool.empty()) throw ParameterError("pretrain: corpus has no pretrain images");

  const auto params = model.parameters();
  set_trainable(params, true);
  AdamOptions adam_opts;
  adam_opts.lr = options.lr;
  adam_opts.grad_clip = options.grad_clip;
  Adam adam(tensors_of(params), adam_opts);
  Rng rng(options.seed);

  const std::size_t B = options.batch, Li = model.config.encoder.query_tokens;
  const std::size_t W = model.config.encoder.out_width, L = model.config.text_length;
  std::vector<PretrainRecord> log;
  double window = 0.0;
  std::size_t window_n = 0;
  for (std::size_t step = 0; step < options.steps; ++step) {
    double lr = options.lr;
    if (step < options.warmup) {
      lr = options.lr * double(step + 1) / double(options.warmup);
    } else if (options.steps > options.warmup) {
      const double p = double(step - options.warmup) / double(options.steps - options.warmup);
      lr = options.lr_final + 0.5 * (options.lr - options.lr_final) * (1.0 + std::cos(std::numbers::pi * p));
    }
    adam.set_lr(lr);

    std::vector<Tensor> targets, refs;
    std::vector<int> ids;
    std::vector<real> image_mask(B * Li * W, real(1));
    bool any_image_drop = false;
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t idx = pool[rng.index(pool.size())];
      const auto& e = entries[idx];
      targets.push_back(corpus.images[idx]);
      std::size_t ref = idx;
      if (rng.uniform() >= options.self_ref_prob) {
        const auto& same = by_style[e.style];
        ref = same[rng.index(same.size())];
      }
      refs.push_back(corpus.images[ref]);
      std::vector<std::string> mods;
      if (!e.modifier.empty()) mods.push_back(e.modifier);
      auto one = tokenize_prompt(model.vocab, e.subject, mods, L);
      if (rng.uniform() < options.text_dropout) std::fill(one.begin(), one.end(), Vocabulary::kPad);
      ids.insert(ids.end(), one.begin(), one.end());
      if (rng.uniform() < options.image_dropout) {
        any_image_drop = true;
        std::fill(image_mask.begin() + static_cast<std::ptrdiff_t>(b * Li * W),
                  image_mask.begin() + static_cast<std::ptrdiff_t>((b + 1) * Li * W), real(0));
      }
    }
    const Tensor x0 = stack_images(targets);
    std::vector<int> ts(B);
    for (auto& t : ts) {
      const double u = 1.0 - std::pow(1.0 - rng.uniform(), options.timestep_power);
      t = 1 + std::min(model.schedule.steps - 1, static_cast<int>(u * double(model.schedule.steps)));
    }
    const DiffusionBatch batch = make_batch(x0, std::move(ts), model.schedule, rng);

    ComputeGraph graph;
    double loss_value = 0.0;
    {
      auto scope = graph.activate();
      ConditionPair cond;
      cond.batch = B;
      cond.text = model.text_encoder.encode(ids);
      cond.image = model.image_encoder.forward(stack_images(refs));
      if (any_image_drop) cond.image = mul(cond.image, Tensor({B * Li, W}, image_mask));
      const Tensor loss = denoise_loss(model.denoiser, batch, cond, options.weighting);
      loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        throw NumericError("pretrain: non-finite loss at step " + std::to_string(step) + " (lr " +
                           std::to_string(lr) + ")");
      }
      adam.zero_grad();
      graph.backward(loss);
    }
    const double gn = adam.step();
    window += loss_value;
    ++window_n;
    if (options.log_every > 0 && ((step + 1) % options.log_every == 0 || step + 1 == options.steps)) {
      PretrainRecord rec{step + 1, window / double(window_n), gn};
      log.push_back(rec);
      if (on_log) on_log(rec);
      window = 0.0;
      window_n = 0;
    }
  }
  set_trainable(params, false);
  return log;
}

STYLELAB_END_PRECISION
}  // namespace stylelab
