#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "stylelab/conditioning.hpp"
#include "stylelab/diffusion.hpp"
#include "stylelab/style_data.hpp"

namespace stylelab {
STYLELAB_BEGIN_PRECISION

struct ModelConfig {
  DenoiserConfig denoiser;
  ImageEncoderConfig encoder;
  std::size_t text_length = 4;
  int schedule_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

struct Prompt {
  std::string subject;
  std::vector<std::string> modifiers;

  std::string text() const;
  // "circle" or "circle small".
  static Prompt parse(const std::string& text);
};

// Everything that makes up the pretrained base system: vocabulary, text and
// image encoders, denoiser and noise schedule.
class StyleModel {
 public:
  StyleModel() = default;
  StyleModel(const ModelConfig& cfg, std::uint64_t seed);

  ModelConfig config;
  Vocabulary vocab;
  TextEncoder text_encoder;
  ImageEncoder image_encoder;
  Denoiser denoiser;
  NoiseSchedule schedule;

  // Base parameters with stable names ("text.", "image.", "denoiser.").
  ParamList parameters() const;
  // Fingerprint over names, shapes and values of the base parameters.
  std::string base_hash() const;

  // [batch*length x width] text condition for one prompt per sample.
  Tensor text_condition(std::span<const Prompt> prompts) const;
  Tensor text_condition(const Prompt& prompt, std::size_t batch) const;
  ImageEmbedding embed(const Tensor& image) const;
  ImageEmbedding embed_average(std::span<const Tensor> images) const;
};

// "STLMODL1" bundle: JSON with config, vocabulary and parameter names, then
// one tensor container per parameter.
void save_model(const StyleModel& model, const std::filesystem::path& path);
StyleModel load_model(const std::filesystem::path& path);

// Condition pair for `prompts` with the same image embedding in every sample,
// or a text-only pair when `image` is null.
ConditionPair make_condition(const StyleModel& model, std::span<const Prompt> prompts,
                             const ImageEmbedding* image);

// Samples one image per seed. prompts.size() must equal seeds.size().
Tensor generate(const StyleModel& model, std::span<const Prompt> prompts, const ImageEmbedding* image,
                std::span<const std::uint64_t> seeds, int steps, AttentionProbe* probe = nullptr);

struct PretrainOptions {
  std::size_t steps = 6000;
  std::size_t batch = 32;
  double lr = 2e-3;
  double lr_final = 1e-4;        // cosine decay target
  std::size_t warmup = 200;
  double grad_clip = 1.0;
  // t = 1 + floor(T * (1 - (1 - u)^timestep_power)); 1 is uniform, larger
  // values draw more high-noise steps.
  double timestep_power = 1.0;
  double self_ref_prob = 0.5;    // image condition is the target image itself
  double text_dropout = 0.1;
  double image_dropout = 0.1;
  LossWeighting weighting = LossWeighting::output;
  std::uint64_t seed = 0;
  std::size_t log_every = 100;
};

struct PretrainRecord {
  std::size_t step;
  double loss;
  double grad_norm;
};

// Joint training of text encoder, image encoder and denoiser on the pretrain
// split. The image condition is the target image with probability
// self_ref_prob, otherwise another image of the same style; each branch is
// dropped independently (all-pad prompt, zero image tokens).
std::vector<PretrainRecord> pretrain(StyleModel& model, const LoadedCorpus& corpus, const PretrainOptions& options,
                                     const std::function<void(const PretrainRecord&)>& on_log = {});

STYLELAB_END_PRECISION
}  // namespace stylelab
