#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "stylelab/pipeline.hpp"
#include "stylelab/probe.hpp"

namespace stylelab {
STYLELAB_BEGIN_PRECISION

// Projection names within a block: self_q, self_k, self_v, self_out,
// cross.w_q, cross.w_k, cross.w_v, cross.w_out, cross.w_ik, cross.w_iv.
const std::vector<std::string>& default_lora_targets();

struct LoraAdapter {
  std::size_t rank = 4;
  double alpha = 4;
  std::vector<std::string> targets;  // "block{d}.<projection>", in attach order
  std::vector<Tensor> a;             // [rank x in] per target
  std::vector<Tensor> b;             // [out x rank] per target

  double scaling() const { return alpha / double(rank); }
  std::vector<Tensor> tensors() const;  // a0, b0, a1, b1, ...
  std::size_t parameter_count() const;
};

// Creates A ~ N(0, 1/in) and B = 0 for every target projection of every
// block and attaches them. Throws ParameterError if rank is 0 or exceeds
// min(in, out) for some target. alpha <= 0 means alpha = rank.
LoraAdapter init_lora(Denoiser& model, std::size_t rank, std::uint64_t seed, double alpha = 0,
                      std::span<const std::string> projections = default_lora_targets());

// Installs adapter tensors (shared, not copied) on the named projections.
void attach_lora(Denoiser& model, const LoraAdapter& adapter);
void detach_lora(Denoiser& model);

struct Reference {
  Tensor image;  // [3 x H x W]
  Prompt caption;
};

struct FinetuneOptions {
  long steps = -1;  // < 0: 100 per reference image
  double lr = 1e-3;
  std::size_t batch = 8;
  LossWeighting weighting = LossWeighting::output;
  std::uint64_t seed = 0;
};

struct FinetuneRecord {
  std::size_t step;
  double loss;
  double grad_norm;
};

// LoRA training with the frozen base. c_i is the averaged embedding of all
// references, fixed for the run; scales are installed with multiplier 1.
// Throws ParameterError for empty refs, NumericError on a non-finite loss
// and StateError if a frozen weight changed.
std::vector<FinetuneRecord> finetune(StyleModel& model, LoraAdapter& adapter, std::span<const Reference> refs,
                                     const HierarchicalScales& scales, const FinetuneOptions& options,
                                     const std::function<void(const FinetuneRecord&)>& on_step = {});

std::string finetune_log_csv(std::span<const FinetuneRecord> log);

struct StyleCheckpoint {
  std::uint32_t version = 1;
  std::string base_hash;
  HierarchicalScales scales;
  LoraAdapter adapter;
  ImageEmbedding embedding;  // averaged references
  // Training metadata.
  std::size_t steps = 0;
  double lr = 0;
  std::size_t references = 0;
  std::uint64_t seed = 0;
  std::string style;
};

// "ADAPTR01", u64-prefixed JSON metadata, then the embedding tokens followed
// by A and B of every target in declared order.
void save_checkpoint(const StyleCheckpoint& ckpt, const std::filesystem::path& path);
// Throws FormatError with the failing offset on a malformed file.
StyleCheckpoint load_checkpoint(const std::filesystem::path& path);
// Also throws IncompatibilityError if the base hash differs.
StyleCheckpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_base_hash);

// Attaches the adapter, installs the scales with `multiplier`.
void apply_checkpoint(StyleModel& model, const StyleCheckpoint& ckpt, double multiplier = 1.0);

STYLELAB_END_PRECISION
}  // namespace stylelab
