#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stylelab/pipeline.hpp"

namespace stylelab {
STYLELAB_BEGIN_PRECISION

// Per-layer, per-step contribution cosines of one probe inference (or a mean
// over several). p_text[d][s] = cos(Z_t, Z), p_image[d][s] = cos(Z_i, Z).
struct ContributionTrace {
  std::size_t layers = 0;
  std::size_t steps = 0;
  std::string tag;        // reference index "0", "1", ... or "M" for averaged
  std::string prompt_id;  // prompt text, or "all" for a prompt mean
  std::vector<double> p_text;   // row-major [layers x steps]
  std::vector<double> p_image;

  ContributionTrace() = default;
  ContributionTrace(std::size_t layers, std::size_t steps, std::string tag, std::string prompt_id);

  double& pt(std::size_t d, std::size_t s) { return p_text[d * steps + s]; }
  double& pi(std::size_t d, std::size_t s) { return p_image[d * steps + s]; }
  double pt(std::size_t d, std::size_t s) const { return p_text[d * steps + s]; }
  double pi(std::size_t d, std::size_t s) const { return p_image[d * steps + s]; }

  // Throws TraceIntegrityError on wrong sizes or entries outside [-1, 1].
  void validate() const;
};

// Records (Z, Z_t, Z_i) cosines for every sample of a batched forward pass.
// One trace per sample; complete() checks every (layer, step) was filled.
class ContributionRecorder : public AttentionProbe {
 public:
  ContributionRecorder(std::size_t layers, std::size_t steps, std::size_t batch);

  void begin_step(std::size_t step) override;
  void on_layer(std::size_t layer, const Tensor& z, const Tensor& z_text, const Tensor& z_image,
                std::size_t groups) override;

  // Throws TraceIntegrityError if a hook was missed.
  std::vector<ContributionTrace> finish(std::span<const std::string> tags,
                                        std::span<const std::string> prompt_ids) const;

 private:
  std::size_t layers_, steps_, batch_;
  std::size_t step_ = 0;
  bool started_ = false;
  std::vector<ContributionTrace> traces_;
  std::vector<std::uint8_t> filled_;  // [layers x steps]
};

// Runs one probe inference per (prompt, seed) with the image condition and
// image_scale = 1 on every layer; the generated images are discarded and the
// previous scales restored afterwards.
std::vector<ContributionTrace> record_contributions(StyleModel& model, std::span<const Prompt> prompts,
                                                    const ImageEmbedding& image, std::span<const std::uint64_t> seeds,
                                                    int steps, const std::string& tag);

// Elementwise mean of traces with identical dimensions.
ContributionTrace mean_trace(std::span<const ContributionTrace> traces, const std::string& tag,
                             const std::string& prompt_id);

// Per-layer mean over steps of (P_i - P_t).
std::vector<double> layer_difference(const ContributionTrace& trace);

struct HierarchicalScales {
  std::vector<double> scales;       // one per cross-attention layer, in [0, 1]
  std::vector<double> differences;  // D^M(d) - D^S(d)
  bool degenerate = false;          // all differences equal -> all ones
  std::string normalization = "minmax";
  std::string prompt_hash;
  std::string reference_hash;

  std::string to_json() const;
  static HierarchicalScales from_json(const std::string& text);
  static HierarchicalScales uniform(std::size_t layers);
};

// Min-max normalization into [0, 1]; constant input yields all ones and sets
// `degenerate`.
std::vector<double> minmax_normalize(std::span<const double> values, bool* degenerate = nullptr);

// Scales(d) = minmax(D^M(d) - D^S(d)) with D^S averaged over all single
// traces and D^M over all multi traces.
HierarchicalScales compute_hierarchical_scales(std::span<const ContributionTrace> singles,
                                               std::span<const ContributionTrace> multi);

// "STLTRACE" container: u32 version, u32 layers, u32 steps, u32-prefixed tag
// and prompt id, then P_t and P_i as [layers x steps] tensor containers.
void save_trace(const ContributionTrace& trace, const std::filesystem::path& path);
ContributionTrace load_trace(const std::filesystem::path& path);
// Columns: layer,timestep,P_t,P_i.
std::string trace_csv(const ContributionTrace& trace);

std::string hash_prompts(std::span<const Prompt> prompts);
std::string hash_images(std::span<const Tensor> images);

STYLELAB_END_PRECISION
}  // namespace stylelab
