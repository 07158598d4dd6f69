#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stylelab/tensor.hpp"

namespace stylelab {
STYLELAB_BEGIN_PRECISION

inline constexpr std::size_t kImageSize = 32;
inline constexpr std::size_t kChannels = 3;

enum class Background { solid, stripes, grain };
enum class SizeClass { small, medium, large };

using Rgb = std::array<double, 3>;

struct StyleSpec {
  std::string id;
  std::array<Rgb, 3> palette;  // background, fill, stroke; channels in [0, 1]
  Background background = Background::solid;
  int stroke_px = 1;          // [0, 3]
  double distortion = 0.0;    // [0, 0.4]; exaggerated proportions plus wobble
  std::uint64_t seed = 0;     // background texture layout

  // Throws ParameterError if a field is outside its documented range.
  void validate() const;
};

const std::vector<std::string>& subject_names();
bool is_subject(const std::string& token);
std::string size_modifier(SizeClass size);  // "" for medium
SizeClass size_from_modifier(const std::string& modifier);

std::vector<StyleSpec> default_pretrain_styles();  // 8 styles
std::vector<StyleSpec> default_heldout_styles();   // 2 styles, nonzero distortion

// Hard 32x32 silhouette (row-major, 1 = inside). Depends only on subject,
// distortion, size and seed.
std::vector<std::uint8_t> silhouette_mask(const std::string& subject, double distortion, SizeClass size,
                                          std::uint64_t seed);
std::vector<std::uint8_t> canonical_mask(const std::string& subject, SizeClass size, std::uint64_t seed);

// Deterministic [3 x 32 x 32] image in [-1, 1]. Throws VocabularyError for an
// unknown subject.
Tensor render_sample(const StyleSpec& style, const std::string& subject, std::uint64_t seed,
                     SizeClass size = SizeClass::medium);

// ---- binary PPM (P6) ---------------------------------------------------------

// Quantizes [-1, 1] to 8 bits.
std::vector<std::uint8_t> encode_ppm(const Tensor& image);
Tensor decode_ppm(std::span<const std::uint8_t> bytes);
void write_ppm(const std::filesystem::path& path, const Tensor& image);
Tensor read_ppm(const std::filesystem::path& path);
// Round-trip through 8-bit quantization without touching disk.
Tensor quantize_image(const Tensor& image);

// ---- corpus -----------------------------------------------------------------------

enum class Split { pretrain, heldout };

struct CorpusEntry {
  std::string path;  // relative to the corpus root
  std::string subject;
  std::string modifier;  // "", "small" or "large"
  std::string style;
  std::uint64_t seed = 0;
  Split split = Split::pretrain;
  std::string content_hash;  // FNV-1a of the PPM bytes
};

struct CorpusManifest {
  std::vector<StyleSpec> styles;
  std::vector<CorpusEntry> entries;
  std::uint64_t seed = 0;

  std::string to_json() const;
  static CorpusManifest from_json(const std::string& text);
  std::string hash() const;

  const StyleSpec& style(const std::string& id) const;
  std::vector<const CorpusEntry*> select(Split split, const std::string& style = "") const;
  // True if no held-out style id occurs in the pretrain split.
  bool split_disjoint() const;
};

struct CorpusOptions {
  std::vector<StyleSpec> pretrain_styles = default_pretrain_styles();
  std::vector<StyleSpec> heldout_styles = default_heldout_styles();
  std::size_t per_cell = 20;     // images per (pretrain style, subject)
  std::size_t heldout_count = 5;  // images per held-out style
  std::uint64_t seed = 0;
};

// Renders every cell, writes PPM files and manifest.json under root. Throws
// ParameterError if style ids overlap and IoError if an output file exists.
CorpusManifest generate_corpus(const CorpusOptions& options, const std::filesystem::path& root);
// Builds the manifest and images in memory; generate_corpus writes these.
CorpusManifest plan_corpus(const CorpusOptions& options);
Tensor render_entry(const CorpusManifest& manifest, const CorpusEntry& entry);

struct LoadedCorpus {
  CorpusManifest manifest;
  std::vector<Tensor> images;  // parallel to manifest.entries
};

LoadedCorpus load_corpus(const std::filesystem::path& root);
// Renders (and quantizes) the corpus in memory instead of reading files.
LoadedCorpus materialize_corpus(const CorpusOptions& options);

// Stacks [3 x H x W] images into [B x 3 x H x W].
Tensor stack_images(std::span<const Tensor> images);
Tensor image_at(const Tensor& batch, std::size_t index);

STYLELAB_END_PRECISION
}  // namespace stylelab
