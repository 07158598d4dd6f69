#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stylelab/pipeline.hpp"

namespace stylelab {
STYLELAB_BEGIN_PRECISION

// Nearest-centroid style classifier in the (flattened) image-encoder
// embedding space.
class StyleProbe {
 public:
  void set_centroid(const std::string& style, std::vector<double> centroid);
  // Centroid = mean embedding of the given images per label.
  static StyleProbe fit(const ImageEncoder& encoder, std::span<const Tensor> images,
                        std::span<const std::string> labels);

  bool empty() const { return styles_.empty(); }
  const std::vector<std::string>& styles() const { return styles_; }
  const std::vector<double>& centroid(const std::string& style) const;

  std::string predict(std::span<const real> embedding) const;
  // images: [B x C x H x W].
  std::vector<std::string> predict(const ImageEncoder& encoder, const Tensor& images) const;

  // Fraction of images whose nearest centroid is `target`. Throws
  // ParameterError on an empty batch and StateError when centroids are
  // missing or `target` has none.
  double style_score(const ImageEncoder& encoder, const Tensor& images, const std::string& target) const;

  std::string to_json() const;
  static StyleProbe from_json(const std::string& text);

 private:
  std::vector<std::string> styles_;
  std::vector<std::vector<double>> centroids_;
};

struct ContentProbeOptions {
  std::size_t pool = 12000;   // pre-rendered training images
  std::size_t steps = 3000;
  std::size_t batch = 64;
  std::size_t hidden = 128;
  double lr = 1e-3;
  double max_noise = 0.3;     // per-image Gaussian noise std drawn from [0, max_noise]
  std::uint64_t seed = 0;
};

// Subject classifier: two-layer MLP on pixels, trained on renders with
// randomized styles plus the given styles, with noise augmentation.
class ContentProbe {
 public:
  ContentProbe() = default;

  void train(std::span<const StyleSpec> styles, const ContentProbeOptions& options);
  bool trained() const { return w1_.defined(); }

  // images: [B x C x H x W] -> subject index per image (order of subject_names()).
  std::vector<int> predict(const Tensor& images) const;
  // Fraction of images whose predicted subject equals subjects[b].
  double content_score(const Tensor& images, std::span<const std::string> subjects) const;

  void save(const std::filesystem::path& path) const;
  static ContentProbe load(const std::filesystem::path& path);

 private:
  Tensor logits(const Tensor& flat) const;
  Tensor w1_, b1_, w2_, b2_;
};

// A random but valid StyleSpec, used for probe training.
StyleSpec random_style(Rng& rng);

// Spearman rank correlation with average ranks for ties; 0 if either side is
// constant.
double spearman(std::span<const double> x, std::span<const double> y);

struct SweepPoint {
  double multiplier = 0;
  double style_accuracy = 0;
  double content_accuracy = 0;
};

struct EvalReport {
  double style_accuracy = 0;    // at the largest multiplier of the grid
  double content_accuracy = 0;
  std::vector<SweepPoint> curve;
  std::size_t samples = 0;      // images per grid point
  std::string config_hash;
  std::string target_style;
  double spearman_style = 0;

  std::string to_json() const;
  std::string to_csv() const;
  // Whitespace-separated columns for gnuplot.
  std::string to_gnuplot() const;
};

// Line plot of both accuracy curves over the multiplier axis, as PPM bytes.
std::vector<std::uint8_t> plot_sweep_ppm(const EvalReport& report, std::size_t width = 320, std::size_t height = 200);

struct GenerationSpec {
  std::vector<Prompt> prompts;         // one per sample
  std::vector<std::uint64_t> seeds;    // one per sample
  int steps = 50;
};

// Round-robin prompts over subjects with the given seed base.
GenerationSpec make_generation_spec(std::span<const std::string> subjects, std::size_t samples,
                                    std::uint64_t seed, int steps);

struct Scores {
  double style = 0;
  double content = 0;
};

Scores score_images(const StyleModel& model, const Tensor& images, const GenerationSpec& spec,
                    const StyleProbe& style_probe, const ContentProbe& content_probe, const std::string& target);

// For each multiplier m in grid: installs scales * m, samples spec with the
// image embedding and scores the result. Scales are left at scales * 1.
EvalReport multiplier_sweep(StyleModel& model, std::span<const double> scales, const ImageEmbedding& image,
                            const GenerationSpec& spec, std::span<const double> grid, const StyleProbe& style_probe,
                            const ContentProbe& content_probe, const std::string& target);

// {0, step, 2*step, ..., 1}.
std::vector<double> multiplier_grid(double step = 0.05);

STYLELAB_END_PRECISION
}  // namespace stylelab
