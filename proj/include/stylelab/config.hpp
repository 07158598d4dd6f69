#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stylelab/eval.hpp"
#include "stylelab/lora.hpp"
#include "stylelab/pipeline.hpp"

namespace stylelab {
STYLELAB_BEGIN_PRECISION

struct ProbeConfig {
  std::vector<std::string> prompts{"circle small", "square large", "triangle", "cross small",
                                   "star large",   "ring",         "circle large", "square small"};
  int steps = 50;
  std::uint64_t seed = 11;
};

struct FinetuneConfig {
  std::size_t rank = 4;
  double alpha = 4;
  double lr = 1e-3;
  std::size_t steps_per_image = 100;
  std::size_t batch = 8;
  LossWeighting weighting = LossWeighting::output;
  std::uint64_t seed = 5;
};

struct EvalConfig {
  double grid_step = 0.05;
  std::size_t samples = 50;
  int steps = 50;
  std::uint64_t seed = 21;
  std::string heldout_style = "ember";
  ContentProbeOptions content_probe;
};

// Whole-pipeline configuration. Text form: "[section]" headers and
// "key = value" lines, '#' comments; strings may be quoted; lists are
// comma-separated inside one string.
struct RunConfig {
  std::filesystem::path root = "runs";
  CorpusOptions corpus;
  ModelConfig model;
  std::uint64_t model_seed = 7;
  PretrainOptions pretrain;
  ProbeConfig probe;
  FinetuneConfig finetune;
  EvalConfig eval;

  // Throws ParameterError naming the offending line for unknown sections or
  // keys and malformed values.
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
  // Every key with its resolved value; parse(to_text()) reproduces the config.
  std::string to_text() const;
  std::string hash() const;
};

STYLELAB_END_PRECISION
}  // namespace stylelab
