#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "stylelab/pipeline.hpp"

namespace testing {

using namespace stylelab;

// 32x32 input, 16 tokens, two thin layers: fast enough for unit tests.
inline ModelConfig tiny_model_config() {
  ModelConfig c;
  auto& d = c.denoiser;
  d.patch = 8;
  d.width = 16;
  d.heads = 2;
  d.layers = 2;
  d.text_width = 16;
  d.image_width = 16;
  d.time_width = 16;
  c.encoder.patch = 8;
  c.encoder.width = 16;
  c.encoder.heads = 2;
  c.encoder.query_tokens = 2;
  c.encoder.out_width = 16;
  return c;
}

inline DenoiserConfig toy_denoiser_config() {
  DenoiserConfig d;
  d.image_size = 8;
  d.patch = 4;
  d.width = 8;
  d.heads = 2;
  d.layers = 2;
  d.text_width = 8;
  d.image_width = 8;
  d.time_width = 8;
  return d;
}

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("stylelab-test-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing
