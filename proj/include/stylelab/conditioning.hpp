#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "stylelab/nn.hpp"

namespace stylelab {
STYLELAB_BEGIN_PRECISION

class Vocabulary {
 public:
  static constexpr int kPad = 0;

  Vocabulary() = default;
  // tokens[0] must be the padding token.
  explicit Vocabulary(std::vector<std::string> tokens);

  static Vocabulary default_vocabulary();
  // Newline-delimited tokens, index = line number.
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  // Throws VocabularyError listing the known tokens.
  int id(const std::string& token) const;
  bool contains(const std::string& token) const;

 private:
  std::vector<std::string> tokens_;
};

struct TextCondition {
  std::vector<int> ids;  // [subject, modifiers..., pad...], length = text length
  Tensor embedded;       // [length x text_width]
};

// Token ids for a prompt, padded to `length`. The subject is always first.
std::vector<int> tokenize_prompt(const Vocabulary& vocab, const std::string& subject,
                                 std::span<const std::string> modifiers, std::size_t length);

// Learned token + position embedding followed by a layer norm.
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(std::size_t vocab_size, std::size_t length, std::size_t width, Rng& rng);

  // ids: batch * length token ids -> [batch*length x width].
  Tensor encode(std::span<const int> ids) const;
  std::size_t length() const { return length_; }
  std::size_t width() const { return token_embed_.dim(1); }
  std::size_t vocab_size() const { return token_embed_.dim(0); }
  ParamList parameters() const;

 private:
  std::size_t length_ = 0;
  Tensor token_embed_;
  Tensor pos_embed_;
  LayerNorm norm_;
};

TextCondition encode_prompt(const Vocabulary& vocab, const TextEncoder& encoder, const std::string& subject,
                            std::span<const std::string> modifiers = {});

struct ImageEncoderConfig {
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t patch = 4;
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t query_tokens = 4;
  std::size_t out_width = 64;

  void validate() const;
};

struct ImageEmbedding {
  enum class Source { single, averaged };
  Tensor tokens;  // [query_tokens x out_width]
  Source source = Source::single;
  std::size_t count = 1;  // N for averaged embeddings
};

// Patch tokens -> residual MLP -> learned queries attend over the patches ->
// output projection. Produces query_tokens embedding tokens per image.
class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(const ImageEncoderConfig& cfg, Rng& rng);

  // images: [B x C x H x W] -> [B*query_tokens x out_width]. Differentiable.
  Tensor forward(const Tensor& images) const;
  const ImageEncoderConfig& config() const { return cfg_; }
  ParamList parameters() const;

 private:
  ImageEncoderConfig cfg_;
  Linear patch_in_;
  Tensor pos_embed_;
  LayerNorm norm_mlp_;
  Linear mlp_in_, mlp_out_;
  LayerNorm norm_kv_;
  Tensor queries_;
  Linear w_q_, w_k_, w_v_;
  Linear out_;
  LayerNorm norm_out_;
};

// image: [C x H x W] with values in [-1, 1]. Throws InputError otherwise.
ImageEmbedding encode_image(const ImageEncoder& encoder, const Tensor& image);
// Batched variant; images: [B x C x H x W].
std::vector<ImageEmbedding> encode_images(const ImageEncoder& encoder, const Tensor& images);

// Token-position-wise arithmetic mean. Each coordinate's N values are summed
// in ascending order in double precision before dividing by N, so the result
// does not depend on the order of `embeddings`.
ImageEmbedding average_embeddings(std::span<const ImageEmbedding> embeddings);

// Stacks per-sample embeddings into a [B*tokens x width] condition tensor.
Tensor stack_embeddings(std::span<const ImageEmbedding> embeddings);
Tensor repeat_embedding(const ImageEmbedding& embedding, std::size_t batch);

STYLELAB_END_PRECISION
}  // namespace stylelab
