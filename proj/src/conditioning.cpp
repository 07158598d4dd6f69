#include "stylelab/conditioning.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "stylelab/denoiser.hpp"
#include "stylelab/io.hpp"

namespace stylelab {
STYLELAB_BEGIN_PRECISION

// ---- Vocabulary --------------------------------------------------------------------

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.empty()) throw VocabularyError("vocabulary needs at least the padding token");
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty()) throw VocabularyError("empty token at index " + std::to_string(i));
    if (std::find(tokens_.begin(), tokens_.begin() + static_cast<std::ptrdiff_t>(i), tokens_[i]) !=
        tokens_.begin() + static_cast<std::ptrdiff_t>(i)) {
      throw VocabularyError("duplicate token '" + tokens_[i] + "'");
    }
  }
}

Vocabulary Vocabulary::default_vocabulary() {
  return Vocabulary({"<pad>", "circle", "square", "triangle", "cross", "star", "ring", "small", "large"});
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocabulary " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) tokens.push_back(line);
  }
  return Vocabulary(std::move(tokens));
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::string text;
  for (const auto& t : tokens_) text += t + "\n";
  write_text_atomic(path, text);
}

int Vocabulary::id(const std::string& token) const {
  const auto it = std::find(tokens_.begin(), tokens_.end(), token);
  if (it == tokens_.end()) {
    std::string known;
    for (std::size_t i = 1; i < tokens_.size(); ++i) known += (i > 1 ? ", " : "") + tokens_[i];
    throw VocabularyError("unknown token '" + token + "'; known tokens: " + known);
  }
  return static_cast<int>(it - tokens_.begin());
}

bool Vocabulary::contains(const std::string& token) const {
  return std::find(tokens_.begin(), tokens_.end(), token) != tokens_.end();
}

std::vector<int> tokenize_prompt(const Vocabulary& vocab, const std::string& subject,
                                 std::span<const std::string> modifiers, std::size_t length) {
  if (1 + modifiers.size() > length) {
    throw ParameterError("prompt has " + std::to_string(1 + modifiers.size()) + " tokens but text length is " +
                         std::to_string(length));
  }
  std::vector<int> ids(length, Vocabulary::kPad);
  ids[0] = vocab.id(subject);
  for (std::size_t i = 0; i < modifiers.size(); ++i) ids[i + 1] = vocab.id(modifiers[i]);
  return ids;
}

// ---- TextEncoder ---------------------------------------------------------------------

TextEncoder::TextEncoder(std::size_t vocab_size, std::size_t length, std::size_t width, Rng& rng)
    : length_(length),
      token_embed_(random_tensor({vocab_size, width}, rng, 1.0)),
      pos_embed_(random_tensor({length, width}, rng, 0.1)),
      norm_(width) {
  if (vocab_size == 0 || length == 0 || width == 0) throw ParameterError("TextEncoder: sizes must be positive");
}

Tensor TextEncoder::encode(std::span<const int> ids) const {
  if (ids.empty() || ids.size() % length_ != 0) {
    throw DimensionError("TextEncoder: " + std::to_string(ids.size()) + " ids is not a multiple of length " +
                         std::to_string(length_));
  }
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab_size()) {
      throw VocabularyError("token id " + std::to_string(ids[i]) + " outside vocabulary of size " +
                            std::to_string(vocab_size()));
    }
    rows[i] = static_cast<std::size_t>(ids[i]);
  }
  const auto pos = tile_index(ids.size() / length_, length_);
  return norm_.forward(add(gather_rows(token_embed_, rows), gather_rows(pos_embed_, pos)));
}

ParamList TextEncoder::parameters() const {
  ParamList out{{"text.token_embed", token_embed_}, {"text.pos_embed", pos_embed_}};
  norm_.collect("text.norm", out);
  return out;
}

TextCondition encode_prompt(const Vocabulary& vocab, const TextEncoder& encoder, const std::string& subject,
                            std::span<const std::string> modifiers) {
  TextCondition cond;
  cond.ids = tokenize_prompt(vocab, subject, modifiers, encoder.length());
  cond.embedded = encoder.encode(cond.ids);
  return cond;
}

// ---- ImageEncoder ----------------------------------------------------------------------

void ImageEncoderConfig::validate() const {
  if (image_size == 0 || patch == 0 || image_size % patch != 0) {
    throw ParameterError("ImageEncoderConfig: image size must be a positive multiple of the patch size");
  }
  if (width == 0 || heads == 0 || width % heads != 0) {
    throw ParameterError("ImageEncoderConfig: width must be divisible by heads");
  }
  if (query_tokens == 0 || out_width == 0 || channels == 0) {
    throw ParameterError("ImageEncoderConfig: sizes must be positive");
  }
}

ImageEncoder::ImageEncoder(const ImageEncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t pd = cfg.channels * cfg.patch * cfg.patch;
  const std::size_t grid = cfg.image_size / cfg.patch;
  const double s = 1.0 / std::sqrt(double(cfg.width));
  patch_in_ = Linear(pd, cfg.width, true, rng, 1.0 / std::sqrt(double(pd)));
  pos_embed_ = random_tensor({grid * grid, cfg.width}, rng, 0.02);
  norm_mlp_ = LayerNorm(cfg.width);
  mlp_in_ = Linear(cfg.width, 2 * cfg.width, true, rng, s);
  mlp_out_ = Linear(2 * cfg.width, cfg.width, true, rng, 0.5 / std::sqrt(2.0 * cfg.width));
  norm_kv_ = LayerNorm(cfg.width);
  queries_ = random_tensor({cfg.query_tokens, cfg.width}, rng, 1.0);
  w_q_ = Linear(cfg.width, cfg.width, false, rng, s);
  w_k_ = Linear(cfg.width, cfg.width, false, rng, s);
  w_v_ = Linear(cfg.width, cfg.width, false, rng, s);
  out_ = Linear(cfg.width, cfg.out_width, true, rng, s);
  norm_out_ = LayerNorm(cfg.out_width);
}

Tensor ImageEncoder::forward(const Tensor& images) const {
  const auto& c = cfg_;
  if (images.rank() != 4 || images.dim(1) != c.channels || images.dim(2) != c.image_size ||
      images.dim(3) != c.image_size) {
    throw DimensionError("ImageEncoder: input " + shape_string(images.shape()) + " does not match [B x " +
                         std::to_string(c.channels) + " x " + std::to_string(c.image_size) + " x " +
                         std::to_string(c.image_size) + "]");
  }
  const std::size_t batch = images.dim(0);
  const std::size_t grid = c.image_size / c.patch, n = grid * grid, pd = c.channels * c.patch * c.patch;
  const auto pidx = patchify_index(batch, c.channels, c.image_size, c.patch);
  Tensor h = silu(patch_in_.forward(gather(images, pidx, {batch * n, pd})));
  h = add(h, gather_rows(pos_embed_, tile_index(batch, n)));
  h = add(h, mlp_out_.forward(silu(mlp_in_.forward(norm_mlp_.forward(h)))));
  const Tensor kv = norm_kv_.forward(h);
  const Tensor q = w_q_.forward(gather_rows(queries_, tile_index(batch, c.query_tokens)));
  const Tensor pooled = attention(q, w_k_.forward(kv), w_v_.forward(kv), batch, c.heads);
  return norm_out_.forward(out_.forward(pooled));
}

ParamList ImageEncoder::parameters() const {
  ParamList out;
  patch_in_.collect("image.patch_in", out);
  out.push_back({"image.pos_embed", pos_embed_});
  norm_mlp_.collect("image.norm_mlp", out);
  mlp_in_.collect("image.mlp_in", out);
  mlp_out_.collect("image.mlp_out", out);
  norm_kv_.collect("image.norm_kv", out);
  out.push_back({"image.queries", queries_});
  w_q_.collect("image.w_q", out);
  w_k_.collect("image.w_k", out);
  w_v_.collect("image.w_v", out);
  out_.collect("image.out", out);
  norm_out_.collect("image.norm_out", out);
  return out;
}

namespace {

void check_pixels(const Tensor& images) {
  for (real v : images.data()) {
    if (!std::isfinite(v) || v < real(-1) - real(1e-6) || v > real(1) + real(1e-6)) {
      throw InputError("encode_image: pixel value " + std::to_string(double(v)) + " outside [-1, 1]");
    }
  }
}

}  // namespace

std::vector<ImageEmbedding> encode_images(const ImageEncoder& encoder, const Tensor& images) {
  check_pixels(images);
  const Tensor tokens = encoder.forward(images);
  const std::size_t batch = images.dim(0), li = encoder.config().query_tokens, w = encoder.config().out_width;
  std::vector<ImageEmbedding> out(batch);
  const auto td = tokens.data();
  for (std::size_t b = 0; b < batch; ++b) {
    out[b].tokens = Tensor({li, w}, std::vector<real>(td.begin() + static_cast<std::ptrdiff_t>(b * li * w),
                                                      td.begin() + static_cast<std::ptrdiff_t>((b + 1) * li * w)));
  }
  return out;
}

ImageEmbedding encode_image(const ImageEncoder& encoder, const Tensor& image) {
  const auto& c = encoder.config();
  if (image.rank() != 3 || image.dim(0) != c.channels || image.dim(1) != c.image_size ||
      image.dim(2) != c.image_size) {
    throw InputError("encode_image: image " + shape_string(image.shape()) + " does not match [" +
                     std::to_string(c.channels) + " x " + std::to_string(c.image_size) + " x " +
                     std::to_string(c.image_size) + "]");
  }
  return encode_images(encoder, reshape(image, {1, c.channels, c.image_size, c.image_size})).front();
}

ImageEmbedding average_embeddings(std::span<const ImageEmbedding> embeddings) {
  if (embeddings.empty()) throw ParameterError("average_embeddings: empty embedding list");
  const Shape& shape = embeddings.front().tokens.shape();
  for (const auto& e : embeddings) {
    if (e.tokens.shape() != shape) {
      throw DimensionError("average_embeddings: mixed shapes " + shape_string(shape) + " and " +
                           shape_string(e.tokens.shape()));
    }
    if (e.source != ImageEmbedding::Source::single) {
      throw ParameterError("average_embeddings: inputs must be single-image embeddings");
    }
  }
  const std::size_t n = embeddings.size(), count = shape_numel(shape);
  std::vector<real> out(count);
  std::vector<double> column(n);
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t k = 0; k < n; ++k) column[k] = double(embeddings[k].tokens.data()[i]);
    std::sort(column.begin(), column.end());
    double total = 0;
    for (double v : column) total += v;
    out[i] = static_cast<real>(total / double(n));
  }
  ImageEmbedding avg;
  avg.tokens = Tensor(shape, std::move(out));
  avg.source = ImageEmbedding::Source::averaged;
  avg.count = n;
  return avg;
}

Tensor stack_embeddings(std::span<const ImageEmbedding> embeddings) {
  if (embeddings.empty()) throw ParameterError("stack_embeddings: empty list");
  const auto& shape = embeddings.front().tokens.shape();
  std::vector<real> out;
  out.reserve(embeddings.size() * shape_numel(shape));
  for (const auto& e : embeddings) {
    if (e.tokens.shape() != shape) throw DimensionError("stack_embeddings: mixed shapes");
    out.insert(out.end(), e.tokens.data().begin(), e.tokens.data().end());
  }
  return Tensor({embeddings.size() * shape[0], shape[1]}, std::move(out));
}

Tensor repeat_embedding(const ImageEmbedding& embedding, std::size_t batch) {
  return gather_rows(embedding.tokens, tile_index(batch, embedding.tokens.dim(0))).detach();
}

STYLELAB_END_PRECISION
}  // namespace stylelab
