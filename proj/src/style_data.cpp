#include "stylelab/style_data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "json.hpp"

#include "stylelab/io.hpp"
#include "stylelab/parallel.hpp"
#include "stylelab/rng.hpp"

namespace stylelab {
STYLELAB_BEGIN_PRECISION

using nlohmann::json;

namespace {

constexpr int kSuper = 4;  // supersamples per axis

struct Placement {
  double cx, cy, radius, phase;
};

Placement placement_for(SizeClass size, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x5111));
  Placement p;
  p.cx = rng.uniform(-0.12, 0.12);
  p.cy = rng.uniform(-0.12, 0.12);
  p.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  switch (size) {
    case SizeClass::small: p.radius = 0.5; break;
    case SizeClass::medium: p.radius = 0.65; break;
    case SizeClass::large: p.radius = 0.8; break;
  }
  return p;
}

int subject_index(const std::string& subject) {
  const auto& names = subject_names();
  const auto it = std::find(names.begin(), names.end(), subject);
  if (it == names.end()) {
    std::string known;
    for (const auto& n : names) known += (known.empty() ? "" : ", ") + n;
    throw VocabularyError("unknown subject '" + subject + "'; known subjects: " + known);
  }
  return static_cast<int>(it - names.begin());
}

// Canonical shapes in local coordinates where the shape spans roughly [-1, 1].
bool inside_canonical(int subject, double x, double y) {
  const double rho = std::hypot(x, y);
  switch (subject) {
    case 0:  // circle
      return rho <= 1.0;
    case 1:  // square
      return std::max(std::abs(x), std::abs(y)) <= 0.85;
    case 2:  // triangle, apex up
      return y <= 0.8 && y >= -0.95 && std::abs(x) <= (y + 0.95) / 1.75 * 1.0;
    case 3:  // cross
      return (std::abs(x) <= 0.3 && std::abs(y) <= 0.95) || (std::abs(y) <= 0.3 && std::abs(x) <= 0.95);
    case 4: {  // five-pointed star
      const double theta = std::atan2(y, x) + std::numbers::pi / 2.0;
      const double sector = 2.0 * std::numbers::pi / 5.0;
      double a = std::fmod(theta, sector);
      if (a < 0) a += sector;
      const double f = std::abs(a - sector / 2.0) / (sector / 2.0);  // 1 at tips, 0 between
      return rho <= 0.42 + 0.58 * f * f;
    }
    case 5:  // ring
      return rho <= 1.0 && rho >= 0.55;
    default:
      return false;
  }
}

bool inside(int subject, double distortion, const Placement& pl, double u, double v) {
  const double px = (u - pl.cx) / pl.radius;
  const double py = (v - pl.cy) / pl.radius;
  const double a = distortion;
  const double qx = px * (1.0 + a) + 0.35 * a * std::sin(2.5 * py + pl.phase);
  const double qy = py / (1.0 + a);
  return inside_canonical(subject, qx, qy);
}

// Fractional coverage per pixel from kSuper x kSuper samples.
std::vector<double> coverage(int subject, double distortion, SizeClass size, std::uint64_t seed) {
  const Placement pl = placement_for(size, seed);
  std::vector<double> cov(kImageSize * kImageSize);
  const double half = kImageSize / 2.0;
  for (std::size_t y = 0; y < kImageSize; ++y) {
    for (std::size_t x = 0; x < kImageSize; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy)
        for (int sx = 0; sx < kSuper; ++sx) {
          const double u = (double(x) + (sx + 0.5) / kSuper) / half - 1.0;
          const double v = (double(y) + (sy + 0.5) / kSuper) / half - 1.0;
          hits += inside(subject, distortion, pl, u, v) ? 1 : 0;
        }
      cov[y * kImageSize + x] = double(hits) / double(kSuper * kSuper);
    }
  }
  return cov;
}

std::vector<std::uint8_t> hard_mask(const std::vector<double>& cov) {
  std::vector<std::uint8_t> mask(cov.size());
  for (std::size_t i = 0; i < cov.size(); ++i) mask[i] = cov[i] >= 0.5 ? 1 : 0;
  return mask;
}

// Pixels of `mask` farther than `radius` pixels from any outside pixel.
std::vector<std::uint8_t> erode(const std::vector<std::uint8_t>& mask, int radius) {
  if (radius <= 0) return mask;
  const int n = static_cast<int>(kImageSize);
  std::vector<std::uint8_t> out(mask.size(), 0);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      if (!mask[y * n + x]) continue;
      bool keep = true;
      for (int dy = -radius; dy <= radius && keep; ++dy)
        for (int dx = -radius; dx <= radius && keep; ++dx) {
          if (dx * dx + dy * dy > radius * radius) continue;
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= n || xx < 0 || xx >= n || !mask[yy * n + xx]) keep = false;
        }
      out[y * n + x] = keep ? 1 : 0;
    }
  }
  return out;
}

const char* background_name(Background b) {
  switch (b) {
    case Background::solid: return "solid";
    case Background::stripes: return "stripes";
    case Background::grain: return "grain";
  }
  return "solid";
}

Background background_from(const std::string& name) {
  if (name == "solid") return Background::solid;
  if (name == "stripes") return Background::stripes;
  if (name == "grain") return Background::grain;
  throw FormatError("unknown background pattern '" + name + "'", 0);
}

const char* split_name(Split s) { return s == Split::pretrain ? "pretrain" : "heldout"; }

json style_to_json(const StyleSpec& s) {
  json palette = json::array();
  for (const auto& c : s.palette) palette.push_back({c[0], c[1], c[2]});
  return {{"id", s.id},
          {"palette", palette},
          {"background", background_name(s.background)},
          {"stroke_px", s.stroke_px},
          {"distortion", s.distortion},
          {"seed", s.seed}};
}

StyleSpec style_from_json(const json& j) {
  StyleSpec s;
  s.id = j.at("id").get<std::string>();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 3; ++c) s.palette[i][c] = j.at("palette").at(i).at(c).get<double>();
  s.background = background_from(j.at("background").get<std::string>());
  s.stroke_px = j.at("stroke_px").get<int>();
  s.distortion = j.at("distortion").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.validate();
  return s;
}

}  // namespace

void StyleSpec::validate() const {
  if (id.empty()) throw ParameterError("StyleSpec: empty id");
  for (const auto& c : palette)
    for (double v : c)
      if (!(v >= 0.0 && v <= 1.0)) throw ParameterError("StyleSpec " + id + ": palette channel outside [0, 1]");
  if (stroke_px < 0 || stroke_px > 3) throw ParameterError("StyleSpec " + id + ": stroke width outside [0, 3]");
  if (!(distortion >= 0.0 && distortion <= 0.4)) {
    throw ParameterError("StyleSpec " + id + ": distortion outside [0, 0.4]");
  }
}

const std::vector<std::string>& subject_names() {
  static const std::vector<std::string> names{"circle", "square", "triangle", "cross", "star", "ring"};
  return names;
}

bool is_subject(const std::string& token) {
  const auto& n = subject_names();
  return std::find(n.begin(), n.end(), token) != n.end();
}

std::string size_modifier(SizeClass size) {
  switch (size) {
    case SizeClass::small: return "small";
    case SizeClass::large: return "large";
    case SizeClass::medium: break;
  }
  return "";
}

SizeClass size_from_modifier(const std::string& modifier) {
  if (modifier.empty()) return SizeClass::medium;
  if (modifier == "small") return SizeClass::small;
  if (modifier == "large") return SizeClass::large;
  throw VocabularyError("unknown size modifier '" + modifier + "'; known modifiers: small, large");
}

std::vector<StyleSpec> default_pretrain_styles() {
  return {
      {"sunset", {{{0.95, 0.85, 0.60}, {0.85, 0.25, 0.20}, {0.30, 0.10, 0.10}}}, Background::solid, 1, 0.0, 11},
      {"ocean", {{{0.10, 0.20, 0.45}, {0.40, 0.85, 0.90}, {0.95, 0.95, 1.00}}}, Background::stripes, 2, 0.1, 12},
      {"forest", {{{0.15, 0.35, 0.15}, {0.90, 0.80, 0.30}, {0.10, 0.10, 0.05}}}, Background::grain, 1, 0.0, 13},
      {"candy", {{{1.00, 0.80, 0.90}, {0.60, 0.20, 0.70}, {1.00, 1.00, 1.00}}}, Background::stripes, 0, 0.2, 14},
      {"mono", {{{0.90, 0.90, 0.90}, {0.10, 0.10, 0.10}, {0.50, 0.50, 0.50}}}, Background::solid, 2, 0.0, 15},
      {"neon", {{{0.05, 0.05, 0.10}, {0.20, 1.00, 0.30}, {1.00, 0.20, 0.80}}}, Background::solid, 1, 0.15, 16},
      {"desert", {{{0.85, 0.65, 0.40}, {0.50, 0.30, 0.15}, {0.95, 0.90, 0.80}}}, Background::grain, 1, 0.05, 17},
      {"ice", {{{0.80, 0.90, 1.00}, {0.20, 0.40, 0.80}, {0.05, 0.10, 0.30}}}, Background::stripes, 1, 0.1, 18},
  };
}

std::vector<StyleSpec> default_heldout_styles() {
  return {
      {"ember", {{{0.25, 0.05, 0.05}, {1.00, 0.60, 0.10}, {1.00, 0.95, 0.60}}}, Background::grain, 1, 0.3, 21},
      {"mint", {{{0.75, 0.95, 0.85}, {0.10, 0.50, 0.45}, {0.90, 0.30, 0.30}}}, Background::solid, 2, 0.25, 22},
  };
}

std::vector<std::uint8_t> silhouette_mask(const std::string& subject, double distortion, SizeClass size,
                                          std::uint64_t seed) {
  return hard_mask(coverage(subject_index(subject), distortion, size, seed));
}

std::vector<std::uint8_t> canonical_mask(const std::string& subject, SizeClass size, std::uint64_t seed) {
  const int k = subject_index(subject);
  const Placement pl = placement_for(size, seed);
  std::vector<double> cov(kImageSize * kImageSize);
  const double half = kImageSize / 2.0;
  for (std::size_t y = 0; y < kImageSize; ++y)
    for (std::size_t x = 0; x < kImageSize; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy)
        for (int sx = 0; sx < kSuper; ++sx) {
          const double u = (double(x) + (sx + 0.5) / kSuper) / half - 1.0;
          const double v = (double(y) + (sy + 0.5) / kSuper) / half - 1.0;
          hits += inside_canonical(k, (u - pl.cx) / pl.radius, (v - pl.cy) / pl.radius) ? 1 : 0;
        }
      cov[y * kImageSize + x] = double(hits) / double(kSuper * kSuper);
    }
  return hard_mask(cov);
}

Tensor render_sample(const StyleSpec& style, const std::string& subject, std::uint64_t seed, SizeClass size) {
  style.validate();
  const auto cov = coverage(subject_index(subject), style.distortion, size, seed);
  const auto mask = hard_mask(cov);
  const auto core = erode(mask, style.stroke_px);
  const auto& bg = style.palette[0];
  const auto& fill = style.palette[1];
  const auto& stroke = style.palette[2];

  Rng grain(mix_seed(seed, 0x6a1));
  Rng layout(style.seed);
  const double angle = double(layout.index(4)) * std::numbers::pi / 4.0;
  const double ca = std::cos(angle), sa = std::sin(angle);

  const std::size_t n = kImageSize;
  std::vector<real> out(kChannels * n * n);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const std::size_t i = y * n + x;
      Rgb back = bg;
      if (style.background == Background::stripes) {
        const double proj = double(x) * ca + double(y) * sa;
        if (static_cast<long>(std::floor(proj / 3.0)) % 2 != 0) {
          for (auto& c : back) c *= 0.7;
        }
      } else if (style.background == Background::grain) {
        const double g = 0.07 * grain.normal();
        for (auto& c : back) c = std::clamp(c + g, 0.0, 1.0);
      }
      const Rgb& shape = core[i] || style.stroke_px == 0 ? fill : stroke;
      for (std::size_t c = 0; c < kChannels; ++c) {
        const double v = back[c] * (1.0 - cov[i]) + shape[c] * cov[i];
        out[c * n * n + i] = static_cast<real>(std::clamp(2.0 * v - 1.0, -1.0, 1.0));
      }
    }
  }
  return Tensor({kChannels, n, n}, std::move(out));
}

// ---- PPM ---------------------------------------------------------------------

std::vector<std::uint8_t> encode_ppm(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw DimensionError("encode_ppm: expected [3 x H x W], got " + shape_string(image.shape()));
  }
  const std::size_t h = image.dim(1), w = image.dim(2);
  const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.reserve(bytes.size() + 3 * h * w);
  const auto d = image.data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp((double(d[(c * h + y) * w + x]) + 1.0) * 0.5, 0.0, 1.0);
        bytes.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
      }
  return bytes;
}

Tensor decode_ppm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> long {
    skip_space();
    const std::size_t start = pos;
    long v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) v = v * 10 + (bytes[pos++] - '0');
    if (pos == start) throw FormatError("PPM: expected integer", start);
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw FormatError("PPM: missing P6 magic", 0);
  pos = 2;
  const long w = read_int(), h = read_int(), maxval = read_int();
  if (maxval != 255 || w <= 0 || h <= 0) throw FormatError("PPM: unsupported header", pos);
  ++pos;  // single whitespace before raster
  const std::size_t need = static_cast<std::size_t>(3 * w * h);
  if (bytes.size() < pos + need) throw FormatError("PPM: truncated raster", pos);
  std::vector<real> out(need);
  const auto hh = static_cast<std::size_t>(h), ww = static_cast<std::size_t>(w);
  for (std::size_t y = 0; y < hh; ++y)
    for (std::size_t x = 0; x < ww; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        out[(c * hh + y) * ww + x] = static_cast<real>(double(bytes[pos++]) / 255.0 * 2.0 - 1.0);
  return Tensor({3, hh, ww}, std::move(out));
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  write_file_atomic(path, encode_ppm(image));
}

Tensor read_ppm(const std::filesystem::path& path) { return decode_ppm(read_file_bytes(path)); }

Tensor quantize_image(const Tensor& image) { return decode_ppm(encode_ppm(image)); }

// ---- corpus -------------------------------------------------------------------------

std::string CorpusManifest::to_json() const {
  json j;
  j["version"] = 1;
  j["seed"] = seed;
  j["styles"] = json::array();
  for (const auto& s : styles) j["styles"].push_back(style_to_json(s));
  j["entries"] = json::array();
  for (const auto& e : entries) {
    j["entries"].push_back({{"path", e.path},
                            {"subject", e.subject},
                            {"modifier", e.modifier},
                            {"style", e.style},
                            {"seed", e.seed},
                            {"split", split_name(e.split)},
                            {"content_hash", e.content_hash}});
  }
  return j.dump(1);
}

CorpusManifest CorpusManifest::from_json(const std::string& text) {
  CorpusManifest m;
  try {
    const json j = json::parse(text);
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& s : j.at("styles")) m.styles.push_back(style_from_json(s));
    for (const auto& e : j.at("entries")) {
      CorpusEntry ce;
      ce.path = e.at("path").get<std::string>();
      ce.subject = e.at("subject").get<std::string>();
      ce.modifier = e.at("modifier").get<std::string>();
      ce.style = e.at("style").get<std::string>();
      ce.seed = e.at("seed").get<std::uint64_t>();
      const auto split = e.at("split").get<std::string>();
      if (split != "pretrain" && split != "heldout") throw FormatError("manifest: unknown split " + split, 0);
      ce.split = split == "pretrain" ? Split::pretrain : Split::heldout;
      ce.content_hash = e.at("content_hash").get<std::string>();
      m.entries.push_back(std::move(ce));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what(), 0);
  }
  return m;
}

std::string CorpusManifest::hash() const {
  Fnv1a h;
  h.update(to_json());
  return h.hex();
}

const StyleSpec& CorpusManifest::style(const std::string& id) const {
  for (const auto& s : styles)
    if (s.id == id) return s;
  throw ParameterError("unknown style id '" + id + "'");
}

std::vector<const CorpusEntry*> CorpusManifest::select(Split split, const std::string& style_id) const {
  std::vector<const CorpusEntry*> out;
  for (const auto& e : entries)
    if (e.split == split && (style_id.empty() || e.style == style_id)) out.push_back(&e);
  return out;
}

bool CorpusManifest::split_disjoint() const {
  for (const auto& h : entries) {
    if (h.split != Split::heldout) continue;
    for (const auto& p : entries)
      if (p.split == Split::pretrain && p.style == h.style) return false;
  }
  return true;
}

CorpusManifest plan_corpus(const CorpusOptions& options) {
  CorpusManifest m;
  m.seed = options.seed;
  for (const auto& s : options.pretrain_styles) {
    s.validate();
    m.styles.push_back(s);
  }
  for (const auto& s : options.heldout_styles) {
    s.validate();
    for (const auto& p : options.pretrain_styles)
      if (p.id == s.id) throw ParameterError("style id '" + s.id + "' is both pretrain and held-out");
    m.styles.push_back(s);
  }
  for (std::size_t i = 0; i < m.styles.size(); ++i)
    for (std::size_t j = i + 1; j < m.styles.size(); ++j)
      if (m.styles[i].id == m.styles[j].id) throw ParameterError("duplicate style id '" + m.styles[i].id + "'");

  const auto& subjects = subject_names();
  const SizeClass sizes[] = {SizeClass::small, SizeClass::medium, SizeClass::large};
  std::uint64_t counter = 0;
  for (const auto& s : options.pretrain_styles) {
    for (const auto& subject : subjects) {
      for (std::size_t i = 0; i < options.per_cell; ++i) {
        CorpusEntry e;
        e.seed = mix_seed(options.seed, counter++);
        e.subject = subject;
        e.modifier = size_modifier(sizes[Rng(e.seed).index(3)]);
        e.style = s.id;
        e.split = Split::pretrain;
        e.path = "pretrain/" + s.id + "/" + subject + "_" + std::to_string(i) + ".ppm";
        m.entries.push_back(std::move(e));
      }
    }
  }
  for (std::size_t h = 0; h < options.heldout_styles.size(); ++h) {
    const auto& s = options.heldout_styles[h];
    for (std::size_t i = 0; i < options.heldout_count; ++i) {
      CorpusEntry e;
      e.seed = mix_seed(options.seed, counter++);
      e.subject = subjects[(i + h) % subjects.size()];
      e.modifier = "";
      e.style = s.id;
      e.split = Split::heldout;
      e.path = "heldout/" + s.id + "/" + std::to_string(i) + "_" + e.subject + ".ppm";
      m.entries.push_back(std::move(e));
    }
  }
  // Content hashes.
  std::vector<std::string> hashes(m.entries.size());
  parallel_for(m.entries.size(), [&](std::size_t i) {
    Fnv1a fh;
    const auto bytes = encode_ppm(render_entry(m, m.entries[i]));
    fh.update(bytes.data(), bytes.size());
    hashes[i] = fh.hex();
  });
  for (std::size_t i = 0; i < hashes.size(); ++i) m.entries[i].content_hash = hashes[i];
  return m;
}

Tensor render_entry(const CorpusManifest& manifest, const CorpusEntry& entry) {
  return render_sample(manifest.style(entry.style), entry.subject, entry.seed, size_from_modifier(entry.modifier));
}

CorpusManifest generate_corpus(const CorpusOptions& options, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  CorpusManifest m = plan_corpus(options);
  for (const auto& e : m.entries) {
    if (fs::exists(root / e.path)) throw IoError("refusing to overwrite existing file " + (root / e.path).string());
  }
  if (fs::exists(root / "manifest.json")) throw IoError("corpus root already holds a manifest: " + root.string());
  parallel_for(m.entries.size(), [&](std::size_t i) { write_ppm(root / m.entries[i].path, render_entry(m, m.entries[i])); });
  write_text_atomic(root / "manifest.json", m.to_json());
  return m;
}

LoadedCorpus load_corpus(const std::filesystem::path& root) {
  LoadedCorpus c;
  const auto bytes = read_file_bytes(root / "manifest.json");
  c.manifest = CorpusManifest::from_json(std::string(bytes.begin(), bytes.end()));
  c.images.resize(c.manifest.entries.size());
  for (std::size_t i = 0; i < c.images.size(); ++i) c.images[i] = read_ppm(root / c.manifest.entries[i].path);
  return c;
}

LoadedCorpus materialize_corpus(const CorpusOptions& options) {
  LoadedCorpus c;
  c.manifest = plan_corpus(options);
  c.images.resize(c.manifest.entries.size());
  parallel_for(c.images.size(), [&](std::size_t i) {
    c.images[i] = quantize_image(render_entry(c.manifest, c.manifest.entries[i]));
  });
  return c;
}

Tensor stack_images(std::span<const Tensor> images) {
  if (images.empty()) throw ParameterError("stack_images: empty list");
  const Shape& s = images.front().shape();
  std::vector<real> out;
  out.reserve(images.size() * shape_numel(s));
  for (const auto& im : images) {
    if (im.shape() != s) throw DimensionError("stack_images: mixed shapes");
    out.insert(out.end(), im.data().begin(), im.data().end());
  }
  Shape shape{images.size()};
  shape.insert(shape.end(), s.begin(), s.end());
  return Tensor(std::move(shape), std::move(out));
}

Tensor image_at(const Tensor& batch, std::size_t index) {
  const Shape s(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t per = shape_numel(s);
  const auto d = batch.data();
  return Tensor(s, std::vector<real>(d.begin() + static_cast<std::ptrdiff_t>(index * per),
                                     d.begin() + static_cast<std::ptrdiff_t>((index + 1) * per)));
}

STYLELAB_END_PRECISION
}  // namespace stylelab
