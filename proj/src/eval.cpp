#include "stylelab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "stylelab/io.hpp"
#include "stylelab/optim.hpp"
#include "stylelab/parallel.hpp"

namespace stylelab {
STYLELAB_BEGIN_PRECISION

using nlohmann::json;

namespace {

constexpr std::string_view kContentMagic = "STLCPRB1";

std::vector<std::vector<double>> embed_flat(const ImageEncoder& encoder, const Tensor& images) {
  if (images.rank() != 4 || images.dim(0) == 0) {
    throw ParameterError("expected a non-empty [B x C x H x W] image batch, got " + shape_string(images.shape()));
  }
  const std::size_t B = images.dim(0);
  std::vector<std::vector<double>> out(B);
  // Encode in chunks to bound memory.
  const std::size_t chunk = 64;
  for (std::size_t start = 0; start < B; start += chunk) {
    const std::size_t n = std::min(chunk, B - start);
    const std::size_t per = images.numel() / B;
    const auto d = images.data();
    Tensor part({n, images.dim(1), images.dim(2), images.dim(3)},
                std::vector<real>(d.begin() + static_cast<std::ptrdiff_t>(start * per),
                                  d.begin() + static_cast<std::ptrdiff_t>((start + n) * per)));
    const Tensor e = encoder.forward(part);
    const std::size_t flat = e.numel() / n;
    for (std::size_t b = 0; b < n; ++b) {
      out[start + b].assign(e.data().begin() + static_cast<std::ptrdiff_t>(b * flat),
                            e.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * flat));
    }
  }
  return out;
}

int subject_id(const std::string& s) {
  const auto& names = subject_names();
  const auto it = std::find(names.begin(), names.end(), s);
  if (it == names.end()) throw VocabularyError("unknown subject '" + s + "'");
  return static_cast<int>(it - names.begin());
}

std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * double(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

// ---- StyleProbe -------------------------------------------------------------------------

void StyleProbe::set_centroid(const std::string& style, std::vector<double> centroid) {
  if (!centroids_.empty() && centroid.size() != centroids_.front().size()) {
    throw DimensionError("centroid for " + style + " has " + std::to_string(centroid.size()) + " entries, expected " +
                         std::to_string(centroids_.front().size()));
  }
  const auto it = std::find(styles_.begin(), styles_.end(), style);
  if (it != styles_.end()) {
    centroids_[static_cast<std::size_t>(it - styles_.begin())] = std::move(centroid);
    return;
  }
  styles_.push_back(style);
  centroids_.push_back(std::move(centroid));
}

StyleProbe StyleProbe::fit(const ImageEncoder& encoder, std::span<const Tensor> images,
                           std::span<const std::string> labels) {
  if (images.size() != labels.size() || images.empty()) {
    throw ParameterError("StyleProbe::fit: need one label per image and at least one image");
  }
  const auto emb = embed_flat(encoder, stack_images(images));
  StyleProbe probe;
  std::vector<std::string> order;
  for (const auto& l : labels)
    if (std::find(order.begin(), order.end(), l) == order.end()) order.push_back(l);
  for (const auto& style : order) {
    std::vector<double> c(emb.front().size(), 0.0);
    std::size_t n = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] != style) continue;
      for (std::size_t k = 0; k < c.size(); ++k) c[k] += emb[i][k];
      ++n;
    }
    for (auto& v : c) v /= double(n);
    probe.set_centroid(style, std::move(c));
  }
  return probe;
}

const std::vector<double>& StyleProbe::centroid(const std::string& style) const {
  const auto it = std::find(styles_.begin(), styles_.end(), style);
  if (it == styles_.end()) throw StateError("no centroid for style '" + style + "'");
  return centroids_[static_cast<std::size_t>(it - styles_.begin())];
}

std::string StyleProbe::predict(std::span<const real> embedding) const {
  if (styles_.empty()) throw StateError("style probe has no centroids");
  double best = std::numeric_limits<double>::infinity();
  std::size_t arg = 0;
  for (std::size_t s = 0; s < centroids_.size(); ++s) {
    const auto& c = centroids_[s];
    if (c.size() != embedding.size()) throw DimensionError("embedding size does not match the style centroids");
    double d = 0.0;
    for (std::size_t k = 0; k < c.size(); ++k) {
      const double diff = double(embedding[k]) - c[k];
      d += diff * diff;
    }
    if (d < best) {
      best = d;
      arg = s;
    }
  }
  return styles_[arg];
}

std::vector<std::string> StyleProbe::predict(const ImageEncoder& encoder, const Tensor& images) const {
  if (styles_.empty()) throw StateError("style probe has no centroids");
  const auto emb = embed_flat(encoder, images);
  std::vector<std::string> out;
  out.reserve(emb.size());
  for (const auto& e : emb) {
    std::vector<real> r(e.begin(), e.end());
    out.push_back(predict(r));
  }
  return out;
}

double StyleProbe::style_score(const ImageEncoder& encoder, const Tensor& images, const std::string& target) const {
  if (!images.defined() || images.rank() != 4 || images.dim(0) == 0) {
    throw ParameterError("style_score: empty image batch");
  }
  (void)centroid(target);
  const auto pred = predict(encoder, images);
  const auto hits = std::count(pred.begin(), pred.end(), target);
  return double(hits) / double(pred.size());
}

std::string StyleProbe::to_json() const {
  json j = json::object();
  j["styles"] = styles_;
  j["centroids"] = centroids_;
  return j.dump();
}

StyleProbe StyleProbe::from_json(const std::string& text) {
  StyleProbe p;
  try {
    const json j = json::parse(text);
    const auto styles = j.at("styles").get<std::vector<std::string>>();
    const auto cents = j.at("centroids").get<std::vector<std::vector<double>>>();
    if (styles.size() != cents.size()) throw FormatError("style probe: styles/centroids length mismatch", 0);
    for (std::size_t i = 0; i < styles.size(); ++i) p.set_centroid(styles[i], cents[i]);
  } catch (const json::exception& e) {
    throw FormatError(std::string("style probe: ") + e.what(), 0);
  }
  return p;
}

// ---- ContentProbe -----------------------------------------------------------------------

StyleSpec random_style(Rng& rng) {
  StyleSpec s;
  s.id = "random";
  auto color = [&] { return Rgb{rng.uniform(), rng.uniform(), rng.uniform()}; };
  auto dist = [](const Rgb& a, const Rgb& b) {
    return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]));
  };
  s.palette[0] = color();
  do {
    s.palette[1] = color();
  } while (dist(s.palette[0], s.palette[1]) < 0.35);
  s.palette[2] = color();
  s.background = static_cast<Background>(rng.index(3));
  s.stroke_px = static_cast<int>(rng.index(4));
  s.distortion = rng.uniform(0.0, 0.4);
  s.seed = rng.next_u64();
  return s;
}

Tensor ContentProbe::logits(const Tensor& flat) const {
  return add_bias(matmul(silu(add_bias(matmul(flat, w1_), b1_)), w2_), b2_);
}

void ContentProbe::train(std::span<const StyleSpec> styles, const ContentProbeOptions& options) {
  const auto& subjects = subject_names();
  const std::size_t K = subjects.size(), D = kChannels * kImageSize * kImageSize;
  Rng rng(options.seed);

  struct Item {
    StyleSpec style;
    int subject;
    SizeClass size;
    std::uint64_t seed;
  };
  std::vector<Item> items(options.pool);
  const SizeClass sizes[] = {SizeClass::small, SizeClass::medium, SizeClass::large};
  for (auto& it : items) {
    it.style = (!styles.empty() && rng.uniform() < 0.5) ? styles[rng.index(styles.size())] : random_style(rng);
    it.subject = static_cast<int>(rng.index(K));
    it.size = sizes[rng.index(3)];
    it.seed = rng.next_u64();
  }
  std::vector<Tensor> pool(items.size());
  parallel_for(items.size(), [&](std::size_t i) {
    pool[i] = render_sample(items[i].style, subjects[static_cast<std::size_t>(items[i].subject)], items[i].seed,
                            items[i].size);
  });

  Rng init(mix_seed(options.seed, 7));
  w1_ = random_tensor({D, options.hidden}, init, 1.0 / std::sqrt(double(D)));
  b1_ = Tensor::zeros({options.hidden});
  w2_ = random_tensor({options.hidden, K}, init, 1.0 / std::sqrt(double(options.hidden)));
  b2_ = Tensor::zeros({K});
  std::vector<Tensor> params{w1_, b1_, w2_, b2_};
  for (auto& p : params) p.set_requires_grad(true);
  AdamOptions ao;
  ao.lr = options.lr;
  Adam adam(params, ao);

  const std::size_t B = options.batch;
  for (std::size_t step = 0; step < options.steps; ++step) {
    std::vector<real> x(B * D), target(B * K, real(0));
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t i = rng.index(pool.size());
      const double sigma = rng.uniform(0.0, options.max_noise);
      const auto src = pool[i].data();
      for (std::size_t k = 0; k < D; ++k) x[b * D + k] = static_cast<real>(double(src[k]) + sigma * rng.normal());
      target[b * K + static_cast<std::size_t>(items[i].subject)] = real(1);
    }
    ComputeGraph g;
    {
      auto scope = g.activate();
      const Tensor loss = mse_loss(softmax_rows(logits(Tensor({B, D}, std::move(x)))), Tensor({B, K}, target));
      adam.zero_grad();
      g.backward(loss);
    }
    adam.step();
  }
  for (auto& p : params) p.set_requires_grad(false);
}

std::vector<int> ContentProbe::predict(const Tensor& images) const {
  if (!trained()) throw StateError("content probe is not trained");
  if (!images.defined() || images.rank() != 4 || images.dim(0) == 0) {
    throw ParameterError("content probe: expected a non-empty [B x C x H x W] batch");
  }
  const std::size_t B = images.dim(0), D = images.numel() / B;
  if (D != w1_.dim(0)) throw DimensionError("content probe: image size does not match the probe input");
  const Tensor out = logits(reshape(images, {B, D}));
  const std::size_t K = out.dim(1);
  std::vector<int> pred(B);
  for (std::size_t b = 0; b < B; ++b) {
    const auto row = out.data().subspan(b * K, K);
    pred[b] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return pred;
}

double ContentProbe::content_score(const Tensor& images, std::span<const std::string> subjects) const {
  const auto pred = predict(images);
  if (subjects.size() != pred.size()) throw DimensionError("content_score: one subject per image required");
  std::size_t hits = 0;
  for (std::size_t b = 0; b < pred.size(); ++b) hits += pred[b] == subject_id(subjects[b]) ? 1 : 0;
  return double(hits) / double(pred.size());
}

void ContentProbe::save(const std::filesystem::path& path) const {
  if (!trained()) throw StateError("content probe is not trained");
  const std::vector<Tensor> ts{w1_, b1_, w2_, b2_};
  const json meta{{"version", 1}, {"subjects", subject_names()}};
  write_file_atomic(path, encode_bundle(kContentMagic, meta.dump(), ts));
}

ContentProbe ContentProbe::load(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  const Bundle b = decode_bundle(bytes, kContentMagic);
  if (b.tensors.size() != 4) throw FormatError("content probe file must hold 4 tensors", bytes.size());
  ContentProbe p;
  p.w1_ = b.tensors[0];
  p.b1_ = b.tensors[1];
  p.w2_ = b.tensors[2];
  p.b2_ = b.tensors[3];
  if (p.w1_.rank() != 2 || p.w2_.rank() != 2 || p.w1_.dim(1) != p.w2_.dim(0) || p.b1_.numel() != p.w1_.dim(1) ||
      p.b2_.numel() != p.w2_.dim(1) || p.w2_.dim(1) != subject_names().size()) {
    throw FormatError("content probe tensors have inconsistent shapes", 0);
  }
  return p;
}

// ---- statistics and reports -------------------------------------------------------------

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DimensionError("spearman: length mismatch");
  if (x.size() < 2) return 0.0;
  const auto rx = ranks(x), ry = ranks(y);
  const double n = double(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

std::string EvalReport::to_json() const {
  json curve_j = json::array();
  for (const auto& p : curve) {
    curve_j.push_back({{"multiplier", p.multiplier}, {"style", p.style_accuracy}, {"content", p.content_accuracy}});
  }
  const json j{{"style_accuracy", style_accuracy},
               {"content_accuracy", content_accuracy},
               {"samples", samples},
               {"config_hash", config_hash},
               {"target_style", target_style},
               {"spearman_style", spearman_style},
               {"curve", curve_j}};
  return j.dump(2) + "\n";
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "multiplier,style_accuracy,content_accuracy\n";
  for (const auto& p : curve) os << p.multiplier << "," << p.style_accuracy << "," << p.content_accuracy << "\n";
  return os.str();
}

std::string EvalReport::to_gnuplot() const {
  std::ostringstream os;
  os << "# multiplier style content\n";
  for (const auto& p : curve) os << p.multiplier << " " << p.style_accuracy << " " << p.content_accuracy << "\n";
  return os.str();
}

std::vector<std::uint8_t> plot_sweep_ppm(const EvalReport& report, std::size_t width, std::size_t height) {
  std::vector<std::uint8_t> px(width * height * 3, 255);
  auto put = [&](long x, long y, std::array<std::uint8_t, 3> c) {
    if (x < 0 || y < 0 || x >= long(width) || y >= long(height)) return;
    const std::size_t i = (std::size_t(y) * width + std::size_t(x)) * 3;
    px[i] = c[0];
    px[i + 1] = c[1];
    px[i + 2] = c[2];
  };
  const long m = 16;
  const long w = long(width) - 2 * m, h = long(height) - 2 * m;
  auto to_x = [&](double v) { return m + long(std::lround(v * double(w))); };
  auto to_y = [&](double v) { return m + h - long(std::lround(std::clamp(v, 0.0, 1.0) * double(h))); };
  for (long x = m; x <= m + w; ++x) put(x, m + h, {0, 0, 0});
  for (long y = m; y <= m + h; ++y) put(m, y, {0, 0, 0});
  for (int k = 1; k < 4; ++k)
    for (long x = m; x <= m + w; x += 3) put(x, to_y(k / 4.0), {200, 200, 200});
  auto line = [&](long x0, long y0, long x1, long y1, std::array<std::uint8_t, 3> c) {
    const long n = std::max(std::abs(x1 - x0), std::abs(y1 - y0));
    for (long i = 0; i <= n; ++i) {
      const double f = n == 0 ? 0.0 : double(i) / double(n);
      const long x = x0 + long(std::lround(f * double(x1 - x0)));
      const long y = y0 + long(std::lround(f * double(y1 - y0)));
      put(x, y, c);
      put(x, y + 1, c);
    }
  };
  for (std::size_t i = 0; i + 1 < report.curve.size(); ++i) {
    const auto& a = report.curve[i];
    const auto& b = report.curve[i + 1];
    line(to_x(a.multiplier), to_y(a.style_accuracy), to_x(b.multiplier), to_y(b.style_accuracy), {200, 30, 30});
    line(to_x(a.multiplier), to_y(a.content_accuracy), to_x(b.multiplier), to_y(b.content_accuracy), {30, 60, 200});
  }
  const std::string header = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), px.begin(), px.end());
  return out;
}

std::vector<double> multiplier_grid(double step) {
  if (!(step > 0.0 && step <= 1.0)) throw ParameterError("multiplier grid step must be in (0, 1]");
  const long n = std::lround(1.0 / step);
  std::vector<double> grid;
  for (long i = 0; i <= n; ++i) grid.push_back(std::min(1.0, double(i) * step));
  return grid;
}

GenerationSpec make_generation_spec(std::span<const std::string> subjects, std::size_t samples, std::uint64_t seed,
                                    int steps) {
  if (subjects.empty()) throw ParameterError("generation spec needs at least one subject");
  GenerationSpec spec;
  spec.steps = steps;
  for (std::size_t i = 0; i < samples; ++i) {
    spec.prompts.push_back(Prompt{subjects[i % subjects.size()], {}});
    spec.seeds.push_back(mix_seed(seed, 1000 + i));
  }
  return spec;
}

Scores score_images(const StyleModel& model, const Tensor& images, const GenerationSpec& spec,
                    const StyleProbe& style_probe, const ContentProbe& content_probe, const std::string& target) {
  std::vector<std::string> subjects;
  for (const auto& p : spec.prompts) subjects.push_back(p.subject);
  return {style_probe.style_score(model.image_encoder, images, target), content_probe.content_score(images, subjects)};
}

EvalReport multiplier_sweep(StyleModel& model, std::span<const double> scales, const ImageEmbedding& image,
                            const GenerationSpec& spec, std::span<const double> grid, const StyleProbe& style_probe,
                            const ContentProbe& content_probe, const std::string& target) {
  if (grid.empty()) throw ParameterError("multiplier sweep: empty grid");
  for (double m : grid)
    if (!(m >= 0.0 && m <= 1.0)) throw ParameterError("multiplier sweep: grid values must lie in [0, 1]");
  EvalReport report;
  report.samples = spec.seeds.size();
  report.target_style = target;
  std::vector<double> xs, ys;
  for (double m : grid) {
    set_layer_scales(model.denoiser, scales, m);
    const Tensor images = generate(model, spec.prompts, &image, spec.seeds, spec.steps);
    const Scores s = score_images(model, images, spec, style_probe, content_probe, target);
    report.curve.push_back({m, s.style, s.content});
    xs.push_back(m);
    ys.push_back(s.style);
  }
  set_layer_scales(model.denoiser, scales, 1.0);
  const auto last = std::max_element(report.curve.begin(), report.curve.end(),
                                     [](const SweepPoint& a, const SweepPoint& b) { return a.multiplier < b.multiplier; });
  report.style_accuracy = last->style_accuracy;
  report.content_accuracy = last->content_accuracy;
  report.spearman_style = spearman(xs, ys);
  return report;
}

STYLELAB_END_PRECISION
}  // namespace stylelab
