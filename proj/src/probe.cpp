#include "stylelab/probe.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "stylelab/io.hpp"

namespace stylelab {
STYLELAB_BEGIN_PRECISION

using nlohmann::json;

namespace {

constexpr std::string_view kTraceMagic = "STLTRACE";
constexpr std::uint32_t kTraceVersion = 1;

void check_same_dims(std::span<const ContributionTrace> traces) {
  for (const auto& t : traces) {
    t.validate();
    if (t.layers != traces.front().layers || t.steps != traces.front().steps) {
      throw TraceIntegrityError("traces disagree on dimensions: " + std::to_string(t.layers) + "x" +
                                std::to_string(t.steps) + " vs " + std::to_string(traces.front().layers) + "x" +
                                std::to_string(traces.front().steps));
    }
  }
}

}  // namespace

ContributionTrace::ContributionTrace(std::size_t layers_, std::size_t steps_, std::string tag_, std::string prompt)
    : layers(layers_),
      steps(steps_),
      tag(std::move(tag_)),
      prompt_id(std::move(prompt)),
      p_text(layers_ * steps_, 0.0),
      p_image(layers_ * steps_, 0.0) {}

void ContributionTrace::validate() const {
  if (layers == 0 || steps == 0) throw TraceIntegrityError("empty trace");
  if (p_text.size() != layers * steps || p_image.size() != layers * steps) {
    throw TraceIntegrityError("trace arrays do not match " + std::to_string(layers) + "x" + std::to_string(steps));
  }
  for (std::size_t i = 0; i < p_text.size(); ++i) {
    if (!(std::abs(p_text[i]) <= 1.0) || !(std::abs(p_image[i]) <= 1.0)) {
      throw TraceIntegrityError("trace entry " + std::to_string(i) + " outside [-1, 1]");
    }
  }
}

// ---- recorder ----------------------------------------------------------------------------

ContributionRecorder::ContributionRecorder(std::size_t layers, std::size_t steps, std::size_t batch)
    : layers_(layers), steps_(steps), batch_(batch), filled_(layers * steps, 0) {
  traces_.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) traces_.emplace_back(layers, steps, "", "");
}

void ContributionRecorder::begin_step(std::size_t step) {
  if (step >= steps_) {
    throw TraceIntegrityError("probe step " + std::to_string(step) + " beyond " + std::to_string(steps_));
  }
  step_ = step;
  started_ = true;
}

void ContributionRecorder::on_layer(std::size_t layer, const Tensor& z, const Tensor& z_text, const Tensor& z_image,
                                    std::size_t groups) {
  if (!started_) throw TraceIntegrityError("layer hook before the first step");
  if (layer >= layers_) throw TraceIntegrityError("hook from unexpected layer " + std::to_string(layer));
  if (!z_image.defined()) throw TraceIntegrityError("probe run has no image branch at layer " + std::to_string(layer));
  if (groups != batch_ || z.numel() % groups != 0) {
    throw TraceIntegrityError("hook reported " + std::to_string(groups) + " groups, recorder expects " +
                              std::to_string(batch_));
  }
  const std::size_t per = z.numel() / groups;
  for (std::size_t g = 0; g < groups; ++g) {
    const auto zz = z.data().subspan(g * per, per);
    traces_[g].pt(layer, step_) = cosine(z_text.data().subspan(g * per, per), zz);
    traces_[g].pi(layer, step_) = cosine(z_image.data().subspan(g * per, per), zz);
  }
  filled_[layer * steps_ + step_] = 1;
}

std::vector<ContributionTrace> ContributionRecorder::finish(std::span<const std::string> tags,
                                                            std::span<const std::string> prompt_ids) const {
  for (std::size_t i = 0; i < filled_.size(); ++i) {
    if (!filled_[i]) {
      throw TraceIntegrityError("no contribution recorded for layer " + std::to_string(i / steps_) + ", step " +
                                std::to_string(i % steps_));
    }
  }
  if (tags.size() != batch_ || prompt_ids.size() != batch_) {
    throw ParameterError("recorder: need one tag and prompt id per sample");
  }
  auto out = traces_;
  for (std::size_t b = 0; b < batch_; ++b) {
    out[b].tag = tags[b];
    out[b].prompt_id = prompt_ids[b];
    out[b].validate();
  }
  return out;
}

std::vector<ContributionTrace> record_contributions(StyleModel& model, std::span<const Prompt> prompts,
                                                    const ImageEmbedding& image, std::span<const std::uint64_t> seeds,
                                                    int steps, const std::string& tag) {
  auto& den = model.denoiser;
  std::vector<std::pair<real, real>> saved;
  for (std::size_t d = 0; d < den.layer_count(); ++d) {
    saved.emplace_back(den.cross_layer(d).image_scale, den.cross_layer(d).multiplier);
    den.cross_layer(d).image_scale = 1;
    den.cross_layer(d).multiplier = 1;
  }
  auto restore = [&] {
    for (std::size_t d = 0; d < den.layer_count(); ++d) {
      den.cross_layer(d).image_scale = saved[d].first;
      den.cross_layer(d).multiplier = saved[d].second;
    }
  };
  try {
    ContributionRecorder rec(den.layer_count(), static_cast<std::size_t>(steps), seeds.size());
    (void)generate(model, prompts, &image, seeds, steps, &rec);
    restore();
    const std::vector<std::string> tags(seeds.size(), tag);
    std::vector<std::string> ids;
    for (const auto& p : prompts) ids.push_back(p.text());
    return rec.finish(tags, ids);
  } catch (...) {
    restore();
    throw;
  }
}

ContributionTrace mean_trace(std::span<const ContributionTrace> traces, const std::string& tag,
                             const std::string& prompt_id) {
  if (traces.empty()) throw ParameterError("mean_trace: no traces");
  check_same_dims(traces);
  ContributionTrace out(traces.front().layers, traces.front().steps, tag, prompt_id);
  for (const auto& t : traces) {
    for (std::size_t i = 0; i < out.p_text.size(); ++i) {
      out.p_text[i] += t.p_text[i];
      out.p_image[i] += t.p_image[i];
    }
  }
  const double n = double(traces.size());
  for (std::size_t i = 0; i < out.p_text.size(); ++i) {
    out.p_text[i] = std::clamp(out.p_text[i] / n, -1.0, 1.0);
    out.p_image[i] = std::clamp(out.p_image[i] / n, -1.0, 1.0);
  }
  return out;
}

std::vector<double> layer_difference(const ContributionTrace& trace) {
  trace.validate();
  std::vector<double> out(trace.layers, 0.0);
  for (std::size_t d = 0; d < trace.layers; ++d) {
    double s = 0.0;
    for (std::size_t t = 0; t < trace.steps; ++t) s += trace.pi(d, t) - trace.pt(d, t);
    out[d] = s / double(trace.steps);
  }
  return out;
}

// ---- scales ------------------------------------------------------------------------------

std::vector<double> minmax_normalize(std::span<const double> values, bool* degenerate) {
  if (values.empty()) throw ParameterError("minmax_normalize: empty input");
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double mn = *lo, mx = *hi;
  std::vector<double> out(values.size(), 1.0);
  const bool flat = !(mx > mn);
  if (degenerate) *degenerate = flat;
  if (flat) return out;
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = std::clamp((values[i] - mn) / (mx - mn), 0.0, 1.0);
  return out;
}

HierarchicalScales compute_hierarchical_scales(std::span<const ContributionTrace> singles,
                                               std::span<const ContributionTrace> multi) {
  if (singles.empty() || multi.empty()) {
    throw ParameterError("hierarchical scales need at least one single-reference and one averaged trace");
  }
  check_same_dims(singles);
  check_same_dims(multi);
  if (singles.front().layers != multi.front().layers || singles.front().steps != multi.front().steps) {
    throw TraceIntegrityError("single and averaged traces disagree on dimensions");
  }
  const std::size_t D = singles.front().layers;
  std::vector<double> ds(D, 0.0), dm(D, 0.0);
  for (const auto& t : singles) {
    const auto diff = layer_difference(t);
    for (std::size_t d = 0; d < D; ++d) ds[d] += diff[d];
  }
  for (const auto& t : multi) {
    const auto diff = layer_difference(t);
    for (std::size_t d = 0; d < D; ++d) dm[d] += diff[d];
  }
  HierarchicalScales h;
  h.differences.resize(D);
  for (std::size_t d = 0; d < D; ++d) {
    h.differences[d] = dm[d] / double(multi.size()) - ds[d] / double(singles.size());
  }
  h.scales = minmax_normalize(h.differences, &h.degenerate);
  return h;
}

HierarchicalScales HierarchicalScales::uniform(std::size_t layers) {
  HierarchicalScales h;
  h.scales.assign(layers, 1.0);
  h.differences.assign(layers, 0.0);
  h.normalization = "uniform";
  return h;
}

std::string HierarchicalScales::to_json() const {
  const json j{{"scales", scales},
               {"differences", differences},
               {"degenerate", degenerate},
               {"normalization", normalization},
               {"prompt_hash", prompt_hash},
               {"reference_hash", reference_hash}};
  return j.dump(2) + "\n";
}

HierarchicalScales HierarchicalScales::from_json(const std::string& text) {
  HierarchicalScales h;
  try {
    const json j = json::parse(text);
    h.scales = j.at("scales").get<std::vector<double>>();
    h.differences = j.value("differences", std::vector<double>{});
    h.degenerate = j.value("degenerate", false);
    h.normalization = j.value("normalization", "minmax");
    h.prompt_hash = j.value("prompt_hash", "");
    h.reference_hash = j.value("reference_hash", "");
  } catch (const json::exception& e) {
    throw FormatError(std::string("scales: ") + e.what(), 0);
  }
  for (double s : h.scales)
    if (!(s >= 0.0 && s <= 1.0)) throw FormatError("scales: entry outside [0, 1]", 0);
  return h;
}

// ---- trace files ---------------------------------------------------------------------------

void save_trace(const ContributionTrace& trace, const std::filesystem::path& path) {
  trace.validate();
  std::vector<std::uint8_t> buf;
  put_bytes(buf, kTraceMagic);
  put_u32(buf, kTraceVersion);
  put_u32(buf, static_cast<std::uint32_t>(trace.layers));
  put_u32(buf, static_cast<std::uint32_t>(trace.steps));
  put_u32(buf, static_cast<std::uint32_t>(trace.tag.size()));
  put_bytes(buf, trace.tag);
  put_u32(buf, static_cast<std::uint32_t>(trace.prompt_id.size()));
  put_bytes(buf, trace.prompt_id);
  auto as_tensor = [&](const std::vector<double>& v) {
    return Tensor({trace.layers, trace.steps}, std::vector<real>(v.begin(), v.end()));
  };
  put_tensor(buf, as_tensor(trace.p_text));
  put_tensor(buf, as_tensor(trace.p_image));
  write_file_atomic(path, buf);
}

ContributionTrace load_trace(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  std::size_t pos = 0;
  if (get_bytes(bytes, pos, kTraceMagic.size()) != kTraceMagic) throw FormatError("bad trace magic", 0);
  const auto version = get_u32(bytes, pos);
  if (version != kTraceVersion) throw FormatError("unsupported trace version " + std::to_string(version), 8);
  ContributionTrace t;
  t.layers = get_u32(bytes, pos);
  t.steps = get_u32(bytes, pos);
  const auto tag_len = get_u32(bytes, pos);
  t.tag = get_bytes(bytes, pos, tag_len);
  const auto prompt_len = get_u32(bytes, pos);
  t.prompt_id = get_bytes(bytes, pos, prompt_len);
  const std::size_t tensors_at = pos;
  const Tensor pt = read_tensor(bytes, pos);
  const Tensor pi = read_tensor(bytes, pos);
  if (pos != bytes.size()) throw FormatError("trailing bytes after trace", pos);
  const Shape want{t.layers, t.steps};
  if (pt.shape() != want || pi.shape() != want) throw FormatError("trace matrices do not match header", tensors_at);
  t.p_text.assign(pt.data().begin(), pt.data().end());
  t.p_image.assign(pi.data().begin(), pi.data().end());
  t.validate();
  return t;
}

std::string trace_csv(const ContributionTrace& trace) {
  std::ostringstream os;
  os.precision(9);
  os << "layer,timestep,P_t,P_i\n";
  for (std::size_t d = 0; d < trace.layers; ++d)
    for (std::size_t s = 0; s < trace.steps; ++s) os << d << "," << s << "," << trace.pt(d, s) << "," << trace.pi(d, s) << "\n";
  return os.str();
}

std::string hash_prompts(std::span<const Prompt> prompts) {
  Fnv1a h;
  for (const auto& p : prompts) {
    h.update(p.text());
    h.update("\n");
  }
  return h.hex();
}

std::string hash_images(std::span<const Tensor> images) { return hex64(hash_tensors(images)); }

STYLELAB_END_PRECISION
}  // namespace stylelab
