#include "stylelab/workflow.hpp"

#include <optional>
#include <sstream>

#include "stylelab/io.hpp"

namespace stylelab {
STYLELAB_BEGIN_PRECISION

Prompt entry_caption(const CorpusEntry& entry) {
  Prompt p{entry.subject, {}};
  if (!entry.modifier.empty()) p.modifiers.push_back(entry.modifier);
  return p;
}

std::vector<Reference> corpus_references(const LoadedCorpus& corpus, const std::string& style, std::size_t n) {
  std::vector<Reference> out;
  const auto& entries = corpus.manifest.entries;
  for (std::size_t i = 0; i < entries.size() && out.size() < n; ++i) {
    if (entries[i].style == style) out.push_back({corpus.images[i], entry_caption(entries[i])});
  }
  if (out.size() < n) {
    throw ParameterError("corpus has " + std::to_string(out.size()) + " images of style '" + style + "', need " +
                         std::to_string(n));
  }
  return out;
}

StyleProbe fit_pretrain_style_probe(const ImageEncoder& encoder, const LoadedCorpus& corpus) {
  std::vector<Tensor> images;
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < corpus.images.size(); ++i) {
    if (corpus.manifest.entries[i].split != Split::pretrain) continue;
    images.push_back(corpus.images[i]);
    labels.push_back(corpus.manifest.entries[i].style);
  }
  return StyleProbe::fit(encoder, images, labels);
}

namespace {

std::optional<Prompt> caption_from_manifest(const std::filesystem::path& file) {
  namespace fs = std::filesystem;
  const fs::path abs = fs::weakly_canonical(file);
  for (fs::path dir = abs.parent_path(); !dir.empty(); dir = dir.parent_path()) {
    const fs::path manifest = dir / "manifest.json";
    if (fs::exists(manifest)) {
      const auto bytes = read_file_bytes(manifest);
      const auto m = CorpusManifest::from_json(std::string(bytes.begin(), bytes.end()));
      const std::string rel = abs.lexically_relative(dir).generic_string();
      for (const auto& e : m.entries)
        if (e.path == rel) return entry_caption(e);
      return std::nullopt;
    }
    if (dir == dir.root_path()) break;
  }
  return std::nullopt;
}

std::optional<Prompt> caption_from_name(const std::filesystem::path& file) {
  std::istringstream in(file.stem().string());
  std::string tok;
  Prompt p;
  while (std::getline(in, tok, '_')) {
    if (is_subject(tok) && p.subject.empty()) {
      p.subject = tok;
    } else if (tok == "small" || tok == "large") {
      p.modifiers.push_back(tok);
    }
  }
  if (p.subject.empty()) return std::nullopt;
  return p;
}

}  // namespace

Reference load_reference(const std::filesystem::path& path) {
  Reference r;
  r.image = read_ppm(path);
  auto caption = caption_from_manifest(path);
  if (!caption) caption = caption_from_name(path);
  if (!caption) throw ParameterError("cannot tell the subject of reference " + path.string());
  r.caption = *caption;
  return r;
}

ProbeRun run_probe(StyleModel& model, std::span<const Tensor> references, std::span<const Prompt> prompts,
                   std::uint64_t seed, int steps) {
  if (references.empty()) throw ParameterError("probe: no reference images");
  if (prompts.empty()) throw ParameterError("probe: no prompts");
  std::vector<std::uint64_t> seeds;
  for (std::size_t j = 0; j < prompts.size(); ++j) seeds.push_back(mix_seed(seed, j));

  ProbeRun run;
  for (std::size_t i = 0; i < references.size(); ++i) {
    const std::string tag = std::to_string(i);
    const auto traces = record_contributions(model, prompts, model.embed(references[i]), seeds, steps, tag);
    run.singles.push_back(mean_trace(traces, tag, "all"));
  }
  const auto multi = record_contributions(model, prompts, model.embed_average(references), seeds, steps, "M");
  run.multi = mean_trace(multi, "M", "all");
  run.scales = compute_hierarchical_scales(run.singles, std::span(&run.multi, 1));
  run.scales.prompt_hash = hash_prompts(prompts);
  run.scales.reference_hash = hash_images(references);
  return run;
}

STYLELAB_END_PRECISION
}  // namespace stylelab
