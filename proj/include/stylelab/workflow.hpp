#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stylelab/eval.hpp"
#include "stylelab/lora.hpp"
#include "stylelab/probe.hpp"

namespace stylelab {
STYLELAB_BEGIN_PRECISION

// Subject plus size modifier of a corpus entry.
Prompt entry_caption(const CorpusEntry& entry);

// The first n entries of `style` (any split) as references.
std::vector<Reference> corpus_references(const LoadedCorpus& corpus, const std::string& style, std::size_t n);

// Nearest-centroid probe over the pretrain split.
StyleProbe fit_pretrain_style_probe(const ImageEncoder& encoder, const LoadedCorpus& corpus);

// Reads a reference PPM and finds its caption: the entry of the nearest
// enclosing corpus manifest if there is one, otherwise subject and size tokens
// in the file name ("3_circle_small.ppm"). Throws ParameterError if neither
// yields a subject.
Reference load_reference(const std::filesystem::path& path);

struct ProbeRun {
  std::vector<ContributionTrace> singles;  // one prompt-mean trace per reference
  ContributionTrace multi;                 // prompt-mean trace with the averaged embedding
  HierarchicalScales scales;
};

// Probe inferences with each single reference embedding and with the averaged
// embedding, over the same prompts and seeds, then the hierarchical scales.
ProbeRun run_probe(StyleModel& model, std::span<const Tensor> references, std::span<const Prompt> prompts,
                   std::uint64_t seed, int steps);

STYLELAB_END_PRECISION
}  // namespace stylelab
