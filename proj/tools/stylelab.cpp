// stylelab: corpus generation, pretraining, probing, sampling, fine-tuning
// and evaluation sweeps over one run configuration.

#include <fcntl.h>
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "stylelab/config.hpp"
#include "stylelab/io.hpp"
#include "stylelab/workflow.hpp"

namespace fs = std::filesystem;
using namespace stylelab;

namespace {

enum Exit { kOk = 0, kUsage = 2, kMissing = 3, kNumeric = 4, kIo = 5 };

struct MissingArtifact : Error {
  using Error::Error;
};

struct Args {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> refs;
  std::optional<double> multiplier;
  std::optional<long> steps;
  std::string out;
  std::string corpus;
  std::string model;
  std::string scales;
  std::string checkpoint;
  std::vector<std::string> prompts;
  std::size_t count = 1;
  std::string style;
};

// Keeps other writers out of an artifact directory for the lifetime of the object.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) throw IoError("artifact directory " + dir.string() + " is locked by another run (" + path_.string() + ")");
    const std::string pid = std::to_string(::getpid()) + "\n";
    (void)!::write(fd_, pid.data(), pid.size());
  }
  ~DirLock() {
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

// Sections of the resolved config text.
std::string sections(const RunConfig& cfg, std::initializer_list<std::string_view> names) {
  std::istringstream in(cfg.to_text());
  std::string line, out;
  bool keep = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.front() == '[') {
      keep = false;
      for (auto n : names) keep = keep || line == "[" + std::string(n) + "]";
    }
    if (keep) out += line + "\n";
  }
  return out;
}

std::string digest(std::initializer_list<std::string> parts) {
  Fnv1a h;
  for (const auto& p : parts) {
    h.update(p);
    h.update(std::string_view("\x1f", 1));
  }
  return h.hex().substr(0, 12);
}

std::string corpus_key(const RunConfig& c) { return digest({sections(c, {"corpus"})}); }
std::string model_key(const RunConfig& c) {
  return digest({corpus_key(c), sections(c, {"model", "schedule", "pretrain"})});
}

fs::path corpus_dir(const RunConfig& c, const Args& a) {
  return a.corpus.empty() ? c.root / ("corpus-" + corpus_key(c)) : fs::path(a.corpus);
}
fs::path model_file(const RunConfig& c, const Args& a) {
  if (!a.model.empty()) return a.model;
  return c.root / ("model-" + model_key(c)) / "model.bin";
}

void require(const fs::path& p, const std::string& hint) {
  if (!fs::exists(p)) throw MissingArtifact("missing " + p.string() + " (" + hint + ")");
}

void write_resolved_config(const fs::path& dir, const RunConfig& cfg) {
  write_text_atomic(dir / "config.toml", cfg.to_text());
}

std::vector<Reference> load_refs(const Args& a) {
  std::vector<Reference> refs;
  for (const auto& r : a.refs) {
    require(r, "reference image");
    refs.push_back(load_reference(r));
  }
  return refs;
}

std::string refs_digest(std::span<const Reference> refs) {
  std::vector<Tensor> images;
  std::string captions;
  for (const auto& r : refs) {
    images.push_back(r.image);
    captions += r.caption.text() + ";";
  }
  return hash_images(images) + captions;
}

std::vector<Tensor> images_of(std::span<const Reference> refs) {
  std::vector<Tensor> out;
  for (const auto& r : refs) out.push_back(r.image);
  return out;
}

StyleModel open_model(const RunConfig& cfg, const Args& a) {
  const fs::path path = model_file(cfg, a);
  require(path, "run `stylelab pretrain` first");
  return load_model(path);
}

HierarchicalScales load_scales(const fs::path& path) {
  require(path, "run `stylelab probe` first");
  const auto bytes = read_file_bytes(path);
  return HierarchicalScales::from_json(std::string(bytes.begin(), bytes.end()));
}

fs::path probe_dir(const RunConfig& cfg, const StyleModel& model, std::span<const Reference> refs) {
  return cfg.root / ("probe-" + digest({model.base_hash(), sections(cfg, {"probe"}), refs_digest(refs)}));
}

fs::path scales_file(const RunConfig& cfg, const Args& a, const StyleModel& model, std::span<const Reference> refs) {
  if (!a.scales.empty()) return a.scales;
  return probe_dir(cfg, model, refs) / "scales.json";
}

// ---- commands ---------------------------------------------------------------------------

int cmd_gen_corpus(RunConfig cfg, const Args& a) {
  if (a.seed) cfg.corpus.seed = *a.seed;
  const fs::path dir = a.out.empty() ? corpus_dir(cfg, a) : fs::path(a.out);
  if (fs::exists(dir / "manifest.json")) {
    std::cout << dir.string() << "\n";
    return kOk;
  }
  DirLock lock(dir);
  const auto m = generate_corpus(cfg.corpus, dir);
  write_resolved_config(dir, cfg);
  std::cerr << "wrote " << m.entries.size() << " images to " << dir.string() << "\n";
  std::cout << dir.string() << "\n";
  return kOk;
}

int cmd_pretrain(RunConfig cfg, const Args& a) {
  if (a.seed) cfg.pretrain.seed = *a.seed;
  if (a.steps) cfg.pretrain.steps = static_cast<std::size_t>(*a.steps);
  const fs::path cdir = corpus_dir(cfg, a);
  require(cdir / "manifest.json", "run `stylelab gen-corpus` first");
  const fs::path dir = a.out.empty() ? model_file(cfg, a).parent_path() : fs::path(a.out);
  if (fs::exists(dir / "model.bin")) {
    std::cout << (dir / "model.bin").string() << "\n";
    return kOk;
  }
  DirLock lock(dir);
  const LoadedCorpus corpus = load_corpus(cdir);
  StyleModel model(cfg.model, cfg.model_seed);
  const auto log = pretrain(model, corpus, cfg.pretrain, [](const PretrainRecord& r) {
    std::fprintf(stderr, "step %zu loss %.5f grad_norm %.4f\n", r.step, r.loss, r.grad_norm);
  });
  std::ostringstream csv;
  csv.precision(9);
  csv << "step,loss,grad_norm\n";
  for (const auto& r : log) csv << r.step << "," << r.loss << "," << r.grad_norm << "\n";
  write_text_atomic(dir / "pretrain_log.csv", csv.str());
  write_resolved_config(dir, cfg);
  save_model(model, dir / "model.bin");
  std::cout << (dir / "model.bin").string() << "\n";
  return kOk;
}

int cmd_probe(RunConfig cfg, const Args& a) {
  if (a.refs.empty()) throw ParameterError("probe needs --refs");
  if (a.seed) cfg.probe.seed = *a.seed;
  if (a.steps) cfg.probe.steps = static_cast<int>(*a.steps);
  StyleModel model = open_model(cfg, a);
  const auto refs = load_refs(a);
  const fs::path dir = a.out.empty() ? probe_dir(cfg, model, refs) : fs::path(a.out);
  DirLock lock(dir);
  std::vector<Prompt> prompts;
  for (const auto& p : cfg.probe.prompts) prompts.push_back(Prompt::parse(p));
  const auto images = images_of(refs);
  const ProbeRun run = run_probe(model, images, prompts, cfg.probe.seed, cfg.probe.steps);
  for (std::size_t i = 0; i < run.singles.size(); ++i) {
    const std::string stem = "trace_single_" + std::to_string(i);
    save_trace(run.singles[i], dir / (stem + ".bin"));
    write_text_atomic(dir / (stem + ".csv"), trace_csv(run.singles[i]));
  }
  save_trace(run.multi, dir / "trace_multi.bin");
  write_text_atomic(dir / "trace_multi.csv", trace_csv(run.multi));
  write_resolved_config(dir, cfg);
  write_text_atomic(dir / "scales.json", run.scales.to_json());
  std::cout << (dir / "scales.json").string() << "\n";
  return kOk;
}

int cmd_sample(RunConfig cfg, const Args& a) {
  if (a.seed) cfg.eval.seed = *a.seed;
  if (a.steps) cfg.eval.steps = static_cast<int>(*a.steps);
  if (a.count == 0) throw ParameterError("--count must be >= 1");
  if (!a.checkpoint.empty() && !a.refs.empty()) throw ParameterError("use either --checkpoint or --refs");
  const double multiplier = a.multiplier.value_or(1.0);
  StyleModel model = open_model(cfg, a);

  std::vector<Prompt> prompts;
  for (const auto& p : a.prompts.empty() ? std::vector<std::string>{"circle"} : a.prompts) {
    const Prompt parsed = Prompt::parse(p);
    for (std::size_t k = 0; k < a.count; ++k) prompts.push_back(parsed);
  }
  std::vector<std::uint64_t> seeds;
  for (std::size_t k = 0; k < prompts.size(); ++k) seeds.push_back(mix_seed(cfg.eval.seed, k));

  std::optional<ImageEmbedding> image;
  std::string source = "text";
  if (!a.checkpoint.empty()) {
    require(a.checkpoint, "run `stylelab finetune` first");
    const auto ckpt = load_checkpoint(a.checkpoint, model.base_hash());
    apply_checkpoint(model, ckpt, multiplier);
    image = ckpt.embedding;
    source = "checkpoint:" + hex64(hash_tensors(ckpt.adapter.tensors()));
  } else if (!a.refs.empty()) {
    const auto refs = load_refs(a);
    const fs::path sf = scales_file(cfg, a, model, refs);
    const HierarchicalScales scales =
        fs::exists(sf) || !a.scales.empty() ? load_scales(sf) : HierarchicalScales::uniform(model.denoiser.layer_count());
    set_layer_scales(model.denoiser, scales.scales, multiplier);
    image = model.embed_average(images_of(refs));
    source = "refs:" + refs_digest(refs) + scales.to_json();
  }

  std::string prompt_text;
  for (const auto& p : prompts) prompt_text += p.text() + ";";
  std::ostringstream m;
  m.precision(17);
  m << multiplier;
  const fs::path dir = a.out.empty()
                           ? cfg.root / ("sample-" + digest({model.base_hash(), source, prompt_text, m.str(),
                                                             std::to_string(cfg.eval.seed),
                                                             std::to_string(cfg.eval.steps)}))
                           : fs::path(a.out);
  DirLock lock(dir);
  const Tensor out = generate(model, prompts, image ? &*image : nullptr, seeds, cfg.eval.steps);
  for (std::size_t k = 0; k < prompts.size(); ++k) {
    for (real v : image_at(out, k).data())
      if (!std::isfinite(v)) throw NumericError("sample " + std::to_string(k) + " contains non-finite values");
    write_file_atomic(dir / ("sample_" + std::to_string(k) + ".ppm"), encode_ppm(image_at(out, k)));
  }
  write_resolved_config(dir, cfg);
  std::cout << dir.string() << "\n";
  return kOk;
}

int cmd_finetune(RunConfig cfg, const Args& a) {
  if (a.refs.empty()) throw ParameterError("finetune needs --refs");
  if (a.seed) cfg.finetune.seed = *a.seed;
  StyleModel model = open_model(cfg, a);
  const auto refs = load_refs(a);
  const HierarchicalScales scales = load_scales(scales_file(cfg, a, model, refs));
  if (scales.scales.size() != model.denoiser.layer_count()) {
    throw IncompatibilityError("scales have " + std::to_string(scales.scales.size()) + " entries, model has " +
                               std::to_string(model.denoiser.layer_count()) + " layers");
  }
  FinetuneOptions fo;
  fo.steps = a.steps ? *a.steps : static_cast<long>(cfg.finetune.steps_per_image * refs.size());
  fo.lr = cfg.finetune.lr;
  fo.batch = cfg.finetune.batch;
  fo.weighting = cfg.finetune.weighting;
  fo.seed = cfg.finetune.seed;
  if (fo.steps < 0) throw ParameterError("--steps must be >= 0");

  const fs::path dir =
      a.out.empty() ? cfg.root / ("finetune-" + digest({model.base_hash(), sections(cfg, {"finetune"}),
                                                        refs_digest(refs), scales.to_json(),
                                                        std::to_string(fo.steps), a.style}))
                    : fs::path(a.out);
  DirLock lock(dir);
  LoraAdapter adapter = init_lora(model.denoiser, cfg.finetune.rank, mix_seed(fo.seed, 0x10a), cfg.finetune.alpha);
  const auto log = finetune(model, adapter, refs, scales, fo, [](const FinetuneRecord& r) {
    if (r.step % 50 == 0) std::fprintf(stderr, "step %zu loss %.5f\n", r.step, r.loss);
  });
  StyleCheckpoint ckpt;
  ckpt.base_hash = model.base_hash();
  ckpt.scales = scales;
  ckpt.adapter = adapter;
  ckpt.embedding = model.embed_average(images_of(refs));
  ckpt.steps = static_cast<std::size_t>(fo.steps);
  ckpt.lr = fo.lr;
  ckpt.references = refs.size();
  ckpt.seed = fo.seed;
  ckpt.style = a.style;
  write_text_atomic(dir / "finetune_log.csv", finetune_log_csv(log));
  write_resolved_config(dir, cfg);
  save_checkpoint(ckpt, dir / "checkpoint.bin");
  std::cout << (dir / "checkpoint.bin").string() << "\n";
  return kOk;
}

ContentProbe content_probe(const RunConfig& cfg) {
  std::string styles;
  for (const auto& s : cfg.corpus.pretrain_styles) styles += s.id + ";";
  const fs::path dir =
      cfg.root / ("content-probe-" + digest({sections(cfg, {"eval"}), styles}));
  const fs::path file = dir / "content_probe.bin";
  if (fs::exists(file)) return ContentProbe::load(file);
  DirLock lock(dir);
  std::cerr << "training content probe\n";
  ContentProbe probe;
  probe.train(cfg.corpus.pretrain_styles, cfg.eval.content_probe);
  probe.save(file);
  return probe;
}

int cmd_eval(RunConfig cfg, const Args& a) {
  if (a.seed) cfg.eval.seed = *a.seed;
  if (a.steps) cfg.eval.steps = static_cast<int>(*a.steps);
  if (a.checkpoint.empty() == a.refs.empty()) throw ParameterError("eval needs exactly one of --checkpoint or --refs");
  StyleModel model = open_model(cfg, a);
  const fs::path cdir = corpus_dir(cfg, a);
  require(cdir / "manifest.json", "run `stylelab gen-corpus` first");

  HierarchicalScales scales;
  ImageEmbedding image;
  std::string target = a.style, source;
  if (!a.checkpoint.empty()) {
    require(a.checkpoint, "run `stylelab finetune` first");
    const auto ckpt = load_checkpoint(a.checkpoint, model.base_hash());
    apply_checkpoint(model, ckpt, 1.0);
    scales = ckpt.scales;
    image = ckpt.embedding;
    if (target.empty()) target = ckpt.style;
    source = hex64(hash_tensors(ckpt.adapter.tensors()));
  } else {
    const auto refs = load_refs(a);
    const fs::path sf = scales_file(cfg, a, model, refs);
    scales = fs::exists(sf) || !a.scales.empty() ? load_scales(sf)
                                                 : HierarchicalScales::uniform(model.denoiser.layer_count());
    image = model.embed_average(images_of(refs));
    source = refs_digest(refs);
  }
  if (target.empty()) target = cfg.eval.heldout_style;

  const LoadedCorpus corpus = load_corpus(cdir);
  StyleProbe style_probe = fit_pretrain_style_probe(model.image_encoder, corpus);
  const auto& st = style_probe.styles();
  if (std::find(st.begin(), st.end(), target) == st.end()) {
    const auto values = image.tokens.data();
    style_probe.set_centroid(target, std::vector<double>(values.begin(), values.end()));
  }
  const ContentProbe cp = content_probe(cfg);

  const fs::path dir = a.out.empty() ? cfg.root / ("eval-" + digest({model.base_hash(), cfg.hash(), source,
                                                                      scales.to_json(), target}))
                                     : fs::path(a.out);
  DirLock lock(dir);
  const auto spec = make_generation_spec(subject_names(), cfg.eval.samples, cfg.eval.seed, cfg.eval.steps);
  const auto grid = multiplier_grid(cfg.eval.grid_step);
  EvalReport report = multiplier_sweep(model, scales.scales, image, spec, grid, style_probe, cp, target);
  report.config_hash = cfg.hash();
  write_text_atomic(dir / "report.json", report.to_json());
  write_text_atomic(dir / "report.csv", report.to_csv());
  write_text_atomic(dir / "sweep.dat", report.to_gnuplot());
  write_file_atomic(dir / "sweep.ppm", plot_sweep_ppm(report));
  write_resolved_config(dir, cfg);
  std::printf("style %.4f content %.4f spearman %.4f\n", report.style_accuracy, report.content_accuracy,
              report.spearman_style);
  std::cout << dir.string() << "\n";
  return kOk;
}

void add_common(CLI::App* sub, Args& a) {
  sub->add_option("--config", a.config, "run configuration file");
  sub->add_option("--seed", a.seed, "seed override");
  sub->add_option("--out", a.out, "artifact directory (default: derived from the config hash)");
}

int run(int argc, char** argv) {
  CLI::App app{"stylelab: style-conditioned diffusion on a synthetic corpus"};
  app.require_subcommand(1);
  Args a;
  auto* gen = app.add_subcommand("gen-corpus", "render the synthetic corpus");
  auto* pre = app.add_subcommand("pretrain", "train the base model");
  auto* probe = app.add_subcommand("probe", "record contribution traces and compute layer scales");
  auto* sample = app.add_subcommand("sample", "generate images");
  auto* ft = app.add_subcommand("finetune", "train a LoRA adapter on reference images");
  auto* ev = app.add_subcommand("eval", "multiplier sweep with style and content probes");
  for (auto* s : {gen, pre, probe, sample, ft, ev}) add_common(s, a);
  for (auto* s : {pre, probe, sample, ft, ev}) s->add_option("--steps", a.steps, "step count override");
  for (auto* s : {pre, ev}) s->add_option("--corpus", a.corpus, "corpus directory");
  for (auto* s : {probe, sample, ft, ev}) s->add_option("--model", a.model, "model file");
  for (auto* s : {probe, sample, ft, ev}) s->add_option("--refs", a.refs, "reference PPM files")->delimiter(',');
  for (auto* s : {sample, ft, ev}) s->add_option("--scales", a.scales, "scales.json from probe");
  for (auto* s : {sample, ev}) s->add_option("--checkpoint", a.checkpoint, "checkpoint from finetune");
  for (auto* s : {ft, ev}) s->add_option("--style", a.style, "style label of the references");
  sample->add_option("--multiplier", a.multiplier, "adapter scale multiplier")->check(CLI::Range(0.0, 1.0));
  sample->add_option("--prompt", a.prompts, "prompt such as \"circle small\"; repeatable");
  sample->add_option("--count", a.count, "images per prompt");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    (void)app.exit(e);
    return kUsage;
  }

  RunConfig cfg;
  if (!a.config.empty()) {
    if (!fs::exists(a.config)) throw ParameterError("config file " + a.config + " not found");
    cfg = RunConfig::load(a.config);
  }
  if (gen->parsed()) return cmd_gen_corpus(cfg, a);
  if (pre->parsed()) return cmd_pretrain(cfg, a);
  if (probe->parsed()) return cmd_probe(cfg, a);
  if (sample->parsed()) return cmd_sample(cfg, a);
  if (ft->parsed()) return cmd_finetune(cfg, a);
  return cmd_eval(cfg, a);
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const MissingArtifact& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kMissing;
  } catch (const IncompatibilityError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kMissing;
  } catch (const StateError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kMissing;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumeric;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
