#include "stylelab/config.hpp"

#include <charconv>
#include <cstdio>
#include <functional>
#include <sstream>

#include "stylelab/io.hpp"

namespace stylelab {
STYLELAB_BEGIN_PRECISION

namespace {

struct Binding {
  std::string section;
  std::string key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

std::string fmt_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string quote(const std::string& s) { return "\"" + s + "\""; }

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto r = std::from_chars(v.data(), end, out);
  if (r.ec != std::errc() || r.ptr != end) throw ParameterError("'" + v + "' is not a valid number");
  return out;
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(v);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string join_list(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + v[i];
  return s;
}

template <typename T>
Binding num(const std::string& section, const std::string& key, T& ref) {
  return {section, key,
          [&ref] {
            if constexpr (std::is_floating_point_v<T>) {
              return fmt_double(ref);
            } else {
              return std::to_string(ref);
            }
          },
          [&ref](const std::string& v) { ref = parse_number<T>(v); }};
}

Binding weighting(const std::string& section, LossWeighting& ref) {
  return {section, "loss_weighting", [&ref] { return quote(ref == LossWeighting::eps ? "eps" : "output"); },
          [&ref](const std::string& v) {
            if (v == "eps") {
              ref = LossWeighting::eps;
            } else if (v == "output") {
              ref = LossWeighting::output;
            } else {
              throw ParameterError("expected \"eps\" or \"output\", got '" + v + "'");
            }
          }};
}

Binding str(const std::string& section, const std::string& key, std::string& ref) {
  return {section, key, [&ref] { return quote(ref); }, [&ref](const std::string& v) { ref = v; }};
}

std::vector<Binding> bindings(RunConfig& c) {
  static std::string root_holder;
  std::vector<Binding> b;
  b.push_back({"paths", "root", [&c] { return quote(c.root.string()); },
               [&c](const std::string& v) { c.root = v; }});

  b.push_back(num("corpus", "per_cell", c.corpus.per_cell));
  b.push_back(num("corpus", "heldout_count", c.corpus.heldout_count));
  b.push_back(num("corpus", "seed", c.corpus.seed));

  auto& d = c.model.denoiser;
  b.push_back(num("model", "seed", c.model_seed));
  b.push_back(num("model", "image_size", d.image_size));
  b.push_back(num("model", "patch", d.patch));
  b.push_back(num("model", "width", d.width));
  b.push_back(num("model", "heads", d.heads));
  b.push_back(num("model", "layers", d.layers));
  b.push_back(num("model", "time_width", d.time_width));
  b.push_back(num("model", "mlp_ratio", d.mlp_ratio));
  b.push_back(num("model", "sigma_data", d.sigma_data));
  b.push_back(num("model", "embed_width", d.text_width));
  b.push_back(num("model", "text_length", c.model.text_length));
  b.push_back(num("model", "encoder_width", c.model.encoder.width));
  b.push_back(num("model", "encoder_heads", c.model.encoder.heads));
  b.push_back(num("model", "encoder_patch", c.model.encoder.patch));
  b.push_back(num("model", "query_tokens", c.model.encoder.query_tokens));

  b.push_back(num("schedule", "steps", c.model.schedule_steps));
  b.push_back(num("schedule", "beta_start", c.model.beta_start));
  b.push_back(num("schedule", "beta_end", c.model.beta_end));

  auto& p = c.pretrain;
  b.push_back(num("pretrain", "steps", p.steps));
  b.push_back(num("pretrain", "batch", p.batch));
  b.push_back(num("pretrain", "lr", p.lr));
  b.push_back(num("pretrain", "lr_final", p.lr_final));
  b.push_back(num("pretrain", "warmup", p.warmup));
  b.push_back(num("pretrain", "grad_clip", p.grad_clip));
  b.push_back(num("pretrain", "timestep_power", p.timestep_power));
  b.push_back(num("pretrain", "self_ref_prob", p.self_ref_prob));
  b.push_back(num("pretrain", "text_dropout", p.text_dropout));
  b.push_back(num("pretrain", "image_dropout", p.image_dropout));
  b.push_back(weighting("pretrain", p.weighting));
  b.push_back(num("pretrain", "seed", p.seed));
  b.push_back(num("pretrain", "log_every", p.log_every));

  b.push_back({"probe", "prompts", [&c] { return quote(join_list(c.probe.prompts)); },
               [&c](const std::string& v) { c.probe.prompts = split_list(v); }});
  b.push_back(num("probe", "steps", c.probe.steps));
  b.push_back(num("probe", "seed", c.probe.seed));

  auto& f = c.finetune;
  b.push_back(num("finetune", "rank", f.rank));
  b.push_back(num("finetune", "alpha", f.alpha));
  b.push_back(num("finetune", "lr", f.lr));
  b.push_back(num("finetune", "steps_per_image", f.steps_per_image));
  b.push_back(num("finetune", "batch", f.batch));
  b.push_back(weighting("finetune", f.weighting));
  b.push_back(num("finetune", "seed", f.seed));

  auto& e = c.eval;
  b.push_back(num("eval", "grid_step", e.grid_step));
  b.push_back(num("eval", "samples", e.samples));
  b.push_back(num("eval", "steps", e.steps));
  b.push_back(num("eval", "seed", e.seed));
  b.push_back(str("eval", "heldout_style", e.heldout_style));
  b.push_back(num("eval", "probe_pool", e.content_probe.pool));
  b.push_back(num("eval", "probe_steps", e.content_probe.steps));
  b.push_back(num("eval", "probe_seed", e.content_probe.seed));
  return b;
}

void sync_widths(RunConfig& c) {
  auto& d = c.model.denoiser;
  d.image_width = d.text_width;
  c.model.encoder.out_width = d.text_width;
  c.model.encoder.image_size = d.image_size;
  c.model.encoder.channels = d.channels;
}

}  // namespace

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig c;
  auto table = bindings(c);
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto where = "config line " + std::to_string(lineno) + ": ";
    std::string s;
    bool in_quote = false;
    for (char ch : line) {
      if (ch == '"') in_quote = !in_quote;
      if (ch == '#' && !in_quote) break;
      s += ch;
    }
    s = trim(s);
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw ParameterError(where + "malformed section header");
      section = trim(s.substr(1, s.size() - 2));
      bool known = false;
      for (const auto& b : table) known = known || b.section == section;
      if (!known) throw ParameterError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ParameterError(where + "expected key = value");
    const std::string key = trim(s.substr(0, eq));
    std::string value = trim(s.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    bool found = false;
    for (auto& b : table) {
      if (b.section == section && b.key == key) {
        try {
          b.set(value);
        } catch (const ParameterError& ex) {
          throw ParameterError(where + section + "." + key + ": " + ex.what());
        }
        found = true;
        break;
      }
    }
    if (!found) {
      throw ParameterError(where + "unknown key '" + key + "'" + (section.empty() ? "" : " in [" + section + "]"));
    }
  }
  sync_widths(c);
  c.model.validate();
  if (c.probe.prompts.empty()) throw ParameterError("config: probe.prompts is empty");
  for (const auto& p : c.probe.prompts) {
    try {
      (void)Prompt::parse(p);
    } catch (const VocabularyError& ex) {
      throw ParameterError(std::string("config: probe.prompts: ") + ex.what());
    }
  }
  if (c.finetune.rank == 0) throw ParameterError("config: finetune.rank must be >= 1");
  (void)multiplier_grid(c.eval.grid_step);
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return parse(std::string(bytes.begin(), bytes.end()));
}

std::string RunConfig::to_text() const {
  RunConfig copy = *this;
  auto table = bindings(copy);
  std::string out, section;
  for (const auto& b : table) {
    if (b.section != section) {
      if (!out.empty()) out += "\n";
      out += "[" + b.section + "]\n";
      section = b.section;
    }
    out += b.key + " = " + b.get() + "\n";
  }
  return out;
}

std::string RunConfig::hash() const {
  Fnv1a h;
  h.update(to_text());
  return h.hex();
}

STYLELAB_END_PRECISION
}  // namespace stylelab
