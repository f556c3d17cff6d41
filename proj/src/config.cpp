#include "dpti/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "dpti/errors.hpp"

namespace dpti {

double learning_rate(const OptimConfig& optim, std::size_t epoch) {
  if (epoch < optim.warmup_epochs) {
    const double t = static_cast<double>(epoch) / static_cast<double>(optim.warmup_epochs);
    return optim.warmup_start_lr + (optim.base_lr - optim.warmup_start_lr) * t;
  }
  double lr = optim.base_lr;
  for (std::size_t e : optim.decay_epochs) {
    if (epoch >= e) lr *= optim.decay_factor;
  }
  return lr;
}

RunConfig RunConfig::desk() {
  RunConfig c;
  c.optim.total_epochs = 40;
  c.optim.decay_epochs = {9, 20, 33};
  c.optim.warmup_epochs = 2;
  c.batch_passes = 4;
  c.loss_options.clean_diversity = true;
  return c;
}

void RunConfig::validate() const {
  model.validate();
  loss.validate();
  if (loss_options.margin < 0.0) throw ConfigError("loss.margin must be nonnegative");
  if (loss_options.smoothing < 0.0 || loss_options.smoothing >= 1.0) {
    throw ConfigError("loss.smoothing must lie in [0, 1)");
  }
  if (batch_p < 2) throw ConfigError("batch.p must be at least 2 (triplet mining needs negatives)");
  if (batch_k < 2) throw ConfigError("batch.k must be at least 2 (triplet mining needs positives)");
  if (batch_passes < 1) throw ConfigError("batch.passes must be at least 1");
  if (!(optim.base_lr > 0.0) || optim.warmup_start_lr < 0.0) throw ConfigError("optim learning rates must be positive");
  if (!(optim.decay_factor > 0.0)) throw ConfigError("optim.decay_factor must be positive");
  for (std::size_t i = 1; i < optim.decay_epochs.size(); ++i) {
    if (optim.decay_epochs[i] <= optim.decay_epochs[i - 1]) throw ConfigError("optim.decay_epochs must increase");
  }
  if (augment.flip_prob < 0.0 || augment.flip_prob > 1.0 || augment.erase_prob < 0.0 || augment.erase_prob > 1.0) {
    throw ConfigError("augment probabilities must lie in [0, 1]");
  }
  if (data.height != model.backbone.input_h || data.width != model.backbone.input_w) {
    throw ConfigError("data.height/width must match the backbone input size");
  }
}

namespace {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& key, const std::string& text) {
  double v = 0.0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw ConfigError(key + ": expected a number, got '" + text + "'");
  }
  return v;
}

std::uint64_t parse_uint(const std::string& key, const std::string& text) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw ConfigError(key + ": expected a nonnegative integer, got '" + text + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  if (text.empty()) return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(' '), e = item.find_last_not_of(' ');
    if (b == std::string::npos) throw ConfigError(key + ": empty list element");
    out.push_back(parse_uint(key, item.substr(b, e - b + 1)));
  }
  return out;
}

std::string join(const std::vector<std::size_t>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) out += (i ? "," : "") + std::to_string(values[i]);
  return out;
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class Getter>
Field real(std::string key, Getter ref) {
  return {key, [ref](const RunConfig& c) { return format_double(ref(const_cast<RunConfig&>(c))); },
          [ref, key](RunConfig& c, const std::string& v) { ref(c) = parse_double(key, v); }};
}

template <class Getter>
Field count(std::string key, Getter ref) {
  return {key, [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); },
          [ref, key](RunConfig& c, const std::string& v) {
            ref(c) = static_cast<std::remove_reference_t<decltype(ref(c))>>(parse_uint(key, v));
          }};
}

template <class Getter>
Field flag(std::string key, Getter ref) {
  return {key, [ref](const RunConfig& c) { return std::string(ref(const_cast<RunConfig&>(c)) ? "true" : "false"); },
          [ref, key](RunConfig& c, const std::string& v) { ref(c) = parse_bool(key, v); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"backbone.channels",
                 [](const RunConfig& c) {
                   std::vector<std::size_t> v;
                   for (const auto& s : c.model.backbone.stages) v.push_back(s.channels);
                   return join(v);
                 },
                 [](RunConfig& c, const std::string& v) {
                   const auto ch = parse_list("backbone.channels", v);
                   c.model.backbone.stages.resize(ch.size());
                   for (std::size_t i = 0; i < ch.size(); ++i) c.model.backbone.stages[i].channels = ch[i];
                 }});
    f.push_back({"backbone.blocks",
                 [](const RunConfig& c) {
                   std::vector<std::size_t> v;
                   for (const auto& s : c.model.backbone.stages) v.push_back(s.blocks);
                   return join(v);
                 },
                 [](RunConfig& c, const std::string& v) {
                   const auto b = parse_list("backbone.blocks", v);
                   if (b.size() != c.model.backbone.stages.size()) {
                     throw ConfigError("backbone.blocks must list one value per stage (set backbone.channels first)");
                   }
                   for (std::size_t i = 0; i < b.size(); ++i) c.model.backbone.stages[i].blocks = b[i];
                 }});
    f.push_back({"backbone.strides",
                 [](const RunConfig& c) {
                   std::vector<std::size_t> v;
                   for (std::size_t i = 0; i < c.model.backbone.stages.size(); ++i)
                     v.push_back(c.model.backbone.stage_stride(i));
                   return join(v);
                 },
                 [](RunConfig& c, const std::string& v) {
                   const auto s = parse_list("backbone.strides", v);
                   auto& stages = c.model.backbone.stages;
                   if (s.size() != stages.size()) {
                     throw ConfigError("backbone.strides must list one value per stage (set backbone.channels first)");
                   }
                   for (std::size_t i = 0; i < s.size(); ++i) stages[i].stride = s[i];
                   if (!s.empty()) c.model.backbone.final_stage_stride = s.back();
                 }});
    f.push_back(count("backbone.tap_stage", [](RunConfig& c) -> auto& { return c.model.backbone.tap_stage; }));
    f.push_back(count("backbone.kernel", [](RunConfig& c) -> auto& { return c.model.backbone.kernel; }));
    f.push_back(count("model.dim", [](RunConfig& c) -> auto& { return c.model.dim; }));
    f.push_back(count("model.heads", [](RunConfig& c) -> auto& { return c.model.heads; }));
    f.push_back(count("model.parts", [](RunConfig& c) -> auto& { return c.model.parts; }));
    f.push_back(real("model.ffn_dropout", [](RunConfig& c) -> auto& { return c.model.ffn_dropout; }));
    f.push_back(real("model.attn_dropout", [](RunConfig& c) -> auto& { return c.model.attn_dropout; }));
    f.push_back(flag("model.conventional_residual",
                     [](RunConfig& c) -> auto& { return c.model.conventional_residual; }));
    f.push_back({"model.mode", [](const RunConfig& c) { return std::string(mode_name(c.model.mode)); },
                 [](RunConfig& c, const std::string& v) { c.model.mode = parse_head_mode(v); }});
    f.push_back(real("loss.alpha", [](RunConfig& c) -> auto& { return c.loss.alpha; }));
    f.push_back(real("loss.beta", [](RunConfig& c) -> auto& { return c.loss.beta; }));
    f.push_back(real("loss.gamma", [](RunConfig& c) -> auto& { return c.loss.gamma; }));
    f.push_back(real("loss.margin", [](RunConfig& c) -> auto& { return c.loss_options.margin; }));
    f.push_back(real("loss.smoothing", [](RunConfig& c) -> auto& { return c.loss_options.smoothing; }));
    f.push_back(flag("loss.clean_diversity", [](RunConfig& c) -> auto& { return c.loss_options.clean_diversity; }));
    f.push_back({"loss.metric",
                 [](const RunConfig& c) {
                   return std::string(c.loss_options.metric == TripletMetric::kCosine ? "cosine" : "euclidean");
                 },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "euclidean") c.loss_options.metric = TripletMetric::kEuclidean;
                   else if (v == "cosine") c.loss_options.metric = TripletMetric::kCosine;
                   else throw ConfigError("loss.metric: expected euclidean or cosine, got '" + v + "'");
                 }});
    f.push_back(real("optim.base_lr", [](RunConfig& c) -> auto& { return c.optim.base_lr; }));
    f.push_back(count("optim.warmup_epochs", [](RunConfig& c) -> auto& { return c.optim.warmup_epochs; }));
    f.push_back(real("optim.warmup_start_lr", [](RunConfig& c) -> auto& { return c.optim.warmup_start_lr; }));
    f.push_back({"optim.decay_epochs", [](const RunConfig& c) { return join(c.optim.decay_epochs); },
                 [](RunConfig& c, const std::string& v) { c.optim.decay_epochs = parse_list("optim.decay_epochs", v); }});
    f.push_back(real("optim.decay_factor", [](RunConfig& c) -> auto& { return c.optim.decay_factor; }));
    f.push_back(count("optim.total_epochs", [](RunConfig& c) -> auto& { return c.optim.total_epochs; }));
    f.push_back(count("batch.p", [](RunConfig& c) -> auto& { return c.batch_p; }));
    f.push_back(count("batch.k", [](RunConfig& c) -> auto& { return c.batch_k; }));
    f.push_back(count("batch.passes", [](RunConfig& c) -> auto& { return c.batch_passes; }));
    f.push_back(flag("augment.flip", [](RunConfig& c) -> auto& { return c.augment.flip; }));
    f.push_back(flag("augment.erase", [](RunConfig& c) -> auto& { return c.augment.erase; }));
    f.push_back(flag("augment.pad_crop", [](RunConfig& c) -> auto& { return c.augment.pad_crop; }));
    f.push_back(real("augment.flip_prob", [](RunConfig& c) -> auto& { return c.augment.flip_prob; }));
    f.push_back(real("augment.erase_prob", [](RunConfig& c) -> auto& { return c.augment.erase_prob; }));
    f.push_back(count("seed", [](RunConfig& c) -> auto& { return c.seed; }));
    f.push_back(count("data.n_ids", [](RunConfig& c) -> auto& { return c.data.n_ids; }));
    f.push_back(count("data.per_id", [](RunConfig& c) -> auto& { return c.data.per_id; }));
    f.push_back({"data.protocol", [](const RunConfig& c) { return protocol_name(c.data.protocol); },
                 [](RunConfig& c, const std::string& v) { c.data.protocol = parse_protocol(v); }});
    f.push_back(count("data.seed", [](RunConfig& c) -> auto& { return c.data.seed; }));
    f.push_back({"data.height", [](const RunConfig& c) { return std::to_string(c.data.height); },
                 [](RunConfig& c, const std::string& v) {
                   c.data.height = c.model.backbone.input_h = parse_uint("data.height", v);
                 }});
    f.push_back({"data.width", [](const RunConfig& c) { return std::to_string(c.data.width); },
                 [](RunConfig& c, const std::string& v) {
                   c.data.width = c.model.backbone.input_w = parse_uint("data.width", v);
                 }});
    f.push_back(real("data.noise_sigma", [](RunConfig& c) -> auto& { return c.data.noise_sigma; }));
    f.push_back(real("data.max_shift_x", [](RunConfig& c) -> auto& { return c.data.max_shift_x; }));
    f.push_back(real("data.max_shift_y", [](RunConfig& c) -> auto& { return c.data.max_shift_y; }));
    f.push_back(real("data.min_brightness", [](RunConfig& c) -> auto& { return c.data.min_brightness; }));
    f.push_back(real("data.max_brightness", [](RunConfig& c) -> auto& { return c.data.max_brightness; }));
    f.push_back({"paths.corpus", [](const RunConfig& c) { return c.corpus_path; },
                 [](RunConfig& c, const std::string& v) { c.corpus_path = v; }});
    f.push_back({"paths.out", [](const RunConfig& c) { return c.out_dir; },
                 [](RunConfig& c, const std::string& v) { c.out_dir = v; }});
    f.push_back(count("checkpoint.every", [](RunConfig& c) -> auto& { return c.checkpoint_every; }));
    return f;
  }();
  return table;
}

const Field* find_field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return &f;
  }
  return nullptr;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r"), e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

bool resume_neutral(const std::string& key) {
  return key == "optim.total_epochs" || key == "checkpoint.every" || key.rfind("paths.", 0) == 0;
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  const Field* f = find_field(key);
  if (!f) throw ConfigError("unknown config key '" + key + "'");
  f->set(config, value);
}

std::string to_text(const RunConfig& config) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(config) + "\n";
  return out;
}

RunConfig parse_config(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    try {
      set_config_value(base, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

std::vector<std::string> config_diff(const RunConfig& a, const RunConfig& b, bool for_resume) {
  std::vector<std::string> out;
  for (const auto& f : fields()) {
    if (for_resume && resume_neutral(f.key)) continue;
    const std::string va = f.get(a), vb = f.get(b);
    if (va != vb) out.push_back(f.key + ": " + va + " -> " + vb);
  }
  return out;
}

}  // namespace dpti
