#include "trace/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "json.hpp"
#include "trace/random.hpp"

namespace trace::config {

namespace {

using json = nlohmann::ordered_json;

// Walks every configurable field once; the same list drives reading and writing.
template <typename V>
void visit(RunConfig& c, V& v) {
  v.field("seed", c.seed);
  v.section("data", [&] {
    v.field("channels", c.data.channels);
    v.field("steps", c.data.steps);
    v.field("class_count", c.data.class_count);
    v.field("train_per_class", c.data.train_per_class);
    v.field("val_per_class", c.data.val_per_class);
    v.field("test_per_class", c.data.test_per_class);
    v.field("noise", c.data.noise);
    v.field("trend_scale", c.data.trend_scale);
    v.field("cycle_scale", c.data.cycle_scale);
    v.field("spike_scale", c.data.spike_scale);
    v.field("shift_scale", c.data.shift_scale);
  });
  v.section("model", [&] {
    v.field("d", c.model.d);
    v.field("n_layers", c.model.n_layers);
    v.field("n_heads", c.model.n_heads);
    v.field("patch_len", c.model.patch_len);
    v.field("dropout", c.model.dropout);
    v.field("rope_base", c.model.rope_base);
    v.field("ln_eps", c.model.ln_eps);
    v.field("init_std", c.model.init_std);
  });
  v.section("text", [&] {
    v.field("buckets", c.text.buckets);
    v.field("d_text", c.text.d_text);
  });
  v.section("pretrain", [&] {
    v.field("mask_ratio", c.pretrain.mask_ratio);
    v.field("epochs", c.pretrain.epochs);
    v.field("batch_size", c.pretrain.batch_size);
    v.field("peak_lr", c.pretrain.peak_lr);
    v.field("warmup_fraction", c.pretrain.warmup_fraction);
    v.field("weight_decay", c.pretrain.weight_decay);
  });
  v.section("align", [&] {
    v.field("K", c.align.K);
    v.field("lambda_ch", c.align.lambda_ch);
    v.field("temperature", c.align.temperature);
    v.field("epochs", c.align.epochs);
    v.field("batch_size", c.align.batch_size);
    v.field("peak_lr", c.align.peak_lr);
    v.field("warmup_fraction", c.align.warmup_fraction);
    v.field("weight_decay", c.align.weight_decay);
    v.field("pool", c.align.pool);
  });
  v.section("rag", [&] {
    v.field("R", c.rag.R);
    v.field("history", c.rag.history);
    v.field("horizon", c.rag.horizon);
    v.field("epochs", c.rag.epochs);
    v.field("batch_size", c.rag.batch_size);
    v.field("peak_lr", c.rag.peak_lr);
    v.field("warmup_fraction", c.rag.warmup_fraction);
    v.field("weight_decay", c.rag.weight_decay);
  });
  v.section("eval", [&] {
    v.field("classify_epochs", c.eval.classify_epochs);
    v.field("classify_batch", c.eval.classify_batch);
    v.field("classify_lr", c.eval.classify_lr);
  });
  v.section("paths", [&] {
    v.field("out", c.paths.out);
    v.field("corpus", c.paths.corpus);
    v.field("pretrain_checkpoint", c.paths.pretrain_checkpoint);
    v.field("align_checkpoint", c.paths.align_checkpoint);
    v.field("ts_index", c.paths.ts_index);
    v.field("text_index", c.paths.text_index);
  });
}

const char* pool_name(align::ChannelPool p) { return p == align::ChannelPool::kGeneral ? "general" : "restricted"; }

struct Writer {
  json root = json::object();
  json* cur = &root;

  template <typename F>
  void section(const char* name, F&& body) {
    json* outer = cur;
    (*outer)[name] = json::object();
    cur = &(*outer)[name];
    body();
    cur = outer;
  }
  template <typename X>
  void field(const char* name, const X& value) {
    (*cur)[name] = value;
  }
  void field(const char* name, const align::ChannelPool& value) { (*cur)[name] = pool_name(value); }
};

struct Reader {
  const json* cur;
  std::string prefix;

  std::string where(const char* name) const { return prefix.empty() ? name : prefix + "." + name; }

  // Rejects any key the visitor does not know.
  void check_known(const json& obj, const std::set<std::string>& known) const {
    for (const auto& [k, _] : obj.items())
      if (!known.count(k)) throw ConfigError(fmt::format("unknown config key '{}'", prefix.empty() ? k : prefix + "." + k));
  }

  template <typename F>
  void section(const char* name, F&& body) {
    if (!cur->contains(name)) return;
    const json& sub = (*cur)[name];
    if (!sub.is_object()) throw ConfigError(fmt::format("{}: expected an object", where(name)));
    Reader inner{&sub, where(name)};
    // A dry pass collects the section's keys so unknown ones are caught before reading.
    KeyCollector keys;
    body_keys(name, keys);
    inner.check_known(sub, keys.keys);
    const json* saved = cur;
    std::string saved_prefix = prefix;
    cur = &sub;
    prefix = where(name);
    body();
    cur = saved;
    prefix = saved_prefix;
  }

  void field(const char* name, std::size_t& out) { read_unsigned(name, out); }
  void field(const char* name, double& out) {
    if (!cur->contains(name)) return;
    const auto& v = (*cur)[name];
    if (!v.is_number()) throw ConfigError(fmt::format("{}: expected a number", where(name)));
    out = v.get<double>();
  }
  void field(const char* name, std::string& out) {
    if (!cur->contains(name)) return;
    const auto& v = (*cur)[name];
    if (!v.is_string()) throw ConfigError(fmt::format("{}: expected a string", where(name)));
    out = v.get<std::string>();
  }
  void field(const char* name, align::ChannelPool& out) {
    std::string s = pool_name(out);
    field(name, s);
    if (s == "general") out = align::ChannelPool::kGeneral;
    else if (s == "restricted") out = align::ChannelPool::kRestricted;
    else throw ConfigError(fmt::format("{}: expected 'general' or 'restricted', got '{}'", where(name), s));
  }

  template <typename U>
  void read_unsigned(const char* name, U& out) {
    if (!cur->contains(name)) return;
    const auto& v = (*cur)[name];
    if (!v.is_number_unsigned()) throw ConfigError(fmt::format("{}: expected a non-negative integer", where(name)));
    out = v.get<U>();
  }

  struct KeyCollector {
    std::set<std::string> keys;
    std::string target;  // empty: collect top-level names
    bool inside = false;
    template <typename F>
    void section(const char* name, F&& body) {
      if (!target.empty() && name == target) {
        inside = true;
        body();
        inside = false;
      } else if (target.empty()) {
        keys.insert(name);
      }
    }
    template <typename X>
    void field(const char* name, X&) {
      if (inside || target.empty()) keys.insert(name);
    }
  };

  static void body_keys(const char* section, KeyCollector& keys) {
    RunConfig scratch;
    keys.target = section;
    visit(scratch, keys);
  }
};

}  // namespace

RunConfig::RunConfig() {
  data.train_per_class = 200;
  data.test_per_class = 20;
  model.d = 32;
  model.n_layers = 2;
  model.n_heads = 2;
  model.patch_len = 12;
  model.dropout = 0.0;
  pretrain.epochs = 30;
  pretrain.peak_lr = 3e-3;
  propagate();
}

void RunConfig::propagate() {
  data.seed = seed;
  data.patch_len = model.patch_len;
  model.channels = data.channels;
  model.classes = data.class_count;
  model.mask_ratio = pretrain.mask_ratio;
  text.seed = seed;
  pretrain.seed = seed;
  align.seed = seed;
  rag.seed = seed;
}

void RunConfig::validate() const {
  auto guard = [](const char* section, auto&& fn) {
    try {
      fn();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(fmt::format("{}: {}", section, e.what()));
    }
  };
  guard("data", [&] { data.validate(); });
  guard("model", [&] { model.validate(); });
  guard("text", [&] { text.validate(); });
  guard("pretrain", [&] { pretrain.validate(); });
  guard("align", [&] { align.validate(); });
  guard("rag", [&] { rag.validate(); });
  if (eval.classify_epochs == 0) throw ConfigError("eval.classify_epochs: must be >= 1");
  if (eval.classify_batch == 0) throw ConfigError("eval.classify_batch: must be >= 1");
  if (!(eval.classify_lr > 0.0)) throw ConfigError("eval.classify_lr: must be positive");
  if (data.steps < rag.history + rag.horizon)
    throw ConfigError(fmt::format("rag.history + rag.horizon ({}) exceeds data.steps ({})", rag.history + rag.horizon, data.steps));
  if (rag.history < model.patch_len)
    throw ConfigError(fmt::format("rag.history ({}) is shorter than model.patch_len ({})", rag.history, model.patch_len));
  if (paths.out.empty()) throw ConfigError("paths.out: must not be empty");
}

std::uint64_t RunConfig::encoder_seed() const { return substream(seed, "init")(); }
std::uint64_t RunConfig::text_proj_seed() const { return substream(seed, "init/text")(); }
std::uint64_t RunConfig::fusion_seed() const { return substream(seed, "init/fusion")(); }

RunConfig parse_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("config is not valid JSON: {}", e.what()));
  }
  if (!root.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  Reader r{&root, ""};
  Reader::KeyCollector top;
  visit(c, top);
  r.check_known(root, top.keys);
  visit(c, r);
  c.propagate();
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot read config file '{}'", path.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string to_json(const RunConfig& config) {
  RunConfig copy = config;
  Writer w;
  visit(copy, w);
  return w.root.dump(2) + "\n";
}

}  // namespace trace::config
