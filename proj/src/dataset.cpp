#include "trace/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "json.hpp"
#include "trace/checksum.hpp"
#include "trace/random.hpp"

namespace trace::data {

using ordered_json = nlohmann::ordered_json;

Series Series::columns(std::size_t begin, std::size_t count) const {
  if (begin + count > steps) throw std::out_of_range(fmt::format("columns [{}, {}) exceed {} steps", begin, begin + count, steps));
  Series out(channels, count);
  for (std::size_t c = 0; c < channels; ++c)
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(c * steps + begin), count, out.values.begin() + static_cast<std::ptrdiff_t>(c * count));
  return out;
}

const char* split_name(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw std::invalid_argument("unknown split '" + name + "'");
}

void TimeSeriesInstance::validate(std::size_t class_count) const {
  if (values.values.size() != values.channels * values.steps)
    throw std::invalid_argument(fmt::format("{}: {} values for a {}x{} series", id, values.values.size(), values.channels, values.steps));
  for (double v : values.values)
    if (!std::isfinite(v)) throw std::invalid_argument(id + ": non-finite value");
  if (channel_texts.size() != values.channels)
    throw std::invalid_argument(fmt::format("{}: {} channel texts for {} channels", id, channel_texts.size(), values.channels));
  if (label < 0 || static_cast<std::size_t>(label) >= class_count)
    throw std::invalid_argument(fmt::format("{}: label {} outside [0, {})", id, label, class_count));
}

std::vector<const TimeSeriesInstance*> Corpus::split(Split s) const {
  std::vector<const TimeSeriesInstance*> out;
  for (const auto& inst : instances)
    if (inst.split == s) out.push_back(&inst);
  return out;
}

namespace {

struct Signed {
  std::size_t channel;
  int sign;
};

struct ClassProfile {
  const char* name;
  const char* headline;
  std::size_t period;
  std::vector<std::size_t> strong_cycle;
  std::vector<Signed> spikes;
  std::vector<Signed> shifts;
};

// Channels: 0 temperature, 1 humidity, 2 pressure, 3 wind, 4 precipitation, 5 visibility, 6 dewpoint.
const std::vector<ClassProfile>& profiles() {
  static const std::vector<ClassProfile> table = {
      {"none", "No notable weather event", 24, {0}, {}, {}},
      {"thunderstorm", "Thunderstorm event", 12, {0}, {{4, +1}, {3, +1}}, {{2, -1}}},
      {"flood", "Flood event", 24, {0}, {{4, +1}}, {{1, +1}}},
      {"heat_wave", "Heat wave event", 24, {0, 6}, {}, {{0, +1}}},
      {"cold_front", "Cold front event", 48, {}, {{3, +1}}, {{0, -1}, {2, +1}}},
      {"hail", "Hail event", 8, {0}, {{4, +1}, {5, -1}}, {}},
      {"high_wind", "High wind event", 16, {1}, {{3, +1}}, {{2, -1}}},
      {"winter_storm", "Winter storm event", 36, {}, {{4, +1}, {5, -1}}, {{0, -1}}},
      {"drought", "Drought event", 72, {0}, {}, {{1, -1}}},
      {"fog", "Fog event", 6, {1}, {}, {{5, -1}}},
  };
  return table;
}

constexpr double kTrendSlope = 0.01;
constexpr double kStrongCycle = 1.0;
constexpr double kWeakCycle = 0.3;
constexpr double kSpikeHeight = 3.0;
constexpr double kShiftHeight = 1.5;
constexpr std::size_t kSpikeWidth = 2;
const double kChannelOffsets[] = {12.0, 65.0, 1013.0, 4.0, 0.5, 10.0, 7.0};

const char* count_word(std::size_t n) {
  static const char* words[] = {"no", "one", "two", "three", "four", "five"};
  return n < std::size(words) ? words[n] : "many";
}

struct ChannelMotifs {
  double slope = 0;
  double cycle_amp = 0;
  std::size_t spike_count = 0;
  int spike_sign = 0;
  std::vector<std::size_t> spike_at;
  int shift_sign = 0;
  std::size_t shift_at = 0;
};

std::string describe_channel(std::size_t c, const ChannelMotifs& m, std::size_t period) {
  std::string trend;
  if (m.slope > 0)
    trend = fmt::format("rising trend (slope {:+.4f} per step)", m.slope);
  else if (m.slope < 0)
    trend = fmt::format("falling trend (slope {:+.4f} per step)", m.slope);
  else
    trend = "steady level (slope +0.0000 per step)";
  std::string cycle = "no cycle";
  if (m.cycle_amp > 0) cycle = fmt::format("{} cycle with period {} steps", m.cycle_amp >= 0.5 ? "strong" : "weak", period);
  std::string spikes = "no spikes";
  if (m.spike_count > 0)
    spikes = fmt::format("{} {} spike{}", count_word(m.spike_count), m.spike_sign > 0 ? "upward" : "downward", m.spike_count > 1 ? "s" : "");
  std::string shift = "no level shift";
  if (m.shift_sign != 0) shift = fmt::format("{} level shift at step {}", m.shift_sign > 0 ? "upward" : "downward", m.shift_at);
  return fmt::format("{}: {}, {}, {}, {}.", channel_name(c), trend, cycle, spikes, shift);
}

std::string describe_context(const ClassProfile& p, const std::vector<ChannelMotifs>& motifs) {
  std::vector<std::size_t> dominant;
  auto note = [&](std::size_t c) {
    if (c < motifs.size() && std::find(dominant.begin(), dominant.end(), c) == dominant.end()) dominant.push_back(c);
  };
  for (const auto& s : p.spikes) note(s.channel);
  for (const auto& s : p.shifts) note(s.channel);
  for (std::size_t c : p.strong_cycle) note(c);
  std::string out = fmt::format("{} with a {}-step cycle.", p.headline, p.period);
  if (!dominant.empty()) {
    out += " dominant channels:";
    for (std::size_t i = 0; i < dominant.size(); ++i) out += (i ? ", " : " ") + channel_name(dominant[i]);
    out += ".";
  }
  out += " trends:";
  for (std::size_t c = 0; c < motifs.size(); ++c) {
    const char* dir = motifs[c].slope > 0 ? "rising" : motifs[c].slope < 0 ? "falling" : "steady";
    out += fmt::format("{} {} {}", c ? "," : "", channel_name(c), dir);
  }
  return out + ".";
}

TimeSeriesInstance make_instance(const GeneratorConfig& cfg, std::size_t label, Split split, std::string id, Rng& rng) {
  const ClassProfile& p = profiles()[label];
  const std::size_t C = cfg.channels, T = cfg.steps;
  std::uniform_int_distribution<int> direction(-1, 1);
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * std::numbers::pi);
  std::uniform_int_distribution<std::size_t> spike_count(1, 3);
  std::uniform_int_distribution<std::size_t> shift_pos(T / 4, (3 * T) / 4);
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::vector<ChannelMotifs> motifs(C);
  for (std::size_t c = 0; c < C; ++c) {
    const double slope = direction(rng) * kTrendSlope * cfg.trend_scale;
    motifs[c].slope = slope == 0.0 ? 0.0 : slope;
    const bool strong = std::find(p.strong_cycle.begin(), p.strong_cycle.end(), c) != p.strong_cycle.end();
    motifs[c].cycle_amp = (strong ? kStrongCycle : kWeakCycle) * cfg.cycle_scale;
  }
  const double phase = phase_dist(rng);
  for (const auto& s : p.spikes) {
    if (s.channel >= C || cfg.spike_scale == 0.0) continue;
    auto& m = motifs[s.channel];
    m.spike_sign = s.sign;
    m.spike_count = spike_count(rng);
    std::uniform_int_distribution<std::size_t> where(1, T - kSpikeWidth - 1);
    std::set<std::size_t> taken;
    while (taken.size() < m.spike_count) taken.insert(where(rng));
    m.spike_at.assign(taken.begin(), taken.end());
  }
  for (const auto& s : p.shifts) {
    if (s.channel >= C || cfg.shift_scale == 0.0) continue;
    motifs[s.channel].shift_sign = s.sign;
    motifs[s.channel].shift_at = shift_pos(rng);
  }

  TimeSeriesInstance inst;
  inst.id = std::move(id);
  inst.label = static_cast<int>(label);
  inst.split = split;
  inst.values = Series(C, T);
  const double center = 0.5 * static_cast<double>(T - 1);
  const double omega = 2.0 * std::numbers::pi / static_cast<double>(p.period);
  for (std::size_t c = 0; c < C; ++c) {
    const auto& m = motifs[c];
    const double offset = c < std::size(kChannelOffsets) ? kChannelOffsets[c] : 0.0;
    auto row = inst.values.row(c);
    for (std::size_t t = 0; t < T; ++t) {
      const double tt = static_cast<double>(t);
      double v = offset + m.slope * (tt - center);
      if (m.cycle_amp != 0.0) v += m.cycle_amp * std::sin(omega * tt + phase);
      if (m.shift_sign != 0 && t >= m.shift_at) v += m.shift_sign * kShiftHeight * cfg.shift_scale;
      row[t] = v;
    }
    for (std::size_t at : m.spike_at)
      for (std::size_t w = 0; w < kSpikeWidth; ++w) row[at + w] += m.spike_sign * kSpikeHeight * cfg.spike_scale;
  }
  if (cfg.noise > 0.0)
    for (double& v : inst.values.values) v += cfg.noise * gauss(rng);

  inst.channel_texts.reserve(C);
  for (std::size_t c = 0; c < C; ++c) inst.channel_texts.push_back(describe_channel(c, motifs[c], p.period));
  inst.context_text = describe_context(p, motifs);
  return inst;
}

}  // namespace

const std::vector<std::string>& class_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& p : profiles()) out.emplace_back(p.name);
    return out;
  }();
  return names;
}

std::string channel_name(std::size_t c) {
  static const char* names[] = {"temperature", "humidity", "pressure", "wind", "precipitation", "visibility", "dewpoint"};
  return c < std::size(names) ? names[c] : fmt::format("sensor{}", c + 1);
}

void GeneratorConfig::validate() const {
  if (channels < 1) throw std::invalid_argument("generator: channels must be >= 1");
  if (patch_len < 1) throw std::invalid_argument("generator: patch_len must be >= 1");
  if (steps < 2 * patch_len)
    throw std::invalid_argument(fmt::format("generator: steps {} must be >= 2 * patch_len ({})", steps, 2 * patch_len));
  if (steps < kSpikeWidth + 3) throw std::invalid_argument("generator: steps too short for spike motifs");
  if (class_count < 2 || class_count > kMaxClasses)
    throw std::invalid_argument(fmt::format("generator: class_count {} outside [2, {}]", class_count, kMaxClasses));
  if (!(noise >= 0.0)) throw std::invalid_argument("generator: noise must be >= 0");
  for (double s : {trend_scale, cycle_scale, spike_scale, shift_scale})
    if (!std::isfinite(s)) throw std::invalid_argument("generator: motif scales must be finite");
}

Corpus generate_corpus(const GeneratorConfig& config) {
  config.validate();
  Corpus corpus;
  auto& m = corpus.manifest;
  m.channels = config.channels;
  m.steps = config.steps;
  m.patch_len = config.patch_len;
  m.class_count = config.class_count;
  m.n_train = config.train_per_class * config.class_count;
  m.n_val = config.val_per_class * config.class_count;
  m.n_test = config.test_per_class * config.class_count;
  m.seed = config.seed;

  Rng rng = substream(config.seed, "data");
  std::size_t next_id = 0;
  const std::pair<Split, std::size_t> plan[] = {
      {Split::kTrain, config.train_per_class}, {Split::kVal, config.val_per_class}, {Split::kTest, config.test_per_class}};
  corpus.instances.reserve(m.n_train + m.n_val + m.n_test);
  for (const auto& [split, per_class] : plan)
    for (std::size_t i = 0; i < per_class; ++i)
      for (std::size_t k = 0; k < config.class_count; ++k)
        corpus.instances.push_back(make_instance(config, k, split, fmt::format("ts-{:06d}", next_id++), rng));
  return corpus;
}

namespace {

ordered_json manifest_json(const CorpusManifest& m) {
  ordered_json j;
  j["channels"] = m.channels;
  j["steps"] = m.steps;
  j["patch_len"] = m.patch_len;
  j["class_count"] = m.class_count;
  j["counts"] = {{"train", m.n_train}, {"val", m.n_val}, {"test", m.n_test}};
  j["seed"] = m.seed;
  j["motif_vocabulary"] = m.motif_vocabulary;
  return ordered_json{{"manifest", j}};
}

[[noreturn]] void fail(std::size_t line, const std::string& field, const std::string& what) {
  throw CorpusFormatError(fmt::format("corpus line {}: field '{}': {}", line, field, what));
}

template <typename V>
V field(const ordered_json& obj, const char* name, std::size_t line) {
  auto it = obj.find(name);
  if (it == obj.end()) fail(line, name, "missing");
  try {
    return it->template get<V>();
  } catch (const nlohmann::json::exception& e) {
    fail(line, name, e.what());
  }
}

}  // namespace

std::string serialize_corpus(const Corpus& corpus) {
  std::string out = manifest_json(corpus.manifest).dump();
  out += '\n';
  for (const auto& inst : corpus.instances) {
    ordered_json j;
    j["id"] = inst.id;
    j["label"] = inst.label;
    j["split"] = split_name(inst.split);
    j["values"] = inst.values.values;
    j["channel_texts"] = inst.channel_texts;
    j["context_text"] = inst.context_text;
    out += j.dump();
    out += '\n';
  }
  return out;
}

Corpus parse_corpus(const std::string& text) {
  Corpus corpus;
  std::istringstream in(text);
  std::string raw;
  std::size_t line = 0;
  bool have_manifest = false;
  std::set<std::string> ids;
  while (std::getline(in, raw)) {
    ++line;
    if (raw.empty()) continue;
    ordered_json j;
    try {
      j = ordered_json::parse(raw);
    } catch (const nlohmann::json::parse_error& e) {
      throw CorpusFormatError(fmt::format("corpus line {}: malformed record: {}", line, e.what()));
    }
    if (!j.is_object()) throw CorpusFormatError(fmt::format("corpus line {}: record is not an object", line));
    if (!have_manifest) {
      if (!j.contains("manifest")) fail(line, "manifest", "first record must be the manifest");
      const auto& mj = j["manifest"];
      auto& m = corpus.manifest;
      m.channels = field<std::size_t>(mj, "channels", line);
      m.steps = field<std::size_t>(mj, "steps", line);
      m.patch_len = field<std::size_t>(mj, "patch_len", line);
      m.class_count = field<std::size_t>(mj, "class_count", line);
      const auto counts = field<ordered_json>(mj, "counts", line);
      m.n_train = field<std::size_t>(counts, "train", line);
      m.n_val = field<std::size_t>(counts, "val", line);
      m.n_test = field<std::size_t>(counts, "test", line);
      m.seed = field<std::uint64_t>(mj, "seed", line);
      m.motif_vocabulary = field<std::string>(mj, "motif_vocabulary", line);
      have_manifest = true;
      continue;
    }
    const auto& m = corpus.manifest;
    TimeSeriesInstance inst;
    inst.id = field<std::string>(j, "id", line);
    inst.label = field<int>(j, "label", line);
    try {
      inst.split = parse_split(field<std::string>(j, "split", line));
    } catch (const std::invalid_argument& e) {
      fail(line, "split", e.what());
    }
    inst.values.channels = m.channels;
    inst.values.steps = m.steps;
    inst.values.values = field<std::vector<double>>(j, "values", line);
    if (inst.values.values.size() != m.channels * m.steps)
      fail(line, "values", fmt::format("expected {} numbers, found {}", m.channels * m.steps, inst.values.values.size()));
    inst.channel_texts = field<std::vector<std::string>>(j, "channel_texts", line);
    inst.context_text = field<std::string>(j, "context_text", line);
    try {
      inst.validate(m.class_count);
    } catch (const std::invalid_argument& e) {
      fail(line, "record", e.what());
    }
    if (!ids.insert(inst.id).second) fail(line, "id", "duplicate id " + inst.id);
    corpus.instances.push_back(std::move(inst));
  }
  if (!have_manifest) throw CorpusFormatError("corpus: missing manifest record");
  const auto& m = corpus.manifest;
  const std::size_t counts[] = {corpus.split(Split::kTrain).size(), corpus.split(Split::kVal).size(), corpus.split(Split::kTest).size()};
  if (counts[0] != m.n_train || counts[1] != m.n_val || counts[2] != m.n_test)
    throw CorpusFormatError(fmt::format("corpus: manifest counts {}/{}/{} disagree with records {}/{}/{}", m.n_train, m.n_val,
                                        m.n_test, counts[0], counts[1], counts[2]));
  return corpus;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write corpus to " + path.string());
  const std::string text = serialize_corpus(corpus);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw std::runtime_error("failed writing corpus to " + path.string());
}

Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read corpus at " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_corpus(buf.str());
}

std::uint32_t corpus_checksum(const Corpus& corpus) { return crc32(serialize_corpus(corpus)); }

std::vector<ForecastPair> make_forecast_pairs(const Corpus& corpus, std::size_t history, std::size_t horizon) {
  if (horizon == 0) throw std::invalid_argument("forecast horizon must be >= 1");
  if (history == 0) throw std::invalid_argument("forecast history must be >= 1");
  if (corpus.manifest.steps < history + horizon)
    throw std::invalid_argument(fmt::format("series of {} steps cannot supply history {} + horizon {}", corpus.manifest.steps,
                                            history, horizon));
  std::vector<ForecastPair> pairs;
  pairs.reserve(corpus.instances.size());
  for (const auto& inst : corpus.instances) {
    ForecastPair p;
    p.id = inst.id;
    p.label = inst.label;
    p.split = inst.split;
    p.history = inst.values.columns(0, history);
    p.future = inst.values.columns(history, horizon);
    pairs.push_back(std::move(p));
  }
  return pairs;
}

}  // namespace trace::data
