#pragma once

// Synthetic multimodal weather-like corpus: C×T series with per-channel and
// sample-level template texts, JSONL persistence, and forecast splitting.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace trace::data {

// Row-major C×T block of reals.
struct Series {
  std::size_t channels = 0;
  std::size_t steps = 0;
  std::vector<double> values;

  Series() = default;
  Series(std::size_t c, std::size_t t, double fill = 0.0) : channels(c), steps(t), values(c * t, fill) {}

  double& at(std::size_t c, std::size_t t) { return values[c * steps + t]; }
  double at(std::size_t c, std::size_t t) const { return values[c * steps + t]; }
  std::span<const double> row(std::size_t c) const { return {values.data() + c * steps, steps}; }
  std::span<double> row(std::size_t c) { return {values.data() + c * steps, steps}; }
  // Columns [begin, begin + count) of every channel.
  Series columns(std::size_t begin, std::size_t count) const;

  bool operator==(const Series&) const = default;
};

enum class Split : std::uint8_t { kTrain, kVal, kTest };
const char* split_name(Split split);
Split parse_split(const std::string& name);

struct TimeSeriesInstance {
  std::string id;
  Series values;
  std::vector<std::string> channel_texts;
  std::string context_text;
  int label = 0;
  Split split = Split::kTrain;

  // Throws std::invalid_argument describing the first broken invariant.
  void validate(std::size_t class_count) const;
  bool operator==(const TimeSeriesInstance&) const = default;
};

inline constexpr const char* kMotifVocabulary = "weather-motifs/1";

struct CorpusManifest {
  std::size_t channels = 7;
  std::size_t steps = 168;
  std::size_t patch_len = 6;
  std::size_t class_count = 10;
  std::size_t n_train = 0;
  std::size_t n_val = 0;
  std::size_t n_test = 0;
  std::uint64_t seed = 0;
  std::string motif_vocabulary = kMotifVocabulary;

  bool operator==(const CorpusManifest&) const = default;
};

struct Corpus {
  CorpusManifest manifest;
  std::vector<TimeSeriesInstance> instances;

  std::vector<const TimeSeriesInstance*> split(Split s) const;
  bool operator==(const Corpus&) const = default;
};

struct GeneratorConfig {
  std::uint64_t seed = 0;
  std::size_t channels = 7;
  std::size_t steps = 168;
  std::size_t patch_len = 6;
  std::size_t class_count = 10;
  std::size_t train_per_class = 200;
  std::size_t val_per_class = 0;
  std::size_t test_per_class = 20;
  // Noise standard deviation as a fraction of the unit motif amplitude.
  double noise = 0.1;
  double trend_scale = 1.0;
  double cycle_scale = 1.0;
  double spike_scale = 1.0;
  double shift_scale = 1.0;

  void validate() const;
};

inline constexpr std::size_t kMaxClasses = 10;
const std::vector<std::string>& class_names();
std::string channel_name(std::size_t c);

Corpus generate_corpus(const GeneratorConfig& config);

class CorpusFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One JSON record per line: manifest first, then one record per instance.
std::string serialize_corpus(const Corpus& corpus);
Corpus parse_corpus(const std::string& text);
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus load_corpus(const std::filesystem::path& path);
std::uint32_t corpus_checksum(const Corpus& corpus);

struct ForecastPair {
  std::string id;
  int label = 0;
  Split split = Split::kTrain;
  Series history;
  Series future;
};

// Splits every instance at column `history`; requires at least history + horizon columns.
std::vector<ForecastPair> make_forecast_pairs(const Corpus& corpus, std::size_t history, std::size_t horizon);

}  // namespace trace::data
