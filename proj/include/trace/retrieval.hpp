#pragma once

// Exact cosine-similarity index over unit embeddings and the retrieval metrics:
// label/modality P@k and MRR, ROUGE-L F1 of top-1 texts, MAE/MSE of top-1 series.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "trace/dataset.hpp"
#include "trace/model.hpp"
#include "trace/text.hpp"

namespace trace::retrieval {

enum class Modality { kTs, kText };
const char* modality_name(Modality m);

struct Entry {
  std::string id;
  int label = 0;
  std::vector<double> sample;                 // unit d-vector
  std::vector<std::vector<double>> channels;  // C unit d-vectors, or empty
  std::size_t source = 0;                     // position in the instance list the index was built from
};

class EmbeddingIndex {
 public:
  EmbeddingIndex(Modality modality, std::size_t dim);

  // Normalizes the vectors; throws on a duplicate id, a dimension mismatch, or a zero vector.
  void add(Entry entry);
  // Stores already-unit vectors as given (norms checked to 1e-6) so a reloaded index is bit-identical.
  void restore(Entry entry);

  Modality modality() const { return modality_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return entries_.size(); }
  const Entry& operator[](std::size_t i) const { return entries_[i]; }
  std::span<const Entry> entries() const { return entries_; }
  std::optional<std::size_t> find(const std::string& id) const;

 private:
  Modality modality_;
  std::size_t dim_;
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> ids_;

  void check(const Entry& entry) const;
  void append(Entry entry);
};

// JSON Lines: a header {"modality", "dim", "size"}, then one record per entry.
void save_index(const EmbeddingIndex& index, const std::filesystem::path& path);
// Throws std::runtime_error naming the path and line on malformed input.
EmbeddingIndex load_index(const std::filesystem::path& path);

struct Hit {
  std::size_t entry = 0;
  std::string id;
  double score = 0.0;
  int label = 0;
  std::vector<double> channel_scores;  // filled when both sides carry channel vectors
};

// Hits ordered by score descending, lower id first on ties.
struct RetrievalResult {
  std::vector<Hit> hits;
};

std::vector<double> unit(std::span<const double> v);

// Exact top-k by cosine. k larger than the index returns everything. `query_channels`, when
// non-empty, adds per-channel cosines against each hit's channel vectors.
RetrievalResult query(const EmbeddingIndex& index, std::span<const double> vec, std::size_t k,
                      const std::optional<std::string>& exclude_id = std::nullopt,
                      std::span<const std::vector<double>> query_channels = {});

double precision_at_k(const RetrievalResult& r, int query_label, std::size_t k);
double mrr_label(const RetrievalResult& r, int query_label);
double precision_modality_at_k(const RetrievalResult& r, const std::string& paired_id, std::size_t k);
double mrr_modality(const RetrievalResult& r, const std::string& paired_id);

// LCS-based F1 over text::tokenize tokens; 0 when either side has no tokens.
double rouge_l_f1(std::string_view candidate, std::string_view reference);

struct SeriesError {
  double mae = 0.0;
  double mse = 0.0;
};
// Elementwise over all C·T entries; throws std::invalid_argument on a shape mismatch.
SeriesError ts_similarity(const data::Series& a, const data::Series& b);

template <typename T>
EmbeddingIndex build_ts_index(const model::Encoder<T>& encoder, std::span<const data::TimeSeriesInstance* const> instances,
                              std::size_t batch_size = 64);
template <typename T>
EmbeddingIndex build_text_index(const text::TextEmbedder<T>& embedder,
                                std::span<const data::TimeSeriesInstance* const> instances);

enum class Direction { kTsToText, kTextToTs, kTsToTs };
const char* direction_name(Direction d);

struct MetricReport {
  std::string name;
  std::size_t queries = 0;
  std::size_t pool = 0;
  bool has_modality = true;
  double label_p1 = 0.0, label_p5 = 0.0, label_mrr = 0.0;
  double modality_p1 = 0.0, modality_p5 = 0.0, modality_mrr = 0.0;
  double rouge_l = 0.0;  // top-1 retrieved pair's text vs the query's text
  double mae = 0.0, mse = 0.0;

  // "name.key=value" lines.
  std::string to_key_values() const;
  bool operator==(const MetricReport&) const = default;
};

// Table with one row per report, columns as in the key-value output.
std::string format_table(std::span<const MetricReport> reports);

// Queries are every entry of the query-side index; the pair of entry q is the other index's
// entry with the same id. `instances` resolves Entry::source for texts and series.
MetricReport evaluate_crossmodal(const EmbeddingIndex& ts_index, const EmbeddingIndex& text_index, Direction direction,
                                 std::span<const data::TimeSeriesInstance* const> instances);

// Each query is matched against all other series (its own entry excluded).
MetricReport evaluate_ts_to_ts(const EmbeddingIndex& ts_index, std::span<const data::TimeSeriesInstance* const> instances);

// Ranks by Euclidean distance between per-channel time-mean vectors; score = −distance.
RetrievalResult euclidean_baseline(std::span<const data::TimeSeriesInstance* const> instances, const data::Series& query,
                                   std::size_t k, const std::optional<std::string>& exclude_id = std::nullopt);
MetricReport evaluate_euclidean(std::span<const data::TimeSeriesInstance* const> instances);

// Worker count for evaluation: TRACE_THREADS if set (≥ 1), else the hardware concurrency.
std::size_t evaluation_threads();

}  // namespace trace::retrieval
