#pragma once

// Retrieval-augmented forecasting: the top-R training pairs by CLS similarity are
// compressed by a trainable affine map into one prompt row prepended to the frozen
// encoder's token sequence; only that map and the forecasting head are trained.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "trace/dataset.hpp"
#include "trace/model.hpp"
#include "trace/retrieval.hpp"
#include "trace/text.hpp"
#include "trace/train.hpp"

namespace trace::rag {

enum class RagMode { kNone, kTsOnly, kTsText };
const char* mode_name(RagMode mode);
RagMode parse_mode(const std::string& name);

struct RagConfig {
  std::size_t R = 3;
  std::size_t history = 96;
  std::size_t horizon = 24;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double peak_lr = 1e-3;
  double warmup_fraction = 0.05;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;

  void validate() const;
};

// Frozen embeddings of the retrieval corpus: CLS of each history window and its context text.
template <typename T>
struct ContextStore {
  retrieval::EmbeddingIndex index{retrieval::Modality::kTs, 1};
  std::vector<std::vector<T>> h_ts;
  std::vector<std::vector<T>> z_cxt;
};

template <typename T>
ContextStore<T> build_context_store(const model::Encoder<T>& encoder, const text::TextEmbedder<T>& embedder,
                                    std::span<const data::TimeSeriesInstance* const> corpus, std::size_t history);

// CLS embeddings of `histories`, one row each.
template <typename T>
std::vector<std::vector<double>> cls_embeddings(const model::Encoder<T>& encoder, std::span<const data::Series> histories,
                                                std::size_t batch_size = 64);

// Top-R store entries by CLS cosine (R clamped to the store size), never `exclude_id`.
template <typename T>
std::vector<std::size_t> retrieve_context(const ContextStore<T>& store, std::span<const double> query_cls, std::size_t R,
                                          const std::optional<std::string>& exclude_id = std::nullopt);

// Affine map from R concatenated blocks ([h_ts] or [h_ts; z_cxt]) to one d-wide prompt row.
template <typename T>
class PromptProjection {
 public:
  // Throws std::invalid_argument when d_f != d or mode is kNone. Weights and bias start at zero.
  PromptProjection(std::size_t d, std::size_t R, RagMode mode, std::size_t d_f);

  std::size_t input_width() const;
  RagMode mode() const { return mode_; }
  std::size_t retrieved() const { return R_; }
  ParameterStore<T>& parameters() { return store_; }
  const ParameterStore<T>& parameters() const { return store_; }

  // One input row for the given retrieved entries; throws when their count is not R.
  std::vector<T> features(const ContextStore<T>& store, std::span<const std::size_t> retrieved) const;
  // [B × input_width] → [B × d]
  ad::Tensor<T> forward(ad::Tape<T>& tape, const ad::Tensor<T>& features) const;

 private:
  std::size_t d_;
  std::size_t R_;
  RagMode mode_;
  ParameterStore<T> store_;
};

// Normalized-space forecasts [B·C × H]; `proj`/`features` null for the no-prompt pathway.
template <typename T>
ad::Tensor<T> forecast_normalized(ad::Tape<T>& tape, const model::Encoder<T>& encoder, const model::ForecastHead<T>& head,
                                  const PromptProjection<T>* proj, std::span<const data::Series> histories,
                                  const ad::Tensor<T>* features, model::EncoderOutput<T>* out = nullptr);

// Denormalized forecast for one history, C×H.
template <typename T>
data::Series rag_forecast(const model::Encoder<T>& encoder, const model::ForecastHead<T>& head, const PromptProjection<T>* proj,
                          const data::Series& history, std::span<const T> features = {});

struct SettingResult {
  RagMode mode = RagMode::kNone;
  double mae = 0.0;  // test split, raw scale
  double mse = 0.0;
  train::LossHistory history;
};

struct RagReport {
  std::vector<SettingResult> settings;  // none, ts_only, ts_text
  std::uint64_t backbone_before = 0;
  std::uint64_t backbone_after = 0;

  const SettingResult& setting(RagMode mode) const;
  // Table of settings × (MAE, MSE).
  std::string to_text() const;
};

// Trains a fresh head (and prompt map unless kNone) on `train` and scores `test`.
// Retrieval uses `store`, excluding each query's own id.
template <typename T>
SettingResult train_setting(model::Encoder<T>& encoder, const ContextStore<T>& store, RagMode mode,
                            std::span<const data::ForecastPair> train, std::span<const data::ForecastPair> test,
                            const RagConfig& config);

// Builds forecast pairs and the training-split store, then runs all three settings.
template <typename T>
RagReport run_rag(model::Encoder<T>& encoder, const text::TextEmbedder<T>& embedder, const data::Corpus& corpus,
                  const RagConfig& config);

extern template class PromptProjection<float>;
extern template class PromptProjection<double>;

}  // namespace trace::rag
