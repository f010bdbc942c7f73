#pragma once

// Downstream probes on a frozen encoder: a linear classifier on h_cls and a fresh
// forecasting head (the no-prompt pathway of the RAG pipeline).

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>

#include "trace/dataset.hpp"
#include "trace/model.hpp"
#include "trace/rag.hpp"
#include "trace/train.hpp"

namespace trace::downstream {

struct ClassifyConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double lr = 1e-2;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ClassifyResult {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  train::LossHistory history;
};

// Trains the encoder's classifier parameters with cross-entropy on frozen CLS features;
// the backbone is untouched.
template <typename T>
ClassifyResult train_classifier(model::Encoder<T>& encoder, std::span<const data::TimeSeriesInstance* const> train_set,
                                std::span<const data::TimeSeriesInstance* const> test_set, const ClassifyConfig& config);

struct DownstreamReport {
  ClassifyResult classify;
  rag::SettingResult forecast;
  std::uint64_t backbone_before = 0;
  std::uint64_t backbone_after = 0;

  std::string to_key_values() const;
};

template <typename T>
DownstreamReport evaluate_downstream(model::Encoder<T>& encoder, const data::Corpus& corpus, const ClassifyConfig& classify,
                                     const rag::RagConfig& forecast);

}  // namespace trace::downstream
