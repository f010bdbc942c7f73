#pragma once

// Masked-reconstruction pretraining and the loss-history record shared by the training stages.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "trace/model.hpp"

namespace trace::train {

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct HistoryRow {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
  std::vector<double> parts;  // one value per LossHistory::part_names entry

  bool operator==(const HistoryRow&) const = default;
};

struct LossHistory {
  std::vector<std::string> part_names;
  std::vector<HistoryRow> steps;
  std::vector<double> epoch_means;

  // "# step epoch loss [parts...]" header, then one whitespace-separated row per step.
  std::string to_text() const;
  void write(const std::filesystem::path& path) const;
  bool operator==(const LossHistory&) const = default;
};

// Called after every epoch with its index and mean loss.
using EpochCallback = std::function<void(std::size_t epoch, double mean_loss)>;

struct PretrainConfig {
  double mask_ratio = 0.3;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double peak_lr = 1e-3;
  double warmup_fraction = 0.05;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t total_steps(std::size_t n_instances) const;
  std::size_t warmup_steps(std::size_t n_instances) const;
};

struct PretrainResult {
  LossHistory history;
  // Masked MSE on the training series under a fixed evaluation mask, without dropout.
  double initial_mse = 0.0;
  double final_mse = 0.0;
};

// Mean squared error over the masked patch entries of a normalized batch.
template <typename T>
ad::Tensor<T> reconstruction_loss(ad::Tape<T>& tape, const model::Encoder<T>& encoder,
                                  std::span<const data::Series> normalized, const model::MaskDraw& draw,
                                  Rng* dropout_rng = nullptr);

template <typename T>
double evaluate_reconstruction(const model::Encoder<T>& encoder, std::span<const data::Series> raw, double mask_ratio,
                               std::uint64_t seed, std::size_t batch_size = 64);

// Trains the backbone and reconstruction head on `raw` series (RevIN applied per instance).
template <typename T>
PretrainResult pretrain(model::Encoder<T>& encoder, std::span<const data::Series> raw, const PretrainConfig& config,
                        const EpochCallback& on_epoch = {});

// Deterministic per-epoch permutation used by both training stages.
std::vector<std::size_t> epoch_order(std::size_t n, Rng& rng);

}  // namespace trace::train
