#pragma once

// Stage-2 cross-modal alignment: cross-attention fusion of CIT embeddings with
// channel-text embeddings, Top-K in-batch hard negatives at sample and channel
// level, and the bidirectional InfoNCE objective.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "trace/dataset.hpp"
#include "trace/model.hpp"
#include "trace/text.hpp"
#include "trace/train.hpp"

namespace trace::align {

// General: any (j, c') other than (i, c). Restricted: other channels of the same
// instance plus the same channel of other instances.
enum class ChannelPool { kGeneral, kRestricted };

struct AlignConfig {
  std::size_t K = 32;
  double lambda_ch = 1.0;
  double temperature = 0.07;
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double peak_lr = 1e-3;
  double warmup_fraction = 0.05;
  double weight_decay = 0.01;
  ChannelPool pool = ChannelPool::kGeneral;
  std::uint64_t seed = 0;

  void validate() const;
};

// Indices into the opposite modality. Channel candidates are flattened as j·C + c'.
struct NegativeSets {
  std::vector<std::vector<std::size_t>> cxt;       // ts anchor i → text candidates
  std::vector<std::vector<std::size_t>> cxt_text;  // text anchor i → ts candidates
  std::vector<std::vector<std::size_t>> ch;        // ts anchor i·C+c → text candidates
  std::vector<std::vector<std::size_t>> ch_text;   // text anchor i·C+c → ts candidates

  bool operator==(const NegativeSets&) const = default;
};

// Up to K candidates of `row` (excluding `self` and those rejected by `allowed`), by
// similarity descending, lower index first on ties.
template <typename Allowed>
std::vector<std::size_t> top_k(std::span<const double> row, std::size_t self, std::size_t K, Allowed allowed);

// `sim_global` is B×B with entry (i, j) = sim(ts_i, text_j); `sim_channel` is BC×BC likewise.
NegativeSets mine_negatives(std::span<const double> sim_global, std::span<const double> sim_channel, std::size_t B,
                            std::size_t C, std::size_t K, ChannelPool pool = ChannelPool::kGeneral);

// refined = h_cit + Attn(h_cit, z_ch, z_ch), one head, per instance over its C channels.
template <typename T>
class Fusion {
 public:
  Fusion(std::size_t d, double init_std, std::uint64_t seed);

  ParameterStore<T>& parameters() { return store_; }
  const ParameterStore<T>& parameters() const { return store_; }
  // h_cit and z_ch are [B·C × d], item-major.
  ad::Tensor<T> forward(ad::Tape<T>& tape, const ad::Tensor<T>& h_cit, const ad::Tensor<T>& z_ch, std::size_t batch,
                        std::size_t channels) const;

 private:
  std::size_t d_;
  ParameterStore<T> store_;
};

template <typename T>
struct AlignLoss {
  ad::Tensor<T> total;
  ad::Tensor<T> global;   // ½(text→ts + ts→text), sample level
  ad::Tensor<T> channel;  // same at channel level, before λ
  NegativeSets sets;
};

// Embeddings need not be normalized; rows are ℓ2-normalized inside. Mines from this batch.
template <typename T>
AlignLoss<T> alignment_loss(ad::Tape<T>& tape, const ad::Tensor<T>& h_cls, const ad::Tensor<T>& refined_cit,
                            const ad::Tensor<T>& z_cxt, const ad::Tensor<T>& z_ch, std::size_t channels,
                            const AlignConfig& config);

// Everything trained in stage 2.
template <typename T>
struct AlignModules {
  model::Encoder<T>* encoder;
  text::TextEmbedder<T>* text;
  Fusion<T>* fusion;
};

template <typename T>
AlignLoss<T> batch_loss(ad::Tape<T>& tape, const AlignModules<T>& m, std::span<const data::TimeSeriesInstance* const> batch,
                        const AlignConfig& config, Rng* dropout_rng = nullptr);

// Mean loss over consecutive batches in the given order, without dropout.
template <typename T>
double evaluate_alignment(const AlignModules<T>& m, std::span<const data::TimeSeriesInstance* const> instances,
                          const AlignConfig& config);

struct AlignResult {
  train::LossHistory history;  // parts: global, channel
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

template <typename T>
AlignResult train_alignment(const AlignModules<T>& m, std::span<const data::TimeSeriesInstance* const> train_set,
                            const AlignConfig& config, const train::EpochCallback& on_epoch = {});

struct MarginReport {
  double paired = 0.0;    // mean cos(h_cls_i, z_cxt_i)
  double unpaired = 0.0;  // mean cos(h_cls_i, z_cxt_π(i)), π a seeded derangement
  double margin() const { return paired - unpaired; }
};

template <typename T>
MarginReport cosine_margin(const AlignModules<T>& m, std::span<const data::TimeSeriesInstance* const> instances,
                           std::uint64_t seed);

template <typename Allowed>
std::vector<std::size_t> top_k(std::span<const double> row, std::size_t self, std::size_t K, Allowed allowed) {
  std::vector<std::size_t> pool;
  for (std::size_t j = 0; j < row.size(); ++j)
    if (j != self && allowed(j)) pool.push_back(j);
  const std::size_t k = std::min(K, pool.size());
  std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k), pool.end(),
                    [&](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
  pool.resize(k);
  return pool;
}

extern template class Fusion<float>;
extern template class Fusion<double>;

}  // namespace trace::align
