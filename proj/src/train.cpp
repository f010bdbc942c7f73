#include "trace/train.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include <fmt/format.h>

#include "trace/optim.hpp"

namespace trace::train {

std::string LossHistory::to_text() const {
  std::string out = "# step epoch loss";
  for (const auto& name : part_names) out += " " + name;
  out += '\n';
  for (const auto& row : steps) {
    out += fmt::format("{} {} {:.10g}", row.step, row.epoch, row.loss);
    for (double p : row.parts) out += fmt::format(" {:.10g}", p);
    out += '\n';
  }
  return out;
}

void LossHistory::write(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write loss history to " + path.string());
  out << to_text();
}

std::vector<std::size_t> epoch_order(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  return order;
}

void PretrainConfig::validate() const {
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw std::invalid_argument("pretrain: mask_ratio must lie in (0, 1)");
  if (epochs == 0) throw std::invalid_argument("pretrain: epochs must be >= 1");
  if (batch_size == 0) throw std::invalid_argument("pretrain: batch_size must be >= 1");
  if (!(peak_lr > 0.0)) throw std::invalid_argument("pretrain: peak_lr must be positive");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw std::invalid_argument("pretrain: warmup_fraction must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("pretrain: weight_decay must be >= 0");
}

std::size_t PretrainConfig::total_steps(std::size_t n) const { return epochs * ((n + batch_size - 1) / batch_size); }

std::size_t PretrainConfig::warmup_steps(std::size_t n) const {
  const std::size_t total = total_steps(n);
  const auto w = static_cast<std::size_t>(std::llround(warmup_fraction * static_cast<double>(total)));
  return std::min(w, total == 0 ? 0 : total - 1);
}

namespace {

std::vector<data::Series> normalize_all(std::span<const data::Series> raw) {
  std::vector<data::Series> out;
  out.reserve(raw.size());
  for (const auto& x : raw) out.push_back(model::revin_normalize(x).series);
  return out;
}

std::vector<std::uint8_t> element_mask(const model::MaskDraw& draw, std::size_t patch_len) {
  std::vector<std::uint8_t> out;
  out.reserve(draw.bitmap.size() * draw.per_item * patch_len);
  for (const auto& bits : draw.bitmap)
    for (auto b : bits) out.insert(out.end(), patch_len, b);
  return out;
}

}  // namespace

template <typename T>
ad::Tensor<T> reconstruction_loss(ad::Tape<T>& tape, const model::Encoder<T>& encoder, std::span<const data::Series> normalized,
                                  const model::MaskDraw& draw, Rng* dropout_rng) {
  const std::size_t P = encoder.config().patch_len;
  auto masked = encoder.apply_mask(tape, encoder.tokenize(tape, normalized), draw);
  auto out = encoder.encode_tokens(tape, masked.sequence, dropout_rng);
  auto pred = encoder.reconstruction_head(tape, out);
  auto target = ad::Tensor<T>::constant(pred.shape(), model::patch_targets<T>(normalized, P));
  return tape.mse(pred, target, element_mask(draw, P));
}

template <typename T>
double evaluate_reconstruction(const model::Encoder<T>& encoder, std::span<const data::Series> raw, double mask_ratio,
                               std::uint64_t seed, std::size_t batch_size) {
  if (raw.empty()) throw std::invalid_argument("evaluate_reconstruction: no series");
  const auto normalized = normalize_all(raw);
  Rng rng = substream(seed, "pretrain/eval-mask");
  const auto& cfg = encoder.config();
  double weighted = 0.0;
  std::size_t total = 0;
  for (std::size_t begin = 0; begin < normalized.size(); begin += batch_size) {
    const std::size_t n = std::min(batch_size, normalized.size() - begin);
    std::span<const data::Series> batch(normalized.data() + begin, n);
    const auto draw = model::draw_mask(model::make_layout(cfg.channels, batch[0].steps, cfg.patch_len), n, mask_ratio, rng);
    ad::Tape<T> tape;
    weighted += static_cast<double>(reconstruction_loss(tape, encoder, batch, draw).item()) * static_cast<double>(n);
    total += n;
  }
  return weighted / static_cast<double>(total);
}

template <typename T>
PretrainResult pretrain(model::Encoder<T>& encoder, std::span<const data::Series> raw, const PretrainConfig& config,
                        const EpochCallback& on_epoch) {
  config.validate();
  if (raw.empty()) throw std::invalid_argument("pretrain: empty training set");
  const auto& mcfg = encoder.config();
  if (raw[0].channels != mcfg.channels)
    throw std::invalid_argument(fmt::format("pretrain: corpus has {} channels, model expects {}", raw[0].channels, mcfg.channels));

  const auto normalized = normalize_all(raw);
  const auto layout = model::make_layout(mcfg.channels, raw[0].steps, mcfg.patch_len);
  WarmupCosine schedule{config.peak_lr, config.warmup_steps(raw.size()), config.total_steps(raw.size())};
  schedule.validate();
  AdamWConfig opt_cfg;
  opt_cfg.weight_decay = config.weight_decay;
  AdamW<T> optimizer({&encoder.parameters(), &encoder.reconstruction_parameters()}, opt_cfg);

  Rng shuffle = substream(config.seed, "pretrain/shuffle");
  Rng mask_rng = substream(config.seed, "pretrain/mask");
  Rng dropout = substream(config.seed, "pretrain/dropout");

  PretrainResult result;
  result.initial_mse = evaluate_reconstruction(encoder, raw, config.mask_ratio, config.seed);
  std::size_t step = 0;
  std::vector<data::Series> batch;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = epoch_order(normalized.size(), shuffle);
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, order.size() - begin);
      batch.clear();
      for (std::size_t i = 0; i < n; ++i) batch.push_back(normalized[order[begin + i]]);
      const auto draw = model::draw_mask(layout, n, config.mask_ratio, mask_rng);

      encoder.parameters().zero_grad();
      encoder.reconstruction_parameters().zero_grad();
      ad::Tape<T> tape;
      auto loss = reconstruction_loss(tape, encoder, batch, draw, mcfg.dropout > 0.0 ? &dropout : nullptr);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value))
        throw NonFiniteLoss(fmt::format("pretrain: non-finite loss {} at step {} (epoch {})", value, step, epoch));
      tape.backward(loss);
      optimizer.step(schedule.lr_at(step));
      result.history.steps.push_back({step, epoch, value, {}});
      sum += value;
      ++batches;
      ++step;
    }
    result.history.epoch_means.push_back(sum / static_cast<double>(batches));
    if (on_epoch) on_epoch(epoch, result.history.epoch_means.back());
  }
  result.final_mse = evaluate_reconstruction(encoder, raw, config.mask_ratio, config.seed);
  return result;
}

template ad::Tensor<float> reconstruction_loss<float>(ad::Tape<float>&, const model::Encoder<float>&, std::span<const data::Series>,
                                                      const model::MaskDraw&, Rng*);
template ad::Tensor<double> reconstruction_loss<double>(ad::Tape<double>&, const model::Encoder<double>&,
                                                        std::span<const data::Series>, const model::MaskDraw&, Rng*);
template double evaluate_reconstruction<float>(const model::Encoder<float>&, std::span<const data::Series>, double, std::uint64_t,
                                               std::size_t);
template double evaluate_reconstruction<double>(const model::Encoder<double>&, std::span<const data::Series>, double,
                                                std::uint64_t, std::size_t);
template PretrainResult pretrain<float>(model::Encoder<float>&, std::span<const data::Series>, const PretrainConfig&,
                                        const EpochCallback&);
template PretrainResult pretrain<double>(model::Encoder<double>&, std::span<const data::Series>, const PretrainConfig&,
                                         const EpochCallback&);

}  // namespace trace::train
