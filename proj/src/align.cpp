#include "trace/align.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

#include "trace/optim.hpp"

namespace trace::align {

void AlignConfig::validate() const {
  if (K == 0) throw std::invalid_argument("align: K must be >= 1");
  if (!(temperature > 0.0)) throw std::invalid_argument("align: temperature must be positive");
  if (!(lambda_ch >= 0.0)) throw std::invalid_argument("align: lambda_ch must be >= 0");
  if (epochs == 0) throw std::invalid_argument("align: epochs must be >= 1");
  if (batch_size < 2) throw std::invalid_argument("align: batch_size must be >= 2");
  if (!(peak_lr > 0.0)) throw std::invalid_argument("align: peak_lr must be positive");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw std::invalid_argument("align: warmup_fraction must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("align: weight_decay must be >= 0");
}

NegativeSets mine_negatives(std::span<const double> sim_global, std::span<const double> sim_channel, std::size_t B,
                            std::size_t C, std::size_t K, ChannelPool pool) {
  if (B < 2) throw std::invalid_argument("mine_negatives: batch needs at least 2 instances");
  if (sim_global.size() != B * B || sim_channel.size() != B * C * B * C)
    throw std::invalid_argument("mine_negatives: similarity matrices do not match B and C");
  const std::size_t N = B * C;
  NegativeSets sets;
  std::vector<double> column(std::max(B, N));
  auto any = [](std::size_t) { return true; };

  for (std::size_t i = 0; i < B; ++i) {
    sets.cxt.push_back(top_k(sim_global.subspan(i * B, B), i, K, any));
    for (std::size_t j = 0; j < B; ++j) column[j] = sim_global[j * B + i];
    sets.cxt_text.push_back(top_k(std::span<const double>(column.data(), B), i, K, any));
  }
  for (std::size_t a = 0; a < N; ++a) {
    const std::size_t i = a / C, c = a % C;
    auto allowed = [&](std::size_t x) {
      return pool == ChannelPool::kGeneral || x / C == i || x % C == c;
    };
    sets.ch.push_back(top_k(sim_channel.subspan(a * N, N), a, K, allowed));
    for (std::size_t x = 0; x < N; ++x) column[x] = sim_channel[x * N + a];
    sets.ch_text.push_back(top_k(std::span<const double>(column.data(), N), a, K, allowed));
  }
  return sets;
}

template <typename T>
Fusion<T>::Fusion(std::size_t d, double init_std, std::uint64_t seed) : d_(d) {
  Rng rng = substream(seed, "fuse/init");
  store_.add_normal("fuse.q", {d, d}, init_std, rng);
  store_.add_normal("fuse.k", {d, d}, init_std, rng);
  store_.add_normal("fuse.v", {d, d}, init_std, rng);
  // Zero output projection: refined == h_cit until training moves it.
  store_.add_zeros("fuse.out", {d, d}, true);
}

template <typename T>
ad::Tensor<T> Fusion<T>::forward(ad::Tape<T>& tape, const ad::Tensor<T>& h_cit, const ad::Tensor<T>& z_ch,
                                 std::size_t batch, std::size_t channels) const {
  if (h_cit.rows() != batch * channels || z_ch.rows() != batch * channels || h_cit.cols() != d_ || z_ch.cols() != d_)
    throw ad::ShapeError(fmt::format("fuse: expected [{}×{}] inputs", batch * channels, d_));
  const ad::Tensor<T> parts[] = {tape.matmul(h_cit, store_.get("fuse.q")), tape.matmul(z_ch, store_.get("fuse.k")),
                                 tape.matmul(z_ch, store_.get("fuse.v"))};
  ad::AttentionSpec<T> spec;
  spec.batch = batch;
  spec.seq_len = channels;
  spec.n_heads = 1;
  spec.positions.assign(channels, 0);
  spec.scale = 1.0 / std::sqrt(static_cast<double>(d_));
  const auto attended = tape.attention(tape.concat(parts, 1), spec);
  return tape.add(h_cit, tape.matmul(attended, store_.get("fuse.out")));
}

namespace {

std::vector<ad::ContrastiveRow> contrastive_rows(const std::vector<std::vector<std::size_t>>& sets) {
  std::vector<ad::ContrastiveRow> rows(sets.size());
  for (std::size_t i = 0; i < sets.size(); ++i) rows[i] = {i, i, sets[i]};
  return rows;
}

template <typename T>
std::vector<double> as_double(const ad::Tensor<T>& x) {
  return {x.values().begin(), x.values().end()};
}

// Bidirectional InfoNCE over one similarity matrix (rows ts, columns text).
template <typename T>
ad::Tensor<T> bidirectional(ad::Tape<T>& tape, const ad::Tensor<T>& sim, T inv_tau,
                            const std::vector<std::vector<std::size_t>>& ts_sets,
                            const std::vector<std::vector<std::size_t>>& text_sets) {
  const auto logits = tape.scale(sim, inv_tau);
  const auto ts_rows = contrastive_rows(ts_sets);
  const auto text_rows = contrastive_rows(text_sets);
  const auto ts_to_text = tape.info_nce(logits, ts_rows);
  const auto text_to_ts = tape.info_nce(tape.transpose(logits), text_rows);
  return tape.scale(tape.add(ts_to_text, text_to_ts), T(0.5));
}

std::vector<data::Series> series_of(std::span<const data::TimeSeriesInstance* const> batch) {
  std::vector<data::Series> out;
  out.reserve(batch.size());
  for (const auto* inst : batch) out.push_back(inst->values);
  return out;
}

template <typename T>
double loss_value(const ad::Tensor<T>& t) {
  return static_cast<double>(t.item());
}

}  // namespace

template <typename T>
AlignLoss<T> alignment_loss(ad::Tape<T>& tape, const ad::Tensor<T>& h_cls, const ad::Tensor<T>& refined_cit,
                            const ad::Tensor<T>& z_cxt, const ad::Tensor<T>& z_ch, std::size_t channels,
                            const AlignConfig& config) {
  config.validate();
  const std::size_t B = h_cls.rows();
  if (z_cxt.rows() != B || refined_cit.rows() != B * channels || z_ch.rows() != B * channels)
    throw ad::ShapeError("alignment_loss: inconsistent batch shapes");
  const auto hn = tape.l2_normalize_rows(h_cls);
  const auto zn = tape.l2_normalize_rows(z_cxt);
  const auto cn = tape.l2_normalize_rows(refined_cit);
  const auto tn = tape.l2_normalize_rows(z_ch);
  const auto sim_g = tape.matmul(hn, tape.transpose(zn));
  const auto sim_c = tape.matmul(cn, tape.transpose(tn));

  AlignLoss<T> out;
  out.sets = mine_negatives(as_double(sim_g), as_double(sim_c), B, channels, config.K, config.pool);
  const T inv_tau = static_cast<T>(1.0 / config.temperature);
  out.global = bidirectional(tape, sim_g, inv_tau, out.sets.cxt, out.sets.cxt_text);
  out.channel = bidirectional(tape, sim_c, inv_tau, out.sets.ch, out.sets.ch_text);
  out.total = tape.add(out.global, tape.scale(out.channel, static_cast<T>(config.lambda_ch)));
  return out;
}

template <typename T>
AlignLoss<T> batch_loss(ad::Tape<T>& tape, const AlignModules<T>& m, std::span<const data::TimeSeriesInstance* const> batch,
                        const AlignConfig& config, Rng* dropout_rng) {
  const std::size_t C = m.encoder->config().channels;
  const auto raw = series_of(batch);
  const auto enc = m.encoder->encode(tape, raw, dropout_rng);
  std::vector<std::string> contexts, channel_texts;
  for (const auto* inst : batch) {
    if (inst->channel_texts.size() != C)
      throw std::invalid_argument(fmt::format("align: instance {} has {} channel texts, model expects {}", inst->id,
                                              inst->channel_texts.size(), C));
    contexts.push_back(inst->context_text);
    channel_texts.insert(channel_texts.end(), inst->channel_texts.begin(), inst->channel_texts.end());
  }
  const auto z_cxt = m.text->embed(tape, contexts);
  const auto z_ch = m.text->embed(tape, channel_texts);
  const auto refined = m.fusion->forward(tape, enc.h_cit, z_ch, batch.size(), C);
  return alignment_loss(tape, enc.h_cls, refined, z_cxt, z_ch, C, config);
}

template <typename T>
double evaluate_alignment(const AlignModules<T>& m, std::span<const data::TimeSeriesInstance* const> instances,
                          const AlignConfig& config) {
  double weighted = 0.0;
  std::size_t total = 0;
  for (std::size_t begin = 0; begin < instances.size(); begin += config.batch_size) {
    const std::size_t n = std::min(config.batch_size, instances.size() - begin);
    if (n < 2) break;  // a lone trailing instance has no negatives
    ad::Tape<T> tape;
    weighted += loss_value(batch_loss(tape, m, instances.subspan(begin, n), config).total) * static_cast<double>(n);
    total += n;
  }
  if (total == 0) throw std::invalid_argument("evaluate_alignment: need at least 2 instances");
  return weighted / static_cast<double>(total);
}

template <typename T>
AlignResult train_alignment(const AlignModules<T>& m, std::span<const data::TimeSeriesInstance* const> train_set,
                            const AlignConfig& config, const train::EpochCallback& on_epoch) {
  config.validate();
  if (train_set.size() < 2) throw std::invalid_argument("align: need at least 2 training instances");
  const std::size_t per_epoch = (train_set.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = config.epochs * per_epoch;
  WarmupCosine schedule{config.peak_lr,
                        std::min<std::size_t>(static_cast<std::size_t>(std::llround(config.warmup_fraction * total_steps)),
                                              total_steps - 1),
                        total_steps};
  schedule.validate();
  AdamWConfig opt_cfg;
  opt_cfg.weight_decay = config.weight_decay;
  AdamW<T> optimizer({&m.encoder->parameters(), &m.text->parameters(), &m.fusion->parameters()}, opt_cfg);

  Rng shuffle = substream(config.seed, "align/shuffle");
  Rng dropout = substream(config.seed, "align/dropout");
  const bool use_dropout = m.encoder->config().dropout > 0.0;

  AlignResult result;
  result.history.part_names = {"global", "channel"};
  result.initial_loss = evaluate_alignment(m, train_set, config);
  std::size_t step = 0;
  std::vector<const data::TimeSeriesInstance*> batch;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = train::epoch_order(train_set.size(), shuffle);
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, order.size() - begin);
      if (n < 2) continue;
      batch.clear();
      for (std::size_t i = 0; i < n; ++i) batch.push_back(train_set[order[begin + i]]);

      m.encoder->parameters().zero_grad();
      m.text->parameters().zero_grad();
      m.fusion->parameters().zero_grad();
      ad::Tape<T> tape;
      const auto loss = batch_loss(tape, m, batch, config, use_dropout ? &dropout : nullptr);
      const double value = loss_value(loss.total);
      if (!std::isfinite(value))
        throw train::NonFiniteLoss(fmt::format("align: non-finite loss {} at step {} (epoch {}); global {}, channel {}", value,
                                               step, epoch, loss_value(loss.global), loss_value(loss.channel)));
      tape.backward(loss.total);
      optimizer.step(schedule.lr_at(step));
      result.history.steps.push_back({step, epoch, value, {loss_value(loss.global), loss_value(loss.channel)}});
      sum += value;
      ++batches;
      ++step;
    }
    result.history.epoch_means.push_back(sum / static_cast<double>(std::max<std::size_t>(batches, 1)));
    if (on_epoch) on_epoch(epoch, result.history.epoch_means.back());
  }
  result.final_loss = evaluate_alignment(m, train_set, config);
  return result;
}

template <typename T>
MarginReport cosine_margin(const AlignModules<T>& m, std::span<const data::TimeSeriesInstance* const> instances,
                           std::uint64_t seed) {
  const std::size_t n = instances.size();
  if (n < 2) throw std::invalid_argument("cosine_margin: need at least 2 instances");
  const std::size_t d = m.encoder->config().d;
  std::vector<double> h(n * d), z(n * d);
  constexpr std::size_t kBatch = 64;
  for (std::size_t begin = 0; begin < n; begin += kBatch) {
    const std::size_t b = std::min(kBatch, n - begin);
    const auto slice = instances.subspan(begin, b);
    ad::Tape<T> tape;
    const auto enc = m.encoder->encode(tape, series_of(slice));
    std::vector<std::string> contexts;
    for (const auto* inst : slice) contexts.push_back(inst->context_text);
    const auto hn = tape.l2_normalize_rows(enc.h_cls);
    const auto zn = tape.l2_normalize_rows(m.text->embed(tape, contexts));
    std::copy(hn.values().begin(), hn.values().end(), h.begin() + static_cast<std::ptrdiff_t>(begin * d));
    std::copy(zn.values().begin(), zn.values().end(), z.begin() + static_cast<std::ptrdiff_t>(begin * d));
  }
  auto cosine = [&](std::size_t i, std::size_t j) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += h[i * d + k] * z[j * d + k];
    return s;
  };
  // A cyclic shift by a nonzero offset pairs every instance with a different one.
  Rng rng = substream(seed, "align/margin");
  const std::size_t shift = std::uniform_int_distribution<std::size_t>(1, n - 1)(rng);
  MarginReport report;
  for (std::size_t i = 0; i < n; ++i) {
    report.paired += cosine(i, i);
    report.unpaired += cosine(i, (i + shift) % n);
  }
  report.paired /= static_cast<double>(n);
  report.unpaired /= static_cast<double>(n);
  return report;
}

template class Fusion<float>;
template class Fusion<double>;

#define TRACE_ALIGN_INSTANTIATE(T)                                                                                           \
  template AlignLoss<T> alignment_loss<T>(ad::Tape<T>&, const ad::Tensor<T>&, const ad::Tensor<T>&, const ad::Tensor<T>&,  \
                                          const ad::Tensor<T>&, std::size_t, const AlignConfig&);                          \
  template AlignLoss<T> batch_loss<T>(ad::Tape<T>&, const AlignModules<T>&, std::span<const data::TimeSeriesInstance* const>, \
                                      const AlignConfig&, Rng*);                                                             \
  template double evaluate_alignment<T>(const AlignModules<T>&, std::span<const data::TimeSeriesInstance* const>,           \
                                        const AlignConfig&);                                                                 \
  template AlignResult train_alignment<T>(const AlignModules<T>&, std::span<const data::TimeSeriesInstance* const>, const AlignConfig&, \
                                const train::EpochCallback&);                                                                \
  template MarginReport cosine_margin<T>(const AlignModules<T>&, std::span<const data::TimeSeriesInstance* const>,          \
                                         std::uint64_t);

TRACE_ALIGN_INSTANTIATE(float)
TRACE_ALIGN_INSTANTIATE(double)

}  // namespace trace::align
