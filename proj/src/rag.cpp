#include "trace/rag.hpp"

#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

#include "trace/optim.hpp"

namespace trace::rag {

const char* mode_name(RagMode mode) {
  switch (mode) {
    case RagMode::kNone: return "none";
    case RagMode::kTsOnly: return "ts_only";
    case RagMode::kTsText: return "ts_text";
  }
  return "?";
}

RagMode parse_mode(const std::string& name) {
  for (auto m : {RagMode::kNone, RagMode::kTsOnly, RagMode::kTsText})
    if (name == mode_name(m)) return m;
  throw std::invalid_argument("unknown RAG mode '" + name + "' (expected none, ts_only, ts_text)");
}

void RagConfig::validate() const {
  if (R == 0) throw std::invalid_argument("rag: R must be >= 1");
  if (history == 0 || horizon == 0) throw std::invalid_argument("rag: history and horizon must be >= 1");
  if (epochs == 0) throw std::invalid_argument("rag: epochs must be >= 1");
  if (batch_size == 0) throw std::invalid_argument("rag: batch_size must be >= 1");
  if (!(peak_lr > 0.0)) throw std::invalid_argument("rag: peak_lr must be positive");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw std::invalid_argument("rag: warmup_fraction must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("rag: weight_decay must be >= 0");
}

template <typename T>
std::vector<std::vector<double>> cls_embeddings(const model::Encoder<T>& encoder, std::span<const data::Series> histories,
                                                std::size_t batch_size) {
  const std::size_t d = encoder.config().d;
  std::vector<std::vector<double>> out;
  out.reserve(histories.size());
  for (std::size_t begin = 0; begin < histories.size(); begin += batch_size) {
    const std::size_t n = std::min(batch_size, histories.size() - begin);
    ad::Tape<T> tape;
    const auto enc = encoder.encode(tape, histories.subspan(begin, n));
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> row(d);
      for (std::size_t j = 0; j < d; ++j) row[j] = static_cast<double>(enc.h_cls.at(i, j));
      out.push_back(std::move(row));
    }
  }
  return out;
}

template <typename T>
ContextStore<T> build_context_store(const model::Encoder<T>& encoder, const text::TextEmbedder<T>& embedder,
                                    std::span<const data::TimeSeriesInstance* const> corpus, std::size_t history) {
  const std::size_t d = encoder.config().d;
  ContextStore<T> store;
  store.index = retrieval::EmbeddingIndex(retrieval::Modality::kTs, d);
  std::vector<data::Series> windows;
  std::vector<std::string> contexts;
  for (const auto* inst : corpus) {
    windows.push_back(inst->values.columns(0, history));
    contexts.push_back(inst->context_text);
  }
  const auto cls = cls_embeddings(encoder, windows);
  ad::Tape<T> tape;
  const auto z = embedder.embed(tape, contexts);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    store.h_ts.emplace_back(cls[i].begin(), cls[i].end());
    store.z_cxt.emplace_back(z.values().begin() + static_cast<std::ptrdiff_t>(i * d),
                             z.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
    store.index.add({corpus[i]->id, corpus[i]->label, cls[i], {}, i});
  }
  return store;
}

template <typename T>
std::vector<std::size_t> retrieve_context(const ContextStore<T>& store, std::span<const double> query_cls, std::size_t R,
                                          const std::optional<std::string>& exclude_id) {
  const auto res = retrieval::query(store.index, query_cls, R, exclude_id);
  std::vector<std::size_t> out;
  for (const auto& h : res.hits) out.push_back(h.entry);
  return out;
}

template <typename T>
PromptProjection<T>::PromptProjection(std::size_t d, std::size_t R, RagMode mode, std::size_t d_f) : d_(d), R_(R), mode_(mode) {
  if (d_f != d) throw std::invalid_argument(fmt::format("rag: prompt width {} must equal the encoder width {}", d_f, d));
  if (mode == RagMode::kNone) throw std::invalid_argument("rag: no prompt projection without retrieval");
  if (R == 0) throw std::invalid_argument("rag: R must be >= 1");
  store_.add_zeros("rag_proj.weight", {input_width(), d}, true);
  store_.add_zeros("rag_proj.bias", {d});
}

template <typename T>
std::size_t PromptProjection<T>::input_width() const {
  return (mode_ == RagMode::kTsText ? 2 : 1) * R_ * d_;
}

template <typename T>
std::vector<T> PromptProjection<T>::features(const ContextStore<T>& store, std::span<const std::size_t> retrieved) const {
  if (retrieved.size() != R_)
    throw std::invalid_argument(fmt::format("rag: projection expects {} retrieved pairs, got {}", R_, retrieved.size()));
  std::vector<T> row;
  row.reserve(input_width());
  for (std::size_t e : retrieved) {
    if (store.h_ts[e].size() != d_) throw std::invalid_argument("rag: stored embedding width does not match the projection");
    row.insert(row.end(), store.h_ts[e].begin(), store.h_ts[e].end());
    if (mode_ == RagMode::kTsText) row.insert(row.end(), store.z_cxt[e].begin(), store.z_cxt[e].end());
  }
  return row;
}

template <typename T>
ad::Tensor<T> PromptProjection<T>::forward(ad::Tape<T>& tape, const ad::Tensor<T>& features) const {
  if (features.cols() != input_width())
    throw ad::ShapeError(fmt::format("rag: prompt features have width {}, expected {}", features.cols(), input_width()));
  return tape.add_bias(tape.matmul(features, store_.get("rag_proj.weight")), store_.get("rag_proj.bias"));
}

template <typename T>
ad::Tensor<T> forecast_normalized(ad::Tape<T>& tape, const model::Encoder<T>& encoder, const model::ForecastHead<T>& head,
                                  const PromptProjection<T>* proj, std::span<const data::Series> histories,
                                  const ad::Tensor<T>* features, model::EncoderOutput<T>* out) {
  std::optional<ad::Tensor<T>> prompt;
  if (proj) {
    if (!features) throw std::invalid_argument("rag: prompt projection given without features");
    prompt = proj->forward(tape, *features);
  }
  auto enc = encoder.encode(tape, histories, nullptr, prompt ? &*prompt : nullptr);
  auto pred = head.normalized(tape, encoder, enc);
  if (out) *out = std::move(enc);
  return pred;
}

template <typename T>
data::Series rag_forecast(const model::Encoder<T>& encoder, const model::ForecastHead<T>& head, const PromptProjection<T>* proj,
                          const data::Series& history, std::span<const T> features) {
  ad::Tape<T> tape;
  std::optional<ad::Tensor<T>> f;
  if (proj) f = ad::Tensor<T>::constant({1, features.size()}, std::vector<T>(features.begin(), features.end()));
  std::optional<ad::Tensor<T>> prompt;
  if (proj) prompt = proj->forward(tape, *f);
  const auto enc = encoder.encode(tape, std::span<const data::Series>(&history, 1), nullptr, prompt ? &*prompt : nullptr);
  const auto y = head.forward(tape, encoder, enc);
  data::Series out(history.channels, head.horizon());
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = static_cast<double>(y.values()[i]);
  return out;
}

namespace {

// Clears requires_grad on every backbone parameter for the guard's lifetime.
template <typename T>
class FreezeGuard {
 public:
  explicit FreezeGuard(ParameterStore<T>& store) : store_(store) {
    for (const auto& p : store_.entries()) saved_.push_back(p.tensor.requires_grad());
    store_.set_requires_grad(false);
  }
  ~FreezeGuard() {
    auto entries = store_.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      ad::Tensor<T> t = entries[i].tensor;
      t.set_requires_grad(saved_[i]);
    }
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  ParameterStore<T>& store_;
  std::vector<bool> saved_;
};

// Targets in the RevIN space of each history: [n·C × H].
std::vector<double> normalized_future(const data::ForecastPair& p) {
  const auto state = model::revin_normalize(p.history).state;
  std::vector<double> out(p.future.values.size());
  for (std::size_t c = 0; c < p.future.channels; ++c)
    for (std::size_t t = 0; t < p.future.steps; ++t)
      out[c * p.future.steps + t] = (p.future.at(c, t) - state.mean[c]) / state.stdev[c];
  return out;
}

template <typename T>
std::vector<std::vector<T>> prompt_features(const model::Encoder<T>& encoder, const ContextStore<T>& store,
                                            const PromptProjection<T>& proj, std::span<const data::ForecastPair> pairs) {
  std::vector<data::Series> histories;
  for (const auto& p : pairs) histories.push_back(p.history);
  const auto cls = cls_embeddings(encoder, histories);
  std::vector<std::vector<T>> out;
  out.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto hits = retrieve_context(store, cls[i], proj.retrieved(), pairs[i].id);
    out.push_back(proj.features(store, hits));
  }
  return out;
}

}  // namespace

template <typename T>
SettingResult train_setting(model::Encoder<T>& encoder, const ContextStore<T>& store, RagMode mode,
                            std::span<const data::ForecastPair> train, std::span<const data::ForecastPair> test,
                            const RagConfig& config) {
  config.validate();
  if (train.empty() || test.empty()) throw std::invalid_argument("rag: empty train or test split");
  if (mode != RagMode::kNone && store.h_ts.size() < config.R + 1)
    throw std::invalid_argument(fmt::format("rag: store of {} entries cannot supply R={} neighbours", store.h_ts.size(), config.R));
  FreezeGuard<T> frozen(encoder.parameters());
  const auto& mc = encoder.config();
  const std::size_t patches = model::patch_count(config.history, mc.patch_len);
  model::ForecastHead<T> head(mc.d, patches, config.horizon, mc.init_std, substream(config.seed, "rag/head")());
  std::optional<PromptProjection<T>> proj;
  if (mode != RagMode::kNone) proj.emplace(mc.d, config.R, mode, mc.d);

  std::vector<std::vector<T>> train_features, test_features;
  if (proj) {
    train_features = prompt_features(encoder, store, *proj, train);
    test_features = prompt_features(encoder, store, *proj, test);
  }
  std::vector<std::vector<double>> targets;
  for (const auto& p : train) targets.push_back(normalized_future(p));

  std::vector<const ParameterStore<T>*> stores{&head.parameters()};
  if (proj) stores.push_back(&proj->parameters());
  AdamWConfig opt_cfg;
  opt_cfg.weight_decay = config.weight_decay;
  AdamW<T> optimizer(stores, opt_cfg);
  const std::size_t per_epoch = (train.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total = config.epochs * per_epoch;
  WarmupCosine schedule{config.peak_lr,
                        std::min<std::size_t>(static_cast<std::size_t>(std::llround(config.warmup_fraction * total)), total - 1),
                        total};

  SettingResult result;
  result.mode = mode;
  Rng shuffle = substream(config.seed, "rag/shuffle");
  std::size_t step = 0;
  const std::size_t width = proj ? proj->input_width() : 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = train::epoch_order(train.size(), shuffle);
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, order.size() - begin);
      std::vector<data::Series> histories;
      std::vector<T> feats, target;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = order[begin + i];
        histories.push_back(train[k].history);
        if (proj) feats.insert(feats.end(), train_features[k].begin(), train_features[k].end());
        for (double v : targets[k]) target.push_back(static_cast<T>(v));
      }
      head.parameters().zero_grad();
      if (proj) proj->parameters().zero_grad();
      ad::Tape<T> tape;
      std::optional<ad::Tensor<T>> f;
      if (proj) f = ad::Tensor<T>::constant({n, width}, std::move(feats));
      const auto pred = forecast_normalized(tape, encoder, head, proj ? &*proj : nullptr, histories, f ? &*f : nullptr);
      const auto loss = tape.mse(pred, ad::Tensor<T>::constant(pred.shape(), std::move(target)));
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value))
        throw train::NonFiniteLoss(fmt::format("rag ({}): non-finite loss {} at step {} (epoch {})", mode_name(mode), value, step, epoch));
      tape.backward(loss);
      optimizer.step(schedule.lr_at(step));
      result.history.steps.push_back({step, epoch, value, {}});
      sum += value;
      ++batches;
      ++step;
    }
    result.history.epoch_means.push_back(sum / static_cast<double>(batches));
  }

  double abs_sum = 0.0, sq_sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto y = rag_forecast(encoder, head, proj ? &*proj : nullptr, test[i].history,
                                proj ? std::span<const T>(test_features[i]) : std::span<const T>());
    for (std::size_t k = 0; k < y.values.size(); ++k) {
      const double d = y.values[k] - test[i].future.values[k];
      abs_sum += std::abs(d);
      sq_sum += d * d;
    }
    count += y.values.size();
  }
  result.mae = abs_sum / static_cast<double>(count);
  result.mse = sq_sum / static_cast<double>(count);
  return result;
}

template <typename T>
RagReport run_rag(model::Encoder<T>& encoder, const text::TextEmbedder<T>& embedder, const data::Corpus& corpus,
                  const RagConfig& config) {
  config.validate();
  const auto pairs = data::make_forecast_pairs(corpus, config.history, config.horizon);
  std::vector<data::ForecastPair> train, test;
  for (const auto& p : pairs) (p.split == data::Split::kTest ? test : train).push_back(p);
  const auto store = build_context_store(encoder, embedder, corpus.split(data::Split::kTrain), config.history);

  RagReport report;
  report.backbone_before = encoder.parameters().checksum();
  for (auto mode : {RagMode::kNone, RagMode::kTsOnly, RagMode::kTsText})
    report.settings.push_back(train_setting(encoder, store, mode, train, test, config));
  report.backbone_after = encoder.parameters().checksum();
  return report;
}

const SettingResult& RagReport::setting(RagMode mode) const {
  for (const auto& s : settings)
    if (s.mode == mode) return s;
  throw std::out_of_range(std::string("rag report has no setting ") + mode_name(mode));
}

std::string RagReport::to_text() const {
  std::string out = fmt::format("{:<10} {:>10} {:>10}\n", "setting", "MAE", "MSE");
  for (const auto& s : settings) out += fmt::format("{:<10} {:>10.6f} {:>10.6f}\n", mode_name(s.mode), s.mae, s.mse);
  return out;
}

#define TRACE_RAG_INSTANTIATE(T)                                                                                             \
  template class PromptProjection<T>;                                                                                        \
  template std::vector<std::vector<double>> cls_embeddings<T>(const model::Encoder<T>&, std::span<const data::Series>,        \
                                                              std::size_t);                                                  \
  template ContextStore<T> build_context_store<T>(const model::Encoder<T>&, const text::TextEmbedder<T>&,                     \
                                                  std::span<const data::TimeSeriesInstance* const>, std::size_t);            \
  template std::vector<std::size_t> retrieve_context<T>(const ContextStore<T>&, std::span<const double>, std::size_t,         \
                                                        const std::optional<std::string>&);                                  \
  template ad::Tensor<T> forecast_normalized<T>(ad::Tape<T>&, const model::Encoder<T>&, const model::ForecastHead<T>&,        \
                                                const PromptProjection<T>*, std::span<const data::Series>,                   \
                                                const ad::Tensor<T>*, model::EncoderOutput<T>*);                             \
  template data::Series rag_forecast<T>(const model::Encoder<T>&, const model::ForecastHead<T>&, const PromptProjection<T>*, \
                                        const data::Series&, std::span<const T>);                                            \
  template SettingResult train_setting<T>(model::Encoder<T>&, const ContextStore<T>&, RagMode,                               \
                                          std::span<const data::ForecastPair>, std::span<const data::ForecastPair>,          \
                                          const RagConfig&);                                                                 \
  template RagReport run_rag<T>(model::Encoder<T>&, const text::TextEmbedder<T>&, const data::Corpus&, const RagConfig&);

TRACE_RAG_INSTANTIATE(float)
TRACE_RAG_INSTANTIATE(double)

}  // namespace trace::rag
