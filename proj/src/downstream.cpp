#include "trace/downstream.hpp"

#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

#include "trace/optim.hpp"

namespace trace::downstream {

void ClassifyConfig::validate() const {
  if (epochs == 0) throw std::invalid_argument("classify: epochs must be >= 1");
  if (batch_size == 0) throw std::invalid_argument("classify: batch_size must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("classify: lr must be positive");
}

namespace {

template <typename T>
std::vector<std::vector<double>> cls_of(const model::Encoder<T>& encoder, std::span<const data::TimeSeriesInstance* const> set) {
  std::vector<data::Series> raw;
  for (const auto* inst : set) raw.push_back(inst->values);
  return rag::cls_embeddings(encoder, std::span<const data::Series>(raw));
}

template <typename T>
double accuracy(const model::Encoder<T>& encoder, const std::vector<std::vector<double>>& features,
                std::span<const data::TimeSeriesInstance* const> set) {
  if (set.empty()) return 0.0;
  const std::size_t d = encoder.config().d;
  std::vector<T> flat;
  for (const auto& f : features) flat.insert(flat.end(), f.begin(), f.end());
  ad::Tape<T> tape;
  const auto logits = encoder.classification_head(tape, ad::Tensor<T>::constant({set.size(), d}, std::move(flat)));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < logits.cols(); ++k)
      if (logits.at(i, k) > logits.at(i, best)) best = k;
    if (static_cast<int>(best) == set[i]->label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(set.size());
}

}  // namespace

template <typename T>
ClassifyResult train_classifier(model::Encoder<T>& encoder, std::span<const data::TimeSeriesInstance* const> train_set,
                                std::span<const data::TimeSeriesInstance* const> test_set, const ClassifyConfig& config) {
  config.validate();
  if (train_set.empty()) throw std::invalid_argument("classify: empty training split");
  const std::size_t d = encoder.config().d;
  const auto train_features = cls_of(encoder, train_set);
  const auto test_features = cls_of(encoder, test_set);

  AdamWConfig opt_cfg;
  opt_cfg.weight_decay = 0.0;
  AdamW<T> optimizer(encoder.classifier_parameters(), opt_cfg);
  const std::size_t per_epoch = (train_set.size() + config.batch_size - 1) / config.batch_size;
  WarmupCosine schedule{config.lr, 0, config.epochs * per_epoch};
  Rng shuffle = substream(config.seed, "classify/shuffle");

  ClassifyResult result;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = train::epoch_order(train_set.size(), shuffle);
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, order.size() - begin);
      std::vector<T> x;
      std::vector<int> labels;
      for (std::size_t i = 0; i < n; ++i) {
        const auto k = order[begin + i];
        x.insert(x.end(), train_features[k].begin(), train_features[k].end());
        labels.push_back(train_set[k]->label);
      }
      encoder.classifier_parameters().zero_grad();
      ad::Tape<T> tape;
      const auto logits = encoder.classification_head(tape, ad::Tensor<T>::constant({n, d}, std::move(x)));
      const auto loss = tape.cross_entropy(logits, labels);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) throw train::NonFiniteLoss(fmt::format("classify: non-finite loss at step {}", step));
      tape.backward(loss);
      optimizer.step(schedule.lr_at(step));
      result.history.steps.push_back({step, epoch, value, {}});
      sum += value;
      ++batches;
      ++step;
    }
    result.history.epoch_means.push_back(sum / static_cast<double>(batches));
  }
  result.train_accuracy = accuracy(encoder, train_features, train_set);
  result.test_accuracy = accuracy(encoder, test_features, test_set);
  return result;
}

std::string DownstreamReport::to_key_values() const {
  std::string out;
  out += fmt::format("classify.train_accuracy={:.6f}\n", classify.train_accuracy);
  out += fmt::format("classify.test_accuracy={:.6f}\n", classify.test_accuracy);
  out += fmt::format("forecast.mae={:.6f}\n", forecast.mae);
  out += fmt::format("forecast.mse={:.6f}\n", forecast.mse);
  out += fmt::format("backbone.unchanged={}\n", backbone_before == backbone_after ? 1 : 0);
  return out;
}

template <typename T>
DownstreamReport evaluate_downstream(model::Encoder<T>& encoder, const data::Corpus& corpus, const ClassifyConfig& classify,
                                     const rag::RagConfig& forecast) {
  DownstreamReport report;
  report.backbone_before = encoder.parameters().checksum();
  report.classify = train_classifier(encoder, corpus.split(data::Split::kTrain), corpus.split(data::Split::kTest), classify);

  const auto pairs = data::make_forecast_pairs(corpus, forecast.history, forecast.horizon);
  std::vector<data::ForecastPair> train, test;
  for (const auto& p : pairs) (p.split == data::Split::kTest ? test : train).push_back(p);
  const rag::ContextStore<T> no_store;
  report.forecast = rag::train_setting(encoder, no_store, rag::RagMode::kNone, train, test, forecast);
  report.backbone_after = encoder.parameters().checksum();
  return report;
}

template ClassifyResult train_classifier<float>(model::Encoder<float>&, std::span<const data::TimeSeriesInstance* const>,
                                                std::span<const data::TimeSeriesInstance* const>, const ClassifyConfig&);
template ClassifyResult train_classifier<double>(model::Encoder<double>&, std::span<const data::TimeSeriesInstance* const>,
                                                 std::span<const data::TimeSeriesInstance* const>, const ClassifyConfig&);
template DownstreamReport evaluate_downstream<float>(model::Encoder<float>&, const data::Corpus&, const ClassifyConfig&,
                                                     const rag::RagConfig&);
template DownstreamReport evaluate_downstream<double>(model::Encoder<double>&, const data::Corpus&, const ClassifyConfig&,
                                                      const rag::RagConfig&);

}  // namespace trace::downstream
