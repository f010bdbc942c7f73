#include <cmath>

#include "doctest.h"
#include "trace/rag.hpp"

using namespace trace;
using namespace trace::rag;

namespace {

model::ModelConfig small_model() {
  model::ModelConfig mc;
  mc.d = 16;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.patch_len = 12;
  mc.dropout = 0.0;
  return mc;
}

data::Corpus small_corpus(std::size_t per_class = 4, std::size_t test_per_class = 2) {
  data::GeneratorConfig g;
  g.seed = 5;
  g.train_per_class = per_class;
  g.test_per_class = test_per_class;
  g.patch_len = 12;
  return data::generate_corpus(g);
}

bool any_nonzero(std::span<const float> v) {
  for (float x : v)
    if (x != 0.0f) return true;
  return false;
}

}  // namespace

TEST_CASE("mode names round-trip and unknown names are rejected") {
  for (auto m : {RagMode::kNone, RagMode::kTsOnly, RagMode::kTsText}) CHECK(parse_mode(mode_name(m)) == m);
  CHECK_THROWS_AS(parse_mode("both"), std::invalid_argument);
}

TEST_CASE("config validation") {
  RagConfig c;
  CHECK_NOTHROW(c.validate());
  c.R = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.horizon = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.peak_lr = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("retrieval returns an exact twin first and never the query itself") {
  const auto corpus = small_corpus();
  model::Encoder<float> enc(small_model(), 1);
  text::TextEmbedder<float> txt({}, 16, 2);
  const auto train = corpus.split(data::Split::kTrain);
  const auto store = build_context_store(enc, txt, train, 96);
  REQUIRE(store.h_ts.size() == train.size());
  REQUIRE(store.z_cxt.size() == train.size());

  const std::vector<data::Series> q{train[3]->values.columns(0, 96)};
  const auto cls = cls_embeddings(enc, std::span<const data::Series>(q));
  const auto twin = retrieve_context(store, cls[0], 1);
  REQUIRE(twin.size() == 1);
  CHECK(twin[0] == 3);

  const auto others = retrieve_context(store, cls[0], 5, train[3]->id);
  CHECK(others.size() == 5);
  for (auto e : others) CHECK(e != 3);

  const auto direct = retrieval::query(store.index, cls[0], 5, train[3]->id);
  for (std::size_t i = 0; i < others.size(); ++i) CHECK(others[i] == direct.hits[i].entry);
}

TEST_CASE("prompt projection widths, zero init and rejected configurations") {
  PromptProjection<float> ts(16, 3, RagMode::kTsOnly, 16);
  PromptProjection<float> both(16, 3, RagMode::kTsText, 16);
  CHECK(ts.input_width() == 48);
  CHECK(both.input_width() == 96);
  CHECK_THROWS_AS(PromptProjection<float>(16, 3, RagMode::kTsOnly, 8), std::invalid_argument);
  CHECK_THROWS_AS(PromptProjection<float>(16, 3, RagMode::kNone, 16), std::invalid_argument);

  ad::Tape<float> tape;
  const auto f = ad::Tensor<float>::constant({2, 96}, std::vector<float>(192, 0.7f));
  const auto p = both.forward(tape, f);
  CHECK(p.rows() == 2);
  CHECK(p.cols() == 16);
  CHECK_FALSE(any_nonzero(p.values()));
  const auto bad = ad::Tensor<float>::constant({2, 48}, std::vector<float>(96, 0.0f));
  CHECK_THROWS_AS(both.forward(tape, bad), ad::ShapeError);
}

TEST_CASE("features concatenate the retrieved blocks in order") {
  const auto corpus = small_corpus();
  model::Encoder<float> enc(small_model(), 1);
  text::TextEmbedder<float> txt({}, 16, 2);
  const auto store = build_context_store(enc, txt, corpus.split(data::Split::kTrain), 96);
  PromptProjection<float> both(16, 2, RagMode::kTsText, 16);
  const std::vector<std::size_t> picked{4, 1};
  const auto row = both.features(store, picked);
  REQUIRE(row.size() == 64);
  for (std::size_t k = 0; k < 16; ++k) {
    CHECK(row[k] == store.h_ts[4][k]);
    CHECK(row[16 + k] == store.z_cxt[4][k]);
    CHECK(row[32 + k] == store.h_ts[1][k]);
    CHECK(row[48 + k] == store.z_cxt[1][k]);
  }
  const std::vector<std::size_t> one{4};
  CHECK_THROWS_AS(both.features(store, one), std::invalid_argument);
}

TEST_CASE("with a frozen backbone gradients reach only the projection and head") {
  const auto corpus = small_corpus();
  auto mc = small_model();
  model::Encoder<float> enc(mc, 1);
  enc.parameters().set_requires_grad(false);
  text::TextEmbedder<float> txt({}, 16, 2);
  const auto train = corpus.split(data::Split::kTrain);
  const auto store = build_context_store(enc, txt, train, 96);
  model::ForecastHead<float> head(16, model::patch_count(96, 12), 24, mc.init_std, 9);
  PromptProjection<float> proj(16, 2, RagMode::kTsOnly, 16);

  const auto pairs = data::make_forecast_pairs(corpus, 96, 24);
  std::vector<data::Series> hist{pairs[0].history, pairs[1].history};
  const auto cls = cls_embeddings(enc, std::span<const data::Series>(hist));
  std::vector<float> feats;
  for (std::size_t i = 0; i < 2; ++i) {
    const auto hits = retrieve_context(store, cls[i], 2, pairs[i].id);
    const auto row = proj.features(store, hits);
    feats.insert(feats.end(), row.begin(), row.end());
  }
  ad::Tape<float> tape;
  const auto f = ad::Tensor<float>::constant({2, proj.input_width()}, feats);
  const auto pred = forecast_normalized(tape, enc, head, &proj, hist, &f);
  CHECK(pred.rows() == 2 * 7);
  CHECK(pred.cols() == 24);
  const auto loss = tape.mse(pred, ad::Tensor<float>::constant(pred.shape(), std::vector<float>(pred.values().size(), 1.0f)));
  tape.backward(loss);

  CHECK(any_nonzero(proj.parameters().get("rag_proj.weight").grad()));
  CHECK(any_nonzero(head.parameters().entries()[0].tensor.grad()));
  for (const auto& p : enc.parameters().entries()) {
    INFO(p.name);
    CHECK_FALSE(any_nonzero(p.tensor.grad()));
  }
}

TEST_CASE("rag_forecast is C x H and a nonzero prompt changes it") {
  const auto corpus = small_corpus();
  auto mc = small_model();
  model::Encoder<float> enc(mc, 1);
  model::ForecastHead<float> head(16, model::patch_count(96, 12), 24, mc.init_std, 9);
  PromptProjection<float> proj(16, 1, RagMode::kTsOnly, 16);
  const auto history = corpus.instances[0].values.columns(0, 96);
  const std::vector<float> feats(16, 0.5f);

  const auto plain = rag_forecast<float>(enc, head, nullptr, history);
  CHECK(plain.channels == 7);
  CHECK(plain.steps == 24);
  const auto zero_prompt = rag_forecast<float>(enc, head, &proj, history, feats);
  auto b = proj.parameters().get("rag_proj.bias");
  // Non-constant: a constant row normalizes to the same token as the zero row.
  float k = 0.0f;
  for (auto& v : b.mutable_values()) v = (k += 0.3f);
  const auto prompted = rag_forecast<float>(enc, head, &proj, history, feats);
  CHECK(prompted.values != zero_prompt.values);
  CHECK(plain.values != prompted.values);
}

TEST_CASE("run_rag reports three settings and leaves the backbone untouched") {
  const auto corpus = small_corpus(3, 1);
  model::Encoder<float> enc(small_model(), 1);
  text::TextEmbedder<float> txt({}, 16, 2);
  RagConfig cfg;
  cfg.R = 2;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.seed = 3;
  const auto before = enc.parameters().checksum();
  const auto report = run_rag(enc, txt, corpus, cfg);
  CHECK(report.settings.size() == 3);
  CHECK(report.backbone_before == before);
  CHECK(report.backbone_after == before);
  for (const auto& s : report.settings) {
    CHECK(std::isfinite(s.mae));
    CHECK(std::isfinite(s.mse));
    CHECK(s.mae > 0.0);
    CHECK(s.history.epoch_means.size() == 2);
  }
  for (const auto& p : enc.parameters().entries()) CHECK(p.tensor.requires_grad());
  const auto text = report.to_text();
  CHECK(text.find("ts_only") != std::string::npos);
  CHECK(text.find("ts_text") != std::string::npos);

  const auto again = run_rag(enc, txt, corpus, cfg);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(again.settings[i].mse == report.settings[i].mse);
    CHECK(again.settings[i].mae == report.settings[i].mae);
  }
}
