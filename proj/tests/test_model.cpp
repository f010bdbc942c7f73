#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "gradcheck.hpp"
#include "trace/model.hpp"

using namespace trace;
using namespace trace::model;
using data::Series;

namespace {

Series random_series(std::size_t C, std::size_t T, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Series s(C, T);
  for (double& v : s.values) v = g(rng);
  return s;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.patch_len = 3;
  cfg.channels = 2;
  cfg.dropout = 0.0;
  cfg.init_std = 0.3;
  return cfg;
}

std::vector<testing::CheckedTensor> all_parameters(Encoder<double>& enc) {
  std::vector<testing::CheckedTensor> out;
  for (const auto& p : enc.parameters().entries()) out.push_back({p.name, p.tensor});
  for (const auto& p : enc.reconstruction_parameters().entries()) out.push_back({p.name, p.tensor});
  return out;
}

// Plain-loop reference for one pre-norm block without masking or rotation.
std::vector<double> plain_block(const std::vector<double>& x, std::size_t L, std::size_t d, std::size_t heads,
                                const ParameterStore<double>& store, double eps) {
  auto get = [&](const char* n) {
    auto v = store.get(std::string("layer0.") + n).values();
    return std::vector<double>(v.begin(), v.end());
  };
  auto norm = [&](const std::vector<double>& in, const std::vector<double>& g, const std::vector<double>& b) {
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < L; ++i) {
      double mu = 0, var = 0;
      for (std::size_t j = 0; j < d; ++j) mu += in[i * d + j];
      mu /= static_cast<double>(d);
      for (std::size_t j = 0; j < d; ++j) var += (in[i * d + j] - mu) * (in[i * d + j] - mu);
      var /= static_cast<double>(d);
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] = (in[i * d + j] - mu) / std::sqrt(var + eps) * g[j] + b[j];
    }
    return out;
  };
  auto linear = [&](const std::vector<double>& in, std::size_t k, const std::vector<double>& w, const std::vector<double>& b) {
    const std::size_t n = b.size();
    std::vector<double> out(L * n);
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double acc = b[j];
        for (std::size_t r = 0; r < k; ++r) acc += in[i * k + r] * w[r * n + j];
        out[i * n + j] = acc;
      }
    return out;
  };
  const auto a = norm(x, get("ln1.gain"), get("ln1.bias"));
  const auto qkv = linear(a, d, get("qkv.weight"), get("qkv.bias"));
  const std::size_t dh = d / heads;
  std::vector<double> mixed(L * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < L; ++i) {
      std::vector<double> s(L);
      for (std::size_t j = 0; j < L; ++j) {
        double dot = 0;
        for (std::size_t e = 0; e < dh; ++e) dot += qkv[i * 3 * d + h * dh + e] * qkv[j * 3 * d + d + h * dh + e];
        s[j] = dot / std::sqrt(static_cast<double>(dh));
      }
      const double mx = *std::max_element(s.begin(), s.end());
      double z = 0;
      for (double& v : s) z += (v = std::exp(v - mx));
      for (std::size_t j = 0; j < L; ++j)
        for (std::size_t e = 0; e < dh; ++e) mixed[i * d + h * dh + e] += s[j] / z * qkv[j * 3 * d + 2 * d + h * dh + e];
    }
  auto h1 = linear(mixed, d, get("out.weight"), get("out.bias"));
  for (std::size_t i = 0; i < h1.size(); ++i) h1[i] += x[i];
  auto f = linear(norm(h1, get("ln2.gain"), get("ln2.bias")), d, get("ffn1.weight"), get("ffn1.bias"));
  for (double& v : f) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
  auto out = linear(f, 4 * d, get("ffn2.weight"), get("ffn2.bias"));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += h1[i];
  return out;
}

}  // namespace

TEST_CASE("sequence length identity holds for random shapes") {
  CHECK(sequence_length(1, 6, 6) == 3);
  CHECK(sequence_length(7, 168, 6) == 204);
  CHECK(patch_count(170, 6) == 28);
  CHECK_THROWS_AS(sequence_length(2, 5, 6), std::invalid_argument);
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> cdist(1, 9), pdist(1, 16), tdist(0, 200);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t C = cdist(rng), P = pdist(rng), T = P + tdist(rng);
    const auto layout = make_layout(C, T, P);
    CHECK(layout.length() == C * (T / P + 1) + 1);
    const auto roles = layout.roles();
    CHECK(std::count(roles.begin(), roles.end(), TokenRole::kCls) == 1);
    CHECK(std::count(roles.begin(), roles.end(), TokenRole::kCit) == static_cast<long>(C));
  }
}

TEST_CASE("layout places CLS first and each CIT before its channel's patches") {
  const auto layout = make_layout(3, 14, 4);  // T̂ = 3, trailing 2 steps dropped
  REQUIRE(layout.length() == 13);
  const auto roles = layout.roles();
  const auto owner = layout.channel_of();
  const auto patch = layout.patch_index_of();
  CHECK(roles[0] == TokenRole::kCls);
  CHECK(owner[0] == -1);
  for (std::size_t c = 0; c < 3; ++c) {
    const std::size_t base = 1 + c * 4;
    CHECK(roles[base] == TokenRole::kCit);
    CHECK(owner[base] == static_cast<int>(c));
    CHECK(patch[base] == -1);
    for (std::size_t t = 0; t < 3; ++t) {
      CHECK(roles[base + 1 + t] == TokenRole::kPatch);
      CHECK(owner[base + 1 + t] == static_cast<int>(c));
      CHECK(patch[base + 1 + t] == static_cast<int>(t));
    }
  }
  const auto rope = layout.rope_positions();
  CHECK(rope[0] == 0);
  CHECK(rope[1] == 0);
  CHECK(rope[4] == 2);
}

TEST_CASE("channel-biased mask follows the CIT rule") {
  const double ninf = -std::numeric_limits<double>::infinity();
  SUBCASE("C=2, one patch each") {
    const auto m = build_attention_mask(make_layout(2, 3, 3));
    REQUIRE(m.length == 5);
    const std::vector<double> cit1{ninf, 0, 0, ninf, ninf}, cit2{ninf, ninf, ninf, 0, 0};
    for (std::size_t j = 0; j < 5; ++j) {
      CHECK(m.additive[1 * 5 + j] == cit1[j]);
      CHECK(m.additive[3 * 5 + j] == cit2[j]);
      for (std::size_t i : {0, 2, 4}) CHECK(m.additive[i * 5 + j] == 0.0);
    }
  }
  SUBCASE("C=1 permits everything except CLS in the CIT row") {
    const auto m = build_attention_mask(make_layout(1, 12, 3));
    for (std::size_t i = 0; i < m.length; ++i)
      for (std::size_t j = 0; j < m.length; ++j) CHECK(m.allowed(i, j) == !(i == 1 && j == 0));
  }
  SUBCASE("no fully masked row; prompt rows stay outside every channel") {
    const auto layout = make_layout(4, 20, 5, true);
    const auto m = build_attention_mask(layout);
    const auto roles = layout.roles();
    for (std::size_t i = 0; i < m.length; ++i) {
      std::size_t open = 0;
      for (std::size_t j = 0; j < m.length; ++j) open += m.allowed(i, j);
      CHECK(open > 0);
      if (roles[i] == TokenRole::kCit) CHECK_FALSE(m.allowed(i, 0));
      else CHECK(open == m.length);
    }
  }
  SUBCASE("swapping channels swaps mask blocks") {
    const auto layout = make_layout(3, 8, 2);
    const auto m = build_attention_mask(layout);
    // Map token index under the channel permutation (0 1 2) -> (2 0 1).
    const std::size_t perm[] = {2, 0, 1};
    auto map = [&](std::size_t i) {
      const int c = layout.channel_of()[i];
      if (c < 0) return i;
      return i - layout.cit_index(static_cast<std::size_t>(c)) + layout.cit_index(perm[c]);
    };
    for (std::size_t i = 0; i < m.length; ++i)
      for (std::size_t j = 0; j < m.length; ++j) CHECK(m.allowed(i, j) == m.allowed(map(i), map(j)));
  }
}

TEST_CASE("RevIN normalizes per channel and inverts") {
  std::mt19937_64 rng(5);
  SUBCASE("constant channel") {
    Series x(1, 10, 4.25);
    const auto n = revin_normalize(x);
    for (double v : n.series.values) CHECK(v == 0.0);
    CHECK(revin_denormalize(n.series, n.state) == x);
  }
  SUBCASE("standardized input is unchanged") {
    Series x = random_series(3, 50, rng);
    for (std::size_t c = 0; c < 3; ++c) {
      auto row = x.row(c);
      const double mu = std::accumulate(row.begin(), row.end(), 0.0) / 50.0;
      double var = 0;
      for (double& v : row) v -= mu;
      for (double v : row) var += v * v;
      for (double& v : row) v /= std::sqrt(var / 50.0);
    }
    const auto n = revin_normalize(x);
    for (std::size_t i = 0; i < x.values.size(); ++i) CHECK(std::abs(n.series.values[i] - x.values[i]) <= 1e-6);
  }
  SUBCASE("random 7x168 round trip") {
    Series x = random_series(7, 168, rng, 30.0);
    for (double& v : x.values) v += 100.0;
    const auto n = revin_normalize(x);
    for (std::size_t c = 0; c < 7; ++c) {
      const auto row = n.series.row(c);
      const double mu = std::accumulate(row.begin(), row.end(), 0.0) / 168.0;
      double var = 0;
      for (double v : row) var += (v - mu) * (v - mu);
      CHECK(std::abs(mu) < 1e-12);
      CHECK(var / 168.0 == doctest::Approx(1.0).epsilon(1e-9));
      CHECK(n.state.stdev[c] >= n.state.eps);
    }
    const auto back = revin_denormalize(n.series, n.state);
    for (std::size_t i = 0; i < x.values.size(); ++i) CHECK(std::abs(back.values[i] - x.values[i]) <= 1e-6);
  }
}

TEST_CASE("configuration validation") {
  ModelConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());
  cfg.n_heads = 4;  // head width 2, still even
  CHECK_NOTHROW(cfg.validate());
  cfg.d = 12;
  cfg.n_heads = 4;  // head width 3
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.n_heads = 3;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.mask_ratio = 1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.patch_len = 0;
  CHECK_THROWS_AS(Encoder<double>(cfg, 1), std::invalid_argument);
}

TEST_CASE("tokenize lays out CLS, CIT and patch embeddings in sequence order") {
  ModelConfig cfg = tiny_config();
  cfg.channels = 3;
  Encoder<double> enc(cfg, 9);
  std::mt19937_64 rng(1);
  std::vector<Series> xs{random_series(3, 13, rng), random_series(3, 13, rng)};
  ad::Tape<double> tape;
  const auto seq = enc.tokenize(tape, xs);
  const std::size_t L = seq.length();
  REQUIRE(L == 3 * 5 + 1);
  CHECK(seq.embeddings.rows() == 2 * L);
  const auto cls = enc.parameters().get("cls_token").values();
  const auto cit = enc.parameters().get("cit_tokens").values();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t j = 0; j < cfg.d; ++j) {
      CHECK(seq.embeddings.at(b * L, j) == cls[j]);
      for (std::size_t c = 0; c < 3; ++c) CHECK(seq.embeddings.at(b * L + seq.layout.cit_index(c), j) == cit[c * cfg.d + j]);
    }
  CHECK_THROWS_AS(enc.tokenize(tape, std::vector<Series>{random_series(3, 2, rng)}), std::invalid_argument);
  CHECK_THROWS_AS(enc.tokenize(tape, std::vector<Series>{random_series(2, 12, rng)}), std::invalid_argument);

  SUBCASE("permuting channels permutes patch blocks but not CIT parameters") {
    const auto chan = enc.parameters().get("channel_embed").values();
    Series swapped(3, 13);
    const std::size_t perm[] = {1, 2, 0};
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t t = 0; t < 13; ++t) swapped.at(c, t) = xs[0].at(perm[c], t);
    const auto a = enc.tokenize(tape, std::span(xs.data(), 1));
    const auto b = enc.tokenize(tape, std::vector<Series>{swapped});
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t j = 0; j < cfg.d; ++j) {
        CHECK(b.embeddings.at(b.layout.cit_index(c), j) == a.embeddings.at(a.layout.cit_index(c), j));
        // Content moves with the channel; the channel embedding stays with the index.
        for (std::size_t t = 0; t < 4; ++t)
          CHECK(b.embeddings.at(b.layout.patch_index(c, t), j) - chan[c * cfg.d + j] ==
                doctest::Approx(a.embeddings.at(a.layout.patch_index(perm[c], t), j) - chan[perm[c] * cfg.d + j]).epsilon(1e-12));
      }
  }
}

TEST_CASE("masking selects ceil(ratio * patches) tokens reproducibly") {
  const auto layout = make_layout(2, 15, 3);  // 10 patch tokens
  Rng rng(4);
  auto draw = draw_mask(layout, 3, 1e-6, rng);
  for (const auto& bits : draw.bitmap) CHECK(std::accumulate(bits.begin(), bits.end(), 0) == 1);
  for (double ratio : {0.1, 0.25, 0.3, 0.55, 0.8}) {
    Rng r(17);
    const auto d = draw_mask(layout, 5, ratio, r);
    for (const auto& bits : d.bitmap)
      CHECK(static_cast<std::size_t>(std::accumulate(bits.begin(), bits.end(), 0)) ==
            static_cast<std::size_t>(std::ceil(ratio * 10 - 1e-12)));
  }
  Rng r1(99), r2(99);
  CHECK(draw_mask(layout, 4, 0.3, r1).bitmap == draw_mask(layout, 4, 0.3, r2).bitmap);
  Rng r3(1);
  CHECK_THROWS_AS(draw_mask(make_layout(1, 3, 3), 1, 0.3, r3), std::invalid_argument);

  // No channel ever loses every patch when sparing one per channel is possible.
  const auto small = make_layout(3, 6, 3);  // 2 patches per channel, 6 total
  Rng r4(8);
  const auto d4 = draw_mask(small, 200, 0.5, r4);
  for (const auto& bits : d4.bitmap)
    for (std::size_t c = 0; c < 3; ++c) CHECK(bits[2 * c] + bits[2 * c + 1] < 2);

  SUBCASE("masked embeddings are the shared mask token and roles update") {
    Encoder<double> enc(tiny_config(), 2);
    std::mt19937_64 g(6);
    std::vector<Series> xs{random_series(2, 15, g)};
    ad::Tape<double> tape;
    const auto seq = enc.tokenize(tape, xs);
    Rng mr(5);
    const auto masked = enc.apply_mask(tape, seq, 0.3, mr);
    const auto token = enc.parameters().get("mask_token").values();
    const auto chan = enc.parameters().get("channel_embed").values();
    std::size_t n_masked = 0;
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t t = 0; t < 5; ++t) {
        const std::size_t pos = seq.layout.patch_index(c, t);
        const bool hidden = masked.mask.bitmap[0][c * 5 + t];
        n_masked += hidden;
        CHECK((masked.sequence.roles[0][pos] == TokenRole::kMaskedPatch) == hidden);
        for (std::size_t j = 0; j < 8; ++j)
          CHECK(masked.sequence.embeddings.at(pos, j) == (hidden ? token[j] + chan[c * 8 + j] : seq.embeddings.at(pos, j)));
      }
    CHECK(n_masked == 3);
    CHECK(masked.sequence.roles[0][0] == TokenRole::kCls);
  }
}

TEST_CASE("without masking or rotation a block is vanilla multi-head attention") {
  ModelConfig cfg = tiny_config();
  cfg.d = 16;
  cfg.n_heads = 4;
  cfg.channels = 1;
  Encoder<double> enc(cfg, 21);
  for (const auto& p : enc.parameters().entries()) {
    auto v = p.tensor;
    std::mt19937_64 g(std::hash<std::string>{}(p.name));
    std::normal_distribution<double> n(0.0, 0.3);
    for (double& x : v.mutable_values()) x += n(g);
  }
  const auto layout = make_layout(1, 12, 3);
  const std::size_t L = layout.length();
  std::mt19937_64 rng(2);
  Series h = random_series(L, 16, rng);
  auto spec = enc.attention_spec(layout, 1);
  std::fill(spec.mask.begin(), spec.mask.end(), 0.0);
  std::fill(spec.positions.begin(), spec.positions.end(), 0);
  ad::Tape<double> tape;
  const auto out = enc.cba_layer(tape, 0, ad::Tensor<double>::constant({L, 16}, h.values), spec);
  const auto ref = plain_block(h.values, L, 16, 4, enc.parameters(), cfg.ln_eps);
  double worst = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(out.values()[i] - ref[i]));
  CHECK(worst <= 1e-12);
}

TEST_CASE("CIT rows ignore other channels at every layer; patch rows do not") {
  ModelConfig cfg = tiny_config();
  cfg.d = 16;
  cfg.n_heads = 2;
  cfg.n_layers = 3;
  cfg.channels = 3;
  Encoder<double> enc(cfg, 13);
  std::mt19937_64 rng(12);
  std::vector<Series> xs{random_series(3, 15, rng)};
  ad::Tape<double> tape;
  std::vector<ad::Tensor<double>> inputs;
  const auto seq = enc.tokenize(tape, xs);
  enc.encode_tokens(tape, seq, nullptr, &inputs);
  REQUIRE(inputs.size() == 3);
  const auto spec = enc.attention_spec(seq.layout, 1);
  const auto& layout = seq.layout;
  for (std::size_t l = 0; l < 3; ++l) {
    const auto base = enc.cba_layer(tape, l, inputs[l], spec);
    for (std::size_t other = 0; other < 3; ++other) {
      std::vector<double> moved(inputs[l].values().begin(), inputs[l].values().end());
      // A uniform shift would vanish under the block's LayerNorm, so use a signed pattern.
      for (std::size_t j = 0; j < 16; ++j) moved[layout.patch_index(other, 2) * 16 + j] += (j % 3 == 0 ? 0.9 : -0.4);
      const auto probe = enc.cba_layer(tape, l, ad::Tensor<double>::constant({layout.length(), 16}, moved), spec);
      for (std::size_t c = 0; c < 3; ++c) {
        if (c == other) continue;
        double diff = 0, patch_diff = 0;
        for (std::size_t j = 0; j < 16; ++j) {
          diff = std::max(diff, std::abs(probe.at(layout.cit_index(c), j) - base.at(layout.cit_index(c), j)));
          patch_diff = std::max(patch_diff, std::abs(probe.at(layout.patch_index(c, 0), j) - base.at(layout.patch_index(c, 0), j)));
        }
        CAPTURE(l);
        CHECK(diff <= 1e-6);
        CHECK(patch_diff > 1e-6);
      }
    }
  }
}

TEST_CASE("encode output shapes, slices and determinism") {
  ModelConfig cfg = tiny_config();
  cfg.n_layers = 2;
  Encoder<double> enc(cfg, 5);
  std::mt19937_64 rng(9);
  std::vector<Series> xs{random_series(2, 12, rng, 5.0), random_series(2, 12, rng, 5.0)};
  ad::Tape<double> t1, t2;
  const auto a = enc.encode(t1, xs);
  const auto b = enc.encode(t2, xs);
  const std::size_t L = sequence_length(2, 12, 3);
  CHECK(a.hidden.rows() == 2 * L);
  CHECK(a.hidden.cols() == 8);
  CHECK(std::equal(a.hidden.values().begin(), a.hidden.values().end(), b.hidden.values().begin()));
  for (std::size_t bi = 0; bi < 2; ++bi)
    for (std::size_t j = 0; j < 8; ++j) {
      CHECK(a.h_cls.at(bi, j) == a.hidden.at(bi * L + a.layout.cls_index(), j));
      for (std::size_t c = 0; c < 2; ++c) CHECK(a.h_cit.at(bi * 2 + c, j) == a.hidden.at(bi * L + a.layout.cit_index(c), j));
    }
  const auto recon = enc.reconstruction_head(t1, a);
  CHECK(recon.shape() == ad::Shape{2 * 2 * 4, 3});
  CHECK(enc.classification_head(t1, a.h_cls).shape() == ad::Shape{2, 10});
}

TEST_CASE("forecast head outputs C x H and denormalizes") {
  ModelConfig cfg = tiny_config();
  Encoder<double> enc(cfg, 5);
  ForecastHead<double> head(cfg.d, 4, 5, 0.1, 3);
  std::mt19937_64 rng(1);
  std::vector<Series> xs{random_series(2, 12, rng, 3.0)};
  for (double& v : xs[0].values) v += 7.0;
  ad::Tape<double> tape;
  const auto out = enc.encode(tape, xs);
  CHECK(head.forward(tape, enc, out).shape() == ad::Shape{2, 5});
  for (double& v : head.parameters().get("forecast.weight").mutable_values()) v = 0.0;
  const auto y = head.forward(tape, enc, out);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t h = 0; h < 5; ++h) CHECK(y.at(c, h) == doctest::Approx(out.revin[0].mean[c]).epsilon(1e-14));
}

TEST_CASE("full-model gradients match finite differences on the tiny config") {
  Encoder<double> enc(tiny_config(), 31);
  std::mt19937_64 rng(4);
  std::vector<Series> xs{random_series(2, 12, rng, 2.0), random_series(2, 12, rng, 2.0)};
  std::vector<Series> normalized;
  for (const auto& x : xs) normalized.push_back(revin_normalize(x).series);
  const auto targets = patch_targets<double>(normalized, 3);
  Rng mr(3);
  const auto draw = draw_mask(make_layout(2, 12, 3), 2, 0.3, mr);

  SUBCASE("scalar probe of h_cls") {
    std::vector<double> w(2 * 8);
    std::normal_distribution<double> g;
    for (double& v : w) v = g(rng);
    const auto probe = ad::Tensor<double>::constant({2, 8}, w);
    auto params = all_parameters(enc);
    const auto r = testing::gradcheck(params, [&](ad::Tape<double>& tape) {
      const auto out = enc.encode(tape, xs);
      return tape.sum(tape.mul(out.h_cls, probe));
    });
    CAPTURE(r.worst);
    CHECK(r.max_rel_err <= 1e-4);
  }
  SUBCASE("masked reconstruction loss") {
    auto params = all_parameters(enc);
    std::vector<std::uint8_t> elementmask;
    for (const auto& bits : draw.bitmap)
      for (auto b : bits) elementmask.insert(elementmask.end(), 3, b);
    const auto target = ad::Tensor<double>::constant({16, 3}, targets);
    const auto r = testing::gradcheck(params, [&](ad::Tape<double>& tape) {
      const auto seq = enc.apply_mask(tape, enc.tokenize(tape, normalized), draw).sequence;
      const auto out = enc.encode_tokens(tape, seq);
      return tape.mse(enc.reconstruction_head(tape, out), target, elementmask);
    });
    CAPTURE(r.worst);
    CHECK(r.max_rel_err <= 1e-4);
  }
}
