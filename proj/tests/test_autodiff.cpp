#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"
#include "trace/autodiff.hpp"

using trace::ad::ContrastiveRow;
using trace::ad::RowRef;
using trace::ad::Shape;
using trace::ad::Tape;
using Tensor = trace::ad::Tensor<double>;
using trace::testing::gradcheck;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Tensor random_param(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(trace::ad::numel(shape));
  for (double& x : v) x = n(rng);
  return Tensor::parameter(std::move(shape), std::move(v));
}

Tensor random_const(Shape shape, std::mt19937_64& rng) {
  Tensor t = random_param(std::move(shape), rng);
  t.set_requires_grad(false);
  return t;
}

// Weighted sum with fixed random weights, so every output element matters.
Tensor probe(Tape<double>& tape, const Tensor& x, const Tensor& weights) { return tape.sum(tape.mul(x, weights)); }

}  // namespace

TEST_CASE("matmul examples") {
  Tape<double> tape;
  Tensor a = Tensor::constant({2, 2}, {1, 2, 3, 4});
  Tensor eye = Tensor::constant({2, 2}, {1, 0, 0, 1});
  Tensor c = tape.matmul(a, eye);
  CHECK(std::vector<double>(c.values().begin(), c.values().end()) == std::vector<double>{1, 2, 3, 4});

  Tensor row = Tensor::constant({1, 2}, {1, 0});
  Tensor col = Tensor::constant({2, 1}, {0, 1});
  CHECK(tape.matmul(row, col).item() == 0.0);

  Tensor bad = Tensor::constant({3, 1}, {1, 2, 3});
  try {
    tape.matmul(a, bad);
    FAIL("expected a shape error");
  } catch (const trace::ad::ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x2]") != std::string::npos);
    CHECK(msg.find("[3x1]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient matches finite differences") {
  std::mt19937_64 rng(1);
  for (int point = 0; point < 5; ++point) {
    Tensor a = random_param({3, 4}, rng);
    Tensor b = random_param({4, 2}, rng);
    Tensor w = random_const({3, 2}, rng);
    auto r = gradcheck({{"a", a}, {"b", b}}, [&](Tape<double>& t) { return probe(t, t.matmul(a, b), w); });
    CHECK_MESSAGE(r.max_rel_err <= 1e-6, r.worst);
  }
}

TEST_CASE("softmax examples") {
  Tape<double> tape;
  Tensor x = Tensor::constant({3}, {0, 0, 0});
  auto s = tape.softmax(x);
  for (double v : s.values()) CHECK(v == doctest::Approx(1.0 / 3.0));

  Tensor y = Tensor::constant({2}, {5, 5});
  Tensor mask = Tensor::constant({2}, {0, -kInf});
  auto sm = tape.softmax(y, &mask);
  CHECK(sm.values()[0] == 1.0);
  CHECK(sm.values()[1] == 0.0);

  Tensor z = Tensor::constant({3}, {1, 2, 3});
  auto sz = tape.softmax(z);
  const double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) CHECK(sz.values()[i] == doctest::Approx(std::exp(i + 1.0) / denom).epsilon(1e-14));

  Tensor full = Tensor::constant({2}, {-kInf, -kInf});
  CHECK_THROWS_AS(tape.softmax(y, &full), std::domain_error);
}

TEST_CASE("softmax gradient and row sums under a broadcast mask") {
  std::mt19937_64 rng(2);
  Tensor mask = Tensor::constant({3, 4}, {0, -kInf, 0, 0, 0, 0, 0, -kInf, -kInf, -kInf, 0, 0});
  for (int point = 0; point < 5; ++point) {
    Tensor x = random_param({2, 3, 4}, rng);
    Tensor w = random_const({2, 3, 4}, rng);
    {
      Tape<double> tape;
      auto s = tape.softmax(x, &mask);
      for (std::size_t r = 0; r < s.rows(); ++r) {
        double total = 0;
        for (std::size_t j = 0; j < 4; ++j) total += s.at(r, j);
        CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
      }
      CHECK(s.at(0, 1) == 0.0);
      CHECK(s.at(5, 0) == 0.0);
    }
    auto r = gradcheck({{"x", x}}, [&](Tape<double>& t) { return probe(t, t.softmax(x, &mask), w); });
    CHECK_MESSAGE(r.max_rel_err <= 1e-6, r.worst);
  }
}

TEST_CASE("layer_norm examples and gradient") {
  Tape<double> tape;
  Tensor gain = Tensor::constant({2}, {1, 1});
  Tensor bias = Tensor::constant({2}, {0, 0});
  Tensor constant = Tensor::constant({2}, {3, 3});
  for (double v : tape.layer_norm(constant, gain, bias, 1e-5).values()) CHECK(v == 0.0);
  Tensor unit = Tensor::constant({2}, {1, -1});
  auto y = tape.layer_norm(unit, gain, bias, 1e-12);
  CHECK(y.values()[0] == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(y.values()[1] == doctest::Approx(-1.0).epsilon(1e-10));

  std::mt19937_64 rng(3);
  for (int point = 0; point < 5; ++point) {
    Tensor x = random_param({4, 6}, rng);
    Tensor g = random_param({6}, rng);
    Tensor b = random_param({6}, rng);
    Tensor w = random_const({4, 6}, rng);
    {
      Tape<double> t;
      Tensor ones = Tensor::constant({6}, std::vector<double>(6, 1.0));
      Tensor zeros = Tensor::constant({6}, std::vector<double>(6, 0.0));
      auto n = t.layer_norm(x, ones, zeros, 1e-9);
      for (std::size_t r = 0; r < 4; ++r) {
        double mu = 0, var = 0;
        for (std::size_t j = 0; j < 6; ++j) mu += n.at(r, j) / 6;
        for (std::size_t j = 0; j < 6; ++j) var += (n.at(r, j) - mu) * (n.at(r, j) - mu) / 6;
        CHECK(std::abs(mu) < 1e-12);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-6));
      }
    }
    auto r = gradcheck({{"x", x}, {"gain", g}, {"bias", b}},
                       [&](Tape<double>& t) { return probe(t, t.layer_norm(x, g, b, 1e-5), w); });
    CHECK_MESSAGE(r.max_rel_err <= 1e-6, r.worst);
  }
}

TEST_CASE("mse examples") {
  Tape<double> tape;
  Tensor x = Tensor::constant({2}, {1, 3});
  const std::uint8_t some[] = {1, 0};
  CHECK(tape.mse(x, x, some).item() == 0.0);
  CHECK(tape.mse(x, x).item() == 0.0);
  Tensor zero = Tensor::constant({2}, {0, 0});
  CHECK(tape.mse(x, zero, some).item() == 1.0);
  const std::uint8_t none[] = {0, 0};
  CHECK_THROWS_AS(tape.mse(x, zero, none), std::domain_error);
}

TEST_CASE("elementwise, structural and reduction ops pass gradient checks") {
  std::mt19937_64 rng(4);
  for (int point = 0; point < 5; ++point) {
    Tensor a = random_param({3, 4}, rng);
    Tensor b = random_param({3, 4}, rng);
    Tensor bias = random_param({4}, rng);
    Tensor w = random_const({3, 4}, rng);
    Tensor wt = random_const({4, 3}, rng);
    Tensor w8 = random_const({3, 8}, rng);
    Tensor w2 = random_const({6, 2}, rng);
    auto check = [&](const char* what, const trace::testing::LossBuilder& f, std::vector<trace::testing::CheckedTensor> in) {
      auto r = gradcheck(std::move(in), f);
      CHECK_MESSAGE(r.max_rel_err <= 1e-6, what, ": ", r.worst);
    };
    check("add", [&](Tape<double>& t) { return probe(t, t.add(a, b), w); }, {{"a", a}, {"b", b}});
    check("sub", [&](Tape<double>& t) { return probe(t, t.sub(a, b), w); }, {{"a", a}, {"b", b}});
    check("mul", [&](Tape<double>& t) { return probe(t, t.mul(a, b), w); }, {{"a", a}, {"b", b}});
    check("scale", [&](Tape<double>& t) { return probe(t, t.scale(a, -1.7), w); }, {{"a", a}});
    check("gelu", [&](Tape<double>& t) { return probe(t, t.gelu(a), w); }, {{"a", a}});
    check("add_bias", [&](Tape<double>& t) { return probe(t, t.add_bias(a, bias), w); }, {{"a", a}, {"bias", bias}});
    check("transpose", [&](Tape<double>& t) { return probe(t, t.transpose(a), wt); }, {{"a", a}});
    check("concat", [&](Tape<double>& t) {
      std::vector<Tensor> parts{a, b};
      return probe(t, t.concat(parts, 1), w8);
    }, {{"a", a}, {"b", b}});
    check("slice", [&](Tape<double>& t) {
      auto s = t.slice_cols(t.slice_rows(a, 1, 3), 1, 3);
      return t.sum(t.mul(s, s));
    }, {{"a", a}});
    check("reshape", [&](Tape<double>& t) { return probe(t, t.reshape(a, {6, 2}), w2); }, {{"a", a}});
    check("gather", [&](Tape<double>& t) {
      std::vector<Tensor> src{a, b};
      const RowRef idx[] = {{1, 2}, {0, 0}, {0, 0}};
      auto g = t.gather_rows(src, idx);
      return t.sum(t.mul(g, g));
    }, {{"a", a}, {"b", b}});
    check("mean", [&](Tape<double>& t) { return t.mean(t.mul(a, a)); }, {{"a", a}});
    check("mse", [&](Tape<double>& t) {
      const std::uint8_t m[] = {1, 0, 1, 1, 0, 0, 1, 1, 1, 0, 1, 0};
      return t.mse(a, b, m);
    }, {{"a", a}, {"b", b}});
    check("l2_normalize", [&](Tape<double>& t) { return probe(t, t.l2_normalize_rows(a), w); }, {{"a", a}});
    check("row_affine", [&](Tape<double>& t) {
      const double sc[] = {2.0, -1.0, 0.5};
      const double sh[] = {1.0, 0.0, 3.0};
      return probe(t, t.row_affine(a, sc, sh), w);
    }, {{"a", a}});
    check("cross_entropy", [&](Tape<double>& t) {
      const int labels[] = {0, 3, 2};
      return t.cross_entropy(a, labels);
    }, {{"a", a}});
    check("info_nce", [&](Tape<double>& t) {
      const std::vector<ContrastiveRow> rows{{0, 1, {0, 2}}, {2, 3, {}}, {1, 0, {1, 2, 3}}};
      return t.info_nce(a, rows);
    }, {{"a", a}});
  }
}

TEST_CASE("composite linear -> gelu -> mse graph gradient") {
  std::mt19937_64 rng(5);
  for (int point = 0; point < 5; ++point) {
    Tensor x = random_const({5, 3}, rng);
    Tensor w = random_param({3, 4}, rng);
    Tensor b = random_param({4}, rng);
    Tensor target = random_const({5, 4}, rng);
    auto r = gradcheck({{"w", w}, {"b", b}}, [&](Tape<double>& t) {
      return t.mse(t.gelu(t.add_bias(t.matmul(x, w), b)), target);
    });
    CHECK_MESSAGE(r.max_rel_err <= 1e-6, r.worst);
  }
}

TEST_CASE("backward examples and errors") {
  Tensor w = Tensor::parameter({3}, {1.5, -2.0, 0.25});
  {
    Tape<double> tape;
    tape.backward(tape.sum(w));
    for (double g : w.grad()) CHECK(g == 1.0);
  }
  w.zero_grad();
  {
    Tape<double> tape;
    tape.backward(tape.scale(tape.sum(tape.mul(w, w)), 0.5));
    for (std::size_t i = 0; i < 3; ++i) CHECK(w.grad()[i] == doctest::Approx(w.values()[i]));
  }
  Tape<double> tape;
  CHECK_THROWS_AS(tape.backward(tape.scale(w, 2.0)), trace::ad::ShapeError);
}

TEST_CASE("tape records in topological order and accumulates additively") {
  std::mt19937_64 rng(6);
  Tensor w = random_param({2, 3}, rng);
  Tensor x = random_const({4, 2}, rng);
  Tape<double> tape;
  auto h = tape.matmul(x, w);
  auto g = tape.gelu(h);
  auto loss = tape.mean(g);
  CHECK(tape.op_names() == std::vector<std::string>{"matmul", "gelu", "mean"});
  tape.backward(loss);
  CHECK(tape.last_backward_visits() == 3);
  std::vector<double> once(w.grad().begin(), w.grad().end());
  tape.backward(loss);
  for (std::size_t i = 0; i < once.size(); ++i) CHECK(w.grad()[i] == doctest::Approx(2 * once[i]).epsilon(1e-14));

  // Reset then replay: identical loss and gradient.
  w.zero_grad();
  Tape<double> again;
  auto loss2 = again.mean(again.gelu(again.matmul(x, w)));
  CHECK(loss2.item() == loss.item());
  again.backward(loss2);
  for (std::size_t i = 0; i < once.size(); ++i) CHECK(w.grad()[i] == once[i]);
}

TEST_CASE("constants receive no gradient") {
  Tensor c = Tensor::constant({2}, {1, 2});
  Tensor p = Tensor::parameter({2}, {3, 4});
  Tape<double> tape;
  tape.backward(tape.sum(tape.mul(c, p)));
  CHECK_FALSE(c.has_grad());
  CHECK(p.grad()[0] == 1.0);
}

TEST_CASE("rope rotation properties") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0, 1);
  std::vector<double> v(8);
  for (double& x : v) x = n(rng);
  auto rotated = v;
  trace::ad::rope_rotate_inplace<double>(rotated, 0, 10000.0);
  CHECK(rotated == v);

  for (int t : {1, 5, 33}) {
    auto r = v;
    trace::ad::rope_rotate_inplace<double>(r, t, 10000.0);
    double n0 = 0, n1 = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      n0 += v[i] * v[i];
      n1 += r[i] * r[i];
    }
    CHECK(n1 == doctest::Approx(n0).epsilon(1e-12));
    trace::ad::rope_rotate_inplace<double>(r, t, 10000.0, true);
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(r[i] == doctest::Approx(v[i]).epsilon(1e-12));
  }

  // Relative-offset property: <R(ti) q, R(tj) k> depends on ti − tj only.
  std::uniform_int_distribution<int> pos(0, 40);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> q(16), k(16);
    for (double& x : q) x = n(rng);
    for (double& x : k) x = n(rng);
    const int ti = pos(rng), tj = pos(rng), s = pos(rng);
    auto dot_at = [&](int a, int b) {
      auto qa = q;
      auto kb = k;
      trace::ad::rope_rotate_inplace<double>(qa, a, 10000.0);
      trace::ad::rope_rotate_inplace<double>(kb, b, 10000.0);
      double d = 0;
      for (std::size_t i = 0; i < qa.size(); ++i) d += qa[i] * kb[i];
      return d;
    };
    CHECK(std::abs(dot_at(ti, tj) - dot_at(ti + s, tj + s)) <= 1e-6);
  }
}

TEST_CASE("rope op gradient") {
  std::mt19937_64 rng(8);
  const int positions[] = {0, 3, 1, 7};
  for (int point = 0; point < 5; ++point) {
    Tensor x = random_param({4, 8}, rng);
    Tensor w = random_const({4, 8}, rng);
    auto r = gradcheck({{"x", x}}, [&](Tape<double>& t) { return probe(t, t.rope(x, positions, 2, 10000.0), w); });
    CHECK_MESSAGE(r.max_rel_err <= 1e-6, r.worst);
  }
}

namespace {

// Attention assembled from primitive ops: the independent route for the fused kernel.
Tensor composed_attention(Tape<double>& t, const Tensor& qkv, const trace::ad::AttentionSpec<double>& spec) {
  const std::size_t L = spec.seq_len;
  const std::size_t d = qkv.cols() / 3;
  const std::size_t dh = d / spec.n_heads;
  Tensor mask = spec.mask.empty() ? Tensor::constant({L, L}, std::vector<double>(L * L, 0.0))
                                  : Tensor::constant({L, L}, spec.mask);
  std::vector<Tensor> items;
  for (std::size_t b = 0; b < spec.batch; ++b) {
    auto rows = t.slice_rows(qkv, b * L, (b + 1) * L);
    std::vector<Tensor> heads;
    for (std::size_t h = 0; h < spec.n_heads; ++h) {
      auto q = t.rope(t.slice_cols(rows, h * dh, (h + 1) * dh), spec.positions, 1, spec.rope_base);
      auto k = t.rope(t.slice_cols(rows, d + h * dh, d + (h + 1) * dh), spec.positions, 1, spec.rope_base);
      auto v = t.slice_cols(rows, 2 * d + h * dh, 2 * d + (h + 1) * dh);
      auto scores = t.scale(t.matmul(q, t.transpose(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
      heads.push_back(t.matmul(t.softmax(scores, &mask), v));
    }
    items.push_back(t.concat(heads, 1));
  }
  return t.concat(items, 0);
}

}  // namespace

TEST_CASE("fused attention equals the composed primitive route and passes gradient checks") {
  std::mt19937_64 rng(9);
  trace::ad::AttentionSpec<double> spec;
  spec.batch = 2;
  spec.seq_len = 5;
  spec.n_heads = 2;
  spec.positions = {0, 0, 1, 0, 1};
  spec.mask = {0, 0, 0, 0, 0, -kInf, 0, 0, -kInf, -kInf, 0, 0, 0, 0, 0, -kInf, -kInf, -kInf, 0, 0, 0, 0, 0, 0, 0};
  for (int point = 0; point < 5; ++point) {
    Tensor qkv = random_param({10, 12}, rng);
    Tensor w = random_const({10, 4}, rng);
    Tape<double> t1, t2;
    auto fused = t1.attention(qkv, spec);
    auto composed = composed_attention(t2, qkv, spec);
    for (std::size_t i = 0; i < fused.size(); ++i) CHECK(fused.values()[i] == doctest::Approx(composed.values()[i]).epsilon(1e-12));

    qkv.zero_grad();
    t1.backward(probe(t1, fused, w));
    std::vector<double> g_fused(qkv.grad().begin(), qkv.grad().end());
    qkv.zero_grad();
    t2.backward(probe(t2, composed, w));
    for (std::size_t i = 0; i < g_fused.size(); ++i) CHECK(g_fused[i] == doctest::Approx(qkv.grad()[i]).epsilon(1e-10));

    // Composed-graph tolerance: the fused op chains rope, two products and a softmax.
    auto r = gradcheck({{"qkv", qkv}}, [&](Tape<double>& t) { return probe(t, t.attention(qkv, spec), w); });
    CHECK_MESSAGE(r.max_rel_err <= 1e-4, r.worst);
  }
}

TEST_CASE("info_nce closed forms") {
  Tape<double> tape;
  // sim(a,p)=1, one negative with sim 0, τ=1.
  Tensor logits = Tensor::constant({1, 2}, {1.0, 0.0});
  const std::vector<ContrastiveRow> one{{0, 0, {1}}};
  CHECK(std::abs(tape.info_nce(logits, one).item() - std::log(1 + std::exp(-1.0))) <= 1e-12);
  const std::vector<ContrastiveRow> alone{{0, 0, {}}};
  CHECK(tape.info_nce(logits, alone).item() == 0.0);
  Tensor tied = Tensor::constant({1, 2}, {0.3, 0.3});
  CHECK(std::abs(tape.info_nce(tied, one).item() - std::log(2.0)) <= 1e-12);
}

TEST_CASE("dropout is identity at p=0 and reproducible per seed") {
  Tensor x = Tensor::constant({100}, std::vector<double>(100, 1.0));
  Tape<double> tape;
  trace::Rng r1(11), r2(11);
  auto same = tape.dropout(x, 0.0, r1);
  CHECK(same.node() == x.node());
  auto a = tape.dropout(x, 0.5, r1);
  auto b = tape.dropout(x, 0.5, r2);
  CHECK(std::vector<double>(a.values().begin(), a.values().end()) != std::vector<double>(100, 1.0));
  trace::Rng r3(11);
  tape.dropout(x, 0.0, r3);
  auto c = tape.dropout(x, 0.5, r3);
  CHECK(std::vector<double>(a.values().begin(), a.values().end()) == std::vector<double>(c.values().begin(), c.values().end()));
  (void)b;
}
