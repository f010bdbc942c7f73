#include "trace/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <stdexcept>
#include <thread>

#include <fmt/format.h>

#include "json.hpp"

namespace trace::retrieval {

const char* modality_name(Modality m) { return m == Modality::kTs ? "ts" : "text"; }

const char* direction_name(Direction d) {
  switch (d) {
    case Direction::kTsToText: return "ts_to_text";
    case Direction::kTextToTs: return "text_to_ts";
    case Direction::kTsToTs: return "ts_to_ts";
  }
  return "?";
}

std::vector<double> unit(std::span<const double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (!(n > 0.0) || !std::isfinite(n)) throw std::invalid_argument("cannot normalize a zero or non-finite vector");
  std::vector<double> out(v.begin(), v.end());
  for (double& x : out) x /= n;
  return out;
}

EmbeddingIndex::EmbeddingIndex(Modality modality, std::size_t dim) : modality_(modality), dim_(dim) {
  if (dim == 0) throw std::invalid_argument("index: dimension must be >= 1");
}

void EmbeddingIndex::check(const Entry& entry) const {
  if (entry.sample.size() != dim_)
    throw std::invalid_argument(fmt::format("index: entry {} has dimension {}, expected {}", entry.id, entry.sample.size(), dim_));
  if (find(entry.id)) throw std::invalid_argument(fmt::format("index: duplicate {} id {}", modality_name(modality_), entry.id));
  for (const auto& ch : entry.channels)
    if (ch.size() != dim_) throw std::invalid_argument(fmt::format("index: entry {} has a channel vector of wrong width", entry.id));
}

void EmbeddingIndex::append(Entry entry) {
  ids_.emplace(entry.id, entries_.size());
  entries_.push_back(std::move(entry));
}

void EmbeddingIndex::add(Entry entry) {
  check(entry);
  entry.sample = unit(entry.sample);
  for (auto& ch : entry.channels) ch = unit(ch);
  append(std::move(entry));
}

void EmbeddingIndex::restore(Entry entry) {
  check(entry);
  auto is_unit = [](std::span<const double> v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    return std::abs(std::sqrt(n) - 1.0) <= 1e-6;
  };
  if (!is_unit(entry.sample)) throw std::invalid_argument(fmt::format("index: entry {} is not unit-norm", entry.id));
  for (const auto& ch : entry.channels)
    if (!is_unit(ch)) throw std::invalid_argument(fmt::format("index: entry {} has a non-unit channel vector", entry.id));
  append(std::move(entry));
}

std::optional<std::size_t> EmbeddingIndex::find(const std::string& id) const {
  const auto it = ids_.find(id);
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Runs fn(i) for i in [0, n) on up to evaluation_threads() workers, contiguous chunks each.
// fn must not throw.
template <typename Fn>
void parallel_for(std::size_t n, Fn fn) {
  const std::size_t workers = std::min(evaluation_threads(), std::max<std::size_t>(n, 1));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = w * chunk, end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([=, &fn] {
      for (std::size_t i = begin; i < end; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

struct QueryScores {
  double label_p1 = 0, label_p5 = 0, label_mrr = 0, modality_p1 = 0, modality_p5 = 0, modality_mrr = 0, rouge = 0, mae = 0,
         mse = 0;
};

MetricReport aggregate(std::string name, std::size_t pool, bool has_modality, const std::vector<QueryScores>& per_query) {
  MetricReport r;
  r.name = std::move(name);
  r.queries = per_query.size();
  r.pool = pool;
  r.has_modality = has_modality;
  for (const auto& q : per_query) {
    r.label_p1 += q.label_p1;
    r.label_p5 += q.label_p5;
    r.label_mrr += q.label_mrr;
    r.modality_p1 += q.modality_p1;
    r.modality_p5 += q.modality_p5;
    r.modality_mrr += q.modality_mrr;
    r.rouge_l += q.rouge;
    r.mae += q.mae;
    r.mse += q.mse;
  }
  const double n = per_query.empty() ? 1.0 : static_cast<double>(per_query.size());
  for (double* v : {&r.label_p1, &r.label_p5, &r.label_mrr, &r.modality_p1, &r.modality_p5, &r.modality_mrr, &r.rouge_l,
                    &r.mae, &r.mse})
    *v /= n;
  return r;
}

// Label metrics and top-1 text/series comparisons shared by every evaluation.
QueryScores score_query(const RetrievalResult& res, const data::TimeSeriesInstance& q,
                        std::span<const data::TimeSeriesInstance* const> instances, std::span<const Entry> target) {
  QueryScores s;
  s.label_p1 = precision_at_k(res, q.label, 1);
  s.label_p5 = precision_at_k(res, q.label, 5);
  s.label_mrr = mrr_label(res, q.label);
  if (!res.hits.empty()) {
    const auto& top = *instances[target[res.hits.front().entry].source];
    s.rouge = rouge_l_f1(top.context_text, q.context_text);
    const auto err = ts_similarity(q.values, top.values);
    s.mae = err.mae;
    s.mse = err.mse;
  }
  return s;
}

}  // namespace

RetrievalResult query(const EmbeddingIndex& index, std::span<const double> vec, std::size_t k,
                      const std::optional<std::string>& exclude_id, std::span<const std::vector<double>> query_channels) {
  if (k == 0) throw std::invalid_argument("query: k must be >= 1");
  if (vec.size() != index.dim()) throw std::invalid_argument("query: vector dimension does not match the index");
  const auto q = unit(vec);
  std::vector<Hit> all;
  all.reserve(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    const Entry& e = index[i];
    if (exclude_id && e.id == *exclude_id) continue;
    all.push_back({i, e.id, dot(q, e.sample), e.label, {}});
  }
  const std::size_t take = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take), all.end(), [](const Hit& a, const Hit& b) {
    return a.score > b.score || (a.score == b.score && a.id < b.id);
  });
  all.resize(take);
  if (!query_channels.empty()) {
    std::vector<std::vector<double>> qc;
    for (const auto& c : query_channels) qc.push_back(unit(c));
    for (Hit& h : all) {
      const auto& ch = index[h.entry].channels;
      if (ch.size() != qc.size()) continue;
      for (std::size_t c = 0; c < qc.size(); ++c) h.channel_scores.push_back(dot(qc[c], ch[c]));
    }
  }
  return {std::move(all)};
}

double precision_at_k(const RetrievalResult& r, int query_label, std::size_t k) {
  if (k == 0) throw std::invalid_argument("precision_at_k: k must be >= 1");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < std::min(k, r.hits.size()); ++i) hits += r.hits[i].label == query_label;
  return static_cast<double>(hits) / static_cast<double>(k);
}

double mrr_label(const RetrievalResult& r, int query_label) {
  for (std::size_t i = 0; i < r.hits.size(); ++i)
    if (r.hits[i].label == query_label) return 1.0 / static_cast<double>(i + 1);
  return 0.0;
}

double precision_modality_at_k(const RetrievalResult& r, const std::string& paired_id, std::size_t k) {
  for (std::size_t i = 0; i < std::min(k, r.hits.size()); ++i)
    if (r.hits[i].id == paired_id) return 1.0;
  return 0.0;
}

double mrr_modality(const RetrievalResult& r, const std::string& paired_id) {
  for (std::size_t i = 0; i < r.hits.size(); ++i)
    if (r.hits[i].id == paired_id) return 1.0 / static_cast<double>(i + 1);
  return 0.0;
}

double rouge_l_f1(std::string_view candidate, std::string_view reference) {
  const auto a = text::tokenize(candidate), b = text::tokenize(reference);
  if (a.empty() || b.empty()) return 0.0;
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  const double lcs = static_cast<double>(prev[b.size()]);
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(a.size()), r = lcs / static_cast<double>(b.size());
  return 2.0 * p * r / (p + r);
}

SeriesError ts_similarity(const data::Series& a, const data::Series& b) {
  if (a.channels != b.channels || a.steps != b.steps)
    throw std::invalid_argument(fmt::format("ts_similarity: shapes {}×{} and {}×{} differ", a.channels, a.steps, b.channels, b.steps));
  SeriesError e;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double d = a.values[i] - b.values[i];
    e.mae += std::abs(d);
    e.mse += d * d;
  }
  const double n = static_cast<double>(a.values.size());
  e.mae /= n;
  e.mse /= n;
  return e;
}

template <typename T>
EmbeddingIndex build_ts_index(const model::Encoder<T>& encoder, std::span<const data::TimeSeriesInstance* const> instances,
                              std::size_t batch_size) {
  const std::size_t d = encoder.config().d, C = encoder.config().channels;
  EmbeddingIndex index(Modality::kTs, d);
  for (std::size_t begin = 0; begin < instances.size(); begin += batch_size) {
    const std::size_t n = std::min(batch_size, instances.size() - begin);
    std::vector<data::Series> raw;
    for (std::size_t i = 0; i < n; ++i) raw.push_back(instances[begin + i]->values);
    ad::Tape<T> tape;
    const auto out = encoder.encode(tape, raw);
    for (std::size_t i = 0; i < n; ++i) {
      const auto* inst = instances[begin + i];
      Entry e{inst->id, inst->label, {}, {}, begin + i};
      for (std::size_t j = 0; j < d; ++j) e.sample.push_back(static_cast<double>(out.h_cls.at(i, j)));
      for (std::size_t c = 0; c < C; ++c) {
        std::vector<double> row(d);
        for (std::size_t j = 0; j < d; ++j) row[j] = static_cast<double>(out.h_cit.at(i * C + c, j));
        e.channels.push_back(std::move(row));
      }
      index.add(std::move(e));
    }
  }
  return index;
}

template <typename T>
EmbeddingIndex build_text_index(const text::TextEmbedder<T>& embedder,
                                std::span<const data::TimeSeriesInstance* const> instances) {
  const std::size_t d = embedder.d_model();
  EmbeddingIndex index(Modality::kText, d);
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto* inst = instances[i];
    std::vector<std::string> texts{inst->context_text};
    texts.insert(texts.end(), inst->channel_texts.begin(), inst->channel_texts.end());
    ad::Tape<T> tape;
    const auto z = embedder.embed(tape, texts);
    Entry e{inst->id, inst->label, {}, {}, i};
    for (std::size_t r = 0; r < texts.size(); ++r) {
      std::vector<double> row(d);
      for (std::size_t j = 0; j < d; ++j) row[j] = static_cast<double>(z.at(r, j));
      if (r == 0)
        e.sample = std::move(row);
      else
        e.channels.push_back(std::move(row));
    }
    index.add(std::move(e));
  }
  return index;
}

MetricReport evaluate_crossmodal(const EmbeddingIndex& ts_index, const EmbeddingIndex& text_index, Direction direction,
                                 std::span<const data::TimeSeriesInstance* const> instances) {
  if (direction == Direction::kTsToTs) throw std::invalid_argument("evaluate_crossmodal: use evaluate_ts_to_ts");
  const bool from_ts = direction == Direction::kTsToText;
  const EmbeddingIndex& queries = from_ts ? ts_index : text_index;
  const EmbeddingIndex& targets = from_ts ? text_index : ts_index;
  for (const Entry& q : queries.entries())
    if (!targets.find(q.id)) throw std::invalid_argument(fmt::format("evaluate_crossmodal: no pair for {}", q.id));
  std::vector<QueryScores> per(queries.size());
  parallel_for(queries.size(), [&](std::size_t qi) {
    const Entry& q = queries[qi];
    const auto res = query(targets, q.sample, targets.size());
    QueryScores s = score_query(res, *instances[q.source], instances, targets.entries());
    s.modality_p1 = precision_modality_at_k(res, q.id, 1);
    s.modality_p5 = precision_modality_at_k(res, q.id, 5);
    s.modality_mrr = mrr_modality(res, q.id);
    per[qi] = s;
  });
  return aggregate(direction_name(direction), targets.size(), true, per);
}

MetricReport evaluate_ts_to_ts(const EmbeddingIndex& ts_index, std::span<const data::TimeSeriesInstance* const> instances) {
  std::vector<QueryScores> per(ts_index.size());
  parallel_for(ts_index.size(), [&](std::size_t qi) {
    const Entry& q = ts_index[qi];
    const auto res = query(ts_index, q.sample, ts_index.size(), q.id);
    per[qi] = score_query(res, *instances[q.source], instances, ts_index.entries());
  });
  return aggregate(direction_name(Direction::kTsToTs), ts_index.size() - 1, false, per);
}

namespace {

std::vector<double> channel_means(const data::Series& s) {
  std::vector<double> m(s.channels, 0.0);
  for (std::size_t c = 0; c < s.channels; ++c) {
    for (std::size_t t = 0; t < s.steps; ++t) m[c] += s.at(c, t);
    m[c] /= static_cast<double>(s.steps);
  }
  return m;
}

}  // namespace

RetrievalResult euclidean_baseline(std::span<const data::TimeSeriesInstance* const> instances, const data::Series& query_series,
                                   std::size_t k, const std::optional<std::string>& exclude_id) {
  if (k == 0) throw std::invalid_argument("euclidean_baseline: k must be >= 1");
  const auto qm = channel_means(query_series);
  std::vector<Hit> all;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto* inst = instances[i];
    if (exclude_id && inst->id == *exclude_id) continue;
    const auto m = channel_means(inst->values);
    if (m.size() != qm.size()) throw std::invalid_argument("euclidean_baseline: channel counts differ");
    double d2 = 0.0;
    for (std::size_t c = 0; c < m.size(); ++c) d2 += (m[c] - qm[c]) * (m[c] - qm[c]);
    all.push_back({i, inst->id, -std::sqrt(d2), inst->label, {}});
  }
  const std::size_t take = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take), all.end(), [](const Hit& a, const Hit& b) {
    return a.score > b.score || (a.score == b.score && a.id < b.id);
  });
  all.resize(take);
  return {std::move(all)};
}

MetricReport evaluate_euclidean(std::span<const data::TimeSeriesInstance* const> instances) {
  std::vector<Entry> as_entries(instances.size());
  for (std::size_t i = 0; i < instances.size(); ++i) as_entries[i].source = i;
  std::vector<QueryScores> per(instances.size());
  parallel_for(instances.size(), [&](std::size_t qi) {
    const auto* q = instances[qi];
    const auto res = euclidean_baseline(instances, q->values, instances.size(), q->id);
    per[qi] = score_query(res, *q, instances, as_entries);
  });
  return aggregate("ed_baseline", instances.size() - 1, false, per);
}

std::string MetricReport::to_key_values() const {
  std::string out;
  auto kv = [&](const char* key, auto value) { out += fmt::format("{}.{}={}\n", name, key, value); };
  kv("queries", queries);
  kv("pool", pool);
  kv("label_p1", label_p1);
  kv("label_p5", label_p5);
  kv("label_mrr", label_mrr);
  if (has_modality) {
    kv("modality_p1", modality_p1);
    kv("modality_p5", modality_p5);
    kv("modality_mrr", modality_mrr);
  }
  kv("rouge_l", rouge_l);
  kv("mae", mae);
  kv("mse", mse);
  return out;
}

std::string format_table(std::span<const MetricReport> reports) {
  std::string out = fmt::format("{:<12} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>9} {:>9}\n", "task", "pool", "lbl P@1",
                                "lbl P@5", "lbl MRR", "mod P@1", "mod P@5", "mod MRR", "ROUGE-L", "MAE", "MSE");
  for (const auto& r : reports) {
    auto pct = [](double v) { return fmt::format("{:.2f}", 100.0 * v); };
    auto mod = [&](double v) { return r.has_modality ? pct(v) : std::string("-"); };
    out += fmt::format("{:<12} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8.4f} {:>9.4f} {:>9.4f}\n", r.name, r.pool,
                       pct(r.label_p1), pct(r.label_p5), pct(r.label_mrr), mod(r.modality_p1), mod(r.modality_p5),
                       mod(r.modality_mrr), r.rouge_l, r.mae, r.mse);
  }
  return out;
}

std::size_t evaluation_threads() {
  if (const char* env = std::getenv("TRACE_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

template EmbeddingIndex build_ts_index<float>(const model::Encoder<float>&, std::span<const data::TimeSeriesInstance* const>,
                                              std::size_t);
template EmbeddingIndex build_ts_index<double>(const model::Encoder<double>&, std::span<const data::TimeSeriesInstance* const>,
                                               std::size_t);
template EmbeddingIndex build_text_index<float>(const text::TextEmbedder<float>&, std::span<const data::TimeSeriesInstance* const>);
template EmbeddingIndex build_text_index<double>(const text::TextEmbedder<double>&,
                                                 std::span<const data::TimeSeriesInstance* const>);

void save_index(const EmbeddingIndex& index, const std::filesystem::path& path) {
  using nlohmann::ordered_json;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot write index '{}'", path.string()));
  out << ordered_json{{"modality", modality_name(index.modality())}, {"dim", index.dim()}, {"size", index.size()}}.dump() << "\n";
  for (const auto& e : index.entries()) {
    ordered_json j{{"id", e.id}, {"label", e.label}, {"source", e.source}, {"sample", e.sample}, {"channels", e.channels}};
    out << j.dump() << "\n";
  }
  if (!out) throw std::runtime_error(fmt::format("failed writing index '{}'", path.string()));
}

EmbeddingIndex load_index(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("index not found: '{}'", path.string()));
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& why) {
    return std::runtime_error(fmt::format("{}:{}: {}", path.string(), line_no, why));
  };
  try {
    if (!std::getline(in, line)) throw fail("empty index file");
    ++line_no;
    const auto header = nlohmann::json::parse(line);
    const auto m = header.at("modality").get<std::string>();
    if (m != "ts" && m != "text") throw fail("unknown modality '" + m + "'");
    EmbeddingIndex index(m == "ts" ? Modality::kTs : Modality::kText, header.at("dim").get<std::size_t>());
    const auto size = header.at("size").get<std::size_t>();
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      Entry e;
      e.id = j.at("id").get<std::string>();
      e.label = j.at("label").get<int>();
      e.source = j.at("source").get<std::size_t>();
      e.sample = j.at("sample").get<std::vector<double>>();
      e.channels = j.at("channels").get<std::vector<std::vector<double>>>();
      index.restore(std::move(e));
    }
    if (index.size() != size) throw fail(fmt::format("header promises {} entries, found {}", size, index.size()));
    return index;
  } catch (const nlohmann::json::exception& e) {
    throw fail(e.what());
  } catch (const std::invalid_argument& e) {
    throw fail(e.what());
  }
}

}  // namespace trace::retrieval
