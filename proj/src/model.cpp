#include "trace/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>

namespace trace::model {

using ad::RowRef;
using ad::Tape;
using ad::Tensor;

void ModelConfig::validate() const {
  auto bad = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
  if (d == 0) bad("d must be positive");
  if (n_layers == 0) bad("n_layers must be positive");
  if (n_heads == 0 || d % n_heads != 0) bad(fmt::format("d={} is not divisible by n_heads={}", d, n_heads));
  if (head_width() % 2 != 0) bad(fmt::format("head width {} must be even for rotary pairing", head_width()));
  if (patch_len == 0) bad("patch_len must be >= 1");
  if (channels == 0) bad("channels must be >= 1");
  if (classes < 2) bad("classes must be >= 2");
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) bad("mask_ratio must lie in (0, 1)");
  if (!(dropout >= 0.0 && dropout < 1.0)) bad("dropout must lie in [0, 1)");
  if (!(rope_base > 1.0)) bad("rope_base must exceed 1");
  if (!(ln_eps > 0.0)) bad("ln_eps must be positive");
  if (!(init_std > 0.0)) bad("init_std must be positive");
}

std::size_t patch_count(std::size_t steps, std::size_t patch_len) {
  if (patch_len == 0) throw std::invalid_argument("patch length must be >= 1");
  if (steps < patch_len) throw std::invalid_argument(fmt::format("series of {} steps is shorter than patch length {}", steps, patch_len));
  return steps / patch_len;
}

std::size_t sequence_length(std::size_t channels, std::size_t steps, std::size_t patch_len) {
  return channels * (patch_count(steps, patch_len) + 1) + 1;
}

std::vector<TokenRole> TokenLayout::roles() const {
  std::vector<TokenRole> out(length(), TokenRole::kPatch);
  if (prompt) out[0] = TokenRole::kPrompt;
  out[cls_index()] = TokenRole::kCls;
  for (std::size_t c = 0; c < channels; ++c) out[cit_index(c)] = TokenRole::kCit;
  return out;
}

std::vector<int> TokenLayout::channel_of() const {
  std::vector<int> out(length(), -1);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t i = cit_index(c); i <= cit_index(c) + patches; ++i) out[i] = static_cast<int>(c);
  return out;
}

std::vector<int> TokenLayout::patch_index_of() const {
  std::vector<int> out(length(), -1);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t t = 0; t < patches; ++t) out[patch_index(c, t)] = static_cast<int>(t);
  return out;
}

std::vector<int> TokenLayout::rope_positions() const {
  auto out = patch_index_of();
  for (int& p : out) p = std::max(p, 0);
  return out;
}

TokenLayout make_layout(std::size_t channels, std::size_t steps, std::size_t patch_len, bool prompt) {
  if (channels == 0) throw std::invalid_argument("layout needs at least one channel");
  return TokenLayout{channels, patch_count(steps, patch_len), prompt};
}

AttentionMask build_attention_mask(const TokenLayout& layout) {
  const std::size_t L = layout.length();
  AttentionMask mask{L, std::vector<double>(L * L, 0.0)};
  const auto owner = layout.channel_of();
  const auto roles = layout.roles();
  const double blocked = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < L; ++i) {
    if (roles[i] != TokenRole::kCit) continue;
    for (std::size_t j = 0; j < L; ++j)
      if (owner[j] != owner[i]) mask.additive[i * L + j] = blocked;
  }
  return mask;
}

Normalized revin_normalize(const data::Series& x, double eps) {
  if (x.steps == 0) throw std::invalid_argument("revin: series has no steps");
  if (!(eps > 0.0)) throw std::invalid_argument("revin: eps must be positive");
  Normalized out{data::Series(x.channels, x.steps), RevinState{{}, {}, eps}};
  out.state.mean.resize(x.channels);
  out.state.stdev.resize(x.channels);
  const double n = static_cast<double>(x.steps);
  for (std::size_t c = 0; c < x.channels; ++c) {
    const auto row = x.row(c);
    const double mean = std::accumulate(row.begin(), row.end(), 0.0) / n;
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    const double sd = std::max(std::sqrt(var / n), eps);
    out.state.mean[c] = mean;
    out.state.stdev[c] = sd;
    auto dst = out.series.row(c);
    for (std::size_t t = 0; t < x.steps; ++t) dst[t] = (row[t] - mean) / sd;
  }
  return out;
}

data::Series revin_denormalize(const data::Series& y, const RevinState& state) {
  if (state.mean.size() != y.channels || state.stdev.size() != y.channels)
    throw std::invalid_argument("revin: state has the wrong channel count");
  data::Series out(y.channels, y.steps);
  for (std::size_t c = 0; c < y.channels; ++c) {
    const auto src = y.row(c);
    auto dst = out.row(c);
    for (std::size_t t = 0; t < y.steps; ++t) dst[t] = src[t] * state.stdev[c] + state.mean[c];
  }
  return out;
}

MaskDraw draw_mask(const TokenLayout& layout, std::size_t batch, double ratio, Rng& rng) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("mask ratio must lie in (0, 1)");
  const std::size_t n = layout.channels * layout.patches;
  const auto count = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - 1e-12));
  if (count >= n)
    throw std::invalid_argument(fmt::format("mask ratio {} would hide all {} patch tokens", ratio, n));
  const bool can_spare = count <= layout.channels * (layout.patches - 1);
  MaskDraw draw;
  draw.per_item = n;
  std::vector<std::size_t> order(n);
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<std::uint8_t> bits;
    for (;;) {
      std::iota(order.begin(), order.end(), 0);
      // Partial Fisher-Yates: the first `count` slots are a uniform draw without replacement.
      for (std::size_t i = 0; i < count; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(order[i], order[pick(rng)]);
      }
      bits.assign(n, 0);
      for (std::size_t i = 0; i < count; ++i) bits[order[i]] = 1;
      if (!can_spare) break;
      bool ok = true;
      for (std::size_t c = 0; c < layout.channels && ok; ++c) {
        std::size_t hidden = 0;
        for (std::size_t t = 0; t < layout.patches; ++t) hidden += bits[c * layout.patches + t];
        ok = hidden < layout.patches;
      }
      if (ok) break;
    }
    draw.bitmap.push_back(std::move(bits));
  }
  return draw;
}

template <typename T>
Encoder<T>::Encoder(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng = substream(seed, "init");
  const std::size_t d = config_.d, P = config_.patch_len, C = config_.channels;
  const double s = config_.init_std;
  backbone_.add_normal("patch_embed.weight", {P, d}, 1.0 / std::sqrt(static_cast<double>(P)), rng);
  backbone_.add_zeros("patch_embed.bias", {d});
  backbone_.add_normal("cls_token", {1, d}, 1.0, rng, false);
  backbone_.add_normal("cit_tokens", {C, d}, 1.0, rng, false);
  backbone_.add_normal("mask_token", {1, d}, 1.0, rng, false);
  backbone_.add_normal("channel_embed", {C, d}, 1.0, rng, false);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = fmt::format("layer{}.", l);
    backbone_.add_ones(p + "ln1.gain", {d});
    backbone_.add_zeros(p + "ln1.bias", {d});
    backbone_.add_normal(p + "qkv.weight", {d, 3 * d}, s, rng);
    backbone_.add_zeros(p + "qkv.bias", {3 * d});
    backbone_.add_normal(p + "out.weight", {d, d}, s, rng);
    backbone_.add_zeros(p + "out.bias", {d});
    backbone_.add_ones(p + "ln2.gain", {d});
    backbone_.add_zeros(p + "ln2.bias", {d});
    backbone_.add_normal(p + "ffn1.weight", {d, 4 * d}, s, rng);
    backbone_.add_zeros(p + "ffn1.bias", {4 * d});
    backbone_.add_normal(p + "ffn2.weight", {4 * d, d}, s, rng);
    backbone_.add_zeros(p + "ffn2.bias", {d});
  }
  backbone_.add_ones("final_ln.gain", {d});
  backbone_.add_zeros("final_ln.bias", {d});

  recon_.add_normal("recon.weight", {d, P}, s, rng);
  recon_.add_zeros("recon.bias", {P});
  classifier_.add_normal("classify.weight", {d, config_.classes}, s, rng);
  classifier_.add_zeros("classify.bias", {config_.classes});
}

template <typename T>
std::vector<T> patch_targets(std::span<const data::Series> normalized, std::size_t patch_len) {
  std::vector<T> out;
  if (normalized.empty()) return out;
  const std::size_t C = normalized[0].channels, n = patch_count(normalized[0].steps, patch_len);
  out.reserve(normalized.size() * C * n * patch_len);
  for (const auto& x : normalized)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t t = 0; t < n * patch_len; ++t) out.push_back(static_cast<T>(x.at(c, t)));
  return out;
}

template <typename T>
TokenSequence<T> Encoder<T>::tokenize(Tape<T>& tape, std::span<const data::Series> normalized, const Tensor<T>* prompt) const {
  if (normalized.empty()) throw std::invalid_argument("tokenize: empty batch");
  const std::size_t B = normalized.size(), C = normalized[0].channels, steps = normalized[0].steps;
  if (C != config_.channels)
    throw std::invalid_argument(fmt::format("tokenize: input has {} channels, model expects {}", C, config_.channels));
  for (const auto& x : normalized)
    if (x.channels != C || x.steps != steps) throw std::invalid_argument("tokenize: batch items differ in shape");
  const TokenLayout layout = make_layout(C, steps, config_.patch_len, prompt != nullptr);
  const std::size_t n = layout.patches, P = config_.patch_len, d = config_.d;
  if (prompt && (prompt->rows() != B || prompt->cols() != d))
    throw ad::ShapeError(fmt::format("tokenize: prompt must be [{} x {}], got {}", B, d, ad::shape_str(prompt->shape())));

  auto patches = Tensor<T>::constant({B * C * n, P}, patch_targets<T>(normalized, P));
  auto embedded = tape.add_bias(tape.matmul(patches, backbone_.get("patch_embed.weight")), backbone_.get("patch_embed.bias"));
  // Channel embedding on every patch token: without it a masked token cannot tell which channel it stands in for.
  {
    std::vector<RowRef> owner(B * C * n);
    for (std::size_t r = 0; r < owner.size(); ++r) owner[r] = {0, (r / n) % C};
    const Tensor<T> table[] = {backbone_.get("channel_embed")};
    embedded = tape.add(embedded, tape.gather_rows(table, owner));
  }

  // Sources: 0 embedded patches, 1 CLS, 2 CIT table, 3 prompt rows.
  std::vector<Tensor<T>> sources{embedded, backbone_.get("cls_token"), backbone_.get("cit_tokens")};
  if (prompt) sources.push_back(*prompt);
  std::vector<RowRef> index;
  index.reserve(B * layout.length());
  for (std::size_t b = 0; b < B; ++b) {
    if (prompt) index.push_back({3, b});
    index.push_back({1, 0});
    for (std::size_t c = 0; c < C; ++c) {
      index.push_back({2, c});
      for (std::size_t t = 0; t < n; ++t) index.push_back({0, (b * C + c) * n + t});
    }
  }
  TokenSequence<T> seq;
  seq.embeddings = tape.gather_rows(sources, index);
  seq.layout = layout;
  seq.batch = B;
  seq.roles.assign(B, layout.roles());
  return seq;
}

template <typename T>
MaskedSequence<T> Encoder<T>::apply_mask(Tape<T>& tape, const TokenSequence<T>& seq, double ratio, Rng& rng) const {
  return apply_mask(tape, seq, draw_mask(seq.layout, seq.batch, ratio, rng));
}

template <typename T>
MaskedSequence<T> Encoder<T>::apply_mask(Tape<T>& tape, const TokenSequence<T>& seq, const MaskDraw& draw) const {
  const auto& layout = seq.layout;
  if (draw.bitmap.size() != seq.batch || draw.per_item != layout.channels * layout.patches)
    throw std::invalid_argument("apply_mask: bitmap does not match the sequence");
  const std::size_t L = layout.length();
  // Row c of source 1: shared mask embedding plus channel c's embedding.
  const auto filler = tape.add_bias(backbone_.get("channel_embed"), backbone_.get("mask_token"));
  std::vector<Tensor<T>> sources{seq.embeddings, filler};
  std::vector<RowRef> index(seq.batch * L);
  MaskedSequence<T> out{seq, draw};
  for (std::size_t b = 0; b < seq.batch; ++b) {
    for (std::size_t i = 0; i < L; ++i) index[b * L + i] = {0, b * L + i};
    for (std::size_t c = 0; c < layout.channels; ++c)
      for (std::size_t t = 0; t < layout.patches; ++t) {
        if (!draw.bitmap[b][c * layout.patches + t]) continue;
        const std::size_t pos = layout.patch_index(c, t);
        index[b * L + pos] = {1, c};
        out.sequence.roles[b][pos] = TokenRole::kMaskedPatch;
      }
  }
  out.sequence.embeddings = tape.gather_rows(sources, index);
  return out;
}

template <typename T>
ad::AttentionSpec<T> Encoder<T>::attention_spec(const TokenLayout& layout, std::size_t batch) const {
  ad::AttentionSpec<T> spec;
  spec.batch = batch;
  spec.seq_len = layout.length();
  spec.n_heads = config_.n_heads;
  spec.positions = layout.rope_positions();
  const auto mask = build_attention_mask(layout);
  spec.mask.assign(mask.additive.begin(), mask.additive.end());
  spec.rope_base = config_.rope_base;
  return spec;
}

template <typename T>
Tensor<T> Encoder<T>::cba_layer(Tape<T>& tape, std::size_t layer, const Tensor<T>& hidden, const ad::AttentionSpec<T>& spec,
                                Rng* dropout_rng) const {
  if (layer >= config_.n_layers) throw std::out_of_range(fmt::format("layer {} of {}", layer, config_.n_layers));
  const std::string p = fmt::format("layer{}.", layer);
  auto param = [&](const char* name) { return backbone_.get(p + name); };
  const T eps = static_cast<T>(config_.ln_eps);
  auto drop = [&](const Tensor<T>& x) {
    return dropout_rng && config_.dropout > 0.0 ? tape.dropout(x, config_.dropout, *dropout_rng) : x;
  };

  auto a = tape.layer_norm(hidden, param("ln1.gain"), param("ln1.bias"), eps);
  auto qkv = tape.add_bias(tape.matmul(a, param("qkv.weight")), param("qkv.bias"));
  auto mixed = tape.attention(qkv, spec);
  auto attn = tape.add_bias(tape.matmul(mixed, param("out.weight")), param("out.bias"));
  auto h = tape.add(hidden, drop(attn));

  auto f = tape.layer_norm(h, param("ln2.gain"), param("ln2.bias"), eps);
  f = tape.gelu(tape.add_bias(tape.matmul(f, param("ffn1.weight")), param("ffn1.bias")));
  f = tape.add_bias(tape.matmul(f, param("ffn2.weight")), param("ffn2.bias"));
  return tape.add(h, drop(f));
}

template <typename T>
EncoderOutput<T> Encoder<T>::encode_tokens(Tape<T>& tape, const TokenSequence<T>& seq, Rng* dropout_rng,
                                           std::vector<Tensor<T>>* layer_inputs) const {
  const auto spec = attention_spec(seq.layout, seq.batch);
  Tensor<T> h = seq.embeddings;
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    if (layer_inputs) layer_inputs->push_back(h);
    h = cba_layer(tape, l, h, spec, dropout_rng);
  }
  EncoderOutput<T> out;
  out.hidden = tape.layer_norm(h, backbone_.get("final_ln.gain"), backbone_.get("final_ln.bias"), static_cast<T>(config_.ln_eps));
  out.layout = seq.layout;
  out.batch = seq.batch;
  const std::size_t L = seq.layout.length();
  std::vector<RowRef> cls, cit;
  for (std::size_t b = 0; b < seq.batch; ++b) {
    cls.push_back({0, b * L + seq.layout.cls_index()});
    for (std::size_t c = 0; c < seq.layout.channels; ++c) cit.push_back({0, b * L + seq.layout.cit_index(c)});
  }
  const Tensor<T> src[] = {out.hidden};
  out.h_cls = tape.gather_rows(src, cls);
  out.h_cit = tape.gather_rows(src, cit);
  return out;
}

template <typename T>
EncoderOutput<T> Encoder<T>::encode(Tape<T>& tape, std::span<const data::Series> raw, Rng* dropout_rng,
                                    const Tensor<T>* prompt) const {
  std::vector<data::Series> normalized;
  std::vector<RevinState> states;
  normalized.reserve(raw.size());
  for (const auto& x : raw) {
    auto n = revin_normalize(x);
    normalized.push_back(std::move(n.series));
    states.push_back(std::move(n.state));
  }
  auto out = encode_tokens(tape, tokenize(tape, normalized, prompt), dropout_rng);
  out.revin = std::move(states);
  return out;
}

template <typename T>
Tensor<T> Encoder<T>::patch_rows(Tape<T>& tape, const EncoderOutput<T>& out) const {
  const auto& layout = out.layout;
  const std::size_t L = layout.length();
  std::vector<RowRef> index;
  index.reserve(out.batch * layout.channels * layout.patches);
  for (std::size_t b = 0; b < out.batch; ++b)
    for (std::size_t c = 0; c < layout.channels; ++c)
      for (std::size_t t = 0; t < layout.patches; ++t) index.push_back({0, b * L + layout.patch_index(c, t)});
  const Tensor<T> src[] = {out.hidden};
  return tape.gather_rows(src, index);
}

template <typename T>
Tensor<T> Encoder<T>::reconstruction_head(Tape<T>& tape, const EncoderOutput<T>& out) const {
  return tape.add_bias(tape.matmul(patch_rows(tape, out), recon_.get("recon.weight")), recon_.get("recon.bias"));
}

template <typename T>
Tensor<T> Encoder<T>::classification_head(Tape<T>& tape, const Tensor<T>& h_cls) const {
  return tape.add_bias(tape.matmul(h_cls, classifier_.get("classify.weight")), classifier_.get("classify.bias"));
}

template <typename T>
ForecastHead<T>::ForecastHead(std::size_t d, std::size_t patches, std::size_t horizon, double init_std, std::uint64_t seed)
    : d_(d), patches_(patches), horizon_(horizon) {
  if (horizon == 0) throw std::invalid_argument("forecast head: horizon must be >= 1");
  Rng rng = substream(seed, "forecast_head");
  store_.add_normal("forecast.weight", {patches * d, horizon}, init_std, rng);
  store_.add_zeros("forecast.bias", {horizon});
}

template <typename T>
Tensor<T> ForecastHead<T>::normalized(Tape<T>& tape, const Encoder<T>& encoder, const EncoderOutput<T>& out) const {
  if (out.layout.patches != patches_ || encoder.config().d != d_)
    throw ad::ShapeError(fmt::format("forecast head built for {} patches of width {}, got {} of width {}", patches_, d_,
                                     out.layout.patches, encoder.config().d));
  auto rows = encoder.patch_rows(tape, out);
  auto per_channel = tape.reshape(rows, {out.batch * out.layout.channels, patches_ * d_});
  return tape.add_bias(tape.matmul(per_channel, store_.get("forecast.weight")), store_.get("forecast.bias"));
}

template <typename T>
Tensor<T> ForecastHead<T>::forward(Tape<T>& tape, const Encoder<T>& encoder, const EncoderOutput<T>& out) const {
  const std::size_t C = out.layout.channels;
  if (out.revin.size() != out.batch) throw std::invalid_argument("forecast head: encoder output carries no RevIN state");
  std::vector<T> scale, shift;
  for (const auto& st : out.revin)
    for (std::size_t c = 0; c < C; ++c) {
      scale.push_back(static_cast<T>(st.stdev[c]));
      shift.push_back(static_cast<T>(st.mean[c]));
    }
  return tape.row_affine(normalized(tape, encoder, out), scale, shift);
}

template class Encoder<float>;
template class Encoder<double>;
template class ForecastHead<float>;
template class ForecastHead<double>;
template std::vector<float> patch_targets<float>(std::span<const data::Series>, std::size_t);
template std::vector<double> patch_targets<double>(std::span<const data::Series>, std::size_t);

}  // namespace trace::model
