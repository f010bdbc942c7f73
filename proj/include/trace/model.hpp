#pragma once

// Channel-aware time-series encoder: RevIN, patch tokens with one global CLS
// token and one identity token (CIT) per channel, channel-biased rotary
// attention blocks, and the reconstruction / forecasting / classification heads.
//
// Sequence layout for C channels of T̂ patches (optional prompt row first):
//   [PROMPT] CLS CIT_0 p_0,0 .. p_0,T̂-1 CIT_1 p_1,0 .. CIT_C-1 .. p_C-1,T̂-1

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "trace/autodiff.hpp"
#include "trace/dataset.hpp"
#include "trace/parameters.hpp"
#include "trace/random.hpp"

namespace trace::model {

struct ModelConfig {
  std::size_t d = 384;
  std::size_t n_layers = 6;
  std::size_t n_heads = 6;
  std::size_t patch_len = 6;
  std::size_t channels = 7;
  std::size_t classes = 10;
  double mask_ratio = 0.3;
  double dropout = 0.1;
  double rope_base = 10000.0;
  double ln_eps = 1e-5;
  double init_std = 0.02;

  std::size_t head_width() const { return d / n_heads; }
  // Throws std::invalid_argument naming the offending field.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class TokenRole : std::uint8_t { kCls, kCit, kPatch, kMaskedPatch, kPrompt };

// ⌊T/P⌋; throws when T < P.
std::size_t patch_count(std::size_t steps, std::size_t patch_len);
// C·(T̂+1) + 1
std::size_t sequence_length(std::size_t channels, std::size_t steps, std::size_t patch_len);

struct TokenLayout {
  std::size_t channels = 0;
  std::size_t patches = 0;
  bool prompt = false;

  std::size_t length() const { return channels * (patches + 1) + 1 + (prompt ? 1 : 0); }
  std::size_t cls_index() const { return prompt ? 1 : 0; }
  std::size_t cit_index(std::size_t c) const { return cls_index() + 1 + c * (patches + 1); }
  std::size_t patch_index(std::size_t c, std::size_t t) const { return cit_index(c) + 1 + t; }

  std::vector<TokenRole> roles() const;
  // -1 for tokens that belong to no channel (CLS, PROMPT).
  std::vector<int> channel_of() const;
  // -1 for CLS, CIT, PROMPT.
  std::vector<int> patch_index_of() const;
  // Rotary position per token: the patch index, 0 (identity) for the others.
  std::vector<int> rope_positions() const;
};

TokenLayout make_layout(std::size_t channels, std::size_t steps, std::size_t patch_len, bool prompt = false);

struct AttentionMask {
  std::size_t length = 0;
  std::vector<double> additive;  // length×length, entries 0 or -inf

  bool allowed(std::size_t i, std::size_t j) const { return additive[i * length + j] == 0.0; }
};

// CIT rows see only their own channel's CIT and patches; every other row is unrestricted.
AttentionMask build_attention_mask(const TokenLayout& layout);

struct RevinState {
  std::vector<double> mean;
  std::vector<double> stdev;
  double eps = 1e-5;
};

struct Normalized {
  data::Series series;
  RevinState state;
};

Normalized revin_normalize(const data::Series& x, double eps = 1e-5);
data::Series revin_denormalize(const data::Series& y, const RevinState& state);

template <typename T>
struct TokenSequence {
  ad::Tensor<T> embeddings;  // [batch·L × d]
  TokenLayout layout;
  std::size_t batch = 1;
  std::vector<std::vector<TokenRole>> roles;  // per batch item

  std::size_t length() const { return layout.length(); }
};

// Per batch item, one flag per patch token in (channel, patch) order.
struct MaskDraw {
  std::vector<std::vector<std::uint8_t>> bitmap;
  std::size_t per_item = 0;
};

template <typename T>
struct MaskedSequence {
  TokenSequence<T> sequence;
  MaskDraw mask;
};

template <typename T>
struct EncoderOutput {
  ad::Tensor<T> hidden;  // [batch·L × d]
  ad::Tensor<T> h_cls;   // [batch × d]
  ad::Tensor<T> h_cit;   // [batch·C × d], item-major
  TokenLayout layout;
  std::size_t batch = 1;
  std::vector<RevinState> revin;  // filled by encode()
};

// ⌈ratio·n⌉ distinct draws from n; redraws while a channel would lose every patch,
// as long as leaving one visible patch per channel is possible.
MaskDraw draw_mask(const TokenLayout& layout, std::size_t batch, double ratio, Rng& rng);

template <typename T>
class Encoder {
 public:
  Encoder(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParameterStore<T>& parameters() { return backbone_; }
  const ParameterStore<T>& parameters() const { return backbone_; }
  ParameterStore<T>& reconstruction_parameters() { return recon_; }
  const ParameterStore<T>& reconstruction_parameters() const { return recon_; }
  ParameterStore<T>& classifier_parameters() { return classifier_; }
  const ParameterStore<T>& classifier_parameters() const { return classifier_; }

  // `normalized` items must share C×T; `prompt`, if given, is [batch × d].
  TokenSequence<T> tokenize(ad::Tape<T>& tape, std::span<const data::Series> normalized,
                            const ad::Tensor<T>* prompt = nullptr) const;
  MaskedSequence<T> apply_mask(ad::Tape<T>& tape, const TokenSequence<T>& seq, double ratio, Rng& rng) const;
  MaskedSequence<T> apply_mask(ad::Tape<T>& tape, const TokenSequence<T>& seq, const MaskDraw& draw) const;

  ad::AttentionSpec<T> attention_spec(const TokenLayout& layout, std::size_t batch) const;
  // Pre-norm block: h + MHA(LN(h)), then + FFN(LN(·)). Dropout only when `dropout_rng` is set.
  ad::Tensor<T> cba_layer(ad::Tape<T>& tape, std::size_t layer, const ad::Tensor<T>& hidden,
                          const ad::AttentionSpec<T>& spec, Rng* dropout_rng = nullptr) const;
  // Runs every block and the final norm. `layer_inputs` receives each block's input.
  EncoderOutput<T> encode_tokens(ad::Tape<T>& tape, const TokenSequence<T>& seq, Rng* dropout_rng = nullptr,
                                 std::vector<ad::Tensor<T>>* layer_inputs = nullptr) const;
  // RevIN, tokenize, blocks, final norm.
  EncoderOutput<T> encode(ad::Tape<T>& tape, std::span<const data::Series> raw, Rng* dropout_rng = nullptr,
                          const ad::Tensor<T>* prompt = nullptr) const;

  // [batch·C·T̂ × P] normalized-space patch predictions, (item, channel, patch) order.
  ad::Tensor<T> reconstruction_head(ad::Tape<T>& tape, const EncoderOutput<T>& out) const;
  // [batch × classes]
  ad::Tensor<T> classification_head(ad::Tape<T>& tape, const ad::Tensor<T>& h_cls) const;

  // Patch-token rows of `hidden` as [batch·C·T̂ × d].
  ad::Tensor<T> patch_rows(ad::Tape<T>& tape, const EncoderOutput<T>& out) const;

 private:
  ModelConfig config_;
  ParameterStore<T> backbone_;
  ParameterStore<T> recon_;
  ParameterStore<T> classifier_;
};

// Per-channel shared linear map from a channel's concatenated patch outputs (T̂·d) to H steps,
// followed by RevIN denormalization.
template <typename T>
class ForecastHead {
 public:
  ForecastHead(std::size_t d, std::size_t patches, std::size_t horizon, double init_std, std::uint64_t seed);

  std::size_t horizon() const { return horizon_; }
  ParameterStore<T>& parameters() { return store_; }
  const ParameterStore<T>& parameters() const { return store_; }

  // Normalized-space predictions [batch·C × H].
  ad::Tensor<T> normalized(ad::Tape<T>& tape, const Encoder<T>& encoder, const EncoderOutput<T>& out) const;
  // Denormalized with out.revin: [batch·C × H].
  ad::Tensor<T> forward(ad::Tape<T>& tape, const Encoder<T>& encoder, const EncoderOutput<T>& out) const;

 private:
  std::size_t d_;
  std::size_t patches_;
  std::size_t horizon_;
  ParameterStore<T> store_;
};

// Normalized patch targets [batch·C·T̂ × P] matching reconstruction_head's row order.
template <typename T>
std::vector<T> patch_targets(std::span<const data::Series> normalized, std::size_t patch_len);

extern template class Encoder<float>;
extern template class Encoder<double>;
extern template class ForecastHead<float>;
extern template class ForecastHead<double>;

}  // namespace trace::model
