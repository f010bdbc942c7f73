#pragma once

// Text encoder stub: hashed unigram+bigram bags through a frozen seeded
// random matrix (d_text wide), then a learnable linear projection to the
// model width. Only the projection is a parameter.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "trace/autodiff.hpp"
#include "trace/parameters.hpp"

namespace trace::text {

// Lowercased word tokens; signed decimals such as "+0.0100" stay whole, edge punctuation is dropped.
std::vector<std::string> tokenize(std::string_view text);

// Bucket of one feature string (FNV-1a 64 modulo `buckets`).
std::size_t bucket_of(std::string_view feature, std::size_t buckets);

struct TextConfig {
  std::size_t buckets = 4096;
  std::size_t d_text = 64;
  std::uint64_t seed = 0;  // seeds the frozen matrix only

  void validate() const;
  bool operator==(const TextConfig&) const = default;
};

// L2-normalized count vector over unigram and bigram buckets; all zeros for a token-free string.
std::vector<double> hashed_bag(std::string_view text, std::size_t buckets);

template <typename T>
class TextEmbedder {
 public:
  // `d_model` is the projection output width; projection weights are drawn from `proj_seed`.
  TextEmbedder(const TextConfig& config, std::size_t d_model, std::uint64_t proj_seed);

  const TextConfig& config() const { return config_; }
  std::size_t d_model() const { return d_model_; }
  ParameterStore<T>& parameters() { return proj_; }
  const ParameterStore<T>& parameters() const { return proj_; }

  // bag · frozen, d_text wide. Logs a warning for token-free input.
  std::vector<T> frozen_features(std::string_view text) const;
  // [texts.size() × d_model]; gradients reach the projection only.
  ad::Tensor<T> embed(ad::Tape<T>& tape, std::span<const std::string> texts) const;

  // FNV-1a over the frozen matrix bytes.
  std::uint64_t frozen_checksum() const;

 private:
  TextConfig config_;
  std::size_t d_model_;
  std::vector<T> frozen_;  // buckets × d_text, row-major
  ParameterStore<T> proj_;
};

extern template class TextEmbedder<float>;
extern template class TextEmbedder<double>;

}  // namespace trace::text
