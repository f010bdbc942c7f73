#include "trace/text.hpp"

#include <cctype>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include <spdlog/spdlog.h>

namespace trace::text {

namespace {

bool word_char(char ch) {
  return std::isalnum(static_cast<unsigned char>(ch)) || ch == '.' || ch == '+' || ch == '-' || ch == '_';
}

std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (char ch : s) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && !word_char(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && word_char(text[j])) ++j;
    std::string_view raw = text.substr(i, j - i);
    i = j;
    // Trailing sentence punctuation and dangling hyphens are not part of the token.
    while (!raw.empty() && (raw.back() == '.' || raw.back() == '-' || raw.back() == '+')) raw.remove_suffix(1);
    while (!raw.empty() && raw.front() == '.') raw.remove_prefix(1);
    bool has_alnum = false;
    for (char ch : raw) has_alnum |= std::isalnum(static_cast<unsigned char>(ch)) != 0;
    if (!has_alnum) continue;
    std::string tok(raw);
    for (char& ch : tok) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    out.push_back(std::move(tok));
  }
  return out;
}

std::size_t bucket_of(std::string_view feature, std::size_t buckets) {
  return static_cast<std::size_t>(fnv1a(feature) % buckets);
}

void TextConfig::validate() const {
  if (buckets == 0) throw std::invalid_argument("text: buckets must be >= 1");
  if (d_text == 0) throw std::invalid_argument("text: d_text must be >= 1");
}

std::vector<double> hashed_bag(std::string_view text, std::size_t buckets) {
  std::vector<double> bag(buckets, 0.0);
  const auto tokens = tokenize(text);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    bag[bucket_of(tokens[i], buckets)] += 1.0;
    if (i + 1 < tokens.size()) bag[bucket_of(tokens[i] + ' ' + tokens[i + 1], buckets)] += 1.0;
  }
  double norm = 0.0;
  for (double v : bag) norm += v * v;
  if (norm > 0.0) {
    norm = std::sqrt(norm);
    for (double& v : bag) v /= norm;
  }
  return bag;
}

template <typename T>
TextEmbedder<T>::TextEmbedder(const TextConfig& config, std::size_t d_model, std::uint64_t proj_seed)
    : config_(config), d_model_(d_model) {
  config_.validate();
  if (d_model == 0) throw std::invalid_argument("text: d_model must be >= 1");
  Rng frozen_rng = substream(config_.seed, "text/frozen");
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(config_.d_text)));
  frozen_.resize(config_.buckets * config_.d_text);
  for (T& v : frozen_) v = static_cast<T>(normal(frozen_rng));

  Rng rng = substream(proj_seed, "text/proj");
  proj_.add_normal("text_proj.weight", {config_.d_text, d_model}, 1.0 / std::sqrt(static_cast<double>(config_.d_text)), rng);
  proj_.add_zeros("text_proj.bias", {d_model});
}

template <typename T>
std::vector<T> TextEmbedder<T>::frozen_features(std::string_view text) const {
  const auto bag = hashed_bag(text, config_.buckets);
  std::vector<T> out(config_.d_text, T(0));
  bool empty = true;
  for (std::size_t b = 0; b < bag.size(); ++b) {
    if (bag[b] == 0.0) continue;
    empty = false;
    const T w = static_cast<T>(bag[b]);
    const T* row = frozen_.data() + b * config_.d_text;
    for (std::size_t j = 0; j < config_.d_text; ++j) out[j] += w * row[j];
  }
  if (empty) spdlog::warn("text embedder: no tokens in \"{}\"; embedding is the projection bias", text);
  return out;
}

template <typename T>
ad::Tensor<T> TextEmbedder<T>::embed(ad::Tape<T>& tape, std::span<const std::string> texts) const {
  if (texts.empty()) throw std::invalid_argument("text embed: no texts");
  std::vector<T> features;
  features.reserve(texts.size() * config_.d_text);
  for (const auto& t : texts) {
    const auto f = frozen_features(t);
    features.insert(features.end(), f.begin(), f.end());
  }
  const auto x = ad::Tensor<T>::constant({texts.size(), config_.d_text}, std::move(features));
  return tape.add_bias(tape.matmul(x, proj_.get("text_proj.weight")), proj_.get("text_proj.bias"));
}

template <typename T>
std::uint64_t TextEmbedder<T>::frozen_checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (T v : frozen_) {
    char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    h = fnv1a(std::string_view(bytes, sizeof(T)), h);
  }
  return h;
}

template class TextEmbedder<float>;
template class TextEmbedder<double>;

}  // namespace trace::text
