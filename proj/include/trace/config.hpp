#pragma once

// Run configuration for the CLI: one JSON document with sections seed, data, model, text,
// pretrain, align, rag, eval and paths. Missing keys keep their defaults; unknown keys are errors.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "trace/align.hpp"
#include "trace/dataset.hpp"
#include "trace/model.hpp"
#include "trace/rag.hpp"
#include "trace/text.hpp"
#include "trace/train.hpp"

namespace trace::config {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EvalConfig {
  std::size_t classify_epochs = 30;
  std::size_t classify_batch = 64;
  double classify_lr = 1e-2;
};

// Artifact file names, resolved against `out`.
struct Paths {
  std::string out = "runs/tiny";
  std::string corpus = "corpus.jsonl";
  std::string pretrain_checkpoint = "pretrain.ckpt";
  std::string align_checkpoint = "align.ckpt";
  std::string ts_index = "index_ts.jsonl";
  std::string text_index = "index_text.jsonl";

  std::filesystem::path resolve(const std::string& name) const { return std::filesystem::path(out) / name; }
};

// Defaults form the desk-scale configuration used end to end.
struct RunConfig {
  std::uint64_t seed = 0;
  data::GeneratorConfig data;
  model::ModelConfig model;
  text::TextConfig text;
  train::PretrainConfig pretrain;
  align::AlignConfig align;
  rag::RagConfig rag;
  EvalConfig eval;
  Paths paths;

  RunConfig();

  // Pushes the run seed and the shared shape fields into every section.
  void propagate();
  // Throws ConfigError naming the section and field.
  void validate() const;

  std::uint64_t encoder_seed() const;
  std::uint64_t text_proj_seed() const;
  std::uint64_t fusion_seed() const;
};

// Parses, propagates and validates.
RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::filesystem::path& path);
// Every field, pretty-printed; parse_config(to_json(c)) reproduces c.
std::string to_json(const RunConfig& config);

}  // namespace trace::config
