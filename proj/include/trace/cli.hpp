#pragma once

// The `trace` command line: gen, pretrain, align, index, retrieve, rag and eval, each reading a
// run config and writing its artifacts under the configured output directory.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "trace/align.hpp"
#include "trace/config.hpp"
#include "trace/text.hpp"

namespace trace::cli {

inline const std::vector<std::string>& commands() {
  static const std::vector<std::string> names{"gen", "pretrain", "align", "index", "retrieve", "rag", "eval"};
  return names;
}

struct Options {
  std::string command;
  std::filesystem::path config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

// Modules rebuilt from a checkpoint; shapes and init seeds follow the config stored inside it.
struct Modules {
  config::RunConfig origin;
  std::unique_ptr<model::Encoder<float>> encoder;
  std::unique_ptr<text::TextEmbedder<float>> text;  // set for aligned checkpoints
  std::unique_ptr<align::Fusion<float>> fusion;

  align::AlignModules<float> align_view() const { return {encoder.get(), text.get(), fusion.get()}; }
};

// Throws naming the expected path when the file is missing.
Modules load_modules(const std::filesystem::path& path, bool aligned);

// Loads the config file and applies --seed / --out.
config::RunConfig resolve_config(const Options& options);

// Runs one command; throws on any failure.
void run_command(const std::string& command, const config::RunConfig& config);

// Full entry point: argument parsing, logging setup, and error-to-exit-status mapping.
int main(int argc, char** argv);

}  // namespace trace::cli
