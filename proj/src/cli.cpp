#include "trace/cli.hpp"

#include <fstream>
#include <iostream>
#include <memory>

#include <fmt/format.h>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "trace/align.hpp"
#include "trace/checkpoint.hpp"
#include "trace/downstream.hpp"
#include "trace/rag.hpp"
#include "trace/retrieval.hpp"

namespace trace::cli {

namespace {

namespace fs = std::filesystem;

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  out << text;
  if (!out) throw std::runtime_error(fmt::format("failed writing '{}'", path.string()));
  spdlog::info("wrote {}", path.string());
}

void require(const fs::path& path, const char* what, const char* producer) {
  if (!fs::exists(path))
    throw std::runtime_error(fmt::format("missing {}: expected '{}' (produced by `trace {}`)", what, path.string(), producer));
}

data::Corpus load_corpus(const config::RunConfig& cfg) {
  const auto path = cfg.paths.resolve(cfg.paths.corpus);
  require(path, "corpus", "gen");
  auto corpus = data::load_corpus(path);
  spdlog::info("corpus {}: {} train / {} val / {} test, checksum {:08x}", path.string(), corpus.manifest.n_train,
               corpus.manifest.n_val, corpus.manifest.n_test, data::corpus_checksum(corpus));
  return corpus;
}

void new_encoder(Modules& m) {
  m.encoder = std::make_unique<model::Encoder<float>>(m.origin.model, m.origin.encoder_seed());
}

void new_aligners(Modules& m) {
  m.text = std::make_unique<text::TextEmbedder<float>>(m.origin.text, m.origin.model.d, m.origin.text_proj_seed());
  m.fusion = std::make_unique<align::Fusion<float>>(m.origin.model.d, m.origin.model.init_std, m.origin.fusion_seed());
}

}  // namespace

Modules load_modules(const fs::path& path, bool aligned) {
  require(path, "checkpoint", aligned ? "align" : "pretrain");
  const auto ckpt = checkpoint::load(path);
  Modules m;
  m.origin = config::parse_config(ckpt.config);
  new_encoder(m);
  ckpt.restore_store("encoder/", m.encoder->parameters());
  ckpt.restore_store("recon/", m.encoder->reconstruction_parameters());
  ckpt.restore_store("classifier/", m.encoder->classifier_parameters());
  if (aligned) {
    new_aligners(m);
    ckpt.restore_store("text/", m.text->parameters());
    ckpt.restore_store("fusion/", m.fusion->parameters());
  }
  spdlog::info("loaded {} ({} tensors, backbone checksum {:016x})", path.string(), ckpt.tensors.size(),
               m.encoder->parameters().checksum());
  return m;
}

namespace {

void save_modules(const Modules& m, const fs::path& path) {
  checkpoint::Checkpoint ckpt;
  // Paths stay out so identical runs in different directories give identical bytes.
  auto recorded = m.origin;
  recorded.paths = {};
  ckpt.config = config::to_json(recorded);
  ckpt.add_store("encoder/", m.encoder->parameters());
  ckpt.add_store("recon/", m.encoder->reconstruction_parameters());
  ckpt.add_store("classifier/", m.encoder->classifier_parameters());
  if (m.text) ckpt.add_store("text/", m.text->parameters());
  if (m.fusion) ckpt.add_store("fusion/", m.fusion->parameters());
  checkpoint::save(ckpt, path);
  spdlog::info("wrote {} ({} tensors)", path.string(), ckpt.tensors.size());
}

void check_corpus_fits(const data::Corpus& corpus, const config::RunConfig& origin) {
  if (corpus.manifest.channels != origin.model.channels || corpus.manifest.class_count != origin.model.classes)
    throw std::runtime_error(fmt::format("corpus has {} channels / {} classes but the model expects {} / {}",
                                         corpus.manifest.channels, corpus.manifest.class_count, origin.model.channels,
                                         origin.model.classes));
}

void cmd_gen(const config::RunConfig& cfg) {
  const auto corpus = data::generate_corpus(cfg.data);
  const auto path = cfg.paths.resolve(cfg.paths.corpus);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  data::save_corpus(corpus, path);
  spdlog::info("wrote {} ({} instances, checksum {:08x})", path.string(), corpus.instances.size(), data::corpus_checksum(corpus));
  write_text(cfg.paths.resolve("config.json"), config::to_json(cfg));
}

void cmd_pretrain(const config::RunConfig& cfg) {
  const auto corpus = load_corpus(cfg);
  Modules m;
  m.origin = cfg;
  check_corpus_fits(corpus, m.origin);
  new_encoder(m);
  std::vector<data::Series> raw;
  for (const auto* inst : corpus.split(data::Split::kTrain)) raw.push_back(inst->values);
  const auto result = train::pretrain(*m.encoder, std::span<const data::Series>(raw), cfg.pretrain, [&](std::size_t e, double loss) {
    spdlog::info("epoch {}/{} masked mse {:.6f}", e + 1, cfg.pretrain.epochs, loss);
  });
  spdlog::info("masked mse {:.6f} -> {:.6f}", result.initial_mse, result.final_mse);
  save_modules(m, cfg.paths.resolve(cfg.paths.pretrain_checkpoint));
  result.history.write(cfg.paths.resolve("pretrain_history.txt"));
  write_text(cfg.paths.resolve("pretrain_report.txt"),
             fmt::format("pretrain.initial_mse={:.6f}\npretrain.final_mse={:.6f}\n", result.initial_mse, result.final_mse));
}

void cmd_align(const config::RunConfig& cfg) {
  const auto corpus = load_corpus(cfg);
  auto m = load_modules(cfg.paths.resolve(cfg.paths.pretrain_checkpoint), false);
  check_corpus_fits(corpus, m.origin);
  new_aligners(m);
  auto ac = cfg.align;
  ac.seed = m.origin.seed;
  const auto result = align::train_alignment(m.align_view(), corpus.split(data::Split::kTrain), ac, [&](std::size_t e, double loss) {
    spdlog::info("epoch {}/{} alignment loss {:.6f}", e + 1, ac.epochs, loss);
  });
  const auto margin = align::cosine_margin(m.align_view(), corpus.split(data::Split::kTest), m.origin.seed);
  spdlog::info("alignment loss {:.6f} -> {:.6f}, held-out cosine margin {:.4f}", result.initial_loss, result.final_loss,
               margin.margin());
  m.origin.align = ac;
  save_modules(m, cfg.paths.resolve(cfg.paths.align_checkpoint));
  result.history.write(cfg.paths.resolve("align_history.txt"));
  write_text(cfg.paths.resolve("align_report.txt"),
             fmt::format("align.initial_loss={:.6f}\nalign.final_loss={:.6f}\nalign.paired_cosine={:.6f}\n"
                         "align.unpaired_cosine={:.6f}\nalign.margin={:.6f}\n",
                         result.initial_loss, result.final_loss, margin.paired, margin.unpaired, margin.margin()));
}

void cmd_index(const config::RunConfig& cfg) {
  const auto corpus = load_corpus(cfg);
  const auto m = load_modules(cfg.paths.resolve(cfg.paths.align_checkpoint), true);
  check_corpus_fits(corpus, m.origin);
  const auto test = corpus.split(data::Split::kTest);
  const auto ts = retrieval::build_ts_index(*m.encoder, test);
  const auto text = retrieval::build_text_index(*m.text, test);
  retrieval::save_index(ts, cfg.paths.resolve(cfg.paths.ts_index));
  retrieval::save_index(text, cfg.paths.resolve(cfg.paths.text_index));
  spdlog::info("indexed {} test pairs", test.size());
}

retrieval::EmbeddingIndex load_index_checked(const fs::path& path, std::span<const data::TimeSeriesInstance* const> instances) {
  require(path, "index", "index");
  auto index = retrieval::load_index(path);
  if (index.size() != instances.size())
    throw std::runtime_error(fmt::format("index '{}' has {} entries, the corpus test split {}", path.string(), index.size(),
                                         instances.size()));
  for (const auto& e : index.entries())
    if (e.source >= instances.size() || instances[e.source]->id != e.id)
      throw std::runtime_error(fmt::format("index '{}' entry {} does not match the corpus", path.string(), e.id));
  return index;
}

void cmd_retrieve(const config::RunConfig& cfg) {
  const auto corpus = load_corpus(cfg);
  const auto test = corpus.split(data::Split::kTest);
  const auto ts = load_index_checked(cfg.paths.resolve(cfg.paths.ts_index), test);
  const auto text = load_index_checked(cfg.paths.resolve(cfg.paths.text_index), test);
  spdlog::info("evaluating with {} thread(s)", retrieval::evaluation_threads());
  std::vector<retrieval::MetricReport> reports{
      retrieval::evaluate_crossmodal(ts, text, retrieval::Direction::kTsToText, test),
      retrieval::evaluate_crossmodal(ts, text, retrieval::Direction::kTextToTs, test),
      retrieval::evaluate_ts_to_ts(ts, test),
      retrieval::evaluate_euclidean(test),
  };
  std::string kv;
  for (const auto& r : reports) kv += r.to_key_values();
  const auto table = retrieval::format_table(reports);
  std::cout << table;
  write_text(cfg.paths.resolve("retrieval_report.txt"), kv);
  write_text(cfg.paths.resolve("retrieval_table.txt"), table);
}

void cmd_rag(const config::RunConfig& cfg) {
  const auto corpus = load_corpus(cfg);
  auto m = load_modules(cfg.paths.resolve(cfg.paths.align_checkpoint), true);
  check_corpus_fits(corpus, m.origin);
  const auto report = rag::run_rag(*m.encoder, *m.text, corpus, cfg.rag);
  if (report.backbone_before != report.backbone_after) throw std::logic_error("backbone changed during RAG training");
  std::string kv;
  for (const auto& s : report.settings) kv += fmt::format("{0}.mae={1:.6f}\n{0}.mse={2:.6f}\n", rag::mode_name(s.mode), s.mae, s.mse);
  kv += fmt::format("backbone.checksum={:016x}\n", report.backbone_after);
  std::cout << report.to_text();
  write_text(cfg.paths.resolve("rag_report.txt"), kv);
  write_text(cfg.paths.resolve("rag_table.txt"), report.to_text());
}

void cmd_eval(const config::RunConfig& cfg) {
  const auto corpus = load_corpus(cfg);
  auto m = load_modules(cfg.paths.resolve(cfg.paths.align_checkpoint), true);
  check_corpus_fits(corpus, m.origin);
  downstream::ClassifyConfig cc{cfg.eval.classify_epochs, cfg.eval.classify_batch, cfg.eval.classify_lr, cfg.seed};
  const auto report = downstream::evaluate_downstream(*m.encoder, corpus, cc, cfg.rag);
  std::cout << report.to_key_values();
  write_text(cfg.paths.resolve("eval_report.txt"), report.to_key_values());
}

void setup_logging(const std::string& stage) {
  auto logger = spdlog::stderr_logger_mt(stage);
  logger->set_pattern("%Y-%m-%dT%H:%M:%S.%e [%n] %l: %v");
  spdlog::set_default_logger(logger);
}

}  // namespace

config::RunConfig resolve_config(const Options& options) {
  auto cfg = config::load_config(options.config);
  if (options.seed) cfg.seed = *options.seed;
  if (options.out) cfg.paths.out = *options.out;
  cfg.propagate();
  cfg.validate();
  return cfg;
}

void run_command(const std::string& command, const config::RunConfig& cfg) {
  if (command == "gen") cmd_gen(cfg);
  else if (command == "pretrain") cmd_pretrain(cfg);
  else if (command == "align") cmd_align(cfg);
  else if (command == "index") cmd_index(cfg);
  else if (command == "retrieve") cmd_retrieve(cfg);
  else if (command == "rag") cmd_rag(cfg);
  else if (command == "eval") cmd_eval(cfg);
  else throw std::invalid_argument("unknown command '" + command + "'");
}

int main(int argc, char** argv) {
  CLI::App app{"Multimodal time-series retrieval: data generation, training, indexing and evaluation"};
  Options options;
  std::uint64_t seed = 0;
  std::string out;
  app.add_option("command", options.command, "Stage to run")->required()->check(CLI::IsMember(commands()));
  app.add_option("--config", options.config, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "Override the run seed");
  auto* out_opt = app.add_option("--out", out, "Override the output directory");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  if (*seed_opt) options.seed = seed;
  if (*out_opt) options.out = out;

  setup_logging(options.command);
  try {
    const auto cfg = resolve_config(options);
    spdlog::info("config {} (seed {}, out {})", options.config.string(), cfg.seed, cfg.paths.out);
    run_command(options.command, cfg);
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  spdlog::info("done");
  return 0;
}

}  // namespace trace::cli
