// anpd: n-gram draft-and-verify decoding experiments from the command line.
//
//   anpd run --config demo.json [--n 5 --k 7 --max-new-tokens 256 ...]
//   anpd sweep --config demo.json --n-grid 2,3,4,5,6 --k-grid 1,2,3,4,5,6,7,8 --out sweep.csv
//   anpd stats CORPUS [--mode bpe --bpe-vocab-size 512]
//   anpd serve-oracle --kind markov --corpus FILE --order 2 --seed 0 --listen 127.0.0.1:7070
//   anpd train-bpe --corpus FILE --vocab-size 512 --out vocab.json

#include <csignal>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "anpd/app.hpp"

namespace {

std::vector<int> parse_grid(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    const int v = std::stoi(item, &used);
    if (used != item.size()) throw std::invalid_argument("bad grid value '" + item + "'");
    out.push_back(v);
  }
  return out;
}

struct RunFlags {
  std::string config;
  std::string corpus;
  std::optional<int> n, k;
  std::optional<std::size_t> max_new_tokens, prompt_tokens, num_prompts;
  std::optional<std::string> oracle, endpoint, mode, vocab;
  std::optional<std::uint64_t> seed;
  bool no_runtime_update = false;
  bool fixed_level_only = false;
  std::string trace, report;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--config", config, "JSON run configuration");
    cmd->add_option("--corpus", corpus, "Scenario corpus (file or directory); overrides the config");
    cmd->add_option("--n", n, "Highest n-gram order N (>= 2)");
    cmd->add_option("--k", k, "Draft length K (>= 1)");
    cmd->add_option("--max-new-tokens", max_new_tokens, "Generation budget M");
    cmd->add_option("--prompt-tokens", prompt_tokens, "Prompt length in tokens");
    cmd->add_option("--prompts", num_prompts, "Number of prompt windows cut from the corpus");
    cmd->add_option("--oracle", oracle, "Oracle kind: replay, markov or external");
    cmd->add_option("--endpoint", endpoint, "HOST:PORT of an external oracle");
    cmd->add_option("--mode", mode, "Tokenizer mode: byte, whitespace or bpe");
    cmd->add_option("--vocab", vocab, "Vocab JSON file");
    cmd->add_option("--seed", seed, "Seed for the markov oracle");
    cmd->add_flag("--no-runtime-update", no_runtime_update, "Freeze the n-gram memory after the prompt");
    cmd->add_flag("--fixed-level-only", fixed_level_only, "Query only the top n-gram order (no fallback)");
  }

  anpd::app::RunConfig resolve() const {
    anpd::app::RunConfig c = config.empty() ? anpd::app::RunConfig{} : anpd::app::RunConfig::load(config);
    if (!corpus.empty()) c.corpus = corpus;
    if (n) c.decode.n_max = *n;
    if (k) c.decode.k_draft = *k;
    if (max_new_tokens) c.decode.max_new_tokens = *max_new_tokens;
    if (prompt_tokens) c.prompt_tokens = *prompt_tokens;
    if (num_prompts) c.num_prompts = *num_prompts;
    if (oracle) c.oracle.kind = *oracle;
    if (endpoint) c.oracle.endpoint = *endpoint;
    if (mode) c.tokenizer.mode = anpd::parse_tokenizer_mode(*mode);
    if (vocab) c.tokenizer.vocab_path = *vocab;
    if (seed) c.seed = *seed;
    if (no_runtime_update) c.decode.runtime_update = false;
    if (fixed_level_only) c.decode.query_mode = anpd::QueryMode::fixed_level;
    if (!trace.empty()) c.trace_path = trace;
    if (!report.empty()) c.report_path = report;
    return c;
  }
};

std::atomic<bool> g_stop{false};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"n-gram draft-and-verify decoding engine and benchmark harness", "anpd"};
  app.set_version_flag("--version", std::string(anpd::app::kVersion));
  app.require_subcommand(1);
  bool json = false;
  app.add_flag("--json", json, "Machine-readable JSON on stdout");

  RunFlags run_flags;
  auto* run = app.add_subcommand("run", "Decode one prompt with both decoders and report the speed-up");
  run_flags.add_to(run);
  run->add_option("--trace", run_flags.trace, "Write the step trace (JSONL) here");
  run->add_option("--report", run_flags.report, "Write the text report here");
  run->add_flag("--json", json, "Machine-readable JSON on stdout");

  RunFlags sweep_flags;
  std::string n_grid, k_grid, sweep_out;
  std::size_t workers = 0;
  auto* sweep = app.add_subcommand("sweep", "Grid over N and K; writes CSV plus a JSON sidecar");
  sweep_flags.add_to(sweep);
  sweep->add_option("--n-grid", n_grid, "Comma-separated N values");
  sweep->add_option("--k-grid", k_grid, "Comma-separated K values");
  sweep->add_option("--out", sweep_out, "CSV path (sidecar goes to PATH.json); stdout when omitted");
  sweep->add_option("--workers", workers, "Parallel cells (0 = all cores)");
  sweep->add_flag("--json", json, "Machine-readable JSON on stdout");

  std::string stats_path;
  anpd::app::TokenizerConfig stats_tok;
  std::string stats_mode = "byte", stats_vocab;
  auto* stats = app.add_subcommand("stats", "Word and token counts per file and in aggregate");
  stats->add_option("corpus", stats_path, "File or directory")->required();
  stats->add_option("--mode", stats_mode, "Tokenizer mode: byte, whitespace or bpe");
  stats->add_option("--vocab", stats_vocab, "Vocab JSON file (bpe/whitespace); trained on the corpus when omitted");
  stats->add_option("--bpe-vocab-size", stats_tok.bpe_vocab_size, "Vocab size when training BPE on the fly");
  stats->add_flag("--json", json, "Machine-readable JSON on stdout");

  anpd::app::ServeConfig serve_cfg;
  std::string serve_mode = "byte", serve_vocab;
  auto* serve = app.add_subcommand("serve-oracle", "Serve a model oracle over newline-delimited JSON/TCP");
  serve->add_option("--kind", serve_cfg.kind, "Oracle kind (markov)");
  serve->add_option("--corpus", serve_cfg.corpus, "Training corpus")->required();
  serve->add_option("--order", serve_cfg.order, "Markov order");
  serve->add_option("--seed", serve_cfg.seed, "Seed for unseen contexts");
  serve->add_option("--listen", serve_cfg.listen, "HOST:PORT to bind (port 0 picks one)");
  serve->add_option("--mode", serve_mode, "Tokenizer mode for the corpus");
  serve->add_option("--vocab", serve_vocab, "Vocab JSON file");

  std::string bpe_corpus, bpe_out;
  std::size_t bpe_size = 512;
  auto* bpe = app.add_subcommand("train-bpe", "Train a greedy BPE vocab and save it as JSON");
  bpe->add_option("--corpus", bpe_corpus, "Training corpus")->required();
  bpe->add_option("--vocab-size", bpe_size, "Target vocab size (>= 257)");
  bpe->add_option("--out", bpe_out, "Output vocab JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return anpd::app::kError;
  }

  try {
    if (*run) return anpd::app::cmd_run(run_flags.resolve(), json);
    if (*sweep) {
      auto c = sweep_flags.resolve();
      if (sweep->count("--n-grid")) c.n_grid = parse_grid(n_grid);
      if (sweep->count("--k-grid")) c.k_grid = parse_grid(k_grid);
      std::optional<std::filesystem::path> out;
      if (!sweep_out.empty()) out = sweep_out;
      return anpd::app::cmd_sweep(c, out, workers, json);
    }
    if (*stats) {
      stats_tok.mode = anpd::parse_tokenizer_mode(stats_mode);
      if (!stats_vocab.empty()) stats_tok.vocab_path = stats_vocab;
      return anpd::app::cmd_stats(stats_path, stats_tok, json);
    }
    if (*serve) {
      serve_cfg.tokenizer.mode = anpd::parse_tokenizer_mode(serve_mode);
      if (!serve_vocab.empty()) serve_cfg.tokenizer.vocab_path = serve_vocab;
      std::signal(SIGINT, [](int) { g_stop = true; });
      std::signal(SIGTERM, [](int) { g_stop = true; });
      return anpd::app::cmd_serve_oracle(serve_cfg, g_stop);
    }
    if (*bpe) return anpd::app::cmd_train_bpe(bpe_corpus, bpe_size, bpe_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return anpd::app::kError;
  }
  return anpd::app::kError;
}
