#pragma once

// Command implementations behind the `anpd` CLI: configuration loading,
// scenario construction from corpora, and the run/sweep/stats/serve commands.
// Commands return process exit codes: 0 ok, 1 usage/config/IO/oracle error,
// 2 accelerated output diverged from the baseline.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "anpd/decoder.hpp"
#include "anpd/metrics.hpp"
#include "anpd/oracle_spec.hpp"
#include "anpd/tokenizer.hpp"
#include "anpd/wire.hpp"

namespace anpd::app {

namespace fs = std::filesystem;

inline constexpr std::string_view kVersion = "0.3.1";

enum ExitCode : int { kOk = 0, kError = 1, kLosslessnessViolation = 2 };

struct TokenizerConfig {
  TokenizerMode mode = TokenizerMode::byte;
  std::optional<fs::path> vocab_path;
  std::size_t bpe_vocab_size = 512;  // used when training a vocab on the fly
};

struct OracleConfig {
  std::string kind = "replay";  // replay | markov | external
  std::optional<fs::path> corpus;  // markov training text; defaults to the scenario corpus
  int order = 2;
  std::optional<std::uint64_t> seed;  // defaults to RunConfig::seed
  std::string endpoint;
};

struct RunConfig {
  fs::path corpus;
  std::size_t prompt_tokens = 64;
  std::size_t num_prompts = 1;
  TokenizerConfig tokenizer;
  OracleConfig oracle;
  DecodeOptions decode;
  CostModel cost_model;
  std::uint64_t seed = 0;
  std::optional<fs::path> trace_path;
  std::optional<fs::path> report_path;
  std::vector<int> n_grid{2, 3, 4, 5, 6};
  std::vector<int> k_grid{1, 2, 3, 4, 5, 6, 7, 8};

  /// Relative paths in `j` resolve against `base_dir`.
  static RunConfig from_json(const nlohmann::json& j, const fs::path& base_dir) {
    RunConfig c;
    auto path_of = [&](const nlohmann::json& v) {
      fs::path p = v.get<std::string>();
      return p.is_absolute() ? p : base_dir / p;
    };
    if (j.contains("corpus")) c.corpus = path_of(j["corpus"]);
    c.prompt_tokens = j.value("prompt_tokens", c.prompt_tokens);
    c.num_prompts = j.value("num_prompts", c.num_prompts);
    c.seed = j.value("seed", c.seed);
    if (j.contains("tokenizer")) {
      const auto& t = j["tokenizer"];
      c.tokenizer.mode = parse_tokenizer_mode(t.value("mode", std::string("byte")));
      if (t.contains("vocab") && !t["vocab"].is_null()) c.tokenizer.vocab_path = path_of(t["vocab"]);
      c.tokenizer.bpe_vocab_size = t.value("bpe_vocab_size", c.tokenizer.bpe_vocab_size);
    }
    if (j.contains("oracle")) {
      const auto& o = j["oracle"];
      c.oracle.kind = o.value("kind", c.oracle.kind);
      if (o.contains("corpus") && !o["corpus"].is_null()) c.oracle.corpus = path_of(o["corpus"]);
      c.oracle.order = o.value("order", c.oracle.order);
      if (o.contains("seed") && !o["seed"].is_null()) c.oracle.seed = o["seed"].get<std::uint64_t>();
      c.oracle.endpoint = o.value("endpoint", c.oracle.endpoint);
    }
    if (j.contains("decode")) {
      const auto& d = j["decode"];
      c.decode.n_max = d.value("n", c.decode.n_max);
      c.decode.k_draft = d.value("k", c.decode.k_draft);
      c.decode.max_new_tokens = d.value("max_new_tokens", c.decode.max_new_tokens);
      c.decode.runtime_update = d.value("runtime_update", c.decode.runtime_update);
      c.decode.stop_at_eos = d.value("stop_at_eos", c.decode.stop_at_eos);
      if (d.value("fixed_level_only", false)) c.decode.query_mode = QueryMode::fixed_level;
    }
    if (j.contains("cost_model")) c.cost_model = CostModel::from_json(j["cost_model"]);
    if (j.contains("output")) {
      const auto& out = j["output"];
      if (out.contains("trace") && !out["trace"].is_null()) c.trace_path = path_of(out["trace"]);
      if (out.contains("report") && !out["report"].is_null()) c.report_path = path_of(out["report"]);
    }
    if (j.contains("sweep")) {
      const auto& s = j["sweep"];
      c.n_grid = s.value("n", c.n_grid);
      c.k_grid = s.value("k", c.k_grid);
    }
    return c;
  }

  static RunConfig load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file " + path.string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    return from_json(j, path.parent_path());
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"corpus", corpus.string()},
                     {"prompt_tokens", prompt_tokens},
                     {"num_prompts", num_prompts},
                     {"seed", seed},
                     {"tokenizer",
                      {{"mode", to_string(tokenizer.mode)},
                       {"vocab", tokenizer.vocab_path ? nlohmann::json(tokenizer.vocab_path->string()) : nlohmann::json(nullptr)},
                       {"bpe_vocab_size", tokenizer.bpe_vocab_size}}},
                     {"oracle",
                      {{"kind", oracle.kind},
                       {"corpus", oracle.corpus ? nlohmann::json(oracle.corpus->string()) : nlohmann::json(nullptr)},
                       {"order", oracle.order},
                       {"seed", oracle.seed.value_or(seed)},
                       {"endpoint", oracle.endpoint}}},
                     {"decode",
                      {{"n", decode.n_max},
                       {"k", decode.k_draft},
                       {"max_new_tokens", decode.max_new_tokens},
                       {"runtime_update", decode.runtime_update},
                       {"stop_at_eos", decode.stop_at_eos},
                       {"fixed_level_only", decode.query_mode == QueryMode::fixed_level}}},
                     {"cost_model", cost_model.to_json()}};
    return j;
  }
};

/// Tokenized corpus and the workloads cut from it.
struct Scenario {
  Vocab vocab;
  TokenizerMode mode = TokenizerMode::byte;
  TokenSequence tokens;
  std::vector<Workload> workloads;
};

inline Vocab build_vocab(const TokenizerConfig& t, std::string_view corpus) {
  if (t.vocab_path) return load_vocab(*t.vocab_path);
  switch (t.mode) {
    case TokenizerMode::byte: return Vocab::bytes();
    case TokenizerMode::whitespace: return Vocab::words(corpus);
    case TokenizerMode::bpe: return corpus.empty() ? Vocab::bytes() : train_bpe(corpus, t.bpe_vocab_size);
  }
  return Vocab::bytes();
}

/// Prompts are `prompt_tokens`-long windows at evenly spaced offsets; a
/// replay oracle continues each window with the rest of the corpus.
inline Scenario build_scenario(const RunConfig& c) {
  if (c.corpus.empty()) throw std::runtime_error("no corpus given");
  c.decode.validate();
  c.cost_model.validate();
  const std::string text = read_corpus(c.corpus);
  Scenario s;
  s.mode = c.tokenizer.mode;
  s.vocab = build_vocab(c.tokenizer, text);
  s.tokens = encode(text, s.vocab, s.mode);
  if (c.prompt_tokens == 0) throw std::runtime_error("prompt_tokens must be >= 1");
  if (c.num_prompts == 0) throw std::runtime_error("num_prompts must be >= 1");
  if (s.tokens.size() <= c.prompt_tokens) {
    throw std::runtime_error("corpus " + c.corpus.string() + " has " + std::to_string(s.tokens.size()) +
                             " tokens, need more than prompt_tokens=" + std::to_string(c.prompt_tokens));
  }
  const TokenId eos = s.vocab.eos().value_or(TokenId(s.vocab.size()));

  std::optional<MarkovParams> markov;
  if (c.oracle.kind == "markov") {
    MarkovParams p;
    p.corpus = c.oracle.corpus ? encode(read_corpus(*c.oracle.corpus), s.vocab, s.mode) : s.tokens;
    p.order = c.oracle.order;
    p.seed = c.oracle.seed.value_or(c.seed);
    p.vocab_size = std::max<std::size_t>(s.vocab.size(), std::size_t(eos) + 1);
    p.eos = eos;
    markov = std::move(p);
  } else if (c.oracle.kind == "external") {
    if (c.oracle.endpoint.empty()) throw std::runtime_error("external oracle needs an endpoint");
  } else if (c.oracle.kind != "replay") {
    throw std::runtime_error("unknown oracle kind '" + c.oracle.kind + "' (expected replay, markov or external)");
  }

  const std::size_t span = s.tokens.size() - c.prompt_tokens;
  const std::size_t stride = c.num_prompts > 1 ? span / c.num_prompts : 0;
  for (std::size_t i = 0; i < c.num_prompts; ++i) {
    const std::size_t off = i * stride;
    const auto begin = s.tokens.begin() + std::ptrdiff_t(off);
    Workload w;
    w.prompt.assign(begin, begin + std::ptrdiff_t(c.prompt_tokens));
    if (markov) {
      w.oracle = *markov;
    } else if (c.oracle.kind == "external") {
      w.oracle = ExternalSpec{c.oracle.endpoint};
    } else {
      w.oracle = ReplaySpec{TokenSequence(begin + std::ptrdiff_t(c.prompt_tokens), s.tokens.end()), eos};
    }
    s.workloads.push_back(std::move(w));
  }
  return s;
}

/// Writes through a temporary sibling and renames on success, so a failed
/// command never leaves a partial file behind.
inline void write_atomically(const fs::path& path, const std::function<void(std::ostream&)>& fill) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    fill(out);
    out.flush();
    if (!out) {
      out.close();
      fs::remove(tmp);
      throw std::runtime_error("failed writing " + path.string());
    }
  }
  fs::rename(tmp, path);
}

struct Streams {
  std::ostream& out = std::cout;
  std::ostream& err = std::cerr;
};

struct RunOutcome {
  DecodeResult baseline;
  DecodeResult anpd;
  RunMetrics metrics;
  std::string output_text;
};

inline std::string render_report(const RunConfig& c, const Scenario& s, const RunOutcome& r) {
  const auto& m = r.metrics;
  std::ostringstream os;
  os << "anpd run report\n"
     << "  corpus            " << c.corpus.filename().string() << '\n'
     << "  tokenizer         " << to_string(s.mode) << " (vocab " << s.vocab.size() << ")\n"
     << "  oracle            " << c.oracle.kind << '\n'
     << "  prompt tokens     " << s.workloads.front().prompt.size() << '\n'
     << "  n / k / max new   " << c.decode.n_max << " / " << c.decode.k_draft << " / " << c.decode.max_new_tokens << '\n'
     << "  runtime update    " << (c.decode.runtime_update ? "on" : "off") << '\n'
     << "  query mode        " << (c.decode.query_mode == QueryMode::multilevel ? "multilevel" : "fixed-level") << '\n'
     << '\n'
     << "  output tokens     " << m.output_len << '\n'
     << "  steps             " << m.steps << " (baseline " << r.baseline.steps.size() << ")\n"
     << "  model calls       " << r.anpd.totals.llm_calls << " (baseline " << r.baseline.totals.llm_calls << ")\n"
     << "  drafts proposed   " << m.proposed_draft_tokens << '\n'
     << "  drafts accepted   " << m.accepted_draft_tokens << '\n'
     << "  alpha             " << format_double(m.alpha) << '\n'
     << "  mean committed    " << format_double(m.mean_committed_per_step) << '\n'
     << "  speedup_sim       " << format_double(m.speedup_sim) << '\n'
     << "  bound alpha*K+1   " << format_double(m.theoretical_bound) << '\n'
     << "\n--- output ---\n"
     << r.output_text << '\n';
  return os.str();
}

inline int cmd_run(const RunConfig& c, bool json, Streams io = {}) {
  try {
    const Scenario s = build_scenario(c);
    const Workload& w = s.workloads.front();
    RunOutcome r;
    {
      auto oracle = make_oracle(w.oracle, w.prompt);
      r.baseline = baseline_decode(*oracle, w.prompt, c.decode, c.cost_model);
    }
    {
      auto oracle = make_oracle(w.oracle, w.prompt);
      r.anpd = anpd_decode(*oracle, w.prompt, c.decode, c.cost_model);
    }
    try {
      r.metrics = compute_metrics(r.anpd, r.baseline, c.cost_model);
    } catch (const LosslessnessError& e) {
      io.err << "internal error: " << e.what() << '\n';
      return kLosslessnessViolation;
    }
    r.output_text = decode(r.anpd.output, s.vocab);

    if (c.trace_path) {
      const auto header = trace_header(r.anpd, c.decode.n_max, describe(w.oracle), c.cost_model);
      write_atomically(*c.trace_path, [&](std::ostream& os) { write_trace(os, header, r.anpd); });
    }
    const std::string report = render_report(c, s, r);
    if (c.report_path) write_atomically(*c.report_path, [&](std::ostream& os) { os << report; });

    if (json) {
      nlohmann::json j{{"metrics", to_json(r.metrics)},
                       {"output", r.anpd.output},
                       {"baseline_llm_calls", r.baseline.totals.llm_calls},
                       {"llm_calls", r.anpd.totals.llm_calls},
                       {"config", c.to_json()}};
      io.out << j.dump() << '\n';
    } else {
      io.out << report;
    }
    return kOk;
  } catch (const std::exception& e) {
    io.err << "error: " << e.what() << '\n';
    return kError;
  }
}

inline int cmd_sweep(const RunConfig& c, const std::optional<fs::path>& csv_path, std::size_t workers, bool json,
                     Streams io = {}) {
  if (c.n_grid.empty() || c.k_grid.empty()) {
    io.err << "usage error: --n-grid and --k-grid must each name at least one value\n";
    return kError;
  }
  try {
    const Scenario s = build_scenario(c);
    SweepConfig sc{c.n_grid, c.k_grid, c.decode, c.cost_model, workers};
    const SweepTable table = sweep(s.workloads, sc);

    std::ostringstream csv;
    write_sweep_csv(csv, table);
    nlohmann::json errors = nlohmann::json::array();
    for (const auto& row : table) {
      if (row.error) errors.push_back({{"n", row.n}, {"k", row.k}, {"error", *row.error}});
    }
    nlohmann::json sidecar{{"config", c.to_json()},
                           {"n_grid", c.n_grid},
                           {"k_grid", c.k_grid},
                           {"workloads", s.workloads.size()},
                           {"oracle", describe(s.workloads.front().oracle)},
                           {"aggregation", "arithmetic mean of per-prompt metrics; steps and output_len summed"},
                           {"errors", errors}};
    if (csv_path) {
      write_atomically(*csv_path, [&](std::ostream& os) { os << csv.str(); });
      fs::path side = *csv_path;
      side += ".json";
      write_atomically(side, [&](std::ostream& os) { os << sidecar.dump(2) << '\n'; });
    }
    if (json) {
      nlohmann::json rows = nlohmann::json::array();
      for (const auto& row : table) {
        nlohmann::json r{{"n", row.n}, {"k", row.k}};
        if (row.error) {
          r["error"] = *row.error;
        } else {
          r["metrics"] = to_json(row.metrics);
        }
        rows.push_back(std::move(r));
      }
      io.out << nlohmann::json{{"rows", rows}, {"sidecar", sidecar}}.dump() << '\n';
    } else if (!csv_path) {
      io.out << csv.str();
    } else {
      io.out << "wrote " << table.size() << " rows to " << csv_path->string() << '\n';
    }
    return errors.empty() ? kOk : kError;
  } catch (const std::exception& e) {
    io.err << "error: " << e.what() << '\n';
    return kError;
  }
}

inline int cmd_stats(const fs::path& corpus_path, const TokenizerConfig& t, bool json, Streams io = {}) {
  try {
    std::vector<fs::path> files;
    std::error_code ec;
    if (fs::is_directory(corpus_path, ec)) {
      for (const auto& e : fs::recursive_directory_iterator(corpus_path)) {
        if (e.is_regular_file()) files.push_back(e.path());
      }
      std::ranges::sort(files);
    } else {
      if (!fs::exists(corpus_path, ec)) throw std::runtime_error("corpus path does not exist: " + corpus_path.string());
      files.push_back(corpus_path);
    }
    const std::string all = read_corpus(corpus_path);
    const Vocab vocab = build_vocab(t, all);

    nlohmann::json rows = nlohmann::json::array();
    CorpusStats total;
    for (const auto& f : files) {
      const auto st = corpus_stats(read_corpus(f), vocab, t.mode);
      total.word_count += st.word_count;
      total.token_count += st.token_count;
      rows.push_back({{"file", f.string()}, {"words", st.word_count}, {"tokens", st.token_count}, {"ratio", st.ratio}});
    }
    total.ratio = total.word_count == 0 ? 1.0 : double(total.token_count) / double(total.word_count);
    if (json) {
      io.out << nlohmann::json{{"mode", to_string(t.mode)},
                               {"vocab_size", vocab.size()},
                               {"files", rows},
                               {"total", {{"words", total.word_count}, {"tokens", total.token_count}, {"ratio", total.ratio}}}}
                    .dump()
             << '\n';
    } else {
      io.out << "mode " << to_string(t.mode) << ", vocab " << vocab.size() << '\n';
      for (const auto& r : rows) {
        io.out << r["file"].get<std::string>() << "  words " << r["words"] << "  tokens " << r["tokens"] << "  ratio "
               << format_double(r["ratio"].get<double>()) << '\n';
      }
      io.out << "total  words " << total.word_count << "  tokens " << total.token_count << "  ratio "
             << format_double(total.ratio) << '\n';
    }
    return kOk;
  } catch (const std::exception& e) {
    io.err << "error: " << e.what() << '\n';
    return kError;
  }
}

struct ServeConfig {
  std::string kind = "markov";
  fs::path corpus;
  int order = 2;
  std::uint64_t seed = 0;
  std::string listen = "127.0.0.1:7070";
  TokenizerConfig tokenizer;
};

inline MarkovParams markov_params_for(const ServeConfig& c) {
  if (c.kind != "markov") throw std::runtime_error("serve-oracle supports --kind markov only, got '" + c.kind + "'");
  const std::string text = read_corpus(c.corpus);
  const Vocab vocab = build_vocab(c.tokenizer, text);
  MarkovParams p;
  p.corpus = encode(text, vocab, c.tokenizer.mode);
  p.order = c.order;
  p.seed = c.seed;
  p.vocab_size = vocab.size();
  p.eos = vocab.eos();
  return p;
}

/// Serves until `stop` is set. `on_listening` receives the bound port.
inline int cmd_serve_oracle(const ServeConfig& c, const std::atomic<bool>& stop,
                            const std::function<void(int)>& on_listening = {}, Streams io = {}) {
  try {
    const MarkovParams params = markov_params_for(c);
    MarkovOracle probe(params);  // validates parameters before binding
    OracleServer server(c.listen, [params] { return std::make_unique<MarkovOracle>(params); }, &io.err);
    io.err << "[serve-oracle] listening on port " << server.port() << " (markov order " << c.order << ", vocab "
           << probe.info().vocab_size << ")" << std::endl;
    if (on_listening) on_listening(server.port());
    std::thread watcher([&] {
      while (!stop.load()) std::this_thread::sleep_for(std::chrono::milliseconds(50));
      server.stop();
    });
    server.serve();
    watcher.join();
    return kOk;
  } catch (const std::exception& e) {
    io.err << "error: " << e.what() << '\n';
    return kError;
  }
}

inline int cmd_train_bpe(const fs::path& corpus, std::size_t vocab_size, const fs::path& out, Streams io = {}) {
  try {
    const Vocab v = train_bpe(read_corpus(corpus), vocab_size);
    write_atomically(out, [&](std::ostream& os) { os << v.to_json().dump() << '\n'; });
    io.out << "wrote " << v.size() << " tokens to " << out.string() << '\n';
    return kOk;
  } catch (const std::exception& e) {
    io.err << "error: " << e.what() << '\n';
    return kError;
  }
}

}  // namespace anpd::app
