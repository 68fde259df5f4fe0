#pragma once

// Greedy autoregressive decoding and its draft-then-verify counterpart. Both
// loops share one step shape: commit the carried token, (draft,) make one
// model call, pick the next carried token. The drafting loop emits exactly
// the baseline's tokens while usually committing several per model call.

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "anpd/model_oracle.hpp"
#include "anpd/ngram_store.hpp"
#include "anpd/types.hpp"

namespace anpd {

struct DecodeOptions {
  int n_max = 5;
  int k_draft = 7;
  std::size_t max_new_tokens = 256;
  bool runtime_update = true;
  bool stop_at_eos = true;
  QueryMode query_mode = QueryMode::multilevel;
  // Overrides the oracle's eos when set.
  std::optional<TokenId> eos;

  void validate() const {
    if (n_max < 2) throw std::invalid_argument("n must be >= 2, got " + std::to_string(n_max));
    if (k_draft < 1) throw std::invalid_argument("k must be >= 1, got " + std::to_string(k_draft));
  }
};

struct StepRecord {
  std::size_t step_index = 0;
  TokenSequence drafted;
  // Matched order per drafted token; a trailing 0 marks a draft cut short by
  // a query miss.
  std::vector<int> draft_levels;
  std::size_t accepted_count = 0;
  TokenSequence committed;
  std::size_t verify_batch_len = 0;  // 0 when the step ended on eos without a model call
  double sim_time = 0.0;
};

struct DecodeTotals {
  std::size_t proposed_draft_tokens = 0;
  std::size_t accepted_draft_tokens = 0;
  std::size_t llm_calls = 0;
  // Rollbacks an oracle without cache truncation had to do by reset + replay.
  std::size_t cache_replays = 0;
};

struct DecodeResult {
  TokenSequence output;
  std::vector<StepRecord> steps;
  std::size_t prompt_len = 0;
  int k_draft = 0;  // 0 for the baseline
  double prefill_sim_time = 0.0;
  DecodeTotals totals;

  double sim_time() const {
    return std::accumulate(steps.begin(), steps.end(), prefill_sim_time,
                           [](double acc, const StepRecord& s) { return acc + s.sim_time; });
  }
};

namespace detail {

template <typename Fn>
auto in_context(const std::string& where, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const OracleError& e) {
    throw OracleError(e.kind(), where + ": " + e.what());
  }
}

inline std::string step_label(std::size_t index) { return "step " + std::to_string(index); }

inline void check_prompt(TokenSpan prompt) {
  if (prompt.empty()) throw std::invalid_argument("prompt must not be empty");
}

inline TokenSequence prefill(ModelOracle& oracle, TokenSpan prompt, const CostModel& cost, DecodeResult& result) {
  result.prompt_len = prompt.size();
  return in_context("prefill", [&] {
    if (oracle.consumed_len() != 0) oracle.reset();
    auto preds = oracle.extend(prompt);
    if (preds.size() != prompt.size()) {
      throw OracleError(OracleError::Kind::protocol, "prefill returned " + std::to_string(preds.size()) +
                                                         " predictions for " + std::to_string(prompt.size()) + " tokens");
    }
    result.prefill_sim_time = simulate_cost(cost, CallKind::prefill, prompt.size());
    ++result.totals.llm_calls;
    return preds;
  });
}

inline std::optional<TokenId> effective_eos(const DecodeOptions& options, const ModelOracle& oracle) {
  if (!options.stop_at_eos) return std::nullopt;
  return options.eos ? options.eos : oracle.info().eos;
}

}  // namespace detail

/// Plain greedy decoding: prefill, then one single-token model call per
/// emitted token.
inline DecodeResult baseline_decode(ModelOracle& oracle, TokenSpan prompt, const DecodeOptions& options,
                                    const CostModel& cost = {}) {
  detail::check_prompt(prompt);
  DecodeResult result;
  TokenId carried = detail::prefill(oracle, prompt, cost, result).back();
  const auto eos = detail::effective_eos(options, oracle);

  while (result.output.size() < options.max_new_tokens) {
    StepRecord rec;
    rec.step_index = result.steps.size();
    rec.committed = {carried};
    result.output.push_back(carried);
    if (eos && carried == *eos) {
      result.steps.push_back(std::move(rec));
      break;
    }
    const TokenId token = carried;
    carried = detail::in_context(detail::step_label(rec.step_index), [&] {
      auto preds = oracle.extend(TokenSpan(&token, 1));
      if (preds.size() != 1) throw OracleError(OracleError::Kind::protocol, "expected one prediction");
      return preds.front();
    });
    rec.verify_batch_len = 1;
    rec.sim_time = simulate_cost(cost, CallKind::verify, 1);
    ++result.totals.llm_calls;
    result.steps.push_back(std::move(rec));
  }
  return result;
}

struct Draft {
  TokenSequence tokens;
  std::vector<int> levels;  // one per token
};

/// Chains up to k_draft n-gram queries, each seeing the previously drafted
/// tokens as context. Stops at the first miss. Does not touch the counts.
inline Draft build_draft(const MultiLevelNgram& store, TokenSpan committed_tail, int k_draft,
                         QueryMode mode = QueryMode::multilevel) {
  if (k_draft < 1) throw std::invalid_argument("k_draft must be >= 1");
  Draft draft;
  const auto context_len = std::size_t(store.n_max() - 1);
  const TokenSpan recent = tail(committed_tail, context_len);
  TokenSequence working(recent.begin(), recent.end());
  for (int i = 0; i < k_draft; ++i) {
    const auto hit = store.query_multilevel(working, mode);
    if (!hit) break;
    draft.tokens.push_back(hit->token);
    draft.levels.push_back(hit->level_n);
    working.push_back(hit->token);
  }
  return draft;
}

struct VerifyOutcome {
  std::size_t accepted_count = 0;
  TokenId next_carried = 0;
  TokenSequence predictions;  // 1 + |drafted| entries
};

/// One model call on [carried] ++ drafted. Accepts the longest draft prefix
/// that matches the model's own predictions; the prediction right after that
/// prefix is the next carried token (a correction or, if everything matched,
/// a bonus token).
inline VerifyOutcome verify_step(ModelOracle& oracle, TokenId carried, TokenSpan drafted) {
  TokenSequence batch;
  batch.reserve(drafted.size() + 1);
  batch.push_back(carried);
  batch.insert(batch.end(), drafted.begin(), drafted.end());
  VerifyOutcome out;
  out.predictions = oracle.extend(batch);
  if (out.predictions.size() != batch.size()) {
    throw OracleError(OracleError::Kind::protocol, "verify of " + std::to_string(batch.size()) + " tokens returned " +
                                                       std::to_string(out.predictions.size()) + " predictions");
  }
  while (out.accepted_count < drafted.size() && drafted[out.accepted_count] == out.predictions[out.accepted_count]) {
    ++out.accepted_count;
  }
  out.next_carried = out.predictions[out.accepted_count];
  return out;
}

/// Draft-and-verify decoding with an n-gram memory built from the prompt and
/// updated with every committed token. Output equals baseline_decode's.
/// When `final_store` is given it receives the n-gram memory as it ended.
inline DecodeResult anpd_decode(ModelOracle& oracle, TokenSpan prompt, const DecodeOptions& options,
                                const CostModel& cost = {},
                                std::optional<MultiLevelNgram>* final_store = nullptr) {
  options.validate();
  detail::check_prompt(prompt);
  DecodeResult result;
  result.k_draft = options.k_draft;

  auto store = MultiLevelNgram::initialize(prompt, options.n_max, StoreOptions{options.runtime_update});
  TokenId carried = detail::prefill(oracle, prompt, cost, result).back();
  const auto eos = detail::effective_eos(options, oracle);
  const std::size_t limit = options.max_new_tokens;
  bool finished = false;

  while (!finished && result.output.size() < limit) {
    StepRecord rec;
    rec.step_index = result.steps.size();
    const auto label = detail::step_label(rec.step_index);

    result.output.push_back(carried);
    store.update(carried);
    rec.committed = {carried};
    if (eos && carried == *eos) {
      result.steps.push_back(std::move(rec));
      break;
    }

    Draft draft = build_draft(store, store.committed(), options.k_draft, options.query_mode);
    rec.draft_levels = draft.levels;
    if (draft.tokens.size() < std::size_t(options.k_draft)) rec.draft_levels.push_back(0);

    const auto outcome = detail::in_context(label, [&] { return verify_step(oracle, carried, draft.tokens); });
    ++result.totals.llm_calls;
    rec.verify_batch_len = draft.tokens.size() + 1;
    rec.sim_time = simulate_cost(cost, CallKind::verify, rec.verify_batch_len);

    // Accepted drafts are committed up to the token budget and never past eos.
    for (std::size_t j = 0; j < outcome.accepted_count && result.output.size() < limit; ++j) {
      const TokenId t = draft.tokens[j];
      result.output.push_back(t);
      store.update(t);
      rec.committed.push_back(t);
      if (eos && t == *eos) {
        finished = true;
        break;
      }
    }
    rec.accepted_count = rec.committed.size() - 1;
    carried = outcome.next_carried;

    // Drop the rejected suffix from the model's cache.
    const std::size_t valid = prompt.size() + result.output.size();
    if (!finished && result.output.size() < limit && oracle.consumed_len() > valid) {
      detail::in_context(label, [&] {
        if (!oracle.truncate_cache(valid)) {
          oracle.reset();
          TokenSequence replay(prompt.begin(), prompt.end());
          replay.insert(replay.end(), result.output.begin(), result.output.end());
          oracle.extend(replay);
          ++result.totals.cache_replays;
        }
      });
    }

    result.totals.proposed_draft_tokens += draft.tokens.size();
    result.totals.accepted_draft_tokens += rec.accepted_count;
    rec.drafted = std::move(draft.tokens);
    result.steps.push_back(std::move(rec));
  }

  if (final_store) final_store->emplace(std::move(store));
  return result;
}

inline nlohmann::json step_to_json(const StepRecord& s) {
  return {{"step", s.step_index},       {"drafted", s.drafted},     {"levels", s.draft_levels},
          {"accepted", s.accepted_count}, {"committed", s.committed}, {"batch", s.verify_batch_len},
          {"sim_time", s.sim_time}};
}

/// JSONL trace: `header` on the first line, then one object per step.
inline void write_trace(std::ostream& out, const nlohmann::json& header, const DecodeResult& result) {
  out << header.dump() << '\n';
  for (const auto& s : result.steps) out << step_to_json(s).dump() << '\n';
}

inline nlohmann::json trace_header(const DecodeResult& result, int n_max, const nlohmann::json& oracle,
                                   const CostModel& cost) {
  return {{"prompt_len", result.prompt_len}, {"n", n_max}, {"k", result.k_draft}, {"oracle", oracle},
          {"cost_model", cost.to_json()}};
}

}  // namespace anpd
