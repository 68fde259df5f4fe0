#pragma once

// Hit ratio, simulated and wall-clock speed-up, and grid sweeps over (N, K).

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "anpd/decoder.hpp"
#include "anpd/model_oracle.hpp"
#include "anpd/oracle_spec.hpp"
#include "anpd/types.hpp"

namespace anpd {

/// Raised when accelerated decoding disagrees with the baseline. Always a bug.
class LosslessnessError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct RunMetrics {
  double alpha = 0.0;  // accepted / proposed draft tokens; 0 when nothing was proposed
  double mean_committed_per_step = 1.0;
  double speedup_sim = 1.0;
  std::optional<double> speedup_wallclock;
  double theoretical_bound = 1.0;  // alpha * K + 1
  std::size_t steps = 0;
  std::size_t output_len = 0;
  std::size_t proposed_draft_tokens = 0;
  std::size_t accepted_draft_tokens = 0;
};

inline double theoretical_bound(double alpha, int k_draft) { return alpha * double(k_draft) + 1.0; }

/// Cost-model time of a decode: prefill plus one verify charge per model call.
inline double simulated_time(const DecodeResult& r, const CostModel& cost) {
  double t = r.prompt_len > 0 ? simulate_cost(cost, CallKind::prefill, r.prompt_len) : 0.0;
  for (const auto& s : r.steps) {
    if (s.verify_batch_len > 0) t += simulate_cost(cost, CallKind::verify, s.verify_batch_len);
  }
  return t;
}

inline RunMetrics compute_metrics(const DecodeResult& anpd, const DecodeResult& baseline, const CostModel& cost) {
  if (anpd.output != baseline.output) {
    const auto mismatch = std::ranges::mismatch(anpd.output, baseline.output);
    throw LosslessnessError("accelerated output diverges from baseline at position " +
                            std::to_string(mismatch.in1 - anpd.output.begin()) + " (lengths " +
                            std::to_string(anpd.output.size()) + " vs " + std::to_string(baseline.output.size()) + ")");
  }
  RunMetrics m;
  m.steps = anpd.steps.size();
  m.output_len = anpd.output.size();
  m.proposed_draft_tokens = anpd.totals.proposed_draft_tokens;
  m.accepted_draft_tokens = anpd.totals.accepted_draft_tokens;
  m.alpha = m.proposed_draft_tokens == 0 ? 0.0 : double(m.accepted_draft_tokens) / double(m.proposed_draft_tokens);
  m.mean_committed_per_step = m.steps == 0 ? 1.0 : double(m.output_len) / double(m.steps);
  const double t_base = simulated_time(baseline, cost);
  const double t_anpd = simulated_time(anpd, cost);
  m.speedup_sim = t_anpd > 0.0 ? t_base / t_anpd : 1.0;
  m.theoretical_bound = theoretical_bound(m.alpha, anpd.k_draft);
  return m;
}

inline nlohmann::json to_json(const RunMetrics& m) {
  nlohmann::json j{{"alpha", m.alpha},
                   {"mean_committed_per_step", m.mean_committed_per_step},
                   {"speedup_sim", m.speedup_sim},
                   {"theoretical_bound", m.theoretical_bound},
                   {"steps", m.steps},
                   {"output_len", m.output_len},
                   {"proposed_draft_tokens", m.proposed_draft_tokens},
                   {"accepted_draft_tokens", m.accepted_draft_tokens}};
  j["speedup_wallclock"] = m.speedup_wallclock ? nlohmann::json(*m.speedup_wallclock) : nlohmann::json(nullptr);
  return j;
}

/// One prompt plus the oracle that continues it.
struct Workload {
  TokenSequence prompt;
  OracleSpec oracle;
};

struct SweepConfig {
  std::vector<int> n_grid;
  std::vector<int> k_grid;
  DecodeOptions options;  // n_max / k_draft are overridden per cell
  CostModel cost;
  std::size_t workers = 0;  // 0: hardware concurrency
};

struct SweepRow {
  int n = 0;
  int k = 0;
  // Per-prompt metrics averaged arithmetically; steps, output_len and the
  // draft totals are summed.
  RunMetrics metrics;
  std::optional<std::string> error;
};

using SweepTable = std::vector<SweepRow>;

namespace detail {

template <typename Fn>
void parallel_for(std::size_t count, std::size_t workers, Fn&& fn) {
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

inline RunMetrics average(const std::vector<RunMetrics>& runs) {
  RunMetrics avg;
  if (runs.empty()) return avg;
  const double n = double(runs.size());
  avg.alpha = avg.mean_committed_per_step = avg.speedup_sim = avg.theoretical_bound = 0.0;
  for (const auto& r : runs) {
    avg.alpha += r.alpha / n;
    avg.mean_committed_per_step += r.mean_committed_per_step / n;
    avg.speedup_sim += r.speedup_sim / n;
    avg.theoretical_bound += r.theoretical_bound / n;
    avg.steps += r.steps;
    avg.output_len += r.output_len;
    avg.proposed_draft_tokens += r.proposed_draft_tokens;
    avg.accepted_draft_tokens += r.accepted_draft_tokens;
  }
  return avg;
}

}  // namespace detail

/// Runs every (n, k) cell on every workload. Rows come back in grid order
/// (n outer, k inner, both as given) whatever order cells finish in. A
/// failing cell records its error and leaves the rest of the sweep running.
inline SweepTable sweep(const std::vector<Workload>& workloads, const SweepConfig& config) {
  if (config.n_grid.empty() || config.k_grid.empty()) throw std::invalid_argument("sweep grids must be non-empty");
  if (workloads.empty()) throw std::invalid_argument("sweep needs at least one workload");
  for (int n : config.n_grid) {
    if (n < 2) throw std::invalid_argument("n grid values must be >= 2, got " + std::to_string(n));
  }
  for (int k : config.k_grid) {
    if (k < 1) throw std::invalid_argument("k grid values must be >= 1, got " + std::to_string(k));
  }

  // The baseline does not depend on (n, k).
  std::vector<std::optional<DecodeResult>> baselines(workloads.size());
  std::vector<std::string> baseline_errors(workloads.size());
  detail::parallel_for(workloads.size(), config.workers, [&](std::size_t i) {
    try {
      auto oracle = make_oracle(workloads[i].oracle, workloads[i].prompt);
      baselines[i] = baseline_decode(*oracle, workloads[i].prompt, config.options, config.cost);
    } catch (const std::exception& e) {
      baseline_errors[i] = e.what();
    }
  });

  SweepTable table;
  for (int n : config.n_grid) {
    for (int k : config.k_grid) table.push_back({n, k, {}, std::nullopt});
  }
  detail::parallel_for(table.size(), config.workers, [&](std::size_t cell) {
    SweepRow& row = table[cell];
    DecodeOptions options = config.options;
    options.n_max = row.n;
    options.k_draft = row.k;
    std::vector<RunMetrics> runs;
    try {
      for (std::size_t i = 0; i < workloads.size(); ++i) {
        if (!baselines[i]) throw std::runtime_error("baseline for workload " + std::to_string(i) + " failed: " + baseline_errors[i]);
        auto oracle = make_oracle(workloads[i].oracle, workloads[i].prompt);
        const auto result = anpd_decode(*oracle, workloads[i].prompt, options, config.cost);
        runs.push_back(compute_metrics(result, *baselines[i], config.cost));
      }
      row.metrics = detail::average(runs);
    } catch (const std::exception& e) {
      row.error = e.what();
    }
  });
  return table;
}

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline constexpr std::string_view kSweepCsvHeader = "n,k,alpha,mean_committed,speedup_sim,bound,steps,output_len";

/// Failed cells are written with nan metrics; their errors go to the sidecar.
inline void write_sweep_csv(std::ostream& out, const SweepTable& table) {
  out << kSweepCsvHeader << '\n';
  for (const auto& r : table) {
    out << r.n << ',' << r.k << ',';
    if (r.error) {
      out << "nan,nan,nan,nan,nan,nan\n";
      continue;
    }
    const auto& m = r.metrics;
    out << format_double(m.alpha) << ',' << format_double(m.mean_committed_per_step) << ','
        << format_double(m.speedup_sim) << ',' << format_double(m.theoretical_bound) << ',' << m.steps << ','
        << m.output_len << '\n';
  }
}

struct WallclockConfig {
  Workload workload;
  DecodeOptions options;
  CostModel cost;
  int warmup = 3;
  int repetitions = 5;
  // When set, every model call sleeps for its simulated cost times this.
  std::optional<std::chrono::duration<double>> inject_time_unit;
};

struct WallclockResult {
  RunMetrics metrics;  // speedup_wallclock filled in
  double baseline_median_s = 0.0;
  double anpd_median_s = 0.0;
  double baseline_spread = 0.0;  // (max - min) / median over repetitions
  double anpd_spread = 0.0;
  bool timer_warning = false;  // medians too close to the clock resolution to trust
};

/// Wraps an oracle and sleeps for each call's simulated latency.
class LatencyInjectingOracle final : public ModelOracle {
 public:
  LatencyInjectingOracle(std::unique_ptr<ModelOracle> inner, CostModel cost, std::chrono::duration<double> unit)
      : inner_(std::move(inner)), cost_(cost), unit_(unit) {}

  TokenSequence extend(TokenSpan tokens) override {
    const auto kind = inner_->consumed_len() == 0 ? CallKind::prefill : CallKind::verify;
    const double units = simulate_cost(cost_, kind, tokens.size());
    if (units > 0) std::this_thread::sleep_for(unit_ * units);
    return inner_->extend(tokens);
  }
  void reset() override { inner_->reset(); }
  std::size_t consumed_len() const override { return inner_->consumed_len(); }
  OracleInfo info() const override { return inner_->info(); }
  bool truncate_cache(std::size_t len) override { return inner_->truncate_cache(len); }

 private:
  std::unique_ptr<ModelOracle> inner_;
  CostModel cost_;
  std::chrono::duration<double> unit_;
};

namespace detail {

inline double median(std::vector<double> v) {
  std::ranges::sort(v);
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double relative_spread(const std::vector<double>& v) {
  const auto [lo, hi] = std::ranges::minmax(v);
  const double med = median(v);
  return med > 0 ? (hi - lo) / med : 0.0;
}

inline double clock_resolution_s() {
  using clock = std::chrono::steady_clock;
  double best = 1.0;
  for (int i = 0; i < 16; ++i) {
    const auto a = clock::now();
    auto b = clock::now();
    while (b == a) b = clock::now();
    best = std::min(best, std::chrono::duration<double>(b - a).count());
  }
  return best;
}

}  // namespace detail

/// Median wall time of each decoder over `repetitions` runs after `warmup`
/// discarded runs, each on a fresh oracle.
inline WallclockResult wallclock_bench(const WallclockConfig& config) {
  if (config.repetitions < 5) throw std::invalid_argument("wallclock bench needs at least 5 repetitions");
  if (config.warmup < 0) throw std::invalid_argument("warmup must be >= 0");
  using clock = std::chrono::steady_clock;
  const auto& w = config.workload;

  auto fresh_oracle = [&]() -> std::unique_ptr<ModelOracle> {
    auto inner = make_oracle(w.oracle, w.prompt);
    if (!config.inject_time_unit) return inner;
    return std::make_unique<LatencyInjectingOracle>(std::move(inner), config.cost, *config.inject_time_unit);
  };

  std::optional<DecodeResult> base, fast;
  std::vector<double> base_times, fast_times;
  for (int rep = 0; rep < config.warmup + config.repetitions; ++rep) {
    auto o1 = fresh_oracle();
    auto t0 = clock::now();
    base = baseline_decode(*o1, w.prompt, config.options, config.cost);
    auto t1 = clock::now();
    auto o2 = fresh_oracle();
    auto t2 = clock::now();
    fast = anpd_decode(*o2, w.prompt, config.options, config.cost);
    auto t3 = clock::now();
    if (rep >= config.warmup) {
      base_times.push_back(std::chrono::duration<double>(t1 - t0).count());
      fast_times.push_back(std::chrono::duration<double>(t3 - t2).count());
    }
  }

  WallclockResult out;
  out.metrics = compute_metrics(*fast, *base, config.cost);
  out.baseline_median_s = detail::median(base_times);
  out.anpd_median_s = detail::median(fast_times);
  out.baseline_spread = detail::relative_spread(base_times);
  out.anpd_spread = detail::relative_spread(fast_times);
  const double resolution = detail::clock_resolution_s();
  out.timer_warning = std::min(out.baseline_median_s, out.anpd_median_s) < 1000.0 * resolution;
  if (out.anpd_median_s > 0) out.metrics.speedup_wallclock = out.baseline_median_s / out.anpd_median_s;
  return out;
}

}  // namespace anpd
