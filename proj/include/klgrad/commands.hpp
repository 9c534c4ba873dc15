#pragma once

// Experiment drivers behind the command-line subcommands. Each driver takes a
// validated configuration, writes its rows through a RunStore and reports an
// exit status.

#include <cstdint>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "klgrad/ar_model.hpp"
#include "klgrad/config_io.hpp"
#include "klgrad/error.hpp"
#include "klgrad/estimators.hpp"
#include "klgrad/gradient_lab.hpp"
#include "klgrad/run_store.hpp"
#include "klgrad/trainer.hpp"

namespace klgrad {

enum ExitCode : int {
  kExitOk = 0,
  kExitInternal = 1,
  kExitValidation = 2,
  kExitUnsupported = 3,
  kExitCollapse = 4,
  kExitIo = 5,
};

inline int exit_code_for(ErrorCategory c) noexcept {
  switch (c) {
    case ErrorCategory::kValidation: return kExitValidation;
    case ErrorCategory::kUnsupported: return kExitUnsupported;
    case ErrorCategory::kNumerical: return kExitCollapse;
    case ErrorCategory::kIo: return kExitIo;
  }
  return kExitInternal;
}

// ---- row conversion

inline ResultRow to_row(const BiasVarianceReport& r) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  return {"bias_variance",
          {std::string(to_string(r.kind)), std::string(to_string(r.placement)), static_cast<long long>(r.T),
           static_cast<long long>(r.trials), static_cast<long long>(r.n_per_trial), r.mean.a, r.mean.b,
           r.true_grad.a, r.true_grad.b, r.bias_a, r.bias_b, std::abs(r.bias_a), std::abs(r.bias_b), r.bias_norm(),
           r.var_a, r.var_b, r.var_trace(), r.se_a(), r.se_b(), r.config_exact ? r.config_expectation.a : nan,
           r.config_exact ? r.config_expectation.b : nan, static_cast<long long>(r.config_exact ? 0 : 1)}};
}

inline ResultRow to_row(const TrainMetrics& m) {
  return {"train_metric",
          {static_cast<long long>(m.step), m.mean_reward, m.expected_reward, m.exact_reverse_kl, m.exact_forward_kl,
           m.entropy, m.grad_norm, static_cast<long long>(m.collapse_flag ? 1 : 0)}};
}

inline ResultRow to_row(EstimatorKind kind, int T, const MCEstimate& e, double exact) {
  return {"mc_estimate", {std::string(to_string(kind)), static_cast<long long>(T), e.n, e.mean, e.std_err,
                          e.variance, exact}};
}

// ---- exact

struct ExactSpec {
  ArParams policy{0.3, 0.1};
  ArParams reference{0.0, 0.0};
  int T = 8;
  bool dp_grad = false;  // report the DP gradient beyond the enumeration limit
};

inline ExactSpec exact_spec_from_json(const json& j) {
  constexpr std::string_view ctx = "exact config";
  reject_unknown_keys(j, {"policy", "reference", "T", "dp_grad"}, ctx);
  ExactSpec s;
  if (j.contains("policy")) s.policy = ar_params_from_json(j.at("policy"), "policy");
  if (j.contains("reference")) s.reference = ar_params_from_json(j.at("reference"), "reference");
  read_key(j, "T", s.T, ctx);
  read_key(j, "dp_grad", s.dp_grad, ctx);
  return s;
}

inline int run_exact(const ExactSpec& s, std::ostream& out) {
  s.policy.validate();
  s.reference.validate();
  if (s.T < 1) throw ConfigError("T must be >= 1");
  out << "policy    a=" << s.policy.a << " b=" << s.policy.b << "\n"
      << "reference a=" << s.reference.a << " b=" << s.reference.b << "\n"
      << "T=" << s.T << "\n";
  out << "exact_kl (dp)          " << format_double(exact_kl(s.policy, s.reference, s.T)) << "\n";
  if (s.T <= kMaxEnumLength) {
    out << "exact_kl (enumeration) " << format_double(enumerated_kl(s.policy, s.reference, s.T)) << "\n";
    const Grad2 g = exact_kl_grad(s.policy, s.reference, s.T);
    out << "exact_kl_grad          " << format_double(g.a) << " " << format_double(g.b) << "\n";
    return kExitOk;
  }
  if (s.dp_grad) {
    const Grad2 g = exact_kl_grad_dp(s.policy, s.reference, s.T);
    out << "exact_kl_grad (dp)     " << format_double(g.a) << " " << format_double(g.b) << "\n";
    return kExitOk;
  }
  out << "exact_kl_grad          unavailable: T=" << s.T << " exceeds enumeration limit " << kMaxEnumLength
      << " (pass --dp-grad for the DP gradient)\n";
  return kExitUnsupported;
}

// ---- estimate

struct EstimateResult {
  RunRecord record;
  std::vector<MCEstimate> estimates;  // one per kind
  double exact = 0.0;
};

/// Every kind is evaluated on the same sample stream.
inline EstimateResult run_estimate(const EstimateSpec& s, RunStore& store) {
  s.validate();
  EstimateResult res;
  res.record = store.record_run(to_json(s));
  res.exact = exact_kl(s.policy, s.reference, s.T);
  std::vector<ResultRow> rows;
  for (auto kind : s.kinds) {
    Rng rng(s.seed, "estimate");
    res.estimates.push_back(mc_kl(kind, s.policy, s.reference, s.T, s.n, rng));
    rows.push_back(to_row(kind, s.T, res.estimates.back(), res.exact));
  }
  if (!res.record.complete) {
    store.append_rows(res.record, rows);
    store.mark_complete(res.record);
  }
  return res;
}

// ---- grad-bias

struct GradBiasResult {
  RunRecord record;
  std::vector<BiasVarianceReport> reports;
};

inline GradBiasResult run_grad_bias(const SweepSpec& s, RunStore& store, int jobs) {
  s.validate();
  GradBiasResult res;
  res.record = store.record_run(to_json(s));
  if (res.record.complete) return res;
  res.reports = bias_variance_sweep(s, jobs);
  std::vector<ResultRow> rows;
  for (const auto& r : res.reports) rows.push_back(to_row(r));
  store.append_rows(res.record, rows);
  store.mark_complete(res.record);
  return res;
}

// ---- train

struct TrainRunResult {
  RunRecord record;
  TrainResult result;
  bool skipped = false;  // already complete in the store
};

inline TrainRunResult run_train(const TrainConfig& c, RunStore& store) {
  c.validate();
  TrainRunResult res;
  res.record = store.record_run(to_json(c));
  if (res.record.complete) {
    res.skipped = true;
    return res;
  }
  res.result = train_run(c);
  std::vector<ResultRow> rows;
  rows.reserve(res.result.metrics.size());
  for (const auto& m : res.result.metrics) rows.push_back(to_row(m));
  store.append_rows(res.record, rows);
  store.mark_complete(res.record);
  return res;
}

// ---- sweep

/// Cartesian product of grid axes applied to a base train config.
/// Axes: "kl" (list of {kind, placement}), "beta", "seed", "async_lag".
struct SweepGrid {
  TrainConfig base;
  std::vector<KLConfig> kl;  // beta taken from the beta axis when present
  std::vector<double> beta;
  std::vector<std::uint64_t> seed;
  std::vector<int> async_lag;
  bool has_kl = false, has_beta = false, has_seed = false, has_lag = false;

  std::vector<TrainConfig> expand() const {
    if (!(has_kl || has_beta || has_seed || has_lag)) return {};
    const std::vector<KLConfig> kls = has_kl ? kl : std::vector<KLConfig>{base.kl};
    const std::vector<double> betas = has_beta ? beta : std::vector<double>{};
    const std::vector<std::uint64_t> seeds = has_seed ? seed : std::vector<std::uint64_t>{base.seed};
    const std::vector<int> lags = has_lag ? async_lag : std::vector<int>{base.async_lag};
    std::vector<TrainConfig> out;
    for (const auto& k : kls) {
      const std::vector<double> bs = has_beta ? betas : std::vector<double>{k.beta};
      for (double b : bs) {
        for (auto sd : seeds) {
          for (int lag : lags) {
            TrainConfig c = base;
            c.kl = k;
            c.kl.beta = b;
            c.seed = sd;
            c.async_lag = lag;
            c.validate();
            out.push_back(std::move(c));
          }
        }
      }
    }
    return out;
  }
};

inline SweepGrid sweep_grid_from_json(const json& j) {
  reject_unknown_keys(j, {"base", "grid"}, "sweep file");
  SweepGrid g;
  if (j.contains("base")) g.base = train_config_from_json(j.at("base"));
  if (!j.contains("grid")) return g;
  const json& grid = j.at("grid");
  reject_unknown_keys(grid, {"kl", "beta", "seed", "async_lag"}, "sweep grid");
  if (grid.contains("kl")) {
    g.has_kl = true;
    if (!grid.at("kl").is_array()) throw ConfigError("grid.kl must be an array");
    for (const auto& k : grid.at("kl")) g.kl.push_back(kl_from_json(k, g.base.kl));
  }
  if (grid.contains("beta")) {
    g.has_beta = true;
    read_key(grid, "beta", g.beta, "sweep grid");
    for (double b : g.beta) {
      if (!(b >= 0.0)) throw ConfigError("grid.beta values must be >= 0");
    }
  }
  if (grid.contains("seed")) {
    g.has_seed = true;
    read_key(grid, "seed", g.seed, "sweep grid");
  }
  if (grid.contains("async_lag")) {
    g.has_lag = true;
    read_key(grid, "async_lag", g.async_lag, "sweep grid");
  }
  return g;
}

struct SweepSummary {
  std::vector<std::string> run_ids;  // grid order
  int executed = 0;
  int skipped = 0;
  int collapsed = 0;
};

inline SweepSummary run_sweep(const SweepGrid& grid, RunStore& store, int jobs) {
  const auto configs = grid.expand();
  SweepSummary summary;
  summary.run_ids.resize(configs.size());
  std::vector<int> status(configs.size(), 0);  // 1 executed, 2 skipped, 3 collapsed
  parallel_for(static_cast<int>(configs.size()), jobs, [&](int i) {
    auto r = run_train(configs[i], store);
    summary.run_ids[i] = r.record.run_id;
    status[i] = r.skipped ? 2 : (r.result.collapsed ? 3 : 1);
  });
  for (int s : status) {
    if (s == 2) ++summary.skipped;
    else ++summary.executed;
    if (s == 3) ++summary.collapsed;
  }
  return summary;
}

}  // namespace klgrad
