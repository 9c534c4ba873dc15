// klgrad: exact and Monte Carlo audits of KL estimators and their placement
// in policy-gradient training, on autoregressive Bernoulli sequence models.
//
//   klgrad exact      --policy-a 0.3 --policy-b 0.1 -T 10
//   klgrad estimate   --kind K1 --kind K3 -T 16 -n 200000 --seed 7
//   klgrad grad-bias  --placements Reward Loss Both --jobs 8
//   klgrad train      --config configs/train_k1_reward.json --beta 0.1
//   klgrad sweep      --config configs/sweep_beta.json --jobs 4
//
// Common flags: --seed, --out (default $KLGRAD_OUT, else ./klgrad_out),
// --config (JSON, same schema as the run manifest's "config"), --jobs.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "klgrad/commands.hpp"

namespace {

using klgrad::json;

struct Common {
  std::uint64_t seed = 0;
  std::string out;
  std::string config;
  int jobs = 1;
  CLI::Option* seed_opt = nullptr;
};

void add_common(CLI::App* sub, Common& c) {
  c.seed_opt = sub->add_option("--seed", c.seed, "64-bit master seed");
  sub->add_option("--out", c.out, "output directory (default: $KLGRAD_OUT or ./klgrad_out)");
  sub->add_option("--config", c.config, "JSON configuration file; flags override its values");
  sub->add_option("--jobs", c.jobs, "worker threads")->check(CLI::PositiveNumber);
}

std::filesystem::path out_dir(const Common& c) {
  if (!c.out.empty()) return c.out;
  if (const char* env = std::getenv("KLGRAD_OUT"); env != nullptr && *env != '\0') return env;
  return "klgrad_out";
}

json load_config(const Common& c) {
  if (c.config.empty()) return json::object();
  std::ifstream in(c.config);
  if (!in) throw klgrad::IoError("cannot read config file " + c.config);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw klgrad::ConfigError(c.config + ": " + e.what());
  }
}

template <typename T>
void override_if(const CLI::Option* opt, T& field, const T& value) {
  if (opt != nullptr && opt->count() > 0) field = value;
}

// Model flags shared by exact / estimate / grad-bias.
struct ModelFlags {
  double pa = 0, pb = 0, ra = 0, rb = 0;
  CLI::Option *pa_opt, *pb_opt, *ra_opt, *rb_opt;

  void add(CLI::App* sub) {
    pa_opt = sub->add_option("--policy-a", pa, "policy intercept logit a");
    pb_opt = sub->add_option("--policy-b", pb, "policy count coefficient b");
    ra_opt = sub->add_option("--ref-a", ra, "reference intercept logit");
    rb_opt = sub->add_option("--ref-b", rb, "reference count coefficient");
  }
  void apply(klgrad::ArParams& policy, klgrad::ArParams& reference) const {
    override_if(pa_opt, policy.a, pa);
    override_if(pb_opt, policy.b, pb);
    override_if(ra_opt, reference.a, ra);
    override_if(rb_opt, reference.b, rb);
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Exact and Monte Carlo audits of KL estimators in policy-gradient RL"};
  app.require_subcommand(1);

  // exact
  Common exact_c;
  ModelFlags exact_m;
  int exact_T = 0;
  bool exact_dp = false;
  auto* exact = app.add_subcommand("exact", "exact reverse KL and its gradient");
  add_common(exact, exact_c);
  exact_m.add(exact);
  auto* exact_T_opt = exact->add_option("-T,--length", exact_T, "sequence length");
  auto* exact_dp_opt = exact->add_flag("--dp-grad", exact_dp, "report the DP gradient beyond the enumeration limit");

  // estimate
  Common est_c;
  ModelFlags est_m;
  std::vector<std::string> est_kinds;
  int est_T = 0;
  long long est_n = 0;
  auto* estimate = app.add_subcommand("estimate", "Monte Carlo K1/K3 estimates of the reverse KL");
  add_common(estimate, est_c);
  est_m.add(estimate);
  auto* est_kinds_opt = estimate->add_option("--kind", est_kinds, "estimator (K1, K3); repeatable");
  auto* est_T_opt = estimate->add_option("-T,--length", est_T, "sequence length");
  auto* est_n_opt = estimate->add_option("-n,--samples", est_n, "number of sampled sequences");

  // grad-bias
  Common gb_c;
  ModelFlags gb_m;
  std::vector<std::string> gb_kinds, gb_placements;
  std::vector<int> gb_lengths;
  int gb_trials = 0, gb_n = 0;
  auto* grad_bias = app.add_subcommand("grad-bias", "bias/variance of KL gradient configurations");
  add_common(grad_bias, gb_c);
  gb_m.add(grad_bias);
  auto* gb_kinds_opt = grad_bias->add_option("--kinds", gb_kinds, "estimators to audit");
  auto* gb_pl_opt = grad_bias->add_option("--placements", gb_placements, "placements: Reward Loss Both");
  auto* gb_len_opt = grad_bias->add_option("--lengths", gb_lengths, "sequence lengths");
  auto* gb_trials_opt = grad_bias->add_option("--trials", gb_trials, "independent trials per configuration");
  auto* gb_n_opt = grad_bias->add_option("--n-per-trial", gb_n, "sequences per trial");

  // train
  Common tr_c;
  double tr_beta = 0, tr_lr = 0, tr_eps = 0;
  std::string tr_kind, tr_placement;
  int tr_steps = 0, tr_lag = 0, tr_m = 0, tr_G = 0, tr_prompts = 0;
  auto* train = app.add_subcommand("train", "toy verifiable-reward policy-gradient run");
  add_common(train, tr_c);
  auto* tr_beta_opt = train->add_option("--beta", tr_beta, "KL coefficient");
  auto* tr_kind_opt = train->add_option("--kind", tr_kind, "KL estimator (K1, K3)");
  auto* tr_pl_opt = train->add_option("--placement", tr_placement, "KL placement (Reward, Loss, Both)");
  auto* tr_steps_opt = train->add_option("--steps", tr_steps, "training steps");
  auto* tr_lr_opt = train->add_option("--lr", tr_lr, "learning rate");
  auto* tr_eps_opt = train->add_option("--clip-eps", tr_eps, "surrogate clip range");
  auto* tr_lag_opt = train->add_option("--async-lag", tr_lag, "sampling staleness in steps");
  auto* tr_m_opt = train->add_option("--minibatches", tr_m, "policy updates per sampled batch");
  auto* tr_G_opt = train->add_option("--group-size", tr_G, "sequences per group");
  auto* tr_pr_opt = train->add_option("--prompts", tr_prompts, "groups per batch");

  // sweep
  Common sw_c;
  auto* sweep = app.add_subcommand("sweep", "grid of training runs (resumable)");
  add_common(sweep, sw_c);
  sweep->add_option("--grid", sw_c.config, "grid file (alias of --config)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? klgrad::kExitOk : klgrad::kExitValidation;
  }

  try {
    if (exact->parsed()) {
      auto spec = klgrad::exact_spec_from_json(load_config(exact_c));
      exact_m.apply(spec.policy, spec.reference);
      override_if(exact_T_opt, spec.T, exact_T);
      override_if(exact_dp_opt, spec.dp_grad, exact_dp);
      return klgrad::run_exact(spec, std::cout);
    }

    if (estimate->parsed()) {
      json j = load_config(est_c);
      auto spec = klgrad::estimate_spec_from_json(j);
      est_m.apply(spec.policy, spec.reference);
      if (est_kinds_opt->count() > 0) {
        spec.kinds.clear();
        for (const auto& k : est_kinds) spec.kinds.push_back(klgrad::parse_estimator_kind(k));
      }
      override_if(est_T_opt, spec.T, est_T);
      override_if(est_n_opt, spec.n, est_n);
      override_if(est_c.seed_opt, spec.seed, est_c.seed);
      spec.validate();
      klgrad::RunStore store(out_dir(est_c));
      const auto res = klgrad::run_estimate(spec, store);
      std::cout << "run " << res.record.run_id << "  exact_kl " << klgrad::format_double(res.exact) << "\n";
      for (std::size_t i = 0; i < spec.kinds.size(); ++i) {
        const auto& e = res.estimates[i];
        std::cout << klgrad::to_string(spec.kinds[i]) << "  mean " << klgrad::format_double(e.mean) << "  se "
                  << klgrad::format_double(e.std_err) << "  var " << klgrad::format_double(e.variance) << "\n";
      }
      std::cout << "wrote " << (res.record.dir / "mc_estimate.csv").string() << "\n";
      return klgrad::kExitOk;
    }

    if (grad_bias->parsed()) {
      auto spec = klgrad::sweep_spec_from_json(load_config(gb_c));
      gb_m.apply(spec.policy, spec.reference);
      if (gb_kinds_opt->count() > 0) {
        spec.kinds.clear();
        for (const auto& k : gb_kinds) spec.kinds.push_back(klgrad::parse_estimator_kind(k));
      }
      if (gb_pl_opt->count() > 0) {
        spec.placements.clear();
        for (const auto& p : gb_placements) spec.placements.push_back(klgrad::parse_placement(p));
      }
      override_if(gb_len_opt, spec.lengths, gb_lengths);
      override_if(gb_trials_opt, spec.trials, gb_trials);
      override_if(gb_n_opt, spec.n_per_trial, gb_n);
      override_if(gb_c.seed_opt, spec.seed, gb_c.seed);
      spec.validate();
      klgrad::RunStore store(out_dir(gb_c));
      const auto res = klgrad::run_grad_bias(spec, store, gb_c.jobs);
      if (res.record.complete && res.reports.empty()) {
        std::cout << "run " << res.record.run_id << " already complete; nothing to do\n";
      }
      for (const auto& r : res.reports) {
        std::cout << klgrad::to_string(r.kind) << "/" << klgrad::to_string(r.placement) << "  T=" << r.T
                  << "  |bias| " << klgrad::format_double(r.bias_norm()) << "  var "
                  << klgrad::format_double(r.var_trace()) << "\n";
      }
      std::cout << "wrote " << (res.record.dir / "bias_variance.csv").string() << "\n";
      return klgrad::kExitOk;
    }

    if (train->parsed()) {
      auto cfg = klgrad::train_config_from_json(load_config(tr_c));
      override_if(tr_beta_opt, cfg.kl.beta, tr_beta);
      if (tr_kind_opt->count() > 0) cfg.kl.kind = klgrad::parse_estimator_kind(tr_kind);
      if (tr_pl_opt->count() > 0) cfg.kl.placement = klgrad::parse_placement(tr_placement);
      override_if(tr_steps_opt, cfg.steps, tr_steps);
      override_if(tr_lr_opt, cfg.learning_rate, tr_lr);
      override_if(tr_eps_opt, cfg.clip_eps, tr_eps);
      override_if(tr_lag_opt, cfg.async_lag, tr_lag);
      override_if(tr_m_opt, cfg.minibatches_per_batch, tr_m);
      override_if(tr_G_opt, cfg.group_size, tr_G);
      override_if(tr_pr_opt, cfg.prompts_per_batch, tr_prompts);
      override_if(tr_c.seed_opt, cfg.seed, tr_c.seed);
      cfg.validate();
      klgrad::RunStore store(out_dir(tr_c));
      const auto res = klgrad::run_train(cfg, store);
      std::cout << "run " << res.record.run_id << (res.skipped ? " already complete\n" : "\n");
      if (!res.result.metrics.empty()) {
        const auto& m = res.result.metrics.back();
        std::cout << "final step " << m.step << "  expected_reward " << klgrad::format_double(m.expected_reward)
                  << "  reverse_kl " << klgrad::format_double(m.exact_reverse_kl) << "\n";
      }
      std::cout << "wrote " << (res.record.dir / "train_metric.csv").string() << "\n";
      if (res.result.collapsed) {
        std::cerr << "training collapsed at step " << res.result.collapse_step << "\n";
        return klgrad::kExitCollapse;
      }
      return klgrad::kExitOk;
    }

    if (sweep->parsed()) {
      if (sw_c.config.empty()) throw klgrad::ConfigError("sweep needs --grid <file>");
      auto grid = klgrad::sweep_grid_from_json(load_config(sw_c));
      if (sw_c.seed_opt->count() > 0) grid.base.seed = sw_c.seed;
      klgrad::RunStore store(out_dir(sw_c));
      const auto summary = klgrad::run_sweep(grid, store, sw_c.jobs);
      if (summary.run_ids.empty()) {
        std::cerr << "warning: sweep grid is empty; no runs executed\n";
        return klgrad::kExitOk;
      }
      for (const auto& id : summary.run_ids) std::cout << id << "\n";
      std::cout << summary.executed << " executed, " << summary.skipped << " skipped (already complete), "
                << summary.collapsed << " collapsed\n";
      return summary.collapsed > 0 ? klgrad::kExitCollapse : klgrad::kExitOk;
    }
  } catch (const klgrad::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return klgrad::exit_code_for(e.category());
  } catch (const json::exception& e) {
    std::cerr << "error: configuration: " << e.what() << "\n";
    return klgrad::kExitValidation;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return klgrad::kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return klgrad::kExitInternal;
  }
  return klgrad::kExitInternal;
}
