#pragma once

/** @file
 * Gradients of KL penalties under the three placements, in the (a, b)
 * parameter space of the two-parameter model, and a bias/variance audit
 * against the exact reverse-KL gradient.
 *
 * For one sequence Y ~ pi with score S = grad log pi(Y):
 *
 *   Reward  (estimate enters the reward behind a stop-gradient):  (sum_t KL_t) * S
 *   Loss    (estimate is differentiated directly):                sum_t grad KL_t
 *   Both    sum of the two; unbiased on-policy for either estimator.
 *
 * with grad K1_t = grad log pi(y_t) and the K3 path term taken as
 * -r_t * grad log pi(y_t), which has the same expectation as the
 * autodiff form (1 - r_t) * grad log pi(y_t).
 *
 * All gradients are of the KL itself (beta = 1); sign conventions follow
 * descent on the penalty.
 */

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "klgrad/ar_model.hpp"
#include "klgrad/error.hpp"
#include "klgrad/estimators.hpp"
#include "klgrad/random.hpp"

namespace klgrad {

enum class KLPlacement { Reward, Loss, Both };

inline std::string_view to_string(KLPlacement p) noexcept {
  switch (p) {
    case KLPlacement::Reward: return "Reward";
    case KLPlacement::Loss: return "Loss";
    case KLPlacement::Both: return "Both";
  }
  return "?";
}

inline KLPlacement parse_placement(std::string_view s) {
  if (s == "Reward" || s == "reward") return KLPlacement::Reward;
  if (s == "Loss" || s == "loss") return KLPlacement::Loss;
  if (s == "Both" || s == "both") return KLPlacement::Both;
  throw ConfigError("unknown KL placement '" + std::string(s) + "' (expected Reward, Loss or Both)");
}

inline bool uses_reward(KLPlacement p) noexcept { return p != KLPlacement::Loss; }
inline bool uses_loss(KLPlacement p) noexcept { return p != KLPlacement::Reward; }

struct GradEstimate {
  double d_a = 0.0;
  double d_b = 0.0;
  long long n = 0;

  Grad2 grad() const noexcept { return {d_a, d_b}; }
};

/// The per-sequence quantities from which every configuration is assembled.
struct SequenceTerms {
  Grad2 score;      // grad log pi(Y)
  double k1 = 0.0;  // sum_t K1_t
  double k3 = 0.0;  // sum_t K3_t
  Grad2 k3_path;    // sum_t -r_t grad log pi(y_t)

  Grad2 reward_part(EstimatorKind kind) const noexcept {
    return (kind == EstimatorKind::K1 ? k1 : k3) * score;
  }
  Grad2 loss_part(EstimatorKind kind) const noexcept {
    return kind == EstimatorKind::K1 ? score : k3_path;
  }
  Grad2 config(EstimatorKind kind, KLPlacement placement) const noexcept {
    Grad2 g;
    if (uses_reward(placement)) g += reward_part(kind);
    if (uses_loss(placement)) g += loss_part(kind);
    return g;
  }
};

/// `clamp` applies the MC probability floor; exact callers pass false.
inline SequenceTerms sequence_terms(std::span<const int> tokens, std::span<const int> counts,
                                    const ArParams& policy, const ArParams& reference, bool clamp) {
  SequenceTerms out;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const int y = tokens[t];
    const int c = counts[t];
    double lp = bernoulli_log_prob(policy.logit(0, c), y);
    double lq = bernoulli_log_prob(reference.logit(0, c), y);
    if (clamp) {
      lp = clamp_log_prob(lp);
      lq = clamp_log_prob(lq);
    }
    const Grad2 s = token_score(policy, y, c);
    const double r = std::exp(lq - lp);
    out.score += s;
    out.k1 += k1_token(lp, lq);
    out.k3 += k3_token(lp, lq);
    out.k3_path -= r * s;
  }
  return out;
}

inline SequenceTerms sequence_terms(const SequenceSample& s, const ArParams& policy,
                                    const ArParams& reference) {
  if (s.counts.size() != s.tokens.size()) {
    throw ShapeError("sample has " + std::to_string(s.tokens.size()) + " tokens but " +
                     std::to_string(s.counts.size()) + " counts");
  }
  return sequence_terms(s.tokens, s.counts, policy, reference, true);
}

/// Mean per-sequence gradient contribution of one configuration over a batch.
inline GradEstimate grad_config(EstimatorKind kind, KLPlacement placement,
                                std::span<const SequenceSample> batch, const ArParams& policy,
                                const ArParams& reference) {
  policy.validate();
  reference.validate();
  if (batch.empty()) throw InvalidParameterError("grad_config needs a non-empty batch");
  const int T = batch.front().length();
  Grad2 sum;
  for (const auto& s : batch) {
    if (s.length() != T) {
      throw ShapeError("batch mixes sequence lengths " + std::to_string(T) + " and " +
                       std::to_string(s.length()));
    }
    sum += sequence_terms(s, policy, reference).config(kind, placement);
  }
  const double n = static_cast<double>(batch.size());
  return {sum.a / n, sum.b / n, static_cast<long long>(batch.size())};
}

/// Exact expectation of a configuration's gradient, by probability-weighted
/// enumeration of all 2^T sequences.
inline Grad2 exact_config_expectation(EstimatorKind kind, KLPlacement placement, const ArParams& policy,
                                      const ArParams& reference, int T,
                                      int max_length = kMaxEnumLength) {
  policy.validate();
  reference.validate();
  if (T <= 0) throw EmptySequenceError("sequence length must be >= 1");
  check_enum_limit(T, max_length);
  Grad2 g;
  for_each_sequence(T, [&](std::span<const int> y) {
    const auto counts = prefix_counts(y);
    const double w = std::exp(log_prob(policy, y));
    g += w * sequence_terms(y, counts, policy, reference, false).config(kind, placement);
  });
  return g;
}

struct BiasVarianceReport {
  EstimatorKind kind = EstimatorKind::K1;
  KLPlacement placement = KLPlacement::Reward;
  int T = 0;
  int trials = 0;
  int n_per_trial = 0;
  Grad2 mean;        // mean over trials of the per-trial batch mean
  Grad2 true_grad;   // exact reverse-KL gradient
  double bias_a = 0.0;
  double bias_b = 0.0;
  double var_a = 0.0;  // variance of the per-trial means, n-1 divisor
  double var_b = 0.0;
  bool config_exact = false;  // whether config_expectation was computed
  Grad2 config_expectation;   // the configuration's own exact expectation

  double bias_norm() const noexcept { return std::hypot(bias_a, bias_b); }
  double var_trace() const noexcept { return var_a + var_b; }
  double se_a() const noexcept { return std::sqrt(var_a / trials); }
  double se_b() const noexcept { return std::sqrt(var_b / trials); }
};

struct SweepSpec {
  std::vector<EstimatorKind> kinds{EstimatorKind::K1, EstimatorKind::K3};
  std::vector<KLPlacement> placements{KLPlacement::Reward, KLPlacement::Loss};
  std::vector<int> lengths{2, 4, 8, 16, 32};
  int trials = 200;
  int n_per_trial = 1000;
  ArParams policy{1.0, 0.1};
  ArParams reference{0.0, 0.0};
  std::uint64_t seed = 0;

  void validate() const {
    policy.validate();
    reference.validate();
    if (trials < 2) throw ConfigError("trials must be >= 2");
    if (n_per_trial < 2) throw ConfigError("n_per_trial must be >= 2");
    if (kinds.empty() || placements.empty()) throw ConfigError("kinds and placements must be non-empty");
    for (int T : lengths) {
      if (T < 1) throw ConfigError("sequence lengths must be >= 1");
    }
  }
};

/// Runs `fn(i)` for i in [0, n) on up to `jobs` threads.
template <typename F>
void parallel_for(int n, int jobs, F&& fn) {
  jobs = std::max(1, std::min(jobs, n));
  if (jobs == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr first_error;
  std::mutex error_mu;
  {
    std::vector<std::jthread> pool;
    pool.reserve(jobs);
    for (int j = 0; j < jobs; ++j) {
      pool.emplace_back([&] {
        for (int i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(error_mu);
            if (!first_error) first_error = std::current_exception();
            next = n;
          }
        }
      });
    }
  }
  if (first_error) std::rethrow_exception(first_error);
}

/// Each trial draws one fresh batch from a stream keyed by (seed, T, trial)
/// and evaluates every requested configuration on it, so a row does not
/// depend on which other configurations are swept or on `jobs`.
inline std::vector<BiasVarianceReport> bias_variance_sweep(const SweepSpec& spec, int jobs = 1) {
  spec.validate();
  std::vector<BiasVarianceReport> out;
  const std::size_t n_cfg = spec.kinds.size() * spec.placements.size();

  for (int T : spec.lengths) {
    const Grad2 truth = true_kl_grad(spec.policy, spec.reference, T);
    // trial_means[trial * n_cfg + cfg]
    std::vector<Grad2> trial_means(static_cast<std::size_t>(spec.trials) * n_cfg);
    const std::string label = "grad-bias/T=" + std::to_string(T);

    parallel_for(spec.trials, jobs, [&](int trial) {
      Rng rng(spec.seed, label, static_cast<std::uint64_t>(trial));
      std::vector<Grad2> acc(n_cfg);
      for (int i = 0; i < spec.n_per_trial; ++i) {
        const SequenceSample s = sample_sequence(spec.policy, T, rng);
        const SequenceTerms terms = sequence_terms(s, spec.policy, spec.reference);
        std::size_t k = 0;
        for (auto kind : spec.kinds) {
          for (auto placement : spec.placements) acc[k++] += terms.config(kind, placement);
        }
      }
      for (std::size_t k = 0; k < n_cfg; ++k) {
        trial_means[static_cast<std::size_t>(trial) * n_cfg + k] = (1.0 / spec.n_per_trial) * acc[k];
      }
    });

    std::size_t k = 0;
    for (auto kind : spec.kinds) {
      for (auto placement : spec.placements) {
        RunningStats sa, sb;
        for (int trial = 0; trial < spec.trials; ++trial) {
          const Grad2& m = trial_means[static_cast<std::size_t>(trial) * n_cfg + k];
          sa.push(m.a);
          sb.push(m.b);
        }
        BiasVarianceReport r;
        r.kind = kind;
        r.placement = placement;
        r.T = T;
        r.trials = spec.trials;
        r.n_per_trial = spec.n_per_trial;
        r.mean = {sa.mean(), sb.mean()};
        r.true_grad = truth;
        r.bias_a = r.mean.a - truth.a;
        r.bias_b = r.mean.b - truth.b;
        r.var_a = sa.variance();
        r.var_b = sb.variance();
        if (T <= kMaxEnumLength) {
          r.config_exact = true;
          r.config_expectation = exact_config_expectation(kind, placement, spec.policy, spec.reference, T);
        }
        out.push_back(r);
        ++k;
      }
    }
  }
  return out;
}

}  // namespace klgrad
