#pragma once

/** @file
 * Toy verifiable-reward policy-gradient trainer.
 *
 * One training step samples prompts_per_batch groups of G sequences from a
 * possibly stale copy of the policy, scores them with a 0/1 reward, forms
 * leave-one-out advantages, optionally folds a KL estimate into the reward,
 * and takes m plain gradient-ascent updates on a clipped importance-ratio
 * surrogate (plus a differentiated KL term for the Loss placement).
 * All per-token terms are normalized by the total token count of the batch.
 */

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "klgrad/ar_model.hpp"
#include "klgrad/error.hpp"
#include "klgrad/estimators.hpp"
#include "klgrad/gradient_lab.hpp"
#include "klgrad/policy.hpp"
#include "klgrad/random.hpp"

namespace klgrad {

/// Sequence-level 0/1 reward.
struct RewardSpec {
  enum class Kind { CountTarget, ParityOnes, Custom };

  Kind kind = Kind::CountTarget;
  int target = 0;  // CountTarget: required number of ones
  std::function<bool(std::span<const int>)> predicate;  // Custom only

  static RewardSpec count_target(int k) { return {Kind::CountTarget, k, {}}; }
  /// 1 when the number of ones is odd.
  static RewardSpec parity_ones() { return {Kind::ParityOnes, 0, {}}; }
  static RewardSpec custom(std::function<bool(std::span<const int>)> f) {
    return {Kind::Custom, 0, std::move(f)};
  }

  int operator()(std::span<const int> tokens) const {
    int ones = 0;
    for (int y : tokens) ones += y;
    switch (kind) {
      case Kind::CountTarget: return ones == target ? 1 : 0;
      case Kind::ParityOnes: return ones % 2;
      case Kind::Custom: return predicate(tokens) ? 1 : 0;
    }
    return 0;
  }

  /// Exact expected reward, available for the count-based rewards.
  template <CountModel M>
  std::optional<double> exact_expected(const M& model, int T) const {
    if (kind == Kind::Custom) return std::nullopt;
    const auto final_counts = count_distributions(model, T).back().probs;
    if (kind == Kind::CountTarget) {
      return target >= 0 && target <= T ? final_counts[target] : 0.0;
    }
    double odd = 0.0;
    for (int c = 1; c <= T; c += 2) odd += final_counts[c];
    return odd;
  }

  void validate(int T) const {
    if (kind == Kind::CountTarget && (target < 0 || target > T)) {
      throw ConfigError("count target " + std::to_string(target) + " unreachable for T=" + std::to_string(T));
    }
    if (kind == Kind::Custom && !predicate) throw ConfigError("custom reward needs a predicate");
  }
};

struct KLConfig {
  EstimatorKind kind = EstimatorKind::K1;
  KLPlacement placement = KLPlacement::Reward;
  double beta = 0.0;

  bool active() const noexcept { return beta > 0.0; }

  friend bool operator==(const KLConfig&, const KLConfig&) = default;
};

struct TrainConfig {
  PolicySpec policy = PolicySpec::two_param({0.0, 0.0}, 16);
  RewardSpec reward = RewardSpec::count_target(12);
  KLConfig kl;
  int group_size = 4;
  int prompts_per_batch = 8;
  int minibatches_per_batch = 1;
  int async_lag = 0;
  double clip_eps = 0.2;
  double learning_rate = 0.1;
  int steps = 300;
  std::uint64_t seed = 0;

  int batch_size() const noexcept { return group_size * prompts_per_batch; }

  void validate() const {
    policy.validate();
    reward.validate(policy.T);
    if (!(kl.beta >= 0.0) || !std::isfinite(kl.beta)) throw ConfigError("beta must be finite and >= 0");
    if (group_size < 2) throw ConfigError("group_size must be >= 2 for the leave-one-out baseline");
    if (prompts_per_batch < 1) throw ConfigError("prompts_per_batch must be >= 1");
    if (minibatches_per_batch < 1) throw ConfigError("minibatches_per_batch must be >= 1");
    if (minibatches_per_batch > batch_size()) {
      throw ConfigError("more minibatches than sequences in a batch");
    }
    if (async_lag < 0) throw ConfigError("async_lag must be >= 0");
    if (!(clip_eps > 0.0)) throw ConfigError("clip_eps must be > 0");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
    if (steps < 0) throw ConfigError("steps must be >= 0");
  }
};

/// Learning rate the trainer uses by default for each policy family.
inline double default_learning_rate(PolicySpec::Variant v) noexcept {
  return v == PolicySpec::Variant::TwoParam ? 0.1 : 0.05;
}

struct TrainMetrics {
  int step = 0;
  double mean_reward = 0.0;      // batch mean of sampled rewards
  double expected_reward = 0.0;  // exact when the reward allows it, else the batch mean
  double exact_reverse_kl = 0.0; // D(policy || reference)
  double exact_forward_kl = 0.0; // D(reference || policy)
  double entropy = 0.0;          // sequence entropy of the policy, nats
  double grad_norm = 0.0;
  bool collapse_flag = false;
};

struct Rollout {
  SequenceSample sample;
  int reward = 0;
};

inline std::vector<Rollout> rollout_group(const PolicySpec& policy, const RewardSpec& reward, int G, Rng& rng) {
  if (G < 2) throw ConfigError("group size must be >= 2");
  std::vector<Rollout> out;
  out.reserve(G);
  for (int i = 0; i < G; ++i) {
    Rollout r{sample_sequence(policy, policy.T, rng), 0};
    r.reward = reward(r.sample.tokens);
    out.push_back(std::move(r));
  }
  return out;
}

/// A_i = R_i - mean_{j != i} R_j.
inline std::vector<double> rloo_advantage(std::span<const double> rewards) {
  const std::size_t G = rewards.size();
  if (G < 2) throw ConfigError("leave-one-out baseline needs at least 2 rewards");
  double total = 0.0;
  for (double r : rewards) total += r;
  std::vector<double> adv(G);
  const double denom = static_cast<double>(G - 1);
  for (std::size_t i = 0; i < G; ++i) adv[i] = rewards[i] - (total - rewards[i]) / denom;
  return adv;
}

/// Broadcasts each sequence advantage to its tokens after subtracting
/// beta * sum_t KL_t. The KL values are constants here.
inline std::vector<std::vector<double>> apply_kl_to_reward(std::span<const double> advantages,
                                                           std::span<const std::vector<double>> kl_token_values,
                                                           double beta) {
  if (advantages.size() != kl_token_values.size()) {
    throw ShapeError(std::to_string(advantages.size()) + " advantages for " +
                     std::to_string(kl_token_values.size()) + " sequences");
  }
  if (!(beta >= 0.0)) throw ConfigError("beta must be >= 0");
  std::vector<std::vector<double>> out(advantages.size());
  for (std::size_t i = 0; i < advantages.size(); ++i) {
    double penalty = 0.0;
    if (beta > 0.0) {
      for (double v : kl_token_values[i]) penalty += v;
      penalty *= beta;
    }
    out[i].assign(kl_token_values[i].size(), advantages[i] - penalty);
  }
  return out;
}

struct PolicyGradient {
  std::vector<double> grad;
  bool collapsed = false;  // a non-finite ratio or gradient was met; grad is zero
};

/// Gradient of (1/token_norm) sum_{i,t} min(w A, clip(w, 1-eps, 1+eps) A),
/// w = pi(y_t) / pi_old(y_t), with the advantages held constant.
inline PolicyGradient surrogate_gradient(const PolicySpec& policy, const PolicySpec& old_policy,
                                         std::span<const SequenceSample> batch,
                                         std::span<const std::vector<double>> token_advantages, double clip_eps,
                                         double token_norm) {
  if (batch.size() != token_advantages.size()) throw ShapeError("advantages do not match batch");
  if (!(token_norm > 0.0)) throw ConfigError("token normalizer must be > 0");
  PolicyGradient out{std::vector<double>(policy.dim(), 0.0), false};
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& s = batch[i];
    if (token_advantages[i].size() != s.tokens.size()) throw ShapeError("token advantages do not match sequence");
    for (std::size_t t = 0; t < s.tokens.size(); ++t) {
      const double A = token_advantages[i][t];
      if (A == 0.0) continue;
      const int ti = static_cast<int>(t);
      const int y = s.tokens[t];
      const int c = s.counts[t];
      const double log_w = bernoulli_log_prob(policy.logit(ti, c), y) - bernoulli_log_prob(old_policy.logit(ti, c), y);
      const double w = std::exp(log_w);
      if (!std::isfinite(w)) {
        out.grad.assign(policy.dim(), 0.0);
        out.collapsed = true;
        return out;
      }
      const double unclipped = w * A;
      const double clipped = std::clamp(w, 1.0 - clip_eps, 1.0 + clip_eps) * A;
      // The clipped branch is constant in the parameters.
      if (unclipped <= clipped) policy.add_token_grad(ti, c, y, A * w, out.grad);
    }
  }
  for (double& g : out.grad) g /= token_norm;
  return out;
}

/// beta / normalizer * sum_i sum_t grad KL_t, the path-wise term of the
/// Loss placement. normalizer defaults to the number of sequences.
template <typename Ref>
std::vector<double> kl_loss_gradient(EstimatorKind kind, const PolicySpec& policy, const Ref& reference,
                                     std::span<const SequenceSample> batch, double beta,
                                     std::optional<double> normalizer = std::nullopt) {
  std::vector<double> g(policy.dim(), 0.0);
  if (beta == 0.0 || batch.empty()) return g;
  for (const auto& s : batch) {
    for (std::size_t t = 0; t < s.tokens.size(); ++t) {
      const int ti = static_cast<int>(t);
      const int y = s.tokens[t];
      const int c = s.counts[t];
      double weight = 1.0;
      if (kind == EstimatorKind::K3) {
        const double lp = clamp_log_prob(bernoulli_log_prob(policy.logit(ti, c), y));
        const double lq = clamp_log_prob(bernoulli_log_prob(reference.logit(ti, c), y));
        weight = -std::exp(lq - lp);
      }
      policy.add_token_grad(ti, c, y, weight, g);
    }
  }
  const double scale = beta / normalizer.value_or(static_cast<double>(batch.size()));
  for (double& v : g) v *= scale;
  return g;
}

/// Per-token KL estimates of a sampled sequence against the reference.
template <typename Ref>
std::vector<double> kl_token_values(EstimatorKind kind, const SequenceSample& s, const Ref& reference) {
  std::vector<double> out(s.tokens.size());
  for (std::size_t t = 0; t < s.tokens.size(); ++t) {
    const double lp = clamp_log_prob(s.logp_policy[t]);
    const double lq = clamp_log_prob(bernoulli_log_prob(reference.logit(static_cast<int>(t), s.counts[t]), s.tokens[t]));
    out[t] = token_estimate(kind, lp, lq);
  }
  return out;
}

struct TrainResult {
  std::vector<TrainMetrics> metrics;
  PolicySpec final_policy;
  bool collapsed = false;
  int collapse_step = -1;
};

inline constexpr double kCollapseEntropy = 1e-6;

/// Exact diagnostics of `policy` against the frozen reference. The KLs are
/// taken in logit space so a saturated conditional reads as a large finite
/// divergence rather than an error.
inline TrainMetrics exact_diagnostics(const PolicySpec& policy, const PolicySpec& reference, const RewardSpec& reward,
                                      double batch_mean_reward) {
  TrainMetrics m;
  m.mean_reward = batch_mean_reward;
  m.expected_reward = reward.exact_expected(policy, policy.T).value_or(batch_mean_reward);
  m.exact_reverse_kl = exact_kl_logit_space(policy, reference, policy.T);
  m.exact_forward_kl = exact_kl_logit_space(reference, policy, policy.T);
  m.entropy = exact_entropy(policy, policy.T);
  return m;
}

/// Called once per sampled group with its leave-one-out advantages.
using GroupObserver = std::function<void(int step, std::span<const double> advantages)>;

inline TrainResult train_run(const TrainConfig& config, const GroupObserver& on_group = {}) {
  config.validate();
  const PolicySpec reference = config.policy;
  const int T = config.policy.T;
  const int N = config.batch_size();
  const double token_norm = static_cast<double>(N) * T;
  const KLConfig& kl = config.kl;

  TrainResult result;
  PolicySpec theta = config.policy;
  std::deque<PolicySpec> history{theta};  // history.back() is current
  TrainMetrics frozen;                     // repeated after a collapse

  for (int step = 0; step < config.steps; ++step) {
    if (result.collapsed) {
      frozen.step = step;
      result.metrics.push_back(frozen);
      continue;
    }
    const PolicySpec& sampler = history.front();

    Rng rng(config.seed, "train/batch", static_cast<std::uint64_t>(step));
    std::vector<SequenceSample> batch;
    std::vector<double> seq_adv;
    batch.reserve(N);
    seq_adv.reserve(N);
    double reward_sum = 0.0;
    for (int g = 0; g < config.prompts_per_batch; ++g) {
      auto group = rollout_group(sampler, config.reward, config.group_size, rng);
      std::vector<double> rewards;
      for (const auto& r : group) {
        rewards.push_back(r.reward);
        reward_sum += r.reward;
      }
      const auto adv = rloo_advantage(rewards);
      if (on_group) on_group(step, adv);
      seq_adv.insert(seq_adv.end(), adv.begin(), adv.end());
      for (auto& r : group) batch.push_back(std::move(r.sample));
    }

    std::vector<std::vector<double>> kl_values(N);
    const bool kl_in_reward = kl.active() && uses_reward(kl.placement);
    if (kl_in_reward) {
      for (int i = 0; i < N; ++i) kl_values[i] = kl_token_values(kl.kind, batch[i], reference);
    } else {
      for (int i = 0; i < N; ++i) kl_values[i].assign(T, 0.0);
    }
    const auto token_adv = apply_kl_to_reward(seq_adv, kl_values, kl_in_reward ? kl.beta : 0.0);

    std::vector<double> step_grad(theta.dim(), 0.0);
    bool collapsed = false;
    const int m = config.minibatches_per_batch;
    for (int mb = 0; mb < m && !collapsed; ++mb) {
      const std::size_t lo = static_cast<std::size_t>(N) * mb / m;
      const std::size_t hi = static_cast<std::size_t>(N) * (mb + 1) / m;
      const std::span<const SequenceSample> mb_batch(batch.data() + lo, hi - lo);
      const std::span<const std::vector<double>> mb_adv(token_adv.data() + lo, hi - lo);

      PolicyGradient pg = surrogate_gradient(theta, sampler, mb_batch, mb_adv, config.clip_eps, token_norm);
      if (pg.collapsed) {
        collapsed = true;
        break;
      }
      if (kl.active() && uses_loss(kl.placement)) {
        const auto lg = kl_loss_gradient(kl.kind, theta, reference, mb_batch, kl.beta, token_norm);
        for (std::size_t j = 0; j < pg.grad.size(); ++j) pg.grad[j] -= lg[j];
      }
      PolicySpec next = theta;
      for (std::size_t j = 0; j < pg.grad.size(); ++j) {
        next.params[j] += config.learning_rate * pg.grad[j];
        step_grad[j] += pg.grad[j];
      }
      if (!next.finite()) {
        collapsed = true;
        break;
      }
      theta = std::move(next);
    }

    double gn = 0.0;
    for (double v : step_grad) gn += v * v;
    gn = std::sqrt(gn);
    if (!std::isfinite(gn)) collapsed = true;

    history.push_back(theta);
    while (static_cast<int>(history.size()) > config.async_lag + 1) history.pop_front();

    TrainMetrics metrics = exact_diagnostics(theta, reference, config.reward, reward_sum / N);
    metrics.step = step;
    metrics.grad_norm = std::isfinite(gn) ? gn : 0.0;
    if (metrics.entropy < kCollapseEntropy) collapsed = true;
    metrics.collapse_flag = collapsed;
    if (collapsed) {
      result.collapsed = true;
      result.collapse_step = step;
      frozen = metrics;
    }
    result.metrics.push_back(metrics);
  }
  result.final_policy = theta;
  return result;
}

}  // namespace klgrad
