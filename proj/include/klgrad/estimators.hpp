#pragma once

/** @file
 * Token- and sequence-level Monte Carlo estimators of the reverse KL
 * divergence D(policy || reference) from samples of the policy.
 *
 *   K1_t = log pi(y_t) - log ref(y_t)          (= -log r)
 *   K3_t = r - 1 - log r,   r = ref(y_t) / pi(y_t)
 *
 * Both are unbiased for the sequence-level divergence when summed over t.
 * K3 is pointwise nonnegative; K1 is not.
 */

#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "klgrad/ar_model.hpp"
#include "klgrad/error.hpp"
#include "klgrad/random.hpp"

namespace klgrad {

enum class EstimatorKind { K1, K3 };

inline std::string_view to_string(EstimatorKind k) noexcept { return k == EstimatorKind::K1 ? "K1" : "K3"; }

inline EstimatorKind parse_estimator_kind(std::string_view s) {
  if (s == "K1" || s == "k1") return EstimatorKind::K1;
  if (s == "K3" || s == "k3") return EstimatorKind::K3;
  throw ConfigError("unknown estimator kind '" + std::string(s) + "' (expected K1 or K3)");
}

/// Probability floor applied to log-probabilities inside Monte Carlo
/// estimators only; exact routines never clamp.
inline constexpr double kProbFloor = 1e-12;

inline double clamp_log_prob(double logp) noexcept {
  static const double lo = std::log(kProbFloor);
  static const double hi = std::log1p(-kProbFloor);
  return logp < lo ? lo : (logp > hi ? hi : logp);
}

struct TokenRatios {
  std::vector<double> logp_policy;
  std::vector<double> logp_ref;

  void validate() const {
    if (logp_policy.size() != logp_ref.size()) {
      throw ShapeError("policy has " + std::to_string(logp_policy.size()) +
                       " log-probs, reference has " + std::to_string(logp_ref.size()));
    }
    for (std::size_t t = 0; t < logp_policy.size(); ++t) {
      if (!std::isfinite(logp_policy[t]) || !std::isfinite(logp_ref[t])) {
        throw InvalidParameterError("non-finite log-probability at token " + std::to_string(t));
      }
    }
  }
};

inline double k1_token(double logp_policy, double logp_ref) noexcept { return logp_policy - logp_ref; }

inline double k3_token(double logp_policy, double logp_ref) noexcept {
  const double log_r = logp_ref - logp_policy;
  // expm1 keeps r - 1 - log r accurate near r = 1.
  const double v = std::expm1(log_r) - log_r;
  return v > 0.0 ? v : 0.0;
}

inline double token_estimate(EstimatorKind kind, double logp_policy, double logp_ref) noexcept {
  return kind == EstimatorKind::K1 ? k1_token(logp_policy, logp_ref) : k3_token(logp_policy, logp_ref);
}

inline double sequence_estimate(EstimatorKind kind, const TokenRatios& ratios) {
  ratios.validate();
  if (ratios.logp_policy.empty()) throw EmptySequenceError("sequence_estimate needs at least one token");
  double s = 0.0;
  for (std::size_t t = 0; t < ratios.logp_policy.size(); ++t) {
    s += token_estimate(kind, ratios.logp_policy[t], ratios.logp_ref[t]);
  }
  return s;
}

/// Policy and reference log-probs of a sampled sequence, clamped for MC use.
inline TokenRatios token_ratios(const SequenceSample& sample, const ArParams& policy,
                                const ArParams& reference) {
  TokenRatios r;
  r.logp_policy.resize(sample.tokens.size());
  r.logp_ref.resize(sample.tokens.size());
  for (std::size_t t = 0; t < sample.tokens.size(); ++t) {
    const int y = sample.tokens[t];
    const int c = sample.counts[t];
    r.logp_policy[t] = clamp_log_prob(bernoulli_log_prob(policy.logit(0, c), y));
    r.logp_ref[t] = clamp_log_prob(bernoulli_log_prob(reference.logit(0, c), y));
  }
  return r;
}

struct MCEstimate {
  double mean = 0.0;
  double std_err = 0.0;
  long long n = 0;
  double variance = 0.0;  // sample variance of the per-sequence estimate (n-1 divisor)
};

/// Welford accumulator for mean and unbiased variance.
class RunningStats {
 public:
  void push(double x) noexcept {
    ++n_;
    const double d = x - mean_;
    mean_ += d / static_cast<double>(n_);
    m2_ += d * (x - mean_);
  }

  long long count() const noexcept { return n_; }
  double mean() const noexcept { return mean_; }
  double variance() const noexcept { return n_ > 1 ? m2_ / static_cast<double>(n_ - 1) : 0.0; }
  double std_err() const noexcept { return n_ > 1 ? std::sqrt(variance() / static_cast<double>(n_)) : 0.0; }

 private:
  long long n_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

inline MCEstimate mc_kl(EstimatorKind kind, const ArParams& policy, const ArParams& reference, int T,
                        long long n, Rng& rng) {
  policy.validate();
  reference.validate();
  if (n < 2) throw InvalidParameterError("mc_kl needs n >= 2 samples");
  if (T <= 0) throw EmptySequenceError("sequence length must be >= 1");
  RunningStats stats;
  for (long long i = 0; i < n; ++i) {
    const SequenceSample s = sample_sequence(policy, T, rng);
    stats.push(sequence_estimate(kind, token_ratios(s, policy, reference)));
  }
  return {stats.mean(), stats.std_err(), stats.count(), stats.variance()};
}

}  // namespace klgrad
