#pragma once

// Numerically careful scalar helpers for Bernoulli variables parameterized by
// a logit.

#include <cmath>

namespace klgrad {

inline double sigmoid(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log(sigmoid(x)) without overflow or cancellation.
inline double log_sigmoid(double x) noexcept {
  if (x >= 0.0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

/// log P(y) for y ~ Bernoulli(sigmoid(logit)).
inline double bernoulli_log_prob(double logit, int y) noexcept {
  return y != 0 ? log_sigmoid(logit) : log_sigmoid(-logit);
}

/// KL(Ber(sigmoid(lp)) || Ber(sigmoid(lq))).
inline double bernoulli_kl(double lp, double lq) noexcept {
  const double p = sigmoid(lp);
  const double kl = p * (log_sigmoid(lp) - log_sigmoid(lq)) +
                    (1.0 - p) * (log_sigmoid(-lp) - log_sigmoid(-lq));
  return kl > 0.0 ? kl : 0.0;  // rounding can dip a hair below zero
}

/// Entropy (nats) of Ber(sigmoid(logit)).
inline double bernoulli_entropy(double logit) noexcept {
  const double p = sigmoid(logit);
  const double h = -p * log_sigmoid(logit) - (1.0 - p) * log_sigmoid(-logit);
  return h > 0.0 ? h : 0.0;
}

}  // namespace klgrad
