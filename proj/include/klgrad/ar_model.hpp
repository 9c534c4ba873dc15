#pragma once

/** @file
 * Autoregressive Bernoulli sequence models over binary strings.
 *
 * Token t is drawn from Bernoulli(sigmoid(logit(t, c))), where c is the
 * number of ones emitted before t. The two-parameter family uses
 * logit = a + b * c. Because the conditionals see the prefix only through its
 * running count, the count is a sufficient state for exact dynamic programs:
 * expectations over all 2^T sequences cost O(T^2).
 *
 * Anything exposing `double logit(int t, int count) const` is a CountModel and
 * can be sampled, scored and compared exactly with the routines below.
 */

#include <cmath>
#include <concepts>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "klgrad/bernoulli.hpp"
#include "klgrad/error.hpp"
#include "klgrad/random.hpp"

namespace klgrad {

/// Longest sequence for which 2^T enumeration is attempted.
inline constexpr int kMaxEnumLength = 20;

template <typename M>
concept CountModel = requires(const M& m, int t, int count) {
  { m.logit(t, count) } -> std::convertible_to<double>;
};

struct ArParams {
  double a = 0.0;  // intercept logit
  double b = 0.0;  // coefficient on the running count of ones

  double logit(int /*t*/, int count) const noexcept { return a + b * count; }

  bool finite() const noexcept { return std::isfinite(a) && std::isfinite(b); }

  void validate() const {
    if (!finite()) {
      throw InvalidParameterError("ArParams (a=" + std::to_string(a) + ", b=" + std::to_string(b) +
                                  ") must be finite");
    }
  }

  friend bool operator==(const ArParams&, const ArParams&) = default;
};

/// Gradient with respect to the (a, b) parameters of an ArParams model.
struct Grad2 {
  double a = 0.0;
  double b = 0.0;

  Grad2& operator+=(const Grad2& o) noexcept {
    a += o.a;
    b += o.b;
    return *this;
  }
  Grad2& operator-=(const Grad2& o) noexcept {
    a -= o.a;
    b -= o.b;
    return *this;
  }
  Grad2& operator*=(double s) noexcept {
    a *= s;
    b *= s;
    return *this;
  }
  friend Grad2 operator+(Grad2 x, const Grad2& y) noexcept { return x += y; }
  friend Grad2 operator-(Grad2 x, const Grad2& y) noexcept { return x -= y; }
  friend Grad2 operator*(double s, Grad2 x) noexcept { return x *= s; }
  friend Grad2 operator*(Grad2 x, double s) noexcept { return x *= s; }

  double norm() const noexcept { return std::hypot(a, b); }
  bool finite() const noexcept { return std::isfinite(a) && std::isfinite(b); }
};

struct SequenceSample {
  std::vector<int> tokens;          // y_t in {0, 1}
  std::vector<double> logp_policy;  // log P(y_t | prefix) under the sampling model
  std::vector<int> counts;          // ones strictly before t; counts[0] == 0

  int length() const noexcept { return static_cast<int>(tokens.size()); }
};

/// Distribution of the running count after `t` tokens; probs has t+1 entries.
struct CountDistribution {
  int t = 0;
  std::vector<double> probs;
};

inline double cond_prob(const ArParams& params, int count_prev) {
  params.validate();
  if (count_prev < 0) throw InvalidParameterError("count_prev must be >= 0");
  return sigmoid(params.logit(0, count_prev));
}

/// Running counts c_0 .. c_{T-1} of a token string.
inline std::vector<int> prefix_counts(std::span<const int> tokens) {
  std::vector<int> counts(tokens.size());
  int c = 0;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    counts[t] = c;
    c += tokens[t];
  }
  return counts;
}

template <CountModel M>
SequenceSample sample_sequence(const M& model, int T, Rng& rng) {
  if (T <= 0) throw EmptySequenceError("sequence length must be >= 1");
  SequenceSample s;
  s.tokens.resize(T);
  s.logp_policy.resize(T);
  s.counts.resize(T);
  int c = 0;
  for (int t = 0; t < T; ++t) {
    const double x = model.logit(t, c);
    const int y = rng.bernoulli(sigmoid(x)) ? 1 : 0;
    s.tokens[t] = y;
    s.counts[t] = c;
    s.logp_policy[t] = bernoulli_log_prob(x, y);
    c += y;
  }
  return s;
}

inline SequenceSample sample_sequence(const ArParams& params, int T, Rng& rng) {
  params.validate();
  return sample_sequence<ArParams>(params, T, rng);
}

/// Per-token log-probabilities of `tokens` under `model`.
template <CountModel M>
std::vector<double> token_log_probs(const M& model, std::span<const int> tokens) {
  std::vector<double> out(tokens.size());
  int c = 0;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    out[t] = bernoulli_log_prob(model.logit(static_cast<int>(t), c), tokens[t]);
    c += tokens[t];
  }
  return out;
}

template <CountModel M>
double log_prob(const M& model, std::span<const int> tokens) {
  if (tokens.empty()) throw EmptySequenceError("log_prob of an empty token list");
  double lp = 0.0;
  int c = 0;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    lp += bernoulli_log_prob(model.logit(static_cast<int>(t), c), tokens[t]);
    c += tokens[t];
  }
  return lp;
}

inline double log_prob(const ArParams& params, std::span<const int> tokens) {
  params.validate();
  return log_prob<ArParams>(params, tokens);
}

/// d/d(a,b) of log P(y_t | prefix): (y_t - p_t) * (1, c_{t-1}).
inline Grad2 token_score(const ArParams& params, int y, int count_prev) noexcept {
  const double resid = y - sigmoid(params.logit(0, count_prev));
  return {resid, resid * count_prev};
}

/// Analytic gradient of the sequence log-likelihood with respect to (a, b).
inline Grad2 score_vector(const ArParams& params, std::span<const int> tokens) {
  Grad2 g;
  int c = 0;
  for (int y : tokens) {
    g += token_score(params, y, c);
    c += y;
  }
  return g;
}

inline Grad2 score_vector(const ArParams& params, const SequenceSample& sample) {
  if (sample.counts.size() != sample.tokens.size()) {
    throw ShapeError("sample has " + std::to_string(sample.tokens.size()) + " tokens but " +
                     std::to_string(sample.counts.size()) + " counts");
  }
  Grad2 g;
  for (std::size_t t = 0; t < sample.tokens.size(); ++t) {
    g += token_score(params, sample.tokens[t], sample.counts[t]);
  }
  return g;
}

/// Forward DP over the running count: entry t is the law of c_t, t = 0..T.
template <CountModel M>
std::vector<CountDistribution> count_distributions(const M& model, int T) {
  if (T <= 0) throw EmptySequenceError("sequence length must be >= 1");
  std::vector<CountDistribution> out;
  out.reserve(T + 1);
  out.push_back({0, {1.0}});
  for (int t = 0; t < T; ++t) {
    const auto& prev = out.back().probs;
    std::vector<double> next(t + 2, 0.0);
    for (int c = 0; c <= t; ++c) {
      const double p = sigmoid(model.logit(t, c));
      next[c] += prev[c] * (1.0 - p);
      next[c + 1] += prev[c] * p;
    }
    out.push_back({t + 1, std::move(next)});
  }
  return out;
}

/// E_P[ sum_t f(t, c_t) ] with c_t the count state before token t.
template <CountModel M, typename F>
double expected_state_sum(const M& model, int T, F&& f) {
  if (T <= 0) throw EmptySequenceError("sequence length must be >= 1");
  std::vector<double> mass{1.0};
  double total = 0.0;
  for (int t = 0; t < T; ++t) {
    std::vector<double> next(t + 2, 0.0);
    for (int c = 0; c <= t; ++c) {
      if (mass[c] == 0.0) continue;
      total += mass[c] * f(t, c);
      const double p = sigmoid(model.logit(t, c));
      next[c] += mass[c] * (1.0 - p);
      next[c + 1] += mass[c] * p;
    }
    mass = std::move(next);
  }
  return total;
}

/// Exact reverse KL D(P || Q) over length-T sequences.
template <CountModel P, CountModel Q>
double exact_kl(const P& p_model, const Q& q_model, int T) {
  return expected_state_sum(p_model, T, [&](int t, int c) {
    const double lp = p_model.logit(t, c);
    const double lq = q_model.logit(t, c);
    const double p = sigmoid(lp);
    const double q = sigmoid(lq);
    if ((q == 0.0 && p > 0.0) || (q == 1.0 && p < 1.0) || !std::isfinite(lp) ||
        !std::isfinite(lq)) {
      throw DivergenceInfiniteError("reference assigns probability 0 to a reachable token at t=" +
                                    std::to_string(t) + ", count=" + std::to_string(c));
    }
    return bernoulli_kl(lp, lq);
  });
}

/// D(P || Q) evaluated entirely in logit space. Unlike exact_kl it does not
/// reject conditionals that round to 0 or 1 in double precision; for finite
/// logits the result is the exact, finite divergence.
template <CountModel P, CountModel Q>
double exact_kl_logit_space(const P& p_model, const Q& q_model, int T) {
  return expected_state_sum(p_model, T, [&](int t, int c) {
    const double lp = p_model.logit(t, c);
    const double lq = q_model.logit(t, c);
    if (!std::isfinite(lp) || !std::isfinite(lq)) {
      throw DivergenceInfiniteError("non-finite logit at t=" + std::to_string(t) + ", count=" + std::to_string(c));
    }
    return bernoulli_kl(lp, lq);
  });
}

inline double exact_kl(const ArParams& A, const ArParams& B, int T) {
  A.validate();
  B.validate();
  return exact_kl<ArParams, ArParams>(A, B, T);
}

/// Exact entropy (nats) of the sequence distribution.
template <CountModel M>
double exact_entropy(const M& model, int T) {
  return expected_state_sum(model, T,
                            [&](int t, int c) { return bernoulli_entropy(model.logit(t, c)); });
}

/// Calls fn(tokens) for each of the 2^T binary sequences.
template <typename F>
void for_each_sequence(int T, F&& fn) {
  if (T <= 0) throw EmptySequenceError("sequence length must be >= 1");
  if (T > kMaxEnumLength) {
    throw UnsupportedExactSizeError("T=" + std::to_string(T) + " exceeds enumeration limit " +
                                    std::to_string(kMaxEnumLength));
  }
  std::vector<int> tokens(T);
  const std::uint64_t n = std::uint64_t{1} << T;
  for (std::uint64_t mask = 0; mask < n; ++mask) {
    for (int t = 0; t < T; ++t) tokens[t] = static_cast<int>((mask >> t) & 1U);
    fn(std::span<const int>(tokens));
  }
}

inline void check_enum_limit(int T, int max_length) {
  if (T > max_length) {
    throw UnsupportedExactSizeError("T=" + std::to_string(T) + " exceeds enumeration limit " +
                                    std::to_string(max_length));
  }
}

/// D(A || B) as sum over all sequences of A(Y) log(A(Y)/B(Y)).
inline double enumerated_kl(const ArParams& A, const ArParams& B, int T,
                            int max_length = kMaxEnumLength) {
  A.validate();
  B.validate();
  check_enum_limit(T, max_length);
  double kl = 0.0;
  for_each_sequence(T, [&](std::span<const int> y) {
    const double la = log_prob(A, y);
    kl += std::exp(la) * (la - log_prob(B, y));
  });
  return kl;
}

/// Gradient of D(A || B) with respect to A's (a, b), by enumeration:
/// sum_Y A(Y) log(A(Y)/B(Y)) * grad log A(Y).
inline Grad2 exact_kl_grad(const ArParams& A, const ArParams& B, int T,
                           int max_length = kMaxEnumLength) {
  A.validate();
  B.validate();
  if (T <= 0) throw EmptySequenceError("sequence length must be >= 1");
  check_enum_limit(T, max_length);
  Grad2 g;
  for_each_sequence(T, [&](std::span<const int> y) {
    const double la = log_prob(A, y);
    g += (std::exp(la) * (la - log_prob(B, y))) * score_vector(A, y);
  });
  return g;
}

/// Same gradient via forward-mode differentiation of the count DP; O(T^2).
inline Grad2 exact_kl_grad_dp(const ArParams& A, const ArParams& B, int T) {
  A.validate();
  B.validate();
  if (T <= 0) throw EmptySequenceError("sequence length must be >= 1");
  std::vector<double> mass{1.0};
  std::vector<Grad2> dmass{Grad2{}};
  Grad2 g;
  for (int t = 0; t < T; ++t) {
    std::vector<double> next(t + 2, 0.0);
    std::vector<Grad2> dnext(t + 2);
    for (int c = 0; c <= t; ++c) {
      const double lp = A.logit(t, c);
      const double lq = B.logit(t, c);
      const double p = sigmoid(lp);
      const Grad2 dp{p * (1.0 - p), p * (1.0 - p) * c};
      const double kl = bernoulli_kl(lp, lq);
      // d kl / d p = logit(p) - logit(q)
      g += kl * dmass[c] + mass[c] * (lp - lq) * dp;
      next[c] += mass[c] * (1.0 - p);
      next[c + 1] += mass[c] * p;
      dnext[c] += (1.0 - p) * dmass[c] - mass[c] * dp;
      dnext[c + 1] += p * dmass[c] + mass[c] * dp;
    }
    mass = std::move(next);
    dmass = std::move(dnext);
  }
  return g;
}

/// Exact reverse-KL gradient: enumeration when T allows, DP otherwise.
inline Grad2 true_kl_grad(const ArParams& A, const ArParams& B, int T) {
  return T <= kMaxEnumLength ? exact_kl_grad(A, B, T) : exact_kl_grad_dp(A, B, T);
}

}  // namespace klgrad
