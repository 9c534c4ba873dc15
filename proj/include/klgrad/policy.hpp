#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "klgrad/ar_model.hpp"
#include "klgrad/bernoulli.hpp"
#include "klgrad/error.hpp"

namespace klgrad {

/// Trainable policy over binary sequences of fixed length T.
///
/// TwoParam: params = {a, b}, logit(t, c) = a + b c.
/// Tabular:  one free logit per reachable (t, c), 0 <= c <= t < T, stored
///           row-major by t at index t(t+1)/2 + c.
struct PolicySpec {
  enum class Variant { TwoParam, Tabular };

  Variant variant = Variant::TwoParam;
  int T = 1;
  std::vector<double> params{0.0, 0.0};

  static PolicySpec two_param(const ArParams& p, int T) { return {Variant::TwoParam, T, {p.a, p.b}}; }

  /// Tabular policy initialized to reproduce `init` exactly.
  static PolicySpec tabular(int T, const ArParams& init = {}) {
    PolicySpec s{Variant::Tabular, T, std::vector<double>(tabular_size(T))};
    for (int t = 0; t < T; ++t) {
      for (int c = 0; c <= t; ++c) s.params[tabular_index(t, c)] = init.logit(t, c);
    }
    return s;
  }

  static constexpr std::size_t tabular_index(int t, int c) noexcept {
    return static_cast<std::size_t>(t) * (t + 1) / 2 + c;
  }
  static constexpr std::size_t tabular_size(int T) noexcept { return tabular_index(T, 0); }

  std::size_t dim() const noexcept { return params.size(); }

  double logit(int t, int c) const noexcept {
    if (variant == Variant::TwoParam) return params[0] + params[1] * c;
    return params[tabular_index(t, c)];
  }

  /// g += weight * d/dtheta log P(y_t = y | c_t = c).
  void add_token_grad(int t, int c, int y, double weight, std::span<double> g) const noexcept {
    const double resid = weight * (y - sigmoid(logit(t, c)));
    if (variant == Variant::TwoParam) {
      g[0] += resid;
      g[1] += resid * c;
    } else {
      g[tabular_index(t, c)] += resid;
    }
  }

  ArParams as_ar() const {
    if (variant != Variant::TwoParam) throw ConfigError("tabular policy has no (a, b) form");
    return {params[0], params[1]};
  }

  bool finite() const noexcept {
    for (double v : params) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  void validate() const {
    if (T < 1) throw ConfigError("policy length T must be >= 1");
    const std::size_t want = variant == Variant::TwoParam ? 2 : tabular_size(T);
    if (params.size() != want) {
      throw ShapeError("policy expects " + std::to_string(want) + " parameters, got " +
                       std::to_string(params.size()));
    }
    if (!finite()) throw InvalidParameterError("policy parameters must be finite");
  }

  friend bool operator==(const PolicySpec&, const PolicySpec&) = default;
};

inline std::string_view to_string(PolicySpec::Variant v) noexcept {
  return v == PolicySpec::Variant::TwoParam ? "TwoParam" : "Tabular";
}

}  // namespace klgrad
