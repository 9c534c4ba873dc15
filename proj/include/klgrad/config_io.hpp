#pragma once

// JSON encodings of every configuration type. Decoders reject unknown keys;
// missing keys keep their defaults.

#include <cstdint>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "klgrad/ar_model.hpp"
#include "klgrad/error.hpp"
#include "klgrad/estimators.hpp"
#include "klgrad/gradient_lab.hpp"
#include "klgrad/policy.hpp"
#include "klgrad/trainer.hpp"

namespace klgrad {

using json = nlohmann::json;

inline void require_object(const json& j, std::string_view context) {
  if (!j.is_object()) throw ConfigError(std::string(context) + " must be a JSON object");
}

inline void reject_unknown_keys(const json& j, std::initializer_list<std::string_view> allowed,
                                std::string_view context) {
  require_object(j, context);
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError("unknown key '" + key + "' in " + std::string(context));
  }
}

template <typename T>
void read_key(const json& j, const char* key, T& out, std::string_view context) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string(context) + "." + key + ": " + e.what());
  }
}

// ---- ArParams

inline json to_json(const ArParams& p) { return {{"a", p.a}, {"b", p.b}}; }

inline ArParams ar_params_from_json(const json& j, std::string_view context, ArParams fallback = {}) {
  reject_unknown_keys(j, {"a", "b"}, context);
  read_key(j, "a", fallback.a, context);
  read_key(j, "b", fallback.b, context);
  fallback.validate();
  return fallback;
}

// ---- enums

inline std::vector<EstimatorKind> kinds_from_json(const json& j, std::string_view context) {
  if (!j.is_array()) throw ConfigError(std::string(context) + " must be an array");
  std::vector<EstimatorKind> out;
  for (const auto& v : j) {
    if (!v.is_string()) throw ConfigError(std::string(context) + " entries must be strings");
    out.push_back(parse_estimator_kind(v.get<std::string>()));
  }
  return out;
}

inline std::vector<KLPlacement> placements_from_json(const json& j, std::string_view context) {
  if (!j.is_array()) throw ConfigError(std::string(context) + " must be an array");
  std::vector<KLPlacement> out;
  for (const auto& v : j) {
    if (!v.is_string()) throw ConfigError(std::string(context) + " entries must be strings");
    out.push_back(parse_placement(v.get<std::string>()));
  }
  return out;
}

// ---- PolicySpec

inline json to_json(const PolicySpec& p) {
  if (p.variant == PolicySpec::Variant::TwoParam) {
    return {{"variant", "TwoParam"}, {"T", p.T}, {"a", p.params[0]}, {"b", p.params[1]}};
  }
  return {{"variant", "Tabular"}, {"T", p.T}, {"logits", p.params}};
}

inline PolicySpec policy_from_json(const json& j) {
  constexpr std::string_view ctx = "policy";
  reject_unknown_keys(j, {"variant", "T", "a", "b", "init", "logits"}, ctx);
  std::string variant = "TwoParam";
  int T = 16;
  read_key(j, "variant", variant, ctx);
  read_key(j, "T", T, ctx);
  if (T < 1) throw ConfigError("policy.T must be >= 1");
  if (variant == "TwoParam") {
    if (j.contains("init") || j.contains("logits")) throw ConfigError("TwoParam policy takes 'a' and 'b'");
    ArParams p;
    read_key(j, "a", p.a, ctx);
    read_key(j, "b", p.b, ctx);
    p.validate();
    return PolicySpec::two_param(p, T);
  }
  if (variant == "Tabular") {
    if (j.contains("a") || j.contains("b")) throw ConfigError("Tabular policy takes 'init' or 'logits'");
    if (j.contains("logits")) {
      PolicySpec s{PolicySpec::Variant::Tabular, T, {}};
      read_key(j, "logits", s.params, ctx);
      s.validate();
      return s;
    }
    ArParams init;
    if (j.contains("init")) init = ar_params_from_json(j.at("init"), "policy.init");
    return PolicySpec::tabular(T, init);
  }
  throw ConfigError("unknown policy variant '" + variant + "' (expected TwoParam or Tabular)");
}

// ---- RewardSpec

inline json to_json(const RewardSpec& r) {
  switch (r.kind) {
    case RewardSpec::Kind::CountTarget: return {{"kind", "CountTarget"}, {"target", r.target}};
    case RewardSpec::Kind::ParityOnes: return {{"kind", "ParityOnes"}};
    case RewardSpec::Kind::Custom: break;
  }
  throw ConfigError("custom reward predicates cannot be serialized");
}

inline RewardSpec reward_from_json(const json& j) {
  constexpr std::string_view ctx = "reward";
  reject_unknown_keys(j, {"kind", "target"}, ctx);
  std::string kind = "CountTarget";
  read_key(j, "kind", kind, ctx);
  if (kind == "CountTarget") {
    if (!j.contains("target")) throw ConfigError("CountTarget reward needs 'target'");
    int target = 0;
    read_key(j, "target", target, ctx);
    return RewardSpec::count_target(target);
  }
  if (kind == "ParityOnes") {
    if (j.contains("target")) throw ConfigError("ParityOnes reward takes no 'target'");
    return RewardSpec::parity_ones();
  }
  throw ConfigError("unknown reward kind '" + kind + "' (expected CountTarget or ParityOnes)");
}

// ---- KLConfig

inline json to_json(const KLConfig& k) {
  return {{"kind", std::string(to_string(k.kind))}, {"placement", std::string(to_string(k.placement))}, {"beta", k.beta}};
}

inline KLConfig kl_from_json(const json& j, KLConfig base = {}) {
  constexpr std::string_view ctx = "kl";
  reject_unknown_keys(j, {"kind", "placement", "beta"}, ctx);
  std::string kind{to_string(base.kind)}, placement{to_string(base.placement)};
  read_key(j, "kind", kind, ctx);
  read_key(j, "placement", placement, ctx);
  base.kind = parse_estimator_kind(kind);
  base.placement = parse_placement(placement);
  read_key(j, "beta", base.beta, ctx);
  if (!(base.beta >= 0.0)) throw ConfigError("kl.beta must be >= 0");
  return base;
}

// ---- TrainConfig

inline json to_json(const TrainConfig& c) {
  return {{"policy", to_json(c.policy)},
          {"reward", to_json(c.reward)},
          {"kl", to_json(c.kl)},
          {"group_size", c.group_size},
          {"prompts_per_batch", c.prompts_per_batch},
          {"minibatches_per_batch", c.minibatches_per_batch},
          {"async_lag", c.async_lag},
          {"clip_eps", c.clip_eps},
          {"learning_rate", c.learning_rate},
          {"steps", c.steps},
          {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const json& j) {
  constexpr std::string_view ctx = "train config";
  reject_unknown_keys(j,
                      {"policy", "reward", "kl", "group_size", "prompts_per_batch", "minibatches_per_batch",
                       "async_lag", "clip_eps", "learning_rate", "steps", "seed"},
                      ctx);
  TrainConfig c;
  if (j.contains("policy")) c.policy = policy_from_json(j.at("policy"));
  c.learning_rate = default_learning_rate(c.policy.variant);
  if (j.contains("reward")) c.reward = reward_from_json(j.at("reward"));
  if (j.contains("kl")) c.kl = kl_from_json(j.at("kl"));
  read_key(j, "group_size", c.group_size, ctx);
  read_key(j, "prompts_per_batch", c.prompts_per_batch, ctx);
  read_key(j, "minibatches_per_batch", c.minibatches_per_batch, ctx);
  read_key(j, "async_lag", c.async_lag, ctx);
  read_key(j, "clip_eps", c.clip_eps, ctx);
  read_key(j, "learning_rate", c.learning_rate, ctx);
  read_key(j, "steps", c.steps, ctx);
  read_key(j, "seed", c.seed, ctx);
  c.validate();
  return c;
}

// ---- SweepSpec (grad-bias)

inline json to_json(const SweepSpec& s) {
  json kinds = json::array();
  for (auto k : s.kinds) kinds.push_back(std::string(to_string(k)));
  json placements = json::array();
  for (auto p : s.placements) placements.push_back(std::string(to_string(p)));
  return {{"kinds", kinds},
          {"placements", placements},
          {"lengths", s.lengths},
          {"trials", s.trials},
          {"n_per_trial", s.n_per_trial},
          {"policy", to_json(s.policy)},
          {"reference", to_json(s.reference)},
          {"seed", s.seed}};
}

inline SweepSpec sweep_spec_from_json(const json& j) {
  constexpr std::string_view ctx = "grad-bias config";
  reject_unknown_keys(j, {"kinds", "placements", "lengths", "trials", "n_per_trial", "policy", "reference", "seed"},
                      ctx);
  SweepSpec s;
  if (j.contains("kinds")) s.kinds = kinds_from_json(j.at("kinds"), "kinds");
  if (j.contains("placements")) s.placements = placements_from_json(j.at("placements"), "placements");
  read_key(j, "lengths", s.lengths, ctx);
  read_key(j, "trials", s.trials, ctx);
  read_key(j, "n_per_trial", s.n_per_trial, ctx);
  if (j.contains("policy")) s.policy = ar_params_from_json(j.at("policy"), "policy");
  if (j.contains("reference")) s.reference = ar_params_from_json(j.at("reference"), "reference");
  read_key(j, "seed", s.seed, ctx);
  s.validate();
  return s;
}

// ---- estimate

struct EstimateSpec {
  std::vector<EstimatorKind> kinds{EstimatorKind::K1, EstimatorKind::K3};
  ArParams policy{0.3, 0.1};
  ArParams reference{0.0, 0.0};
  int T = 16;
  long long n = 200000;
  std::uint64_t seed = 0;

  void validate() const {
    policy.validate();
    reference.validate();
    if (kinds.empty()) throw ConfigError("kinds must be non-empty");
    if (T < 1) throw ConfigError("T must be >= 1");
    if (n < 2) throw ConfigError("n must be >= 2");
  }
};

inline json to_json(const EstimateSpec& s) {
  json kinds = json::array();
  for (auto k : s.kinds) kinds.push_back(std::string(to_string(k)));
  return {{"kinds", kinds},       {"policy", to_json(s.policy)}, {"reference", to_json(s.reference)},
          {"T", s.T},             {"n", s.n},                    {"seed", s.seed}};
}

inline EstimateSpec estimate_spec_from_json(const json& j) {
  constexpr std::string_view ctx = "estimate config";
  reject_unknown_keys(j, {"kinds", "policy", "reference", "T", "n", "seed"}, ctx);
  EstimateSpec s;
  if (j.contains("kinds")) s.kinds = kinds_from_json(j.at("kinds"), "kinds");
  if (j.contains("policy")) s.policy = ar_params_from_json(j.at("policy"), "policy");
  if (j.contains("reference")) s.reference = ar_params_from_json(j.at("reference"), "reference");
  read_key(j, "T", s.T, ctx);
  read_key(j, "n", s.n, ctx);
  read_key(j, "seed", s.seed, ctx);
  s.validate();
  return s;
}

}  // namespace klgrad
