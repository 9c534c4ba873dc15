#include "catch_amalgamated.hpp"

#include <cmath>
#include <numeric>
#include <vector>

#include "klgrad/trainer.hpp"
#include "oracles.hpp"

using Catch::Matchers::WithinAbs;
using namespace klgrad;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.policy = PolicySpec::two_param({0.0, 0.0}, 8);
  c.reward = RewardSpec::count_target(6);
  c.group_size = 4;
  c.prompts_per_batch = 4;
  c.steps = 30;
  c.seed = 3;
  return c;
}

std::vector<SequenceSample> draw(const PolicySpec& p, int n, Rng& rng) {
  std::vector<SequenceSample> out;
  for (int i = 0; i < n; ++i) out.push_back(sample_sequence(p, p.T, rng));
  return out;
}

bool same_trace(const TrainResult& x, const TrainResult& y) {
  if (x.metrics.size() != y.metrics.size() || x.final_policy.params != y.final_policy.params) return false;
  for (std::size_t i = 0; i < x.metrics.size(); ++i) {
    const auto& a = x.metrics[i];
    const auto& b = y.metrics[i];
    if (a.mean_reward != b.mean_reward || a.exact_reverse_kl != b.exact_reverse_kl ||
        a.exact_forward_kl != b.exact_forward_kl || a.entropy != b.entropy || a.grad_norm != b.grad_norm ||
        a.collapse_flag != b.collapse_flag)
      return false;
  }
  return true;
}

}  // namespace

TEST_CASE("PolicySpec", "[trainer]") {
  const ArParams p{0.4, -0.2};
  const auto tab = PolicySpec::tabular(6, p);
  CHECK(tab.dim() == 21);
  CHECK(PolicySpec::tabular_index(3, 2) == 8);
  for (int t = 0; t < 6; ++t)
    for (int c = 0; c <= t; ++c) CHECK(tab.logit(t, c) == p.logit(t, c));
  CHECK(PolicySpec::two_param(p, 6).as_ar().a == p.a);
  CHECK_THROWS_AS(tab.as_ar(), ConfigError);
  PolicySpec bad = tab;
  bad.params.pop_back();
  CHECK_THROWS_AS(bad.validate(), ShapeError);
  bad = tab;
  bad.params[3] = NAN;
  CHECK_THROWS_AS(bad.validate(), InvalidParameterError);
}

TEST_CASE("RewardSpec", "[trainer]") {
  const std::vector<int> y{1, 0, 1, 1};
  CHECK(RewardSpec::count_target(3)(y) == 1);
  CHECK(RewardSpec::count_target(2)(y) == 0);
  CHECK(RewardSpec::parity_ones()(y) == 1);
  CHECK(RewardSpec::custom([](std::span<const int> t) { return t[0] == 0; })(y) == 0);
  CHECK_THROWS_AS(RewardSpec::count_target(5).validate(4), ConfigError);
  CHECK_THROWS_AS(RewardSpec::custom(nullptr).validate(4), ConfigError);

  SECTION("exact expected reward matches enumeration") {
    const ArParams m{0.2, 0.15};
    for (const auto& r : {RewardSpec::count_target(4), RewardSpec::parity_ones()}) {
      const double want = oracle::expect({m.a, m.b}, 9, [&](const std::vector<int>& s) { return double(r(s)); });
      CHECK_THAT(*r.exact_expected(m, 9), WithinAbs(want, 1e-13));
    }
    CHECK_FALSE(RewardSpec::custom([](std::span<const int>) { return true; }).exact_expected(m, 9).has_value());
  }
}

TEST_CASE("rollout_group", "[trainer]") {
  const int T = 6;
  Rng rng(4);
  for (const auto& r : rollout_group(PolicySpec::two_param({20, 0}, T), RewardSpec::count_target(T), 8, rng))
    CHECK(r.reward == 1);
  for (const auto& r : rollout_group(PolicySpec::two_param({-20, 0}, T), RewardSpec::count_target(T), 8, rng))
    CHECK(r.reward == 0);
  Rng r1(8), r2(8);
  const auto g1 = rollout_group(PolicySpec::two_param({0.1, 0.1}, T), RewardSpec::parity_ones(), 5, r1);
  const auto g2 = rollout_group(PolicySpec::two_param({0.1, 0.1}, T), RewardSpec::parity_ones(), 5, r2);
  for (int i = 0; i < 5; ++i) {
    CHECK(g1[i].sample.tokens == g2[i].sample.tokens);
    CHECK(g1[i].reward == g2[i].reward);
  }
  CHECK_THROWS_AS(rollout_group(PolicySpec::two_param({0, 0}, T), RewardSpec::parity_ones(), 1, rng), ConfigError);
}

TEST_CASE("rloo_advantage", "[trainer]") {
  CHECK(rloo_advantage(std::vector<double>{1, 0}) == std::vector<double>{1, -1});
  for (double a : rloo_advantage(std::vector<double>{1, 1, 1})) CHECK(a == 0.0);
  const std::vector<double> r{1, 0, 0, 1, 1, 0, 1};
  const auto a = rloo_advantage(r);
  CHECK_THAT(std::accumulate(a.begin(), a.end(), 0.0), WithinAbs(0.0, 1e-14));
  CHECK_THAT(a[0], WithinAbs(1.0 - 3.0 / 6.0, 1e-15));
  CHECK_THROWS_AS(rloo_advantage(std::vector<double>{1}), ConfigError);
}

TEST_CASE("apply_kl_to_reward", "[trainer]") {
  const std::vector<double> adv{1.0, -0.5};
  const std::vector<std::vector<double>> kl{{0.5, 1.5}, {0.2, 0.3}};
  const auto none = apply_kl_to_reward(adv, kl, 0.0);
  CHECK(none[0] == std::vector<double>{1.0, 1.0});
  CHECK(none[1] == std::vector<double>{-0.5, -0.5});
  const auto pen = apply_kl_to_reward(adv, kl, 0.1);
  CHECK_THAT(pen[0][0], WithinAbs(0.8, 1e-15));
  CHECK_THAT(pen[0][1], WithinAbs(0.8, 1e-15));
  CHECK_THAT(pen[1][0], WithinAbs(-0.55, 1e-15));

  SECTION("K1 penalty at the reference is zero") {
    const auto p = PolicySpec::two_param({0.3, 0.1}, 5);
    Rng rng(1);
    const auto s = sample_sequence(p, 5, rng);
    for (double v : kl_token_values(EstimatorKind::K1, s, p)) CHECK(v == 0.0);
  }
  CHECK_THROWS_AS(apply_kl_to_reward(adv, std::vector<std::vector<double>>{{0.1}}, 0.1), ShapeError);
}

TEST_CASE("surrogate_gradient", "[trainer]") {
  const auto pol = PolicySpec::two_param({0.3, -0.1}, 6);
  Rng rng(12);
  const auto batch = draw(pol, 10, rng);
  std::vector<std::vector<double>> adv;
  for (int i = 0; i < 10; ++i) adv.emplace_back(6, 0.1 * (i - 4.5));

  SECTION("on-policy equals plain REINFORCE") {
    const double norm = 60.0;
    const auto g = surrogate_gradient(pol, pol, batch, adv, 0.2, norm);
    Grad2 want;
    for (int i = 0; i < 10; ++i) want += (adv[i][0] / norm) * score_vector(pol.as_ar(), batch[i]);
    CHECK_FALSE(g.collapsed);
    CHECK_THAT(g.grad[0], WithinAbs(want.a, 1e-10));
    CHECK_THAT(g.grad[1], WithinAbs(want.b, 1e-10));
  }
  SECTION("zero advantages give zero gradient") {
    std::vector<std::vector<double>> zero(10, std::vector<double>(6, 0.0));
    for (double v : surrogate_gradient(pol, pol, batch, zero, 0.2, 60).grad) CHECK(v == 0.0);
  }
  SECTION("clipped branch contributes nothing") {
    // policy p(1) = 0.75, old p(1) = 0.5, so w = 1.5 > 1 + eps
    const auto cur = PolicySpec::two_param({std::log(3.0), 0}, 1);
    const auto old = PolicySpec::two_param({0, 0}, 1);
    const std::vector<int> y{1};
    const std::vector<SequenceSample> one{{y, {}, prefix_counts(y)}};
    const std::vector<std::vector<double>> a{{1.0}};
    const auto g = surrogate_gradient(cur, old, one, a, 0.2, 1);
    CHECK(g.grad[0] == 0.0);
    CHECK(g.grad[1] == 0.0);
    // with a negative advantage the unclipped term is the minimum and flows
    const std::vector<std::vector<double>> neg{{-1.0}};
    CHECK_THAT(surrogate_gradient(cur, old, one, neg, 0.2, 1).grad[0], WithinAbs(-1.5 * 0.25, 1e-14));
  }
  SECTION("non-finite ratio signals collapse") {
    const auto cur = PolicySpec::two_param({800, 0}, 1);
    const auto old = PolicySpec::two_param({-800, 0}, 1);
    const std::vector<int> y{1};
    const std::vector<SequenceSample> one{{y, {}, prefix_counts(y)}};
    const auto g = surrogate_gradient(cur, old, one, std::vector<std::vector<double>>{{1.0}}, 0.2, 1);
    CHECK(g.collapsed);
  }
}

TEST_CASE("kl_loss_gradient", "[trainer]") {
  const auto pol = PolicySpec::two_param({0.3, 0.1}, 7);
  const auto ref = PolicySpec::two_param({-0.2, 0.0}, 7);
  Rng rng(5);
  const auto batch = draw(pol, 40, rng);
  Grad2 mean_score;
  for (const auto& s : batch) mean_score += (1.0 / 40) * score_vector(pol.as_ar(), s);

  for (double v : kl_loss_gradient(EstimatorKind::K3, pol, ref, batch, 0.0)) CHECK(v == 0.0);
  const auto k1 = kl_loss_gradient(EstimatorKind::K1, pol, ref, batch, 0.5);
  CHECK_THAT(k1[0], WithinAbs(0.5 * mean_score.a, 1e-12));
  CHECK_THAT(k1[1], WithinAbs(0.5 * mean_score.b, 1e-12));
  const auto k3 = kl_loss_gradient(EstimatorKind::K3, pol, pol, batch, 0.5);
  CHECK_THAT(k3[0], WithinAbs(-0.5 * mean_score.a, 1e-12));
  CHECK_THAT(k3[1], WithinAbs(-0.5 * mean_score.b, 1e-12));
}

TEST_CASE("exact_diagnostics for tabular policies match enumeration", "[trainer]") {
  auto tab = PolicySpec::tabular(6, {0.1, 0.2});
  for (std::size_t i = 0; i < tab.params.size(); ++i) tab.params[i] += 0.1 * std::sin(3.0 * i);
  const auto ref = PolicySpec::tabular(6, {0, 0});
  const auto m = exact_diagnostics(tab, ref, RewardSpec::count_target(3), 0.0);
  double rev = 0, fwd = 0, ent = 0, er = 0;
  for_each_sequence(6, [&](std::span<const int> y) {
    const double lp = log_prob(tab, y), lq = log_prob(ref, y);
    rev += std::exp(lp) * (lp - lq);
    fwd += std::exp(lq) * (lq - lp);
    ent -= std::exp(lp) * lp;
    er += std::exp(lp) * RewardSpec::count_target(3)(y);
  });
  CHECK_THAT(m.exact_reverse_kl, WithinAbs(rev, 1e-12));
  CHECK_THAT(m.exact_forward_kl, WithinAbs(fwd, 1e-12));
  CHECK_THAT(m.entropy, WithinAbs(ent, 1e-12));
  CHECK_THAT(m.expected_reward, WithinAbs(er, 1e-12));
}

TEST_CASE("TrainConfig validation", "[trainer][errors]") {
  auto c = small_config();
  c.group_size = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.kl.beta = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.clip_eps = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.async_lag = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.minibatches_per_batch = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.reward = RewardSpec::count_target(9);
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("train_run", "[trainer]") {
  SECTION("metrics are sane at every step") {
    const auto r = train_run(small_config());
    REQUIRE(r.metrics.size() == 30);
    for (std::size_t i = 0; i < r.metrics.size(); ++i) {
      const auto& m = r.metrics[i];
      CHECK(m.step == static_cast<int>(i));
      CHECK(m.exact_reverse_kl >= 0.0);
      CHECK(m.exact_forward_kl >= 0.0);
      CHECK(m.entropy >= 0.0);
      CHECK_FALSE(m.collapse_flag);
    }
  }
  SECTION("same config and seed replay identically") {
    auto c = small_config();
    c.kl = {EstimatorKind::K3, KLPlacement::Both, 0.3};
    c.minibatches_per_batch = 2;
    c.async_lag = 2;
    CHECK(same_trace(train_run(c), train_run(c)));
    auto d = c;
    d.seed = 4;
    CHECK_FALSE(same_trace(train_run(c), train_run(d)));
  }
  SECTION("beta = 0 makes the KL configuration inert") {
    auto base = small_config();
    const auto ref = train_run(base);
    for (auto kind : {EstimatorKind::K1, EstimatorKind::K3}) {
      for (auto pl : {KLPlacement::Reward, KLPlacement::Loss, KLPlacement::Both}) {
        auto c = base;
        c.kl = {kind, pl, 0.0};
        CHECK(same_trace(ref, train_run(c)));
      }
    }
  }
  SECTION("reward improves without a penalty") {
    auto c = small_config();
    c.steps = 150;
    const auto r = train_run(c);
    CHECK(r.metrics.back().expected_reward > r.metrics.front().expected_reward);
  }
  SECTION("a strong K1 penalty keeps the policy closer to the reference") {
    auto c = small_config();
    c.steps = 150;
    const auto free_run = train_run(c);
    c.kl = {EstimatorKind::K1, KLPlacement::Reward, 1.0};
    const auto tied = train_run(c);
    CHECK(tied.metrics.back().exact_reverse_kl < free_run.metrics.back().exact_reverse_kl);
  }
  SECTION("tabular policies and lagged sampling run") {
    auto c = small_config();
    c.policy = PolicySpec::tabular(8);
    c.learning_rate = default_learning_rate(c.policy.variant);
    c.async_lag = 3;
    c.minibatches_per_batch = 4;
    c.kl = {EstimatorKind::K3, KLPlacement::Loss, 0.1};
    const auto r = train_run(c);
    CHECK(r.metrics.size() == 30);
    CHECK(r.final_policy.dim() == PolicySpec::tabular_size(8));
    CHECK_FALSE(r.collapsed);
  }
  SECTION("a huge step collapses and later rows stay flagged") {
    auto c = small_config();
    c.reward = RewardSpec::count_target(8);
    c.learning_rate = 1e6;
    c.steps = 40;
    const auto r = train_run(c);
    REQUIRE(r.collapsed);
    REQUIRE(r.metrics.size() == 40);
    for (int s = r.collapse_step; s < 40; ++s) {
      CHECK(r.metrics[s].collapse_flag);
      CHECK(r.metrics[s].step == s);
    }
    for (int s = 0; s < r.collapse_step; ++s) CHECK_FALSE(r.metrics[s].collapse_flag);
  }
  SECTION("zero steps emit nothing") {
    auto c = small_config();
    c.steps = 0;
    CHECK(train_run(c).metrics.empty());
  }
}
