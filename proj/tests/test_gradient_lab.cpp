#include "catch_amalgamated.hpp"

#include <cmath>
#include <vector>

#include "klgrad/gradient_lab.hpp"
#include "oracles.hpp"

using Catch::Matchers::WithinAbs;
using namespace klgrad;

namespace {

const std::vector<std::pair<ArParams, ArParams>> kPairs{
    {{0.3, 0.1}, {0.0, 0.0}},
    {{1.0, 0.1}, {0.0, 0.0}},
    {{-0.4, 0.3}, {0.2, -0.1}},
    {{0.8, -0.25}, {-0.5, 0.2}},
};

void check_grad_eq(const Grad2& got, const Grad2& want, double tol) {
  CHECK_THAT(got.a, WithinAbs(want.a, tol));
  CHECK_THAT(got.b, WithinAbs(want.b, tol));
}

std::vector<SequenceSample> draw(const ArParams& p, int T, int n, Rng& rng) {
  std::vector<SequenceSample> out;
  for (int i = 0; i < n; ++i) out.push_back(sample_sequence(p, T, rng));
  return out;
}

}  // namespace

TEST_CASE("placements parse and print", "[gradient_lab]") {
  CHECK(parse_placement("Both") == KLPlacement::Both);
  CHECK(parse_placement("loss") == KLPlacement::Loss);
  CHECK(to_string(KLPlacement::Reward) == "Reward");
  CHECK_THROWS_AS(parse_placement("Advantage"), ConfigError);
  CHECK(uses_reward(KLPlacement::Both));
  CHECK(uses_loss(KLPlacement::Both));
  CHECK_FALSE(uses_loss(KLPlacement::Reward));
  CHECK_FALSE(uses_reward(KLPlacement::Loss));
}

TEST_CASE("exact configuration expectations", "[gradient_lab][property]") {
  for (const auto& [A, B] : kPairs) {
    for (int T : {1, 3, 7, 10, 12}) {
      const Grad2 truth = exact_kl_grad(A, B, T);
      check_grad_eq(exact_config_expectation(EstimatorKind::K1, KLPlacement::Loss, A, B, T), {0, 0}, 1e-10);
      check_grad_eq(exact_config_expectation(EstimatorKind::K1, KLPlacement::Reward, A, B, T), truth, 1e-10);
      check_grad_eq(exact_config_expectation(EstimatorKind::K1, KLPlacement::Both, A, B, T), truth, 1e-10);
      check_grad_eq(exact_config_expectation(EstimatorKind::K3, KLPlacement::Both, A, B, T), truth, 1e-10);
    }
  }
}

TEST_CASE("K3 placements are individually biased", "[gradient_lab]") {
  const ArParams A{1.0, 0.1}, B{0, 0};
  const Grad2 truth = exact_kl_grad(A, B, 8);
  const Grad2 r = exact_config_expectation(EstimatorKind::K3, KLPlacement::Reward, A, B, 8);
  const Grad2 l = exact_config_expectation(EstimatorKind::K3, KLPlacement::Loss, A, B, 8);
  CHECK((r - truth).norm() > 1e-3);
  CHECK((l - truth).norm() > 1e-3);
  // Reward and Loss parts add up to the unbiased Both placement.
  check_grad_eq(r + l, truth, 1e-10);
}

TEST_CASE("K3 loss term equals the autodiff form in expectation", "[gradient_lab]") {
  const ArParams A{0.3, 0.1}, B{-0.2, 0.3};
  const int T = 9;
  Grad2 autodiff;
  for_each_sequence(T, [&](std::span<const int> y) {
    const auto p = oracle::cond_probs({A.a, A.b}, {y.begin(), y.end()});
    const auto q = oracle::cond_probs({B.a, B.b}, {y.begin(), y.end()});
    const double w = oracle::seq_prob({A.a, A.b}, {y.begin(), y.end()});
    int c = 0;
    for (int t = 0; t < T; ++t) {
      const double pa = y[t] ? p[t] : 1 - p[t];
      const double qa = y[t] ? q[t] : 1 - q[t];
      const double resid = y[t] - p[t];
      autodiff += (w * (1 - qa / pa) * resid) * Grad2{1.0, static_cast<double>(c)};
      c += y[t];
    }
  });
  check_grad_eq(exact_config_expectation(EstimatorKind::K3, KLPlacement::Loss, A, B, T), autodiff, 1e-12);
}

TEST_CASE("exact_config_expectation limits", "[gradient_lab][errors]") {
  CHECK_THROWS_AS(exact_config_expectation(EstimatorKind::K1, KLPlacement::Loss, {0, 0}, {0, 0}, kMaxEnumLength + 1),
                  UnsupportedExactSizeError);
  CHECK_THROWS_AS(exact_config_expectation(EstimatorKind::K1, KLPlacement::Loss, {0, 0}, {0, 0}, 0),
                  EmptySequenceError);
}

TEST_CASE("grad_config", "[gradient_lab]") {
  SECTION("matched models give zero within 4 standard errors") {
    const ArParams A{0.3, 0.1};
    Rng rng(21);
    const auto batch = draw(A, 8, 10000, rng);
    for (auto kind : {EstimatorKind::K1, EstimatorKind::K3}) {
      for (auto pl : {KLPlacement::Reward, KLPlacement::Loss, KLPlacement::Both}) {
        const auto g = grad_config(kind, pl, batch, A, A);
        RunningStats sa, sb;
        for (const auto& s : batch) {
          const Grad2 x = sequence_terms(s, A, A).config(kind, pl);
          sa.push(x.a);
          sb.push(x.b);
        }
        CHECK(g.n == 10000);
        CHECK(std::abs(g.d_a) <= 4 * sa.std_err() + 1e-12);
        CHECK(std::abs(g.d_b) <= 4 * sb.std_err() + 1e-12);
      }
    }
  }
  SECTION("mixed lengths are a shape error") {
    Rng rng(2);
    auto batch = draw({0, 0}, 4, 3, rng);
    batch.push_back(sample_sequence(ArParams{0, 0}, 5, rng));
    CHECK_THROWS_AS(grad_config(EstimatorKind::K1, KLPlacement::Loss, batch, {0, 0}, {0, 0}), ShapeError);
  }
  SECTION("empty batch is rejected") {
    std::vector<SequenceSample> none;
    CHECK_THROWS_AS(grad_config(EstimatorKind::K1, KLPlacement::Loss, none, {0, 0}, {0, 0}), InvalidParameterError);
  }
}

TEST_CASE("bias_variance_sweep", "[gradient_lab]") {
  SweepSpec spec;
  spec.lengths = {3, 6};
  spec.trials = 40;
  spec.n_per_trial = 200;
  spec.policy = {0.3, 0.1};
  spec.seed = 11;
  spec.kinds = {EstimatorKind::K1, EstimatorKind::K3};
  spec.placements = {KLPlacement::Reward, KLPlacement::Loss, KLPlacement::Both};

  const auto serial = bias_variance_sweep(spec, 1);
  REQUIRE(serial.size() == 12);

  SECTION("row order is T, kind, placement") {
    CHECK(serial[0].T == 3);
    CHECK(serial[0].kind == EstimatorKind::K1);
    CHECK(serial[0].placement == KLPlacement::Reward);
    CHECK(serial[2].placement == KLPlacement::Both);
    CHECK(serial[3].kind == EstimatorKind::K3);
    CHECK(serial[6].T == 6);
  }
  SECTION("trial means converge to each configuration's expectation") {
    for (const auto& r : serial) {
      REQUIRE(r.config_exact);
      CHECK(std::abs(r.mean.a - r.config_expectation.a) < 4 * r.se_a() + 1e-12);
      CHECK(std::abs(r.mean.b - r.config_expectation.b) < 4 * r.se_b() + 1e-12);
      CHECK(r.bias_a == r.mean.a - r.true_grad.a);
      CHECK(r.var_trace() == r.var_a + r.var_b);
    }
  }
  SECTION("thread count does not change results") {
    const auto par = bias_variance_sweep(spec, 4);
    REQUIRE(par.size() == serial.size());
    for (std::size_t i = 0; i < par.size(); ++i) {
      CHECK(par[i].mean.a == serial[i].mean.a);
      CHECK(par[i].mean.b == serial[i].mean.b);
      CHECK(par[i].var_a == serial[i].var_a);
      CHECK(par[i].var_b == serial[i].var_b);
    }
  }
  SECTION("a row does not depend on which other configurations are swept") {
    SweepSpec only = spec;
    only.kinds = {EstimatorKind::K3};
    only.placements = {KLPlacement::Loss};
    const auto one = bias_variance_sweep(only, 1);
    REQUIRE(one.size() == 2);
    CHECK(one[0].mean.a == serial[4].mean.a);
    CHECK(one[1].var_b == serial[10].var_b);
  }
  SECTION("lengths above the enumeration limit use the DP truth and flag the config expectation") {
    SweepSpec big = spec;
    big.lengths = {kMaxEnumLength + 2};
    big.trials = 3;
    big.n_per_trial = 10;
    big.kinds = {EstimatorKind::K1};
    big.placements = {KLPlacement::Reward};
    const auto r = bias_variance_sweep(big, 1);
    REQUIRE(r.size() == 1);
    CHECK_FALSE(r[0].config_exact);
    check_grad_eq(r[0].true_grad, exact_kl_grad_dp(big.policy, big.reference, kMaxEnumLength + 2), 0.0);
  }
  SECTION("invalid specs") {
    SweepSpec bad = spec;
    bad.trials = 1;
    CHECK_THROWS_AS(bias_variance_sweep(bad), ConfigError);
    bad = spec;
    bad.lengths = {0};
    CHECK_THROWS_AS(bias_variance_sweep(bad), ConfigError);
  }
}

TEST_CASE("parallel_for propagates worker exceptions", "[gradient_lab]") {
  CHECK_THROWS_AS(parallel_for(50, 4,
                               [](int i) {
                                 if (i == 17) throw ShapeError("boom");
                               }),
                  ShapeError);
}
