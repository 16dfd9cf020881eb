#include <gtest/gtest.h>

#include <cmath>

#include "support/generators.hpp"
#include "vaedg/baselines.hpp"
#include "vaedg/model.hpp"

using namespace vaedg;

namespace {

std::vector<std::vector<double>> random_variances(Rng& rng, int domains, int k) {
  std::vector<std::vector<double>> v(domains, std::vector<double>(k));
  for (auto& row : v)
    for (auto& e : row) e = rng.uniform(0.0, 2.0);
  return v;
}

ParameterSet<float> random_params(Rng& rng) {
  ParameterSet<float> p;
  p.add("a", ParamGroup::encoder, {3, 2});
  p.add("b", ParamGroup::head, {4});
  for (auto& prm : p)
    for (auto& v : prm.value.data) v = static_cast<float>(rng.uniform(-2.0, 2.0));
  return p;
}

}  // namespace

TEST(Erm, IsCrossEntropy) {
  Tensor<float> logits({2, 5}, 0.0f);
  EXPECT_NEAR(erm_step_loss(logits, std::vector<int>{0, 4}), std::log(5.0), 1e-6);
}

TEST(FishrPenalty, ZeroOnIdenticalVariances) {
  EXPECT_EQ(fishr_penalty({{0.5, 2.0, 1.0}, {0.5, 2.0, 1.0}, {0.5, 2.0, 1.0}}), 0.0);
}

TEST(FishrPenalty, TwoDomainFixture) {
  // mean (2, 2); each domain is off by 1 in both coordinates.
  EXPECT_DOUBLE_EQ(fishr_penalty({{1.0, 1.0}, {3.0, 3.0}}), 1.0);
}

TEST(FishrPenalty, QuadraticScalingAndSymmetry) {
  Rng rng(1);
  for (int c = 0; c < gen::kCases; ++c) {
    auto v = random_variances(rng, 2 + static_cast<int>(rng.below(3)), 1 + static_cast<int>(rng.below(6)));
    const double base = fishr_penalty(v);
    const double s = rng.uniform(0.1, 10.0);
    auto scaled = v;
    for (auto& r : scaled)
      for (auto& e : r) e *= s;
    EXPECT_NEAR(fishr_penalty(scaled), s * s * base, 1e-9 * (1 + s * s * base));
    auto swapped = v;
    std::swap(swapped.front(), swapped.back());
    EXPECT_NEAR(fishr_penalty(swapped), base, 1e-12);
    auto shifted = v;
    for (auto& r : shifted)
      for (auto& e : r) e += 3.0;
    EXPECT_NEAR(fishr_penalty(shifted), base, 1e-9);
    EXPECT_GE(base, 0.0);
  }
}

TEST(FishrPenalty, GradientMatchesFiniteDifferences) {
  Rng rng(2);
  auto v = random_variances(rng, 3, 4);
  const auto g = fishr_penalty_grad(v);
  const double h = 1e-6;
  for (std::size_t d = 0; d < v.size(); ++d)
    for (std::size_t k = 0; k < v[d].size(); ++k) {
      const double s = v[d][k];
      v[d][k] = s + h;
      const double up = fishr_penalty(v);
      v[d][k] = s - h;
      const double down = fishr_penalty(v);
      v[d][k] = s;
      EXPECT_NEAR(g[d][k], (up - down) / (2 * h), 1e-7);
    }
}

TEST(FishrPenalty, ShapeErrors) {
  EXPECT_THROW(fishr_penalty({{1.0, 2.0}, {1.0}}), InvalidInput);
  EXPECT_THROW(fishr_penalty(std::vector<std::vector<double>>{{1.0, 2.0}}), InvalidInput);
}

TEST(GradientVariance, ScaledMovingAverage) {
  GradientVarianceState s(0.95);
  const std::vector<double> v{2.0, 4.0};
  const auto first = s.update(0, v);
  EXPECT_NEAR(first[0], 2.0, 1e-12);
  EXPECT_NEAR(first[1], 4.0, 1e-12);
  // Reported value is ema / (1 - decay) with ema_t = decay * ema_{t-1} + (1 - decay) * v_t.
  double ema = 0.05 * 4.0;
  for (int i = 0; i < 30; ++i) {
    s.update(0, v);
    ema = 0.95 * ema + 0.05 * 4.0;
  }
  EXPECT_NEAR(s.variances.at(0)[1], ema / 0.05, 1e-9);
  EXPECT_EQ(s.updates, 31);
  EXPECT_THROW(GradientVarianceState(1.0), InvalidInput);
  EXPECT_THROW(s.update(0, std::vector<double>{1.0}), InvalidInput);
}

TEST(FishrTerm, MatchesHandComputedVariance) {
  // Two identical domains of two samples each, hidden size 1 and 2 classes.
  GradientVarianceState s(0.5);  // first update reports the batch variance itself
  Tensor<double> logits({4, 2}), hidden({4, 1});
  logits.data = {0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0};
  hidden.data = {1.0, 3.0, 1.0, 3.0};
  const std::vector<int> labels{0, 1, 0, 1}, domains{0, 0, 1, 1};
  const auto t = fishr_term(s, logits, hidden, labels, domains);
  EXPECT_NEAR(t.penalty, 0.0, 1e-12);
  // e = softmax - onehot = (-.5, .5) and (.5, -.5); grads [e*h, e]:
  // sample 0: (-.5, .5, -.5, .5), sample 1: (1.5, -1.5, .5, -.5).
  // population variance per coordinate: (1, 1, .25, .25).
  const auto& v = s.variances.at(0);
  ASSERT_EQ(v.size(), 4u);
  EXPECT_NEAR(v[0], 1.0, 1e-12);
  EXPECT_NEAR(v[1], 1.0, 1e-12);
  EXPECT_NEAR(v[2], 0.25, 1e-12);
  EXPECT_NEAR(v[3], 0.25, 1e-12);
  EXPECT_EQ(s.variances.at(1), v);
}

TEST(FishrTerm, GradientsMatchFiniteDifferences) {
  Rng rng(3);
  auto logits = gen::uniform_tensor(rng, {6, 3}, -2, 2);
  auto hidden = gen::uniform_tensor(rng, {6, 4}, 0, 2);
  const std::vector<int> labels{0, 1, 2, 2, 1, 0}, domains{0, 0, 0, 1, 1, 1};
  GradientVarianceState warm(0.9);
  fishr_term(warm, logits, hidden, labels, domains);  // non-trivial history
  auto penalty = [&] {
    auto s = warm;
    return fishr_term(s, logits, hidden, labels, domains).penalty;
  };
  auto s = warm;
  const auto t = fishr_term(s, logits, hidden, labels, domains);
  const double h = 1e-6;
  auto check = [&](Tensor<double>& x, const Tensor<double>& g) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double v = x[i];
      x[i] = v + h;
      const double up = penalty();
      x[i] = v - h;
      const double down = penalty();
      x[i] = v;
      EXPECT_NEAR(g[i], (up - down) / (2 * h), 1e-6 * std::max(1.0, std::abs(g[i])));
    }
  };
  check(logits, t.d_logits);
  check(hidden, t.d_hidden);
}

TEST(Swad, WindowCoversFinalHalf) {
  const auto w = swad_window(2000, 0.5);
  EXPECT_EQ(w.start_step, 1000);
  EXPECT_EQ(w.end_step, 2000);
  EXPECT_THROW(swad_window(100, 1.5), InvalidInput);
}

TEST(Swad, IdentityOnConstantCheckpoints) {
  Rng rng(4);
  const auto p = random_params(rng);
  auto w = swad_window(10, 0.5);
  for (long s = 5; s <= 10; ++s) swad_absorb(w, p, s);
  EXPECT_TRUE(swad_finalize(w) == p);
}

TEST(Swad, ExactMidpoint) {
  ParameterSet<float> a, b;
  a.add("w", ParamGroup::head, {2});
  b.add("w", ParamGroup::head, {2});
  a[0].value.data = {1.0f, -3.0f};
  b[0].value.data = {2.0f, 5.0f};
  auto w = swad_window(4, 0.5);
  swad_absorb(w, a, 2);
  swad_absorb(w, b, 4);
  const auto m = swad_finalize(w);
  EXPECT_EQ(m[0].value.data, (AlignedVector<float>{1.5f, 1.0f}));
}

TEST(Swad, CommutesWithAffineMaps) {
  Rng rng(5);
  for (int c = 0; c < 20; ++c) {
    std::vector<ParameterSet<float>> ckpts;
    for (int i = 0; i < 4; ++i) ckpts.push_back(random_params(rng));
    const float a = 0.5f, b = 0.25f;  // exact in binary
    auto w = swad_window(8, 0.5), wt = swad_window(8, 0.5);
    for (int i = 0; i < 4; ++i) {
      swad_absorb(w, ckpts[i], 5 + i);
      auto t = ckpts[i];
      for (auto& prm : t)
        for (auto& v : prm.value.data) v = a * v + b;
      swad_absorb(wt, t, 5 + i);
    }
    auto avg = swad_finalize(w);
    const auto avg_t = swad_finalize(wt);
    for (std::size_t p = 0; p < avg.size(); ++p)
      for (std::size_t i = 0; i < avg[p].value.size(); ++i)
        EXPECT_NEAR(avg_t[p].value[i], a * avg[p].value[i] + b, 1e-6);
  }
}

TEST(Swad, OutOfWindowAndLayoutErrors) {
  Rng rng(6);
  const auto p = random_params(rng);
  auto w = swad_window(10, 0.5);
  EXPECT_THROW(swad_absorb(w, p, 2), InvalidInput);
  swad_absorb(w, p, 6);
  ParameterSet<float> other;
  other.add("z", ParamGroup::head, {1});
  EXPECT_THROW(swad_absorb(w, other, 7), InvalidInput);
  auto empty = swad_window(10, 0.5);
  EXPECT_THROW(swad_finalize(empty), InvalidInput);
}

TEST(FishrPenalty, ExactlyZeroForIdenticalRandomDomains) {
  Rng rng(21);
  for (int c = 0; c < gen::kCases; ++c) {
    const int domains = 2 + static_cast<int>(rng.below(4)), k = 1 + static_cast<int>(rng.below(9));
    std::vector<double> v(k);
    for (auto& e : v) e = rng.uniform(0.0, 3.0);
    const std::vector<std::vector<double>> same(domains, v);
    EXPECT_EQ(fishr_penalty(same), 0.0);
    for (const auto& g : fishr_penalty_grad(same))
      for (double e : g) EXPECT_EQ(e, 0.0);
  }
}
