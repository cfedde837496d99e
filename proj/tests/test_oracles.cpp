#include <gtest/gtest.h>

#include <cmath>
#include <klrisk/oracles.hpp>

using namespace klrisk;

TEST(SquaredErrors, Examples) {
  auto g = FamilyModel::gamma(3);
  Vec mu{1.0};
  EXPECT_EQ(se_mu(g, mu, mu), 0.0);
  EXPECT_EQ(se_theta(g, mu, mu), 0.0);
  EXPECT_EQ(se_eta(g, mu, mu), 0.0);
  EXPECT_NEAR(se_theta(g, {1.0}, {2.0}), 9.0 / 4.0, 1e-14);
  auto p = FamilyModel::poisson();
  EXPECT_NEAR(se_eta(p, {1.0}, {2.0}), 1.0, 1e-14);
  EXPECT_NEAR(se_mu(p, {1.0}, {2.0}), 1.0, 1e-14);
}

TEST(Kl, Examples) {
  auto p = FamilyModel::poisson();
  EXPECT_NEAR(kla(p, {1.0}, {M_E}), M_E - 2, 1e-14);
  EXPECT_NEAR(kls(p, {M_E}, {1.0}), M_E - 2, 1e-14);
  for (auto m : {FamilyModel::gaussian(2), FamilyModel::gamma(3), p}) {
    Vec mu{0.5, 2.0, 4.0}, mh{0.7, 2.0, 3.0};
    EXPECT_EQ(kla(m, mu, mu), 0.0);
    EXPECT_EQ(kls(m, mu, mu), 0.0);
    EXPECT_GT(kla(m, mu, mh), 0.0);
    EXPECT_GT(kls(m, mu, mh), 0.0);
  }
}

TEST(Kl, GammaBregmanForm) {
  auto m = FamilyModel::gamma(4);
  double mu = 2.0, mh = 3.0;
  EXPECT_NEAR(kla(m, {mu}, {mh}), 4 * (mu / mh + std::log(mh / mu) - 1), 1e-13);
}

TEST(Mnae, Examples) {
  auto m = FamilyModel::gamma(4);
  EXPECT_EQ(mnae(m, {2.0}, {2.0}), 0.0);
  EXPECT_NEAR(mnae(m, {2.0}, {3.0}), std::sqrt(M_PI / 2), 1e-14);
}

TEST(Mnae, IdentityIsAboutOne) {
  auto m = FamilyModel::gaussian(1);
  Vec mu(20000, 0.0);
  EXPECT_NEAR(mnae(m, mu, sample(m, mu, 3)), 1.0, 0.02);
}

TEST(McMeanLoss, GaussianIdentity) {
  auto m = FamilyModel::gaussian(1);
  Identity id;
  Vec mu(16, 1.0);
  auto r = mc_mean_loss(m, mu, id, LossId::MSE_mu, 20000, 5);
  EXPECT_NEAR(r.mean, 16.0, 3 * r.se);
  auto k = mc_mean_loss(m, mu, id, LossId::MKLA, 20000, 5);
  EXPECT_NEAR(k.mean, r.mean / 2, 1e-9);
  EXPECT_GT(mc_mean_loss(FamilyModel::gamma(3), Vec(8, 2.0), id, LossId::MKLA, 100, 5).mean, 0.0);
}

TEST(McMeanLoss, Deterministic) {
  auto m = FamilyModel::poisson();
  LinearFilter f({4, 4}, 1.0);
  Vec mu(16, 5.0);
  EXPECT_EQ(mc_mean_loss(m, mu, f, LossId::MKLA, 200, 9).mean, mc_mean_loss(m, mu, f, LossId::MKLA, 200, 9).mean);
}

TEST(Decomposition, SumsToMkla) {
  struct Case {
    FamilyModel m;
    double mu;
  };
  for (auto c : {Case{FamilyModel::gaussian(1), 2.0}, Case{FamilyModel::gamma(3), 2.0}, Case{FamilyModel::poisson(), 6.0}}) {
    LinearFilter f({8, 8}, 1.0);
    Vec mu(64);
    for (std::size_t i = 0; i < 64; ++i) mu[i] = c.mu * (1 + 0.5 * std::sin(0.3 * i));
    auto d = mkla_decomposition(c.m, mu, f, 5000, 11);
    EXPECT_NEAR(d.sum.mean, d.mkla.mean, 3 * std::sqrt(d.sum.se * d.sum.se + d.mkla.se * d.mkla.se)) << c.m.name();
  }
}

TEST(Decomposition, GaussianComplexityIsTraceW) {
  const double s = 0.8;
  auto m = FamilyModel::gaussian(s);
  LinearFilter f({8, 8}, 0.9);
  auto d = mkla_decomposition(m, Vec(64, 1.0), f, 20000, 12);
  // θ̂ = Wy/σ², so tr Cov(θ̂, Y) = tr W.
  EXPECT_NEAR(d.complexity.mean, f.trace(), 3 * d.complexity.se);
}

TEST(Decomposition, ConstantPredictorHasNoComplexity) {
  auto m = FamilyModel::gamma(3);
  Fixed p(Vec(4, 1.0));
  auto d = mkla_decomposition(m, Vec(4, 2.0), p, 100, 1);
  EXPECT_EQ(d.complexity.mean, 0.0);
}

TEST(Reliability, ConstantPredictorSukls) {
  auto m = FamilyModel::gamma(3);
  Fixed p(Vec(8, 1.5));
  auto r = reliability(m, Vec(8, 2.0), p, EstimatorId::Sukls, 2000, 3);
  EXPECT_TRUE(r.holds);
  EXPECT_LT(r.max_consistency_error, 1e-9);
}

TEST(Reliability, GsureAndPureRows) {
  LinearFilter f({4, 4}, 1.0);
  auto g = reliability(FamilyModel::gamma(3), Vec(16, 2.0), f, EstimatorId::Gsure, 10000, 4);
  EXPECT_TRUE(g.holds);
  EXPECT_LT(g.max_consistency_error, 1e-9);
  DenseLinear w(8, Vec(64, 1.0 / 8));
  Vec mu{2, 4, 6, 8, 10, 8, 6, 4};
  auto p = reliability(FamilyModel::poisson(), mu, w, EstimatorId::Pure, 10000, 5);
  EXPECT_TRUE(p.holds);
  EXPECT_LT(p.max_consistency_error, 1e-9);
  EXPECT_THROW(reliability(FamilyModel::gaussian(1), Vec(8, 0.0), w, EstimatorId::Sure, 10, 1), UnsupportedFamily);
}

TEST(SelectionMetrics, Examples) {
  auto a = selection_metrics({1, 0}, {1, 0});
  EXPECT_EQ(a.errors, 0.0);
  auto b = selection_metrics({1, 0}, {0, 1});
  EXPECT_EQ(b.errors, 100.0);
  EXPECT_EQ(b.fn, 50.0);
  EXPECT_EQ(b.fp, 50.0);
  auto c = selection_metrics({1, 1, 0, 0}, {1, 0, 0, 0});
  EXPECT_EQ(c.errors, 25.0);
  EXPECT_EQ(c.fn, 25.0);
  EXPECT_EQ(c.fp, 0.0);
  EXPECT_THROW(selection_metrics({1}, {1, 0}), DomainError);
}
