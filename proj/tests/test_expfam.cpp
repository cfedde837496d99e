#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <klrisk/expfam.hpp>

using namespace klrisk;

namespace {

std::vector<FamilyModel> all_families() {
  return {FamilyModel::gaussian(2.0), FamilyModel::gamma(3.0), FamilyModel::poisson(), FamilyModel::binomial(10.0),
          FamilyModel::negbinomial(3.0)};
}

Vec domain_points(const FamilyModel& m) {
  if (m.kind() == FamilyKind::Gaussian) return {-3.0, 0.0, 0.5, 4.0};
  if (m.kind() == FamilyKind::Binomial) return {0.1, 2.5, 5.0, 9.7};
  return {0.05, 1.0, 2.5, 40.0};
}

}  // namespace

TEST(Link, TableExamples) {
  EXPECT_DOUBLE_EQ(link(FamilyModel::gaussian(2), {4.0}).theta[0], 1.0);
  EXPECT_DOUBLE_EQ(link(FamilyModel::gamma(3), {1.0}).theta[0], -3.0);
  EXPECT_DOUBLE_EQ(link(FamilyModel::poisson(), {1.0}).theta[0], 0.0);
}

TEST(Link, RejectsOutOfDomain) {
  EXPECT_THROW(link(FamilyModel::gamma(3), {0.0}), DomainError);
  EXPECT_THROW(link(FamilyModel::poisson(), {-1.0}), DomainError);
  EXPECT_THROW(link(FamilyModel::binomial(4), {4.0}), DomainError);
}

TEST(LogPartition, Examples) {
  EXPECT_DOUBLE_EQ(log_partition(FamilyModel::poisson(), {{0.0}}), 1.0);
  EXPECT_DOUBLE_EQ(log_partition(FamilyModel::gaussian(1), {{0.0}}), 0.0);
  EXPECT_NEAR(log_partition(FamilyModel::gamma(2), {{-2.0}}), 0.0, 1e-15);
  EXPECT_THROW(log_partition(FamilyModel::gamma(2), {{0.0}}), DomainError);
}

TEST(MeanFromNatural, Examples) {
  EXPECT_DOUBLE_EQ(mean_from_natural(FamilyModel::poisson(), {{0.0}})[0], 1.0);
  EXPECT_DOUBLE_EQ(mean_from_natural(FamilyModel::gamma(3), {{-3.0}})[0], 1.0);
  EXPECT_DOUBLE_EQ(mean_from_natural(FamilyModel::gaussian(2), {{1.0}})[0], 4.0);
}

TEST(MeanFromNatural, RoundTripAllFamilies) {
  for (const auto& m : all_families()) {
    Vec mu = domain_points(m);
    Vec back = mean_from_natural(m, link(m, mu));
    for (std::size_t i = 0; i < mu.size(); ++i)
      EXPECT_NEAR(back[i], mu[i], 1e-10 * std::max(1.0, std::abs(mu[i]))) << m.name();
  }
}

TEST(VarianceFunction, Examples) {
  EXPECT_DOUBLE_EQ(variance_function(FamilyModel::gamma(4), {2.0})[0], 1.0);
  EXPECT_DOUBLE_EQ(variance_function(FamilyModel::poisson(), {5.0})[0], 5.0);
  EXPECT_DOUBLE_EQ(variance_function(FamilyModel::binomial(10), {5.0})[0], 2.5);
  EXPECT_DOUBLE_EQ(variance_function(FamilyModel::negbinomial(3), {6.0})[0], 6.0 + 36.0 / 3.0);
}

TEST(VarianceFunction, MatchesSecondDerivativeOfA) {
  for (const auto& m : all_families()) {
    for (double mu : domain_points(m)) {
      double th = m.link1(mu), h = 1e-4 * std::max(1.0, std::abs(th));
      double d2 = (m.log_partition1(th + h) - 2 * m.log_partition1(th) + m.log_partition1(th - h)) / (h * h);
      EXPECT_GE(d2, 0.0);
      EXPECT_NEAR(d2, m.variance1(mu), 1e-4 * std::max(1.0, m.variance1(mu))) << m.name() << " μ=" << mu;
    }
  }
}

TEST(KlDivergence, Examples) {
  auto g = FamilyModel::gaussian(1);
  EXPECT_NEAR(kl_divergence(g, link(g, {0.0}), link(g, {2.0})), 2.0, 1e-14);
  auto p = FamilyModel::poisson();
  EXPECT_NEAR(kl_divergence(p, link(p, {1.0}), link(p, {M_E})), M_E - 2, 1e-14);
  for (const auto& m : all_families()) {
    auto th = link(m, domain_points(m));
    EXPECT_EQ(kl_divergence(m, th, th), 0.0);
  }
}

TEST(KlDivergence, LocalQuadratic) {
  for (const auto& m : all_families()) {
    for (double mu : domain_points(m)) {
      double th = m.link1(mu), t = 1e-4;
      double kl = kl_divergence(m, {{th}}, {{th + t}});
      EXPECT_NEAR(kl / (t * t), 0.5 * m.variance1(mu), 1e-3 * 0.5 * m.variance1(mu)) << m.name() << " μ=" << mu;
    }
  }
}

TEST(BaseMeasureScore, Examples) {
  EXPECT_EQ(base_measure_score(FamilyModel::gaussian(1), {0.0})[0], 0.0);
  EXPECT_DOUBLE_EQ(base_measure_score(FamilyModel::gaussian(2), {2.0})[0], -0.5);
  EXPECT_DOUBLE_EQ(base_measure_score(FamilyModel::gamma(3), {2.0})[0], 1.0);
  EXPECT_DOUBLE_EQ(base_measure_score(FamilyModel::gamma(1), {5.0})[0], 0.0);
  EXPECT_THROW(base_measure_score(FamilyModel::poisson(), {1.0}), UnsupportedFamily);
  EXPECT_THROW(base_measure_score(FamilyModel::gamma(3), {0.0}), DomainError);
}

TEST(Sample, RejectsDegenerateModels) {
  EXPECT_THROW(FamilyModel::gaussian(0.0), DomainError);
  EXPECT_THROW(FamilyModel::gamma(-1.0), DomainError);
  EXPECT_THROW(sample(FamilyModel::poisson(), {-1.0}, 1), DomainError);
}

TEST(Sample, Deterministic) {
  auto m = FamilyModel::gamma(3);
  Vec mu(50, 2.0);
  EXPECT_EQ(sample(m, mu, 7), sample(m, mu, 7));
  EXPECT_NE(sample(m, mu, 7), sample(m, mu, 8));
}

TEST(Sample, PoissonMean) {
  const std::size_t N = 100000;
  Vec y = sample(FamilyModel::poisson(), Vec(N, 3.0), 11);
  EXPECT_NEAR(mean(y), 3.0, 4 * std::sqrt(3.0 / N));
}

TEST(Sample, ExponentialCdf) {
  const std::size_t N = 100000;
  Vec y = sample(FamilyModel::gamma(1), Vec(N, 1.0), 12);
  double below = static_cast<double>(std::count_if(y.begin(), y.end(), [](double v) { return v <= 1.0; })) / N;
  EXPECT_NEAR(below, 1 - std::exp(-1.0), 0.01);
}

TEST(Sample, MomentsAllFamilies) {
  const std::size_t N = 100000;
  for (const auto& m : all_families()) {
    double mu = m.kind() == FamilyKind::Gaussian ? 1.5 : (m.kind() == FamilyKind::Binomial ? 3.0 : 4.0);
    Vec y = sample(m, Vec(N, mu), 21);
    double mbar = mean(y), v = 0;
    for (double x : y) v += (x - mbar) * (x - mbar);
    v /= N - 1;
    double lam = m.variance1(mu);
    EXPECT_NEAR(mbar, mu, 4 * std::sqrt(lam / N)) << m.name();
    EXPECT_NEAR(v / lam, 1.0, 4 / std::sqrt(double(N)) * 3) << m.name();
    for (double x : y) ASSERT_TRUE(m.y_in_support(x));
  }
}

// Two-sample Kolmogorov-Smirnov against sums of n exponentials.
TEST(Sample, GammaIsMeanOfExponentials) {
  const std::size_t N = 4000, n = 5;
  const double mu = 2.0;
  Vec a = sample(FamilyModel::gamma(n), Vec(N, mu), 31);
  Vec b(N, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    Vec e = sample(FamilyModel::gamma(1), Vec(N, mu), 100 + k);
    for (std::size_t i = 0; i < N; ++i) b[i] += e[i] / n;
  }
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double D = 0;
  std::size_t i = 0, j = 0;
  while (i < N && j < N) {
    if (a[i] <= b[j]) ++i;
    else ++j;
    D = std::max(D, std::abs(double(i) - double(j)) / N);
  }
  // p > 0.01 corresponds to D < 1.628·√(2/N).
  EXPECT_LT(D, 1.628 * std::sqrt(2.0 / N));
}
