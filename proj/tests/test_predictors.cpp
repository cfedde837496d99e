#include <gtest/gtest.h>

#include <cmath>
#include <klrisk/expfam.hpp>
#include <klrisk/predictors.hpp>

using namespace klrisk;

namespace {

Vec basis(std::size_t d, std::size_t j) {
  Vec e(d, 0.0);
  e[j] = 1.0;
  return e;
}

Vec ramp(std::size_t d, double lo, double hi) {
  Vec v(d);
  for (std::size_t i = 0; i < d; ++i) v[i] = lo + (hi - lo) * double(i) / double(d - 1);
  return v;
}

}  // namespace

TEST(Identity, EvaluateAndJvp) {
  Identity p;
  EXPECT_EQ(p.evaluate({1, 2, 3}), (Vec{1, 2, 3}));
  EXPECT_EQ(jvp(p, {{1, 2, 3}, {0.5, -1, 2}}), (Vec{0.5, -1, 2}));
  EXPECT_EQ(p.downshift_evaluate({3, 1}, 0), (Vec{2, 1}));
}

TEST(ConstantMean, Downshift) {
  ConstantMean p;
  Vec v = p.downshift_evaluate({1, 2, 3}, 1);
  for (double x : v) EXPECT_DOUBLE_EQ(x, 5.0 / 3.0);
}

TEST(LinearFilter, SmallBandwidthIsIdentity) {
  LinearFilter f({8, 8}, 1e-3);
  Vec y = ramp(64, 1, 5);
  Vec out = f.evaluate(y);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(out[i], y[i], 1e-12);
}

TEST(LinearFilter, RowsSumToOne) {
  LinearFilter f({16, 12}, 1.7);
  Vec out = f.evaluate(Vec(192, 1.0));
  for (double v : out) EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(LinearFilter, JvpIsColumnAndSymmetric) {
  LinearFilter f({8, 8}, 1.3);
  Vec y = ramp(64, 1, 3);
  Vec c3 = jvp(f, {y, basis(64, 3)});
  Vec c9 = jvp(f, {y, basis(64, 9)});
  EXPECT_NEAR(c3[9], c9[3], 1e-15);
  EXPECT_NEAR(c3[3], f.center_weight(), 1e-15);
  EXPECT_NEAR(f.trace(), 64 * f.center_weight(), 1e-12);
}

TEST(LinearFilter, DownshiftByLinearity) {
  LinearFilter f({8, 8}, 0.9);
  Vec y = ramp(64, 2, 9);
  Vec a = f.downshift_evaluate(y, 5);
  Vec b = sub(f.evaluate(y), f.evaluate(basis(64, 5)));
  for (std::size_t i = 0; i < 64; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(FiniteDifference, MatchesAnalyticJacobian) {
  FunctionPredictor p([](const Vec& y) {
    Vec o(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) o[i] = y[i] * y[i] + std::sin(y[(i + 1) % y.size()]);
    return o;
  });
  Vec y{0.3, 1.2, -0.7}, z{1.0, -2.0, 0.5};
  Vec got = jvp(p, {y, z});
  for (std::size_t i = 0; i < 3; ++i) {
    double want = 2 * y[i] * z[i] + std::cos(y[(i + 1) % 3]) * z[(i + 1) % 3];
    EXPECT_NEAR(got[i], want, 1e-6);
  }
}

TEST(NaturalEvaluate, Examples) {
  Identity id;
  auto g = FamilyModel::gaussian(1);
  EXPECT_EQ(natural_evaluate(id, g, {0.5, -1}).theta, (Vec{0.5, -1}));
  EXPECT_NEAR(natural_jvp(id, g, {0.5, -1}, {1, 2})[1], 2.0, 1e-12);

  Fixed one(Vec{1.0});
  auto gm = FamilyModel::gamma(3);
  EXPECT_DOUBLE_EQ(natural_evaluate(one, gm, {2.0}).theta[0], -3.0);
  EXPECT_EQ(natural_jvp(one, gm, {2.0}, {1.0})[0], 0.0);

  auto p = FamilyModel::poisson();
  EXPECT_DOUBLE_EQ(natural_evaluate(id, p, {2.0}).theta[0], std::log(2.0));
  EXPECT_NEAR(natural_jvp(id, p, {2.0}, {1.0})[0], 0.5, 1e-12);
}

TEST(Floor, AppliedOnlyInLinks) {
  Fixed zero(Vec{0.0, 2.0});
  auto p = FamilyModel::poisson();
  Vec y{1.0, 3.0};
  EXPECT_EQ(zero.evaluate(y)[0], 0.0);
  NaturalPoint th = natural_evaluate(zero, p, y);
  EXPECT_DOUBLE_EQ(th.theta[0], std::log(1e-8 * 2.0));
}

TEST(NonLocalMeans, WeightsAndRows) {
  Grid2D g{16, 16};
  auto m = FamilyModel::gamma(3);
  Vec y = sample(m, Vec(256, 2.0), 3);
  NonLocalMeans nlm(g, 0.5, m);
  Vec out = nlm.evaluate(y);
  double lo = *std::min_element(y.begin(), y.end()), hi = *std::max_element(y.begin(), y.end());
  for (double v : out) {
    EXPECT_GE(v, lo - 1e-12);
    EXPECT_LE(v, hi + 1e-12);
  }
  for (long dy = -2; dy <= 2; ++dy)
    for (long dx = -2; dx <= 2; ++dx) {
      double w = nlm.weight(y, 37, dy, dx);
      EXPECT_GT(w, 0.0);
      EXPECT_LE(w, nlm.weight(y, 37, 0, 0));
    }
  EXPECT_DOUBLE_EQ(nlm.weight(y, 37, 0, 0), 1.0);
}

TEST(NonLocalMeans, UnnormalizedMode) {
  Grid2D g{8, 8};
  auto m = FamilyModel::gaussian(1);
  NlmOptions o;
  o.normalized = false;
  o.search = 3;
  o.patch = 3;
  NonLocalMeans nlm(g, 1e-6, m, o);
  Vec y = ramp(64, 0, 10);
  // With vanishing bandwidth only the self-weight survives.
  Vec out = nlm.evaluate(y);
  for (std::size_t i = 0; i < 64; ++i) EXPECT_NEAR(out[i], y[i], 1e-9);
}

TEST(NonLocalMeans, JvpByFiniteDifferences) {
  Grid2D g{8, 8};
  auto m = FamilyModel::poisson();
  Vec y = sample(m, ramp(64, 3, 20), 5);
  for (double& v : y) v += 1;
  NonLocalMeans nlm(g, 2.0, m);
  Vec z = basis(64, 10);
  Vec got = nlm.jvp(y, z);
  double h = 1e-5;
  Vec yp = y, ym = y;
  yp[10] += h;
  ym[10] -= h;
  Vec fp = nlm.evaluate(yp), fm = nlm.evaluate(ym);
  for (std::size_t i = 0; i < 64; ++i) EXPECT_NEAR(got[i], (fp[i] - fm[i]) / (2 * h), 1e-4);
}
