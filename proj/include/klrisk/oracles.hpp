#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "errors.hpp"
#include "estimators.hpp"
#include "expfam.hpp"
#include "linalg.hpp"
#include "parallel.hpp"
#include "predictors.hpp"
#include "random.hpp"

namespace klrisk {

inline double se_mu(const FamilyModel&, const Vec& mu, const Vec& mu_hat) { return norm2sq(sub(mu, mu_hat)); }

inline double se_theta(const FamilyModel& m, const Vec& mu, const Vec& mu_hat) {
  return norm2sq(sub(link(m, mu).theta, link(m, mu_hat).theta));
}

// Squared error on η = exp θ.
inline double se_eta(const FamilyModel& m, const Vec& mu, const Vec& mu_hat) {
  Vec a = link(m, mu).theta, b = link(m, mu_hat).theta;
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::exp(a[i]) - std::exp(b[i]);
  return norm2sq(a);
}

inline double kla(const FamilyModel& m, const Vec& mu, const Vec& mu_hat) {
  return kl_divergence(m, link(m, mu), link(m, mu_hat));
}

inline double kls(const FamilyModel& m, const Vec& mu, const Vec& mu_hat) {
  return kl_divergence(m, link(m, mu_hat), link(m, mu));
}

inline double loss_value(LossId id, const FamilyModel& m, const Vec& mu, const Vec& mu_hat) {
  switch (id) {
    case LossId::MSE_mu: return se_mu(m, mu, mu_hat);
    case LossId::MSE_theta: return se_theta(m, mu, mu_hat);
    case LossId::MSE_eta: return se_eta(m, mu, mu_hat);
    case LossId::MKLA: return kla(m, mu, mu_hat);
    case LossId::MKLS: return kls(m, mu, mu_hat);
  }
  throw Error("unknown loss");
}

// The additive constant c with E[estimate] = E[loss] + c under the given
// convention. last_term only matters for MSE_θ.
inline double convention_offset(Convention c, const FamilyModel& m, const Vec& mu) {
  switch (c) {
    case Convention::None: return 0.0;
    case Convention::MinusThetaNorm: return -norm2sq(link(m, mu).theta);
    case Convention::MinusLogPartition: return -log_partition(m, link(m, mu));
    case Convention::PlusMeanTerms: {
      Vec t(mu.size());
      for (std::size_t i = 0; i < mu.size(); ++i) t[i] = mu[i] - mu[i] * std::log(mu[i]);
      return sum(t);
    }
    case Convention::DeltaMethod: {
      NaturalPoint th = link(m, mu);
      return log_partition(m, th) - dot(mu, th.theta);
    }
  }
  return 0.0;
}

// d⁻¹√(π/2) Σ |μᵢ − μ̂ᵢ| / √Λ(μ)ᵢ
inline double mnae(const FamilyModel& m, const Vec& mu, const Vec& mu_hat) {
  require_same_size(mu, mu_hat, "mnae");
  Vec v = variance_function(m, mu);
  Vec t(mu.size());
  for (std::size_t i = 0; i < mu.size(); ++i) {
    if (!(v[i] > 0)) throw DomainError("mnae: Λ(μ) must be > 0");
    t[i] = std::abs(mu[i] - mu_hat[i]) / std::sqrt(v[i]);
  }
  return std::sqrt(M_PI / 2) * sum(t) / static_cast<double>(mu.size());
}

inline std::uint64_t noise_seed(std::uint64_t seed, std::size_t r) { return derive_seed(seed, SeedStream::Noise, r); }

// μ̂(y) with the same floor the estimators use.
inline Vec floored_prediction(const FamilyModel& m, const Vec& y, Vec mu_hat, std::size_t* count = nullptr) {
  std::size_t c = apply_floor(m, mu_floor(y), mu_hat);
  if (count) *count += c;
  return mu_hat;
}

inline MeanSe mc_mean_loss(const FamilyModel& m, const Vec& mu, const Predictor& p, LossId loss, std::size_t N,
                           std::uint64_t seed) {
  if (N < 2) throw DomainError("mc_mean_loss: N must be >= 2");
  Vec v(N);
  parallel_for(N, [&](std::size_t r) {
    Vec y = sample(m, mu, noise_seed(seed, r));
    v[r] = loss_value(loss, m, mu, floored_prediction(m, y, p.evaluate(y)));
  });
  return mean_se(v);
}

struct MklaDecomposition {
  MeanSe fidelity;
  MeanSe complexity;
  MeanSe mkla;
  MeanSe sum;         // per-realization fidelity + complexity
  MeanSe difference;  // per-realization (fidelity + complexity) − KLA
};

// Fidelity E[A(θ̂) − A(θ) − ⟨Y, θ̂ − θ⟩] and complexity tr Cov(θ̂(Y), Y),
// the latter estimated by ⟨Y − μ, θ̂(Y) − θ̂(μ)⟩.
inline MklaDecomposition mkla_decomposition(const FamilyModel& m, const Vec& mu, const Predictor& p, std::size_t N,
                                            std::uint64_t seed) {
  if (N < 2) throw DomainError("mkla_decomposition: N must be >= 2");
  const NaturalPoint th = link(m, mu);
  const double a_th = log_partition(m, th);
  Vec center;
  try {
    center = link(m, floored_prediction(m, mu, p.evaluate(mu))).theta;
  } catch (const Error&) {
    center.assign(mu.size(), 0.0);
  }
  Vec fid(N), cpx(N), kl(N), tot(N), dif(N);
  parallel_for(N, [&](std::size_t r) {
    Vec y = sample(m, mu, noise_seed(seed, r));
    Vec muh = floored_prediction(m, y, p.evaluate(y));
    NaturalPoint thh = link(m, muh);
    fid[r] = log_partition(m, thh) - a_th - dot(y, sub(thh.theta, th.theta));
    cpx[r] = dot(sub(y, mu), sub(thh.theta, center));
    kl[r] = kla(m, mu, muh);
    tot[r] = fid[r] + cpx[r];
    dif[r] = tot[r] - kl[r];
  });
  return {mean_se(fid), mean_se(cpx), mean_se(kl), mean_se(tot), mean_se(dif)};
}

struct ReliabilityResult {
  EstimatorId estimator = EstimatorId::Sure;
  double lhs = 0, lhs_se = 0;
  double rhs = 0, rhs_se = 0;
  double first = 0, second = 0;  // the two terms of the bound
  double max_consistency_error = 0;  // |(overline difference) − (a + b)|, should be rounding
  bool holds = false;
  std::size_t n = 0;
};

namespace detail {

// √E[X²] and its delta-method standard error.
inline MeanSe root_mean_square(const Vec& x) {
  Vec sq(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) sq[i] = x[i] * x[i];
  MeanSe m = mean_se(sq);
  MeanSe r;
  r.n = m.n;
  r.mean = std::sqrt(m.mean);
  r.se = r.mean > 0 ? m.se / (2 * r.mean) : 0.0;
  return r;
}

}  // namespace detail

// Empirical check of the reliability bound of one estimator on paired
// realizations: lhs = s·E[(overline estimate − overline loss)²]^½ with s = ½
// for GSURE and PURE, rhs = E[a²]^½ + E[b²]^½.
inline ReliabilityResult reliability(const FamilyModel& m, const Vec& mu, const Predictor& p, EstimatorId id,
                                     std::size_t N, std::uint64_t seed, const EstimatorOptions& opt = {}) {
  if (N < 2) throw DomainError("reliability: N must be >= 2");
  const NaturalPoint th = link(m, mu);
  Vec D(N), A(N), B(N), C(N);
  parallel_for(N, [&](std::size_t r) {
    Vec y = sample(m, mu, noise_seed(seed, r));
    Linearization lin = p.linearize(y);
    EstimatorOptions o = opt;
    o.plan.seed = derive_seed(opt.plan.seed, SeedStream::Misc, r);
    RiskEstimate e = estimate(id, m, lin, o);
    Vec muh = floored_prediction(m, y, lin.value);
    switch (id) {
      case EstimatorId::Gsure: {
        Vec thh = link(m, muh).theta;
        double est = e.value - (e.last_term ? sum(base_measure_laplacian_ratio(m, y)) : 0.0);
        double loss = norm2sq(thh) - 2 * dot(th.theta, thh);
        D[r] = 0.5 * (est - loss);
        A[r] = dot(add(base_measure_score(m, y), th.theta), thh);
        B[r] = e.trace_term;
        break;
      }
      case EstimatorId::Sukls: {
        NaturalPoint thh = link(m, muh);
        double loss = kls(m, mu, muh) - log_partition(m, th);
        D[r] = e.value - loss;
        A[r] = dot(add(base_measure_score(m, y), th.theta), muh);
        B[r] = e.trace_term;
        break;
      }
      case EstimatorId::Pure: {
        Vec ym1(y.size());
        for (std::size_t i = 0; i < y.size(); ++i) ym1[i] = y[i] - 1;
        double est = e.value - dot(y, ym1);
        double loss = norm2sq(lin.value) - 2 * dot(lin.value, mu);
        D[r] = 0.5 * (est - loss);
        A[r] = dot(mu, lin.value);
        B[r] = e.downshift_term;
        break;
      }
      case EstimatorId::Pukla: {
        NaturalPoint thh = link(m, muh);
        double loss = kla(m, mu, muh) + log_partition(m, th) - dot(mu, th.theta);
        D[r] = e.value - loss;
        A[r] = dot(mu, thh.theta);
        B[r] = e.downshift_term;
        break;
      }
      case EstimatorId::Dkla: {
        NaturalPoint thh = link(m, muh);
        double loss = kla(m, mu, muh) + log_partition(m, th) - dot(mu, th.theta);
        D[r] = e.value - loss;
        A[r] = dot(sub(y, mu), thh.theta);
        B[r] = e.trace_term;
        break;
      }
      default: throw UnsupportedFamily(std::string("reliability: no bound for ") + to_string(id));
    }
    // The overline difference is ±a ± b by construction.
    double best = std::abs(std::abs(D[r]) - std::abs(A[r] + B[r]));
    best = std::min(best, std::abs(std::abs(D[r]) - std::abs(A[r] - B[r])));
    C[r] = best / (1.0 + std::abs(A[r]) + std::abs(B[r]));
  });
  ReliabilityResult res;
  res.estimator = id;
  res.n = N;
  MeanSe l = detail::root_mean_square(D), a = detail::root_mean_square(A), b = detail::root_mean_square(B);
  res.lhs = l.mean;
  res.lhs_se = l.se;
  res.first = a.mean;
  res.second = b.mean;
  res.rhs = a.mean + b.mean;
  res.rhs_se = std::sqrt(a.se * a.se + b.se * b.se);
  res.holds = res.lhs <= res.rhs + 3 * std::sqrt(res.lhs_se * res.lhs_se + res.rhs_se * res.rhs_se);
  for (double c : C) res.max_consistency_error = std::max(res.max_consistency_error, c);
  return res;
}

struct SelectionMetrics {
  double errors = 0;  // percent of entries in FP ∪ FN
  double fn = 0;      // β̂ᵢ = 0 and βᵢ ≠ 0
  double fp = 0;      // β̂ᵢ ≠ 0 and βᵢ = 0
};

inline SelectionMetrics selection_metrics(const Vec& beta_true, const Vec& beta_hat, double support_tol = 0.0) {
  require_same_size(beta_true, beta_hat, "selection_metrics");
  if (beta_true.empty()) throw DomainError("selection_metrics: empty input");
  std::size_t fn = 0, fp = 0;
  for (std::size_t i = 0; i < beta_true.size(); ++i) {
    bool t = beta_true[i] != 0;
    bool h = std::abs(beta_hat[i]) > support_tol;
    if (t && !h) ++fn;
    if (!t && h) ++fp;
  }
  const double q = static_cast<double>(beta_true.size());
  return {100.0 * static_cast<double>(fn + fp) / q, 100.0 * static_cast<double>(fn) / q,
          100.0 * static_cast<double>(fp) / q};
}

}  // namespace klrisk
