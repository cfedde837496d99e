#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "errors.hpp"
#include "expfam.hpp"
#include "jacobian.hpp"
#include "linalg.hpp"
#include "predictors.hpp"

namespace klrisk {

enum class LossId { MSE_mu, MSE_theta, MSE_eta, MKLA, MKLS };

inline const char* to_string(LossId l) {
  switch (l) {
    case LossId::MSE_mu: return "mse_mu";
    case LossId::MSE_theta: return "mse_theta";
    case LossId::MSE_eta: return "mse_eta";
    case LossId::MKLA: return "mkla";
    case LossId::MKLS: return "mkls";
  }
  return "?";
}

enum class EstimatorId { Sure, Gsure, Pure, GpureNegbin, Sukls, Pukla, Dkla };

inline const char* to_string(EstimatorId e) {
  switch (e) {
    case EstimatorId::Sure: return "sure";
    case EstimatorId::Gsure: return "gsure";
    case EstimatorId::Pure: return "pure";
    case EstimatorId::GpureNegbin: return "gpure";
    case EstimatorId::Sukls: return "sukls";
    case EstimatorId::Pukla: return "pukla";
    case EstimatorId::Dkla: return "dkla";
  }
  return "?";
}

// Additive constants that an estimator cannot see.
enum class Convention { None, MinusThetaNorm, MinusLogPartition, PlusMeanTerms, DeltaMethod };

inline const char* to_string(Convention c) {
  switch (c) {
    case Convention::None: return "exact";
    case Convention::MinusThetaNorm: return "MSE_θ − ‖θ‖²";
    case Convention::MinusLogPartition: return "MKLS − A(θ)";
    case Convention::PlusMeanTerms: return "MKLA + ‖μ‖₁ − ⟨μ, log μ⟩";
    case Convention::DeltaMethod: return "MKLA − ⟨μ,θ⟩ + A(θ)";
  }
  return "?";
}

struct RiskEstimate {
  EstimatorId estimator = EstimatorId::Sure;
  double value = 0;
  LossId loss = LossId::MSE_mu;
  Convention convention = Convention::None;
  std::string constant_convention;
  double std_error = 0;          // Monte-Carlo error from probes; 0 when exact
  std::size_t floor_count = 0;   // entries of μ̂ raised to the floor
  double trace_term = std::numeric_limits<double>::quiet_NaN();
  double downshift_term = std::numeric_limits<double>::quiet_NaN();
  bool last_term = false;        // GSURE only
};

struct EstimatorOptions {
  ProbePlan plan{};
  DownshiftMode downshift = DownshiftMode::Auto;
  std::optional<bool> include_last_term;  // GSURE; default L > 2 for Gamma
  bool closed_form = true;                // family-specialized formulas where available
};

struct EstimatorAssumptions {
  EstimatorId op = EstimatorId::Sure;
  bool valid = true;
  std::vector<FamilyKind> required_family;
  std::string required_nuisance;
  std::string smoothness_note;
  std::string bias_note;
  std::vector<std::string> reasons;
};

inline bool default_last_term(const FamilyModel& m) {
  return m.kind() != FamilyKind::Gamma || m.nuisance() > 2;
}

inline EstimatorAssumptions assumptions_report(EstimatorId op, const FamilyModel& m, const Predictor* p = nullptr,
                                               std::optional<bool> include_last_term = std::nullopt) {
  EstimatorAssumptions a;
  a.op = op;
  auto fail = [&](const std::string& why) {
    a.valid = false;
    a.reasons.push_back(why);
  };
  auto need = [&](std::vector<FamilyKind> fams, const char* why) {
    a.required_family = fams;
    bool ok = false;
    for (auto f : fams) ok = ok || f == m.kind();
    if (!ok) fail(why);
  };
  const double nu = m.nuisance();
  switch (op) {
    case EstimatorId::Sure:
      need({FamilyKind::Gaussian}, "Gaussian only");
      a.smoothness_note = "predictor weakly differentiable with essentially bounded partial derivatives";
      break;
    case EstimatorId::Gsure: {
      need({FamilyKind::Gaussian, FamilyKind::Gamma}, "continuous families only (Gaussian, Gamma)");
      bool last = include_last_term.value_or(default_last_term(m));
      if (m.kind() == FamilyKind::Gamma) {
        a.required_nuisance = last ? "L>2" : "L>1";
        if (last && !(nu > 2)) fail("requires L>2");
        else if (!(nu > 1)) fail("requires L>1");
      }
      a.smoothness_note = "θ̂ weakly differentiable; h and ∇h weakly differentiable";
      break;
    }
    case EstimatorId::Pure:
      need({FamilyKind::Poisson}, "Poisson only");
      break;
    case EstimatorId::GpureNegbin:
      need({FamilyKind::NegBinomial}, "negative binomial only");
      a.required_nuisance = "r>0, r not in {1,2}";
      if (m.kind() == FamilyKind::NegBinomial && (nu == 1.0 || nu == 2.0)) fail("requires r not in {1,2}");
      break;
    case EstimatorId::Sukls:
      need({FamilyKind::Gaussian, FamilyKind::Gamma}, "continuous families only (Gaussian, Gamma)");
      if (m.kind() == FamilyKind::Gamma) {
        a.required_nuisance = "L>1";
        if (!(nu > 1)) fail("requires L>1");
      }
      a.smoothness_note = "μ̂ weakly differentiable";
      break;
    case EstimatorId::Pukla:
      need({FamilyKind::Poisson}, "Poisson only");
      break;
    case EstimatorId::Dkla:
      a.required_family = {FamilyKind::Gaussian, FamilyKind::Gamma, FamilyKind::Poisson, FamilyKind::Binomial,
                           FamilyKind::NegBinomial};
      a.smoothness_note = "θ̂ smooth with bounded derivatives";
      a.bias_note = m.kind() == FamilyKind::Gaussian ? "unbiased (Gaussian)" : "O(n⁻¹)";
      break;
  }
  if (p && p->kind() == PredictorKind::LassoOrthogonal)
    a.smoothness_note += "; the LASSO is not differentiable at kink points";
  return a;
}

namespace detail {

inline void require(EstimatorId op, const FamilyModel& m, std::optional<bool> last = std::nullopt) {
  auto a = assumptions_report(op, m, nullptr, last);
  if (a.valid) return;
  std::string msg = std::string(to_string(op)) + ": ";
  for (std::size_t i = 0; i < a.reasons.size(); ++i) msg += (i ? "; " : "") + a.reasons[i];
  throw AssumptionError(msg);
}

inline void check_observations(const FamilyModel& m, const Vec& y) {
  for (double v : y)
    if (!m.y_in_support(v)) throw DomainError(m.name() + ": observation " + std::to_string(v) + " outside support");
}

inline RiskEstimate make(EstimatorId id, LossId loss, Convention c) {
  RiskEstimate r;
  r.estimator = id;
  r.loss = loss;
  r.convention = c;
  r.constant_convention = to_string(c);
  return r;
}

// μ̂ clamped into the mean domain, with the clamp count.
inline Vec floored(const FamilyModel& m, const Linearization& lin, std::size_t& count) {
  Vec mu = lin.value;
  count += apply_floor(m, mu_floor(lin.y), mu);
  return mu;
}

inline Vec inverse_variance(const FamilyModel& m, const Vec& mu) {
  Vec g(mu.size());
  for (std::size_t i = 0; i < mu.size(); ++i) g[i] = m.dlink1(mu[i]);
  return g;
}

}  // namespace detail

inline RiskEstimate sure(const FamilyModel& m, const Linearization& lin, const EstimatorOptions& opt = {}) {
  detail::require(EstimatorId::Sure, m);
  auto r = detail::make(EstimatorId::Sure, LossId::MSE_mu, Convention::None);
  const double s2 = m.nuisance() * m.nuisance();
  const double d = static_cast<double>(lin.y.size());
  auto tr = weighted_trace(lin, Vec(), opt.plan);
  r.trace_term = tr.estimate;
  r.std_error = 2 * s2 * tr.std_error;
  r.value = norm2sq(sub(lin.y, lin.value)) - d * s2 + 2 * s2 * tr.estimate;
  return r;
}

inline RiskEstimate gsure(const FamilyModel& m, const Linearization& lin, const EstimatorOptions& opt = {}) {
  const bool last = opt.include_last_term.value_or(default_last_term(m));
  detail::require(EstimatorId::Gsure, m, last);
  detail::check_observations(m, lin.y);
  auto r = detail::make(EstimatorId::Gsure, LossId::MSE_theta, last ? Convention::None : Convention::MinusThetaNorm);
  r.last_term = last;
  const Vec& y = lin.y;
  const std::size_t d = y.size();
  Vec mu = detail::floored(m, lin, r.floor_count);
  Vec g = detail::inverse_variance(m, mu);
  auto tr = weighted_trace(lin, g, opt.plan);
  r.trace_term = tr.estimate;
  r.std_error = 2 * tr.std_error;
  if (m.kind() == FamilyKind::Gamma && opt.closed_form) {
    const double L = m.nuisance();
    Vec t(d);
    for (std::size_t i = 0; i < d; ++i) {
      t[i] = L * L / (mu[i] * mu[i]) - 2 * L * (L - 1) / (y[i] * mu[i]);
      if (last) t[i] += (L - 1) * (L - 2) / (y[i] * y[i]);
    }
    r.value = sum(t) + 2 * tr.estimate;
    return r;
  }
  Vec th = link(m, mu).theta;
  Vec s = base_measure_score(m, y);
  r.value = norm2sq(th) + 2 * dot(s, th) + 2 * tr.estimate;
  if (last) r.value += sum(base_measure_laplacian_ratio(m, y));
  return r;
}

inline RiskEstimate pure(const FamilyModel& m, const Linearization& lin, const EstimatorOptions& opt = {}) {
  detail::require(EstimatorId::Pure, m);
  detail::check_observations(m, lin.y);
  auto r = detail::make(EstimatorId::Pure, LossId::MSE_mu, Convention::None);
  const Vec& y = lin.y;
  double down;
  if (use_exact_downshift(opt.downshift, lin)) {
    down = exact_downshift_dot(lin);
  } else {
    auto b = bernoulli_downshift_dot(lin, lin.value, Vec(), opt.plan);
    down = b.estimate;
    r.std_error = 2 * b.std_error;
  }
  r.downshift_term = down;
  Vec ym1(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) ym1[i] = y[i] - 1;
  r.value = norm2sq(lin.value) - 2 * down + dot(y, ym1);
  return r;
}

// lin is the linearization of a probability predictor p̂.
inline RiskEstimate gpure_negbin(const FamilyModel& m, const Linearization& lin, const EstimatorOptions& opt = {}) {
  detail::require(EstimatorId::GpureNegbin, m);
  detail::check_observations(m, lin.y);
  auto r = detail::make(EstimatorId::GpureNegbin, LossId::MSE_eta, Convention::None);
  const Vec& y = lin.y;
  const double rr = m.nuisance();
  const std::size_t d = y.size();
  Vec w(d), c(d);
  for (std::size_t i = 0; i < d; ++i) {
    w[i] = y[i] > 0 ? 1.0 / (y[i] + rr - 1) : 0.0;
    c[i] = y[i] > 1 ? y[i] * (y[i] - 1) / ((y[i] + rr - 1) * (y[i] + rr - 2)) : 0.0;
  }
  Vec down(d, 0.0);
  if (use_exact_downshift(opt.downshift, lin)) {
    down = downshift_values(lin);
  } else {
    // Weighted ⟨y⊙w, p̂↓⟩ through the same first-order expansion.
    Linearization l = lin;
    Vec yw = hadamard_product(y, w);
    l.y = yw;
    auto b = bernoulli_downshift_dot(l, lin.value, Vec(), opt.plan);
    r.downshift_term = b.estimate;
    r.std_error = 2 * b.std_error;
    r.value = norm2sq(lin.value) - 2 * b.estimate + sum(c);
    return r;
  }
  Vec t(d);
  for (std::size_t i = 0; i < d; ++i) t[i] = y[i] * down[i] * w[i];
  r.downshift_term = sum(t);
  r.value = norm2sq(lin.value) - 2 * r.downshift_term + sum(c);
  return r;
}

inline RiskEstimate sukls(const FamilyModel& m, const Linearization& lin, const EstimatorOptions& opt = {}) {
  detail::require(EstimatorId::Sukls, m);
  detail::check_observations(m, lin.y);
  auto r = detail::make(EstimatorId::Sukls, LossId::MKLS, Convention::MinusLogPartition);
  const Vec& y = lin.y;
  const std::size_t d = y.size();
  Vec mu = detail::floored(m, lin, r.floor_count);
  auto tr = weighted_trace(lin, Vec(), opt.plan);
  r.trace_term = tr.estimate;
  r.std_error = tr.std_error;
  if (m.kind() == FamilyKind::Gamma && opt.closed_form) {
    const double L = m.nuisance();
    Vec t(d);
    for (std::size_t i = 0; i < d; ++i) t[i] = (L - 1) * mu[i] / y[i] - L * std::log(mu[i]) - L;
    r.value = sum(t) + tr.estimate;
    return r;
  }
  NaturalPoint th = link(m, mu);
  Vec s = base_measure_score(m, y);
  r.value = dot(add(th.theta, s), mu) + tr.estimate - log_partition(m, th);
  return r;
}

inline RiskEstimate pukla(const FamilyModel& m, const Linearization& lin, const EstimatorOptions& opt = {}) {
  detail::require(EstimatorId::Pukla, m);
  detail::check_observations(m, lin.y);
  auto r = detail::make(EstimatorId::Pukla, LossId::MKLA, Convention::PlusMeanTerms);
  const Vec& y = lin.y;
  const std::size_t d = y.size();
  Vec mu = detail::floored(m, lin, r.floor_count);
  const double fl = mu_floor(y);
  double down;
  if (use_exact_downshift(opt.downshift, lin)) {
    Vec v = downshift_values(lin);
    Vec t(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
      if (y[i] == 0) continue;
      if (!(v[i] >= fl)) {
        v[i] = fl;
        ++r.floor_count;
      }
      t[i] = y[i] * std::log(v[i]);
    }
    down = sum(t);
  } else {
    Vec lg(d), w(d);
    for (std::size_t i = 0; i < d; ++i) {
      lg[i] = std::log(mu[i]);
      w[i] = 1.0 / mu[i];
    }
    auto b = bernoulli_downshift_dot(lin, lg, w, opt.plan);
    down = b.estimate;
    r.std_error = b.std_error;
  }
  r.downshift_term = down;
  r.value = sum(mu) - down;
  return r;
}

inline RiskEstimate dkla(const FamilyModel& m, const Linearization& lin, const EstimatorOptions& opt = {}) {
  detail::check_observations(m, lin.y);
  auto r = detail::make(EstimatorId::Dkla, LossId::MKLA, Convention::DeltaMethod);
  const Vec& y = lin.y;
  const std::size_t d = y.size();
  Vec mu = detail::floored(m, lin, r.floor_count);
  // tr(Λ(y)·∂θ̂/∂y) = Σ Λ(yᵢ)φ'(μ̂ᵢ) ∂μ̂ᵢ/∂yᵢ
  Vec g(d);
  for (std::size_t i = 0; i < d; ++i) g[i] = m.variance_formula(y[i]) * m.dlink1(mu[i]);
  auto tr = weighted_trace(lin, g, opt.plan);
  r.trace_term = tr.estimate;
  r.std_error = tr.std_error;
  if (opt.closed_form && m.kind() == FamilyKind::Gamma) {
    const double L = m.nuisance();
    Vec t(d);
    for (std::size_t i = 0; i < d; ++i) t[i] = L * std::log(mu[i]) + L * y[i] / mu[i];
    r.value = sum(t) + tr.estimate;
    return r;
  }
  if (opt.closed_form && m.kind() == FamilyKind::Poisson) {
    Vec t(d);
    for (std::size_t i = 0; i < d; ++i) t[i] = mu[i] - (y[i] > 0 ? y[i] * std::log(mu[i]) : 0.0);
    r.value = sum(t) + tr.estimate;
    return r;
  }
  NaturalPoint th = link(m, mu);
  r.value = log_partition(m, th) - dot(y, th.theta) + tr.estimate;
  return r;
}

inline RiskEstimate estimate(EstimatorId id, const FamilyModel& m, const Linearization& lin,
                             const EstimatorOptions& opt = {}) {
  switch (id) {
    case EstimatorId::Sure: return sure(m, lin, opt);
    case EstimatorId::Gsure: return gsure(m, lin, opt);
    case EstimatorId::Pure: return pure(m, lin, opt);
    case EstimatorId::GpureNegbin: return gpure_negbin(m, lin, opt);
    case EstimatorId::Sukls: return sukls(m, lin, opt);
    case EstimatorId::Pukla: return pukla(m, lin, opt);
    case EstimatorId::Dkla: return dkla(m, lin, opt);
  }
  throw Error("unknown estimator");
}

inline RiskEstimate estimate(EstimatorId id, const FamilyModel& m, const Predictor& p, const Vec& y,
                             const EstimatorOptions& opt = {}) {
  return estimate(id, m, p.linearize(y), opt);
}

inline RiskEstimate sure(const FamilyModel& m, const Predictor& p, const Vec& y, const EstimatorOptions& o = {}) {
  return sure(m, p.linearize(y), o);
}
inline RiskEstimate gsure(const FamilyModel& m, const Predictor& p, const Vec& y, const EstimatorOptions& o = {}) {
  return gsure(m, p.linearize(y), o);
}
inline RiskEstimate pure(const FamilyModel& m, const Predictor& p, const Vec& y, const EstimatorOptions& o = {}) {
  return pure(m, p.linearize(y), o);
}
inline RiskEstimate gpure_negbin(const FamilyModel& m, const Predictor& p, const Vec& y,
                                 const EstimatorOptions& o = {}) {
  return gpure_negbin(m, p.linearize(y), o);
}
inline RiskEstimate sukls(const FamilyModel& m, const Predictor& p, const Vec& y, const EstimatorOptions& o = {}) {
  return sukls(m, p.linearize(y), o);
}
inline RiskEstimate pukla(const FamilyModel& m, const Predictor& p, const Vec& y, const EstimatorOptions& o = {}) {
  return pukla(m, p.linearize(y), o);
}
inline RiskEstimate dkla(const FamilyModel& m, const Predictor& p, const Vec& y, const EstimatorOptions& o = {}) {
  return dkla(m, p.linearize(y), o);
}

}  // namespace klrisk
