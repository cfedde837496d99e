#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>

#include "errors.hpp"
#include "linalg.hpp"
#include "random.hpp"

namespace klrisk {

enum class FamilyKind { Gaussian, Gamma, Poisson, Binomial, NegBinomial };

inline const char* to_string(FamilyKind k) {
  switch (k) {
    case FamilyKind::Gaussian: return "gaussian";
    case FamilyKind::Gamma: return "gamma";
    case FamilyKind::Poisson: return "poisson";
    case FamilyKind::Binomial: return "binomial";
    case FamilyKind::NegBinomial: return "negbinomial";
  }
  return "?";
}

// One entrywise-independent member of the natural exponential family.
// The nuisance parameter is sigma (Gaussian), L (Gamma), n (Binomial) or r
// (NegBinomial); Poisson has none.
class FamilyModel {
 public:
  static FamilyModel gaussian(double sigma) {
    if (!(sigma > 0) || !std::isfinite(sigma)) throw DomainError("gaussian: sigma must be > 0");
    return FamilyModel(FamilyKind::Gaussian, sigma);
  }
  static FamilyModel gamma(double L) {
    if (!(L > 0) || !std::isfinite(L)) throw DomainError("gamma: L must be > 0");
    return FamilyModel(FamilyKind::Gamma, L);
  }
  static FamilyModel poisson() { return FamilyModel(FamilyKind::Poisson, 0.0); }
  static FamilyModel binomial(double n) {
    if (!(n > 0) || !std::isfinite(n)) throw DomainError("binomial: n must be > 0");
    return FamilyModel(FamilyKind::Binomial, n);
  }
  static FamilyModel negbinomial(double r) {
    if (!(r > 0) || !std::isfinite(r)) throw DomainError("negbinomial: r must be > 0");
    return FamilyModel(FamilyKind::NegBinomial, r);
  }

  FamilyKind kind() const { return kind_; }
  double nuisance() const { return nu_; }
  std::string name() const { return to_string(kind_); }

  bool continuous() const { return kind_ == FamilyKind::Gaussian || kind_ == FamilyKind::Gamma; }
  bool discrete() const { return !continuous(); }

  bool mu_in_domain(double mu) const {
    switch (kind_) {
      case FamilyKind::Gaussian: return std::isfinite(mu);
      case FamilyKind::Gamma:
      case FamilyKind::Poisson:
      case FamilyKind::NegBinomial: return mu > 0 && std::isfinite(mu);
      case FamilyKind::Binomial: return mu > 0 && mu < nu_;
    }
    return false;
  }

  bool theta_in_domain(double th) const {
    switch (kind_) {
      case FamilyKind::Gamma:
      case FamilyKind::NegBinomial: return th < 0 && std::isfinite(th);
      default: return std::isfinite(th);
    }
  }

  // Support of the observations (closure for discrete families).
  bool y_in_support(double y) const {
    switch (kind_) {
      case FamilyKind::Gaussian: return std::isfinite(y);
      case FamilyKind::Gamma: return y > 0 && std::isfinite(y);
      case FamilyKind::Poisson:
      case FamilyKind::NegBinomial: return y >= 0 && std::isfinite(y);
      case FamilyKind::Binomial: return y >= 0 && y <= nu_;
    }
    return false;
  }

  double link1(double mu) const {
    if (!mu_in_domain(mu)) throw DomainError(name() + " link: mu=" + std::to_string(mu) + " outside domain");
    switch (kind_) {
      case FamilyKind::Gaussian: return mu / (nu_ * nu_);
      case FamilyKind::Gamma: return -nu_ / mu;
      case FamilyKind::Poisson: return std::log(mu);
      case FamilyKind::Binomial: return std::log(mu / (nu_ - mu));
      case FamilyKind::NegBinomial: return std::log(mu / (nu_ + mu));
    }
    return 0;
  }

  double mean1(double th) const {
    check_theta(th);
    switch (kind_) {
      case FamilyKind::Gaussian: return nu_ * nu_ * th;
      case FamilyKind::Gamma: return -nu_ / th;
      case FamilyKind::Poisson: return std::exp(th);
      case FamilyKind::Binomial: return nu_ / (1.0 + std::exp(-th));
      case FamilyKind::NegBinomial: return -nu_ * std::exp(th) / std::expm1(th);
    }
    return 0;
  }

  double log_partition1(double th) const {
    check_theta(th);
    switch (kind_) {
      case FamilyKind::Gaussian: return 0.5 * nu_ * nu_ * th * th;
      case FamilyKind::Gamma: return -nu_ * std::log(-th / nu_);
      case FamilyKind::Poisson: return std::exp(th);
      case FamilyKind::Binomial:
        return nu_ * (th > 0 ? th + std::log1p(std::exp(-th)) : std::log1p(std::exp(th)));
      case FamilyKind::NegBinomial: return -nu_ * std::log(-std::expm1(th));
    }
    return 0;
  }

  double variance1(double mu) const {
    if (!mu_in_domain(mu)) throw DomainError(name() + " variance: mu outside domain");
    return variance_formula(mu);
  }

  // Variance function without a domain check, used where Λ is evaluated at
  // observations (e.g. Λ(y) for y on the boundary of the mean domain).
  double variance_formula(double mu) const {
    switch (kind_) {
      case FamilyKind::Gaussian: return nu_ * nu_;
      case FamilyKind::Gamma: return mu * mu / nu_;
      case FamilyKind::Poisson: return mu;
      case FamilyKind::Binomial: return mu - mu * mu / nu_;
      case FamilyKind::NegBinomial: return mu + mu * mu / nu_;
    }
    return 0;
  }

  // φ'(μ) = 1/Λ(μ) for a canonical link.
  double dlink1(double mu) const { return 1.0 / variance1(mu); }

  // φ''(μ) = −Λ'(μ)/Λ(μ)².
  double d2link1(double mu) const {
    double v = variance1(mu);
    double dv = 0;
    switch (kind_) {
      case FamilyKind::Gaussian: dv = 0; break;
      case FamilyKind::Gamma: dv = 2 * mu / nu_; break;
      case FamilyKind::Poisson: dv = 1; break;
      case FamilyKind::Binomial: dv = 1 - 2 * mu / nu_; break;
      case FamilyKind::NegBinomial: dv = 1 + 2 * mu / nu_; break;
    }
    return -dv / (v * v);
  }

  // Bregman divergence of A between two scalar natural parameters.
  double kl1(double th0, double th1) const {
    check_theta(th0);
    check_theta(th1);
    double r = 0;
    switch (kind_) {
      case FamilyKind::Gaussian: {
        double d = th1 - th0;
        r = 0.5 * nu_ * nu_ * d * d;
        break;
      }
      case FamilyKind::Gamma: {
        double x = th1 / th0 - 1.0;
        r = nu_ * (x - std::log1p(x));
        break;
      }
      case FamilyKind::Poisson: {
        double d = th1 - th0;
        r = std::exp(th0) * (std::expm1(d) - d);
        break;
      }
      default:
        r = log_partition1(th1) - log_partition1(th0) - mean1(th0) * (th1 - th0);
    }
    return r < 0 ? 0.0 : r;
  }

  bool operator==(const FamilyModel& o) const { return kind_ == o.kind_ && nu_ == o.nu_; }

 private:
  FamilyModel(FamilyKind k, double nu) : kind_(k), nu_(nu) {}

  void check_theta(double th) const {
    if (!theta_in_domain(th))
      throw DomainError(name() + ": theta=" + std::to_string(th) + " outside natural domain");
  }

  FamilyKind kind_;
  double nu_;
};

struct NaturalPoint {
  Vec theta;
};

inline NaturalPoint link(const FamilyModel& m, const Vec& mu) {
  NaturalPoint p{Vec(mu.size())};
  for (std::size_t i = 0; i < mu.size(); ++i) p.theta[i] = m.link1(mu[i]);
  return p;
}

inline double log_partition(const FamilyModel& m, const NaturalPoint& th) {
  Vec a(th.theta.size());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = m.log_partition1(th.theta[i]);
  return sum(a);
}

inline Vec mean_from_natural(const FamilyModel& m, const NaturalPoint& th) {
  Vec mu(th.theta.size());
  for (std::size_t i = 0; i < mu.size(); ++i) mu[i] = m.mean1(th.theta[i]);
  return mu;
}

inline Vec variance_function(const FamilyModel& m, const Vec& mu) {
  Vec v(mu.size());
  for (std::size_t i = 0; i < mu.size(); ++i) v[i] = m.variance1(mu[i]);
  return v;
}

inline double kl_divergence(const FamilyModel& m, const NaturalPoint& th0, const NaturalPoint& th1) {
  require_same_size(th0.theta, th1.theta, "kl_divergence");
  Vec k(th0.theta.size());
  for (std::size_t i = 0; i < k.size(); ++i) k[i] = m.kl1(th0.theta[i], th1.theta[i]);
  return sum(k);
}

// ∇h(y)/h(y), entrywise.
inline Vec base_measure_score(const FamilyModel& m, const Vec& y) {
  Vec s(y.size());
  if (m.kind() == FamilyKind::Gaussian) {
    double s2 = m.nuisance() * m.nuisance();
    for (std::size_t i = 0; i < y.size(); ++i) s[i] = -y[i] / s2;
    return s;
  }
  if (m.kind() == FamilyKind::Gamma) {
    double L = m.nuisance();
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (!(y[i] > 0)) throw DomainError("gamma base_measure_score: y must be > 0");
      s[i] = (L - 1) / y[i];
    }
    return s;
  }
  throw UnsupportedFamily("base_measure_score: " + m.name() + " is discrete");
}

// Diagonal of ∇²h(y)/h(y), entrywise; the sum is (1/h) tr ∇²h.
inline Vec base_measure_laplacian_ratio(const FamilyModel& m, const Vec& y) {
  Vec s(y.size());
  if (m.kind() == FamilyKind::Gaussian) {
    double s2 = m.nuisance() * m.nuisance();
    for (std::size_t i = 0; i < y.size(); ++i) s[i] = y[i] * y[i] / (s2 * s2) - 1.0 / s2;
    return s;
  }
  if (m.kind() == FamilyKind::Gamma) {
    double L = m.nuisance();
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (!(y[i] > 0)) throw DomainError("gamma base_measure_laplacian_ratio: y must be > 0");
      s[i] = (L - 1) * (L - 2) / (y[i] * y[i]);
    }
    return s;
  }
  throw UnsupportedFamily("base_measure_laplacian_ratio: " + m.name() + " is discrete");
}

inline Vec sample(const FamilyModel& m, const Vec& mu, std::uint64_t seed) {
  for (double v : mu)
    if (!m.mu_in_domain(v)) throw DomainError(m.name() + " sample: mu outside domain");
  Rng rng(seed);
  Vec y(mu.size());
  const double nu = m.nuisance();
  switch (m.kind()) {
    case FamilyKind::Gaussian: {
      std::normal_distribution<double> n(0.0, nu);
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = mu[i] + n(rng);
      break;
    }
    case FamilyKind::Gamma: {
      std::gamma_distribution<double> g(nu, 1.0);
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = g(rng) * mu[i] / nu;
      break;
    }
    case FamilyKind::Poisson:
      for (std::size_t i = 0; i < y.size(); ++i)
        y[i] = static_cast<double>(std::poisson_distribution<std::int64_t>(mu[i])(rng));
      break;
    case FamilyKind::Binomial: {
      if (nu != std::floor(nu)) throw DomainError("binomial sample: n must be an integer");
      for (std::size_t i = 0; i < y.size(); ++i)
        y[i] = static_cast<double>(
            std::binomial_distribution<std::int64_t>(static_cast<std::int64_t>(nu), mu[i] / nu)(rng));
      break;
    }
    case FamilyKind::NegBinomial: {
      // Gamma-Poisson mixture: rate ~ Gamma(r, μ/r).
      std::gamma_distribution<double> g(nu, 1.0);
      for (std::size_t i = 0; i < y.size(); ++i) {
        double rate = g(rng) * mu[i] / nu;
        y[i] = rate > 0 ? static_cast<double>(std::poisson_distribution<std::int64_t>(rate)(rng)) : 0.0;
      }
      break;
    }
  }
  return y;
}

}  // namespace klrisk
