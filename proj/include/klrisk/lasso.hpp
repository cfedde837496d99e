#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "errors.hpp"
#include "expfam.hpp"
#include "linalg.hpp"
#include "predictors.hpp"

namespace klrisk {

enum class LassoDesign { Identity, Hadamard, Haar };

inline const char* to_string(LassoDesign d) {
  switch (d) {
    case LassoDesign::Identity: return "identity";
    case LassoDesign::Hadamard: return "hadamard";
    case LassoDesign::Haar: return "haar";
  }
  return "?";
}

// Which parameter is linear in β: the mean (μ = Xβ) or the natural
// parameter (θ = Xβ).
enum class LassoScale { Mean, Natural };

inline const char* to_string(LassoScale s) { return s == LassoScale::Mean ? "mean" : "natural"; }

struct LassoOptions {
  LassoDesign design = LassoDesign::Identity;
  LassoScale scale = LassoScale::Mean;
  bool intercept = false;  // leaves the constant column unpenalized (not for Identity)
  std::optional<double> offset;  // background mean μ₀: η = η(μ₀) + Xβ
  int max_iter = 5000;
  double rel_tol = 1e-10;
  double support_rel_tol = 1e-9;
  double cg_tol = 1e-10;
};

// Penalized maximum likelihood −log p(y; θ) + λ‖β‖₁ with orthonormal X and
// either μ = Xβ or θ = Xβ, optionally around a fixed background.
class LassoOrthogonal : public Predictor {
 public:
  struct Solution {
    Vec beta;
    Vec mu;
    int iterations = 0;
    double objective = 0;
  };

  LassoOrthogonal(FamilyModel model, double lambda, LassoOptions opt = {})
      : model_(model), lambda_(lambda), opt_(opt) {
    if (!(lambda >= 0) || !std::isfinite(lambda)) throw DomainError("lasso: lambda must be >= 0");
    if (opt.intercept && opt.design == LassoDesign::Identity)
      throw DomainError("lasso: the identity design has no constant column");
    if (opt.offset) {
      if (!model_.mu_in_domain(*opt.offset)) throw DomainError("lasso: offset outside the mean domain");
      eta0_ = opt.scale == LassoScale::Mean ? *opt.offset : model_.link1(*opt.offset);
    }
  }

  PredictorKind kind() const override { return PredictorKind::LassoOrthogonal; }
  double tuning() const override { return lambda_; }
  const FamilyModel& model() const { return model_; }
  const LassoOptions& options() const { return opt_; }

  bool accepts(const Vec& y) const override {
    for (double v : y)
      if (!model_.y_in_support(v)) return false;
    return true;
  }

  Vec apply_x(Vec b) const {
    if (opt_.design == LassoDesign::Hadamard) fwht(b);
    if (opt_.design == LassoDesign::Haar) haar_inverse(b);
    return b;
  }
  Vec apply_xt(Vec v) const {
    if (opt_.design == LassoDesign::Hadamard) fwht(v);
    if (opt_.design == LassoDesign::Haar) haar_forward(v);
    return v;
  }

  bool penalized(std::size_t j) const { return !(opt_.intercept && j == 0); }

  // η = η₀ + Xβ.
  Vec eta_of(const Vec& beta) const {
    Vec eta = apply_x(beta);
    if (eta0_ != 0)
      for (double& v : eta) v += eta0_;
    return eta;
  }

  // Mean of the linear predictor.
  Vec mean_of(const Vec& eta) const {
    if (opt_.scale == LassoScale::Mean) return eta;
    Vec mu(eta.size());
    for (std::size_t i = 0; i < eta.size(); ++i) mu[i] = model_.mean1(eta[i]);
    return mu;
  }

  // Smallest λ giving an empty penalized support.
  double lambda_max(const Vec& y) const {
    check_input(y);
    Vec xg = apply_xt(gradient(null_fit(y), y));
    double m = 0;
    for (std::size_t j = 0; j < xg.size(); ++j)
      if (penalized(j)) m = std::max(m, std::abs(xg[j]));
    return m;
  }

  Solution solve(const Vec& y, const Vec* warm = nullptr) const {
    check_input(y);
    const std::size_t d = y.size();
    if (opt_.design == LassoDesign::Identity && opt_.scale == LassoScale::Natural) return solve_separable(y);
    if (model_.kind() == FamilyKind::Gaussian) return solve_gaussian(y);

    Vec beta;
    if (warm && warm->size() == d && feasible(eta_of(*warm))) {
      beta = *warm;
    } else if (opt_.intercept || opt_.offset) {
      beta = apply_xt(shifted(null_fit(y)));
      for (std::size_t j = opt_.intercept ? 1 : 0; j < d; ++j) beta[j] = 0.0;
    } else if (opt_.scale == LassoScale::Natural) {
      beta = apply_xt(Vec(d, model_.link1(std::max(mean(y), 1e-12))));
    } else {
      beta = y;
      for (double& b : beta) b = std::max(b, 1e-3 * std::max(mean(y), 1e-12));
    }
    Vec eta = eta_of(beta);
    if (!feasible(eta)) throw DomainError("lasso: starting point outside the parameter domain");
    double F = nll_eta(eta, y) + penalty(beta);
    // FISTA with backtracking and function-value restart.
    Vec xk = beta, ymom = beta, yeta = eta;
    double tk = 1.0, t = 1.0;
    int it = 0;
    for (; it < opt_.max_iter; ++it) {
      const double fy = nll_eta(yeta, y);
      Vec grad = apply_xt(gradient(yeta, y));
      Vec nb, neta;
      double nf = 0;
      bool ok = false;
      t *= 2.0;
      for (int bt = 0; bt < 200; ++bt) {
        nb = prox(axpy(-t, grad, ymom), t);
        neta = eta_of(nb);
        if (feasible(neta)) {
          nf = nll_eta(neta, y);
          Vec diff = sub(nb, ymom);
          if (std::isfinite(nf) && nf <= fy + dot(grad, diff) + norm2sq(diff) / (2 * t) + 1e-12 * std::abs(fy)) {
            ok = true;
            break;
          }
        }
        t *= 0.5;
      }
      if (!ok) throw NonConvergence("lasso: line search failed");
      const double nF = nf + penalty(nb);
      if (nF > F) {
        if (ymom == xk) {
          ++it;
          break;  // no descent left at rounding level
        }
        ymom = xk;
        yeta = eta_of(xk);
        tk = 1.0;
        continue;
      }
      const double change = F - nF;
      const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * tk * tk));
      ymom = axpy((tk - 1.0) / tn, sub(nb, xk), nb);
      Vec cand = eta_of(ymom);
      if (!feasible(cand)) {
        ymom = nb;
        cand = neta;
      }
      yeta = std::move(cand);
      tk = tn;
      xk = std::move(nb);
      eta = std::move(neta);
      const double oldF = F;
      F = nF;
      if (change <= opt_.rel_tol * std::max(std::abs(oldF), 1e-300)) {
        ++it;
        break;
      }
    }
    if (it >= opt_.max_iter) throw NonConvergence("lasso: iteration cap reached (" + std::to_string(opt_.max_iter) + ")");
    Solution s;
    s.beta = std::move(xk);
    s.mu = mean_of(eta);
    s.iterations = it;
    s.objective = F;
    return s;
  }

  Vec evaluate(const Vec& y) const override { return solve(y).mu; }

  std::vector<std::size_t> support(const Vec& y) const { return support_of(solve(y).beta); }

  std::vector<std::size_t> support_of(const Vec& beta) const {
    double m = norm_inf(beta);
    std::vector<std::size_t> s;
    if (m == 0) return s;
    for (std::size_t j = 0; j < beta.size(); ++j)
      if (std::abs(beta[j]) > opt_.support_rel_tol * m) s.push_back(j);
    return s;
  }

  Linearization linearize(const Vec& y, WarmStart* warm) const override {
    const Vec* w0 = warm && !warm->state.empty() ? &warm->state : nullptr;
    Solution s = solve(y, w0);
    if (warm) warm->state = s.beta;
    return linearize_at(y, s);
  }

  Vec jvp(const Vec& y, const Vec& zeta, double = 1e-4) const override {
    return linearize(y, nullptr).jvp(zeta);
  }

  std::optional<Vec> jacobian_diagonal(const Vec& y) const override {
    if (opt_.design != LassoDesign::Identity) return std::nullopt;
    return linearize(y, nullptr).diagonal;
  }

  // Differentiates the optimality conditions on the active set:
  // (XₐᵀHXₐ)dβ = Xₐᵀ(G⊙dy) and dμ = D⊙(Xₐdβ), with G = φ'(μ̂),
  // H = G + (μ̂ − y)φ''(μ̂), D = 1 for μ = Xβ and G = D = 1, H = Λ(μ̂) for
  // θ = Xβ.
  Linearization linearize_at(const Vec& y, const Solution& s) const {
    const std::size_t d = y.size();
    auto active = std::make_shared<std::vector<char>>(d, 0);
    for (std::size_t j : support_of(s.beta)) (*active)[j] = 1;
    if (opt_.intercept) (*active)[0] = 1;
    auto H = std::make_shared<Vec>(d), G = std::make_shared<Vec>(d), D = std::make_shared<Vec>(d, 1.0);
    for (std::size_t i = 0; i < d; ++i) {
      if (opt_.scale == LassoScale::Mean) {
        (*G)[i] = model_.dlink1(s.mu[i]);
        (*H)[i] = (*G)[i] + (s.mu[i] - y[i]) * model_.d2link1(s.mu[i]);
      } else {
        (*G)[i] = 1.0;
        (*H)[i] = model_.variance1(s.mu[i]);
        (*D)[i] = (*H)[i];
      }
    }
    Linearization lin;
    lin.y = y;
    lin.value = s.mu;
    lin.affine = model_.kind() == FamilyKind::Gaussian;
    lin.evaluate = [this](const Vec& v) { return evaluate(v); };
    if (opt_.design == LassoDesign::Identity) {
      Vec diag(d, 0.0);
      for (std::size_t i = 0; i < d; ++i)
        if ((*active)[i]) diag[i] = (*D)[i] * (*G)[i] / (*H)[i];
      lin.diagonal = diag;
      lin.jvp = [diag](const Vec& z) { return hadamard_product(diag, z); };
      return lin;
    }
    const double tol = opt_.cg_tol;
    lin.jvp = [this, active, H, G, D, tol](const Vec& z) {
      const std::size_t n = z.size();
      Vec rhs = apply_xt(hadamard_product(*G, z));
      for (std::size_t j = 0; j < n; ++j)
        if (!(*active)[j]) rhs[j] = 0.0;
      auto op = [&](const Vec& v) {
        Vec u = apply_xt(hadamard_product(*H, apply_x(v)));
        for (std::size_t j = 0; j < n; ++j)
          if (!(*active)[j]) u[j] = 0.0;
        return u;
      };
      Vec db = conjugate_gradient(op, rhs, tol, 20 * static_cast<int>(n) + 100);
      return hadamard_product(*D, apply_x(db));
    };
    return lin;
  }

  double nll(const Vec& mu, const Vec& y) const {
    Vec t(mu.size());
    const double nu = model_.nuisance();
    for (std::size_t i = 0; i < mu.size(); ++i) {
      switch (model_.kind()) {
        case FamilyKind::Gaussian: t[i] = (mu[i] - y[i]) * (mu[i] - y[i]) / (2 * nu * nu); break;
        case FamilyKind::Gamma: t[i] = nu * (std::log(mu[i]) + y[i] / mu[i]); break;
        case FamilyKind::Poisson: t[i] = mu[i] - (y[i] > 0 ? y[i] * std::log(mu[i]) : 0.0); break;
        default: {
          double th = model_.link1(mu[i]);
          t[i] = model_.log_partition1(th) - y[i] * th;
        }
      }
    }
    return sum(t);
  }

 private:
  void check_input(const Vec& y) const {
    if (y.empty()) throw DomainError("lasso: empty input");
    if (opt_.design != LassoDesign::Identity && !is_power_of_two(y.size()))
      throw DomainError(std::string("lasso: the ") + to_string(opt_.design) + " design needs a power-of-two dimension");
    if (!accepts(y)) throw DomainError("lasso: observation outside the " + model_.name() + " support");
  }

  bool feasible(const Vec& eta) const {
    for (double v : eta) {
      if (opt_.scale == LassoScale::Mean && !model_.mu_in_domain(v)) return false;
      if (opt_.scale == LassoScale::Natural && !(model_.theta_in_domain(v) && model_.mu_in_domain(model_.mean1(v))))
        return false;
    }
    return true;
  }

  // Linear predictor of the unpenalized fit: the constant matching ȳ with
  // an intercept, else η₀.
  Vec null_fit(const Vec& y) const {
    double c = eta0_;
    if (opt_.intercept) c = opt_.scale == LassoScale::Mean ? mean(y) : model_.link1(mean(y));
    Vec eta(y.size(), c);
    if (!feasible(eta)) throw DomainError("lasso: null model outside the parameter domain (use an intercept)");
    return eta;
  }

  // Gradient of the negative log-likelihood with respect to η.
  Vec gradient(const Vec& eta, const Vec& y) const {
    Vec g(eta.size());
    for (std::size_t i = 0; i < eta.size(); ++i) {
      if (opt_.scale == LassoScale::Mean)
        g[i] = (eta[i] - y[i]) * model_.dlink1(eta[i]);
      else
        g[i] = model_.mean1(eta[i]) - y[i];
    }
    return g;
  }

  double nll_eta(const Vec& eta, const Vec& y) const {
    if (opt_.scale == LassoScale::Mean) return nll(eta, y);
    Vec t(eta.size());
    for (std::size_t i = 0; i < eta.size(); ++i) t[i] = model_.log_partition1(eta[i]) - y[i] * eta[i];
    return sum(t);
  }

  double penalty(const Vec& beta) const {
    Vec a(beta.size());
    for (std::size_t j = 0; j < beta.size(); ++j) a[j] = penalized(j) ? std::abs(beta[j]) : 0.0;
    return lambda_ * sum(a);
  }

  Vec prox(Vec v, double t) const {
    const double th = lambda_ * t;
    for (std::size_t j = 0; j < v.size(); ++j) {
      if (!penalized(j)) continue;
      double a = std::abs(v[j]) - th;
      v[j] = a > 0 ? std::copysign(a, v[j]) : 0.0;
    }
    return v;
  }

  Vec shifted(Vec eta) const {
    for (double& v : eta) v -= eta0_;
    return eta;
  }

  // Orthonormal X makes the Gaussian problem a soft threshold of Xᵀ(y − μ₀),
  // at λσ² for μ = Xβ and at λ (then divided by σ²) for θ = Xβ.
  Solution solve_gaussian(const Vec& y) const {
    const double s2 = model_.nuisance() * model_.nuisance();
    const bool natural = opt_.scale == LassoScale::Natural;
    const double mu0 = natural ? s2 * eta0_ : eta0_;
    Solution s;
    Vec r = y;
    for (double& v : r) v -= mu0;
    Vec z = apply_xt(r);
    for (std::size_t j = 0; j < z.size(); ++j) {
      if (penalized(j)) {
        double a = std::abs(z[j]) - (natural ? lambda_ : lambda_ * s2);
        z[j] = a > 0 ? std::copysign(a, z[j]) : 0.0;
      }
      if (natural) z[j] /= s2;
    }
    s.beta = z;
    s.mu = mean_of(eta_of(z));
    s.objective = nll(s.mu, y) + penalty(s.beta);
    return s;
  }

  // With X = I and θ = θ₀ + β the stationarity condition μ̂ᵢ − yᵢ ∈ −λ∂|βᵢ|
  // gives μ̂ = μ₀ + ST(y − μ₀, λ) for every family.
  Solution solve_separable(const Vec& y) const {
    const std::size_t d = y.size();
    Solution s;
    s.beta.assign(d, 0.0);
    s.mu.assign(d, 0.0);
    if (!model_.theta_in_domain(eta0_)) throw DomainError("lasso: θ = 0 is outside the " + model_.name() + " domain (set an offset)");
    const double c = model_.mean1(eta0_);
    for (std::size_t i = 0; i < d; ++i) {
      const double r = y[i] - c;
      const double a = std::abs(r) - lambda_;
      s.mu[i] = a > 0 ? c + std::copysign(a, r) : c;
      if (a > 0) s.beta[i] = model_.link1(s.mu[i]) - eta0_;
    }
    s.objective = nll(s.mu, y) + penalty(s.beta);
    return s;
  }

  template <class Op>
  static Vec conjugate_gradient(const Op& op, const Vec& b, double tol, int max_iter) {
    Vec x(b.size(), 0.0), r = b, p = b;
    double rr = norm2sq(r);
    const double stop = tol * tol * std::max(rr, 1e-300);
    if (rr == 0) return x;
    for (int k = 0; k < max_iter; ++k) {
      Vec ap = op(p);
      double pap = dot(p, ap);
      if (!(pap > 0)) throw NonConvergence("lasso jvp: active-set Hessian is not positive definite");
      double a = rr / pap;
      for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] += a * p[i];
        r[i] -= a * ap[i];
      }
      double nrr = norm2sq(r);
      if (nrr <= stop) return x;
      double beta = nrr / rr;
      rr = nrr;
      for (std::size_t i = 0; i < p.size(); ++i) p[i] = r[i] + beta * p[i];
    }
    throw NonConvergence("lasso jvp: conjugate gradients did not converge");
  }

  FamilyModel model_;
  double lambda_;
  LassoOptions opt_;
  double eta0_ = 0.0;
};

}  // namespace klrisk
