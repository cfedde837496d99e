#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "errors.hpp"
#include "expfam.hpp"
#include "linalg.hpp"

namespace klrisk {

enum class PredictorKind {
  Identity,
  ConstantMean,
  LinearFilter,
  NonLocalMeans,
  LassoOrthogonal,
  Fixed,
  DenseLinear,
  Custom
};

inline const char* to_string(PredictorKind k) {
  switch (k) {
    case PredictorKind::Identity: return "identity";
    case PredictorKind::ConstantMean: return "constant_mean";
    case PredictorKind::LinearFilter: return "linear_filter";
    case PredictorKind::NonLocalMeans: return "nlm";
    case PredictorKind::LassoOrthogonal: return "lasso";
    case PredictorKind::Fixed: return "fixed";
    case PredictorKind::DenseLinear: return "dense_linear";
    case PredictorKind::Custom: return "custom";
  }
  return "?";
}

struct Grid2D {
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t size() const { return height * width; }
};

using VecFn = std::function<Vec(const Vec&)>;

struct JvpRequest {
  Vec y;
  Vec direction;
  double epsilon = 1e-4;
};

// A predictor frozen at one input y: its value there and the means to
// differentiate or re-evaluate it. Holds references to the predictor, which
// must outlive it.
struct Linearization {
  Vec y;
  Vec value;
  VecFn jvp;
  VecFn evaluate;
  std::optional<Vec> diagonal;  // exact ∂μ̂ᵢ/∂yᵢ when cheap
  bool affine = false;
};

// Opaque solver state carried between neighbouring tuning values.
struct WarmStart {
  Vec state;
};

class Predictor;
Vec finite_difference_jvp(const Predictor& p, const Vec& y, const Vec& zeta, double rel_eps = 1e-4);

class Predictor {
 public:
  virtual ~Predictor() = default;

  virtual PredictorKind kind() const = 0;
  virtual std::string name() const { return to_string(kind()); }
  virtual double tuning() const { return 0.0; }

  virtual Vec evaluate(const Vec& y) const = 0;

  virtual Vec jvp(const Vec& y, const Vec& zeta, double rel_eps = 1e-4) const {
    return finite_difference_jvp(*this, y, zeta, rel_eps);
  }

  virtual bool is_affine() const { return false; }

  // Inputs at which evaluate() is defined.
  virtual bool accepts(const Vec& y) const {
    for (double v : y)
      if (!std::isfinite(v)) return false;
    return true;
  }

  virtual std::optional<Vec> jacobian_diagonal(const Vec&) const { return std::nullopt; }

  // μ̂(y − eᵢ).
  virtual Vec downshift_evaluate(const Vec& y, std::size_t i) const {
    check_downshift(y, i);
    Vec z(y);
    z[i] -= 1.0;
    return evaluate(z);
  }

  virtual Linearization linearize(const Vec& y, WarmStart* = nullptr) const {
    Linearization lin;
    lin.y = y;
    lin.value = evaluate(y);
    lin.affine = is_affine();
    lin.diagonal = jacobian_diagonal(y);
    lin.jvp = [this, y](const Vec& z) { return jvp(y, z); };
    lin.evaluate = [this](const Vec& v) { return evaluate(v); };
    return lin;
  }

 protected:
  static void check_downshift(const Vec& y, std::size_t i) {
    if (i >= y.size()) throw DomainError("downshift: index out of range");
    if (!(y[i] >= 1.0)) throw DomainError("downshift: y[" + std::to_string(i) + "] < 1");
  }
};

inline Vec jvp(const Predictor& p, const JvpRequest& req) {
  if (!(req.epsilon > 0)) throw DomainError("jvp: epsilon must be > 0");
  return p.jvp(req.y, req.direction, req.epsilon);
}

// Central difference with step 1e-4·(1+‖y‖∞)/‖ζ‖∞, halved while y ± εζ leaves
// the predictor's input domain.
inline Vec finite_difference_jvp(const Predictor& p, const Vec& y, const Vec& zeta, double rel_eps) {
  require_same_size(y, zeta, "jvp");
  double zn = norm_inf(zeta);
  if (zn == 0) return Vec(y.size(), 0.0);
  double eps = rel_eps * (1.0 + norm_inf(y)) / zn;
  for (int k = 0; k <= 10; ++k, eps *= 0.5) {
    Vec yp = axpy(eps, zeta, y);
    Vec ym = axpy(-eps, zeta, y);
    if (!p.accepts(yp) || !p.accepts(ym)) continue;
    Vec fp = p.evaluate(yp);
    Vec fm = p.evaluate(ym);
    Vec r(fp.size());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = (fp[i] - fm[i]) / (2 * eps);
    return r;
  }
  throw DomainError("jvp: perturbed point leaves the domain after 10 step halvings");
}

// Lower bound applied to μ̂ before links, logs and inverses.
inline double mu_floor(const Vec& y) {
  double m = mean(y);
  return m > 0 ? 1e-8 * m : std::numeric_limits<double>::min();
}

// Clamps μ̂ into the family's mean domain; returns the number of clamped
// entries. Gaussian means are never touched.
inline std::size_t apply_floor(const FamilyModel& m, double floor, Vec& mu_hat) {
  if (m.kind() == FamilyKind::Gaussian) return 0;
  std::size_t count = 0;
  for (double& v : mu_hat) {
    if (!(v >= floor)) {
      v = floor;
      ++count;
    }
    if (m.kind() == FamilyKind::Binomial && !(v <= m.nuisance() - floor)) {
      v = m.nuisance() - floor;
      ++count;
    }
  }
  return count;
}

inline NaturalPoint natural_evaluate(const Predictor& p, const FamilyModel& m, const Vec& y,
                                     std::size_t* floor_count = nullptr) {
  Vec mu = p.evaluate(y);
  std::size_t c = apply_floor(m, mu_floor(y), mu);
  if (floor_count) *floor_count = c;
  return link(m, mu);
}

// diag(φ'(μ̂(y))) · Jζ.
inline Vec natural_jvp(const Predictor& p, const FamilyModel& m, const Vec& y, const Vec& zeta) {
  Vec mu = p.evaluate(y);
  apply_floor(m, mu_floor(y), mu);
  Vec j = p.jvp(y, zeta);
  for (std::size_t i = 0; i < j.size(); ++i) j[i] *= m.dlink1(mu[i]);
  return j;
}

class Identity : public Predictor {
 public:
  PredictorKind kind() const override { return PredictorKind::Identity; }
  Vec evaluate(const Vec& y) const override { return y; }
  Vec jvp(const Vec&, const Vec& zeta, double = 1e-4) const override { return zeta; }
  bool is_affine() const override { return true; }
  std::optional<Vec> jacobian_diagonal(const Vec& y) const override { return Vec(y.size(), 1.0); }
};

class ConstantMean : public Predictor {
 public:
  PredictorKind kind() const override { return PredictorKind::ConstantMean; }
  Vec evaluate(const Vec& y) const override { return Vec(y.size(), mean(y)); }
  Vec jvp(const Vec&, const Vec& zeta, double = 1e-4) const override {
    return Vec(zeta.size(), mean(zeta));
  }
  bool is_affine() const override { return true; }
  std::optional<Vec> jacobian_diagonal(const Vec& y) const override {
    return Vec(y.size(), 1.0 / static_cast<double>(y.size()));
  }
  Vec downshift_evaluate(const Vec& y, std::size_t i) const override {
    check_downshift(y, i);
    return Vec(y.size(), (sum(y) - 1.0) / static_cast<double>(y.size()));
  }
};

// Returns a fixed vector whatever the input.
class Fixed : public Predictor {
 public:
  explicit Fixed(Vec c) : c_(std::move(c)) {}
  PredictorKind kind() const override { return PredictorKind::Fixed; }
  Vec evaluate(const Vec& y) const override {
    require_same_size(y, c_, "fixed predictor");
    return c_;
  }
  Vec jvp(const Vec&, const Vec& zeta, double = 1e-4) const override { return Vec(zeta.size(), 0.0); }
  bool is_affine() const override { return true; }
  std::optional<Vec> jacobian_diagonal(const Vec& y) const override { return Vec(y.size(), 0.0); }
  Vec downshift_evaluate(const Vec& y, std::size_t i) const override {
    check_downshift(y, i);
    return c_;
  }

 private:
  Vec c_;
};

// μ̂ = W y for a dense row-major d×d matrix.
class DenseLinear : public Predictor {
 public:
  DenseLinear(std::size_t d, Vec w) : d_(d), w_(std::move(w)) {
    if (w_.size() != d * d) throw DomainError("dense_linear: matrix must be d*d");
  }
  PredictorKind kind() const override { return PredictorKind::DenseLinear; }
  Vec evaluate(const Vec& y) const override {
    if (y.size() != d_) throw DomainError("dense_linear: dimension mismatch");
    Vec r(d_);
    for (std::size_t i = 0; i < d_; ++i) r[i] = pairwise_dot(&w_[i * d_], y.data());
    return r;
  }
  Vec jvp(const Vec&, const Vec& zeta, double = 1e-4) const override { return evaluate(zeta); }
  bool is_affine() const override { return true; }
  std::optional<Vec> jacobian_diagonal(const Vec&) const override {
    Vec g(d_);
    for (std::size_t i = 0; i < d_; ++i) g[i] = w_[i * d_ + i];
    return g;
  }
  Vec downshift_evaluate(const Vec& y, std::size_t i) const override {
    check_downshift(y, i);
    Vec r = evaluate(y);
    for (std::size_t k = 0; k < d_; ++k) r[k] -= w_[k * d_ + i];
    return r;
  }
  double trace() const {
    Vec g = *jacobian_diagonal(Vec());
    return sum(g);
  }

 private:
  double pairwise_dot(const double* row, const double* y) const {
    Vec p(d_);
    for (std::size_t j = 0; j < d_; ++j) p[j] = row[j] * y[j];
    return sum(p);
  }
  std::size_t d_;
  Vec w_;
};

// Arbitrary user function; jvp by finite differences unless one is given.
class FunctionPredictor : public Predictor {
 public:
  explicit FunctionPredictor(VecFn f, std::function<Vec(const Vec&, const Vec&)> df = {}, bool affine = false)
      : f_(std::move(f)), df_(std::move(df)), affine_(affine) {}
  PredictorKind kind() const override { return PredictorKind::Custom; }
  Vec evaluate(const Vec& y) const override { return f_(y); }
  Vec jvp(const Vec& y, const Vec& zeta, double eps = 1e-4) const override {
    return df_ ? df_(y, zeta) : finite_difference_jvp(*this, y, zeta, eps);
  }
  bool is_affine() const override { return affine_; }

 private:
  VecFn f_;
  std::function<Vec(const Vec&, const Vec&)> df_;
  bool affine_;
};

// Circular convolution with a row-normalized Gaussian kernel exp(−‖δ‖²/τ²).
// The kernel is separable, so it is applied along rows and then columns.
class LinearFilter : public Predictor {
 public:
  LinearFilter(Grid2D grid, double tau) : grid_(grid), tau_(tau) {
    if (!(tau > 0) || !std::isfinite(tau)) throw DomainError("linear_filter: tau must be > 0");
    if (grid.size() == 0) throw DomainError("linear_filter: empty grid");
    kx_ = kernel(grid.width);
    ky_ = kernel(grid.height);
  }

  PredictorKind kind() const override { return PredictorKind::LinearFilter; }
  double tuning() const override { return tau_; }
  const Grid2D& grid() const { return grid_; }

  Vec evaluate(const Vec& y) const override {
    if (y.size() != grid_.size()) throw DomainError("linear_filter: dimension mismatch");
    const std::size_t h = grid_.height, w = grid_.width;
    Vec tmp(y.size(), 0.0), out(y.size(), 0.0), ext(2 * w);
    for (std::size_t r = 0; r < h; ++r) {
      std::copy(&y[r * w], &y[r * w] + w, ext.begin());
      std::copy(&y[r * w], &y[r * w] + w, ext.begin() + static_cast<long>(w));
      double* dst = &tmp[r * w];
      for (const auto& t : kx_) {
        const double* src = &ext[t.shift];
        for (std::size_t c = 0; c < w; ++c) dst[c] += t.weight * src[c];
      }
    }
    for (std::size_t r = 0; r < h; ++r) {
      double* dst = &out[r * w];
      for (const auto& t : ky_) {
        const double* src = &tmp[((r + t.shift) % h) * w];
        for (std::size_t c = 0; c < w; ++c) dst[c] += t.weight * src[c];
      }
    }
    return out;
  }

  Vec jvp(const Vec&, const Vec& zeta, double = 1e-4) const override { return evaluate(zeta); }
  bool is_affine() const override { return true; }

  // Weight of the zero offset; W is circulant so tr W = d·w0.
  double center_weight() const { return kx_.front().weight * ky_.front().weight; }
  double trace() const { return static_cast<double>(grid_.size()) * center_weight(); }

  std::optional<Vec> jacobian_diagonal(const Vec&) const override {
    return Vec(grid_.size(), center_weight());
  }

  Vec downshift_evaluate(const Vec& y, std::size_t i) const override {
    check_downshift(y, i);
    Vec e(y.size(), 0.0);
    e[i] = 1.0;
    Vec r = evaluate(y);
    Vec col = evaluate(e);
    for (std::size_t k = 0; k < r.size(); ++k) r[k] -= col[k];
    return r;
  }

 private:
  struct Tap {
    std::size_t shift;
    double weight;
  };

  // Taps over wrapped offsets; the first tap is the zero offset.
  std::vector<Tap> kernel(std::size_t n) const {
    std::vector<Tap> taps;
    double total = 0;
    for (std::size_t s = 0; s < n; ++s) {
      double off = static_cast<double>(std::min(s, n - s));
      double wgt = std::exp(-off * off / (tau_ * tau_));
      if (wgt < 1e-18) continue;  // below double resolution next to the unit center tap
      taps.push_back({s, wgt});
      total += wgt;
    }
    for (auto& t : taps) t.weight /= total;
    return taps;
  }

  Grid2D grid_;
  double tau_;
  std::vector<Tap> kx_, ky_;
};

struct NlmOptions {
  std::size_t patch = 5;
  std::size_t search = 11;
  bool normalized = true;
};

// Non-local means over a periodic search window with a noise-adapted patch
// dissimilarity; weights are exp(−d(Pᵢy, Pⱼy)/τ).
class NonLocalMeans : public Predictor {
 public:
  NonLocalMeans(Grid2D grid, double tau, FamilyModel family, NlmOptions opt = {})
      : grid_(grid), tau_(tau), family_(family), opt_(opt) {
    if (!(tau > 0)) throw DomainError("nlm: tau must be > 0");
    if (opt.patch % 2 == 0 || opt.search % 2 == 0) throw DomainError("nlm: patch and search sizes must be odd");
    if (family.kind() != FamilyKind::Gaussian && family.kind() != FamilyKind::Gamma &&
        family.kind() != FamilyKind::Poisson)
      throw UnsupportedFamily("nlm: no dissimilarity for " + family.name());
  }

  PredictorKind kind() const override { return PredictorKind::NonLocalMeans; }
  double tuning() const override { return tau_; }

  bool accepts(const Vec& y) const override {
    for (double v : y) {
      if (!std::isfinite(v)) return false;
      if (family_.kind() == FamilyKind::Gamma && !(v > 0)) return false;
    }
    return true;
  }

  Vec evaluate(const Vec& y) const override {
    if (y.size() != grid_.size()) throw DomainError("nlm: dimension mismatch");
    if (!accepts(y)) throw DomainError("nlm: input outside the family support");
    const long h = static_cast<long>(grid_.height), w = static_cast<long>(grid_.width);
    const long sr_y = half(opt_.search, grid_.height), sr_x = half(opt_.search, grid_.width);
    const long pr_y = half(opt_.patch, grid_.height), pr_x = half(opt_.patch, grid_.width);
    const std::size_t d = y.size();
    Vec num(d, 0.0), den(d, 0.0), delta(d), tmp(d);
    for (long sy = -sr_y; sy <= sr_y; ++sy) {
      for (long sx = -sr_x; sx <= sr_x; ++sx) {
        for (long r = 0; r < h; ++r)
          for (long c = 0; c < w; ++c)
            delta[r * w + c] = dissimilarity(y[r * w + c], y[wrap(r + sy, h) * w + wrap(c + sx, w)]);
        for (long r = 0; r < h; ++r)
          for (long c = 0; c < w; ++c) {
            double s = 0;
            for (long o = -pr_x; o <= pr_x; ++o) s += delta[r * w + wrap(c + o, w)];
            tmp[r * w + c] = s;
          }
        for (long r = 0; r < h; ++r)
          for (long c = 0; c < w; ++c) {
            double s = 0;
            for (long o = -pr_y; o <= pr_y; ++o) s += tmp[wrap(r + o, h) * w + c];
            double wt = std::exp(-s / tau_);
            num[r * w + c] += wt * y[wrap(r + sy, h) * w + wrap(c + sx, w)];
            den[r * w + c] += wt;
          }
      }
    }
    if (opt_.normalized)
      for (std::size_t i = 0; i < d; ++i) num[i] /= den[i];
    return num;
  }

  // Unnormalized weight W_ij for pixel i and search offset (sy, sx).
  double weight(const Vec& y, std::size_t i, long sy, long sx) const {
    const long h = static_cast<long>(grid_.height), w = static_cast<long>(grid_.width);
    const long pr_y = half(opt_.patch, grid_.height), pr_x = half(opt_.patch, grid_.width);
    long r = static_cast<long>(i) / w, c = static_cast<long>(i) % w;
    double s = 0;
    for (long oy = -pr_y; oy <= pr_y; ++oy)
      for (long ox = -pr_x; ox <= pr_x; ++ox)
        s += dissimilarity(y[wrap(r + oy, h) * w + wrap(c + ox, w)],
                           y[wrap(r + oy + sy, h) * w + wrap(c + ox + sx, w)]);
    return std::exp(-s / tau_);
  }

  double dissimilarity(double a, double b) const {
    switch (family_.kind()) {
      case FamilyKind::Gaussian: {
        double s = family_.nuisance();
        return (a - b) * (a - b) / (2 * s * s);
      }
      case FamilyKind::Gamma: return std::log((a + b) * (a + b) / (4 * a * b));
      default: return xlogx(a) + xlogx(b) - 2 * xlogx(0.5 * (a + b));
    }
  }

 private:
  // x log x with 0 log 0 = 0; extended by 0 below zero so finite-difference
  // probes around zero counts stay defined.
  static double xlogx(double x) { return x > 0 ? x * std::log(x) : 0.0; }
  static long wrap(long i, long n) { return ((i % n) + n) % n; }
  static long half(std::size_t size, std::size_t dim) {
    long r = static_cast<long>(size / 2);
    return std::min(r, static_cast<long>((dim - 1) / 2));
  }

  Grid2D grid_;
  double tau_;
  FamilyModel family_;
  NlmOptions opt_;
};

// p̂ = m̂/(r + m̂): negative-binomial success probability from a mean predictor.
class ProbabilityFromMean : public Predictor {
 public:
  ProbabilityFromMean(std::shared_ptr<const Predictor> base, double r) : base_(std::move(base)), r_(r) {
    if (!(r > 0)) throw DomainError("probability_from_mean: r must be > 0");
  }
  PredictorKind kind() const override { return PredictorKind::Custom; }
  std::string name() const override { return "probability(" + base_->name() + ")"; }
  double tuning() const override { return base_->tuning(); }
  Vec evaluate(const Vec& y) const override { return transform(base_->evaluate(y)); }
  Vec jvp(const Vec& y, const Vec& zeta, double eps = 1e-4) const override {
    Vec m = base_->evaluate(y);
    Vec j = base_->jvp(y, zeta, eps);
    for (std::size_t i = 0; i < j.size(); ++i) j[i] *= r_ / ((r_ + m[i]) * (r_ + m[i]));
    return j;
  }
  std::optional<Vec> jacobian_diagonal(const Vec& y) const override {
    auto g = base_->jacobian_diagonal(y);
    if (!g) return std::nullopt;
    Vec m = base_->evaluate(y);
    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] *= r_ / ((r_ + m[i]) * (r_ + m[i]));
    return g;
  }
  Vec downshift_evaluate(const Vec& y, std::size_t i) const override {
    return transform(base_->downshift_evaluate(y, i));
  }

 private:
  Vec transform(Vec m) const {
    for (double& v : m) {
      if (!(v >= 0)) throw DomainError("probability_from_mean: negative mean");
      v = v / (r_ + v);
    }
    return m;
  }
  std::shared_ptr<const Predictor> base_;
  double r_;
};

// The same map applied to a frozen mean predictor.
inline Linearization probability_linearization(const Linearization& lin, double r) {
  if (!(r > 0)) throw DomainError("probability_linearization: r must be > 0");
  auto to_p = [r](Vec m) {
    for (double& v : m) {
      if (!(v >= 0)) throw DomainError("probability_from_mean: negative mean");
      v = v / (r + v);
    }
    return m;
  };
  Linearization p;
  p.y = lin.y;
  p.value = to_p(lin.value);
  Vec scale(lin.value.size());
  for (std::size_t i = 0; i < scale.size(); ++i) scale[i] = r / ((r + lin.value[i]) * (r + lin.value[i]));
  p.jvp = [jvp = lin.jvp, scale](const Vec& z) { return hadamard_product(jvp(z), scale); };
  p.evaluate = [ev = lin.evaluate, to_p](const Vec& y) { return to_p(ev(y)); };
  if (lin.diagonal) p.diagonal = hadamard_product(*lin.diagonal, scale);
  return p;
}

}  // namespace klrisk
