#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>

#include "errors.hpp"
#include "linalg.hpp"
#include "parallel.hpp"
#include "predictors.hpp"
#include "random.hpp"

namespace klrisk {

enum class ProbeKind { Gaussian, Rademacher };

struct ProbePlan {
  std::size_t n_probes = 32;
  ProbeKind kind = ProbeKind::Gaussian;
  std::uint64_t seed = 0;
};

// 1024 probes for small vectors, 32 for images.
inline std::size_t default_probe_count(std::size_t d) {
  if (d <= 64) return 1024;
  if (d >= 4096) return 32;
  return 128;
}

struct TraceEstimate {
  double estimate = 0;
  double std_error = 0;
};

enum class DownshiftMode { Auto, Exact, Bernoulli };

inline Vec make_probe(std::size_t d, ProbeKind kind, std::uint64_t seed, std::size_t k) {
  Rng rng(derive_seed(seed, SeedStream::Probe, k));
  Vec z(d);
  if (kind == ProbeKind::Gaussian) {
    std::normal_distribution<double> n(0.0, 1.0);
    for (double& v : z) v = n(rng);
  } else {
    for (double& v : z) v = (rng() >> 63) ? 1.0 : -1.0;
  }
  return z;
}

inline TraceEstimate summarize_probes(const Vec& samples) {
  MeanSe m = mean_se(samples);
  return {m.mean, m.se};
}

// Hutchinson estimate of tr[diag(g)·Jf] from ⟨ζ, g ⊙ Jf ζ⟩; an empty g means
// the identity.
inline TraceEstimate mc_trace(const VecFn& f_jvp, const Vec& g, std::size_t d, const ProbePlan& plan) {
  if (plan.n_probes < 1) throw DomainError("mc_trace: n_probes must be >= 1");
  if (!g.empty() && g.size() != d) throw DomainError("mc_trace: weight dimension mismatch");
  Vec samples(plan.n_probes);
  parallel_for(plan.n_probes, [&](std::size_t k) {
    Vec z = make_probe(d, plan.kind, plan.seed, k);
    Vec jz = f_jvp(z);
    Vec p(d);
    for (std::size_t i = 0; i < d; ++i) p[i] = z[i] * jz[i] * (g.empty() ? 1.0 : g[i]);
    samples[k] = sum(p);
  });
  return summarize_probes(samples);
}

inline TraceEstimate mc_trace(const Predictor& f, const Vec& g, const Vec& y, const ProbePlan& plan) {
  return mc_trace([&](const Vec& z) { return f.jvp(y, z); }, g, y.size(), plan);
}

// Weighted trace Σ gᵢ Jᵢᵢ: exact when the diagonal is known, else Monte Carlo.
inline TraceEstimate weighted_trace(const Linearization& lin, const Vec& g, const ProbePlan& plan) {
  const std::size_t d = lin.y.size();
  if (lin.diagonal) {
    Vec p(d);
    for (std::size_t i = 0; i < d; ++i) p[i] = (*lin.diagonal)[i] * (g.empty() ? 1.0 : g[i]);
    return {sum(p), 0.0};
  }
  return mc_trace(lin.jvp, g, d, plan);
}

// ⟨y, f↓(y)⟩ ≈ ⟨y, f(y) − (Jf ζ)⊙ζ⟩ with ζ Rademacher, where f = t(μ̂) and
// Jf = diag(w)·Jμ̂ (w empty for t = identity). When the diagonal of Jμ̂ is
// known, E[(Jζ)⊙ζ] = diag J is used directly and the result is deterministic.
inline TraceEstimate bernoulli_downshift_dot(const Linearization& lin, const Vec& f_value, const Vec& w,
                                             const ProbePlan& plan) {
  const Vec& y = lin.y;
  const std::size_t d = y.size();
  require_same_size(y, f_value, "bernoulli_downshift_dot");
  if (lin.diagonal) {
    Vec p(d);
    for (std::size_t i = 0; i < d; ++i)
      p[i] = y[i] * (f_value[i] - (w.empty() ? 1.0 : w[i]) * (*lin.diagonal)[i]);
    return {sum(p), 0.0};
  }
  if (plan.n_probes < 1) throw DomainError("bernoulli_downshift_dot: n_probes must be >= 1");
  Vec samples(plan.n_probes);
  parallel_for(plan.n_probes, [&](std::size_t k) {
    Vec z = make_probe(d, ProbeKind::Rademacher, plan.seed, k);
    Vec jz = lin.jvp(z);
    Vec p(d);
    for (std::size_t i = 0; i < d; ++i) p[i] = y[i] * (f_value[i] - (w.empty() ? 1.0 : w[i]) * jz[i] * z[i]);
    samples[k] = sum(p);
  });
  return summarize_probes(samples);
}

// Probe-only variant that never consults a known diagonal.
inline TraceEstimate bernoulli_downshift_dot_probes(const Linearization& lin, const ProbePlan& plan) {
  Linearization l = lin;
  l.diagonal.reset();
  return bernoulli_downshift_dot(l, lin.value, Vec(), plan);
}

inline TraceEstimate bernoulli_downshift_dot(const Predictor& f, const Vec& y, const ProbePlan& plan) {
  Linearization lin = f.linearize(y);
  return bernoulli_downshift_dot(lin, lin.value, Vec(), plan);
}

// μ̂ᵢ(y − eᵢ) for every i with yᵢ > 0 (entries with yᵢ = 0 are left at 0).
inline Vec downshift_values(const Linearization& lin) {
  const Vec& y = lin.y;
  const std::size_t d = y.size();
  Vec v(d, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    if (y[i] != 0 && !(y[i] >= 1)) throw DomainError("downshift: y[" + std::to_string(i) + "] is not a count");
  if (lin.affine && lin.diagonal) {
    for (std::size_t i = 0; i < d; ++i)
      if (y[i] > 0) v[i] = lin.value[i] - (*lin.diagonal)[i];
    return v;
  }
  parallel_for(d, [&](std::size_t i) {
    if (y[i] == 0) return;
    if (lin.affine) {
      Vec e(d, 0.0);
      e[i] = 1.0;
      v[i] = lin.value[i] - lin.jvp(e)[i];
    } else {
      Vec z(y);
      z[i] -= 1.0;
      v[i] = lin.evaluate(z)[i];
    }
  });
  return v;
}

// Σᵢ yᵢ fᵢ(y − eᵢ), re-evaluating only where yᵢ > 0.
inline double exact_downshift_dot(const Linearization& lin) {
  Vec v = downshift_values(lin);
  return dot(lin.y, v);
}

inline double exact_downshift_dot(const Predictor& f, const Vec& y) {
  bool any = false;
  for (double v : y) any = any || v != 0;
  if (!any) return 0.0;
  return exact_downshift_dot(f.linearize(y));
}

inline bool use_exact_downshift(DownshiftMode mode, const Linearization& lin) {
  if (mode == DownshiftMode::Exact) return true;
  if (mode == DownshiftMode::Bernoulli) return false;
  return lin.y.size() <= 256 || lin.affine;
}

}  // namespace klrisk
