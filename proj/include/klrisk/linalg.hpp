#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "errors.hpp"

namespace klrisk {

using Vec = std::vector<double>;

// Pairwise summation; the result depends only on the order of the input.
inline double pairwise_sum(const double* x, std::size_t n) {
  if (n <= 16) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += x[i];
    return s;
  }
  std::size_t h = n / 2;
  return pairwise_sum(x, h) + pairwise_sum(x + h, n - h);
}

inline double sum(const Vec& x) { return pairwise_sum(x.data(), x.size()); }

inline double mean(const Vec& x) {
  return x.empty() ? 0.0 : sum(x) / static_cast<double>(x.size());
}

inline void require_same_size(const Vec& a, const Vec& b, const char* what) {
  if (a.size() != b.size())
    throw DomainError(std::string(what) + ": dimension mismatch (" + std::to_string(a.size()) +
                      " vs " + std::to_string(b.size()) + ")");
}

inline double dot(const Vec& a, const Vec& b) {
  require_same_size(a, b, "dot");
  Vec p(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) p[i] = a[i] * b[i];
  return sum(p);
}

inline double norm2sq(const Vec& a) { return dot(a, a); }

inline double norm_inf(const Vec& a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}

inline Vec add(const Vec& a, const Vec& b) {
  require_same_size(a, b, "add");
  Vec r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] + b[i];
  return r;
}

inline Vec sub(const Vec& a, const Vec& b) {
  require_same_size(a, b, "sub");
  Vec r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] - b[i];
  return r;
}

inline Vec scaled(const Vec& a, double s) {
  Vec r(a);
  for (double& v : r) v *= s;
  return r;
}

inline Vec axpy(double alpha, const Vec& x, const Vec& y) {
  require_same_size(x, y, "axpy");
  Vec r(y);
  for (std::size_t i = 0; i < x.size(); ++i) r[i] += alpha * x[i];
  return r;
}

inline Vec hadamard_product(const Vec& a, const Vec& b) {
  require_same_size(a, b, "hadamard_product");
  Vec r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] * b[i];
  return r;
}

inline bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

// In-place orthonormal Walsh-Hadamard transform (symmetric and self-inverse).
inline void fwht(Vec& x) {
  const std::size_t n = x.size();
  if (!is_power_of_two(n)) throw DomainError("fwht: length must be a power of two");
  for (std::size_t h = 1; h < n; h *= 2) {
    for (std::size_t i = 0; i < n; i += 2 * h) {
      for (std::size_t j = i; j < i + h; ++j) {
        double a = x[j], b = x[j + h];
        x[j] = a + b;
        x[j + h] = a - b;
      }
    }
  }
  const double s = 1.0 / std::sqrt(static_cast<double>(n));
  for (double& v : x) v *= s;
}

// Orthonormal Haar analysis. Output layout: [scaling, coarsest detail, ...,
// finest details (n/2)].
inline void haar_forward(Vec& x) {
  const std::size_t n = x.size();
  if (!is_power_of_two(n)) throw DomainError("haar: length must be a power of two");
  const double r = 1.0 / std::sqrt(2.0);
  Vec t(n);
  for (std::size_t len = n; len > 1; len /= 2) {
    const std::size_t h = len / 2;
    for (std::size_t k = 0; k < h; ++k) {
      t[k] = (x[2 * k] + x[2 * k + 1]) * r;
      t[h + k] = (x[2 * k] - x[2 * k + 1]) * r;
    }
    std::copy(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(len), x.begin());
  }
}

// Inverse of haar_forward (synthesis).
inline void haar_inverse(Vec& c) {
  const std::size_t n = c.size();
  if (!is_power_of_two(n)) throw DomainError("haar: length must be a power of two");
  const double r = 1.0 / std::sqrt(2.0);
  Vec t(n);
  for (std::size_t len = 2; len <= n; len *= 2) {
    const std::size_t h = len / 2;
    for (std::size_t k = 0; k < h; ++k) {
      t[2 * k] = (c[k] + c[h + k]) * r;
      t[2 * k + 1] = (c[k] - c[h + k]) * r;
    }
    std::copy(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(len), c.begin());
  }
}

// Mean and standard error of a sample, summed in index order.
struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
  std::size_t n = 0;
};

inline MeanSe mean_se(const Vec& x) {
  MeanSe r;
  r.n = x.size();
  if (x.empty()) return r;
  r.mean = mean(x);
  if (x.size() < 2) {
    r.se = INFINITY;
    return r;
  }
  Vec d(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) d[i] = (x[i] - r.mean) * (x[i] - r.mean);
  double var = sum(d) / static_cast<double>(x.size() - 1);
  r.se = std::sqrt(var / static_cast<double>(x.size()));
  return r;
}

}  // namespace klrisk
