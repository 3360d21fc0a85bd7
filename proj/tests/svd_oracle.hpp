#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

// Independent singular-value oracle: one-sided Jacobi at extended precision.
// Columns are rotated until pairwise orthogonal; their norms are the singular
// values. Shared by the analysis unit tests and the acceptance harness so the
// production SVD path is always checked against a second implementation.
inline std::vector<long double> jacobi_singular_values(size_t m, size_t n,
                                                       std::vector<long double> a) {
  if (m < n) {  // work on the tall orientation
    std::vector<long double> t(a.size());
    for (size_t i = 0; i < m; ++i)
      for (size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
    std::swap(m, n);
    a = std::move(t);
  }
  for (int sweep = 0; sweep < 60; ++sweep) {
    bool changed = false;
    for (size_t p = 0; p + 1 < n; ++p)
      for (size_t q = p + 1; q < n; ++q) {
        long double app = 0, aqq = 0, apq = 0;
        for (size_t i = 0; i < m; ++i) {
          app += a[i * n + p] * a[i * n + p];
          aqq += a[i * n + q] * a[i * n + q];
          apq += a[i * n + p] * a[i * n + q];
        }
        if (fabsl(apq) <= 1e-24L * sqrtl(app * aqq)) continue;
        changed = true;
        long double zeta = (aqq - app) / (2.0L * apq);
        long double t = (zeta >= 0 ? 1.0L : -1.0L) / (fabsl(zeta) + sqrtl(1 + zeta * zeta));
        long double c = 1.0L / sqrtl(1 + t * t), s = c * t;
        for (size_t i = 0; i < m; ++i) {
          long double vp = a[i * n + p], vq = a[i * n + q];
          a[i * n + p] = c * vp - s * vq;
          a[i * n + q] = s * vp + c * vq;
        }
      }
    if (!changed) break;
  }
  std::vector<long double> sv(n);
  for (size_t j = 0; j < n; ++j) {
    long double sum = 0;
    for (size_t i = 0; i < m; ++i) sum += a[i * n + j] * a[i * n + j];
    sv[j] = sqrtl(sum);
  }
  std::sort(sv.rbegin(), sv.rend());
  return sv;
}

// Proportional effective rank computed from the oracle's singular values with
// the same trimming and entropy rules as the production code.
inline double oracle_per(size_t m, size_t n, const std::vector<long double>& a) {
  auto sv = jacobi_singular_values(m, n, a);
  long double top = sv.empty() ? 0.0L : sv[0];
  long double total = 0;
  std::vector<long double> kept;
  for (auto s : sv)
    if (s > 1e-12L * top) {
      kept.push_back(s);
      total += s;
    }
  long double entropy = 0;
  for (auto s : kept) {
    long double p = s / total;
    entropy -= p * logl(p);
  }
  return static_cast<double>(expl(entropy) / static_cast<long double>(std::min(m, n)));
}
