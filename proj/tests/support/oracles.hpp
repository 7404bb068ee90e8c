#pragma once

// Brute-force reference implementations used as test oracles. They share no
// code with the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include <Eigen/Core>

namespace volssl::testing {

/// Dice by walking the voxels one at a time.
inline double dice_by_counting(const std::vector<std::uint8_t>& p, const std::vector<std::uint8_t>& g) {
  long both = 0, np = 0, ng = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i]) ++np;
    if (g[i]) ++ng;
    if (p[i] && g[i]) ++both;
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(np + ng);
}

/// Two-sided Wilcoxon signed-rank p by listing all 2^n sign assignments of the
/// average ranks of |a - b| (zero differences dropped).
inline double wilcoxon_enumerated(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) d.push_back(a[i] - b[i]);
  const std::size_t n = d.size();
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n; ++i) {
    double below = 0, equal = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (std::abs(d[j]) < std::abs(d[i])) ++below;
      if (std::abs(d[j]) == std::abs(d[i])) ++equal;
    }
    rank[i] = below + (equal + 1.0) / 2.0;
  }
  double observed = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (d[i] > 0) observed += rank[i];
  std::uint64_t le = 0, ge = 0;
  const std::uint64_t total = std::uint64_t{1} << n;
  for (std::uint64_t m = 0; m < total; ++m) {
    double w = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (m >> i & 1) w += rank[i];
    if (w <= observed + 1e-9) ++le;
    if (w >= observed - 1e-9) ++ge;
  }
  const double p = 2.0 * static_cast<double>(std::min(le, ge)) / static_cast<double>(total);
  return std::min(1.0, p);
}

/// Unbiased HSIC as the U-statistic over ordered 4-tuples of distinct indices:
/// mean of k_ij l_ij + k_ij l_qr - 2 k_ij l_iq.
inline double hsic_u_statistic(const Eigen::MatrixXd& k, const Eigen::MatrixXd& l) {
  const long n = k.rows();
  double sum = 0.0;
  long count = 0;
  for (long i = 0; i < n; ++i)
    for (long j = 0; j < n; ++j) {
      if (j == i) continue;
      for (long q = 0; q < n; ++q) {
        if (q == i || q == j) continue;
        for (long r = 0; r < n; ++r) {
          if (r == i || r == j || r == q) continue;
          sum += k(i, j) * l(i, j) + k(i, j) * l(q, r) - 2.0 * k(i, j) * l(i, q);
          ++count;
        }
      }
    }
  return sum / static_cast<double>(count);
}

/// CKA(K, L) = HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L)) with literal Gram sums.
inline double cka_brute_force(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  const long n = x.rows();
  Eigen::MatrixXd k(n, n), l(n, n);
  for (long i = 0; i < n; ++i)
    for (long j = 0; j < n; ++j) {
      double a = 0, b = 0;
      for (long c = 0; c < x.cols(); ++c) a += x(i, c) * x(j, c);
      for (long c = 0; c < y.cols(); ++c) b += y(i, c) * y(j, c);
      k(i, j) = a;
      l(i, j) = b;
    }
  return hsic_u_statistic(k, l) / std::sqrt(hsic_u_statistic(k, k) * hsic_u_statistic(l, l));
}

/// Kolmogorov-Smirnov distance of a sample to Uniform(0, 1).
inline double ks_uniform(std::vector<double> p) {
  std::sort(p.begin(), p.end());
  const double n = static_cast<double>(p.size());
  double d = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    d = std::max(d, std::abs(static_cast<double>(i + 1) / n - p[i]));
    d = std::max(d, std::abs(p[i] - static_cast<double>(i) / n));
  }
  return d;
}

}  // namespace volssl::testing
