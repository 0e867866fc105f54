#pragma once

// Independent reference computations used only by the tests. None of these
// call into the library's numerics.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

namespace oracle {

using Matrix = std::vector<double>;  // row-major

// Singular values of a rows x cols matrix by one-sided Jacobi rotations, descending.
inline std::vector<double> singular_values(Matrix a, std::size_t rows, std::size_t cols) {
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p + 1 < cols; ++p) {
      for (std::size_t q = p + 1; q < cols; ++q) {
        double alpha = 0, beta = 0, gamma = 0;
        for (std::size_t i = 0; i < rows; ++i) {
          const double x = a[i * cols + p], y = a[i * cols + q];
          alpha += x * x;
          beta += y * y;
          gamma += x * y;
        }
        if (gamma == 0.0) continue;
        off = std::max(off, std::abs(gamma) / std::sqrt(alpha * beta));
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t), s = c * t;
        for (std::size_t i = 0; i < rows; ++i) {
          const double x = a[i * cols + p], y = a[i * cols + q];
          a[i * cols + p] = c * x - s * y;
          a[i * cols + q] = s * x + c * y;
        }
      }
    }
    if (off < 1e-15) break;
  }
  std::vector<double> sv(cols);
  for (std::size_t j = 0; j < cols; ++j) {
    double norm = 0;
    for (std::size_t i = 0; i < rows; ++i) norm += a[i * cols + j] * a[i * cols + j];
    sv[j] = std::sqrt(norm);
  }
  std::sort(sv.rbegin(), sv.rend());
  return sv;
}

inline Matrix matmul(const Matrix& a, const Matrix& b, std::size_t m, std::size_t k, std::size_t n) {
  Matrix c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t l = 0; l < k; ++l) c[i * n + j] += a[i * k + l] * b[l * n + j];
  return c;
}

// Direct stride-1 convolution with zero padding; x [N,C,H,W], w [O,C,kh,kw], b [O].
inline std::vector<double> conv2d(const std::vector<double>& x, const std::vector<double>& w,
                                  const std::vector<double>& b, std::size_t n, std::size_t c, std::size_t h,
                                  std::size_t wd, std::size_t o, std::size_t kh, std::size_t kw, std::size_t pad) {
  const std::size_t oh = h + 2 * pad - kh + 1, ow = wd + 2 * pad - kw + 1;
  std::vector<double> out(n * o * oh * ow, 0.0);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t f = 0; f < o; ++f)
      for (std::size_t r = 0; r < oh; ++r)
        for (std::size_t q = 0; q < ow; ++q) {
          double acc = b[f];
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long rr = static_cast<long>(r + i) - static_cast<long>(pad);
                const long cc = static_cast<long>(q + j) - static_cast<long>(pad);
                if (rr < 0 || cc < 0 || rr >= static_cast<long>(h) || cc >= static_cast<long>(wd)) continue;
                acc += x[((s * c + ch) * h + static_cast<std::size_t>(rr)) * wd + static_cast<std::size_t>(cc)] *
                       w[((f * c + ch) * kh + i) * kw + j];
              }
          out[((s * o + f) * oh + r) * ow + q] = acc;
        }
  return out;
}

inline double symmetric_kl(const std::vector<double>& p, const std::vector<double>& q) {
  double a = 0, b = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    a += p[i] * std::log(p[i] / q[i]);
    b += q[i] * std::log(q[i] / p[i]);
  }
  return 0.5 * (a + b);
}

inline double norm(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

// Two-sided binomial 3-sigma bound.
inline bool within_three_sigma(std::size_t hits, std::size_t trials, double p) {
  const double mean = static_cast<double>(trials) * p;
  const double sd = std::sqrt(static_cast<double>(trials) * p * (1 - p));
  return std::abs(static_cast<double>(hits) - mean) <= 3.0 * sd;
}

}  // namespace oracle
