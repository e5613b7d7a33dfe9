#pragma once

// Forward kernels shared by the tape and the plain-value API, plus a
// central-difference gradient checker.

#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "pcq/matrix.hpp"

namespace pcq {

inline constexpr double kDegenerateNorm = 1e-12;

inline void require_finite(const Matrix& m, const char* what = "non-finite input") {
  if (!m.all_finite()) throw Error(what);
}

// Row-wise softmax of m / temperature using the max-shift.
inline Matrix softmax_rows(const Matrix& m, double temperature = 1.0) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw Error("invalid temperature");
  require_finite(m);
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto in = m.row(i);
    auto o = out.row(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : in) mx = std::max(mx, v);
    double z = 0.0;
    for (std::size_t k = 0; k < in.size(); ++k) {
      o[k] = std::exp((in[k] - mx) / temperature);
      z += o[k];
    }
    for (double& v : o) v /= z;
  }
  return out;
}

inline Matrix l2_normalize_rows(const Matrix& m) {
  require_finite(m);
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double n = norm(m.row(i));
    if (n < kDegenerateNorm) throw Error("degenerate zero vector");
    auto o = out.row(i);
    auto in = m.row(i);
    for (std::size_t k = 0; k < in.size(); ++k) o[k] = in[k] / n;
  }
  return out;
}

// Entry (i,k) is the cosine between row i of a and row k of b.
inline Matrix cosine_similarity_matrix(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols())
    throw Error("dimension mismatch in cosine_similarity_matrix: " + shape_str(a) + " vs " +
                shape_str(b));
  return matmul_bt(l2_normalize_rows(a), l2_normalize_rows(b));
}

// Scalar function of a flat parameter vector. When `grad` is non-null the
// callee fills it with the analytic gradient (same length as x).
using ScalarFn = std::function<double(std::span<const double> x, std::vector<double>* grad)>;

// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
inline double grad_check(const ScalarFn& fn, std::span<const double> x0, double step = 1e-5) {
  if (!(step > 0.0)) throw Error("grad_check: step must be positive");
  std::vector<double> x(x0.begin(), x0.end());
  std::vector<double> analytic(x.size(), 0.0);
  const double f0 = fn(x, &analytic);
  if (!std::isfinite(f0)) throw Error("grad_check: non-finite evaluation");
  if (analytic.size() != x.size()) throw Error("grad_check: gradient length mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + step;
    const double fp = fn(x, nullptr);
    x[i] = keep - step;
    const double fm = fn(x, nullptr);
    x[i] = keep;
    if (!std::isfinite(fp) || !std::isfinite(fm) || !std::isfinite(analytic[i]))
      throw Error("grad_check: non-finite evaluation");
    const double numeric = (fp - fm) / (2.0 * step);
    const double rel = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace pcq
