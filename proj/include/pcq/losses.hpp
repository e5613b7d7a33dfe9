#pragma once

// Alignment, compactness and separation terms and their weighted total.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "pcq/diffcore.hpp"
#include "pcq/protogen.hpp"
#include "pcq/tape.hpp"

namespace pcq {

inline constexpr double kDefaultLambda = 0.01;

struct LossTerms {
  double align = 0.0;
  double comp = 0.0;
  double sep = 0.0;
  double total = 0.0;
  double lambda1 = kDefaultLambda;
  double lambda2 = kDefaultLambda;
};

inline LossTerms total_loss(double align, double comp, double sep, double lambda1 = kDefaultLambda,
                            double lambda2 = kDefaultLambda) {
  if (lambda1 < 0.0 || lambda2 < 0.0) throw Error("negative loss weight");
  return {align, comp, sep, align + lambda1 * comp + lambda2 * sep, lambda1, lambda2};
}

// Which operands of the compactness term receive gradient. The hard
// assignment itself never does.
enum class CompGrad { both, features, prototypes };

inline CompGrad parse_comp_grad(const std::string& s) {
  if (s == "both") return CompGrad::both;
  if (s == "features") return CompGrad::features;
  if (s == "prototypes") return CompGrad::prototypes;
  throw Error("unknown compactness gradient mode '" + s + "'");
}

inline const char* to_string(CompGrad g) {
  switch (g) {
    case CompGrad::both: return "both";
    case CompGrad::features: return "features";
    case CompGrad::prototypes: return "prototypes";
  }
  return "?";
}

inline std::vector<std::size_t> zero_based(std::span<const int> labels, std::size_t classes) {
  std::vector<std::size_t> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 1 || static_cast<std::size_t>(labels[i]) > classes)
      throw Error("label out of range");
    out[i] = static_cast<std::size_t>(labels[i] - 1);
  }
  return out;
}

// -(1/N) sum_i log softmax_j(cos(f_i, h_j))[y_i]
inline ad::Var align_loss(ad::Var features, ad::Var prototypes, std::span<const int> labels) {
  if (features.cols() != prototypes.cols() || labels.size() != features.rows())
    throw Error("dimension mismatch in align_loss");
  for (std::size_t i = 0; i < features.rows(); ++i)
    if (norm(features.value().row(i)) < kDegenerateNorm) throw Error("degenerate feature");
  ad::Var cos = ad::matmul_bt(ad::l2_normalize_rows(features), ad::l2_normalize_rows(prototypes));
  ad::Var nll = ad::sub(ad::logsumexp_rows(cos), ad::pick_cols(cos, zero_based(labels, prototypes.rows())));
  return ad::mean(nll);
}

// ||H_p - Q H_t||_F^2 with Q held constant.
inline ad::Var compactness_loss(ad::Var features, const Matrix& hard, ad::Var prototypes,
                                CompGrad mode = CompGrad::both) {
  if (hard.rows() != features.rows() || hard.cols() != prototypes.rows() ||
      features.cols() != prototypes.cols())
    throw Error("dimension mismatch in compactness_loss");
  ad::Tape& t = *features.tape;
  ad::Var hp = mode == CompGrad::prototypes ? ad::detach(features) : features;
  ad::Var ht = mode == CompGrad::features ? ad::detach(prototypes) : prototypes;
  ad::Var diff = ad::sub(hp, ad::matmul(t.constant(hard), ht));
  return ad::sum(ad::mul(diff, diff));
}

// sum over ordered pairs i != j of exp(-||h_i - h_j||^2).
inline ad::Var separation_loss(ad::Var prototypes) {
  const std::size_t k = prototypes.rows();
  if (k < 2) throw Error("separation loss needs K >= 2");
  Matrix off_diag(k, k, 1.0);
  for (std::size_t i = 0; i < k; ++i) off_diag(i, i) = 0.0;
  ad::Var kernel = ad::exp(ad::scale(ad::pairwise_sq_dist(prototypes), -1.0));
  return ad::sum(ad::mul_const(kernel, off_diag));
}

// Plain gradient descent on the separation term alone, renormalizing rows
// after every step. Returns the minimum pairwise distance before each step
// and after the last one (steps + 1 entries).
inline std::vector<double> separation_descent(Matrix& prototypes, double lr, std::size_t steps) {
  std::vector<double> trace{min_pairwise_distance(prototypes)};
  for (std::size_t s = 0; s < steps; ++s) {
    ad::Tape t;
    ad::Var h = t.variable(prototypes);
    t.backward(separation_loss(h));
    const Matrix& g = *t.grad(h);
    for (std::size_t i = 0; i < prototypes.size(); ++i) prototypes.data()[i] -= lr * g.data()[i];
    prototypes = l2_normalize_rows(prototypes);
    trace.push_back(min_pairwise_distance(prototypes));
  }
  return trace;
}

inline double align_loss(const Matrix& features, const Matrix& prototypes, std::span<const int> labels) {
  ad::Tape t;
  return align_loss(t.constant(features), t.constant(prototypes), labels).value()(0, 0);
}

inline double compactness_loss(const Matrix& features, const Matrix& hard, const Matrix& prototypes) {
  ad::Tape t;
  return compactness_loss(t.constant(features), hard, t.constant(prototypes)).value()(0, 0);
}

inline double separation_loss(const Matrix& prototypes) {
  ad::Tape t;
  return separation_loss(t.constant(prototypes)).value()(0, 0);
}

// p_ij = exp(-||h_i-h_j||^2) / sum_{k != i} exp(-||h_i-h_k||^2), zero diagonal.
inline Matrix prototype_affinity(const Matrix& prototypes) {
  const std::size_t k = prototypes.rows();
  if (k < 2) throw Error("prototype affinity needs K >= 2");
  Matrix p(k, k);
  for (std::size_t i = 0; i < k; ++i) {
    // Shift by the smallest distance in the row so the largest kernel is 1.
    std::vector<double> dist(k, 0.0);
    double dmin = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) {
      if (j == i) continue;
      double s = 0.0;
      for (std::size_t c = 0; c < prototypes.cols(); ++c) {
        const double diff = prototypes(i, c) - prototypes(j, c);
        s += diff * diff;
      }
      dist[j] = s;
      dmin = std::min(dmin, s);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      if (j == i) continue;
      p(i, j) = std::exp(-(dist[j] - dmin));
      z += p(i, j);
    }
    for (std::size_t j = 0; j < k; ++j) p(i, j) /= z;
  }
  return p;
}

// (1/K) sum_k sum_{j != k} p_kj log(p_kj (K-1)). Reporting only.
inline double kl_uniformity(const Matrix& affinity) {
  const std::size_t k = affinity.rows();
  if (k < 2 || affinity.cols() != k) throw Error("kl_uniformity needs a K x K affinity, K >= 2");
  const double log_km1 = std::log(static_cast<double>(k - 1));
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      if (i == j) continue;
      const double p = affinity(i, j);
      if (p > 0.0) total += p * (std::log(p) + log_km1);
    }
  return std::max(0.0, total / static_cast<double>(k));
}

}  // namespace pcq
