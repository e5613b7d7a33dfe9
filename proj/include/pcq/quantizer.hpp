#pragma once

// Differentiable prototype assignment:
//   similarity -> probabilities -> Gumbel-Softmax weights -> quantized feature
// plus the hard one-hot assignment used by the compactness term.

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "pcq/diffcore.hpp"
#include "pcq/protogen.hpp"
#include "pcq/rng.hpp"
#include "pcq/tape.hpp"

namespace pcq {

inline constexpr double kEpsClamp = 1e-10;
inline constexpr double kDefaultTau = 1.0;

struct AssignmentTensors {
  Matrix similarity;  // N x K
  Matrix probs;       // N x K
  Matrix weights;     // N x K, Gumbel-Softmax output
  Matrix hard;        // N x K one-hot
  double tau = kDefaultTau;
};

// Per-element uniform noise in (0,1). Element (i,k) of draw `round` depends
// only on (key, round, i, k).
class NoiseSource {
public:
  explicit NoiseSource(std::uint64_t key) noexcept : key_(key) {}

  Matrix uniform(std::size_t rows, std::size_t cols, std::uint64_t round) const {
    Matrix m(rows, cols);
    const std::uint64_t base = splitmix64(key_ ^ splitmix64(round));
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t k = 0; k < cols; ++k) {
        const std::uint64_t ctr = (static_cast<std::uint64_t>(i) << 20) ^ k;
        m(i, k) = to_unit_open(splitmix64(base ^ splitmix64(ctr)));
      }
    return m;
  }

  std::uint64_t key() const noexcept { return key_; }

private:
  std::uint64_t key_;
};

inline Matrix assignment_probs(const Matrix& similarity) { return softmax_rows(similarity, 1.0); }

// Gumbel offsets -log(-log eps), eps clamped away from 0 and 1.
inline Matrix gumbel_offsets(const Matrix& eps) {
  Matrix g(eps.rows(), eps.cols());
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const double e = eps.data()[i];
    if (!(e > 0.0 && e < 1.0)) throw Error("noise value outside (0,1)");
    const double c = std::clamp(e, kEpsClamp, 1.0 - kEpsClamp);
    g.data()[i] = -std::log(-std::log(c));
  }
  return g;
}

inline ad::Var gumbel_softmax(ad::Var probs, double tau, const Matrix& eps) {
  if (!(tau > 0.0)) throw Error("invalid temperature");
  require_same_shape(probs.value(), eps, "gumbel_softmax");
  return ad::softmax_rows(ad::add_const(ad::log(probs), gumbel_offsets(eps)), tau);
}

inline Matrix gumbel_softmax(const Matrix& probs, double tau, const Matrix& eps) {
  ad::Tape t;
  return gumbel_softmax(t.constant(probs), tau, eps).value();
}

// Noise-free evaluation weights: softmax(log q / tau).
inline ad::Var sharpen(ad::Var probs, double tau) {
  if (!(tau > 0.0)) throw Error("invalid temperature");
  return ad::softmax_rows(ad::log(probs), tau);
}

inline Matrix sharpen(const Matrix& probs, double tau) {
  ad::Tape t;
  return sharpen(t.constant(probs), tau).value();
}

// v_i = sum_k y_ik h_k.
inline ad::Var quantize(ad::Var weights, ad::Var prototypes) {
  if (weights.cols() != prototypes.rows()) throw Error("dimension mismatch in quantize");
  return ad::matmul(weights, prototypes);
}

inline Matrix quantize(const Matrix& weights, const PrototypeSet& prototypes) {
  if (weights.cols() != prototypes.classes()) throw Error("dimension mismatch in quantize");
  return matmul(weights, prototypes.vectors);
}

inline Matrix hard_assign(const Matrix& weights) {
  Matrix q(weights.rows(), weights.cols());
  for (std::size_t i = 0; i < weights.rows(); ++i) q(i, argmax(weights.row(i))) = 1.0;
  return q;
}

inline std::vector<std::size_t> assigned_index(const Matrix& hard) {
  std::vector<std::size_t> out(hard.rows());
  for (std::size_t i = 0; i < hard.rows(); ++i) out[i] = argmax(hard.row(i));
  return out;
}

// Mean Shannon entropy (nats) of the rows of a row-stochastic matrix.
inline double mean_row_entropy(const Matrix& p) {
  if (p.rows() == 0) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < p.rows(); ++i)
    for (double v : p.row(i))
      if (v > 0.0) total -= v * std::log(v);
  return total / static_cast<double>(p.rows());
}

}  // namespace pcq
