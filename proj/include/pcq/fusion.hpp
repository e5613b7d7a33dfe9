#pragma once

// Cross-attention fusion: f_i = FFN(CrossAttention(h_i, v_i)) + h_i.

#include <cmath>
#include <cstdint>
#include <string>

#include "pcq/params.hpp"
#include "pcq/rng.hpp"
#include "pcq/tape.hpp"

namespace pcq {

// quantized_token: each instance attends to its own quantized feature (one key).
// prototype_set: each instance attends over the K prototype rows.
enum class KvMode { quantized_token, prototype_set };

inline const char* to_string(KvMode m) {
  return m == KvMode::quantized_token ? "quantized_token" : "prototype_set";
}

inline KvMode parse_kv_mode(const std::string& s) {
  if (s == "quantized_token") return KvMode::quantized_token;
  if (s == "prototype_set") return KvMode::prototype_set;
  throw Error("unknown kv mode '" + s + "'");
}

inline const std::vector<std::string>& fusion_param_names() {
  static const std::vector<std::string> names = {
      "fusion.ffn.b1", "fusion.ffn.b2", "fusion.ffn.w1", "fusion.ffn.w2",
      "fusion.w_k",    "fusion.w_o",    "fusion.w_q",    "fusion.w_v"};
  return names;
}

// Projections are d x d; the FFN is d -> 4d -> d with its output layer
// zero-initialized so the block starts as the identity on h.
inline void init_fusion_block(ParameterStore& store, std::size_t dim, std::uint64_t seed) {
  Stream s(derive_seed(seed, "init.fusion"));
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(dim));
  store["fusion.w_q"] = s.normal_matrix(dim, dim, proj_std);
  store["fusion.w_k"] = s.normal_matrix(dim, dim, proj_std);
  store["fusion.w_v"] = s.normal_matrix(dim, dim, proj_std);
  store["fusion.w_o"] = s.normal_matrix(dim, dim, proj_std);
  store["fusion.ffn.w1"] = s.normal_matrix(dim, 4 * dim, proj_std);
  store["fusion.ffn.b1"] = Matrix(1, 4 * dim);
  store["fusion.ffn.w2"] = Matrix(4 * dim, dim);
  store["fusion.ffn.b2"] = Matrix(1, dim);
}

struct FusionVars {
  ad::Var w_q, w_k, w_v, w_o, ffn_w1, ffn_b1, ffn_w2, ffn_b2;

  static FusionVars from(const Binding& b) {
    return {b["fusion.w_q"],    b["fusion.w_k"],    b["fusion.w_v"],    b["fusion.w_o"],
            b["fusion.ffn.w1"], b["fusion.ffn.b1"], b["fusion.ffn.w2"], b["fusion.ffn.b2"]};
  }
};

struct FusionOutput {
  ad::Var features;  // N x d hybrid features
  Matrix attention;  // N x 1 (quantized_token) or N x K (prototype_set)
};

inline FusionOutput fuse(ad::Var h, ad::Var v, ad::Var prototypes, const FusionVars& p,
                         KvMode mode) {
  const std::size_t n = h.rows();
  const std::size_t d = h.cols();
  if (p.w_q.rows() != d || p.w_q.cols() != d || prototypes.cols() != d ||
      (mode == KvMode::quantized_token && (v.rows() != n || v.cols() != d)))
    throw Error("dimension mismatch in fuse");
  ad::Tape& t = *h.tape;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  ad::Var query = ad::matmul(h, p.w_q);
  ad::Var attended;
  ad::Var weights;
  if (mode == KvMode::quantized_token) {
    ad::Var key = ad::matmul(v, p.w_k);
    ad::Var score =
        ad::scale(ad::matmul(ad::mul(query, key), t.constant(Matrix(d, 1, 1.0))), inv_sqrt_d);
    weights = ad::softmax_rows(score);  // one key per row: weight is exactly 1
    ad::Var value = ad::matmul(v, p.w_v);
    attended = ad::mul(ad::matmul(weights, t.constant(Matrix(1, d, 1.0))), value);
  } else {
    ad::Var key = ad::matmul(prototypes, p.w_k);
    ad::Var value = ad::matmul(prototypes, p.w_v);
    weights = ad::softmax_rows(ad::scale(ad::matmul_bt(query, key), inv_sqrt_d));
    attended = ad::matmul(weights, value);
  }
  ad::Var attn_out = ad::matmul(attended, p.w_o);
  ad::Var hidden = ad::tanh(ad::add_row(ad::matmul(attn_out, p.ffn_w1), p.ffn_b1));
  ad::Var ffn = ad::add_row(ad::matmul(hidden, p.ffn_w2), p.ffn_b2);
  return {ad::add(ffn, h), weights.value()};
}

}  // namespace pcq
