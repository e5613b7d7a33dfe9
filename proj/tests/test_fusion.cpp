#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "pcq/fusion.hpp"
#include "pcq/losses.hpp"
#include "pcq/metrics.hpp"
#include "pcq/rng.hpp"

using namespace pcq;

namespace {

using Vec = std::vector<double>;

// x W for a row vector x and row-major W.
Vec vecmat(const Vec& x, const Matrix& w) {
  Vec out(w.cols(), 0.0);
  for (std::size_t a = 0; a < w.rows(); ++a)
    for (std::size_t b = 0; b < w.cols(); ++b) out[b] += x[a] * w(a, b);
  return out;
}

Vec row_vec(const Matrix& m, std::size_t i) { return Vec(m.row(i).begin(), m.row(i).end()); }

// Explicit per-instance, per-token single-head attention plus FFN and residual.
Matrix fuse_oracle(const Matrix& h, const Matrix& protos, const ParameterStore& p) {
  const std::size_t d = h.cols();
  const std::size_t k = protos.rows();
  Matrix out(h.rows(), d);
  for (std::size_t i = 0; i < h.rows(); ++i) {
    const Vec q = vecmat(row_vec(h, i), p.at("fusion.w_q"));
    std::vector<double> score(k);
    double mx = -1e300;
    for (std::size_t j = 0; j < k; ++j) {
      const Vec key = vecmat(row_vec(protos, j), p.at("fusion.w_k"));
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += q[c] * key[c];
      score[j] = s / std::sqrt(static_cast<double>(d));
      mx = std::max(mx, score[j]);
    }
    double z = 0.0;
    for (double& s : score) z += (s = std::exp(s - mx));
    Vec attended(d, 0.0);
    for (std::size_t j = 0; j < k; ++j) {
      const Vec val = vecmat(row_vec(protos, j), p.at("fusion.w_v"));
      for (std::size_t c = 0; c < d; ++c) attended[c] += score[j] / z * val[c];
    }
    const Vec o = vecmat(attended, p.at("fusion.w_o"));
    Vec hid = vecmat(o, p.at("fusion.ffn.w1"));
    for (std::size_t c = 0; c < hid.size(); ++c) hid[c] = std::tanh(hid[c] + p.at("fusion.ffn.b1")(0, c));
    const Vec f = vecmat(hid, p.at("fusion.ffn.w2"));
    for (std::size_t c = 0; c < d; ++c) out(i, c) = f[c] + p.at("fusion.ffn.b2")(0, c) + h(i, c);
  }
  return out;
}

// Fusion parameters with every entry random, including the FFN output layer.
ParameterStore random_block(std::size_t d, std::uint64_t seed) {
  ParameterStore p;
  init_fusion_block(p, d, seed);
  Stream rng(seed + 1000);
  for (auto& [name, m] : p)
    for (double& v : m.data()) v = 0.5 * rng.normal();
  return p;
}

FusionOutput run_fuse(ad::Tape& t, const ParameterStore& p, const Matrix& h, const Matrix& v,
                      const Matrix& protos, KvMode mode) {
  Binding b(t, p, {});
  return fuse(t.constant(h), t.constant(v), t.constant(protos), FusionVars::from(b), mode);
}

}  // namespace

TEST(Fusion, ZeroOutputLayerIsResidualIdentity) {
  Stream rng(1);
  const Matrix h = rng.normal_matrix(6, 4);
  const Matrix v = rng.normal_matrix(6, 4);
  const Matrix protos = l2_normalize_rows(rng.normal_matrix(3, 4));
  ParameterStore p;
  init_fusion_block(p, 4, 2);
  for (KvMode mode : {KvMode::quantized_token, KvMode::prototype_set}) {
    ad::Tape t;
    EXPECT_EQ(run_fuse(t, p, h, v, protos, mode).features.value(), h);
  }
}

TEST(Fusion, InitialClassificationMatchesResidualPath) {
  Stream rng(3);
  const Matrix h = rng.normal_matrix(20, 5);
  const Matrix protos = l2_normalize_rows(rng.normal_matrix(4, 5));
  ParameterStore p;
  init_fusion_block(p, 5, 4);
  ad::Tape t;
  const Matrix f = run_fuse(t, p, h, h, protos, KvMode::quantized_token).features.value();
  EXPECT_EQ(classify(f, protos), classify(h, protos));
}

TEST(Fusion, SingleTokenAttentionWeightIsOne) {
  Stream rng(5);
  const ParameterStore p = random_block(4, 6);
  const Matrix h = rng.normal_matrix(10, 4, 5.0);
  const Matrix v = rng.normal_matrix(10, 4, 5.0);
  ad::Tape t;
  const FusionOutput out = run_fuse(t, p, h, v, l2_normalize_rows(rng.normal_matrix(3, 4)), KvMode::quantized_token);
  ASSERT_EQ(out.attention.cols(), 1u);
  for (double w : out.attention.data()) EXPECT_EQ(w, 1.0);
}

TEST(Fusion, QuantizedTokenMatchesOracle) {
  // A single key/value token is the one-prototype case of the oracle.
  Stream rng(7);
  const ParameterStore p = random_block(4, 8);
  const Matrix h = rng.normal_matrix(5, 4);
  const Matrix v = rng.normal_matrix(5, 4);
  ad::Tape t;
  const Matrix f = run_fuse(t, p, h, v, l2_normalize_rows(rng.normal_matrix(3, 4)), KvMode::quantized_token).features.value();
  for (std::size_t i = 0; i < 5; ++i) {
    const Matrix hi(1, 4, row_vec(h, i));
    const Matrix vi(1, 4, row_vec(v, i));
    const Matrix expect = fuse_oracle(hi, vi, p);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(f(i, c), expect(0, c), 1e-12);
  }
}

TEST(Fusion, PrototypeSetMatchesScalarOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Stream rng(seed);
    const ParameterStore p = random_block(4, seed);
    const Matrix h = rng.normal_matrix(6, 4);
    const Matrix protos = l2_normalize_rows(rng.normal_matrix(3, 4));
    ad::Tape t;
    const FusionOutput out = run_fuse(t, p, h, h, protos, KvMode::prototype_set);
    EXPECT_LT(max_abs_diff(out.features.value(), fuse_oracle(h, protos, p)), 1e-12);
    ASSERT_EQ(out.attention.cols(), 3u);
    for (std::size_t i = 0; i < 6; ++i) {
      double s = 0.0;
      for (double w : out.attention.row(i)) s += w;
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Fusion, FiniteForLargeInputs) {
  Stream rng(9);
  const ParameterStore p = random_block(4, 10);
  for (KvMode mode : {KvMode::quantized_token, KvMode::prototype_set}) {
    ad::Tape t;
    const FusionOutput out = run_fuse(t, p, rng.normal_matrix(8, 4, 100.0), rng.normal_matrix(8, 4, 100.0),
                                      rng.normal_matrix(3, 4, 100.0), mode);
    EXPECT_TRUE(out.features.value().all_finite());
  }
}

TEST(Fusion, DimensionMismatch) {
  ParameterStore p;
  init_fusion_block(p, 4, 0);
  ad::Tape t;
  EXPECT_THROW(run_fuse(t, p, Matrix(2, 3), Matrix(2, 3), Matrix(3, 3), KvMode::prototype_set), Error);
  EXPECT_THROW(run_fuse(t, p, Matrix(2, 4, 1.0), Matrix(3, 4, 1.0), Matrix(3, 4, 1.0), KvMode::quantized_token), Error);
}

TEST(Fusion, GradientThroughTotalLoss) {
  for (KvMode mode : {KvMode::quantized_token, KvMode::prototype_set}) {
    Stream rng(11);
    const ParameterStore base = random_block(3, 12);
    const Matrix h0 = rng.normal_matrix(5, 3);
    const Matrix v0 = rng.normal_matrix(5, 3);
    const Matrix protos = l2_normalize_rows(rng.normal_matrix(3, 3));
    const Matrix hard = hard_assign(rng.normal_matrix(5, 3));
    const std::vector<int> labels = {1, 2, 3, 1, 2};
    std::set<std::string> names(fusion_param_names().begin(), fusion_param_names().end());
    ParameterStore store = base;
    store["h"] = h0;
    store["v"] = v0;
    names.insert("h");
    names.insert("v");
    ScalarFn fn = [&](std::span<const double> x, std::vector<double>* g) {
      ParameterStore s = store;
      unflatten(s, names, x);
      ad::Tape t;
      Binding b(t, s, names);
      ad::Var pr = t.constant(protos);
      ad::Var f = fuse(b["h"], b["v"], pr, FusionVars::from(b), mode).features;
      ad::Var loss = ad::add(ad::add(align_loss(f, pr, labels), ad::scale(compactness_loss(b["h"], hard, pr), 0.5)),
                             ad::scale(separation_loss(pr), 0.5));
      if (g) {
        t.backward(loss);
        *g = flatten(b.gradients(), names);
      }
      return loss.value()(0, 0);
    };
    EXPECT_LT(grad_check(fn, flatten(store, names), 1e-6), 1e-4) << to_string(mode);
  }
}

TEST(Fusion, KvModeParse) {
  EXPECT_EQ(parse_kv_mode("quantized_token"), KvMode::quantized_token);
  EXPECT_EQ(parse_kv_mode("prototype_set"), KvMode::prototype_set);
  EXPECT_THROW(parse_kv_mode("heads"), Error);
}
