#pragma once

// Prototype construction: learnable prompts through a frozen encoder
// surrogate, class/k-means centroids, and a free codebook.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <string>
#include <tuple>
#include <vector>

#include "pcq/diffcore.hpp"
#include "pcq/params.hpp"
#include "pcq/rng.hpp"
#include "pcq/tape.hpp"

namespace pcq {

enum class PrototypeStrategy { prompted, centroid, codebook };

inline const char* to_string(PrototypeStrategy s) {
  switch (s) {
    case PrototypeStrategy::prompted: return "prompted";
    case PrototypeStrategy::centroid: return "centroid";
    case PrototypeStrategy::codebook: return "codebook";
  }
  return "?";
}

inline PrototypeStrategy parse_strategy(const std::string& s) {
  if (s == "prompted") return PrototypeStrategy::prompted;
  if (s == "centroid") return PrototypeStrategy::centroid;
  if (s == "codebook") return PrototypeStrategy::codebook;
  throw Error("unknown prototype strategy '" + s + "'");
}

// K x d unit-norm rows, one per class.
struct PrototypeSet {
  Matrix vectors;
  PrototypeStrategy strategy = PrototypeStrategy::prompted;

  std::size_t classes() const { return vectors.rows(); }
  std::size_t dim() const { return vectors.cols(); }
};

// Smallest L2 distance between any two prototype rows.
inline double min_pairwise_distance(const Matrix& h) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < h.rows(); ++i)
    for (std::size_t j = i + 1; j < h.rows(); ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < h.cols(); ++c) {
        const double diff = h(i, c) - h(j, c);
        s += diff * diff;
      }
      best = std::min(best, std::sqrt(s));
    }
  return best;
}

struct PromptBank {
  Matrix prompts;       // m x d_tok, trainable
  Matrix class_tokens;  // K x d_tok, frozen

  std::size_t prompt_count() const { return prompts.rows(); }
  std::size_t classes() const { return class_tokens.rows(); }
  std::size_t token_dim() const { return class_tokens.cols(); }
};

inline constexpr double kPromptInitStd = 0.02;

inline PromptBank make_prompt_bank(std::size_t classes, std::size_t prompt_count,
                                   std::size_t token_dim, std::uint64_t seed) {
  if (classes < 1 || token_dim < 1) throw Error("prompt bank needs at least one class and dim");
  PromptBank bank;
  Stream prompts(derive_seed(seed, "init.prompts"));
  bank.prompts = prompts.normal_matrix(prompt_count, token_dim, kPromptInitStd);
  Stream tokens(derive_seed(seed, "init.class_tokens"));
  bank.class_tokens = l2_normalize_rows(tokens.normal_matrix(classes, token_dim));
  for (std::size_t i = 0; i < classes; ++i)
    for (std::size_t j = i + 1; j < classes; ++j)
      if (std::ranges::equal(bank.class_tokens.row(i), bank.class_tokens.row(j)))
        throw Error("class tokens are not distinct");
  return bank;
}

// Frozen two-layer tanh network standing in for a pretrained text encoder.
// The first affine layer acts on the flattened [u_1..u_m, c_k] sequence; its
// weight is stored as the prompt block and the class-token block.
class EncoderSurrogate {
public:
  static EncoderSurrogate make(std::size_t prompt_count, std::size_t token_dim,
                               std::size_t out_dim, std::uint64_t seed) {
    if (token_dim < 1 || out_dim < 1) throw Error("encoder surrogate needs positive dims");
    EncoderSurrogate e;
    e.prompt_count_ = prompt_count;
    e.token_dim_ = token_dim;
    e.out_dim_ = out_dim;
    e.seed_ = seed;
    const std::size_t hidden = 4 * out_dim;
    Stream s(derive_seed(seed, "init.surrogate"));
    const double in_std = 1.0 / std::sqrt(static_cast<double>(token_dim));
    e.w1_prompt_ = s.normal_matrix(prompt_count * token_dim, hidden, in_std);
    e.w1_class_ = s.normal_matrix(token_dim, hidden, in_std);
    e.b1_ = s.normal_matrix(1, hidden, 0.5);
    e.w2_ = s.normal_matrix(hidden, out_dim, 1.0 / std::sqrt(static_cast<double>(hidden)));
    e.b2_ = s.normal_matrix(1, out_dim, 0.1);
    return e;
  }

  std::size_t prompt_count() const { return prompt_count_; }
  std::size_t token_dim() const { return token_dim_; }
  std::size_t out_dim() const { return out_dim_; }
  std::uint64_t seed() const { return seed_; }

  const Matrix& w1_prompt() const { return w1_prompt_; }
  const Matrix& w1_class() const { return w1_class_; }
  const Matrix& b1() const { return b1_; }
  const Matrix& w2() const { return w2_; }
  const Matrix& b2() const { return b2_; }

  // Parameter paths used by the trainer's store.
  void export_to(ParameterStore& store) const {
    store["encoder.w1_prompt"] = w1_prompt_;
    store["encoder.w1_class"] = w1_class_;
    store["encoder.b1"] = b1_;
    store["encoder.w2"] = w2_;
    store["encoder.b2"] = b2_;
  }

private:
  EncoderSurrogate() = default;
  std::size_t prompt_count_ = 0;
  std::size_t token_dim_ = 0;
  std::size_t out_dim_ = 0;
  std::uint64_t seed_ = 0;
  Matrix w1_prompt_, w1_class_, b1_, w2_, b2_;
};

inline const std::vector<std::string>& encoder_param_names() {
  static const std::vector<std::string> names = {"encoder.b1", "encoder.b2", "encoder.w1_class",
                                                 "encoder.w1_prompt", "encoder.w2"};
  return names;
}

struct EncoderVars {
  ad::Var w1_prompt, w1_class, b1, w2, b2;

  static EncoderVars from(const Binding& b) {
    return {b["encoder.w1_prompt"], b["encoder.w1_class"], b["encoder.b1"], b["encoder.w2"],
            b["encoder.b2"]};
  }
};

// Differentiable prototypes: row k = normalize(f([u_1..u_m, c_k])).
inline ad::Var encode_prototypes(ad::Var prompts, ad::Var class_tokens, const EncoderVars& enc) {
  const std::size_t m = prompts.rows();
  if (class_tokens.cols() != enc.w1_class.rows() || enc.w1_prompt.rows() != m * class_tokens.cols() ||
      (m > 0 && prompts.cols() != class_tokens.cols()))
    throw Error("dimension mismatch in encode_prototypes");
  ad::Var pre = ad::matmul(class_tokens, enc.w1_class);
  if (m > 0) {
    ad::Var flat = ad::reshape(prompts, 1, prompts.value().size());
    pre = ad::add(pre, ad::tile_rows(ad::matmul(flat, enc.w1_prompt), class_tokens.rows()));
  }
  ad::Var hidden = ad::tanh(ad::add_row(pre, enc.b1));
  return ad::l2_normalize_rows(ad::add_row(ad::matmul(hidden, enc.w2), enc.b2));
}

inline PrototypeSet encode_prototypes(const PromptBank& bank, const EncoderSurrogate& surrogate) {
  if (bank.prompt_count() != surrogate.prompt_count() || bank.token_dim() != surrogate.token_dim())
    throw Error("dimension mismatch in encode_prototypes");
  ad::Tape tape;
  EncoderVars enc{tape.constant(surrogate.w1_prompt()), tape.constant(surrogate.w1_class()),
                  tape.constant(surrogate.b1()), tape.constant(surrogate.w2()),
                  tape.constant(surrogate.b2())};
  ad::Var out = encode_prototypes(tape.constant(bank.prompts), tape.constant(bank.class_tokens), enc);
  return {out.value(), PrototypeStrategy::prompted};
}

struct KMeansResult {
  Matrix centroids;
  std::vector<std::size_t> assignment;
  std::size_t iterations_run = 0;
};

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = a[i] - b[i];
    s += diff * diff;
  }
  return s;
}

// Lloyd iterations from the given initial centroids. A point equidistant to
// several centroids joins the lowest index; an empty cluster is reseeded at
// the point farthest from its current centroid.
inline KMeansResult kmeans_lloyd(const Matrix& points, Matrix centroids, std::size_t iterations) {
  if (points.cols() != centroids.cols()) throw Error("dimension mismatch in kmeans");
  const std::size_t n = points.rows();
  const std::size_t k = centroids.rows();
  KMeansResult r;
  r.assignment.assign(n, 0);

  auto assign = [&](const Matrix& c) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = squared_distance(points.row(i), c.row(0));
      for (std::size_t j = 1; j < k; ++j) {
        const double dd = squared_distance(points.row(i), c.row(j));
        if (dd < best_d) {
          best_d = dd;
          best = j;
        }
      }
      if (r.assignment[i] != best) changed = true;
      r.assignment[i] = best;
    }
    return changed;
  };

  assign(centroids);
  for (std::size_t it = 0; it < iterations; ++it) {
    Matrix next(k, points.cols());
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[r.assignment[i]];
      auto dst = next.row(r.assignment[i]);
      auto src = points.row(i);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] == 0) {
        std::size_t far = 0;
        double far_d = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double dd = squared_distance(points.row(i), centroids.row(r.assignment[i]));
          if (dd > far_d) {
            far_d = dd;
            far = i;
          }
        }
        std::copy(points.row(far).begin(), points.row(far).end(), next.row(j).begin());
      } else {
        for (double& v : next.row(j)) v /= static_cast<double>(counts[j]);
      }
    }
    centroids = std::move(next);
    ++r.iterations_run;
    if (!assign(centroids)) break;
  }
  r.centroids = std::move(centroids);
  return r;
}

// Arithmetic mean of each class's rows (labels 1-based, K = classes).
inline Matrix class_means(const Matrix& features, std::span<const int> labels, std::size_t classes) {
  if (labels.size() != features.rows()) throw Error("label count does not match feature rows");
  Matrix sums(classes, features.cols());
  std::vector<std::size_t> counts(classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 1 || static_cast<std::size_t>(labels[i]) > classes)
      throw Error("label out of range");
    const std::size_t c = static_cast<std::size_t>(labels[i] - 1);
    ++counts[c];
    auto dst = sums.row(c);
    auto src = features.row(i);
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
  }
  for (std::size_t c = 0; c < classes; ++c) {
    if (counts[c] == 0) throw Error("empty class");
    for (double& v : sums.row(c)) v /= static_cast<double>(counts[c]);
  }
  return sums;
}

inline PrototypeSet centroid_prototypes(const Matrix& features, std::span<const int> labels,
                                        std::size_t classes, std::size_t iterations) {
  Matrix means = class_means(features, labels, classes);
  if (iterations > 0) {
    KMeansResult km = kmeans_lloyd(features, means, iterations);
    // Majority relabeling: greedily match (centroid, class) pairs by member
    // count, then hand leftover classes the leftover centroids in order.
    std::vector<std::vector<std::size_t>> votes(classes, std::vector<std::size_t>(classes, 0));
    for (std::size_t i = 0; i < labels.size(); ++i)
      ++votes[km.assignment[i]][static_cast<std::size_t>(labels[i] - 1)];
    std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> pairs;
    for (std::size_t c = 0; c < classes; ++c)
      for (std::size_t y = 0; y < classes; ++y)
        if (votes[c][y] > 0) pairs.emplace_back(votes[c][y], c, y);
    std::stable_sort(pairs.begin(), pairs.end(),
                     [](const auto& a, const auto& b) { return std::get<0>(a) > std::get<0>(b); });
    std::vector<int> owner(classes, -1);
    std::vector<bool> used(classes, false);
    for (const auto& [count, c, y] : pairs) {
      if (used[c] || owner[y] >= 0) continue;
      owner[y] = static_cast<int>(c);
      used[c] = true;
    }
    std::size_t next_free = 0;
    for (std::size_t y = 0; y < classes; ++y) {
      if (owner[y] >= 0) continue;
      while (used[next_free]) ++next_free;
      owner[y] = static_cast<int>(next_free);
      used[next_free] = true;
    }
    for (std::size_t y = 0; y < classes; ++y) {
      auto src = km.centroids.row(static_cast<std::size_t>(owner[y]));
      std::copy(src.begin(), src.end(), means.row(y).begin());
    }
  }
  for (std::size_t c = 0; c < classes; ++c)
    if (norm(means.row(c)) < kDegenerateNorm) throw Error("degenerate centroid");
  return {l2_normalize_rows(means), PrototypeStrategy::centroid};
}

inline PrototypeSet codebook_prototypes(std::size_t classes, std::size_t dim, std::uint64_t seed) {
  if (classes < 2 || dim < 2) throw Error("codebook needs K >= 2 and d >= 2");
  Stream s(derive_seed(seed, "init.codebook"));
  return {l2_normalize_rows(s.normal_matrix(classes, dim)), PrototypeStrategy::codebook};
}

}  // namespace pcq
