#pragma once

// End-to-end gradient verification: every loss term, differentiated through
// prototypes -> quantizer (fixed noise) -> fusion, against central
// differences over all trainable parameters.

#include <cstdint>
#include <string>
#include <vector>

#include "pcq/diffcore.hpp"
#include "pcq/trainer.hpp"

namespace pcq {

enum class LossSelect { align, comp, sep, total };

inline const char* to_string(LossSelect s) {
  switch (s) {
    case LossSelect::align: return "align";
    case LossSelect::comp: return "comp";
    case LossSelect::sep: return "sep";
    case LossSelect::total: return "total";
  }
  return "?";
}

struct GradProblem {
  Model model;
  std::set<std::string> trainable;
  Matrix batch;
  std::vector<int> labels;
  Matrix eps;
};

// Random small problem with every parameter perturbed away from its
// initialization so no gradient path is trivially zero.
inline GradProblem make_grad_problem(std::uint64_t seed, std::size_t max_n = 8, std::size_t max_k = 5,
                                     std::size_t max_d = 8) {
  Stream rng(derive_seed(seed, "gradsuite"));
  const std::size_t k = 2 + static_cast<std::size_t>(rng.below(max_k - 1));
  const std::size_t n = std::max<std::size_t>(k, 2 + static_cast<std::size_t>(rng.below(max_n - 1)));
  const std::size_t d = 2 + static_cast<std::size_t>(rng.below(max_d - 1));
  TrainConfig cfg;
  cfg.seed = seed;
  cfg.prompt_count = static_cast<std::size_t>(rng.below(3));
  cfg.scope = TrainableScope::all;
  cfg.strategy = rng.below(3) == 0 ? PrototypeStrategy::codebook : PrototypeStrategy::prompted;
  cfg.kv_mode = rng.below(2) == 0 ? KvMode::quantized_token : KvMode::prototype_set;
  cfg.tau = 0.5 + rng.uniform();
  cfg.lambda1 = 0.5;
  cfg.lambda2 = 0.5;

  GradProblem p;
  p.batch = l2_normalize_rows(rng.normal_matrix(n, d));
  for (std::size_t i = 0; i < n; ++i) p.labels.push_back(static_cast<int>(i < k ? i + 1 : 1 + rng.below(k)));
  LabeledFeatures dummy{p.batch, p.labels};
  p.model = init_model(cfg, k, d, dummy);
  for (auto& [name, value] : p.model.params) {
    if (name == "class_tokens") continue;
    for (double& v : value.data()) v += 0.3 * rng.normal();
  }
  p.trainable = trainable_names(cfg);
  p.eps = NoiseSource(derive_seed(seed, "gradsuite.noise")).uniform(n, k, 0);
  return p;
}

inline ad::Var select_loss(const ForwardPass& fp, LossSelect which) {
  switch (which) {
    case LossSelect::align: return fp.align;
    case LossSelect::comp: return fp.comp;
    case LossSelect::sep: return fp.sep;
    case LossSelect::total: return fp.total;
  }
  throw Error("unreachable");
}

inline ScalarFn problem_objective(const GradProblem& p, LossSelect which) {
  return [&p, which](std::span<const double> x, std::vector<double>* grad) {
    Model m = p.model;
    unflatten(m.params, p.trainable, x);
    ad::Tape t;
    Binding b(t, m.params, p.trainable);
    ForwardPass fp = forward(b, m, p.batch, p.labels, &p.eps);
    ad::Var loss = select_loss(fp, which);
    if (grad) {
      t.backward(loss);
      *grad = flatten(b.gradients(), p.trainable);
    }
    return loss.value()(0, 0);
  };
}

inline double check_problem(const GradProblem& p, LossSelect which, double step = 1e-5) {
  const std::vector<double> x0 = flatten(p.model.params, p.trainable);
  return grad_check(problem_objective(p, which), x0, step);
}

struct GradSuiteResult {
  LossSelect loss = LossSelect::total;
  double max_rel_error = 0.0;
  std::size_t problems = 0;
};

inline std::vector<GradSuiteResult> run_gradient_suite(std::size_t problems = 10, std::uint64_t seed = 0) {
  std::vector<GradSuiteResult> out;
  for (LossSelect which : {LossSelect::align, LossSelect::comp, LossSelect::sep, LossSelect::total})
    out.push_back({which, 0.0, problems});
  for (std::size_t i = 0; i < problems; ++i) {
    const GradProblem p = make_grad_problem(splitmix64(seed + i));
    for (auto& r : out) r.max_rel_error = std::max(r.max_rel_error, check_problem(p, r.loss));
  }
  return out;
}

}  // namespace pcq
