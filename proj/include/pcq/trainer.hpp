#pragma once

// Training loop: per mini-batch, build prototypes, adapt features, quantize,
// fuse, evaluate the three-term objective and take an AdamW step. The
// schedule is a linear warmup followed by cosine decay to zero.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pcq/datasim.hpp"
#include "pcq/fusion.hpp"
#include "pcq/losses.hpp"
#include "pcq/metrics.hpp"
#include "pcq/params.hpp"
#include "pcq/protogen.hpp"
#include "pcq/quantizer.hpp"

namespace pcq {

enum class TrainableScope { prompts_only, prompts_adapter, prompts_adapter_fusion, all };

inline const char* to_string(TrainableScope s) {
  switch (s) {
    case TrainableScope::prompts_only: return "prompts_only";
    case TrainableScope::prompts_adapter: return "prompts+adapter";
    case TrainableScope::prompts_adapter_fusion: return "prompts+adapter+fusion";
    case TrainableScope::all: return "all";
  }
  return "?";
}

inline TrainableScope parse_scope(const std::string& s) {
  if (s == "prompts_only") return TrainableScope::prompts_only;
  if (s == "prompts+adapter") return TrainableScope::prompts_adapter;
  if (s == "prompts+adapter+fusion") return TrainableScope::prompts_adapter_fusion;
  if (s == "all") return TrainableScope::all;
  throw Error("unknown trainable scope '" + s + "'");
}

// fixed: m prompt vectors that are never updated (template-style prompt).
enum class PromptMode { trainable, fixed };

inline const char* to_string(PromptMode m) { return m == PromptMode::trainable ? "trainable" : "fixed"; }

inline PromptMode parse_prompt_mode(const std::string& s) {
  if (s == "trainable") return PromptMode::trainable;
  if (s == "fixed") return PromptMode::fixed;
  throw Error("unknown prompt mode '" + s + "'");
}

struct TrainConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 30;
  double base_lr = 0.003;
  std::size_t warmup_epochs = 6;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double tau = kDefaultTau;
  double lambda1 = kDefaultLambda;
  double lambda2 = kDefaultLambda;
  bool align_only = false;  // skip building the compactness/separation terms
  CompGrad comp_grad = CompGrad::both;
  std::size_t prompt_count = 32;
  PromptMode prompt_mode = PromptMode::trainable;
  std::uint64_t seed = 0;
  TrainableScope scope = TrainableScope::prompts_adapter_fusion;
  PrototypeStrategy strategy = PrototypeStrategy::prompted;
  std::size_t centroid_iterations = 10;
  KvMode kv_mode = KvMode::quantized_token;
  bool straight_through = false;
  bool eval_noise = false;
  double divergence_factor = 1e3;

  void validate() const {
    if (batch_size < 1) throw Error("batch_size must be >= 1");
    if (!(base_lr > 0.0)) throw Error("base_lr must be positive");
    if (!(tau > 0.0)) throw Error("invalid temperature");
    if (lambda1 < 0.0 || lambda2 < 0.0) throw Error("negative loss weight");
    if (weight_decay < 0.0) throw Error("negative weight decay");
  }
};

// Flat dotted keys; every field is materialized.
inline nlohmann::json config_to_json(const TrainConfig& c) {
  return {
      {"epochs", c.epochs},
      {"batch_size", c.batch_size},
      {"optim.base_lr", c.base_lr},
      {"optim.warmup_epochs", c.warmup_epochs},
      {"optim.weight_decay", c.weight_decay},
      {"optim.beta1", c.beta1},
      {"optim.beta2", c.beta2},
      {"optim.eps", c.adam_eps},
      {"quantizer.tau", c.tau},
      {"quantizer.straight_through", c.straight_through},
      {"loss.lambda1", c.lambda1},
      {"loss.lambda2", c.lambda2},
      {"loss.align_only", c.align_only},
      {"loss.comp_grad", to_string(c.comp_grad)},
      {"prompt.m", c.prompt_count},
      {"prompt.mode", to_string(c.prompt_mode)},
      {"seed", c.seed},
      {"trainable_scope", to_string(c.scope)},
      {"prototype.strategy", to_string(c.strategy)},
      {"prototype.centroid_iterations", c.centroid_iterations},
      {"fusion.kv_mode", to_string(c.kv_mode)},
      {"eval.noise", c.eval_noise},
      {"guard.divergence_factor", c.divergence_factor},
  };
}

// Applies one "key": value override. Unknown keys are an error.
inline void set_config_value(TrainConfig& c, const std::string& key, const nlohmann::json& v) {
  auto as_count = [&]() -> std::size_t {
    if (v.is_string()) return std::stoull(v.get<std::string>());
    if (!v.is_number_integer() || v.get<long long>() < 0) throw Error("expected a count for '" + key + "'");
    return v.get<std::size_t>();
  };
  auto as_real = [&]() -> double { return v.is_string() ? std::stod(v.get<std::string>()) : v.get<double>(); };
  auto as_bool = [&]() -> bool {
    if (v.is_string()) {
      const auto s = v.get<std::string>();
      if (s == "true" || s == "1") return true;
      if (s == "false" || s == "0") return false;
      throw Error("expected a boolean for '" + key + "'");
    }
    return v.get<bool>();
  };
  auto as_str = [&]() -> std::string { return v.is_string() ? v.get<std::string>() : v.dump(); };

  if (key == "epochs") c.epochs = as_count();
  else if (key == "batch_size") c.batch_size = as_count();
  else if (key == "optim.base_lr") c.base_lr = as_real();
  else if (key == "optim.warmup_epochs") c.warmup_epochs = as_count();
  else if (key == "optim.weight_decay") c.weight_decay = as_real();
  else if (key == "optim.beta1") c.beta1 = as_real();
  else if (key == "optim.beta2") c.beta2 = as_real();
  else if (key == "optim.eps") c.adam_eps = as_real();
  else if (key == "quantizer.tau") c.tau = as_real();
  else if (key == "quantizer.straight_through") c.straight_through = as_bool();
  else if (key == "loss.lambda1") c.lambda1 = as_real();
  else if (key == "loss.lambda2") c.lambda2 = as_real();
  else if (key == "loss.align_only") c.align_only = as_bool();
  else if (key == "loss.comp_grad") c.comp_grad = parse_comp_grad(as_str());
  else if (key == "prompt.m") c.prompt_count = as_count();
  else if (key == "prompt.mode") c.prompt_mode = parse_prompt_mode(as_str());
  else if (key == "seed") c.seed = v.is_string() ? std::stoull(v.get<std::string>()) : v.get<std::uint64_t>();
  else if (key == "trainable_scope") c.scope = parse_scope(as_str());
  else if (key == "prototype.strategy") c.strategy = parse_strategy(as_str());
  else if (key == "prototype.centroid_iterations") c.centroid_iterations = as_count();
  else if (key == "fusion.kv_mode") c.kv_mode = parse_kv_mode(as_str());
  else if (key == "eval.noise") c.eval_noise = as_bool();
  else if (key == "guard.divergence_factor") c.divergence_factor = as_real();
  else throw Error("unknown config key '" + key + "'");
}

inline TrainConfig config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
  if (!j.is_object()) throw Error("config must be a JSON object");
  for (const auto& [k, v] : j.items()) set_config_value(base, k, v);
  return base;
}

// ---------------------------------------------------------------------------
// Model

struct Model {
  ParameterStore params;
  std::size_t classes = 0;
  std::size_t dim = 0;
  TrainConfig config;
};

inline std::set<std::string> trainable_names(const TrainConfig& c) {
  std::set<std::string> out;
  if (c.strategy == PrototypeStrategy::prompted && c.prompt_mode == PromptMode::trainable &&
      c.prompt_count > 0)
    out.insert("prompts");
  if (c.strategy == PrototypeStrategy::codebook) out.insert("codebook");
  if (c.scope != TrainableScope::prompts_only)
    for (const auto& n : adapter_param_names()) out.insert(n);
  if (c.scope == TrainableScope::prompts_adapter_fusion || c.scope == TrainableScope::all)
    for (const auto& n : fusion_param_names()) out.insert(n);
  if (c.scope == TrainableScope::all && c.strategy == PrototypeStrategy::prompted)
    for (const auto& n : encoder_param_names()) out.insert(n);
  return out;
}

inline bool adapter_enabled(const TrainConfig& c) { return c.scope != TrainableScope::prompts_only; }

inline Model init_model(const TrainConfig& config, std::size_t classes, std::size_t dim,
                        const LabeledFeatures& train) {
  config.validate();
  if (classes < 2) throw Error("need at least two classes");
  Model m;
  m.classes = classes;
  m.dim = dim;
  m.config = config;
  switch (config.strategy) {
    case PrototypeStrategy::prompted: {
      PromptBank bank = make_prompt_bank(classes, config.prompt_count, dim, config.seed);
      m.params["prompts"] = bank.prompts;
      m.params["class_tokens"] = bank.class_tokens;
      EncoderSurrogate::make(config.prompt_count, dim, dim, config.seed).export_to(m.params);
      break;
    }
    case PrototypeStrategy::centroid:
      m.params["centroids"] =
          centroid_prototypes(train.features, train.labels, classes, config.centroid_iterations).vectors;
      break;
    case PrototypeStrategy::codebook:
      m.params["codebook"] = codebook_prototypes(classes, dim, config.seed).vectors;
      break;
  }
  const Adapter a = Adapter::identity(dim);
  m.params["adapter.w"] = a.weight;
  m.params["adapter.b"] = a.bias;
  init_fusion_block(m.params, dim, config.seed);
  return m;
}

inline ad::Var build_prototypes(const Binding& b, const Model& m) {
  switch (m.config.strategy) {
    case PrototypeStrategy::prompted:
      return encode_prototypes(b["prompts"], b["class_tokens"], EncoderVars::from(b));
    case PrototypeStrategy::centroid:
      return b["centroids"];
    case PrototypeStrategy::codebook:
      return ad::l2_normalize_rows(b["codebook"]);
  }
  throw Error("unreachable");
}

inline PrototypeSet current_prototypes(const Model& m) {
  ad::Tape t;
  Binding b(t, m.params, {});
  return {build_prototypes(b, m).value(), m.config.strategy};
}

struct ForwardPass {
  ad::Var prototypes;
  ad::Var features;  // after the adapter
  ad::Var similarity;
  ad::Var probs;
  ad::Var weights;
  ad::Var quantized;
  ad::Var fused;
  Matrix hard;
  Matrix attention;
  ad::Var align;
  ad::Var comp;  // unset when align_only
  ad::Var sep;   // unset when align_only
  ad::Var total;
  LossTerms terms;
};

// `eps` selects stochastic (Gumbel) weights; nullptr gives the noise-free
// sharpened weights used at evaluation. `labels` may be empty to skip the loss.
inline ForwardPass forward(const Binding& b, const Model& m, const Matrix& batch,
                           std::span<const int> labels, const Matrix* eps) {
  const TrainConfig& c = m.config;
  ad::Tape& t = b.tape();
  ForwardPass fp;
  fp.prototypes = build_prototypes(b, m);
  ad::Var raw = t.constant(batch);
  fp.features = adapter_enabled(c) ? apply_adapter(raw, b["adapter.w"], b["adapter.b"]) : raw;
  fp.similarity = ad::matmul_bt(ad::l2_normalize_rows(fp.features), ad::l2_normalize_rows(fp.prototypes));
  fp.probs = ad::softmax_rows(fp.similarity, 1.0);
  fp.weights = eps ? gumbel_softmax(fp.probs, c.tau, *eps) : sharpen(fp.probs, c.tau);
  fp.hard = hard_assign(fp.weights.value());
  ad::Var mix = c.straight_through ? ad::straight_through(fp.weights, fp.hard) : fp.weights;
  fp.quantized = quantize(mix, fp.prototypes);
  FusionOutput fo = fuse(fp.features, fp.quantized, fp.prototypes, FusionVars::from(b), c.kv_mode);
  fp.fused = fo.features;
  fp.attention = std::move(fo.attention);
  if (labels.empty()) return fp;

  ad::Var align = align_loss(fp.fused, fp.prototypes, labels);
  fp.align = align;
  if (c.align_only) {
    fp.total = align;
    fp.terms = total_loss(align.value()(0, 0), 0.0, 0.0, 0.0, 0.0);
    return fp;
  }
  ad::Var comp = compactness_loss(fp.features, fp.hard, fp.prototypes, c.comp_grad);
  ad::Var sep = separation_loss(fp.prototypes);
  fp.comp = comp;
  fp.sep = sep;
  fp.total = ad::add(ad::add(align, ad::scale(comp, c.lambda1)), ad::scale(sep, c.lambda2));
  fp.terms = total_loss(align.value()(0, 0), comp.value()(0, 0), sep.value()(0, 0), c.lambda1, c.lambda2);
  return fp;
}

// ---------------------------------------------------------------------------
// Schedule and optimizer

inline std::size_t steps_per_epoch(std::size_t n, std::size_t batch_size) {
  return (n + batch_size - 1) / batch_size;
}

// Linear ramp 0 -> base_lr over the warmup steps, then cosine decay to 0 at
// total_steps. Warmup length is warmup_epochs * (total_steps / epochs).
inline double lr_at(std::size_t step, const TrainConfig& c, std::size_t total_steps) {
  if (step > total_steps) throw Error("lr_at: step beyond schedule");
  const std::size_t per_epoch = c.epochs == 0 ? 0 : total_steps / c.epochs;
  const std::size_t warmup = std::min(total_steps, c.warmup_epochs * per_epoch);
  if (step < warmup) return c.base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (total_steps == warmup) return step == total_steps && total_steps > 0 ? 0.0 : c.base_lr;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
  return 0.5 * c.base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

struct EpochRecord {
  std::size_t epoch = 0;
  LossTerms loss;  // mean over the epoch's batches
  double train_accuracy = 0.0;
  double lr = 0.0;  // learning rate of the epoch's last step
};

struct TrainState {
  Model model;
  std::set<std::string> trainable;
  ParameterStore moment1;
  ParameterStore moment2;
  std::size_t step = 0;
  std::vector<EpochRecord> history;
};

inline TrainState make_train_state(Model model) {
  TrainState s;
  s.trainable = trainable_names(model.config);
  for (const auto& name : s.trainable) {
    const Matrix& p = model.params.at(name);
    s.moment1[name] = Matrix(p.rows(), p.cols());
    s.moment2[name] = Matrix(p.rows(), p.cols());
  }
  s.model = std::move(model);
  return s;
}

// AdamW with decoupled weight decay (decay applied before the moment update).
inline void optimizer_step(TrainState& s, const ParameterStore& grads, double lr) {
  const TrainConfig& c = s.model.config;
  for (const auto& name : s.trainable) {
    const Matrix& g = grads.at(name);
    if (!g.all_finite()) throw Error("non-finite gradient for parameter '" + name + "'");
    require_same_shape(s.model.params.at(name), g, name.c_str());
  }
  ++s.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(s.step));
  for (const auto& name : s.trainable) {
    Matrix& p = s.model.params.at(name);
    Matrix& m1 = s.moment1.at(name);
    Matrix& m2 = s.moment2.at(name);
    const Matrix& g = grads.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      double& w = p.data()[i];
      const double gi = g.data()[i];
      w *= 1.0 - lr * c.weight_decay;
      m1.data()[i] = c.beta1 * m1.data()[i] + (1.0 - c.beta1) * gi;
      m2.data()[i] = c.beta2 * m2.data()[i] + (1.0 - c.beta2) * gi * gi;
      const double mhat = m1.data()[i] / bc1;
      const double vhat = m2.data()[i] / bc2;
      w -= lr * mhat / (std::sqrt(vhat) + c.adam_eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop

class TrainingDiverged : public Error {
public:
  using Error::Error;
};

struct StepRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;  // optimizer steps completed before this batch
  std::vector<std::size_t> rows;
  const ParameterStore* params_before = nullptr;
  Matrix eps;
  LossTerms loss;
};

using StepObserver = std::function<void(const StepRecord&)>;

inline std::vector<int> gather_labels(const LabeledFeatures& data, std::span<const std::size_t> rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (std::size_t r : rows) out.push_back(data.labels[r]);
  return out;
}

inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy(m.row(rows[i]).begin(), m.row(rows[i]).end(), out.row(i).begin());
  return out;
}

inline std::size_t correct_count(const Matrix& fused, const Matrix& prototypes, std::span<const int> labels) {
  const Matrix cos = cosine_similarity_matrix(fused, prototypes);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (static_cast<int>(argmax(cos.row(i))) + 1 == labels[i]) ++hits;
  return hits;
}

inline void check_training_data(const LabeledFeatures& data) {
  if (data.size() == 0) throw Error("training data is empty");
  if (data.labels.size() != data.size()) throw Error("training data must be labeled");
  const std::size_t k = data.classes();
  std::vector<bool> seen(k, false);
  for (int y : data.labels) {
    if (y < 1) throw Error("label out of range");
    seen[static_cast<std::size_t>(y - 1)] = true;
  }
  for (std::size_t c = 0; c < k; ++c)
    if (!seen[c]) throw Error("class " + std::to_string(c + 1) + " has no training samples");
}

// Loss of one batch under fixed parameters and noise.
inline LossTerms batch_loss(const Model& m, const Matrix& batch, std::span<const int> labels, const Matrix& eps) {
  ad::Tape t;
  Binding b(t, m.params, {});
  return forward(b, m, batch, labels, &eps).terms;
}

inline TrainState train(const TrainConfig& config, const LabeledFeatures& data,
                        std::optional<std::size_t> classes = std::nullopt,
                        const StepObserver& observer = {}) {
  config.validate();
  check_training_data(data);
  const std::size_t k = classes.value_or(data.classes());
  TrainState s = make_train_state(init_model(config, k, data.dim(), data));
  const std::size_t n = data.size();
  const std::size_t per_epoch = steps_per_epoch(n, config.batch_size);
  const std::size_t total_steps = config.epochs * per_epoch;
  Stream shuffle(derive_seed(config.seed, "shuffle"));
  const NoiseSource noise(derive_seed(config.seed, "gumbel"));
  std::optional<double> initial_total;

  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle.shuffle(order);
    EpochRecord rec;
    rec.epoch = epoch + 1;
    std::size_t hits = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t end = std::min(n, start + config.batch_size);
      std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(end));
      const Matrix batch = gather_rows(data.features, rows);
      const std::vector<int> labels = gather_labels(data, rows);
      const Matrix eps = noise.uniform(rows.size(), k, s.step);

      ad::Tape tape;
      Binding b(tape, s.model.params, s.trainable);
      ForwardPass fp = forward(b, s.model, batch, labels, &eps);
      const LossTerms& terms = fp.terms;
      if (!initial_total) initial_total = terms.total;
      if (!std::isfinite(terms.total) || terms.total > config.divergence_factor * *initial_total) {
        std::ostringstream msg;
        msg << "training diverged at epoch " << rec.epoch << " step " << s.step << ": total=" << terms.total
            << " align=" << terms.align << " comp=" << terms.comp << " sep=" << terms.sep
            << " initial=" << *initial_total;
        throw TrainingDiverged(msg.str());
      }
      if (observer) observer({rec.epoch, s.step, rows, &s.model.params, eps, terms});
      hits += correct_count(fp.fused.value(), fp.prototypes.value(), labels);

      tape.backward(fp.total);
      const double lr = lr_at(s.step + 1, config, total_steps);
      optimizer_step(s, b.gradients(), lr);
      rec.lr = lr;

      rec.loss.align += terms.align;
      rec.loss.comp += terms.comp;
      rec.loss.sep += terms.sep;
      rec.loss.total += terms.total;
      ++batches;
    }
    const double inv = 1.0 / static_cast<double>(batches);
    rec.loss.align *= inv;
    rec.loss.comp *= inv;
    rec.loss.sep *= inv;
    rec.loss.total *= inv;
    rec.loss.lambda1 = config.align_only ? 0.0 : config.lambda1;
    rec.loss.lambda2 = config.align_only ? 0.0 : config.lambda2;
    rec.train_accuracy = static_cast<double>(hits) / static_cast<double>(n);
    s.history.push_back(rec);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Inference

struct Inference {
  Matrix prototypes;
  Matrix features;  // adapted
  Matrix weights;
  Matrix hard;
  Matrix fused;
  std::vector<int> predictions;  // 1-based
};

// Deterministic unless `noise` is set, in which case the Gumbel weights are
// drawn from the evaluation stream of the model's seed.
inline Inference infer(const Model& m, const Matrix& features, bool noise) {
  ad::Tape t;
  Binding b(t, m.params, {});
  Matrix eps;
  if (noise) eps = NoiseSource(derive_seed(m.config.seed, "eval.gumbel")).uniform(features.rows(), m.classes, 0);
  ForwardPass fp = forward(b, m, features, {}, noise ? &eps : nullptr);
  Inference out;
  out.prototypes = fp.prototypes.value();
  out.features = fp.features.value();
  out.weights = fp.weights.value();
  out.hard = fp.hard;
  out.fused = fp.fused.value();
  out.predictions = classify(out.fused, out.prototypes);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: manifest.json plus params/<path>.pcqe per tensor.

inline nlohmann::json history_to_json(const std::vector<EpochRecord>& h) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : h)
    arr.push_back({{"epoch", r.epoch},
                   {"align", r.loss.align},
                   {"comp", r.loss.comp},
                   {"sep", r.loss.sep},
                   {"total", r.loss.total},
                   {"train_accuracy", r.train_accuracy},
                   {"lr", r.lr}});
  return arr;
}

inline void save_checkpoint(const std::filesystem::path& dir, const TrainState& s) {
  std::filesystem::create_directories(dir / "params");
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [name, value] : s.model.params) {
    LabeledFeatures blob{value, {}};
    write_embeddings(dir / "params" / (name + ".pcqe"), blob);
    params[name] = {{"rows", value.rows()}, {"cols", value.cols()}, {"trainable", s.trainable.contains(name)}};
  }
  nlohmann::json manifest = {{"format", "pcq-checkpoint"},
                             {"version", 1},
                             {"config", config_to_json(s.model.config)},
                             {"classes", s.model.classes},
                             {"dim", s.model.dim},
                             {"step", s.step},
                             {"history", history_to_json(s.history)},
                             {"params", params}};
  const std::string text = manifest.dump(2) + "\n";
  write_bytes_atomic(dir / "manifest.json",
                     std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline Model load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw Error("cannot open checkpoint manifest in " + dir.string());
  const nlohmann::json manifest = nlohmann::json::parse(f);
  Model m;
  m.config = config_from_json(manifest.at("config"));
  m.classes = manifest.at("classes").get<std::size_t>();
  m.dim = manifest.at("dim").get<std::size_t>();
  for (const auto& [name, info] : manifest.at("params").items()) {
    Matrix value = read_embeddings(dir / "params" / (name + ".pcqe")).features;
    if (value.rows() != info.at("rows").get<std::size_t>() || value.cols() != info.at("cols").get<std::size_t>())
      throw Error("checkpoint tensor '" + name + "' has the wrong shape");
    m.params[name] = std::move(value);
  }
  return m;
}

}  // namespace pcq
