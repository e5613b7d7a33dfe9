#pragma once

// Evaluation and ablation harnesses: temperature sweep, loss components,
// prompt designs, prototype strategies, trainable scope, few-shot curves,
// plus the 2-D prototype geometry export.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "pcq/datasim.hpp"
#include "pcq/metrics.hpp"
#include "pcq/trainer.hpp"

namespace pcq {

inline std::uint64_t config_hash(const TrainConfig& c) { return fnv1a64(config_to_json(c).dump()); }

inline MetricsReport evaluate(const Model& m, const LabeledFeatures& data, bool noise) {
  const Inference inf = infer(m, data.features, noise);
  MetricsReport r = compute_metrics(inf.predictions, data.labels, inf.hard, m.classes);
  r.config_hash = config_hash(m.config);
  r.seed = m.config.seed;
  return r;
}

// Runs fn(0..n-1) on up to `workers` threads. Results land at their own
// index, so output order never depends on scheduling.
template <class T>
std::vector<T> parallel_map(std::size_t n, std::size_t workers, const std::function<T(std::size_t)>& fn) {
  std::vector<T> out(n);
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fn(i);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) out[i] = fn(i);
    });
  for (auto& t : pool) t.join();
  return out;
}

struct HarnessOptions {
  std::size_t shots = 16;
  std::size_t workers = 1;
};

struct Variant {
  std::string name;
  TrainConfig config;
  std::optional<double> reference;  // reported value from the original experiments, context only
};

struct RunRow {
  std::string variant;
  std::uint64_t seed = 0;
  std::size_t shots = 0;
  bool ok = false;
  std::string error;
  double accuracy = 0.0;        // noise-free evaluation
  double accuracy_noisy = 0.0;  // Gumbel noise at evaluation
  std::optional<double> paa;
  double entropy = 0.0;  // mean row entropy of the Gumbel weights, fixed evaluation noise
  LossTerms final_loss;
};

struct SummaryRow {
  std::string variant;
  std::size_t runs = 0;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
  double mean_accuracy_noisy = 0.0;
  std::optional<double> mean_paa;
  double mean_entropy = 0.0;
  std::optional<double> reference;
};

struct SweepTable {
  std::string harness;
  std::vector<RunRow> runs;  // variant-major, then seed
  std::vector<SummaryRow> summary;
};

// Train on `train`, evaluate on `test`. Failures are captured in the row.
inline RunRow run_variant(const Variant& v, const LabeledFeatures& train, const LabeledFeatures& test,
                          std::size_t classes, std::uint64_t seed, std::size_t shots) {
  RunRow row;
  row.variant = v.name;
  row.seed = seed;
  row.shots = shots;
  try {
    TrainConfig cfg = v.config;
    cfg.seed = seed;
    const TrainState s = pcq::train(cfg, train, classes);
    const Inference clean = infer(s.model, test.features, false);
    const Inference noisy = infer(s.model, test.features, true);
    const MetricsReport mc = compute_metrics(clean.predictions, test.labels, clean.hard, classes);
    const MetricsReport mn = compute_metrics(noisy.predictions, test.labels, noisy.hard, classes);
    row.accuracy = mc.accuracy;
    row.accuracy_noisy = mn.accuracy;
    row.paa = cfg.eval_noise ? mn.paa : mc.paa;
    row.entropy = mean_row_entropy(noisy.weights);
    if (!s.history.empty()) row.final_loss = s.history.back().loss;
    row.ok = true;
  } catch (const std::exception& e) {
    row.ok = false;
    row.error = e.what();
  }
  return row;
}

inline std::vector<SummaryRow> summarize(const std::vector<Variant>& variants, const std::vector<RunRow>& runs) {
  std::vector<SummaryRow> out;
  for (const auto& v : variants) {
    SummaryRow s;
    s.variant = v.name;
    s.reference = v.reference;
    double paa_sum = 0.0;
    std::size_t paa_n = 0;
    std::vector<double> acc;
    for (const auto& r : runs) {
      if (r.variant != v.name || !r.ok) continue;
      acc.push_back(r.accuracy);
      s.mean_accuracy_noisy += r.accuracy_noisy;
      s.mean_entropy += r.entropy;
      if (r.paa) {
        paa_sum += *r.paa;
        ++paa_n;
      }
    }
    s.runs = acc.size();
    if (!acc.empty()) {
      const double n = static_cast<double>(acc.size());
      for (double a : acc) s.mean_accuracy += a;
      s.mean_accuracy /= n;
      s.mean_accuracy_noisy /= n;
      s.mean_entropy /= n;
      double var = 0.0;
      for (double a : acc) var += (a - s.mean_accuracy) * (a - s.mean_accuracy);
      s.std_accuracy = acc.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
    }
    if (paa_n > 0) s.mean_paa = paa_sum / static_cast<double>(paa_n);
    out.push_back(s);
  }
  return out;
}

// One run per (variant, seed) on a shared split of `data` per seed.
inline SweepTable run_harness(const std::string& harness, const std::vector<Variant>& variants,
                              const LabeledFeatures& data, const std::vector<std::uint64_t>& seeds,
                              const HarnessOptions& opt) {
  if (variants.empty()) throw Error("harness needs at least one variant");
  if (seeds.empty()) throw Error("harness needs at least one seed");
  const std::size_t classes = data.classes();
  std::vector<Split> splits;
  for (auto seed : seeds) splits.push_back(few_shot_split(data, opt.shots, seed));
  const std::size_t n = variants.size() * seeds.size();
  SweepTable t;
  t.harness = harness;
  t.runs = parallel_map<RunRow>(n, opt.workers, [&](std::size_t i) {
    const std::size_t vi = i / seeds.size();
    const std::size_t si = i % seeds.size();
    return run_variant(variants[vi], splits[si].train, splits[si].test, classes, seeds[si], opt.shots);
  });
  t.summary = summarize(variants, t.runs);
  return t;
}

inline const std::vector<double>& default_tau_grid() {
  static const std::vector<double> g = {0.1, 0.3, 0.5, 1.0, 3.0, 5.0};
  return g;
}

inline std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string short_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

inline SweepTable temperature_sweep(const TrainConfig& base, const std::vector<double>& taus,
                                    const LabeledFeatures& data, const std::vector<std::uint64_t>& seeds,
                                    const HarnessOptions& opt = {}) {
  if (taus.empty()) throw Error("temperature grid is empty");
  static const std::vector<std::pair<double, double>> reference = {
      {0.1, 70.57}, {0.3, 70.68}, {0.5, 70.82}, {1.0, 71.03}, {3.0, 69.67}, {5.0, 69.57}};
  std::vector<Variant> variants;
  for (double tau : taus) {
    if (!(tau > 0.0)) throw Error("invalid temperature");
    Variant v{"tau=" + short_real(tau), base, std::nullopt};
    v.config.tau = tau;
    for (const auto& [t, r] : reference)
      if (t == tau) v.reference = r;
    variants.push_back(v);
  }
  return run_harness("temperature", variants, data, seeds, opt);
}

inline SweepTable loss_ablation(const TrainConfig& base, const LabeledFeatures& data,
                                const std::vector<std::uint64_t>& seeds, const HarnessOptions& opt = {}) {
  auto with = [&](const char* name, double l1, double l2, double ref) {
    Variant v{name, base, ref};
    v.config.align_only = false;
    v.config.lambda1 = l1;
    v.config.lambda2 = l2;
    return v;
  };
  const double l1 = base.lambda1, l2 = base.lambda2;
  return run_harness("loss", {with("A", 0.0, 0.0, 69.95), with("A+S", 0.0, l2, 69.19),
                              with("A+C", l1, 0.0, 70.01), with("A+C+S", l1, l2, 71.03)},
                     data, seeds, opt);
}

// {class}: no prompts; template: m fixed prompt vectors; learnable: m trainable.
inline SweepTable prompt_ablation(const TrainConfig& base, const LabeledFeatures& data,
                                  const std::vector<std::uint64_t>& seeds, const HarnessOptions& opt = {}) {
  Variant cls{"class_only", base, 67.66};
  cls.config.strategy = PrototypeStrategy::prompted;
  cls.config.prompt_count = 0;
  Variant fixed{"fixed_prompt", base, 69.19};
  fixed.config.strategy = PrototypeStrategy::prompted;
  fixed.config.prompt_mode = PromptMode::fixed;
  Variant learn{"learnable_prompt", base, 71.03};
  learn.config.strategy = PrototypeStrategy::prompted;
  learn.config.prompt_mode = PromptMode::trainable;
  return run_harness("prompt", {cls, fixed, learn}, data, seeds, opt);
}

// Reference values here are the reported PAA percentages.
inline SweepTable strategy_compare(const TrainConfig& base, const LabeledFeatures& data,
                                   const std::vector<std::uint64_t>& seeds, const HarnessOptions& opt = {}) {
  std::vector<Variant> variants;
  for (auto [s, ref] : {std::pair{PrototypeStrategy::centroid, 90.4}, std::pair{PrototypeStrategy::codebook, 87.7},
                        std::pair{PrototypeStrategy::prompted, 93.8}}) {
    Variant v{to_string(s), base, ref};
    v.config.strategy = s;
    variants.push_back(v);
  }
  return run_harness("strategy", variants, data, seeds, opt);
}

// Scope "all" also trains the encoder surrogate and may diverge; a failed run
// is recorded in its row, never asserted.
inline SweepTable scope_ablation(const TrainConfig& base, const LabeledFeatures& data,
                                 const std::vector<std::uint64_t>& seeds, const HarnessOptions& opt = {}) {
  std::vector<Variant> variants;
  for (auto s : {TrainableScope::prompts_only, TrainableScope::prompts_adapter,
                 TrainableScope::prompts_adapter_fusion, TrainableScope::all}) {
    Variant v{to_string(s), base, std::nullopt};
    v.config.scope = s;
    variants.push_back(v);
  }
  return run_harness("scope", variants, data, seeds, opt);
}

inline const std::vector<std::size_t>& default_shot_grid() {
  static const std::vector<std::size_t> g = {1, 2, 4, 8, 16};
  return g;
}

inline SweepTable fewshot_curve(const TrainConfig& base, const DatasetSpec& spec,
                                const std::vector<std::size_t>& shots, const std::vector<std::uint64_t>& seeds,
                                const HarnessOptions& opt = {}) {
  if (shots.empty()) throw Error("shot grid is empty");
  if (seeds.empty()) throw Error("harness needs at least one seed");
  const LabeledFeatures data = generate_dataset(spec);
  std::vector<Variant> variants;
  for (std::size_t s : shots) variants.push_back({"shots=" + std::to_string(s), base, std::nullopt});
  std::vector<std::vector<Split>> splits(shots.size());
  for (std::size_t i = 0; i < shots.size(); ++i)
    for (auto seed : seeds) splits[i].push_back(few_shot_split(data, shots[i], seed));
  SweepTable t;
  t.harness = "fewshot";
  t.runs = parallel_map<RunRow>(shots.size() * seeds.size(), opt.workers, [&](std::size_t i) {
    const std::size_t vi = i / seeds.size();
    const std::size_t si = i % seeds.size();
    return run_variant(variants[vi], splits[vi][si].train, splits[vi][si].test, spec.classes, seeds[si],
                       shots[vi]);
  });
  t.summary = summarize(variants, t.runs);
  return t;
}

// ---------------------------------------------------------------------------
// Reports

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string opt_real(const std::optional<double>& v) { return v ? format_real(*v) : ""; }

inline std::string runs_csv(const SweepTable& t) {
  std::ostringstream o;
  o << "harness,variant,seed,shots,status,accuracy,accuracy_noisy,paa,entropy,final_align,final_comp,"
       "final_sep,final_total,error\r\n";
  for (const auto& r : t.runs)
    o << csv_field(t.harness) << ',' << csv_field(r.variant) << ',' << r.seed << ',' << r.shots << ','
      << (r.ok ? "ok" : "failed") << ',' << format_real(r.accuracy) << ',' << format_real(r.accuracy_noisy)
      << ',' << opt_real(r.paa) << ',' << format_real(r.entropy) << ',' << format_real(r.final_loss.align)
      << ',' << format_real(r.final_loss.comp) << ',' << format_real(r.final_loss.sep) << ','
      << format_real(r.final_loss.total) << ',' << csv_field(r.error) << "\r\n";
  return o.str();
}

inline std::string summary_csv(const SweepTable& t) {
  std::ostringstream o;
  o << "harness,variant,runs,mean_accuracy,std_accuracy,mean_accuracy_noisy,mean_paa,mean_entropy,"
       "reference\r\n";
  for (const auto& s : t.summary)
    o << csv_field(t.harness) << ',' << csv_field(s.variant) << ',' << s.runs << ','
      << format_real(s.mean_accuracy) << ',' << format_real(s.std_accuracy) << ','
      << format_real(s.mean_accuracy_noisy) << ',' << opt_real(s.mean_paa) << ','
      << format_real(s.mean_entropy) << ',' << opt_real(s.reference) << "\r\n";
  return o.str();
}

inline nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

inline nlohmann::json table_to_json(const SweepTable& t) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& r : t.runs)
    runs.push_back({{"variant", r.variant},
                    {"seed", r.seed},
                    {"shots", r.shots},
                    {"status", r.ok ? "ok" : "failed"},
                    {"error", r.error},
                    {"accuracy", r.accuracy},
                    {"accuracy_noisy", r.accuracy_noisy},
                    {"paa", opt_json(r.paa)},
                    {"entropy", r.entropy},
                    {"final_loss",
                     {{"align", r.final_loss.align},
                      {"comp", r.final_loss.comp},
                      {"sep", r.final_loss.sep},
                      {"total", r.final_loss.total}}}});
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& s : t.summary)
    summary.push_back({{"variant", s.variant},
                       {"runs", s.runs},
                       {"mean_accuracy", s.mean_accuracy},
                       {"std_accuracy", s.std_accuracy},
                       {"mean_accuracy_noisy", s.mean_accuracy_noisy},
                       {"mean_paa", opt_json(s.mean_paa)},
                       {"mean_entropy", s.mean_entropy},
                       {"reference", opt_json(s.reference)}});
  return {{"harness", t.harness}, {"runs", runs}, {"summary", summary}};
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  write_bytes_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline void write_table(const std::filesystem::path& dir, const SweepTable& t) {
  std::filesystem::create_directories(dir);
  write_text(dir / (t.harness + "_runs.csv"), runs_csv(t));
  write_text(dir / (t.harness + "_summary.csv"), summary_csv(t));
  write_text(dir / (t.harness + ".json"), table_to_json(t).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// 2-D projection

struct Projection {
  Matrix coords;      // N x 2
  Matrix components;  // 2 x d, unit rows
  Matrix mean;        // 1 x d
};

// Top-2 principal components of the mean-centered rows. Each component's
// largest-magnitude coordinate is made positive.
inline Projection project_2d(const Matrix& points) {
  if (points.rows() < 2) throw Error("projection needs at least two points");
  require_finite(points);
  const std::size_t n = points.rows(), d = points.cols();
  Eigen::MatrixXd x(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = points(i, j);
  const Eigen::RowVectorXd mu = x.colwise().mean();
  x.rowwise() -= mu;
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw Error("eigendecomposition failed");
  const Eigen::VectorXd& evals = solver.eigenvalues();  // ascending
  if (evals(static_cast<Eigen::Index>(d) - 1) <= 1e-15 * std::max(1.0, cov.cwiseAbs().maxCoeff()))
    throw Error("rank-0 input");
  Projection p;
  p.components = Matrix(2, d);
  p.mean = Matrix(1, d);
  for (std::size_t j = 0; j < d; ++j) p.mean(0, j) = mu(static_cast<Eigen::Index>(j));
  for (std::size_t c = 0; c < 2 && c < d; ++c) {
    Eigen::VectorXd v = solver.eigenvectors().col(static_cast<Eigen::Index>(d - 1 - c));
    Eigen::Index big = 0;
    v.cwiseAbs().maxCoeff(&big);
    if (v(big) < 0) v = -v;
    for (std::size_t j = 0; j < d; ++j) p.components(c, j) = v(static_cast<Eigen::Index>(j));
  }
  p.coords = Matrix(n, 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 2; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * p.components(c, j);
      p.coords(i, c) = s;
    }
  return p;
}

struct ProjectedPoint {
  std::string id;
  double x = 0.0;
  double y = 0.0;
  int label = 0;
  std::string phase;
};

inline std::string projection_csv(const std::vector<ProjectedPoint>& pts) {
  std::ostringstream o;
  o << "id,x,y,label,phase\r\n";
  for (const auto& p : pts)
    o << csv_field(p.id) << ',' << format_real(p.x) << ',' << format_real(p.y) << ',' << p.label << ','
      << csv_field(p.phase) << "\r\n";
  return o.str();
}

inline std::string projection_svg(const std::vector<ProjectedPoint>& pts) {
  double lo_x = 0, hi_x = 1, lo_y = 0, hi_y = 1;
  if (!pts.empty()) {
    lo_x = hi_x = pts[0].x;
    lo_y = hi_y = pts[0].y;
    for (const auto& p : pts) {
      lo_x = std::min(lo_x, p.x), hi_x = std::max(hi_x, p.x);
      lo_y = std::min(lo_y, p.y), hi_y = std::max(hi_y, p.y);
    }
  }
  const double size = 480.0, pad = 20.0;
  auto sx = [&](double v) { return pad + (hi_x > lo_x ? (v - lo_x) / (hi_x - lo_x) : 0.5) * (size - 2 * pad); };
  auto sy = [&](double v) { return size - pad - (hi_y > lo_y ? (v - lo_y) / (hi_y - lo_y) : 0.5) * (size - 2 * pad); };
  static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"480\">\n";
  for (const auto& p : pts) {
    const char* color = palette[static_cast<std::size_t>(std::max(0, p.label - 1)) % 10];
    if (p.phase.rfind("prototype", 0) == 0)
      o << "  <rect x=\"" << format_real(sx(p.x) - 5) << "\" y=\"" << format_real(sy(p.y) - 5)
        << "\" width=\"10\" height=\"10\" fill=\"" << color << "\" stroke=\"black\"/>\n";
    else
      o << "  <circle cx=\"" << format_real(sx(p.x)) << "\" cy=\"" << format_real(sy(p.y))
        << "\" r=\"2.5\" fill=\"" << color << "\" fill-opacity=\"0.6\"/>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace pcq
