// pcq: command-line front end for data generation, training, evaluation,
// ablation harnesses, projections and the gradient suite.
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "pcq/evalkit.hpp"
#include "pcq/gradsuite.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kToolVersion = "1.0.0";

// Raised for bad flag values discovered after parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string file_digest(const fs::path& p) {
  const auto bytes = pcq::read_bytes(p);
  return hex64(pcq::fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size())));
}

std::size_t env_workers() {
  if (const char* w = std::getenv("PCQ_WORKERS")) {
    try {
      const long v = std::stol(w);
      if (v > 0) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
  }
  return 1;
}

// Flags shared by every subcommand.
struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::size_t workers = env_workers();
  bool dry_run = false;
  std::string out;

  void attach(CLI::App* app, bool out_required, const std::string& out_default = "") {
    app->add_option("--config", config_path, "JSON config (flat dotted keys) or a previous run manifest");
    app->add_option("--set", overrides, "Override one config key: key=value (repeatable)");
    app->add_option("--seed", seed, "Master seed");
    app->add_option("--workers", workers, "Parallel runs for sweeps (default: PCQ_WORKERS or 1)")
        ->check(CLI::PositiveNumber);
    app->add_flag("--dry-run", dry_run, "Print the resolved run manifest and exit");
    auto* o = app->add_option("--out", out, "Output path");
    if (out_required) o->required();
    else out = out_default;
  }

  pcq::TrainConfig resolve() const {
    pcq::TrainConfig c;
    try {
      if (!config_path.empty()) {
        std::ifstream f(config_path);
        if (!f) throw UsageError("cannot open config file " + config_path);
        json j = json::parse(f);
        // A run manifest carries the resolved config under "config".
        if (j.is_object() && j.contains("tool") && j.contains("config")) j = j.at("config");
        c = pcq::config_from_json(j);
      }
      for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
        const std::string key = kv.substr(0, eq);
        try {
          pcq::set_config_value(c, key, json(kv.substr(eq + 1)));
        } catch (const std::invalid_argument&) {
          throw UsageError("bad value for " + key + ": '" + kv.substr(eq + 1) + "'");
        } catch (const std::out_of_range&) {
          throw UsageError("value out of range for " + key);
        }
      }
      if (seed) c.seed = *seed;
      c.validate();
    } catch (const UsageError&) {
      throw;
    } catch (const std::exception& e) {
      throw UsageError(std::string("invalid config: ") + e.what());
    }
    return c;
  }
};

struct DataFlags {
  pcq::DatasetSpec spec;

  void attach(CLI::App* app) {
    app->add_option("--classes", spec.classes, "Class count K")->check(CLI::PositiveNumber);
    app->add_option("--dim", spec.dim, "Feature dimension d");
    app->add_option("--per-class", spec.per_class, "Samples per class")->check(CLI::PositiveNumber);
    app->add_option("--intra-spread", spec.intra_spread, "Angular noise std (radians)");
    app->add_option("--inter-separation", spec.inter_separation, "Minimum angle between class means (radians)");
    app->add_option("--data-seed", spec.seed, "Dataset seed");
  }
};

json spec_json(const pcq::DatasetSpec& s) {
  return {{"classes", s.classes},
          {"dim", s.dim},
          {"per_class", s.per_class},
          {"intra_spread", s.intra_spread},
          {"inter_separation", s.inter_separation},
          {"seed", s.seed}};
}

json make_manifest(const std::string& command, const json& config, const json& inputs, const std::string& out,
                   const json& extra = json::object()) {
  json m = {{"tool", "pcq"}, {"version", kToolVersion}, {"command", command},
            {"config", config}, {"inputs", inputs},     {"output", out}};
  for (const auto& [k, v] : extra.items()) m[k] = v;
  return m;
}

void write_json(const fs::path& p, const json& j) { pcq::write_text(p, j.dump(2) + "\n"); }

std::vector<std::uint64_t> seed_list(std::size_t count, std::uint64_t first) {
  std::vector<std::uint64_t> s;
  for (std::size_t i = 0; i < count; ++i) s.push_back(first + i);
  return s;
}

json metrics_json(const pcq::MetricsReport& r) {
  json per_class = json::array();
  for (double v : r.per_class_accuracy) per_class.push_back(std::isnan(v) ? json() : json(v));
  return {{"count", r.count},
          {"accuracy", r.accuracy},
          {"paa", r.paa ? json(*r.paa) : json()},
          {"per_class_accuracy", per_class},
          {"confusion", r.confusion},
          {"config_hash", hex64(r.config_hash)},
          {"seed", r.seed}};
}

json geometry_json(const pcq::Model& m) {
  const pcq::Matrix h = pcq::current_prototypes(m).vectors;
  return {{"min_pairwise_distance", pcq::min_pairwise_distance(h)},
          {"separation_loss", pcq::separation_loss(h)},
          {"kl_uniformity", pcq::kl_uniformity(pcq::prototype_affinity(h))}};
}

void print_summary(const pcq::SweepTable& t) {
  for (const auto& s : t.summary) {
    std::printf("%-26s runs=%zu acc=%.4f (+/- %.4f) noisy=%.4f", s.variant.c_str(), s.runs, s.mean_accuracy,
                s.std_accuracy, s.mean_accuracy_noisy);
    if (s.mean_paa) std::printf(" paa=%.4f", *s.mean_paa);
    std::printf(" entropy=%.4f\n", s.mean_entropy);
  }
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Common& c, const DataFlags& d) {
  pcq::DatasetSpec spec = d.spec;
  if (c.seed) spec.seed = *c.seed;
  const json manifest = make_manifest("gen-data", spec_json(spec), json::object(), c.out);
  if (c.dry_run) {
    std::cout << manifest.dump(2) << "\n";
    return 0;
  }
  const pcq::LabeledFeatures data = pcq::generate_dataset(spec);
  const fs::path out(c.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  pcq::write_embeddings(out, data);
  write_json(fs::path(c.out + ".manifest.json"), manifest);
  std::printf("wrote %zu x %zu embeddings to %s\n", data.size(), data.dim(), c.out.c_str());
  return 0;
}

int cmd_train(const Common& c, const std::string& data_path, const std::string& test_path) {
  const pcq::TrainConfig cfg = c.resolve();
  json inputs = {{data_path, file_digest(data_path)}};
  if (!test_path.empty()) inputs[test_path] = file_digest(test_path);
  const json manifest = make_manifest("train", pcq::config_to_json(cfg), inputs, c.out);
  if (c.dry_run) {
    std::cout << manifest.dump(2) << "\n";
    return 0;
  }
  const pcq::LabeledFeatures data = pcq::read_embeddings(data_path);
  const pcq::TrainState s = pcq::train(cfg, data);
  const fs::path out(c.out);
  fs::create_directories(out);
  pcq::save_checkpoint(out / "checkpoint", s);
  json report = {{"config_hash", hex64(pcq::config_hash(cfg))},
                 {"seed", cfg.seed},
                 {"steps", s.step},
                 {"history", pcq::history_to_json(s.history)},
                 {"train_metrics", metrics_json(pcq::evaluate(s.model, data, cfg.eval_noise))},
                 {"prototypes", geometry_json(s.model)}};
  if (!test_path.empty())
    report["test_metrics"] = metrics_json(pcq::evaluate(s.model, pcq::read_embeddings(test_path), cfg.eval_noise));
  write_json(out / "report.json", report);
  write_json(out / "run_manifest.json", manifest);
  const auto& last = s.history.empty() ? pcq::EpochRecord{} : s.history.back();
  std::printf("trained %zu epochs, final loss %.6f, train accuracy %.4f\n", s.history.size(), last.loss.total,
              report["train_metrics"]["accuracy"].get<double>());
  return 0;
}

int cmd_eval(const Common& c, const std::string& ckpt, const std::string& data_path, bool noise) {
  const fs::path ckpt_dir = fs::path(ckpt) / "checkpoint";
  const fs::path dir = fs::exists(ckpt_dir / "manifest.json") ? ckpt_dir : fs::path(ckpt);
  json inputs = {{data_path, file_digest(data_path)}, {(dir / "manifest.json").string(), file_digest(dir / "manifest.json")}};
  pcq::Model m = pcq::load_checkpoint(dir);
  const json manifest = make_manifest("eval", pcq::config_to_json(m.config), inputs, c.out, {{"noise", noise}});
  if (c.dry_run) {
    std::cout << manifest.dump(2) << "\n";
    return 0;
  }
  const pcq::LabeledFeatures data = pcq::read_embeddings(data_path);
  if (data.labels.empty()) throw pcq::Error("evaluation data must be labeled");
  if (data.dim() != m.dim) throw pcq::Error("evaluation data dimension does not match the checkpoint");
  const pcq::MetricsReport r = pcq::evaluate(m, data, noise);
  fs::create_directories(c.out);
  write_json(fs::path(c.out) / "metrics.json", metrics_json(r));
  write_json(fs::path(c.out) / "run_manifest.json", manifest);
  std::printf("accuracy %.4f", r.accuracy);
  if (r.paa) std::printf(" paa %.4f", *r.paa);
  std::printf(" (n=%zu)\n", r.count);
  return 0;
}

struct HarnessFlags {
  std::string data_path;
  DataFlags data;
  std::size_t seeds = 3;
  std::uint64_t first_seed = 0;
  std::size_t shots = 16;

  HarnessFlags() { data.spec = {10, 32, 200, 0.35, 0.6, 0}; }

  void attach(CLI::App* app) {
    app->add_option("--data", data_path, "Labeled embedding file (default: generate from the dataset flags)");
    data.attach(app);
    app->add_option("--seeds", seeds, "Number of seeds per variant")->check(CLI::PositiveNumber);
    app->add_option("--first-seed", first_seed, "First seed of the run list");
    app->add_option("--shots", shots, "Training samples per class")->check(CLI::PositiveNumber);
  }

  json inputs() const { return data_path.empty() ? json::object() : json{{data_path, file_digest(data_path)}}; }

  pcq::LabeledFeatures load() const {
    return data_path.empty() ? pcq::generate_dataset(data.spec) : pcq::read_embeddings(data_path);
  }
};

using HarnessFn = std::function<pcq::SweepTable(const pcq::TrainConfig&, const pcq::LabeledFeatures&,
                                                const std::vector<std::uint64_t>&, const pcq::HarnessOptions&)>;

int cmd_harness(const std::string& name, const Common& c, const HarnessFlags& h, const HarnessFn& fn,
                const json& extra = json::object()) {
  const pcq::TrainConfig cfg = c.resolve();
  json args = {{"seeds", seed_list(h.seeds, h.first_seed)}, {"shots", h.shots}};
  if (h.data_path.empty()) args["dataset"] = spec_json(h.data.spec);
  for (const auto& [k, v] : extra.items()) args[k] = v;
  const json manifest = make_manifest(name, pcq::config_to_json(cfg), h.inputs(), c.out, {{"harness", args}});
  if (c.dry_run) {
    std::cout << manifest.dump(2) << "\n";
    return 0;
  }
  const pcq::SweepTable t = fn(cfg, h.load(), seed_list(h.seeds, h.first_seed), {h.shots, c.workers});
  pcq::write_table(c.out, t);
  write_json(fs::path(c.out) / "run_manifest.json", manifest);
  print_summary(t);
  return 0;
}

int cmd_fewshot(const Common& c, const DataFlags& d, const std::vector<std::size_t>& grid, std::size_t seeds,
                std::uint64_t first_seed) {
  const pcq::TrainConfig cfg = c.resolve();
  const json manifest = make_manifest(
      "fewshot", pcq::config_to_json(cfg), json::object(), c.out,
      {{"harness", {{"seeds", seed_list(seeds, first_seed)}, {"shots", grid}, {"dataset", spec_json(d.spec)}}}});
  if (c.dry_run) {
    std::cout << manifest.dump(2) << "\n";
    return 0;
  }
  const pcq::SweepTable t = pcq::fewshot_curve(cfg, d.spec, grid, seed_list(seeds, first_seed), {16, c.workers});
  pcq::write_table(c.out, t);
  write_json(fs::path(c.out) / "run_manifest.json", manifest);
  print_summary(t);
  return 0;
}

// Joint PCA of initial prototypes, trained prototypes, raw features and
// adapted features, so all four phases share one coordinate frame.
int cmd_project(const Common& c, const std::string& ckpt, const std::string& data_path, bool svg) {
  const fs::path ckpt_dir = fs::path(ckpt) / "checkpoint";
  const fs::path dir = fs::exists(ckpt_dir / "manifest.json") ? ckpt_dir : fs::path(ckpt);
  json inputs = {{data_path, file_digest(data_path)}, {(dir / "manifest.json").string(), file_digest(dir / "manifest.json")}};
  const pcq::Model trained = pcq::load_checkpoint(dir);
  const json manifest = make_manifest("project", pcq::config_to_json(trained.config), inputs, c.out);
  if (c.dry_run) {
    std::cout << manifest.dump(2) << "\n";
    return 0;
  }
  const pcq::LabeledFeatures data = pcq::read_embeddings(data_path);
  const pcq::Model initial = pcq::init_model(trained.config, trained.classes, trained.dim, data);
  const pcq::Matrix p0 = pcq::current_prototypes(initial).vectors;
  const pcq::Matrix p1 = pcq::current_prototypes(trained).vectors;
  const pcq::Matrix f1 = pcq::infer(trained, data.features, false).features;

  struct Block {
    const pcq::Matrix* points;
    const char* phase;
    bool prototypes;
  };
  const std::vector<Block> blocks = {{&p0, "prototype_init", true},
                                     {&p1, "prototype_trained", true},
                                     {&data.features, "features_init", false},
                                     {&f1, "features_trained", false}};
  std::size_t total = 0;
  for (const auto& b : blocks) total += b.points->rows();
  pcq::Matrix all(total, trained.dim);
  std::size_t row = 0;
  for (const auto& b : blocks)
    for (std::size_t i = 0; i < b.points->rows(); ++i, ++row)
      std::copy(b.points->row(i).begin(), b.points->row(i).end(), all.row(row).begin());
  const pcq::Projection proj = pcq::project_2d(all);

  std::vector<pcq::ProjectedPoint> pts;
  row = 0;
  for (const auto& b : blocks)
    for (std::size_t i = 0; i < b.points->rows(); ++i, ++row) {
      const int label = b.prototypes ? static_cast<int>(i) + 1 : (data.labels.empty() ? 0 : data.labels[i]);
      const std::string id = (b.prototypes ? "proto" : "sample") + std::to_string(i + 1);
      pts.push_back({id, proj.coords(row, 0), proj.coords(row, 1), label, b.phase});
    }
  fs::create_directories(c.out);
  pcq::write_text(fs::path(c.out) / "projection.csv", pcq::projection_csv(pts));
  if (svg) {
    std::vector<pcq::ProjectedPoint> before, after;
    for (const auto& p : pts)
      (p.phase.ends_with("init") ? before : after).push_back(p);
    pcq::write_text(fs::path(c.out) / "projection_before.svg", pcq::projection_svg(before));
    pcq::write_text(fs::path(c.out) / "projection_after.svg", pcq::projection_svg(after));
  }
  write_json(fs::path(c.out) / "run_manifest.json", manifest);
  std::printf("projected %zu points; prototype min distance %.4f -> %.4f\n", total, pcq::min_pairwise_distance(p0),
              pcq::min_pairwise_distance(p1));
  return 0;
}

int cmd_gradcheck(const Common& c, std::size_t problems) {
  const std::uint64_t seed = c.seed.value_or(0);
  const json manifest = make_manifest("gradcheck", json::object(), json::object(), c.out,
                                      {{"problems", problems}, {"seed", seed}});
  if (c.dry_run) {
    std::cout << manifest.dump(2) << "\n";
    return 0;
  }
  constexpr double tolerance = 1e-4;
  const auto results = pcq::run_gradient_suite(problems, seed);
  json out = json::array();
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%-6s max relative error %.3e over %zu problems\n", pcq::to_string(r.loss), r.max_rel_error,
                r.problems);
    out.push_back({{"loss", pcq::to_string(r.loss)}, {"max_rel_error", r.max_rel_error}, {"problems", r.problems}});
    ok = ok && r.max_rel_error < tolerance;
  }
  fs::create_directories(c.out);
  write_json(fs::path(c.out) / "gradcheck.json", {{"tolerance", tolerance}, {"results", out}, {"pass", ok}});
  write_json(fs::path(c.out) / "run_manifest.json", manifest);
  if (!ok) {
    std::fprintf(stderr, "gradient check failed: error above %.0e\n", tolerance);
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pcq: prototype-guided quantization toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic labeled embedding file");
  DataFlags gen_data;
  gen_data.attach(gen);
  Common gen_common;
  gen_common.attach(gen, true);

  auto* tr = app.add_subcommand("train", "Train a model and write a checkpoint and report");
  Common tr_common;
  tr_common.attach(tr, true);
  std::string tr_data, tr_test;
  tr->add_option("--data", tr_data, "Labeled training embeddings")->required()->check(CLI::ExistingFile);
  tr->add_option("--test-data", tr_test, "Optional labeled test embeddings")->check(CLI::ExistingFile);

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on labeled embeddings");
  Common ev_common;
  ev_common.attach(ev, true);
  std::string ev_ckpt, ev_data;
  bool ev_noise = false;
  ev->add_option("--checkpoint", ev_ckpt, "Run or checkpoint directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--data", ev_data, "Labeled embeddings")->required()->check(CLI::ExistingFile);
  ev->add_flag("--noise", ev_noise, "Keep Gumbel noise at evaluation");

  std::vector<double> taus = pcq::default_tau_grid();
  auto* sw = app.add_subcommand("sweep-temperature", "Temperature sweep");
  Common sw_common;
  sw_common.attach(sw, true);
  HarnessFlags sw_h;
  sw_h.attach(sw);
  sw->add_option("--taus", taus, "Temperature grid")->delimiter(',');

  struct Ablation {
    const char* name = "";
    const char* help = "";
    HarnessFn fn;
    CLI::App* app = nullptr;
    Common common;
    HarnessFlags flags;
  };
  std::vector<Ablation> ablations;
  const auto add_ablation = [&](const char* name, const char* help, HarnessFn fn) {
    Ablation a;
    a.name = name;
    a.help = help;
    a.fn = std::move(fn);
    ablations.push_back(std::move(a));
  };
  add_ablation("ablate-loss", "Loss component ablation", [](auto&... a) { return pcq::loss_ablation(a...); });
  add_ablation("ablate-strategy", "Prototype strategy comparison",
               [](auto&... a) { return pcq::strategy_compare(a...); });
  add_ablation("ablate-prompt", "Prompt design ablation", [](auto&... a) { return pcq::prompt_ablation(a...); });
  add_ablation("ablate-scope", "Trainable scope ablation", [](auto&... a) { return pcq::scope_ablation(a...); });
  for (auto& a : ablations) {
    a.app = app.add_subcommand(a.name, a.help);
    a.common.attach(a.app, true);
    a.flags.attach(a.app);
  }

  auto* fs_cmd = app.add_subcommand("fewshot", "Few-shot accuracy curve on a synthetic dataset");
  Common fs_common;
  fs_common.attach(fs_cmd, true);
  DataFlags fs_data;
  fs_data.spec = {10, 32, 200, 0.35, 0.6, 0};
  fs_data.attach(fs_cmd);
  std::vector<std::size_t> shot_grid = pcq::default_shot_grid();
  std::size_t fs_seeds = 10;
  std::uint64_t fs_first = 0;
  fs_cmd->add_option("--shot-grid", shot_grid, "Shots per class")->delimiter(',');
  fs_cmd->add_option("--seeds", fs_seeds, "Number of seeds")->check(CLI::PositiveNumber);
  fs_cmd->add_option("--first-seed", fs_first, "First seed");

  auto* pj = app.add_subcommand("project", "2-D PCA export of prototypes and features before and after training");
  Common pj_common;
  pj_common.attach(pj, true);
  std::string pj_ckpt, pj_data;
  bool pj_svg = false;
  pj->add_option("--checkpoint", pj_ckpt, "Run or checkpoint directory")->required()->check(CLI::ExistingDirectory);
  pj->add_option("--data", pj_data, "Embeddings to project")->required()->check(CLI::ExistingFile);
  pj->add_flag("--svg", pj_svg, "Also write SVG scatter plots");

  auto* gc = app.add_subcommand("gradcheck", "Analytic vs finite-difference gradients for every loss");
  Common gc_common;
  gc_common.attach(gc, false, "gradcheck_out");
  std::size_t gc_problems = 10;
  gc->add_option("--problems", gc_problems, "Random problem count")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*gen) return cmd_gen_data(gen_common, gen_data);
    if (*tr) return cmd_train(tr_common, tr_data, tr_test);
    if (*ev) return cmd_eval(ev_common, ev_ckpt, ev_data, ev_noise);
    if (*sw)
      return cmd_harness(
          "sweep-temperature", sw_common, sw_h,
          [&](const auto& cfg, const auto& data, const auto& seeds, const auto& opt) {
            return pcq::temperature_sweep(cfg, taus, data, seeds, opt);
          },
          {{"taus", taus}});
    for (auto& a : ablations)
      if (*a.app) return cmd_harness(a.name, a.common, a.flags, a.fn);
    if (*fs_cmd) return cmd_fewshot(fs_common, fs_data, shot_grid, fs_seeds, fs_first);
    if (*pj) return cmd_project(pj_common, pj_ckpt, pj_data, pj_svg);
    if (*gc) return cmd_gradcheck(gc_common, gc_problems);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n" << app.help();
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
