#include <algorithm>
#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "pcq/evalkit.hpp"

using namespace pcq;

namespace {

// Cyclic Jacobi eigenvalue iteration for a small symmetric matrix.
std::vector<double> jacobi_eigenvalues(std::vector<std::vector<double>> a) {
  const std::size_t n = a.size();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a[i][i];
  std::sort(ev.begin(), ev.end());
  return ev;
}

LabeledFeatures harness_data() { return generate_dataset({3, 6, 12, 0.3, 0.8, 1}); }

TrainConfig quick_config() {
  TrainConfig c;
  c.epochs = 3;
  c.batch_size = 6;
  c.prompt_count = 2;
  return c;
}

HarnessOptions quick_options(std::size_t workers = 1) { return {4, workers}; }

}  // namespace

TEST(Classify, Examples) {
  const Matrix h = Matrix::identity(3);
  EXPECT_EQ(classify(Matrix{{0, 0, 2}}, h), std::vector<int>{3});
  EXPECT_EQ(classify(Matrix{{1, 1, 0}}, h), std::vector<int>{1});
  EXPECT_THROW(classify(Matrix{{0, 0, 0}}, h), Error);
}

TEST(Classify, MatchesScalarArgmax) {
  Stream rng(1);
  const Matrix f = rng.normal_matrix(200, 5);
  const Matrix h = rng.normal_matrix(4, 5);
  const std::vector<int> got = classify(f, h);
  for (std::size_t i = 0; i < 200; ++i) {
    int best = 0;
    double best_c = -2.0;
    for (std::size_t k = 0; k < 4; ++k) {
      double ab = 0, aa = 0, bb = 0;
      for (std::size_t c = 0; c < 5; ++c) {
        ab += f(i, c) * h(k, c);
        aa += f(i, c) * f(i, c);
        bb += h(k, c) * h(k, c);
      }
      const double cs = ab / std::sqrt(aa * bb);
      if (cs > best_c) {
        best_c = cs;
        best = static_cast<int>(k) + 1;
      }
    }
    EXPECT_EQ(got[i], best);
  }
}

TEST(Paa, ConstructedCases) {
  const Matrix hard{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 0, 0}};
  const std::vector<int> labels = {1, 2, 3, 2};
  EXPECT_EQ(paa(hard, std::vector<int>{1, 2, 3, 1}, labels), 1.0);
  const Matrix hard2{{1, 0, 0}, {0, 1, 0}, {1, 0, 0}, {1, 0, 0}};
  EXPECT_EQ(paa(hard2, std::vector<int>{1, 2, 3, 1}, labels), 2.0 / 3.0);
  EXPECT_FALSE(paa(hard, std::vector<int>{2, 3, 1, 1}, labels).has_value());
  EXPECT_THROW(paa(hard, std::vector<int>{1}, labels), Error);
}

TEST(Metrics, MatchesScalarRecount) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Stream rng(seed);
    const std::size_t n = 1 + rng.below(30), k = 2 + rng.below(4);
    std::vector<int> labels(n), preds(n);
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = 1 + static_cast<int>(rng.below(k));
      preds[i] = rng.uniform() < 0.6 ? labels[i] : 1 + static_cast<int>(rng.below(k));
    }
    const Matrix hard = hard_assign(rng.normal_matrix(n, k));
    const MetricsReport r = compute_metrics(preds, labels, hard, k);
    std::size_t correct = 0, matched = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (preds[i] == labels[i]) {
        ++correct;
        if (static_cast<int>(argmax(hard.row(i))) + 1 == labels[i]) ++matched;
      }
    EXPECT_EQ(r.accuracy, static_cast<double>(correct) / static_cast<double>(n));
    if (correct == 0) {
      EXPECT_FALSE(r.paa.has_value());
    } else {
      EXPECT_EQ(*r.paa, static_cast<double>(matched) / static_cast<double>(correct));
    }
    std::size_t trace = 0;
    for (std::size_t c = 0; c < k; ++c) {
      trace += r.confusion[c][c];
      if (!std::isnan(r.per_class_accuracy[c])) {
        EXPECT_GE(r.per_class_accuracy[c], 0.0);
        EXPECT_LE(r.per_class_accuracy[c], 1.0);
      }
    }
    EXPECT_EQ(r.accuracy, static_cast<double>(trace) / static_cast<double>(n));
  }
}

TEST(Metrics, Errors) {
  const std::vector<int> labels = {1, 5};
  EXPECT_THROW(compute_metrics(std::vector<int>{1, 1}, labels, Matrix(2, 2), 2), Error);
}

TEST(ParallelMap, OrderIndependentOfWorkers) {
  const std::function<double(std::size_t)> fn = [](std::size_t i) { return std::sqrt(static_cast<double>(i)); };
  EXPECT_EQ(parallel_map<double>(50, 1, fn), parallel_map<double>(50, 4, fn));
  EXPECT_TRUE(parallel_map<double>(0, 4, fn).empty());
}

TEST(Harness, TemperatureSweepShapeAndDeterminism) {
  const LabeledFeatures data = harness_data();
  const std::vector<std::uint64_t> seeds = {0, 1};
  const SweepTable a = temperature_sweep(quick_config(), default_tau_grid(), data, seeds, quick_options(1));
  const SweepTable b = temperature_sweep(quick_config(), default_tau_grid(), data, seeds, quick_options(3));
  EXPECT_EQ(a.runs.size(), 12u);
  EXPECT_EQ(a.summary.size(), 6u);
  EXPECT_EQ(runs_csv(a), runs_csv(b));
  EXPECT_EQ(table_to_json(a).dump(), table_to_json(b).dump());
  EXPECT_EQ(a.summary[3].variant, "tau=1");
  EXPECT_EQ(a.summary[3].reference, 71.03);
  for (const auto& r : a.runs) EXPECT_TRUE(r.ok) << r.error;
  const SweepTable single = temperature_sweep(quick_config(), {1.0}, data, {0}, quick_options());
  EXPECT_EQ(single.runs.size(), 1u);
  EXPECT_THROW(temperature_sweep(quick_config(), {}, data, seeds), Error);
  EXPECT_THROW(temperature_sweep(quick_config(), {0.0}, data, seeds), Error);
}

TEST(Harness, TemperatureEntropyRisesWithTau) {
  const SweepTable t = temperature_sweep(quick_config(), default_tau_grid(), harness_data(), {0, 1, 2}, quick_options());
  for (std::size_t i = 1; i < t.summary.size(); ++i)
    EXPECT_GE(t.summary[i].mean_entropy, t.summary[i - 1].mean_entropy) << t.summary[i].variant;
}

TEST(Harness, LossAblationRowsAndAlignOnlyEquivalence) {
  const LabeledFeatures data = harness_data();
  const SweepTable t = loss_ablation(quick_config(), data, {0, 1}, quick_options());
  ASSERT_EQ(t.summary.size(), 4u);
  EXPECT_EQ(t.summary[0].variant, "A");
  EXPECT_EQ(t.summary[3].variant, "A+C+S");
  EXPECT_EQ(t.runs.size(), 8u);
  TrainConfig plain = quick_config();
  plain.align_only = true;
  const SweepTable p = run_harness("loss", {{"A", plain, std::nullopt}}, data, {0, 1}, quick_options());
  for (std::size_t s = 0; s < 2; ++s) {
    EXPECT_EQ(p.runs[s].accuracy, t.runs[s].accuracy);
    EXPECT_EQ(p.runs[s].accuracy_noisy, t.runs[s].accuracy_noisy);
    EXPECT_EQ(p.runs[s].paa, t.runs[s].paa);
    EXPECT_EQ(p.runs[s].entropy, t.runs[s].entropy);
    EXPECT_EQ(p.runs[s].final_loss.total, t.runs[s].final_loss.total);
  }
}

TEST(Harness, PromptStrategyScopeRows) {
  const LabeledFeatures data = harness_data();
  const SweepTable pr = prompt_ablation(quick_config(), data, {0}, quick_options());
  ASSERT_EQ(pr.summary.size(), 3u);
  EXPECT_EQ(pr.summary[0].variant, "class_only");
  const SweepTable st = strategy_compare(quick_config(), data, {0, 1}, quick_options());
  ASSERT_EQ(st.summary.size(), 3u);
  EXPECT_EQ(st.runs.size(), 6u);
  for (const auto& s : st.summary) EXPECT_TRUE(s.mean_paa.has_value()) << s.variant;
  const SweepTable sc = scope_ablation(quick_config(), data, {0}, quick_options());
  EXPECT_EQ(sc.summary.size(), 4u);
}

TEST(Harness, CentroidOnNoiselessDataIsPerfect) {
  const LabeledFeatures data = generate_dataset({4, 6, 10, 0.0, 0.8, 3});
  TrainConfig c = quick_config();
  c.strategy = PrototypeStrategy::centroid;
  const SweepTable t = run_harness("strategy", {{"centroid", c, std::nullopt}}, data, {0, 1}, quick_options());
  for (const auto& r : t.runs) EXPECT_EQ(r.accuracy, 1.0);
}

TEST(Harness, FewshotCurveShape) {
  const DatasetSpec spec{3, 6, 20, 0.3, 0.8, 0};
  const SweepTable one = fewshot_curve(quick_config(), spec, {1}, {0});
  EXPECT_EQ(one.summary.size(), 1u);
  EXPECT_EQ(one.summary[0].variant, "shots=1");
  const SweepTable a = fewshot_curve(quick_config(), spec, {1, 2, 4}, {0, 1}, {0, 1});
  const SweepTable b = fewshot_curve(quick_config(), spec, {1, 2, 4}, {0, 1}, {0, 2});
  EXPECT_EQ(summary_csv(a), summary_csv(b));
  EXPECT_EQ(a.runs[2].shots, 2u);
}

TEST(Harness, FailedRunIsRecordedNotFatal) {
  TrainConfig c = quick_config();
  c.divergence_factor = 0.5;
  const SweepTable t = run_harness("x", {{"bad", c, std::nullopt}}, harness_data(), {0}, quick_options());
  ASSERT_EQ(t.runs.size(), 1u);
  EXPECT_FALSE(t.runs[0].ok);
  EXPECT_FALSE(t.runs[0].error.empty());
  EXPECT_EQ(t.summary[0].runs, 0u);
  EXPECT_NE(runs_csv(t).find("failed"), std::string::npos);
}

TEST(Reports, CsvQuoting) {
  EXPECT_EQ(csv_field("plain"), "plain");
  EXPECT_EQ(csv_field("a,b"), "\"a,b\"");
  EXPECT_EQ(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
  EXPECT_EQ(csv_field("two\nlines"), "\"two\nlines\"");
  EXPECT_EQ(format_real(0.1), "0.10000000000000001");
}

TEST(Reports, WriteTableFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "pcq_evalkit_tables";
  std::filesystem::remove_all(dir);
  const SweepTable t = loss_ablation(quick_config(), harness_data(), {0}, quick_options());
  write_table(dir, t);
  EXPECT_TRUE(std::filesystem::exists(dir / "loss_runs.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "loss_summary.csv"));
  std::ifstream f(dir / "loss.json");
  const auto j = nlohmann::json::parse(f);
  EXPECT_EQ(j.at("summary").size(), 4u);
  std::filesystem::remove_all(dir);
}

TEST(Projection, AxisAlignedIdentity) {
  const Matrix pts{{2, 0}, {-2, 0}, {0, 1}, {0, -1}};
  const Projection p = project_2d(pts);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(std::abs(p.coords(i, 0)), std::abs(pts(i, 0)), 1e-12);
    EXPECT_NEAR(std::abs(p.coords(i, 1)), std::abs(pts(i, 1)), 1e-12);
  }
  EXPECT_NEAR(p.coords(0, 0), 2.0, 1e-12);
  EXPECT_NEAR(p.coords(2, 1), 1.0, 1e-12);
}

TEST(Projection, CollinearHasFlatSecondComponent) {
  Matrix pts(6, 3);
  for (std::size_t i = 0; i < 6; ++i) {
    const double t = static_cast<double>(i) - 2.0;
    pts(i, 0) = 1 + t;
    pts(i, 1) = 2 - 2 * t;
    pts(i, 2) = 0.5 * t;
  }
  const Projection p = project_2d(pts);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_LT(std::abs(p.coords(i, 1)), 1e-9);
}

TEST(Projection, ReconstructionMatchesJacobiOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Stream rng(seed);
    const Matrix pts = rng.normal_matrix(20, 5);
    const Projection p = project_2d(pts);
    std::vector<double> mean(5, 0.0);
    for (std::size_t i = 0; i < 20; ++i)
      for (std::size_t j = 0; j < 5; ++j) mean[j] += pts(i, j) / 20.0;
    std::vector<std::vector<double>> cov(5, std::vector<double>(5, 0.0));
    for (std::size_t i = 0; i < 20; ++i)
      for (std::size_t a = 0; a < 5; ++a)
        for (std::size_t b = 0; b < 5; ++b) cov[a][b] += (pts(i, a) - mean[a]) * (pts(i, b) - mean[b]) / 19.0;
    const std::vector<double> ev = jacobi_eigenvalues(cov);
    const double oracle = 19.0 * (ev[0] + ev[1] + ev[2]);
    double err = 0.0;
    for (std::size_t i = 0; i < 20; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        const double rec = mean[j] + p.coords(i, 0) * p.components(0, j) + p.coords(i, 1) * p.components(1, j);
        err += (pts(i, j) - rec) * (pts(i, j) - rec);
      }
    EXPECT_NEAR(err, oracle, 1e-9);
    for (std::size_t c = 0; c < 2; ++c) {
      std::size_t big = 0;
      for (std::size_t j = 1; j < 5; ++j)
        if (std::abs(p.components(c, j)) > std::abs(p.components(c, big))) big = j;
      EXPECT_GT(p.components(c, big), 0.0);
    }
  }
}

TEST(Projection, Errors) {
  EXPECT_THROW(project_2d(Matrix{{1, 2}}), Error);
  try {
    project_2d(Matrix{{1, 2}, {1, 2}, {1, 2}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "rank-0 input");
  }
}

TEST(Projection, CsvAndSvg) {
  const std::vector<ProjectedPoint> pts = {{"p1", 0.5, -1.0, 1, "prototype_init"}, {"s,1", 1.0, 2.0, 2, "features"}};
  const std::string csv = projection_csv(pts);
  EXPECT_EQ(csv.substr(0, 19), "id,x,y,label,phase\r");
  EXPECT_NE(csv.find("\"s,1\""), std::string::npos);
  const std::string svg = projection_svg(pts);
  EXPECT_NE(svg.find("<rect"), std::string::npos);
  EXPECT_NE(svg.find("<circle"), std::string::npos);
}
