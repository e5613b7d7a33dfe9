#pragma once

// Nearest-prototype classification, prototype assignment accuracy (PAA) and
// the per-run metrics report.

#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pcq/diffcore.hpp"
#include "pcq/quantizer.hpp"

namespace pcq {

// label_i = argmax_k cos(f_i, h_k) + 1; ties go to the lower class index.
inline std::vector<int> classify(const Matrix& fused, const Matrix& prototypes) {
  if (fused.cols() != prototypes.cols()) throw Error("dimension mismatch in classify");
  for (std::size_t i = 0; i < fused.rows(); ++i)
    if (norm(fused.row(i)) < kDegenerateNorm) throw Error("degenerate feature");
  const Matrix cos = cosine_similarity_matrix(fused, prototypes);
  std::vector<int> out(fused.rows());
  for (std::size_t i = 0; i < fused.rows(); ++i) out[i] = static_cast<int>(argmax(cos.row(i))) + 1;
  return out;
}

// Among correctly classified samples, the fraction whose hard-assigned
// prototype is the true class. Empty correct set gives nullopt.
inline std::optional<double> paa(const Matrix& hard, std::span<const int> predictions,
                                 std::span<const int> labels) {
  if (hard.rows() != labels.size() || predictions.size() != labels.size())
    throw Error("paa: length mismatch");
  std::size_t correct = 0;
  std::size_t matched = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (predictions[i] != labels[i]) continue;
    ++correct;
    if (static_cast<int>(argmax(hard.row(i))) + 1 == labels[i]) ++matched;
  }
  if (correct == 0) return std::nullopt;
  return static_cast<double>(matched) / static_cast<double>(correct);
}

struct MetricsReport {
  std::size_t count = 0;
  double accuracy = 0.0;
  std::optional<double> paa;
  std::vector<double> per_class_accuracy;             // NaN for classes absent from the labels
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
};

inline MetricsReport compute_metrics(std::span<const int> predictions, std::span<const int> labels,
                                     const Matrix& hard, std::size_t classes) {
  if (predictions.size() != labels.size()) throw Error("metrics: length mismatch");
  MetricsReport r;
  r.count = labels.size();
  r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 1 || static_cast<std::size_t>(labels[i]) > classes || predictions[i] < 1 ||
        static_cast<std::size_t>(predictions[i]) > classes)
      throw Error("label out of range");
    ++r.confusion[static_cast<std::size_t>(labels[i] - 1)][static_cast<std::size_t>(predictions[i] - 1)];
  }
  std::size_t trace = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    trace += r.confusion[c][c];
    std::size_t row_total = 0;
    for (std::size_t v : r.confusion[c]) row_total += v;
    r.per_class_accuracy.push_back(row_total == 0 ? std::numeric_limits<double>::quiet_NaN()
                                                  : static_cast<double>(r.confusion[c][c]) /
                                                        static_cast<double>(row_total));
  }
  r.accuracy = r.count == 0 ? 0.0 : static_cast<double>(trace) / static_cast<double>(r.count);
  r.paa = paa(hard, predictions, labels);
  return r;
}

}  // namespace pcq
