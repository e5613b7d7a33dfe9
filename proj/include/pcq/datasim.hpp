#pragma once

// Synthetic embeddings on the unit sphere, few-shot splits, the trainable
// adapter, and the PCQE embedding file format.
//
// PCQE layout (little-endian, no padding):
//   "PCQE" | u16 version (=1) | u32 rows | u32 cols | u8 has_labels
//   | rows*cols f32, row-major | rows u16 labels (1-based), if has_labels

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "pcq/diffcore.hpp"
#include "pcq/params.hpp"
#include "pcq/rng.hpp"
#include "pcq/tape.hpp"

namespace pcq {

struct DatasetSpec {
  std::size_t classes = 4;
  std::size_t dim = 16;
  std::size_t per_class = 50;
  double intra_spread = 0.05;     // radians, std of the angular noise
  double inter_separation = 1.0;  // radians, minimum angle between class means
  std::uint64_t seed = 0;
};

struct LabeledFeatures {
  Matrix features;          // N x d
  std::vector<int> labels;  // 1-based; empty when unlabeled

  std::size_t size() const { return features.rows(); }
  std::size_t dim() const { return features.cols(); }

  std::size_t classes() const {
    int k = 0;
    for (int y : labels) k = std::max(k, y);
    return static_cast<std::size_t>(k);
  }

  LabeledFeatures subset(std::span<const std::size_t> rows) const {
    LabeledFeatures out;
    out.features = Matrix(rows.size(), dim());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto src = features.row(rows[i]);
      std::copy(src.begin(), src.end(), out.features.row(i).begin());
      if (!labels.empty()) out.labels.push_back(labels[rows[i]]);
    }
    return out;
  }

  friend bool operator==(const LabeledFeatures&, const LabeledFeatures&) = default;
};

inline double angle_between(std::span<const double> a, std::span<const double> b) {
  return std::acos(std::clamp(dot(a, b) / (norm(a) * norm(b)), -1.0, 1.0));
}

inline double min_pairwise_angle(const Matrix& m) {
  double best = std::numbers::pi;
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = i + 1; j < m.rows(); ++j) best = std::min(best, angle_between(m.row(i), m.row(j)));
  return best;
}

inline constexpr std::size_t kMaxRepulsionAttempts = 10000;

// K unit vectors with pairwise angle >= separation. Starts from a seeded
// random draw and pushes violating pairs apart along the sphere.
inline Matrix place_class_means(std::size_t classes, std::size_t dim, double separation, Stream& rng) {
  constexpr double pi = std::numbers::pi;
  if (separation > pi) throw Error("infeasible separation");
  if (dim == 2 && static_cast<double>(classes) * separation > 2.0 * pi + 1e-12)
    throw Error("dimension too small for class count at this separation");
  if (separation > pi / 2 + 1e-12 && classes > dim + 1)
    throw Error("dimension too small for class count at this separation");
  if (separation > pi / 2 - 1e-12 && classes > 2 * dim)
    throw Error("dimension too small for class count at this separation");

  Matrix means = l2_normalize_rows(rng.normal_matrix(classes, dim));
  constexpr double step = 0.1;
  for (std::size_t attempt = 0; attempt < kMaxRepulsionAttempts; ++attempt) {
    if (classes < 2 || min_pairwise_angle(means) >= separation) return means;
    Matrix force(classes, dim);
    for (std::size_t i = 0; i < classes; ++i)
      for (std::size_t j = 0; j < classes; ++j) {
        if (i == j || angle_between(means.row(i), means.row(j)) >= separation) continue;
        for (std::size_t c = 0; c < dim; ++c) force(i, c) += means(i, c) - means(j, c);
      }
    for (std::size_t i = 0; i < classes; ++i)
      for (std::size_t c = 0; c < dim; ++c) means(i, c) += step * force(i, c);
    means = l2_normalize_rows(means);
  }
  if (min_pairwise_angle(means) >= separation) return means;
  throw Error("infeasible separation");
}

// Rotates `mean` by `angle` toward a random tangent direction.
inline void perturb_on_sphere(std::span<const double> mean, double angle, Stream& rng,
                              std::span<double> out) {
  std::vector<double> t(mean.size());
  double tn = 0.0;
  do {
    for (double& v : t) v = rng.normal();
    const double along = dot(t, mean);
    for (std::size_t c = 0; c < t.size(); ++c) t[c] -= along * mean[c];
    tn = norm(t);
  } while (tn < 1e-9);
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (std::size_t c = 0; c < t.size(); ++c) out[c] = ca * mean[c] + sa * t[c] / tn;
  const double n = norm(out);
  for (double& v : out) v /= n;
}

// Class-major rows: n_per_class samples of class 1, then class 2, ...
inline LabeledFeatures generate_dataset(const DatasetSpec& spec) {
  if (spec.dim < 2) throw Error("dataset dimension must be >= 2");
  if (spec.classes < 1 || spec.per_class < 1) throw Error("dataset needs at least one sample per class");
  if (spec.intra_spread < 0.0 || spec.inter_separation < 0.0) throw Error("negative spread or separation");
  Stream mean_rng(derive_seed(spec.seed, "data.means"));
  const Matrix means = place_class_means(spec.classes, spec.dim, spec.inter_separation, mean_rng);
  Stream sample_rng(derive_seed(spec.seed, "data.samples"));
  LabeledFeatures out;
  out.features = Matrix(spec.classes * spec.per_class, spec.dim);
  out.labels.reserve(out.features.rows());
  std::size_t row = 0;
  for (std::size_t c = 0; c < spec.classes; ++c)
    for (std::size_t s = 0; s < spec.per_class; ++s, ++row) {
      const double angle = spec.intra_spread * sample_rng.normal();
      perturb_on_sphere(means.row(c), angle, sample_rng, out.features.row(row));
      out.labels.push_back(static_cast<int>(c + 1));
    }
  return out;
}

struct Split {
  LabeledFeatures train;
  LabeledFeatures test;
  std::vector<std::size_t> train_rows;
  std::vector<std::size_t> test_rows;
};

// Exactly `shots` seeded samples per class go to train, the rest to test.
inline Split few_shot_split(const LabeledFeatures& data, std::size_t shots, std::uint64_t seed) {
  const std::size_t k = data.classes();
  std::vector<std::vector<std::size_t>> by_class(k);
  for (std::size_t i = 0; i < data.size(); ++i)
    by_class[static_cast<std::size_t>(data.labels[i] - 1)].push_back(i);
  Stream rng(derive_seed(seed, "split"));
  std::vector<bool> in_train(data.size(), false);
  Split s;
  for (auto& members : by_class) {
    if (members.size() <= shots) throw Error("insufficient samples for few-shot split");
    rng.shuffle(members);
    for (std::size_t j = 0; j < shots; ++j) {
      s.train_rows.push_back(members[j]);
      in_train[members[j]] = true;
    }
  }
  for (std::size_t i = 0; i < data.size(); ++i)
    if (!in_train[i]) s.test_rows.push_back(i);
  s.train = data.subset(s.train_rows);
  s.test = data.subset(s.test_rows);
  return s;
}

// Trainable affine map x W + b followed by row renormalization. Models
// partial fine-tuning of the feature encoder.
struct Adapter {
  Matrix weight;  // d x d
  Matrix bias;    // 1 x d
  bool enabled = true;

  static Adapter identity(std::size_t dim, bool enabled = true) {
    return {Matrix::identity(dim), Matrix(1, dim), enabled};
  }
};

inline const std::vector<std::string>& adapter_param_names() {
  static const std::vector<std::string> names = {"adapter.b", "adapter.w"};
  return names;
}

inline ad::Var apply_adapter(ad::Var features, ad::Var weight, ad::Var bias) {
  if (weight.rows() != features.cols() || weight.cols() != features.cols())
    throw Error("dimension mismatch in apply_adapter");
  return ad::l2_normalize_rows(ad::add_row(ad::matmul(features, weight), bias));
}

inline Matrix apply_adapter(const LabeledFeatures& data, const Adapter& adapter) {
  if (!adapter.enabled) return data.features;
  if (adapter.weight.rows() != data.dim()) throw Error("dimension mismatch in apply_adapter");
  ad::Tape t;
  return apply_adapter(t.constant(data.features), t.constant(adapter.weight), t.constant(adapter.bias))
      .value();
}

// ---------------------------------------------------------------------------
// PCQE file format

inline constexpr std::array<char, 4> kEmbeddingMagic = {'P', 'C', 'Q', 'E'};
inline constexpr std::uint16_t kEmbeddingVersion = 1;
inline constexpr std::size_t kEmbeddingHeaderBytes = 4 + 2 + 4 + 4 + 1;

class FormatError : public Error {
public:
  enum class Code { bad_magic, version_mismatch, truncated, label_out_of_range, io };

  FormatError(Code code, const std::string& what) : Error(what), code_(code) {}
  Code code() const noexcept { return code_; }

private:
  Code code_;
};

namespace detail {

template <class T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <class T>
T get_le(std::span<const std::uint8_t> in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw FormatError(FormatError::Code::truncated, "truncated payload");
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(in[pos + i]) << (8 * i));
  pos += sizeof(T);
  return v;
}

}  // namespace detail

// Features are stored as f32, so the round trip is exact for values that are
// representable in single precision.
inline std::vector<std::uint8_t> encode_embeddings(const LabeledFeatures& data) {
  const bool has_labels = !data.labels.empty();
  if (has_labels && data.labels.size() != data.size())
    throw Error("label count does not match feature rows");
  if (data.size() > UINT32_MAX || data.dim() > UINT32_MAX) throw Error("matrix too large for PCQE");
  std::vector<std::uint8_t> out;
  out.reserve(kEmbeddingHeaderBytes + data.features.size() * 4 + data.labels.size() * 2);
  out.insert(out.end(), kEmbeddingMagic.begin(), kEmbeddingMagic.end());
  detail::put_le<std::uint16_t>(out, kEmbeddingVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(data.size()));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(data.dim()));
  out.push_back(has_labels ? 1 : 0);
  for (double v : data.features.data())
    detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  for (int y : data.labels) {
    if (y < 1 || y > UINT16_MAX) throw FormatError(FormatError::Code::label_out_of_range, "label out of range");
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(y));
  }
  return out;
}

inline LabeledFeatures decode_embeddings(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || !std::equal(kEmbeddingMagic.begin(), kEmbeddingMagic.end(), bytes.begin()))
    throw FormatError(FormatError::Code::bad_magic, "bad magic");
  std::size_t pos = 4;
  const auto version = detail::get_le<std::uint16_t>(bytes, pos);
  if (version != kEmbeddingVersion)
    throw FormatError(FormatError::Code::version_mismatch,
                      "version mismatch: file has " + std::to_string(version));
  const auto rows = detail::get_le<std::uint32_t>(bytes, pos);
  const auto cols = detail::get_le<std::uint32_t>(bytes, pos);
  const auto has_labels = detail::get_le<std::uint8_t>(bytes, pos);
  const std::uint64_t need = std::uint64_t{rows} * cols * 4 + (has_labels ? std::uint64_t{rows} * 2 : 0);
  if (bytes.size() - pos < need) throw FormatError(FormatError::Code::truncated, "truncated payload");
  LabeledFeatures out;
  out.features = Matrix(rows, cols);
  for (double& v : out.features.data())
    v = static_cast<double>(std::bit_cast<float>(detail::get_le<std::uint32_t>(bytes, pos)));
  if (has_labels) {
    out.labels.resize(rows);
    for (int& y : out.labels) {
      y = detail::get_le<std::uint16_t>(bytes, pos);
      if (y < 1) throw FormatError(FormatError::Code::label_out_of_range, "label out of range");
    }
  }
  return out;
}

// Writes to a sibling temporary file, then renames over the target.
inline void write_bytes_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError(FormatError::Code::io, "cannot open " + tmp.string() + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw FormatError(FormatError::Code::io, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError(FormatError::Code::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_embeddings(const std::filesystem::path& path, const LabeledFeatures& data) {
  write_bytes_atomic(path, encode_embeddings(data));
}

inline LabeledFeatures read_embeddings(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  return decode_embeddings(bytes);
}

}  // namespace pcq
