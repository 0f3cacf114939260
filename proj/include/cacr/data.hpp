#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "cacr/errors.hpp"
#include "cacr/matrix.hpp"
#include "cacr/rng.hpp"

namespace cacr {

// Shortest decimal string that round-trips the exact double.
inline std::string to_decimal_string(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw IoError("parse_double: bad number '" + std::string(s) + "'");
  return v;
}

// ---------------------------------------------------------------------------
// Synthetic labeled data
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  std::size_t n_classes = 4;
  std::size_t dim = 2;
  std::size_t samples_per_class = 500;
  Matrix class_means;  // n_classes x dim
  double within_class_std = 0.25;

  // Means evenly spaced on a circle in the first two coordinates.
  static Matrix circle_means(std::size_t n_classes, std::size_t dim, double radius) {
    if (dim < 2) throw InvalidArgument("circle_means: dim must be >= 2");
    Matrix m(n_classes, dim);
    for (std::size_t c = 0; c < n_classes; ++c) {
      const double ang = 2.0 * std::numbers::pi * static_cast<double>(c) /
                         static_cast<double>(n_classes);
      m(c, 0) = radius * std::cos(ang);
      m(c, 1) = radius * std::sin(ang);
    }
    return m;
  }

  void validate() const {
    if (n_classes == 0 || dim == 0 || samples_per_class == 0)
      throw InvalidArgument("SyntheticSpec: zero-sized field");
    if (class_means.rows() != n_classes || class_means.cols() != dim)
      throw DimMismatch("SyntheticSpec: class_means shape mismatch");
    if (within_class_std < 0.0) throw InvalidArgument("SyntheticSpec: negative std");
    // toy separability guarantee
    for (std::size_t a = 0; a < n_classes; ++a)
      for (std::size_t b = a + 1; b < n_classes; ++b)
        if (std::sqrt(sq_dist(class_means.row(a), class_means.row(b))) <=
            4.0 * within_class_std)
          throw InvalidArgument("SyntheticSpec: class means closer than 4x within-class std");
  }
};

struct AugmentationSpec {
  double noise_std = 0.0;
  double rotation_max_angle = 0.0;  // radians, applied in a random coordinate 2-plane
  double scale_jitter = 0.0;        // multiplicative, log-uniform

  void validate() const {
    if (noise_std < 0.0 || scale_jitter < 0.0 || rotation_max_angle < 0.0 ||
        rotation_max_angle > std::numbers::pi)
      throw InvalidArgument("AugmentationSpec: fields must be nonnegative, angle <= pi");
  }
};

enum class ImbalanceKind { kBalanced, kLinearDecay, kExponentialDecay };

struct ImbalanceRule {
  ImbalanceKind kind = ImbalanceKind::kBalanced;
  double rho = 0.1;  // exponential decay floor

  void validate() const {
    if (!(rho > 0.0 && rho <= 1.0)) throw InvalidArgument("ImbalanceRule: rho must be in (0,1]");
  }

  // Kept fraction for 1-based class index l of C.
  double keep_fraction(std::size_t l, std::size_t c) const {
    switch (kind) {
      case ImbalanceKind::kBalanced:
        return 1.0;
      case ImbalanceKind::kLinearDecay:
        return static_cast<double>(c - l + 1) / static_cast<double>(c);
      case ImbalanceKind::kExponentialDecay: {
        const double expo = c > 1 ? static_cast<double>(l - 1) / static_cast<double>(c - 1) : 0.0;
        return std::pow(rho, expo);
      }
    }
    return 1.0;
  }
};

struct LabeledDataset {
  Matrix x;                 // N x d_in
  std::vector<int> labels;  // values in [0, n_classes)
  std::size_t n_classes = 0;

  std::size_t size() const { return x.rows(); }
  std::size_t dim() const { return x.cols(); }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(n_classes, 0);
    for (int l : labels) ++counts[static_cast<std::size_t>(l)];
    return counts;
  }
};

// Gaussian blobs around the class means, class-major row order.
inline LabeledDataset generate(const SyntheticSpec& spec, Rng& rng) {
  spec.validate();
  LabeledDataset ds;
  ds.n_classes = spec.n_classes;
  ds.x = Matrix(spec.n_classes * spec.samples_per_class, spec.dim);
  ds.labels.resize(ds.x.rows());
  std::size_t row = 0;
  for (std::size_t c = 0; c < spec.n_classes; ++c)
    for (std::size_t s = 0; s < spec.samples_per_class; ++s, ++row) {
      for (std::size_t j = 0; j < spec.dim; ++j)
        ds.x(row, j) = spec.class_means(c, j) + spec.within_class_std * rng.normal();
      ds.labels[row] = static_cast<int>(c);
    }
  return ds;
}

// Stochastic transformation T(x, eps): random 2-plane rotation, log-uniform
// scale, additive Gaussian noise. A zero spec is the bit-exact identity.
inline std::vector<double> augment(std::span<const double> x, const AugmentationSpec& aug,
                                   Rng& rng) {
  aug.validate();
  std::vector<double> out(x.begin(), x.end());
  const std::size_t d = out.size();
  if (aug.rotation_max_angle > 0.0 && d >= 2) {
    const std::size_t a = static_cast<std::size_t>(rng.below(d));
    std::size_t b = static_cast<std::size_t>(rng.below(d - 1));
    if (b >= a) ++b;
    const double theta = rng.uniform(-aug.rotation_max_angle, aug.rotation_max_angle);
    const double c = std::cos(theta), s = std::sin(theta);
    const double xa = out[a], xb = out[b];
    out[a] = c * xa - s * xb;
    out[b] = s * xa + c * xb;
  }
  if (aug.scale_jitter > 0.0) {
    const double scale = std::exp(rng.uniform(-1.0, 1.0) * aug.scale_jitter);
    for (double& v : out) v *= scale;
  }
  if (aug.noise_std > 0.0)
    for (double& v : out) v += aug.noise_std * rng.normal();
  return out;
}

// Raw (input-space) contrastive batch: one augmented query per base sample and
// K independent augmentations of the same base as its positives. Negatives are
// implicit (the other queries), so no base sample ever contributes a positive
// to another query.
struct RawContrastiveBatch {
  Matrix queries;    // M x d_in
  Matrix positives;  // (M*K) x d_in
  std::size_t k_per_query = 1;
  std::vector<std::size_t> base_indices;
};

inline RawContrastiveBatch batch_from_indices(const LabeledDataset& ds,
                                              const AugmentationSpec& aug,
                                              std::span<const std::size_t> indices, std::size_t k,
                                              Rng& rng) {
  if (k == 0) throw InvalidArgument("batch_from_indices: K must be >= 1");
  RawContrastiveBatch b;
  b.k_per_query = k;
  b.base_indices.assign(indices.begin(), indices.end());
  b.queries = Matrix(indices.size(), ds.dim());
  b.positives = Matrix(indices.size() * k, ds.dim());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    b.queries.set_row(i, augment(ds.x.row(indices[i]), aug, rng));
    for (std::size_t kk = 0; kk < k; ++kk)
      b.positives.set_row(i * k + kk, augment(ds.x.row(indices[i]), aug, rng));
  }
  return b;
}

inline RawContrastiveBatch make_contrastive_batch(const LabeledDataset& ds,
                                                  const AugmentationSpec& aug, std::size_t m,
                                                  std::size_t k, Rng& rng) {
  if (ds.size() < m) throw DatasetTooSmall("make_contrastive_batch: dataset smaller than M");
  // M distinct base samples, drawn without replacement
  std::vector<std::size_t> idx(ds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(idx.size() - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(m);
  return batch_from_indices(ds, aug, idx, k, rng);
}

// Long-tail subsampling: class l of C keeps round(q_l * count) samples
// (at least one), q_l per the rule. Kept rows preserve dataset order.
inline LabeledDataset subsample_imbalanced(const LabeledDataset& ds, const ImbalanceRule& rule,
                                           Rng& rng) {
  rule.validate();
  if (rule.kind == ImbalanceKind::kBalanced) return ds;

  std::vector<std::vector<std::size_t>> by_class(ds.n_classes);
  for (std::size_t i = 0; i < ds.size(); ++i)
    by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);

  std::vector<std::size_t> kept;
  for (std::size_t c = 0; c < ds.n_classes; ++c) {
    const double q = rule.keep_fraction(c + 1, ds.n_classes);
    const std::size_t target = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(q * static_cast<double>(by_class[c].size()))));
    auto& pool = by_class[c];
    rng.shuffle(pool);
    pool.resize(std::min(target, pool.size()));
    std::sort(pool.begin(), pool.end());
    kept.insert(kept.end(), pool.begin(), pool.end());
  }
  std::sort(kept.begin(), kept.end());

  LabeledDataset out;
  out.n_classes = ds.n_classes;
  out.x = Matrix(kept.size(), ds.dim());
  out.labels.resize(kept.size());
  for (std::size_t i = 0; i < kept.size(); ++i) {
    out.x.set_row(i, ds.x.row(kept[i]));
    out.labels[i] = ds.labels[kept[i]];
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV import/export: header `x0,...,x{d-1},label`, full-precision values.
// ---------------------------------------------------------------------------

inline void write_dataset_csv(const Matrix& x, const std::vector<int>& labels,
                              const std::string& path, const std::string& column_prefix = "x",
                              const std::string& header_comment = "") {
  if (x.rows() != labels.size()) throw LabelMismatch("write_dataset_csv: row/label count mismatch");
  std::ofstream out(path);
  if (!out) throw IoError("write_dataset_csv: cannot open " + path);
  if (!header_comment.empty()) out << "# " << header_comment << '\n';
  for (std::size_t j = 0; j < x.cols(); ++j) out << column_prefix << j << ',';
  out << "label\n";
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) out << to_decimal_string(x(i, j)) << ',';
    out << labels[i] << '\n';
  }
  if (!out) throw IoError("write_dataset_csv: write failed for " + path);
}

inline void write_dataset_csv(const LabeledDataset& ds, const std::string& path) {
  write_dataset_csv(ds.x, ds.labels, path);
}

// Reads any CSV whose final column is `label`; feature column names are not
// interpreted, so embedding exports (e0,...) round-trip through here too.
inline LabeledDataset read_dataset_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("read_dataset_csv: cannot open " + path);
  std::string line;
  do {
    if (!std::getline(in, line)) throw IoError("read_dataset_csv: empty file " + path);
  } while (!line.empty() && line.front() == '#');
  std::size_t dim = 0;
  {
    std::stringstream header(line);
    std::string col, last;
    while (std::getline(header, col, ',')) {
      last = col;
      ++dim;
    }
    if (dim == 0 || last != "label")
      throw IoError("read_dataset_csv: header must end with 'label' in " + path);
    --dim;
  }
  std::vector<double> values;
  std::vector<int> labels;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string cell;
    for (std::size_t j = 0; j < dim; ++j) {
      if (!std::getline(row, cell, ',')) throw IoError("read_dataset_csv: short row in " + path);
      values.push_back(parse_double(cell));
    }
    if (!std::getline(row, cell, ',')) throw IoError("read_dataset_csv: missing label in " + path);
    labels.push_back(static_cast<int>(parse_double(cell)));
  }
  LabeledDataset ds;
  ds.x = Matrix(labels.size(), dim);
  std::copy(values.begin(), values.end(), ds.x.data().begin());
  ds.labels = std::move(labels);
  int max_label = -1;
  for (int l : ds.labels) max_label = std::max(max_label, l);
  ds.n_classes = static_cast<std::size_t>(max_label + 1);
  return ds;
}

}  // namespace cacr
