#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "cacr/data.hpp"
#include "cacr/encoder.hpp"
#include "cacr/errors.hpp"
#include "cacr/matrix.hpp"

namespace cacr {

struct ProbeConfig {
  std::size_t epochs = 200;
  double lr = 0.5;
  double l2_reg = 1e-4;

  void validate() const {
    if (!(lr > 0.0)) throw InvalidArgument("ProbeConfig: lr must be positive");
    if (l2_reg < 0.0) throw InvalidArgument("ProbeConfig: negative l2_reg");
  }
};

struct ProbeResult {
  double top1 = 0.0;
  std::vector<double> per_class_accuracy;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  double final_train_loss = 0.0;
};

// Deterministic frozen-feature extraction: forward pass, no augmentation.
inline std::pair<Matrix, std::vector<int>> extract_embeddings(const MlpSpec& spec,
                                                              const MlpParams& params,
                                                              const LabeledDataset& ds) {
  return {mlp_forward(spec, params, ds.x).first.emb, ds.labels};
}

namespace detail {

struct LogRegState {
  Matrix w;                // C x d
  std::vector<double> b;   // C
};

// Mean softmax cross-entropy plus (l2/2)||W||^2; fills grads when requested.
inline double logreg_objective(const LogRegState& s, const Matrix& x,
                               const std::vector<int>& labels, double l2, LogRegState* grads) {
  const std::size_t n = x.rows(), c = s.w.rows();
  const double inv_n = 1.0 / static_cast<double>(n);
  double loss = 0.0;
  if (grads) {
    grads->w = Matrix(c, x.cols());
    grads->b.assign(c, 0.0);
  }
  std::vector<double> logits(c);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) logits[j] = dot(s.w.row(j), x.row(i)) + s.b[j];
    const double lse = logsumexp_row(logits);
    const auto yi = static_cast<std::size_t>(labels[i]);
    loss += inv_n * (lse - logits[yi]);
    if (grads) {
      for (std::size_t j = 0; j < c; ++j) {
        const double p = std::exp(logits[j] - lse) - (j == yi ? 1.0 : 0.0);
        const double g = inv_n * p;
        for (std::size_t t = 0; t < x.cols(); ++t) grads->w(j, t) += g * x(i, t);
        grads->b[j] += g;
      }
    }
  }
  for (double wv : s.w.data()) loss += 0.5 * l2 * wv * wv;
  if (grads)
    for (std::size_t t = 0; t < s.w.size(); ++t)
      grads->w.data()[t] += l2 * s.w.data()[t];
  return loss;
}

inline std::size_t predict_class(const LogRegState& s, std::span<const double> x) {
  std::size_t best = 0;
  double best_logit = dot(s.w.row(0), x) + s.b[0];
  for (std::size_t j = 1; j < s.w.rows(); ++j) {
    const double l = dot(s.w.row(j), x) + s.b[j];
    if (l > best_logit) {
      best_logit = l;
      best = j;
    }
  }
  return best;
}

inline ProbeResult score_predictions(const std::vector<std::size_t>& predicted,
                                     const std::vector<int>& labels, std::size_t c) {
  ProbeResult res;
  res.confusion.assign(c, std::vector<std::size_t>(c, 0));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const auto yi = static_cast<std::size_t>(labels[i]);
    ++res.confusion[yi][predicted[i]];
    if (predicted[i] == yi) ++hits;
  }
  res.top1 = static_cast<double>(hits) / static_cast<double>(predicted.size());
  res.per_class_accuracy.assign(c, 0.0);
  for (std::size_t j = 0; j < c; ++j) {
    std::size_t row_total = 0;
    for (std::size_t t = 0; t < c; ++t) row_total += res.confusion[j][t];
    if (row_total) res.per_class_accuracy[j] =
        static_cast<double>(res.confusion[j][j]) / static_cast<double>(row_total);
  }
  return res;
}

}  // namespace detail

// Multinomial logistic regression on frozen embeddings, full-batch gradient
// descent from zero initialization. The training objective is kept
// non-increasing: a step that raises it is undone and the rate halved.
inline ProbeResult linear_probe(const Matrix& train_x, const std::vector<int>& train_y,
                                const Matrix& test_x, const std::vector<int>& test_y,
                                const ProbeConfig& cfg) {
  cfg.validate();
  if (train_x.rows() != train_y.size() || test_x.rows() != test_y.size())
    throw LabelMismatch("linear_probe: embedding/label count mismatch");
  if (train_x.cols() != test_x.cols()) throw DimMismatch("linear_probe: dimension mismatch");
  int max_label = -1;
  for (int l : train_y) max_label = std::max(max_label, l);
  for (int l : test_y) max_label = std::max(max_label, l);
  const auto c = static_cast<std::size_t>(max_label + 1);

  detail::LogRegState state{Matrix(c, train_x.cols()), std::vector<double>(c, 0.0)};
  double lr = cfg.lr;
  double loss = detail::logreg_objective(state, train_x, train_y, cfg.l2_reg, nullptr);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    detail::LogRegState grads;
    detail::logreg_objective(state, train_x, train_y, cfg.l2_reg, &grads);
    for (int attempt = 0; attempt < 60; ++attempt) {
      detail::LogRegState next = state;
      for (std::size_t t = 0; t < next.w.size(); ++t)
        next.w.data()[t] -= lr * grads.w.data()[t];
      for (std::size_t j = 0; j < c; ++j) next.b[j] -= lr * grads.b[j];
      const double next_loss =
          detail::logreg_objective(next, train_x, train_y, cfg.l2_reg, nullptr);
      if (next_loss <= loss) {
        state = std::move(next);
        loss = next_loss;
        break;
      }
      lr *= 0.5;  // overshoot: undo and retry smaller
    }
  }

  std::vector<std::size_t> predicted(test_x.rows());
  for (std::size_t i = 0; i < test_x.rows(); ++i)
    predicted[i] = detail::predict_class(state, test_x.row(i));
  ProbeResult res = detail::score_predictions(predicted, test_y, c);
  res.final_train_loss = loss;
  return res;
}

// Majority vote among the k nearest training points by squared Euclidean
// distance. Vote ties break by smaller summed distance, then smaller class
// index. No self-exclusion: intended for disjoint train/test splits.
inline ProbeResult knn_probe(const Matrix& train_x, const std::vector<int>& train_y,
                             const Matrix& test_x, const std::vector<int>& test_y,
                             std::size_t k) {
  if (train_x.rows() != train_y.size() || test_x.rows() != test_y.size())
    throw LabelMismatch("knn_probe: embedding/label count mismatch");
  if (k == 0 || k > train_x.rows())
    throw InvalidArgument("knn_probe: k must be in [1, train size]");
  int max_label = -1;
  for (int l : train_y) max_label = std::max(max_label, l);
  for (int l : test_y) max_label = std::max(max_label, l);
  const auto c = static_cast<std::size_t>(max_label + 1);

  std::vector<std::size_t> predicted(test_x.rows());
  std::vector<std::pair<double, std::size_t>> dists(train_x.rows());
  for (std::size_t i = 0; i < test_x.rows(); ++i) {
    for (std::size_t j = 0; j < train_x.rows(); ++j)
      dists[j] = {sq_dist(test_x.row(i), train_x.row(j)), j};
    std::partial_sort(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(k), dists.end());
    std::vector<std::size_t> votes(c, 0);
    std::vector<double> summed(c, 0.0);
    for (std::size_t t = 0; t < k; ++t) {
      const auto cls = static_cast<std::size_t>(train_y[dists[t].second]);
      ++votes[cls];
      summed[cls] += dists[t].first;
    }
    std::size_t best = 0;
    for (std::size_t cls = 1; cls < c; ++cls) {
      if (votes[cls] > votes[best] ||
          (votes[cls] == votes[best] && summed[cls] < summed[best]))
        best = cls;
    }
    predicted[i] = best;
  }
  return detail::score_predictions(predicted, test_y, c);
}

// CSV export `e0,...,e{d-1},label`; round-trips through read_dataset_csv.
inline void export_embeddings(const Matrix& emb, const std::vector<int>& labels,
                              const std::string& path, const std::string& header_comment = "") {
  write_dataset_csv(emb, labels, path, "e", header_comment);
}

}  // namespace cacr
