#pragma once

#include <cmath>
#include <vector>

#include "cacr/errors.hpp"
#include "cacr/losses.hpp"
#include "cacr/matrix.hpp"

namespace cacr {

// Empirical conditional entropy of a row-stochastic weight matrix:
// mean over rows of sum_j -w_ij ln w_ij (0 ln 0 taken as 0).
inline double conditional_entropy(const Matrix& w) {
  double total = 0.0;
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) {
      const double p = w(i, j);
      if (p > 0.0) total -= p * std::log(p);
    }
  return total / static_cast<double>(w.rows());
}

// Empirical mutual information against a uniform support of size n:
// mean over rows of sum_j w_ij ln(n * w_ij). Identity: mi + entropy = ln n.
inline double empirical_mutual_information(const Matrix& w) {
  const double n = static_cast<double>(w.cols());
  double total = 0.0;
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) {
      const double p = w(i, j);
      if (p > 0.0) total += p * std::log(n * p);
    }
  return total / static_cast<double>(w.rows());
}

// One validation batch for the per-epoch diagnostics: query embeddings and a
// single positive view per query (both unit-norm).
struct ValidationBatch {
  Matrix queries;
  Matrix positives;  // M x d, one per query
};

struct DiagnosticRow {
  double entropy = 0.0;    // H(X-|X) over intra-batch negatives
  double mi = 0.0;         // I(X;X-) under the uniform empirical support
  double alignment = 0.0;  // mean ||z - z+||^2
  double uniformity = 0.0; // mean_i ln mean_j exp(z_j . z_i / tau)
};

// Per-epoch validation diagnostics, averaged across mini-batches.
inline DiagnosticRow epoch_diagnostics(const std::vector<ValidationBatch>& batches, double t_neg,
                                       double tau) {
  if (batches.empty()) throw EmptyValidation("epoch_diagnostics: no validation batches");
  DiagnosticRow row;
  for (const auto& vb : batches) {
    ContrastiveBatch cb;
    cb.queries = vb.queries;
    cb.positives = vb.positives;
    cb.k_per_query = 1;
    const Matrix w = negative_weights(cb, t_neg);
    row.entropy += conditional_entropy(w);
    row.mi += empirical_mutual_information(w);

    const std::size_t m = vb.queries.rows();
    double align = 0.0, uniform = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      align += sq_dist(vb.queries.row(i), vb.positives.row(i));
      std::vector<double> s;
      s.reserve(m - 1);
      for (std::size_t j = 0; j < m; ++j)
        if (j != i) s.push_back(dot(vb.queries.row(j), vb.queries.row(i)) / tau);
      uniform += logsumexp_row(s) - std::log(static_cast<double>(s.size()));
    }
    row.alignment += align / static_cast<double>(m);
    row.uniformity += uniform / static_cast<double>(m);
  }
  const double nb = static_cast<double>(batches.size());
  row.entropy /= nb;
  row.mi /= nb;
  row.alignment /= nb;
  row.uniformity /= nb;
  return row;
}

}  // namespace cacr
