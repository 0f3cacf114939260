#pragma once

// Straight-line reference evaluations of every loss, written as literal
// per-pair loops with no shared kernels, no max-subtraction and no log-domain
// tricks. They exist as an independent cross-check route for the self-check
// command and the test suite; nothing in here is called by the main path.

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

#include "cacr/losses.hpp"
#include "cacr/matrix.hpp"

namespace cacr::reference {

inline double pair_cost(const CostKind& cost, std::span<const double> a,
                        std::span<const double> b) {
  double d2 = 0.0, dp = 0.0;
  for (std::size_t t = 0; t < a.size(); ++t) {
    d2 += (a[t] - b[t]) * (a[t] - b[t]);
    dp += a[t] * b[t];
  }
  switch (cost.variant) {
    case CostVariant::kSquaredEuclidean:
      return d2;
    case CostVariant::kNegInnerProduct:
      return -dp;
    case CostVariant::kRbfNegativeCost:
      return -std::exp(-cost.t_rbf * d2);
  }
  return 0.0;
}

inline std::vector<std::span<const double>> negatives_of(const ContrastiveBatch& b,
                                                         std::size_t i) {
  std::vector<std::span<const double>> out;
  for (std::size_t c = 0; c < b.queue_size(); ++c) out.push_back(b.queue_negatives.row(c));
  if (b.intra_batch_negatives)
    for (std::size_t j = 0; j < b.m(); ++j)
      if (j != i) out.push_back(b.queries.row(j));
  return out;
}

// Positive weight row for query i, either computed live or read from a frozen
// matrix (for the weight-frozen gradient oracle: a detached weight path means
// the differentiated function holds the weights constant).
inline std::vector<double> pos_weight_row(const ContrastiveBatch& b, std::size_t i, double t_pos,
                                          const WeightPolarity& pol, const Matrix* frozen) {
  std::vector<double> w(b.k());
  if (frozen) {
    for (std::size_t k = 0; k < b.k(); ++k) w[k] = (*frozen)(i, k);
    return w;
  }
  const double sign = pol.pos_sign == DistanceSign::kPlusD ? 1.0 : -1.0;
  double denom = 0.0;
  for (std::size_t k = 0; k < b.k(); ++k) {
    w[k] = std::exp(sign * t_pos * sq_dist(b.queries.row(i), b.positives.row(i * b.k() + k)));
    denom += w[k];
  }
  for (double& v : w) v /= denom;
  return w;
}

inline std::vector<double> neg_weight_row(const ContrastiveBatch& b, std::size_t i, double t_neg,
                                          const WeightPolarity& pol, const Matrix* frozen) {
  const auto negs = negatives_of(b, i);
  std::vector<double> w(negs.size());
  if (frozen) {
    for (std::size_t c = 0; c < negs.size(); ++c) w[c] = (*frozen)(i, c);
    return w;
  }
  const double sign = pol.neg_sign == DistanceSign::kPlusD ? 1.0 : -1.0;
  double denom = 0.0;
  for (std::size_t c = 0; c < negs.size(); ++c) {
    w[c] = std::exp(sign * t_neg * sq_dist(b.queries.row(i), negs[c]));
    denom += w[c];
  }
  for (double& v : w) v /= denom;
  return w;
}

inline double ca_value(const ContrastiveBatch& b, double t_pos, const CostKind& cost,
                       const WeightPolarity& pol = {}, const Matrix* frozen_w = nullptr) {
  double total = 0.0;
  for (std::size_t i = 0; i < b.m(); ++i) {
    const auto w = pos_weight_row(b, i, t_pos, pol, frozen_w);
    for (std::size_t k = 0; k < b.k(); ++k)
      total += w[k] * pair_cost(cost, b.queries.row(i), b.positives.row(i * b.k() + k));
  }
  return total / static_cast<double>(b.m());
}

inline double cr_value(const ContrastiveBatch& b, double t_neg, const CostKind& cost,
                       const WeightPolarity& pol = {}, const Matrix* frozen_v = nullptr) {
  double total = 0.0;
  for (std::size_t i = 0; i < b.m(); ++i) {
    const auto negs = negatives_of(b, i);
    const auto w = neg_weight_row(b, i, t_neg, pol, frozen_v);
    for (std::size_t c = 0; c < negs.size(); ++c)
      total -= w[c] * pair_cost(cost, b.queries.row(i), negs[c]);
  }
  return total / static_cast<double>(b.m());
}

inline double cacr_value(const ContrastiveBatch& b, const Temperatures& temps,
                         const CostKind& cost, const WeightPolarity& pol = {},
                         const Matrix* frozen_w = nullptr, const Matrix* frozen_v = nullptr) {
  return ca_value(b, temps.t_pos, cost, pol, frozen_w) +
         cr_value(b, temps.t_neg, cost, pol, frozen_v);
}

// Direct (non-log-domain) repulsion with RBF cost; underflows for large
// distances times large t_rbf, which is exactly what the log-domain
// implementation avoids.
inline double cr_rbf_value_direct(const ContrastiveBatch& b, double t_neg, double t_rbf,
                                  const WeightPolarity& pol = {},
                                  const Matrix* frozen_v = nullptr) {
  double mean = 0.0;
  for (std::size_t i = 0; i < b.m(); ++i) {
    const auto negs = negatives_of(b, i);
    const auto w = neg_weight_row(b, i, t_neg, pol, frozen_v);
    for (std::size_t c = 0; c < negs.size(); ++c)
      mean += w[c] * std::exp(-t_rbf * sq_dist(b.queries.row(i), negs[c]));
  }
  return std::log(mean / static_cast<double>(b.m()));
}

inline double uaur_value(const ContrastiveBatch& b, const CostKind& cost) {
  double pos = 0.0, neg = 0.0;
  std::size_t n_pos = 0, n_neg = 0;
  for (std::size_t i = 0; i < b.m(); ++i) {
    for (std::size_t k = 0; k < b.k(); ++k) {
      pos += pair_cost(cost, b.queries.row(i), b.positives.row(i * b.k() + k));
      ++n_pos;
    }
    for (auto nrow : negatives_of(b, i)) {
      neg += pair_cost(cost, b.queries.row(i), nrow);
      ++n_neg;
    }
  }
  return pos / static_cast<double>(n_pos) - neg / static_cast<double>(n_neg);
}

inline double infonce_value(const ContrastiveBatch& b, double tau) {
  double total = 0.0;
  for (std::size_t i = 0; i < b.m(); ++i) {
    const double pos = std::exp(dot(b.queries.row(i), b.positives.row(i)) / tau);
    double denom = pos;
    for (auto neg : negatives_of(b, i)) denom += std::exp(dot(neg, b.queries.row(i)) / tau);
    total += -std::log(pos / denom);
  }
  return total / static_cast<double>(b.m());
}

inline double align_uniform_value(const ContrastiveBatch& b, double tau,
                                  double align_exponent = 2.0) {
  double align = 0.0, uniform = 0.0;
  for (std::size_t i = 0; i < b.m(); ++i) {
    align += std::pow(std::sqrt(sq_dist(b.queries.row(i), b.positives.row(i))), align_exponent);
    const auto negs = negatives_of(b, i);
    double mean = 0.0;
    for (auto neg : negs) mean += std::exp(dot(neg, b.queries.row(i)) / tau);
    uniform += std::log(mean / static_cast<double>(negs.size()));
  }
  return (align + uniform) / static_cast<double>(b.m());
}

inline double multi_positive_infonce_value(const ContrastiveBatch& b, double tau) {
  double total = 0.0;
  for (std::size_t k = 0; k < b.k(); ++k) {
    for (std::size_t i = 0; i < b.m(); ++i) {
      const double pos = std::exp(dot(b.queries.row(i), b.positives.row(i * b.k() + k)) / tau);
      double denom = pos;
      for (auto neg : negatives_of(b, i)) denom += std::exp(dot(neg, b.queries.row(i)) / tau);
      total += -std::log(pos / denom);
    }
  }
  return total / static_cast<double>(b.m() * b.k());
}

inline double cacr_margin_value(const ContrastiveBatch& b, const Temperatures& temps,
                                const CostKind& cost, double margin,
                                const WeightPolarity& pol = {}, const Matrix* frozen_w = nullptr,
                                const Matrix* frozen_v = nullptr) {
  double total = 0.0;
  for (std::size_t i = 0; i < b.m(); ++i) {
    const auto w = pos_weight_row(b, i, temps.t_pos, pol, frozen_w);
    double pcost = 0.0;
    for (std::size_t k = 0; k < b.k(); ++k)
      pcost += w[k] * pair_cost(cost, b.queries.row(i), b.positives.row(i * b.k() + k));
    const auto negs = negatives_of(b, i);
    const auto v = neg_weight_row(b, i, temps.t_neg, pol, frozen_v);
    double ncost = 0.0;
    for (std::size_t c = 0; c < negs.size(); ++c)
      ncost += v[c] * pair_cost(cost, b.queries.row(i), negs[c]);
    const double gap = pcost - ncost + margin;
    if (gap > 0.0) total += gap;
  }
  return total / static_cast<double>(b.m());
}

// Weight matrices captured at a fixed batch state, standing in for the
// detached weight paths while finite differences wiggle the embeddings.
struct FrozenWeights {
  std::optional<Matrix> pos;
  std::optional<Matrix> neg;
};

inline bool loss_has_pos_weights(LossKind k) {
  return k == LossKind::kCacr || k == LossKind::kCaOnly || k == LossKind::kCacrRbf ||
         k == LossKind::kCacrMargin;
}

inline bool loss_has_neg_weights(LossKind k) {
  return k == LossKind::kCacr || k == LossKind::kCrOnly || k == LossKind::kCacrRbf ||
         k == LossKind::kCrRbf || k == LossKind::kCacrMargin;
}

// Capture the weights the analytic gradient treats as constants under the
// given GradFlow. Must be taken at the unperturbed batch.
inline FrozenWeights capture_frozen_weights(const LossSpec& s, const ContrastiveBatch& b) {
  FrozenWeights fw;
  if (!s.flow.through_pos_weights && loss_has_pos_weights(s.kind))
    fw.pos = positive_weights(b, s.temps.t_pos, s.polarity);
  if (!s.flow.through_neg_weights && loss_has_neg_weights(s.kind))
    fw.neg = negative_weights(b, s.temps.t_neg, s.polarity);
  return fw;
}

// Reference value of any LossSpec; weight paths flagged as detached in the
// analytic gradient read from the frozen matrices instead of recomputing.
inline double loss_value(const LossSpec& s, const ContrastiveBatch& b,
                         const FrozenWeights& fw = {}) {
  const Matrix* pw = fw.pos ? &*fw.pos : nullptr;
  const Matrix* nw = fw.neg ? &*fw.neg : nullptr;
  switch (s.kind) {
    case LossKind::kCacr:
      return cacr_value(b, s.temps, s.cost, s.polarity, pw, nw);
    case LossKind::kCaOnly:
      return ca_value(b, s.temps.t_pos, s.cost, s.polarity, pw);
    case LossKind::kCrOnly:
      return cr_value(b, s.temps.t_neg, s.cost, s.polarity, nw);
    case LossKind::kCacrRbf:
      return ca_value(b, s.temps.t_pos, s.cost, s.polarity, pw) +
             cr_rbf_value_direct(b, s.temps.t_neg, s.t_rbf, s.polarity, nw);
    case LossKind::kCrRbf:
      return cr_rbf_value_direct(b, s.temps.t_neg, s.t_rbf, s.polarity, nw);
    case LossKind::kUaur:
      return uaur_value(b, s.cost);
    case LossKind::kInfoNce:
      return infonce_value(b, s.temps.tau);
    case LossKind::kMultiPositiveInfoNce:
      return multi_positive_infonce_value(b, s.temps.tau);
    case LossKind::kAlignUniform:
      return align_uniform_value(b, s.temps.tau, s.align_exponent);
    case LossKind::kCacrMargin:
      return cacr_margin_value(b, s.temps, s.cost, s.margin, s.polarity, pw, nw);
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

// Central finite difference of f along coordinate `idx` of `x`.
inline double central_diff(std::vector<double>& x, std::size_t idx,
                           const std::function<double()>& f, double h = 1e-5) {
  const double saved = x[idx];
  x[idx] = saved + h;
  const double up = f();
  x[idx] = saved - h;
  const double down = f();
  x[idx] = saved;
  return (up - down) / (2.0 * h);
}

struct GradCheckResult {
  double max_abs_err = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool ok = true;
};

// Compare an analytic gradient against central differences coordinate by
// coordinate, using |a - n| <= atol + rtol * max(|a|, |n|).
inline GradCheckResult check_gradient(std::vector<double>& x, const std::vector<double>& analytic,
                                      const std::function<double()>& f, double rtol = 1e-5,
                                      double atol = 1e-8, double h = 1e-5) {
  GradCheckResult r;
  for (std::size_t idx = 0; idx < x.size(); ++idx) {
    const double num = central_diff(x, idx, f, h);
    const double err = std::abs(analytic[idx] - num);
    const double bound = atol + rtol * std::max(std::abs(analytic[idx]), std::abs(num));
    if (err > bound) {
      r.ok = false;
      if (err > r.max_abs_err) {
        r.max_abs_err = err;
        r.worst_analytic = analytic[idx];
        r.worst_numeric = num;
      }
    }
  }
  return r;
}

}  // namespace cacr::reference
