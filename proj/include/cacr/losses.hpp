#pragma once

#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "cacr/errors.hpp"
#include "cacr/matrix.hpp"

namespace cacr {

// ---------------------------------------------------------------------------
// Loss-family parameter types
// ---------------------------------------------------------------------------

enum class CostVariant { kSquaredEuclidean, kNegInnerProduct, kRbfNegativeCost };

// Point-to-point cost c(z1, z2). The RBF variant is -exp(-t_rbf * ||z1-z2||^2).
struct CostKind {
  CostVariant variant = CostVariant::kSquaredEuclidean;
  double t_rbf = 1.0;

  static CostKind squared_euclidean() { return {CostVariant::kSquaredEuclidean, 1.0}; }
  static CostKind neg_inner_product() { return {CostVariant::kNegInnerProduct, 1.0}; }
  static CostKind rbf(double t) {
    if (!(t > 0.0)) throw InvalidArgument("CostKind::rbf: t_rbf must be positive");
    return {CostVariant::kRbfNegativeCost, t};
  }
};

struct Temperatures {
  double t_pos = 1.0;
  double t_neg = 2.0;
  double tau = 0.19;  // baseline losses only

  void validate() const {
    if (!(t_pos > 0.0 && t_neg > 0.0 && tau > 0.0))
      throw InvalidArgument("Temperatures: all values must be strictly positive");
  }
};

// Sign in front of the tempered squared distance inside the conditional
// weights. Defaults: +d for positives (distant positives pulled harder),
// -d for negatives (close negatives pushed harder).
enum class DistanceSign { kPlusD, kMinusD };

inline double sign_of(DistanceSign s) { return s == DistanceSign::kPlusD ? 1.0 : -1.0; }

struct WeightPolarity {
  DistanceSign pos_sign = DistanceSign::kPlusD;
  DistanceSign neg_sign = DistanceSign::kMinusD;
};

// Whether gradients propagate through the softmax weights themselves (the
// cost path always receives gradient). Defaults match the momentum-queue
// recipe: positive weights detached, negative weights live.
struct GradFlow {
  bool through_pos_weights = false;
  bool through_neg_weights = true;
};

// ---------------------------------------------------------------------------
// Batch layout
// ---------------------------------------------------------------------------

// One contrastive mini-batch of embeddings (rows expected unit-norm; the loss
// functions themselves are defined for any finite rows so finite-difference
// probes can evaluate slightly off the sphere).
//
// queries:   M x d
// positives: (M*K) x d, row (i*K + k) is positive k of query i
// queue_negatives: optional explicit negative support shared by all queries
//                  (momentum-queue keys); gradient is withheld from these rows
//                  when queue_detached is set.
// Intra-batch negatives of query i are the other queries j != i.
struct ContrastiveBatch {
  Matrix queries;
  Matrix positives;
  std::size_t k_per_query = 1;
  Matrix queue_negatives;
  bool queue_detached = true;
  bool intra_batch_negatives = true;

  std::size_t m() const { return queries.rows(); }
  std::size_t dim() const { return queries.cols(); }
  std::size_t k() const { return k_per_query; }
  std::size_t queue_size() const { return queue_negatives.rows(); }

  // Size of each query's negative support.
  std::size_t negatives_per_query() const {
    return queue_size() + (intra_batch_negatives && m() > 0 ? m() - 1 : 0);
  }

  void validate() const {
    if (m() == 0) throw DimMismatch("ContrastiveBatch: empty query set");
    if (k_per_query == 0) throw DimMismatch("ContrastiveBatch: K must be >= 1");
    if (positives.rows() != m() * k_per_query)
      throw DimMismatch("ContrastiveBatch: positives row count != M*K");
    if (positives.cols() != dim())
      throw DimMismatch("ContrastiveBatch: positive dimension mismatch");
    if (queue_size() > 0 && queue_negatives.cols() != dim())
      throw DimMismatch("ContrastiveBatch: queue dimension mismatch");
  }

  std::size_t positive_row(std::size_t i, std::size_t k) const { return i * k_per_query + k; }

  // Intra-batch negative column `c` (0-based within the intra block) of query
  // i refers to query index c, skipping i itself.
  std::size_t intra_negative_index(std::size_t i, std::size_t c) const {
    return c < i ? c : c + 1;
  }
};

// Row-stochastic conditional weights realizing the empirical pi-hat
// distributions. neg_w columns are ordered queue rows first, then intra-batch
// negatives by ascending query index.
struct ConditionalWeights {
  Matrix pos_w;  // M x K
  Matrix neg_w;  // M x n
};

// Loss value plus gradient with respect to every embedding row that feeds it.
// Gradients of intra-batch negatives accumulate into grad_queries (those rows
// are the queries); grad_queue stays zero when the queue is detached.
struct LossEval {
  double value = 0.0;
  Matrix grad_queries;
  Matrix grad_positives;
  Matrix grad_queue;
  // Decomposition for losses that have an attraction/repulsion split
  // (zero for single-term losses).
  double attraction_term = 0.0;
  double repulsion_term = 0.0;
};

// ---------------------------------------------------------------------------
// Conditional weights
// ---------------------------------------------------------------------------

namespace detail {

inline Matrix positive_sq_dists(const ContrastiveBatch& b) {
  Matrix d2(b.m(), b.k());
  for (std::size_t i = 0; i < b.m(); ++i)
    for (std::size_t k = 0; k < b.k(); ++k)
      d2(i, k) = sq_dist(b.queries.row(i), b.positives.row(b.positive_row(i, k)));
  return d2;
}

inline Matrix negative_sq_dists(const ContrastiveBatch& b) {
  const std::size_t n = b.negatives_per_query();
  const std::size_t nq = b.queue_size();
  Matrix d2(b.m(), n);
  for (std::size_t i = 0; i < b.m(); ++i) {
    for (std::size_t c = 0; c < nq; ++c)
      d2(i, c) = sq_dist(b.queries.row(i), b.queue_negatives.row(c));
    if (b.intra_batch_negatives)
      for (std::size_t c = 0; nq + c < n; ++c)
        d2(i, nq + c) = sq_dist(b.queries.row(i), b.queries.row(b.intra_negative_index(i, c)));
  }
  return d2;
}

inline Matrix scaled(const Matrix& m, double s) {
  Matrix out = m;
  for (double& v : out.data()) v *= s;
  return out;
}

}  // namespace detail

// pi-hat-plus: softmax over k of sign * t_pos * ||z_i - z+_ik||^2.
inline Matrix positive_weights(const ContrastiveBatch& batch, double t_pos,
                               const WeightPolarity& polarity = {}) {
  batch.validate();
  if (!(t_pos > 0.0)) throw InvalidArgument("positive_weights: t_pos must be positive");
  return softmax_rows(
      detail::scaled(detail::positive_sq_dists(batch), sign_of(polarity.pos_sign) * t_pos));
}

// pi-hat-minus: softmax over the negative support of sign * t_neg * sq dist.
inline Matrix negative_weights(const ContrastiveBatch& batch, double t_neg,
                               const WeightPolarity& polarity = {}) {
  batch.validate();
  if (!(t_neg > 0.0)) throw InvalidArgument("negative_weights: t_neg must be positive");
  if (batch.negatives_per_query() == 0)
    throw EmptyNegativeSupport("negative_weights: no negatives available");
  return softmax_rows(
      detail::scaled(detail::negative_sq_dists(batch), sign_of(polarity.neg_sign) * t_neg));
}

inline ConditionalWeights conditional_weights(const ContrastiveBatch& batch,
                                              const Temperatures& temps,
                                              const WeightPolarity& polarity = {}) {
  return {positive_weights(batch, temps.t_pos, polarity),
          negative_weights(batch, temps.t_neg, polarity)};
}

// ---------------------------------------------------------------------------
// Cost kernel
// ---------------------------------------------------------------------------

namespace detail {

struct CostEval {
  double value;
  double d_sqdist;  // d value / d ||a-b||^2
  double d_dot;     // d value / d (a.b)
};

inline CostEval eval_cost(const CostKind& cost, double sqdist, double dotp) {
  switch (cost.variant) {
    case CostVariant::kSquaredEuclidean:
      return {sqdist, 1.0, 0.0};
    case CostVariant::kNegInnerProduct:
      return {-dotp, 0.0, -1.0};
    case CostVariant::kRbfNegativeCost: {
      const double e = std::exp(-cost.t_rbf * sqdist);
      return {-e, cost.t_rbf * e, 0.0};
    }
  }
  throw InvalidArgument("eval_cost: unknown cost variant");
}

// Accumulate `coef * dc/d(pair)` into the gradients of a (query, target) pair.
// d(sqdist)/da = 2(a-b), d(dot)/da = b and symmetrically for b.
inline void add_pair_grad(std::span<const double> a, std::span<const double> b, double c_sqdist,
                          double c_dot, double* grad_a, double* grad_b) {
  for (std::size_t t = 0; t < a.size(); ++t) {
    const double diff2 = 2.0 * (a[t] - b[t]);
    if (grad_a) grad_a[t] += c_sqdist * diff2 + c_dot * b[t];
    if (grad_b) grad_b[t] += -c_sqdist * diff2 + c_dot * a[t];
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Contrastive attraction: (1/M) sum_i sum_k pi+(k|i) c(z_i, z+_ik).
inline LossEval ca_loss(const ContrastiveBatch& batch, double t_pos, const CostKind& cost,
                        const GradFlow& flow = {}, const WeightPolarity& polarity = {}) {
  batch.validate();
  const std::size_t m = batch.m(), kk = batch.k(), d = batch.dim();
  const Matrix d2 = detail::positive_sq_dists(batch);
  const double psign = sign_of(polarity.pos_sign) * t_pos;
  const Matrix w = softmax_rows(detail::scaled(d2, psign));

  LossEval out;
  out.grad_queries = Matrix(m, d);
  out.grad_positives = Matrix(m * kk, d);
  out.grad_queue = Matrix(batch.queue_size(), d);

  const double inv_m = 1.0 / static_cast<double>(m);
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<detail::CostEval> ce(kk);
    double row_cost = 0.0;
    for (std::size_t k = 0; k < kk; ++k) {
      const double dotp = dot(batch.queries.row(i), batch.positives.row(batch.positive_row(i, k)));
      ce[k] = detail::eval_cost(cost, d2(i, k), dotp);
      row_cost += w(i, k) * ce[k].value;
    }
    out.value += inv_m * row_cost;
    for (std::size_t k = 0; k < kk; ++k) {
      const std::size_t pr = batch.positive_row(i, k);
      // cost path
      double c_sqdist = inv_m * w(i, k) * ce[k].d_sqdist;
      double c_dot = inv_m * w(i, k) * ce[k].d_dot;
      // weight path: d w_k / d s_j contracted with costs gives w_k (c_k - mean)
      if (flow.through_pos_weights)
        c_sqdist += inv_m * w(i, k) * (ce[k].value - row_cost) * psign;
      detail::add_pair_grad(batch.queries.row(i), batch.positives.row(pr), c_sqdist, c_dot,
                            out.grad_queries.row_ptr(i), out.grad_positives.row_ptr(pr));
    }
  }
  out.attraction_term = out.value;
  return out;
}

// Contrastive repulsion: -(1/M) sum_i sum_j pi-(j|i) c(z_i, z_j).
inline LossEval cr_loss(const ContrastiveBatch& batch, double t_neg, const CostKind& cost,
                        const GradFlow& flow = {}, const WeightPolarity& polarity = {}) {
  batch.validate();
  const std::size_t m = batch.m(), d = batch.dim(), nq = batch.queue_size();
  const std::size_t n = batch.negatives_per_query();
  if (n == 0) throw EmptyNegativeSupport("cr_loss: no negatives available");
  const Matrix d2 = detail::negative_sq_dists(batch);
  const double nsign = sign_of(polarity.neg_sign) * t_neg;
  const Matrix w = softmax_rows(detail::scaled(d2, nsign));

  LossEval out;
  out.grad_queries = Matrix(m, d);
  out.grad_positives = Matrix(batch.positives.rows(), d);
  out.grad_queue = Matrix(nq, d);

  const double inv_m = 1.0 / static_cast<double>(m);
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<detail::CostEval> ce(n);
    double row_cost = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      auto neg = c < nq ? batch.queue_negatives.row(c)
                        : batch.queries.row(batch.intra_negative_index(i, c - nq));
      ce[c] = detail::eval_cost(cost, d2(i, c), dot(batch.queries.row(i), neg));
      row_cost += w(i, c) * ce[c].value;
    }
    out.value -= inv_m * row_cost;
    for (std::size_t c = 0; c < n; ++c) {
      double c_sqdist = -inv_m * w(i, c) * ce[c].d_sqdist;
      double c_dot = -inv_m * w(i, c) * ce[c].d_dot;
      if (flow.through_neg_weights)
        c_sqdist += -inv_m * w(i, c) * (ce[c].value - row_cost) * nsign;
      double* grad_neg = nullptr;
      std::span<const double> neg;
      if (c < nq) {
        neg = batch.queue_negatives.row(c);
        if (!batch.queue_detached) grad_neg = out.grad_queue.row_ptr(c);
      } else {
        const std::size_t j = batch.intra_negative_index(i, c - nq);
        neg = batch.queries.row(j);
        grad_neg = out.grad_queries.row_ptr(j);
      }
      detail::add_pair_grad(batch.queries.row(i), neg, c_sqdist, c_dot,
                            out.grad_queries.row_ptr(i), grad_neg);
    }
  }
  out.repulsion_term = out.value;
  return out;
}

namespace detail {

inline void add_grads(LossEval& into, const LossEval& other) {
  for (std::size_t t = 0; t < into.grad_queries.size(); ++t)
    into.grad_queries.data()[t] += other.grad_queries.data()[t];
  for (std::size_t t = 0; t < into.grad_positives.size(); ++t)
    into.grad_positives.data()[t] += other.grad_positives.data()[t];
  for (std::size_t t = 0; t < into.grad_queue.size(); ++t)
    into.grad_queue.data()[t] += other.grad_queue.data()[t];
}

}  // namespace detail

// L_CACR = L_CA + L_CR.
inline LossEval cacr_loss(const ContrastiveBatch& batch, const Temperatures& temps,
                          const CostKind& cost, const WeightPolarity& polarity = {},
                          const GradFlow& flow = {}) {
  temps.validate();
  LossEval ca = ca_loss(batch, temps.t_pos, cost, flow, polarity);
  const LossEval cr = cr_loss(batch, temps.t_neg, cost, flow, polarity);
  ca.value += cr.value;
  ca.repulsion_term = cr.repulsion_term;
  detail::add_grads(ca, cr);
  return ca;
}

// Log-domain repulsion with RBF cost:
//   ln[(1/M) sum_i sum_j pi-(j|i) exp(-t_rbf ||z_i - z_j||^2)],
// evaluated entirely via logsumexp so the inner terms may underflow freely.
inline LossEval cr_rbf_loss(const ContrastiveBatch& batch, double t_neg, double t_rbf,
                            const GradFlow& flow = {}, const WeightPolarity& polarity = {}) {
  batch.validate();
  if (!(t_rbf > 0.0)) throw InvalidArgument("cr_rbf_loss: t_rbf must be positive");
  const std::size_t m = batch.m(), d = batch.dim(), nq = batch.queue_size();
  const std::size_t n = batch.negatives_per_query();
  if (n == 0) throw EmptyNegativeSupport("cr_rbf_loss: no negatives available");
  const Matrix d2 = detail::negative_sq_dists(batch);
  const double nsign = sign_of(polarity.neg_sign) * t_neg;

  // a_ij = ln pi-(j|i) - t_rbf * d2_ij ; value = logsumexp(a) - ln M.
  Matrix a(m, n);
  std::vector<double> row_lse(m);
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<double> s(n);
    for (std::size_t c = 0; c < n; ++c) s[c] = nsign * d2(i, c);
    row_lse[i] = logsumexp_row(s);
    for (std::size_t c = 0; c < n; ++c) a(i, c) = s[c] - row_lse[i] - t_rbf * d2(i, c);
  }
  const double lse_all = logsumexp_row(std::span<const double>(a.data()));
  LossEval out;
  out.value = lse_all - std::log(static_cast<double>(m));
  out.repulsion_term = out.value;
  out.grad_queries = Matrix(m, d);
  out.grad_positives = Matrix(batch.positives.rows(), d);
  out.grad_queue = Matrix(nq, d);

  // d value / d a_ij = exp(a_ij - lse_all) =: r_ij (sums to 1), and
  // d a_ij / d d2_ic  picks up both the RBF term and the weight softmax.
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<double> r(n), w(n);
    double r_row = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      r[c] = std::exp(a(i, c) - lse_all);
      w[c] = std::exp(nsign * d2(i, c) - row_lse[i]);
      r_row += r[c];
    }
    for (std::size_t c = 0; c < n; ++c) {
      double c_sqdist = -t_rbf * r[c];
      if (flow.through_neg_weights) c_sqdist += nsign * (r[c] - r_row * w[c]);
      double* grad_neg = nullptr;
      std::span<const double> neg;
      if (c < nq) {
        neg = batch.queue_negatives.row(c);
        if (!batch.queue_detached) grad_neg = out.grad_queue.row_ptr(c);
      } else {
        const std::size_t j = batch.intra_negative_index(i, c - nq);
        neg = batch.queries.row(j);
        grad_neg = out.grad_queries.row_ptr(j);
      }
      detail::add_pair_grad(batch.queries.row(i), neg, c_sqdist, 0.0,
                            out.grad_queries.row_ptr(i), grad_neg);
    }
  }
  return out;
}

// Uniform attraction / uniform repulsion: both conditional distributions
// forced uniform. Degenerate limit of CACR as t+, t- -> 0.
inline LossEval uaur_loss(const ContrastiveBatch& batch, const CostKind& cost) {
  batch.validate();
  const std::size_t m = batch.m(), kk = batch.k(), d = batch.dim(), nq = batch.queue_size();
  const std::size_t n = batch.negatives_per_query();
  if (n == 0) throw EmptyNegativeSupport("uaur_loss: no negatives available");

  LossEval out;
  out.grad_queries = Matrix(m, d);
  out.grad_positives = Matrix(m * kk, d);
  out.grad_queue = Matrix(nq, d);

  const double wp = 1.0 / static_cast<double>(m * kk);
  const double wn = 1.0 / static_cast<double>(m * n);
  double pos_sum = 0.0, neg_sum = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t k = 0; k < kk; ++k) {
      const std::size_t pr = batch.positive_row(i, k);
      auto q = batch.queries.row(i), p = batch.positives.row(pr);
      const auto ce = detail::eval_cost(cost, sq_dist(q, p), dot(q, p));
      pos_sum += ce.value;
      detail::add_pair_grad(q, p, wp * ce.d_sqdist, wp * ce.d_dot, out.grad_queries.row_ptr(i),
                            out.grad_positives.row_ptr(pr));
    }
    for (std::size_t c = 0; c < n; ++c) {
      double* grad_neg = nullptr;
      std::span<const double> neg;
      if (c < nq) {
        neg = batch.queue_negatives.row(c);
        if (!batch.queue_detached) grad_neg = out.grad_queue.row_ptr(c);
      } else {
        const std::size_t j = batch.intra_negative_index(i, c - nq);
        neg = batch.queries.row(j);
        grad_neg = out.grad_queries.row_ptr(j);
      }
      auto q = batch.queries.row(i);
      const auto ce = detail::eval_cost(cost, sq_dist(q, neg), dot(q, neg));
      neg_sum += ce.value;
      detail::add_pair_grad(q, neg, -wn * ce.d_sqdist, -wn * ce.d_dot,
                            out.grad_queries.row_ptr(i), grad_neg);
    }
  }
  out.attraction_term = wp * pos_sum;
  out.repulsion_term = -wn * neg_sum;
  out.value = out.attraction_term + out.repulsion_term;
  return out;
}

namespace detail {

// Shared core of the 1-vs-many softmax cross-entropy, using positive column
// `k` of the batch. Adds gradients scaled by `scale` and returns the value.
inline double infonce_accumulate(const ContrastiveBatch& batch, double tau, std::size_t k,
                                 double scale, LossEval& out) {
  const std::size_t m = batch.m(), nq = batch.queue_size();
  const std::size_t n = batch.negatives_per_query();
  if (n == 0) throw EmptyNegativeSupport("infonce_loss: no negatives available");
  const double inv_m = 1.0 / static_cast<double>(m);
  double value = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t pr = batch.positive_row(i, k);
    auto q = batch.queries.row(i);
    std::vector<double> s(n + 1);
    s[0] = dot(q, batch.positives.row(pr)) / tau;
    for (std::size_t c = 0; c < n; ++c) {
      auto neg = c < nq ? batch.queue_negatives.row(c)
                        : batch.queries.row(batch.intra_negative_index(i, c - nq));
      s[c + 1] = dot(q, neg) / tau;
    }
    const double lse = logsumexp_row(s);
    value += inv_m * (lse - s[0]);

    // d/ds = softmax(s) minus one-hot on the positive slot
    for (std::size_t c = 0; c < n + 1; ++c) {
      const double g = scale * inv_m * (std::exp(s[c] - lse) - (c == 0 ? 1.0 : 0.0)) / tau;
      if (c == 0) {
        detail::add_pair_grad(q, batch.positives.row(pr), 0.0, g, out.grad_queries.row_ptr(i),
                              out.grad_positives.row_ptr(pr));
      } else {
        const std::size_t cc = c - 1;
        double* grad_neg = nullptr;
        std::span<const double> neg;
        if (cc < nq) {
          neg = batch.queue_negatives.row(cc);
          if (!batch.queue_detached) grad_neg = out.grad_queue.row_ptr(cc);
        } else {
          const std::size_t j = batch.intra_negative_index(i, cc - nq);
          neg = batch.queries.row(j);
          grad_neg = out.grad_queries.row_ptr(j);
        }
        detail::add_pair_grad(q, neg, 0.0, g, out.grad_queries.row_ptr(i), grad_neg);
      }
    }
  }
  return value;
}

}  // namespace detail

// 1-vs-many softmax cross-entropy (K must be 1).
inline LossEval infonce_loss(const ContrastiveBatch& batch, double tau) {
  batch.validate();
  if (batch.k() != 1) throw KMismatch("infonce_loss: requires K = 1");
  if (!(tau > 0.0)) throw InvalidArgument("infonce_loss: tau must be positive");
  LossEval out;
  out.grad_queries = Matrix(batch.m(), batch.dim());
  out.grad_positives = Matrix(batch.positives.rows(), batch.dim());
  out.grad_queue = Matrix(batch.queue_size(), batch.dim());
  out.value = detail::infonce_accumulate(batch, tau, 0, 1.0, out);
  return out;
}

// Average of the K=1 cross-entropy over each positive in turn.
inline LossEval multi_positive_infonce_loss(const ContrastiveBatch& batch, double tau) {
  batch.validate();
  if (!(tau > 0.0)) throw InvalidArgument("multi_positive_infonce_loss: tau must be positive");
  LossEval out;
  out.grad_queries = Matrix(batch.m(), batch.dim());
  out.grad_positives = Matrix(batch.positives.rows(), batch.dim());
  out.grad_queue = Matrix(batch.queue_size(), batch.dim());
  const double inv_k = 1.0 / static_cast<double>(batch.k());
  for (std::size_t k = 0; k < batch.k(); ++k)
    out.value += inv_k * detail::infonce_accumulate(batch, tau, k, inv_k, out);
  return out;
}

// Alignment (||z - z+||^alpha) plus uniformity (ln mean_j exp(z_j.z_i / tau)).
inline LossEval align_uniform_loss(const ContrastiveBatch& batch, double tau,
                                   double align_exponent = 2.0) {
  batch.validate();
  if (batch.k() != 1) throw KMismatch("align_uniform_loss: requires K = 1");
  if (!(tau > 0.0 && align_exponent > 0.0))
    throw InvalidArgument("align_uniform_loss: tau and align_exponent must be positive");
  const std::size_t m = batch.m(), d = batch.dim(), nq = batch.queue_size();
  const std::size_t n = batch.negatives_per_query();
  if (n == 0) throw EmptyNegativeSupport("align_uniform_loss: no negatives available");

  LossEval out;
  out.grad_queries = Matrix(m, d);
  out.grad_positives = Matrix(batch.positives.rows(), d);
  out.grad_queue = Matrix(nq, d);
  const double inv_m = 1.0 / static_cast<double>(m);

  double align = 0.0, uniform = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    auto q = batch.queries.row(i);
    auto p = batch.positives.row(i);
    const double d2 = sq_dist(q, p);
    align += inv_m * std::pow(d2, align_exponent / 2.0);
    // d ||delta||^alpha / d d2 = (alpha/2) d2^{alpha/2 - 1}
    const double gd2 =
        d2 > 0.0 ? inv_m * 0.5 * align_exponent * std::pow(d2, align_exponent / 2.0 - 1.0) : 0.0;
    detail::add_pair_grad(q, p, gd2, 0.0, out.grad_queries.row_ptr(i),
                          out.grad_positives.row_ptr(i));

    std::vector<double> s(n);
    for (std::size_t c = 0; c < n; ++c) {
      auto neg = c < nq ? batch.queue_negatives.row(c)
                        : batch.queries.row(batch.intra_negative_index(i, c - nq));
      s[c] = dot(q, neg) / tau;
    }
    const double lse = logsumexp_row(s);
    uniform += inv_m * (lse - std::log(static_cast<double>(n)));
    for (std::size_t c = 0; c < n; ++c) {
      const double g = inv_m * std::exp(s[c] - lse) / tau;
      double* grad_neg = nullptr;
      std::span<const double> neg;
      if (c < nq) {
        neg = batch.queue_negatives.row(c);
        if (!batch.queue_detached) grad_neg = out.grad_queue.row_ptr(c);
      } else {
        const std::size_t j = batch.intra_negative_index(i, c - nq);
        neg = batch.queries.row(j);
        grad_neg = out.grad_queries.row_ptr(j);
      }
      detail::add_pair_grad(q, neg, 0.0, g, out.grad_queries.row_ptr(i), grad_neg);
    }
  }
  out.attraction_term = align;
  out.repulsion_term = uniform;
  out.value = align + uniform;
  return out;
}

// Per-query hinge on the gap between weighted positive and negative cost:
//   mean_i [ E_{pi+} c+_i - E_{pi-} c-_i + margin ]_+ .
inline LossEval cacr_margin_loss(const ContrastiveBatch& batch, const Temperatures& temps,
                                 const CostKind& cost, double margin,
                                 const WeightPolarity& polarity = {}, const GradFlow& flow = {}) {
  batch.validate();
  temps.validate();
  if (margin < 0.0) throw InvalidArgument("cacr_margin_loss: margin must be >= 0");
  const std::size_t m = batch.m(), kk = batch.k(), d = batch.dim(), nq = batch.queue_size();
  const std::size_t n = batch.negatives_per_query();
  if (n == 0) throw EmptyNegativeSupport("cacr_margin_loss: no negatives available");

  const Matrix d2p = detail::positive_sq_dists(batch);
  const Matrix d2n = detail::negative_sq_dists(batch);
  const double psign = sign_of(polarity.pos_sign) * temps.t_pos;
  const double nsign = sign_of(polarity.neg_sign) * temps.t_neg;
  const Matrix w = softmax_rows(detail::scaled(d2p, psign));
  const Matrix v = softmax_rows(detail::scaled(d2n, nsign));

  LossEval out;
  out.grad_queries = Matrix(m, d);
  out.grad_positives = Matrix(m * kk, d);
  out.grad_queue = Matrix(nq, d);
  const double inv_m = 1.0 / static_cast<double>(m);

  for (std::size_t i = 0; i < m; ++i) {
    std::vector<detail::CostEval> cep(kk), cen(n);
    double pos_cost = 0.0, neg_cost = 0.0;
    for (std::size_t k = 0; k < kk; ++k) {
      auto p = batch.positives.row(batch.positive_row(i, k));
      cep[k] = detail::eval_cost(cost, d2p(i, k), dot(batch.queries.row(i), p));
      pos_cost += w(i, k) * cep[k].value;
    }
    for (std::size_t c = 0; c < n; ++c) {
      auto neg = c < nq ? batch.queue_negatives.row(c)
                        : batch.queries.row(batch.intra_negative_index(i, c - nq));
      cen[c] = detail::eval_cost(cost, d2n(i, c), dot(batch.queries.row(i), neg));
      neg_cost += v(i, c) * cen[c].value;
    }
    const double gap = pos_cost - neg_cost + margin;
    if (gap <= 0.0) continue;
    out.value += inv_m * gap;
    out.attraction_term += inv_m * pos_cost;
    out.repulsion_term -= inv_m * neg_cost;

    for (std::size_t k = 0; k < kk; ++k) {
      const std::size_t pr = batch.positive_row(i, k);
      double c_sqdist = inv_m * w(i, k) * cep[k].d_sqdist;
      const double c_dot = inv_m * w(i, k) * cep[k].d_dot;
      if (flow.through_pos_weights) c_sqdist += inv_m * w(i, k) * (cep[k].value - pos_cost) * psign;
      detail::add_pair_grad(batch.queries.row(i), batch.positives.row(pr), c_sqdist, c_dot,
                            out.grad_queries.row_ptr(i), out.grad_positives.row_ptr(pr));
    }
    for (std::size_t c = 0; c < n; ++c) {
      double c_sqdist = -inv_m * v(i, c) * cen[c].d_sqdist;
      const double c_dot = -inv_m * v(i, c) * cen[c].d_dot;
      if (flow.through_neg_weights) c_sqdist += -inv_m * v(i, c) * (cen[c].value - neg_cost) * nsign;
      double* grad_neg = nullptr;
      std::span<const double> neg;
      if (c < nq) {
        neg = batch.queue_negatives.row(c);
        if (!batch.queue_detached) grad_neg = out.grad_queue.row_ptr(c);
      } else {
        const std::size_t j = batch.intra_negative_index(i, c - nq);
        neg = batch.queries.row(j);
        grad_neg = out.grad_queries.row_ptr(j);
      }
      detail::add_pair_grad(batch.queries.row(i), neg, c_sqdist, c_dot,
                            out.grad_queries.row_ptr(i), grad_neg);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss selector (one entry point for trainer / CLI / gradient probes)
// ---------------------------------------------------------------------------

enum class LossKind {
  kCacr,
  kCaOnly,
  kCrOnly,
  kCacrRbf,  // CA + log-domain RBF repulsion
  kCrRbf,
  kUaur,
  kInfoNce,
  kMultiPositiveInfoNce,
  kAlignUniform,
  kCacrMargin,
};

struct LossSpec {
  LossKind kind = LossKind::kCacr;
  Temperatures temps;
  CostKind cost;
  WeightPolarity polarity;
  GradFlow flow;
  double margin = 0.0;
  double t_rbf = 1.0;
  double align_exponent = 2.0;
};

inline LossEval evaluate_loss(const LossSpec& spec, const ContrastiveBatch& batch) {
  switch (spec.kind) {
    case LossKind::kCacr:
      return cacr_loss(batch, spec.temps, spec.cost, spec.polarity, spec.flow);
    case LossKind::kCaOnly:
      return ca_loss(batch, spec.temps.t_pos, spec.cost, spec.flow, spec.polarity);
    case LossKind::kCrOnly:
      return cr_loss(batch, spec.temps.t_neg, spec.cost, spec.flow, spec.polarity);
    case LossKind::kCacrRbf: {
      LossEval ca = ca_loss(batch, spec.temps.t_pos, spec.cost, spec.flow, spec.polarity);
      const LossEval cr = cr_rbf_loss(batch, spec.temps.t_neg, spec.t_rbf, spec.flow, spec.polarity);
      ca.value += cr.value;
      ca.repulsion_term = cr.repulsion_term;
      detail::add_grads(ca, cr);
      return ca;
    }
    case LossKind::kCrRbf:
      return cr_rbf_loss(batch, spec.temps.t_neg, spec.t_rbf, spec.flow, spec.polarity);
    case LossKind::kUaur:
      return uaur_loss(batch, spec.cost);
    case LossKind::kInfoNce:
      return infonce_loss(batch, spec.temps.tau);
    case LossKind::kMultiPositiveInfoNce:
      return multi_positive_infonce_loss(batch, spec.temps.tau);
    case LossKind::kAlignUniform:
      return align_uniform_loss(batch, spec.temps.tau, spec.align_exponent);
    case LossKind::kCacrMargin:
      return cacr_margin_loss(batch, spec.temps, spec.cost, spec.margin, spec.polarity, spec.flow);
  }
  throw InvalidArgument("evaluate_loss: unknown loss kind");
}

}  // namespace cacr
