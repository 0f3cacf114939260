#pragma once

// Invariant suite behind the `check` subcommand: normalization, oracle
// equivalence against the reference loops, degenerate limits, the entropy /
// mutual-information identities, the per-batch Jensen inequality, polarity
// ablation, log-domain consistency and finite-difference gradient checks.

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "cacr/diagnostics.hpp"
#include "cacr/losses.hpp"
#include "cacr/matrix.hpp"
#include "cacr/reference.hpp"
#include "cacr/rng.hpp"

namespace cacr {

struct CheckResult {
  std::string group;
  bool pass = true;
  std::string detail;
};

struct SelfCheckOptions {
  std::uint64_t seed = 20240915;
  // Name of a kernel to deliberately corrupt; exercises the failure path so
  // a broken build is reported by group name rather than silently passing.
  std::string sabotage;
};

namespace selfcheck {

inline Matrix random_unit_rows(Rng& rng, std::size_t rows, std::size_t dim) {
  Matrix m(rows, dim);
  for (double& v : m.data()) v = rng.normal();
  l2_normalize_rows(m);
  return m;
}

inline ContrastiveBatch random_batch(Rng& rng, std::size_t m, std::size_t k, std::size_t dim,
                                     std::size_t queue_n = 0, bool queue_detached = true) {
  ContrastiveBatch b;
  b.queries = random_unit_rows(rng, m, dim);
  b.positives = random_unit_rows(rng, m * k, dim);
  b.k_per_query = k;
  if (queue_n > 0) b.queue_negatives = random_unit_rows(rng, queue_n, dim);
  b.queue_detached = queue_detached;
  return b;
}

inline std::vector<LossSpec> all_loss_specs(bool include_flow_variants) {
  std::vector<LossSpec> specs;
  const std::vector<CostKind> costs = {CostKind::squared_euclidean(),
                                       CostKind::neg_inner_product(), CostKind::rbf(1.3)};
  const std::vector<GradFlow> flows =
      include_flow_variants ? std::vector<GradFlow>{{false, true}, {true, false}}
                            : std::vector<GradFlow>{{false, true}};
  for (const auto& flow : flows) {
    for (const auto& cost : costs) {
      for (LossKind kind : {LossKind::kCaOnly, LossKind::kCrOnly, LossKind::kCacr,
                            LossKind::kUaur, LossKind::kCacrMargin}) {
        LossSpec s;
        s.kind = kind;
        s.cost = cost;
        s.flow = flow;
        s.margin = 0.5;
        specs.push_back(s);
      }
    }
    for (LossKind kind : {LossKind::kCrRbf, LossKind::kCacrRbf, LossKind::kInfoNce,
                          LossKind::kMultiPositiveInfoNce, LossKind::kAlignUniform}) {
      LossSpec s;
      s.kind = kind;
      s.flow = flow;
      s.t_rbf = 0.8;
      specs.push_back(s);
    }
  }
  return specs;
}

inline CheckResult check_normalization(const SelfCheckOptions& opts) {
  CheckResult res{"normalization"};
  Rng rng = Rng(opts.seed).split("normalization");
  for (int trial = 0; trial < 50 && res.pass; ++trial) {
    const auto b = random_batch(rng, 2 + rng.below(6), 1 + rng.below(4), 2 + rng.below(4),
                                rng.below(5));
    const Temperatures temps{0.1 + 3.0 * rng.uniform(), 0.1 + 3.0 * rng.uniform(), 1.0};
    ConditionalWeights w = conditional_weights(b, temps);
    if (!opts.sabotage.empty() && opts.sabotage == "softmax") w.pos_w(0, 0) += 1e-3;
    for (const Matrix* mat : {&w.pos_w, &w.neg_w}) {
      for (std::size_t i = 0; i < mat->rows(); ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < mat->cols(); ++j) {
          const double v = (*mat)(i, j);
          sum += v;
          if (v < 0.0 || v > 1.0) res.pass = false;
        }
        if (std::abs(sum - 1.0) > 1e-12) res.pass = false;
      }
    }
    if (!res.pass) res.detail = "a conditional weight row failed to normalize";
  }
  return res;
}

inline bool requires_single_positive(LossKind kind) {
  return kind == LossKind::kInfoNce || kind == LossKind::kAlignUniform;
}

inline CheckResult check_oracle_equivalence(const SelfCheckOptions& opts) {
  CheckResult res{"oracle-equivalence"};
  Rng rng = Rng(opts.seed).split("oracle");
  const auto specs = all_loss_specs(false);
  for (int trial = 0; trial < 30 && res.pass; ++trial) {
    const auto b = random_batch(rng, 2 + rng.below(7), 1 + rng.below(4), 2 + rng.below(4),
                                rng.below(5));
    const auto b_k1 = random_batch(rng, 2 + rng.below(7), 1, 2 + rng.below(4), rng.below(5));
    for (const auto& spec : specs) {
      const ContrastiveBatch& batch = requires_single_positive(spec.kind) ? b_k1 : b;
      const double fast = evaluate_loss(spec, batch).value;
      const double naive = reference::loss_value(spec, batch);
      if (std::abs(fast - naive) > 1e-10) {
        res.pass = false;
        std::ostringstream os;
        os << "loss kind " << static_cast<int>(spec.kind) << ": " << fast << " vs " << naive;
        res.detail = os.str();
        break;
      }
    }
  }
  return res;
}

inline CheckResult check_metric_equivalence(const SelfCheckOptions& opts) {
  CheckResult res{"metric-equivalence"};
  Rng rng = Rng(opts.seed).split("metric");
  for (int trial = 0; trial < 50 && res.pass; ++trial) {
    const auto b = random_batch(rng, 3 + rng.below(5), 1 + rng.below(4), 2 + rng.below(4));
    const double t = 0.2 + 3.0 * rng.uniform();
    // weights from t * ||z - z'||^2 vs 2t * (-z . z'): identical on the sphere
    const Matrix via_dist = positive_weights(b, t);
    Matrix scores(b.m(), b.k());
    for (std::size_t i = 0; i < b.m(); ++i)
      for (std::size_t k = 0; k < b.k(); ++k)
        scores(i, k) = 2.0 * t * -dot(b.queries.row(i), b.positives.row(i * b.k() + k));
    const Matrix via_inner = softmax_rows(scores);
    for (std::size_t t2 = 0; t2 < via_dist.size(); ++t2)
      if (std::abs(via_dist.data()[t2] - via_inner.data()[t2]) > 1e-12) {
        res.pass = false;
        res.detail = "distance-metric and inner-product weights diverged";
      }
  }
  return res;
}

inline CheckResult check_degenerate_limits(const SelfCheckOptions& opts) {
  CheckResult res{"degenerate-limits"};
  Rng rng = Rng(opts.seed).split("degenerate");
  for (int trial = 0; trial < 40 && res.pass; ++trial) {
    const auto b = random_batch(rng, 3 + rng.below(4), 2 + rng.below(3), 2 + rng.below(4));
    // flat temperatures: CACR -> UAUR
    Temperatures flat{1e-8, 1e-8, 1.0};
    const double cacr = cacr_loss(b, flat, CostKind::squared_euclidean()).value;
    const double uaur = uaur_loss(b, CostKind::squared_euclidean()).value;
    if (std::abs(cacr - uaur) > 1e-6) {
      res.pass = false;
      res.detail = "flat-temperature CACR did not match UAUR";
      break;
    }
    // sharp temperatures: argmax weight lands on farthest positive / closest negative
    const Matrix wp = positive_weights(b, 50.0);
    const Matrix wn = negative_weights(b, 50.0);
    const Matrix d2p = detail::positive_sq_dists(b);
    const Matrix d2n = detail::negative_sq_dists(b);
    for (std::size_t i = 0; i < b.m(); ++i) {
      std::size_t arg_w = 0, arg_d = 0;
      for (std::size_t j = 1; j < wp.cols(); ++j) {
        if (wp(i, j) > wp(i, arg_w)) arg_w = j;
        if (d2p(i, j) > d2p(i, arg_d)) arg_d = j;
      }
      if (arg_w != arg_d) {
        res.pass = false;
        res.detail = "sharp positive weights missed the farthest positive";
      }
      arg_w = arg_d = 0;
      for (std::size_t j = 1; j < wn.cols(); ++j) {
        if (wn(i, j) > wn(i, arg_w)) arg_w = j;
        if (d2n(i, j) < d2n(i, arg_d)) arg_d = j;
      }
      if (arg_w != arg_d) {
        res.pass = false;
        res.detail = "sharp negative weights missed the closest negative";
      }
    }
  }
  return res;
}

inline CheckResult check_k1_reduction(const SelfCheckOptions& opts) {
  CheckResult res{"k1-reduction"};
  Rng rng = Rng(opts.seed).split("k1");
  for (int trial = 0; trial < 40 && res.pass; ++trial) {
    const auto b = random_batch(rng, 2 + rng.below(6), 1, 2 + rng.below(5));
    const Matrix w = positive_weights(b, 0.3 + 3.0 * rng.uniform());
    for (std::size_t i = 0; i < w.rows(); ++i)
      if (w(i, 0) != 1.0) {
        res.pass = false;
        res.detail = "K=1 positive weight is not an exact point mass";
      }
    // CA reduces to the plain mean positive cost
    const double ca = ca_loss(b, 1.0, CostKind::squared_euclidean()).value;
    double mean = 0.0;
    for (std::size_t i = 0; i < b.m(); ++i)
      mean += sq_dist(b.queries.row(i), b.positives.row(i));
    mean /= static_cast<double>(b.m());
    if (std::abs(ca - mean) > 1e-12) {
      res.pass = false;
      res.detail = "K=1 attraction did not equal the unweighted positive cost";
    }
  }
  return res;
}

inline CheckResult check_attraction_optimum(const SelfCheckOptions& opts) {
  CheckResult res{"attraction-optimum"};
  Rng rng = Rng(opts.seed).split("attraction-optimum");
  for (int trial = 0; trial < 20 && res.pass; ++trial) {
    const std::size_t m = 2 + rng.below(5), k = 1 + rng.below(3), d = 2 + rng.below(4);
    ContrastiveBatch b;
    b.queries = random_unit_rows(rng, m, d);
    b.k_per_query = k;
    b.positives = Matrix(m * k, d);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t kk = 0; kk < k; ++kk) b.positives.set_row(i * k + kk, b.queries.row(i));
    const LossEval at_opt = ca_loss(b, 1.0, CostKind::squared_euclidean());
    if (at_opt.value != 0.0) {
      res.pass = false;
      res.detail = "attraction loss nonzero with positives equal to queries";
    }
    for (double g : at_opt.grad_queries.data())
      if (g != 0.0) res.pass = false;
    // perturb one positive: loss must become strictly positive
    b.positives(0, 0) += 1e-3;
    if (!(ca_loss(b, 1.0, CostKind::squared_euclidean()).value > 0.0)) {
      res.pass = false;
      res.detail = "attraction loss stayed zero after perturbing a positive";
    }
  }
  return res;
}

inline CheckResult check_entropy_identities(const SelfCheckOptions& opts) {
  CheckResult res{"entropy-identities"};
  Rng rng = Rng(opts.seed).split("entropy-identities");
  for (int trial = 0; trial < 50 && res.pass; ++trial) {
    const auto b = random_batch(rng, 3 + rng.below(6), 1, 2 + rng.below(4), rng.below(6));
    const Matrix w = negative_weights(b, 0.2 + 3.0 * rng.uniform());
    const double n = static_cast<double>(w.cols());
    const double h = conditional_entropy(w);
    const double mi = empirical_mutual_information(w);
    if (std::abs(h + mi - std::log(n)) > 1e-10) {
      res.pass = false;
      res.detail = "entropy + mutual information != ln n";
    }
    // uniform rows maximize the entropy at exactly ln n
    Matrix uniform(w.rows(), w.cols(), 1.0 / n);
    if (std::abs(conditional_entropy(uniform) - std::log(n)) > 1e-12) {
      res.pass = false;
      res.detail = "uniform-row entropy != ln n";
    }
    if (h > std::log(n) + 1e-12) {
      res.pass = false;
      res.detail = "entropy exceeded ln n";
    }
  }
  return res;
}

inline CheckResult check_uniformity_bound(const SelfCheckOptions& opts) {
  CheckResult res{"uniformity-bound"};
  Rng rng = Rng(opts.seed).split("uniformity-bound");
  for (int trial = 0; trial < 200 && res.pass; ++trial) {
    const auto b = random_batch(rng, 3 + rng.below(6), 1, 2 + rng.below(5));
    const double t_neg = 0.2 + 3.0 * rng.uniform();
    const double tau = 0.2 + 2.0 * rng.uniform();
    const Matrix w = negative_weights(b, t_neg);
    const double n = static_cast<double>(w.cols());
    for (std::size_t i = 0; i < b.m(); ++i) {
      std::vector<double> s;
      for (std::size_t j = 0; j < b.m(); ++j)
        if (j != i) s.push_back(dot(b.queries.row(j), b.queries.row(i)));
      std::vector<double> scaled(s);
      for (double& v : scaled) v /= tau;
      const double lhs_log = logsumexp_row(scaled) - std::log(n);
      double kl = 0.0, mean_s = 0.0;
      for (std::size_t j = 0; j < s.size(); ++j) {
        kl += w(i, j) * std::log(n * w(i, j));
        mean_s += w(i, j) * s[j] / tau;
      }
      if (lhs_log + kl < mean_s - 1e-10) {
        res.pass = false;
        res.detail = "uniformity bound violated for a query row";
      }
    }
  }
  return res;
}

inline CheckResult check_polarity_ablation(const SelfCheckOptions& opts) {
  CheckResult res{"polarity-ablation"};
  Rng rng = Rng(opts.seed).split("polarity");
  for (int trial = 0; trial < 40 && res.pass; ++trial) {
    const auto b = random_batch(rng, 3 + rng.below(4), 2 + rng.below(3), 2 + rng.below(4));
    WeightPolarity flipped{DistanceSign::kMinusD, DistanceSign::kPlusD};
    const Matrix wp = positive_weights(b, 1.0, flipped);
    const Matrix wn = negative_weights(b, 1.0, flipped);
    const Matrix d2p = detail::positive_sq_dists(b);
    const Matrix d2n = detail::negative_sq_dists(b);
    for (std::size_t i = 0; i < b.m(); ++i) {
      std::size_t arg_w = 0, arg_d = 0;
      for (std::size_t j = 1; j < wp.cols(); ++j) {
        if (wp(i, j) > wp(i, arg_w)) arg_w = j;
        if (d2p(i, j) < d2p(i, arg_d)) arg_d = j;  // flipped: closest positive wins
      }
      if (arg_w != arg_d) res.pass = false;
      arg_w = arg_d = 0;
      for (std::size_t j = 1; j < wn.cols(); ++j) {
        if (wn(i, j) > wn(i, arg_w)) arg_w = j;
        if (d2n(i, j) > d2n(i, arg_d)) arg_d = j;  // flipped: farthest negative wins
      }
      if (arg_w != arg_d) res.pass = false;
    }
    if (!res.pass) res.detail = "flipped polarity did not reverse the argmax weights";
  }
  return res;
}

inline CheckResult check_rbf_log_domain(const SelfCheckOptions& opts) {
  CheckResult res{"rbf-log-domain"};
  Rng rng = Rng(opts.seed).split("rbf");
  for (int trial = 0; trial < 50 && res.pass; ++trial) {
    const auto b = random_batch(rng, 3 + rng.below(5), 1, 2 + rng.below(4), rng.below(4));
    const double t_neg = 0.2 + 2.0 * rng.uniform();
    const double t_rbf = 0.2 + 2.0 * rng.uniform();
    const double log_domain = cr_rbf_loss(b, t_neg, t_rbf).value;
    const double direct = reference::cr_rbf_value_direct(b, t_neg, t_rbf);
    if (std::abs(log_domain - direct) > 1e-10) {
      res.pass = false;
      res.detail = "log-domain RBF repulsion diverged from direct evaluation";
    }
    if (log_domain > 1e-12) {
      res.pass = false;
      res.detail = "RBF repulsion value exceeded zero";
    }
  }
  return res;
}

// The margin loss has a hinge kink per query; finite differences are only
// trustworthy when every per-query gap sits well away from zero.
inline bool margin_kink_nearby(const ContrastiveBatch& b, const LossSpec& s, double safety) {
  if (s.kind != LossKind::kCacrMargin) return false;
  const double psign = sign_of(s.polarity.pos_sign) * s.temps.t_pos;
  const double nsign = sign_of(s.polarity.neg_sign) * s.temps.t_neg;
  const Matrix w = softmax_rows(detail::scaled(detail::positive_sq_dists(b), psign));
  const Matrix v = softmax_rows(detail::scaled(detail::negative_sq_dists(b), nsign));
  for (std::size_t i = 0; i < b.m(); ++i) {
    double pos = 0.0, neg = 0.0;
    for (std::size_t k = 0; k < b.k(); ++k)
      pos += w(i, k) * reference::pair_cost(s.cost, b.queries.row(i),
                                            b.positives.row(i * b.k() + k));
    std::size_t c = 0;
    for (auto nrow : reference::negatives_of(b, i))
      neg += v(i, c++) * reference::pair_cost(s.cost, b.queries.row(i), nrow);
    if (std::abs(pos - neg + s.margin) < safety) return true;
  }
  return false;
}

inline CheckResult check_gradients(const SelfCheckOptions& opts) {
  CheckResult res{"gradient-checks"};
  Rng rng = Rng(opts.seed).split("grad");
  const auto specs = all_loss_specs(true);
  for (const auto& spec : specs) {
    ContrastiveBatch b;
    do {
      b = random_batch(rng, 3 + rng.below(3),
                       spec.kind == LossKind::kInfoNce || spec.kind == LossKind::kAlignUniform
                           ? 1
                           : 1 + rng.below(3),
                       2 + rng.below(4), rng.below(4), false);
    } while (margin_kink_nearby(b, spec, 1e-3));
    const LossEval ev = evaluate_loss(spec, b);
    // detached weight paths are held at their unperturbed values while the
    // finite differences wiggle the embeddings
    const auto frozen = reference::capture_frozen_weights(spec, b);
    auto run = [&]() { return reference::loss_value(spec, b, frozen); };
    const auto rq = reference::check_gradient(b.queries.data(), ev.grad_queries.data(), run);
    const auto rp = reference::check_gradient(b.positives.data(), ev.grad_positives.data(), run);
    bool ok = rq.ok && rp.ok;
    if (b.queue_size() > 0)
      ok = ok &&
           reference::check_gradient(b.queue_negatives.data(), ev.grad_queue.data(), run).ok;
    if (!ok) {
      res.pass = false;
      std::ostringstream os;
      os << "finite differences disagree for loss kind " << static_cast<int>(spec.kind);
      res.detail = os.str();
      break;
    }
  }
  return res;
}

inline CheckResult check_rng_determinism(const SelfCheckOptions& opts) {
  CheckResult res{"rng-determinism"};
  Rng a(opts.seed), b(opts.seed);
  for (int i = 0; i < 1000; ++i)
    if (a.next_u64() != b.next_u64()) {
      res.pass = false;
      res.detail = "same-seed streams diverged";
      return res;
    }
  Rng s1 = Rng(opts.seed).split("train");
  Rng s2 = Rng(opts.seed).split("train");
  for (int i = 0; i < 100; ++i)
    if (s1.normal() != s2.normal()) {
      res.pass = false;
      res.detail = "named sub-streams diverged";
    }
  return res;
}

}  // namespace selfcheck

inline std::vector<CheckResult> run_invariant_suite(const SelfCheckOptions& opts = {}) {
  return {
      selfcheck::check_normalization(opts),    selfcheck::check_oracle_equivalence(opts),
      selfcheck::check_metric_equivalence(opts), selfcheck::check_degenerate_limits(opts),
      selfcheck::check_k1_reduction(opts),     selfcheck::check_attraction_optimum(opts),
      selfcheck::check_entropy_identities(opts), selfcheck::check_uniformity_bound(opts),
      selfcheck::check_polarity_ablation(opts), selfcheck::check_rbf_log_domain(opts),
      selfcheck::check_gradients(opts),        selfcheck::check_rng_determinism(opts),
  };
}

}  // namespace cacr
