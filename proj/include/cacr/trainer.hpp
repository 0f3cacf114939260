#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cacr/data.hpp"
#include "cacr/diagnostics.hpp"
#include "cacr/encoder.hpp"
#include "cacr/errors.hpp"
#include "cacr/losses.hpp"
#include "cacr/matrix.hpp"
#include "cacr/rng.hpp"

namespace cacr {

enum class TrainMode { kSimClrStyle, kMomentumQueue };

struct LrScheduleEntry {
  std::size_t epoch;
  double factor;
};

struct TrainConfig {
  LossSpec loss;
  std::size_t batch_size = 64;         // M
  std::size_t positives_per_query = 1; // K
  std::size_t epochs = 200;
  double lr = 0.0;  // 0 -> linear scaling rule 0.12 * M / 256
  std::vector<LrScheduleEntry> lr_schedule;  // empty -> decay 0.1 at 77.5/85/92.5% of epochs
  double sgd_momentum = 0.9;
  double weight_decay = 1e-4;
  TrainMode mode = TrainMode::kSimClrStyle;
  std::size_t queue_size = 1024;
  double ema_momentum = 0.99;
  double val_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 2) throw InvalidArgument("TrainConfig: M must be >= 2");
    if (positives_per_query < 1) throw InvalidArgument("TrainConfig: K must be >= 1");
    if (lr < 0.0) throw InvalidArgument("TrainConfig: lr must be >= 0");
    if (!(sgd_momentum >= 0.0 && sgd_momentum < 1.0))
      throw InvalidArgument("TrainConfig: sgd_momentum must be in [0,1)");
    if (weight_decay < 0.0) throw InvalidArgument("TrainConfig: negative weight decay");
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
      throw InvalidArgument("TrainConfig: val_fraction must be in (0,1)");
    if (!(ema_momentum >= 0.0 && ema_momentum <= 1.0))
      throw InvalidArgument("TrainConfig: ema momentum must be in [0,1]");
    for (std::size_t i = 1; i < lr_schedule.size(); ++i)
      if (lr_schedule[i].epoch <= lr_schedule[i - 1].epoch)
        throw InvalidArgument("TrainConfig: schedule epochs must be strictly increasing");
  }

  double initial_lr() const {
    return lr > 0.0 ? lr : 0.12 * static_cast<double>(batch_size) / 256.0;
  }

  std::vector<LrScheduleEntry> effective_schedule() const {
    if (!lr_schedule.empty()) return lr_schedule;
    std::vector<LrScheduleEntry> s;
    for (double frac : {0.775, 0.85, 0.925}) {
      const auto e = static_cast<std::size_t>(frac * static_cast<double>(epochs));
      if (e > 0 && e < epochs && (s.empty() || e > s.back().epoch)) s.push_back({e, 0.1});
    }
    return s;
  }
};

struct EpochRow {
  std::size_t epoch = 0;
  double loss = 0.0;
  double ca = 0.0;
  double cr = 0.0;
  double entropy = 0.0;
  double mi = 0.0;
  double align = 0.0;
  double uniform = 0.0;
  double seconds = 0.0;
};

struct RunRecord {
  std::vector<EpochRow> rows;

  static constexpr const char* kCsvHeader = "epoch,loss,ca,cr,entropy,mi,align,uniform,seconds";

  void write_csv(const std::string& path, const std::string& header_comment = "") const {
    std::ofstream out(path);
    if (!out) throw IoError("RunRecord: cannot open " + path);
    if (!header_comment.empty()) out << "# " << header_comment << '\n';
    out << kCsvHeader << '\n';
    for (const auto& r : rows) {
      out << r.epoch << ',' << to_decimal_string(r.loss) << ',' << to_decimal_string(r.ca) << ','
          << to_decimal_string(r.cr) << ',' << to_decimal_string(r.entropy) << ','
          << to_decimal_string(r.mi) << ',' << to_decimal_string(r.align) << ','
          << to_decimal_string(r.uniform) << ',' << to_decimal_string(r.seconds) << '\n';
    }
    if (!out) throw IoError("RunRecord: write failed for " + path);
  }
};

// FIFO ring of momentum-encoder keys. Never exceeds capacity; a partially
// filled queue is served as-is.
class MomentumQueue {
 public:
  MomentumQueue(std::size_t capacity, std::size_t dim)
      : capacity_(capacity), buf_(capacity, dim) {}

  std::size_t size() const { return count_; }
  std::size_t capacity() const { return capacity_; }

  void push_batch(const Matrix& keys) {
    for (std::size_t i = 0; i < keys.rows(); ++i) {
      buf_.set_row(head_, keys.row(i));
      head_ = (head_ + 1) % capacity_;
      if (count_ < capacity_) ++count_;
    }
  }

  // Contents oldest-first.
  Matrix snapshot() const {
    Matrix out(count_, buf_.cols());
    const std::size_t start = count_ < capacity_ ? 0 : head_;
    for (std::size_t i = 0; i < count_; ++i)
      out.set_row(i, buf_.row((start + i) % capacity_));
    return out;
  }

 private:
  std::size_t capacity_;
  Matrix buf_;
  std::size_t head_ = 0;
  std::size_t count_ = 0;
};

// v <- momentum * v + (grad + weight_decay * param); param <- param - lr * v.
inline void sgd_step(MlpParams& params, const MlpGrads& grads, double lr, MlpGrads& velocity,
                     double momentum, double weight_decay) {
  if (params.weights.size() != grads.weights.size() ||
      params.weights.size() != velocity.weights.size())
    throw ShapeMismatch("sgd_step: layer count mismatch");
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    if (params.weights[l].size() != grads.weights[l].size())
      throw ShapeMismatch("sgd_step: weight shape mismatch");
    for (std::size_t t = 0; t < params.weights[l].size(); ++t) {
      double& v = velocity.weights[l].data()[t];
      double& p = params.weights[l].data()[t];
      v = momentum * v + (grads.weights[l].data()[t] + weight_decay * p);
      p -= lr * v;
    }
    for (std::size_t t = 0; t < params.biases[l].size(); ++t) {
      double& v = velocity.biases[l][t];
      double& p = params.biases[l][t];
      v = momentum * v + (grads.biases[l][t] + weight_decay * p);
      p -= lr * v;
    }
  }
}

struct TrainResult {
  MlpParams params;
  RunRecord record;
  std::optional<MlpParams> target_params;  // momentum-queue mode only
};

namespace detail {

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

inline Split split_train_val(std::size_t n, std::size_t batch_size, double val_fraction,
                             Rng rng) {
  auto perm = rng.permutation(n);
  std::size_t n_val = static_cast<std::size_t>(val_fraction * static_cast<double>(n));
  n_val = std::max(n_val, batch_size);  // at least one validation batch
  if (n_val + batch_size > n)
    throw DatasetTooSmall("train: dataset too small for one train and one validation batch");
  Split s;
  s.val.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.train.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_val), perm.end());
  return s;
}

// Deterministic per-epoch validation batches (fixed partition, fresh
// augmentation stream per epoch) pushed through the current encoder.
inline std::vector<ValidationBatch> validation_batches(const LabeledDataset& ds,
                                                       const AugmentationSpec& aug,
                                                       const std::vector<std::size_t>& val_idx,
                                                       std::size_t m, const MlpSpec& spec,
                                                       const MlpParams& params, Rng rng) {
  std::vector<ValidationBatch> out;
  for (std::size_t start = 0; start + m <= val_idx.size(); start += m) {
    std::span<const std::size_t> block(val_idx.data() + start, m);
    const RawContrastiveBatch raw = batch_from_indices(ds, aug, block, 1, rng);
    ValidationBatch vb;
    vb.queries = mlp_forward(spec, params, raw.queries).first.emb;
    vb.positives = mlp_forward(spec, params, raw.positives).first.emb;
    out.push_back(std::move(vb));
  }
  return out;
}

inline void check_finite_loss(const LossEval& ev) {
  if (!std::isfinite(ev.value) || !ev.grad_queries.all_finite() ||
      !ev.grad_positives.all_finite())
    throw NonFiniteLoss("train: loss or gradient is not finite");
}

inline void accumulate_embedding_grads(const MlpSpec& spec, const MlpParams& params,
                                       const ForwardCache& cache, const Matrix& grad_rows,
                                       MlpGrads& into) {
  const MlpGrads g = mlp_backward(spec, params, cache, grad_rows);
  for (std::size_t l = 0; l < into.weights.size(); ++l) {
    for (std::size_t t = 0; t < into.weights[l].size(); ++t)
      into.weights[l].data()[t] += g.weights[l].data()[t];
    for (std::size_t t = 0; t < into.biases[l].size(); ++t)
      into.biases[l][t] += g.biases[l][t];
  }
}

}  // namespace detail

// Shared training loop. SimCLR style: one encoder, intra-batch negatives.
// Momentum-queue style: online + EMA target encoder, keys from the target are
// positives (detached) and the FIFO queue extends the negative support.
inline TrainResult train(const LabeledDataset& dataset, const MlpSpec& encoder_spec,
                         const AugmentationSpec& aug, const TrainConfig& config) {
  config.validate();
  encoder_spec.validate();
  aug.validate();
  if (dataset.dim() != encoder_spec.input_dim())
    throw DimMismatch("train: dataset dimension != encoder input dimension");

  const std::size_t m = config.batch_size;
  const std::size_t k = config.positives_per_query;
  const bool momentum_mode = config.mode == TrainMode::kMomentumQueue;

  Rng root(config.seed);
  Rng init_rng = root.split("init");
  Rng train_rng = root.split("train");
  Rng val_rng = root.split("val");

  const auto split =
      detail::split_train_val(dataset.size(), m, config.val_fraction, root.split("valsplit"));

  MlpParams params = init_params(encoder_spec, init_rng);
  MlpParams target = params;  // EMA twin (momentum mode only)
  MlpGrads velocity = zeros_like(encoder_spec);
  MomentumQueue queue(std::max<std::size_t>(config.queue_size, 1), encoder_spec.output_dim());

  const double diag_tau = 1.0 / (2.0 * config.loss.temps.t_neg);

  TrainResult result;
  double lr = config.initial_lr();
  const auto schedule = config.effective_schedule();
  std::size_t next_decay = 0;

  try {
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
      const auto t0 = std::chrono::steady_clock::now();
      while (next_decay < schedule.size() && schedule[next_decay].epoch == epoch) {
        lr *= schedule[next_decay].factor;
        ++next_decay;
      }

      Rng epoch_rng = train_rng.split(epoch);
      std::vector<std::size_t> order = split.train;
      epoch_rng.shuffle(order);

      double loss_sum = 0.0, ca_sum = 0.0, cr_sum = 0.0;
      std::size_t n_batches = 0;
      for (std::size_t start = 0; start + m <= order.size(); start += m, ++n_batches) {
        std::span<const std::size_t> block(order.data() + start, m);
        const RawContrastiveBatch raw = batch_from_indices(dataset, aug, block, k, epoch_rng);

        ContrastiveBatch batch;
        batch.k_per_query = k;
        MlpGrads grads = zeros_like(encoder_spec);
        if (!momentum_mode) {
          auto [qz, qcache] = mlp_forward(encoder_spec, params, raw.queries);
          auto [pz, pcache] = mlp_forward(encoder_spec, params, raw.positives);
          batch.queries = std::move(qz.emb);
          batch.positives = std::move(pz.emb);
          const LossEval ev = evaluate_loss(config.loss, batch);
          detail::check_finite_loss(ev);
          loss_sum += ev.value;
          ca_sum += ev.attraction_term;
          cr_sum += ev.repulsion_term;
          detail::accumulate_embedding_grads(encoder_spec, params, qcache, ev.grad_queries, grads);
          detail::accumulate_embedding_grads(encoder_spec, params, pcache, ev.grad_positives,
                                             grads);
        } else {
          auto [qz, qcache] = mlp_forward(encoder_spec, params, raw.queries);
          // keys come from the EMA target and stay detached
          auto keys = mlp_forward(encoder_spec, target, raw.positives).first.emb;
          batch.queries = std::move(qz.emb);
          batch.positives = keys;
          batch.queue_negatives = queue.snapshot();
          batch.queue_detached = true;
          const LossEval ev = evaluate_loss(config.loss, batch);
          detail::check_finite_loss(ev);
          loss_sum += ev.value;
          ca_sum += ev.attraction_term;
          cr_sum += ev.repulsion_term;
          detail::accumulate_embedding_grads(encoder_spec, params, qcache, ev.grad_queries, grads);

          sgd_step(params, grads, lr, velocity, config.sgd_momentum, config.weight_decay);
          // enqueue the keys of the last positive view, dequeue the oldest
          Matrix last_view(m, encoder_spec.output_dim());
          for (std::size_t i = 0; i < m; ++i)
            last_view.set_row(i, keys.row(i * k + (k - 1)));
          queue.push_batch(last_view);
          ema_update(target, params, config.ema_momentum);
          continue;
        }
        sgd_step(params, grads, lr, velocity, config.sgd_momentum, config.weight_decay);
      }

      const auto diag_batches = detail::validation_batches(
          dataset, aug, split.val, m, encoder_spec, params, val_rng.split(epoch));
      const DiagnosticRow diag =
          epoch_diagnostics(diag_batches, config.loss.temps.t_neg, diag_tau);

      EpochRow row;
      row.epoch = epoch;
      row.loss = n_batches ? loss_sum / static_cast<double>(n_batches) : 0.0;
      row.ca = n_batches ? ca_sum / static_cast<double>(n_batches) : 0.0;
      row.cr = n_batches ? cr_sum / static_cast<double>(n_batches) : 0.0;
      row.entropy = diag.entropy;
      row.mi = diag.mi;
      row.align = diag.alignment;
      row.uniform = diag.uniformity;
      row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      result.record.rows.push_back(row);
    }
  } catch (const ZeroNorm&) {
    throw CollapseDetected("train: encoder output collapsed to zero norm");
  }

  result.params = std::move(params);
  if (momentum_mode) result.target_params = std::move(target);
  return result;
}

inline TrainResult train_simclr_style(const LabeledDataset& dataset, const MlpSpec& spec,
                                      const AugmentationSpec& aug, TrainConfig config) {
  config.mode = TrainMode::kSimClrStyle;
  return train(dataset, spec, aug, config);
}

inline TrainResult train_momentum_queue(const LabeledDataset& dataset, const MlpSpec& spec,
                                        const AugmentationSpec& aug, TrainConfig config) {
  config.mode = TrainMode::kMomentumQueue;
  return train(dataset, spec, aug, config);
}

}  // namespace cacr
