#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "cacr/trainer.hpp"

using namespace cacr;

namespace {

SyntheticSpec toy_data_spec(std::size_t per_class = 24) {
  SyntheticSpec spec;
  spec.n_classes = 2;
  spec.dim = 2;
  spec.samples_per_class = per_class;
  spec.within_class_std = 0.2;
  spec.class_means = SyntheticSpec::circle_means(2, 2, 3.0);
  return spec;
}

MlpSpec toy_encoder() {
  MlpSpec spec;
  spec.layer_widths = {2, 8, 4};
  spec.activation = Activation::kTanh;
  return spec;
}

TrainConfig toy_config(std::size_t epochs = 2) {
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.positives_per_query = 2;
  cfg.epochs = epochs;
  cfg.lr = 0.05;
  cfg.val_fraction = 0.25;
  cfg.seed = 11;
  return cfg;
}

AugmentationSpec noise_aug(double std_dev = 0.05) {
  AugmentationSpec aug;
  aug.noise_std = std_dev;
  return aug;
}

bool params_equal(const MlpParams& a, const MlpParams& b) {
  if (a.weights.size() != b.weights.size()) return false;
  return a.flatten() == b.flatten();
}

}  // namespace

TEST_CASE("sgd_step: plain gradient descent when momentum and decay vanish") {
  MlpSpec spec = toy_encoder();
  MlpParams p = zeros_like(spec);
  p.weights[0](0, 0) = 1.0;
  MlpGrads g = zeros_like(spec);
  g.weights[0](0, 0) = 0.5;
  MlpGrads v = zeros_like(spec);
  sgd_step(p, g, 0.1, v, 0.0, 0.0);
  REQUIRE(p.weights[0](0, 0) == Catch::Approx(1.0 - 0.1 * 0.5).margin(1e-15));
}

TEST_CASE("sgd_step: zero gradient and zero decay leave params fixed, velocity decays") {
  MlpSpec spec = toy_encoder();
  MlpParams p = zeros_like(spec);
  p.weights[0](0, 0) = 2.0;
  MlpGrads v = zeros_like(spec);
  v.weights[0](0, 0) = 1.0;
  sgd_step(p, zeros_like(spec), 0.0, v, 0.9, 0.0);
  REQUIRE(p.weights[0](0, 0) == 2.0);
  REQUIRE(v.weights[0](0, 0) == Catch::Approx(0.9).margin(1e-15));
}

TEST_CASE("sgd_step: decay-only arithmetic") {
  MlpSpec spec = toy_encoder();
  MlpParams p = zeros_like(spec);
  p.weights[0](0, 0) = 1.0;
  MlpGrads v = zeros_like(spec);
  sgd_step(p, zeros_like(spec), 1.0, v, 0.0, 1e-4);
  REQUIRE(p.weights[0](0, 0) == Catch::Approx(1.0 - 1e-4).margin(1e-18));
}

TEST_CASE("weight-decay-only steps shrink parameter norms monotonically") {
  MlpSpec spec = toy_encoder();
  Rng rng(3);
  MlpParams p = init_params(spec, rng);
  MlpGrads v = zeros_like(spec);
  double prev = 0.0;
  for (double x : p.flatten()) prev += x * x;
  for (int step = 0; step < 10; ++step) {
    sgd_step(p, zeros_like(spec), 0.1, v, 0.0, 0.5);
    double cur = 0.0;
    for (double x : p.flatten()) cur += x * x;
    REQUIRE(cur < prev);
    prev = cur;
  }
}

TEST_CASE("momentum queue: FIFO eviction keeps the last N keys") {
  MomentumQueue q(6, 2);
  for (int batch = 0; batch < 4; ++batch) {
    Matrix keys(3, 2);
    for (std::size_t i = 0; i < 3; ++i) keys(i, 0) = batch * 3.0 + static_cast<double>(i);
    q.push_batch(keys);
  }
  REQUIRE(q.size() == 6);
  const Matrix snap = q.snapshot();
  // 12 keys pushed, capacity 6: keys 6..11 remain, oldest first
  for (std::size_t i = 0; i < 6; ++i) REQUIRE(snap(i, 0) == 6.0 + static_cast<double>(i));
}

TEST_CASE("momentum queue: partial fill is served as-is") {
  MomentumQueue q(8, 2);
  Matrix keys(3, 2, 1.0);
  q.push_batch(keys);
  REQUIRE(q.size() == 3);
  REQUIRE(q.snapshot().rows() == 3);
}

TEST_CASE("training is deterministic given config and seed") {
  Rng data_rng(5);
  const LabeledDataset ds = generate(toy_data_spec(), data_rng);
  const auto r1 = train_simclr_style(ds, toy_encoder(), noise_aug(), toy_config(3));
  const auto r2 = train_simclr_style(ds, toy_encoder(), noise_aug(), toy_config(3));
  REQUIRE(r1.record.rows.size() == 3);
  REQUIRE(params_equal(r1.params, r2.params));
  for (std::size_t e = 0; e < 3; ++e) {
    REQUIRE(r1.record.rows[e].loss == r2.record.rows[e].loss);
    REQUIRE(r1.record.rows[e].entropy == r2.record.rows[e].entropy);
    REQUIRE(r1.record.rows[e].mi == r2.record.rows[e].mi);
    REQUIRE(r1.record.rows[e].align == r2.record.rows[e].align);
    REQUIRE(r1.record.rows[e].uniform == r2.record.rows[e].uniform);
  }
}

TEST_CASE("zero epochs returns the initialization and an empty record") {
  Rng data_rng(7);
  const LabeledDataset ds = generate(toy_data_spec(), data_rng);
  const TrainConfig cfg = toy_config(0);
  const auto result = train_simclr_style(ds, toy_encoder(), noise_aug(), cfg);
  REQUIRE(result.record.rows.empty());
  Rng init_rng = Rng(cfg.seed).split("init");
  const MlpParams expect = init_params(toy_encoder(), init_rng);
  REQUIRE(params_equal(result.params, expect));
}

TEST_CASE("record rows are finite and the loss components add up") {
  Rng data_rng(9);
  const LabeledDataset ds = generate(toy_data_spec(), data_rng);
  TrainConfig cfg = toy_config(2);
  cfg.loss.kind = LossKind::kCacr;
  const auto result = train_simclr_style(ds, toy_encoder(), noise_aug(), cfg);
  for (const auto& row : result.record.rows) {
    REQUIRE(std::isfinite(row.loss));
    REQUIRE(std::isfinite(row.entropy));
    REQUIRE(std::isfinite(row.uniform));
    REQUIRE(row.loss == Catch::Approx(row.ca + row.cr).margin(1e-9));
    // entropy + mi = ln(M - 1) per diagnostic row
    REQUIRE(row.entropy + row.mi ==
            Catch::Approx(std::log(static_cast<double>(cfg.batch_size - 1))).margin(1e-10));
  }
}

TEST_CASE("an all-zero dataset collapses the encoder and fails fast") {
  LabeledDataset ds;
  ds.n_classes = 2;
  ds.x = Matrix(16, 2);  // all zeros: zero-init biases give a vanishing embedding
  ds.labels.assign(16, 0);
  for (std::size_t i = 8; i < 16; ++i) ds.labels[i] = 1;
  REQUIRE_THROWS_AS(train_simclr_style(ds, toy_encoder(), AugmentationSpec{}, toy_config(1)),
                    CollapseDetected);
}

TEST_CASE("momentum mode: m = 0 makes the target track the online encoder") {
  Rng data_rng(13);
  const LabeledDataset ds = generate(toy_data_spec(), data_rng);
  TrainConfig cfg = toy_config(2);
  cfg.mode = TrainMode::kMomentumQueue;
  cfg.queue_size = 8;
  cfg.ema_momentum = 0.0;
  const auto result = train_momentum_queue(ds, toy_encoder(), noise_aug(), cfg);
  REQUIRE(result.target_params.has_value());
  REQUIRE(params_equal(*result.target_params, result.params));
}

TEST_CASE("momentum mode: m = 1 freezes the target (no gradient leak)") {
  Rng data_rng(17);
  const LabeledDataset ds = generate(toy_data_spec(), data_rng);
  TrainConfig cfg = toy_config(2);
  cfg.mode = TrainMode::kMomentumQueue;
  cfg.queue_size = 8;
  cfg.ema_momentum = 1.0;
  const auto result = train_momentum_queue(ds, toy_encoder(), noise_aug(), cfg);
  Rng init_rng = Rng(cfg.seed).split("init");
  const MlpParams init = init_params(toy_encoder(), init_rng);
  REQUIRE(result.target_params.has_value());
  REQUIRE(params_equal(*result.target_params, init));   // target untouched
  REQUIRE_FALSE(params_equal(result.params, init));     // online trained
}

TEST_CASE("momentum mode trains with a queue no larger than one batch") {
  Rng data_rng(19);
  const LabeledDataset ds = generate(toy_data_spec(), data_rng);
  TrainConfig cfg = toy_config(2);
  cfg.mode = TrainMode::kMomentumQueue;
  cfg.queue_size = cfg.batch_size;
  const auto result = train_momentum_queue(ds, toy_encoder(), noise_aug(), cfg);
  REQUIRE(result.record.rows.size() == 2);
  for (const auto& row : result.record.rows) REQUIRE(std::isfinite(row.loss));
}

TEST_CASE("learning-rate schedule defaults decay at the documented fractions") {
  TrainConfig cfg = toy_config(200);
  const auto schedule = cfg.effective_schedule();
  REQUIRE(schedule.size() == 3);
  REQUIRE(schedule[0].epoch == 155);
  REQUIRE(schedule[1].epoch == 170);
  REQUIRE(schedule[2].epoch == 185);
  for (const auto& entry : schedule) REQUIRE(entry.factor == Catch::Approx(0.1));

  TrainConfig custom = toy_config(10);
  custom.lr_schedule = {{4, 0.5}, {8, 0.5}};
  REQUIRE(custom.effective_schedule().size() == 2);
}

TEST_CASE("linear learning-rate scaling rule") {
  TrainConfig cfg = toy_config();
  cfg.lr = 0.0;
  cfg.batch_size = 256;
  REQUIRE(cfg.initial_lr() == Catch::Approx(0.12).margin(1e-15));
  cfg.batch_size = 64;
  REQUIRE(cfg.initial_lr() == Catch::Approx(0.03).margin(1e-15));
  cfg.lr = 0.5;
  REQUIRE(cfg.initial_lr() == 0.5);
}

TEST_CASE("run record CSV has the documented schema") {
  RunRecord record;
  EpochRow row;
  row.epoch = 0;
  row.loss = 1.5;
  row.seconds = 0.25;
  record.rows.push_back(row);
  const auto path = (std::filesystem::temp_directory_path() / "cacr_rr.csv").string();
  record.write_csv(path, "config_hash=0123");
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  REQUIRE(line == "# config_hash=0123");
  std::getline(in, line);
  REQUIRE(line == "epoch,loss,ca,cr,entropy,mi,align,uniform,seconds");
  std::getline(in, line);
  REQUIRE(line == "0,1.5,0,0,0,0,0,0,0.25");
  std::filesystem::remove(path);
}
