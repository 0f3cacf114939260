#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "cacr/config.hpp"

using namespace cacr;

namespace {

const char* kBaseConfig = R"cfg(
# toy experiment
[data]
n_classes = 4
dim = 2
samples_per_class = 30
within_class_std = 0.25
mean_radius = 3.0
imbalance = balanced

[augment]
noise_std = 0.1

[encoder]
widths = 2,16,4
activation = tanh

[train]
loss = cacr
t_pos = 1.0
t_neg = 2.0
M = 8
K = 2
epochs = 2
val_fraction = 0.25

[eval]
probe_epochs = 20
knn_k = 3

[run]
out_dir = /tmp/cacr_cfg_test
seed = 7
)cfg";

std::string write_temp(const std::string& text, const std::string& name) {
  const auto path = (std::filesystem::temp_directory_path() / name).string();
  std::ofstream out(path);
  out << text;
  return path;
}

}  // namespace

TEST_CASE("config parses with defaults filled in") {
  const auto path = write_temp(kBaseConfig, "cacr_base.ini");
  const ExperimentConfig cfg = load_experiment_config(path);
  REQUIRE(cfg.data.n_classes == 4);
  REQUIRE(cfg.data.samples_per_class == 30);
  REQUIRE(cfg.encoder.layer_widths == std::vector<std::size_t>{2, 16, 4});
  REQUIRE(cfg.encoder.activation == Activation::kTanh);
  REQUIRE(cfg.train.loss.kind == LossKind::kCacr);
  REQUIRE(cfg.train.loss.temps.t_neg == 2.0);
  REQUIRE(cfg.train.batch_size == 8);
  REQUIRE(cfg.train.positives_per_query == 2);
  REQUIRE(cfg.train.seed == 7);
  REQUIRE(cfg.knn_k == 3);
  REQUIRE(cfg.out_dir == "/tmp/cacr_cfg_test");
  // defaults
  REQUIRE(cfg.train.sgd_momentum == 0.9);
  REQUIRE(cfg.train.weight_decay == 1e-4);
  REQUIRE(cfg.train.loss.flow.through_pos_weights == false);
  REQUIRE(cfg.train.loss.flow.through_neg_weights == true);
  REQUIRE(cfg.imbalance.kind == ImbalanceKind::kBalanced);
  std::filesystem::remove(path);
}

TEST_CASE("unknown keys are hard errors") {
  std::string bad = kBaseConfig;
  bad += "\n[train]\n";
  // duplicate section is fine; unknown key is not
  const auto path = write_temp(std::string(kBaseConfig) + "\n[train]\nlearning_rate_typo = 3\n",
                               "cacr_unknown.ini");
  REQUIRE_THROWS_AS(load_experiment_config(path), ConfigParse);
  std::filesystem::remove(path);
}

TEST_CASE("malformed lines and duplicate keys are rejected") {
  const auto p1 = write_temp("[data\nn_classes = 2\n", "cacr_bad1.ini");
  REQUIRE_THROWS_AS(IniDocument::parse_file(p1), ConfigParse);
  const auto p2 = write_temp("[data]\nn_classes\n", "cacr_bad2.ini");
  REQUIRE_THROWS_AS(IniDocument::parse_file(p2), ConfigParse);
  const auto p3 = write_temp("[data]\nn_classes = 2\nn_classes = 3\n", "cacr_bad3.ini");
  REQUIRE_THROWS_AS(IniDocument::parse_file(p3), ConfigParse);
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
  std::filesystem::remove(p3);
}

TEST_CASE("config hash is stable across formatting but tracks semantics") {
  const auto p1 = write_temp(kBaseConfig, "cacr_h1.ini");
  const ExperimentConfig c1 = load_experiment_config(p1);

  // same semantics, different comments/whitespace
  std::string reformatted = kBaseConfig;
  reformatted += "\n# trailing comment\n";
  const auto p2 = write_temp(reformatted, "cacr_h2.ini");
  const ExperimentConfig c2 = load_experiment_config(p2);
  REQUIRE(c1.config_hash == c2.config_hash);

  // changing a hyperparameter changes the hash
  std::string changed = kBaseConfig;
  const auto pos = changed.find("t_neg = 2.0");
  changed.replace(pos, 11, "t_neg = 3.0");
  const auto p3 = write_temp(changed, "cacr_h3.ini");
  const ExperimentConfig c3 = load_experiment_config(p3);
  REQUIRE(c1.config_hash != c3.config_hash);

  // the out_dir does not participate in the hash
  std::string moved = kBaseConfig;
  const auto mpos = moved.find("/tmp/cacr_cfg_test");
  moved.replace(mpos, 18, "/tmp/cacr_elsewhre");
  const auto p4 = write_temp(moved, "cacr_h4.ini");
  REQUIRE(load_experiment_config(p4).config_hash == c1.config_hash);

  for (const auto& p : {p1, p2, p3, p4}) std::filesystem::remove(p);
}

TEST_CASE("rehash after a sweep-style override changes the hash") {
  const auto path = write_temp(kBaseConfig, "cacr_rehash.ini");
  ExperimentConfig cfg = load_experiment_config(path);
  const auto h0 = cfg.config_hash;
  cfg.train.loss.temps.t_neg = 0.9;
  rehash(cfg);
  REQUIRE(cfg.config_hash != h0);
  std::filesystem::remove(path);
}

TEST_CASE("encoder width must match the data dimension") {
  std::string bad = kBaseConfig;
  const auto pos = bad.find("widths = 2,16,4");
  bad.replace(pos, 15, "widths = 3,16,4");
  const auto path = write_temp(bad, "cacr_dim.ini");
  REQUIRE_THROWS_AS(load_experiment_config(path), ConfigParse);
  std::filesystem::remove(path);
}

TEST_CASE("probe dataset helpers stay balanced under imbalanced pre-training") {
  std::string imb = kBaseConfig;
  const auto pos = imb.find("imbalance = balanced");
  imb.replace(pos, 20, "imbalance = exponential");
  const auto path = write_temp(imb, "cacr_imb.ini");
  const ExperimentConfig cfg = load_experiment_config(path);

  const LabeledDataset pre = pretraining_dataset(cfg);
  const auto counts = pre.class_counts();
  REQUIRE(counts.front() == 30);
  REQUIRE(counts.back() < counts.front());  // long-tail kept fractions

  const LabeledDataset ptrain = probe_train_dataset(cfg);
  for (std::size_t c : ptrain.class_counts()) REQUIRE(c == 30);
  const LabeledDataset ptest = probe_test_dataset(cfg);
  for (std::size_t c : ptest.class_counts()) REQUIRE(c == 6);
  std::filesystem::remove(path);
}

TEST_CASE("pretraining dataset is a pure function of the seed") {
  const auto path = write_temp(kBaseConfig, "cacr_det.ini");
  const ExperimentConfig cfg = load_experiment_config(path);
  const LabeledDataset a = pretraining_dataset(cfg);
  const LabeledDataset b = pretraining_dataset(cfg);
  REQUIRE(a.x.data() == b.x.data());
  REQUIRE(a.labels == b.labels);
  std::filesystem::remove(path);
}
