#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "cacr/data.hpp"
#include "cacr/eval.hpp"
#include "cacr/reference.hpp"
#include "cacr/rng.hpp"
#include "cacr/selfcheck.hpp"

using namespace cacr;

namespace {

// one-hot unit embeddings: perfectly separable by class
std::pair<Matrix, std::vector<int>> one_hot_embeddings(std::size_t per_class, std::size_t c) {
  Matrix emb(per_class * c, c);
  std::vector<int> labels(per_class * c);
  for (std::size_t cls = 0; cls < c; ++cls)
    for (std::size_t s = 0; s < per_class; ++s) {
      emb(cls * per_class + s, cls) = 1.0;
      labels[cls * per_class + s] = static_cast<int>(cls);
    }
  return {emb, labels};
}

}  // namespace

TEST_CASE("extract_embeddings: shapes, unit rows, determinism") {
  MlpSpec spec;
  spec.layer_widths = {2, 6, 3};
  Rng rng(3);
  const MlpParams params = init_params(spec, rng);
  SyntheticSpec dspec;
  dspec.n_classes = 2;
  dspec.dim = 2;
  dspec.samples_per_class = 7;
  dspec.within_class_std = 0.1;
  dspec.class_means = SyntheticSpec::circle_means(2, 2, 2.0);
  Rng drng(5);
  const LabeledDataset ds = generate(dspec, drng);

  const auto [emb, labels] = extract_embeddings(spec, params, ds);
  REQUIRE(emb.rows() == 14);
  REQUIRE(emb.cols() == 3);
  REQUIRE(labels == ds.labels);
  for (std::size_t i = 0; i < emb.rows(); ++i)
    REQUIRE(std::abs(norm(emb.row(i)) - 1.0) < 1e-9);
  const auto [emb2, labels2] = extract_embeddings(spec, params, ds);
  REQUIRE(emb.data() == emb2.data());
}

TEST_CASE("linear probe is perfect on separable embeddings") {
  const auto [train_emb, train_y] = one_hot_embeddings(10, 4);
  const auto [test_emb, test_y] = one_hot_embeddings(5, 4);
  ProbeConfig cfg;
  cfg.epochs = 100;
  cfg.lr = 1.0;
  cfg.l2_reg = 0.0;
  const ProbeResult res = linear_probe(train_emb, train_y, test_emb, test_y, cfg);
  REQUIRE(res.top1 == 1.0);
  for (double acc : res.per_class_accuracy) REQUIRE(acc == 1.0);
  // confusion row sums equal per-class test counts, total = test size
  std::size_t total = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    std::size_t row_sum = 0;
    for (std::size_t j = 0; j < 4; ++j) row_sum += res.confusion[i][j];
    REQUIRE(row_sum == 5);
    total += row_sum;
  }
  REQUIRE(total == test_emb.rows());
}

TEST_CASE("linear probe on shuffled labels sits at chance level") {
  Rng rng(17);
  double mean_top1 = 0.0;
  const int n_seeds = 10;
  for (int seed = 0; seed < n_seeds; ++seed) {
    Rng trial_rng = rng.split(seed);
    Matrix train_emb = selfcheck::random_unit_rows(trial_rng, 160, 6);
    Matrix test_emb = selfcheck::random_unit_rows(trial_rng, 80, 6);
    std::vector<int> train_y(160), test_y(80);
    for (auto& y : train_y) y = static_cast<int>(trial_rng.below(4));
    for (auto& y : test_y) y = static_cast<int>(trial_rng.below(4));
    ProbeConfig cfg;
    cfg.epochs = 60;
    cfg.lr = 0.5;
    const ProbeResult res = linear_probe(train_emb, train_y, test_emb, test_y, cfg);
    mean_top1 += res.top1;
  }
  mean_top1 /= n_seeds;
  REQUIRE(mean_top1 > 0.15);
  REQUIRE(mean_top1 < 0.35);
}

TEST_CASE("probe training objective decreases and its gradient is exact") {
  Rng rng(23);
  Matrix emb = selfcheck::random_unit_rows(rng, 6, 3);
  std::vector<int> y{0, 1, 2, 0, 1, 2};

  // finite differences on the full objective (cross-entropy + ridge)
  detail::LogRegState state{Matrix(3, 3), std::vector<double>(3, 0.0)};
  Rng wrng(29);
  for (double& v : state.w.data()) v = 0.1 * wrng.normal();
  detail::LogRegState grads;
  detail::logreg_objective(state, emb, y, 0.01, &grads);
  auto flat_obj = [&]() { return detail::logreg_objective(state, emb, y, 0.01, nullptr); };
  const auto rw = reference::check_gradient(state.w.data(), grads.w.data(), flat_obj, 1e-6, 1e-9);
  REQUIRE(rw.ok);
  const auto rb = reference::check_gradient(state.b, grads.b, flat_obj, 1e-6, 1e-9);
  REQUIRE(rb.ok);

  // the probe keeps its training loss non-increasing even with a huge lr
  ProbeConfig cfg;
  cfg.epochs = 40;
  cfg.lr = 64.0;  // forces the halving path
  const ProbeResult res = linear_probe(emb, y, emb, y, cfg);
  REQUIRE(res.final_train_loss <= std::log(3.0) + 1e-12);  // zero-init loss is ln C
}

TEST_CASE("probe final loss is invariant under a consistent rotation") {
  Rng rng(31);
  Matrix train_emb = selfcheck::random_unit_rows(rng, 40, 2);
  Matrix test_emb = selfcheck::random_unit_rows(rng, 20, 2);
  std::vector<int> train_y(40), test_y(20);
  for (std::size_t i = 0; i < 40; ++i) train_y[i] = train_emb(i, 0) > 0 ? 1 : 0;
  for (std::size_t i = 0; i < 20; ++i) test_y[i] = test_emb(i, 0) > 0 ? 1 : 0;

  ProbeConfig cfg;
  cfg.epochs = 80;
  const ProbeResult base = linear_probe(train_emb, train_y, test_emb, test_y, cfg);

  const double theta = 0.7;
  auto rotate = [&](Matrix m) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
      const double x = m(i, 0), y = m(i, 1);
      m(i, 0) = std::cos(theta) * x - std::sin(theta) * y;
      m(i, 1) = std::sin(theta) * x + std::cos(theta) * y;
    }
    return m;
  };
  const ProbeResult rotated =
      linear_probe(rotate(train_emb), train_y, rotate(test_emb), test_y, cfg);
  REQUIRE(rotated.final_train_loss == Catch::Approx(base.final_train_loss).margin(1e-6));
  REQUIRE(rotated.top1 == Catch::Approx(base.top1).margin(0.01 + 1e-12));
}

TEST_CASE("knn probe basics: exact hit, separable clusters, tie rule") {
  const auto [train_emb, train_y] = one_hot_embeddings(3, 3);
  // k=1 with a test point equal to a train point returns that label
  Matrix probe(1, 3);
  probe(0, 2) = 1.0;
  const ProbeResult exact = knn_probe(train_emb, train_y, probe, {2}, 1);
  REQUIRE(exact.top1 == 1.0);

  // separable clusters classify perfectly
  const auto [test_emb, test_y] = one_hot_embeddings(2, 3);
  REQUIRE(knn_probe(train_emb, train_y, test_emb, test_y, 3).top1 == 1.0);

  // k = train size with balanced labels and a symmetric test point: the
  // summed-distance tie-break, then smallest class index, picks class 0
  Matrix center(1, 3, 1.0 / std::sqrt(3.0));
  const ProbeResult tie = knn_probe(train_emb, train_y, center, {0}, 9);
  REQUIRE(tie.top1 == 1.0);
}

TEST_CASE("knn probe on the training set itself is perfect at k=1") {
  Rng rng(37);
  Matrix emb = selfcheck::random_unit_rows(rng, 30, 4);
  std::vector<int> y(30);
  for (auto& v : y) v = static_cast<int>(rng.below(3));
  REQUIRE(knn_probe(emb, y, emb, y, 1).top1 == 1.0);  // no self-exclusion by design
}

TEST_CASE("knn probe validates k") {
  const auto [emb, y] = one_hot_embeddings(2, 2);
  REQUIRE_THROWS_AS(knn_probe(emb, y, emb, y, 0), InvalidArgument);
  REQUIRE_THROWS_AS(knn_probe(emb, y, emb, y, 5), InvalidArgument);
}

TEST_CASE("embedding export round-trips and handles empty batches") {
  Rng rng(41);
  Matrix emb = selfcheck::random_unit_rows(rng, 3, 2);
  const std::vector<int> labels{2, 0, 1};
  const auto path = (std::filesystem::temp_directory_path() / "cacr_emb.csv").string();
  export_embeddings(emb, labels, path);
  const LabeledDataset back = read_dataset_csv(path);
  REQUIRE(back.labels == labels);
  for (std::size_t t = 0; t < emb.size(); ++t)
    REQUIRE(std::abs(back.x.data()[t] - emb.data()[t]) < 1e-12);

  // N=3, d=2: four lines including the header
  std::ifstream in(path);
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) ++lines;
  REQUIRE(lines == 4);
  in.close();

  export_embeddings(Matrix(0, 2), {}, path);
  const LabeledDataset empty = read_dataset_csv(path);
  REQUIRE(empty.size() == 0);
  std::filesystem::remove(path);
}

TEST_CASE("probe rejects mismatched label counts") {
  const auto [emb, y] = one_hot_embeddings(2, 2);
  std::vector<int> short_y(y.begin(), y.end() - 1);
  ProbeConfig cfg;
  REQUIRE_THROWS_AS(linear_probe(emb, short_y, emb, y, cfg), LabelMismatch);
  REQUIRE_THROWS_AS(knn_probe(emb, y, emb, short_y, 1), LabelMismatch);
}
