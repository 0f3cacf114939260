// Experiment runner: train / eval / check / sweep over the synthetic
// contrastive-learning laboratory.
//
// Exit codes: 0 success, 2 config or IO problem, 3 integrity failure
// (checksum / config-hash mismatch), 4 numerical failure during training.

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cacr/config.hpp"
#include "cacr/data.hpp"
#include "cacr/encoder.hpp"
#include "cacr/eval.hpp"
#include "cacr/selfcheck.hpp"
#include "cacr/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitIntegrity = 3;
constexpr int kExitNumerical = 4;

struct RunPaths {
  fs::path dir;
  fs::path run_record() const { return dir / "run_record.csv"; }
  fs::path events() const { return dir / "events.jsonl"; }
  fs::path checkpoint() const { return dir / "checkpoint.bin"; }
  fs::path probe_result() const { return dir / "probe_result.json"; }
  fs::path embeddings() const { return dir / "embeddings.csv"; }
};

void write_events_jsonl(const cacr::RunRecord& record, std::uint64_t config_hash,
                        const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw cacr::IoError("cannot open " + path.string());
  for (const auto& r : record.rows) {
    json obj{{"epoch", r.epoch},       {"loss", r.loss},     {"ca", r.ca},
             {"cr", r.cr},             {"entropy", r.entropy}, {"mi", r.mi},
             {"align", r.align},       {"uniform", r.uniform}, {"seconds", r.seconds},
             {"config_hash", cacr::hash_hex(config_hash)}};
    out << obj.dump() << '\n';
  }
}

json probe_to_json(const cacr::ProbeResult& res) {
  return json{{"top1", res.top1},
              {"per_class_accuracy", res.per_class_accuracy},
              {"confusion", res.confusion},
              {"final_train_loss", res.final_train_loss}};
}

// Training half of a run; returns the trained result and writes all outputs.
cacr::TrainResult run_training(const cacr::ExperimentConfig& cfg, const RunPaths& paths) {
  const cacr::LabeledDataset pretrain = cacr::pretraining_dataset(cfg);
  cacr::TrainResult result = cacr::train(pretrain, cfg.encoder, cfg.augment, cfg.train);
  fs::create_directories(paths.dir);
  const std::string hash_comment = "config_hash=" + cacr::hash_hex(cfg.config_hash);
  result.record.write_csv(paths.run_record().string(), hash_comment);
  write_events_jsonl(result.record, cfg.config_hash, paths.events());
  cacr::save_checkpoint(paths.checkpoint().string(), cfg.encoder, result.params, cfg.config_hash);
  return result;
}

// Frozen-feature evaluation half; probes are trained on balanced splits.
json run_probes(const cacr::ExperimentConfig& cfg, const cacr::MlpParams& params,
                const RunPaths& paths) {
  const cacr::LabeledDataset probe_train = cacr::probe_train_dataset(cfg);
  const cacr::LabeledDataset probe_test = cacr::probe_test_dataset(cfg);
  const auto [train_emb, train_y] = cacr::extract_embeddings(cfg.encoder, params, probe_train);
  const auto [test_emb, test_y] = cacr::extract_embeddings(cfg.encoder, params, probe_test);

  const cacr::ProbeResult linear =
      cacr::linear_probe(train_emb, train_y, test_emb, test_y, cfg.probe);
  const cacr::ProbeResult knn =
      cacr::knn_probe(train_emb, train_y, test_emb, test_y, cfg.knn_k);

  fs::create_directories(paths.dir);
  const std::string hash_comment = "config_hash=" + cacr::hash_hex(cfg.config_hash);
  cacr::export_embeddings(test_emb, test_y, paths.embeddings().string(), hash_comment);

  json out{{"config_hash", cacr::hash_hex(cfg.config_hash)},
           {"linear", probe_to_json(linear)},
           {"knn", probe_to_json(knn)}};
  std::ofstream f(paths.probe_result());
  if (!f) throw cacr::IoError("cannot open " + paths.probe_result().string());
  f << out.dump(2) << '\n';
  return out;
}

int cmd_train(const std::string& config_path, const std::string& out_override) {
  cacr::ExperimentConfig cfg;
  try {
    cfg = cacr::load_experiment_config(config_path);
  } catch (const cacr::Error& e) {
    std::cerr << "error: " << config_path << ": " << e.what() << '\n';
    return kExitConfig;
  }
  if (!out_override.empty()) cfg.out_dir = out_override;
  const RunPaths paths{fs::path(cfg.out_dir)};
  try {
    run_training(cfg, paths);
  } catch (const cacr::CollapseDetected& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const cacr::NonFiniteLoss& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const cacr::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  std::cout << "trained " << cfg.train.epochs << " epochs -> " << paths.dir.string()
            << " (config_hash=" << cacr::hash_hex(cfg.config_hash) << ")\n";
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& config_path,
             const std::string& out_override) {
  cacr::ExperimentConfig cfg;
  try {
    cfg = cacr::load_experiment_config(config_path);
  } catch (const cacr::Error& e) {
    std::cerr << "error: " << config_path << ": " << e.what() << '\n';
    return kExitConfig;
  }
  if (!out_override.empty()) cfg.out_dir = out_override;
  cacr::Checkpoint ckpt;
  try {
    ckpt = cacr::load_checkpoint(checkpoint_path);
  } catch (const cacr::ChecksumMismatch& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIntegrity;
  } catch (const cacr::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  if (ckpt.config_hash != cfg.config_hash) {
    std::cerr << "error: checkpoint config hash " << cacr::hash_hex(ckpt.config_hash)
              << " does not match config " << cacr::hash_hex(cfg.config_hash) << '\n';
    return kExitIntegrity;
  }
  if (!(ckpt.spec == cfg.encoder)) {
    std::cerr << "error: checkpoint encoder spec does not match config\n";
    return kExitIntegrity;
  }
  const RunPaths paths{fs::path(cfg.out_dir)};
  try {
    const json out = run_probes(cfg, ckpt.params, paths);
    std::cout << "linear top1 " << out["linear"]["top1"] << ", knn top1 " << out["knn"]["top1"]
              << " -> " << paths.probe_result().string() << '\n';
  } catch (const cacr::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  return kExitOk;
}

int cmd_check(const std::string& sabotage) {
  cacr::SelfCheckOptions opts;
  opts.sabotage = sabotage;
  bool all_pass = true;
  for (const auto& res : cacr::run_invariant_suite(opts)) {
    std::cout << (res.pass ? "PASS " : "FAIL ") << res.group;
    if (!res.pass && !res.detail.empty()) std::cout << ": " << res.detail;
    std::cout << '\n';
    all_pass = all_pass && res.pass;
  }
  std::cout << (all_pass ? "all invariant groups passed\n" : "invariant failures detected\n");
  return all_pass ? kExitOk : 1;
}

struct SweepAxis {
  std::string name;
  std::vector<std::string> values;
};

struct SweepRun {
  std::size_t point = 0;
  cacr::ExperimentConfig cfg;
  std::vector<std::pair<std::string, std::string>> assignment;
  fs::path dir;
  double top1_linear = 0.0;
  double top1_knn = 0.0;
  bool failed = false;
  std::string error;
};

void apply_override(cacr::ExperimentConfig& cfg, const std::string& key,
                    const std::string& value) {
  if (key == "t_pos") cfg.train.loss.temps.t_pos = cacr::parse_double(value);
  else if (key == "t_neg") cfg.train.loss.temps.t_neg = cacr::parse_double(value);
  else if (key == "K") cfg.train.positives_per_query =
      static_cast<std::size_t>(cacr::parse_double(value));
  else if (key == "M") cfg.train.batch_size = static_cast<std::size_t>(cacr::parse_double(value));
  else if (key == "loss") cfg.train.loss.kind = cacr::detail::parse_loss_kind(value);
  else if (key == "imbalance") {
    if (value == "balanced") cfg.imbalance.kind = cacr::ImbalanceKind::kBalanced;
    else if (value == "linear") cfg.imbalance.kind = cacr::ImbalanceKind::kLinearDecay;
    else if (value == "exponential") cfg.imbalance.kind = cacr::ImbalanceKind::kExponentialDecay;
    else throw cacr::ConfigParse("grid imbalance: expected balanced/linear/exponential");
  } else if (key == "seed") {
    cfg.seed = static_cast<std::uint64_t>(cacr::parse_double(value));
    cfg.train.seed = cfg.seed;
  } else {
    throw cacr::ConfigParse("grid key '" + key + "' is not sweepable");
  }
}

int cmd_sweep(const std::string& config_path, const std::string& grid_path,
              const std::string& out_override) {
  cacr::ExperimentConfig base;
  std::vector<SweepAxis> axes;
  std::vector<std::string> seeds;
  try {
    base = cacr::load_experiment_config(config_path);
    cacr::IniDocument grid = cacr::IniDocument::parse_file(grid_path);
    for (const char* name : {"t_pos", "t_neg", "K", "M", "loss", "imbalance"})
      if (grid.has("", name)) axes.push_back({name, cacr::detail::split_list(grid.get("", name))});
    if (grid.has("", "seeds")) seeds = cacr::detail::split_list(grid.get("", "seeds"));
    grid.reject_unconsumed();
    if (seeds.empty()) seeds.push_back(std::to_string(base.seed));
  } catch (const cacr::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  if (!out_override.empty()) base.out_dir = out_override;

  // cartesian product over axes, seeds as an extra column
  std::vector<SweepRun> runs;
  std::vector<std::size_t> counter(axes.size(), 0);
  std::size_t point = 0;
  while (true) {
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      SweepRun run;
      run.point = point;
      run.cfg = base;
      for (std::size_t a = 0; a < axes.size(); ++a) {
        run.assignment.emplace_back(axes[a].name, axes[a].values[counter[a]]);
        apply_override(run.cfg, axes[a].name, axes[a].values[counter[a]]);
      }
      apply_override(run.cfg, "seed", seeds[s]);
      cacr::rehash(run.cfg);
      char pdir[32];
      std::snprintf(pdir, sizeof(pdir), "p%03zu", point);
      run.dir = fs::path(base.out_dir) / pdir / ("s" + seeds[s]);
      run.cfg.out_dir = run.dir.string();
      runs.push_back(std::move(run));
    }
    ++point;
    std::size_t a = 0;
    for (; a < axes.size(); ++a) {
      if (++counter[a] < axes[a].values.size()) break;
      counter[a] = 0;
    }
    if (a == axes.size()) break;
  }

  std::size_t n_threads = 1;
  if (const char* env = std::getenv("CACR_THREADS"))
    n_threads = std::max<std::size_t>(1, static_cast<std::size_t>(std::atoll(env)));
  n_threads = std::min(n_threads, runs.size());

  std::atomic<std::size_t> next{0};
  auto worker = [&runs, &next]() {
    while (true) {
      const std::size_t idx = next.fetch_add(1);
      if (idx >= runs.size()) return;
      SweepRun& run = runs[idx];
      try {
        const RunPaths paths{run.dir};
        const cacr::TrainResult tr = run_training(run.cfg, paths);
        const json probe = run_probes(run.cfg, tr.params, paths);
        run.top1_linear = probe["linear"]["top1"].get<double>();
        run.top1_knn = probe["knn"]["top1"].get<double>();
      } catch (const std::exception& e) {
        run.failed = true;
        run.error = e.what();
      }
    }
  };
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  fs::create_directories(base.out_dir);
  const fs::path summary_path = fs::path(base.out_dir) / "summary.csv";
  std::ofstream summary(summary_path);
  summary << "# config_hash=" << cacr::hash_hex(base.config_hash) << '\n';
  summary << "point,seed,t_pos,t_neg,K,M,loss,imbalance,top1_linear,top1_knn,dir\n";
  bool any_failed = false;
  for (const auto& run : runs) {
    const auto& t = run.cfg.train;
    const char* imb = run.cfg.imbalance.kind == cacr::ImbalanceKind::kBalanced ? "balanced"
                      : run.cfg.imbalance.kind == cacr::ImbalanceKind::kLinearDecay
                          ? "linear"
                          : "exponential";
    summary << run.point << ',' << run.cfg.seed << ','
            << cacr::to_decimal_string(t.loss.temps.t_pos) << ','
            << cacr::to_decimal_string(t.loss.temps.t_neg) << ',' << t.positives_per_query << ','
            << t.batch_size << ',' << cacr::detail::loss_kind_name(t.loss.kind) << ',' << imb
            << ',' << cacr::to_decimal_string(run.top1_linear) << ','
            << cacr::to_decimal_string(run.top1_knn) << ',' << run.dir.string() << '\n';
    if (run.failed) {
      std::cerr << "sweep run " << run.dir.string() << " failed: " << run.error << '\n';
      any_failed = true;
    }
  }
  std::cout << runs.size() << " sweep runs -> " << summary_path.string() << '\n';
  return any_failed ? kExitNumerical : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contrastive attraction / contrastive repulsion laboratory"};
  app.require_subcommand(1);

  std::string config_path, out_dir, checkpoint_path, grid_path, sabotage;

  auto* train = app.add_subcommand("train", "train an encoder from a config file");
  train->add_option("--config", config_path, "experiment config path")->required();
  train->add_option("--out", out_dir, "output directory override");

  auto* eval = app.add_subcommand("eval", "probe a trained checkpoint");
  eval->add_option("--checkpoint", checkpoint_path, "checkpoint path")->required();
  eval->add_option("--config", config_path, "experiment config path")->required();
  eval->add_option("--out", out_dir, "output directory override");

  auto* check = app.add_subcommand("check", "run the invariant self-check suite");
  check->add_option("--sabotage", sabotage,
                    "deliberately corrupt a kernel (test fixture for the failure path)");

  auto* sweep = app.add_subcommand("sweep", "grid of train+eval runs");
  sweep->add_option("--config", config_path, "experiment config path")->required();
  sweep->add_option("--grid", grid_path, "grid file path")->required();
  sweep->add_option("--out", out_dir, "output directory override");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  if (train->parsed()) return cmd_train(config_path, out_dir);
  if (eval->parsed()) return cmd_eval(checkpoint_path, config_path, out_dir);
  if (check->parsed()) return cmd_check(sabotage);
  if (sweep->parsed()) return cmd_sweep(config_path, grid_path, out_dir);
  return kExitConfig;
}
