#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cacr/encoder.hpp"

namespace fs = std::filesystem;

namespace {

const std::string kCli = CACR_CLI_PATH;

int run_cli(const std::string& args, const std::string& log = "/dev/null") {
  const std::string cmd = kCli + " " + args + " > " + log + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// RunRecord CSV with the wall-time column removed (the one physically
// non-deterministic field).
std::string strip_seconds_column(const std::string& csv) {
  std::stringstream in(csv), out;
  std::string line;
  while (std::getline(in, line)) {
    const auto comma = line.rfind(',');
    out << (comma == std::string::npos ? line : line.substr(0, comma)) << '\n';
  }
  return out.str();
}

struct Scratch {
  fs::path dir;
  explicit Scratch(const std::string& name) : dir(fs::temp_directory_path() / name) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Scratch() { fs::remove_all(dir); }
  std::string path(const std::string& leaf) const { return (dir / leaf).string(); }
};

std::string tiny_config(const std::string& out_dir, int epochs = 2, int seed = 7) {
  std::ostringstream cfg;
  cfg << "[data]\nn_classes = 4\ndim = 2\nsamples_per_class = 20\nwithin_class_std = 0.25\n"
      << "[augment]\nnoise_std = 0.1\n"
      << "[encoder]\nwidths = 2,12,4\nactivation = tanh\n"
      << "[train]\nloss = cacr\nM = 8\nK = 2\nepochs = " << epochs
      << "\nval_fraction = 0.25\n"
      << "[eval]\nprobe_epochs = 30\nknn_k = 3\nprobe_test_per_class = 5\n"
      << "[run]\nout_dir = " << out_dir << "\nseed = " << seed << "\n";
  return cfg.str();
}

std::string write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  return path.string();
}

}  // namespace

TEST_CASE("train: missing config exits 2 and names the path") {
  Scratch scratch("cacr_cli_missing");
  const auto log = scratch.path("log.txt");
  const int code = run_cli("train --config /nonexistent/nope.ini", log);
  REQUIRE(code == 2);
  REQUIRE(slurp(log).find("/nonexistent/nope.ini") != std::string::npos);
}

TEST_CASE("train: epochs=0 writes an init checkpoint and an empty record") {
  Scratch scratch("cacr_cli_zero");
  const auto cfg = write_file(scratch.dir / "cfg.ini", tiny_config(scratch.path("out"), 0));
  REQUIRE(run_cli("train --config " + cfg) == 0);
  REQUIRE(fs::exists(scratch.path("out/checkpoint.bin")));
  const cacr::Checkpoint ckpt = cacr::load_checkpoint(scratch.path("out/checkpoint.bin"));
  REQUIRE(ckpt.spec.layer_widths == std::vector<std::size_t>{2, 12, 4});
  const std::string csv = slurp(scratch.path("out/run_record.csv"));
  // hash comment + header only
  REQUIRE(csv.find("epoch,loss") != std::string::npos);
  REQUIRE(csv.find("\n0,") == std::string::npos);
}

TEST_CASE("train twice with one seed: records match except wall time") {
  Scratch scratch("cacr_cli_det");
  const auto cfg1 = write_file(scratch.dir / "c1.ini", tiny_config(scratch.path("o1")));
  const auto cfg2 = write_file(scratch.dir / "c2.ini", tiny_config(scratch.path("o2")));
  REQUIRE(run_cli("train --config " + cfg1) == 0);
  REQUIRE(run_cli("train --config " + cfg2) == 0);
  const std::string a = slurp(scratch.path("o1/run_record.csv"));
  const std::string b = slurp(scratch.path("o2/run_record.csv"));
  REQUIRE(strip_seconds_column(a) == strip_seconds_column(b));
  REQUIRE(a.find("# config_hash=") == 0);

  // the event log mirrors the record, one JSON object per epoch
  const std::string events = slurp(scratch.path("o1/events.jsonl"));
  std::size_t event_lines = 0;
  std::stringstream es(events);
  std::string line;
  while (std::getline(es, line))
    if (!line.empty()) {
      REQUIRE(line.find("\"epoch\"") != std::string::npos);
      REQUIRE(line.find("\"config_hash\"") != std::string::npos);
      ++event_lines;
    }
  REQUIRE(event_lines == 2);
}

TEST_CASE("eval: produces probe JSON, repeated eval is identical") {
  Scratch scratch("cacr_cli_eval");
  const auto cfg = write_file(scratch.dir / "cfg.ini", tiny_config(scratch.path("out")));
  REQUIRE(run_cli("train --config " + cfg) == 0);
  REQUIRE(run_cli("eval --checkpoint " + scratch.path("out/checkpoint.bin") + " --config " + cfg) ==
          0);
  const std::string json1 = slurp(scratch.path("out/probe_result.json"));
  REQUIRE(json1.find("\"top1\"") != std::string::npos);
  REQUIRE(json1.find("config_hash") != std::string::npos);
  REQUIRE(fs::exists(scratch.path("out/embeddings.csv")));

  REQUIRE(run_cli("eval --checkpoint " + scratch.path("out/checkpoint.bin") + " --config " + cfg) ==
          0);
  REQUIRE(slurp(scratch.path("out/probe_result.json")) == json1);
}

TEST_CASE("eval: corrupt checkpoint exits 3") {
  Scratch scratch("cacr_cli_corrupt");
  const auto cfg = write_file(scratch.dir / "cfg.ini", tiny_config(scratch.path("out")));
  REQUIRE(run_cli("train --config " + cfg) == 0);
  // flip one byte mid-file
  const auto ckpt_path = scratch.path("out/checkpoint.bin");
  std::fstream f(ckpt_path, std::ios::in | std::ios::out | std::ios::binary);
  f.seekg(50);
  char byte;
  f.read(&byte, 1);
  byte = static_cast<char>(byte ^ 0x10);
  f.seekp(50);
  f.write(&byte, 1);
  f.close();
  REQUIRE(run_cli("eval --checkpoint " + ckpt_path + " --config " + cfg) == 3);
}

TEST_CASE("eval: config/checkpoint hash mismatch exits 3") {
  Scratch scratch("cacr_cli_mismatch");
  const auto cfg = write_file(scratch.dir / "cfg.ini", tiny_config(scratch.path("out")));
  REQUIRE(run_cli("train --config " + cfg) == 0);
  const auto other =
      write_file(scratch.dir / "other.ini", tiny_config(scratch.path("out"), 2, 8));
  REQUIRE(run_cli("eval --checkpoint " + scratch.path("out/checkpoint.bin") + " --config " +
                  other) == 3);
}

TEST_CASE("check exits 0 and lists every invariant group") {
  Scratch scratch("cacr_cli_check");
  const auto log = scratch.path("check.txt");
  REQUIRE(run_cli("check", log) == 0);
  const std::string out = slurp(log);
  for (const char* group :
       {"normalization", "oracle-equivalence", "metric-equivalence", "degenerate-limits",
        "k1-reduction", "attraction-optimum", "entropy-identities", "uniformity-bound",
        "polarity-ablation", "rbf-log-domain", "gradient-checks", "rng-determinism"})
    REQUIRE(out.find(std::string("PASS ") + group) != std::string::npos);
}

TEST_CASE("check with a sabotaged softmax fails by group name") {
  Scratch scratch("cacr_cli_sab");
  const auto log = scratch.path("check.txt");
  REQUIRE(run_cli("check --sabotage softmax", log) != 0);
  REQUIRE(slurp(log).find("FAIL normalization") != std::string::npos);
}

TEST_CASE("sweep: single-point grid reproduces train + eval outputs") {
  Scratch scratch("cacr_cli_sweep1");
  const auto cfg = write_file(scratch.dir / "cfg.ini", tiny_config(scratch.path("sweep"), 1));
  const auto grid = write_file(scratch.dir / "grid.ini", "t_neg = 2.0\n");
  REQUIRE(run_cli("sweep --config " + cfg + " --grid " + grid) == 0);
  REQUIRE(fs::exists(scratch.path("sweep/summary.csv")));
  REQUIRE(fs::exists(scratch.path("sweep/p000/s7/run_record.csv")));
  REQUIRE(fs::exists(scratch.path("sweep/p000/s7/checkpoint.bin")));
  REQUIRE(fs::exists(scratch.path("sweep/p000/s7/probe_result.json")));
  const std::string summary = slurp(scratch.path("sweep/summary.csv"));
  REQUIRE(summary.find("point,seed,t_pos,t_neg,K,M,loss,imbalance") != std::string::npos);
}

TEST_CASE("sweep: 2x2 grid with three seeds yields 12 rows in point-major order") {
  Scratch scratch("cacr_cli_sweep2");
  const auto cfg = write_file(scratch.dir / "cfg.ini", tiny_config(scratch.path("sweep"), 1));
  const auto grid =
      write_file(scratch.dir / "grid.ini", "t_neg = 1.0, 2.0\nK = 1, 2\nseeds = 1, 2, 3\n");
  const auto log = scratch.path("sweep.txt");
  REQUIRE(run_cli("sweep --config " + cfg + " --grid " + grid, log) == 0);
  const std::string summary = slurp(scratch.path("sweep/summary.csv"));
  std::size_t rows = 0;
  std::stringstream ss(summary);
  std::string line;
  while (std::getline(ss, line))
    if (!line.empty() && line[0] != '#' && line.find("point,") != 0) ++rows;
  REQUIRE(rows == 12);
  for (int p = 0; p < 4; ++p) {
    char leaf[16];
    std::snprintf(leaf, sizeof(leaf), "sweep/p%03d", p);
    REQUIRE(fs::exists(scratch.path(leaf)));
    for (const char* s : {"s1", "s2", "s3"})
      REQUIRE(fs::exists(scratch.path(std::string(leaf) + "/" + s + "/probe_result.json")));
  }
}

TEST_CASE("unknown grid keys are rejected") {
  Scratch scratch("cacr_cli_sweepbad");
  const auto cfg = write_file(scratch.dir / "cfg.ini", tiny_config(scratch.path("sweep"), 1));
  const auto grid = write_file(scratch.dir / "grid.ini", "tau_typo = 1.0\n");
  REQUIRE(run_cli("sweep --config " + cfg + " --grid " + grid) == 2);
}
