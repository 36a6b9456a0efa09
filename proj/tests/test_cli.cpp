#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cerd/cli.hpp"

using namespace cerd;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"cerd"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli::run(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("cerd_cli_" + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_file(const fs::path& p, const std::string& content) {
  std::ofstream out(p);
  out << content;
}

// Small synthetic bundle + quick training config shared by the command
// tests.
const char* kQuickSynth = R"({
  "subjects": 80,
  "modality_dims": [5, 6, 4, 5],
  "missing_rates": [0.2, 0.2, 0.2, 0.2],
  "seed": 9
})";

const char* kQuickTrain = R"({
  "hidden_dim": 8,
  "tokens": 2,
  "experts": 4,
  "top_k": 2,
  "heads": 2,
  "encoder_depth": 1,
  "generator_depth": 1,
  "epochs": 2,
  "warmup_epochs": 1,
  "batch_size": 8,
  "learning_rate": 0.001,
  "dropout": 0.1,
  "seed": 3
})";

}  // namespace

TEST_CASE("synth writes the full bundle inventory deterministically") {
  TempDir dir("synth");
  const auto out1 = dir.path / "d1";
  const auto out2 = dir.path / "d2";
  write_file(dir.path / "spec.json", kQuickSynth);

  CHECK(run_cli({"synth", "--spec", (dir.path / "spec.json").string(), "--out", out1.string()}) == 0);
  for (const char* name :
       {"A.csv", "B.csv", "C.csv", "D.csv", "labels.csv", "manifest.json", "importance.json",
        "config.json"})
    CHECK(fs::exists(out1 / name));

  CHECK(run_cli({"synth", "--spec", (dir.path / "spec.json").string(), "--out", out2.string()}) == 0);
  for (const char* name : {"A.csv", "B.csv", "labels.csv", "manifest.json", "importance.json"})
    CHECK(slurp(out1 / name) == slurp(out2 / name));
}

TEST_CASE("synth with near-total missingness exits with a configuration error") {
  TempDir dir("synth_bad");
  write_file(dir.path / "spec.json",
             R"({"subjects": 1200, "missing_rates": [0.99, 0.99, 0.99, 0.99], "seed": 1})");
  CHECK(run_cli({"synth", "--spec", (dir.path / "spec.json").string(), "--out",
                 (dir.path / "out").string()}) == 1);
}

TEST_CASE("config files with unknown keys are rejected as usage errors") {
  TempDir dir("unknown_key");
  write_file(dir.path / "bad.json", R"({"epochs": 1, "learning_rte": 0.1})");
  CHECK(run_cli({"train", "--config", (dir.path / "bad.json").string(), "--data", "x.json",
                 "--out", (dir.path / "out").string()}) == 1);

  write_file(dir.path / "bad_synth.json", R"({"subjcts": 100})");
  CHECK(run_cli({"synth", "--spec", (dir.path / "bad_synth.json").string(), "--out",
                 (dir.path / "out").string()}) == 1);
}

TEST_CASE("train smoke run writes all four artifacts and repeats byte-identically") {
  TempDir dir("train");
  write_file(dir.path / "spec.json", kQuickSynth);
  write_file(dir.path / "cfg.json", kQuickTrain);
  REQUIRE(run_cli({"synth", "--spec", (dir.path / "spec.json").string(), "--out",
                   (dir.path / "data").string()}) == 0);

  const auto manifest = (dir.path / "data" / "manifest.json").string();
  CHECK(run_cli({"train", "--config", (dir.path / "cfg.json").string(), "--data", manifest, "--out",
                 (dir.path / "run1").string()}) == 0);
  for (const char* name : {"checkpoint.json", "metrics.jsonl", "final_metrics.csv", "config.json"})
    CHECK(fs::exists(dir.path / "run1" / name));

  CHECK(run_cli({"train", "--config", (dir.path / "cfg.json").string(), "--data", manifest, "--out",
                 (dir.path / "run2").string()}) == 0);
  CHECK(slurp(dir.path / "run1" / "final_metrics.csv") == slurp(dir.path / "run2" / "final_metrics.csv"));
  CHECK(slurp(dir.path / "run1" / "metrics.jsonl") == slurp(dir.path / "run2" / "metrics.jsonl"));
  CHECK(slurp(dir.path / "run1" / "checkpoint.json") == slurp(dir.path / "run2" / "checkpoint.json"));

  // The echoed config carries the effective values.
  const auto echoed = nlohmann::json::parse(slurp(dir.path / "run1" / "config.json"));
  CHECK(echoed.at("epochs").get<int>() == 2);
  CHECK(echoed.at("data_manifest").get<std::string>() == manifest);
}

TEST_CASE("static-fill training instantiates no generator parameters") {
  TempDir dir("sf");
  write_file(dir.path / "spec.json", kQuickSynth);
  write_file(dir.path / "cfg.json", kQuickTrain);
  REQUIRE(run_cli({"synth", "--spec", (dir.path / "spec.json").string(), "--out",
                   (dir.path / "data").string()}) == 0);
  CHECK(run_cli({"train", "--config", (dir.path / "cfg.json").string(), "--data",
                 (dir.path / "data" / "manifest.json").string(), "--out",
                 (dir.path / "run").string(), "--completion", "static_fill"}) == 0);
  const auto ckpt = nlohmann::json::parse(slurp(dir.path / "run" / "checkpoint.json"));
  bool has_generator = false, has_static = false;
  for (const auto& [key, value] : ckpt.at("params").items()) {
    (void)value;
    if (key.rfind("generator.", 0) == 0) has_generator = true;
    if (key.rfind("static_fill.", 0) == 0) has_static = true;
  }
  CHECK(!has_generator);
  CHECK(has_static);
}

TEST_CASE("eval memorizes a small toy set and is repeatable") {
  TempDir dir("eval");
  write_file(dir.path / "spec.json", R"({
    "subjects": 40,
    "modality_dims": [5, 6, 4, 5],
    "missing_rates": [0.0, 0.0, 0.0, 0.0],
    "signal_shared": 1.0,
    "signal_private": [0.0, 0.0, 0.0, 0.0],
    "label_sharpness": 12.0,
    "noise_std": 0.0,
    "seed": 4
  })");
  write_file(dir.path / "cfg.json", R"({
    "hidden_dim": 8, "tokens": 2, "heads": 2,
    "encoder_depth": 1, "generator_depth": 1,
    "epochs": 60, "warmup_epochs": 0, "batch_size": 4,
    "learning_rate": 0.005, "dropout": 0.0,
    "completion": "zero_fill", "head": "plain_linear", "backbone": "shared_ffn",
    "seed": 11
  })");
  REQUIRE(run_cli({"synth", "--spec", (dir.path / "spec.json").string(), "--out",
                   (dir.path / "data").string()}) == 0);
  const auto manifest = (dir.path / "data" / "manifest.json").string();
  REQUIRE(run_cli({"train", "--config", (dir.path / "cfg.json").string(), "--data", manifest,
                   "--out", (dir.path / "run").string()}) == 0);

  const auto ckpt = (dir.path / "run" / "checkpoint.json").string();
  CHECK(run_cli({"eval", "--checkpoint", ckpt, "--data", manifest, "--split", "train"}) == 0);
  const std::string train_csv = slurp(dir.path / "run" / "eval_train.csv");
  const double acc = std::stod(train_csv.substr(train_csv.find("train,") + 6));
  CHECK(acc >= 0.9);

  // Same command twice: byte-identical outputs.
  CHECK(run_cli({"eval", "--checkpoint", ckpt, "--data", manifest, "--split", "test"}) == 0);
  const std::string first = slurp(dir.path / "run" / "eval_test.csv");
  CHECK(run_cli({"eval", "--checkpoint", ckpt, "--data", manifest, "--split", "test"}) == 0);
  CHECK(slurp(dir.path / "run" / "eval_test.csv") == first);

  CHECK(run_cli({"eval", "--checkpoint", ckpt, "--data", manifest, "--split", "bogus"}) == 1);
}

TEST_CASE("eval rejects a checkpoint incompatible with the data catalog") {
  TempDir dir("compat");
  write_file(dir.path / "spec3.json", R"({
    "subjects": 40, "modality_names": ["A", "B", "C"], "modality_dims": [5, 6, 4],
    "private_dims": [2, 2, 2], "missing_rates": [0.0, 0.0, 0.0],
    "signal_shared": 0.4, "signal_private": [0.2, 0.2, 0.2], "seed": 5
  })");
  write_file(dir.path / "spec4.json", kQuickSynth);
  write_file(dir.path / "cfg.json", kQuickTrain);
  REQUIRE(run_cli({"synth", "--spec", (dir.path / "spec3.json").string(), "--out",
                   (dir.path / "d3").string()}) == 0);
  REQUIRE(run_cli({"synth", "--spec", (dir.path / "spec4.json").string(), "--out",
                   (dir.path / "d4").string()}) == 0);
  REQUIRE(run_cli({"train", "--config", (dir.path / "cfg.json").string(), "--data",
                   (dir.path / "d3" / "manifest.json").string(), "--out",
                   (dir.path / "run").string()}) == 0);
  CHECK(run_cli({"eval", "--checkpoint", (dir.path / "run" / "checkpoint.json").string(), "--data",
                 (dir.path / "d4" / "manifest.json").string(), "--split", "test"}) == 2);
}

TEST_CASE("attribute emits verified reports and a summary") {
  TempDir dir("attr");
  write_file(dir.path / "spec.json", kQuickSynth);
  write_file(dir.path / "cfg.json", kQuickTrain);
  REQUIRE(run_cli({"synth", "--spec", (dir.path / "spec.json").string(), "--out",
                   (dir.path / "data").string()}) == 0);
  const auto manifest = (dir.path / "data" / "manifest.json").string();
  REQUIRE(run_cli({"train", "--config", (dir.path / "cfg.json").string(), "--data", manifest,
                   "--out", (dir.path / "run").string()}) == 0);
  const auto ckpt = (dir.path / "run" / "checkpoint.json").string();

  CHECK(run_cli({"attribute", "--checkpoint", ckpt, "--data", manifest, "--split", "test", "--out",
                 (dir.path / "attr").string()}) == 0);
  CHECK(fs::exists(dir.path / "attr" / "reports.jsonl"));
  CHECK(fs::exists(dir.path / "attr" / "importance_summary.csv"));
  CHECK(fs::exists(dir.path / "attr" / "importance_summary.json"));

  // Every report satisfies the additive identity; weights sum to 1.
  std::ifstream in(dir.path / "attr" / "reports.jsonl");
  std::string line;
  std::size_t count = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    const auto logits = j.at("logits").get<std::vector<double>>();
    const auto shared = j.at("shared").get<std::vector<double>>();
    for (std::size_t c = 0; c < logits.size(); ++c) {
      double acc = shared[c];
      for (const auto& [mod, contrib] : j.at("contributions").items()) {
        (void)mod;
        acc += contrib.at(c).get<double>();
      }
      CHECK(std::abs(logits[c] - acc) < 1e-9);
    }
    double wsum = 0.0;
    for (const auto& [mod, w] : j.at("weights").items()) {
      (void)mod;
      wsum += w.get<double>();
    }
    CHECK(std::abs(wsum - 1.0) < 1e-9);
    ++count;
  }
  CHECK(count > 0);

  // Summary mean weights also sum to 1.
  const auto summary = nlohmann::json::parse(slurp(dir.path / "attr" / "importance_summary.json"));
  double mean_weight_sum = 0.0;
  for (const auto& [mod, row] : summary.items()) {
    (void)mod;
    mean_weight_sum += row.at("mean_weight").get<double>();
  }
  CHECK(std::abs(mean_weight_sum - 1.0) < 1e-9);

  // A plain-linear checkpoint has nothing to attribute.
  REQUIRE(run_cli({"train", "--config", (dir.path / "cfg.json").string(), "--data", manifest,
                   "--out", (dir.path / "run_plain").string(), "--head", "plain_linear"}) == 0);
  CHECK(run_cli({"attribute", "--checkpoint",
                 (dir.path / "run_plain" / "checkpoint.json").string(), "--data", manifest,
                 "--split", "test", "--out", (dir.path / "attr2").string()}) == 1);
}

TEST_CASE("ablate with one seed writes the pinned variant rows and medians equal the runs") {
  TempDir dir("ablate");
  write_file(dir.path / "spec.json", kQuickSynth);
  write_file(dir.path / "cfg.json", kQuickTrain);
  REQUIRE(run_cli({"synth", "--spec", (dir.path / "spec.json").string(), "--out",
                   (dir.path / "data").string()}) == 0);
  CHECK(run_cli({"ablate", "--config", (dir.path / "cfg.json").string(), "--data",
                 (dir.path / "data" / "manifest.json").string(), "--seeds", "1", "--out",
                 (dir.path / "out").string()}) == 0);

  const std::string csv = slurp(dir.path / "out" / "ablation.csv");
  std::istringstream ss(csv);
  std::string line;
  std::getline(ss, line);
  CHECK(line == "variant,median_acc,median_f1,median_auc,parameters");
  std::vector<std::string> names;
  while (std::getline(ss, line))
    if (!line.empty()) names.push_back(line.substr(0, line.find(',')));
  CHECK(names == std::vector<std::string>{"full", "no_ed", "static_fill", "no_cer", "no_moe"});

  // Single-seed medians equal the run values.
  const std::string runs = slurp(dir.path / "out" / "ablation_runs.csv");
  std::istringstream rs(runs);
  std::getline(rs, line);  // header
  std::map<std::string, std::string> run_metrics;
  while (std::getline(rs, line)) {
    if (line.empty()) continue;
    const auto p1 = line.find(',');
    const auto p2 = line.find(',', p1 + 1);
    const auto p3 = line.rfind(',');
    run_metrics[line.substr(0, p1)] = line.substr(p2 + 1, p3 - p2 - 1);
  }
  std::istringstream ms(csv);
  std::getline(ms, line);
  while (std::getline(ms, line)) {
    if (line.empty()) continue;
    const auto p1 = line.find(',');
    const auto p3 = line.rfind(',');
    CHECK(line.substr(p1 + 1, p3 - p1 - 1) == run_metrics[line.substr(0, p1)]);
  }
}

TEST_CASE("missing inputs map to the data-error exit code") {
  CHECK(run_cli({"eval", "--checkpoint", "/nonexistent/ckpt.json", "--data", "/nonexistent/m.json",
                 "--split", "test"}) == 2);
  CHECK(run_cli({"train", "--data", "/nonexistent/m.json", "--out",
                 (fs::temp_directory_path() / "cerd_cli_noout").string()}) == 2);
}

TEST_CASE("output directory falls back to the environment root") {
  TempDir dir("envroot");
  ::setenv("CERD_OUTPUT_ROOT", dir.path.c_str(), 1);
  write_file(dir.path / "spec.json", kQuickSynth);
  CHECK(run_cli({"synth", "--spec", (dir.path / "spec.json").string()}) == 0);
  CHECK(fs::exists(dir.path / "synth" / "manifest.json"));
  ::unsetenv("CERD_OUTPUT_ROOT");

  CHECK(run_cli({"synth", "--spec", (dir.path / "spec.json").string()}) == 1);
}

TEST_CASE("gradcheck subcommand passes on the tiny scale") {
  CHECK(run_cli({"gradcheck", "--scale", "tiny"}) == 0);
  CHECK(run_cli({"gradcheck", "--scale", "huge"}) == 1);
}
