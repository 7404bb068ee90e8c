#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "volssl/checkpoint.hpp"
#include "volssl/experiment.hpp"
#include "volssl/metrics.hpp"

using namespace volssl;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json tiny_config() {
  return json::parse(R"({
    "schema_version": 1,
    "seed": 3,
    "dataset": {"shape": [16, 16, 16], "pretrain": 6, "train": 3, "val": 1, "test": 5, "modalities": ["A"]},
    "methods": ["simmim"],
    "encoder": "tiny",
    "pretrain": {"steps": 2, "batch_size": 1, "warmup_steps": 0},
    "finetune": {"epochs": 2, "validate_every": 1, "batch_size": 2, "lr": 1e-3, "val_overlap": 0.0},
    "shots": [2],
    "seeds": [0],
    "decoder_base": 4,
    "test_overlap": 0.0,
    "analysis": {"cka_probes": 4, "cka_shots": 2}
  })");
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("volssl_exp_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunOptions quiet() {
  RunOptions o;
  return o;
}

const fs::path& shared_run() {
  static const fs::path dir = [] {
    const fs::path d = scratch_dir("shared");
    run_experiment(ExperimentConfig::from_json(tiny_config()), d, quiet());
    return d;
  }();
  return dir;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(VOLSSL_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::vector<std::vector<std::string>> csv_rows(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST_CASE("experiment config validation") {
  CHECK_NOTHROW(ExperimentConfig::from_json(tiny_config()));
  const ExperimentConfig c = ExperimentConfig::from_json(tiny_config());
  CHECK(ExperimentConfig::from_json(c.to_json()).hash() == c.hash());
  CHECK(c.model_names() == std::vector<std::string>{"scratch", "simmim"});

  auto rejects = [](json j) { CHECK_THROWS_AS(ExperimentConfig::from_json(j), ConfigError); };
  json j = tiny_config();
  j["bogus"] = 1;
  rejects(j);
  j = tiny_config();
  j.erase("schema_version");
  rejects(j);
  j = tiny_config();
  j["shots"] = {2, 1};
  rejects(j);
  j = tiny_config();
  j["shots"] = {5};
  rejects(j);
  j = tiny_config();
  j["seeds"] = json::array();
  rejects(j);
  j = tiny_config();
  j["encoder"] = "gigantic";
  rejects(j);
  j = tiny_config();
  j["methods"] = {"simmim", "byol"};
  rejects(j);
  j = tiny_config();
  j["shots"] = {1, "full"};
  j["analysis"]["cka_shots"] = 1;
  CHECK(ExperimentConfig::from_json(j).shots == std::vector<Index>{1, 0});
  j["methods"] = "all";
  CHECK(ExperimentConfig::from_json(j).methods.size() == 9);
}

TEST_CASE("a single-method run has one row per model, shots and seed") {
  const json report = json::parse(slurp(shared_run() / "report.json"));
  CHECK(report.at("kind") == "benchmark");
  int simmim = 0;
  for (const auto& r : report.at("rows")) simmim += r.at("model") == "simmim";
  CHECK(simmim == 1);
  CHECK(report.at("rows").size() == 2);
  CHECK(fs::exists(shared_run() / "pretrain" / "simmim" / "seed0" / "checkpoint"));
  CHECK(fs::exists(shared_run() / "cka" / "simmim" / "seed0" / "cka.json"));
}

TEST_CASE("the best reference is the brute-force maximum over rows") {
  const json report = json::parse(slurp(shared_run() / "report.json"));
  for (const auto& cell : report.at("cells")) {
    std::map<std::string, std::pair<double, int>> acc;
    std::vector<std::string> order;
    for (const auto& r : report.at("rows")) {
      if (r.at("task") != cell.at("task") || r.at("modality") != cell.at("modality") || r.at("shots") != cell.at("shots")) continue;
      const std::string m = r.at("model");
      if (!acc.count(m)) order.push_back(m);
      acc[m].first += r.at("mean_dice").get<double>();
      acc[m].second += 1;
    }
    std::string best;
    double best_mean = -1.0;
    for (const auto& m : order) {
      const double mean = acc[m].first / acc[m].second;
      if (mean > best_mean) {
        best_mean = mean;
        best = m;
      }
    }
    const BestReference ref = best_reference(report, cell.at("task"), cell.at("modality"), cell.at("shots"));
    CHECK(ref.model == best);
    CHECK(ref.mean == doctest::Approx(best_mean).epsilon(1e-15));
    CHECK(cell.at("best_model") == best);
    for (const auto& m : order) {
      CHECK(cell.at("models").at(m).at("gap").get<double>() == performance_gap(acc[m].first / acc[m].second, best_mean));
    }
  }
}

TEST_CASE("plots carry one series per model and the gap panel repeats the metric values") {
  const fs::path plots = shared_run() / "plots";
  for (const char* f : {"dice_bars.svg", "dice_bars.csv", "structure_bars.csv", "training_curves.csv", "gap_panel.csv", "cka_heatmap.csv"}) {
    CHECK(fs::exists(plots / f));
  }
  CHECK(!fs::exists(plots / "modality_gap.csv"));
  std::set<std::string> series;
  for (const auto& r : csv_rows(plots / "dice_bars.csv")) series.insert(r[0]);
  CHECK(series == std::set<std::string>{"scratch", "simmim"});

  const json report = json::parse(slurp(shared_run() / "report.json"));
  const json& cell = report.at("cells").at(0);
  for (const auto& r : csv_rows(plots / "gap_panel.csv")) {
    const std::string model = r[1];
    CHECK(std::stod(r[2]) == performance_gap(cell.at("models").at(model).at("mean").get<double>(), cell.at("best_mean").get<double>()));
  }
}

TEST_CASE("two-method reports plot two series and skipped figures leave notices") {
  json j = tiny_config();
  j["methods"] = {"simmim", "inpaint"};
  j["include_scratch"] = false;
  j["analysis"]["cka"] = false;
  const fs::path d = scratch_dir("two");
  const json report = run_experiment(ExperimentConfig::from_json(j), d, quiet());
  std::set<std::string> series;
  for (const auto& r : csv_rows(d / "plots" / "dice_bars.csv")) series.insert(r[0]);
  CHECK(series.size() == 2);
  const PlotSummary ps = emit_plots(report, d / "plots_again");
  bool cka_notice = false;
  for (const auto& n : ps.notices) cka_notice = cka_notice || n.find("cka_heatmap") != std::string::npos;
  CHECK(cka_notice);
  fs::remove_all(d);
}

TEST_CASE("runs are deterministic across worker counts") {
  const ExperimentConfig cfg = ExperimentConfig::from_json(tiny_config());
  const fs::path d = scratch_dir("jobs2");
  RunOptions o = quiet();
  o.jobs = 2;
  run_experiment(cfg, d, o);
  CHECK(slurp(d / "report.json") == slurp(shared_run() / "report.json"));
  fs::remove_all(d);
}

TEST_CASE("resume skips completed jobs and refusal protects existing runs") {
  const ExperimentConfig cfg = ExperimentConfig::from_json(tiny_config());
  const fs::path d = scratch_dir("resume");
  run_experiment(cfg, d, quiet());
  const fs::path loss = d / "pretrain" / "simmim" / "seed0" / "loss.csv";
  const auto stamp = fs::last_write_time(loss);
  const std::string before = slurp(d / "report.json");
  CHECK_THROWS_AS(run_experiment(cfg, d, quiet()), ConfigError);
  RunOptions o = quiet();
  o.resume = true;
  run_experiment(cfg, d, o);
  CHECK(fs::last_write_time(loss) == stamp);
  CHECK(slurp(d / "report.json") == before);
  CHECK(assemble_report(cfg, d).dump(2) + "\n" == before);
  fs::remove_all(d);
}

TEST_CASE("pretraining-size sweeps") {
  const ExperimentConfig cfg = ExperimentConfig::from_json(tiny_config());
  const fs::path d = scratch_dir("sweep0");
  const json zero = sweep_pretrain_size(cfg, {0}, d, quiet());
  CHECK(!fs::exists(d / "size0" / "pretrain"));
  CHECK(zero.at("series").at(0).at("points").size() == 1);
  fs::remove_all(d);

  const fs::path d3 = scratch_dir("sweep3");
  const json three = sweep_pretrain_size(cfg, {0, 3, 6}, d3, quiet());
  for (const auto& s : three.at("series")) CHECK(s.at("points").size() == 3);
  CHECK(fs::exists(d3 / "plots" / "sweep_curve.csv"));
  fs::remove_all(d3);

  CHECK_THROWS_AS(sweep_pretrain_size(cfg, {0, 7}, scratch_dir("sweepbad"), quiet()), ConfigError);
  CHECK_THROWS_AS(sweep_pretrain_size(cfg, {3, 2}, scratch_dir("sweepbad"), quiet()), ConfigError);
}

TEST_CASE("capacity sweeps report parameter counts") {
  ExperimentConfig cfg = ExperimentConfig::from_json(tiny_config());
  cfg.analysis.cka = false;
  EncoderConfig wide = cfg.encoder;
  wide.embed_dim = 8;
  const fs::path d = scratch_dir("capacity");
  const json r = sweep_capacity(cfg, {cfg.encoder, wide}, d, quiet());
  const json& pts = r.at("series").at(0).at("points");
  REQUIRE(pts.size() == 2);
  CHECK(pts.at(0).at("x").get<double>() == static_cast<double>(parameter_count(cfg.encoder)));
  CHECK(pts.at(1).at("x").get<double>() == static_cast<double>(parameter_count(wide)));
  fs::remove_all(d);
}

TEST_CASE("command line exit codes and the self-comparison heatmap") {
  const fs::path d = scratch_dir("cli");
  fs::create_directories(d);
  {
    std::ofstream(d / "bad.json") << R"({"schema_version": 1, "bogus": true})";
    std::ofstream(d / "good.json") << tiny_config().dump();
  }
  CHECK(run_cli("run --config " + (d / "bad.json").string() + " --out " + (d / "bad").string()) == 2);
  CHECK(run_cli("run --no-such-flag") == 2);
  CHECK(run_cli("infer --checkpoint " + (d / "missing").string() + " --input x.bin --out " + (d / "inf").string()) == 3);
  CHECK(run_cli("run --config " + (d / "good.json").string() + " --out /dev/null/run") == 3);

  const fs::path ckpt = shared_run() / "pretrain" / "simmim" / "seed0" / "checkpoint";
  const fs::path manifest = shared_run() / "data" / "manifest.json";
  REQUIRE(run_cli("cka --a " + ckpt.string() + " --b " + ckpt.string() + " --probes " + manifest.string() + " --out " + (d / "cka").string()) == 0);
  const auto rows = csv_rows(d / "cka" / "cka_heatmap.csv");
  CHECK(!rows.empty());
  for (const auto& r : rows) CHECK(std::abs(std::stod(r[2]) - 1.0) < 1e-8);
  fs::remove_all(d);
}
