#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "selflabel/experiment.hpp"
#include "selflabel/kitti_io.hpp"
#include "selflabel/report.hpp"
#include "temp_dir.hpp"

using namespace selflabel;
using nlohmann::json;
using selflabel::testing::TempDir;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("'") + SELFLABEL_CLI + "' " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

json minimal_config() {
  return json{{"data", {{"labeled", "l.jsonl"}, {"unlabeled", "u.jsonl"}}},
              {"backend", {{"type", "external"}, {"command", "detector --serve"}}}};
}

std::size_t data_rows(const std::string& csv) {
  std::size_t rows = 0;
  std::istringstream in(csv);
  bool header = false;
  for (std::string line; std::getline(in, line);) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      header = true;
      continue;
    }
    ++rows;
  }
  return rows;
}

/// Simulates a small world and writes a run config for it into `dir`.
fs::path small_setup(const TempDir& dir) {
  const json sim{{"seed", 4},
                 {"out", "data"},
                 {"world", json::object()},
                 {"splits",
                  {{{"name", "train"}, {"count", 150}, {"domain", "target"}, {"labeled_fraction", 0.1}},
                   {{"name", "test"}, {"count", 60}, {"domain", "target"}}}}};
  kitti::write_text_file(dir / "sim.json", sim.dump(2));
  simulate(simulation_config_from_json(sim, dir.path()));

  const json run{{"mode", "co"},
                 {"seed", 9},
                 {"out", "run"},
                 {"self_labeling", {{"N", 60}, {"n", 10}, {"K_min", 100}, {"dK", 2}, {"K_max", 5}}},
                 {"data",
                  {{"labeled", "data/train_labeled/train_labeled.jsonl"},
                   {"unlabeled", "data/train_unlabeled/train_unlabeled.jsonl"},
                   {"test", "data/test/test.jsonl"},
                   {"unlabeled_gt", "data/train_unlabeled_gt/train_unlabeled_gt.jsonl"}}},
                 {"backend", {{"type", "sim"}, {"hidden", {"data/train/hidden.json", "data/test/hidden.json"}}}},
                 {"report", {{"ablations", true}}}};
  kitti::write_text_file(dir / "run.json", run.dump(2));
  return dir / "run.json";
}

void expect_default_settings(const ExperimentConfig& cfg) {
  const auto& L = cfg.loop;
  ASSERT_EQ(L.class_table.size(), 2u);
  EXPECT_DOUBLE_EQ(L.class_table[0].detection_threshold, 0.8);
  EXPECT_DOUBLE_EQ(L.class_table[1].detection_threshold, 0.8);
  EXPECT_EQ(L.random_pool, 2000u);
  EXPECT_EQ(L.keep_per_cycle, 100u);
  EXPECT_FALSE(L.exchange_pool.has_value());
  EXPECT_EQ(L.stop.min_cycles, 20);
  EXPECT_DOUBLE_EQ(L.stop.delta_map_threshold, 2.0);
  EXPECT_EQ(L.stop.window, 5);
  ASSERT_TRUE(L.sequence.has_value());
  EXPECT_EQ(L.sequence->min_gap_current, 5);
  EXPECT_EQ(L.sequence->min_gap_previous, 10);
}

}  // namespace

TEST(ExperimentConfig, MinimalConfigCarriesTheDefaultSettings) {
  const auto cfg = experiment_config_from_json(minimal_config(), "/base");
  expect_default_settings(cfg);
  EXPECT_EQ(cfg.mode, LoopMode::co_training);
  EXPECT_EQ(cfg.exchange_policy, ExchangeLabelPolicy::teacher);
  EXPECT_EQ(cfg.data.labeled, fs::path("/base/l.jsonl"));
}

TEST(ExperimentConfig, ShippedConfigCarriesTheDefaultSettings) {
  expect_default_settings(load_experiment_config(fs::path(SELFLABEL_CONFIG_DIR) / "ssl_co.json"));
}

TEST(ExperimentConfig, UnknownOrIllTypedFieldsNameTheField) {
  auto j = minimal_config();
  j["self_labeling"]["Kmin"] = 3;
  try {
    experiment_config_from_json(j);
    FAIL() << "expected a config error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("self_labeling.Kmin"), std::string::npos) << e.what();
  }
  j = minimal_config();
  j["self_labeling"]["N"] = "many";
  try {
    experiment_config_from_json(j);
    FAIL() << "expected a config error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("self_labeling.N"), std::string::npos) << e.what();
  }
  j = minimal_config();
  j["self_labeling"]["n"] = 5000;
  EXPECT_THROW(experiment_config_from_json(j), ConfigError);
  j = minimal_config();
  j["data"].erase("labeled");
  EXPECT_THROW(experiment_config_from_json(j), ConfigError);
  j = minimal_config();
  j["report"] = {{"ablations", true}};
  EXPECT_THROW(experiment_config_from_json(j), ConfigError);
}

TEST(ExperimentConfig, ResolvedFormRoundTrips) {
  auto j = minimal_config();
  j["self_labeling"] = {{"m", 500}, {"sequence", nullptr}};
  const auto cfg = experiment_config_from_json(j, "/base");
  EXPECT_FALSE(cfg.loop.sequence.has_value());
  const auto again = experiment_config_from_json(to_json(cfg));
  EXPECT_EQ(to_json(again), to_json(cfg));
  EXPECT_EQ(config_hash(again), config_hash(cfg));
}

TEST(ExperimentConfig, HashTracksLoopInputsButNotOutputLocation) {
  auto cfg = experiment_config_from_json(minimal_config());
  const auto h = config_hash(cfg);
  auto moved = cfg;
  moved.out = "/elsewhere";
  EXPECT_EQ(config_hash(moved), h);
  auto reseeded = cfg;
  reseeded.loop.rng_seed = 1;
  EXPECT_NE(config_hash(reseeded), h);
}

TEST(ExperimentConfig, CommandLineOverridesWin) {
  auto cfg = experiment_config_from_json(minimal_config());
  cfg.backend.hidden = {"hidden.json"};
  apply_overrides(cfg, CliOverrides{"self", "sim", 42, fs::path("/tmp/o")});
  EXPECT_EQ(cfg.mode, LoopMode::self_training);
  EXPECT_EQ(cfg.backend.type, BackendConfig::Type::sim);
  EXPECT_EQ(cfg.seed(), 42u);
  EXPECT_EQ(cfg.out, fs::path("/tmp/o"));
  apply_overrides(cfg, CliOverrides{std::nullopt, "external:python -m det", std::nullopt, std::nullopt});
  EXPECT_EQ(cfg.backend.type, BackendConfig::Type::external);
  EXPECT_EQ(cfg.backend.command, "python -m det");
  EXPECT_THROW(apply_overrides(cfg, CliOverrides{"tri", {}, {}, {}}), ConfigError);
}

TEST(Simulate, WritesManifestsLabelsAndHiddenTables) {
  TempDir dir;
  small_setup(dir);
  for (const char* split : {"train", "test", "train_labeled", "train_unlabeled", "train_unlabeled_gt"}) {
    EXPECT_TRUE(fs::exists(dir / "data" / split / (std::string(split) + ".jsonl"))) << split;
  }
  const auto labeled = kitti::load_manifest(dir / "data/train_labeled/train_labeled.jsonl");
  const auto unlabeled = kitti::load_manifest(dir / "data/train_unlabeled/train_unlabeled.jsonl");
  EXPECT_EQ(labeled.entries.size(), 15u);
  EXPECT_EQ(unlabeled.entries.size(), 135u);
  for (const auto& e : unlabeled.entries) EXPECT_FALSE(e.label_path.has_value());
}

TEST(Cli, EvalOfGroundTruthAgainstItselfIsPerfect) {
  TempDir dir;
  small_setup(dir);
  const auto test = (dir / "data/test/test.jsonl").string();
  ASSERT_EQ(cli("eval --gt '" + test + "' --pred '" + test + "' --out '" + (dir / "eval.json").string() + "'",
                dir / "eval.log"),
            0)
      << slurp(dir / "eval.log");
  EXPECT_DOUBLE_EQ(json::parse(slurp(dir / "eval.json"))["mAP"].get<double>(), 100.0);
}

TEST(Cli, RunReportAndResume) {
  TempDir dir;
  const auto config = small_setup(dir);
  ASSERT_EQ(cli("run --config '" + config.string() + "'", dir / "run.log"), 0) << slurp(dir / "run.log");
  const auto rows = read_metrics(dir / "run" / "metrics.csv");
  EXPECT_EQ(rows.size(), 5u);
  const auto report = json::parse(slurp(dir / "run" / "final_report.json"));
  EXPECT_EQ(report["cycles"], 5);
  EXPECT_TRUE(report.contains("final"));

  ASSERT_EQ(cli("report --run '" + (dir / "run").string() + "'", dir / "report.log"), 0) << slurp(dir / "report.log");
  EXPECT_EQ(data_rows(slurp(dir / "run" / "report" / "curves.csv")), 5u);
  EXPECT_TRUE(fs::exists(dir / "run" / "report" / "curves.svg"));

  const auto split_out = (dir / "split").string();
  ASSERT_EQ(cli("run --config '" + config.string() + "' --out '" + split_out + "' --stop-after 2", dir / "a.log"), 0)
      << slurp(dir / "a.log");
  EXPECT_EQ(read_metrics(dir / "split" / "metrics.csv").size(), 2u);
  ASSERT_EQ(cli("resume '" + split_out + "'", dir / "b.log"), 0) << slurp(dir / "b.log");
  EXPECT_EQ(slurp(dir / "split" / "metrics.csv"), slurp(dir / "run" / "metrics.csv"));
}

TEST(Cli, BadConfigExitsWithCodeTwo) {
  TempDir dir;
  kitti::write_text_file(dir / "bad.json", R"({"mode": "co", "bogus": 1})");
  EXPECT_EQ(cli("run --config '" + (dir / "bad.json").string() + "'", dir / "log"), 2);
  EXPECT_NE(slurp(dir / "log").find("bogus"), std::string::npos);
  kitti::write_text_file(dir / "broken.json", "{not json");
  EXPECT_EQ(cli("run --config '" + (dir / "broken.json").string() + "'", dir / "log"), 2);
}

TEST(RunExperiment, SameSeedGivesByteIdenticalMetrics) {
  TempDir dir;
  auto cfg = load_experiment_config(small_setup(dir));
  cfg.report.ablations = false;
  cfg.out = dir / "one";
  run_experiment(cfg);
  cfg.out = dir / "two";
  run_experiment(cfg);
  EXPECT_EQ(slurp(dir / "one" / "metrics.csv"), slurp(dir / "two" / "metrics.csv"));
  EXPECT_EQ(slurp(dir / "one" / "final_report.json"), slurp(dir / "two" / "final_report.json"));
}

TEST(EvaluateReport, VariantsAreCeilingsForThePredictions) {
  TempDir dir;
  small_setup(dir);
  const auto classes = ClassTable::kitti_default();
  const auto gt = kitti::load_annotations(kitti::load_manifest(dir / "data/test/test.jsonl"), classes).labeled;
  AnnotationSet pred;
  pred.kind = AnnotationKind::pseudo_label;
  for (const auto& [id, dets] : gt.entries) {
    for (auto d : dets) {
      d.bbox.right += 3.0;
      d.confidence = 0.9;
      pred.entries[id].push_back(d);
    }
    pred.entries[id].push_back(Detection{0, {0, 0, 40, 40}, 0.85});
  }
  const auto r = evaluate_report(gt, pred, classes, ApInterpolation::eleven_point, true);
  ASSERT_TRUE(r.contains("no_fp"));
  ASSERT_TRUE(r.contains("no_fp_bb"));
  EXPECT_GE(r["no_fp"]["mAP"].get<double>(), r["mAP"].get<double>());
  EXPECT_DOUBLE_EQ(r["no_fp_bb"]["mAP"].get<double>(), r["no_fp"]["mAP"].get<double>());
}
