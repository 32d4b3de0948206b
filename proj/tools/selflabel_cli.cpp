// selflabel: command-line driver for the self-labeling engine.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "selflabel/experiment.hpp"
#include "selflabel/kitti_io.hpp"
#include "selflabel/report.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace selflabel;

namespace {

void print_outcome(const RunOutcome& outcome, const fs::path& out) {
  const auto& loop = outcome.loop;
  if (!loop.completed) {
    std::printf("stopped after cycle %d (checkpoint in %s)\n", loop.state.k, out.string().c_str());
    return;
  }
  std::printf("finished after %d cycles; %zu pseudo-labeled images\n", loop.state.k, loop.pseudo_labels.size());
  if (outcome.report) {
    const auto& r = *outcome.report;
    std::printf("final mAP %.2f", r["final"]["mAP"].get<double>());
    if (r.contains("baseline")) std::printf(" (labeled-only %.2f)", r["baseline"]["mAP"].get<double>());
    std::printf("\nreport: %s\n", (out / "final_report.json").string().c_str());
  }
}

ApInterpolation parse_ap_flag(const std::string& text) {
  if (text == "11") return ApInterpolation::eleven_point;
  if (text == "40") return ApInterpolation::forty_point;
  throw ConfigError("--ap: expected 11 or 40");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-labeling engine: self-training and co-training for object detectors"};
  app.require_subcommand(1);

  CliOverrides overrides;
  fs::path config_path;
  std::optional<int> stop_after;
  auto* run = app.add_subcommand("run", "run a self-labeling experiment");
  run->add_option("--config", config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--mode", overrides.mode, "self | co");
  run->add_option("--backend", overrides.backend, "sim | external:\"CMD\"");
  run->add_option("--seed", overrides.seed, "base RNG seed");
  run->add_option("--out", overrides.out, "run directory");
  run->add_option("--stop-after", stop_after, "return after this cycle, leaving a resumable checkpoint");

  fs::path resume_dir;
  auto* resume = app.add_subcommand("resume", "continue an interrupted run");
  resume->add_option("--out,run_dir", resume_dir, "run directory")->required()->check(CLI::ExistingDirectory);

  fs::path gt_path, pred_path, eval_config, eval_out;
  std::string ap = "11";
  bool variants = false;
  auto* eval = app.add_subcommand("eval", "score predictions against ground truth");
  eval->add_option("--gt", gt_path, "ground-truth manifest")->required()->check(CLI::ExistingFile);
  eval->add_option("--pred", pred_path, "prediction directory (index.json) or manifest")->required()->check(
      CLI::ExistingPath);
  eval->add_option("--config", eval_config, "experiment config supplying the class table")->check(CLI::ExistingFile);
  eval->add_option("--ap", ap, "11 | 40 point interpolation");
  eval->add_flag("--variants", variants, "also score the /FP and /FP+BB variants");
  eval->add_option("--out", eval_out, "write the report here instead of stdout");

  fs::path sim_config;
  std::optional<fs::path> sim_out;
  std::optional<std::uint64_t> sim_seed;
  auto* simulate_cmd = app.add_subcommand("simulate", "generate simulated datasets");
  simulate_cmd->add_option("--config", sim_config, "simulation config (JSON)")->required()->check(CLI::ExistingFile);
  simulate_cmd->add_option("--out", sim_out, "output directory");
  simulate_cmd->add_option("--seed", sim_seed, "world seed");

  fs::path report_dir;
  std::optional<fs::path> report_out;
  auto* report = app.add_subcommand("report", "emit curves and count summaries for a run");
  report->add_option("--run,run_dir", report_dir, "run directory")->required()->check(CLI::ExistingDirectory);
  report->add_option("--out", report_out, "output directory (default: <run>/report)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      ExperimentConfig cfg = load_experiment_config(config_path);
      apply_overrides(cfg, overrides);
      print_outcome(run_experiment(cfg, stop_after), cfg.out);
    } else if (*resume) {
      print_outcome(resume_experiment(resume_dir), resume_dir);
    } else if (*eval) {
      const ClassTable classes =
          eval_config.empty() ? ClassTable::kitti_default() : load_experiment_config(eval_config).loop.class_table;
      const auto gt = kitti::load_annotations(kitti::load_manifest(gt_path), classes).labeled;
      const auto pred = load_predictions(pred_path, classes);
      const json r = evaluate_report(gt, pred, classes, parse_ap_flag(ap), variants);
      if (eval_out.empty()) {
        std::cout << r.dump(2) << "\n";
      } else {
        kitti::write_text_file(eval_out, r.dump(2) + "\n");
        std::printf("mAP %.2f -> %s\n", r["mAP"].get<double>(), eval_out.string().c_str());
      }
    } else if (*simulate_cmd) {
      const json j = json::parse(kitti::read_text_file(sim_config));
      SimulationConfig cfg = simulation_config_from_json(j, sim_config.parent_path());
      if (sim_out) cfg.out = *sim_out;
      if (sim_seed) cfg.world.seed = *sim_seed;
      for (const auto& dir : simulate(cfg)) std::printf("%s\n", dir.string().c_str());
    } else if (*report) {
      const auto files = write_report(report_dir, report_out.value_or(report_dir / "report"));
      std::printf("%s\n%s\n%s\n", files.curves_csv.string().c_str(), files.counts_csv.string().c_str(),
                  files.curves_svg.string().c_str());
      if (files.label_stats_csv) std::printf("%s\n", files.label_stats_csv->string().c_str());
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
