#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "selflabel/detector.hpp"
#include "selflabel/domain.hpp"
#include "selflabel/evaluation.hpp"
#include "selflabel/orchestrator.hpp"
#include "selflabel/sim_world.hpp"

namespace selflabel {

struct DataPaths {
  std::filesystem::path labeled;    // manifest; its labeled entries form D^l
  std::filesystem::path unlabeled;  // manifest; labels, if any, are ignored
  std::optional<std::filesystem::path> test;          // manifest with ground truth
  std::optional<std::filesystem::path> unlabeled_gt;  // ground truth of the unlabeled images, for ablations
};

struct BackendConfig {
  enum class Type { sim, external };
  Type type{Type::sim};
  std::vector<std::filesystem::path> hidden;  // sim: hidden tables to merge
  sim::DetectorParams params;
  int feature_dim{8};
  std::string command;  // external
  double timeout_s{7200.0};
  int max_restarts{2};
};

struct ReportOptions {
  ApInterpolation ap{ApInterpolation::eleven_point};
  bool baseline{true};
  bool ablations{false};
};

struct ExperimentConfig {
  LoopMode mode{LoopMode::co_training};
  std::filesystem::path out{"run"};
  SelfLabelingConfig loop;
  int max_cycles{60};
  ExchangeLabelPolicy exchange_policy{ExchangeLabelPolicy::teacher};
  bool disable_mirroring{false};
  bool sequential{false};
  TrainingHyper hyper;
  DataPaths data;
  BackendConfig backend;
  ReportOptions report;

  std::uint64_t seed() const noexcept { return loop.rng_seed; }
  void validate() const;
};

/// Relative paths resolve against `base_dir`. Unknown keys and ill-typed values
/// raise ConfigError naming the offending field.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
/// Fully resolved form, defaults included.
nlohmann::json to_json(const ExperimentConfig& cfg);
/// Hash of everything that influences the loop (output and report options excluded).
std::string config_hash(const ExperimentConfig& cfg);

struct CliOverrides {
  std::optional<std::string> mode;
  std::optional<std::string> backend;  // "sim" or "external:<command line>"
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
};

void apply_overrides(ExperimentConfig& cfg, const CliOverrides& overrides);

std::unique_ptr<DetectorBackend> make_backend(const ExperimentConfig& cfg, const ClassTable& classes);

/// Trains a detector on labeled ∪ pseudo and scores it on a test set.
ApReport train_and_evaluate(DetectorBackend& backend, const AnnotationSet& labeled, const ImageCatalog& catalog,
                            const AnnotationSet& pseudo, std::span<const ImageRecord> test_images,
                            const AnnotationSet& test_gt, const ClassTable& classes, const TrainingHyper& hyper,
                            std::uint64_t seed, ApInterpolation mode = ApInterpolation::eleven_point);

/// Raw, false-positive-free and box-corrected variants of a pseudo-label set,
/// each used to train a final detector; plus the per-class label statistics.
nlohmann::json ablation_report(DetectorBackend& backend, const AnnotationSet& labeled, const ImageCatalog& catalog,
                               const AnnotationSet& pseudo, const AnnotationSet& pseudo_gt,
                               std::span<const ImageRecord> test_images, const AnnotationSet& test_gt,
                               const ClassTable& classes, const TrainingHyper& hyper, std::uint64_t seed,
                               ApInterpolation mode = ApInterpolation::eleven_point);

struct RunOutcome {
  LoopResult loop;
  std::optional<nlohmann::json> report;  // final_report.json contents
};

/// The whole `run` pipeline: writes config.json, runs (or resumes) the loop in
/// cfg.out, saves the final pseudo-labels and, with a test set, the final report.
RunOutcome run_experiment(const ExperimentConfig& cfg, std::optional<int> stop_after_cycle = {});

/// Resumes the run stored in `run_dir` using its recorded config.json.
RunOutcome resume_experiment(const std::filesystem::path& run_dir);

/// Loads predictions from a saved annotation directory (with index.json) or a
/// manifest.
AnnotationSet load_predictions(const std::filesystem::path& path, const ClassTable& classes);

/// Standalone evaluation report; `variants` adds the /FP and /FP+BB rows.
nlohmann::json evaluate_report(const AnnotationSet& gt, const AnnotationSet& pred, const ClassTable& classes,
                               ApInterpolation mode, bool variants);

// ---------------------------------------------------------------------------
// Simulated datasets
// ---------------------------------------------------------------------------

struct SimSplit {
  std::string name;
  std::size_t count{};
  DomainTag domain{DomainTag::source};
  std::optional<double> labeled_fraction;
};

struct SimulationConfig {
  sim::WorldConfig world = sim::WorldConfig::defaults();
  std::vector<SimSplit> splits;
  std::filesystem::path out{"data"};
};

SimulationConfig simulation_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});

/// Per split: <out>/<name>/{<name>.jsonl, labels/, hidden.json}; with a labeled
/// fraction also <name>_labeled, <name>_unlabeled and <name>_unlabeled_gt.
/// Returns the written directories.
std::vector<std::filesystem::path> simulate(const SimulationConfig& cfg);

}  // namespace selflabel
