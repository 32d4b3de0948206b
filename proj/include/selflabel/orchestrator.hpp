#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "selflabel/detector.hpp"
#include "selflabel/domain.hpp"
#include "selflabel/evaluation.hpp"
#include "selflabel/rng.hpp"

namespace selflabel {

/// True iff k >= K_min and the last ΔK deltas (at least ΔK of them) are all
/// below T_ΔmAP. `deltas` holds |s_k - s_{k-1}| oldest first.
bool should_stop(const StopParams& params, std::span<const double> deltas, int k);

enum class LoopMode { self_training, co_training };
enum class ExchangeLabelPolicy { teacher, student };

std::string_view to_string(LoopMode mode);
LoopMode parse_loop_mode(std::string_view text);
std::string_view to_string(ExchangeLabelPolicy policy);
ExchangeLabelPolicy parse_exchange_policy(std::string_view text);

/// Which detector produced an accumulated image's labels, and in which cycle.
struct Provenance {
  int detector{};
  int cycle{};
  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct CycleMetrics {
  int cycle{};
  double similarity{};
  std::optional<double> delta;
  std::size_t accumulated_images{};
  std::size_t selected_images{};
  std::size_t predicted_images{};
  std::vector<std::size_t> class_counts;  // detections in the accumulated set
};

/// Loop state at a cycle boundary; everything needed to continue a run.
struct CycleState {
  LoopMode mode{LoopMode::self_training};
  int k{0};
  /// Per detector: accumulated pseudo-labels and the latest full prediction pass.
  std::array<AnnotationSet, 2> accumulated;
  std::array<AnnotationSet, 2> latest;
  std::array<std::map<std::string, Provenance>, 2> provenance;
  std::optional<double> previous_similarity;
  std::vector<double> deltas;
  Rng rng;
  bool finished{false};
  std::string config_hash;
};

struct LoopOptions {
  LoopMode mode{LoopMode::self_training};
  ExchangeLabelPolicy exchange_policy{ExchangeLabelPolicy::teacher};
  /// Train the second detector on un-mirrored data with the first detector's
  /// seeds: co-training degenerates into two synchronized self-trainings.
  bool identical_views{false};
  /// Never run the two detectors' calls concurrently.
  bool force_sequential{false};
  int max_cycles{60};  // K_max
  TrainingHyper hyper;
  ApInterpolation similarity_mode{ApInterpolation::eleven_point};
  /// Run directory for checkpoints and metrics.csv; none disables persistence.
  std::optional<std::filesystem::path> run_dir;
  std::string config_hash;
  /// Return after this many cycles without finishing (for interruption tests).
  std::optional<int> stop_after_cycle;
  /// Called after every cycle.
  std::function<void(const CycleMetrics&)> on_cycle;
};

struct LoopInputs {
  AnnotationSet labeled;
  std::vector<ImageRecord> labeled_images;
  std::vector<ImageRecord> unlabeled_images;
};

struct LoopResult {
  /// Final full prediction pass of detector 1 (the returned D^ψ).
  AnnotationSet pseudo_labels;
  CycleState state;
  std::vector<CycleMetrics> metrics;
  bool completed{false};
};

/// Self-labeling driver for both meta-learners.
class SelfLabelingLoop {
 public:
  SelfLabelingLoop(SelfLabelingConfig config, LoopInputs inputs, DetectorBackend& backend, LoopOptions options);

  /// Runs from scratch (or, with a checkpointed run directory, from where it
  /// stopped).
  LoopResult run();
  /// Continues from `state`.
  LoopResult run_from(CycleState state);

  const ImageCatalog& catalog() const noexcept { return catalog_; }

 private:
  CycleState initialize();
  void self_training_cycle(CycleState& state, CycleMetrics& metrics);
  void co_training_cycle(CycleState& state, CycleMetrics& metrics);
  ModelHandle train_detector(int detector, const AnnotationSet& pseudo, std::uint64_t seed);
  AnnotationSet predict_unlabeled(const ModelHandle& model);
  std::uint64_t training_seed(int k, int detector) const;
  AnnotationSet select_confident(const AnnotationSet& latest, const AnnotationSet& accumulated, std::size_t keep,
                                 Rng& rng) const;
  bool concurrent() const;

  SelfLabelingConfig config_;
  LoopInputs inputs_;
  DetectorBackend& backend_;
  LoopOptions options_;
  ImageCatalog catalog_;
  bool sequence_mode_{false};
};

LoopResult run_self_training(const SelfLabelingConfig& config, const LoopInputs& inputs, DetectorBackend& backend,
                             LoopOptions options = {});
LoopResult run_co_training(const SelfLabelingConfig& config, const LoopInputs& inputs, DetectorBackend& backend,
                           LoopOptions options = {});

// ---------------------------------------------------------------------------
// Checkpoints: run_dir/{state.json, rng.json, dpsi1/, dpsi2/, metrics.csv}
// ---------------------------------------------------------------------------

std::filesystem::path checkpoint(const CycleState& state, const std::filesystem::path& run_dir,
                                 const ClassTable& classes);
CycleState resume(const std::filesystem::path& run_dir, const ClassTable& classes);
bool has_checkpoint(const std::filesystem::path& run_dir);

inline constexpr std::string_view kMetricsHeaderPrefix = "cycle,similarity,delta,accumulated_images,selected_images,predicted_images";
inline constexpr int kMetricsSchemaVersion = 1;

std::string metrics_header(const ClassTable& classes);
std::string metrics_row(const CycleMetrics& m);
std::vector<CycleMetrics> read_metrics(const std::filesystem::path& csv_path);

}  // namespace selflabel
