#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "selflabel/detector.hpp"
#include "selflabel/domain.hpp"

namespace selflabel::sim {

/// A ground-truth object together with the hidden attributes only the
/// simulated detector can see.
struct SimObject {
  int object_id{};
  ClassId class_id{};
  BoundingBox bbox;
  double difficulty{};
  std::vector<double> appearance;

  friend bool operator==(const SimObject&, const SimObject&) = default;
};

struct HiddenImage {
  int width{};
  std::vector<SimObject> objects;

  friend bool operator==(const HiddenImage&, const HiddenImage&) = default;
};

/// Hidden per-image object table. Lookups of mirrored ids return reflected
/// boxes and appearance vectors with adjacent coordinates swapped.
class HiddenTable {
 public:
  void insert(std::string image_id, HiddenImage image);
  void merge(const HiddenTable& other);
  /// Objects of an image (empty if unknown).
  std::vector<SimObject> objects(std::string_view image_id) const;
  bool contains(std::string_view image_id) const;
  std::size_t size() const noexcept { return images_.size(); }
  const std::map<std::string, HiddenImage, std::less<>>& images() const noexcept { return images_; }

  nlohmann::json to_json() const;
  static HiddenTable from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static HiddenTable load(const std::filesystem::path& path);

  friend bool operator==(const HiddenTable&, const HiddenTable&) = default;

 private:
  std::map<std::string, HiddenImage, std::less<>> images_;
};

/// Pairwise coordinate swap (0↔1, 2↔3, ...) applied to mirrored appearances.
std::vector<double> mirror_appearance(const std::vector<double>& a);

struct ClassProfile {
  std::string name;
  double prior{1.0};
  std::vector<double> appearance_mean;
  double min_height{20.0};
  double max_height{120.0};
  double aspect{1.0};  // width / height
};

struct WorldConfig {
  int image_width{1240};
  int image_height{375};
  double objects_per_image{3.0};
  std::vector<ClassProfile> classes;
  int feature_dim{8};
  double appearance_noise{0.15};
  /// δ: offset along `shift_direction` added to target-domain means.
  double domain_shift{0.0};
  /// δ′: shift left between adapted-source data and the target domain.
  double adapted_residual_shift{0.0};
  std::vector<double> shift_direction;  // unit length; empty means alternating signs
  double difficulty_alpha{2.0};
  double difficulty_beta{2.0};
  std::optional<int> sequence_length;
  double drift_px{3.0};
  std::uint64_t seed{0};

  /// vehicle-like (common, wide) and pedestrian-like (rare, tall) classes in a
  /// 10:1 prior ratio.
  static WorldConfig defaults();
  ClassTable class_table() const;
  void validate() const;
};

nlohmann::json to_json(const WorldConfig& cfg);
WorldConfig world_config_from_json(const nlohmann::json& j);

struct Dataset {
  std::vector<ImageRecord> images;
  AnnotationSet ground_truth;
  HiddenTable hidden;
};

/// Deterministic in (cfg.seed, id_prefix). Image ids are "<prefix><index>".
Dataset generate_dataset(const WorldConfig& cfg, std::size_t count, DomainTag domain, const std::string& id_prefix);

struct SslSplit {
  AnnotationSet labeled;
  std::vector<ImageRecord> labeled_images;
  std::vector<ImageRecord> unlabeled_images;
  AnnotationSet unlabeled_truth;
};

/// Keeps labels for a seeded random `fraction` of the images (at least one).
SslSplit split_labeled(const Dataset& data, double fraction, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Simulated detector
// ---------------------------------------------------------------------------

struct DetectorParams {
  double kappa{50.0};            // skill saturation: s = n / (n + κ)
  double alpha{4.0};             // weight of (skill - difficulty) in the logit
  double beta{1.0};              // weight of appearance distance in the logit
  double jitter_px{6.0};         // box noise at zero skill
  double relative_jitter{0.0};   // localization floor, as a fraction of the box size
  double geometry_gain{0.0};     // inherited misalignment: noise per unit of training-box error
  double fp_rate{0.3};           // false positives per image and class at zero skill
  double confidence_noise{0.02};
  double fp_confidence_span{0.1};
  double fp_appearance_scale{1.0};
  bool oracle{false};            // emit every object exactly, confidence 1
};

nlohmann::json to_json(const DetectorParams& p);
DetectorParams detector_params_from_json(const nlohmann::json& j);

struct ModelState {
  std::vector<std::vector<double>> prototype;  // per class
  std::vector<double> count;                   // contributing boxes per class
  std::vector<double> skill;
  std::vector<double> geometry_error;          // mean relative coordinate error of training boxes
  std::uint64_t noise_seed{};
};

ModelState sim_train(const HiddenTable& hidden, const AnnotationSet& labeled, const AnnotationSet& pseudo,
                     std::size_t class_count, int feature_dim, std::uint64_t seed, const DetectorParams& params);

AnnotationSet sim_predict(const ModelState& model, std::span<const ImageRecord> images, const ClassTable& classes,
                          const HiddenTable& hidden, const DetectorParams& params);

class SimBackend final : public DetectorBackend {
 public:
  SimBackend(HiddenTable hidden, DetectorParams params, int feature_dim = 8);

  std::string id() const override { return "sim"; }
  bool supports_concurrent_sessions() const override { return concurrent_; }
  void set_concurrent_sessions(bool enabled) { concurrent_ = enabled; }

  ModelHandle train(const TrainRequest& request, const ImageCatalog& images) override;
  AnnotationSet predict(const ModelHandle& model, std::span<const ImageRecord> images,
                        const ClassTable& classes) override;

  ModelState model_state(const ModelHandle& model) const;
  const DetectorParams& params() const noexcept { return params_; }
  const HiddenTable& hidden() const noexcept { return hidden_; }

 private:
  HiddenTable hidden_;
  DetectorParams params_;
  int feature_dim_;
  bool concurrent_{true};
  mutable std::mutex mutex_;
  std::map<std::string, ModelState> models_;
};

}  // namespace selflabel::sim
