#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace selflabel {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input text; carries the 1-based line number when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

class BackendError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Geometry and detections
// ---------------------------------------------------------------------------

/// Axis-aligned box in continuous pixel coordinates, origin top-left.
struct BoundingBox {
  double left{};
  double top{};
  double right{};
  double bottom{};

  double width() const noexcept { return right - left; }
  double height() const noexcept { return bottom - top; }
  double area() const noexcept { return width() * height(); }

  /// Finite coordinates and strictly positive extent.
  bool valid() const noexcept;

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

/// Builds a box, throwing PreconditionError when it violates the box invariants.
BoundingBox make_box(double left, double top, double right, double bottom);

using ClassId = int;

struct Detection {
  ClassId class_id{};
  BoundingBox bbox;
  double confidence{1.0};

  friend bool operator==(const Detection&, const Detection&) = default;
};

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

enum class DomainTag { source, adapted_source, target };

std::string_view to_string(DomainTag tag);
DomainTag parse_domain_tag(std::string_view text);

struct ImageRecord {
  std::string image_id;
  int width{};
  int height{};
  std::optional<std::string> sequence_id;
  std::optional<int> frame_index;
  DomainTag domain_tag{DomainTag::source};

  bool in_sequence() const noexcept { return sequence_id.has_value(); }
  void validate() const;

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

/// Suffix that marks horizontally mirrored image ids, keeping mirrored and
/// original sets disjoint by id.
inline constexpr std::string_view kMirrorSuffix = "#mirror";

bool is_mirrored_id(std::string_view id) noexcept;
/// Strips the mirror suffix if present.
std::string base_image_id(std::string_view id);
/// Toggles the mirror suffix, so applying it twice returns the original id.
std::string mirror_image_id(std::string_view id);

/// Lookup of image records by id. Mirrored ids resolve to a synthesized record
/// of the underlying image.
class ImageCatalog {
 public:
  ImageCatalog() = default;
  explicit ImageCatalog(std::span<const ImageRecord> records);

  void add(const ImageRecord& record);
  bool contains(std::string_view id) const;
  ImageRecord at(std::string_view id) const;
  std::size_t size() const noexcept { return records_.size(); }
  /// Throws PreconditionError if (sequence_id, frame_index) pairs repeat.
  void check_sequence_uniqueness() const;

  const std::map<std::string, ImageRecord, std::less<>>& records() const noexcept { return records_; }

 private:
  std::map<std::string, ImageRecord, std::less<>> records_;
};

// ---------------------------------------------------------------------------
// Annotation sets
// ---------------------------------------------------------------------------

enum class AnnotationKind { ground_truth, pseudo_label, unlabeled };

std::string_view to_string(AnnotationKind kind);
AnnotationKind parse_annotation_kind(std::string_view text);

/// Map from image id to its detections. Ground-truth sets may additionally
/// carry don't-care regions (ignore-bucket boxes) per image.
struct AnnotationSet {
  AnnotationKind kind{AnnotationKind::pseudo_label};
  std::map<std::string, std::vector<Detection>> entries;
  std::map<std::string, std::vector<BoundingBox>> ignored;

  std::size_t size() const noexcept { return entries.size(); }
  bool empty() const noexcept { return entries.empty(); }
  bool contains(const std::string& id) const { return entries.count(id) != 0; }
  std::size_t detection_count() const noexcept;
  std::vector<std::string> image_ids() const;

  /// Enforces the kind invariants (unlabeled: all empty; pseudo_label: none
  /// empty) and the detection invariants.
  void validate() const;
  void validate(std::size_t class_count) const;

  friend bool operator==(const AnnotationSet&, const AnnotationSet&) = default;
};

/// Subset of `set` restricted to `ids` (ids absent from `set` are skipped).
AnnotationSet restrict_to(const AnnotationSet& set, std::span<const std::string> ids);

/// Horizontal reflection of every box: (l,t,r,b) -> (w-r, t, w-l, b). Image
/// ids get the mirror suffix toggled. `widths` is keyed by un-mirrored id.
AnnotationSet mirror_annotations(const AnnotationSet& set, const std::map<std::string, int, std::less<>>& widths);
AnnotationSet mirror_annotations(const AnnotationSet& set, const ImageCatalog& catalog);

/// Rounds boxes to 0.01 px and confidences to 1e-4, the precision label files
/// carry. Confidences never round below `floor`.
Detection quantize(const Detection& d, double floor = 0.0);

// ---------------------------------------------------------------------------
// Classes and configuration
// ---------------------------------------------------------------------------

struct ClassSpec {
  std::string name;
  double detection_threshold{0.8};
  double min_height_px{25.0};
  double iou_threshold{0.7};
  /// Label-file type names mapped onto this class besides `name` itself.
  std::vector<std::string> kitti_names;

  friend bool operator==(const ClassSpec&, const ClassSpec&) = default;
};

class ClassTable {
 public:
  explicit ClassTable(std::vector<ClassSpec> classes);

  /// vehicle (Car/Van/Truck, IoU 0.7) and pedestrian (Pedestrian/Person_sitting,
  /// IoU 0.5); threshold 0.8 and 25 px minimum height for both.
  static ClassTable kitti_default();

  std::size_t size() const noexcept { return classes_.size(); }
  const ClassSpec& operator[](ClassId id) const { return classes_.at(static_cast<std::size_t>(id)); }
  std::span<const ClassSpec> classes() const noexcept { return classes_; }
  bool valid_id(ClassId id) const noexcept { return id >= 0 && static_cast<std::size_t>(id) < classes_.size(); }
  /// Class for a label-file type name; nullopt means the ignore bucket.
  std::optional<ClassId> find(std::string_view type_name) const;
  ClassTable with_thresholds(double threshold) const;

  friend bool operator==(const ClassTable&, const ClassTable&) = default;

 private:
  std::vector<ClassSpec> classes_;
};

struct StopParams {
  int min_cycles{20};              // K_min
  double delta_map_threshold{2.0}; // T_ΔmAP, mAP points
  int window{5};                   // ΔK
  void validate() const;
};

/// Frame-distance constraints for sequence datasets.
struct SequenceParams {
  int min_gap_current{5};   // Δt₁, between frames picked in the same cycle
  int min_gap_previous{10}; // Δt₂, to frames picked in earlier cycles
};

struct SelfLabelingConfig {
  ClassTable class_table = ClassTable::kitti_default();
  std::size_t random_pool{2000};           // N
  std::size_t keep_per_cycle{100};         // n
  std::optional<std::size_t> exchange_pool; // m; nullopt is unbounded
  StopParams stop;
  std::optional<SequenceParams> sequence;
  std::uint64_t rng_seed{0};

  void validate() const;
};

/// Detector training hyper-parameters: opaque to the engine apart from the
/// visit-every-sample budget check.
struct TrainingHyper {
  nlohmann::json values = nlohmann::json::object();
  bool budget_check{false};

  /// Requires batch_size × iterations ≥ training_images when budget_check is on.
  void check_budget(std::size_t training_images) const;
};

}  // namespace selflabel
