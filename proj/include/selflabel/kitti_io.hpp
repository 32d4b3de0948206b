#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "selflabel/domain.hpp"

namespace selflabel::kitti {

/// One line of a KITTI object label file (15 fields, 16 with score).
struct LabelLine {
  std::string type;
  double truncated{0.0};
  int occluded{0};
  double alpha{-10.0};
  BoundingBox bbox;
  std::array<double, 3> dimensions{-1.0, -1.0, -1.0};
  std::array<double, 3> location{-1000.0, -1000.0, -1000.0};
  double rotation_y{-10.0};
  std::optional<double> score;
};

LabelLine parse_label_line(std::string_view line, std::size_t line_number = 0);

/// Result of parsing a label file against a class table. Lines whose type is
/// not in the table land in `ignored` (don't-care, never trained on).
struct ParsedLabels {
  std::vector<Detection> detections;
  std::vector<LabelLine> detection_lines;  // parallel to `detections`
  std::vector<LabelLine> ignored;
};

ParsedLabels parse_label_file(std::string_view text, const ClassTable& classes);

/// Renders 16-field lines (score always present). `passthrough`, when given,
/// must be parallel to `detections` and supplies the 3D fields; otherwise the
/// KITTI sentinel defaults are written.
std::string write_label_file(std::span<const Detection> detections, const ClassTable& classes,
                             std::span<const LabelLine> passthrough = {});

/// Don't-care regions rendered as "DontCare" lines.
std::string write_dont_care(std::span<const BoundingBox> regions);

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

struct ManifestEntry {
  ImageRecord image;
  std::optional<std::filesystem::path> label_path;  // absolute after load
};

struct DatasetManifest {
  std::string name;
  std::vector<ManifestEntry> entries;

  std::vector<ImageRecord> images() const;
  ImageCatalog catalog() const;
};

/// Reads a JSON-lines manifest; relative label paths resolve against the
/// manifest's directory. Throws on duplicate ids or missing label files.
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// Labeled entries become a ground_truth set (with don't-care regions);
/// entries without a label path form an unlabeled set.
struct ManifestAnnotations {
  AnnotationSet labeled;
  AnnotationSet unlabeled;
};

ManifestAnnotations load_annotations(const DatasetManifest& manifest, const ClassTable& classes);

/// Writes <image_id>.txt per image plus index.json recording the set kind.
std::vector<std::filesystem::path> save_annotations(const AnnotationSet& set, const std::filesystem::path& dir,
                                                    const ClassTable& classes);
AnnotationSet load_saved_annotations(const std::filesystem::path& dir, const ClassTable& classes);

/// Manifest + label files for `images`, labels taken from `set` (images
/// without an entry get no label path). Used to hand data to external tools.
DatasetManifest write_dataset(const std::filesystem::path& dir, std::string name, std::span<const ImageRecord> images,
                              const AnnotationSet* set, const ClassTable& classes);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

}  // namespace selflabel::kitti
