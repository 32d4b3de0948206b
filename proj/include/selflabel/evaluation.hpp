#pragma once

#include <optional>
#include <string>
#include <vector>

#include "selflabel/domain.hpp"

namespace selflabel {

/// Intersection over union; 0 for disjoint boxes.
double iou(const BoundingBox& a, const BoundingBox& b) noexcept;

/// A scored prediction after matching.
struct ScoredDetection {
  std::string image_id;
  std::size_t index{};  // position in the prediction list of its image
  double confidence{};
  double left{};
  bool true_positive{};
  std::optional<std::size_t> matched_gt;  // index into the image's ground-truth list
};

struct ClassMatch {
  /// Confidence-descending; ties broken by image id, then left edge.
  std::vector<ScoredDetection> detections;
  std::size_t evaluable_gt{};
  std::size_t ignored_gt{};
  std::size_t ignored_detections{};

  std::size_t true_positives() const noexcept;
  std::size_t false_positives() const noexcept { return detections.size() - true_positives(); }
};

struct MatchResult {
  std::vector<ClassMatch> per_class;
};

/// KITTI-style greedy matching. Ground truth below the class minimum height and
/// ignore-bucket regions are don't-care: detections hitting them are dropped
/// from scoring, as are unmatched detections below the minimum height.
MatchResult match_detections(const AnnotationSet& gt, const AnnotationSet& pred, const ClassTable& classes);

enum class ApInterpolation { eleven_point, forty_point };

struct PrPoint {
  double recall{};
  double precision{};
  double confidence{};
};

/// Precision/recall after each scored detection, in ranking order.
std::vector<PrPoint> precision_recall(const ClassMatch& match);

/// Interpolated AP on the 0–100 scale. A class with no evaluable ground truth
/// scores 100 if nothing was predicted for it and 0 otherwise.
double average_precision(const ClassMatch& match, ApInterpolation mode = ApInterpolation::eleven_point);

struct ApReport {
  std::vector<std::string> class_names;
  std::vector<double> ap;  // per class, 0–100
  double map{};
  std::vector<std::vector<PrPoint>> curves;
  ApInterpolation mode{ApInterpolation::eleven_point};
};

ApReport evaluate(const AnnotationSet& gt, const AnnotationSet& pred, const ClassTable& classes,
                  ApInterpolation mode = ApInterpolation::eleven_point);

/// mAP with `old_set` in the ground-truth role and `new_set` as predictions.
double map_similarity(const AnnotationSet& old_set, const AnnotationSet& new_set, const ClassTable& classes,
                      ApInterpolation mode = ApInterpolation::eleven_point);

/// Keeps only detections the matcher scores as true positives; empty images
/// are dropped.
AnnotationSet strip_false_positives(const AnnotationSet& pseudo, const AnnotationSet& gt, const ClassTable& classes);

/// strip_false_positives, with each kept box replaced by its matched
/// ground-truth box. Confidences are preserved.
AnnotationSet snap_true_positive_boxes(const AnnotationSet& pseudo, const AnnotationSet& gt, const ClassTable& classes);

struct ClassLabelStats {
  std::size_t count{};
  std::size_t true_positives{};
  std::size_t false_positives{};
  double fp_percent{};
};

/// Per-class pseudo-label counts and the share of false positives among the
/// scored ones.
std::vector<ClassLabelStats> self_label_stats(const AnnotationSet& pseudo, const AnnotationSet& gt,
                                              const ClassTable& classes);

nlohmann::json to_json(const ApReport& report);

}  // namespace selflabel
