#include "selflabel/domain.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <utility>

namespace selflabel {

bool BoundingBox::valid() const noexcept {
  return std::isfinite(left) && std::isfinite(top) && std::isfinite(right) && std::isfinite(bottom) &&
         left < right && top < bottom;
}

BoundingBox make_box(double left, double top, double right, double bottom) {
  BoundingBox box{left, top, right, bottom};
  if (!box.valid()) {
    throw PreconditionError("invalid bounding box (" + std::to_string(left) + ", " + std::to_string(top) + ", " +
                            std::to_string(right) + ", " + std::to_string(bottom) + ")");
  }
  return box;
}

std::string_view to_string(DomainTag tag) {
  switch (tag) {
    case DomainTag::source: return "source";
    case DomainTag::adapted_source: return "adapted_source";
    case DomainTag::target: return "target";
  }
  return "source";
}

DomainTag parse_domain_tag(std::string_view text) {
  if (text == "source") return DomainTag::source;
  if (text == "adapted_source") return DomainTag::adapted_source;
  if (text == "target") return DomainTag::target;
  throw ParseError("unknown domain_tag '" + std::string(text) + "'");
}

void ImageRecord::validate() const {
  if (image_id.empty()) throw PreconditionError("image record with empty image_id");
  if (width <= 0 || height <= 0) throw PreconditionError("image '" + image_id + "' has non-positive size");
  if (sequence_id.has_value() != frame_index.has_value()) {
    throw PreconditionError("image '" + image_id + "': sequence_id and frame_index must be both present or both absent");
  }
  if (frame_index && *frame_index < 0) throw PreconditionError("image '" + image_id + "': negative frame_index");
}

bool is_mirrored_id(std::string_view id) noexcept {
  return id.size() > kMirrorSuffix.size() && id.substr(id.size() - kMirrorSuffix.size()) == kMirrorSuffix;
}

std::string base_image_id(std::string_view id) {
  if (is_mirrored_id(id)) id.remove_suffix(kMirrorSuffix.size());
  return std::string(id);
}

std::string mirror_image_id(std::string_view id) {
  if (is_mirrored_id(id)) return base_image_id(id);
  return std::string(id) + std::string(kMirrorSuffix);
}

ImageCatalog::ImageCatalog(std::span<const ImageRecord> records) {
  for (const auto& r : records) add(r);
}

void ImageCatalog::add(const ImageRecord& record) {
  record.validate();
  if (is_mirrored_id(record.image_id)) {
    throw PreconditionError("image id '" + record.image_id + "' uses the reserved mirror suffix");
  }
  auto [it, inserted] = records_.emplace(record.image_id, record);
  if (!inserted && !(it->second == record)) {
    throw PreconditionError("duplicate image id '" + record.image_id + "' with conflicting records");
  }
}

bool ImageCatalog::contains(std::string_view id) const {
  return records_.find(base_image_id(id)) != records_.end();
}

ImageRecord ImageCatalog::at(std::string_view id) const {
  auto it = records_.find(base_image_id(id));
  if (it == records_.end()) throw PreconditionError("unknown image id '" + std::string(id) + "'");
  ImageRecord r = it->second;
  r.image_id = std::string(id);
  return r;
}

void ImageCatalog::check_sequence_uniqueness() const {
  std::set<std::pair<std::string, int>> seen;
  for (const auto& [id, r] : records_) {
    if (!r.in_sequence()) continue;
    if (!seen.emplace(*r.sequence_id, *r.frame_index).second) {
      throw PreconditionError("duplicate (sequence_id, frame_index) = (" + *r.sequence_id + ", " +
                              std::to_string(*r.frame_index) + ") at image '" + id + "'");
    }
  }
}

std::string_view to_string(AnnotationKind kind) {
  switch (kind) {
    case AnnotationKind::ground_truth: return "ground_truth";
    case AnnotationKind::pseudo_label: return "pseudo_label";
    case AnnotationKind::unlabeled: return "unlabeled";
  }
  return "pseudo_label";
}

AnnotationKind parse_annotation_kind(std::string_view text) {
  if (text == "ground_truth") return AnnotationKind::ground_truth;
  if (text == "pseudo_label") return AnnotationKind::pseudo_label;
  if (text == "unlabeled") return AnnotationKind::unlabeled;
  throw ParseError("unknown annotation kind '" + std::string(text) + "'");
}

std::size_t AnnotationSet::detection_count() const noexcept {
  std::size_t total = 0;
  for (const auto& [id, dets] : entries) total += dets.size();
  return total;
}

std::vector<std::string> AnnotationSet::image_ids() const {
  std::vector<std::string> ids;
  ids.reserve(entries.size());
  for (const auto& [id, dets] : entries) ids.push_back(id);
  return ids;
}

void AnnotationSet::validate() const { validate(0); }

void AnnotationSet::validate(std::size_t class_count) const {
  for (const auto& [id, dets] : entries) {
    if (kind == AnnotationKind::unlabeled && !dets.empty()) {
      throw PreconditionError("unlabeled set has detections for image '" + id + "'");
    }
    if (kind == AnnotationKind::pseudo_label && dets.empty()) {
      throw PreconditionError("pseudo-label set has an empty image '" + id + "'");
    }
    for (const auto& d : dets) {
      if (!d.bbox.valid()) throw PreconditionError("invalid box in image '" + id + "'");
      if (!(d.confidence >= 0.0 && d.confidence <= 1.0)) {
        throw PreconditionError("confidence outside [0,1] in image '" + id + "'");
      }
      if (d.class_id < 0 || (class_count && static_cast<std::size_t>(d.class_id) >= class_count)) {
        throw PreconditionError("class id " + std::to_string(d.class_id) + " out of range in image '" + id + "'");
      }
    }
  }
  if (kind != AnnotationKind::ground_truth && !ignored.empty()) {
    throw PreconditionError("don't-care regions are only allowed on ground-truth sets");
  }
}

AnnotationSet restrict_to(const AnnotationSet& set, std::span<const std::string> ids) {
  AnnotationSet out;
  out.kind = set.kind;
  for (const auto& id : ids) {
    if (auto it = set.entries.find(id); it != set.entries.end()) out.entries.emplace(id, it->second);
    if (auto it = set.ignored.find(id); it != set.ignored.end()) out.ignored.emplace(id, it->second);
  }
  return out;
}

namespace {

BoundingBox reflect(const BoundingBox& b, double width) {
  return BoundingBox{width - b.right, b.top, width - b.left, b.bottom};
}

template <class WidthOf>
AnnotationSet mirror_with(const AnnotationSet& set, WidthOf&& width_of) {
  AnnotationSet out;
  out.kind = set.kind;
  for (const auto& [id, dets] : set.entries) {
    const double w = width_of(id);
    std::vector<Detection> mirrored;
    mirrored.reserve(dets.size());
    for (const auto& d : dets) mirrored.push_back(Detection{d.class_id, reflect(d.bbox, w), d.confidence});
    out.entries.emplace(mirror_image_id(id), std::move(mirrored));
  }
  for (const auto& [id, boxes] : set.ignored) {
    const double w = width_of(id);
    std::vector<BoundingBox> mirrored;
    for (const auto& b : boxes) mirrored.push_back(reflect(b, w));
    out.ignored.emplace(mirror_image_id(id), std::move(mirrored));
  }
  return out;
}

}  // namespace

AnnotationSet mirror_annotations(const AnnotationSet& set, const std::map<std::string, int, std::less<>>& widths) {
  return mirror_with(set, [&](const std::string& id) {
    auto it = widths.find(base_image_id(id));
    if (it == widths.end()) throw PreconditionError("no width known for image '" + id + "'");
    return static_cast<double>(it->second);
  });
}

AnnotationSet mirror_annotations(const AnnotationSet& set, const ImageCatalog& catalog) {
  return mirror_with(set, [&](const std::string& id) {
    if (!catalog.contains(id)) throw PreconditionError("no width known for image '" + id + "'");
    return static_cast<double>(catalog.at(id).width);
  });
}

Detection quantize(const Detection& d, double floor) {
  auto cents = [](double v) { return std::round(v * 100.0) / 100.0; };
  Detection q = d;
  q.bbox = BoundingBox{cents(d.bbox.left), cents(d.bbox.top), cents(d.bbox.right), cents(d.bbox.bottom)};
  q.confidence = std::round(d.confidence * 10000.0) / 10000.0;
  if (q.confidence < floor) q.confidence = std::ceil(floor * 10000.0) / 10000.0;
  q.confidence = std::clamp(q.confidence, 0.0, 1.0);
  return q;
}

ClassTable::ClassTable(std::vector<ClassSpec> classes) : classes_(std::move(classes)) {
  if (classes_.empty()) throw ConfigError("class table must not be empty");
  std::set<std::string> names;
  for (const auto& c : classes_) {
    if (c.name.empty()) throw ConfigError("class with empty name");
    if (!names.insert(c.name).second) throw ConfigError("duplicate class name '" + c.name + "'");
    if (!(c.detection_threshold >= 0.0 && c.detection_threshold <= 1.0)) {
      throw ConfigError("class '" + c.name + "': detection threshold must lie in [0,1]");
    }
    if (!(c.iou_threshold > 0.0 && c.iou_threshold <= 1.0)) {
      throw ConfigError("class '" + c.name + "': IoU threshold must lie in (0,1]");
    }
    if (!(c.min_height_px >= 0.0)) throw ConfigError("class '" + c.name + "': negative minimum height");
  }
}

ClassTable ClassTable::kitti_default() {
  return ClassTable({
      ClassSpec{"vehicle", 0.8, 25.0, 0.7, {"Car", "Van", "Truck"}},
      ClassSpec{"pedestrian", 0.8, 25.0, 0.5, {"Pedestrian", "Person_sitting"}},
  });
}

std::optional<ClassId> ClassTable::find(std::string_view type_name) const {
  for (std::size_t i = 0; i < classes_.size(); ++i) {
    const auto& c = classes_[i];
    if (c.name == type_name) return static_cast<ClassId>(i);
    if (std::find(c.kitti_names.begin(), c.kitti_names.end(), type_name) != c.kitti_names.end()) {
      return static_cast<ClassId>(i);
    }
  }
  return std::nullopt;
}

ClassTable ClassTable::with_thresholds(double threshold) const {
  auto copy = classes_;
  for (auto& c : copy) c.detection_threshold = threshold;
  return ClassTable(std::move(copy));
}

void StopParams::validate() const {
  if (min_cycles < 1) throw ConfigError("K_min must be >= 1");
  if (window < 1) throw ConfigError("delta_K must be >= 1");
  if (!(delta_map_threshold >= 0.0)) throw ConfigError("T_dmap must be >= 0");
}

void SelfLabelingConfig::validate() const {
  if (random_pool < 1) throw ConfigError("N must be >= 1");
  if (keep_per_cycle < 1) throw ConfigError("n must be >= 1");
  if (keep_per_cycle > random_pool) throw ConfigError("n must not exceed N");
  if (exchange_pool && (*exchange_pool < keep_per_cycle || *exchange_pool > random_pool)) {
    throw ConfigError("m must satisfy n <= m <= N");
  }
  stop.validate();
  if (sequence && (sequence->min_gap_current < 0 || sequence->min_gap_previous < 0)) {
    throw ConfigError("dt1/dt2 must be non-negative");
  }
}

void TrainingHyper::check_budget(std::size_t training_images) const {
  if (!budget_check) return;
  auto number = [&](const char* key) -> double {
    if (!values.contains(key) || !values[key].is_number()) {
      throw ConfigError(std::string("budget_check requires numeric hyper key '") + key + "'");
    }
    return values[key].get<double>();
  };
  const double visits = number("batch_size") * number("iterations");
  if (visits < static_cast<double>(training_images)) {
    throw ConfigError("training budget too small: batch_size x iterations = " + std::to_string(visits) + " < " +
                      std::to_string(training_images) + " training images");
  }
}

}  // namespace selflabel
