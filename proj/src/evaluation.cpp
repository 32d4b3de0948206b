#include "selflabel/evaluation.hpp"

#include <algorithm>
#include <set>

namespace selflabel {

double iou(const BoundingBox& a, const BoundingBox& b) noexcept {
  const double iw = std::min(a.right, b.right) - std::max(a.left, b.left);
  const double ih = std::min(a.bottom, b.bottom) - std::max(a.top, b.top);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

std::size_t ClassMatch::true_positives() const noexcept {
  return static_cast<std::size_t>(
      std::count_if(detections.begin(), detections.end(), [](const auto& d) { return d.true_positive; }));
}

namespace {

bool ranks_before(const ScoredDetection& a, const ScoredDetection& b) {
  if (a.confidence != b.confidence) return a.confidence > b.confidence;
  if (a.image_id != b.image_id) return a.image_id < b.image_id;
  if (a.left != b.left) return a.left < b.left;
  return a.index < b.index;
}

const std::vector<Detection> kNoDetections;
const std::vector<BoundingBox> kNoRegions;

template <class Map>
const auto& lookup(const Map& m, const std::string& id, const typename Map::mapped_type& fallback) {
  auto it = m.find(id);
  return it == m.end() ? fallback : it->second;
}

void match_image(const std::string& id, const std::vector<Detection>& gt, const std::vector<BoundingBox>& regions,
                 const std::vector<Detection>& pred, const ClassTable& classes, MatchResult& result) {
  for (ClassId c = 0; c < static_cast<ClassId>(classes.size()); ++c) {
    const ClassSpec& spec = classes[c];
    ClassMatch& cm = result.per_class[static_cast<std::size_t>(c)];

    std::vector<std::size_t> evaluable, dont_care;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (gt[g].class_id != c) continue;
      (gt[g].bbox.height() < spec.min_height_px ? dont_care : evaluable).push_back(g);
    }
    cm.evaluable_gt += evaluable.size();
    cm.ignored_gt += dont_care.size() + regions.size();

    std::vector<ScoredDetection> dets;
    for (std::size_t p = 0; p < pred.size(); ++p) {
      if (pred[p].class_id != c) continue;
      dets.push_back(ScoredDetection{id, p, pred[p].confidence, pred[p].bbox.left, false, std::nullopt});
    }
    std::sort(dets.begin(), dets.end(), ranks_before);

    std::vector<bool> taken(gt.size(), false);
    for (auto& d : dets) {
      const BoundingBox& box = pred[d.index].bbox;
      double best = -1.0;
      std::optional<std::size_t> best_gt;
      for (std::size_t g : evaluable) {
        if (taken[g]) continue;
        const double o = iou(box, gt[g].bbox);
        if (o >= spec.iou_threshold && o > best) {
          best = o;
          best_gt = g;
        }
      }
      if (best_gt) {
        taken[*best_gt] = true;
        d.true_positive = true;
        d.matched_gt = best_gt;
        cm.detections.push_back(d);
        continue;
      }
      bool hits_dont_care = false;
      for (std::size_t g : dont_care) hits_dont_care = hits_dont_care || iou(box, gt[g].bbox) >= spec.iou_threshold;
      for (const auto& r : regions) hits_dont_care = hits_dont_care || iou(box, r) >= spec.iou_threshold;
      if (hits_dont_care || box.height() < spec.min_height_px) {
        ++cm.ignored_detections;
        continue;
      }
      cm.detections.push_back(d);
    }
  }
}

}  // namespace

MatchResult match_detections(const AnnotationSet& gt, const AnnotationSet& pred, const ClassTable& classes) {
  MatchResult result;
  result.per_class.resize(classes.size());
  std::set<std::string> ids;
  for (const auto& [id, d] : gt.entries) ids.insert(id);
  for (const auto& [id, d] : pred.entries) ids.insert(id);
  for (const auto& id : ids) {
    match_image(id, lookup(gt.entries, id, kNoDetections), lookup(gt.ignored, id, kNoRegions),
                lookup(pred.entries, id, kNoDetections), classes, result);
  }
  for (auto& cm : result.per_class) std::sort(cm.detections.begin(), cm.detections.end(), ranks_before);
  return result;
}

std::vector<PrPoint> precision_recall(const ClassMatch& match) {
  std::vector<PrPoint> curve;
  curve.reserve(match.detections.size());
  std::size_t tp = 0;
  for (std::size_t i = 0; i < match.detections.size(); ++i) {
    if (match.detections[i].true_positive) ++tp;
    const double recall = match.evaluable_gt ? static_cast<double>(tp) / static_cast<double>(match.evaluable_gt) : 0.0;
    const double precision = static_cast<double>(tp) / static_cast<double>(i + 1);
    curve.push_back(PrPoint{recall, precision, match.detections[i].confidence});
  }
  return curve;
}

double average_precision(const ClassMatch& match, ApInterpolation mode) {
  if (match.evaluable_gt == 0) return match.detections.empty() ? 100.0 : 0.0;
  const auto curve = precision_recall(match);

  // Suffix maximum of precision, so max_prec[i] = max precision at recall >= recall[i].
  std::vector<double> max_prec(curve.size());
  double running = 0.0;
  for (std::size_t i = curve.size(); i-- > 0;) {
    running = std::max(running, curve[i].precision);
    max_prec[i] = running;
  }

  const int steps = mode == ApInterpolation::eleven_point ? 11 : 40;
  double sum = 0.0;
  for (int s = 0; s < steps; ++s) {
    const double r = mode == ApInterpolation::eleven_point ? s / 10.0 : (s + 1) / 40.0;
    // Recall is non-decreasing along the curve: find the first point reaching r.
    auto it = std::lower_bound(curve.begin(), curve.end(), r - 1e-12,
                               [](const PrPoint& p, double v) { return p.recall < v; });
    if (it != curve.end()) sum += max_prec[static_cast<std::size_t>(it - curve.begin())];
  }
  return 100.0 * sum / steps;
}

ApReport evaluate(const AnnotationSet& gt, const AnnotationSet& pred, const ClassTable& classes, ApInterpolation mode) {
  const MatchResult match = match_detections(gt, pred, classes);
  ApReport report;
  report.mode = mode;
  double total = 0.0;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    report.class_names.push_back(classes[static_cast<ClassId>(c)].name);
    report.ap.push_back(average_precision(match.per_class[c], mode));
    report.curves.push_back(precision_recall(match.per_class[c]));
    total += report.ap.back();
  }
  report.map = total / static_cast<double>(classes.size());
  return report;
}

double map_similarity(const AnnotationSet& old_set, const AnnotationSet& new_set, const ClassTable& classes,
                      ApInterpolation mode) {
  AnnotationSet reference = old_set;
  reference.kind = AnnotationKind::ground_truth;
  for (auto& [id, dets] : reference.entries) {
    for (auto& d : dets) d.confidence = 1.0;
  }
  return evaluate(reference, new_set, classes, mode).map;
}

namespace {

AnnotationSet keep_true_positives(const AnnotationSet& pseudo, const AnnotationSet& gt, const ClassTable& classes,
                                  bool snap) {
  const MatchResult match = match_detections(gt, pseudo, classes);
  std::map<std::string, std::vector<std::pair<std::size_t, std::size_t>>> kept;  // image -> (pred idx, gt idx)
  for (const auto& cm : match.per_class) {
    for (const auto& d : cm.detections) {
      if (d.true_positive) kept[d.image_id].emplace_back(d.index, *d.matched_gt);
    }
  }
  AnnotationSet out;
  out.kind = AnnotationKind::pseudo_label;
  for (auto& [id, pairs] : kept) {
    std::sort(pairs.begin(), pairs.end());
    const auto& src = pseudo.entries.at(id);
    const auto& ref = gt.entries.at(id);
    std::vector<Detection> dets;
    for (const auto& [p, g] : pairs) {
      Detection d = src[p];
      if (snap) d.bbox = ref[g].bbox;
      dets.push_back(d);
    }
    out.entries.emplace(id, std::move(dets));
  }
  return out;
}

}  // namespace

AnnotationSet strip_false_positives(const AnnotationSet& pseudo, const AnnotationSet& gt, const ClassTable& classes) {
  return keep_true_positives(pseudo, gt, classes, false);
}

AnnotationSet snap_true_positive_boxes(const AnnotationSet& pseudo, const AnnotationSet& gt,
                                       const ClassTable& classes) {
  return keep_true_positives(pseudo, gt, classes, true);
}

std::vector<ClassLabelStats> self_label_stats(const AnnotationSet& pseudo, const AnnotationSet& gt,
                                              const ClassTable& classes) {
  std::vector<ClassLabelStats> stats(classes.size());
  for (const auto& [id, dets] : pseudo.entries) {
    for (const auto& d : dets) {
      if (classes.valid_id(d.class_id)) ++stats[static_cast<std::size_t>(d.class_id)].count;
    }
  }
  const MatchResult match = match_detections(gt, pseudo, classes);
  for (std::size_t c = 0; c < classes.size(); ++c) {
    auto& s = stats[c];
    s.true_positives = match.per_class[c].true_positives();
    s.false_positives = match.per_class[c].false_positives();
    const std::size_t scored = s.true_positives + s.false_positives;
    s.fp_percent = scored ? 100.0 * static_cast<double>(s.false_positives) / static_cast<double>(scored) : 0.0;
  }
  return stats;
}

nlohmann::json to_json(const ApReport& report) {
  nlohmann::json j;
  j["interpolation"] = report.mode == ApInterpolation::eleven_point ? "11-point" : "40-point";
  j["mAP"] = report.map;
  j["classes"] = nlohmann::json::array();
  for (std::size_t c = 0; c < report.ap.size(); ++c) {
    nlohmann::json pr = nlohmann::json::array();
    for (const auto& p : report.curves[c]) pr.push_back({p.recall, p.precision, p.confidence});
    j["classes"].push_back({{"name", report.class_names[c]}, {"AP", report.ap[c]}, {"pr", pr}});
  }
  return j;
}

}  // namespace selflabel
