#pragma once

// Reference implementations used only by tests. They follow the textbook
// definitions as literally as possible and share no code with the library.

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "selflabel/domain.hpp"

namespace selflabel::oracle {

inline double box_iou(const BoundingBox& a, const BoundingBox& b) {
  const double x0 = std::max(a.left, b.left), x1 = std::min(a.right, b.right);
  const double y0 = std::max(a.top, b.top), y1 = std::min(a.bottom, b.bottom);
  if (x1 <= x0 || y1 <= y0) return 0.0;
  const double inter = (x1 - x0) * (y1 - y0);
  return inter / ((a.right - a.left) * (a.bottom - a.top) + (b.right - b.left) * (b.bottom - b.top) - inter);
}

/// One scored detection of a class, in ranking order.
struct Scored {
  double confidence;
  bool tp;
};

struct ClassOutcome {
  std::vector<Scored> ranked;
  std::size_t positives{};  // evaluable ground truth
};

/// Literal matcher: walks each class's detections of each image from most to
/// least confident and applies the matching rules one detection at a time.
inline std::vector<ClassOutcome> match(const AnnotationSet& gt, const AnnotationSet& pred, const ClassTable& classes) {
  std::vector<ClassOutcome> out(classes.size());
  std::vector<std::string> ids;
  for (const auto& [id, v] : gt.entries) ids.push_back(id);
  for (const auto& [id, v] : pred.entries) {
    if (!gt.entries.count(id)) ids.push_back(id);
  }
  for (std::size_t c = 0; c < classes.size(); ++c) {
    const auto& spec = classes[static_cast<ClassId>(c)];
    struct Ranked {
      double conf;
      std::string id;
      double left;
      bool tp;
    };
    std::vector<Ranked> all;
    for (const auto& id : ids) {
      std::vector<Detection> g, p;
      if (gt.entries.count(id)) {
        for (const auto& d : gt.entries.at(id)) {
          if (d.class_id == static_cast<ClassId>(c)) g.push_back(d);
        }
      }
      if (pred.entries.count(id)) {
        for (const auto& d : pred.entries.at(id)) {
          if (d.class_id == static_cast<ClassId>(c)) p.push_back(d);
        }
      }
      std::vector<BoundingBox> regions;
      if (gt.ignored.count(id)) regions = gt.ignored.at(id);
      for (const auto& d : g) {
        if (d.bbox.bottom - d.bbox.top < spec.min_height_px) {
          regions.push_back(d.bbox);
        } else {
          ++out[c].positives;
        }
      }
      std::stable_sort(p.begin(), p.end(), [](const Detection& a, const Detection& b) {
        if (a.confidence != b.confidence) return a.confidence > b.confidence;
        return a.bbox.left < b.bbox.left;
      });
      std::vector<bool> used(g.size(), false);
      for (const auto& d : p) {
        int best = -1;
        double best_iou = 0.0;
        for (std::size_t k = 0; k < g.size(); ++k) {
          if (used[k] || g[k].bbox.bottom - g[k].bbox.top < spec.min_height_px) continue;
          const double v = box_iou(d.bbox, g[k].bbox);
          if (v < spec.iou_threshold) continue;
          if (best < 0 || v > best_iou) {
            best = static_cast<int>(k);
            best_iou = v;
          }
        }
        if (best >= 0) {
          used[static_cast<std::size_t>(best)] = true;
          all.push_back({d.confidence, id, d.bbox.left, true});
          continue;
        }
        bool dont_care = false;
        for (const auto& r : regions) dont_care = dont_care || box_iou(d.bbox, r) >= spec.iou_threshold;
        if (dont_care || d.bbox.bottom - d.bbox.top < spec.min_height_px) continue;
        all.push_back({d.confidence, id, d.bbox.left, false});
      }
    }
    std::stable_sort(all.begin(), all.end(), [](const Ranked& a, const Ranked& b) {
      if (a.conf != b.conf) return a.conf > b.conf;
      if (a.id != b.id) return a.id < b.id;
      return a.left < b.left;
    });
    for (const auto& r : all) out[c].ranked.push_back({r.conf, r.tp});
  }
  return out;
}

/// Interpolated AP straight from the staircase definition: for each recall
/// sample r, the best precision over every ranking prefix whose recall is at
/// least r (0 when no prefix gets there).
inline double staircase_ap(const std::vector<Scored>& ranked, std::size_t positives, int samples = 11) {
  if (positives == 0) return ranked.empty() ? 100.0 : 0.0;
  double total = 0.0;
  for (int s = 0; s < samples; ++s) {
    const double r = samples == 11 ? s / 10.0 : (s + 1) / 40.0;
    double best = 0.0;
    for (std::size_t k = 1; k <= ranked.size(); ++k) {
      std::size_t tp = 0;
      for (std::size_t i = 0; i < k; ++i) tp += ranked[i].tp ? 1 : 0;
      const double recall = static_cast<double>(tp) / static_cast<double>(positives);
      const double precision = static_cast<double>(tp) / static_cast<double>(k);
      if (recall + 1e-12 >= r) best = std::max(best, precision);
    }
    total += best;
  }
  return 100.0 * total / samples;
}

inline double mean_ap(const AnnotationSet& gt, const AnnotationSet& pred, const ClassTable& classes,
                      int samples = 11) {
  const auto outcome = match(gt, pred, classes);
  double sum = 0.0;
  for (const auto& c : outcome) sum += staircase_ap(c.ranked, c.positives, samples);
  return sum / static_cast<double>(outcome.size());
}

/// Random box inside a width x height image.
inline BoundingBox random_box(std::mt19937_64& rng, double width, double height, double min_size = 2.0,
                              double max_size = 120.0) {
  std::uniform_real_distribution<double> size(min_size, max_size);
  const double w = std::min(size(rng), width - 1.0);
  const double h = std::min(size(rng), height - 1.0);
  std::uniform_real_distribution<double> x(0.0, width - w), y(0.0, height - h);
  const double l = x(rng), t = y(rng);
  return BoundingBox{l, t, l + w, t + h};
}

/// A box near `b`: each coordinate moved by up to `spread` pixels.
inline BoundingBox perturb(std::mt19937_64& rng, const BoundingBox& b, double spread) {
  std::uniform_real_distribution<double> d(-spread, spread);
  BoundingBox out{b.left + d(rng), b.top + d(rng), b.right + d(rng), b.bottom + d(rng)};
  if (out.right <= out.left) out.right = out.left + 1.0;
  if (out.bottom <= out.top) out.bottom = out.top + 1.0;
  return out;
}

}  // namespace selflabel::oracle
