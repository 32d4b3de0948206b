#include "selflabel/selection.hpp"

#include <algorithm>
#include <cstdlib>
#include <map>
#include <numeric>

namespace selflabel {

std::vector<ImageConfidence> image_confidences(const AnnotationSet& pseudo) {
  std::vector<ImageConfidence> out;
  out.reserve(pseudo.size());
  for (const auto& [id, dets] : pseudo.entries) {
    if (dets.empty()) continue;
    double sum = 0.0;
    for (const auto& d : dets) sum += d.confidence;
    out.push_back(ImageConfidence{id, sum / static_cast<double>(dets.size()), dets.size()});
  }
  return out;
}

namespace {

using FramesBySequence = std::map<std::string, std::vector<int>>;

bool far_from(const std::vector<int>& frames, int frame, int gap) {
  return std::all_of(frames.begin(), frames.end(), [&](int f) { return std::abs(frame - f) >= gap; });
}

}  // namespace

AnnotationSet rand_select(const AnnotationSet& pseudo, std::size_t count, Rng& rng, const SequenceContext* sequences) {
  if (count < 1) throw PreconditionError("rand_select needs N >= 1");
  std::vector<std::string> order = pseudo.image_ids();
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::string> chosen;
  if (!sequences) {
    order.resize(std::min(count, order.size()));
    chosen = std::move(order);
  } else {
    FramesBySequence previous, current;
    for (const auto& [id, dets] : sequences->accumulated.entries) {
      if (!sequences->images.contains(id)) continue;
      const ImageRecord r = sequences->images.at(id);
      if (r.in_sequence()) previous[*r.sequence_id].push_back(*r.frame_index);
    }
    for (const auto& id : order) {
      if (chosen.size() >= count) break;
      const ImageRecord r = sequences->images.at(id);
      if (!r.in_sequence()) {
        chosen.push_back(id);
        continue;
      }
      const int frame = *r.frame_index;
      auto& mine = current[*r.sequence_id];
      if (!far_from(mine, frame, sequences->params.min_gap_current)) continue;
      if (!far_from(previous[*r.sequence_id], frame, sequences->params.min_gap_previous)) continue;
      mine.push_back(frame);
      chosen.push_back(id);
    }
  }
  return restrict_to(pseudo, chosen);
}

std::vector<std::string> rank_images(std::vector<ImageConfidence> images, std::size_t count, Confidence direction) {
  std::sort(images.begin(), images.end(), [direction](const ImageConfidence& a, const ImageConfidence& b) {
    if (a.mean_confidence != b.mean_confidence) {
      return direction == Confidence::most ? a.mean_confidence > b.mean_confidence
                                           : a.mean_confidence < b.mean_confidence;
    }
    return a.image_id < b.image_id;
  });
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < images.size() && i < count; ++i) ids.push_back(images[i].image_id);
  return ids;
}

AnnotationSet select_extreme(const AnnotationSet& pseudo, std::size_t count, Confidence direction) {
  if (count < 1) throw PreconditionError("select_extreme needs n >= 1");
  const auto ids = rank_images(image_confidences(pseudo), count, direction);
  return restrict_to(pseudo, ids);
}

AnnotationSet fuse(const AnnotationSet& older, const AnnotationSet& newer) {
  AnnotationSet out = older;
  out.kind = AnnotationKind::pseudo_label;
  for (const auto& [id, dets] : newer.entries) out.entries.insert_or_assign(id, dets);
  return out;
}

}  // namespace selflabel
