#pragma once

#include <optional>
#include <string>
#include <vector>

#include "selflabel/domain.hpp"
#include "selflabel/rng.hpp"

namespace selflabel {

struct ImageConfidence {
  std::string image_id;
  double mean_confidence{};
  std::size_t detection_count{};
};

/// Mean detection confidence per image of a pseudo-label set.
std::vector<ImageConfidence> image_confidences(const AnnotationSet& pseudo);

/// Frame-distance context for sequence datasets. `accumulated` holds the
/// pseudo-labels selected in earlier cycles.
struct SequenceContext {
  const ImageCatalog& images;
  SequenceParams params;
  const AnnotationSet& accumulated;
};

/// Random pick of up to `count` images. Without a sequence context this is a
/// uniform sample without replacement; with one, images are visited in a
/// seeded shuffled order and accepted only if they keep Δt₁ to frames already
/// accepted in this call and Δt₂ to accumulated frames of the same sequence.
AnnotationSet rand_select(const AnnotationSet& pseudo, std::size_t count, Rng& rng,
                          const SequenceContext* sequences = nullptr);

enum class Confidence { most, least };

/// Ranks by mean confidence (ties by image id ascending) and keeps `count`.
std::vector<std::string> rank_images(std::vector<ImageConfidence> images, std::size_t count, Confidence direction);

AnnotationSet select_extreme(const AnnotationSet& pseudo, std::size_t count, Confidence direction);

/// Image-level union; images present in both keep only `newer`'s detections.
AnnotationSet fuse(const AnnotationSet& older, const AnnotationSet& newer);

}  // namespace selflabel
