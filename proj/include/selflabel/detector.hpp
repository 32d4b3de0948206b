#pragma once

#include <cstdint>
#include <mutex>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "selflabel/domain.hpp"

namespace selflabel {

enum class ViewTransform { identity, horizontal_mirror };

std::string_view to_string(ViewTransform view);
ViewTransform parse_view_transform(std::string_view text);

/// A trained detector, resolvable only by the backend that produced it.
struct ModelHandle {
  std::string backend_id;
  std::string token;
  ViewTransform view{ViewTransform::identity};
  std::uint64_t training_seed{};

  friend bool operator==(const ModelHandle&, const ModelHandle&) = default;
};

/// Training data for one detector. Background (negative) samples may only be
/// mined from images listed in `negatives_allowed`, which never includes a
/// pseudo-labeled image.
struct TrainRequest {
  AnnotationSet labeled;
  AnnotationSet pseudo;
  std::set<std::string> negatives_allowed;
  TrainingHyper hyper;
  ViewTransform view{ViewTransform::identity};
  std::uint64_t seed{};

  /// Builds a request with negatives allowed on every labeled image only.
  static TrainRequest make(AnnotationSet labeled, AnnotationSet pseudo, TrainingHyper hyper, ViewTransform view,
                           std::uint64_t seed);

  std::size_t training_images() const noexcept { return labeled.size() + pseudo.size(); }
  void validate() const;
};

/// What a detector implementation provides. Requests reach a backend already
/// in its own frame: the engine applies view transforms and thresholds.
class DetectorBackend {
 public:
  virtual ~DetectorBackend() = default;

  virtual std::string id() const = 0;
  virtual bool supports_concurrent_sessions() const = 0;

  virtual ModelHandle train(const TrainRequest& request, const ImageCatalog& images) = 0;
  /// Raw detections; the engine filters by threshold afterwards.
  virtual AnnotationSet predict(const ModelHandle& model, std::span<const ImageRecord> images,
                                const ClassTable& classes) = 0;

  /// Serializes calls for backends without concurrent sessions.
  std::mutex& session_mutex() { return session_mutex_; }

 private:
  std::mutex session_mutex_;
};

/// Engine-side training: validates the request, checks the training budget,
/// mirrors the data for mirror-view models and dispatches to the backend.
ModelHandle train(DetectorBackend& backend, const TrainRequest& request, const ImageCatalog& images);

/// Engine-side inference. Mirror-view models see mirrored images and their
/// output is mapped back, so callers always get original-frame boxes. Output
/// keeps detections with confidence >= the class threshold, clipped to the
/// image and rounded to label-file precision; images left empty are omitted.
AnnotationSet predict(DetectorBackend& backend, const ModelHandle& model, std::span<const ImageRecord> images,
                      const ClassTable& classes);

}  // namespace selflabel
