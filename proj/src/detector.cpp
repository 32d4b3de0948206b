#include "selflabel/detector.hpp"

#include <algorithm>
#include <optional>

namespace selflabel {

std::string_view to_string(ViewTransform view) {
  return view == ViewTransform::identity ? "identity" : "horizontal_mirror";
}

ViewTransform parse_view_transform(std::string_view text) {
  if (text == "identity") return ViewTransform::identity;
  if (text == "horizontal_mirror") return ViewTransform::horizontal_mirror;
  throw ParseError("unknown view_transform '" + std::string(text) + "'");
}

TrainRequest TrainRequest::make(AnnotationSet labeled, AnnotationSet pseudo, TrainingHyper hyper, ViewTransform view,
                                std::uint64_t seed) {
  TrainRequest r;
  for (const auto& [id, dets] : labeled.entries) r.negatives_allowed.insert(id);
  r.labeled = std::move(labeled);
  r.pseudo = std::move(pseudo);
  r.hyper = std::move(hyper);
  r.view = view;
  r.seed = seed;
  return r;
}

void TrainRequest::validate() const {
  if (labeled.empty()) throw PreconditionError("training needs a non-empty labeled set");
  pseudo.validate();
  for (const auto& [id, dets] : pseudo.entries) {
    if (negatives_allowed.count(id)) {
      throw PreconditionError("pseudo-labeled image '" + id + "' must not provide background samples");
    }
    if (labeled.contains(id)) throw PreconditionError("image '" + id + "' is both labeled and pseudo-labeled");
  }
}

namespace {

std::optional<BoundingBox> clip(const BoundingBox& b, const ImageRecord& image) {
  BoundingBox c{std::clamp(b.left, 0.0, static_cast<double>(image.width)),
                std::clamp(b.top, 0.0, static_cast<double>(image.height)),
                std::clamp(b.right, 0.0, static_cast<double>(image.width)),
                std::clamp(b.bottom, 0.0, static_cast<double>(image.height))};
  if (!c.valid()) return std::nullopt;
  return c;
}

template <class Fn>
auto with_session(DetectorBackend& backend, Fn&& fn) {
  if (backend.supports_concurrent_sessions()) return fn();
  std::lock_guard lock(backend.session_mutex());
  return fn();
}

}  // namespace

ModelHandle train(DetectorBackend& backend, const TrainRequest& request, const ImageCatalog& images) {
  request.validate();
  request.hyper.check_budget(request.training_images());
  if (request.view == ViewTransform::identity) {
    return with_session(backend, [&] { return backend.train(request, images); });
  }
  TrainRequest mirrored = request;
  mirrored.labeled = mirror_annotations(request.labeled, images);
  mirrored.pseudo = mirror_annotations(request.pseudo, images);
  mirrored.negatives_allowed.clear();
  for (const auto& id : request.negatives_allowed) mirrored.negatives_allowed.insert(mirror_image_id(id));
  return with_session(backend, [&] { return backend.train(mirrored, images); });
}

AnnotationSet predict(DetectorBackend& backend, const ModelHandle& model, std::span<const ImageRecord> images,
                      const ClassTable& classes) {
  if (model.backend_id != backend.id()) {
    throw PreconditionError("model '" + model.token + "' belongs to backend '" + model.backend_id + "', not '" +
                            backend.id() + "'");
  }
  AnnotationSet out;
  out.kind = AnnotationKind::pseudo_label;
  if (images.empty()) return out;

  ImageCatalog catalog(images);
  AnnotationSet raw;
  if (model.view == ViewTransform::identity) {
    raw = with_session(backend, [&] { return backend.predict(model, images, classes); });
  } else {
    std::vector<ImageRecord> mirrored(images.begin(), images.end());
    for (auto& r : mirrored) r.image_id = mirror_image_id(r.image_id);
    raw = with_session(backend, [&] { return backend.predict(model, mirrored, classes); });
    raw.kind = AnnotationKind::pseudo_label;
    raw.ignored.clear();
    raw = mirror_annotations(raw, catalog);
  }

  for (const auto& [id, dets] : raw.entries) {
    if (!catalog.contains(id) || is_mirrored_id(id)) continue;
    const ImageRecord record = catalog.at(id);
    std::vector<Detection> kept;
    for (const auto& d : dets) {
      if (!classes.valid_id(d.class_id)) continue;
      const double threshold = classes[d.class_id].detection_threshold;
      if (!(d.confidence >= threshold)) continue;
      auto box = clip(d.bbox, record);
      if (!box) continue;
      Detection q = quantize(Detection{d.class_id, *box, std::min(d.confidence, 1.0)}, threshold);
      if (q.bbox.valid()) kept.push_back(q);
    }
    if (!kept.empty()) out.entries.emplace(id, std::move(kept));
  }
  return out;
}

}  // namespace selflabel
