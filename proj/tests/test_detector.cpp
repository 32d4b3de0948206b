#include <gtest/gtest.h>

#include <atomic>
#include <chrono>
#include <future>
#include <thread>

#include "selflabel/detector.hpp"
#include "selflabel/sim_world.hpp"

using namespace selflabel;

namespace {

/// Returns canned raw detections and records what it was asked.
class CannedBackend final : public DetectorBackend {
 public:
  explicit CannedBackend(bool concurrent = true) : concurrent_(concurrent) {}

  std::string id() const override { return "canned"; }
  bool supports_concurrent_sessions() const override { return concurrent_; }

  ModelHandle train(const TrainRequest& request, const ImageCatalog&) override {
    const int now = ++active_;
    int seen = peak_.load();
    while (now > seen && !peak_.compare_exchange_weak(seen, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    --active_;
    std::lock_guard lock(mutex_);
    last_request = request;
    return ModelHandle{id(), "m", request.view, request.seed};
  }

  AnnotationSet predict(const ModelHandle&, std::span<const ImageRecord> images, const ClassTable&) override {
    std::lock_guard lock(mutex_);
    asked.clear();
    for (const auto& r : images) asked.push_back(r.image_id);
    return raw;
  }

  AnnotationSet raw;
  std::vector<std::string> asked;
  TrainRequest last_request;
  std::atomic<int> peak_{0};

 private:
  bool concurrent_;
  std::atomic<int> active_{0};
  std::mutex mutex_;
};

AnnotationSet labeled_one() {
  AnnotationSet s;
  s.kind = AnnotationKind::ground_truth;
  s.entries["a"] = {Detection{0, {10, 10, 60, 50}, 1.0}};
  return s;
}

const std::vector<ImageRecord> kImages{{"a", 100, 80, std::nullopt, std::nullopt, DomainTag::source},
                                       {"b", 100, 80, std::nullopt, std::nullopt, DomainTag::source}};

}  // namespace

TEST(TrainRequest, RejectsEmptyLabeledSetAndOverlaps) {
  AnnotationSet pseudo;
  pseudo.entries["a"] = {Detection{0, {1, 1, 5, 5}, 0.9}};
  EXPECT_THROW(TrainRequest::make({}, {}, {}, ViewTransform::identity, 0).validate(), PreconditionError);
  EXPECT_THROW(TrainRequest::make(labeled_one(), pseudo, {}, ViewTransform::identity, 0).validate(),
               PreconditionError);
  auto r = TrainRequest::make(labeled_one(), {}, {}, ViewTransform::identity, 0);
  r.pseudo.entries["b"] = {Detection{0, {1, 1, 5, 5}, 0.9}};
  r.negatives_allowed.insert("b");
  EXPECT_THROW(r.validate(), PreconditionError);
}

TEST(TrainRequest, NegativesComeFromLabeledImagesOnly) {
  AnnotationSet pseudo;
  pseudo.entries["b"] = {Detection{0, {1, 1, 5, 5}, 0.9}};
  const auto r = TrainRequest::make(labeled_one(), pseudo, {}, ViewTransform::identity, 3);
  EXPECT_EQ(r.negatives_allowed, (std::set<std::string>{"a"}));
  EXPECT_EQ(r.training_images(), 2u);
}

TEST(Train, BudgetCheckRejectsTooFewSampleVisits) {
  CannedBackend backend;
  TrainingHyper hyper;
  hyper.budget_check = true;
  hyper.values = {{"batch_size", 1}, {"iterations", 1}};
  AnnotationSet two = labeled_one();
  two.entries["b"] = {Detection{0, {1, 1, 5, 5}, 1.0}};
  const ImageCatalog catalog(kImages);
  EXPECT_THROW(train(backend, TrainRequest::make(two, {}, hyper, ViewTransform::identity, 0), catalog),
               ConfigError);
  hyper.values["iterations"] = 2;
  EXPECT_NO_THROW(train(backend, TrainRequest::make(two, {}, hyper, ViewTransform::identity, 0), catalog));
}

TEST(Train, MirrorViewReachesTheBackendMirrored) {
  CannedBackend backend;
  const ImageCatalog catalog(kImages);
  const auto m = train(backend, TrainRequest::make(labeled_one(), {}, {}, ViewTransform::horizontal_mirror, 0), catalog);
  EXPECT_EQ(m.view, ViewTransform::horizontal_mirror);
  const auto& sent = backend.last_request.labeled;
  ASSERT_EQ(sent.image_ids(), std::vector<std::string>{"a#mirror"});
  EXPECT_EQ(sent.entries.at("a#mirror")[0].bbox, (BoundingBox{40, 10, 90, 50}));
  EXPECT_EQ(backend.last_request.negatives_allowed, (std::set<std::string>{"a#mirror"}));
}

TEST(Predict, FiltersClipsRoundsAndOmitsEmptyImages) {
  CannedBackend backend;
  backend.raw.entries["a"] = {Detection{0, {-5, 10, 50.004, 90}, 0.85}, Detection{0, {1, 1, 20, 20}, 0.79},
                              Detection{1, {1, 1, 20, 20}, 0.3}};
  backend.raw.entries["b"] = {Detection{0, {1, 1, 20, 20}, 0.5}};
  const auto out = predict(backend, ModelHandle{"canned", "m"}, kImages, ClassTable::kitti_default());
  EXPECT_EQ(out.kind, AnnotationKind::pseudo_label);
  ASSERT_EQ(out.image_ids(), std::vector<std::string>{"a"});
  ASSERT_EQ(out.entries.at("a").size(), 1u);
  EXPECT_EQ(out.entries.at("a")[0].bbox, (BoundingBox{0, 10, 50, 80}));
  EXPECT_DOUBLE_EQ(out.entries.at("a")[0].confidence, 0.85);
}

TEST(Predict, EmptyImageListAndForeignModel) {
  CannedBackend backend;
  EXPECT_TRUE(predict(backend, ModelHandle{"canned", "m"}, {}, ClassTable::kitti_default()).empty());
  EXPECT_THROW(predict(backend, ModelHandle{"other", "m"}, kImages, ClassTable::kitti_default()), PreconditionError);
}

TEST(Predict, MirrorModelOutputReturnsInTheOriginalFrame) {
  CannedBackend backend;
  backend.raw.entries["a#mirror"] = {Detection{0, {40, 10, 90, 50}, 0.9}};
  const auto out = predict(backend, ModelHandle{"canned", "m", ViewTransform::horizontal_mirror},
                           kImages, ClassTable::kitti_default());
  EXPECT_EQ(backend.asked, (std::vector<std::string>{"a#mirror", "b#mirror"}));
  ASSERT_EQ(out.image_ids(), std::vector<std::string>{"a"});
  EXPECT_EQ(out.entries.at("a")[0].bbox, (BoundingBox{10, 10, 60, 50}));
}

TEST(Predict, OracleSimDetectorReproducesTruthInBothViews) {
  auto world = sim::WorldConfig::defaults();
  world.seed = 8;
  const auto data = sim::generate_dataset(world, 40, DomainTag::target, "t");
  const auto classes = world.class_table();
  sim::DetectorParams params;
  params.oracle = true;
  sim::SimBackend backend(data.hidden, params);
  const ImageCatalog catalog(data.images);
  AnnotationSet expected;
  expected.kind = AnnotationKind::pseudo_label;
  for (const auto& [id, dets] : data.ground_truth.entries) {
    std::vector<Detection> q;
    for (const auto& d : dets) q.push_back(quantize(d, classes[d.class_id].detection_threshold));
    if (!q.empty()) expected.entries[id] = q;
  }
  for (auto view : {ViewTransform::identity, ViewTransform::horizontal_mirror}) {
    const auto model = train(backend, TrainRequest::make(data.ground_truth, {}, {}, view, 1), catalog);
    const auto out = predict(backend, model, data.images, classes);
    ASSERT_EQ(out.image_ids(), expected.image_ids());
    for (const auto& id : out.image_ids()) {
      const auto& got = out.entries.at(id);
      const auto& want = expected.entries.at(id);
      ASSERT_EQ(got.size(), want.size());
      for (std::size_t k = 0; k < got.size(); ++k) {
        EXPECT_EQ(got[k].class_id, want[k].class_id);
        EXPECT_NEAR(got[k].bbox.left, want[k].bbox.left, 0.0100001) << id;
        EXPECT_NEAR(got[k].bbox.right, want[k].bbox.right, 0.0100001) << id;
        EXPECT_EQ(got[k].bbox.top, want[k].bbox.top);
      }
    }
  }
}

TEST(Predict, OutputIsInsideTheImageAndAboveThreshold) {
  auto world = sim::WorldConfig::defaults();
  world.seed = 9;
  const auto data = sim::generate_dataset(world, 60, DomainTag::target, "t");
  const auto classes = world.class_table();
  sim::DetectorParams params;
  params.kappa = 5;
  params.fp_rate = 2.0;
  params.jitter_px = 40;
  sim::SimBackend backend(data.hidden, params);
  const ImageCatalog catalog(data.images);
  const auto model = train(backend, TrainRequest::make(data.ground_truth, {}, {}, ViewTransform::identity, 2), catalog);
  const auto out = predict(backend, model, data.images, classes);
  EXPECT_GT(out.detection_count(), 0u);
  for (const auto& [id, dets] : out.entries) {
    const auto rec = catalog.at(id);
    ASSERT_FALSE(dets.empty());
    for (const auto& d : dets) {
      ASSERT_TRUE(d.bbox.valid());
      ASSERT_GE(d.bbox.left, 0.0);
      ASSERT_GE(d.bbox.top, 0.0);
      ASSERT_LE(d.bbox.right, rec.width);
      ASSERT_LE(d.bbox.bottom, rec.height);
      ASSERT_GE(d.confidence, classes[d.class_id].detection_threshold);
      ASSERT_LE(d.confidence, 1.0);
    }
  }
  EXPECT_EQ(predict(backend, model, data.images, classes), out);
}

TEST(Sessions, BackendsWithoutConcurrencyAreSerialized) {
  const ImageCatalog catalog(kImages);
  for (bool concurrent : {false, true}) {
    CannedBackend backend(concurrent);
    std::vector<std::future<ModelHandle>> jobs;
    for (int i = 0; i < 4; ++i) {
      jobs.push_back(std::async(std::launch::async, [&, i] {
        return train(backend, TrainRequest::make(labeled_one(), {}, {}, ViewTransform::identity, i), catalog);
      }));
    }
    for (auto& j : jobs) j.get();
    if (!concurrent) {
      EXPECT_EQ(backend.peak_.load(), 1);
    } else {
      EXPECT_GE(backend.peak_.load(), 1);
    }
  }
}

TEST(ViewTransformNames, RoundTrip) {
  for (auto v : {ViewTransform::identity, ViewTransform::horizontal_mirror}) {
    EXPECT_EQ(parse_view_transform(to_string(v)), v);
  }
  EXPECT_THROW(parse_view_transform("flip"), ParseError);
}
