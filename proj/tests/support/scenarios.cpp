#include "scenarios.hpp"

#include <algorithm>

#include "selflabel/experiment.hpp"

namespace selflabel::testing {

double median(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const std::size_t mid = values.size() / 2;
  return values.size() % 2 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
}

SslOutcome run_ssl(const SslScenario& scenario, std::uint64_t seed, bool with_ablations) {
  sim::WorldConfig world = scenario.world;
  world.seed = seed;
  const auto train = sim::generate_dataset(world, scenario.train_images, DomainTag::target, "train_");
  const auto test = sim::generate_dataset(world, scenario.test_images, DomainTag::target, "test_");
  const auto split = sim::split_labeled(train, scenario.labeled_fraction, seed);
  const ClassTable classes = scenario.loop.class_table;

  sim::HiddenTable hidden = train.hidden;
  hidden.merge(test.hidden);
  sim::SimBackend backend(hidden, scenario.params, world.feature_dim);

  SelfLabelingConfig loop = scenario.loop;
  loop.rng_seed = seed;
  LoopInputs inputs{split.labeled, split.labeled_images, split.unlabeled_images};
  const ImageCatalog catalog(train.images);
  const std::uint64_t final_seed = derive_seed(seed, "final");
  auto final_eval = [&](const AnnotationSet& pseudo) {
    return train_and_evaluate(backend, split.labeled, catalog, pseudo, test.images, test.ground_truth, classes, {},
                              final_seed);
  };

  SslOutcome out;
  out.unlabeled_truth = split.unlabeled_truth;
  out.baseline = final_eval(AnnotationSet{});
  const auto self = run_self_training(loop, inputs, backend);
  out.self_training = final_eval(self.pseudo_labels);
  out.co_loop = run_co_training(loop, inputs, backend);
  out.co_training = final_eval(out.co_loop.pseudo_labels);
  if (with_ablations) {
    out.ablation_raw_vehicle = out.co_training.ap[0];
    out.ablation_no_fp_vehicle =
        final_eval(strip_false_positives(out.co_loop.pseudo_labels, split.unlabeled_truth, classes)).ap[0];
    out.ablation_no_fp_bb_vehicle =
        final_eval(snap_true_positive_boxes(out.co_loop.pseudo_labels, split.unlabeled_truth, classes)).ap[0];
  }
  return out;
}

UdaOutcome run_uda(const UdaScenario& scenario, std::uint64_t seed) {
  sim::WorldConfig world = scenario.world;
  world.seed = seed;
  const auto source = sim::generate_dataset(world, scenario.source_images, DomainTag::source, "src_");
  const auto asource = sim::generate_dataset(world, scenario.source_images, DomainTag::adapted_source, "asrc_");
  const auto target = sim::generate_dataset(world, scenario.target_images, DomainTag::target, "tgt_");
  const auto test = sim::generate_dataset(world, scenario.test_images, DomainTag::target, "test_");
  const ClassTable classes = scenario.loop.class_table;

  sim::HiddenTable hidden = source.hidden;
  hidden.merge(asource.hidden);
  hidden.merge(target.hidden);
  hidden.merge(test.hidden);
  sim::SimBackend backend(hidden, scenario.params, world.feature_dim);

  SelfLabelingConfig loop = scenario.loop;
  loop.rng_seed = seed;
  const std::uint64_t final_seed = derive_seed(seed, "final");

  auto evaluate_with = [&](const sim::Dataset& labeled, bool self_label) {
    ImageCatalog catalog(labeled.images);
    for (const auto& r : target.images) catalog.add(r);
    AnnotationSet pseudo;
    if (self_label) {
      LoopInputs inputs{labeled.ground_truth, labeled.images, target.images};
      pseudo = run_co_training(loop, inputs, backend).pseudo_labels;
    }
    return train_and_evaluate(backend, labeled.ground_truth, catalog, pseudo, test.images, test.ground_truth, classes,
                              {}, final_seed)
        .map;
  };

  UdaOutcome out;
  out.source_only = evaluate_with(source, false);
  out.asource_only = evaluate_with(asource, false);
  out.co_source = evaluate_with(source, true);
  out.co_asource = evaluate_with(asource, true);
  return out;
}

}  // namespace selflabel::testing
