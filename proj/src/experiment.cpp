#include "selflabel/experiment.hpp"

#include <cstdio>
#include <set>

#include "selflabel/external_backend.hpp"
#include "selflabel/kitti_io.hpp"
#include "selflabel/rng.hpp"

namespace selflabel {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Typed access to one JSON object of a config file. Every key read is marked;
/// finish() rejects the rest, so typos surface as errors.
class Fields {
 public:
  Fields(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError("config field '" + display() + "' must be an object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return obj_.contains(key) && !obj_[key].is_null();
  }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return obj_.at(key);
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  template <class T>
  T get(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    return convert<T>(obj_[key], field(key));
  }

  template <class T>
  std::optional<T> optional(const std::string& key) {
    if (!has(key)) return std::nullopt;
    return convert<T>(obj_[key], field(key));
  }

  Fields object(const std::string& key) {
    seen_.insert(key);
    static const json empty = json::object();
    if (!obj_.contains(key) || obj_[key].is_null()) return Fields(empty, field(key));
    return Fields(obj_[key], field(key));
  }

  void finish() const {
    for (const auto& [key, value] : obj_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown config field '" + field(key) + "'");
    }
  }

  template <class T>
  static T convert(const json& v, const std::string& where) {
    auto fail = [&](const char* expected) -> T {
      throw ConfigError("config field '" + where + "': expected " + expected + ", got " + v.dump());
    };
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) return fail("a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) return fail("a string");
      return v.get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) return fail("a number");
      return v.get<T>();
    } else if constexpr (std::is_unsigned_v<T>) {
      // Integers built in memory are stored signed even when non-negative.
      if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
        return fail("a non-negative integer");
      }
      return v.get<T>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) return fail("an integer");
      return v.get<T>();
    } else {
      return v.get<T>();
    }
  }

 private:
  std::string display() const { return path_.empty() ? "<root>" : path_; }

  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

fs::path resolve(const fs::path& base, const fs::path& p) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

ApInterpolation parse_ap(const std::string& text, const std::string& where) {
  if (text == "11" || text == "eleven_point") return ApInterpolation::eleven_point;
  if (text == "40" || text == "forty_point") return ApInterpolation::forty_point;
  throw ConfigError("config field '" + where + "': expected \"11\" or \"40\", got \"" + text + "\"");
}

std::string ap_name(ApInterpolation mode) { return mode == ApInterpolation::eleven_point ? "11" : "40"; }

template <class Fn>
auto field_guard(const std::string& where, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    throw ConfigError("config field '" + where + "': " + e.what());
  }
}

ClassTable parse_classes(const json& j) {
  if (!j.is_array() || j.empty()) throw ConfigError("config field 'classes': expected a non-empty array");
  std::vector<ClassSpec> specs;
  for (std::size_t i = 0; i < j.size(); ++i) {
    Fields f(j[i], "classes[" + std::to_string(i) + "]");
    ClassSpec c;
    c.name = f.get<std::string>("name", "");
    if (c.name.empty()) throw ConfigError("config field '" + f.field("name") + "' is required");
    c.detection_threshold = f.get<double>("threshold", c.detection_threshold);
    c.min_height_px = f.get<double>("min_height", c.min_height_px);
    c.iou_threshold = f.get<double>("iou", c.iou_threshold);
    c.kitti_names = f.get<std::vector<std::string>>("kitti_names", {});
    f.finish();
    specs.push_back(std::move(c));
  }
  return field_guard("classes", [&] { return ClassTable(std::move(specs)); });
}

json classes_to_json(const ClassTable& classes) {
  json out = json::array();
  for (const auto& c : classes.classes()) {
    out.push_back({{"name", c.name},
                   {"threshold", c.detection_threshold},
                   {"min_height", c.min_height_px},
                   {"iou", c.iou_threshold},
                   {"kitti_names", c.kitti_names}});
  }
  return out;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

void ExperimentConfig::validate() const {
  field_guard("self_labeling", [&] { loop.validate(); return 0; });
  if (max_cycles < 1) throw ConfigError("config field 'self_labeling.K_max': must be >= 1");
  if (data.labeled.empty()) throw ConfigError("config field 'data.labeled' is required");
  if (data.unlabeled.empty()) throw ConfigError("config field 'data.unlabeled' is required");
  if (out.empty()) throw ConfigError("config field 'out' is required");
  if (backend.type == BackendConfig::Type::external && backend.command.empty()) {
    throw ConfigError("config field 'backend.command' is required for an external backend");
  }
  if (backend.type == BackendConfig::Type::sim && backend.hidden.empty()) {
    throw ConfigError("config field 'backend.hidden' is required for the sim backend");
  }
  if (backend.timeout_s <= 0) throw ConfigError("config field 'backend.timeout_s': must be positive");
  if (backend.max_restarts < 0) throw ConfigError("config field 'backend.max_restarts': must be >= 0");
  if (report.ablations && !data.unlabeled_gt) {
    throw ConfigError("config field 'report.ablations' needs 'data.unlabeled_gt'");
  }
}

ExperimentConfig experiment_config_from_json(const json& j, const fs::path& base_dir) {
  ExperimentConfig cfg;
  Fields root(j, "");
  cfg.mode = field_guard("mode", [&] { return parse_loop_mode(root.get<std::string>("mode", "co")); });
  cfg.loop.rng_seed = root.get<std::uint64_t>("seed", 0);
  cfg.out = resolve(base_dir, root.get<std::string>("out", "run"));
  if (root.has("classes")) cfg.loop.class_table = parse_classes(root.raw("classes"));

  {
    Fields f = root.object("self_labeling");
    auto& L = cfg.loop;
    L.random_pool = f.get<std::size_t>("N", L.random_pool);
    L.keep_per_cycle = f.get<std::size_t>("n", L.keep_per_cycle);
    L.exchange_pool = f.optional<std::size_t>("m");
    L.stop.min_cycles = f.get<int>("K_min", L.stop.min_cycles);
    L.stop.delta_map_threshold = f.get<double>("T_dmap", L.stop.delta_map_threshold);
    L.stop.window = f.get<int>("dK", L.stop.window);
    cfg.max_cycles = f.get<int>("K_max", cfg.max_cycles);
    L.sequence = SequenceParams{};
    if (f.has("sequence")) {
      Fields s = f.object("sequence");
      L.sequence->min_gap_current = s.get<int>("dt1", L.sequence->min_gap_current);
      L.sequence->min_gap_previous = s.get<int>("dt2", L.sequence->min_gap_previous);
      s.finish();
    } else if (j.contains("self_labeling") && j["self_labeling"].contains("sequence")) {
      L.sequence.reset();  // explicit null
    }
    cfg.exchange_policy = field_guard(f.field("exchange_label_policy"), [&] {
      return parse_exchange_policy(f.get<std::string>("exchange_label_policy", "teacher"));
    });
    cfg.disable_mirroring = f.get<bool>("disable_mirroring", false);
    cfg.sequential = f.get<bool>("sequential", false);
    f.finish();
  }
  {
    Fields f = root.object("training");
    if (f.has("hyper")) {
      cfg.hyper.values = f.raw("hyper");
      if (!cfg.hyper.values.is_object()) throw ConfigError("config field 'training.hyper': expected an object");
    }
    cfg.hyper.budget_check = f.get<bool>("budget_check", false);
    f.finish();
  }
  {
    Fields f = root.object("data");
    cfg.data.labeled = resolve(base_dir, f.get<std::string>("labeled", ""));
    cfg.data.unlabeled = resolve(base_dir, f.get<std::string>("unlabeled", ""));
    if (auto p = f.optional<std::string>("test")) cfg.data.test = resolve(base_dir, *p);
    if (auto p = f.optional<std::string>("unlabeled_gt")) cfg.data.unlabeled_gt = resolve(base_dir, *p);
    f.finish();
  }
  {
    Fields f = root.object("backend");
    const auto type = f.get<std::string>("type", "sim");
    auto& B = cfg.backend;
    if (type == "sim") {
      B.type = BackendConfig::Type::sim;
      for (const auto& p : f.get<std::vector<std::string>>("hidden", {})) B.hidden.push_back(resolve(base_dir, p));
      if (f.has("params")) {
        B.params = field_guard(f.field("params"), [&] { return sim::detector_params_from_json(f.raw("params")); });
      }
      B.feature_dim = f.get<int>("feature_dim", B.feature_dim);
    } else if (type == "external") {
      B.type = BackendConfig::Type::external;
      B.command = f.get<std::string>("command", "");
      B.timeout_s = f.get<double>("timeout_s", B.timeout_s);
      B.max_restarts = f.get<int>("max_restarts", B.max_restarts);
    } else {
      throw ConfigError("config field 'backend.type': expected \"sim\" or \"external\", got \"" + type + "\"");
    }
    f.finish();
  }
  {
    Fields f = root.object("report");
    cfg.report.ap = parse_ap(f.get<std::string>("ap", "11"), "report.ap");
    cfg.report.baseline = f.get<bool>("baseline", true);
    cfg.report.ablations = f.get<bool>("ablations", false);
    f.finish();
  }
  root.finish();
  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(kitti::read_text_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("cannot parse config '" + path.string() + "': " + e.what());
  }
  return experiment_config_from_json(j, path.parent_path());
}

json to_json(const ExperimentConfig& cfg) {
  const auto& L = cfg.loop;
  json sl{{"N", L.random_pool},
          {"n", L.keep_per_cycle},
          {"m", L.exchange_pool ? json(*L.exchange_pool) : json(nullptr)},
          {"K_min", L.stop.min_cycles},
          {"T_dmap", L.stop.delta_map_threshold},
          {"dK", L.stop.window},
          {"K_max", cfg.max_cycles},
          {"exchange_label_policy", std::string(to_string(cfg.exchange_policy))},
          {"disable_mirroring", cfg.disable_mirroring},
          {"sequential", cfg.sequential}};
  sl["sequence"] = L.sequence ? json{{"dt1", L.sequence->min_gap_current}, {"dt2", L.sequence->min_gap_previous}}
                              : json(nullptr);
  json data{{"labeled", cfg.data.labeled.string()}, {"unlabeled", cfg.data.unlabeled.string()}};
  if (cfg.data.test) data["test"] = cfg.data.test->string();
  if (cfg.data.unlabeled_gt) data["unlabeled_gt"] = cfg.data.unlabeled_gt->string();
  json backend;
  if (cfg.backend.type == BackendConfig::Type::sim) {
    json hidden = json::array();
    for (const auto& p : cfg.backend.hidden) hidden.push_back(p.string());
    backend = {{"type", "sim"},
               {"hidden", hidden},
               {"params", sim::to_json(cfg.backend.params)},
               {"feature_dim", cfg.backend.feature_dim}};
  } else {
    backend = {{"type", "external"},
               {"command", cfg.backend.command},
               {"timeout_s", cfg.backend.timeout_s},
               {"max_restarts", cfg.backend.max_restarts}};
  }
  return json{{"mode", std::string(to_string(cfg.mode))},
              {"seed", L.rng_seed},
              {"out", cfg.out.string()},
              {"classes", classes_to_json(L.class_table)},
              {"self_labeling", sl},
              {"training", {{"hyper", cfg.hyper.values}, {"budget_check", cfg.hyper.budget_check}}},
              {"data", data},
              {"backend", backend},
              {"report",
               {{"ap", ap_name(cfg.report.ap)}, {"baseline", cfg.report.baseline}, {"ablations", cfg.report.ablations}}}};
}

std::string config_hash(const ExperimentConfig& cfg) {
  json j = to_json(cfg);
  j.erase("out");
  j.erase("report");
  j["ap"] = ap_name(cfg.report.ap);  // the similarity measure does affect the loop
  return hex64(hash_text(j.dump()));
}

void apply_overrides(ExperimentConfig& cfg, const CliOverrides& o) {
  if (o.mode) cfg.mode = parse_loop_mode(*o.mode);
  if (o.seed) cfg.loop.rng_seed = *o.seed;
  if (o.out) cfg.out = *o.out;
  if (o.backend) {
    const std::string& b = *o.backend;
    constexpr std::string_view prefix = "external:";
    if (b == "sim") {
      cfg.backend.type = BackendConfig::Type::sim;
    } else if (b.rfind(prefix, 0) == 0) {
      cfg.backend.type = BackendConfig::Type::external;
      cfg.backend.command = b.substr(prefix.size());
    } else {
      throw ConfigError("--backend: expected sim or external:\"CMD\", got '" + b + "'");
    }
  }
  cfg.validate();
}

std::unique_ptr<DetectorBackend> make_backend(const ExperimentConfig& cfg, const ClassTable& classes) {
  if (cfg.backend.type == BackendConfig::Type::sim) {
    sim::HiddenTable hidden;
    for (const auto& p : cfg.backend.hidden) hidden.merge(sim::HiddenTable::load(p));
    return std::make_unique<sim::SimBackend>(std::move(hidden), cfg.backend.params, cfg.backend.feature_dim);
  }
  ExternalOptions options;
  options.command = cfg.backend.command;
  options.work_dir = cfg.out / "detector";
  options.timeout = std::chrono::milliseconds(static_cast<long long>(cfg.backend.timeout_s * 1000.0));
  options.max_restarts = cfg.backend.max_restarts;
  return std::make_unique<ExternalBackend>(std::move(options), classes);
}

ApReport train_and_evaluate(DetectorBackend& backend, const AnnotationSet& labeled, const ImageCatalog& catalog,
                            const AnnotationSet& pseudo, std::span<const ImageRecord> test_images,
                            const AnnotationSet& test_gt, const ClassTable& classes, const TrainingHyper& hyper,
                            std::uint64_t seed, ApInterpolation mode) {
  auto request = TrainRequest::make(labeled, pseudo, hyper, ViewTransform::identity, seed);
  const ModelHandle model = train(backend, request, catalog);
  const AnnotationSet pred = predict(backend, model, test_images, classes);
  return evaluate(test_gt, pred, classes, mode);
}

json ablation_report(DetectorBackend& backend, const AnnotationSet& labeled, const ImageCatalog& catalog,
                     const AnnotationSet& pseudo, const AnnotationSet& pseudo_gt,
                     std::span<const ImageRecord> test_images, const AnnotationSet& test_gt, const ClassTable& classes,
                     const TrainingHyper& hyper, std::uint64_t seed, ApInterpolation mode) {
  auto run = [&](const AnnotationSet& set) {
    return to_json(train_and_evaluate(backend, labeled, catalog, set, test_images, test_gt, classes, hyper, seed, mode));
  };
  json stats = json::array();
  const auto label_stats = self_label_stats(pseudo, pseudo_gt, classes);
  for (std::size_t c = 0; c < label_stats.size(); ++c) {
    const auto& s = label_stats[c];
    stats.push_back({{"class", classes[static_cast<ClassId>(c)].name},
                     {"count", s.count},
                     {"true_positives", s.true_positives},
                     {"false_positives", s.false_positives},
                     {"fp_percent", s.fp_percent}});
  }
  return json{{"raw", run(pseudo)},
              {"no_fp", run(strip_false_positives(pseudo, pseudo_gt, classes))},
              {"no_fp_bb", run(snap_true_positive_boxes(pseudo, pseudo_gt, classes))},
              {"self_label_stats", stats}};
}

namespace {

struct LoadedSet {
  AnnotationSet annotations;
  std::vector<ImageRecord> images;
};

LoadedSet load_labeled(const fs::path& manifest_path, const ClassTable& classes) {
  const auto manifest = kitti::load_manifest(manifest_path);
  LoadedSet out;
  out.annotations = kitti::load_annotations(manifest, classes).labeled;
  for (const auto& e : manifest.entries) {
    if (e.label_path) out.images.push_back(e.image);
  }
  return out;
}

}  // namespace

RunOutcome run_experiment(const ExperimentConfig& cfg, std::optional<int> stop_after_cycle) {
  cfg.validate();
  fs::create_directories(cfg.out);
  kitti::write_text_file(cfg.out / "config.json", to_json(cfg).dump(2) + "\n");
  const ClassTable& classes = cfg.loop.class_table;

  LoopInputs inputs;
  {
    auto labeled = load_labeled(cfg.data.labeled, classes);
    inputs.labeled = std::move(labeled.annotations);
    inputs.labeled_images = std::move(labeled.images);
    inputs.unlabeled_images = kitti::load_manifest(cfg.data.unlabeled).images();
  }
  auto backend = make_backend(cfg, classes);

  LoopOptions options;
  options.mode = cfg.mode;
  options.exchange_policy = cfg.exchange_policy;
  options.identical_views = cfg.disable_mirroring;
  options.force_sequential = cfg.sequential;
  options.max_cycles = cfg.max_cycles;
  options.hyper = cfg.hyper;
  options.similarity_mode = cfg.report.ap;
  options.run_dir = cfg.out;
  options.config_hash = config_hash(cfg);
  options.stop_after_cycle = stop_after_cycle;

  SelfLabelingLoop loop(cfg.loop, inputs, *backend, options);
  RunOutcome outcome;
  outcome.loop = loop.run();
  if (!outcome.loop.completed) return outcome;

  kitti::save_annotations(outcome.loop.pseudo_labels, cfg.out / "pseudo_labels", classes);
  if (!cfg.data.test) return outcome;

  const auto test = load_labeled(*cfg.data.test, classes);
  const std::uint64_t final_seed = derive_seed(cfg.seed(), "final");
  const auto final_report = train_and_evaluate(*backend, inputs.labeled, loop.catalog(), outcome.loop.pseudo_labels,
                                               test.images, test.annotations, classes, cfg.hyper, final_seed,
                                               cfg.report.ap);
  json report{{"mode", std::string(to_string(cfg.mode))},
              {"cycles", outcome.loop.state.k},
              {"pseudo_images", outcome.loop.pseudo_labels.size()},
              {"final", to_json(final_report)}};
  if (cfg.report.baseline) {
    report["baseline"] = to_json(train_and_evaluate(*backend, inputs.labeled, loop.catalog(), AnnotationSet{},
                                                    test.images, test.annotations, classes, cfg.hyper, final_seed,
                                                    cfg.report.ap));
  }
  if (cfg.report.ablations) {
    const auto truth = load_labeled(*cfg.data.unlabeled_gt, classes);
    report["ablations"] = ablation_report(*backend, inputs.labeled, loop.catalog(), outcome.loop.pseudo_labels,
                                          truth.annotations, test.images, test.annotations, classes, cfg.hyper,
                                          final_seed, cfg.report.ap);
  }
  kitti::write_text_file(cfg.out / "final_report.json", report.dump(2) + "\n");
  outcome.report = std::move(report);
  return outcome;
}

RunOutcome resume_experiment(const fs::path& run_dir) {
  if (!fs::exists(run_dir / "config.json")) throw ConfigError("'" + run_dir.string() + "' has no config.json");
  if (!has_checkpoint(run_dir)) throw ConfigError("'" + run_dir.string() + "' has no checkpoint to resume");
  ExperimentConfig cfg = load_experiment_config(run_dir / "config.json");
  cfg.out = run_dir;
  return run_experiment(cfg);
}

AnnotationSet load_predictions(const fs::path& path, const ClassTable& classes) {
  if (fs::is_directory(path)) {
    if (!fs::exists(path / "index.json")) {
      throw ConfigError("prediction directory '" + path.string() + "' has no index.json");
    }
    return kitti::load_saved_annotations(path, classes);
  }
  auto set = kitti::load_annotations(kitti::load_manifest(path), classes).labeled;
  set.kind = AnnotationKind::pseudo_label;
  set.ignored.clear();
  for (auto it = set.entries.begin(); it != set.entries.end();) {
    it = it->second.empty() ? set.entries.erase(it) : std::next(it);
  }
  return set;
}

json evaluate_report(const AnnotationSet& gt, const AnnotationSet& pred, const ClassTable& classes,
                     ApInterpolation mode, bool variants) {
  json report = to_json(evaluate(gt, pred, classes, mode));
  if (variants) {
    report["no_fp"] = to_json(evaluate(gt, strip_false_positives(pred, gt, classes), classes, mode));
    report["no_fp_bb"] = to_json(evaluate(gt, snap_true_positive_boxes(pred, gt, classes), classes, mode));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Simulated datasets
// ---------------------------------------------------------------------------

SimulationConfig simulation_config_from_json(const json& j, const fs::path& base_dir) {
  SimulationConfig cfg;
  Fields root(j, "");
  if (root.has("world")) {
    cfg.world = field_guard("world", [&] { return sim::world_config_from_json(root.raw("world")); });
  }
  if (auto seed = root.optional<std::uint64_t>("seed")) cfg.world.seed = *seed;
  cfg.out = resolve(base_dir, root.get<std::string>("out", "data"));
  if (!root.has("splits")) throw ConfigError("config field 'splits' is required");
  const json& splits = root.raw("splits");
  if (!splits.is_array()) throw ConfigError("config field 'splits': expected an array");
  std::set<std::string> names;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    Fields f(splits[i], "splits[" + std::to_string(i) + "]");
    SimSplit s;
    s.name = f.get<std::string>("name", "");
    if (s.name.empty() || !names.insert(s.name).second) {
      throw ConfigError("config field '" + f.field("name") + "': missing or duplicate split name");
    }
    s.count = f.get<std::size_t>("count", 0);
    if (s.count == 0) throw ConfigError("config field '" + f.field("count") + "': must be >= 1");
    s.domain = field_guard(f.field("domain"), [&] { return parse_domain_tag(f.get<std::string>("domain", "source")); });
    s.labeled_fraction = f.optional<double>("labeled_fraction");
    if (s.labeled_fraction && !(*s.labeled_fraction > 0.0 && *s.labeled_fraction < 1.0)) {
      throw ConfigError("config field '" + f.field("labeled_fraction") + "': must lie in (0, 1)");
    }
    f.finish();
    cfg.splits.push_back(std::move(s));
  }
  root.finish();
  field_guard("world", [&] { cfg.world.validate(); return 0; });
  return cfg;
}

std::vector<fs::path> simulate(const SimulationConfig& cfg) {
  const ClassTable classes = cfg.world.class_table();
  std::vector<fs::path> written;
  for (const auto& split : cfg.splits) {
    const auto data = sim::generate_dataset(cfg.world, split.count, split.domain, split.name + "_");
    const fs::path dir = cfg.out / split.name;
    kitti::write_dataset(dir, split.name, data.images, &data.ground_truth, classes);
    data.hidden.save(dir / "hidden.json");
    written.push_back(dir);
    if (!split.labeled_fraction) continue;

    const auto ssl = sim::split_labeled(data, *split.labeled_fraction, derive_seed(cfg.world.seed, "split", split.name));
    const auto write = [&](const std::string& suffix, std::span<const ImageRecord> images, const AnnotationSet* set) {
      const std::string name = split.name + suffix;
      kitti::write_dataset(cfg.out / name, name, images, set, classes);
      written.push_back(cfg.out / name);
    };
    write("_labeled", ssl.labeled_images, &ssl.labeled);
    write("_unlabeled", ssl.unlabeled_images, nullptr);
    write("_unlabeled_gt", ssl.unlabeled_images, &ssl.unlabeled_truth);
  }
  return written;
}

}  // namespace selflabel
