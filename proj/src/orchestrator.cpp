#include "selflabel/orchestrator.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <future>
#include <set>
#include <sstream>

#include "selflabel/kitti_io.hpp"
#include "selflabel/selection.hpp"

namespace selflabel {

namespace fs = std::filesystem;
using nlohmann::json;

bool should_stop(const StopParams& params, std::span<const double> deltas, int k) {
  if (k < params.min_cycles) return false;
  const auto need = static_cast<std::size_t>(params.window);
  if (deltas.size() < need) return false;
  for (std::size_t i = deltas.size() - need; i < deltas.size(); ++i) {
    if (!(deltas[i] < params.delta_map_threshold)) return false;
  }
  return true;
}

std::string_view to_string(LoopMode mode) { return mode == LoopMode::self_training ? "self" : "co"; }

LoopMode parse_loop_mode(std::string_view text) {
  if (text == "self" || text == "self_training") return LoopMode::self_training;
  if (text == "co" || text == "co_training") return LoopMode::co_training;
  throw ConfigError("unknown mode '" + std::string(text) + "' (expected self|co)");
}

std::string_view to_string(ExchangeLabelPolicy policy) {
  return policy == ExchangeLabelPolicy::teacher ? "teacher" : "student";
}

ExchangeLabelPolicy parse_exchange_policy(std::string_view text) {
  if (text == "teacher") return ExchangeLabelPolicy::teacher;
  if (text == "student") return ExchangeLabelPolicy::student;
  throw ConfigError("unknown exchange_label_policy '" + std::string(text) + "' (expected teacher|student)");
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

std::string metrics_header(const ClassTable& classes) {
  std::string h = "#schema=" + std::to_string(kMetricsSchemaVersion) + "\n";
  h += kMetricsHeaderPrefix;
  for (const auto& c : classes.classes()) h += ",count_" + c.name;
  return h + "\n";
}

std::string metrics_row(const CycleMetrics& m) {
  char buf[64];
  std::string row = std::to_string(m.cycle);
  std::snprintf(buf, sizeof buf, ",%.6f", m.similarity);
  row += buf;
  if (m.delta) {
    std::snprintf(buf, sizeof buf, ",%.6f", *m.delta);
    row += buf;
  } else {
    row += ",";
  }
  row += "," + std::to_string(m.accumulated_images) + "," + std::to_string(m.selected_images) + "," +
         std::to_string(m.predicted_images);
  for (auto c : m.class_counts) row += "," + std::to_string(c);
  return row + "\n";
}

std::vector<CycleMetrics> read_metrics(const fs::path& csv_path) {
  std::istringstream in(kitti::read_text_file(csv_path));
  std::string line;
  std::vector<CycleMetrics> rows;
  bool header_seen = false;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      if (line.rfind(kMetricsHeaderPrefix, 0) != 0) throw ParseError("unexpected metrics header", line_number);
      header_seen = true;
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() < 6) throw ParseError("metrics row has too few columns", line_number);
    try {
      CycleMetrics m;
      m.cycle = std::stoi(cells[0]);
      m.similarity = std::stod(cells[1]);
      if (!cells[2].empty()) m.delta = std::stod(cells[2]);
      m.accumulated_images = std::stoul(cells[3]);
      m.selected_images = std::stoul(cells[4]);
      m.predicted_images = std::stoul(cells[5]);
      for (std::size_t i = 6; i < cells.size(); ++i) m.class_counts.push_back(std::stoul(cells[i]));
      rows.push_back(std::move(m));
    } catch (const std::exception&) {
      throw ParseError("unparsable metrics row", line_number);
    }
  }
  return rows;
}

namespace {

void rewrite_metrics(const fs::path& run_dir, const ClassTable& classes, const std::vector<CycleMetrics>& rows) {
  std::string text = metrics_header(classes);
  for (const auto& r : rows) text += metrics_row(r);
  kitti::write_text_file(run_dir / "metrics.csv", text);
}

void append_metrics(const fs::path& run_dir, const CycleMetrics& row) {
  std::ofstream out(run_dir / "metrics.csv", std::ios::binary | std::ios::app);
  if (!out) throw Error("cannot append to " + (run_dir / "metrics.csv").string());
  out << metrics_row(row);
}

std::vector<std::size_t> class_counts(const AnnotationSet& set, std::size_t classes) {
  std::vector<std::size_t> counts(classes, 0);
  for (const auto& [id, dets] : set.entries) {
    for (const auto& d : dets) {
      if (d.class_id >= 0 && static_cast<std::size_t>(d.class_id) < classes) ++counts[static_cast<std::size_t>(d.class_id)];
    }
  }
  return counts;
}

}  // namespace

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

bool has_checkpoint(const fs::path& run_dir) { return fs::exists(run_dir / "checkpoint" / "state.json"); }

fs::path checkpoint(const CycleState& state, const fs::path& run_dir, const ClassTable& classes) {
  const fs::path final_dir = run_dir / "checkpoint";
  const fs::path tmp = run_dir / "checkpoint.tmp";
  const fs::path old = run_dir / "checkpoint.old";
  fs::remove_all(tmp);
  fs::create_directories(tmp);

  const int detectors = state.mode == LoopMode::co_training ? 2 : 1;
  json provenance = json::array();
  for (int d = 0; d < detectors; ++d) {
    json p = json::object();
    for (const auto& [id, prov] : state.provenance[static_cast<std::size_t>(d)]) p[id] = {prov.detector, prov.cycle};
    provenance.push_back(p);
  }
  json s{{"schema", 1},
         {"mode", std::string(to_string(state.mode))},
         {"k", state.k},
         {"deltas", state.deltas},
         {"finished", state.finished},
         {"config_hash", state.config_hash},
         {"detectors", detectors},
         {"provenance", provenance}};
  s["previous_similarity"] = state.previous_similarity ? json(*state.previous_similarity) : json(nullptr);
  kitti::write_text_file(tmp / "state.json", s.dump(1) + "\n");
  kitti::write_text_file(tmp / "rng.json", json{{"mt19937_64", serialize_rng(state.rng)}}.dump() + "\n");
  for (int d = 0; d < detectors; ++d) {
    const fs::path dir = tmp / ("dpsi" + std::to_string(d + 1));
    kitti::save_annotations(state.accumulated[static_cast<std::size_t>(d)], dir / "accumulated", classes);
    kitti::save_annotations(state.latest[static_cast<std::size_t>(d)], dir / "latest", classes);
  }

  fs::remove_all(old);
  if (fs::exists(final_dir)) fs::rename(final_dir, old);
  fs::rename(tmp, final_dir);
  fs::remove_all(old);
  return final_dir;
}

CycleState resume(const fs::path& run_dir, const ClassTable& classes) {
  const fs::path dir = run_dir / "checkpoint";
  if (!fs::exists(dir / "state.json")) throw ParseError("no checkpoint in '" + run_dir.string() + "'");
  CycleState state;
  try {
    const json s = json::parse(kitti::read_text_file(dir / "state.json"));
    if (s.at("schema").get<int>() != 1) throw ParseError("unsupported checkpoint schema");
    state.mode = parse_loop_mode(s.at("mode").get<std::string>());
    state.k = s.at("k").get<int>();
    state.deltas = s.at("deltas").get<std::vector<double>>();
    state.finished = s.at("finished").get<bool>();
    state.config_hash = s.at("config_hash").get<std::string>();
    if (!s.at("previous_similarity").is_null()) state.previous_similarity = s["previous_similarity"].get<double>();
    const int detectors = s.at("detectors").get<int>();
    if (detectors != (state.mode == LoopMode::co_training ? 2 : 1)) throw ParseError("detector count does not match mode");
    if (state.k < 0) throw ParseError("negative cycle counter");
    for (double d : state.deltas) {
      if (!(d >= 0.0)) throw ParseError("negative or NaN similarity delta");
    }
    const auto& prov = s.at("provenance");
    for (int d = 0; d < detectors; ++d) {
      for (const auto& [id, pair] : prov.at(static_cast<std::size_t>(d)).items()) {
        state.provenance[static_cast<std::size_t>(d)][id] = Provenance{pair.at(0).get<int>(), pair.at(1).get<int>()};
      }
      const fs::path ddir = dir / ("dpsi" + std::to_string(d + 1));
      state.accumulated[static_cast<std::size_t>(d)] = kitti::load_saved_annotations(ddir / "accumulated", classes);
      state.latest[static_cast<std::size_t>(d)] = kitti::load_saved_annotations(ddir / "latest", classes);
    }
    const json r = json::parse(kitti::read_text_file(dir / "rng.json"));
    state.rng = deserialize_rng(r.at("mt19937_64").get<std::string>());
  } catch (const json::exception& e) {
    throw ParseError("corrupt checkpoint in '" + dir.string() + "': " + e.what());
  } catch (const Error& e) {
    throw ParseError("corrupt checkpoint in '" + dir.string() + "': " + e.what());
  }
  return state;
}

// ---------------------------------------------------------------------------
// Loop
// ---------------------------------------------------------------------------

SelfLabelingLoop::SelfLabelingLoop(SelfLabelingConfig config, LoopInputs inputs, DetectorBackend& backend,
                                   LoopOptions options)
    : config_(std::move(config)), inputs_(std::move(inputs)), backend_(backend), options_(std::move(options)) {
  config_.validate();
  if (options_.max_cycles < 1) throw ConfigError("K_max must be >= 1");
  if (inputs_.labeled.empty()) throw PreconditionError("self-labeling needs a non-empty labeled set");
  if (inputs_.unlabeled_images.empty()) throw PreconditionError("self-labeling needs a non-empty unlabeled set");
  inputs_.labeled.validate(config_.class_table.size());
  for (const auto& r : inputs_.labeled_images) catalog_.add(r);
  for (const auto& [id, dets] : inputs_.labeled.entries) {
    if (!catalog_.contains(id)) throw PreconditionError("labeled image '" + id + "' has no image record");
  }
  for (const auto& r : inputs_.unlabeled_images) {
    if (catalog_.contains(r.image_id) && inputs_.labeled.contains(r.image_id)) {
      throw PreconditionError("image '" + r.image_id + "' is both labeled and unlabeled");
    }
    catalog_.add(r);
  }
  catalog_.check_sequence_uniqueness();
  if (config_.sequence) {
    for (const auto& r : inputs_.unlabeled_images) sequence_mode_ = sequence_mode_ || r.in_sequence();
  }
}

bool SelfLabelingLoop::concurrent() const {
  return options_.mode == LoopMode::co_training && !options_.force_sequential &&
         backend_.supports_concurrent_sessions();
}

std::uint64_t SelfLabelingLoop::training_seed(int k, int detector) const {
  const int stream = options_.identical_views ? 0 : detector;
  return derive_seed(config_.rng_seed, "train", static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(stream));
}

ModelHandle SelfLabelingLoop::train_detector(int detector, const AnnotationSet& pseudo, std::uint64_t seed) {
  const ViewTransform view = (detector == 1 && !options_.identical_views) ? ViewTransform::horizontal_mirror
                                                                           : ViewTransform::identity;
  auto request = TrainRequest::make(inputs_.labeled, pseudo, options_.hyper, view, seed);
  return train(backend_, request, catalog_);
}

AnnotationSet SelfLabelingLoop::predict_unlabeled(const ModelHandle& model) {
  return predict(backend_, model, inputs_.unlabeled_images, config_.class_table);
}

AnnotationSet SelfLabelingLoop::select_confident(const AnnotationSet& latest, const AnnotationSet& accumulated,
                                                 std::size_t keep, Rng& rng) const {
  AnnotationSet pool;
  if (sequence_mode_) {
    SequenceContext ctx{catalog_, *config_.sequence, accumulated};
    pool = rand_select(latest, config_.random_pool, rng, &ctx);
  } else {
    pool = rand_select(latest, config_.random_pool, rng);
  }
  return select_extreme(pool, keep, Confidence::most);
}

CycleState SelfLabelingLoop::initialize() {
  CycleState state;
  state.mode = options_.mode;
  state.rng = Rng(derive_seed(config_.rng_seed, "loop"));
  state.config_hash = options_.config_hash;
  const int detectors = options_.mode == LoopMode::co_training ? 2 : 1;
  for (auto& set : state.accumulated) set.kind = AnnotationKind::pseudo_label;

  auto start = [&](int d) {
    const ModelHandle model = train_detector(d, state.accumulated[static_cast<std::size_t>(d)], training_seed(0, d));
    state.latest[static_cast<std::size_t>(d)] = predict_unlabeled(model);
  };
  if (detectors == 2 && concurrent()) {
    auto second = std::async(std::launch::async, start, 1);
    start(0);
    second.get();
  } else {
    for (int d = 0; d < detectors; ++d) start(d);
  }
  return state;
}

void SelfLabelingLoop::self_training_cycle(CycleState& state, CycleMetrics& metrics) {
  const int next = state.k + 1;
  Rng rng(derive_seed(state.rng(), "select"));
  const AnnotationSet chosen = select_confident(state.latest[0], state.accumulated[0], config_.keep_per_cycle, rng);
  state.accumulated[0] = fuse(state.accumulated[0], chosen);
  for (const auto& [id, dets] : chosen.entries) state.provenance[0][id] = Provenance{0, next};
  metrics.selected_images = chosen.size();

  const ModelHandle model = train_detector(0, state.accumulated[0], training_seed(next, 0));
  state.latest[0] = predict_unlabeled(model);
}

void SelfLabelingLoop::co_training_cycle(CycleState& state, CycleMetrics& metrics) {
  const int next = state.k + 1;
  const std::uint64_t cycle_seed = state.rng();
  const std::size_t unbounded = config_.exchange_pool.value_or(static_cast<std::size_t>(-1));

  // Each detector's confident candidates.
  std::array<AnnotationSet, 2> confident;
  for (int i = 0; i < 2; ++i) {
    Rng rng(derive_seed(cycle_seed, "select", static_cast<std::uint64_t>(options_.identical_views ? 0 : i)));
    confident[static_cast<std::size_t>(i)] =
        select_confident(state.latest[static_cast<std::size_t>(i)], state.accumulated[static_cast<std::size_t>(i)],
                         unbounded, rng);
  }

  // Exchange: detector j takes the images of detector i's confident set it is
  // itself least confident about. Detector j's detections on those images are
  // its latest full pass restricted to them, since φ_j has not changed since.
  std::size_t selected = 0;
  for (int j = 0; j < 2; ++j) {
    const int i = 1 - j;
    const auto& candidates = confident[static_cast<std::size_t>(i)];
    const auto& own = state.latest[static_cast<std::size_t>(j)];
    std::vector<ImageConfidence> ranking;
    for (const auto& [id, dets] : candidates.entries) {
      ImageConfidence c{id, 0.0, 0};
      if (auto it = own.entries.find(id); it != own.entries.end() && !it->second.empty()) {
        double sum = 0.0;
        for (const auto& d : it->second) sum += d.confidence;
        c.mean_confidence = sum / static_cast<double>(it->second.size());
        c.detection_count = it->second.size();
      }
      ranking.push_back(std::move(c));
    }
    const auto ids = rank_images(std::move(ranking), config_.keep_per_cycle, Confidence::least);

    AnnotationSet handed;
    handed.kind = AnnotationKind::pseudo_label;
    Provenance prov{i, next};
    if (options_.exchange_policy == ExchangeLabelPolicy::teacher) {
      handed = restrict_to(candidates, ids);
    } else {
      handed = restrict_to(own, ids);
      prov.detector = j;
    }
    auto& acc = state.accumulated[static_cast<std::size_t>(j)];
    acc = fuse(acc, handed);
    for (const auto& [id, dets] : handed.entries) state.provenance[static_cast<std::size_t>(j)][id] = prov;
    if (j == 0) selected = handed.size();
  }
  metrics.selected_images = selected;

  auto retrain = [&](int d) {
    const ModelHandle model =
        train_detector(d, state.accumulated[static_cast<std::size_t>(d)], training_seed(next, d));
    state.latest[static_cast<std::size_t>(d)] = predict_unlabeled(model);
  };
  if (concurrent()) {
    auto second = std::async(std::launch::async, retrain, 1);
    retrain(0);
    second.get();
  } else {
    retrain(0);
    retrain(1);
  }
}

LoopResult SelfLabelingLoop::run() {
  if (options_.run_dir && has_checkpoint(*options_.run_dir)) {
    CycleState state = resume(*options_.run_dir, config_.class_table);
    if (state.config_hash != options_.config_hash) {
      throw ConfigError("checkpoint in '" + options_.run_dir->string() + "' was written with a different config");
    }
    return run_from(std::move(state));
  }
  CycleState state = initialize();
  if (options_.run_dir) {
    fs::create_directories(*options_.run_dir);
    rewrite_metrics(*options_.run_dir, config_.class_table, {});
    checkpoint(state, *options_.run_dir, config_.class_table);
  }
  return run_from(std::move(state));
}

LoopResult SelfLabelingLoop::run_from(CycleState state) {
  if (state.mode != options_.mode) throw ConfigError("checkpoint mode does not match the requested mode");
  LoopResult result;
  if (options_.run_dir) {
    const fs::path csv = *options_.run_dir / "metrics.csv";
    std::vector<CycleMetrics> rows;
    if (fs::exists(csv)) rows = read_metrics(csv);
    if (rows.size() > static_cast<std::size_t>(state.k)) rows.resize(static_cast<std::size_t>(state.k));
    rewrite_metrics(*options_.run_dir, config_.class_table, rows);
    result.metrics = rows;
  }

  while (!state.finished) {
    if (options_.stop_after_cycle && state.k >= *options_.stop_after_cycle) {
      result.pseudo_labels = state.latest[0];
      result.state = std::move(state);
      return result;
    }
    const AnnotationSet old = state.latest[0];
    CycleMetrics metrics;
    if (state.mode == LoopMode::self_training) {
      self_training_cycle(state, metrics);
    } else {
      co_training_cycle(state, metrics);
    }
    state.k += 1;
    const double similarity = map_similarity(old, state.latest[0], config_.class_table, options_.similarity_mode);
    if (state.previous_similarity) {
      state.deltas.push_back(std::fabs(similarity - *state.previous_similarity));
      const auto cap = static_cast<std::size_t>(config_.stop.window);
      if (state.deltas.size() > cap) state.deltas.erase(state.deltas.begin(), state.deltas.end() - cap);
      metrics.delta = state.deltas.back();
    }
    state.previous_similarity = similarity;
    state.finished = should_stop(config_.stop, state.deltas, state.k) || state.k >= options_.max_cycles;

    metrics.cycle = state.k;
    metrics.similarity = similarity;
    metrics.accumulated_images = state.accumulated[0].size();
    metrics.predicted_images = state.latest[0].size();
    metrics.class_counts = class_counts(state.accumulated[0], config_.class_table.size());

    if (options_.run_dir) {
      checkpoint(state, *options_.run_dir, config_.class_table);
      append_metrics(*options_.run_dir, metrics);
    }
    if (options_.on_cycle) options_.on_cycle(metrics);
    result.metrics.push_back(std::move(metrics));
  }

  result.completed = true;
  result.pseudo_labels = state.latest[0];
  result.state = std::move(state);
  return result;
}

LoopResult run_self_training(const SelfLabelingConfig& config, const LoopInputs& inputs, DetectorBackend& backend,
                             LoopOptions options) {
  options.mode = LoopMode::self_training;
  return SelfLabelingLoop(config, inputs, backend, std::move(options)).run();
}

LoopResult run_co_training(const SelfLabelingConfig& config, const LoopInputs& inputs, DetectorBackend& backend,
                           LoopOptions options) {
  options.mode = LoopMode::co_training;
  return SelfLabelingLoop(config, inputs, backend, std::move(options)).run();
}

}  // namespace selflabel
