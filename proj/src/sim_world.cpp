#include "selflabel/sim_world.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "selflabel/evaluation.hpp"
#include "selflabel/kitti_io.hpp"
#include "selflabel/rng.hpp"

namespace selflabel::sim {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Hidden table
// ---------------------------------------------------------------------------

std::vector<double> mirror_appearance(const std::vector<double>& a) {
  std::vector<double> m = a;
  for (std::size_t i = 0; i + 1 < m.size(); i += 2) std::swap(m[i], m[i + 1]);
  return m;
}

void HiddenTable::insert(std::string image_id, HiddenImage image) {
  if (is_mirrored_id(image_id)) throw PreconditionError("hidden table ids must not be mirrored");
  images_.insert_or_assign(std::move(image_id), std::move(image));
}

void HiddenTable::merge(const HiddenTable& other) {
  for (const auto& [id, img] : other.images_) images_.insert_or_assign(id, img);
}

bool HiddenTable::contains(std::string_view image_id) const {
  return images_.find(base_image_id(image_id)) != images_.end();
}

std::vector<SimObject> HiddenTable::objects(std::string_view image_id) const {
  auto it = images_.find(base_image_id(image_id));
  if (it == images_.end()) return {};
  std::vector<SimObject> objs = it->second.objects;
  if (is_mirrored_id(image_id)) {
    const double w = it->second.width;
    for (auto& o : objs) {
      o.bbox = BoundingBox{w - o.bbox.right, o.bbox.top, w - o.bbox.left, o.bbox.bottom};
      o.appearance = mirror_appearance(o.appearance);
    }
  }
  return objs;
}

json HiddenTable::to_json() const {
  json images = json::object();
  for (const auto& [id, img] : images_) {
    json objs = json::array();
    for (const auto& o : img.objects) {
      objs.push_back({{"object_id", o.object_id},
                      {"class_id", o.class_id},
                      {"bbox", {o.bbox.left, o.bbox.top, o.bbox.right, o.bbox.bottom}},
                      {"difficulty", o.difficulty},
                      {"appearance", o.appearance}});
    }
    images[id] = {{"width", img.width}, {"objects", objs}};
  }
  return json{{"images", images}};
}

HiddenTable HiddenTable::from_json(const json& j) {
  HiddenTable t;
  try {
    for (const auto& [id, img] : j.at("images").items()) {
      HiddenImage h;
      h.width = img.at("width").get<int>();
      for (const auto& o : img.at("objects")) {
        const auto b = o.at("bbox").get<std::vector<double>>();
        if (b.size() != 4) throw ParseError("hidden object bbox needs 4 values");
        h.objects.push_back(SimObject{o.at("object_id").get<int>(), o.at("class_id").get<int>(),
                                      make_box(b[0], b[1], b[2], b[3]), o.at("difficulty").get<double>(),
                                      o.at("appearance").get<std::vector<double>>()});
      }
      t.insert(id, std::move(h));
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("hidden table: ") + e.what());
  }
  return t;
}

void HiddenTable::save(const std::filesystem::path& path) const { kitti::write_text_file(path, to_json().dump()); }

HiddenTable HiddenTable::load(const std::filesystem::path& path) {
  try {
    return from_json(json::parse(kitti::read_text_file(path)));
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// World configuration
// ---------------------------------------------------------------------------

WorldConfig WorldConfig::defaults() {
  WorldConfig cfg;
  cfg.classes = {
      ClassProfile{"vehicle", 10.0, {1, 1, 1, 1, 0, 0, 0, 0}, 20.0, 120.0, 1.8},
      ClassProfile{"pedestrian", 1.0, {0, 0, 0, 0, 1, 1, 1, 1}, 20.0, 150.0, 0.4},
  };
  return cfg;
}

ClassTable WorldConfig::class_table() const {
  std::vector<ClassSpec> specs;
  const auto defaults = ClassTable::kitti_default();
  for (const auto& c : classes) {
    if (auto id = defaults.find(c.name)) {
      specs.push_back(defaults[*id]);
    } else {
      specs.push_back(ClassSpec{c.name, 0.8, 25.0, 0.5, {}});
    }
  }
  return ClassTable(std::move(specs));
}

void WorldConfig::validate() const {
  if (image_width <= 0 || image_height <= 0) throw ConfigError("sim image size must be positive");
  if (classes.empty()) throw ConfigError("sim world needs at least one class");
  if (feature_dim < 1) throw ConfigError("sim feature_dim must be >= 1");
  if (objects_per_image < 0) throw ConfigError("sim objects_per_image must be >= 0");
  if (domain_shift < 0 || adapted_residual_shift < 0) throw ConfigError("sim domain shifts must be >= 0");
  if (!shift_direction.empty() && static_cast<int>(shift_direction.size()) != feature_dim) {
    throw ConfigError("sim shift_direction must have feature_dim entries");
  }
  for (const auto& c : classes) {
    if (static_cast<int>(c.appearance_mean.size()) != feature_dim) {
      throw ConfigError("sim class '" + c.name + "' appearance mean must have feature_dim entries");
    }
    if (!(c.prior > 0)) throw ConfigError("sim class '" + c.name + "' needs a positive prior");
    if (!(c.min_height > 0 && c.max_height >= c.min_height && c.max_height < image_height)) {
      throw ConfigError("sim class '" + c.name + "' has an invalid height range");
    }
    if (!(c.aspect > 0)) throw ConfigError("sim class '" + c.name + "' needs a positive aspect");
  }
  if (sequence_length && *sequence_length < 1) throw ConfigError("sim sequence_length must be >= 1");
}

json to_json(const WorldConfig& cfg) {
  json classes = json::array();
  for (const auto& c : cfg.classes) {
    classes.push_back({{"name", c.name},
                       {"prior", c.prior},
                       {"appearance_mean", c.appearance_mean},
                       {"min_height", c.min_height},
                       {"max_height", c.max_height},
                       {"aspect", c.aspect}});
  }
  json j{{"image_width", cfg.image_width},
         {"image_height", cfg.image_height},
         {"objects_per_image", cfg.objects_per_image},
         {"classes", classes},
         {"feature_dim", cfg.feature_dim},
         {"appearance_noise", cfg.appearance_noise},
         {"domain_shift", cfg.domain_shift},
         {"adapted_residual_shift", cfg.adapted_residual_shift},
         {"shift_direction", cfg.shift_direction},
         {"difficulty_alpha", cfg.difficulty_alpha},
         {"difficulty_beta", cfg.difficulty_beta},
         {"drift_px", cfg.drift_px},
         {"seed", cfg.seed}};
  j["sequence_length"] = cfg.sequence_length ? json(*cfg.sequence_length) : json(nullptr);
  return j;
}

WorldConfig world_config_from_json(const json& j) {
  WorldConfig cfg = WorldConfig::defaults();
  try {
    cfg.image_width = j.value("image_width", cfg.image_width);
    cfg.image_height = j.value("image_height", cfg.image_height);
    cfg.objects_per_image = j.value("objects_per_image", cfg.objects_per_image);
    cfg.feature_dim = j.value("feature_dim", cfg.feature_dim);
    cfg.appearance_noise = j.value("appearance_noise", cfg.appearance_noise);
    cfg.domain_shift = j.value("domain_shift", cfg.domain_shift);
    cfg.adapted_residual_shift = j.value("adapted_residual_shift", cfg.adapted_residual_shift);
    cfg.shift_direction = j.value("shift_direction", cfg.shift_direction);
    cfg.difficulty_alpha = j.value("difficulty_alpha", cfg.difficulty_alpha);
    cfg.difficulty_beta = j.value("difficulty_beta", cfg.difficulty_beta);
    cfg.drift_px = j.value("drift_px", cfg.drift_px);
    cfg.seed = j.value("seed", cfg.seed);
    if (j.contains("sequence_length") && !j["sequence_length"].is_null()) {
      cfg.sequence_length = j["sequence_length"].get<int>();
    }
    if (j.contains("classes")) {
      cfg.classes.clear();
      for (const auto& c : j["classes"]) {
        ClassProfile p;
        p.name = c.at("name").get<std::string>();
        p.prior = c.value("prior", 1.0);
        p.appearance_mean = c.at("appearance_mean").get<std::vector<double>>();
        p.min_height = c.value("min_height", p.min_height);
        p.max_height = c.value("max_height", p.max_height);
        p.aspect = c.value("aspect", p.aspect);
        cfg.classes.push_back(std::move(p));
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("sim world config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

namespace {

double sample_beta(Rng& rng, double a, double b) {
  std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
  const double x = ga(rng);
  const double y = gb(rng);
  return x / (x + y);
}

std::vector<double> shift_direction(const WorldConfig& cfg) {
  std::vector<double> u = cfg.shift_direction;
  if (u.empty()) {
    u.resize(static_cast<std::size_t>(cfg.feature_dim));
    for (std::size_t i = 0; i < u.size(); ++i) u[i] = (i % 2 == 0) ? 1.0 : -1.0;
  }
  double norm = 0.0;
  for (double v : u) norm += v * v;
  norm = std::sqrt(norm);
  if (norm <= 0.0) throw ConfigError("sim shift_direction must be non-zero");
  for (double& v : u) v /= norm;
  return u;
}

double domain_offset(const WorldConfig& cfg, DomainTag domain) {
  switch (domain) {
    case DomainTag::source: return 0.0;
    case DomainTag::adapted_source: return std::max(0.0, cfg.domain_shift - cfg.adapted_residual_shift);
    case DomainTag::target: return cfg.domain_shift;
  }
  return 0.0;
}

double round_cents(double v) { return std::round(v * 100.0) / 100.0; }

BoundingBox place_box(Rng& rng, const WorldConfig& cfg, const ClassProfile& profile) {
  std::uniform_real_distribution<double> uh(profile.min_height, profile.max_height);
  std::uniform_real_distribution<double> ua(0.8, 1.2);
  const double h = uh(rng);
  const double w = std::min(h * profile.aspect * ua(rng), cfg.image_width - 2.0);
  std::uniform_real_distribution<double> ux(0.0, cfg.image_width - w);
  std::uniform_real_distribution<double> uy(0.0, cfg.image_height - h);
  const double x = ux(rng);
  const double y = uy(rng);
  return BoundingBox{round_cents(x), round_cents(y), round_cents(x + w), round_cents(y + h)};
}

SimObject make_object(Rng& rng, const WorldConfig& cfg, int object_id, const std::vector<double>& shift,
                      double offset) {
  std::vector<double> priors;
  for (const auto& c : cfg.classes) priors.push_back(c.prior);
  std::discrete_distribution<int> pick(priors.begin(), priors.end());
  const ClassId cls = pick(rng);
  const auto& profile = cfg.classes[static_cast<std::size_t>(cls)];

  SimObject o;
  o.object_id = object_id;
  o.class_id = cls;
  o.bbox = place_box(rng, cfg, profile);
  o.difficulty = sample_beta(rng, cfg.difficulty_alpha, cfg.difficulty_beta);
  std::normal_distribution<double> noise(0.0, cfg.appearance_noise);
  o.appearance.resize(static_cast<std::size_t>(cfg.feature_dim));
  for (std::size_t i = 0; i < o.appearance.size(); ++i) {
    o.appearance[i] = profile.appearance_mean[i] + offset * shift[i] + noise(rng);
  }
  return o;
}

std::string padded(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu", i);
  return buf;
}

}  // namespace

Dataset generate_dataset(const WorldConfig& cfg, std::size_t count, DomainTag domain, const std::string& id_prefix) {
  cfg.validate();
  if (count < 1) throw PreconditionError("generate_dataset needs count >= 1");
  Rng rng(derive_seed(cfg.seed, "generate", id_prefix, static_cast<std::uint64_t>(domain)));
  const auto shift = shift_direction(cfg);
  const double offset = domain_offset(cfg, domain);
  std::poisson_distribution<int> objects_per_image(cfg.objects_per_image);

  Dataset data;
  data.ground_truth.kind = AnnotationKind::ground_truth;
  const int seq_len = cfg.sequence_length.value_or(0);
  std::vector<SimObject> tracked;
  int next_object = 0;
  std::normal_distribution<double> drift(0.0, cfg.drift_px);

  for (std::size_t i = 0; i < count; ++i) {
    ImageRecord rec;
    rec.image_id = id_prefix + padded(i);
    rec.width = cfg.image_width;
    rec.height = cfg.image_height;
    rec.domain_tag = domain;

    std::vector<SimObject> objects;
    if (seq_len > 0) {
      const std::size_t frame = i % static_cast<std::size_t>(seq_len);
      rec.sequence_id = id_prefix + "seq" + padded(i / static_cast<std::size_t>(seq_len));
      rec.frame_index = static_cast<int>(frame);
      if (frame == 0) {
        tracked.clear();
        const int n = objects_per_image(rng);
        for (int k = 0; k < n; ++k) tracked.push_back(make_object(rng, cfg, next_object++, shift, offset));
      } else {
        for (auto& o : tracked) {
          const double dx = drift(rng);
          const double w = o.bbox.width();
          const double left = std::clamp(o.bbox.left + dx, 0.0, cfg.image_width - w);
          o.bbox = BoundingBox{round_cents(left), o.bbox.top, round_cents(left + w), o.bbox.bottom};
          if (!o.bbox.valid()) o.bbox.right = o.bbox.left + 1.0;
        }
      }
      objects = tracked;
    } else {
      const int n = objects_per_image(rng);
      for (int k = 0; k < n; ++k) objects.push_back(make_object(rng, cfg, next_object++, shift, offset));
    }

    std::vector<Detection> gt;
    for (const auto& o : objects) gt.push_back(Detection{o.class_id, o.bbox, 1.0});
    data.ground_truth.entries.emplace(rec.image_id, std::move(gt));
    data.hidden.insert(rec.image_id, HiddenImage{rec.width, std::move(objects)});
    data.images.push_back(std::move(rec));
  }
  return data;
}

SslSplit split_labeled(const Dataset& data, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw PreconditionError("labeled fraction must lie in (0,1]");
  std::vector<std::size_t> order(data.images.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, "ssl-split"));
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_labeled = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(data.images.size()))));
  std::vector<bool> labeled(data.images.size(), false);
  for (std::size_t i = 0; i < n_labeled && i < order.size(); ++i) labeled[order[i]] = true;

  SslSplit split;
  split.labeled.kind = AnnotationKind::ground_truth;
  split.unlabeled_truth.kind = AnnotationKind::ground_truth;
  for (std::size_t i = 0; i < data.images.size(); ++i) {
    const auto& rec = data.images[i];
    auto& target = labeled[i] ? split.labeled : split.unlabeled_truth;
    target.entries.emplace(rec.image_id, data.ground_truth.entries.at(rec.image_id));
    if (auto it = data.ground_truth.ignored.find(rec.image_id); it != data.ground_truth.ignored.end()) {
      target.ignored.emplace(rec.image_id, it->second);
    }
    (labeled[i] ? split.labeled_images : split.unlabeled_images).push_back(rec);
  }
  return split;
}

// ---------------------------------------------------------------------------
// Simulated detector
// ---------------------------------------------------------------------------

json to_json(const DetectorParams& p) {
  return json{{"kappa", p.kappa},
              {"alpha", p.alpha},
              {"beta", p.beta},
              {"jitter_px", p.jitter_px},
              {"relative_jitter", p.relative_jitter},
              {"geometry_gain", p.geometry_gain},
              {"fp_rate", p.fp_rate},
              {"confidence_noise", p.confidence_noise},
              {"fp_confidence_span", p.fp_confidence_span},
              {"fp_appearance_scale", p.fp_appearance_scale},
              {"oracle", p.oracle}};
}

DetectorParams detector_params_from_json(const json& j) {
  DetectorParams p;
  try {
    p.kappa = j.value("kappa", p.kappa);
    p.alpha = j.value("alpha", p.alpha);
    p.beta = j.value("beta", p.beta);
    p.jitter_px = j.value("jitter_px", p.jitter_px);
    p.relative_jitter = j.value("relative_jitter", p.relative_jitter);
    p.geometry_gain = j.value("geometry_gain", p.geometry_gain);
    p.fp_rate = j.value("fp_rate", p.fp_rate);
    p.confidence_noise = j.value("confidence_noise", p.confidence_noise);
    p.fp_confidence_span = j.value("fp_confidence_span", p.fp_confidence_span);
    p.fp_appearance_scale = j.value("fp_appearance_scale", p.fp_appearance_scale);
    p.oracle = j.value("oracle", p.oracle);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("sim detector params: ") + e.what());
  }
  if (!(p.kappa >= 0 && p.jitter_px >= 0 && p.fp_rate >= 0 && p.confidence_noise >= 0 && p.geometry_gain >= 0 &&
        p.relative_jitter >= 0)) {
    throw ConfigError("sim detector params must be non-negative");
  }
  return p;
}

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double pi = i < b.size() ? b[i] : 0.0;
    s += (a[i] - pi) * (a[i] - pi);
  }
  return std::sqrt(s);
}

struct Accumulator {
  std::vector<double> sum;
  double count{};
  double geometry_sum{};
  double geometry_count{};
};

void accumulate(std::vector<Accumulator>& acc, const HiddenTable& hidden, const AnnotationSet& set, int feature_dim,
                std::uint64_t seed, const DetectorParams& params) {
  for (const auto& [id, dets] : set.entries) {
    const auto objects = hidden.objects(id);
    for (std::size_t k = 0; k < dets.size(); ++k) {
      const auto& d = dets[k];
      if (d.class_id < 0) continue;
      const auto c = static_cast<std::size_t>(d.class_id);
      if (c >= acc.size()) acc.resize(c + 1);
      auto& a = acc[c];
      if (a.sum.empty()) a.sum.assign(static_cast<std::size_t>(feature_dim), 0.0);

      const SimObject* best = nullptr;
      double best_iou = 0.0;
      for (const auto& o : objects) {
        const double v = iou(d.bbox, o.bbox);
        if (v > best_iou) {
          best_iou = v;
          best = &o;
        }
      }
      if (best) {
        for (std::size_t i = 0; i < a.sum.size() && i < best->appearance.size(); ++i) a.sum[i] += best->appearance[i];
        const auto& g = best->bbox;
        a.geometry_sum += (std::fabs(d.bbox.left - g.left) + std::fabs(d.bbox.right - g.right)) / (4.0 * g.width()) +
                          (std::fabs(d.bbox.top - g.top) + std::fabs(d.bbox.bottom - g.bottom)) / (4.0 * g.height());
        a.geometry_count += 1.0;
      } else {
        // A box on background: its "appearance" is noise.
        Rng rng(derive_seed(seed, "fp-appearance", id, static_cast<std::uint64_t>(k)));
        std::normal_distribution<double> noise(0.0, params.fp_appearance_scale);
        for (double& v : a.sum) v += noise(rng);
      }
      a.count += 1.0;
    }
  }
}

}  // namespace

ModelState sim_train(const HiddenTable& hidden, const AnnotationSet& labeled, const AnnotationSet& pseudo,
                     std::size_t class_count, int feature_dim, std::uint64_t seed, const DetectorParams& params) {
  if (labeled.empty()) throw PreconditionError("sim_train needs a non-empty labeled set");
  std::vector<Accumulator> acc(class_count);
  accumulate(acc, hidden, labeled, feature_dim, seed, params);
  accumulate(acc, hidden, pseudo, feature_dim, seed, params);

  ModelState m;
  m.noise_seed = seed;
  for (auto& a : acc) {
    std::vector<double> proto(static_cast<std::size_t>(feature_dim), 0.0);
    if (a.count > 0) {
      for (std::size_t i = 0; i < proto.size(); ++i) proto[i] = a.sum[i] / a.count;
    }
    m.prototype.push_back(std::move(proto));
    m.count.push_back(a.count);
    m.skill.push_back(a.count + params.kappa > 0 ? a.count / (a.count + params.kappa) : 0.0);
    m.geometry_error.push_back(a.geometry_count > 0 ? a.geometry_sum / a.geometry_count : 0.0);
  }
  return m;
}

AnnotationSet sim_predict(const ModelState& model, std::span<const ImageRecord> images, const ClassTable& classes,
                          const HiddenTable& hidden, const DetectorParams& params) {
  AnnotationSet out;
  out.kind = AnnotationKind::pseudo_label;
  const std::vector<double> zeros;
  for (const auto& image : images) {
    Rng rng(derive_seed(model.noise_seed, "predict", image.image_id));
    std::normal_distribution<double> unit(0.0, 1.0);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    std::vector<Detection> dets;

    for (const auto& o : hidden.objects(image.image_id)) {
      // Fixed number of draws per object keeps streams aligned across models.
      const double eps = unit(rng);
      double jitter[4];
      for (double& j : jitter) j = unit(rng);
      if (!classes.valid_id(o.class_id)) continue;
      const auto c = static_cast<std::size_t>(o.class_id);
      const double threshold = classes[o.class_id].detection_threshold;
      if (params.oracle) {
        dets.push_back(Detection{o.class_id, o.bbox, 1.0});
        continue;
      }
      const double skill = c < model.skill.size() ? model.skill[c] : 0.0;
      const auto& proto = c < model.prototype.size() ? model.prototype[c] : zeros;
      const double q = sigmoid(params.alpha * (skill - o.difficulty) - params.beta * distance(o.appearance, proto));
      const double conf = q + params.confidence_noise * eps;
      if (conf < threshold) continue;
      const double geometry = c < model.geometry_error.size() ? model.geometry_error[c] : 0.0;
      const double base = params.jitter_px * (1.0 - skill);
      const double relative = params.relative_jitter + params.geometry_gain * geometry;
      const double sx = base + relative * o.bbox.width();
      const double sy = base + relative * o.bbox.height();
      BoundingBox b{o.bbox.left + sx * jitter[0], o.bbox.top + sy * jitter[1], o.bbox.right + sx * jitter[2],
                    o.bbox.bottom + sy * jitter[3]};
      if (b.right <= b.left) b.right = b.left + 1.0;
      if (b.bottom <= b.top) b.bottom = b.top + 1.0;
      dets.push_back(Detection{o.class_id, b, std::clamp(conf, threshold, 1.0)});
    }

    if (!params.oracle) {
      for (ClassId c = 0; c < static_cast<ClassId>(classes.size()); ++c) {
        const auto ci = static_cast<std::size_t>(c);
        const double skill = ci < model.skill.size() ? model.skill[ci] : 0.0;
        std::poisson_distribution<int> fp_count(std::max(1e-12, params.fp_rate * (1.0 - skill)));
        const int n = fp_count(rng);
        const double threshold = classes[c].detection_threshold;
        for (int k = 0; k < n; ++k) {
          const double conf = std::min(1.0, threshold + params.fp_confidence_span * uniform(rng));
          const double h = 30.0 + 90.0 * uniform(rng);
          const double w = std::min(h * (0.4 + 1.6 * uniform(rng)), image.width - 1.0);
          const double x = uniform(rng) * std::max(0.0, image.width - w);
          const double y = uniform(rng) * std::max(0.0, image.height - h);
          dets.push_back(Detection{c, BoundingBox{x, y, x + w, std::min(y + h, double(image.height))}, conf});
        }
      }
    }
    if (!dets.empty()) out.entries.emplace(image.image_id, std::move(dets));
  }
  return out;
}

SimBackend::SimBackend(HiddenTable hidden, DetectorParams params, int feature_dim)
    : hidden_(std::move(hidden)), params_(params), feature_dim_(feature_dim) {}

namespace {

std::uint64_t fingerprint(const AnnotationSet& set, std::uint64_t h) {
  for (const auto& [id, dets] : set.entries) {
    h = hash_text(id, h);
    for (const auto& d : dets) {
      const double vals[] = {d.bbox.left, d.bbox.top, d.bbox.right, d.bbox.bottom, d.confidence};
      h = mix64(h ^ static_cast<std::uint64_t>(d.class_id));
      for (double v : vals) h = mix64(h ^ static_cast<std::uint64_t>(std::llround(v * 10000.0)));
    }
  }
  return h;
}

}  // namespace

ModelHandle SimBackend::train(const TrainRequest& request, const ImageCatalog&) {
  std::size_t classes = 0;
  for (const auto* set : {&request.labeled, &request.pseudo}) {
    for (const auto& [id, dets] : set->entries) {
      for (const auto& d : dets) classes = std::max(classes, static_cast<std::size_t>(d.class_id) + 1);
    }
  }
  ModelState state = sim_train(hidden_, request.labeled, request.pseudo, classes, feature_dim_, request.seed, params_);

  std::uint64_t h = fingerprint(request.pseudo, fingerprint(request.labeled, mix64(request.seed)));
  char token[40];
  std::snprintf(token, sizeof token, "sim-%016llx", static_cast<unsigned long long>(h));
  {
    std::lock_guard lock(mutex_);
    models_.insert_or_assign(token, std::move(state));
  }
  return ModelHandle{id(), token, request.view, request.seed};
}

ModelState SimBackend::model_state(const ModelHandle& model) const {
  std::lock_guard lock(mutex_);
  auto it = models_.find(model.token);
  if (it == models_.end()) throw BackendError("sim backend cannot resolve model '" + model.token + "'");
  return it->second;
}

AnnotationSet SimBackend::predict(const ModelHandle& model, std::span<const ImageRecord> images,
                                  const ClassTable& classes) {
  const ModelState state = model_state(model);
  return sim_predict(state, images, classes, hidden_, params_);
}

}  // namespace selflabel::sim
