#include "selflabel/kitti_io.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace selflabel::kitti {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    if (i >= line.size()) break;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    fields.push_back(line.substr(i, j - i));
    i = j;
  }
  return fields;
}

template <class T>
T to_number(std::string_view field, const char* what, std::size_t line_number) {
  T value{};
  const char* begin = field.data();
  const char* end = field.data() + field.size();
  if (!field.empty() && *begin == '+') ++begin;
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end) {
    throw ParseError("unparsable " + std::string(what) + " '" + std::string(field) + "'", line_number);
  }
  return value;
}

void append_format(std::string& out, const char* fmt, double v) {
  char buf[64];
  const int n = std::snprintf(buf, sizeof buf, fmt, v);
  out.append(buf, static_cast<std::size_t>(n));
}

void append_line(std::string& out, std::string_view type, const LabelLine& l, const BoundingBox& box,
                 std::optional<double> score) {
  out.append(type);
  append_format(out, " %.2f", l.truncated);
  out += ' ';
  out += std::to_string(l.occluded);
  append_format(out, " %.2f", l.alpha);
  append_format(out, " %.2f", box.left);
  append_format(out, " %.2f", box.top);
  append_format(out, " %.2f", box.right);
  append_format(out, " %.2f", box.bottom);
  for (double v : l.dimensions) append_format(out, " %.2f", v);
  for (double v : l.location) append_format(out, " %.2f", v);
  append_format(out, " %.2f", l.rotation_y);
  if (score) append_format(out, " %.4f", *score);
  out += '\n';
}

void check_file_name(const std::string& id) {
  if (id.empty() || id.find('/') != std::string::npos || id == "." || id == "..") {
    throw PreconditionError("image id '" + id + "' cannot be used as a label file name");
  }
}

}  // namespace

LabelLine parse_label_line(std::string_view line, std::size_t line_number) {
  const auto f = split_fields(line);
  if (f.size() != 15 && f.size() != 16) {
    throw ParseError("expected 15 or 16 fields, got " + std::to_string(f.size()), line_number);
  }
  LabelLine l;
  l.type = std::string(f[0]);
  l.truncated = to_number<double>(f[1], "truncated", line_number);
  l.occluded = to_number<int>(f[2], "occluded", line_number);
  l.alpha = to_number<double>(f[3], "alpha", line_number);
  l.bbox = BoundingBox{to_number<double>(f[4], "bbox left", line_number),
                       to_number<double>(f[5], "bbox top", line_number),
                       to_number<double>(f[6], "bbox right", line_number),
                       to_number<double>(f[7], "bbox bottom", line_number)};
  if (!l.bbox.valid()) throw ParseError("degenerate or non-finite bounding box", line_number);
  for (int i = 0; i < 3; ++i) l.dimensions[i] = to_number<double>(f[8 + i], "dimension", line_number);
  for (int i = 0; i < 3; ++i) l.location[i] = to_number<double>(f[11 + i], "location", line_number);
  l.rotation_y = to_number<double>(f[14], "rotation_y", line_number);
  if (f.size() == 16) {
    const double s = to_number<double>(f[15], "score", line_number);
    if (!(s >= 0.0 && s <= 1.0)) throw ParseError("score outside [0,1]", line_number);
    l.score = s;
  }
  return l;
}

ParsedLabels parse_label_file(std::string_view text, const ClassTable& classes) {
  ParsedLabels out;
  std::size_t line_number = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    const std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_number;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    LabelLine parsed = parse_label_line(line, line_number);
    if (auto id = classes.find(parsed.type)) {
      out.detections.push_back(Detection{*id, parsed.bbox, parsed.score.value_or(1.0)});
      out.detection_lines.push_back(std::move(parsed));
    } else {
      out.ignored.push_back(std::move(parsed));
    }
  }
  return out;
}

std::string write_label_file(std::span<const Detection> detections, const ClassTable& classes,
                             std::span<const LabelLine> passthrough) {
  if (!passthrough.empty() && passthrough.size() != detections.size()) {
    throw PreconditionError("passthrough metadata must be parallel to the detections");
  }
  std::string out;
  const LabelLine defaults;
  for (std::size_t i = 0; i < detections.size(); ++i) {
    const auto& d = detections[i];
    const LabelLine& meta = passthrough.empty() ? defaults : passthrough[i];
    append_line(out, classes[d.class_id].name, meta, d.bbox, d.confidence);
  }
  return out;
}

std::string write_dont_care(std::span<const BoundingBox> regions) {
  std::string out;
  const LabelLine defaults;
  for (const auto& b : regions) append_line(out, "DontCare", defaults, b, std::nullopt);
  return out;
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const fs::path& path, std::string_view text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

std::vector<ImageRecord> DatasetManifest::images() const {
  std::vector<ImageRecord> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(e.image);
  return out;
}

ImageCatalog DatasetManifest::catalog() const {
  ImageCatalog c;
  for (const auto& e : entries) c.add(e.image);
  return c;
}

DatasetManifest load_manifest(const fs::path& path) {
  const std::string text = read_text_file(path);
  DatasetManifest manifest;
  manifest.name = path.stem().string();
  std::set<std::string> ids;
  std::istringstream in(text);
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ": " + e.what(), line_number);
    }
    ManifestEntry entry;
    try {
      auto& r = entry.image;
      r.image_id = j.at("image_id").get<std::string>();
      r.width = j.at("width").get<int>();
      r.height = j.at("height").get<int>();
      if (j.contains("sequence_id") && !j["sequence_id"].is_null()) r.sequence_id = j["sequence_id"].get<std::string>();
      if (j.contains("frame_index") && !j["frame_index"].is_null()) r.frame_index = j["frame_index"].get<int>();
      r.domain_tag = parse_domain_tag(j.value("domain_tag", std::string("source")));
      if (j.contains("label_path") && !j["label_path"].is_null()) {
        fs::path p = j["label_path"].get<std::string>();
        if (p.is_relative()) p = path.parent_path() / p;
        if (!fs::exists(p)) {
          throw ParseError("label file '" + p.string() + "' for image '" + r.image_id + "' does not exist",
                           line_number);
        }
        entry.label_path = p;
      }
      r.validate();
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ": " + e.what(), line_number);
    } catch (const PreconditionError& e) {
      throw ParseError(path.string() + ": " + e.what(), line_number);
    }
    if (!ids.insert(entry.image.image_id).second) {
      throw ParseError(path.string() + ": duplicate image id '" + entry.image.image_id + "'", line_number);
    }
    manifest.entries.push_back(std::move(entry));
  }
  try {
    manifest.catalog().check_sequence_uniqueness();
  } catch (const PreconditionError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return manifest;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  std::string out;
  for (const auto& e : manifest.entries) {
    json j;
    j["image_id"] = e.image.image_id;
    j["width"] = e.image.width;
    j["height"] = e.image.height;
    if (e.image.sequence_id) j["sequence_id"] = *e.image.sequence_id;
    if (e.image.frame_index) j["frame_index"] = *e.image.frame_index;
    j["domain_tag"] = std::string(to_string(e.image.domain_tag));
    if (e.label_path) {
      fs::path p = *e.label_path;
      if (p.is_absolute() && path.has_parent_path()) p = p.lexically_relative(fs::absolute(path).parent_path());
      j["label_path"] = p.generic_string();
    }
    out += j.dump();
    out += '\n';
  }
  write_text_file(path, out);
}

ManifestAnnotations load_annotations(const DatasetManifest& manifest, const ClassTable& classes) {
  ManifestAnnotations out;
  out.labeled.kind = AnnotationKind::ground_truth;
  out.unlabeled.kind = AnnotationKind::unlabeled;
  for (const auto& e : manifest.entries) {
    const auto& id = e.image.image_id;
    if (!e.label_path) {
      out.unlabeled.entries.emplace(id, std::vector<Detection>{});
      continue;
    }
    ParsedLabels parsed;
    try {
      parsed = parse_label_file(read_text_file(*e.label_path), classes);
    } catch (const ParseError& err) {
      throw ParseError(e.label_path->string() + ": " + err.what());
    }
    out.labeled.entries.emplace(id, std::move(parsed.detections));
    if (!parsed.ignored.empty()) {
      auto& regions = out.labeled.ignored[id];
      for (const auto& l : parsed.ignored) regions.push_back(l.bbox);
    }
  }
  return out;
}

std::vector<fs::path> save_annotations(const AnnotationSet& set, const fs::path& dir, const ClassTable& classes) {
  fs::create_directories(dir);
  std::vector<fs::path> paths;
  json index;
  index["kind"] = std::string(to_string(set.kind));
  index["images"] = json::array();
  for (const auto& [id, dets] : set.entries) {
    check_file_name(id);
    std::string text = write_label_file(dets, classes);
    if (auto it = set.ignored.find(id); it != set.ignored.end()) text += write_dont_care(it->second);
    const fs::path p = dir / (id + ".txt");
    write_text_file(p, text);
    paths.push_back(p);
    index["images"].push_back({{"image_id", id}, {"label_path", id + ".txt"}});
  }
  for (const auto& [id, regions] : set.ignored) {
    if (!set.entries.count(id)) throw PreconditionError("don't-care regions for image '" + id + "' without entry");
  }
  write_text_file(dir / "index.json", index.dump(1) + "\n");
  return paths;
}

AnnotationSet load_saved_annotations(const fs::path& dir, const ClassTable& classes) {
  json index;
  try {
    index = json::parse(read_text_file(dir / "index.json"));
  } catch (const json::exception& e) {
    throw ParseError((dir / "index.json").string() + ": " + e.what());
  }
  AnnotationSet set;
  try {
    set.kind = parse_annotation_kind(index.at("kind").get<std::string>());
    for (const auto& item : index.at("images")) {
      const auto id = item.at("image_id").get<std::string>();
      const fs::path p = dir / item.at("label_path").get<std::string>();
      ParsedLabels parsed;
      try {
        parsed = parse_label_file(read_text_file(p), classes);
      } catch (const ParseError& err) {
        throw ParseError(p.string() + ": " + err.what());
      }
      set.entries.emplace(id, std::move(parsed.detections));
      if (!parsed.ignored.empty()) {
        auto& regions = set.ignored[id];
        for (const auto& l : parsed.ignored) regions.push_back(l.bbox);
      }
    }
  } catch (const json::exception& e) {
    throw ParseError((dir / "index.json").string() + ": " + e.what());
  }
  set.validate(classes.size());
  return set;
}

DatasetManifest write_dataset(const fs::path& dir, std::string name, std::span<const ImageRecord> images,
                              const AnnotationSet* set, const ClassTable& classes) {
  fs::create_directories(dir / "labels");
  DatasetManifest manifest;
  manifest.name = std::move(name);
  for (const auto& img : images) {
    ManifestEntry entry{img, std::nullopt};
    if (set) {
      if (auto it = set->entries.find(img.image_id); it != set->entries.end()) {
        check_file_name(img.image_id);
        std::string text = write_label_file(it->second, classes);
        if (auto ig = set->ignored.find(img.image_id); ig != set->ignored.end()) text += write_dont_care(ig->second);
        const fs::path p = fs::absolute(dir / "labels" / (img.image_id + ".txt"));
        write_text_file(p, text);
        entry.label_path = p;
      }
    }
    manifest.entries.push_back(std::move(entry));
  }
  save_manifest(manifest, dir / (manifest.name + ".jsonl"));
  return manifest;
}

}  // namespace selflabel::kitti
