// Stand-in detector for wire-protocol tests. Training memorizes every labeled
// and pseudo-labeled box; prediction echoes them back at confidence 0.9 for
// known images and stays silent on unseen ones.
//
// Flags:
//   --stray              print non-protocol lines and a wrong-id reply first
//   --crash-after N      exit without replying to request N (1-based)
//   --crash-once PATH    like --crash-after 1, unless PATH exists; creates PATH
//   --hang-on CMD        never reply to requests with this cmd

#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>
#include "selflabel/kitti_io.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Flags {
  bool stray{false};
  long crash_after{0};
  std::string crash_once;
  std::string hang_on;
};

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") != std::string::npos) out.push_back(line);
  }
  return out;
}

void memorize(const std::string& manifest_path, json& model) {
  std::ifstream in(manifest_path);
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    const json rec = json::parse(line);
    if (!rec.contains("label_path") || rec["label_path"].is_null()) continue;
    fs::path label = rec["label_path"].get<std::string>();
    if (label.is_relative()) label = fs::path(manifest_path).parent_path() / label;
    json& entry = model[rec["image_id"].get<std::string>()];
    if (!entry.is_array()) entry = json::array();
    for (const auto& l : lines_of(selflabel::kitti::read_text_file(label))) entry.push_back(l);
  }
}

json handle_train(const json& req) {
  json model = json::object();
  memorize(req.at("labeled_manifest").get<std::string>(), model);
  memorize(req.at("pseudo_manifest").get<std::string>(), model);
  const fs::path out = req.at("model_out").get<std::string>();
  fs::create_directories(out.parent_path());
  std::ofstream(out) << model.dump() << "\n";
  std::cerr << "echo: trained on " << model.size() << " images\n";
  return json{{"model", out.string()}};
}

json handle_predict(const json& req) {
  std::ifstream model_in(req.at("model").get<std::string>());
  if (!model_in) throw std::runtime_error("unknown model " + req.at("model").get<std::string>());
  const json model = json::parse(model_in);
  const fs::path out_dir = req.at("out_dir").get<std::string>();
  fs::create_directories(out_dir);
  std::ifstream in(req.at("images_manifest").get<std::string>());
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    const std::string id = json::parse(line).at("image_id").get<std::string>();
    if (!model.contains(id)) continue;
    std::ofstream out(out_dir / (id + ".txt"));
    for (const auto& l : model[id]) {
      std::istringstream fields(l.get<std::string>());
      std::vector<std::string> f;
      for (std::string s; fields >> s;) f.push_back(s);
      if (f.size() < 15) continue;
      for (std::size_t i = 0; i < 15; ++i) out << f[i] << ' ';
      out << "0.9000\n";
    }
  }
  return json::object();
}

}  // namespace

int main(int argc, char** argv) {
  Flags flags;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--stray") {
      flags.stray = true;
    } else if (a == "--crash-after" && i + 1 < argc) {
      flags.crash_after = std::stol(argv[++i]);
    } else if (a == "--crash-once" && i + 1 < argc) {
      flags.crash_once = argv[++i];
    } else if (a == "--hang-on" && i + 1 < argc) {
      flags.hang_on = argv[++i];
    } else {
      std::cerr << "echo: unknown flag " << a << "\n";
      return 2;
    }
  }

  long handled = 0;
  for (std::string line; std::getline(std::cin, line);) {
    if (line.empty()) continue;
    ++handled;
    json req;
    try {
      req = json::parse(line);
    } catch (const json::exception&) {
      std::cerr << "echo: unparsable request\n";
      continue;
    }
    if (flags.crash_after > 0 && handled == flags.crash_after) {
      std::cerr << "echo: crashing as asked on request " << handled << "\n";
      return 3;
    }
    if (!flags.crash_once.empty() && !fs::exists(flags.crash_once)) {
      std::ofstream(flags.crash_once) << "crashed\n";
      std::cerr << "echo: crashing once\n";
      return 3;
    }
    const std::string cmd = req.value("cmd", "");
    if (cmd == flags.hang_on) {
      std::this_thread::sleep_for(std::chrono::hours(1));
    }
    if (flags.stray) {
      std::cout << "loading weights...\n"
                << json{{"id", -1}, {"ok", true}}.dump() << "\n"
                << "[1, 2, 3]\n";
    }

    json resp;
    try {
      if (cmd == "train") {
        resp = handle_train(req);
      } else if (cmd == "predict") {
        resp = handle_predict(req);
      } else {
        throw std::runtime_error("unknown cmd '" + cmd + "'");
      }
      resp["ok"] = true;
    } catch (const std::exception& e) {
      resp = json{{"ok", false}, {"error", e.what()}};
    }
    resp["id"] = req["id"];
    std::cout << resp.dump() << std::endl;
  }
  return 0;
}
