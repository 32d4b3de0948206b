#include "selflabel/external_backend.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <thread>

#include "selflabel/kitti_io.hpp"

namespace selflabel {

namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

class ExternalBackend::Process {
 public:
  Process(const std::string& command, const fs::path& stderr_log) {
    int to_child[2];
    int from_child[2];
    if (pipe(to_child) != 0) throw BackendError(std::string("pipe: ") + std::strerror(errno));
    if (pipe(from_child) != 0) {
      close(to_child[0]);
      close(to_child[1]);
      throw BackendError(std::string("pipe: ") + std::strerror(errno));
    }
    const int err_fd = open(stderr_log.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
    pid_ = fork();
    if (pid_ < 0) throw BackendError(std::string("fork: ") + std::strerror(errno));
    if (pid_ == 0) {
      dup2(to_child[0], STDIN_FILENO);
      dup2(from_child[1], STDOUT_FILENO);
      if (err_fd >= 0) dup2(err_fd, STDERR_FILENO);
      close(to_child[0]);
      close(to_child[1]);
      close(from_child[0]);
      close(from_child[1]);
      execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      _exit(127);
    }
    if (err_fd >= 0) close(err_fd);
    close(to_child[0]);
    close(from_child[1]);
    in_fd_ = to_child[1];
    out_fd_ = from_child[0];
  }

  ~Process() { stop(); }

  bool write_line(const std::string& line) {
    std::string data = line + "\n";
    const char* p = data.data();
    std::size_t left = data.size();
    while (left > 0) {
      const ssize_t n = write(in_fd_, p, left);
      if (n < 0) {
        if (errno == EINTR) continue;
        return false;
      }
      p += n;
      left -= static_cast<std::size_t>(n);
    }
    return true;
  }

  /// Next line from the child's stdout; nullopt on EOF or when `deadline` passes.
  std::optional<std::string> read_line(Clock::time_point deadline) {
    for (;;) {
      if (auto nl = buffer_.find('\n'); nl != std::string::npos) {
        std::string line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        return line;
      }
      const auto now = Clock::now();
      if (now >= deadline) return std::nullopt;
      const auto wait = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now).count();
      pollfd pfd{out_fd_, POLLIN, 0};
      const int r = poll(&pfd, 1, static_cast<int>(std::min<long long>(wait, 1000 * 60)));
      if (r < 0 && errno == EINTR) continue;
      if (r <= 0) continue;
      char chunk[4096];
      const ssize_t n = read(out_fd_, chunk, sizeof chunk);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) return std::nullopt;
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

  void stop() {
    if (in_fd_ >= 0) close(in_fd_);
    in_fd_ = -1;
    if (pid_ > 0) {
      int status = 0;
      bool exited = false;
      for (int i = 0; i < 50 && !exited; ++i) {
        exited = waitpid(pid_, &status, WNOHANG) == pid_;
        if (!exited) std::this_thread::sleep_for(std::chrono::milliseconds(10));
      }
      if (!exited) {
        kill(pid_, SIGKILL);
        waitpid(pid_, &status, 0);
      }
      pid_ = -1;
    }
    if (out_fd_ >= 0) close(out_fd_);
    out_fd_ = -1;
  }

 private:
  pid_t pid_{-1};
  int in_fd_{-1};
  int out_fd_{-1};
  std::string buffer_;
};

ExternalBackend::ExternalBackend(ExternalOptions options, ClassTable classes)
    : options_(std::move(options)), classes_(std::move(classes)) {
  if (options_.command.empty()) throw ConfigError("external backend needs a command line");
  if (options_.work_dir.empty()) throw ConfigError("external backend needs a work directory");
  fs::create_directories(options_.work_dir);
  options_.work_dir = fs::absolute(options_.work_dir);
  // Writing to a dead child must surface as an error, not kill the engine.
  signal(SIGPIPE, SIG_IGN);
}

ExternalBackend::~ExternalBackend() = default;

void ExternalBackend::ensure_running() {
  if (!process_) process_ = std::make_unique<Process>(options_.command, options_.work_dir / "detector.stderr.log");
}

fs::path ExternalBackend::request_dir(std::uint64_t id) const {
  return options_.work_dir / ("req-" + std::to_string(id));
}

namespace {

std::string stderr_tail(const fs::path& log) {
  std::error_code ec;
  if (!fs::exists(log, ec)) return {};
  std::string text = kitti::read_text_file(log);
  if (text.size() > 2000) text = text.substr(text.size() - 2000);
  return text;
}

}  // namespace

json ExternalBackend::call(json request) {
  const fs::path log = options_.work_dir / "detector.stderr.log";
  for (;;) {
    ensure_running();
    const std::uint64_t id = next_id_++;
    request["id"] = id;
    bool delivered = process_->write_line(request.dump());
    const auto deadline = Clock::now() + options_.timeout;
    while (delivered) {
      auto line = process_->read_line(deadline);
      if (!line) break;
      json response;
      try {
        response = json::parse(*line);
      } catch (const json::exception&) {
        continue;  // stray non-protocol output
      }
      if (!response.is_object() || !response.contains("id") || response["id"] != id) continue;
      if (!response.value("ok", false)) {
        throw BackendError("detector rejected '" + request.value("cmd", std::string("?")) +
                           "': " + response.value("error", std::string("unknown error")));
      }
      return response;
    }
    process_.reset();
    if (restarts_ >= options_.max_restarts) {
      throw BackendError("detector process failed on request " + std::to_string(id) + " ('" + options_.command +
                         "'); stderr tail:\n" + stderr_tail(log));
    }
    ++restarts_;
  }
}

ModelHandle ExternalBackend::train(const TrainRequest& request, const ImageCatalog& images) {
  const fs::path dir = request_dir(next_id_);
  auto records_of = [&](const AnnotationSet& set) {
    std::vector<ImageRecord> out;
    for (const auto& [id, dets] : set.entries) out.push_back(images.at(id));
    return out;
  };
  const auto labeled_records = records_of(request.labeled);
  const auto pseudo_records = records_of(request.pseudo);
  kitti::write_dataset(dir / "labeled", "labeled", labeled_records, &request.labeled, classes_);
  kitti::write_dataset(dir / "pseudo", "pseudo", pseudo_records, &request.pseudo, classes_);
  const fs::path model_out = dir / "model";

  json req{{"cmd", "train"},
           {"labeled_manifest", (dir / "labeled" / "labeled.jsonl").string()},
           {"pseudo_manifest", (dir / "pseudo" / "pseudo.jsonl").string()},
           {"hyper", request.hyper.values},
           {"view_transform", std::string(to_string(request.view))},
           {"seed", request.seed},
           {"model_out", model_out.string()}};
  const json response = call(std::move(req));
  return ModelHandle{id(), response.value("model", model_out.string()), request.view, request.seed};
}

AnnotationSet ExternalBackend::predict(const ModelHandle& model, std::span<const ImageRecord> images,
                                       const ClassTable& classes) {
  const fs::path dir = request_dir(next_id_);
  kitti::write_dataset(dir / "images", "images", images, nullptr, classes);
  json thresholds = json::object();
  for (const auto& c : classes.classes()) thresholds[c.name] = c.detection_threshold;
  const fs::path out_dir = dir / "out";
  json req{{"cmd", "predict"},
           {"model", model.token},
           {"images_manifest", (dir / "images" / "images.jsonl").string()},
           {"thresholds", thresholds},
           {"out_dir", out_dir.string()}};
  const json response = call(std::move(req));
  const fs::path result_dir = response.value("out_dir", out_dir.string());

  AnnotationSet out;
  out.kind = AnnotationKind::pseudo_label;
  for (const auto& image : images) {
    const fs::path p = result_dir / (image.image_id + ".txt");
    if (!fs::exists(p)) continue;
    auto parsed = kitti::parse_label_file(kitti::read_text_file(p), classes);
    if (!parsed.detections.empty()) out.entries.emplace(image.image_id, std::move(parsed.detections));
  }
  return out;
}

}  // namespace selflabel
