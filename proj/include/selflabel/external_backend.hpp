#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "selflabel/detector.hpp"

namespace selflabel {

struct ExternalOptions {
  /// Shell command line that starts the detector process.
  std::string command;
  /// Scratch directory for manifests, label files and model outputs.
  std::filesystem::path work_dir;
  std::chrono::milliseconds timeout{std::chrono::hours(2)};
  int max_restarts{2};
};

/// A detector living in a child process that speaks newline-delimited JSON on
/// its stdin/stdout. Label payloads travel as manifests plus KITTI files.
/// Requests are serialized: the process handles one at a time.
class ExternalBackend final : public DetectorBackend {
 public:
  /// `classes` names the label types written into training label files.
  ExternalBackend(ExternalOptions options, ClassTable classes);
  ~ExternalBackend() override;

  ExternalBackend(const ExternalBackend&) = delete;
  ExternalBackend& operator=(const ExternalBackend&) = delete;

  std::string id() const override { return "external"; }
  bool supports_concurrent_sessions() const override { return false; }

  ModelHandle train(const TrainRequest& request, const ImageCatalog& images) override;
  AnnotationSet predict(const ModelHandle& model, std::span<const ImageRecord> images,
                        const ClassTable& classes) override;

  /// Sends one raw request object (an "id" is assigned) and returns the
  /// matching response. Throws BackendError on ok:false or a dead process.
  nlohmann::json call(nlohmann::json request);

  int restarts() const noexcept { return restarts_; }
  std::uint64_t requests_sent() const noexcept { return next_id_ - 1; }

 private:
  class Process;

  void ensure_running();
  std::filesystem::path request_dir(std::uint64_t id) const;

  ExternalOptions options_;
  std::unique_ptr<Process> process_;
  std::uint64_t next_id_{1};
  int restarts_{0};
  ClassTable classes_;
};

}  // namespace selflabel
