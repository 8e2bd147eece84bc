#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cellprompt/error.hpp"
#include "cellprompt/pipeline.hpp"

namespace cellprompt {

inline constexpr int kServiceSchemaVersion = 1;

enum class JobState { queued, running, finished, failed };

std::string to_string(JobState s);
JobState job_state_from_string(const std::string& s);

struct JobProgress {
  int epoch = 0;
  int total_epochs = 0;
  double last_loss = 0.0;
};

/// One training job. checkpoint_id/checkpoint_path are set iff the job finished; error iff it failed.
struct TrainJob {
  std::string id;
  JobState state = JobState::queued;
  std::string dataset_id;
  JobProgress progress;
  std::vector<double> loss_history;
  TrainConfig config;
  std::optional<std::string> checkpoint_id;
  std::optional<std::string> checkpoint_path;
  std::optional<std::string> error;
  std::string created_at;
  std::optional<std::string> started_at;
  std::optional<std::string> finished_at;

  nlohmann::json to_json() const;
  static TrainJob from_json(const nlohmann::json& j);
};

/// One uploaded file of a dataset, addressed by content hash.
struct DatasetItem {
  std::string stem;
  std::string image_sha;
  std::optional<std::string> mask_sha;
};

struct DatasetEntry {
  std::string id;
  std::string name;
  std::vector<DatasetItem> items;
  std::string created_at;

  int labelled_count() const;
  nlohmann::json to_json() const;
  static DatasetEntry from_json(const nlohmann::json& j);
};

/// An uploaded file as received: its name and bytes.
struct UploadedFile {
  std::string filename;
  std::string content;
};

/// A service request that cannot be honoured. Maps onto an HTTP status.
class ServiceError : public Error {
public:
  ServiceError(int status, std::string code, const std::string& message, std::vector<FieldIssue> fields = {})
      : Error(message), status_(status), code_(std::move(code)), fields_(std::move(fields)) {}

  int status() const { return status_; }
  const std::string& code() const { return code_; }
  const std::vector<FieldIssue>& fields() const { return fields_; }

private:
  int status_;
  std::string code_;
  std::vector<FieldIssue> fields_;
};

struct ServiceOptions {
  std::filesystem::path store;
  BackboneSource backbone;
};

/// Dataset, job, checkpoint and prediction bookkeeping behind the HTTP API. Artifacts live in
/// store/objects/<sha256>.<ext>; metadata lives in store/catalog.json, rewritten atomically
/// after every state change. One worker thread runs training jobs one at a time.
class JobService {
public:
  explicit JobService(ServiceOptions options);
  ~JobService();
  JobService(const JobService&) = delete;
  JobService& operator=(const JobService&) = delete;

  /// Images and masks are stem-matched; every file is decoded and checked before storing.
  DatasetEntry create_dataset(const std::string& name, const std::vector<UploadedFile>& images,
                              const std::vector<UploadedFile>& masks);
  /// Reads images/ and masks/ entries out of an uncompressed tar archive.
  DatasetEntry create_dataset_from_tar(const std::string& name, const std::string& archive);
  std::vector<DatasetEntry> datasets() const;

  /// Body: {"dataset_id": ..., "config": TrainConfig}. Returns the queued snapshot.
  TrainJob submit_job(const nlohmann::json& body);
  TrainJob job(const std::string& id) const;
  std::vector<TrainJob> jobs() const;

  nlohmann::json checkpoints() const;
  nlohmann::json checkpoint(const std::string& id) const;

  /// Segments one uploaded image with a stored checkpoint. Returns the prediction document.
  nlohmann::json predict(const UploadedFile& image, const std::string& checkpoint_id, const nlohmann::json& grid);
  nlohmann::json prediction(const std::string& id) const;
  std::vector<std::uint8_t> prediction_labelmap(const std::string& id) const;
  std::vector<std::uint8_t> prediction_image(const std::string& id) const;

  nlohmann::json health() const;

  /// Blocks until the job reaches a terminal state or the timeout (seconds) passes.
  TrainJob wait_for(const std::string& id, double timeout_s) const;

private:
  struct State;
  std::unique_ptr<State> state_;
};

/// HTTP front end for JobService.
class HttpServer {
public:
  explicit HttpServer(JobService& service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds to host:port (0 picks a free port) and returns the bound port.
  int bind(const std::string& host, int port);
  /// Serves until stop(); blocks.
  void run();
  void stop();

private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

} // namespace cellprompt
