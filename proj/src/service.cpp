#include "cellprompt/service.hpp"

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <ctime>
#include <deque>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <thread>

#include <httplib.h>

#include "cellprompt/checkpoint.hpp"
#include "cellprompt/image.hpp"

namespace cellprompt {

namespace {

std::string now_iso() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::span<const std::uint8_t> as_bytes(const std::string& s) {
  return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

std::vector<std::uint8_t> to_vector(const std::string& s) { return {s.begin(), s.end()}; }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw NotFound("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

template <class T>
nlohmann::json optional_json(const std::optional<T>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

template <class T>
std::optional<T> optional_from(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<T>();
}

ServiceError bad_request(const std::string& message, std::vector<FieldIssue> fields = {}) {
  return ServiceError(400, "bad_request", message, std::move(fields));
}

ServiceError not_found(const std::string& message) { return ServiceError(404, "not_found", message); }

// Thrown from the progress callback to abandon a job when the service shuts down.
struct Cancelled {};

/// Per instance id (1-based), the pixels on its boundary: inside the instance with a
/// 4-neighbour outside it or outside the image.
nlohmann::json instance_outlines(const LabelMap& labels) {
  const auto k = static_cast<std::size_t>(std::max(0, instance_count(labels)));
  std::vector<nlohmann::json> points(k + 1, nlohmann::json::array());
  const int h = labels.height();
  const int w = labels.width();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto v = labels(y, x);
      if (v <= 0) continue;
      const bool edge = y == 0 || x == 0 || y == h - 1 || x == w - 1 || labels(y - 1, x) != v ||
                        labels(y + 1, x) != v || labels(y, x - 1) != v || labels(y, x + 1) != v;
      if (edge) points[static_cast<std::size_t>(v)].push_back({x, y});
    }
  nlohmann::json out = nlohmann::json::array();
  for (std::size_t id = 1; id <= k; ++id) out.push_back({{"id", id}, {"points", std::move(points[id])}});
  return out;
}

std::uint64_t parse_octal(const char* p, std::size_t n) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < n && p[i]; ++i) {
    if (p[i] == ' ') continue;
    if (p[i] < '0' || p[i] > '7') throw bad_request("malformed tar header");
    v = v * 8 + static_cast<std::uint64_t>(p[i] - '0');
  }
  return v;
}

} // namespace

// ---- records -----------------------------------------------------------------

std::string to_string(JobState s) {
  switch (s) {
    case JobState::queued: return "queued";
    case JobState::running: return "running";
    case JobState::finished: return "finished";
    case JobState::failed: return "failed";
  }
  return "failed";
}

JobState job_state_from_string(const std::string& s) {
  if (s == "queued") return JobState::queued;
  if (s == "running") return JobState::running;
  if (s == "finished") return JobState::finished;
  if (s == "failed") return JobState::failed;
  throw InvalidArgument("unknown job state '" + s + "'");
}

nlohmann::json TrainJob::to_json() const {
  return {{"schema_version", kServiceSchemaVersion},
          {"id", id},
          {"state", to_string(state)},
          {"dataset_id", dataset_id},
          {"progress", {{"epoch", progress.epoch}, {"total_epochs", progress.total_epochs}, {"last_loss", progress.last_loss}}},
          {"loss_history", loss_history},
          {"config", config.to_json()},
          {"checkpoint_id", optional_json(checkpoint_id)},
          {"checkpoint_path", optional_json(checkpoint_path)},
          {"error", optional_json(error)},
          {"created_at", created_at},
          {"started_at", optional_json(started_at)},
          {"finished_at", optional_json(finished_at)}};
}

TrainJob TrainJob::from_json(const nlohmann::json& j) {
  TrainJob job;
  job.id = j.at("id").get<std::string>();
  job.state = job_state_from_string(j.at("state").get<std::string>());
  job.dataset_id = j.at("dataset_id").get<std::string>();
  const auto& p = j.at("progress");
  job.progress = {p.at("epoch").get<int>(), p.at("total_epochs").get<int>(), p.at("last_loss").get<double>()};
  job.loss_history = j.value("loss_history", std::vector<double>{});
  job.config = TrainConfig::from_json(j.at("config"));
  job.checkpoint_id = optional_from<std::string>(j, "checkpoint_id");
  job.checkpoint_path = optional_from<std::string>(j, "checkpoint_path");
  job.error = optional_from<std::string>(j, "error");
  job.created_at = j.value("created_at", "");
  job.started_at = optional_from<std::string>(j, "started_at");
  job.finished_at = optional_from<std::string>(j, "finished_at");
  return job;
}

int DatasetEntry::labelled_count() const {
  return static_cast<int>(std::count_if(items.begin(), items.end(), [](const auto& i) { return i.mask_sha.has_value(); }));
}

nlohmann::json DatasetEntry::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& i : items) rows.push_back({{"stem", i.stem}, {"image_sha256", i.image_sha}, {"mask_sha256", optional_json(i.mask_sha)}});
  return {{"schema_version", kServiceSchemaVersion},
          {"id", id},
          {"name", name},
          {"items", rows},
          {"image_count", items.size()},
          {"labelled_count", labelled_count()},
          {"created_at", created_at}};
}

DatasetEntry DatasetEntry::from_json(const nlohmann::json& j) {
  DatasetEntry d;
  d.id = j.at("id").get<std::string>();
  d.name = j.value("name", "");
  d.created_at = j.value("created_at", "");
  for (const auto& row : j.at("items"))
    d.items.push_back({row.at("stem").get<std::string>(), row.at("image_sha256").get<std::string>(),
                       optional_from<std::string>(row, "mask_sha256")});
  return d;
}

// ---- service state -----------------------------------------------------------

struct JobService::State {
  ServiceOptions options;
  std::filesystem::path objects;
  std::filesystem::path catalog_path;

  mutable std::mutex mu;
  mutable std::condition_variable changed;
  std::map<std::string, DatasetEntry> datasets;
  std::map<std::string, TrainJob> jobs;
  std::map<std::string, nlohmann::json> checkpoints;
  std::map<std::string, nlohmann::json> predictions;
  std::int64_t next_job = 1;
  std::int64_t next_prediction = 1;
  std::deque<std::string> queue;
  bool stopping = false;
  std::thread worker;

  std::mutex model_mu;
  std::unique_ptr<PromptableSegmenter> base;
  std::map<std::string, std::shared_ptr<const PromptableSegmenter>> adapted;

  std::filesystem::path object_path(const std::string& sha) const { return objects / sha; }

  std::string put_object(std::span<const std::uint8_t> bytes) {
    const auto sha = sha256_hex(bytes);
    const auto path = object_path(sha);
    if (!std::filesystem::exists(path)) {
      const auto tmp = path.string() + ".tmp";
      {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw Error("cannot write " + tmp);
      }
      std::filesystem::rename(tmp, path);
    }
    return sha;
  }

  std::string get_object(const std::string& sha) const { return read_file(object_path(sha)); }

  // Caller holds mu.
  void save_catalog() const {
    nlohmann::json j{{"schema_version", kServiceSchemaVersion}, {"next_job", next_job}, {"next_prediction", next_prediction}};
    j["datasets"] = nlohmann::json::object();
    for (const auto& [id, d] : datasets) j["datasets"][id] = d.to_json();
    j["jobs"] = nlohmann::json::object();
    for (const auto& [id, job] : jobs) j["jobs"][id] = job.to_json();
    j["checkpoints"] = checkpoints;
    j["predictions"] = predictions;
    write_json_file(catalog_path, j);
  }

  void load_catalog() {
    if (!std::filesystem::exists(catalog_path)) return;
    const auto j = read_json_file(catalog_path);
    if (j.value("schema_version", 0) != kServiceSchemaVersion) throw FormatError("unsupported catalog schema");
    next_job = j.value("next_job", std::int64_t{1});
    next_prediction = j.value("next_prediction", std::int64_t{1});
    for (const auto& [id, d] : j.at("datasets").items()) datasets.emplace(id, DatasetEntry::from_json(d));
    for (const auto& [id, c] : j.at("checkpoints").items()) checkpoints.emplace(id, c);
    for (const auto& [id, p] : j.at("predictions").items()) predictions.emplace(id, p);
    for (const auto& [id, jj] : j.at("jobs").items()) {
      auto job = TrainJob::from_json(jj);
      if (job.state == JobState::running) {
        job.state = JobState::failed;
        job.error = "interrupted by a server restart";
        job.finished_at = now_iso();
      }
      if (job.state == JobState::queued) queue.push_back(id);
      jobs.emplace(id, std::move(job));
    }
  }

  const PromptableSegmenter& base_model() {
    std::lock_guard lock(model_mu);
    if (!base) base = load_base_model(options.backbone);
    return *base;
  }

  std::shared_ptr<const PromptableSegmenter> adapted_model(const std::string& checkpoint_id, const std::string& sha) {
    const auto& b = base_model();
    std::lock_guard lock(model_mu);
    if (auto it = adapted.find(checkpoint_id); it != adapted.end()) return it->second;
    auto m = b.clone_base();
    apply_adapter(*m, read_adapter(object_path(sha)));
    std::shared_ptr<const PromptableSegmenter> shared(std::move(m));
    adapted.emplace(checkpoint_id, shared);
    return shared;
  }

  std::vector<ImageRecord> labelled_records(const DatasetEntry& d) const {
    std::vector<ImageRecord> out;
    for (const auto& item : d.items) {
      if (!item.mask_sha) continue;
      out.push_back(make_record(decode_raw_image(to_vector(get_object(item.image_sha))),
                                decode_label_map(to_vector(get_object(*item.mask_sha))), item.stem));
    }
    return out;
  }

  void run_job(const std::string& id) {
    TrainConfig cfg;
    DatasetEntry dataset;
    {
      std::lock_guard lock(mu);
      auto& job = jobs.at(id);
      job.state = JobState::running;
      job.started_at = now_iso();
      job.progress.total_epochs = job.config.epochs;
      cfg = job.config;
      dataset = datasets.at(job.dataset_id);
      save_catalog();
    }
    changed.notify_all();

    auto finish = [&](auto&& update) {
      {
        std::lock_guard lock(mu);
        auto& job = jobs.at(id);
        update(job);
        job.finished_at = now_iso();
        save_catalog();
      }
      changed.notify_all();
    };
    try {
      const auto records = labelled_records(dataset);
      const auto& base_ref = base_model();
      const auto result = train_adapter(records, cfg, base_ref, [&](const EpochProgress& p) {
        std::lock_guard lock(mu);
        if (stopping) throw Cancelled{};
        auto& job = jobs.at(id);
        job.progress = {p.epoch, p.total_epochs, p.loss};
        job.loss_history.push_back(p.loss);
      });
      auto ckpt = result.checkpoint;
      ckpt.extra["job_id"] = id;
      ckpt.extra["dataset_id"] = dataset.id;
      ckpt.extra["backbone"] = options.backbone.to_json();
      const auto tmp = objects / (id + ".cpk.tmp");
      write_adapter(tmp, ckpt);
      const auto bytes = read_file(tmp);
      const auto sha = sha256_hex(as_bytes(bytes));
      std::filesystem::rename(tmp, object_path(sha));
      const auto ckpt_id = "ckpt-" + sha.substr(0, 16);
      const auto path = std::filesystem::absolute(object_path(sha)).string();
      finish([&](TrainJob& job) {
        checkpoints[ckpt_id] = {{"schema_version", kServiceSchemaVersion},
                                {"id", ckpt_id},
                                {"sha256", sha},
                                {"path", path},
                                {"size_bytes", bytes.size()},
                                {"job_id", id},
                                {"dataset_id", dataset.id},
                                {"backbone_fingerprint", ckpt.backbone_fingerprint},
                                {"lora_config", ckpt.lora_config.to_json()},
                                {"train_config", cfg.to_json()},
                                {"final_loss", result.report.loss_per_epoch.empty() ? 0.0 : result.report.loss_per_epoch.back()},
                                {"created_at", now_iso()}};
        job.state = JobState::finished;
        job.checkpoint_id = ckpt_id;
        job.checkpoint_path = path;
      });
    } catch (const Cancelled&) {
      finish([](TrainJob& job) {
        job.state = JobState::failed;
        job.error = "interrupted by server shutdown";
      });
    } catch (const std::exception& e) {
      finish([&](TrainJob& job) {
        job.state = JobState::failed;
        job.error = e.what();
      });
    }
  }

  void worker_loop() {
    for (;;) {
      std::string id;
      {
        std::unique_lock lock(mu);
        changed.wait(lock, [&] { return stopping || !queue.empty(); });
        if (stopping) return;
        id = queue.front();
        queue.pop_front();
      }
      run_job(id);
    }
  }
};

// ---- service -----------------------------------------------------------------

JobService::JobService(ServiceOptions options) : state_(std::make_unique<State>()) {
  auto& s = *state_;
  if (options.store.empty()) throw InvalidArgument("service store directory is required");
  s.options = std::move(options);
  s.objects = s.options.store / "objects";
  s.catalog_path = s.options.store / "catalog.json";
  std::filesystem::create_directories(s.objects);
  s.load_catalog();
  {
    std::lock_guard lock(s.mu);
    s.save_catalog();
  }
  s.worker = std::thread([&s] { s.worker_loop(); });
}

JobService::~JobService() {
  {
    std::lock_guard lock(state_->mu);
    state_->stopping = true;
  }
  state_->changed.notify_all();
  if (state_->worker.joinable()) state_->worker.join();
}

DatasetEntry JobService::create_dataset(const std::string& name, const std::vector<UploadedFile>& images,
                                        const std::vector<UploadedFile>& masks) {
  auto& s = *state_;
  if (images.empty()) throw bad_request("a dataset needs at least one image", {{"images", "no image files"}});
  std::map<std::string, const UploadedFile*> by_stem;
  for (const auto& f : images) {
    const auto stem = std::filesystem::path(f.filename).stem().string();
    if (stem.empty()) throw bad_request("image without a file name", {{"images", "missing file name"}});
    if (!by_stem.emplace(stem, &f).second) throw bad_request("duplicate image " + stem, {{"images", "duplicate stem " + stem}});
  }
  std::map<std::string, const UploadedFile*> mask_by_stem;
  for (const auto& f : masks) {
    const auto stem = std::filesystem::path(f.filename).stem().string();
    if (!by_stem.count(stem)) throw bad_request("mask " + f.filename + " has no matching image", {{"masks", "no image for " + stem}});
    if (!mask_by_stem.emplace(stem, &f).second) throw bad_request("duplicate mask " + stem, {{"masks", "duplicate stem " + stem}});
  }

  DatasetEntry entry;
  entry.name = name;
  entry.created_at = now_iso();
  std::string manifest;
  for (const auto& [stem, file] : by_stem) {
    RawImage raw;
    try {
      raw = decode_raw_image(to_vector(file->content));
    } catch (const std::exception& e) {
      throw bad_request("cannot decode image " + file->filename + ": " + e.what(), {{"images", "undecodable " + file->filename}});
    }
    std::optional<LabelMap> labels;
    const UploadedFile* mask = nullptr;
    if (auto it = mask_by_stem.find(stem); it != mask_by_stem.end()) {
      mask = it->second;
      try {
        labels = decode_label_map(to_vector(mask->content));
      } catch (const std::exception& e) {
        throw bad_request("cannot decode label map " + mask->filename + ": " + e.what(), {{"masks", "undecodable " + mask->filename}});
      }
    }
    try {
      make_record(raw, labels, stem);
    } catch (const std::exception& e) {
      throw bad_request(stem + ": " + e.what(), {{"masks", stem + ": " + e.what()}});
    }
    DatasetItem item{stem, s.put_object(as_bytes(file->content)), std::nullopt};
    if (mask) item.mask_sha = s.put_object(as_bytes(mask->content));
    manifest += stem + ':' + item.image_sha + ':' + item.mask_sha.value_or("-") + '\n';
    entry.items.push_back(std::move(item));
  }
  entry.id = "ds-" + sha256_hex(as_bytes(manifest)).substr(0, 16);

  std::lock_guard lock(s.mu);
  if (auto it = s.datasets.find(entry.id); it != s.datasets.end()) return it->second;
  s.datasets.emplace(entry.id, entry);
  s.save_catalog();
  return entry;
}

DatasetEntry JobService::create_dataset_from_tar(const std::string& name, const std::string& archive) {
  std::vector<UploadedFile> images, masks;
  std::size_t pos = 0;
  while (pos + 512 <= archive.size()) {
    const char* h = archive.data() + pos;
    if (std::all_of(h, h + 512, [](char c) { return c == 0; })) break;
    std::string file(h, strnlen(h, 100));
    const std::string prefix(h + 345, strnlen(h + 345, 155));
    if (!prefix.empty()) file = prefix + "/" + file;
    const auto size = parse_octal(h + 124, 12);
    const char type = h[156];
    pos += 512;
    if (pos + size > archive.size()) throw bad_request("truncated tar archive", {{"archive", "truncated"}});
    if (type == '0' || type == '\0') {
      const std::filesystem::path p(file);
      const auto dir = p.parent_path().filename().string();
      UploadedFile f{p.filename().string(), archive.substr(pos, size)};
      if (dir == "images") images.push_back(std::move(f));
      else if (dir == "masks") masks.push_back(std::move(f));
    }
    pos += (size + 511) / 512 * 512;
  }
  return create_dataset(name, images, masks);
}

std::vector<DatasetEntry> JobService::datasets() const {
  std::lock_guard lock(state_->mu);
  std::vector<DatasetEntry> out;
  for (const auto& [id, d] : state_->datasets) out.push_back(d);
  return out;
}

TrainJob JobService::submit_job(const nlohmann::json& body) {
  auto& s = *state_;
  if (!body.is_object()) throw bad_request("request body must be a JSON object");
  std::vector<FieldIssue> issues;
  for (const auto& [key, value] : body.items())
    if (key != "dataset_id" && key != "config" && key != "schema_version") issues.push_back({key, "unknown field"});
  if (!body.contains("dataset_id") || !body.at("dataset_id").is_string())
    issues.push_back({"dataset_id", "required string"});
  if (!issues.empty()) throw bad_request("invalid job request", issues);

  TrainConfig cfg;
  try {
    cfg = TrainConfig::from_json(body.value("config", nlohmann::json::object()));
  } catch (const ConfigError& e) {
    std::vector<FieldIssue> fields;
    for (const auto& i : e.issues()) fields.push_back({"config." + i.field, i.message});
    throw ServiceError(400, "invalid_config", e.what(), fields);
  }

  const auto dataset_id = body.at("dataset_id").get<std::string>();
  std::lock_guard lock(s.mu);
  const auto it = s.datasets.find(dataset_id);
  if (it == s.datasets.end()) throw not_found("unknown dataset " + dataset_id);
  if (it->second.labelled_count() == 0)
    throw bad_request("dataset " + dataset_id + " has no labelled images", {{"dataset_id", "no labelled images"}});

  TrainJob job;
  char buf[32];
  std::snprintf(buf, sizeof buf, "job-%06lld", static_cast<long long>(s.next_job++));
  job.id = buf;
  job.dataset_id = dataset_id;
  job.config = cfg;
  job.progress.total_epochs = cfg.epochs;
  job.created_at = now_iso();
  s.jobs.emplace(job.id, job);
  s.queue.push_back(job.id);
  s.save_catalog();
  s.changed.notify_all();
  return job;
}

TrainJob JobService::job(const std::string& id) const {
  std::lock_guard lock(state_->mu);
  const auto it = state_->jobs.find(id);
  if (it == state_->jobs.end()) throw not_found("unknown job " + id);
  return it->second;
}

std::vector<TrainJob> JobService::jobs() const {
  std::lock_guard lock(state_->mu);
  std::vector<TrainJob> out;
  for (const auto& [id, job] : state_->jobs) out.push_back(job);
  return out;
}

nlohmann::json JobService::checkpoints() const {
  std::lock_guard lock(state_->mu);
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& [id, c] : state_->checkpoints) rows.push_back(c);
  return {{"schema_version", kServiceSchemaVersion}, {"checkpoints", rows}};
}

nlohmann::json JobService::checkpoint(const std::string& id) const {
  std::lock_guard lock(state_->mu);
  const auto it = state_->checkpoints.find(id);
  if (it == state_->checkpoints.end()) throw not_found("unknown checkpoint " + id);
  return it->second;
}

nlohmann::json JobService::predict(const UploadedFile& image, const std::string& checkpoint_id, const nlohmann::json& grid) {
  auto& s = *state_;
  std::string sha;
  {
    std::lock_guard lock(s.mu);
    const auto it = s.checkpoints.find(checkpoint_id);
    if (it == s.checkpoints.end()) throw not_found("unknown checkpoint " + checkpoint_id);
    sha = it->second.at("sha256").get<std::string>();
  }
  GridConfig cfg;
  try {
    cfg = grid.is_null() ? GridConfig{} : GridConfig::from_json(grid);
  } catch (const ConfigError& e) {
    std::vector<FieldIssue> fields;
    for (const auto& i : e.issues()) fields.push_back({"grid." + i.field, i.message});
    throw ServiceError(400, "invalid_config", e.what(), fields);
  }
  const auto stem = image.filename.empty() ? std::string("image") : std::filesystem::path(image.filename).stem().string();
  ImageRecord rec;
  try {
    rec = make_record(decode_raw_image(to_vector(image.content)), std::nullopt, stem);
  } catch (const std::exception& e) {
    throw bad_request(std::string("cannot decode image: ") + e.what(), {{"image", "undecodable image"}});
  }

  const auto model = s.adapted_model(checkpoint_id, sha);
  const auto result = segment_image(rec, *model, cfg);

  const auto labelmap_sha = s.put_object(encode_label_map_png(result.label_map));
  const auto image_sha = s.put_object(encode_image_png(rec.image));
  std::string id;
  {
    std::lock_guard lock(s.mu);
    char buf[32];
    std::snprintf(buf, sizeof buf, "pred-%06lld", static_cast<long long>(s.next_prediction++));
    id = buf;
  }
  auto doc = result_sidecar(result, stem, cfg);
  doc["schema_version"] = kServiceSchemaVersion;
  doc["id"] = id;
  doc["checkpoint_id"] = checkpoint_id;
  doc["created_at"] = now_iso();
  doc["labelmap_url"] = "/predictions/" + id + "/labelmap";
  doc["image_url"] = "/predictions/" + id + "/image";
  doc["overlay"] = {{"outlines", instance_outlines(result.label_map)}};
  const auto dumped = doc.dump();
  const auto doc_sha = s.put_object(as_bytes(dumped));
  {
    std::lock_guard lock(s.mu);
    s.predictions[id] = {{"id", id},
                         {"checkpoint_id", checkpoint_id},
                         {"document_sha256", doc_sha},
                         {"labelmap_sha256", labelmap_sha},
                         {"image_sha256", image_sha},
                         {"instance_count", result.instances.size()},
                         {"created_at", doc["created_at"]}};
    s.save_catalog();
  }
  return doc;
}

nlohmann::json JobService::prediction(const std::string& id) const {
  std::string sha;
  {
    std::lock_guard lock(state_->mu);
    const auto it = state_->predictions.find(id);
    if (it == state_->predictions.end()) throw not_found("unknown prediction " + id);
    sha = it->second.at("document_sha256").get<std::string>();
  }
  return nlohmann::json::parse(state_->get_object(sha));
}

std::vector<std::uint8_t> JobService::prediction_labelmap(const std::string& id) const {
  std::string sha;
  {
    std::lock_guard lock(state_->mu);
    const auto it = state_->predictions.find(id);
    if (it == state_->predictions.end()) throw not_found("unknown prediction " + id);
    sha = it->second.at("labelmap_sha256").get<std::string>();
  }
  return to_vector(state_->get_object(sha));
}

std::vector<std::uint8_t> JobService::prediction_image(const std::string& id) const {
  std::string sha;
  {
    std::lock_guard lock(state_->mu);
    const auto it = state_->predictions.find(id);
    if (it == state_->predictions.end()) throw not_found("unknown prediction " + id);
    sha = it->second.at("image_sha256").get<std::string>();
  }
  return to_vector(state_->get_object(sha));
}

nlohmann::json JobService::health() const {
  std::lock_guard lock(state_->mu);
  nlohmann::json running = nullptr;
  for (const auto& [id, job] : state_->jobs)
    if (job.state == JobState::running) running = id;
  return {{"schema_version", kServiceSchemaVersion},
          {"status", "ok"},
          {"running_job", running},
          {"queued_jobs", state_->queue.size()},
          {"backbone", state_->options.backbone.to_json()}};
}

TrainJob JobService::wait_for(const std::string& id, double timeout_s) const {
  std::unique_lock lock(state_->mu);
  if (!state_->jobs.count(id)) throw not_found("unknown job " + id);
  state_->changed.wait_for(lock, std::chrono::duration<double>(timeout_s), [&] {
    const auto s = state_->jobs.at(id).state;
    return s == JobState::finished || s == JobState::failed;
  });
  return state_->jobs.at(id);
}

// ---- HTTP --------------------------------------------------------------------

struct HttpServer::Impl {
  JobService& service;
  httplib::Server server;

  explicit Impl(JobService& s) : service(s) {}

  static void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message,
                         const std::vector<FieldIssue>& fields = {}) {
    nlohmann::json f = nlohmann::json::array();
    for (const auto& i : fields) f.push_back({{"field", i.field}, {"message", i.message}});
    send_json(res, status,
              {{"schema_version", kServiceSchemaVersion}, {"error", {{"code", code}, {"message", message}, {"fields", f}}}});
  }

  template <class F>
  static httplib::Server::Handler guarded(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
      try {
        f(req, res);
      } catch (const ServiceError& e) {
        send_error(res, e.status(), e.code(), e.what(), e.fields());
      } catch (const ConfigError& e) {
        send_error(res, 400, "invalid_config", e.what(), e.issues());
      } catch (const NotFound& e) {
        send_error(res, 404, "not_found", e.what());
      } catch (const InvalidArgument& e) {
        send_error(res, 400, "bad_request", e.what());
      } catch (const FormatError& e) {
        send_error(res, 400, "bad_request", e.what());
      } catch (const nlohmann::json::exception& e) {
        send_error(res, 400, "bad_request", e.what());
      } catch (const std::exception& e) {
        send_error(res, 500, "internal", e.what());
      }
    };
  }

  static std::vector<UploadedFile> files(const httplib::Request& req, const std::string& key) {
    std::vector<UploadedFile> out;
    for (const auto& f : req.get_file_values(key)) out.push_back({f.filename, f.content});
    return out;
  }

  void routes() {
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                {"Access-Control-Allow-Headers", "Content-Type"},
                                {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
    server.set_payload_max_length(std::size_t{1} << 30);
    server.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    server.Get("/health", guarded([this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, service.health());
    }));

    server.Post("/datasets", guarded([this](const httplib::Request& req, httplib::Response& res) {
      if (!req.is_multipart_form_data()) throw bad_request("expected multipart/form-data");
      const auto name = req.has_file("name") ? req.get_file_value("name").content : std::string{};
      DatasetEntry d;
      if (req.has_file("archive")) {
        d = service.create_dataset_from_tar(name, req.get_file_value("archive").content);
      } else {
        d = service.create_dataset(name, files(req, "images"), files(req, "masks"));
      }
      send_json(res, 201, d.to_json());
    }));
    server.Get("/datasets", guarded([this](const httplib::Request&, httplib::Response& res) {
      nlohmann::json rows = nlohmann::json::array();
      for (const auto& d : service.datasets()) rows.push_back(d.to_json());
      send_json(res, 200, {{"schema_version", kServiceSchemaVersion}, {"datasets", rows}});
    }));
    server.Get(R"(/datasets/([A-Za-z0-9_-]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      for (const auto& d : service.datasets())
        if (d.id == req.matches[1].str()) return send_json(res, 200, d.to_json());
      throw not_found("unknown dataset " + req.matches[1].str());
    }));

    server.Post("/jobs", guarded([this](const httplib::Request& req, httplib::Response& res) {
      nlohmann::json body;
      try {
        body = nlohmann::json::parse(req.body);
      } catch (const nlohmann::json::parse_error& e) {
        throw bad_request(std::string("malformed JSON: ") + e.what());
      }
      send_json(res, 201, service.submit_job(body).to_json());
    }));
    server.Get("/jobs", guarded([this](const httplib::Request&, httplib::Response& res) {
      nlohmann::json rows = nlohmann::json::array();
      for (const auto& j : service.jobs()) rows.push_back(j.to_json());
      send_json(res, 200, {{"schema_version", kServiceSchemaVersion}, {"jobs", rows}});
    }));
    server.Get(R"(/jobs/([A-Za-z0-9_-]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      send_json(res, 200, service.job(req.matches[1].str()).to_json());
    }));

    server.Get("/checkpoints", guarded([this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, service.checkpoints());
    }));
    server.Get(R"(/checkpoints/([A-Za-z0-9_-]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      send_json(res, 200, service.checkpoint(req.matches[1].str()));
    }));

    server.Post("/predictions", guarded([this](const httplib::Request& req, httplib::Response& res) {
      if (!req.is_multipart_form_data()) throw bad_request("expected multipart/form-data");
      std::vector<FieldIssue> missing;
      if (!req.has_file("image")) missing.push_back({"image", "required file"});
      if (!req.has_file("checkpoint_id")) missing.push_back({"checkpoint_id", "required field"});
      if (!missing.empty()) throw bad_request("incomplete prediction request", missing);
      nlohmann::json grid = nullptr;
      if (req.has_file("grid")) {
        const auto text = req.get_file_value("grid").content;
        try {
          if (!text.empty()) grid = nlohmann::json::parse(text);
        } catch (const nlohmann::json::parse_error&) {
          throw bad_request("grid is not valid JSON", {{"grid", "malformed JSON"}});
        }
      }
      const auto f = req.get_file_value("image");
      send_json(res, 201, service.predict({f.filename, f.content}, req.get_file_value("checkpoint_id").content, grid));
    }));
    server.Get(R"(/predictions/([A-Za-z0-9_-]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      send_json(res, 200, service.prediction(req.matches[1].str()));
    }));
    server.Get(R"(/predictions/([A-Za-z0-9_-]+)/labelmap)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto bytes = service.prediction_labelmap(req.matches[1].str());
      res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
    }));
    server.Get(R"(/predictions/([A-Za-z0-9_-]+)/image)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto bytes = service.prediction_image(req.matches[1].str());
      res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
    }));
  }
};

HttpServer::HttpServer(JobService& service) : impl_(std::make_unique<Impl>(service)) { impl_->routes(); }

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = impl_->server.bind_to_any_port(host);
    if (bound < 0) throw Error("cannot bind " + host);
    return bound;
  }
  if (!impl_->server.bind_to_port(host, port)) throw Error("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void HttpServer::run() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_) impl_->server.stop();
}

} // namespace cellprompt
