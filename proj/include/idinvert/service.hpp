#pragma once

// HTTP facade: model registry, a persisted FIFO job queue for inversion and
// diffusion, and synchronous edit / interpolation renders.

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "idinvert/editing.hpp"
#include "idinvert/encoder.hpp"
#include "idinvert/features.hpp"
#include "idinvert/gan.hpp"
#include "idinvert/inversion.hpp"

namespace httplib {
class Server;
}

namespace idinvert::service {

namespace fs = std::filesystem;

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  fs::path registry_dir = "registry";
  int workers = 1;
  double alpha_limit = 3.0;
  int max_steps = 1000;
};

/// Reads IDINVERT_PORT, IDINVERT_REGISTRY, IDINVERT_WORKERS and IDINVERT_HOST
/// over the defaults; workers default to max(1, logical cores - 1).
ServiceConfig config_from_env();

// ---- registry ---------------------------------------------------------------

struct ModelEntry {
  std::string id;
  fs::path generator;
  fs::path encoder;
  fs::path features;
  std::optional<fs::path> boundaries;
  std::map<std::string, std::string> hashes;  // generator, encoder, features
  int resolution = 0;
  int num_layers = 0;
  int d_w = 0;
  std::vector<std::string> boundary_ids;
};

nlohmann::json to_json(const ModelEntry& e);

/// Frozen checkpoints of one entry, loaded once.
struct LoadedModel {
  ModelEntry entry;
  gan::Generator generator;
  encoder::Encoder encoder;
  features::FeatureNet features;
  std::vector<editing::SemanticBoundary> boundaries;

  inversion::Models models() const { return {generator, encoder, features}; }
  const editing::SemanticBoundary& boundary(const std::string& id) const;
};

/// Copies checkpoints into <registry>/models/<id>/ and writes manifest.json
/// with their hashes. Throws ValidationError if the encoder was not trained
/// against the generator.
ModelEntry register_model(const fs::path& registry_dir, const std::string& id, const fs::path& generator,
                          const fs::path& encoder, const fs::path& features,
                          const std::optional<fs::path>& boundaries = {});

class Registry {
 public:
  /// Scans <dir>/models/*/manifest.json. Entries whose files are missing or
  /// whose hashes do not match are skipped and reported in problems().
  explicit Registry(fs::path dir);

  std::vector<ModelEntry> list() const;
  /// Throws NotFoundError.
  const ModelEntry& entry(const std::string& id) const;
  std::shared_ptr<const LoadedModel> load(const std::string& id);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  fs::path dir_;
  std::map<std::string, ModelEntry> entries_;
  std::vector<std::string> problems_;
  std::mutex mu_;
  std::map<std::string, std::shared_ptr<const LoadedModel>> loaded_;
};

// ---- jobs ---------------------------------------------------------------------

enum class JobState { queued, running, done, failed };
std::string to_string(JobState s);
JobState job_state_from_string(const std::string& s);

struct JobRecord {
  std::string id;
  std::string kind;  // invert or diffuse
  JobState state = JobState::queued;
  std::uint64_t seq = 0;  // submission order
  std::string model;
  nlohmann::json params = nlohmann::json::object();   // uploads (content hashes), config, crop box
  int step = 0;
  int total = 0;
  std::vector<inversion::LossTerms> loss_trace;
  std::string error;
};

nlohmann::json to_json(const JobRecord& j);
JobRecord job_from_json(const nlohmann::json& j);

/// Job records under <dir>/jobs, uploads under <dir>/uploads/<sha256>.png,
/// results under <dir>/results/<job>.{inv,png}.
class JobStore {
 public:
  explicit JobStore(fs::path dir);

  /// Stores bytes under their content hash and returns the hash.
  std::string put_upload(const std::vector<std::uint8_t>& png);
  std::vector<std::uint8_t> get_upload(const std::string& hash) const;

  JobRecord create(const std::string& kind, const std::string& model, nlohmann::json params);
  std::optional<JobRecord> get(const std::string& id) const;
  void update(const JobRecord& job, bool persist = true);
  /// Jobs left running by a previous process go back to queued; returns the
  /// queued jobs in submission order.
  std::vector<JobRecord> recover();

  fs::path result_path(const std::string& id) const;
  fs::path result_png(const std::string& id) const;

 private:
  void persist(const JobRecord& job) const;

  fs::path dir_;
  mutable std::mutex mu_;
  std::map<std::string, JobRecord> jobs_;
  std::uint64_t next_seq_ = 1;
};

// ---- server ---------------------------------------------------------------------

/// An HTTP error with its status code.
struct HttpError : std::runtime_error {
  int status;
  HttpError(int s, const std::string& msg) : std::runtime_error(msg), status(s) {}
};

class Service {
 public:
  explicit Service(ServiceConfig config);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds, starts workers and serves on a background thread. Returns the port.
  int start();
  /// Blocks serving on the calling thread.
  void run();
  void stop();

  const ServiceConfig& config() const { return config_; }
  Registry& registry() { return registry_; }
  JobStore& jobs() { return jobs_; }

  // Endpoint bodies, callable without sockets. Throw HttpError / NotFoundError /
  // ValidationError; the HTTP layer maps them to status codes.
  nlohmann::json list_models();
  nlohmann::json list_boundaries(const std::string& model);
  JobRecord submit_invert(const std::vector<std::uint8_t>& image, const std::string& model, double lambda_dom,
                          int steps);
  JobRecord submit_diffuse(const std::vector<std::uint8_t>& target, const std::vector<std::uint8_t>& context,
                           const std::string& model, const editing::CropBox& box, double lambda_dom, int steps);
  nlohmann::json job_json(const std::string& id);
  std::vector<std::uint8_t> result_png(const std::string& id);
  std::vector<std::uint8_t> render_edit(const nlohmann::json& request);
  std::vector<std::uint8_t> render_interpolation(const nlohmann::json& request);

 private:
  struct Code {
    std::shared_ptr<const LoadedModel> model;
    ad::Tensor styles;
    gan::NoiseStack noise;
  };
  Code code_from(const nlohmann::json& ref, const std::string& model_hint);
  void enqueue(const std::string& id);
  void worker_loop();
  void execute(JobRecord job);
  void install_routes();

  ServiceConfig config_;
  Registry registry_;
  JobStore jobs_;
  std::unique_ptr<httplib::Server> server_;
  std::thread server_thread_;
  std::vector<std::thread> workers_;
  std::mutex queue_mu_;
  std::condition_variable queue_cv_;
  std::deque<std::string> queue_;
  bool stopping_ = false;
  bool started_ = false;
};

}  // namespace idinvert::service
