#include "idinvert/service.hpp"

#include <algorithm>
#include <cstdlib>
#include <random>
#include <sstream>

#include <httplib.h>

#include "idinvert/archive.hpp"
#include "idinvert/errors.hpp"
#include "idinvert/image.hpp"

namespace idinvert::service {

using nlohmann::json;

namespace {

int env_int(const char* name, int fallback) {
  const char* v = std::getenv(name);
  if (!v || !*v) return fallback;
  try {
    return std::stoi(v);
  } catch (const std::exception&) {
    throw ValidationError(name, "must be an integer");
  }
}

std::string hex_id() {
  static std::mutex mu;
  static std::mt19937_64 rng(std::random_device{}());
  std::lock_guard lock(mu);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(rng()));
  return buf;
}

ImageTensor decode_upload(const std::vector<std::uint8_t>& bytes, int resolution) {
  if (bytes.empty()) throw HttpError(400, "empty image upload");
  ImageTensor img;
  try {
    img = image::decode_png(bytes);
  } catch (const std::exception& e) {
    throw HttpError(400, std::string("undecodable image: ") + e.what());
  }
  return image::center_crop_resize(img, resolution);
}

json loss_json(const inversion::LossTerms& t) {
  return {{"pixel", t.pixel}, {"perceptual", t.perceptual}, {"regularizer", t.regularizer}, {"total", t.total}};
}

}  // namespace

ServiceConfig config_from_env() {
  ServiceConfig c;
  const unsigned hw = std::thread::hardware_concurrency();
  c.workers = std::max(1, static_cast<int>(hw) - 1);
  c.port = env_int("IDINVERT_PORT", c.port);
  c.workers = env_int("IDINVERT_WORKERS", c.workers);
  if (const char* r = std::getenv("IDINVERT_REGISTRY"); r && *r) c.registry_dir = r;
  if (const char* h = std::getenv("IDINVERT_HOST"); h && *h) c.host = h;
  if (c.workers < 1) throw ValidationError("IDINVERT_WORKERS", "must be >= 1");
  if (c.port < 0 || c.port > 65535) throw ValidationError("IDINVERT_PORT", "must be a port number");
  return c;
}

// ---- registry ---------------------------------------------------------------

json to_json(const ModelEntry& e) {
  return {{"id", e.id},
          {"hashes", e.hashes},
          {"resolution", e.resolution},
          {"num_layers", e.num_layers},
          {"d_w", e.d_w},
          {"boundaries", e.boundary_ids}};
}

const editing::SemanticBoundary& LoadedModel::boundary(const std::string& id) const {
  return editing::find_by_attribute(boundaries, id);
}

ModelEntry register_model(const fs::path& registry_dir, const std::string& id, const fs::path& generator,
                          const fs::path& encoder, const fs::path& features, const std::optional<fs::path>& boundaries) {
  if (id.empty() || id.find_first_of("/\\. ") != std::string::npos) {
    throw ValidationError("id", "model ids are non-empty and free of '/', '.', spaces");
  }
  const auto g = gan::load_gan(generator);
  const auto e = encoder::load_encoder(encoder, g.generator);
  const std::string gh = archive::file_sha256(generator);
  if (e.generator_hash != gh) throw ValidationError("encoder", "was not trained against this generator");
  const fs::path dir = registry_dir / "models" / id;
  fs::create_directories(dir);
  fs::copy_file(generator, dir / "generator.ckpt", fs::copy_options::overwrite_existing);
  fs::copy_file(encoder, dir / "encoder.ckpt", fs::copy_options::overwrite_existing);
  fs::copy_file(features, dir / "features.ckpt", fs::copy_options::overwrite_existing);
  json manifest = {{"generator", "generator.ckpt"},
                   {"encoder", "encoder.ckpt"},
                   {"features", "features.ckpt"},
                   {"hashes",
                    {{"generator", gh},
                     {"encoder", archive::file_sha256(encoder)},
                     {"features", archive::file_sha256(features)}}}};
  if (boundaries) {
    for (const auto& b : editing::load_boundaries(*boundaries))
      if (!b.model_hash.empty() && b.model_hash != gh) {
        throw ValidationError("boundaries", "were fit on a different generator");
      }
    fs::copy_file(*boundaries, dir / "boundaries.json", fs::copy_options::overwrite_existing);
    manifest["boundaries"] = "boundaries.json";
  }
  archive::write_text(dir / "manifest.json", manifest.dump(1) + "\n");
  Registry r(registry_dir);
  return r.entry(id);
}

Registry::Registry(fs::path dir) : dir_(std::move(dir)) {
  const fs::path models = dir_ / "models";
  if (!fs::exists(models)) return;
  std::vector<fs::path> dirs;
  for (const auto& d : fs::directory_iterator(models))
    if (d.is_directory()) dirs.push_back(d.path());
  std::sort(dirs.begin(), dirs.end());
  for (const auto& d : dirs) {
    const std::string id = d.filename().string();
    try {
      const auto m = json::parse(archive::read_text(d / "manifest.json"));
      ModelEntry e;
      e.id = id;
      e.generator = d / m.at("generator").get<std::string>();
      e.encoder = d / m.at("encoder").get<std::string>();
      e.features = d / m.at("features").get<std::string>();
      if (m.contains("boundaries")) e.boundaries = d / m.at("boundaries").get<std::string>();
      for (const auto& [k, path] : {std::pair{"generator", e.generator}, std::pair{"encoder", e.encoder},
                                    std::pair{"features", e.features}}) {
        const std::string want = m.at("hashes").at(k).get<std::string>();
        const std::string got = archive::file_sha256(path);
        if (want != got) throw ValidationError(k, "hash mismatch for " + path.string());
        e.hashes[k] = got;
      }
      const auto g = gan::load_gan(e.generator);
      const auto enc = encoder::load_encoder(e.encoder, g.generator);
      if (enc.generator_hash != e.hashes["generator"]) {
        throw ValidationError("encoder", "was trained against a different generator");
      }
      e.resolution = g.generator.config().resolution;
      e.num_layers = g.generator.num_layers();
      e.d_w = g.generator.d_w();
      if (e.boundaries)
        for (const auto& b : editing::load_boundaries(*e.boundaries)) e.boundary_ids.push_back(b.attribute);
      entries_.emplace(id, std::move(e));
    } catch (const std::exception& ex) {
      problems_.push_back(id + ": " + ex.what());
    }
  }
}

std::vector<ModelEntry> Registry::list() const {
  std::vector<ModelEntry> out;
  for (const auto& [id, e] : entries_) out.push_back(e);
  return out;
}

const ModelEntry& Registry::entry(const std::string& id) const {
  auto it = entries_.find(id);
  if (it == entries_.end()) throw NotFoundError("unknown model '" + id + "'");
  return it->second;
}

std::shared_ptr<const LoadedModel> Registry::load(const std::string& id) {
  const ModelEntry& e = entry(id);
  std::lock_guard lock(mu_);
  auto& slot = loaded_[id];
  if (!slot) {
    auto m = std::make_shared<LoadedModel>();
    m->entry = e;
    m->generator = gan::load_gan(e.generator).generator;
    m->encoder = encoder::load_encoder(e.encoder, m->generator);
    m->features = features::load_feature_net(e.features);
    if (e.boundaries) m->boundaries = editing::load_boundaries(*e.boundaries);
    slot = std::move(m);
  }
  return slot;
}

// ---- jobs ---------------------------------------------------------------------

std::string to_string(JobState s) {
  switch (s) {
    case JobState::queued: return "queued";
    case JobState::running: return "running";
    case JobState::done: return "done";
    case JobState::failed: return "failed";
  }
  return "failed";
}

JobState job_state_from_string(const std::string& s) {
  if (s == "queued") return JobState::queued;
  if (s == "running") return JobState::running;
  if (s == "done") return JobState::done;
  if (s == "failed") return JobState::failed;
  throw ValidationError("state", "unknown job state '" + s + "'");
}

json to_json(const JobRecord& j) {
  json trace = json::array();
  for (const auto& t : j.loss_trace) trace.push_back(loss_json(t));
  json out = {{"id", j.id},
              {"kind", j.kind},
              {"state", to_string(j.state)},
              {"seq", j.seq},
              {"model", j.model},
              {"params", j.params},
              {"progress", {{"step", j.step}, {"total", j.total}}},
              {"loss_trace", trace}};
  if (j.state == JobState::done) out["result"] = {{"image", "/jobs/" + j.id + "/result.png"}, {"job", j.id}};
  if (j.state == JobState::failed) out["error"] = j.error;
  return out;
}

JobRecord job_from_json(const json& j) {
  JobRecord r;
  r.id = j.at("id").get<std::string>();
  r.kind = j.at("kind").get<std::string>();
  r.state = job_state_from_string(j.at("state").get<std::string>());
  r.seq = j.value("seq", std::uint64_t{0});
  r.model = j.value("model", "");
  r.params = j.value("params", json::object());
  r.step = j.at("progress").value("step", 0);
  r.total = j.at("progress").value("total", 0);
  for (const auto& t : j.value("loss_trace", json::array())) {
    r.loss_trace.push_back({t.value("pixel", 0.0), t.value("perceptual", 0.0), t.value("regularizer", 0.0),
                            t.value("total", 0.0)});
  }
  r.error = j.value("error", "");
  return r;
}

JobStore::JobStore(fs::path dir) : dir_(std::move(dir)) {
  fs::create_directories(dir_ / "jobs");
  fs::create_directories(dir_ / "uploads");
  fs::create_directories(dir_ / "results");
  for (const auto& f : fs::directory_iterator(dir_ / "jobs")) {
    if (f.path().extension() != ".json") continue;
    try {
      JobRecord r = job_from_json(json::parse(archive::read_text(f.path())));
      next_seq_ = std::max(next_seq_, r.seq + 1);
      jobs_.emplace(r.id, std::move(r));
    } catch (const std::exception&) {
      // A torn or foreign file is not a job.
    }
  }
}

std::string JobStore::put_upload(const std::vector<std::uint8_t>& png) {
  const std::string hash = archive::sha256_hex(png);
  const fs::path p = dir_ / "uploads" / (hash + ".png");
  if (!fs::exists(p)) archive::write_file(p, png);
  return hash;
}

std::vector<std::uint8_t> JobStore::get_upload(const std::string& hash) const {
  const fs::path p = dir_ / "uploads" / (hash + ".png");
  if (!fs::exists(p)) throw NotFoundError("upload " + hash + " is missing");
  return archive::read_file(p);
}

void JobStore::persist(const JobRecord& job) const {
  archive::write_text(dir_ / "jobs" / (job.id + ".json"), to_json(job).dump() + "\n");
}

JobRecord JobStore::create(const std::string& kind, const std::string& model, json params) {
  std::lock_guard lock(mu_);
  JobRecord r;
  do {
    r.id = hex_id();
  } while (jobs_.count(r.id));
  r.kind = kind;
  r.model = model;
  r.params = std::move(params);
  r.seq = next_seq_++;
  r.total = r.params.value("steps", 0);
  persist(r);
  jobs_.emplace(r.id, r);
  return r;
}

std::optional<JobRecord> JobStore::get(const std::string& id) const {
  std::lock_guard lock(mu_);
  auto it = jobs_.find(id);
  if (it == jobs_.end()) return std::nullopt;
  return it->second;
}

void JobStore::update(const JobRecord& job, bool persist_now) {
  std::lock_guard lock(mu_);
  jobs_[job.id] = job;
  if (persist_now) persist(job);
}

std::vector<JobRecord> JobStore::recover() {
  std::lock_guard lock(mu_);
  std::vector<JobRecord> out;
  for (auto& [id, j] : jobs_) {
    if (j.state == JobState::running) {
      j.state = JobState::queued;
      j.step = 0;
      j.loss_trace.clear();
      persist(j);
    }
    if (j.state == JobState::queued) out.push_back(j);
  }
  std::sort(out.begin(), out.end(), [](const JobRecord& a, const JobRecord& b) { return a.seq < b.seq; });
  return out;
}

fs::path JobStore::result_path(const std::string& id) const { return dir_ / "results" / (id + ".inv"); }
fs::path JobStore::result_png(const std::string& id) const { return dir_ / "results" / (id + ".png"); }

// ---- service --------------------------------------------------------------------

Service::Service(ServiceConfig config)
    : config_(std::move(config)), registry_(config_.registry_dir), jobs_(config_.registry_dir) {
  if (config_.workers < 1) throw ValidationError("workers", "must be >= 1");
  server_ = std::make_unique<httplib::Server>();
  install_routes();
}

Service::~Service() { stop(); }

int Service::start() {
  if (started_) return config_.port;
  started_ = true;
  for (const auto& j : jobs_.recover()) enqueue(j.id);
  for (int i = 0; i < config_.workers; ++i) workers_.emplace_back([this] { worker_loop(); });
  int port = config_.port;
  if (port == 0) {
    port = server_->bind_to_any_port(config_.host);
  } else if (!server_->bind_to_port(config_.host, port)) {
    port = -1;
  }
  if (port < 0) {
    stop();
    throw std::runtime_error("cannot bind " + config_.host + ":" + std::to_string(config_.port));
  }
  config_.port = port;
  server_thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return port;
}

void Service::run() {
  start();
  if (server_thread_.joinable()) server_thread_.join();
}

void Service::stop() {
  {
    std::lock_guard lock(queue_mu_);
    stopping_ = true;
  }
  queue_cv_.notify_all();
  if (server_) server_->stop();
  if (server_thread_.joinable()) server_thread_.join();
  for (auto& w : workers_)
    if (w.joinable()) w.join();
  workers_.clear();
}

void Service::enqueue(const std::string& id) {
  {
    std::lock_guard lock(queue_mu_);
    queue_.push_back(id);
  }
  queue_cv_.notify_one();
}

void Service::worker_loop() {
  for (;;) {
    std::string id;
    {
      std::unique_lock lock(queue_mu_);
      queue_cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
      if (stopping_) return;
      id = queue_.front();
      queue_.pop_front();
    }
    auto job = jobs_.get(id);
    if (job && job->state == JobState::queued) execute(std::move(*job));
  }
}

void Service::execute(JobRecord job) {
  job.state = JobState::running;
  job.step = 0;
  job.loss_trace.clear();
  jobs_.update(job);
  try {
    auto model = registry_.load(job.model);
    const int res = model->entry.resolution;
    inversion::InversionConfig cfg;
    cfg.lambda_dom = job.params.value("lambda_dom", cfg.lambda_dom);
    cfg.steps = job.params.value("steps", cfg.steps);
    job.total = cfg.steps;
    auto progress = [&](int step, int steps, const inversion::LossTerms& t) {
      job.step = step;
      job.total = steps;
      job.loss_trace.push_back(t);
      jobs_.update(job, step % 10 == 0);
    };
    inversion::InversionResult result;
    ImageTensor rendered;
    if (job.kind == "diffuse") {
      const auto target = decode_upload(jobs_.get_upload(job.params.at("target")), res);
      const auto context = decode_upload(jobs_.get_upload(job.params.at("context")), res);
      auto d = editing::diffuse(target, context, editing::crop_box_from_json(job.params.at("crop_box")), cfg,
                                model->models(), progress);
      result = std::move(d.inversion);
      rendered = std::move(d.image);
    } else {
      const auto img = decode_upload(jobs_.get_upload(job.params.at("image")), res);
      result = inversion::invert(img, cfg, model->models(), progress);
      rendered = inversion::reconstruct(result, model->models());
    }
    inversion::save_result(jobs_.result_path(job.id), result);
    archive::write_file(jobs_.result_png(job.id), image::encode_png(rendered));
    job.state = JobState::done;
    job.step = job.total;
    if (result.diverged) job.params["diagnostic"] = result.diagnostic;
  } catch (const std::exception& ex) {
    job.state = JobState::failed;
    job.error = ex.what();
  }
  jobs_.update(job);
}

json Service::list_models() {
  json out = json::array();
  for (const auto& e : registry_.list()) out.push_back(to_json(e));
  return {{"models", out}};
}

json Service::list_boundaries(const std::string& model) {
  const auto m = registry_.load(model);
  json out = json::array();
  for (const auto& b : m->boundaries) {
    out.push_back({{"id", b.attribute},
                   {"attribute", b.attribute},
                   {"accuracy", b.accuracy},
                   {"code_std", b.code_std},
                   {"per_row", b.per_row}});
  }
  return {{"model", model}, {"alpha_range", {-config_.alpha_limit, config_.alpha_limit}}, {"boundaries", out}};
}

JobRecord Service::submit_invert(const std::vector<std::uint8_t>& image, const std::string& model, double lambda_dom,
                                 int steps) {
  const auto& entry = registry_.entry(model);
  if (!(lambda_dom >= 0) || !std::isfinite(lambda_dom)) throw ValidationError("lambda_dom", "must be finite and >= 0");
  if (steps < 0 || steps > config_.max_steps) {
    throw ValidationError("steps", "must lie in [0, " + std::to_string(config_.max_steps) + "]");
  }
  decode_upload(image, entry.resolution);
  const std::string hash = jobs_.put_upload(image);
  auto job = jobs_.create("invert", model, {{"image", hash}, {"lambda_dom", lambda_dom}, {"steps", steps}});
  enqueue(job.id);
  return job;
}

JobRecord Service::submit_diffuse(const std::vector<std::uint8_t>& target, const std::vector<std::uint8_t>& context,
                                  const std::string& model, const editing::CropBox& box, double lambda_dom, int steps) {
  const auto& entry = registry_.entry(model);
  if (!(lambda_dom >= 0) || !std::isfinite(lambda_dom)) throw ValidationError("lambda_dom", "must be finite and >= 0");
  if (steps < 0 || steps > config_.max_steps) {
    throw ValidationError("steps", "must lie in [0, " + std::to_string(config_.max_steps) + "]");
  }
  decode_upload(target, entry.resolution);
  decode_upload(context, entry.resolution);
  editing::validate(box, entry.resolution, entry.resolution);
  const std::string th = jobs_.put_upload(target);
  const std::string ch = jobs_.put_upload(context);
  auto job = jobs_.create("diffuse", model,
                          {{"target", th},
                           {"context", ch},
                           {"crop_box", editing::to_json(box)},
                           {"lambda_dom", lambda_dom},
                           {"steps", steps}});
  enqueue(job.id);
  return job;
}

json Service::job_json(const std::string& id) {
  auto j = jobs_.get(id);
  if (!j) throw NotFoundError("unknown job '" + id + "'");
  return to_json(*j);
}

std::vector<std::uint8_t> Service::result_png(const std::string& id) {
  auto j = jobs_.get(id);
  if (!j) throw NotFoundError("unknown job '" + id + "'");
  if (j->state != JobState::done) throw HttpError(409, "job " + id + " is " + to_string(j->state));
  return archive::read_file(jobs_.result_png(id));
}

Service::Code Service::code_from(const json& ref, const std::string& model_hint) {
  Code c;
  if (ref.contains("job")) {
    const std::string id = ref.at("job").get<std::string>();
    auto j = jobs_.get(id);
    if (!j) throw NotFoundError("unknown job '" + id + "'");
    if (j->state != JobState::done) throw HttpError(409, "job " + id + " is " + to_string(j->state));
    c.model = registry_.load(j->model);
    auto r = inversion::load_result(jobs_.result_path(id));
    c.noise = r.render_noise(c.model->encoder);
    c.styles = std::move(r.styles);
    return c;
  }
  if (ref.contains("styles")) {
    const std::string model = ref.value("model", model_hint);
    if (model.empty()) throw ValidationError("model", "required with raw styles");
    c.model = registry_.load(model);
    auto v = ref.at("styles").get<std::vector<double>>();
    if (static_cast<int>(v.size()) != c.model->generator.style_dim()) {
      throw ValidationError("styles", "expected " + std::to_string(c.model->generator.style_dim()) + " values");
    }
    for (double x : v)
      if (!std::isfinite(x)) throw ValidationError("styles", "must be finite");
    const int width = static_cast<int>(v.size());
    c.styles = ad::Tensor({1, width}, std::move(v));
    c.noise = c.model->encoder.fixed_noise();
    return c;
  }
  throw ValidationError("code", "give either a job id or model + styles");
}

std::vector<std::uint8_t> Service::render_edit(const json& req) {
  const Code c = code_from(req, req.value("model", ""));
  if (!req.contains("boundary")) throw ValidationError("boundary", "required");
  if (!req.contains("alpha") || !req.at("alpha").is_number()) throw ValidationError("alpha", "required number");
  const double alpha = req.at("alpha").get<double>();
  if (!std::isfinite(alpha) || std::fabs(alpha) > config_.alpha_limit) {
    throw ValidationError("alpha", "must lie in [-" + std::to_string(config_.alpha_limit) + ", " +
                                       std::to_string(config_.alpha_limit) + "]");
  }
  const auto& b = c.model->boundary(req.at("boundary").get<std::string>());
  const int L = c.model->generator.num_layers();
  int begin = 0, end = L;
  if (req.contains("layers")) {
    const auto r = req.at("layers").get<std::vector<int>>();
    if (r.size() != 2) throw ValidationError("layers", "expected [begin, end]");
    begin = r[0];
    end = r[1];
  }
  return image::encode_png(editing::layerwise_edit(c.styles, b, alpha, begin, end, c.model->generator, c.noise));
}

std::vector<std::uint8_t> Service::render_interpolation(const json& req) {
  if (!req.contains("a") || !req.contains("b")) throw ValidationError("code", "need codes a and b");
  const Code a = code_from(req.at("a"), req.value("model", ""));
  const Code b = code_from(req.at("b"), req.value("model", ""));
  if (a.model != b.model) throw ValidationError("b", "codes come from different models");
  if (!req.contains("t") || !req.at("t").is_number()) throw ValidationError("t", "required number");
  return image::encode_png(editing::interpolate(a.styles, b.styles, req.at("t").get<double>(), a.model->generator,
                                                a.noise, b.noise));
}

// ---- HTTP layer -------------------------------------------------------------------

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_png(httplib::Response& res, const std::vector<std::uint8_t>& png) {
  res.status = 200;
  res.set_content(std::string(png.begin(), png.end()), "image/png");
}

template <class F>
void guarded(httplib::Response& res, F&& f) {
  try {
    f();
  } catch (const HttpError& e) {
    send_json(res, e.status, {{"error", e.what()}});
  } catch (const NotFoundError& e) {
    send_json(res, 404, {{"error", e.what()}});
  } catch (const ValidationError& e) {
    send_json(res, 400, {{"error", e.what()}, {"field", e.field()}});
  } catch (const ImageError& e) {
    send_json(res, 400, {{"error", e.what()}});
  } catch (const ad::ShapeError& e) {
    send_json(res, 400, {{"error", e.what()}});
  } catch (const json::exception& e) {
    send_json(res, 400, {{"error", std::string("malformed request: ") + e.what()}});
  } catch (const std::exception& e) {
    send_json(res, 500, {{"error", e.what()}});
  }
}

std::vector<std::uint8_t> file_bytes(const httplib::Request& req, const std::string& key) {
  if (!req.has_file(key)) throw ValidationError(key, "missing upload");
  const auto& c = req.get_file_value(key).content;
  return {c.begin(), c.end()};
}

std::string field(const httplib::Request& req, const std::string& key, const std::string& fallback = "") {
  if (req.has_file(key)) return req.get_file_value(key).content;
  if (req.has_param(key)) return req.get_param_value(key);
  return fallback;
}

double number_field(const httplib::Request& req, const std::string& key, double fallback) {
  const std::string v = field(req, key);
  if (v.empty()) return fallback;
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ValidationError(key, "must be a number");
  }
}

int int_field(const httplib::Request& req, const std::string& key, int fallback) {
  const double d = number_field(req, key, fallback);
  if (d != std::floor(d)) throw ValidationError(key, "must be an integer");
  return static_cast<int>(d);
}

json parse_body(const httplib::Request& req) {
  try {
    return json::parse(req.body);
  } catch (const json::exception& e) {
    throw ValidationError("body", std::string("invalid JSON: ") + e.what());
  }
}

}  // namespace

void Service::install_routes() {
  auto& s = *server_;
  s.Get("/models", [this](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, list_models()); });
  });
  s.Get(R"(/models/([^/]+)/boundaries)", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, list_boundaries(req.matches[1])); });
  });
  s.Post("/invert", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      if (!req.is_multipart_form_data()) throw HttpError(415, "expected multipart/form-data");
      const std::string model = field(req, "model");
      if (model.empty()) throw ValidationError("model", "required");
      registry_.entry(model);
      const auto job = submit_invert(file_bytes(req, "image"), model, number_field(req, "lambda_dom", 2.0),
                                     int_field(req, "steps", 100));
      send_json(res, 202, {{"job", job.id}, {"state", to_string(job.state)}});
    });
  });
  s.Post("/diffuse", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      if (!req.is_multipart_form_data()) throw HttpError(415, "expected multipart/form-data");
      const std::string model = field(req, "model");
      if (model.empty()) throw ValidationError("model", "required");
      registry_.entry(model);
      editing::CropBox box{int_field(req, "x", 0), int_field(req, "y", 0), int_field(req, "width", 0),
                           int_field(req, "height", 0)};
      const auto job = submit_diffuse(file_bytes(req, "target"), file_bytes(req, "context"), model, box,
                                      number_field(req, "lambda_dom", 2.0), int_field(req, "steps", 100));
      send_json(res, 202, {{"job", job.id}, {"state", to_string(job.state)}});
    });
  });
  s.Get(R"(/jobs/([^/]+)/result\.png)", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_png(res, result_png(req.matches[1])); });
  });
  s.Get(R"(/jobs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, job_json(req.matches[1])); });
  });
  s.Post("/edit", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_png(res, render_edit(parse_body(req))); });
  });
  s.Post("/interpolate", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_png(res, render_interpolation(parse_body(req))); });
  });
}

}  // namespace idinvert::service
