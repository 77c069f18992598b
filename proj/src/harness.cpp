#include "idinvert/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "idinvert/archive.hpp"
#include "idinvert/errors.hpp"
#include "idinvert/stats.hpp"

namespace idinvert::harness {

namespace fs = std::filesystem;
using ad::Tensor;
using nlohmann::json;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string short_hash(const json& key) {
  const std::string s = key.dump();
  return archive::sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())).substr(0, 12);
}

void write_sidecar(const fs::path& ckpt, double seconds, const json& key) {
  archive::write_text(fs::path(ckpt.string() + ".json"), json{{"seconds", seconds}, {"key", key}}.dump(1) + "\n");
}

double read_sidecar_seconds(const fs::path& ckpt) {
  const fs::path side(ckpt.string() + ".json");
  if (!fs::exists(side)) return 0.0;
  return json::parse(archive::read_text(side)).value("seconds", 0.0);
}

Tensor slice_row(const Tensor& t, int i) {
  ad::Shape s = t.shape();
  if (s[0] == 1) return t;
  const std::size_t per = t.size() / static_cast<std::size_t>(s[0]);
  s[0] = 1;
  Tensor out(s);
  std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>(per * static_cast<std::size_t>(i)), per, out.data().begin());
  return out;
}

// One image's code and the noise it renders with.
struct Code {
  Tensor styles;
  gan::NoiseStack noise;
};

struct EncoderEval {
  std::vector<Code> codes;
  double mse = 0.0;
  double ssim = 0.0;
};

EncoderEval evaluate_encoder(const gan::Generator& g, const encoder::Encoder& e, std::span<const ImageTensor> images) {
  EncoderEval out;
  constexpr int kChunk = 50;
  std::vector<double> mses, ssims;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    auto chunk = images.subspan(start, std::min<std::size_t>(kChunk, images.size() - start));
    const auto enc = e.encode(image::to_batch(chunk));
    const auto noise = e.noise_for(enc);
    const auto rec = image::unbatch(g.render(enc.styles, noise));
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      Code c;
      c.styles = slice_row(enc.styles, static_cast<int>(i));
      for (const auto& m : noise) c.noise.push_back(slice_row(m, static_cast<int>(i)));
      out.codes.push_back(std::move(c));
      mses.push_back(features::mse(rec[i], chunk[i]));
      ssims.push_back(features::ssim(rec[i], chunk[i]));
    }
  }
  out.mse = stats::mean(mses);
  out.ssim = stats::mean(ssims);
  return out;
}

std::vector<Code> codes_of(const std::vector<inversion::InversionResult>& results, const encoder::Encoder& e) {
  std::vector<Code> out;
  for (const auto& r : results) out.push_back({r.styles, r.render_noise(e)});
  return out;
}

double mean_reconstruction_mse(const std::vector<inversion::InversionResult>& results, std::span<const ImageTensor> images,
                               const inversion::Models& m) {
  std::vector<double> v;
  for (std::size_t i = 0; i < results.size(); ++i) v.push_back(features::mse(inversion::reconstruct(results[i], m), images[i]));
  return stats::mean(v);
}

// Midpoints of random pairs (i != j), drawn from `seed`.
std::vector<ImageTensor> interpolation_set(const gan::Generator& g, const std::vector<Code>& codes, int pairs,
                                           std::uint64_t seed) {
  std::vector<ImageTensor> out;
  if (codes.size() < 2) return out;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, codes.size() - 1);
  for (int k = 0; k < pairs; ++k) {
    const std::size_t a = pick(rng);
    std::size_t b = pick(rng);
    while (b == a) b = pick(rng);
    out.push_back(editing::interpolate(codes[a].styles, codes[b].styles, 0.5, g, codes[a].noise, codes[b].noise));
  }
  return out;
}

void add_interpolation_metrics(Cell& cell, Pipeline& p, const std::vector<Code>& codes, const ExperimentSpec& spec) {
  try {
    const auto mids = interpolation_set(p.gan().generator, codes, spec.n_pairs, spec.seed ^ 0x1A7E);
    cell.metrics["interp_fid"] = features::fid_proxy(p.features(), mids, p.reference_images());
    features::SwdConfig sc;
    sc.seed = spec.seed;
    cell.metrics["interp_swd"] = features::swd(mids, p.reference_images(), sc);
  } catch (const std::exception& ex) {
    cell.failed = true;
    cell.error = ex.what();
  }
}

double metric(const Cell& c, const std::string& name) {
  auto it = c.metrics.find(name);
  return it == c.metrics.end() ? std::nan("") : it->second;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

Verdict check(const std::string& name, bool pass, const std::string& detail) { return {name, pass, detail}; }

const std::vector<std::string> kEditAttributes{"size", "pos_x", "pos_y"};

std::vector<std::string> boundary_attributes() {
  return {std::begin(editing::kBoundaryAttributes), std::end(editing::kBoundaryAttributes)};
}

inversion::InversionConfig in_domain_config(const ExperimentSpec& spec) {
  inversion::InversionConfig c = spec.inversion;
  c.init = inversion::InitMode::encoder;
  c.mask.reset();
  return c;
}

inversion::InversionConfig baseline_config(const ExperimentSpec& spec) {
  inversion::InversionConfig c = spec.inversion;
  c.lambda_dom = 0.0;
  c.init = inversion::InitMode::mean_w;
  c.mask.reset();
  return c;
}

}  // namespace

// ---- pipeline ----------------------------------------------------------------

PipelineConfig default_pipeline_config() {
  PipelineConfig c;
  c.train_data.n_images = 2000;
  c.train_data.seed = 1;
  c.test_data.n_images = 200;
  c.test_data.seed = 2;
  c.reference_data.n_images = 500;
  c.reference_data.seed = 3;
  // Sized so the GAN plus the default encoder train in well under an hour on one core.
  c.gan.steps = 3000;
  c.encoder.steps = 1200;
  return c;
}

PipelineConfig pipeline_config_from_json(const json& j) {
  PipelineConfig c = default_pipeline_config();
  if (j.contains("work_dir")) c.work_dir = j.at("work_dir").get<std::string>();
  auto merge = [&](const char* key, const json& defaults) {
    json v = defaults;
    if (j.contains(key)) v.merge_patch(j.at(key));
    return v;
  };
  c.train_data = data::dataset_config_from_json(merge("train_data", data::to_json(c.train_data)));
  c.test_data = data::dataset_config_from_json(merge("test_data", data::to_json(c.test_data)));
  c.reference_data = data::dataset_config_from_json(merge("reference_data", data::to_json(c.reference_data)));
  c.gan = gan::gan_config_from_json(merge("gan", gan::to_json(c.gan)));
  c.features = features::feature_config_from_json(merge("features", features::to_json(c.features)));
  c.encoder = encoder::encoder_config_from_json(merge("encoder", encoder::to_json(c.encoder)));
  c.boundary_samples = j.value("boundary_samples", c.boundary_samples);
  c.boundary_seed = j.value("boundary_seed", c.boundary_seed);
  if (c.boundary_samples < 10) throw ValidationError("boundary_samples", "need at least 10 samples");
  return c;
}

json to_json(const PipelineConfig& c) {
  return {{"work_dir", c.work_dir.string()},
          {"train_data", data::to_json(c.train_data)},
          {"test_data", data::to_json(c.test_data)},
          {"reference_data", data::to_json(c.reference_data)},
          {"gan", gan::to_json(c.gan)},
          {"features", features::to_json(c.features)},
          {"encoder", encoder::to_json(c.encoder)},
          {"boundary_samples", c.boundary_samples},
          {"boundary_seed", c.boundary_seed}};
}

struct Pipeline::State {
  std::optional<std::vector<data::Sample>> train, test;
  std::optional<std::vector<ImageTensor>> test_images, reference;
  std::unique_ptr<gan::GanModel> gan;
  fs::path gan_path;
  std::string gan_hash;
  std::unique_ptr<features::FeatureNet> features;
  std::string features_hash;
  std::map<std::string, std::unique_ptr<encoder::Encoder>> encoders;
  std::unique_ptr<encoder::Encoder> conventional;
  std::optional<std::vector<editing::SemanticBoundary>> boundaries;
  fs::path boundaries_path;
  std::map<std::string, std::vector<inversion::InversionResult>> inversions;
  json timings = json::object();
};

Pipeline::Pipeline(PipelineConfig config, LogFn log)
    : config_(std::move(config)), log_(std::move(log)), state_(std::make_unique<State>()) {
  gan::validate(config_.gan);
  features::validate(config_.features);
  encoder::validate(config_.encoder, gan::num_layers(config_.gan.resolution));
  fs::create_directories(config_.work_dir);
}

Pipeline::~Pipeline() = default;

void Pipeline::log(const std::string& msg) const {
  if (log_) log_(msg);
}

fs::path Pipeline::artifact(const std::string& kind, const json& key) const {
  return config_.work_dir / (kind + "-" + short_hash(key) + (kind == "boundaries" ? ".json" : ".ckpt"));
}

const std::vector<data::Sample>& Pipeline::train_set() {
  if (!state_->train) state_->train = data::generate_dataset(config_.train_data);
  return *state_->train;
}

const std::vector<data::Sample>& Pipeline::test_set() {
  if (!state_->test) state_->test = data::generate_dataset(config_.test_data);
  return *state_->test;
}

const std::vector<ImageTensor>& Pipeline::test_images() {
  if (!state_->test_images) state_->test_images = data::images_of(test_set());
  return *state_->test_images;
}

const std::vector<ImageTensor>& Pipeline::reference_images() {
  if (!state_->reference) state_->reference = data::images_of(data::generate_dataset(config_.reference_data));
  return *state_->reference;
}

const gan::GanModel& Pipeline::gan() {
  if (state_->gan) return *state_->gan;
  const json key = {{"gan", gan::to_json(config_.gan)}, {"data", data::to_json(config_.train_data)}};
  const fs::path path = artifact("gan", key);
  if (!fs::exists(path)) {
    log("training GAN -> " + path.string());
    const auto t0 = std::chrono::steady_clock::now();
    const auto images = data::images_of(train_set());
    auto model = gan::train_gan(images, config_.gan, [&](const gan::GanLogEntry& e) {
      if (e.step % 250 == 0) log("  gan step " + std::to_string(e.step) + " d=" + fmt(e.d_loss) + " g=" + fmt(e.g_loss));
    });
    const double secs = seconds_since(t0);
    gan::save_gan(path, model);
    gan::write_gan_log(fs::path(path.string() + ".log.csv"), model.log);
    write_sidecar(path, secs, key);
  }
  state_->gan = std::make_unique<gan::GanModel>(gan::load_gan(path));
  state_->gan_path = path;
  state_->gan_hash = archive::file_sha256(path);
  state_->timings["gan"] = read_sidecar_seconds(path);
  return *state_->gan;
}

const fs::path& Pipeline::generator_path() {
  gan();
  return state_->gan_path;
}

const std::string& Pipeline::generator_hash() {
  gan();
  return state_->gan_hash;
}

const features::FeatureNet& Pipeline::features() {
  if (state_->features) return *state_->features;
  const json key = {{"features", features::to_json(config_.features)}, {"data", data::to_json(config_.train_data)}};
  const fs::path path = artifact("features", key);
  if (!fs::exists(path)) {
    log("training feature net -> " + path.string());
    const auto t0 = std::chrono::steady_clock::now();
    features::FeatureTrainReport rep;
    auto net = features::train_feature_net(train_set(), config_.features, &rep);
    const double secs = seconds_since(t0);
    features::save_feature_net(path, net);
    write_sidecar(path, secs, key);
    log("  feature net val size error " + fmt(rep.val_size_rel_error));
  }
  state_->features = std::make_unique<features::FeatureNet>(features::load_feature_net(path));
  state_->features_hash = archive::file_sha256(path);
  state_->timings["features"] = read_sidecar_seconds(path);
  return *state_->features;
}

fs::path Pipeline::encoder_path(const encoder::EncoderConfig& config) {
  const auto& g = gan();
  features();
  encoder::validate(config, g.generator.num_layers());
  const json key = {{"encoder", encoder::to_json(config)},
                    {"generator", generator_hash()},
                    {"features", state_->features_hash},
                    {"data", data::to_json(config_.train_data)}};
  const fs::path path = artifact("encoder", key);
  if (!fs::exists(path)) {
    log("training encoder -> " + path.string());
    const auto t0 = std::chrono::steady_clock::now();
    const auto images = data::images_of(train_set());
    auto r = encoder::train_domain_guided_encoder(
        g.generator, g.discriminator, features(), images, config, generator_hash(),
        [&](const encoder::EncoderLogEntry& e) {
          if (e.step % 250 == 0) log("  encoder step " + std::to_string(e.step) + " pixel=" + fmt(e.pixel));
        },
        fs::path(path.string() + ".last_good"));
    const double secs = seconds_since(t0);
    encoder::save_encoder(path, r.encoder);
    encoder::write_encoder_log(fs::path(path.string() + ".log.csv"), r.log);
    write_sidecar(path, secs, key);
  }
  return path;
}

const encoder::Encoder& Pipeline::encoder_variant(const encoder::EncoderConfig& config) {
  const fs::path path = encoder_path(config);
  auto& slot = state_->encoders[path.string()];
  if (!slot) {
    slot = std::make_unique<encoder::Encoder>(encoder::load_encoder(path, gan().generator));
    if (slot->generator_hash != generator_hash()) {
      throw ValidationError("checkpoints", path.string() + " was trained against a different generator");
    }
    state_->timings["encoder:" + path.filename().string()] = read_sidecar_seconds(path);
  }
  return *slot;
}

const encoder::Encoder& Pipeline::encoder() {
  const fs::path path = encoder_path(config_.encoder);
  state_->timings["encoder"] = read_sidecar_seconds(path);
  return encoder_variant(config_.encoder);
}

std::vector<encoder::EncoderLogEntry> Pipeline::encoder_log(const encoder::EncoderConfig& config) {
  const fs::path path(encoder_path(config).string() + ".log.csv");
  std::vector<encoder::EncoderLogEntry> out;
  const auto rows = read_csv(path);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.size() < 7) continue;
    out.push_back({std::stoi(r[0]), std::stod(r[1]), std::stod(r[2]), std::stod(r[3]), std::stod(r[4]),
                   std::stod(r[5]), std::stod(r[6])});
  }
  return out;
}

const encoder::Encoder& Pipeline::conventional_encoder() {
  if (state_->conventional) return *state_->conventional;
  const auto& g = gan();
  const json key = {{"conventional", encoder::to_json(config_.encoder)}, {"generator", generator_hash()}};
  const fs::path path = artifact("conventional", key);
  if (!fs::exists(path)) {
    log("training conventional encoder -> " + path.string());
    const auto t0 = std::chrono::steady_clock::now();
    auto r = encoder::train_conventional_encoder(g.generator, config_.encoder, generator_hash());
    const double secs = seconds_since(t0);
    encoder::save_encoder(path, r.encoder);
    encoder::write_encoder_log(fs::path(path.string() + ".log.csv"), r.log);
    write_sidecar(path, secs, key);
  }
  state_->conventional = std::make_unique<encoder::Encoder>(encoder::load_encoder(path, g.generator));
  state_->timings["conventional"] = read_sidecar_seconds(path);
  return *state_->conventional;
}

fs::path Pipeline::boundaries_path() {
  boundaries();
  return state_->boundaries_path;
}

const std::vector<editing::SemanticBoundary>& Pipeline::boundaries() {
  if (state_->boundaries) return *state_->boundaries;
  const auto& g = gan().generator;
  const json key = {{"generator", generator_hash()},
                    {"samples", config_.boundary_samples},
                    {"seed", config_.boundary_seed}};
  const fs::path path = artifact("boundaries", key);
  if (!fs::exists(path)) {
    log("fitting boundaries -> " + path.string());
    const auto noise = editing::boundary_noise(g, config_.boundary_seed);
    const auto samples = editing::sample_labeled_codes(g, noise, config_.boundary_samples, config_.boundary_seed);
    const auto attrs = boundary_attributes();
    const auto bs = editing::fit_boundaries(samples, attrs, g.num_layers(), generator_hash());
    editing::save_boundaries(path, bs);
  }
  state_->boundaries = editing::load_boundaries(path);
  state_->boundaries_path = path;
  return *state_->boundaries;
}

inversion::Models Pipeline::models(const encoder::Encoder& e) { return {gan().generator, e, features()}; }

const std::vector<inversion::InversionResult>& Pipeline::inversions(const inversion::InversionConfig& config, int n,
                                                                    const encoder::Encoder& e) {
  const auto& images = test_images();
  if (n < 1 || n > static_cast<int>(images.size())) {
    throw ValidationError("n_images", "must lie in [1, " + std::to_string(images.size()) + "]");
  }
  const double lv = config.lambda_vgg.value_or(e.lambda_vgg_effective);
  std::ostringstream key;
  key << inversion::to_json(config, lv).dump() << '|' << static_cast<const void*>(&e) << '|' << n;
  auto it = state_->inversions.find(key.str());
  if (it != state_->inversions.end()) return it->second;
  auto m = models(e);
  std::vector<inversion::InversionResult> out;
  constexpr int kChunk = 20;
  const auto t0 = std::chrono::steady_clock::now();
  for (int start = 0; start < n; start += kChunk) {
    auto chunk = std::span(images).subspan(static_cast<std::size_t>(start),
                                           static_cast<std::size_t>(std::min(kChunk, n - start)));
    auto rs = inversion::invert_batch(chunk, config, m);
    out.insert(out.end(), std::make_move_iterator(rs.begin()), std::make_move_iterator(rs.end()));
  }
  log("  inverted " + std::to_string(n) + " images (lambda_dom=" + fmt(config.lambda_dom) + ", init " +
      inversion::to_string(config.init) + ") in " + fmt(seconds_since(t0)) + " s");
  return state_->inversions.emplace(key.str(), std::move(out)).first->second;
}

json Pipeline::timings() { return state_->timings; }

// ---- specs and reports -------------------------------------------------------------------

ExperimentSpec experiment_spec_from_json(const json& j) {
  ExperimentSpec s;
  s.experiment = j.value("experiment", "");
  if (j.contains("pipeline")) s.pipeline = pipeline_config_from_json(j.at("pipeline"));
  if (j.contains("grid")) {
    s.grid = j.at("grid").get<std::vector<double>>();
    s.grid_given = true;
  }
  s.n_images = j.value("n_images", s.n_images);
  s.n_test = j.value("n_test", s.n_test);
  s.n_pairs = j.value("n_pairs", s.n_pairs);
  s.n_diffusion_pairs = j.value("n_diffusion_pairs", s.n_diffusion_pairs);
  if (j.contains("crop_factors")) s.crop_factors = j.at("crop_factors").get<std::vector<double>>();
  if (j.contains("alphas")) s.alphas = j.at("alphas").get<std::vector<double>>();
  s.manipulation_alpha = j.value("manipulation_alpha", s.manipulation_alpha);
  if (j.contains("inversion")) s.inversion = inversion::inversion_config_from_json(j.at("inversion"));
  if (j.contains("boundaries")) s.boundaries_path = j.at("boundaries").get<std::string>();
  if (j.contains("w_checkpoint")) s.w_checkpoint = j.at("w_checkpoint").get<std::string>();
  if (j.contains("wplus_checkpoint")) s.wplus_checkpoint = j.at("wplus_checkpoint").get<std::string>();
  if (j.contains("seed_with_offset")) s.seed_with_offset = j.at("seed_with_offset").get<std::uint64_t>();
  if (j.contains("seed_without_offset")) s.seed_without_offset = j.at("seed_without_offset").get<std::uint64_t>();
  s.seed = j.value("seed", s.seed);
  return s;
}

void validate(const ExperimentSpec& s, int num_layers) {
  if (std::find(std::begin(kExperiments), std::end(kExperiments), s.experiment) == std::end(kExperiments)) {
    throw ValidationError("experiment", "unknown experiment '" + s.experiment + "'");
  }
  if (s.grid_given && s.grid.empty()) throw ValidationError("grid", "must not be empty");
  if (s.experiment == "noise_sweep") {
    for (double b : s.grid)
      if (b < 0 || b > num_layers / 2 || b != std::floor(b)) {
        throw ValidationError("grid", "noise blocks must be integers in [0, " + std::to_string(num_layers / 2) + "]");
      }
  }
  if (s.experiment == "lambda_sweep") {
    for (double l : s.grid)
      if (l < 0 || !std::isfinite(l)) throw ValidationError("grid", "lambda_dom values must be finite and >= 0");
  }
  if (s.n_images < 1) throw ValidationError("n_images", "must be >= 1");
  if (s.n_test < 2) throw ValidationError("n_test", "must be >= 2");
  if (s.n_pairs < 1) throw ValidationError("n_pairs", "must be >= 1");
  if (s.alphas.size() < 2) throw ValidationError("alphas", "need at least two values");
  if (s.crop_factors.empty()) throw ValidationError("crop_factors", "must not be empty");
  if (s.seed_with_offset && s.seed_without_offset && *s.seed_with_offset != *s.seed_without_offset) {
    throw ValidationError("seed", "both ablation arms must use the same seed");
  }
  if (s.w_checkpoint || s.wplus_checkpoint) {
    if (!s.w_checkpoint || !s.wplus_checkpoint) {
      throw ValidationError("checkpoints", "give both w_checkpoint and wplus_checkpoint or neither");
    }
    for (const auto& p : {*s.w_checkpoint, *s.wplus_checkpoint})
      if (!fs::exists(p)) throw NotFoundError("checkpoint not found: " + p.string());
    if (fs::equivalent(*s.w_checkpoint, *s.wplus_checkpoint) ||
        archive::file_sha256(*s.w_checkpoint) == archive::file_sha256(*s.wplus_checkpoint)) {
      throw ValidationError("checkpoints", "both arms point at the same checkpoint");
    }
  }
  if (s.boundaries_path && !fs::exists(*s.boundaries_path)) {
    throw NotFoundError("boundary file not found: " + s.boundaries_path->string());
  }
}

bool ExperimentReport::passed() const {
  for (const auto& c : cells)
    if (c.failed) return false;
  return std::all_of(verdicts.begin(), verdicts.end(), [](const Verdict& v) { return v.pass; });
}

const Verdict& ExperimentReport::verdict(const std::string& name) const {
  for (const auto& v : verdicts)
    if (v.name == name) return v;
  throw NotFoundError("no verdict named " + name);
}

const Cell& ExperimentReport::cell(const std::string& label) const {
  for (const auto& c : cells)
    if (c.label == label) return c;
  throw NotFoundError("no cell labeled " + label);
}

void ExperimentReport::merge(const ExperimentReport& other, const std::string& prefix) {
  for (auto c : other.cells) {
    c.label = prefix + "/" + c.label;
    cells.push_back(std::move(c));
  }
  for (auto v : other.verdicts) {
    v.name = prefix + "/" + v.name;
    verdicts.push_back(std::move(v));
  }
  for (auto c : other.curves) {
    c.name = prefix + "_" + c.name;
    curves.push_back(std::move(c));
  }
  statistics[prefix] = other.statistics;
}

// ---- experiments ------------------------------------------------------------------------

double edit_monotonicity(const std::vector<inversion::InversionResult>& codes, const editing::SemanticBoundary& b,
                         const std::string& attribute, std::span<const double> alphas, const inversion::Models& m) {
  std::vector<double> scores;
  for (const auto& r : codes) {
    const auto noise = r.render_noise(m.encoder);
    std::vector<double> values;
    bool ok = true;
    for (double a : alphas) {
      try {
        values.push_back(data::measure_attributes(editing::manipulate(r.styles, b, a, m.generator, noise)).get(attribute));
      } catch (const data::NoShapeError&) {
        ok = false;
        break;
      }
    }
    scores.push_back(ok ? stats::spearman(alphas, values) : 0.0);
  }
  return stats::mean(scores);
}

ExperimentReport run_lambda_sweep(const ExperimentSpec& spec, Pipeline& p) {
  ExperimentReport rep;
  rep.experiment = "lambda_sweep";
  const std::vector<double> grid = spec.grid_given ? spec.grid : std::vector<double>{0, 0.5, 2, 10, 40};
  if (grid.empty()) throw ValidationError("grid", "must not be empty");
  const auto& e = p.encoder();
  const auto m = p.models(e);
  const auto& bs = p.boundaries();
  const auto images = std::span(p.test_images()).subspan(0, static_cast<std::size_t>(spec.n_images));
  std::vector<double> mses, regs, edits;
  for (double lambda : grid) {
    Cell cell;
    cell.label = "lambda_dom=" + fmt(lambda);
    cell.metrics["lambda_dom"] = lambda;
    auto cfg = in_domain_config(spec);
    cfg.lambda_dom = lambda;
    const auto& rs = p.inversions(cfg, spec.n_images, e);
    cell.metrics["mse"] = mean_reconstruction_mse(rs, images, m);
    std::vector<double> reg;
    for (const auto& r : rs) reg.push_back(r.loss_trace[static_cast<std::size_t>(r.best_step)].regularizer);
    cell.metrics["regularizer"] = stats::mean(reg);
    std::vector<double> per_attr;
    for (const auto& attr : kEditAttributes) {
      const double s = edit_monotonicity(rs, editing::find_by_attribute(bs, attr), attr, spec.alphas, m);
      cell.metrics["edit_" + attr] = s;
      per_attr.push_back(s);
    }
    cell.metrics["edit_success"] = stats::mean(per_attr);
    try {
      std::vector<ImageTensor> edited;
      for (const auto& r : rs)
        for (const auto& attr : kEditAttributes)
          for (double a : {-spec.manipulation_alpha, spec.manipulation_alpha})
            edited.push_back(editing::manipulate(r.styles, editing::find_by_attribute(bs, attr), a, m.generator,
                                                 r.render_noise(e)));
      cell.metrics["manip_fid"] = features::fid_proxy(p.features(), edited, p.reference_images());
    } catch (const std::exception& ex) {
      cell.failed = true;
      cell.error = std::string("manip_fid: ") + ex.what();
    }
    mses.push_back(cell.metrics["mse"]);
    regs.push_back(cell.metrics["regularizer"]);
    edits.push_back(cell.metrics["edit_success"]);
    rep.cells.push_back(std::move(cell));
  }
  const double rho_mse = stats::spearman(grid, mses);
  const double rho_reg = stats::spearman(grid, regs);
  const double rho_edit = stats::spearman(grid, edits);
  int compliant = 0;
  for (std::size_t i = 0; i < edits.size(); ++i) compliant += i == 0 || edits[i] >= edits[i - 1];
  const int needed = std::max(1, static_cast<int>(grid.size()) - 1);
  rep.statistics = {{"spearman_lambda_mse", rho_mse},
                    {"spearman_lambda_regularizer", rho_reg},
                    {"spearman_lambda_edit_success", rho_edit},
                    {"edit_success_compliant_points", compliant},
                    {"grid_points", grid.size()}};
  rep.verdicts.push_back(check("mse_increases_with_lambda", rho_mse >= 0.8, "spearman " + fmt(rho_mse) + " >= 0.8"));
  rep.verdicts.push_back(check("edit_success_non_decreasing", compliant >= needed,
                               std::to_string(compliant) + " of " + std::to_string(grid.size()) +
                                   " grid points non-decreasing (need " + std::to_string(needed) + ")"));
  rep.verdicts.push_back(
      check("regularizer_decreases_with_lambda", rho_reg <= -0.8, "spearman " + fmt(rho_reg) + " <= -0.8"));
  Curve c{"tradeoff", "lambda_dom index", "value", {}};
  std::vector<std::pair<double, double>> a, b;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    a.emplace_back(static_cast<double>(i), mses[i]);
    b.emplace_back(static_cast<double>(i), edits[i]);
  }
  c.series = {{"mse", a}, {"edit_success", b}};
  rep.curves.push_back(std::move(c));
  return rep;
}

namespace {

Cell encoder_cell(const std::string& label, Pipeline& p, const encoder::Encoder& e, const ExperimentSpec& spec) {
  Cell cell;
  cell.label = label;
  const auto images = std::span(p.test_images()).subspan(0, static_cast<std::size_t>(spec.n_test));
  const auto ev = evaluate_encoder(p.gan().generator, e, images);
  cell.metrics["mse"] = ev.mse;
  cell.metrics["ssim"] = ev.ssim;
  add_interpolation_metrics(cell, p, ev.codes, spec);
  return cell;
}

}  // namespace

ExperimentReport run_noise_sweep(const ExperimentSpec& spec, Pipeline& p) {
  ExperimentReport rep;
  rep.experiment = "noise_sweep";
  const int blocks = p.gan().generator.num_layers() / 2;
  std::vector<double> grid = spec.grid;
  if (!spec.grid_given)
    for (int b = 0; b <= blocks; ++b) grid.push_back(b);
  if (grid.empty()) throw ValidationError("grid", "must not be empty");
  for (double b : grid)
    if (b < 0 || b > blocks || b != std::floor(b)) {
      throw ValidationError("grid", "noise blocks must be integers in [0, " + std::to_string(blocks) + "]");
    }
  std::vector<double> mses, fids;
  for (double b : grid) {
    auto cfg = p.config().encoder;
    cfg.noise_blocks = static_cast<int>(b);
    Cell cell = encoder_cell("B=" + std::to_string(static_cast<int>(b)), p, p.encoder_variant(cfg), spec);
    cell.metrics["noise_blocks"] = b;
    mses.push_back(metric(cell, "mse"));
    fids.push_back(metric(cell, "interp_fid"));
    rep.cells.push_back(std::move(cell));
  }
  bool non_increasing = true;
  for (std::size_t i = 1; i < mses.size(); ++i) non_increasing = non_increasing && mses[i] <= mses[i - 1];
  bool fid_non_decreasing = true;
  for (std::size_t i = 1; i < fids.size(); ++i) fid_non_decreasing = fid_non_decreasing && fids[i] >= fids[i - 1];
  const auto lo = std::min_element(grid.begin(), grid.end()) - grid.begin();
  const auto hi = std::max_element(grid.begin(), grid.end()) - grid.begin();
  const double ratio = mses[static_cast<std::size_t>(hi)] / mses[static_cast<std::size_t>(lo)];
  rep.statistics = {{"mse_ratio_max_over_min_blocks", ratio},
                    {"spearman_blocks_mse", stats::spearman(grid, mses)},
                    {"spearman_blocks_fid", stats::spearman(grid, fids)}};
  rep.verdicts.push_back(check("mse_non_increasing", non_increasing, "reconstruction MSE over B"));
  rep.verdicts.push_back(check("mse_ratio", ratio <= 0.1, "MSE(B=max)/MSE(B=min) = " + fmt(ratio) + " <= 0.1"));
  rep.verdicts.push_back(check("interp_fid_endpoints",
                               fids[static_cast<std::size_t>(hi)] >= fids[static_cast<std::size_t>(lo)],
                               "FID(B=max) " + fmt(fids[static_cast<std::size_t>(hi)]) + " >= FID(B=min) " +
                                   fmt(fids[static_cast<std::size_t>(lo)])));
  rep.verdicts.push_back(check("interp_fid_non_decreasing", fid_non_decreasing, "interpolation FID over B"));
  return rep;
}

ExperimentReport run_wspace_compare(const ExperimentSpec& spec, Pipeline& p) {
  ExperimentReport rep;
  rep.experiment = "wspace_compare";
  const encoder::Encoder* w = nullptr;
  const encoder::Encoder* wplus = nullptr;
  std::unique_ptr<encoder::Encoder> w_own, wplus_own;
  if (spec.w_checkpoint) {
    validate(spec, p.gan().generator.num_layers());
    w_own = std::make_unique<encoder::Encoder>(encoder::load_encoder(*spec.w_checkpoint, p.gan().generator));
    wplus_own = std::make_unique<encoder::Encoder>(encoder::load_encoder(*spec.wplus_checkpoint, p.gan().generator));
    for (const auto* e : {w_own.get(), wplus_own.get()})
      if (e->generator_hash != p.generator_hash()) {
        throw ValidationError("checkpoints", "encoder was trained against a different generator");
      }
    if (!w_own->config().w_mode || wplus_own->config().w_mode) {
      throw ValidationError("checkpoints", "w_checkpoint must be a W-mode encoder and wplus_checkpoint a W+ one");
    }
    w = w_own.get();
    wplus = wplus_own.get();
  } else {
    auto cw = p.config().encoder;
    cw.w_mode = true;
    auto cp = p.config().encoder;
    cp.w_mode = false;
    if (p.encoder_path(cw) == p.encoder_path(cp)) throw ValidationError("checkpoints", "both arms are identical");
    w = &p.encoder_variant(cw);
    wplus = &p.encoder_variant(cp);
  }
  rep.cells.push_back(encoder_cell("W", p, *w, spec));
  rep.cells.push_back(encoder_cell("W+", p, *wplus, spec));
  const double mw = metric(rep.cells[0], "mse"), mp = metric(rep.cells[1], "mse");
  const double fw = metric(rep.cells[0], "interp_fid"), fp = metric(rep.cells[1], "interp_fid");
  rep.statistics = {{"note", "W is a broadcast constraint on one generator, not a retrained generator"}};
  rep.verdicts.push_back(check("wplus_mse_le_w", mp <= mw, "MSE W+ " + fmt(mp) + " <= W " + fmt(mw)));
  rep.verdicts.push_back(check("w_fid_le_wplus", fw <= fp, "interp FID W " + fmt(fw) + " <= W+ " + fmt(fp)));
  return rep;
}

ExperimentReport run_mean_offset_ablation(const ExperimentSpec& spec, Pipeline& p) {
  ExperimentReport rep;
  rep.experiment = "mean_offset_ablation";
  validate(spec, p.gan().generator.num_layers());
  const std::uint64_t seed = spec.seed_with_offset.value_or(spec.seed_without_offset.value_or(p.config().encoder.seed));
  auto on = p.config().encoder;
  on.seed = seed;
  on.use_mean_offset = true;
  auto off = on;
  off.use_mean_offset = false;
  Curve curve{"loss", "step", "reconstruction loss (pixel + perceptual)", {}};
  for (const auto& [label, cfg] : {std::pair{std::string("with_offset"), on}, std::pair{std::string("without_offset"), off}}) {
    const auto& e = p.encoder_variant(cfg);
    Cell cell = encoder_cell(label, p, e, spec);
    cell.metrics["first_epoch_loss"] = e.train_summary.value("first_epoch_mean_loss", std::nan(""));
    std::vector<std::pair<double, double>> pts;
    for (const auto& entry : p.encoder_log(cfg)) pts.emplace_back(entry.step, entry.pixel + entry.perceptual);
    curve.series.emplace_back(label, std::move(pts));
    rep.cells.push_back(std::move(cell));
  }
  rep.curves.push_back(std::move(curve));
  const double fon = metric(rep.cells[0], "first_epoch_loss"), foff = metric(rep.cells[1], "first_epoch_loss");
  const double mon = metric(rep.cells[0], "mse"), moff = metric(rep.cells[1], "mse");
  rep.statistics = {{"seed", seed}};
  rep.verdicts.push_back(
      check("first_epoch_loss_lower_with_offset", fon < foff, "with " + fmt(fon) + " < without " + fmt(foff)));
  rep.verdicts.push_back(check("mse_lower_with_offset", mon < moff, "with " + fmt(mon) + " < without " + fmt(moff)));
  return rep;
}

ExperimentReport run_attribute_pr(const ExperimentSpec& spec, Pipeline& p) {
  ExperimentReport rep;
  rep.experiment = "attribute_pr";
  std::vector<editing::SemanticBoundary> bs;
  if (spec.boundaries_path) {
    bs = editing::load_boundaries(*spec.boundaries_path);
  } else {
    bs = p.boundaries();
  }
  for (const auto& b : bs)
    if (!b.model_hash.empty() && b.model_hash != p.generator_hash()) {
      throw ValidationError("boundaries", "boundary " + b.attribute + " was fit on a different generator");
    }
  const auto& e = p.encoder();
  const auto& ours = p.inversions(in_domain_config(spec), spec.n_test, e);
  const auto& base = p.inversions(baseline_config(spec), spec.n_test, e);
  const auto& images = p.test_images();
  std::vector<int> usable;
  std::vector<data::AttributeVector> attrs;
  for (int i = 0; i < spec.n_test; ++i) {
    try {
      attrs.push_back(data::measure_attributes(images[static_cast<std::size_t>(i)]));
      usable.push_back(i);
    } catch (const data::NoShapeError&) {
    }
  }
  for (const auto& b : bs) {
    std::vector<int> labels;
    std::vector<double> s_ours, s_base;
    for (std::size_t k = 0; k < usable.size(); ++k) {
      const auto i = static_cast<std::size_t>(usable[k]);
      labels.push_back(editing::attribute_label(attrs[k], b.attribute, b.threshold) ? 1 : 0);
      s_ours.push_back(b.decision(ours[i].styles));
      s_base.push_back(b.decision(base[i].styles));
    }
    Cell cell;
    cell.label = b.attribute;
    cell.metrics["ap_in_domain"] = stats::average_precision(s_ours, labels);
    cell.metrics["ap_baseline"] = stats::average_precision(s_base, labels);
    cell.metrics["boundary_accuracy"] = b.accuracy;
    cell.metrics["positives"] = std::count(labels.begin(), labels.end(), 1);
    Curve curve{"pr_" + b.attribute, "recall", "precision", {}};
    for (const auto& [name, sc] : {std::pair{"in_domain", &s_ours}, std::pair{"baseline", &s_base}}) {
      std::vector<std::pair<double, double>> pts;
      for (const auto& pt : stats::precision_recall(*sc, labels)) pts.emplace_back(pt.recall, pt.precision);
      curve.series.emplace_back(name, std::move(pts));
    }
    rep.curves.push_back(std::move(curve));
    rep.verdicts.push_back(check("ap_" + b.attribute, cell.metrics["ap_in_domain"] >= cell.metrics["ap_baseline"],
                                 "in-domain AP " + fmt(cell.metrics["ap_in_domain"]) + " >= baseline AP " +
                                     fmt(cell.metrics["ap_baseline"])));
    rep.cells.push_back(std::move(cell));
  }
  rep.statistics = {{"images", usable.size()}, {"baseline", "lambda_dom=0, init mean_w"}};
  return rep;
}

ExperimentReport run_reconstruction(const ExperimentSpec& spec, Pipeline& p) {
  ExperimentReport rep;
  rep.experiment = "reconstruction";
  const auto& e = p.encoder();
  const auto m = p.models(e);
  const auto images = std::span(p.test_images()).subspan(0, static_cast<std::size_t>(spec.n_test));
  const auto enc = evaluate_encoder(m.generator, e, images);
  const auto& inv = p.inversions(in_domain_config(spec), spec.n_test, e);
  std::vector<double> ssims;
  for (std::size_t i = 0; i < inv.size(); ++i) ssims.push_back(features::ssim(inversion::reconstruct(inv[i], m), images[i]));
  const double inv_mse = mean_reconstruction_mse(inv, images, m);
  const auto conv = evaluate_encoder(m.generator, p.conventional_encoder(), images);
  rep.cells.push_back({"domain_guided_encoder", {{"mse", enc.mse}, {"ssim", enc.ssim}}, false, ""});
  rep.cells.push_back({"in_domain_inversion", {{"mse", inv_mse}, {"ssim", stats::mean(ssims)}}, false, ""});
  rep.cells.push_back({"conventional_encoder", {{"mse", conv.mse}, {"ssim", conv.ssim}}, false, ""});

  // Equal step budgets from the encoder and from random codes.
  auto rnd = in_domain_config(spec);
  rnd.init = inversion::InitMode::random;
  rnd.seed = spec.seed;
  const auto& from_enc = p.inversions(in_domain_config(spec), spec.n_images, e);
  const auto& from_rnd = p.inversions(rnd, spec.n_images, e);
  std::vector<double> te, tr;
  for (std::size_t i = 0; i < from_enc.size(); ++i) {
    te.push_back(from_enc[i].loss_trace[static_cast<std::size_t>(from_enc[i].best_step)].total);
    tr.push_back(from_rnd[i].loss_trace[static_cast<std::size_t>(from_rnd[i].best_step)].total);
  }
  rep.cells.push_back({"init_encoder", {{"final_total", stats::mean(te)}}, false, ""});
  rep.cells.push_back({"init_random", {{"final_total", stats::mean(tr)}}, false, ""});
  const double ratio = inv_mse / enc.mse;
  rep.statistics = {{"inversion_over_encoder_mse", ratio}};
  rep.verdicts.push_back(check("inversion_improves_on_encoder", ratio <= 0.8,
                               "inversion MSE " + fmt(inv_mse) + " / encoder MSE " + fmt(enc.mse) + " = " + fmt(ratio) +
                                   " <= 0.8"));
  rep.verdicts.push_back(check("conventional_encoder_worse", conv.mse > enc.mse,
                               "conventional " + fmt(conv.mse) + " > domain-guided " + fmt(enc.mse)));
  rep.verdicts.push_back(check("encoder_init_beats_random", stats::mean(te) < stats::mean(tr),
                               "final total " + fmt(stats::mean(te)) + " < " + fmt(stats::mean(tr))));
  return rep;
}

ExperimentReport run_editing(const ExperimentSpec& spec, Pipeline& p) {
  ExperimentReport rep;
  rep.experiment = "editing";
  const auto& e = p.encoder();
  const auto m = p.models(e);
  const auto& bs = p.boundaries();
  const auto& ours = p.inversions(in_domain_config(spec), spec.n_images, e);
  Cell mono;
  mono.label = "edit_monotonicity";
  for (const auto& attr : kEditAttributes) {
    const double s = edit_monotonicity(ours, editing::find_by_attribute(bs, attr), attr, spec.alphas, m);
    mono.metrics[attr] = s;
    rep.verdicts.push_back(check("monotone_" + attr, s >= 0.9, "mean spearman " + fmt(s) + " >= 0.9"));
  }
  rep.cells.push_back(std::move(mono));
  Cell in_cell, base_cell;
  in_cell.label = "interp_in_domain";
  base_cell.label = "interp_baseline";
  add_interpolation_metrics(in_cell, p, codes_of(p.inversions(in_domain_config(spec), spec.n_test, e), e), spec);
  add_interpolation_metrics(base_cell, p, codes_of(p.inversions(baseline_config(spec), spec.n_test, e), e), spec);
  const double fi = metric(in_cell, "interp_fid"), fb = metric(base_cell, "interp_fid");
  rep.cells.push_back(std::move(in_cell));
  rep.cells.push_back(std::move(base_cell));
  rep.verdicts.push_back(check("interp_fid_beats_baseline", fi < fb, "in-domain " + fmt(fi) + " < baseline " + fmt(fb)));
  return rep;
}

namespace {

double attribute_agreement(const ImageTensor& result, const data::AttributeVector& t) {
  data::AttributeVector a;
  try {
    a = data::measure_attributes(result);
  } catch (const data::NoShapeError&) {
    return 0.0;
  }
  double hue_d = std::fabs(std::remainder(a.hue - t.hue, 2 * std::numbers::pi));
  int ok = 0;
  ok += std::fabs(a.size - t.size) <= 0.15 * t.size;
  ok += hue_d <= 0.3;
  ok += std::fabs(a.pos_x - t.pos_x) <= 0.05;
  ok += std::fabs(a.pos_y - t.pos_y) <= 0.05;
  ok += a.kind == t.kind;
  return ok / 5.0;
}

editing::CropBox crop_around(const data::AttributeVector& a, double factor, int res) {
  const auto [hx, hy] = data::half_extent(a.kind, a.size);
  const int side = std::min(res, static_cast<int>(std::ceil(factor * 2.0 * std::max(hx, hy) * res)) + 2);
  int x = static_cast<int>(std::lround(a.pos_x * res - side / 2.0));
  int y = static_cast<int>(std::lround(a.pos_y * res - side / 2.0));
  x = std::clamp(x, 0, res - side);
  y = std::clamp(y, 0, res - side);
  return {x, y, side, side};
}

double masked_mse(const ImageTensor& a, const ImageTensor& b, const ImageTensor& mask, bool inside) {
  double s = 0.0;
  std::size_t n = 0;
  for (int c = 0; c < a.channels; ++c)
    for (int y = 0; y < a.height; ++y)
      for (int x = 0; x < a.width; ++x)
        if ((mask.at(0, y, x) > 0.5) == inside) {
          const double d = a.at(c, y, x) - b.at(c, y, x);
          s += d * d;
          ++n;
        }
  return n ? s / static_cast<double>(n) : 0.0;
}

double masked_abs(const ImageTensor& a, const ImageTensor& b, const ImageTensor& mask, bool inside) {
  double s = 0.0;
  std::size_t n = 0;
  for (int c = 0; c < a.channels; ++c)
    for (int y = 0; y < a.height; ++y)
      for (int x = 0; x < a.width; ++x)
        if ((mask.at(0, y, x) > 0.5) == inside) {
          s += std::fabs(a.at(c, y, x) - b.at(c, y, x));
          ++n;
        }
  return n ? s / static_cast<double>(n) : 0.0;
}

}  // namespace

ExperimentReport run_diffusion(const ExperimentSpec& spec, Pipeline& p) {
  ExperimentReport rep;
  rep.experiment = "diffusion";
  const auto& e = p.encoder();
  const auto m = p.models(e);
  const auto& test = p.test_set();
  const int pairs = std::min(spec.n_diffusion_pairs, static_cast<int>(test.size()) / 2);
  const int res = p.gan().generator.config().resolution;
  auto cfg = in_domain_config(spec);
  std::vector<double> agreements;
  double worst_in_mask = 0.0;
  double min_outside_change = std::numeric_limits<double>::infinity();
  for (double factor : spec.crop_factors) {
    std::vector<double> in_mse, init_mse, agree, outside;
    for (int k = 0; k < pairs; ++k) {
      const auto& target = test[static_cast<std::size_t>(k)];
      const auto& context = test[static_cast<std::size_t>(pairs + k)];
      const auto box = crop_around(target.attributes, factor, res);
      const auto d = editing::diffuse(target.image, context.image, box, cfg, m);
      in_mse.push_back(masked_mse(d.image, d.stitched, d.mask, true));
      init_mse.push_back(masked_mse(d.init, d.stitched, d.mask, true));
      outside.push_back(masked_abs(d.image, d.stitched, d.mask, false));
      agree.push_back(attribute_agreement(d.image, target.attributes));
    }
    Cell cell;
    cell.label = "crop_factor=" + fmt(factor);
    cell.metrics["crop_factor"] = factor;
    cell.metrics["in_mask_mse"] = stats::mean(in_mse);
    cell.metrics["init_in_mask_mse"] = stats::mean(init_mse);
    cell.metrics["outside_change"] = stats::mean(outside);
    cell.metrics["agreement"] = stats::mean(agree);
    worst_in_mask = std::max(worst_in_mask, cell.metrics["in_mask_mse"]);
    min_outside_change = std::min(min_outside_change, cell.metrics["outside_change"]);
    agreements.push_back(cell.metrics["agreement"]);
    rep.cells.push_back(std::move(cell));
  }
  bool non_decreasing = true;
  for (std::size_t i = 1; i < agreements.size(); ++i) non_decreasing = non_decreasing && agreements[i] >= agreements[i - 1];
  rep.statistics = {{"pairs", pairs}};
  rep.verdicts.push_back(check("in_mask_mse", worst_in_mask < 0.05, "worst crop mean " + fmt(worst_in_mask) + " < 0.05"));
  rep.verdicts.push_back(check("agreement_non_decreasing_in_crop", non_decreasing, "attribute agreement over crop sizes"));
  rep.verdicts.push_back(check("context_adapts", min_outside_change > 0,
                               "mean |result - paste| outside the crop " + fmt(min_outside_change) + " > 0"));
  return rep;
}

ExperimentReport run_training(const ExperimentSpec& spec, Pipeline& p) {
  ExperimentReport rep;
  rep.experiment = "training";
  const auto& e = p.encoder();
  const auto t = p.timings();
  const double total = t.value("gan", 0.0) + t.value("features", 0.0) + t.value("encoder", 0.0);
  const auto images = std::span(p.test_images()).subspan(0, static_cast<std::size_t>(spec.n_test));
  const auto ev = evaluate_encoder(p.gan().generator, e, images);
  rep.cells.push_back({"pipeline",
                       {{"gan_seconds", t.value("gan", 0.0)},
                        {"features_seconds", t.value("features", 0.0)},
                        {"encoder_seconds", t.value("encoder", 0.0)},
                        {"total_seconds", total},
                        {"encoder_mse", ev.mse}},
                       false,
                       ""});
  rep.verdicts.push_back(check("under_60_minutes", total < 3600, "GAN + feature net + encoder " + fmt(total) + " s"));
  rep.verdicts.push_back(check("encoder_mse", ev.mse <= 0.05, "held-out encoder MSE " + fmt(ev.mse) + " <= 0.05"));
  return rep;
}

ExperimentReport run_full_report(const ExperimentSpec& spec, Pipeline& p) {
  ExperimentReport rep;
  rep.experiment = "full_report";
  rep.merge(run_training(spec, p), "training");
  rep.merge(run_reconstruction(spec, p), "reconstruction");
  rep.merge(run_lambda_sweep(spec, p), "lambda_sweep");
  ExperimentSpec noise = spec;
  noise.grid.clear();
  noise.grid_given = false;
  rep.merge(run_noise_sweep(noise, p), "noise_sweep");
  rep.merge(run_wspace_compare(spec, p), "wspace_compare");
  rep.merge(run_mean_offset_ablation(spec, p), "mean_offset_ablation");
  rep.merge(run_attribute_pr(spec, p), "attribute_pr");
  rep.merge(run_editing(spec, p), "editing");
  rep.merge(run_diffusion(spec, p), "diffusion");
  return rep;
}

ExperimentReport run_experiment(const ExperimentSpec& spec, Pipeline& p) {
  validate(spec, gan::num_layers(p.config().gan.resolution));
  if (spec.experiment == "lambda_sweep") return run_lambda_sweep(spec, p);
  if (spec.experiment == "noise_sweep") return run_noise_sweep(spec, p);
  if (spec.experiment == "wspace_compare") return run_wspace_compare(spec, p);
  if (spec.experiment == "mean_offset_ablation") return run_mean_offset_ablation(spec, p);
  if (spec.experiment == "attribute_pr") return run_attribute_pr(spec, p);
  return run_full_report(spec, p);
}

// ---- output ------------------------------------------------------------------------------

json to_json(const ExperimentReport& r) {
  json cells = json::array();
  for (const auto& c : r.cells) {
    json m = json::object();
    for (const auto& [k, v] : c.metrics) m[k] = v;
    cells.push_back({{"label", c.label}, {"metrics", m}, {"failed", c.failed}, {"error", c.error}});
  }
  json verdicts = json::array();
  for (const auto& v : r.verdicts) verdicts.push_back({{"name", v.name}, {"pass", v.pass}, {"detail", v.detail}});
  return {{"experiment", r.experiment},
          {"passed", r.passed()},
          {"verdicts", verdicts},
          {"statistics", r.statistics},
          {"cells", cells}};
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string exact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string slug(std::string s) {
  for (char& c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-') c = '_';
  return s;
}

// Plot on a white canvas: axes plus one polyline with markers per series.
ImageTensor plot(const std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>>& series) {
  constexpr int W = 320, H = 200, M = 20;
  ImageTensor img(3, H, W, 1.0);
  static const double colors[][3] = {{-1, -1, 0.6}, {0.8, -1, -1}, {-1, 0.5, -1}, {0.6, -1, 0.6}, {0.8, 0.4, -1}};
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series)
    for (const auto& [x, y] : s.second)
      if (std::isfinite(x) && std::isfinite(y)) {
        x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
      }
  auto put = [&](int x, int y, const double* col) {
    if (x < 0 || y < 0 || x >= W || y >= H) return;
    for (int c = 0; c < 3; ++c) img.at(c, y, x) = col[c];
  };
  const double black[3] = {-1, -1, -1};
  for (int x = M; x < W - M; ++x) put(x, H - M, black);
  for (int y = M; y <= H - M; ++y) put(M, y, black);
  if (!std::isfinite(x0)) return img;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double x) { return M + static_cast<int>(std::lround((x - x0) / (x1 - x0) * (W - 2 * M - 1))); };
  auto py = [&](double y) { return H - M - static_cast<int>(std::lround((y - y0) / (y1 - y0) * (H - 2 * M - 1))); };
  for (std::size_t si = 0; si < series.size(); ++si) {
    const double* col = colors[si % 5];
    const auto& pts = series[si].second;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (!std::isfinite(pts[i].first) || !std::isfinite(pts[i].second)) continue;
      const int ax = px(pts[i].first), ay = py(pts[i].second);
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) put(ax + dx, ay + dy, col);
      if (i + 1 < pts.size() && std::isfinite(pts[i + 1].second)) {
        const int bx = px(pts[i + 1].first), by = py(pts[i + 1].second);
        const int steps = std::max(std::abs(bx - ax), std::abs(by - ay));
        for (int t = 0; t <= steps; ++t) {
          const double f = steps ? static_cast<double>(t) / steps : 0.0;
          put(static_cast<int>(std::lround(ax + f * (bx - ax))), static_cast<int>(std::lround(ay + f * (by - ay))), col);
        }
      }
    }
  }
  return img;
}

}  // namespace

std::vector<fs::path> emit_report(const ExperimentReport& r, const fs::path& dir, const std::string& format) {
  if (format != "csv" && format != "json" && format != "png" && format != "all") {
    throw ValidationError("format", "unknown report format '" + format + "' (csv, json, png or all)");
  }
  fs::create_directories(dir);
  std::vector<fs::path> written;
  std::set<std::string> names;
  for (const auto& c : r.cells)
    for (const auto& kv : c.metrics) names.insert(kv.first);
  if (format == "csv" || format == "all") {
    std::ostringstream os;
    os << "label,failed,error";
    for (const auto& n : names) os << ',' << csv_field(n);
    os << '\n';
    for (const auto& c : r.cells) {
      os << csv_field(c.label) << ',' << (c.failed ? 1 : 0) << ',' << csv_field(c.error);
      for (const auto& n : names) {
        auto it = c.metrics.find(n);
        os << ',' << (it == c.metrics.end() ? "" : exact(it->second));
      }
      os << '\n';
    }
    const fs::path p = dir / (r.experiment + ".csv");
    archive::write_text(p, os.str());
    written.push_back(p);
  }
  const fs::path verdicts = dir / (r.experiment + "_verdicts.json");
  archive::write_text(verdicts, to_json(r).dump(1) + "\n");
  written.push_back(verdicts);
  if (format == "png" || format == "all") {
    for (const auto& n : names) {
      std::vector<std::pair<double, double>> pts;
      for (std::size_t i = 0; i < r.cells.size(); ++i) {
        auto it = r.cells[i].metrics.find(n);
        if (it != r.cells[i].metrics.end()) pts.emplace_back(static_cast<double>(i), it->second);
      }
      const fs::path p = dir / (r.experiment + "_" + slug(n) + ".png");
      image::write_png(p, plot({{n, pts}}));
      written.push_back(p);
    }
    for (const auto& c : r.curves) {
      const fs::path p = dir / (r.experiment + "_curve_" + slug(c.name) + ".png");
      image::write_png(p, plot(c.series));
      written.push_back(p);
    }
  }
  return written;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  const std::string text = archive::read_text(path);
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
    } else if (c == '\n') {
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
    } else {
      field += c;
    }
  }
  if (!field.empty() || !row.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace idinvert::harness
