#include <doctest.h>

#include "idinvert/archive.hpp"
#include "idinvert/errors.hpp"
#include "idinvert/harness.hpp"
#include "tiny_models.hpp"

using namespace idinvert;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

harness::PipelineConfig tiny_pipeline(const fs::path& work) {
  auto c = harness::default_pipeline_config();
  c.work_dir = work;
  // Smallest resolution the data generator accepts.
  for (auto* d : {&c.train_data, &c.test_data, &c.reference_data}) d->resolution = 16;
  c.train_data.n_images = 24;
  c.test_data.n_images = 6;
  c.reference_data.n_images = 12;
  c.gan = testutil::tiny_gan_config();
  c.gan.resolution = 16;
  c.gan.channels = {8, 4, 4};
  c.gan.steps = 3;
  c.features = testutil::tiny_feature_config();
  c.features.resolution = 16;
  c.features.steps = 3;
  c.encoder = testutil::tiny_encoder_config();
  c.encoder.channels = {4, 4, 4};
  c.encoder.steps = 3;
  c.boundary_samples = 20;
  return c;
}

harness::ExperimentSpec tiny_spec(const std::string& experiment, const fs::path& work) {
  harness::ExperimentSpec s;
  s.experiment = experiment;
  s.pipeline = tiny_pipeline(work);
  s.n_images = 2;
  s.n_test = 4;
  s.n_pairs = 12;
  s.inversion.steps = 2;
  return s;
}

template <class F>
std::string field_of(F&& f) {
  try {
    f();
  } catch (const ValidationError& e) {
    return e.field();
  }
  return "";
}

}  // namespace

TEST_CASE("spec validation guards misconfigurations") {
  testutil::TempDir dir("spec");
  auto s = tiny_spec("lambda_sweep", dir.path);
  CHECK_NOTHROW(harness::validate(s, 16));

  auto bad = s;
  bad.experiment = "nonsense";
  CHECK(field_of([&] { harness::validate(bad, 16); }) == "experiment");

  bad = s;
  bad.grid_given = true;
  bad.grid.clear();
  CHECK(field_of([&] { harness::validate(bad, 16); }) == "grid");

  bad = s;
  bad.experiment = "noise_sweep";
  bad.grid = {0, 9};
  CHECK(field_of([&] { harness::validate(bad, 16); }) == "grid");

  bad = s;
  bad.seed_with_offset = 1;
  bad.seed_without_offset = 2;
  CHECK(field_of([&] { harness::validate(bad, 16); }) == "seed");

  archive::write_text(dir.path / "a.ckpt", "same");
  bad = s;
  bad.w_checkpoint = dir.path / "a.ckpt";
  bad.wplus_checkpoint = dir.path / "a.ckpt";
  CHECK(field_of([&] { harness::validate(bad, 16); }) == "checkpoints");

  bad = s;
  bad.experiment = "attribute_pr";
  bad.boundaries_path = dir.path / "missing.json";
  CHECK_THROWS_AS(harness::validate(bad, 16), NotFoundError);
}

TEST_CASE("spec JSON merges over the defaults") {
  const auto s = harness::experiment_spec_from_json(json::parse(R"({
    "experiment": "noise_sweep", "grid": [0, 2], "n_images": 3,
    "pipeline": {"gan": {"steps": 7}, "work_dir": "w"}
  })"));
  CHECK(s.experiment == "noise_sweep");
  CHECK(s.grid == std::vector<double>{0, 2});
  CHECK(s.grid_given);
  CHECK(s.n_images == 3);
  CHECK(s.pipeline.gan.steps == 7);
  CHECK(s.pipeline.gan.d_w == harness::default_pipeline_config().gan.d_w);
  CHECK(s.pipeline.test_data.n_images == 200);
}

TEST_CASE("reports round-trip through CSV") {
  harness::ExperimentReport r;
  r.experiment = "demo";
  r.cells.push_back({"a", {{"mse", 0.1}, {"fid", 1.0 / 3.0}}, false, ""});
  r.cells.push_back({"b, quoted", {{"mse", 2e-7}}, true, "it \"broke\""});
  r.verdicts.push_back({"ok", true, "fine"});
  testutil::TempDir dir("csv");
  const auto files = harness::emit_report(r, dir.path, "csv");
  REQUIRE(files.size() == 2);
  const auto rows = harness::read_csv(dir.path / "demo.csv");
  REQUIRE(rows.size() == 3);
  CHECK(rows[0] == std::vector<std::string>{"label", "failed", "error", "fid", "mse"});
  CHECK(rows[1][0] == "a");
  CHECK(std::stod(rows[1][3]) == 1.0 / 3.0);
  CHECK(std::stod(rows[1][4]) == 0.1);
  CHECK(rows[2][0] == "b, quoted");
  CHECK(rows[2][1] == "1");
  CHECK(rows[2][2] == "it \"broke\"");
  CHECK(rows[2][3].empty());
  CHECK(std::stod(rows[2][4]) == 2e-7);
  CHECK_THROWS_AS(harness::emit_report(r, dir.path, "xlsx"), ValidationError);
  const auto v = json::parse(archive::read_text(dir.path / "demo_verdicts.json"));
  CHECK(v.at("verdicts").at(0).at("pass").get<bool>());
}

TEST_CASE("an experiment reruns to identical report bytes") {
  testutil::TempDir a("runa"), b("runb");
  std::string csv[2], verdicts[2];
  int k = 0;
  for (const auto* dir : {&a, &b}) {
    auto spec = tiny_spec("mean_offset_ablation", dir->path / "work");
    harness::Pipeline p(spec.pipeline);
    const auto rep = harness::run_experiment(spec, p);
    CHECK(rep.cells.size() == 2);
    CHECK(rep.verdicts.size() == 2);
    harness::emit_report(rep, dir->path / "out", "csv");
    csv[k] = archive::read_text(dir->path / "out" / "mean_offset_ablation.csv");
    verdicts[k] = archive::read_text(dir->path / "out" / "mean_offset_ablation_verdicts.json");
    ++k;
  }
  CHECK(csv[0] == csv[1]);
  CHECK(verdicts[0] == verdicts[1]);

  // Cached artifacts give the same report as a fresh training run.
  auto spec = tiny_spec("mean_offset_ablation", a.path / "work");
  harness::Pipeline again(spec.pipeline);
  harness::emit_report(harness::run_experiment(spec, again), a.path / "again", "csv");
  CHECK(archive::read_text(a.path / "again" / "mean_offset_ablation.csv") == csv[0]);
}

TEST_CASE("a config change retrains into a new artifact") {
  testutil::TempDir dir("art");
  auto c = tiny_pipeline(dir.path);
  harness::Pipeline p(c);
  const auto e1 = p.encoder_path(c.encoder);
  auto c2 = c.encoder;
  c2.use_mean_offset = false;
  const auto e2 = p.encoder_path(c2);
  CHECK(e1 != e2);
  CHECK(fs::exists(e1));
  CHECK(fs::exists(e2));
  CHECK(p.encoder_variant(c2).generator_hash == p.generator_hash());
}

TEST_CASE("lambda sweep rejects an empty grid") {
  testutil::TempDir dir("grid");
  auto s = tiny_spec("lambda_sweep", dir.path);
  s.grid_given = true;
  harness::Pipeline p(s.pipeline);
  CHECK_THROWS_AS(harness::run_experiment(s, p), ValidationError);
}
