// Acceptance suite: one PASS/FAIL line per criterion.
//
// Gradient and determinism checks run on tiny models every time. The rest map
// onto harness verdicts computed with the default pipeline in --work; trained
// artifacts are cached there by the pipeline and the finished report is cached
// next to them (keyed by the full config), so only the first run is slow.
// --fresh ignores the cached report but still reuses trained checkpoints.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <iostream>
#include <random>
#include <sstream>

#include "gradcheck.hpp"
#include "idinvert/archive.hpp"
#include "idinvert/encoder.hpp"
#include "idinvert/features.hpp"
#include "idinvert/gan.hpp"
#include "idinvert/harness.hpp"
#include "idinvert/inversion.hpp"
#include "idinvert/synth_data.hpp"
#include "tiny_models.hpp"

using namespace idinvert;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Line {
  int id;
  std::string name;
  bool pass;
  std::string detail;
};

// ---- 1: gradients --------------------------------------------------------------

Line gradients() {
  constexpr int kCoords = 12;
  constexpr double kTol = 1e-4;
  testutil::TinyModels m(7);
  const auto& g = m.gan.generator;
  std::vector<std::pair<std::string, testutil::GradCheck>> checks;

  std::mt19937_64 rng(1);
  const auto noise = g.random_noise(2, rng);
  const ad::Var w_img = ad::constant(testutil::random_tensor({2, 3, 8, 8}, 2));
  checks.emplace_back("synthesize", testutil::check_gradient(
                                        [&](const ad::Var& s) { return ad::sum(ad::mul(g.synthesize(s, noise), w_img)); },
                                        testutil::random_tensor({2, g.style_dim()}, 3, 0.8), kCoords, 4));

  const ad::Var w_feat = ad::constant(testutil::random_tensor({2, m.features.feature_dim()}, 5));
  checks.emplace_back("extract_features",
                      testutil::check_gradient(
                          [&](const ad::Var& x) { return ad::sum(ad::mul(m.features.extract_features(x), w_feat)); },
                          testutil::random_tensor({2, 3, 8, 8}, 6, 0.5), kCoords, 7));

  const auto x = ad::constant(testutil::random_tensor({2, 3, 8, 8}, 8, 0.5));
  auto enc_loss = [&] {
    return encoder::encoder_loss(m.encoder, g, m.gan.discriminator, m.features, x, 0.3, 0.1,
                                 encoder::AdversarialLoss::logistic)
        .total;
  };
  checks.emplace_back("encoder_loss",
                      testutil::check_param_gradient(enc_loss, m.encoder.params().at("E.fc.w"), kCoords, 9));

  auto& d = m.gan.discriminator;
  const auto reals = testutil::random_tensor({3, 3, 8, 8}, 10, 0.5);
  auto r1 = [&] { return gan::r1_penalty([&](const ad::Var& v) { return d.forward(v); }, reals, 10.0); };
  checks.emplace_back("r1", testutil::check_param_gradient(r1, d.params().at(d.params().names().front()), kCoords, 11));

  const auto target =
      image::to_batch(std::vector<ImageTensor>{data::render_shape({data::ShapeKind::disk, 0.3, 1.0, 0.5, 0.5, 0.4}, 8)});
  std::vector<ad::Var> nv;
  for (const auto& t : m.encoder.fixed_noise()) nv.push_back(ad::constant(t));
  checks.emplace_back("inversion_objective",
                      testutil::check_gradient(
                          [&](const ad::Var& s) {
                            return inversion::objective_graph(s, nv, target, {}, 0.5, 2.0, m.models());
                          },
                          testutil::random_tensor({1, g.style_dim()}, 12, 0.5), kCoords, 13));

  bool pass = true;
  std::ostringstream detail;
  for (const auto& [name, r] : checks) {
    pass = pass && r.checked >= 10 && r.max_rel_err < kTol;
    detail << name << " " << r.max_rel_err << " (" << r.checked << ") ";
  }
  detail << "< " << kTol;
  return {1, "gradients", pass, detail.str()};
}

// ---- 11: determinism -------------------------------------------------------------

std::string bytes_hash(const std::function<void(const fs::path&)>& write, const fs::path& dir, const std::string& name) {
  const auto path = dir / name;
  write(path);
  return archive::file_sha256(path);
}

Line determinism(harness::Pipeline* p) {
  testutil::TempDir dir("accept");
  const auto imgs = testutil::tiny_images(16, 31);
  const auto samples = testutil::tiny_samples(16, 31);
  std::vector<std::string> failed;
  auto twice = [&](const std::string& what, const std::function<void(const fs::path&)>& write) {
    const auto a = bytes_hash(write, dir.path, what + ".a");
    const auto b = bytes_hash(write, dir.path, what + ".b");
    if (a != b) failed.push_back(what);
  };

  auto gc = testutil::tiny_gan_config(3);
  gc.steps = 6;
  twice("train_gan", [&](const fs::path& f) { gan::save_gan(f, gan::train_gan(imgs, gc)); });

  auto fc = testutil::tiny_feature_config();
  fc.steps = 6;
  twice("train_feature_net", [&](const fs::path& f) { features::save_feature_net(f, features::train_feature_net(samples, fc)); });

  testutil::TinyModels m(3);
  auto ec = testutil::tiny_encoder_config();
  ec.steps = 4;
  twice("train_encoder", [&](const fs::path& f) {
    encoder::save_encoder(
        f, encoder::train_domain_guided_encoder(m.gan.generator, m.gan.discriminator, m.features, imgs, ec, "h").encoder);
  });
  twice("train_conventional_encoder", [&](const fs::path& f) {
    encoder::save_encoder(f, encoder::train_conventional_encoder(m.gan.generator, ec, "h").encoder);
  });

  // Wall time is the one field of a saved result that may differ.
  auto timeless = [](inversion::InversionResult r) {
    r.wall_seconds = 0;
    return r;
  };
  inversion::InversionConfig ic;
  ic.steps = 10;
  twice("invert", [&](const fs::path& f) { inversion::save_result(f, timeless(inversion::invert(imgs[0], ic, m.models()))); });
  ic.init = inversion::InitMode::random;
  ic.seed = 5;
  twice("invert_random_init",
        [&](const fs::path& f) { inversion::save_result(f, timeless(inversion::invert(imgs[1], ic, m.models()))); });

  // The trained default models too, on one held-out image.
  if (p) {
    inversion::InversionConfig full;
    const auto models = p->models(p->encoder());
    twice("invert_default_models", [&](const fs::path& f) {
      inversion::save_result(f, timeless(inversion::invert(p->test_images().front(), full, models)));
    });
  }

  const int n = p ? 7 : 6;
  std::string detail = failed.empty() ? std::to_string(n) + " entry points rerun to identical bytes" : "differs:";
  for (const auto& f : failed) detail += " " + f;
  return {11, "determinism", failed.empty(), detail};
}

// ---- 2-10: harness verdicts --------------------------------------------------------

json cached_report(const harness::ExperimentSpec& spec, const json& key, bool fresh) {
  const std::string text = key.dump();
  const std::string hash =
      archive::sha256_hex({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()}).substr(0, 12);
  const fs::path path = spec.pipeline.work_dir / ("acceptance-report-" + hash + ".json");
  if (!fresh && fs::exists(path)) {
    std::cerr << "using cached report " << path << "\n";
    return json::parse(archive::read_text(path));
  }
  harness::Pipeline p(spec.pipeline, [](const std::string& s) { std::cerr << s << "\n"; });
  const auto t0 = std::chrono::steady_clock::now();
  auto j = harness::to_json(harness::run_full_report(spec, p));
  j["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  fs::create_directories(path.parent_path());
  archive::write_text(path, j.dump(1));
  return j;
}

Line from_verdicts(int id, const std::string& name, const json& report, const std::vector<std::string>& prefixes) {
  bool pass = true;
  int n = 0;
  std::string detail;
  for (const auto& v : report.at("verdicts")) {
    const auto vn = v.at("name").get<std::string>();
    for (const auto& pre : prefixes) {
      if (vn.rfind(pre, 0) != 0) continue;
      ++n;
      pass = pass && v.at("pass").get<bool>();
      if (!detail.empty()) detail += "; ";
      detail += vn.substr(vn.find('/') + 1) + (v.at("pass").get<bool>() ? " ok" : " FAILED") + ": " +
                v.at("detail").get<std::string>();
    }
  }
  if (n == 0) return {id, name, false, "no verdicts found"};
  return {id, name, pass, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks for the in-domain inversion pipeline"};
  std::string work = IDINVERT_ACCEPTANCE_WORK;
  std::string config_path;
  std::string out;
  bool fresh = false, strict = false, quick = false;
  app.add_option("--work", work, "pipeline work directory (trained artifacts are cached here)");
  app.add_option("--config", config_path, "experiment JSON merged over the defaults");
  app.add_option("--out", out, "write acceptance.json and the full report here");
  app.add_flag("--fresh", fresh, "recompute the experiment report even if cached");
  app.add_flag("--strict", strict, "exit 1 if any criterion fails");
  app.add_flag("--quick", quick, "only the gradient and determinism checks");
  CLI11_PARSE(app, argc, argv);

  try {
    json cfg = json::object();
    if (!config_path.empty()) cfg = json::parse(archive::read_text(config_path));
    if (!cfg.contains("pipeline")) cfg["pipeline"] = json::object();
    cfg["pipeline"]["work_dir"] = work;
    cfg["experiment"] = "full_report";
    const auto spec = harness::experiment_spec_from_json(cfg);
    harness::validate(spec, gan::num_layers(spec.pipeline.gan.resolution));

    std::vector<Line> lines;
    lines.push_back(gradients());

    json report;
    if (!quick) {
      report = cached_report(spec, {{"config", cfg}, {"pipeline", harness::to_json(spec.pipeline)}}, fresh);
      lines.push_back(from_verdicts(2, "training", report, {"training/"}));
      lines.push_back(from_verdicts(3, "in_domain_improvement", report, {"reconstruction/inversion_improves_on_encoder"}));
      lines.push_back(from_verdicts(4, "lambda_tradeoff", report,
                                    {"lambda_sweep/mse_increases_with_lambda", "lambda_sweep/edit_success_non_decreasing"}));
      lines.push_back(from_verdicts(5, "noise_sweep", report,
                                    {"noise_sweep/mse_non_increasing", "noise_sweep/mse_ratio",
                                     "noise_sweep/interp_fid_endpoints"}));
      lines.push_back(from_verdicts(6, "mean_offset", report, {"mean_offset_ablation/"}));
      lines.push_back(from_verdicts(7, "w_vs_wplus", report, {"wspace_compare/"}));
      lines.push_back(from_verdicts(8, "attribute_pr", report, {"attribute_pr/ap_"}));
      lines.push_back(from_verdicts(9, "edit_monotonicity", report, {"editing/monotone_"}));
      lines.push_back(from_verdicts(10, "diffusion", report,
                                    {"diffusion/in_mask_mse", "diffusion/agreement_non_decreasing_in_crop"}));
    }

    std::unique_ptr<harness::Pipeline> p;
    if (!quick) p = std::make_unique<harness::Pipeline>(spec.pipeline);
    lines.push_back(determinism(p.get()));

    int failed = 0;
    json out_lines = json::array();
    for (const auto& l : lines) {
      std::printf("%s  %2d %-22s %s\n", l.pass ? "PASS" : "FAIL", l.id, l.name.c_str(), l.detail.c_str());
      failed += l.pass ? 0 : 1;
      out_lines.push_back({{"criterion", l.id}, {"name", l.name}, {"pass", l.pass}, {"detail", l.detail}});
    }
    std::printf("%zu criteria, %d passed, %d failed\n", lines.size(), static_cast<int>(lines.size()) - failed, failed);
    if (!out.empty()) {
      fs::create_directories(out);
      archive::write_text(fs::path(out) / "acceptance.json", json{{"criteria", out_lines}}.dump(1));
      if (!report.is_null()) archive::write_text(fs::path(out) / "full_report.json", report.dump(1));
    }
    return strict && failed > 0 ? 1 : 0;
  } catch (const std::exception& e) {
    std::cerr << "acceptance: " << e.what() << "\n";
    return 2;
  }
}
