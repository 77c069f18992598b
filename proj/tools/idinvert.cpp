// idinvert command line: data generation, training, inversion, editing,
// experiments and the HTTP service.

#include <chrono>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "idinvert/archive.hpp"
#include "idinvert/editing.hpp"
#include "idinvert/encoder.hpp"
#include "idinvert/errors.hpp"
#include "idinvert/features.hpp"
#include "idinvert/gan.hpp"
#include "idinvert/harness.hpp"
#include "idinvert/image.hpp"
#include "idinvert/inversion.hpp"
#include "idinvert/service.hpp"
#include "idinvert/synth_data.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace idinvert;

namespace {

json read_config(const std::string& path) {
  if (path.empty()) return json::object();
  if (!fs::exists(path)) throw NotFoundError("config file " + path + " does not exist");
  return json::parse(archive::read_text(path));
}

void say(const std::string& msg) {
  std::fprintf(stderr, "%s\n", msg.c_str());
  std::fflush(stderr);
}

struct ModelPaths {
  std::string gan, encoder, features;
};

void add_model_options(CLI::App* cmd, ModelPaths& p, bool need_features) {
  cmd->add_option("--gan", p.gan, "generator checkpoint")->required()->check(CLI::ExistingFile);
  cmd->add_option("--encoder", p.encoder, "encoder checkpoint")->required()->check(CLI::ExistingFile);
  auto* f = cmd->add_option("--features", p.features, "feature net checkpoint")->check(CLI::ExistingFile);
  if (need_features) f->required();
}

struct Loaded {
  gan::GanModel gan;
  encoder::Encoder encoder;
  features::FeatureNet features;
  inversion::Models models() const { return {gan.generator, encoder, features}; }
};

Loaded load_models(const ModelPaths& p) {
  Loaded m;
  m.gan = gan::load_gan(p.gan);
  m.encoder = encoder::load_encoder(p.encoder, m.gan.generator);
  if (!p.features.empty()) m.features = features::load_feature_net(p.features);
  return m;
}

ImageTensor load_image(const std::string& path, int res) { return image::center_crop_resize(image::read_png(path), res); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"In-domain GAN inversion on a synthetic shapes corpus"};
  app.require_subcommand(1);

  // generate-data
  std::string data_config, data_out;
  auto* gen = app.add_subcommand("generate-data", "render a labeled shapes dataset");
  gen->add_option("--config", data_config, "dataset config JSON");
  gen->add_option("--out", data_out, "output directory")->required();
  int gen_n = -1;
  std::int64_t gen_seed = -1;
  gen->add_option("-n,--n-images", gen_n);
  gen->add_option("--seed", gen_seed);

  // train-gan / train-features
  std::string train_config, train_data, train_out;
  auto* tgan = app.add_subcommand("train-gan", "train the generator and discriminator");
  auto* tfeat = app.add_subcommand("train-features", "train the perceptual feature net");
  for (auto* c : {tgan, tfeat}) {
    c->add_option("--config", train_config, "config JSON");
    c->add_option("--data", train_data, "dataset directory from generate-data")->required()->check(CLI::ExistingDirectory);
    c->add_option("--out", train_out, "checkpoint path")->required();
  }

  // train-encoder
  std::string enc_gan, enc_feat;
  bool conventional = false;
  auto* tenc = app.add_subcommand("train-encoder", "train an encoder against a frozen generator");
  tenc->add_option("--config", train_config, "encoder config JSON");
  tenc->add_option("--data", train_data, "dataset directory")->check(CLI::ExistingDirectory);
  tenc->add_option("--gan", enc_gan)->required()->check(CLI::ExistingFile);
  tenc->add_option("--features", enc_feat)->check(CLI::ExistingFile);
  tenc->add_option("--out", train_out, "checkpoint path")->required();
  tenc->add_flag("--conventional", conventional, "regress codes of synthesized pairs instead");

  // fit-boundaries
  std::string fb_gan, fb_out;
  int fb_n = 2000;
  std::uint64_t fb_seed = 4;
  auto* fitb = app.add_subcommand("fit-boundaries", "fit attribute boundaries on oracle-labeled samples");
  fitb->add_option("--gan", fb_gan)->required()->check(CLI::ExistingFile);
  fitb->add_option("-n,--samples", fb_n);
  fitb->add_option("--seed", fb_seed);
  fitb->add_option("--out", fb_out)->required();

  // invert
  ModelPaths inv_models;
  std::string inv_image, inv_config, inv_out;
  auto* inv = app.add_subcommand("invert", "in-domain inversion of one image");
  add_model_options(inv, inv_models, true);
  inv->add_option("--image", inv_image)->required()->check(CLI::ExistingFile);
  inv->add_option("--config", inv_config, "inversion config JSON");
  inv->add_option("--out", inv_out, "output directory")->required();

  // edit
  ModelPaths ed_models;
  std::string ed_result, ed_boundaries, ed_attr = "size", ed_out;
  double ed_alpha = 1.0;
  std::vector<int> ed_layers;
  auto* ed = app.add_subcommand("edit", "move an inverted code along a semantic boundary");
  add_model_options(ed, ed_models, false);
  ed->add_option("--result", ed_result, "inversion result archive")->required()->check(CLI::ExistingFile);
  ed->add_option("--boundaries", ed_boundaries)->required();
  ed->add_option("--attribute", ed_attr);
  ed->add_option("--alpha", ed_alpha);
  ed->add_option("--layers", ed_layers, "row range BEGIN END")->expected(2);
  ed->add_option("--out", ed_out, "output PNG")->required();

  // interpolate
  ModelPaths ip_models;
  std::string ip_a, ip_b, ip_out;
  int ip_frames = 5;
  auto* ip = app.add_subcommand("interpolate", "blend two inverted codes");
  add_model_options(ip, ip_models, false);
  ip->add_option("--a", ip_a)->required()->check(CLI::ExistingFile);
  ip->add_option("--b", ip_b)->required()->check(CLI::ExistingFile);
  ip->add_option("--frames", ip_frames, "evenly spaced t in [0, 1], tiled in one PNG")->check(CLI::Range(2, 64));
  ip->add_option("--out", ip_out, "output PNG")->required();

  // diffuse
  ModelPaths df_models;
  std::string df_target, df_context, df_config, df_out;
  std::vector<int> df_box;
  auto* df = app.add_subcommand("diffuse", "paste a crop of the target on the context and harmonize");
  add_model_options(df, df_models, true);
  df->add_option("--target", df_target)->required()->check(CLI::ExistingFile);
  df->add_option("--context", df_context)->required()->check(CLI::ExistingFile);
  df->add_option("--box", df_box, "X Y WIDTH HEIGHT")->required()->expected(4);
  df->add_option("--config", df_config, "inversion config JSON");
  df->add_option("--out", df_out, "output directory")->required();

  // run
  std::string run_exp, run_config, run_out, run_format = "all";
  auto* run = app.add_subcommand("run", "run an experiment; exit 0 iff every verdict passes");
  run->add_option("experiment", run_exp)->required();
  run->add_option("--config", run_config, "experiment config JSON");
  run->add_option("--out", run_out, "report directory")->required();
  run->add_option("--format", run_format, "csv, json, png or all");

  // register
  std::string reg_dir, reg_id, reg_boundaries;
  ModelPaths reg_models;
  auto* reg = app.add_subcommand("register", "add checkpoints to a service registry");
  reg->add_option("--registry", reg_dir)->required();
  reg->add_option("--id", reg_id)->required();
  add_model_options(reg, reg_models, true);
  reg->add_option("--boundaries", reg_boundaries)->check(CLI::ExistingFile);

  // serve
  auto* serve = app.add_subcommand("serve", "HTTP service (IDINVERT_PORT, IDINVERT_REGISTRY, IDINVERT_WORKERS)");
  std::string sv_registry, sv_host;
  int sv_port = -1, sv_workers = -1;
  serve->add_option("--registry", sv_registry);
  serve->add_option("--port", sv_port);
  serve->add_option("--workers", sv_workers);
  serve->add_option("--host", sv_host);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      auto dc = data::dataset_config_from_json(read_config(data_config));
      if (gen_n >= 0) dc.n_images = gen_n;
      if (gen_seed >= 0) dc.seed = static_cast<std::uint64_t>(gen_seed);
      data::validate(dc);
      data::save_dataset(data_out, data::generate_dataset(dc));
      say("wrote " + std::to_string(dc.n_images) + " images to " + data_out);
      return 0;
    }
    if (tgan->parsed()) {
      auto gc = gan::gan_config_from_json(read_config(train_config));
      const auto imgs = data::images_of(data::load_dataset(train_data));
      std::vector<gan::GanLogEntry> log;
      auto m = gan::train_gan(imgs, gc, [&](const gan::GanLogEntry& e) {
        log.push_back(e);
        if (e.step % 100 == 0) say("step " + std::to_string(e.step) + " d=" + std::to_string(e.d_loss) +
                                   " g=" + std::to_string(e.g_loss));
      });
      gan::save_gan(train_out, m);
      gan::write_gan_log(fs::path(train_out).replace_extension(".log.csv"), log);
      return 0;
    }
    if (tfeat->parsed()) {
      auto fc = features::feature_config_from_json(read_config(train_config));
      features::FeatureTrainReport rep;
      auto f = features::train_feature_net(data::load_dataset(train_data), fc, &rep);
      features::save_feature_net(train_out, f);
      say("held-out size relative error " + std::to_string(rep.val_size_rel_error));
      return 0;
    }
    if (tenc->parsed()) {
      auto ec = encoder::encoder_config_from_json(read_config(train_config));
      const auto g = gan::load_gan(enc_gan);
      const std::string hash = archive::file_sha256(enc_gan);
      auto progress = [](const encoder::EncoderLogEntry& e) {
        if (e.step % 100 == 0) say("step " + std::to_string(e.step) + " loss=" + std::to_string(e.total));
      };
      encoder::EncoderTrainResult r;
      if (conventional) {
        r = encoder::train_conventional_encoder(g.generator, ec, hash, progress);
      } else {
        if (train_data.empty() || enc_feat.empty()) {
          throw ValidationError("data", "--data and --features are required for domain-guided training");
        }
        const auto imgs = data::images_of(data::load_dataset(train_data));
        r = encoder::train_domain_guided_encoder(g.generator, g.discriminator, features::load_feature_net(enc_feat),
                                                 imgs, ec, hash, progress,
                                                 fs::path(train_out).replace_extension(".last_good.ckpt"));
      }
      encoder::save_encoder(train_out, r.encoder);
      encoder::write_encoder_log(fs::path(train_out).replace_extension(".log.csv"), r.log);
      return 0;
    }
    if (fitb->parsed()) {
      const auto g = gan::load_gan(fb_gan);
      const auto codes =
          editing::sample_labeled_codes(g.generator, editing::boundary_noise(g.generator, fb_seed), fb_n, fb_seed);
      std::vector<std::string> attrs(std::begin(editing::kBoundaryAttributes), std::end(editing::kBoundaryAttributes));
      const auto bs = editing::fit_boundaries(codes, attrs, g.generator.num_layers(), archive::file_sha256(fb_gan));
      editing::save_boundaries(fb_out, bs);
      for (const auto& b : bs) say(b.attribute + " accuracy " + std::to_string(b.accuracy));
      return 0;
    }
    if (inv->parsed()) {
      const auto m = load_models(inv_models);
      const auto cfg = inversion::inversion_config_from_json(read_config(inv_config));
      const auto img = load_image(inv_image, m.gan.generator.config().resolution);
      const auto r = inversion::invert(img, cfg, m.models());
      fs::create_directories(inv_out);
      inversion::save_result(fs::path(inv_out) / "result.inv", r);
      image::write_png(fs::path(inv_out) / "reconstruction.png", inversion::reconstruct(r, m.models()));
      inversion::write_trace_csv(fs::path(inv_out) / "loss_trace.csv", r);
      if (r.diverged) {
        say("diverged: " + r.diagnostic);
        return 1;
      }
      say("final mse " + std::to_string(r.loss_trace[static_cast<std::size_t>(r.best_step)].pixel));
      return 0;
    }
    if (ed->parsed()) {
      const auto m = load_models(ed_models);
      const auto r = inversion::load_result(ed_result);
      const auto bs = editing::load_boundaries(ed_boundaries);
      const auto& b = editing::find_by_attribute(bs, ed_attr);
      const int L = m.gan.generator.num_layers();
      const int begin = ed_layers.empty() ? 0 : ed_layers[0];
      const int end = ed_layers.empty() ? L : ed_layers[1];
      image::write_png(ed_out, editing::layerwise_edit(r.styles, b, ed_alpha, begin, end, m.gan.generator,
                                                        r.render_noise(m.encoder)));
      return 0;
    }
    if (ip->parsed()) {
      const auto m = load_models(ip_models);
      const auto a = inversion::load_result(ip_a);
      const auto b = inversion::load_result(ip_b);
      std::vector<ImageTensor> frames;
      for (int i = 0; i < ip_frames; ++i) {
        const double t = static_cast<double>(i) / (ip_frames - 1);
        frames.push_back(editing::interpolate(a.styles, b.styles, t, m.gan.generator, a.render_noise(m.encoder),
                                              b.render_noise(m.encoder)));
      }
      image::write_png(ip_out, image::tile(frames, ip_frames));
      return 0;
    }
    if (df->parsed()) {
      const auto m = load_models(df_models);
      const int res = m.gan.generator.config().resolution;
      const auto cfg = inversion::inversion_config_from_json(read_config(df_config));
      const editing::CropBox box{df_box[0], df_box[1], df_box[2], df_box[3]};
      const auto d = editing::diffuse(load_image(df_target, res), load_image(df_context, res), box, cfg, m.models());
      fs::create_directories(df_out);
      image::write_png(fs::path(df_out) / "stitched.png", d.stitched);
      image::write_png(fs::path(df_out) / "init.png", d.init);
      image::write_png(fs::path(df_out) / "result.png", d.image);
      inversion::save_result(fs::path(df_out) / "result.inv", d.inversion);
      inversion::write_trace_csv(fs::path(df_out) / "loss_trace.csv", d.inversion);
      return 0;
    }
    if (run->parsed()) {
      json j = read_config(run_config);
      j["experiment"] = run_exp;
      auto spec = harness::experiment_spec_from_json(j);
      harness::Pipeline p(spec.pipeline, say);
      const auto report = harness::run_experiment(spec, p);
      for (const auto& f : harness::emit_report(report, run_out, run_format)) say("wrote " + f.string());
      for (const auto& v : report.verdicts) {
        std::printf("%-4s %s  %s\n", v.pass ? "PASS" : "FAIL", v.name.c_str(), v.detail.c_str());
      }
      return report.passed() ? 0 : 1;
    }
    if (reg->parsed()) {
      std::optional<fs::path> bpath;
      if (!reg_boundaries.empty()) bpath = reg_boundaries;
      const auto e = service::register_model(reg_dir, reg_id, reg_models.gan, reg_models.encoder, reg_models.features,
                                             bpath);
      std::printf("%s\n", service::to_json(e).dump(2).c_str());
      return 0;
    }
    if (serve->parsed()) {
      auto cfg = service::config_from_env();
      if (!sv_registry.empty()) cfg.registry_dir = sv_registry;
      if (sv_port >= 0) cfg.port = sv_port;
      if (sv_workers > 0) cfg.workers = sv_workers;
      if (!sv_host.empty()) cfg.host = sv_host;
      // Block the signals before any thread exists so only sigwait sees them.
      sigset_t set;
      sigemptyset(&set);
      sigaddset(&set, SIGINT);
      sigaddset(&set, SIGTERM);
      pthread_sigmask(SIG_BLOCK, &set, nullptr);
      service::Service s(cfg);
      for (const auto& p : s.registry().problems()) say("skipped model " + p);
      const int port = s.start();
      say("listening on " + cfg.host + ":" + std::to_string(port) + " with " + std::to_string(cfg.workers) +
          " worker(s)");
      int sig = 0;
      sigwait(&set, &sig);
      s.stop();
      return 0;
    }
  } catch (const ValidationError& e) {
    say("invalid " + std::string(e.what()));
    return 2;
  } catch (const std::exception& e) {
    say(std::string("error: ") + e.what());
    return 1;
  }
  return 0;
}
