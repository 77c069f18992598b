#include "idinvert/encoder.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "idinvert/archive.hpp"
#include "idinvert/errors.hpp"

namespace idinvert::encoder {

namespace {

constexpr double kActGain = 1.4142135623730951;

Var act(const Var& x) { return ad::scale(ad::leaky_relu(x, 0.2), kActGain); }

std::string stage_conv(int s, int k) { return "E.s" + std::to_string(s) + "c" + std::to_string(k); }
std::string noise_head(int layer) { return "E.noise" + std::to_string(layer); }

const char* to_string(AdversarialLoss k) { return k == AdversarialLoss::linear ? "linear" : "logistic"; }

AdversarialLoss adversarial_from_string(const std::string& s) {
  if (s == "linear") return AdversarialLoss::linear;
  if (s == "logistic") return AdversarialLoss::logistic;
  throw ValidationError("adversarial", "must be 'linear' or 'logistic'");
}

Tensor gather(std::span<const ImageTensor> data, std::span<const std::size_t> idx) {
  const std::size_t per = data[idx[0]].size();
  Tensor out({static_cast<int>(idx.size()), data[idx[0]].channels, data[idx[0]].height, data[idx[0]].width});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(data[idx[i]].data.begin(), data[idx[i]].data.end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(i * per));
  return out;
}

}  // namespace

void validate(const EncoderConfig& c, int num_layers) {
  if (c.depth < 6 || (c.depth - 2) % 4 != 0) throw ValidationError("depth", "must be 6, 10, 14, ...");
  if (static_cast<int>(c.channels.size()) != num_layers / 2) {
    throw ValidationError("channels", "need one width per generator resolution block");
  }
  for (int ch : c.channels)
    if (ch < 1) throw ValidationError("channels", "widths must be positive");
  if (c.noise_blocks < 0 || c.noise_blocks > num_layers / 2) {
    throw ValidationError("noise_blocks", "must lie in [0, " + std::to_string(num_layers / 2) + "]");
  }
  if (c.lambda_vgg < 0) throw ValidationError("lambda_vgg", "must be non-negative");
  if (c.perceptual_ratio < 0) throw ValidationError("perceptual_ratio", "must be non-negative");
  if (c.lambda_adv < 0) throw ValidationError("lambda_adv", "must be non-negative");
  if (c.r1_gamma < 0) throw ValidationError("r1_gamma", "must be non-negative");
  if (c.steps < 0) throw ValidationError("steps", "must be non-negative");
  if (c.batch_size < 1) throw ValidationError("batch_size", "must be positive");
  if (c.lr <= 0) throw ValidationError("lr", "must be positive");
  if (c.d_lr <= 0) throw ValidationError("d_lr", "must be positive");
  if (c.epoch_size < 1) throw ValidationError("epoch_size", "must be positive");
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.depth = j.value("depth", c.depth);
  c.channels = j.value("channels", c.channels);
  c.w_mode = j.value("w_mode", c.w_mode);
  c.use_mean_offset = j.value("use_mean_offset", c.use_mean_offset);
  c.noise_blocks = j.value("noise_blocks", c.noise_blocks);
  c.lambda_vgg = j.value("lambda_vgg", c.lambda_vgg);
  c.lambda_vgg_auto = j.value("lambda_vgg_auto", c.lambda_vgg_auto);
  c.perceptual_ratio = j.value("perceptual_ratio", c.perceptual_ratio);
  c.lambda_adv = j.value("lambda_adv", c.lambda_adv);
  c.r1_gamma = j.value("r1_gamma", c.r1_gamma);
  if (j.contains("adversarial")) c.adversarial = adversarial_from_string(j.at("adversarial").get<std::string>());
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.d_lr = j.value("d_lr", c.d_lr);
  c.seed = j.value("seed", c.seed);
  c.epoch_size = j.value("epoch_size", c.epoch_size);
  return c;
}

nlohmann::json to_json(const EncoderConfig& c) {
  return {{"depth", c.depth},
          {"channels", c.channels},
          {"w_mode", c.w_mode},
          {"use_mean_offset", c.use_mean_offset},
          {"noise_blocks", c.noise_blocks},
          {"lambda_vgg", c.lambda_vgg},
          {"lambda_vgg_auto", c.lambda_vgg_auto},
          {"perceptual_ratio", c.perceptual_ratio},
          {"lambda_adv", c.lambda_adv},
          {"r1_gamma", c.r1_gamma},
          {"adversarial", to_string(c.adversarial)},
          {"steps", c.steps},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"d_lr", c.d_lr},
          {"seed", c.seed},
          {"epoch_size", c.epoch_size}};
}

Encoder::Encoder(const EncoderConfig& config, const gan::Generator& g)
    : config_(config), num_layers_(g.num_layers()), d_w_(g.d_w()), resolution_(g.config().resolution) {
  validate(config_, num_layers_);
  std::mt19937_64 rng(config_.seed);
  const auto convs = stage_convs();
  nn::add_conv(params_, "E.stem", 3, config_.channels[0], 3, rng);
  int prev = config_.channels[0];
  for (std::size_t s = 0; s < config_.channels.size(); ++s) {
    for (int k = 0; k < convs[s]; ++k) {
      nn::add_conv(params_, stage_conv(static_cast<int>(s), k), prev, config_.channels[s], 3, rng);
      prev = config_.channels[s];
    }
  }
  nn::add_dense(params_, "E.fc", prev * 16, config_.w_mode ? d_w_ : num_layers_ * d_w_, rng);
  const int stages = static_cast<int>(config_.channels.size());
  for (int layer = 0; layer < num_layers_; ++layer) {
    if (!predicts_noise(layer)) continue;
    const int s = stages - 1 - layer / 2;
    nn::add_conv(params_, noise_head(layer), config_.channels[static_cast<std::size_t>(s)], 1, 1, rng);
  }
  // Unit head output should move the layer as much as unit noise would after
  // the generator's learned strength, which is tiny at clean high resolutions.
  noise_gain_.assign(static_cast<std::size_t>(num_layers_), 1.0);
  for (int layer = 0; layer < num_layers_; ++layer) {
    if (!predicts_noise(layer)) continue;
    const auto& s = g.params().at("S.l" + std::to_string(layer) + ".noise").value();
    double m = 0.0;
    for (double v : s.data()) m += std::fabs(v);
    noise_gain_[static_cast<std::size_t>(layer)] = 1.0 / std::max(m / static_cast<double>(s.size()), 1e-3);
  }
  mean_w_ = g.mean_w();
  std::mt19937_64 noise_rng(config_.seed ^ 0xF1C5ED0015EULL);
  fixed_noise_ = g.random_noise(1, noise_rng);
}

std::vector<int> Encoder::stage_convs() const {
  return std::vector<int>(config_.channels.size(), (config_.depth - 2) / 4);
}

Var Encoder::head(const Var& x) const { return run(x, false).styles; }

EncoderOutput Encoder::forward(const Var& x) const { return run(x, config_.use_mean_offset); }

EncoderOutput Encoder::run(const Var& x, bool with_offset) const {
  const auto& s = x.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != resolution_ || s[3] != resolution_) {
    throw ad::ShapeError("encoder expects [N, 3, " + std::to_string(resolution_) + ", " + std::to_string(resolution_) +
                         "], got " + ad::shape_str(s));
  }
  const int n = s[0];
  const int stages = static_cast<int>(config_.channels.size());
  const auto convs = stage_convs();
  std::vector<Var> stage_out;
  Var h = act(nn::conv(x, params_.at("E.stem.w"), params_.at("E.stem.b")));
  for (int st = 0; st < stages; ++st) {
    for (int k = 0; k < convs[static_cast<std::size_t>(st)]; ++k) {
      h = act(nn::conv(h, params_.at(stage_conv(st, k) + ".w"), params_.at(stage_conv(st, k) + ".b")));
    }
    stage_out.push_back(h);
    if (st + 1 < stages) h = ad::avgpool2x(h);
  }
  h = ad::reshape(h, {n, static_cast<int>(h.size()) / n});
  Var code = nn::dense(h, params_.at("E.fc.w"), params_.at("E.fc.b"));
  if (config_.w_mode) {
    std::vector<Var> rows(static_cast<std::size_t>(num_layers_), code);
    code = ad::concat_cols(rows);
  }
  EncoderOutput out;
  if (with_offset) {
    Tensor tiled({1, num_layers_ * d_w_});
    for (int l = 0; l < num_layers_; ++l)
      for (int c = 0; c < d_w_; ++c) tiled[static_cast<std::size_t>(l * d_w_ + c)] = mean_w_[static_cast<std::size_t>(c)];
    code = ad::add(code, ad::constant(tiled));
  }
  out.styles = code;
  for (int layer = 0; layer < num_layers_; ++layer) {
    if (predicts_noise(layer)) {
      const Var& feat = stage_out[static_cast<std::size_t>(stages - 1 - layer / 2)];
      Var n = nn::conv(feat, params_.at(noise_head(layer) + ".w"), params_.at(noise_head(layer) + ".b"));
      out.noise.push_back(ad::scale(n, noise_gain_[static_cast<std::size_t>(layer)]));
    } else {
      out.noise.push_back(ad::constant(fixed_noise_[static_cast<std::size_t>(layer)]));
    }
  }
  return out;
}

Encoded Encoder::encode(const Tensor& x) const {
  ad::NoGradGuard ng;
  EncoderOutput o = forward(ad::constant(x));
  Encoded e;
  e.styles = o.styles.value();
  if (config_.noise_blocks > 0) {
    NoiseStack ns;
    for (const auto& v : o.noise) ns.push_back(v.value());
    e.noise = std::move(ns);
  }
  return e;
}

NoiseStack Encoder::noise_for(const Encoded& e) const { return e.noise ? *e.noise : fixed_noise_; }

void Encoder::restore_state(Tensor mean_w, NoiseStack fixed_noise, std::vector<double> noise_gain) {
  if (mean_w.size() != static_cast<std::size_t>(d_w_) || fixed_noise.size() != static_cast<std::size_t>(num_layers_) ||
      noise_gain.size() != static_cast<std::size_t>(num_layers_)) {
    throw ad::ShapeError("encoder state does not match the architecture");
  }
  noise_gain_ = std::move(noise_gain);
  mean_w_ = std::move(mean_w);
  fixed_noise_ = std::move(fixed_noise);
}

Var encoder_regularizer(const Var& z, const gan::Generator& g, const Encoder& e, std::span<const Var> noise) {
  Var rec = g.synthesize(z, noise);
  Var back = e.forward(rec).styles;
  return ad::mean(ad::square(ad::sub(z, back)));
}

EncoderLossTerms encoder_loss(const Encoder& e, const gan::Generator& g, const gan::Discriminator& d,
                              const features::FeatureNet& f, const Var& x, double lambda_vgg, double lambda_adv,
                              AdversarialLoss kind) {
  EncoderOutput out = e.forward(x);
  EncoderLossTerms t;
  t.reconstruction = g.synthesize(out.styles, out.noise);
  t.pixel = ad::mean(ad::square(ad::sub(x, t.reconstruction)));
  t.total = t.pixel;
  if (lambda_vgg > 0) {
    Var fx;
    {
      ad::NoGradGuard ng;
      fx = ad::constant(f.extract_features(x).value());
    }
    t.perceptual = ad::mean(ad::square(ad::sub(fx, f.extract_features(t.reconstruction))));
    t.total = ad::add(t.total, ad::scale(t.perceptual, lambda_vgg));
  } else {
    t.perceptual = ad::scalar(0.0);
  }
  if (lambda_adv > 0) {
    Var logits = d.forward(t.reconstruction);
    t.adversarial = kind == AdversarialLoss::linear ? ad::neg(ad::mean(logits))
                                                    : ad::mean(ad::softplus(ad::neg(logits)));
    t.total = ad::add(t.total, ad::scale(t.adversarial, lambda_adv));
  } else {
    t.adversarial = ad::scalar(0.0);
  }
  return t;
}

Var discriminator_loss(const gan::Discriminator& d, const Tensor& reals, const Tensor& fakes, double gamma,
                       AdversarialLoss kind, double* r1_out) {
  Var xr = ad::leaf(reals);
  Var real_logits = d.forward(xr);
  Var fake_logits = d.forward(ad::constant(fakes));
  Var loss = kind == AdversarialLoss::linear
                 ? ad::sub(ad::mean(fake_logits), ad::mean(real_logits))
                 : ad::add(ad::mean(ad::softplus(fake_logits)), ad::mean(ad::softplus(ad::neg(real_logits))));
  double r1v = 0.0;
  if (gamma > 0) {
    Var gx = ad::grad(ad::sum(real_logits), std::span<const Var>(&xr, 1), true)[0];
    Var r1 = ad::scale(ad::sum(ad::square(gx)), 0.5 * gamma / reals.dim(0));
    r1v = r1.item();
    loss = ad::add(loss, r1);
  }
  if (r1_out) *r1_out = r1v;
  return loss;
}

EncoderTrainResult train_domain_guided_encoder(const gan::Generator& g, const gan::Discriminator& disc_init,
                                               const features::FeatureNet& f, std::span<const ImageTensor> dataset,
                                               const EncoderConfig& config, const std::string& generator_hash,
                                               const EncoderProgressFn& progress,
                                               const std::optional<std::filesystem::path>& last_good) {
  validate(config, g.num_layers());
  if (dataset.empty()) throw ValidationError("dataset", "must contain at least one image");
  const auto t0 = std::chrono::steady_clock::now();
  EncoderTrainResult r{Encoder(config, g), gan::Discriminator(), {}, 0.0, 0.0, 0.0};
  // Copy, then replace the shared parameter handles with fresh leaves.
  r.discriminator = disc_init;
  r.discriminator.params() = disc_init.params().clone();
  Encoder& e = r.encoder;
  e.generator_hash = generator_hash;
  std::mt19937_64 rng(config.seed ^ 0xE1C0DE5ULL);
  std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
  nn::Adam e_opt(nn::AdamConfig{config.lr, 0.9, 0.99, 1e-8});
  nn::Adam d_opt(nn::AdamConfig{config.d_lr, 0.9, 0.99, 1e-8});
  const int bs = config.batch_size;
  const int epoch_steps = std::max(1, (config.epoch_size + bs - 1) / bs);

  double lambda_vgg = config.lambda_vgg;
  nn::ParamSet snapshot = e.params().clone();
  double epoch_acc = 0.0;
  int epoch_count = 0;
  for (int step = 0; step < config.steps; ++step) {
    std::vector<std::size_t> idx(static_cast<std::size_t>(bs));
    for (auto& i : idx) i = pick(rng);
    Tensor reals = gather(dataset, idx);
    Var x = ad::constant(reals);
    if (step == 0 && config.lambda_vgg_auto) {
      ad::NoGradGuard ng;
      auto t = encoder_loss(e, g, r.discriminator, f, x, 1.0, 0.0, config.adversarial);
      const double p = t.pixel.item(), v = t.perceptual.item();
      lambda_vgg = v > 0 ? config.perceptual_ratio * p / v : config.lambda_vgg;
    }
    auto terms = encoder_loss(e, g, r.discriminator, f, x, lambda_vgg, config.lambda_adv, config.adversarial);
    EncoderLogEntry entry;
    entry.step = step;
    entry.total = terms.total.item();
    entry.pixel = terms.pixel.item();
    entry.perceptual = terms.perceptual.item();
    entry.adversarial = terms.adversarial.item();
    Tensor fakes = terms.reconstruction.value();
    if (!std::isfinite(entry.total)) {
      if (last_good) {
        Encoder good = e;
        good.params() = snapshot;
        good.lambda_vgg_effective = lambda_vgg;
        save_encoder(*last_good, good);
      }
      throw DivergenceError("non-finite encoder loss at step " + std::to_string(step));
    }
    if (step % 50 == 0) snapshot = e.params().clone();
    {
      auto vars = e.params().vars();
      auto grads = ad::grad(terms.total, vars);
      e_opt.step(vars, grads);
    }
    if (config.lambda_adv > 0) {
      Var dl = discriminator_loss(r.discriminator, reals, fakes, config.r1_gamma, config.adversarial, &entry.r1);
      entry.d_loss = dl.item();
      if (!std::isfinite(entry.d_loss)) throw DivergenceError("non-finite discriminator loss at step " + std::to_string(step));
      auto vars = r.discriminator.params().vars();
      auto grads = ad::grad(dl, vars);
      d_opt.step(vars, grads);
    }
    if (step < epoch_steps) {
      epoch_acc += entry.pixel + lambda_vgg * entry.perceptual;
      ++epoch_count;
    }
    r.log.push_back(entry);
    if (progress) progress(entry);
  }
  e.params().round_to_float();
  r.discriminator.params().round_to_float();
  e.lambda_vgg_effective = lambda_vgg;
  r.lambda_vgg_effective = lambda_vgg;
  r.first_epoch_mean_loss = epoch_count ? epoch_acc / epoch_count : 0.0;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  e.train_summary = {{"kind", "domain_guided"},
                     {"lambda_vgg_effective", lambda_vgg},
                     {"lambda_vgg_rescale", lambda_vgg / kReferenceLambdaVgg},
                     {"first_epoch_mean_loss", r.first_epoch_mean_loss},
                     {"final_pixel", r.log.empty() ? 0.0 : r.log.back().pixel}};
  return r;
}

EncoderTrainResult train_conventional_encoder(const gan::Generator& g, const EncoderConfig& config,
                                              const std::string& generator_hash, const EncoderProgressFn& progress) {
  validate(config, g.num_layers());
  const auto t0 = std::chrono::steady_clock::now();
  EncoderTrainResult r{Encoder(config, g), gan::Discriminator(), {}, 0.0, 0.0, 0.0};
  Encoder& e = r.encoder;
  e.generator_hash = generator_hash;
  e.lambda_vgg_effective = 0.0;
  std::mt19937_64 rng(config.seed ^ 0xC0DE1ULL);
  nn::Adam opt(nn::AdamConfig{config.lr, 0.9, 0.99, 1e-8});
  const int bs = config.batch_size;
  const int epoch_steps = std::max(1, (config.epoch_size + bs - 1) / bs);
  std::vector<Var> noise;
  for (const auto& t : e.fixed_noise()) noise.push_back(ad::constant(t));
  double epoch_acc = 0.0;
  int epoch_count = 0;
  for (int step = 0; step < config.steps; ++step) {
    Tensor styles, images;
    {
      ad::NoGradGuard ng;
      Var w = g.map_latent(ad::constant(nn::normal_tensor({bs, g.config().d_z}, rng)));
      Var s = g.broadcast_w(w);
      styles = s.value();
      images = g.synthesize(s, noise).value();
    }
    Var pred = e.forward(ad::constant(images)).styles;
    Var loss = ad::mean(ad::square(ad::sub(pred, ad::constant(styles))));
    EncoderLogEntry entry;
    entry.step = step;
    entry.total = loss.item();
    if (!std::isfinite(entry.total)) throw DivergenceError("non-finite encoder loss at step " + std::to_string(step));
    auto vars = e.params().vars();
    auto grads = ad::grad(loss, vars);
    opt.step(vars, grads);
    if (step < epoch_steps) {
      epoch_acc += entry.total;
      ++epoch_count;
    }
    r.log.push_back(entry);
    if (progress) progress(entry);
  }
  e.params().round_to_float();
  r.first_epoch_mean_loss = epoch_count ? epoch_acc / epoch_count : 0.0;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  e.train_summary = {{"kind", "conventional"}, {"first_epoch_mean_loss", r.first_epoch_mean_loss}};
  return r;
}

void save_encoder(const std::filesystem::path& path, const Encoder& e) {
  archive::Archive ar;
  ar.meta = {{"kind", "encoder"},
             {"config", to_json(e.config())},
             {"num_layers", e.num_layers()},
             {"d_w", e.d_w()},
             {"resolution", e.resolution()},
             {"generator_hash", e.generator_hash},
             {"lambda_vgg_effective", e.lambda_vgg_effective},
             {"lambda_vgg_rescale", e.lambda_vgg_effective / kReferenceLambdaVgg},
             {"train_summary", e.train_summary}};
  ar.put_params("E/", e.params());
  ar.put("mean_w", e.mean_w());
  for (std::size_t i = 0; i < e.fixed_noise().size(); ++i) ar.put("fixed_noise/" + std::to_string(i), e.fixed_noise()[i]);
  ar.put("noise_gain", Tensor({e.num_layers()}, e.noise_gain()));
  archive::save(path, ar);
}

Encoder load_encoder(const std::filesystem::path& path, const gan::Generator& g) {
  archive::Archive ar = archive::load(path);
  if (ar.meta.value("kind", "") != "encoder") throw archive::FormatError(path.string() + " is not an encoder checkpoint");
  if (ar.meta.value("num_layers", 0) != g.num_layers() || ar.meta.value("d_w", 0) != g.d_w() ||
      ar.meta.value("resolution", 0) != g.config().resolution) {
    throw archive::FormatError(path.string() + " was trained for a different generator shape");
  }
  Encoder e(encoder_config_from_json(ar.meta.at("config")), g);
  ar.load_params("E/", e.params());
  e.generator_hash = ar.meta.value("generator_hash", "");
  e.lambda_vgg_effective = ar.meta.value("lambda_vgg_effective", kReferenceLambdaVgg);
  e.train_summary = ar.meta.value("train_summary", nlohmann::json::object());
  // Stored copies win over the generator's so the checkpoint is self-contained.
  NoiseStack ns;
  for (int i = 0; i < g.num_layers(); ++i) ns.push_back(ar.get("fixed_noise/" + std::to_string(i)));
  const auto& gain = ar.get("noise_gain").data();
  e.restore_state(ar.get("mean_w"), std::move(ns), std::vector<double>(gain.begin(), gain.end()));
  return e;
}

void write_encoder_log(const std::filesystem::path& path, const std::vector<EncoderLogEntry>& log) {
  std::ostringstream os;
  os.precision(17);
  os << "step,total,pixel,perceptual,adversarial,d_loss,r1\n";
  for (const auto& e : log) {
    os << e.step << ',' << e.total << ',' << e.pixel << ',' << e.perceptual << ',' << e.adversarial << ','
       << e.d_loss << ',' << e.r1 << '\n';
  }
  archive::write_text(path, os.str());
}

}  // namespace idinvert::encoder
