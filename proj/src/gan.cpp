#include "idinvert/gan.hpp"

#include <cmath>
#include <sstream>

#include "idinvert/archive.hpp"
#include "idinvert/errors.hpp"

namespace idinvert::gan {

using ad::Shape;

namespace {

constexpr double kActGain = 1.4142135623730951;
constexpr double kNormEps = 1e-5;

Var act(const Var& x) { return ad::scale(ad::leaky_relu(x, 0.2), kActGain); }

std::string layer_name(int i) { return "S.l" + std::to_string(i); }

bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

// Per-sample, per-channel normalization over the spatial dims.
Var instance_norm(const Var& x) {
  const Shape& s = x.shape();
  const double inv = 1.0 / (static_cast<double>(s[2]) * s[3]);
  const Shape stat{s[0], s[1], 1, 1};
  Var mu = ad::scale(ad::sum_to(x, stat), inv);
  Var xc = ad::sub(x, mu);
  Var var = ad::scale(ad::sum_to(ad::square(xc), stat), inv);
  return ad::mul(xc, ad::rsqrt(ad::add_scalar(var, kNormEps)));
}

}  // namespace

int num_layers(int resolution) {
  if (!is_power_of_two(resolution) || resolution < 8) throw ValidationError("resolution", "must be a power of two >= 8");
  return 2 * static_cast<int>(std::lround(std::log2(resolution))) - 2;
}

void validate(const GanConfig& c) {
  if (c.d_z < 1) throw ValidationError("d_z", "must be positive");
  if (c.d_w < 1) throw ValidationError("d_w", "must be positive");
  if (!is_power_of_two(c.resolution) || c.resolution < 8 || c.resolution > 64) {
    throw ValidationError("resolution", "must be a power of two in [8, 64]");
  }
  if (static_cast<int>(c.channels.size()) != num_layers(c.resolution) / 2) {
    throw ValidationError("channels", "need one width per resolution block");
  }
  for (int ch : c.channels)
    if (ch < 1) throw ValidationError("channels", "widths must be positive");
  if (c.mapping_layers < 1) throw ValidationError("mapping_layers", "must be positive");
  if (c.mapping_lr_mul <= 0) throw ValidationError("mapping_lr_mul", "must be positive");
  if (c.disc_base_channels < 1) throw ValidationError("disc_base_channels", "must be positive");
  if (c.steps < 0) throw ValidationError("steps", "must be non-negative");
  if (c.batch_size < 1) throw ValidationError("batch_size", "must be positive");
  if (c.lr <= 0) throw ValidationError("lr", "must be positive");
  if (c.r1_gamma < 0) throw ValidationError("r1_gamma", "must be non-negative");
  if (c.r1_interval < 1) throw ValidationError("r1_interval", "must be positive");
  if (c.mean_w_samples < 1) throw ValidationError("mean_w_samples", "must be positive");
}

GanConfig gan_config_from_json(const nlohmann::json& j) {
  GanConfig c;
  c.d_z = j.value("d_z", c.d_z);
  c.d_w = j.value("d_w", c.d_w);
  c.resolution = j.value("resolution", c.resolution);
  c.channels = j.value("channels", c.channels);
  c.mapping_layers = j.value("mapping_layers", c.mapping_layers);
  c.mapping_lr_mul = j.value("mapping_lr_mul", c.mapping_lr_mul);
  c.noise_strength_init = j.value("noise_strength_init", c.noise_strength_init);
  c.disc_base_channels = j.value("disc_base_channels", c.disc_base_channels);
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.r1_gamma = j.value("r1_gamma", c.r1_gamma);
  c.r1_interval = j.value("r1_interval", c.r1_interval);
  c.mean_w_samples = j.value("mean_w_samples", c.mean_w_samples);
  c.seed = j.value("seed", c.seed);
  validate(c);
  return c;
}

nlohmann::json to_json(const GanConfig& c) {
  return {{"d_z", c.d_z},
          {"d_w", c.d_w},
          {"resolution", c.resolution},
          {"channels", c.channels},
          {"mapping_layers", c.mapping_layers},
          {"mapping_lr_mul", c.mapping_lr_mul},
          {"noise_strength_init", c.noise_strength_init},
          {"disc_base_channels", c.disc_base_channels},
          {"steps", c.steps},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"r1_gamma", c.r1_gamma},
          {"r1_interval", c.r1_interval},
          {"mean_w_samples", c.mean_w_samples},
          {"seed", c.seed}};
}

Generator::Generator(const GanConfig& config) : config_(config) {
  validate(config_);
  std::mt19937_64 rng(config_.seed);
  for (int i = 0; i < config_.mapping_layers; ++i) {
    nn::add_dense(params_, "M.fc" + std::to_string(i), i == 0 ? config_.d_z : config_.d_w, config_.d_w, rng,
                  config_.mapping_lr_mul);
  }
  const int layers = num_layers();
  params_.add("S.const", nn::normal_tensor({1, config_.channels[0], 4, 4}, rng));
  int prev = config_.channels[0];
  for (int i = 0; i < layers; ++i) {
    const int ch = config_.channels[static_cast<std::size_t>(i / 2)];
    if (i == 0) {
      params_.add(layer_name(i) + ".bias", Tensor({ch}, 0.0));
    } else {
      nn::add_conv(params_, layer_name(i) + ".conv", prev, ch, 3, rng);
    }
    params_.add(layer_name(i) + ".noise", Tensor({1, ch, 1, 1}, config_.noise_strength_init));
    nn::add_dense(params_, layer_name(i) + ".style", config_.d_w, 2 * ch, rng);
    prev = ch;
  }
  nn::add_conv(params_, "S.rgb", prev, 3, 1, rng);
  mean_w_ = Tensor({1, config_.d_w}, 0.0);
}

Var Generator::map_latent(const Var& z) const {
  if (z.value().rank() != 2 || z.dim(1) != config_.d_z) {
    throw ad::ShapeError("map_latent expects [N, " + std::to_string(config_.d_z) + "], got " +
                         ad::shape_str(z.shape()));
  }
  const int n = z.dim(0);
  Var ms = ad::scale(ad::sum_to(ad::square(z), {n, 1}), 1.0 / config_.d_z);
  Var x = ad::mul(z, ad::rsqrt(ad::add_scalar(ms, 1e-8)));
  for (int i = 0; i < config_.mapping_layers; ++i) {
    const std::string p = "M.fc" + std::to_string(i);
    x = act(nn::dense(x, params_.at(p + ".w"), params_.at(p + ".b"), config_.mapping_lr_mul));
  }
  return x;
}

Var Generator::broadcast_w(const Var& w) const {
  if (w.value().rank() != 2 || w.dim(1) != config_.d_w) {
    throw ad::ShapeError("broadcast_w expects [N, " + std::to_string(config_.d_w) + "], got " +
                         ad::shape_str(w.shape()));
  }
  std::vector<Var> rows(static_cast<std::size_t>(num_layers()), w);
  return ad::concat_cols(rows);
}

Var Generator::synthesize(const Var& styles, std::span<const Var> noise) const {
  const int layers = num_layers();
  if (styles.value().rank() != 2 || styles.dim(1) != style_dim()) {
    throw ad::ShapeError("synthesize expects styles [N, " + std::to_string(style_dim()) + "], got " +
                         ad::shape_str(styles.shape()));
  }
  if (static_cast<int>(noise.size()) != layers) {
    throw ad::ShapeError("synthesize expects " + std::to_string(layers) + " noise maps, got " +
                         std::to_string(noise.size()));
  }
  const int n = styles.dim(0);
  for (int i = 0; i < layers; ++i) {
    const Shape& s = noise[static_cast<std::size_t>(i)].shape();
    const int r = layer_resolution(i);
    if (s.size() != 4 || (s[0] != n && s[0] != 1) || s[1] != 1 || s[2] != r || s[3] != r) {
      throw ad::ShapeError("noise map " + std::to_string(i) + " must be [N or 1, 1, " + std::to_string(r) + ", " +
                           std::to_string(r) + "], got " + ad::shape_str(s));
    }
  }
  const int c0 = config_.channels[0];
  Var x = ad::broadcast_to(params_.at("S.const"), {n, c0, 4, 4});
  for (int i = 0; i < layers; ++i) {
    const std::string p = layer_name(i);
    const int ch = config_.channels[static_cast<std::size_t>(i / 2)];
    if (i == 0) {
      x = ad::add(x, ad::reshape(params_.at(p + ".bias"), {1, ch, 1, 1}));
    } else {
      if (i % 2 == 0) x = ad::upsample2x(x);
      x = nn::conv(x, params_.at(p + ".conv.w"), params_.at(p + ".conv.b"));
    }
    x = ad::add(x, ad::mul(noise[static_cast<std::size_t>(i)], params_.at(p + ".noise")));
    x = instance_norm(act(x));
    Var row = ad::slice_cols(styles, i * config_.d_w, config_.d_w);
    Var y = nn::dense(row, params_.at(p + ".style.w"), params_.at(p + ".style.b"));
    Var ys = ad::reshape(ad::slice_cols(y, 0, ch), {n, ch, 1, 1});
    Var yb = ad::reshape(ad::slice_cols(y, ch, ch), {n, ch, 1, 1});
    x = ad::add(ad::mul(x, ad::add_scalar(ys, 1.0)), yb);
  }
  return ad::tanh(nn::conv(x, params_.at("S.rgb.w"), params_.at("S.rgb.b")));
}

Var Generator::synthesize(const Var& styles, const NoiseStack& noise) const {
  std::vector<Var> vars;
  vars.reserve(noise.size());
  for (const auto& t : noise) vars.push_back(ad::constant(t));
  return synthesize(styles, vars);
}

NoiseStack Generator::random_noise(int n, std::mt19937_64& rng) const {
  NoiseStack out;
  for (int i = 0; i < num_layers(); ++i) {
    const int r = layer_resolution(i);
    out.push_back(nn::normal_tensor({n, 1, r, r}, rng));
  }
  return out;
}

Tensor Generator::truncate(const Tensor& w, double psi) const {
  if (w.rank() != 2 || w.dim(1) != config_.d_w) throw ad::ShapeError("truncate expects [N, d_w]");
  Tensor out = w;
  for (int r = 0; r < w.dim(0); ++r)
    for (int c = 0; c < w.dim(1); ++c) {
      const std::size_t k = static_cast<std::size_t>(r) * w.dim(1) + c;
      out[k] = mean_w_[static_cast<std::size_t>(c)] + psi * (w[k] - mean_w_[static_cast<std::size_t>(c)]);
    }
  return out;
}

Tensor Generator::estimate_mean_w(int samples, std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  Tensor acc({1, config_.d_w}, 0.0);
  constexpr int kChunk = 1000;
  for (int done = 0; done < samples; done += kChunk) {
    const int n = std::min(kChunk, samples - done);
    Tensor w = map(nn::normal_tensor({n, config_.d_z}, rng));
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < config_.d_w; ++c) acc[static_cast<std::size_t>(c)] += w[static_cast<std::size_t>(r) * config_.d_w + c];
  }
  for (double& v : acc.data()) v /= samples;
  return acc;
}

Tensor Generator::render(const Tensor& styles, const NoiseStack& noise) const {
  ad::NoGradGuard ng;
  return synthesize(ad::constant(styles), noise).value();
}

Tensor Generator::map(const Tensor& z) const {
  ad::NoGradGuard ng;
  return map_latent(ad::constant(z)).value();
}

Discriminator::Discriminator(const GanConfig& config, std::uint64_t seed) : resolution_(config.resolution) {
  std::mt19937_64 rng(seed);
  blocks_ = num_layers(resolution_) / 2;
  const int base = config.disc_base_channels;
  const int cap = 4 * base;
  nn::add_conv(params_, "D.rgb", 3, base, 1, rng);
  int prev = base;
  for (int b = 0; b < blocks_; ++b) {
    const int ch = std::min(base << (b + 1), cap);
    nn::add_conv(params_, "D.b" + std::to_string(b), prev, ch, 3, rng);
    prev = ch;
  }
  nn::add_dense(params_, "D.fc0", prev * 16, 2 * prev, rng);
  nn::add_dense(params_, "D.fc1", 2 * prev, 1, rng);
}

Var Discriminator::forward(const Var& x) const {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != resolution_ || s[3] != resolution_) {
    throw ad::ShapeError("discriminator expects [N, 3, " + std::to_string(resolution_) + ", " +
                         std::to_string(resolution_) + "], got " + ad::shape_str(s));
  }
  Var h = act(nn::conv(x, params_.at("D.rgb.w"), params_.at("D.rgb.b")));
  for (int b = 0; b < blocks_; ++b) {
    const std::string p = "D.b" + std::to_string(b);
    h = act(nn::conv(h, params_.at(p + ".w"), params_.at(p + ".b")));
    if (b + 1 < blocks_) h = ad::avgpool2x(h);
  }
  const int n = s[0];
  h = ad::reshape(h, {n, h.dim(1) * h.dim(2) * h.dim(3)});
  h = act(nn::dense(h, params_.at("D.fc0.w"), params_.at("D.fc0.b")));
  return nn::dense(h, params_.at("D.fc1.w"), params_.at("D.fc1.b"));
}

Var r1_penalty(const std::function<Var(const Var&)>& disc, const Tensor& reals, double gamma) {
  Var x = ad::leaf(reals);
  Var d = ad::sum(disc(x));
  Var gx = ad::grad(d, std::span<const Var>(&x, 1), true)[0];
  return ad::scale(ad::sum(ad::square(gx)), 0.5 * gamma / reals.dim(0));
}

namespace {

Tensor gather_batch(std::span<const ImageTensor> data, std::span<const std::size_t> idx) {
  const ImageTensor& first = data[idx[0]];
  const std::size_t per = first.size();
  Tensor out({static_cast<int>(idx.size()), first.channels, first.height, first.width});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& img = data[idx[i]].data;
    std::copy(img.begin(), img.end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return out;
}

std::vector<Var> param_grads(const Var& loss, const nn::ParamSet& params) {
  auto vars = params.vars();
  return ad::grad(loss, vars);
}

void check_finite(double v, const char* what, int step) {
  if (!std::isfinite(v)) {
    throw DivergenceError(std::string("non-finite ") + what + " at step " + std::to_string(step));
  }
}

}  // namespace

GanModel train_gan(std::span<const ImageTensor> dataset, const GanConfig& config, const ProgressFn& progress) {
  validate(config);
  if (dataset.empty()) throw ValidationError("dataset", "must contain at least one image");
  for (const auto& img : dataset) {
    if (img.channels != 3 || img.height != config.resolution || img.width != config.resolution) {
      throw ValidationError("dataset", "images must be 3x" + std::to_string(config.resolution) + "x" +
                                           std::to_string(config.resolution));
    }
  }
  GanModel model{Generator(config), Discriminator(config, config.seed * 2 + 1), {}};
  Generator& g = model.generator;
  Discriminator& d = model.discriminator;
  nn::AdamConfig adam{config.lr, config.beta1, config.beta2, 1e-8};
  nn::Adam g_opt(adam), d_opt(adam);
  std::mt19937_64 rng(config.seed ^ 0x9E3779B97F4A7C15ULL);
  std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
  const int bs = config.batch_size;
  auto disc = [&](const Var& x) { return d.forward(x); };

  for (int step = 0; step < config.steps; ++step) {
    GanLogEntry entry;
    entry.step = step;

    // Discriminator update on detached fakes.
    std::vector<std::size_t> idx(static_cast<std::size_t>(bs));
    for (auto& i : idx) i = pick(rng);
    Tensor reals = gather_batch(dataset, idx);
    Tensor fakes;
    {
      ad::NoGradGuard ng;
      Var w = g.map_latent(ad::constant(nn::normal_tensor({bs, config.d_z}, rng)));
      fakes = g.synthesize(g.broadcast_w(w), g.random_noise(bs, rng)).value();
    }
    Var d_loss = ad::add(ad::mean(ad::softplus(d.forward(ad::constant(fakes)))),
                         ad::mean(ad::softplus(ad::neg(d.forward(ad::constant(reals))))));
    entry.d_loss = d_loss.item();
    Var d_total = d_loss;
    if (config.r1_gamma > 0 && step % config.r1_interval == 0) {
      Var r1 = r1_penalty(disc, reals, config.r1_gamma);
      entry.r1 = r1.item();
      d_total = ad::add(d_total, ad::scale(r1, config.r1_interval));
    }
    check_finite(entry.d_loss, "discriminator loss", step);
    check_finite(entry.r1, "R1 penalty", step);
    {
      auto grads = param_grads(d_total, d.params());
      auto vars = d.params().vars();
      d_opt.step(vars, grads);
    }

    // Generator update through the discriminator.
    Var w = g.map_latent(ad::constant(nn::normal_tensor({bs, config.d_z}, rng)));
    Var fake = g.synthesize(g.broadcast_w(w), g.random_noise(bs, rng));
    Var g_loss = ad::mean(ad::softplus(ad::neg(d.forward(fake))));
    entry.g_loss = g_loss.item();
    check_finite(entry.g_loss, "generator loss", step);
    {
      auto grads = param_grads(g_loss, g.params());
      auto vars = g.params().vars();
      g_opt.step(vars, grads);
    }
    model.log.push_back(entry);
    if (progress) progress(entry);
  }
  g.params().round_to_float();
  d.params().round_to_float();
  Tensor mw = g.estimate_mean_w(config.mean_w_samples, config.seed ^ 0x5EEDULL);
  for (double& v : mw.data()) v = static_cast<double>(static_cast<float>(v));
  g.set_mean_w(mw);
  return model;
}

std::vector<ImageTensor> sample(const Generator& g, int n, std::uint64_t seed) {
  if (n < 0) throw ValidationError("n", "must be non-negative");
  std::vector<ImageTensor> out;
  std::mt19937_64 rng(seed);
  constexpr int kChunk = 64;
  for (int done = 0; done < n; done += kChunk) {
    const int m = std::min(kChunk, n - done);
    Tensor z = nn::normal_tensor({m, g.config().d_z}, rng);
    NoiseStack noise = g.random_noise(m, rng);
    ad::NoGradGuard ng;
    Tensor imgs = g.synthesize(g.broadcast_w(g.map_latent(ad::constant(z))), noise).value();
    for (auto& img : image::unbatch(imgs)) out.push_back(std::move(img));
  }
  return out;
}

void save_gan(const std::filesystem::path& path, const GanModel& model) {
  archive::Archive ar;
  ar.meta = {{"kind", "gan"}, {"config", to_json(model.generator.config())}};
  ar.put_params("G/", model.generator.params());
  ar.put_params("D/", model.discriminator.params());
  ar.put("mean_w", model.generator.mean_w());
  archive::save(path, ar);
}

GanModel load_gan(const std::filesystem::path& path) {
  archive::Archive ar = archive::load(path);
  if (ar.meta.value("kind", "") != "gan") throw archive::FormatError(path.string() + " is not a GAN checkpoint");
  GanConfig cfg = gan_config_from_json(ar.meta.at("config"));
  GanModel model{Generator(cfg), Discriminator(cfg, cfg.seed * 2 + 1), {}};
  ar.load_params("G/", model.generator.params());
  ar.load_params("D/", model.discriminator.params());
  model.generator.set_mean_w(ar.get("mean_w"));
  return model;
}

void write_gan_log(const std::filesystem::path& path, const std::vector<GanLogEntry>& log) {
  std::ostringstream os;
  os.precision(17);
  os << "step,d_loss,g_loss,r1\n";
  for (const auto& e : log) os << e.step << ',' << e.d_loss << ',' << e.g_loss << ',' << e.r1 << '\n';
  archive::write_text(path, os.str());
}

}  // namespace idinvert::gan
