#include "idinvert/inversion.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "idinvert/archive.hpp"
#include "idinvert/errors.hpp"

namespace idinvert::inversion {

std::string to_string(InitMode mode) {
  switch (mode) {
    case InitMode::encoder: return "encoder";
    case InitMode::mean_w: return "mean_w";
    case InitMode::random: return "random";
  }
  return "unknown";
}

InitMode init_mode_from_string(const std::string& name) {
  if (name == "encoder") return InitMode::encoder;
  if (name == "mean_w") return InitMode::mean_w;
  if (name == "random") return InitMode::random;
  throw ValidationError("init", "must be one of encoder, mean_w, random");
}

void validate(const InversionConfig& c, const ImageTensor& image) {
  if (c.lambda_vgg && (*c.lambda_vgg < 0 || !std::isfinite(*c.lambda_vgg))) {
    throw ValidationError("lambda_vgg", "must be finite and >= 0");
  }
  if (c.lambda_dom < 0 || !std::isfinite(c.lambda_dom)) throw ValidationError("lambda_dom", "must be finite and >= 0");
  if (c.steps < 0) throw ValidationError("steps", "must be >= 0");
  if (!(c.step_size > 0) || !std::isfinite(c.step_size)) throw ValidationError("step_size", "must be positive");
  if (c.mask) {
    const auto& m = *c.mask;
    if (m.height != image.height || m.width != image.width || (m.channels != 1 && m.channels != image.channels)) {
      throw ValidationError("mask", "shape must match the image");
    }
    for (double v : m.data)
      if (v != 0.0 && v != 1.0) throw ValidationError("mask", "values must be 0 or 1");
  }
}

InversionConfig inversion_config_from_json(const nlohmann::json& j) {
  InversionConfig c;
  if (j.contains("lambda_vgg") && !j.at("lambda_vgg").is_null()) c.lambda_vgg = j.at("lambda_vgg").get<double>();
  c.lambda_dom = j.value("lambda_dom", c.lambda_dom);
  c.steps = j.value("steps", c.steps);
  c.step_size = j.value("step_size", c.step_size);
  c.optimize_noise = j.value("optimize_noise", c.optimize_noise);
  if (j.contains("init")) c.init = init_mode_from_string(j.at("init").get<std::string>());
  c.seed = j.value("seed", c.seed);
  return c;
}

nlohmann::json to_json(const InversionConfig& c, double lambda_vgg_used) {
  return {{"lambda_vgg", lambda_vgg_used}, {"lambda_dom", c.lambda_dom},     {"steps", c.steps},
          {"step_size", c.step_size},      {"optimize_noise", c.optimize_noise}, {"init", to_string(c.init)},
          {"seed", c.seed},                {"masked", c.mask.has_value()}};
}

Var objective_graph(const Var& styles, std::span<const Var> noise, const Tensor& targets,
                    const std::optional<Tensor>& mask, double lambda_vgg, double lambda_dom, const Models& models,
                    std::vector<LossTerms>* terms) {
  const int n = targets.dim(0);
  if (styles.value().rank() != 2 || styles.dim(0) != n) {
    throw ad::ShapeError("objective: styles batch " + ad::shape_str(styles.shape()) + " does not match " +
                         std::to_string(n) + " images");
  }
  Var rec = models.generator.synthesize(styles, noise);
  if (rec.shape() != targets.shape()) {
    throw ad::ShapeError("objective: image shape " + ad::shape_str(targets.shape()) + " does not match generator output " +
                         ad::shape_str(rec.shape()));
  }
  Tensor tx = targets;
  Var mrec = rec;
  if (mask) {
    Var m = ad::constant(*mask);
    mrec = ad::mul(rec, m);
    ad::NoGradGuard ng;
    tx = ad::mul(ad::constant(targets), m).value();
  }
  const Var x = ad::constant(tx);
  const double per_image = static_cast<double>(targets.size()) / n;
  Var pixel = ad::reshape(ad::scale(ad::sum_to(ad::square(ad::sub(mrec, x)), {n, 1, 1, 1}), 1.0 / per_image), {n, 1});
  Var total = pixel;

  auto feature_term = [&](const Var& image) {
    Var fx;
    {
      ad::NoGradGuard ng;
      fx = ad::constant(models.features.extract_features(x).value());
    }
    Var fr = models.features.extract_features(image);
    return ad::scale(ad::sum_to(ad::square(ad::sub(fr, fx)), {n, 1}), 1.0 / fx.dim(1));
  };
  auto regularizer_term = [&](const Var& image) {
    Var back = models.encoder.forward(image).styles;
    return ad::scale(ad::sum_to(ad::square(ad::sub(styles, back)), {n, 1}), 1.0 / styles.dim(1));
  };

  Var perceptual, regularizer;
  if (lambda_vgg > 0) {
    perceptual = feature_term(mrec);
    total = ad::add(total, ad::scale(perceptual, lambda_vgg));
  } else if (terms) {
    ad::NoGradGuard ng;
    perceptual = feature_term(ad::constant(mrec.value()));
  }
  if (lambda_dom > 0) {
    regularizer = regularizer_term(rec);
    total = ad::add(total, ad::scale(regularizer, lambda_dom));
  } else if (terms) {
    ad::NoGradGuard ng;
    regularizer = regularizer_term(ad::constant(rec.value()));
  }
  if (terms) {
    terms->assign(static_cast<std::size_t>(n), LossTerms{});
    for (int i = 0; i < n; ++i) {
      auto& t = (*terms)[static_cast<std::size_t>(i)];
      t.pixel = pixel.value()[static_cast<std::size_t>(i)];
      t.perceptual = perceptual.value()[static_cast<std::size_t>(i)];
      t.regularizer = regularizer.value()[static_cast<std::size_t>(i)];
      t.total = total.value()[static_cast<std::size_t>(i)];
    }
  }
  return ad::sum(total);
}

namespace {

using ad::Shape;

std::optional<Tensor> mask_tensor(const InversionConfig& c) {
  if (!c.mask) return std::nullopt;
  const auto& m = *c.mask;
  return Tensor({1, m.channels, m.height, m.width}, m.data);
}

Tensor tile_rows(const Tensor& row, int n) {
  Tensor out({n, row.dim(1)});
  for (int i = 0; i < n; ++i)
    std::copy(row.data().begin(), row.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i) * row.dim(1));
  return out;
}

Tensor row_of(const Tensor& t, int i) {
  Shape s = t.shape();
  if (s[0] == 1) return t;
  const std::size_t per = t.size() / static_cast<std::size_t>(s[0]);
  s[0] = 1;
  Tensor out(s);
  std::copy(t.data().begin() + static_cast<std::ptrdiff_t>(i * per),
            t.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * per), out.data().begin());
  return out;
}

void set_row(Tensor& dst, int i, const Tensor& src_batch, int j) {
  const std::size_t per = dst.size() / static_cast<std::size_t>(dst.dim(0));
  std::copy(src_batch.data().begin() + static_cast<std::ptrdiff_t>(j * per),
            src_batch.data().begin() + static_cast<std::ptrdiff_t>((j + 1) * per),
            dst.data().begin() + static_cast<std::ptrdiff_t>(i * per));
}

}  // namespace

ObjectiveValue objective(const Tensor& styles, std::span<const ImageTensor> images, const InversionConfig& config,
                         const Models& models, const NoiseStack& noise) {
  if (images.empty()) throw ValidationError("images", "need at least one image");
  for (const auto& img : images) validate(config, img);
  const double lv = config.lambda_vgg.value_or(models.encoder.lambda_vgg_effective);
  Var z = ad::leaf(styles);
  std::vector<Var> nv;
  for (const auto& t : noise) nv.push_back(ad::constant(t));
  ObjectiveValue out;
  Var total = objective_graph(z, nv, image::to_batch(images), mask_tensor(config), lv, config.lambda_dom, models,
                              &out.terms);
  out.styles_grad = ad::grad(total, std::span<const Var>(&z, 1))[0].value();
  return out;
}

std::vector<InversionResult> invert_batch(std::span<const ImageTensor> images, const InversionConfig& config,
                                          const Models& models, const ProgressFn& progress) {
  if (images.empty()) return {};
  for (const auto& img : images) validate(config, img);
  const auto t0 = std::chrono::steady_clock::now();
  const int n = static_cast<int>(images.size());
  const double lv = config.lambda_vgg.value_or(models.encoder.lambda_vgg_effective);
  const Tensor targets = image::to_batch(images);
  const auto mask = mask_tensor(config);
  const auto& g = models.generator;
  const auto& e = models.encoder;

  Tensor styles;
  NoiseStack noise = e.fixed_noise();
  bool per_image_noise = false;
  switch (config.init) {
    case InitMode::encoder: {
      auto enc = e.encode(targets);
      styles = enc.styles;
      if (enc.noise) {
        noise = *enc.noise;
        per_image_noise = true;
      }
      break;
    }
    case InitMode::mean_w: {
      Tensor row = g.broadcast_w(ad::constant(g.mean_w())).value();
      styles = tile_rows(row, n);
      break;
    }
    case InitMode::random: {
      std::mt19937_64 rng(config.seed);
      styles = nn::normal_tensor({n, g.style_dim()}, rng);
      break;
    }
  }
  if (config.optimize_noise) {
    for (auto& t : noise) {
      if (t.dim(0) == 1 && n > 1) {
        Tensor expanded({n, 1, t.dim(2), t.dim(3)});
        for (int i = 0; i < n; ++i) set_row(expanded, i, t, 0);
        t = expanded;
      }
    }
    per_image_noise = true;
  }
  // Any noise map that still has a leading 1 is shared by every image.
  for (auto& t : noise) {
    if (per_image_noise && t.dim(0) == 1 && n > 1) {
      Tensor expanded({n, 1, t.dim(2), t.dim(3)});
      for (int i = 0; i < n; ++i) set_row(expanded, i, t, 0);
      t = expanded;
    }
  }

  Var z = ad::leaf(styles);
  std::vector<Var> nv;
  for (const auto& t : noise) nv.push_back(config.optimize_noise ? ad::leaf(t) : ad::constant(t));
  std::vector<Var> opt_vars{z};
  if (config.optimize_noise) opt_vars.insert(opt_vars.end(), nv.begin(), nv.end());
  nn::Adam adam(nn::AdamConfig{config.step_size, 0.9, 0.999, 1e-8});

  std::vector<InversionResult> results(static_cast<std::size_t>(n));
  std::vector<double> best(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  Tensor best_styles = styles;
  NoiseStack best_noise = noise;
  bool stop = false;
  for (int step = 0; step <= config.steps && !stop; ++step) {
    std::vector<LossTerms> terms;
    Var total = objective_graph(z, nv, targets, mask, lv, config.lambda_dom, models, &terms);
    for (int i = 0; i < n; ++i) {
      auto& r = results[static_cast<std::size_t>(i)];
      const LossTerms& t = terms[static_cast<std::size_t>(i)];
      if (!std::isfinite(t.total)) {
        r.diverged = true;
        r.diagnostic = "non-finite objective at step " + std::to_string(step);
        stop = true;
        continue;
      }
      r.loss_trace.push_back(t);
      if (t.total < best[static_cast<std::size_t>(i)]) {
        best[static_cast<std::size_t>(i)] = t.total;
        r.best_step = step;
        set_row(best_styles, i, z.value(), i);
        if (per_image_noise)
          for (std::size_t l = 0; l < noise.size(); ++l) set_row(best_noise[l], i, nv[l].value(), i);
      }
    }
    if (progress && !stop) progress(step, config.steps, terms[0]);
    if (stop) {
      for (auto& r : results)
        if (!r.diverged) {
          r.diverged = true;
          r.diagnostic = "stopped early: another image in the batch diverged at step " + std::to_string(step);
        }
      break;
    }
    if (step == config.steps) break;
    auto grads = ad::grad(total, opt_vars);
    adam.step(opt_vars, grads);
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const nlohmann::json echo = to_json(config, lv);
  for (int i = 0; i < n; ++i) {
    auto& r = results[static_cast<std::size_t>(i)];
    r.styles = row_of(best_styles, i);
    if (per_image_noise) {
      NoiseStack ns;
      for (const auto& t : best_noise) ns.push_back(row_of(t, i));
      r.noise = std::move(ns);
    }
    r.config = echo;
    r.wall_seconds = seconds / n;
  }
  return results;
}

InversionResult invert(const ImageTensor& image, const InversionConfig& config, const Models& models,
                       const ProgressFn& progress) {
  return invert_batch(std::span<const ImageTensor>(&image, 1), config, models, progress)[0];
}

InversionResult masked_invert(const ImageTensor& stitched, const ImageTensor& mask, InversionConfig config,
                              const Models& models, const ProgressFn& progress) {
  config.mask = mask;
  config.init = InitMode::encoder;
  return invert(stitched, config, models, progress);
}

ImageTensor reconstruct(const InversionResult& result, const Models& models) {
  return image::from_batch(models.generator.render(result.styles, result.render_noise(models.encoder)), 0);
}

void save_result(const std::filesystem::path& path, const InversionResult& r) {
  archive::Archive ar;
  ar.meta = {{"kind", "inversion_result"},
             {"config", r.config},
             {"wall_seconds", r.wall_seconds},
             {"best_step", r.best_step},
             {"diverged", r.diverged},
             {"diagnostic", r.diagnostic},
             {"noise_layers", r.noise ? static_cast<int>(r.noise->size()) : 0}};
  ar.put("styles", r.styles);
  if (r.noise)
    for (std::size_t i = 0; i < r.noise->size(); ++i) ar.put("noise/" + std::to_string(i), (*r.noise)[i]);
  Tensor trace({static_cast<int>(r.loss_trace.size()), 4});
  for (std::size_t i = 0; i < r.loss_trace.size(); ++i) {
    const auto& t = r.loss_trace[i];
    trace[4 * i] = t.pixel;
    trace[4 * i + 1] = t.perceptual;
    trace[4 * i + 2] = t.regularizer;
    trace[4 * i + 3] = t.total;
  }
  ar.put("loss_trace", trace);
  archive::save(path, ar);
}

InversionResult load_result(const std::filesystem::path& path) {
  archive::Archive ar = archive::load(path);
  if (ar.meta.value("kind", "") != "inversion_result") {
    throw archive::FormatError(path.string() + " is not an inversion result");
  }
  InversionResult r;
  r.config = ar.meta.value("config", nlohmann::json::object());
  r.wall_seconds = ar.meta.value("wall_seconds", 0.0);
  r.best_step = ar.meta.value("best_step", 0);
  r.diverged = ar.meta.value("diverged", false);
  r.diagnostic = ar.meta.value("diagnostic", "");
  r.styles = ar.get("styles");
  const int layers = ar.meta.value("noise_layers", 0);
  if (layers > 0) {
    NoiseStack ns;
    for (int i = 0; i < layers; ++i) ns.push_back(ar.get("noise/" + std::to_string(i)));
    r.noise = std::move(ns);
  }
  const Tensor& trace = ar.get("loss_trace");
  for (int i = 0; i < trace.dim(0); ++i) {
    const std::size_t k = 4 * static_cast<std::size_t>(i);
    r.loss_trace.push_back({trace[k], trace[k + 1], trace[k + 2], trace[k + 3]});
  }
  return r;
}

void write_trace_csv(const std::filesystem::path& path, const InversionResult& r) {
  std::ostringstream os;
  os.precision(17);
  os << "step,pixel,perceptual,regularizer,total\n";
  for (std::size_t i = 0; i < r.loss_trace.size(); ++i) {
    const auto& t = r.loss_trace[i];
    os << i << ',' << t.pixel << ',' << t.perceptual << ',' << t.regularizer << ',' << t.total << '\n';
  }
  archive::write_text(path, os.str());
}

}  // namespace idinvert::inversion
