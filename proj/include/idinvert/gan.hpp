#pragma once

// Miniature style-based generator (mapping network + synthesis network with
// per-layer style modulation and noise injection), its discriminator, and
// adversarial training.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "idinvert/autodiff.hpp"
#include "idinvert/image.hpp"
#include "idinvert/nn.hpp"

namespace idinvert::gan {

using ad::Tensor;
using ad::Var;

/// One spatial map per synthesis layer, each [N or 1, 1, h, h].
using NoiseStack = std::vector<Tensor>;

struct GanConfig {
  int d_z = 64;
  int d_w = 64;
  int resolution = 32;
  std::vector<int> channels{32, 32, 16, 8};  // per resolution block, 4x4 upwards
  int mapping_layers = 4;
  double mapping_lr_mul = 0.01;
  double noise_strength_init = 0.1;
  int disc_base_channels = 8;

  int steps = 2000;
  int batch_size = 16;
  double lr = 0.002;
  double beta1 = 0.0;
  double beta2 = 0.99;
  double r1_gamma = 10.0;
  int r1_interval = 4;  // lazy regularization; the penalty is scaled by the interval
  int mean_w_samples = 10000;
  std::uint64_t seed = 0;
};

void validate(const GanConfig& config);
GanConfig gan_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const GanConfig& config);

/// Number of synthesis layers: 2 * log2(resolution) - 2.
int num_layers(int resolution);

class Generator {
 public:
  Generator() = default;
  /// Freshly initialized weights drawn from `config.seed`.
  explicit Generator(const GanConfig& config);

  const GanConfig& config() const { return config_; }
  int num_layers() const { return gan::num_layers(config_.resolution); }
  int d_w() const { return config_.d_w; }
  int style_dim() const { return num_layers() * config_.d_w; }
  /// Spatial side of layer i's noise map.
  int layer_resolution(int layer) const { return 4 << (layer / 2); }

  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }
  const Tensor& mean_w() const { return mean_w_; }
  void set_mean_w(Tensor w) { mean_w_ = std::move(w); }

  /// z [N, d_z] -> w [N, d_w].
  Var map_latent(const Var& z) const;
  /// w [N, d_w] -> styles [N, L*d_w] with every row block equal to w.
  Var broadcast_w(const Var& w) const;
  /// styles [N, L*d_w], noise: L maps [N or 1, 1, h, h] -> images [N, 3, R, R] in [-1, 1].
  Var synthesize(const Var& styles, std::span<const Var> noise) const;
  Var synthesize(const Var& styles, const NoiseStack& noise) const;

  NoiseStack random_noise(int n, std::mt19937_64& rng) const;
  /// w' = mean_w + psi (w - mean_w), row-wise over [N, d_w].
  Tensor truncate(const Tensor& w, double psi) const;
  /// Monte-Carlo estimate of E[M(z)] over `samples` latents drawn from `seed`.
  Tensor estimate_mean_w(int samples, std::uint64_t seed) const;

  /// Inference helpers (no graph recorded).
  Tensor render(const Tensor& styles, const NoiseStack& noise) const;
  Tensor map(const Tensor& z) const;

 private:
  GanConfig config_;
  nn::ParamSet params_;
  Tensor mean_w_;
};

class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(const GanConfig& config, std::uint64_t seed);

  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }
  /// images [N, 3, R, R] -> logits [N, 1].
  Var forward(const Var& x) const;

 private:
  int resolution_ = 32;
  int blocks_ = 4;
  nn::ParamSet params_;
};

/// (gamma/2) * mean_n ||d D(x_n) / d x_n||^2, differentiable w.r.t. D's parameters.
Var r1_penalty(const std::function<Var(const Var&)>& disc, const Tensor& reals, double gamma);

struct GanLogEntry {
  int step = 0;
  double d_loss = 0.0;
  double g_loss = 0.0;
  double r1 = 0.0;
};

struct GanModel {
  Generator generator;
  Discriminator discriminator;
  std::vector<GanLogEntry> log;
};

/// Called every `interval` steps with the latest log entry.
using ProgressFn = std::function<void(const GanLogEntry&)>;

/// Non-saturating logistic GAN with R1 on reals. Single-threaded and
/// deterministic under config.seed. Throws DivergenceError on non-finite loss.
GanModel train_gan(std::span<const ImageTensor> dataset, const GanConfig& config, const ProgressFn& progress = {});

/// n images from fresh latents and fresh noise, deterministic under seed.
std::vector<ImageTensor> sample(const Generator& g, int n, std::uint64_t seed);

/// Archive with entries "G/*", "D/*", "mean_w" and meta {kind: "gan", config}.
void save_gan(const std::filesystem::path& path, const GanModel& model);
GanModel load_gan(const std::filesystem::path& path);
void write_gan_log(const std::filesystem::path& path, const std::vector<GanLogEntry>& log);

}  // namespace idinvert::gan
