#pragma once

// Image -> style-code encoder: the domain-guided variant trained through the
// frozen generator against a discriminator, the conventional variant trained
// on synthesized (code, image) pairs, the mean-style output offset and the
// optional per-layer noise heads.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "idinvert/features.hpp"
#include "idinvert/gan.hpp"
#include "idinvert/image.hpp"

namespace idinvert::encoder {

using ad::Tensor;
using ad::Var;
using gan::NoiseStack;

enum class AdversarialLoss { linear, logistic };

/// Reference perceptual weight; the effective weight is rescaled for the
/// desk-scale feature net when `lambda_vgg_auto` is set.
inline constexpr double kReferenceLambdaVgg = 5e-5;

struct EncoderConfig {
  // Architecture.
  int depth = 14;                            // 6, 10 or 14 weight layers
  std::vector<int> channels{8, 16, 32, 32};  // trunk width per scale, full resolution downwards
  bool w_mode = false;                       // single code broadcast to every layer
  bool use_mean_offset = true;
  int noise_blocks = 0;  // predicted noise for generator blocks 1..B

  // Objective.
  double lambda_vgg = kReferenceLambdaVgg;
  bool lambda_vgg_auto = true;
  double perceptual_ratio = 0.1;  // target perceptual/pixel ratio at initialization
  double lambda_adv = 0.1;
  double r1_gamma = 10.0;
  AdversarialLoss adversarial = AdversarialLoss::logistic;

  // Optimization.
  int steps = 2000;
  int batch_size = 16;
  double lr = 1e-3;
  double d_lr = 1e-3;
  std::uint64_t seed = 0;
  int epoch_size = 2000;  // images per epoch, used for per-epoch loss summaries
};

void validate(const EncoderConfig& config, int num_layers);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const EncoderConfig& config);

struct EncoderOutput {
  Var styles;              // [N, L*d_w], mean offset included
  std::vector<Var> noise;  // complete stack (predicted where available, fixed elsewhere)
};

struct Encoded {
  Tensor styles;                    // [N, L*d_w]
  std::optional<NoiseStack> noise;  // present iff noise_blocks > 0
};

class Encoder {
 public:
  Encoder() = default;
  /// Fresh weights and fixed noise drawn from config.seed; copies mean_w from `g`.
  Encoder(const EncoderConfig& config, const gan::Generator& g);

  const EncoderConfig& config() const { return config_; }
  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }
  int num_layers() const { return num_layers_; }
  int d_w() const { return d_w_; }
  int resolution() const { return resolution_; }
  const Tensor& mean_w() const { return mean_w_; }
  /// Noise used for every layer the encoder does not predict, [1, 1, h, h] each.
  const NoiseStack& fixed_noise() const { return fixed_noise_; }
  /// Generator layers whose noise the encoder predicts.
  bool predicts_noise(int layer) const { return layer / 2 < config_.noise_blocks; }

  EncoderOutput forward(const Var& x) const;
  /// Code head output before the mean offset, [N, L*d_w] (broadcast in W-mode).
  Var head(const Var& x) const;
  Encoded encode(const Tensor& x) const;
  /// Complete noise stack for rendering an encoded batch.
  NoiseStack noise_for(const Encoded& e) const;
  /// Per-layer scale on the noise heads' output: 1 / mean |noise strength| of
  /// that generator layer (1 where no noise is predicted).
  const std::vector<double>& noise_gain() const { return noise_gain_; }
  /// Replaces mean_w, the fixed noise and the noise gains (checkpoint loading).
  void restore_state(Tensor mean_w, NoiseStack fixed_noise, std::vector<double> noise_gain);

  // Provenance.
  std::string generator_hash;
  double lambda_vgg_effective = kReferenceLambdaVgg;
  nlohmann::json train_summary = nlohmann::json::object();

 private:
  std::vector<int> stage_convs() const;
  EncoderOutput run(const Var& x, bool with_offset) const;

  EncoderConfig config_;
  int num_layers_ = 8;
  int d_w_ = 64;
  int resolution_ = 32;
  nn::ParamSet params_;
  Tensor mean_w_;
  NoiseStack fixed_noise_;
  std::vector<double> noise_gain_;
};

/// Mean squared style-code error || z - E(G(z)) ||^2 averaged over entries.
/// Differentiable w.r.t. z through both networks; parameters stay frozen.
Var encoder_regularizer(const Var& z, const gan::Generator& g, const Encoder& e, std::span<const Var> noise);

struct EncoderLogEntry {
  int step = 0;
  double total = 0.0;
  double pixel = 0.0;
  double perceptual = 0.0;
  double adversarial = 0.0;
  double d_loss = 0.0;
  double r1 = 0.0;
};

struct EncoderTrainResult {
  Encoder encoder;
  gan::Discriminator discriminator;
  std::vector<EncoderLogEntry> log;
  double lambda_vgg_effective = 0.0;
  double first_epoch_mean_loss = 0.0;  // reconstruction loss (pixel + weighted perceptual)
  double seconds = 0.0;
};

using EncoderProgressFn = std::function<void(const EncoderLogEntry&)>;

/// Pixel MSE + lambda_vgg * feature MSE + adversarial term, against a
/// discriminator initialized from `disc_init` and trained with the
/// real/fake terms plus (gamma/2) R1 on reals. One discriminator step per
/// encoder step. The generator is never modified. On a non-finite loss the
/// most recent finite snapshot is written to `last_good` (if given) and
/// DivergenceError is thrown.
EncoderTrainResult train_domain_guided_encoder(const gan::Generator& g, const gan::Discriminator& disc_init,
                                               const features::FeatureNet& f, std::span<const ImageTensor> dataset,
                                               const EncoderConfig& config, const std::string& generator_hash,
                                               const EncoderProgressFn& progress = {},
                                               const std::optional<std::filesystem::path>& last_good = {});

/// Code regression on synthesized pairs: min || w - E(G(w)) ||^2 with w drawn
/// from the mapping network and rendered with the encoder's fixed noise.
EncoderTrainResult train_conventional_encoder(const gan::Generator& g, const EncoderConfig& config,
                                              const std::string& generator_hash,
                                              const EncoderProgressFn& progress = {});

/// Batch-mean terms of the domain-guided encoder objective, exposed for testing.
struct EncoderLossTerms {
  Var reconstruction;
  Var pixel;
  Var perceptual;
  Var adversarial;
  Var total;
};
EncoderLossTerms encoder_loss(const Encoder& e, const gan::Generator& g, const gan::Discriminator& d,
                              const features::FeatureNet& f, const Var& x, double lambda_vgg, double lambda_adv,
                              AdversarialLoss kind);

/// Discriminator objective on (reals, fakes) including the R1 penalty.
Var discriminator_loss(const gan::Discriminator& d, const Tensor& reals, const Tensor& fakes, double gamma,
                       AdversarialLoss kind, double* r1_out = nullptr);

void save_encoder(const std::filesystem::path& path, const Encoder& e);
Encoder load_encoder(const std::filesystem::path& path, const gan::Generator& g);
void write_encoder_log(const std::filesystem::path& path, const std::vector<EncoderLogEntry>& log);

}  // namespace idinvert::encoder
