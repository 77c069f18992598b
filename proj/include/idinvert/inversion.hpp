#pragma once

// Per-image code optimization: pixel + perceptual reconstruction terms plus
// the encoder-consistency regularizer || z - E(G(z)) ||^2, optionally masked.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "idinvert/encoder.hpp"
#include "idinvert/features.hpp"
#include "idinvert/gan.hpp"
#include "idinvert/image.hpp"

namespace idinvert::inversion {

using ad::Tensor;
using ad::Var;
using gan::NoiseStack;

enum class InitMode { encoder, mean_w, random };

std::string to_string(InitMode mode);
InitMode init_mode_from_string(const std::string& name);

struct InversionConfig {
  std::optional<double> lambda_vgg;  // unset: the encoder's effective perceptual weight
  double lambda_dom = 2.0;
  int steps = 100;
  double step_size = 1e-2;
  bool optimize_noise = false;
  std::optional<ImageTensor> mask;  // 1 or 3 channels, values in {0, 1}
  InitMode init = InitMode::encoder;
  std::uint64_t seed = 0;
};

/// Throws ValidationError naming the field; `image` is the inversion target.
void validate(const InversionConfig& config, const ImageTensor& image);
InversionConfig inversion_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const InversionConfig& config, double lambda_vgg_used);

/// Frozen networks an inversion runs against.
struct Models {
  const gan::Generator& generator;
  const encoder::Encoder& encoder;
  const features::FeatureNet& features;
};

struct LossTerms {
  double pixel = 0.0;
  double perceptual = 0.0;
  double regularizer = 0.0;
  double total = 0.0;
};

struct InversionResult {
  Tensor styles;                    // [1, L*d_w], the best iterate
  std::optional<NoiseStack> noise;  // optimized or encoder-predicted noise, if any
  std::vector<LossTerms> loss_trace;  // steps + 1 entries, first is the initial point
  nlohmann::json config = nlohmann::json::object();
  double wall_seconds = 0.0;
  int best_step = 0;
  bool diverged = false;
  std::string diagnostic;

  /// The noise stack the reconstruction is rendered with.
  NoiseStack render_noise(const encoder::Encoder& e) const { return noise ? *noise : e.fixed_noise(); }
};

struct ObjectiveValue {
  std::vector<LossTerms> terms;  // one per image
  Tensor styles_grad;            // d(sum of totals) / d styles
};

/// Evaluates the objective for a batch of codes [N, L*d_w] against images.
ObjectiveValue objective(const Tensor& styles, std::span<const ImageTensor> images, const InversionConfig& config,
                         const Models& models, const NoiseStack& noise);

/// Differentiable per-image totals, summed; exposed for gradient checks.
Var objective_graph(const Var& styles, std::span<const Var> noise, const Tensor& targets, const std::optional<Tensor>& mask,
                    double lambda_vgg, double lambda_dom, const Models& models, std::vector<LossTerms>* terms = nullptr);

/// Called after every objective evaluation with the step index (0..steps),
/// the step budget and the first image's terms.
using ProgressFn = std::function<void(int step, int steps, const LossTerms& terms)>;

InversionResult invert(const ImageTensor& image, const InversionConfig& config, const Models& models,
                       const ProgressFn& progress = {});
/// Independent inversions of several images advanced in lock-step. Each result
/// depends only on its own image.
std::vector<InversionResult> invert_batch(std::span<const ImageTensor> images, const InversionConfig& config,
                                          const Models& models, const ProgressFn& progress = {});
/// Pixel and perceptual terms restricted to the mask; regularizer global;
/// initialized from the encoder.
InversionResult masked_invert(const ImageTensor& stitched, const ImageTensor& mask, InversionConfig config,
                              const Models& models, const ProgressFn& progress = {});

/// Renders the reconstruction of an inversion result.
ImageTensor reconstruct(const InversionResult& result, const Models& models);

void save_result(const std::filesystem::path& path, const InversionResult& result);
InversionResult load_result(const std::filesystem::path& path);
void write_trace_csv(const std::filesystem::path& path, const InversionResult& result);

}  // namespace idinvert::inversion
