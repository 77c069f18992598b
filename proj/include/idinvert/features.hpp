#pragma once

// Perceptual feature extractor (a small attribute regressor trained on the
// shapes corpus) and the image / image-set metrics built on it.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "idinvert/autodiff.hpp"
#include "idinvert/image.hpp"
#include "idinvert/nn.hpp"
#include "idinvert/synth_data.hpp"

namespace idinvert::features {

using ad::Tensor;
using ad::Var;

struct FeatureNetConfig {
  int resolution = 32;
  std::vector<int> channels{16, 32, 32, 32};  // one conv per scale, 32 -> 4
  int feature_block = 2;                      // output of this block is the perceptual feature map
  int hidden = 64;                            // width of the dense layer used as the set embedding
  int steps = 1500;
  int batch_size = 32;
  double lr = 1e-3;
  double val_fraction = 0.1;
  std::uint64_t seed = 0;
};

void validate(const FeatureNetConfig& config);
FeatureNetConfig feature_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const FeatureNetConfig& config);

/// Regression targets, in order: size, cos(hue), sin(hue), pos_x, pos_y,
/// bg_level, then a one-hot of the kind. Continuous targets are standardized.
inline constexpr int kNumTargets = 9;
Tensor targets_of(std::span<const data::AttributeVector> attrs);

struct FeatureOutputs {
  Var features;    // [N, C_f * h_f * w_f] designated-layer activations
  Var embedding;   // [N, hidden] penultimate dense activations
  Var prediction;  // [N, kNumTargets]
};

class FeatureNet {
 public:
  FeatureNet() = default;
  explicit FeatureNet(const FeatureNetConfig& config);

  const FeatureNetConfig& config() const { return config_; }
  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }

  FeatureOutputs forward(const Var& x) const;
  /// Flattened designated-layer features, differentiable w.r.t. x.
  Var extract_features(const Var& x) const;
  int feature_dim() const;
  int embedding_dim() const { return config_.hidden; }

  /// Predicted size (inverse of the target standardization) per image.
  std::vector<double> predict_size(const Tensor& images) const;
  /// Embeddings [N, embedding_dim] for a set of images, computed in chunks.
  Eigen::MatrixXd embed(std::span<const ImageTensor> images) const;

 private:
  FeatureNetConfig config_;
  nn::ParamSet params_;
};

struct FeatureTrainReport {
  std::vector<double> loss_trace;
  double val_size_rel_error = 0.0;  // mean |pred - true| / true on the held-out split
  int n_train = 0;
  int n_val = 0;
};

/// Deterministic under config.seed. Throws ValidationError on an empty dataset.
FeatureNet train_feature_net(std::span<const data::Sample> dataset, const FeatureNetConfig& config,
                             FeatureTrainReport* report = nullptr);

void save_feature_net(const std::filesystem::path& path, const FeatureNet& net);
FeatureNet load_feature_net(const std::filesystem::path& path);

// ---- metrics ---------------------------------------------------------------

double mse(const ImageTensor& x, const ImageTensor& y);
/// Mean SSIM over channels with an 11x11 Gaussian window (sigma 1.5), valid
/// positions only, dynamic range 2.
double ssim(const ImageTensor& x, const ImageTensor& y);
/// Mean squared difference of designated-layer features.
double perceptual_distance(const FeatureNet& net, const ImageTensor& x, const ImageTensor& y);

/// Frechet distance between Gaussian fits of two embedding sets (rows are
/// samples). Covariances get a 1e-6 ridge. Needs at least dim + 1 rows each.
double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);
double fid_proxy(const FeatureNet& net, std::span<const ImageTensor> a, std::span<const ImageTensor> b);

struct SwdConfig {
  int patch = 7;
  int levels = 2;
  int patches_per_image = 32;
  int projections = 512;
  std::uint64_t seed = 0;
};

/// Exact 1-Wasserstein distance between two equal-size 1-D samples.
double wasserstein_1d(std::vector<double> a, std::vector<double> b);
/// Sliced Wasserstein distance of raw descriptor sets (rows are samples).
double sliced_wasserstein(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, int projections, std::uint64_t seed);
/// Patch descriptors from a Laplacian pyramid, averaged over levels.
double swd(std::span<const ImageTensor> a, std::span<const ImageTensor> b, const SwdConfig& config = {});

struct MetricReport {
  std::map<std::string, double> metrics;
  std::map<std::string, int> sample_sizes;
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const MetricReport& report);

}  // namespace idinvert::features
