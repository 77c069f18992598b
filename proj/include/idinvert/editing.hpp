#pragma once

// Code-space editing: hyperplane boundaries fit on oracle-labeled samples,
// z + alpha * n manipulation (optionally on a row range), interpolation and
// crop-paste-invert diffusion.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "idinvert/gan.hpp"
#include "idinvert/inversion.hpp"
#include "idinvert/synth_data.hpp"

namespace idinvert::editing {

using ad::Tensor;
using gan::NoiseStack;

/// Attributes a boundary can be fit for, with their binarization:
/// size, pos_x, pos_y, bg_level split at the median; hue by cos(hue) > 0;
/// kind as disk vs not disk.
inline constexpr const char* kBoundaryAttributes[] = {"size", "pos_x", "pos_y", "bg_level", "hue", "kind"};

/// Binary label of a measured attribute; `threshold` applies to the
/// median-split attributes only.
bool attribute_label(const data::AttributeVector& a, const std::string& attribute, double threshold);
/// Scalar the median split is taken over (cos(hue) for hue, 1 for disks).
double attribute_score(const data::AttributeVector& a, const std::string& attribute);

struct SemanticBoundary {
  std::string attribute;
  Tensor normal;  // [1, d_w] broadcast to every row, or [1, L*d_w] when per_row
  double bias = 0.0;
  double accuracy = 0.0;  // training accuracy of the fit
  double code_std = 1.0;  // std of the training codes along the normal; the unit of alpha
  double threshold = 0.0;  // median split the labels were drawn with
  bool per_row = false;
  std::string model_hash;

  /// Signed distance <n, z> + bias of one style stack [1, L*d_w].
  double decision(const Tensor& styles) const;
  /// Unit step in style-stack space, [1, L*d_w], before scaling by code_std.
  Tensor direction(int num_layers) const;
};

struct BoundaryFitConfig {
  double ridge = 1e-3;  // L2 weight on the mean logistic loss
  int iterations = 50;  // Newton steps
};

/// Ridge logistic regression on codes [N, D] against binary labels. The normal
/// is unit length. Throws ValidationError("labels") unless both classes have
/// at least two examples.
SemanticBoundary find_boundary(const Tensor& codes, std::span<const int> labels, const std::string& attribute,
                               const BoundaryFitConfig& config = {});

/// Row average of style stacks [N, L*d_w] -> [N, d_w].
Tensor row_mean(const Tensor& styles, int num_layers);

struct LabeledCodes {
  Tensor styles;  // [N, L*d_w]
  std::vector<data::AttributeVector> attributes;
};

/// The fixed noise boundary samples are rendered with, derived from the seed.
NoiseStack boundary_noise(const gan::Generator& g, std::uint64_t seed);

/// Samples latents, renders them with `noise` and keeps those the oracle can
/// measure. Deterministic under seed.
LabeledCodes sample_labeled_codes(const gan::Generator& g, const NoiseStack& noise, int n, std::uint64_t seed);

/// Fits one broadcast boundary per attribute on row-averaged sample codes,
/// median-splitting on the samples themselves.
std::vector<SemanticBoundary> fit_boundaries(const LabeledCodes& samples, std::span<const std::string> attributes,
                                             int num_layers, const std::string& model_hash,
                                             const BoundaryFitConfig& config = {});

/// z + alpha * code_std * n applied to rows [row_begin, row_end).
Tensor edit_code(const Tensor& styles, const SemanticBoundary& boundary, double alpha, int num_layers, int row_begin,
                 int row_end);

/// G(z + alpha n) on every row.
ImageTensor manipulate(const Tensor& styles, const SemanticBoundary& boundary, double alpha, const gan::Generator& g,
                       const NoiseStack& noise);
/// G(z + alpha n) on rows [row_begin, row_end). Throws ValidationError("layers")
/// for ranges outside [0, L].
ImageTensor layerwise_edit(const Tensor& styles, const SemanticBoundary& boundary, double alpha, int row_begin,
                           int row_end, const gan::Generator& g, const NoiseStack& noise);

/// G((1-t) z_a + t z_b); noise maps are blended the same way.
ImageTensor interpolate(const Tensor& z_a, const Tensor& z_b, double t, const gan::Generator& g,
                        const NoiseStack& noise_a, const NoiseStack& noise_b);

/// Pixel rectangle [x, x + width) x [y, y + height).
struct CropBox {
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;
};
void validate(const CropBox& box, int image_width, int image_height);
CropBox crop_box_from_json(const nlohmann::json& j);
nlohmann::json to_json(const CropBox& box);

struct DiffusionResult {
  ImageTensor stitched;  // target patch pasted on the context
  ImageTensor mask;      // 1 channel, ones on the patch
  ImageTensor init;      // encoder reconstruction of the stitched image
  ImageTensor image;     // final masked-inversion reconstruction
  inversion::InversionResult inversion;
};

/// Crop -> paste -> encode -> masked inversion.
DiffusionResult diffuse(const ImageTensor& target, const ImageTensor& context, const CropBox& box,
                        const inversion::InversionConfig& config, const inversion::Models& models,
                        const inversion::ProgressFn& progress = {});

/// Boundaries as one JSON document: {"model_hash", "boundaries": [...]}.
nlohmann::json to_json(const SemanticBoundary& b);
SemanticBoundary boundary_from_json(const nlohmann::json& j);
void save_boundaries(const std::filesystem::path& path, std::span<const SemanticBoundary> boundaries);
/// Throws NotFoundError if the file is missing.
std::vector<SemanticBoundary> load_boundaries(const std::filesystem::path& path);
const SemanticBoundary& find_by_attribute(std::span<const SemanticBoundary> boundaries, const std::string& attribute);

}  // namespace idinvert::editing
