#pragma once

// Procedural shapes corpus with continuously controllable attributes, and the
// measurement oracle that recovers those attributes from pixels.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "idinvert/errors.hpp"
#include "idinvert/image.hpp"

namespace idinvert::data {

enum class ShapeKind { disk = 0, square = 1, triangle = 2 };

std::string to_string(ShapeKind kind);
ShapeKind shape_kind_from_string(const std::string& name);

inline constexpr double kMinSize = 0.05;  // exclusive
inline constexpr double kMaxSize = 0.45;
inline constexpr double kMinPos = 0.25;
inline constexpr double kMaxPos = 0.75;

/// One shape on a uniform gray background. `size` is the equal-area radius as
/// a fraction of the image width (area = pi * size^2 * width^2 for every kind).
struct ShapeSpec {
  ShapeKind kind = ShapeKind::disk;
  double size = 0.15;
  double hue = 0.0;  // radians, wraps modulo 2*pi
  double pos_x = 0.5;
  double pos_y = 0.5;
  double bg_level = 0.5;  // gray level in [0, 1]
};

/// Names of the continuous attributes, in AttributeVector order.
inline constexpr const char* kAttributeNames[] = {"size", "hue", "pos_x", "pos_y", "bg_level"};

struct AttributeVector {
  ShapeKind kind = ShapeKind::disk;
  double size = 0.0;
  double hue = 0.0;
  double pos_x = 0.0;
  double pos_y = 0.0;
  double bg_level = 0.0;

  /// Continuous attribute by name (see kAttributeNames).
  double get(const std::string& name) const;
};

AttributeVector attributes_of(const ShapeSpec& spec);

/// Throws ValidationError naming the first offending field.
void validate(const ShapeSpec& spec);

/// Horizontal / vertical half-extent of the shape in image-width units.
std::pair<double, double> half_extent(ShapeKind kind, double size);

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct DatasetConfig {
  int n_images = 1000;
  int resolution = 32;
  std::uint64_t seed = 0;
  Range size{0.10, 0.20};
  Range hue{0.0, 6.283185307179586};
  Range pos_x{0.32, 0.68};
  Range pos_y{0.32, 0.68};
  Range bg_level{0.15, 0.85};
  std::vector<ShapeKind> kinds{ShapeKind::disk, ShapeKind::square, ShapeKind::triangle};
};

void validate(const DatasetConfig& config);
DatasetConfig dataset_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DatasetConfig& config);

struct Sample {
  ImageTensor image;
  AttributeVector attributes;
};

/// Deterministic anti-aliased rendering (4x4 supersampling); values in [-1, 1].
ImageTensor render_shape(const ShapeSpec& spec, int resolution);

/// Draws one spec uniformly within the configured ranges.
ShapeSpec sample_spec(const DatasetConfig& config, std::mt19937_64& rng);

std::vector<Sample> generate_dataset(const DatasetConfig& config);

/// The image has no segmentable foreground (blank or out-of-domain).
class NoShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Recovers attributes from pixels: size by coverage counting, hue by circular
/// mean over the foreground, position by centroid, kind by shape moments.
AttributeVector measure_attributes(const ImageTensor& image);

/// Writes <dir>/NNNNNN.png plus <dir>/manifest.jsonl (one JSON record per line).
void save_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples);
std::vector<Sample> load_dataset(const std::filesystem::path& dir);

nlohmann::json to_json(const AttributeVector& a);
AttributeVector attributes_from_json(const nlohmann::json& j);

/// Images only, in order.
std::vector<ImageTensor> images_of(const std::vector<Sample>& samples);

}  // namespace idinvert::data
