#include "idinvert/editing.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <Eigen/Dense>

#include "idinvert/archive.hpp"
#include "idinvert/errors.hpp"
#include "idinvert/nn.hpp"

namespace idinvert::editing {

double attribute_score(const data::AttributeVector& a, const std::string& attribute) {
  if (attribute == "hue") return std::cos(a.hue);
  if (attribute == "kind") return a.kind == data::ShapeKind::disk ? 1.0 : 0.0;
  return a.get(attribute);
}

bool attribute_label(const data::AttributeVector& a, const std::string& attribute, double threshold) {
  if (attribute == "hue") return std::cos(a.hue) > 0.0;
  if (attribute == "kind") return a.kind == data::ShapeKind::disk;
  return a.get(attribute) > threshold;
}

double SemanticBoundary::decision(const Tensor& styles) const {
  const int d = normal.dim(1);
  double s = bias;
  if (per_row) {
    if (styles.size() != static_cast<std::size_t>(d)) throw ad::ShapeError("boundary: code size mismatch");
    for (int j = 0; j < d; ++j) s += normal[j] * styles[j];
    return s;
  }
  if (styles.size() % static_cast<std::size_t>(d) != 0) throw ad::ShapeError("boundary: code size mismatch");
  const int rows = static_cast<int>(styles.size()) / d;
  for (int j = 0; j < d; ++j) {
    double m = 0.0;
    for (int r = 0; r < rows; ++r) m += styles[static_cast<std::size_t>(r) * d + j];
    s += normal[j] * m / rows;
  }
  return s;
}

Tensor SemanticBoundary::direction(int num_layers) const {
  if (per_row) return normal;
  const int d = normal.dim(1);
  Tensor out({1, num_layers * d});
  for (int r = 0; r < num_layers; ++r)
    for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(r) * d + j] = normal[j];
  return out;
}

SemanticBoundary find_boundary(const Tensor& codes, std::span<const int> labels, const std::string& attribute,
                               const BoundaryFitConfig& config) {
  if (codes.rank() != 2) throw ad::ShapeError("find_boundary: codes must be [N, D]");
  const int n = codes.dim(0), d = codes.dim(1);
  if (static_cast<int>(labels.size()) != n) throw ValidationError("labels", "one label per code");
  int pos = 0;
  for (int l : labels) pos += l != 0;
  if (pos < 2 || n - pos < 2) throw ValidationError("labels", "need at least two examples of each class");

  Eigen::MatrixXd x(n, d + 1);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) x(i, j) = codes[static_cast<std::size_t>(i) * d + j];
    x(i, d) = 1.0;
    y(i) = labels[static_cast<std::size_t>(i)] != 0 ? 1.0 : 0.0;
  }
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(d + 1);
  Eigen::VectorXd reg = Eigen::VectorXd::Constant(d + 1, config.ridge);
  reg(d) = 1e-9;
  for (int it = 0; it < config.iterations; ++it) {
    Eigen::VectorXd p = (1.0 / (1.0 + (-(x * theta)).array().exp())).matrix();
    Eigen::VectorXd g = x.transpose() * (p - y) / n + reg.cwiseProduct(theta);
    Eigen::VectorXd wts = p.array() * (1.0 - p.array());
    Eigen::MatrixXd h = x.transpose() * wts.asDiagonal() * x / n;
    h.diagonal() += reg;
    Eigen::VectorXd step = h.ldlt().solve(g);
    theta -= step;
    if (step.norm() < 1e-12 * (1.0 + theta.norm())) break;
  }
  const double norm = theta.head(d).norm();
  if (!(norm > 0) || !std::isfinite(norm)) throw ValidationError("codes", "labels are not linearly related to the codes");

  SemanticBoundary b;
  b.attribute = attribute;
  b.normal = Tensor({1, d});
  for (int j = 0; j < d; ++j) b.normal[j] = theta(j) / norm;
  b.bias = theta(d) / norm;
  int correct = 0;
  Eigen::VectorXd proj(n);
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += b.normal[j] * x(i, j);
    proj(i) = s;
    correct += ((s + b.bias) > 0) == (y(i) > 0.5);
  }
  b.accuracy = static_cast<double>(correct) / n;
  const double mean = proj.mean();
  b.code_std = std::sqrt((proj.array() - mean).square().sum() / std::max(1, n - 1));
  if (!(b.code_std > 0)) b.code_std = 1.0;
  b.per_row = false;
  return b;
}

Tensor row_mean(const Tensor& styles, int num_layers) {
  const int n = styles.dim(0);
  const int d = styles.dim(1) / num_layers;
  if (d * num_layers != styles.dim(1)) throw ad::ShapeError("row_mean: width is not a multiple of L");
  Tensor out({n, d});
  for (int i = 0; i < n; ++i)
    for (int r = 0; r < num_layers; ++r)
      for (int j = 0; j < d; ++j)
        out[static_cast<std::size_t>(i) * d + j] += styles[(static_cast<std::size_t>(i) * num_layers + r) * d + j];
  for (double& v : out.data()) v /= num_layers;
  return out;
}

NoiseStack boundary_noise(const gan::Generator& g, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0xB0B);
  return g.random_noise(1, rng);
}

LabeledCodes sample_labeled_codes(const gan::Generator& g, const NoiseStack& noise, int n, std::uint64_t seed) {
  LabeledCodes out;
  std::mt19937_64 rng(seed);
  const int s = g.style_dim();
  std::vector<double> kept;
  constexpr int kChunk = 64;
  for (int start = 0; start < n; start += kChunk) {
    const int m = std::min(kChunk, n - start);
    Tensor z = nn::normal_tensor({m, g.config().d_z}, rng);
    Tensor styles;
    {
      ad::NoGradGuard ng;
      styles = g.broadcast_w(ad::constant(g.map(z))).value();
    }
    auto images = image::unbatch(g.render(styles, noise));
    for (int i = 0; i < m; ++i) {
      try {
        out.attributes.push_back(data::measure_attributes(images[static_cast<std::size_t>(i)]));
      } catch (const data::NoShapeError&) {
        continue;
      }
      kept.insert(kept.end(), styles.data().begin() + static_cast<std::ptrdiff_t>(i) * s,
                  styles.data().begin() + static_cast<std::ptrdiff_t>(i + 1) * s);
    }
  }
  out.styles = Tensor({static_cast<int>(out.attributes.size()), s}, std::move(kept));
  return out;
}

std::vector<SemanticBoundary> fit_boundaries(const LabeledCodes& samples, std::span<const std::string> attributes,
                                             int num_layers, const std::string& model_hash,
                                             const BoundaryFitConfig& config) {
  const Tensor codes = row_mean(samples.styles, num_layers);
  std::vector<SemanticBoundary> out;
  for (const auto& attr : attributes) {
    std::vector<double> scores;
    for (const auto& a : samples.attributes) scores.push_back(attribute_score(a, attr));
    std::vector<double> sorted = scores;
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(sorted.size() / 2), sorted.end());
    const double median = sorted.empty() ? 0.0 : sorted[sorted.size() / 2];
    std::vector<int> labels;
    for (const auto& a : samples.attributes) labels.push_back(attribute_label(a, attr, median) ? 1 : 0);
    SemanticBoundary b = find_boundary(codes, labels, attr, config);
    b.model_hash = model_hash;
    b.threshold = median;
    out.push_back(std::move(b));
  }
  return out;
}

Tensor edit_code(const Tensor& styles, const SemanticBoundary& boundary, double alpha, int num_layers, int row_begin,
                 int row_end) {
  if (!std::isfinite(alpha)) throw ValidationError("alpha", "must be finite");
  if (row_begin < 0 || row_end > num_layers || row_begin > row_end) {
    throw ValidationError("layers", "row range must lie within [0, " + std::to_string(num_layers) + "]");
  }
  const Tensor dir = boundary.direction(num_layers);
  const int s = dir.dim(1);
  if (styles.dim(1) != s) throw ad::ShapeError("edit: boundary does not match the code width");
  const int d = s / num_layers;
  Tensor out = styles;
  const double step = alpha * boundary.code_std;
  for (int i = 0; i < styles.dim(0); ++i)
    for (int k = row_begin * d; k < row_end * d; ++k) out[static_cast<std::size_t>(i) * s + k] += step * dir[k];
  return out;
}

ImageTensor layerwise_edit(const Tensor& styles, const SemanticBoundary& boundary, double alpha, int row_begin,
                           int row_end, const gan::Generator& g, const NoiseStack& noise) {
  Tensor z = edit_code(styles, boundary, alpha, g.num_layers(), row_begin, row_end);
  return image::from_batch(g.render(z, noise), 0);
}

ImageTensor manipulate(const Tensor& styles, const SemanticBoundary& boundary, double alpha, const gan::Generator& g,
                       const NoiseStack& noise) {
  return layerwise_edit(styles, boundary, alpha, 0, g.num_layers(), g, noise);
}

ImageTensor interpolate(const Tensor& z_a, const Tensor& z_b, double t, const gan::Generator& g,
                        const NoiseStack& noise_a, const NoiseStack& noise_b) {
  if (!(t >= 0.0 && t <= 1.0)) throw ValidationError("t", "must lie in [0, 1]");
  if (z_a.shape() != z_b.shape()) throw ad::ShapeError("interpolate: codes differ in shape");
  if (noise_a.size() != noise_b.size()) throw ad::ShapeError("interpolate: noise stacks differ");
  auto blend = [t](const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ad::ShapeError("interpolate: noise maps differ in shape");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = (1.0 - t) * a[i] + t * b[i];
    return out;
  };
  NoiseStack noise;
  for (std::size_t l = 0; l < noise_a.size(); ++l) noise.push_back(blend(noise_a[l], noise_b[l]));
  return image::from_batch(g.render(blend(z_a, z_b), noise), 0);
}

void validate(const CropBox& box, int image_width, int image_height) {
  if (box.width <= 0 || box.height <= 0) throw ValidationError("crop_box", "zero-area crop");
  if (box.x < 0 || box.y < 0 || box.x + box.width > image_width || box.y + box.height > image_height) {
    throw ValidationError("crop_box", "must lie inside both images");
  }
}

CropBox crop_box_from_json(const nlohmann::json& j) {
  return {j.at("x").get<int>(), j.at("y").get<int>(), j.at("width").get<int>(), j.at("height").get<int>()};
}

nlohmann::json to_json(const CropBox& b) {
  return {{"x", b.x}, {"y", b.y}, {"width", b.width}, {"height", b.height}};
}

DiffusionResult diffuse(const ImageTensor& target, const ImageTensor& context, const CropBox& box,
                        const inversion::InversionConfig& config, const inversion::Models& models,
                        const inversion::ProgressFn& progress) {
  if (!target.same_shape(context)) throw ValidationError("context", "must match the target's shape");
  validate(box, target.width, target.height);
  DiffusionResult r;
  r.stitched = context;
  r.mask = ImageTensor(1, target.height, target.width, 0.0);
  for (int y = box.y; y < box.y + box.height; ++y)
    for (int x = box.x; x < box.x + box.width; ++x) {
      r.mask.at(0, y, x) = 1.0;
      for (int c = 0; c < target.channels; ++c) r.stitched.at(c, y, x) = target.at(c, y, x);
    }
  const Tensor batch = image::to_batch(std::span<const ImageTensor>(&r.stitched, 1));
  const auto enc = models.encoder.encode(batch);
  r.init = image::from_batch(models.generator.render(enc.styles, models.encoder.noise_for(enc)), 0);
  r.inversion = inversion::masked_invert(r.stitched, r.mask, config, models, progress);
  r.image = inversion::reconstruct(r.inversion, models);
  return r;
}

nlohmann::json to_json(const SemanticBoundary& b) {
  return {{"attribute", b.attribute}, {"normal", b.normal.data()}, {"bias", b.bias},
          {"accuracy", b.accuracy},   {"code_std", b.code_std},    {"threshold", b.threshold},
          {"per_row", b.per_row},
          {"model_hash", b.model_hash}};
}

SemanticBoundary boundary_from_json(const nlohmann::json& j) {
  SemanticBoundary b;
  b.attribute = j.at("attribute").get<std::string>();
  auto v = j.at("normal").get<std::vector<double>>();
  if (v.empty()) throw ValidationError("normal", "empty");
  const int width = static_cast<int>(v.size());
  b.normal = Tensor({1, width}, std::move(v));
  b.bias = j.value("bias", 0.0);
  b.accuracy = j.value("accuracy", 0.0);
  b.code_std = j.value("code_std", 1.0);
  b.threshold = j.value("threshold", 0.0);
  b.per_row = j.value("per_row", false);
  b.model_hash = j.value("model_hash", "");
  return b;
}

void save_boundaries(const std::filesystem::path& path, std::span<const SemanticBoundary> boundaries) {
  nlohmann::json doc = {{"model_hash", boundaries.empty() ? "" : boundaries.front().model_hash},
                        {"boundaries", nlohmann::json::array()}};
  for (const auto& b : boundaries) doc["boundaries"].push_back(to_json(b));
  archive::write_text(path, doc.dump(1) + "\n");
}

std::vector<SemanticBoundary> load_boundaries(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw NotFoundError("boundary file not found: " + path.string());
  const auto doc = nlohmann::json::parse(archive::read_text(path));
  std::vector<SemanticBoundary> out;
  for (const auto& j : doc.at("boundaries")) out.push_back(boundary_from_json(j));
  return out;
}

const SemanticBoundary& find_by_attribute(std::span<const SemanticBoundary> boundaries, const std::string& attribute) {
  for (const auto& b : boundaries)
    if (b.attribute == attribute) return b;
  throw NotFoundError("no boundary for attribute " + attribute);
}

}  // namespace idinvert::editing
