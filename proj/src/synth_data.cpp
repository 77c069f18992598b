#include "idinvert/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "idinvert/archive.hpp"

namespace idinvert::data {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kSaturation = 0.85;
constexpr double kValue = 0.9;
constexpr int kSuper = 4;

double wrap_angle(double a) {
  double r = std::fmod(a, kTwoPi);
  if (r < 0) r += kTwoPi;
  return r;
}

struct Rgb {
  double r, g, b;
};

Rgb hsv_to_rgb(double hue, double s, double v) {
  const double h6 = wrap_angle(hue) / kTwoPi * 6.0;
  const int sector = static_cast<int>(std::floor(h6)) % 6;
  const double f = h6 - std::floor(h6);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

// Hue in radians of an RGB triple; nullopt for achromatic colors.
std::optional<double> rgb_hue(double r, double g, double b) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const double d = mx - mn;
  if (d < 1e-9) return std::nullopt;
  double h;
  if (mx == r) h = std::fmod((g - b) / d, 6.0);
  else if (mx == g) h = (b - r) / d + 2.0;
  else h = (r - g) / d + 4.0;
  return wrap_angle(h / 6.0 * kTwoPi);
}

// Side of the equal-area square and equilateral triangle.
double square_side(double size) { return size * std::sqrt(std::numbers::pi); }
double triangle_side(double size) { return size * std::sqrt(4.0 * std::numbers::pi / std::sqrt(3.0)); }

bool inside(const ShapeSpec& s, double x, double y) {
  const double dx = x - s.pos_x, dy = y - s.pos_y;
  switch (s.kind) {
    case ShapeKind::disk: return dx * dx + dy * dy <= s.size * s.size;
    case ShapeKind::square: {
      const double h = square_side(s.size) / 2;
      return std::abs(dx) <= h && std::abs(dy) <= h;
    }
    case ShapeKind::triangle: {
      // Apex up (y grows downwards); centroid at the center.
      const double a = triangle_side(s.size);
      const double r = a / std::sqrt(3.0);
      if (dy > r / 2) return false;
      // Distance from apex line test: |dx| <= (dy + r) / sqrt(3)
      return std::abs(dx) * std::sqrt(3.0) <= dy + r;
    }
  }
  return false;
}

std::string record_line(const std::string& file, const AttributeVector& a) {
  nlohmann::json j = to_json(a);
  j["file"] = file;
  return j.dump();
}

}  // namespace

std::string to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::disk: return "disk";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
  }
  return "unknown";
}

ShapeKind shape_kind_from_string(const std::string& name) {
  if (name == "disk") return ShapeKind::disk;
  if (name == "square") return ShapeKind::square;
  if (name == "triangle") return ShapeKind::triangle;
  throw ValidationError("kind", "unknown shape kind '" + name + "'");
}

double AttributeVector::get(const std::string& name) const {
  if (name == "size") return size;
  if (name == "hue") return hue;
  if (name == "pos_x") return pos_x;
  if (name == "pos_y") return pos_y;
  if (name == "bg_level") return bg_level;
  throw ValidationError("attribute", "unknown attribute '" + name + "'");
}

AttributeVector attributes_of(const ShapeSpec& spec) {
  return {spec.kind, spec.size, wrap_angle(spec.hue), spec.pos_x, spec.pos_y, spec.bg_level};
}

std::pair<double, double> half_extent(ShapeKind kind, double size) {
  switch (kind) {
    case ShapeKind::disk: return {size, size};
    case ShapeKind::square: return {square_side(size) / 2, square_side(size) / 2};
    case ShapeKind::triangle: {
      const double a = triangle_side(size);
      return {a / 2, a / std::sqrt(3.0)};
    }
  }
  return {size, size};
}

void validate(const ShapeSpec& s) {
  if (!std::isfinite(s.size) || s.size <= kMinSize || s.size > kMaxSize) {
    throw ValidationError("size", "must lie in (0.05, 0.45], got " + std::to_string(s.size));
  }
  if (!std::isfinite(s.hue)) throw ValidationError("hue", "must be finite");
  if (!std::isfinite(s.pos_x) || s.pos_x < kMinPos || s.pos_x > kMaxPos) {
    throw ValidationError("pos_x", "must lie in [0.25, 0.75], got " + std::to_string(s.pos_x));
  }
  if (!std::isfinite(s.pos_y) || s.pos_y < kMinPos || s.pos_y > kMaxPos) {
    throw ValidationError("pos_y", "must lie in [0.25, 0.75], got " + std::to_string(s.pos_y));
  }
  if (!std::isfinite(s.bg_level) || s.bg_level < 0.0 || s.bg_level > 1.0) {
    throw ValidationError("bg_level", "must lie in [0, 1], got " + std::to_string(s.bg_level));
  }
  const auto [ex, ey] = half_extent(s.kind, s.size);
  if (s.pos_x - ex < 0.0 || s.pos_x + ex > 1.0) {
    throw ValidationError("pos_x", "shape of this size extends outside the frame horizontally");
  }
  if (s.pos_y - ey < 0.0 || s.pos_y + (s.kind == ShapeKind::triangle ? ey / 2 : ey) > 1.0) {
    throw ValidationError("pos_y", "shape of this size extends outside the frame vertically");
  }
}

void validate(const DatasetConfig& c) {
  if (c.n_images < 1) throw ValidationError("n_images", "must be >= 1");
  if (c.resolution != 16 && c.resolution != 32 && c.resolution != 64) {
    throw ValidationError("resolution", "must be one of 16, 32, 64");
  }
  auto check = [](const Range& r, const char* name, double lo, double hi) {
    if (!(r.lo <= r.hi) || r.lo < lo || r.hi > hi) throw ValidationError(name, "range out of bounds");
  };
  check(c.size, "size", kMinSize + 1e-12, kMaxSize);
  check(c.hue, "hue", -1e9, 1e9);
  check(c.pos_x, "pos_x", kMinPos, kMaxPos);
  check(c.pos_y, "pos_y", kMinPos, kMaxPos);
  check(c.bg_level, "bg_level", 0.0, 1.0);
  if (c.kinds.empty()) throw ValidationError("kinds", "at least one shape kind required");
  for (ShapeKind k : c.kinds) {
    ShapeSpec worst{k, c.size.hi, 0.0, c.pos_x.lo, c.pos_y.lo, 0.5};
    validate(worst);
    worst.pos_x = c.pos_x.hi;
    worst.pos_y = c.pos_y.hi;
    validate(worst);
  }
}

DatasetConfig dataset_config_from_json(const nlohmann::json& j) {
  DatasetConfig c;
  auto range = [&](const char* key, Range& r) {
    if (j.contains(key)) {
      const auto& v = j.at(key);
      if (!v.is_array() || v.size() != 2) throw ValidationError(key, "range must be [lo, hi]");
      r = {v[0].get<double>(), v[1].get<double>()};
    }
  };
  c.n_images = j.value("n_images", c.n_images);
  c.resolution = j.value("resolution", c.resolution);
  c.seed = j.value("seed", c.seed);
  range("size", c.size);
  range("hue", c.hue);
  range("pos_x", c.pos_x);
  range("pos_y", c.pos_y);
  range("bg_level", c.bg_level);
  if (j.contains("kinds")) {
    c.kinds.clear();
    for (const auto& k : j.at("kinds")) c.kinds.push_back(shape_kind_from_string(k.get<std::string>()));
  }
  validate(c);
  return c;
}

nlohmann::json to_json(const DatasetConfig& c) {
  nlohmann::json kinds = nlohmann::json::array();
  for (auto k : c.kinds) kinds.push_back(to_string(k));
  return {{"n_images", c.n_images},
          {"resolution", c.resolution},
          {"seed", c.seed},
          {"size", {c.size.lo, c.size.hi}},
          {"hue", {c.hue.lo, c.hue.hi}},
          {"pos_x", {c.pos_x.lo, c.pos_x.hi}},
          {"pos_y", {c.pos_y.lo, c.pos_y.hi}},
          {"bg_level", {c.bg_level.lo, c.bg_level.hi}},
          {"kinds", kinds}};
}

ImageTensor render_shape(const ShapeSpec& spec, int resolution) {
  validate(spec);
  if (resolution <= 0) throw ValidationError("resolution", "must be positive");
  const Rgb fg = hsv_to_rgb(spec.hue, kSaturation, kValue);
  const double bg = spec.bg_level;
  ImageTensor img(3, resolution, resolution);
  const double inv = 1.0 / resolution;
  for (int y = 0; y < resolution; ++y) {
    for (int x = 0; x < resolution; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy)
        for (int sx = 0; sx < kSuper; ++sx)
          hits += inside(spec, (x + (sx + 0.5) / kSuper) * inv, (y + (sy + 0.5) / kSuper) * inv) ? 1 : 0;
      const double cov = static_cast<double>(hits) / (kSuper * kSuper);
      img.at(0, y, x) = 2.0 * (cov * fg.r + (1 - cov) * bg) - 1.0;
      img.at(1, y, x) = 2.0 * (cov * fg.g + (1 - cov) * bg) - 1.0;
      img.at(2, y, x) = 2.0 * (cov * fg.b + (1 - cov) * bg) - 1.0;
    }
  }
  return img;
}

ShapeSpec sample_spec(const DatasetConfig& c, std::mt19937_64& rng) {
  auto uni = [&](const Range& r) { return std::uniform_real_distribution<double>(r.lo, r.hi)(rng); };
  ShapeSpec s;
  s.kind = c.kinds[std::uniform_int_distribution<std::size_t>(0, c.kinds.size() - 1)(rng)];
  s.size = uni(c.size);
  s.hue = wrap_angle(uni(c.hue));
  s.pos_x = uni(c.pos_x);
  s.pos_y = uni(c.pos_y);
  s.bg_level = uni(c.bg_level);
  return s;
}

std::vector<Sample> generate_dataset(const DatasetConfig& config) {
  validate(config);
  std::mt19937_64 rng(config.seed);
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(config.n_images));
  for (int i = 0; i < config.n_images; ++i) {
    ShapeSpec s = sample_spec(config, rng);
    out.push_back({render_shape(s, config.resolution), attributes_of(s)});
  }
  return out;
}

AttributeVector measure_attributes(const ImageTensor& image) {
  if (image.channels != 3 || image.height < 4 || image.width < 4) {
    throw NoShapeError("measure_attributes expects an RGB image of at least 4x4");
  }
  const int h = image.height, w = image.width;
  // Work in [0, 1] color units.
  auto px = [&](int c, int y, int x) { return (image.at(c, y, x) + 1.0) * 0.5; };

  // Background: per-channel median of the one-pixel border.
  double bg[3];
  for (int c = 0; c < 3; ++c) {
    std::vector<double> border;
    for (int x = 0; x < w; ++x) {
      border.push_back(px(c, 0, x));
      border.push_back(px(c, h - 1, x));
    }
    for (int y = 1; y < h - 1; ++y) {
      border.push_back(px(c, y, 0));
      border.push_back(px(c, y, w - 1));
    }
    std::nth_element(border.begin(), border.begin() + static_cast<std::ptrdiff_t>(border.size() / 2), border.end());
    bg[c] = border[border.size() / 2];
  }

  std::vector<double> dist(static_cast<std::size_t>(h) * w);
  double max_dist = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double d2 = 0.0;
      for (int c = 0; c < 3; ++c) d2 += (px(c, y, x) - bg[c]) * (px(c, y, x) - bg[c]);
      dist[static_cast<std::size_t>(y) * w + x] = std::sqrt(d2);
      max_dist = std::max(max_dist, std::sqrt(d2));
    }
  if (max_dist < 0.1) throw NoShapeError("no foreground distinguishable from the background");

  // Foreground color: mean over the interior (pixels far from the background).
  double fg[3] = {0, 0, 0};
  int core = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (dist[static_cast<std::size_t>(y) * w + x] >= 0.8 * max_dist) {
        for (int c = 0; c < 3; ++c) fg[c] += px(c, y, x);
        ++core;
      }
  for (double& v : fg) v /= core;
  const double d[3] = {fg[0] - bg[0], fg[1] - bg[1], fg[2] - bg[2]};
  const double dd = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
  if (dd < 0.01) throw NoShapeError("foreground too close to background");

  // Per-pixel coverage by projection onto the background->foreground segment.
  std::vector<double> alpha(dist.size(), 0.0);
  double area = 0.0, mx = 0.0, my = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double a = 0.0;
      for (int c = 0; c < 3; ++c) a += (px(c, y, x) - bg[c]) * d[c];
      a = std::clamp(a / dd, 0.0, 1.0);
      if (a < 0.05) a = 0.0;
      alpha[static_cast<std::size_t>(y) * w + x] = a;
      area += a;
      mx += a * (x + 0.5);
      my += a * (y + 0.5);
    }
  if (area < 1.0) throw NoShapeError("foreground area below one pixel");
  mx /= area;
  my /= area;

  AttributeVector out;
  out.size = std::sqrt(area / std::numbers::pi) / w;
  out.pos_x = mx / w;
  out.pos_y = my / h;
  out.bg_level = (bg[0] + bg[1] + bg[2]) / 3.0;

  // Hue: circular mean over confidently-foreground pixels.
  double sx = 0.0, sy = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double a = alpha[static_cast<std::size_t>(y) * w + x];
      if (a < 0.5) continue;
      auto hue = rgb_hue(px(0, y, x), px(1, y, x), px(2, y, x));
      if (!hue) continue;
      sx += a * std::cos(*hue);
      sy += a * std::sin(*hue);
    }
  if (sx == 0.0 && sy == 0.0) {
    auto hue = rgb_hue(fg[0], fg[1], fg[2]);
    out.hue = hue ? *hue : 0.0;
  } else {
    out.hue = wrap_angle(std::atan2(sy, sx));
  }

  // Kind from normalized central moments: the third angular harmonic separates
  // the triangle, the fourth separates the square from the disk.
  double m2 = 0.0, a3 = 0.0, b3 = 0.0, c4 = 0.0, s4 = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double a = alpha[static_cast<std::size_t>(y) * w + x];
      if (a == 0.0) continue;
      const double u = x + 0.5 - mx, v = y + 0.5 - my;
      m2 += a * (u * u + v * v);
      a3 += a * (u * u * u - 3 * u * v * v);
      b3 += a * (3 * u * u * v - v * v * v);
      c4 += a * (u * u - v * v) * (u * u - v * v);
      s4 += a * 4 * u * u * v * v;
    }
  m2 /= area;
  const double third = std::sqrt(a3 * a3 + b3 * b3) / area / std::pow(m2, 1.5);
  const double fourth = s4 > 0 ? c4 / s4 : 1.0;
  if (third > 0.12) out.kind = ShapeKind::triangle;
  else if (fourth < 0.7) out.kind = ShapeKind::square;
  else out.kind = ShapeKind::disk;
  return out;
}

nlohmann::json to_json(const AttributeVector& a) {
  return {{"kind", to_string(a.kind)}, {"size", a.size},   {"hue", a.hue},
          {"pos_x", a.pos_x},          {"pos_y", a.pos_y}, {"bg_level", a.bg_level}};
}

AttributeVector attributes_from_json(const nlohmann::json& j) {
  AttributeVector a;
  a.kind = shape_kind_from_string(j.at("kind").get<std::string>());
  a.size = j.at("size").get<double>();
  a.hue = j.at("hue").get<double>();
  a.pos_x = j.at("pos_x").get<double>();
  a.pos_y = j.at("pos_y").get<double>();
  a.bg_level = j.at("bg_level").get<double>();
  return a;
}

void save_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples) {
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "%06zu.png", i);
    image::write_png(dir / name, samples[i].image);
    manifest << record_line(name, samples[i].attributes) << '\n';
  }
  archive::write_text(dir / "manifest.jsonl", manifest.str());
}

std::vector<Sample> load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.jsonl");
  if (!in) throw NotFoundError("no manifest.jsonl in " + dir.string());
  std::vector<Sample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    out.push_back({image::read_png(dir / j.at("file").get<std::string>()), attributes_from_json(j)});
  }
  return out;
}

std::vector<ImageTensor> images_of(const std::vector<Sample>& samples) {
  std::vector<ImageTensor> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.image);
  return out;
}

}  // namespace idinvert::data
