#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "idinvert/synth_data.hpp"

using namespace idinvert;
using namespace idinvert::data;

namespace {

double circ_err(double a, double b) {
  double d = std::fmod(std::abs(a - b), 2 * std::numbers::pi);
  return std::min(d, 2 * std::numbers::pi - d);
}

}  // namespace

TEST_CASE("rendering is deterministic and bounded") {
  ShapeSpec s{ShapeKind::triangle, 0.2, 1.0, 0.45, 0.55, 0.3};
  auto a = render_shape(s, 32);
  auto b = render_shape(s, 32);
  CHECK(a.data == b.data);
  for (double v : a.data) CHECK((v >= -1.0 && v <= 1.0));
}

TEST_CASE("disk of size 0.3 is measured within 5%") {
  auto img = render_shape({ShapeKind::disk, 0.3, 0.0, 0.5, 0.5, 0.5}, 32);
  auto m = measure_attributes(img);
  CHECK(std::abs(m.size - 0.3) / 0.3 < 0.05);
  CHECK(m.kind == ShapeKind::disk);
}

TEST_CASE("square of hue 0 is measured within 0.1 rad") {
  auto m = measure_attributes(render_shape({ShapeKind::square, 0.15, 0.0, 0.5, 0.5, 0.4}, 32));
  CHECK(circ_err(m.hue, 0.0) < 0.1);
  CHECK(m.kind == ShapeKind::square);
}

TEST_CASE("validation names the offending field") {
  try {
    render_shape({ShapeKind::disk, 0.5, 0.0, 0.5, 0.5, 0.5}, 32);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(e.field() == "size");
  }
  try {
    render_shape({ShapeKind::disk, 0.1, 0.0, 0.8, 0.5, 0.5}, 32);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(e.field() == "pos_x");
  }
  DatasetConfig c;
  c.n_images = 0;
  CHECK_THROWS_AS(generate_dataset(c), ValidationError);
  c.n_images = 4;
  c.resolution = 48;
  CHECK_THROWS_AS(generate_dataset(c), ValidationError);
}

TEST_CASE("uniform gray image has no shape") {
  ImageTensor img(3, 32, 32, 0.1);
  CHECK_THROWS_AS(measure_attributes(img), NoShapeError);
}

TEST_CASE("dataset is reproducible and seed-sensitive") {
  DatasetConfig c;
  c.n_images = 5;
  c.seed = 7;
  auto a = generate_dataset(c), b = generate_dataset(c);
  for (int i = 0; i < 5; ++i) CHECK(a[i].image.data == b[i].image.data);
  std::vector<std::vector<double>> firsts;
  for (int s = 0; s < 100; ++s) {
    c.seed = static_cast<std::uint64_t>(s);
    c.n_images = 1;
    firsts.push_back(generate_dataset(c)[0].image.data);
  }
  std::sort(firsts.begin(), firsts.end());
  CHECK(std::adjacent_find(firsts.begin(), firsts.end()) == firsts.end());
}

TEST_CASE("size distribution passes a Kolmogorov-Smirnov test against uniform") {
  DatasetConfig c;
  c.n_images = 1000;
  c.seed = 3;
  auto ds = generate_dataset(c);
  std::vector<double> sizes;
  for (const auto& s : ds) sizes.push_back(s.attributes.size);
  std::sort(sizes.begin(), sizes.end());
  double ks = 0.0;
  const double n = static_cast<double>(sizes.size());
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    const double cdf = (sizes[i] - c.size.lo) / (c.size.hi - c.size.lo);
    ks = std::max({ks, std::abs(cdf - i / n), std::abs((i + 1) / n - cdf)});
  }
  CHECK(ks < 0.05);
}

TEST_CASE("measurement recovers attributes for 99% of random specs") {
  DatasetConfig c;
  c.n_images = 1000;
  c.seed = 11;
  auto ds = generate_dataset(c);
  int ok = 0, kind_ok = 0;
  for (const auto& s : ds) {
    auto m = measure_attributes(s.image);
    const auto& t = s.attributes;
    const bool good = std::abs(m.size - t.size) <= 0.05 * t.size && std::abs(m.pos_x - t.pos_x) <= 0.05 * t.pos_x &&
                      std::abs(m.pos_y - t.pos_y) <= 0.05 * t.pos_y && circ_err(m.hue, t.hue) <= 0.05 * 2 * std::numbers::pi;
    ok += good ? 1 : 0;
    kind_ok += m.kind == t.kind ? 1 : 0;
  }
  MESSAGE("recovered " << ok << "/1000, kind " << kind_ok << "/1000");
  CHECK(ok >= 990);
  CHECK(kind_ok >= 900);
}

TEST_CASE("dataset round-trips through PNG and manifest") {
  DatasetConfig c;
  c.n_images = 3;
  auto ds = generate_dataset(c);
  auto dir = std::filesystem::temp_directory_path() / "idinvert_ds_test";
  std::filesystem::remove_all(dir);
  save_dataset(dir, ds);
  auto back = load_dataset(dir);
  REQUIRE(back.size() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(back[i].attributes.size == ds[i].attributes.size);
    for (std::size_t k = 0; k < ds[i].image.size(); ++k) CHECK(std::abs(back[i].image.data[k] - ds[i].image.data[k]) <= 1.0 / 255 + 1e-12);
  }
  std::filesystem::remove_all(dir);
}
