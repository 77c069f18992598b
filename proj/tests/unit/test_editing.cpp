#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "gradcheck.hpp"
#include "idinvert/editing.hpp"
#include "idinvert/errors.hpp"
#include "idinvert/stats.hpp"
#include "idinvert/synth_data.hpp"
#include "tiny_models.hpp"

using namespace idinvert;

namespace {

double angle_deg(const ad::Tensor& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::acos(std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0)) * 180.0 / std::numbers::pi;
}

// Separable 2-D codes whose true normal is (1, 0).
std::pair<ad::Tensor, std::vector<int>> toy_codes(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  ad::Tensor codes({n, 2});
  std::vector<int> labels;
  for (int i = 0; i < n; ++i) {
    const int y = i % 2;
    codes[static_cast<std::size_t>(2 * i)] = (y ? 1.0 : -1.0) * (0.5 + std::abs(g(rng)));
    codes[static_cast<std::size_t>(2 * i + 1)] = 3.0 * g(rng);
    labels.push_back(y);
  }
  return {codes, labels};
}

editing::SemanticBoundary some_boundary(const gan::Generator& g) {
  editing::SemanticBoundary b;
  b.attribute = "size";
  b.normal = ad::Tensor({1, g.d_w()});
  b.normal[0] = 0.6;
  b.normal[1] = 0.8;
  b.code_std = 0.7;
  return b;
}

ad::Tensor a_code(const testutil::TinyModels& m, std::uint64_t seed) {
  return m.encoder.encode(testutil::random_tensor({1, 3, 8, 8}, seed, 0.4)).styles;
}

}  // namespace

TEST_CASE("toy boundary recovers the known normal within 2 degrees") {
  auto [codes, labels] = toy_codes(200, 1);
  const auto b = editing::find_boundary(codes, labels, "toy");
  double norm = 0;
  for (double v : b.normal.data()) norm += v * v;
  CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(angle_deg(b.normal, {1.0, 0.0}) < 2.0);
  CHECK(b.accuracy == 1.0);
}

TEST_CASE("flipped labels negate the normal") {
  auto [codes, labels] = toy_codes(200, 2);
  const auto b = editing::find_boundary(codes, labels, "toy");
  for (auto& y : labels) y = 1 - y;
  const auto f = editing::find_boundary(codes, labels, "toy");
  std::vector<double> neg;
  for (double v : b.normal.data()) neg.push_back(-v);
  CHECK(angle_deg(f.normal, neg) < 2.0);
}

TEST_CASE("a single class cannot define a boundary") {
  auto [codes, labels] = toy_codes(20, 3);
  std::fill(labels.begin(), labels.end(), 1);
  CHECK_THROWS_AS(editing::find_boundary(codes, labels, "toy"), ValidationError);
  labels[0] = 0;
  CHECK_THROWS_AS(editing::find_boundary(codes, labels, "toy"), ValidationError);
}

TEST_CASE("alpha 0 renders the plain reconstruction") {
  testutil::TinyModels m;
  const auto& g = m.gan.generator;
  const auto z = a_code(m, 4);
  const auto plain = image::from_batch(g.render(z, m.encoder.fixed_noise()), 0);
  const auto b = some_boundary(g);
  CHECK(editing::manipulate(z, b, 0.0, g, m.encoder.fixed_noise()).data == plain.data);
}

TEST_CASE("manipulation is code arithmetic") {
  testutil::TinyModels m;
  const auto& g = m.gan.generator;
  const int L = g.num_layers();
  const auto z = a_code(m, 5);
  const auto b = some_boundary(g);
  const auto moved = editing::edit_code(z, b, 1.5, L, 0, L);
  CHECK(editing::manipulate(z, b, 1.5, g, m.encoder.fixed_noise()).data ==
        image::from_batch(g.render(moved, m.encoder.fixed_noise()), 0).data);
  // Two steps compose into one.
  const auto twice = editing::edit_code(editing::edit_code(z, b, 0.5, L, 0, L), b, 1.0, L, 0, L);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(twice[i] == doctest::Approx(moved[i]).epsilon(1e-14));
  // Displacement is alpha * code_std along the unit normal on every row.
  for (int l = 0; l < L; ++l) {
    const std::size_t i = static_cast<std::size_t>(l * g.d_w());
    CHECK(moved[i] - z[i] == doctest::Approx(1.5 * 0.7 * 0.6));
  }
}

TEST_CASE("layer ranges select rows") {
  testutil::TinyModels m;
  const auto& g = m.gan.generator;
  const int L = g.num_layers();
  const auto z = a_code(m, 6);
  const auto b = some_boundary(g);
  const auto& noise = m.encoder.fixed_noise();
  CHECK(editing::layerwise_edit(z, b, 2.0, 0, L, g, noise).data == editing::manipulate(z, b, 2.0, g, noise).data);
  CHECK(editing::layerwise_edit(z, b, 2.0, 1, 1, g, noise).data == editing::manipulate(z, b, 0.0, g, noise).data);
  const auto part = editing::edit_code(z, b, 1.0, L, 1, 2);
  const int d = g.d_w();
  for (int i = 0; i < L * d; ++i) {
    if (i / d == 1) continue;
    CHECK(part[static_cast<std::size_t>(i)] == z[static_cast<std::size_t>(i)]);
  }
  CHECK_THROWS_AS(editing::layerwise_edit(z, b, 1.0, 0, L + 1, g, noise), ValidationError);
  CHECK_THROWS_AS(editing::layerwise_edit(z, b, 1.0, -1, 2, g, noise), ValidationError);
  CHECK_THROWS_AS(editing::edit_code(z, b, std::nan(""), L, 0, L), ValidationError);
}

TEST_CASE("interpolation endpoints are exact") {
  testutil::TinyModels m;
  const auto& g = m.gan.generator;
  const auto za = a_code(m, 7), zb = a_code(m, 8);
  const auto& n = m.encoder.fixed_noise();
  CHECK(editing::interpolate(za, zb, 0.0, g, n, n).data == image::from_batch(g.render(za, n), 0).data);
  CHECK(editing::interpolate(za, zb, 1.0, g, n, n).data == image::from_batch(g.render(zb, n), 0).data);
  CHECK(editing::interpolate(za, za, 0.5, g, n, n).data == image::from_batch(g.render(za, n), 0).data);
  CHECK_THROWS_AS(editing::interpolate(za, zb, 1.5, g, n, n), ValidationError);
}

TEST_CASE("degenerate crop boxes are rejected") {
  CHECK_THROWS_AS(editing::validate(editing::CropBox{2, 2, 0, 3}, 8, 8), ValidationError);
  CHECK_THROWS_AS(editing::validate(editing::CropBox{6, 2, 4, 3}, 8, 8), ValidationError);
  CHECK_NOTHROW(editing::validate(editing::CropBox{0, 0, 8, 8}, 8, 8));
  const editing::CropBox box{1, 2, 3, 4};
  const auto back = editing::crop_box_from_json(editing::to_json(box));
  CHECK(back.x == 1);
  CHECK(back.height == 4);
}

TEST_CASE("full-image diffusion equals inversion of the target") {
  testutil::TinyModels m;
  const auto target = data::render_shape({data::ShapeKind::square, 0.3, 1.0, 0.5, 0.5, 0.3}, 8);
  const auto context = data::render_shape({data::ShapeKind::disk, 0.2, 3.0, 0.4, 0.6, 0.7}, 8);
  inversion::InversionConfig c;
  c.steps = 5;
  c.lambda_vgg = 0.5;
  const auto d = editing::diffuse(target, context, {0, 0, 8, 8}, c, m.models());
  const auto plain = inversion::invert(target, c, m.models());
  // Same objective, different summation order.
  for (std::size_t i = 0; i < d.inversion.styles.size(); ++i) CHECK(d.inversion.styles[i] == doctest::Approx(plain.styles[i]).epsilon(1e-9));
  CHECK(d.stitched.data == target.data);
  CHECK(d.mask.channels == 1);
}

TEST_CASE("partial diffusion pastes the crop and keeps the context elsewhere") {
  testutil::TinyModels m;
  const auto target = data::render_shape({data::ShapeKind::square, 0.3, 1.0, 0.5, 0.5, 0.3}, 8);
  const auto context = data::render_shape({data::ShapeKind::disk, 0.2, 3.0, 0.4, 0.6, 0.7}, 8);
  inversion::InversionConfig c;
  c.steps = 3;
  const auto d = editing::diffuse(target, context, {2, 2, 4, 4}, c, m.models());
  for (int ch = 0; ch < 3; ++ch) {
    CHECK(d.stitched.at(ch, 3, 3) == target.at(ch, 3, 3));
    CHECK(d.stitched.at(ch, 0, 0) == context.at(ch, 0, 0));
  }
  CHECK(d.mask.at(0, 3, 3) == 1.0);
  CHECK(d.mask.at(0, 7, 7) == 0.0);
  CHECK(d.image.same_shape(target));
  CHECK_THROWS_AS(editing::diffuse(target, context, {2, 2, 0, 4}, c, m.models()), ValidationError);
}

TEST_CASE("boundaries round-trip and missing files are not found") {
  testutil::TinyModels m;
  testutil::TempDir dir("bnd");
  m.save(dir.path);
  const auto bs = editing::load_boundaries(dir.path / "boundaries.json");
  REQUIRE(bs.size() == 2);
  CHECK(editing::find_by_attribute(bs, "pos_x").attribute == "pos_x");
  CHECK_THROWS_AS(editing::find_by_attribute(bs, "hue"), NotFoundError);
  CHECK_THROWS_AS(editing::load_boundaries(dir.path / "nope.json"), NotFoundError);
  editing::save_boundaries(dir.path / "again.json", bs);
  CHECK(archive::read_text(dir.path / "again.json") == archive::read_text(dir.path / "boundaries.json"));
}

TEST_CASE("codes labeled by a boundary are ranked perfectly by it") {
  testutil::TinyModels m;
  const auto& g = m.gan.generator;
  auto b = some_boundary(g);
  b.bias = 0.1;
  std::vector<double> scores;
  std::vector<int> labels;
  for (int i = 0; i < 40; ++i) {
    const auto z = g.broadcast_w(ad::constant(g.map(testutil::random_tensor({1, 8}, 100 + i)))).value();
    const double s = b.decision(z);
    scores.push_back(s);
    labels.push_back(s > 0 ? 1 : 0);
  }
  CHECK(stats::average_precision(scores, labels) == doctest::Approx(1.0));
}
