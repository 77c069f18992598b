#include <doctest.h>

#include "gradcheck.hpp"
#include "idinvert/errors.hpp"
#include "idinvert/inversion.hpp"
#include "idinvert/synth_data.hpp"
#include "tiny_models.hpp"

using namespace idinvert;
using testutil::check_gradient;
using testutil::random_tensor;

namespace {

ImageTensor shape_image(double size, double hue, std::uint64_t = 0) {
  return data::render_shape({data::ShapeKind::disk, size, hue, 0.5, 0.5, 0.4}, 8);
}

inversion::InversionConfig quick(double lambda_dom, int steps) {
  inversion::InversionConfig c;
  c.lambda_dom = lambda_dom;
  c.lambda_vgg = 0.5;
  c.steps = steps;
  return c;
}

}  // namespace

TEST_CASE("inversion objective gradient matches finite differences") {
  testutil::TinyModels m;
  const auto target = image::to_batch(std::vector<ImageTensor>{shape_image(0.3, 1.0)});
  std::vector<ad::Var> noise;
  for (const auto& t : m.encoder.fixed_noise()) noise.push_back(ad::constant(t));
  for (double ld : {0.0, 2.0}) {
    CAPTURE(ld);
    auto f = [&](const ad::Var& s) { return inversion::objective_graph(s, noise, target, {}, 0.5, ld, m.models()); };
    const auto r = check_gradient(f, random_tensor({1, m.gan.generator.style_dim()}, 2, 0.5), 12, 3);
    CHECK(r.checked >= 10);
    CHECK(r.max_rel_err < 1e-4);
  }
  // Masked variant.
  ad::Tensor mask({1, 1, 8, 8});
  for (int y = 2; y < 6; ++y)
    for (int x = 1; x < 5; ++x) mask[static_cast<std::size_t>(y * 8 + x)] = 1.0;
  auto fm = [&](const ad::Var& s) { return inversion::objective_graph(s, noise, target, mask, 0.5, 2.0, m.models()); };
  CHECK(check_gradient(fm, random_tensor({1, m.gan.generator.style_dim()}, 4, 0.5), 12, 5).max_rel_err < 1e-4);
}

TEST_CASE("terms add up and lambda_dom 0 drops the regularizer") {
  testutil::TinyModels m;
  const std::vector<ImageTensor> imgs{shape_image(0.3, 1.0)};
  const auto styles = random_tensor({1, m.gan.generator.style_dim()}, 6, 0.5);
  const auto v0 = inversion::objective(styles, imgs, quick(0.0, 1), m.models(), m.encoder.fixed_noise());
  const auto v2 = inversion::objective(styles, imgs, quick(2.0, 1), m.models(), m.encoder.fixed_noise());
  const auto& t0 = v0.terms[0];
  const auto& t2 = v2.terms[0];
  CHECK(t0.total == doctest::Approx(t0.pixel + 0.5 * t0.perceptual).epsilon(1e-14));
  CHECK(t2.total == doctest::Approx(t2.pixel + 0.5 * t2.perceptual + 2.0 * t2.regularizer).epsilon(1e-14));
  CHECK(t0.pixel == t2.pixel);
  CHECK(t0.perceptual == t2.perceptual);
  CHECK(t2.regularizer > 0.0);

  // The pixel term is the plain image MSE of the rendering.
  const auto rendered = image::from_batch(m.gan.generator.render(styles, m.encoder.fixed_noise()), 0);
  CHECK(t0.pixel == doctest::Approx(features::mse(rendered, imgs[0])).epsilon(1e-12));
}

TEST_CASE("zero steps returns the encoder code") {
  testutil::TinyModels m;
  const auto img = shape_image(0.25, 2.0);
  const auto r = inversion::invert(img, quick(2.0, 0), m.models());
  CHECK(r.loss_trace.size() == 1);
  CHECK(r.best_step == 0);
  CHECK(r.styles.storage() == m.encoder.encode(image::to_batch(std::vector<ImageTensor>{img})).styles.storage());
}

TEST_CASE("inversion lowers the objective and keeps the best iterate") {
  testutil::TinyModels m;
  const auto r = inversion::invert(shape_image(0.3, 0.5), quick(2.0, 30), m.models());
  REQUIRE(r.loss_trace.size() == 31);
  const auto& best = r.loss_trace[static_cast<std::size_t>(r.best_step)];
  CHECK(best.total < r.loss_trace.front().total);
  for (const auto& t : r.loss_trace) CHECK(best.total <= t.total);
  CHECK_FALSE(r.diverged);
}

TEST_CASE("encoder init beats random init at equal budgets") {
  // On an image the generator can represent exactly, starting at its code wins.
  testutil::TinyModels m;
  const auto truth = m.encoder.encode(random_tensor({1, 3, 8, 8}, 40, 0.3)).styles;
  const auto img = image::from_batch(m.gan.generator.render(truth, m.encoder.fixed_noise()), 0);
  auto enc = quick(0.0, 10);
  auto rnd = enc;
  rnd.init = inversion::InitMode::random;
  const auto a = inversion::invert(img, enc, m.models());
  const auto b = inversion::invert(img, rnd, m.models());
  CHECK(a.loss_trace[static_cast<std::size_t>(a.best_step)].total <
        b.loss_trace[static_cast<std::size_t>(b.best_step)].total);
}

TEST_CASE("inversion is bit-identical on rerun") {
  testutil::TinyModels m;
  auto c = quick(2.0, 8);
  c.init = inversion::InitMode::random;
  c.seed = 3;
  const auto a = inversion::invert(shape_image(0.3, 1.0), c, m.models());
  const auto b = inversion::invert(shape_image(0.3, 1.0), c, m.models());
  CHECK(a.styles.storage() == b.styles.storage());
  CHECK(a.best_step == b.best_step);
}

TEST_CASE("batched inversion matches one-at-a-time") {
  testutil::TinyModels m;
  const std::vector<ImageTensor> imgs{shape_image(0.3, 1.0), shape_image(0.2, 4.0)};
  const auto c = quick(2.0, 5);
  const auto batch = inversion::invert_batch(imgs, c, m.models());
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    const auto one = inversion::invert(imgs[i], c, m.models());
    for (std::size_t k = 0; k < one.styles.size(); ++k) CHECK(batch[i].styles[k] == doctest::Approx(one.styles[k]).epsilon(1e-12));
  }
}

TEST_CASE("an all-ones mask reduces to plain inversion") {
  testutil::TinyModels m;
  const auto img = shape_image(0.3, 1.0);
  const auto c = quick(2.0, 6);
  const auto plain = inversion::invert(img, c, m.models());
  const auto masked = inversion::masked_invert(img, ImageTensor(1, 8, 8, 1.0), c, m.models());
  // Same objective, different summation order.
  for (std::size_t i = 0; i < plain.styles.size(); ++i) CHECK(plain.styles[i] == doctest::Approx(masked.styles[i]).epsilon(1e-9));
}

TEST_CASE("an all-zeros mask without perceptual weight only shrinks the regularizer") {
  testutil::TinyModels m;
  auto c = quick(2.0, 20);
  c.lambda_vgg = 0.0;
  const auto r = inversion::masked_invert(shape_image(0.3, 1.0), ImageTensor(1, 8, 8, 0.0), c, m.models());
  for (const auto& t : r.loss_trace) CHECK(t.total == doctest::Approx(2.0 * t.regularizer).epsilon(1e-12));
  CHECK(r.loss_trace[static_cast<std::size_t>(r.best_step)].regularizer < r.loss_trace.front().regularizer);
}

TEST_CASE("invalid configs name the offending field") {
  testutil::TinyModels m;
  const auto img = shape_image(0.3, 1.0);
  auto expect_field = [&](inversion::InversionConfig c, const std::string& field) {
    try {
      inversion::validate(c, img);
      FAIL("no error for " << field);
    } catch (const ValidationError& e) {
      CHECK(e.field() == field);
    }
  };
  auto c = quick(-1.0, 5);
  expect_field(c, "lambda_dom");
  c = quick(1.0, -1);
  expect_field(c, "steps");
  c = quick(1.0, 5);
  c.mask = ImageTensor(1, 8, 8, 0.5);
  expect_field(c, "mask");
  c.mask = ImageTensor(1, 4, 4, 1.0);
  expect_field(c, "mask");
}

TEST_CASE("results round-trip through the archive") {
  testutil::TinyModels m;
  auto c = quick(1.0, 4);
  c.optimize_noise = true;
  const auto r = inversion::invert(shape_image(0.3, 1.0), c, m.models());
  testutil::TempDir dir("inv");
  inversion::save_result(dir.path / "r.inv", r);
  const auto back = inversion::load_result(dir.path / "r.inv");
  // Archives store float32.
  REQUIRE(back.styles.size() == r.styles.size());
  for (std::size_t i = 0; i < r.styles.size(); ++i) CHECK(back.styles[i] == static_cast<float>(r.styles[i]));
  REQUIRE(back.noise.has_value());
  CHECK(back.noise->size() == r.noise->size());
  CHECK(back.loss_trace.size() == r.loss_trace.size());
  CHECK(back.loss_trace.back().total == static_cast<float>(r.loss_trace.back().total));
  CHECK(back.best_step == r.best_step);
}
