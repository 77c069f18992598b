#include <doctest.h>

#include <random>

#include "gradcheck.hpp"
#include "idinvert/errors.hpp"
#include "idinvert/features.hpp"
#include "idinvert/synth_data.hpp"
#include "tiny_models.hpp"

using namespace idinvert;
using testutil::check_gradient;
using testutil::random_tensor;

namespace {

Eigen::MatrixXd gaussian(int n, int d, double mean, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(mean, 1.0);
  Eigen::MatrixXd m(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) m(i, j) = g(rng);
  return m;
}

}  // namespace

TEST_CASE("extract_features gradient matches finite differences") {
  const features::FeatureNet net(testutil::tiny_feature_config());
  const ad::Var w = ad::constant(random_tensor({2, net.feature_dim()}, 3));
  auto f = [&](const ad::Var& x) { return ad::sum(ad::mul(net.extract_features(x), w)); };
  const auto r = check_gradient(f, random_tensor({2, 3, 8, 8}, 4, 0.5), 14, 5);
  CHECK(r.checked >= 10);
  CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("pixel MSE equals the explicit loop") {
  ImageTensor a(3, 4, 4), b(3, 4, 4);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  for (auto& v : a.data) v = u(rng);
  for (auto& v : b.data) v = u(rng);
  double acc = 0.0;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) acc += (a.at(c, y, x) - b.at(c, y, x)) * (a.at(c, y, x) - b.at(c, y, x));
  CHECK(features::mse(a, b) == doctest::Approx(acc / 48.0).epsilon(1e-14));
  CHECK(features::mse(a, a) == 0.0);
}

TEST_CASE("SSIM of an image with itself is 1") {
  auto img = data::render_shape({data::ShapeKind::disk, 0.3, 1.0, 0.5, 0.5, 0.4}, 32);
  CHECK(features::ssim(img, img) == doctest::Approx(1.0).epsilon(1e-12));
  auto other = data::render_shape({data::ShapeKind::square, 0.2, 3.0, 0.4, 0.6, 0.7}, 32);
  CHECK(features::ssim(img, other) < 0.9);
}

TEST_CASE("Frechet distance of N(0,1) and N(1,1) in 1-D is 1") {
  const auto a = gaussian(20000, 1, 0.0, 1);
  const auto b = gaussian(20000, 1, 1.0, 2);
  CHECK(features::frechet_distance(a, b) == doctest::Approx(1.0).epsilon(0.05));
  CHECK(features::frechet_distance(a, a) < 1e-9);
}

TEST_CASE("Frechet distance needs more samples than dimensions") {
  CHECK_THROWS_AS(features::frechet_distance(gaussian(4, 4, 0, 1), gaussian(4, 4, 0, 2)), ValidationError);
}

TEST_CASE("1-D Wasserstein distance of a shifted sample is the shift") {
  std::vector<double> a{0.3, -1.2, 2.0, 0.0, 0.7};
  std::vector<double> b;
  for (double v : a) b.push_back(v + 0.25);
  CHECK(features::wasserstein_1d(a, b) == doctest::Approx(0.25).epsilon(1e-12));
  // In one dimension every projection is +-1, so the sliced distance is the same.
  Eigen::MatrixXd ma(5, 1), mb(5, 1);
  for (int i = 0; i < 5; ++i) {
    ma(i, 0) = a[static_cast<std::size_t>(i)];
    mb(i, 0) = b[static_cast<std::size_t>(i)];
  }
  CHECK(features::sliced_wasserstein(ma, mb, 16, 3) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK_THROWS_AS(features::wasserstein_1d({1.0}, {1.0, 2.0}), ValidationError);
}

TEST_CASE("SWD of a set with itself is 0 and grows with a shift") {
  data::DatasetConfig dc;
  dc.n_images = 8;
  dc.seed = 4;
  const auto imgs = data::images_of(data::generate_dataset(dc));
  CHECK(features::swd(imgs, imgs) == doctest::Approx(0.0));
  auto shifted = imgs;
  for (auto& im : shifted)
    for (auto& v : im.data) v = std::min(1.0, v + 0.3);
  CHECK(features::swd(imgs, shifted) > 0.01);
}

TEST_CASE("feature net training is deterministic and round-trips") {
  const auto ds = testutil::tiny_samples(24, 9);
  auto fc = testutil::tiny_feature_config();
  fc.steps = 5;
  const auto a = features::train_feature_net(ds, fc);
  const auto b = features::train_feature_net(ds, fc);
  CHECK(a.params().identical(b.params()));
  testutil::TempDir dir("feat");
  features::save_feature_net(dir.path / "f.ckpt", a);
  CHECK(features::load_feature_net(dir.path / "f.ckpt").params().identical(a.params()));
  CHECK_THROWS_AS(features::train_feature_net({}, fc), ValidationError);
}
