#include <doctest.h>

#include "gradcheck.hpp"
#include "idinvert/encoder.hpp"
#include "idinvert/errors.hpp"
#include "idinvert/synth_data.hpp"
#include "tiny_models.hpp"

using namespace idinvert;
using testutil::check_gradient;
using testutil::check_param_gradient;
using testutil::random_tensor;

namespace {

std::vector<ImageTensor> tiny_images(int n, std::uint64_t seed = 21) { return testutil::tiny_images(n, seed); }

}  // namespace

TEST_CASE("encoder loss gradient matches finite differences") {
  testutil::TinyModels m;
  auto& e = m.encoder;
  const auto x = ad::constant(random_tensor({2, 3, 8, 8}, 2, 0.5));
  for (auto kind : {encoder::AdversarialLoss::linear, encoder::AdversarialLoss::logistic}) {
    auto loss = [&] {
      return encoder::encoder_loss(e, m.gan.generator, m.gan.discriminator, m.features, x, 0.3, 0.1, kind).total;
    };
    for (const auto& name : {e.params().names().front(), std::string("E.fc.w")}) {
      CAPTURE(name);
      const auto r = check_param_gradient(loss, e.params().at(name), 10, 3);
      CHECK(r.checked >= 10);
      CHECK(r.max_rel_err < 1e-4);
    }
  }
}

TEST_CASE("discriminator loss with R1 matches finite differences") {
  testutil::TinyModels m;
  auto& d = m.gan.discriminator;
  const auto reals = random_tensor({3, 3, 8, 8}, 4, 0.5);
  const auto fakes = random_tensor({3, 3, 8, 8}, 5, 0.5);
  auto loss = [&] {
    return encoder::discriminator_loss(d, reals, fakes, 10.0, encoder::AdversarialLoss::logistic);
  };
  CHECK(check_param_gradient(loss, d.params().at(d.params().names().front()), 10, 6).max_rel_err < 1e-4);
}

TEST_CASE("code regularizer gradient matches finite differences") {
  testutil::TinyModels m;
  std::vector<ad::Var> noise;
  for (const auto& t : m.encoder.fixed_noise()) noise.push_back(ad::constant(t));
  auto f = [&](const ad::Var& z) { return encoder::encoder_regularizer(z, m.gan.generator, m.encoder, noise); };
  CHECK(check_gradient(f, random_tensor({1, m.gan.generator.style_dim()}, 7, 0.5), 12, 8).max_rel_err < 1e-4);
}

TEST_CASE("mean offset adds the generator's mean code to every row") {
  testutil::TinyModels m;
  const auto x = ad::constant(random_tensor({2, 3, 8, 8}, 9));
  ad::NoGradGuard ng;
  const auto with = m.encoder.forward(x).styles.value();
  const auto head = m.encoder.head(x).value();
  const int d = m.gan.generator.d_w();
  for (std::size_t i = 0; i < with.size(); ++i) {
    CHECK(with[i] == head[i] + m.gan.generator.mean_w()[i % static_cast<std::size_t>(d)]);
  }
}

TEST_CASE("W mode repeats one code over every layer") {
  auto ec = testutil::tiny_encoder_config();
  ec.w_mode = true;
  testutil::TinyModels m(0, ec);
  const auto s = m.encoder.encode(random_tensor({1, 3, 8, 8}, 10)).styles;
  const int d = m.gan.generator.d_w();
  for (int l = 1; l < m.gan.generator.num_layers(); ++l)
    for (int c = 0; c < d; ++c) CHECK(s[static_cast<std::size_t>(l * d + c)] == s[static_cast<std::size_t>(c)]);
}

TEST_CASE("noise heads cover exactly the first B blocks") {
  auto ec = testutil::tiny_encoder_config();
  ec.noise_blocks = 1;
  testutil::TinyModels m(0, ec);
  CHECK(m.encoder.predicts_noise(0));
  CHECK(m.encoder.predicts_noise(1));
  CHECK_FALSE(m.encoder.predicts_noise(2));
  const auto enc = m.encoder.encode(random_tensor({2, 3, 8, 8}, 11));
  REQUIRE(enc.noise.has_value());
  CHECK(enc.noise->at(0).dim(0) == 2);
  CHECK(enc.noise->at(2).storage() == m.encoder.fixed_noise()[2].storage());
  ec.noise_blocks = 3;
  CHECK_THROWS_AS(encoder::validate(ec, 4), ValidationError);
}

TEST_CASE("encoder training is deterministic and checkpoints round-trip") {
  testutil::TinyModels m;
  const auto imgs = tiny_images(12);
  auto ec = testutil::tiny_encoder_config();
  ec.steps = 3;
  ec.noise_blocks = 1;
  const auto a = encoder::train_domain_guided_encoder(m.gan.generator, m.gan.discriminator, m.features, imgs, ec, "h");
  const auto b = encoder::train_domain_guided_encoder(m.gan.generator, m.gan.discriminator, m.features, imgs, ec, "h");
  CHECK(a.encoder.params().identical(b.encoder.params()));
  CHECK(a.log.size() == 3);
  CHECK(a.first_epoch_mean_loss == b.first_epoch_mean_loss);

  testutil::TempDir dir("enc");
  encoder::save_encoder(dir.path / "e.ckpt", a.encoder);
  const auto r = encoder::load_encoder(dir.path / "e.ckpt", m.gan.generator);
  CHECK(r.params().identical(a.encoder.params()));
  CHECK(r.noise_gain() == a.encoder.noise_gain());
  CHECK(r.generator_hash == "h");
  const auto x = random_tensor({1, 3, 8, 8}, 12);
  CHECK(r.encode(x).styles.storage() == a.encoder.encode(x).styles.storage());

  const auto c1 = encoder::train_conventional_encoder(m.gan.generator, ec, "h");
  const auto c2 = encoder::train_conventional_encoder(m.gan.generator, ec, "h");
  CHECK(c1.encoder.params().identical(c2.encoder.params()));
}

TEST_CASE("training leaves the generator untouched") {
  testutil::TinyModels m;
  const auto before = m.gan.generator.params().clone();
  auto ec = testutil::tiny_encoder_config();
  ec.steps = 2;
  encoder::train_domain_guided_encoder(m.gan.generator, m.gan.discriminator, m.features, tiny_images(8), ec, "h");
  CHECK(m.gan.generator.params().identical(before));
}
