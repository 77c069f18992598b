#pragma once

// Untrained 8x8 networks small enough for finite differences and fast
// end-to-end plumbing tests.

#include <filesystem>
#include <random>
#include <string>

#include "idinvert/archive.hpp"
#include "idinvert/editing.hpp"
#include "idinvert/encoder.hpp"
#include "idinvert/features.hpp"
#include "idinvert/gan.hpp"
#include "idinvert/inversion.hpp"
#include "idinvert/synth_data.hpp"

namespace testutil {

namespace fs = std::filesystem;
using namespace idinvert;

inline gan::GanConfig tiny_gan_config(std::uint64_t seed = 0) {
  gan::GanConfig c;
  c.d_z = 8;
  c.d_w = 8;
  c.resolution = 8;
  c.channels = {8, 4};
  c.mapping_layers = 2;
  c.disc_base_channels = 4;
  c.mean_w_samples = 64;
  c.batch_size = 4;
  c.seed = seed;
  return c;
}

inline features::FeatureNetConfig tiny_feature_config() {
  features::FeatureNetConfig c;
  c.resolution = 8;
  c.channels = {4, 8};
  c.feature_block = 1;
  c.hidden = 8;
  c.batch_size = 8;
  return c;
}

inline encoder::EncoderConfig tiny_encoder_config() {
  encoder::EncoderConfig c;
  c.depth = 6;
  c.channels = {4, 4};
  c.batch_size = 4;
  c.epoch_size = 8;
  return c;
}

// The generator only renders 16 px and up; tiny models work at 8.
inline std::vector<data::Sample> tiny_samples(int n, std::uint64_t seed) {
  data::DatasetConfig dc;
  dc.n_images = n;
  dc.resolution = 16;
  dc.seed = seed;
  auto ds = data::generate_dataset(dc);
  for (auto& s : ds) s.image = image::center_crop_resize(s.image, 8);
  return ds;
}

inline std::vector<ImageTensor> tiny_images(int n, std::uint64_t seed) { return data::images_of(tiny_samples(n, seed)); }

struct TinyModels {
  gan::GanModel gan;
  features::FeatureNet features;
  encoder::Encoder encoder;

  explicit TinyModels(std::uint64_t seed = 0, encoder::EncoderConfig ec = tiny_encoder_config()) {
    const auto gc = tiny_gan_config(seed);
    gan.generator = gan::Generator(gc);
    // Stored like a trained checkpoint: float32 values.
    auto mw = gan.generator.estimate_mean_w(gc.mean_w_samples, seed + 1);
    for (double& v : mw.data()) v = static_cast<float>(v);
    gan.generator.set_mean_w(std::move(mw));
    gan.discriminator = gan::Discriminator(gc, seed + 2);
    features = features::FeatureNet(tiny_feature_config());
    ec.seed = seed + 3;
    encoder = encoder::Encoder(ec, gan.generator);
  }

  inversion::Models models() const { return {gan.generator, encoder, features}; }

  /// Writes gan.ckpt, encoder.ckpt, features.ckpt and boundaries.json into dir.
  void save(const fs::path& dir) {
    fs::create_directories(dir);
    gan::save_gan(dir / "gan.ckpt", gan);
    encoder.generator_hash = archive::file_sha256(dir / "gan.ckpt");
    encoder::save_encoder(dir / "encoder.ckpt", encoder);
    features::save_feature_net(dir / "features.ckpt", features);
    std::vector<editing::SemanticBoundary> bs;
    std::mt19937_64 rng(7);
    std::normal_distribution<double> n(0.0, 1.0);
    for (const char* attr : {"size", "pos_x"}) {
      editing::SemanticBoundary b;
      b.attribute = attr;
      b.normal = ad::Tensor({1, gan.generator.d_w()});
      double norm = 0.0;
      for (auto& v : b.normal.storage()) {
        v = n(rng);
        norm += v * v;
      }
      for (auto& v : b.normal.storage()) v /= std::sqrt(norm);
      b.code_std = 0.5;
      b.accuracy = 1.0;
      b.model_hash = encoder.generator_hash;
      bs.push_back(b);
    }
    editing::save_boundaries(dir / "boundaries.json", bs);
  }
};

/// A process-unique scratch directory under the system temp dir, removed on destruction.
struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path = fs::temp_directory_path() / ("idinvert-" + tag + "-" + std::to_string(rd()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

}  // namespace testutil
