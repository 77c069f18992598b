#include "idinvert/features.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "idinvert/archive.hpp"
#include "idinvert/errors.hpp"

namespace idinvert::features {

namespace {

constexpr double kActGain = 1.4142135623730951;

// Target standardization: (value - center) / spread.
constexpr double kSizeCenter = 0.15, kSizeSpread = 0.05;
constexpr double kPosCenter = 0.5, kPosSpread = 0.1;
constexpr double kBgCenter = 0.5, kBgSpread = 0.2;

Var act(const Var& x) { return ad::scale(ad::leaky_relu(x, 0.2), kActGain); }

std::string block_name(int b) { return "F.b" + std::to_string(b); }

}  // namespace

void validate(const FeatureNetConfig& c) {
  if (c.resolution < 8 || (c.resolution & (c.resolution - 1)) != 0) {
    throw ValidationError("resolution", "must be a power of two >= 8");
  }
  if (c.channels.empty()) throw ValidationError("channels", "at least one block required");
  if ((c.resolution >> (c.channels.size() - 1)) < 1) throw ValidationError("channels", "too many blocks");
  if (c.feature_block < 0 || c.feature_block >= static_cast<int>(c.channels.size())) {
    throw ValidationError("feature_block", "must index a block");
  }
  if (c.hidden < 1) throw ValidationError("hidden", "must be positive");
  if (c.steps < 0) throw ValidationError("steps", "must be non-negative");
  if (c.batch_size < 1) throw ValidationError("batch_size", "must be positive");
  if (c.val_fraction < 0 || c.val_fraction >= 1) throw ValidationError("val_fraction", "must lie in [0, 1)");
}

FeatureNetConfig feature_config_from_json(const nlohmann::json& j) {
  FeatureNetConfig c;
  c.resolution = j.value("resolution", c.resolution);
  c.channels = j.value("channels", c.channels);
  c.feature_block = j.value("feature_block", c.feature_block);
  c.hidden = j.value("hidden", c.hidden);
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  c.seed = j.value("seed", c.seed);
  validate(c);
  return c;
}

nlohmann::json to_json(const FeatureNetConfig& c) {
  return {{"resolution", c.resolution}, {"channels", c.channels}, {"feature_block", c.feature_block},
          {"hidden", c.hidden},         {"steps", c.steps},       {"batch_size", c.batch_size},
          {"lr", c.lr},                 {"val_fraction", c.val_fraction}, {"seed", c.seed}};
}

Tensor targets_of(std::span<const data::AttributeVector> attrs) {
  Tensor t({static_cast<int>(attrs.size()), kNumTargets}, 0.0);
  for (std::size_t i = 0; i < attrs.size(); ++i) {
    const auto& a = attrs[i];
    double* row = t.data().data() + i * kNumTargets;
    row[0] = (a.size - kSizeCenter) / kSizeSpread;
    row[1] = std::cos(a.hue);
    row[2] = std::sin(a.hue);
    row[3] = (a.pos_x - kPosCenter) / kPosSpread;
    row[4] = (a.pos_y - kPosCenter) / kPosSpread;
    row[5] = (a.bg_level - kBgCenter) / kBgSpread;
    row[6 + static_cast<int>(a.kind)] = 1.0;
  }
  return t;
}

FeatureNet::FeatureNet(const FeatureNetConfig& config) : config_(config) {
  validate(config_);
  std::mt19937_64 rng(config_.seed);
  int prev = 3;
  for (std::size_t b = 0; b < config_.channels.size(); ++b) {
    nn::add_conv(params_, block_name(static_cast<int>(b)), prev, config_.channels[b], 3, rng);
    prev = config_.channels[b];
  }
  const int side = config_.resolution >> (config_.channels.size() - 1);
  nn::add_dense(params_, "F.fc0", prev * side * side, config_.hidden, rng);
  nn::add_dense(params_, "F.fc1", config_.hidden, kNumTargets, rng);
}

int FeatureNet::feature_dim() const {
  const int side = config_.resolution >> config_.feature_block;
  return config_.channels[static_cast<std::size_t>(config_.feature_block)] * side * side;
}

FeatureOutputs FeatureNet::forward(const Var& x) const {
  const auto& s = x.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != config_.resolution || s[3] != config_.resolution) {
    throw ad::ShapeError("feature net expects [N, 3, " + std::to_string(config_.resolution) + ", " +
                         std::to_string(config_.resolution) + "], got " + ad::shape_str(s));
  }
  const int n = s[0];
  const int blocks = static_cast<int>(config_.channels.size());
  FeatureOutputs out;
  Var h = x;
  for (int b = 0; b < blocks; ++b) {
    h = act(nn::conv(h, params_.at(block_name(b) + ".w"), params_.at(block_name(b) + ".b")));
    if (b == config_.feature_block) out.features = ad::reshape(h, {n, static_cast<int>(h.size()) / n});
    if (b + 1 < blocks) h = ad::avgpool2x(h);
  }
  h = ad::reshape(h, {n, static_cast<int>(h.size()) / n});
  out.embedding = act(nn::dense(h, params_.at("F.fc0.w"), params_.at("F.fc0.b")));
  out.prediction = nn::dense(out.embedding, params_.at("F.fc1.w"), params_.at("F.fc1.b"));
  return out;
}

Var FeatureNet::extract_features(const Var& x) const {
  const auto& s = x.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != config_.resolution || s[3] != config_.resolution) {
    throw ad::ShapeError("feature net expects [N, 3, " + std::to_string(config_.resolution) + ", " +
                         std::to_string(config_.resolution) + "], got " + ad::shape_str(s));
  }
  const int n = s[0];
  Var h = x;
  for (int b = 0; b <= config_.feature_block; ++b) {
    h = act(nn::conv(h, params_.at(block_name(b) + ".w"), params_.at(block_name(b) + ".b")));
    if (b < config_.feature_block) h = ad::avgpool2x(h);
  }
  return ad::reshape(h, {n, static_cast<int>(h.size()) / n});
}

std::vector<double> FeatureNet::predict_size(const Tensor& images) const {
  ad::NoGradGuard ng;
  Tensor p = forward(ad::constant(images)).prediction.value();
  std::vector<double> out(static_cast<std::size_t>(p.dim(0)));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = p[i * kNumTargets] * kSizeSpread + kSizeCenter;
  return out;
}

Eigen::MatrixXd FeatureNet::embed(std::span<const ImageTensor> images) const {
  ad::NoGradGuard ng;
  Eigen::MatrixXd out(static_cast<Eigen::Index>(images.size()), config_.hidden);
  constexpr std::size_t kChunk = 128;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    auto part = images.subspan(start, std::min(kChunk, images.size() - start));
    Tensor e = forward(ad::constant(image::to_batch(part))).embedding.value();
    for (std::size_t i = 0; i < part.size(); ++i)
      for (int k = 0; k < config_.hidden; ++k)
        out(static_cast<Eigen::Index>(start + i), k) = e[i * static_cast<std::size_t>(config_.hidden) + k];
  }
  return out;
}

FeatureNet train_feature_net(std::span<const data::Sample> dataset, const FeatureNetConfig& config,
                             FeatureTrainReport* report) {
  validate(config);
  if (dataset.empty()) throw ValidationError("dataset", "must contain at least one image");
  FeatureNet net(config);
  std::mt19937_64 rng(config.seed ^ 0xFEA7ULL);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_val = static_cast<std::size_t>(config.val_fraction * static_cast<double>(dataset.size()));
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  if (train.empty()) throw ValidationError("dataset", "no training images after the validation split");

  auto batch_of = [&](std::span<const std::size_t> idx) {
    std::vector<ImageTensor> imgs;
    std::vector<data::AttributeVector> attrs;
    for (std::size_t i : idx) {
      imgs.push_back(dataset[i].image);
      attrs.push_back(dataset[i].attributes);
    }
    return std::make_pair(image::to_batch(imgs), targets_of(attrs));
  };

  nn::Adam opt(nn::AdamConfig{config.lr, 0.9, 0.999, 1e-8});
  std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
  FeatureTrainReport local;
  for (int step = 0; step < config.steps; ++step) {
    std::vector<std::size_t> idx(static_cast<std::size_t>(config.batch_size));
    for (auto& i : idx) i = train[pick(rng)];
    auto [x, y] = batch_of(idx);
    Var pred = net.forward(ad::constant(x)).prediction;
    Var loss = ad::mean(ad::square(ad::sub(pred, ad::constant(y))));
    const double lv = loss.item();
    if (!std::isfinite(lv)) throw DivergenceError("non-finite feature-net loss at step " + std::to_string(step));
    local.loss_trace.push_back(lv);
    auto vars = net.params().vars();
    auto grads = ad::grad(loss, vars);
    opt.step(vars, grads);
  }
  net.params().round_to_float();

  double err = 0.0;
  for (std::size_t start = 0; start < val.size(); start += 128) {
    std::span<const std::size_t> part(val.data() + start, std::min<std::size_t>(128, val.size() - start));
    auto [x, y] = batch_of(part);
    auto sizes = net.predict_size(x);
    for (std::size_t i = 0; i < part.size(); ++i) {
      const double truth = dataset[part[i]].attributes.size;
      err += std::abs(sizes[i] - truth) / truth;
    }
  }
  local.val_size_rel_error = val.empty() ? 0.0 : err / static_cast<double>(val.size());
  local.n_train = static_cast<int>(train.size());
  local.n_val = static_cast<int>(val.size());
  if (report) *report = std::move(local);
  return net;
}

void save_feature_net(const std::filesystem::path& path, const FeatureNet& net) {
  archive::Archive ar;
  ar.meta = {{"kind", "feature_net"}, {"config", to_json(net.config())}};
  ar.put_params("F/", net.params());
  archive::save(path, ar);
}

FeatureNet load_feature_net(const std::filesystem::path& path) {
  archive::Archive ar = archive::load(path);
  if (ar.meta.value("kind", "") != "feature_net") {
    throw archive::FormatError(path.string() + " is not a feature-net checkpoint");
  }
  FeatureNet net(feature_config_from_json(ar.meta.at("config")));
  ar.load_params("F/", net.params());
  return net;
}

double mse(const ImageTensor& x, const ImageTensor& y) {
  if (!x.same_shape(y)) throw ad::ShapeError("mse: image shapes differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += (x.data[i] - y.data[i]) * (x.data[i] - y.data[i]);
  return acc / static_cast<double>(x.size());
}

double ssim(const ImageTensor& x, const ImageTensor& y) {
  if (!x.same_shape(y)) throw ad::ShapeError("ssim: image shapes differ");
  constexpr int kWin = 11;
  constexpr double kSigma = 1.5;
  constexpr double kRange = 2.0;
  const double c1 = (0.01 * kRange) * (0.01 * kRange);
  const double c2 = (0.03 * kRange) * (0.03 * kRange);
  const int win = std::min({kWin, x.height, x.width});
  double g[kWin];
  double gsum = 0.0;
  for (int i = 0; i < win; ++i) {
    const double d = i - (win - 1) / 2.0;
    g[i] = std::exp(-d * d / (2 * kSigma * kSigma));
    gsum += g[i];
  }
  for (int i = 0; i < win; ++i) g[i] /= gsum;
  double total = 0.0;
  int count = 0;
  for (int c = 0; c < x.channels; ++c) {
    for (int y0 = 0; y0 + win <= x.height; ++y0) {
      for (int x0 = 0; x0 + win <= x.width; ++x0) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (int dy = 0; dy < win; ++dy)
          for (int dx = 0; dx < win; ++dx) {
            const double wgt = g[dy] * g[dx];
            const double a = x.at(c, y0 + dy, x0 + dx), b = y.at(c, y0 + dy, x0 + dx);
            mx += wgt * a;
            my += wgt * b;
            sxx += wgt * a * a;
            syy += wgt * b * b;
            sxy += wgt * a * b;
          }
        sxx -= mx * mx;
        syy -= my * my;
        sxy -= mx * my;
        total += ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
        ++count;
      }
    }
  }
  return total / count;
}

double perceptual_distance(const FeatureNet& net, const ImageTensor& x, const ImageTensor& y) {
  if (!x.same_shape(y)) throw ad::ShapeError("perceptual_distance: image shapes differ");
  ad::NoGradGuard ng;
  std::vector<ImageTensor> both{x, y};
  Tensor f = net.extract_features(ad::constant(image::to_batch(both))).value();
  const std::size_t d = f.size() / 2;
  double acc = 0.0;
  for (std::size_t i = 0; i < d; ++i) acc += (f[i] - f[d + i]) * (f[i] - f[d + i]);
  return acc / static_cast<double>(d);
}

double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.cols() != b.cols()) throw ad::ShapeError("frechet_distance: embedding dimensions differ");
  const Eigen::Index d = a.cols();
  if (a.rows() < d + 1 || b.rows() < d + 1) {
    throw ValidationError("set_size", "each set needs at least " + std::to_string(d + 1) + " samples, got " +
                                          std::to_string(a.rows()) + " and " + std::to_string(b.rows()));
  }
  auto fit = [d](const Eigen::MatrixXd& x, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    mu = x.colwise().mean().transpose();
    Eigen::MatrixXd c = x.rowwise() - mu.transpose();
    cov = (c.transpose() * c) / static_cast<double>(x.rows() - 1);
    cov.diagonal().array() += 1e-6;
    (void)d;
  };
  Eigen::VectorXd m1, m2;
  Eigen::MatrixXd s1, s2;
  fit(a, m1, s1);
  fit(b, m2, s2);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> e1(s1);
  Eigen::VectorXd ev = e1.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  Eigen::MatrixXd root1 = e1.eigenvectors() * ev.asDiagonal() * e1.eigenvectors().transpose();
  Eigen::MatrixXd m = root1 * s2 * root1;
  m = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> e2(m, Eigen::EigenvaluesOnly);
  const double tr_sqrt = e2.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double fd = (m1 - m2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
  return std::max(fd, 0.0);
}

double fid_proxy(const FeatureNet& net, std::span<const ImageTensor> a, std::span<const ImageTensor> b) {
  const int need = net.embedding_dim() + 1;
  if (static_cast<int>(a.size()) < need || static_cast<int>(b.size()) < need) {
    throw ValidationError("set_size", "each set needs at least " + std::to_string(need) + " images, got " +
                                          std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  return frechet_distance(net.embed(a), net.embed(b));
}

double wasserstein_1d(std::vector<double> a, std::vector<double> b) {
  if (a.size() != b.size() || a.empty()) throw ValidationError("samples", "need two equal-size nonempty samples");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}

double sliced_wasserstein(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, int projections, std::uint64_t seed) {
  if (a.rows() != b.rows() || a.cols() != b.cols() || a.rows() == 0) {
    throw ValidationError("samples", "descriptor sets must have equal nonzero shape");
  }
  if (projections < 1) throw ValidationError("projections", "must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Eigen::MatrixXd dirs(a.cols(), projections);
  for (Eigen::Index j = 0; j < dirs.cols(); ++j) {
    for (Eigen::Index i = 0; i < dirs.rows(); ++i) dirs(i, j) = normal(rng);
    dirs.col(j).normalize();
  }
  const Eigen::MatrixXd pa = a * dirs, pb = b * dirs;
  double total = 0.0;
  for (int j = 0; j < projections; ++j) {
    std::vector<double> u(pa.col(j).data(), pa.col(j).data() + pa.rows());
    std::vector<double> v(pb.col(j).data(), pb.col(j).data() + pb.rows());
    total += wasserstein_1d(std::move(u), std::move(v));
  }
  return total / projections;
}

namespace {

ImageTensor downsample(const ImageTensor& x) {
  ImageTensor out(x.channels, x.height / 2, x.width / 2);
  for (int c = 0; c < x.channels; ++c)
    for (int y = 0; y < out.height; ++y)
      for (int i = 0; i < out.width; ++i)
        out.at(c, y, i) = 0.25 * (x.at(c, 2 * y, 2 * i) + x.at(c, 2 * y + 1, 2 * i) + x.at(c, 2 * y, 2 * i + 1) +
                                  x.at(c, 2 * y + 1, 2 * i + 1));
  return out;
}

// Level 0 is the finest band-pass image; the last level is the low-pass residual.
std::vector<ImageTensor> laplacian_pyramid(const ImageTensor& x, int levels) {
  std::vector<ImageTensor> out;
  ImageTensor cur = x;
  for (int l = 0; l + 1 < levels; ++l) {
    ImageTensor low = downsample(cur);
    ImageTensor band = cur;
    for (int c = 0; c < cur.channels; ++c)
      for (int y = 0; y < cur.height; ++y)
        for (int i = 0; i < cur.width; ++i) band.at(c, y, i) -= low.at(c, y / 2, i / 2);
    out.push_back(std::move(band));
    cur = std::move(low);
  }
  out.push_back(std::move(cur));
  return out;
}

Eigen::MatrixXd patch_descriptors(std::span<const ImageTensor> images, int level, const SwdConfig& cfg) {
  std::mt19937_64 rng(cfg.seed * 7919 + static_cast<std::uint64_t>(level));
  const int p = cfg.patch;
  Eigen::MatrixXd out(static_cast<Eigen::Index>(images.size()) * cfg.patches_per_image,
                      static_cast<Eigen::Index>(3) * p * p);
  Eigen::Index row = 0;
  for (const auto& img : images) {
    const ImageTensor lvl = laplacian_pyramid(img, cfg.levels)[static_cast<std::size_t>(level)];
    if (lvl.height < p || lvl.width < p) throw ValidationError("patch", "patch larger than pyramid level");
    std::uniform_int_distribution<int> py(0, lvl.height - p), px(0, lvl.width - p);
    for (int k = 0; k < cfg.patches_per_image; ++k, ++row) {
      const int y0 = py(rng), x0 = px(rng);
      Eigen::Index col = 0;
      for (int c = 0; c < lvl.channels; ++c)
        for (int dy = 0; dy < p; ++dy)
          for (int dx = 0; dx < p; ++dx) out(row, col++) = lvl.at(c, y0 + dy, x0 + dx);
    }
  }
  return out;
}

}  // namespace

double swd(std::span<const ImageTensor> a, std::span<const ImageTensor> b, const SwdConfig& cfg) {
  const std::size_t n = std::min(a.size(), b.size());
  if (n == 0) throw ValidationError("set_size", "swd needs nonempty sets");
  if (cfg.levels < 1 || cfg.patch < 1 || cfg.patches_per_image < 1) throw ValidationError("swd", "invalid config");
  double total = 0.0;
  for (int level = 0; level < cfg.levels; ++level) {
    Eigen::MatrixXd da = patch_descriptors(a.subspan(0, n), level, cfg);
    Eigen::MatrixXd db = patch_descriptors(b.subspan(0, n), level, cfg);
    // Per-channel normalization with statistics pooled over both sets, so the
    // distance stays symmetric and still sees global shifts.
    const Eigen::Index per = da.cols() / 3;
    for (int c = 0; c < 3; ++c) {
      const double cnt = static_cast<double>(2 * da.rows() * per);
      const double mu = (da.middleCols(c * per, per).sum() + db.middleCols(c * per, per).sum()) / cnt;
      const double sq = (da.middleCols(c * per, per).array().square().sum() +
                         db.middleCols(c * per, per).array().square().sum()) / cnt;
      const double sd = std::sqrt(std::max(sq - mu * mu, 1e-12));
      da.middleCols(c * per, per) = (da.middleCols(c * per, per).array() - mu) / sd;
      db.middleCols(c * per, per) = (db.middleCols(c * per, per).array() - mu) / sd;
    }
    total += sliced_wasserstein(da, db, cfg.projections, cfg.seed + static_cast<std::uint64_t>(level));
  }
  return total / cfg.levels;
}

nlohmann::json to_json(const MetricReport& r) {
  return {{"metrics", r.metrics}, {"sample_sizes", r.sample_sizes}, {"seed", r.seed}};
}

}  // namespace idinvert::features
