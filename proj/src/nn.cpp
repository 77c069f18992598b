#include "idinvert/nn.hpp"

#include <cmath>
#include <cstring>

namespace idinvert::nn {

Var& ParamSet::add(const std::string& name, Tensor init) {
  if (index_.contains(name)) throw std::invalid_argument("duplicate parameter " + name);
  names_.push_back(name);
  return index_.emplace(name, ad::leaf(std::move(init))).first->second;
}

const Var& ParamSet::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
  return it->second;
}

Var& ParamSet::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
  return it->second;
}

std::vector<Var> ParamSet::vars() const {
  std::vector<Var> out;
  out.reserve(names_.size());
  for (const auto& n : names_) out.push_back(index_.at(n));
  return out;
}

std::size_t ParamSet::num_scalars() const {
  std::size_t n = 0;
  for (const auto& name : names_) n += index_.at(name).size();
  return n;
}

void ParamSet::round_to_float() {
  for (const auto& name : names_) {
    for (double& v : index_.at(name).mutable_value().data()) v = static_cast<double>(static_cast<float>(v));
  }
}

ParamSet ParamSet::clone() const {
  ParamSet out;
  for (const auto& name : names_) out.add(name, index_.at(name).value());
  return out;
}

bool ParamSet::identical(const ParamSet& other) const {
  if (names_ != other.names_) return false;
  for (const auto& name : names_) {
    const Tensor& a = index_.at(name).value();
    const Tensor& b = other.index_.at(name).value();
    if (a.shape() != b.shape()) return false;
    if (std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) != 0) return false;
  }
  return true;
}

Tensor normal_tensor(const Shape& shape, std::mt19937_64& rng, double stddev) {
  Tensor t(shape);
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

Var dense(const Var& x, const Var& w, const Var& b, double lr_mul) {
  const double gain = lr_mul / std::sqrt(static_cast<double>(w.dim(0)));
  return ad::add(ad::matmul(x, ad::scale(w, gain)), ad::scale(b, lr_mul));
}

Var conv(const Var& x, const Var& w, const Var& b) {
  const double fan_in = static_cast<double>(w.dim(1)) * w.dim(2) * w.dim(3);
  Var y = ad::conv2d(x, ad::scale(w, 1.0 / std::sqrt(fan_in)));
  return ad::add(y, ad::reshape(b, {1, w.dim(0), 1, 1}));
}

void add_dense(ParamSet& params, const std::string& prefix, int in, int out, std::mt19937_64& rng, double lr_mul,
               double bias_init) {
  params.add(prefix + ".w", normal_tensor({in, out}, rng, 1.0 / lr_mul));
  params.add(prefix + ".b", Tensor({1, out}, bias_init / lr_mul));
}

void add_conv(ParamSet& params, const std::string& prefix, int in, int out, int kernel, std::mt19937_64& rng) {
  params.add(prefix + ".w", normal_tensor({out, in, kernel, kernel}, rng));
  params.add(prefix + ".b", Tensor({out}, 0.0));
}

void Adam::step(std::vector<Var>& params, const std::vector<Var>& grads) {
  if (params.size() != grads.size()) throw std::invalid_argument("Adam: params/grads size mismatch");
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.shape(), 0.0);
      v_.emplace_back(p.shape(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw std::invalid_argument("Adam: parameter list changed between steps");
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].mutable_value().data();
    auto g = grads[i].value().data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    if (g.size() != p.size()) throw std::invalid_argument("Adam: gradient shape mismatch");
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = b1 * m[k] + (1.0 - b1) * g[k];
      v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
      p[k] -= config_.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.eps);
    }
  }
}

bool all_finite(const Tensor& t) {
  for (double v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace idinvert::nn
