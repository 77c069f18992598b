#pragma once

// Parameter containers, equalized-learning-rate layers and the Adam optimizer.

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "idinvert/autodiff.hpp"

namespace idinvert::nn {

using ad::Shape;
using ad::Tensor;
using ad::Var;

/// Ordered collection of named trainable tensors.
class ParamSet {
 public:
  Var& add(const std::string& name, Tensor init);
  const Var& at(const std::string& name) const;
  Var& at(const std::string& name);
  bool contains(const std::string& name) const { return index_.contains(name); }

  const std::vector<std::string>& names() const { return names_; }
  std::vector<Var> vars() const;
  std::size_t size() const { return names_.size(); }
  std::size_t num_scalars() const;

  /// Rounds every value to the nearest 32-bit float so that a checkpoint
  /// round-trip reproduces the in-memory model exactly.
  void round_to_float();
  /// Deep copy with fresh leaves.
  ParamSet clone() const;
  /// Bitwise equality of names, shapes and values.
  bool identical(const ParamSet& other) const;

 private:
  std::vector<std::string> names_;
  std::map<std::string, Var> index_;
};

Tensor normal_tensor(const Shape& shape, std::mt19937_64& rng, double stddev = 1.0);

/// Dense layer with runtime weight scaling: y = x (w * gain / sqrt(in)) + b * lr_mul.
/// w is stored [in, out], b is [1, out].
Var dense(const Var& x, const Var& w, const Var& b, double lr_mul = 1.0);
/// 3x3 or 1x1 "same" convolution with runtime weight scaling and per-channel bias.
Var conv(const Var& x, const Var& w, const Var& b);

/// Adds a dense layer's parameters (w ~ N(0, 1/lr_mul^2), b = bias_init / lr_mul).
void add_dense(ParamSet& params, const std::string& prefix, int in, int out, std::mt19937_64& rng,
               double lr_mul = 1.0, double bias_init = 0.0);
void add_conv(ParamSet& params, const std::string& prefix, int in, int out, int kernel, std::mt19937_64& rng);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig config) : config_(config) {}

  /// In-place update of `params` with `grads` (matched by position).
  void step(std::vector<Var>& params, const std::vector<Var>& grads);
  long steps_taken() const { return t_; }

 private:
  AdamConfig config_;
  long t_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

/// True when every element of the tensor is finite.
bool all_finite(const Tensor& t);

}  // namespace idinvert::nn
