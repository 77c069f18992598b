#include <algorithm>
#include <array>
#include <cmath>

#include <Eigen/Core>

#include "idinvert/autodiff.hpp"

namespace idinvert::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

Var make_result(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

// Broadcast bookkeeping for ranks up to 4 (shapes are left-padded with 1s).
struct Broadcast {
  std::array<int, 4> out{1, 1, 1, 1};
  std::array<std::size_t, 4> sa{0, 0, 0, 0};
  std::array<std::size_t, 4> sb{0, 0, 0, 0};
  Shape out_shape;
};

std::array<int, 4> pad4(const Shape& s) {
  if (s.size() > 4) throw ShapeError("rank > 4 unsupported: " + shape_str(s));
  std::array<int, 4> r{1, 1, 1, 1};
  std::size_t off = 4 - s.size();
  for (std::size_t i = 0; i < s.size(); ++i) r[off + i] = s[i];
  return r;
}

std::array<std::size_t, 4> strides4(const std::array<int, 4>& d) {
  std::array<std::size_t, 4> s{};
  std::size_t acc = 1;
  for (int i = 3; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = acc;
    acc *= static_cast<std::size_t>(d[static_cast<std::size_t>(i)]);
  }
  return s;
}

Broadcast broadcast_plan(const Shape& a, const Shape& b) {
  if (a.size() != b.size()) {
    throw ShapeError("rank mismatch in broadcast: " + shape_str(a) + " vs " + shape_str(b));
  }
  Broadcast plan;
  auto da = pad4(a);
  auto db = pad4(b);
  auto ta = strides4(da);
  auto tb = strides4(db);
  for (std::size_t i = 0; i < 4; ++i) {
    if (da[i] != db[i] && da[i] != 1 && db[i] != 1) {
      throw ShapeError("incompatible shapes " + shape_str(a) + " and " + shape_str(b));
    }
    plan.out[i] = std::max(da[i], db[i]);
    plan.sa[i] = da[i] == 1 ? 0 : ta[i];
    plan.sb[i] = db[i] == 1 ? 0 : tb[i];
  }
  plan.out_shape = a;
  for (std::size_t i = 0; i < a.size(); ++i) plan.out_shape[i] = std::max(a[i], b[i]);
  return plan;
}

template <typename F>
Tensor binary_apply(const Tensor& a, const Tensor& b, F f) {
  if (a.shape() == b.shape()) {
    Tensor out(a.shape());
    auto o = out.data();
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(x[i], y[i]);
    return out;
  }
  Broadcast p = broadcast_plan(a.shape(), b.shape());
  Tensor out(p.out_shape);
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  std::size_t k = 0;
  for (int i0 = 0; i0 < p.out[0]; ++i0) {
    for (int i1 = 0; i1 < p.out[1]; ++i1) {
      for (int i2 = 0; i2 < p.out[2]; ++i2) {
        std::size_t ba = i0 * p.sa[0] + i1 * p.sa[1] + i2 * p.sa[2];
        std::size_t bb = i0 * p.sb[0] + i1 * p.sb[1] + i2 * p.sb[2];
        for (int i3 = 0; i3 < p.out[3]; ++i3) {
          o[k++] = f(x[ba + i3 * p.sa[3]], y[bb + i3 * p.sb[3]]);
        }
      }
    }
  }
  return out;
}

template <typename F>
Tensor unary_apply(const Tensor& a, F f) {
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(x[i]);
  return out;
}

Var reduce_like(const Var& g, const Var& input) {
  if (g.shape() == input.shape()) return g;
  return sum_to(g, input.shape());
}

}  // namespace

Var add(const Var& a, const Var& b) {
  Tensor v = binary_apply(a.value(), b.value(), [](double x, double y) { return x + y; });
  return make_result(std::move(v), {a, b}, [a, b](const Var& g, const Var&, const std::vector<bool>& need) {
    std::vector<Var> r(2);
    if (need[0]) r[0] = reduce_like(g, a);
    if (need[1]) r[1] = reduce_like(g, b);
    return r;
  });
}

Var sub(const Var& a, const Var& b) {
  Tensor v = binary_apply(a.value(), b.value(), [](double x, double y) { return x - y; });
  return make_result(std::move(v), {a, b}, [a, b](const Var& g, const Var&, const std::vector<bool>& need) {
    std::vector<Var> r(2);
    if (need[0]) r[0] = reduce_like(g, a);
    if (need[1]) r[1] = reduce_like(neg(g), b);
    return r;
  });
}

Var mul(const Var& a, const Var& b) {
  Tensor v = binary_apply(a.value(), b.value(), [](double x, double y) { return x * y; });
  return make_result(std::move(v), {a, b}, [a, b](const Var& g, const Var&, const std::vector<bool>& need) {
    std::vector<Var> r(2);
    if (need[0]) r[0] = reduce_like(mul(g, b), a);
    if (need[1]) r[1] = reduce_like(mul(g, a), b);
    return r;
  });
}

Var div(const Var& a, const Var& b) {
  Tensor v = binary_apply(a.value(), b.value(), [](double x, double y) { return x / y; });
  return make_result(std::move(v), {a, b}, [a, b](const Var& g, const Var& out, const std::vector<bool>& need) {
    std::vector<Var> r(2);
    if (need[0]) r[0] = reduce_like(div(g, b), a);
    if (need[1]) r[1] = reduce_like(neg(div(mul(g, out), b)), b);
    return r;
  });
}

Var neg(const Var& x) { return scale(x, -1.0); }

Var scale(const Var& x, double factor) {
  Tensor v = unary_apply(x.value(), [factor](double t) { return t * factor; });
  return make_result(std::move(v), {x}, [factor](const Var& g, const Var&, const std::vector<bool>&) {
    return std::vector<Var>{scale(g, factor)};
  });
}

Var add_scalar(const Var& x, double c) {
  Tensor v = unary_apply(x.value(), [c](double t) { return t + c; });
  return make_result(std::move(v), {x},
                     [](const Var& g, const Var&, const std::vector<bool>&) { return std::vector<Var>{g}; });
}

Var square(const Var& x) { return mul(x, x); }

Var exp(const Var& x) {
  Tensor v = unary_apply(x.value(), [](double t) { return std::exp(t); });
  return make_result(std::move(v), {x}, [](const Var& g, const Var& out, const std::vector<bool>&) {
    return std::vector<Var>{mul(g, out)};
  });
}

Var log(const Var& x) {
  Tensor v = unary_apply(x.value(), [](double t) { return std::log(t); });
  return make_result(std::move(v), {x}, [x](const Var& g, const Var&, const std::vector<bool>&) {
    return std::vector<Var>{div(g, x)};
  });
}

Var sqrt(const Var& x) {
  Tensor v = unary_apply(x.value(), [](double t) { return std::sqrt(t); });
  return make_result(std::move(v), {x}, [](const Var& g, const Var& out, const std::vector<bool>&) {
    return std::vector<Var>{scale(div(g, out), 0.5)};
  });
}

Var rsqrt(const Var& x) {
  Tensor v = unary_apply(x.value(), [](double t) { return 1.0 / std::sqrt(t); });
  return make_result(std::move(v), {x}, [](const Var& g, const Var& out, const std::vector<bool>&) {
    return std::vector<Var>{mul(g, scale(mul(out, square(out)), -0.5))};
  });
}

Var tanh(const Var& x) {
  Tensor v = unary_apply(x.value(), [](double t) { return std::tanh(t); });
  return make_result(std::move(v), {x}, [](const Var& g, const Var& out, const std::vector<bool>&) {
    return std::vector<Var>{mul(g, add_scalar(neg(square(out)), 1.0))};
  });
}

Var sigmoid(const Var& x) {
  Tensor v = unary_apply(x.value(), [](double t) {
    return t >= 0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
  });
  return make_result(std::move(v), {x}, [](const Var& g, const Var& out, const std::vector<bool>&) {
    return std::vector<Var>{mul(g, mul(out, add_scalar(neg(out), 1.0)))};
  });
}

Var softplus(const Var& x) {
  Tensor v = unary_apply(x.value(), [](double t) { return t > 0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t)); });
  return make_result(std::move(v), {x}, [x](const Var& g, const Var&, const std::vector<bool>&) {
    return std::vector<Var>{mul(g, sigmoid(x))};
  });
}

Var leaky_relu(const Var& x, double slope) {
  Tensor v = unary_apply(x.value(), [slope](double t) { return t >= 0 ? t : slope * t; });
  return make_result(std::move(v), {x}, [x, slope](const Var& g, const Var&, const std::vector<bool>&) {
    // Piecewise-linear: the local slope is a constant mask.
    Var mask = constant(unary_apply(x.value(), [slope](double t) { return t >= 0 ? 1.0 : slope; }));
    return std::vector<Var>{mul(g, mask)};
  });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double t : x.value().data()) s += t;
  Shape in_shape = x.shape();
  return make_result(Tensor({1}, s), {x}, [in_shape](const Var& g, const Var&, const std::vector<bool>&) {
    Shape ones(in_shape.size(), 1);
    return std::vector<Var>{broadcast_to(reshape(g, ones), in_shape)};
  });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Var sum_to(const Var& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  if (shape.size() != x.shape().size()) {
    throw ShapeError("sum_to rank mismatch: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] != 1 && shape[i] != x.shape()[i]) {
      throw ShapeError("sum_to incompatible: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    }
  }
  auto din = pad4(x.shape());
  auto dout = pad4(shape);
  auto so = strides4(dout);
  std::array<std::size_t, 4> s{};
  for (std::size_t i = 0; i < 4; ++i) s[i] = dout[i] == 1 ? 0 : so[i];
  Tensor out(shape, 0.0);
  auto o = out.data();
  auto in = x.value().data();
  std::size_t k = 0;
  for (int i0 = 0; i0 < din[0]; ++i0)
    for (int i1 = 0; i1 < din[1]; ++i1)
      for (int i2 = 0; i2 < din[2]; ++i2) {
        std::size_t base = i0 * s[0] + i1 * s[1] + i2 * s[2];
        for (int i3 = 0; i3 < din[3]; ++i3) o[base + i3 * s[3]] += in[k++];
      }
  Shape in_shape = x.shape();
  return make_result(std::move(out), {x}, [in_shape](const Var& g, const Var&, const std::vector<bool>&) {
    return std::vector<Var>{broadcast_to(g, in_shape)};
  });
}

Var broadcast_to(const Var& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  Tensor zeros(shape, 0.0);
  Tensor v = binary_apply(zeros, x.value(), [](double, double y) { return y; });
  if (v.shape() != shape) {
    throw ShapeError("broadcast_to incompatible: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  Shape in_shape = x.shape();
  return make_result(std::move(v), {x}, [in_shape](const Var& g, const Var&, const std::vector<bool>&) {
    return std::vector<Var>{sum_to(g, in_shape)};
  });
}

Var reshape(const Var& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  Tensor v = x.value().reshaped(shape);
  Shape in_shape = x.shape();
  return make_result(std::move(v), {x}, [in_shape](const Var& g, const Var&, const std::vector<bool>&) {
    return std::vector<Var>{reshape(g, in_shape)};
  });
}

Var matmul(const Var& a, const Var& b, bool ta, bool tb) {
  if (a.value().rank() != 2 || b.value().rank() != 2) {
    throw ShapeError("matmul expects 2-D operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const int ar = a.dim(0), ac = a.dim(1), br = b.dim(0), bc = b.dim(1);
  const int m = ta ? ac : ar;
  const int ka = ta ? ar : ac;
  const int kb = tb ? bc : br;
  const int n = tb ? br : bc;
  if (ka != kb) {
    throw ShapeError("matmul inner dimension mismatch: " + shape_str(a.shape()) + (ta ? "^T" : "") + " x " +
                     shape_str(b.shape()) + (tb ? "^T" : ""));
  }
  Tensor out({m, n});
  ConstMatMap A(a.value().data().data(), ar, ac);
  ConstMatMap B(b.value().data().data(), br, bc);
  MatMap C(out.data().data(), m, n);
  if (!ta && !tb) C.noalias() = A * B;
  else if (ta && !tb) C.noalias() = A.transpose() * B;
  else if (!ta && tb) C.noalias() = A * B.transpose();
  else C.noalias() = A.transpose() * B.transpose();
  return make_result(std::move(out), {a, b}, [a, b, ta, tb](const Var& g, const Var&, const std::vector<bool>& need) {
    std::vector<Var> r(2);
    if (need[0]) {
      if (!ta) r[0] = matmul(g, b, false, !tb);   // G op(B)^T
      else r[0] = matmul(b, g, tb, true);         // op(B) G^T
    }
    if (need[1]) {
      if (!tb) r[1] = matmul(a, g, !ta, false);   // op(A)^T G
      else r[1] = matmul(g, a, true, ta);         // G^T op(A)
    }
    return r;
  });
}

Var upsample2x(const Var& x) {
  const Tensor& in = x.value();
  if (in.rank() < 2) throw ShapeError("upsample2x needs rank >= 2");
  Shape s = in.shape();
  const int h = s[s.size() - 2], w = s[s.size() - 1];
  s[s.size() - 2] = 2 * h;
  s[s.size() - 1] = 2 * w;
  Tensor out(s);
  const std::size_t planes = in.size() / (static_cast<std::size_t>(h) * w);
  auto src = in.data();
  auto dst = out.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const double* ip = src.data() + p * h * w;
    double* op = dst.data() + p * 4 * h * w;
    for (int i = 0; i < 2 * h; ++i)
      for (int j = 0; j < 2 * w; ++j) op[i * 2 * w + j] = ip[(i / 2) * w + j / 2];
  }
  return make_result(std::move(out), {x}, [](const Var& g, const Var&, const std::vector<bool>&) {
    return std::vector<Var>{sumpool2x(g)};
  });
}

Var sumpool2x(const Var& x) {
  const Tensor& in = x.value();
  if (in.rank() < 2) throw ShapeError("sumpool2x needs rank >= 2");
  Shape s = in.shape();
  const int h = s[s.size() - 2], w = s[s.size() - 1];
  if (h % 2 || w % 2) throw ShapeError("sumpool2x needs even spatial dims, got " + shape_str(s));
  s[s.size() - 2] = h / 2;
  s[s.size() - 1] = w / 2;
  Tensor out(s, 0.0);
  const std::size_t planes = in.size() / (static_cast<std::size_t>(h) * w);
  auto src = in.data();
  auto dst = out.data();
  const int oh = h / 2, ow = w / 2;
  for (std::size_t p = 0; p < planes; ++p) {
    const double* ip = src.data() + p * h * w;
    double* op = dst.data() + p * oh * ow;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) op[(i / 2) * ow + j / 2] += ip[i * w + j];
  }
  return make_result(std::move(out), {x}, [](const Var& g, const Var&, const std::vector<bool>&) {
    return std::vector<Var>{upsample2x(g)};
  });
}

Var avgpool2x(const Var& x) { return scale(sumpool2x(x), 0.25); }

Var slice_cols(const Var& x, int start, int len) {
  if (x.value().rank() != 2) throw ShapeError("slice_cols expects 2-D input");
  const int rows = x.dim(0), cols = x.dim(1);
  if (start < 0 || len < 0 || start + len > cols) {
    throw ShapeError("slice_cols range [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") out of " + std::to_string(cols) + " columns");
  }
  Tensor out({rows, len});
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < len; ++c) out[static_cast<std::size_t>(r) * len + c] = x.value()[static_cast<std::size_t>(r) * cols + start + c];
  return make_result(std::move(out), {x}, [start, cols](const Var& g, const Var&, const std::vector<bool>&) {
    return std::vector<Var>{pad_cols(g, start, cols)};
  });
}

Var pad_cols(const Var& x, int start, int total) {
  if (x.value().rank() != 2) throw ShapeError("pad_cols expects 2-D input");
  const int rows = x.dim(0), len = x.dim(1);
  if (start < 0 || start + len > total) throw ShapeError("pad_cols range out of bounds");
  Tensor out({rows, total}, 0.0);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < len; ++c) out[static_cast<std::size_t>(r) * total + start + c] = x.value()[static_cast<std::size_t>(r) * len + c];
  return make_result(std::move(out), {x}, [start, len](const Var& g, const Var&, const std::vector<bool>&) {
    return std::vector<Var>{slice_cols(g, start, len)};
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const int rows = parts[0].dim(0);
  int total = 0;
  for (const auto& p : parts) {
    if (p.value().rank() != 2 || p.dim(0) != rows) throw ShapeError("concat_cols row mismatch");
    total += p.dim(1);
  }
  Tensor out({rows, total});
  std::vector<int> offsets;
  int off = 0;
  for (const auto& p : parts) {
    const int len = p.dim(1);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < len; ++c) out[static_cast<std::size_t>(r) * total + off + c] = p.value()[static_cast<std::size_t>(r) * len + c];
    offsets.push_back(off);
    off += len;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  std::vector<int> lens;
  for (const auto& p : parts) lens.push_back(p.dim(1));
  return make_result(std::move(out), inputs, [offsets, lens](const Var& g, const Var&, const std::vector<bool>& need) {
    std::vector<Var> r(offsets.size());
    for (std::size_t i = 0; i < offsets.size(); ++i)
      if (need[i]) r[i] = slice_cols(g, offsets[i], lens[i]);
    return r;
  });
}

}  // namespace idinvert::ad
