#include <Eigen/Core>

#include "idinvert/autodiff.hpp"

namespace idinvert::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

Var make_conv_result(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
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

// cols[(c*k + dy)*k + dx][y*w + x] = img[c][y+dy-p][x+dx-p], zero outside.
void im2col(const double* img, int c, int h, int w, int k, double* cols) {
  const int p = k / 2;
  for (int ch = 0; ch < c; ++ch) {
    for (int dy = 0; dy < k; ++dy) {
      for (int dx = 0; dx < k; ++dx) {
        double* row = cols + static_cast<std::size_t>((ch * k + dy) * k + dx) * h * w;
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy - p;
          double* out = row + y * w;
          if (sy < 0 || sy >= h) {
            std::fill(out, out + w, 0.0);
            continue;
          }
          const double* src = img + (static_cast<std::size_t>(ch) * h + sy) * w;
          for (int x = 0; x < w; ++x) {
            const int sx = x + dx - p;
            out[x] = (sx >= 0 && sx < w) ? src[sx] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, int c, int h, int w, int k, double* img) {
  const int p = k / 2;
  std::fill(img, img + static_cast<std::size_t>(c) * h * w, 0.0);
  for (int ch = 0; ch < c; ++ch) {
    for (int dy = 0; dy < k; ++dy) {
      for (int dx = 0; dx < k; ++dx) {
        const double* row = cols + static_cast<std::size_t>((ch * k + dy) * k + dx) * h * w;
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy - p;
          if (sy < 0 || sy >= h) continue;
          double* dst = img + (static_cast<std::size_t>(ch) * h + sy) * w;
          const double* in = row + y * w;
          for (int x = 0; x < w; ++x) {
            const int sx = x + dx - p;
            if (sx >= 0 && sx < w) dst[sx] += in[x];
          }
        }
      }
    }
  }
}

void check_kernel(int k) {
  if (k <= 0 || k % 2 == 0) throw ShapeError("convolution kernel must be odd, got " + std::to_string(k));
}

}  // namespace

Var conv2d(const Var& x, const Var& w) {
  const Tensor& xin = x.value();
  const Tensor& win = w.value();
  if (xin.rank() != 4 || win.rank() != 4) {
    throw ShapeError("conv2d expects x[N,C,H,W] and w[O,C,k,k], got " + shape_str(xin.shape()) + " and " +
                     shape_str(win.shape()));
  }
  const int n = xin.dim(0), c = xin.dim(1), h = xin.dim(2), wd = xin.dim(3);
  const int o = win.dim(0), k = win.dim(2);
  if (win.dim(1) != c || win.dim(3) != k) {
    throw ShapeError("conv2d channel/kernel mismatch: x " + shape_str(xin.shape()) + ", w " + shape_str(win.shape()));
  }
  check_kernel(k);
  const int hw = h * wd;
  const int ck = c * k * k;
  Tensor out({n, o, h, wd});
  ConstMatMap W(win.data().data(), o, ck);
  std::vector<double> cols(k == 1 ? 0 : static_cast<std::size_t>(ck) * hw);
  for (int b = 0; b < n; ++b) {
    const double* img = xin.data().data() + static_cast<std::size_t>(b) * c * hw;
    MatMap Y(out.data().data() + static_cast<std::size_t>(b) * o * hw, o, hw);
    if (k == 1) {
      Y.noalias() = W * ConstMatMap(img, c, hw);
    } else {
      im2col(img, c, h, wd, k, cols.data());
      Y.noalias() = W * ConstMatMap(cols.data(), ck, hw);
    }
  }
  return make_conv_result(std::move(out), {x, w}, [x, w, k](const Var& g, const Var&, const std::vector<bool>& need) {
    std::vector<Var> r(2);
    if (need[0]) r[0] = conv2d_input_grad(g, w);
    if (need[1]) r[1] = conv2d_weight_grad(x, g, k);
    return r;
  });
}

Var conv2d_input_grad(const Var& grad_out, const Var& w) {
  const Tensor& gin = grad_out.value();
  const Tensor& win = w.value();
  if (gin.rank() != 4 || win.rank() != 4 || gin.dim(1) != win.dim(0)) {
    throw ShapeError("conv2d_input_grad mismatch: g " + shape_str(gin.shape()) + ", w " + shape_str(win.shape()));
  }
  const int n = gin.dim(0), o = gin.dim(1), h = gin.dim(2), wd = gin.dim(3);
  const int c = win.dim(1), k = win.dim(2);
  check_kernel(k);
  const int hw = h * wd;
  const int ck = c * k * k;
  Tensor out({n, c, h, wd});
  ConstMatMap W(win.data().data(), o, ck);
  std::vector<double> cols(k == 1 ? 0 : static_cast<std::size_t>(ck) * hw);
  for (int b = 0; b < n; ++b) {
    ConstMatMap G(gin.data().data() + static_cast<std::size_t>(b) * o * hw, o, hw);
    double* dst = out.data().data() + static_cast<std::size_t>(b) * c * hw;
    if (k == 1) {
      MatMap(dst, c, hw).noalias() = W.transpose() * G;
    } else {
      MatMap(cols.data(), ck, hw).noalias() = W.transpose() * G;
      col2im(cols.data(), c, h, wd, k, dst);
    }
  }
  return make_conv_result(std::move(out), {grad_out, w},
                          [grad_out, w, k](const Var& gg, const Var&, const std::vector<bool>& need) {
                            std::vector<Var> r(2);
                            if (need[0]) r[0] = conv2d(gg, w);
                            if (need[1]) r[1] = conv2d_weight_grad(gg, grad_out, k);
                            return r;
                          });
}

Var conv2d_weight_grad(const Var& x, const Var& grad_out, int k) {
  const Tensor& xin = x.value();
  const Tensor& gin = grad_out.value();
  if (xin.rank() != 4 || gin.rank() != 4 || xin.dim(0) != gin.dim(0) || xin.dim(2) != gin.dim(2) ||
      xin.dim(3) != gin.dim(3)) {
    throw ShapeError("conv2d_weight_grad mismatch: x " + shape_str(xin.shape()) + ", g " + shape_str(gin.shape()));
  }
  check_kernel(k);
  const int n = xin.dim(0), c = xin.dim(1), h = xin.dim(2), wd = xin.dim(3);
  const int o = gin.dim(1);
  const int hw = h * wd;
  const int ck = c * k * k;
  Tensor out({o, c, k, k}, 0.0);
  MatMap D(out.data().data(), o, ck);
  std::vector<double> cols(k == 1 ? 0 : static_cast<std::size_t>(ck) * hw);
  for (int b = 0; b < n; ++b) {
    const double* img = xin.data().data() + static_cast<std::size_t>(b) * c * hw;
    ConstMatMap G(gin.data().data() + static_cast<std::size_t>(b) * o * hw, o, hw);
    if (k == 1) {
      D.noalias() += G * ConstMatMap(img, c, hw).transpose();
    } else {
      im2col(img, c, h, wd, k, cols.data());
      D.noalias() += G * ConstMatMap(cols.data(), ck, hw).transpose();
    }
  }
  return make_conv_result(std::move(out), {x, grad_out},
                          [x, grad_out](const Var& gw, const Var&, const std::vector<bool>& need) {
                            std::vector<Var> r(2);
                            if (need[0]) r[0] = conv2d_input_grad(grad_out, gw);
                            if (need[1]) r[1] = conv2d(x, gw);
                            return r;
                          });
}

}  // namespace idinvert::ad
