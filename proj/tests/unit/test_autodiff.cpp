#include <doctest.h>

#include "gradcheck.hpp"
#include "idinvert/autodiff.hpp"

using namespace idinvert::ad;
using testutil::check_gradient;
using testutil::random_tensor;

namespace {

Var weighted_sum(const Var& y, std::uint64_t seed) {
  return sum(mul(y, constant(random_tensor(y.shape(), seed))));
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  const Tensor x0 = random_tensor({2, 3, 4, 4}, 1, 0.7);
  const Var other = constant(random_tensor({1, 3, 1, 4}, 2));
  const std::vector<std::pair<const char*, std::function<Var(const Var&)>>> cases = {
      {"add", [&](const Var& x) { return weighted_sum(add(x, other), 9); }},
      {"sub", [&](const Var& x) { return weighted_sum(sub(other, x), 9); }},
      {"mul", [&](const Var& x) { return weighted_sum(mul(x, other), 9); }},
      {"div", [&](const Var& x) { return weighted_sum(div(other, add_scalar(square(x), 1.0)), 9); }},
      {"exp", [&](const Var& x) { return weighted_sum(exp(x), 9); }},
      {"log", [&](const Var& x) { return weighted_sum(log(add_scalar(square(x), 0.5)), 9); }},
      {"sqrt", [&](const Var& x) { return weighted_sum(sqrt(add_scalar(square(x), 0.5)), 9); }},
      {"rsqrt", [&](const Var& x) { return weighted_sum(rsqrt(add_scalar(square(x), 0.5)), 9); }},
      {"tanh", [&](const Var& x) { return weighted_sum(tanh(x), 9); }},
      {"sigmoid", [&](const Var& x) { return weighted_sum(sigmoid(x), 9); }},
      {"softplus", [&](const Var& x) { return weighted_sum(softplus(x), 9); }},
      {"leaky_relu", [&](const Var& x) { return weighted_sum(leaky_relu(x, 0.2), 9); }},
      {"mean", [&](const Var& x) { return mean(square(x)); }},
      {"sum_to", [&](const Var& x) { return weighted_sum(sum_to(x, {2, 1, 4, 1}), 9); }},
      {"broadcast", [&](const Var& x) { return weighted_sum(broadcast_to(sum_to(x, {2, 3, 1, 1}), {2, 3, 4, 4}), 9); }},
      {"upsample", [&](const Var& x) { return weighted_sum(upsample2x(x), 9); }},
      {"avgpool", [&](const Var& x) { return weighted_sum(avgpool2x(x), 9); }},
  };
  for (const auto& [name, f] : cases) {
    CAPTURE(name);
    auto r = check_gradient(f, x0, 12, 3);
    CHECK(r.max_rel_err < 1e-4);
  }
}

TEST_CASE("matmul and column ops match finite differences") {
  const Tensor a0 = random_tensor({3, 5}, 4);
  const Var b = constant(random_tensor({5, 6}, 5));
  const Var bt = constant(random_tensor({6, 5}, 6));
  const Var c = constant(random_tensor({4, 3}, 7));
  CHECK(check_gradient([&](const Var& a) { return weighted_sum(matmul(a, b), 1); }, a0, 10, 1).max_rel_err < 1e-4);
  CHECK(check_gradient([&](const Var& a) { return weighted_sum(matmul(a, bt, false, true), 1); }, a0, 10, 1)
            .max_rel_err < 1e-4);
  CHECK(check_gradient([&](const Var& a) { return weighted_sum(matmul(a, c, true, true), 1); }, a0, 10, 1)
            .max_rel_err < 1e-4);
  CHECK(check_gradient([&](const Var& a) { return weighted_sum(matmul(c, a), 1); }, a0, 10, 1).max_rel_err < 1e-4);
  CHECK(check_gradient(
            [&](const Var& a) {
              std::vector<Var> parts{slice_cols(a, 1, 2), a, pad_cols(slice_cols(a, 0, 3), 2, 7)};
              return weighted_sum(concat_cols(parts), 1);
            },
            a0, 10, 1)
            .max_rel_err < 1e-4);
}

TEST_CASE("conv2d matches finite differences in input and weight") {
  const Tensor x0 = random_tensor({2, 3, 5, 5}, 11);
  const Tensor w0 = random_tensor({4, 3, 3, 3}, 12);
  CHECK(check_gradient([&](const Var& x) { return weighted_sum(conv2d(x, constant(w0)), 2); }, x0, 12, 3).max_rel_err <
        1e-4);
  CHECK(check_gradient([&](const Var& w) { return weighted_sum(conv2d(constant(x0), w), 2); }, w0, 12, 3).max_rel_err <
        1e-4);
  const Tensor w1 = random_tensor({4, 3, 1, 1}, 13);
  CHECK(check_gradient([&](const Var& x) { return weighted_sum(conv2d(x, constant(w1)), 2); }, x0, 12, 3).max_rel_err <
        1e-4);
}

TEST_CASE("second-order gradients through conv match finite differences") {
  // Gradient-penalty shaped function: p(w) = || d/dx sum(tanh(conv(x, w))) ||^2.
  const Tensor x0 = random_tensor({1, 2, 4, 4}, 21);
  const Tensor w0 = random_tensor({3, 2, 3, 3}, 22, 0.5);
  auto penalty = [&](const Var& w) {
    Var x = leaf(x0);
    Var d = sum(tanh(conv2d(x, w)));
    Var gx = grad(d, std::span<const Var>(&x, 1), true)[0];
    return sum(square(gx));
  };
  CHECK(check_gradient(penalty, w0, 12, 5).max_rel_err < 1e-4);
  auto penalty_x = [&](const Var& x) {
    Var wv = leaf(w0);
    Var d = sum(tanh(conv2d(x, wv)));
    Var gw = grad(d, std::span<const Var>(&wv, 1), true)[0];
    return sum(square(gw));
  };
  CHECK(check_gradient(penalty_x, x0, 12, 6).max_rel_err < 1e-4);
}

TEST_CASE("grad returns zeros for unused inputs and respects NoGradGuard") {
  Var a = leaf(Tensor({2}, 1.0));
  Var b = leaf(Tensor({2}, 2.0));
  Var y = sum(square(a));
  std::vector<Var> in{a, b};
  auto g = grad(y, in);
  CHECK(g[0].value()[0] == doctest::Approx(2.0));
  CHECK(g[1].value()[0] == 0.0);
  NoGradGuard ng;
  CHECK_FALSE(mul(a, b).requires_grad());
}

TEST_CASE("shape errors") {
  CHECK_THROWS_AS(add(constant({2, 3}, 1.0), constant({3, 2}, 1.0)), ShapeError);
  CHECK_THROWS_AS(matmul(constant({2, 3}, 1.0), constant({2, 3}, 1.0)), ShapeError);
  CHECK_THROWS_AS(conv2d(constant({1, 2, 4, 4}, 1.0), constant({1, 3, 3, 3}, 1.0)), ShapeError);
}
