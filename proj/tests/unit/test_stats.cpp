#include <doctest.h>

#include <cmath>
#include <vector>

#include "idinvert/stats.hpp"

using namespace idinvert;

TEST_CASE("ranks average ties") {
  const std::vector<double> v{3.0, 1.0, 3.0, 2.0};
  const auto r = stats::ranks(v);
  CHECK(r == std::vector<double>{3.5, 1.0, 3.5, 2.0});
}

TEST_CASE("spearman of monotone sequences is +-1") {
  const std::vector<double> x{-3, -2, -1, 0, 1, 2, 3};
  const std::vector<double> up{0.1, 0.2, 0.25, 0.4, 0.9, 1.0, 5.0};
  std::vector<double> down(up.rbegin(), up.rend());
  CHECK(stats::spearman(x, up) == doctest::Approx(1.0));
  CHECK(stats::spearman(x, down) == doctest::Approx(-1.0));
  const std::vector<double> flat(7, 2.0);
  CHECK(stats::spearman(x, flat) == 0.0);
}

TEST_CASE("pearson matches a hand computation") {
  const std::vector<double> a{1, 2, 3}, b{2, 4, 7};
  // cov = 2.5, var_a = 1, var_b = 6.333..
  CHECK(stats::pearson(a, b) == doctest::Approx(2.5 / std::sqrt(1.0 * 6.333333333333333)));
}

TEST_CASE("average precision") {
  const std::vector<double> s{0.9, 0.8, 0.7, 0.6};
  CHECK(stats::average_precision(s, std::vector<int>{1, 1, 0, 0}) == doctest::Approx(1.0));
  // Positives at ranks 1 and 3: (1/1 + 2/3) / 2.
  CHECK(stats::average_precision(s, std::vector<int>{1, 0, 1, 0}) == doctest::Approx((1.0 + 2.0 / 3.0) / 2.0));
  const auto pr = stats::precision_recall(s, std::vector<int>{1, 0, 1, 0});
  REQUIRE_FALSE(pr.empty());
  CHECK(pr.back().recall == doctest::Approx(1.0));
}
