#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "fixq/rng.hpp"
#include "fixq/tensor.hpp"

using namespace fixq;

TEST_CASE("tensor construction and shape checks") {
  Tensor t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  for (std::int64_t i = 0; i < t.size(); ++i) CHECK(t[i] == 0.0);

  CHECK_THROWS_AS(Tensor::from({2, 2}, {1.0, 2.0, 3.0}), validation_error);
  CHECK_THROWS_AS(Tensor({2, -1}), validation_error);

  CHECK_THROWS_WITH(add(Tensor({2, 3}), Tensor({3, 2})),
                    Catch::Matchers::ContainsSubstring("(2,3)") &&
                        Catch::Matchers::ContainsSubstring("(3,2)"));
}

TEST_CASE("scale and max_abs") {
  Tensor t = Tensor::from({2, 2}, {1.0, -3.0, 2.0, 0.5});
  CHECK(scale(t, 1.0) == t);
  CHECK(max_abs(t) == 3.0);
  CHECK(max_abs(Tensor::from({2}, {-3.0, 2.0})) == 3.0);

  // scale(t, a*b) == scale(scale(t, a), b) for exact powers of two
  const Tensor ab = scale(t, 0.5 * 4.0);
  const Tensor a_then_b = scale(scale(t, 0.5), 4.0);
  CHECK(ab == a_then_b);
}

TEST_CASE("relu is nonnegative and idempotent") {
  rng::Counter rng(3);
  Tensor t({100});
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.gaussian();
  const Tensor r = relu(t);
  for (std::int64_t i = 0; i < r.size(); ++i) CHECK(r[i] >= 0.0);
  CHECK(relu(r) == r);
  CHECK(!std::signbit(relu(Tensor::from({1}, {-0.0}))[0]));
}

TEST_CASE("matmul against a hand-computed product") {
  const Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor b = Tensor::from({3, 2}, {7, 8, 9, 10, 11, 12});
  const Tensor expect = Tensor::from({2, 2}, {58, 64, 139, 154});
  CHECK(matmul(a, b) == expect);

  // brute-force triple-loop oracle on random shapes
  rng::Counter rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const std::int64_t m = 1 + static_cast<std::int64_t>(rng.below(5));
    const std::int64_t k = 1 + static_cast<std::int64_t>(rng.below(5));
    const std::int64_t n = 1 + static_cast<std::int64_t>(rng.below(5));
    Tensor x({m, k}), y({k, n});
    for (std::int64_t i = 0; i < x.size(); ++i) x[i] = rng.gaussian();
    for (std::int64_t i = 0; i < y.size(); ++i) y[i] = rng.gaussian();
    const Tensor got = matmul(x, y);
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) {
        real acc = 0;
        for (std::int64_t p = 0; p < k; ++p) acc += x.at(i, p) * y.at(p, j);
        CHECK(got.at(i, j) == acc);
      }
  }

  CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({2, 3})), validation_error);
}

TEST_CASE("sparsity counts exact and tolerance zeros") {
  CHECK(sparsity(Tensor({2, 2})).sparsity == 1.0);

  const Tensor t = Tensor::from({4}, {1, 0, 0, 2});
  const SparsityStat s = sparsity(t);
  CHECK(s.zero_count == 2);
  CHECK(s.total_count == 4);
  CHECK(s.sparsity == 0.5);

  CHECK(sparsity(Tensor::from({3}, {0.1, -0.05, 2.0}), 0.1).sparsity ==
        Catch::Approx(2.0 / 3.0));

  CHECK_THROWS_AS(sparsity(Tensor()), validation_error);
  CHECK_THROWS_AS(sparsity(t, -1.0), validation_error);
}

TEST_CASE("post-ReLU sparsity of standard normal inputs is about half") {
  rng::Counter rng(1234);
  Tensor t({100000});
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.gaussian();
  CHECK(sparsity(relu(t)).sparsity == Catch::Approx(0.5).margin(0.02));
}

TEST_CASE("im2col layout matches direct tap enumeration") {
  // 1x1x3x3 ramp, k=2, stride 1, pad 0 -> patches are the four 2x2 windows
  Tensor x({1, 1, 3, 3});
  for (std::int64_t i = 0; i < 9; ++i) x[i] = static_cast<real>(i);
  const Tensor col = im2col(x, 0, 2, 1, 0);
  REQUIRE(col.shape() == Shape{4, 4});
  // row r = (ky*2+kx), column p = oy*2+ox
  CHECK(col.at(0, 0) == 0.0);
  CHECK(col.at(1, 0) == 1.0);
  CHECK(col.at(2, 0) == 3.0);
  CHECK(col.at(3, 0) == 4.0);
  CHECK(col.at(0, 3) == 4.0);
  CHECK(col.at(3, 3) == 8.0);

  // padding fills zeros
  const Tensor colp = im2col(x, 0, 3, 1, 1);
  REQUIRE(colp.shape() == Shape{9, 9});
  CHECK(colp.at(0, 0) == 0.0);  // top-left tap off the image
  CHECK(colp.at(4, 4) == 4.0);  // center tap on the center pixel
}

TEST_CASE("reshape preserves data and validates element count") {
  const Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor r = reshape(t, {6});
  CHECK(r.values() == t.values());
  CHECK_THROWS_AS(reshape(t, {4}), validation_error);
}
