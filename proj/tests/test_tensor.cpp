#include <cmath>
#include <sstream>

#include "doctest.h"
#include "logvm/ops.hpp"
#include "logvm/rng.hpp"
#include "logvm/serialize.hpp"
#include "logvm/tensor.hpp"
#include "oracles.hpp"

using namespace logvm;

namespace {
bool bitwise_equal(const Tensor& a, const Tensor& b) { return a.shape() == b.shape() && a.values() == b.values(); }
}  // namespace

TEST_CASE("tensor basics and row-major layout") {
  Tensor t(Shape{2, 3}, {0, 1, 2, 3, 4, 5});
  CHECK(t.numel() == 6);
  CHECK(t.strides() == std::vector<std::ptrdiff_t>{3, 1});
  CHECK(t({1, 2}) == 5);
  CHECK(t.dim(-1) == 3);
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, {1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor::scalar(1).dim(0), ShapeError);
}

TEST_CASE("flatten of a 2x3 grid visits row-major order") {
  Tensor g(Shape{2, 3, 1}, {0, 1, 2, 3, 4, 5});
  const auto v = g.flatten(0, 1).values();
  CHECK(v == std::vector<double>{0, 1, 2, 3, 4, 5});
}

TEST_CASE("views share storage and match index arithmetic") {
  Rng rng(3);
  Tensor base = rng.normal_tensor({3, 4, 5}, 0, 1);
  const Tensor p = base.permute({2, 0, 1});
  const Tensor s = p.slice(1, 1, 3);
  for (std::size_t a = 0; a < 5; ++a)
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t c = 0; c < 4; ++c) CHECK(s({a, b, c}) == base({b + 1, c, a}));
  base.mutable_data()[0] = 42.0;
  CHECK(p({0, 0, 0}) == 42.0);
  CHECK(base.reshape({12, 5})({0, 0}) == 42.0);

  SUBCASE("transpose twice is the identity") {
    CHECK(bitwise_equal(base.transpose(0, 2).transpose(0, 2).contiguous(), base));
  }
  SUBCASE("reshape of a non-contiguous view copies values in logical order") {
    const Tensor r = p.reshape({5, 12});
    for (std::size_t a = 0; a < 5; ++a)
      for (std::size_t k = 0; k < 12; ++k) CHECK(r({a, k}) == base({k / 4, k % 4, a}));
  }
}

TEST_CASE("concat along axis 0 keeps operand order") {
  Tensor a = Tensor::full({4, 3}, 1.0), b = Tensor::full({2, 3}, 2.0);
  const Tensor parts[] = {a, b};
  const Tensor c = ops::concat(parts, 0);
  CHECK(c.shape() == Shape{6, 3});
  CHECK(c({3, 2}) == 1.0);
  CHECK(c({4, 0}) == 2.0);
  const Tensor bad[] = {a, Tensor::zeros({2, 2})};
  CHECK_THROWS_AS(ops::concat(bad, 0), ShapeError);
}

TEST_CASE("pad adds zero borders") {
  Tensor x(Shape{1, 2}, {1, 2});
  const std::size_t before[] = {1, 0}, after[] = {0, 1};
  const Tensor y = ops::pad(x, before, after);
  CHECK(y.values() == std::vector<double>{0, 0, 0, 1, 2, 0});
}

TEST_CASE("depthwise_conv examples") {
  SUBCASE("identity kernel returns the input") {
    Tensor x(Shape{1, 3, 1}, {1, 2, 3}), k(Shape{1, 1, 1}, {1});
    const std::size_t one[] = {1, 1}, zero[] = {0, 0};
    CHECK(bitwise_equal(ops::depthwise_conv(x, k, one, one, zero), x));
  }
  SUBCASE("constant field, 2x2 ones kernel, stride 2") {
    const std::size_t two[] = {2, 2}, one[] = {1, 1}, zero[] = {0, 0};
    const Tensor y = ops::depthwise_conv(Tensor::ones({4, 4, 1}), Tensor::ones({2, 2, 1}), two, one, zero);
    CHECK(y.shape() == Shape{2, 2, 1});
    for (double v : y.values()) CHECK(v == 4.0);
  }
  SUBCASE("random 8x8x3, k=3, pad 1 matches the loop oracle exactly") {
    Rng rng(11);
    const Tensor x = rng.normal_tensor({8, 8, 3}, 0, 1), k = rng.normal_tensor({3, 3, 3}, 0, 1);
    const std::size_t one[] = {1, 1};
    CHECK(bitwise_equal(ops::depthwise_conv(x, k, one, one, one), oracle::conv2d(x, k, 1, 1, 1, 1, 1, 1)));
  }
  SUBCASE("random strided dilated instances match the loop oracle") {
    Rng rng(12);
    for (int trial = 0; trial < 30; ++trial) {
      const std::size_t H = rng.integer(1, 8), W = rng.integer(1, 8), C = rng.integer(1, 4), K = 2 * rng.integer(0, 2) + 1;
      const std::size_t sh = rng.integer(1, 3), sw = rng.integer(1, 3), dh = rng.integer(1, 2), dw = rng.integer(1, 2);
      const std::size_t ph = rng.integer(0, 2), pw = rng.integer(0, 2);
      if (H + 2 * ph < dh * (K - 1) + 1 || W + 2 * pw < dw * (K - 1) + 1) continue;
      const Tensor x = rng.normal_tensor({H, W, C}, 0, 1), k = rng.normal_tensor({K, K, C}, 0, 1);
      const std::size_t s[] = {sh, sw}, d[] = {dh, dw}, p[] = {ph, pw};
      CHECK(bitwise_equal(ops::depthwise_conv(x, k, s, d, p), oracle::conv2d(x, k, sh, sw, dh, dw, ph, pw)));
    }
  }
  SUBCASE("3-D same padding matches the loop oracle and preserves extents") {
    Rng rng(13);
    const Tensor x = rng.normal_tensor({3, 4, 5, 2}, 0, 1), k = rng.normal_tensor({3, 3, 3, 2}, 0, 1);
    const std::size_t one[] = {1, 1, 1};
    const Tensor y = ops::depthwise_conv(x, k, one, one, one);
    CHECK(y.shape() == x.shape());
    CHECK(bitwise_equal(y, oracle::conv3d_same(x, k)));
  }
  SUBCASE("errors") {
    const std::size_t one[] = {1, 1}, zero[] = {0, 0}, bad[] = {0, 1};
    CHECK_THROWS_AS(ops::depthwise_conv(Tensor::ones({3, 3, 2}), Tensor::ones({3, 3, 1}), one, one, zero), ShapeError);
    CHECK_THROWS(ops::depthwise_conv(Tensor::ones({3, 3, 1}), Tensor::ones({3, 3, 1}), bad, one, zero));
  }
}

TEST_CASE("linear examples") {
  Tensor eye(Shape{2, 2}, {1, 0, 0, 1});
  CHECK(ops::linear(Tensor(Shape{2}, {1, 2}), eye, Tensor::zeros({2})).values() == std::vector<double>{1, 2});
  CHECK(ops::linear(Tensor(Shape{2}, {1, 1}), Tensor(Shape{2, 2}, {1, 2, 3, 4}), Tensor::zeros({2})).values() ==
        std::vector<double>{4, 6});
  Rng rng(5);
  const Tensor x = rng.normal_tensor({5, 3}, 0, 1), w = rng.normal_tensor({3, 2}, 0, 1), b = rng.normal_tensor({2}, 0, 1);
  const Tensor y = ops::linear(x, w, b);
  CHECK(y.shape() == Shape{5, 2});
  CHECK(bitwise_equal(y, oracle::linear(x, w, &b)));
  CHECK_THROWS_AS(ops::linear(x, Tensor::ones({4, 2})), ShapeError);
}

TEST_CASE("activations and layer norm") {
  CHECK(ops::silu(Tensor::scalar(0)).item() == 0.0);
  CHECK(ops::softplus(Tensor::scalar(0)).item() == doctest::Approx(0.693147).epsilon(1e-6));
  CHECK(ops::softplus(Tensor::scalar(800)).item() == 800.0);
  CHECK(std::isfinite(ops::softplus(Tensor::scalar(-800)).item()));
  const Tensor y = ops::layer_norm(Tensor(Shape{3}, {2, 4, 6}), Tensor::ones({3}), Tensor::zeros({3}), 1e-5);
  double mean = 0, var = 0;
  for (double v : y.values()) mean += v / 3;
  for (double v : y.values()) var += (v - mean) * (v - mean) / 3;
  CHECK(std::abs(mean) < 1e-6);
  CHECK(std::abs(var - 1) < 1e-5);
  CHECK_THROWS_AS(ops::layer_norm(y, Tensor::ones({3}), Tensor::zeros({3}), 0.0), ValueError);

  Rng rng(9);
  const Tensor x = rng.normal_tensor({4, 6}, 0, 3);
  const auto s = ops::silu(x).values(), sp = ops::softplus(x).values(), xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    CHECK(s[i] == doctest::Approx(oracle::silu(xv[i])).epsilon(1e-14));
    CHECK(sp[i] == doctest::Approx(oracle::softplus(xv[i])).epsilon(1e-14));
  }
}

TEST_CASE("non-finite values are surfaced") {
  set_finite_checks(true);
  CHECK_THROWS_AS(ops::scale(Tensor::full({2}, 1e308), 10.0), ValueError);
}

TEST_CASE("unfold, group_sum, pooling and upsampling") {
  Tensor x(Shape{2, 2, 1}, {1, 2, 3, 4});
  const Tensor u = ops::unfold(x, 3);
  CHECK(u.shape() == Shape{2, 2, 9});
  // query (0,0): offsets row-major from (-1,-1); centre is offset 4
  CHECK(u.slice(0, 0, 1).slice(1, 0, 1).values() == std::vector<double>{0, 0, 0, 0, 1, 2, 0, 3, 4});
  CHECK(ops::group_sum(Tensor(Shape{1, 4}, {1, 2, 3, 4}), 2).values() == std::vector<double>{3, 7});
  CHECK_THROWS_AS(ops::group_sum(Tensor::ones({1, 3}), 2), ShapeError);
  const std::size_t f[] = {2, 2};
  CHECK(ops::max_pool(x, f).values() == std::vector<double>{4});
  CHECK(ops::upsample_nearest(Tensor(Shape{1, 1, 1}, {7}), f).values() == std::vector<double>(4, 7.0));
}

TEST_CASE("NDT1 round trip and header layout") {
  Rng rng(1);
  const Tensor t = rng.normal_tensor({2, 3, 4}, 0, 1);
  std::stringstream ss;
  io::write_tensor(ss, t);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "NDT1");
  CHECK(bytes.size() == 4 + 4 + 3 * 4 + 24 * 8);
  CHECK(static_cast<unsigned char>(bytes[4]) == 3);
  CHECK(static_cast<unsigned char>(bytes[8]) == 2);
  CHECK(bitwise_equal(io::read_tensor(ss), t));
  std::stringstream bad("NDT2xxxx");
  CHECK_THROWS(io::read_tensor(bad));
}
