#include <cmath>

#include "doctest.h"
#include "gradsuite.hpp"
#include "logvm/autodiff.hpp"
#include "logvm/ops.hpp"
#include "logvm/rng.hpp"
#include "logvm/s6.hpp"
#include "logvm/train.hpp"

using namespace logvm;

TEST_CASE("sum gives an all-ones gradient") {
  Tensor x = Rng(1).normal_tensor({2, 3, 4}, 0, 1);
  x.set_requires_grad(true);
  const auto g = autodiff::backward(ops::sum(x));
  CHECK(g.of(x).values() == std::vector<double>(24, 1.0));
}

TEST_CASE("silu gradient at zero is one half") {
  Tensor x = Tensor::zeros({5});
  x.set_requires_grad(true);
  const auto g = autodiff::backward(ops::sum(ops::silu(x)));
  CHECK(g.of(x).values() == std::vector<double>(5, 0.5));
}

TEST_CASE("fan-out accumulates branch gradients") {
  Tensor x(Shape{3}, {1, -2, 3});
  x.set_requires_grad(true);
  const Tensor y = ops::add(ops::mul(x, x), ops::scale(x, 4.0));
  const auto g = autodiff::backward(ops::sum(y)).of(x).values();
  CHECK(g == std::vector<double>{6, 0, 10});
}

TEST_CASE("backward errors") {
  Tensor x = Tensor::ones({2});
  x.set_requires_grad(true);
  CHECK_THROWS_AS(autodiff::backward(ops::scale(x, 2)), ShapeError);
  CHECK_THROWS_AS(autodiff::backward(Tensor::scalar(1.0)), autodiff::GraphError);
  autodiff::NoGradGuard guard;
  CHECK_THROWS_AS(autodiff::backward(ops::sum(x)), autodiff::GraphError);
}

TEST_CASE("backward is deterministic") {
  Rng rng(4);
  Tensor x = rng.normal_tensor({6, 3}, 0, 1), w = rng.normal_tensor({3, 2}, 0, 1);
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  auto run = [&] { return autodiff::backward(ops::sum(ops::silu(ops::linear(x, w)))).of(w).values(); };
  CHECK(run() == run());
}

TEST_CASE("gradcheck on a polynomial") {
  auto f = [](const std::vector<Tensor>& in) { return ops::sum(ops::mul(in[0], in[0])); };
  const auto r = autodiff::gradcheck(f, {Tensor(Shape{1}, {3.0})}, 1e-5);
  CHECK(r.max_rel_error <= 1e-9);
  CHECK(r.worst_analytic == 6.0);
  CHECK_THROWS_AS(autodiff::gradcheck(f, {Tensor::ones({1})}, 1e-3), ValueError);
  auto vec = [](const std::vector<Tensor>& in) { return ops::scale(in[0], 2); };
  CHECK_THROWS_AS(autodiff::gradcheck(vec, {Tensor::ones({2})}), ShapeError);
}

TEST_CASE("scan gradient matches central differences to 1e-6") {
  Rng rng(8);
  auto p = s6::S6Params::init(2, 2, rng);
  p.delta_bias = rng.uniform_tensor({2}, -1, 0.5);
  auto f = [](const std::vector<Tensor>& in) {
    return ops::sum(s6::selective_scan_seq(in[0], {in[1], in[2], in[3], in[4], in[5], in[6]}));
  };
  const auto r = autodiff::gradcheck(
      f, {rng.normal_tensor({8, 2}, 0, 1), p.a_log, p.delta_weight, p.delta_bias, p.b_weight, p.c_weight, p.skip});
  CHECK(r.max_rel_error <= 1e-6);
}

TEST_CASE("dice + CE loss of a two-pixel prediction passes gradcheck at 1e-5") {
  const Tensor target = train::one_hot(Tensor(Shape{1, 2}, {0, 1}), 2);
  auto f = [&](const std::vector<Tensor>& in) { return train::dice_ce_loss(in[0], target); };
  const auto r = autodiff::gradcheck(f, {Tensor(Shape{1, 2, 2}, {0.3, -0.2, 0.1, 0.5})});
  CHECK(r.max_rel_error <= 1e-5);
}

TEST_CASE("every primitive op passes gradcheck") {
  std::ostringstream report;
  for (const auto& o : cli::run_grad_cases(cli::op_cases(1), 1, report)) {
    INFO(o.name << " " << o.result.max_rel_error);
    CHECK(o.passed);
  }
}

TEST_CASE("a corrupted backward rule is caught") {
  std::ostringstream report;
  const auto out = cli::run_grad_cases({cli::faulty_case()}, 1, report);
  CHECK_FALSE(out[0].passed);
  CHECK(report.str().find("corrupted_square") != std::string::npos);
}
