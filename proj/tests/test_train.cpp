#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "logvm/autodiff.hpp"
#include "logvm/ops.hpp"
#include "logvm/rng.hpp"
#include "logvm/train.hpp"

using namespace logvm;

namespace {

/// Soft Dice + CE straight from the definition, class-major loops.
double loss_oracle(const Tensor& logits, const Tensor& target) {
  const std::size_t K = logits.shape().back(), M = logits.numel() / K;
  const auto z = logits.values(), t = target.values();
  std::vector<double> p(z.size());
  double ce = 0;
  for (std::size_t i = 0; i < M; ++i) {
    double zmax = z[i * K];
    for (std::size_t k = 1; k < K; ++k) zmax = std::max(zmax, z[i * K + k]);
    double denom = 0;
    for (std::size_t k = 0; k < K; ++k) denom += std::exp(z[i * K + k] - zmax);
    for (std::size_t k = 0; k < K; ++k) {
      p[i * K + k] = std::exp(z[i * K + k] - zmax) / denom;
      ce -= t[i * K + k] * (z[i * K + k] - zmax - std::log(denom));
    }
  }
  double dice = 0;
  for (std::size_t k = 0; k < K; ++k) {
    double inter = 0, sp = 0, st = 0;
    for (std::size_t i = 0; i < M; ++i) {
      inter += p[i * K + k] * t[i * K + k];
      sp += p[i * K + k];
      st += t[i * K + k];
    }
    dice += (2 * inter + train::kDiceSmooth) / (sp + st + train::kDiceSmooth);
  }
  return 1.0 - dice / double(K) + ce / double(M);
}

/// Areas of 4-connected foreground regions via an explicit-stack flood fill.
std::vector<std::size_t> flood_areas(const Tensor& mask) {
  const std::size_t H = mask.dim(0), W = mask.dim(1);
  std::vector<char> seen(H * W, 0);
  std::vector<std::size_t> areas;
  const auto m = mask.values();
  for (std::size_t start = 0; start < H * W; ++start) {
    if (m[start] == 0.0 || seen[start]) continue;
    std::size_t area = 0;
    std::vector<std::size_t> stack{start};
    seen[start] = 1;
    while (!stack.empty()) {
      const std::size_t k = stack.back();
      stack.pop_back();
      ++area;
      const std::size_t i = k / W, j = k % W;
      const std::size_t nbr[4][2] = {{i - 1, j}, {i + 1, j}, {i, j - 1}, {i, j + 1}};
      for (const auto& q : nbr) {
        if (q[0] >= H || q[1] >= W) continue;  // wraps for -1
        const std::size_t n = q[0] * W + q[1];
        if (m[n] != 0.0 && !seen[n]) {
          seen[n] = 1;
          stack.push_back(n);
        }
      }
    }
    areas.push_back(area);
  }
  return areas;
}

train::TrainConfig tiny_run(double lr, std::size_t epochs) {
  train::TrainConfig cfg;
  cfg.model.height = cfg.model.width = 8;
  cfg.model.stages = {{4, 2, {2, 2}, 1, 1, true}};
  cfg.model.block.expansion = 1;
  cfg.model.block.state_dim = 2;
  cfg.task.size = 8;
  cfg.task.min_radius = 1.5;
  cfg.task.max_radius = 2.5;
  cfg.task.max_blobs = 2;
  cfg.train_count = 8;
  cfg.val_count = 4;
  cfg.batch = 2;
  cfg.epochs = epochs;
  cfg.lr = lr;
  return cfg;
}

}  // namespace

TEST_CASE("dice + CE loss") {
  SUBCASE("zero logits on two classes") {
    const Tensor target = train::one_hot(Tensor(Shape{2, 2}, {0, 1, 1, 0}), 2);
    const double loss = train::dice_ce_loss(Tensor::zeros({2, 2, 2}), target).item();
    // p = 1/2 everywhere: dice per class (2 + eps) / (4 + eps)
    const double dice = (2 + train::kDiceSmooth) / (4 + train::kDiceSmooth);
    CHECK(loss == doctest::Approx(1 - dice + std::log(2.0)).epsilon(1e-14));
  }
  SUBCASE("confident correct logits drive the loss to zero") {
    const Tensor target = train::one_hot(Tensor(Shape{1, 2}, {0, 1}), 2);
    const double loss = train::dice_ce_loss(Tensor(Shape{1, 2, 2}, {40, -40, -40, 40}), target).item();
    CHECK(std::isfinite(loss));
    CHECK(loss < 1e-12);
    const double wrong = train::dice_ce_loss(Tensor(Shape{1, 2, 2}, {-400, 400, 400, -400}), target).item();
    CHECK(std::isfinite(wrong));
    CHECK(wrong > 100);
  }
  SUBCASE("random instances match the direct formula") {
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t K = rng.integer(2, 4);
      Tensor mask(Shape{3, 5});
      for (std::size_t i = 0; i < 15; ++i) mask.mutable_data()[i] = double(rng.integer(0, std::int64_t(K) - 1));
      const Tensor logits = rng.normal_tensor({3, 5, K}, 0, 2), target = train::one_hot(mask, K);
      CHECK(std::abs(train::dice_ce_loss(logits, target).item() - loss_oracle(logits, target)) <= 1e-12);
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(train::dice_ce_loss(Tensor::zeros({2, 2, 2}), Tensor::zeros({2, 2, 3})), ShapeError);
    CHECK_THROWS_AS(train::dice_ce_loss(Tensor::zeros({1, 1, 2}), Tensor(Shape{1, 1, 2}, {0.5, 0.5})), ValueError);
    CHECK_THROWS(train::one_hot(Tensor(Shape{1}, {2}), 2));
  }
}

TEST_CASE("dice and IoU") {
  const Tensor pred(Shape{2, 2}, {1, 1, 0, 0}), target(Shape{2, 2}, {1, 0, 1, 0});
  CHECK(train::dice_score(pred, target) == 0.5);
  CHECK(train::iou(pred, target) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(train::dice_score(pred, pred) == 1.0);
  CHECK(train::dice_score(Tensor::zeros({2, 2}), Tensor::zeros({2, 2})) == 1.0);
  CHECK(train::iou(Tensor::zeros({2, 2}), Tensor::zeros({2, 2})) == 1.0);
  CHECK(train::dice_score(Tensor::ones({2, 2}), Tensor::zeros({2, 2})) == 0.0);
  CHECK_THROWS(train::dice_score(Tensor::full({2, 2}, 0.5), target));
  CHECK(train::binarize(Tensor(Shape{1, 3, 2}, {0, 1, 1, 0, 0, 0})).values() == std::vector<double>{1, 0, 0});
}

TEST_CASE("adam") {
  SUBCASE("first step moves each coordinate by lr against the gradient sign") {
    Tensor p(Shape{3}, {1.0, -2.0, 0.5});
    const Tensor g[] = {Tensor(Shape{3}, {0.3, -4.0, 1e-3})};
    Tensor* params[] = {&p};
    train::AdamState st;
    st.lr = 0.1;
    train::adam_step(params, g, st);
    CHECK(st.step == 1);
    const std::vector<double> start{1.0, -2.0, 0.5}, gv = g[0].values();
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(p.values()[i] == doctest::Approx(start[i] - 0.1 * gv[i] / (std::abs(gv[i]) + 1e-8)).epsilon(1e-14));
    }
  }
  SUBCASE("two steps match the bias-corrected recurrence") {
    Tensor p(Shape{1}, {0.0});
    Tensor* params[] = {&p};
    train::AdamState st;
    st.lr = 0.01;
    const double g1 = 0.5, g2 = -1.5;
    const Tensor a[] = {Tensor(Shape{1}, {g1})}, b[] = {Tensor(Shape{1}, {g2})};
    train::adam_step(params, a, st);
    train::adam_step(params, b, st);
    double m = 0, v = 0, x = 0;
    for (int t = 1; t <= 2; ++t) {
      const double g = t == 1 ? g1 : g2;
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
      x -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    }
    CHECK(p.item() == doctest::Approx(x).epsilon(1e-14));
  }
  SUBCASE("shape mismatch") {
    Tensor p = Tensor::zeros({2});
    Tensor* params[] = {&p};
    const Tensor g[] = {Tensor::zeros({3})};
    train::AdamState st;
    CHECK_THROWS_AS(train::adam_step(params, g, st), ShapeError);
  }
}

TEST_CASE("synthetic data") {
  train::SynthTask all;
  all.seed = 17;
  all.max_blobs = 5;
  train::SynthTask largest = all;
  largest.kind = train::TaskKind::LargestBlob;
  for (std::size_t idx = 0; idx < 30; ++idx) {
    const auto a = train::gen_synthetic(all, idx), b = train::gen_synthetic(all, idx);
    CHECK(a.image.values() == b.image.values());
    CHECK(a.mask.values() == b.mask.values());
    for (double v : a.mask.values()) CHECK((v == 0.0 || v == 1.0));
    for (double v : a.image.values()) CHECK((v >= 0.0 && v <= 1.0));

    const auto [labels, areas] = train::connected_components(a.mask);
    auto recount = flood_areas(a.mask);
    std::vector<std::size_t> lib(areas.begin() + 1, areas.end());
    std::sort(recount.begin(), recount.end());
    std::sort(lib.begin(), lib.end());
    CHECK(lib == recount);

    const auto l = train::gen_synthetic(largest, idx);
    CHECK(l.image.values() == a.image.values());
    const auto single = flood_areas(l.mask);
    REQUIRE(single.size() == 1);
    CHECK(single[0] == recount.back());
    for (std::size_t k = 0; k < l.mask.numel(); ++k) CHECK(l.mask.values()[k] <= a.mask.values()[k]);
  }
  CHECK(train::parse_task("largest-blob") == train::TaskKind::LargestBlob);
  CHECK(train::to_string(train::TaskKind::BlobsAll) == "blobs-all");
  CHECK_THROWS(train::parse_task("all-blobs"));
}

TEST_CASE("training loop") {
  SUBCASE("zero learning rate leaves the loss unchanged") {
    const auto r = train::train(tiny_run(0.0, 2));
    std::vector<double> val;
    for (const auto& m : r.history)
      if (m.split == "val") val.push_back(m.loss);
    REQUIRE(val.size() == 3);
    CHECK(val[1] == val[0]);
    CHECK(val[2] == val[0]);
  }
  SUBCASE("training lowers the loss and is reproducible") {
    const auto r1 = train::train(tiny_run(5e-3, 3)), r2 = train::train(tiny_run(5e-3, 3));
    double first = 0, last = 0;
    for (const auto& m : r1.history)
      if (m.split == "train") (m.epoch == 0 ? first : last) = m.loss;
    CHECK(last < first);
    REQUIRE(r1.history.size() == r2.history.size());
    for (std::size_t i = 0; i < r1.history.size(); ++i) CHECK(r1.history[i].loss == r2.history[i].loss);
  }
  SUBCASE("artifacts and metrics round trip") {
    auto cfg = tiny_run(1e-3, 1);
    cfg.out_dir = std::filesystem::temp_directory_path() / "logvm_train_test";
    std::filesystem::remove_all(cfg.out_dir);
    const auto r = train::train(cfg);
    CHECK(std::filesystem::exists(cfg.out_dir / "checkpoint"));
    std::ifstream in(cfg.out_dir / "metrics.csv");
    const auto rows = train::read_metrics_csv(in);
    REQUIRE(rows.size() == r.history.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      CHECK(rows[i].epoch == r.history[i].epoch);
      CHECK(rows[i].split == r.history[i].split);
      CHECK(rows[i].dice == r.history[i].dice);
    }
    std::filesystem::remove_all(cfg.out_dir);
  }
}

TEST_CASE("effective receptive field") {
  Rng rng(3);
  const Tensor x = rng.normal_tensor({5, 6, 2}, 0, 1);
  const std::size_t probe[] = {2, 3};
  SUBCASE("pointwise network sees only the probe pixel") {
    const Tensor map = train::erf_map([](const Tensor& in) { return ops::silu(in); }, x, probe);
    CHECK(map.shape() == Shape{5, 6});
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 6; ++j) CHECK(map({i, j}) == ((i == 2 && j == 3) ? 1.0 : 0.0));
  }
  SUBCASE("3x3 conv reaches exactly the neighborhood") {
    const Tensor k = rng.uniform_tensor({3, 3, 2}, 0.1, 1.0);
    auto net = [&](const Tensor& in) {
      const std::size_t one[] = {1, 1};
      return ops::depthwise_conv(in, k, one, one, one);
    };
    const Tensor map = train::erf_map(net, x, probe);
    double peak = 0;
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 6; ++j) {
        const bool near = std::abs(long(i) - 2) <= 1 && std::abs(long(j) - 3) <= 1;
        CHECK((map({i, j}) > 0) == near);
        peak = std::max(peak, map({i, j}));
      }
    CHECK(peak == 1.0);
  }
  const std::size_t outside[] = {5, 0};
  CHECK_THROWS_AS(train::erf_map([](const Tensor& in) { return ops::silu(in); }, x, outside), ShapeError);

  const auto path = std::filesystem::temp_directory_path() / "logvm_erf_test.pgm";
  train::write_pgm(path, Tensor(Shape{2, 3}, {0, 0.5, 1, 1, 0, 0}));
  std::ifstream in(path, std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(bytes.substr(0, 11) == "P5\n3 2\n255\n");
  CHECK(bytes.size() == 11 + 6);
  CHECK(static_cast<unsigned char>(bytes[13]) == 255);
  std::filesystem::remove(path);
}
