#include <filesystem>
#include <sstream>

#include "doctest.h"
#include "gradsuite.hpp"
#include "logvm/rng.hpp"
#include "logvm/segmodel.hpp"
#include "logvm/serialize.hpp"

using namespace logvm;
using blocks::Variant;

namespace {

seg::ModelConfig tiny(Variant v) {
  seg::ModelConfig cfg;
  cfg.height = 8;
  cfg.width = 8;
  cfg.stages = {{4, 2, {2, 2}, 1, 1, true}};
  cfg.block.variant = v;
  cfg.block.expansion = 1;
  cfg.block.directions = 1;
  cfg.block.state_dim = 2;
  return cfg;
}

}  // namespace

TEST_CASE("parameter count of a one-stage vanilla model") {
  // enc 9*1*4+4, fuse 8*4+4, head 4*2+2;
  // block: ln 8, in_proj 4*8+8, dwc 36, scan 8+4+4+8+8+4, post ln 8, out_proj 16+4
  const std::size_t expect = 40 + 36 + 10 + (8 + 40 + 36 + 36 + 8 + 20);
  CHECK(seg::build_model(tiny(Variant::Vanilla), 1).parameter_count() == expect);
}

TEST_CASE("toy models build and map images to per-pixel logits") {
  const Tensor image = Rng(3).uniform_tensor({32, 32, 1}, 0, 1);
  for (Variant v : {Variant::Vanilla, Variant::Local, Variant::Global, Variant::LocalGlobal}) {
    const auto w = seg::build_model(seg::ModelConfig::toy(v), 1);
    CHECK(seg::model_forward(image, w).shape() == Shape{32, 32, 2});
  }
  const auto w = seg::build_model(seg::ModelConfig::toy(Variant::Vanilla), 1);
  CHECK_THROWS_AS(seg::model_forward(Tensor::zeros({16, 16, 1}), w), ShapeError);
  auto bad = seg::ModelConfig::toy(Variant::Vanilla);
  bad.height = 30;
  CHECK_THROWS_AS(bad.validate(), ShapeError);
}

TEST_CASE("construction is seeded") {
  const auto cfg = tiny(Variant::LocalGlobal);
  const auto a = seg::build_model(cfg, 5), b = seg::build_model(cfg, 5), c = seg::build_model(cfg, 6);
  const auto pa = a.named_parameters(), pb = b.named_parameters(), pc = c.named_parameters();
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].second->values() == pb[i].second->values());
    any_diff = any_diff || pa[i].second->values() != pc[i].second->values();
  }
  CHECK(any_diff);
}

TEST_CASE("zero head gives uniform class probabilities") {
  auto w = seg::build_model(tiny(Variant::Local), 2);
  w.head_w = Tensor::zeros(w.head_w.shape());
  const auto logits = seg::model_forward(Rng(1).uniform_tensor({8, 8, 1}, 0, 1), w).values();
  for (double v : logits) CHECK(v == 0.0);
}

TEST_CASE("variants share everything outside the blocks") {
  const Tensor image = Rng(4).uniform_tensor({32, 32, 1}, 0, 1);
  std::vector<double> first;
  for (Variant v : {Variant::Vanilla, Variant::Local, Variant::Global, Variant::LocalGlobal}) {
    auto w = seg::build_model(seg::ModelConfig::toy(v), 9);
    w.zero_block_out_projections();
    const auto logits = seg::model_forward(image, w).values();
    if (first.empty()) first = logits;
    CHECK(logits == first);
  }
}

TEST_CASE("checkpoint round trip reproduces logits") {
  const auto cfg = tiny(Variant::LocalGlobal);
  const auto w = seg::build_model(cfg, 11);
  const auto dir = std::filesystem::temp_directory_path() / "logvm_ckpt_test";
  std::filesystem::remove_all(dir);
  io::save_checkpoint(dir, w.named_parameters());
  auto other = seg::build_model(cfg, 12);
  other.load(io::load_checkpoint(dir));
  const Tensor image = Rng(2).uniform_tensor({8, 8, 1}, 0, 1);
  CHECK(seg::model_forward(image, other).values() == seg::model_forward(image, w).values());

  auto vanilla = seg::build_model(tiny(Variant::Vanilla), 1);
  CHECK_THROWS(vanilla.load(io::load_checkpoint(dir)));
  std::filesystem::remove_all(dir);
}

TEST_CASE("model gradients match central differences on sampled coordinates") {
  std::ostringstream report;
  for (const auto& o : cli::run_grad_cases(cli::model_cases(1), 1, report)) {
    INFO(o.name << " " << o.result.max_rel_error);
    CHECK(o.passed);
  }
}
