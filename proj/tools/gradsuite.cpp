#include "gradsuite.hpp"

#include <ostream>

#include "logvm/blocks.hpp"
#include "logvm/extract.hpp"
#include "logvm/ops.hpp"
#include "logvm/rng.hpp"
#include "logvm/s6.hpp"
#include "logvm/segmodel.hpp"
#include "logvm/train.hpp"

namespace logvm::cli {

namespace {

using Inputs = std::vector<Tensor>;

/// Scalar probe sum(out * r), r ~ N(0, scale^2) fixed per case name and output shape.
Tensor probe(const Tensor& out, const std::string& name, double scale = 1.0) {
  Rng rng(0x9e3779b97f4a7c15ULL, "probe/" + name + "/" + shape_str(out.shape()));
  return ops::sum(ops::mul(out, rng.normal_tensor(out.shape(), 0.0, scale)));
}

// Composite cases use a small probe so that coordinates whose true gradient
// sits at the f64 round-off floor fall under the 1e-8 denominator floor.
constexpr double kCompositeProbe = 1e-3;
constexpr double kModelProbe = 2e-4;

struct Builder {
  std::vector<GradCase> cases;
  std::uint64_t seed;

  Rng rng(const std::string& name) const { return Rng(seed, "gradcase/" + name); }

  void add(const std::string& name, Inputs inputs, std::function<Tensor(const Inputs&)> f,
           std::size_t max_coords = 0) {
    cases.push_back({name, std::move(inputs),
                     [name, f = std::move(f)](const Inputs& in) { return probe(f(in), name); }, max_coords});
  }
};

s6::S6Params params_from(const Inputs& in, std::size_t first) {
  return {in[first], in[first + 1], in[first + 2], in[first + 3], in[first + 4], in[first + 5]};
}

Inputs scan_inputs(Rng& r, std::size_t L, std::size_t D, std::size_t N) {
  auto p = s6::S6Params::init(D, N, r);
  p.delta_bias = r.uniform_tensor({D}, -1.0, 0.5);
  p.a_log = r.uniform_tensor({D, N}, -1.0, 1.0);
  p.skip = r.normal_tensor({D}, 0.0, 1.0);
  return {r.normal_tensor({L, D}, 0.0, 1.0), p.a_log, p.delta_weight, p.delta_bias, p.b_weight, p.c_weight, p.skip};
}

}  // namespace

std::vector<GradCase> op_cases(std::uint64_t seed) {
  Builder b{{}, seed};
  const std::size_t s1[] = {1, 1}, s2[] = {2, 2}, d2[] = {2, 2}, p1[] = {1, 1}, p2[] = {2, 2};
  {
    auto r = b.rng("elementwise");
    const Tensor x = r.normal_tensor({3, 4}, 0, 1), y = r.normal_tensor({3, 4}, 0, 1);
    b.add("add", {x, y}, [](const Inputs& in) { return ops::add(in[0], in[1]); });
    b.add("sub", {x, y}, [](const Inputs& in) { return ops::sub(in[0], in[1]); });
    b.add("mul", {x, y}, [](const Inputs& in) { return ops::mul(in[0], in[1]); });
    b.add("scale", {x}, [](const Inputs& in) { return ops::scale(in[0], -1.7); });
    b.add("add_bias", {r.normal_tensor({2, 3, 4}, 0, 1), r.normal_tensor({4}, 0, 1)},
          [](const Inputs& in) { return ops::add_bias(in[0], in[1]); });
    b.add("sum", {x}, [](const Inputs& in) { return ops::scale(ops::sum(in[0]), 0.3); });
    b.add("mean", {x}, [](const Inputs& in) { return ops::mean(in[0]); });
    b.add("sigmoid", {r.normal_tensor({3, 4}, 0, 2)}, [](const Inputs& in) { return ops::sigmoid(in[0]); });
    b.add("silu", {r.normal_tensor({3, 4}, 0, 2)}, [](const Inputs& in) { return ops::silu(in[0]); });
    b.add("softplus", {r.normal_tensor({3, 4}, 0, 3)}, [](const Inputs& in) { return ops::softplus(in[0]); });
    b.add("softmax", {r.normal_tensor({3, 5}, 0, 1)}, [](const Inputs& in) { return ops::softmax(in[0]); });
    b.add("layer_norm", {r.normal_tensor({3, 5}, 0, 1), r.normal_tensor({5}, 1, 0.3), r.normal_tensor({5}, 0, 1)},
          [](const Inputs& in) { return ops::layer_norm(in[0], in[1], in[2]); });
    b.add("linear", {r.normal_tensor({2, 3, 4}, 0, 1), r.normal_tensor({4, 5}, 0, 1), r.normal_tensor({5}, 0, 1)},
          [](const Inputs& in) { return ops::linear(in[0], in[1], in[2]); });
    b.add("linear_nobias", {r.normal_tensor({3, 4}, 0, 1), r.normal_tensor({4, 2}, 0, 1)},
          [](const Inputs& in) { return ops::linear(in[0], in[1]); });
  }
  {
    auto r = b.rng("conv");
    b.add("depthwise_conv_2d", {r.normal_tensor({5, 6, 3}, 0, 1), r.normal_tensor({3, 3, 3}, 0, 1)},
          [=](const Inputs& in) { return ops::depthwise_conv(in[0], in[1], s1, std::span(s1), p1); });
    b.add("depthwise_conv_2d_strided_dilated", {r.normal_tensor({8, 8, 2}, 0, 1), r.normal_tensor({3, 3, 2}, 0, 1)},
          [=](const Inputs& in) { return ops::depthwise_conv(in[0], in[1], s2, d2, p2); });
    const std::size_t s3[] = {1, 1, 1}, p3[] = {1, 1, 1};
    b.add("depthwise_conv_3d", {r.normal_tensor({4, 3, 5, 2}, 0, 1), r.normal_tensor({3, 3, 3, 2}, 0, 1)},
          [=](const Inputs& in) { return ops::depthwise_conv(in[0], in[1], s3, s3, p3); });
    b.add("group_sum", {r.normal_tensor({3, 3, 6}, 0, 1)}, [](const Inputs& in) { return ops::group_sum(in[0], 3); });
    b.add("unfold_2d", {r.normal_tensor({4, 5, 2}, 0, 1)}, [](const Inputs& in) { return ops::unfold(in[0], 3); });
    b.add("unfold_3d", {r.normal_tensor({3, 3, 4, 2}, 0, 1)}, [](const Inputs& in) { return ops::unfold(in[0], 3); });
    const std::size_t before[] = {1, 0, 2}, after[] = {0, 2, 1};
    b.add("pad", {r.normal_tensor({3, 3, 2}, 0, 1)}, [=](const Inputs& in) { return ops::pad(in[0], before, after); });
    b.add("max_pool", {r.normal_tensor({4, 6, 2}, 0, 1)}, [=](const Inputs& in) { return ops::max_pool(in[0], s2); });
    b.add("upsample_nearest", {r.normal_tensor({2, 3, 2}, 0, 1)},
          [=](const Inputs& in) { return ops::upsample_nearest(in[0], s2); });
  }
  {
    auto r = b.rng("shape");
    b.add("concat", {r.normal_tensor({2, 3}, 0, 1), r.normal_tensor({2, 4}, 0, 1)}, [](const Inputs& in) {
      const Tensor parts[] = {in[0], in[1]};
      return ops::concat(parts, 1);
    });
    b.add("index_select", {r.normal_tensor({4, 3}, 0, 1)}, [](const Inputs& in) {
      const std::size_t rows[] = {3, 0, 0, 2};
      return ops::index_select(in[0], rows);
    });
    b.add("reshape", {r.normal_tensor({2, 6}, 0, 1)}, [](const Inputs& in) {
      return ops::mul(in[0].reshape({3, 4}), in[0].reshape({3, 4}));
    });
    b.add("permute", {r.normal_tensor({2, 3, 4}, 0, 1)}, [](const Inputs& in) {
      return ops::silu(in[0].permute({2, 0, 1}).contiguous());
    });
    b.add("transpose", {r.normal_tensor({3, 4}, 0, 1)}, [](const Inputs& in) { return ops::silu(in[0].transpose(0, 1)); });
    b.add("slice", {r.normal_tensor({5, 3}, 0, 1)}, [](const Inputs& in) { return ops::silu(in[0].slice(0, 1, 4)); });
    b.add("flatten", {r.normal_tensor({2, 3, 2}, 0, 1)}, [](const Inputs& in) { return ops::silu(in[0].flatten(0, 1)); });
  }
  {
    auto r = b.rng("scan");
    b.add("selective_scan_seq", scan_inputs(r, 7, 3, 4),
          [](const Inputs& in) { return s6::selective_scan_seq(in[0], params_from(in, 1)); });
    b.add("selective_scan_parallel", scan_inputs(r, 9, 2, 3),
          [](const Inputs& in) { return s6::selective_scan_parallel(in[0], params_from(in, 1), 4, 1); });
  }
  {
    auto r = b.rng("extract");
    b.add("vanilla_extract", {r.normal_tensor({4, 5, 3}, 0, 1), r.normal_tensor({3, 3, 3}, 0, 0.5)},
          [](const Inputs& in) { return extract::vanilla_extract(in[0], in[1]).tokens; });
    b.add("ltx_2d", {r.normal_tensor({4, 5, 4}, 0, 1), r.normal_tensor({3, 3, 4}, 0, 0.5)},
          [](const Inputs& in) { return extract::ltx(in[0], in[1], 3, 2).tokens; });
    b.add("ltx_3d", {r.normal_tensor({3, 3, 4, 2}, 0, 1), r.normal_tensor({3, 3, 3, 2}, 0, 0.5)},
          [](const Inputs& in) { return extract::ltx(in[0], in[1], 3, 1).tokens; });
    const extract::GtxGeometry g1{{2, 2}, 1, 3, 2}, g2{{2, 2}, 2, 3, 2};
    b.add("gtx", {r.normal_tensor({4, 4, 3}, 0, 1), r.normal_tensor({3, 3, 3}, 0, 0.5),
                  r.normal_tensor({4, 3}, 0, 0.5), r.normal_tensor({3}, 0, 0.5)},
          [=](const Inputs& in) { return extract::gtx(in[0], in[1], in[2], in[3], g1); });
    b.add("gtx_grouped", {r.normal_tensor({4, 4, 4}, 0, 1), r.normal_tensor({3, 3, 4}, 0, 0.5),
                          r.normal_tensor({8, 4}, 0, 0.5), r.normal_tensor({4}, 0, 0.5)},
          [=](const Inputs& in) { return extract::gtx(in[0], in[1], in[2], in[3], g2); });
    const Shape spatial{3, 4};
    b.add("order_tokens", {r.normal_tensor({3, 4, 2}, 0, 1)}, [](const Inputs& in) {
      return extract::order_tokens(in[0], ScanDirection::vertical(2, true));
    });
    b.add("inverse_order", {r.normal_tensor({12, 2}, 0, 1)}, [=](const Inputs& in) {
      return extract::inverse_order(in[0], ScanDirection::vertical(2, false), spatial);
    });
    b.add("concat_tokens", {r.normal_tensor({5, 2}, 0, 1), r.normal_tensor({3, 2}, 0, 1)}, [](const Inputs& in) {
      return extract::concat_tokens(in[0], in[1], ConcatStrategy::Interleaved).tokens;
    });
    b.add("strip_globals", {r.normal_tensor({5, 2}, 0, 1), r.normal_tensor({3, 2}, 0, 1)}, [](const Inputs& in) {
      return extract::strip_globals(extract::concat_tokens(in[0], in[1], ConcatStrategy::Split));
    });
  }
  {
    auto r = b.rng("loss");
    Tensor mask({4, 4});
    for (std::size_t k = 0; k < 16; ++k) mask.mutable_data()[k] = r.uniform(0, 1) < 0.4 ? 1.0 : 0.0;
    const Tensor target = train::one_hot(mask, 2);
    b.cases.push_back({"dice_ce_loss", {r.normal_tensor({4, 4, 2}, 0, 1)},
                       [target](const Inputs& in) { return train::dice_ce_loss(in[0], target); }, 0});
  }
  return b.cases;
}

namespace {

/// Gradient case over the input and every block parameter.
GradCase block_case(const std::string& name, const blocks::BlockConfig& cfg, const Shape& spatial, std::uint64_t seed,
                    std::size_t max_coords) {
  Rng r(seed, "gradcase/" + name);
  blocks::BlockWeights w = blocks::BlockWeights::init(cfg, spatial, r);
  Inputs inputs;
  Shape xs = spatial;
  xs.push_back(cfg.channels);
  inputs.push_back(r.normal_tensor(xs, 0.0, 1.0));
  for (auto& [pname, t] : w.named_parameters()) {
    // Move off the symmetric initialization so every path carries signal.
    const double sd = pname.find("gtx") != std::string::npos ? 1.0 : 0.2;
    Tensor jittered = ops::add(*t, r.normal_tensor(t->shape(), 0.0, sd));
    if (pname.find("delta_bias") != std::string::npos) jittered = r.uniform_tensor(t->shape(), -1.0, 0.5);
    if (pname.find("a_log") != std::string::npos) jittered = r.uniform_tensor(t->shape(), -2.0, -0.5);
    inputs.push_back(jittered);
  }
  auto fn = [name, cfg, w](const Inputs& in) {
    blocks::BlockWeights local = w;
    auto slots = local.named_parameters();
    for (std::size_t i = 0; i < slots.size(); ++i) *slots[i].second = in[i + 1];
    return probe(blocks::block_forward(in[0], cfg, local), name, kCompositeProbe);
  };
  return {name, std::move(inputs), fn, max_coords};
}

}  // namespace

std::vector<GradCase> block_cases(std::uint64_t seed) {
  std::vector<GradCase> out;
  const Shape spatial{4, 4};
  for (auto v : {blocks::Variant::Vanilla, blocks::Variant::Local, blocks::Variant::Global,
                 blocks::Variant::LocalGlobal}) {
    for (std::size_t m : {1, 2, 4}) {
      blocks::BlockConfig cfg;
      cfg.channels = 4;
      cfg.expansion = 1;
      cfg.variant = v;
      cfg.directions = m;
      cfg.squeeze = 2;
      cfg.state_dim = 2;
      out.push_back(block_case("block_" + blocks::to_string(v) + "_m" + std::to_string(m), cfg, spatial, seed, 400));
    }
  }
  for (auto s : {ConcatStrategy::Head, ConcatStrategy::Middle, ConcatStrategy::Split}) {
    blocks::BlockConfig cfg;
    cfg.channels = 4;
    cfg.expansion = 1;
    cfg.squeeze = 2;
    cfg.state_dim = 2;
    cfg.gamma = 2;
    cfg.strategy = s;
    out.push_back(block_case("block_log_" + to_string(s), cfg, spatial, seed, 400));
  }
  {
    blocks::BlockConfig cfg;
    cfg.channels = 2;
    cfg.expansion = 1;
    cfg.state_dim = 2;
    cfg.gtx_stride = {2, 2, 2};
    cfg.directions = 2;
    out.push_back(block_case("block_log_3d", cfg, {2, 4, 4}, seed, 400));
  }
  {
    blocks::BlockConfig cfg;
    cfg.channels = 4;
    cfg.expansion = 1;
    cfg.squeeze = 2;
    cfg.state_dim = 2;
    cfg.parallel_scan = true;
    cfg.scan_chunk = 5;
    out.push_back(block_case("block_log_parallel_scan", cfg, spatial, seed, 400));
  }
  return out;
}

std::vector<GradCase> model_cases(std::uint64_t seed) {
  seg::ModelConfig cfg = seg::ModelConfig::toy(blocks::Variant::LocalGlobal);
  cfg.height = cfg.width = 16;
  cfg.stages = {{2, 2, {2, 2}, 1, 1, true}, {2, 2, {2, 2}, 1, 1, true}, {4, 2, {2, 2}, 2, 2, true}};
  cfg.block.state_dim = 2;
  cfg.block.expansion = 1;
  seg::ModelWeights w = seg::build_model(cfg, seed);
  Rng r(seed, "gradcase/model");
  Inputs inputs{r.uniform_tensor({16, 16, 1}, 0.0, 1.0)};
  for (auto& [name, t] : w.named_parameters()) inputs.push_back(ops::add(*t, r.normal_tensor(t->shape(), 0.0, 0.1)));
  auto fn = [w](const Inputs& in) {
    seg::ModelWeights local = w;
    auto slots = local.named_parameters();
    for (std::size_t i = 0; i < slots.size(); ++i) *slots[i].second = in[i + 1];
    return probe(seg::model_forward(in[0], local), "model", kModelProbe);
  };
  return {{"model_16x16_log", std::move(inputs), fn, 200}};
}

GradCase faulty_case() {
  // y = x^2 with a backward rule that reports 3x instead of 2x.
  auto fn = [](const Inputs& in) {
    const Tensor& x = in[0];
    Tensor y(x.shape());
    const auto v = x.values();
    for (std::size_t k = 0; k < v.size(); ++k) y.mutable_data()[k] = v[k] * v[k];
    y = autodiff::record(std::move(y), "corrupted_square", {&x}, [v](autodiff::Node& n) {
      auto g = n.input_grad(0);
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k] * 3.0 * v[k];
    });
    return ops::sum(y);
  };
  return {"corrupted_square", {Rng(7).normal_tensor({3}, 0.0, 1.0)}, fn, 0};
}

std::vector<GradOutcome> run_grad_cases(const std::vector<GradCase>& cases, std::uint64_t seed, std::ostream& report) {
  std::vector<GradOutcome> out;
  report << "op,max_rel_error,coords,status\n";
  for (const auto& c : cases) {
    GradOutcome o{c.name, autodiff::gradcheck(c.fn, c.inputs, kGradEps, c.max_coords, seed), false};
    o.passed = o.result.max_rel_error <= kGradTolerance;
    report << c.name << ',' << o.result.max_rel_error << ',' << o.result.checked << ','
           << (o.passed ? "ok" : "FAIL") << '\n';
    out.push_back(o);
  }
  return out;
}

}  // namespace logvm::cli
