#include "logvm/segmodel.hpp"

#include <cmath>
#include <map>

#include "logvm/ops.hpp"
#include "logvm/rng.hpp"

namespace logvm::seg {

ModelConfig ModelConfig::toy(blocks::Variant variant) {
  ModelConfig cfg;
  cfg.stages = {
      {8, 2, {4, 4}, 2, 1, true},
      {16, 2, {2, 2}, 2, 1, true},
      {32, 2, {2, 2}, 2, 2, true},
  };
  cfg.block.variant = variant;
  cfg.block.expansion = 2;
  cfg.block.directions = 1;
  cfg.block.window = 3;
  cfg.block.strategy = ConcatStrategy::Interleaved;
  cfg.block.state_dim = 4;
  return cfg;
}

Shape ModelConfig::stage_spatial(std::size_t s) const {
  std::size_t h = height, w = width;
  for (std::size_t i = 0; i < s; ++i) {
    h /= stages[i].pool;
    w /= stages[i].pool;
  }
  return {h, w};
}

blocks::BlockConfig ModelConfig::block_for(std::size_t s) const {
  blocks::BlockConfig b = block;
  b.channels = stages[s].channels;
  b.gtx_stride = stages[s].gtx_stride;
  b.squeeze = stages[s].squeeze;
  b.gamma = stages[s].gamma;
  return b;
}

void ModelConfig::validate() const {
  if (stages.empty()) throw ShapeError("model: at least one stage required");
  if (in_channels == 0 || classes == 0) throw ShapeError("model: channels and classes must be positive");
  std::size_t h = height, w = width;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const auto& st = stages[s];
    if (st.channels == 0 || st.pool == 0 || h % st.pool != 0 || w % st.pool != 0) {
      throw ShapeError("model: stage " + std::to_string(s) + " pooling " + std::to_string(st.pool) +
                       " does not divide " + std::to_string(h) + "x" + std::to_string(w));
    }
    if (st.mamba_block) block_for(s).validate({h, w});
    h /= st.pool;
    w /= st.pool;
  }
}

namespace {
Tensor dense(std::size_t fin, std::size_t fout, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fin));
  return rng.uniform_tensor({fin, fout}, -bound, bound);
}
}  // namespace

ModelWeights build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelWeights w;
  w.cfg = cfg;
  Rng enc(seed, "encoder"), fuse(seed, "decoder.fuse"), head(seed, "head");
  std::size_t cin = cfg.in_channels;
  for (const auto& st : cfg.stages) {
    w.enc_w.push_back(dense(9 * cin, st.channels, enc));
    w.enc_b.push_back(Tensor::zeros({st.channels}));
    cin = st.channels;
  }
  const std::size_t n = cfg.stages.size();
  w.fuse_w.resize(n);
  w.fuse_b.resize(n);
  w.blocks.resize(n);
  for (std::size_t s = n; s-- > 0;) {
    const std::size_t up = s + 1 < n ? cfg.stages[s + 1].channels : cfg.stages[s].channels;
    const std::size_t c = cfg.stages[s].channels;
    w.fuse_w[s] = dense(up + c, c, fuse);
    w.fuse_b[s] = Tensor::zeros({c});
    if (cfg.stages[s].mamba_block) {
      Rng brng(seed, "decoder.block" + std::to_string(s));
      w.blocks[s] = blocks::BlockWeights::init(cfg.block_for(s), cfg.stage_spatial(s), brng);
    }
  }
  w.head_w = dense(cfg.stages[0].channels, cfg.classes, head);
  w.head_b = Tensor::zeros({cfg.classes});
  return w;
}

std::vector<std::pair<std::string, Tensor*>> ModelWeights::named_parameters() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (std::size_t s = 0; s < enc_w.size(); ++s) {
    out.emplace_back("enc" + std::to_string(s) + ".weight", &enc_w[s]);
    out.emplace_back("enc" + std::to_string(s) + ".bias", &enc_b[s]);
  }
  for (std::size_t s = 0; s < fuse_w.size(); ++s) {
    out.emplace_back("dec" + std::to_string(s) + ".fuse.weight", &fuse_w[s]);
    out.emplace_back("dec" + std::to_string(s) + ".fuse.bias", &fuse_b[s]);
    for (auto& p : blocks[s].named_parameters("dec" + std::to_string(s) + ".block.")) out.push_back(p);
  }
  out.emplace_back("head.weight", &head_w);
  out.emplace_back("head.bias", &head_b);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> ModelWeights::named_parameters() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [name, t] : const_cast<ModelWeights*>(this)->named_parameters()) out.emplace_back(name, t);
  return out;
}

std::size_t ModelWeights::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : named_parameters()) total += p.second->numel();
  return total;
}

void ModelWeights::zero_block_out_projections() {
  for (auto& b : blocks) {
    if (b.out_proj_w.defined()) b.zero_out_projection();
  }
}

void ModelWeights::load(const std::vector<std::pair<std::string, Tensor>>& named) {
  std::map<std::string, Tensor*> slots;
  for (auto& [name, t] : named_parameters()) slots[name] = t;
  for (const auto& [name, t] : named) {
    auto it = slots.find(name);
    if (it == slots.end()) throw std::invalid_argument("checkpoint: unknown parameter '" + name + "'");
    if (it->second->shape() != t.shape()) {
      throw ShapeError("checkpoint: '" + name + "' has shape " + shape_str(t.shape()) + ", model expects " +
                       shape_str(it->second->shape()));
    }
    *it->second = Tensor(t.shape(), t.values());
  }
}

namespace {
Tensor conv3x3(const Tensor& x, const Tensor& w, const Tensor& b) { return ops::linear(ops::unfold(x, 3), w, b); }
}  // namespace

Tensor model_forward(const Tensor& image, const ModelWeights& w) {
  const ModelConfig& cfg = w.cfg;
  if (image.shape() != Shape{cfg.height, cfg.width, cfg.in_channels}) {
    throw ShapeError("model: image " + shape_str(image.shape()) + " does not match config " +
                     shape_str({cfg.height, cfg.width, cfg.in_channels}));
  }
  const std::size_t n = cfg.stages.size();
  std::vector<Tensor> skips;
  Tensor h = image;
  for (std::size_t s = 0; s < n; ++s) {
    const Tensor e = ops::silu(conv3x3(h, w.enc_w[s], w.enc_b[s]));
    skips.push_back(e);
    const std::size_t f[] = {cfg.stages[s].pool, cfg.stages[s].pool};
    h = ops::max_pool(e, f);
  }
  for (std::size_t s = n; s-- > 0;) {
    const std::size_t f[] = {cfg.stages[s].pool, cfg.stages[s].pool};
    const Tensor parts[] = {ops::upsample_nearest(h, f), skips[s]};
    h = ops::linear(ops::concat(parts, 2), w.fuse_w[s], w.fuse_b[s]);
    if (cfg.stages[s].mamba_block) h = blocks::block_forward(h, cfg.block_for(s), w.blocks[s]);
  }
  return ops::linear(h, w.head_w, w.head_b);
}

}  // namespace logvm::seg
