#include "logvm/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "logvm/autodiff.hpp"
#include "logvm/ops.hpp"
#include "logvm/rng.hpp"
#include "logvm/serialize.hpp"

namespace logvm::train {

Tensor dice_ce_loss(const Tensor& logits, const Tensor& target_onehot) {
  if (logits.rank() == 0 || logits.shape() != target_onehot.shape()) {
    throw ShapeError("dice_ce_loss: logits " + shape_str(logits.shape()) + " vs target " +
                     shape_str(target_onehot.shape()));
  }
  const std::size_t K = logits.dim(-1), M = logits.numel() / K;
  const auto t = target_onehot.values();
  for (std::size_t i = 0; i < M; ++i) {
    double row = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double v = t[i * K + k];
      if (v != 0.0 && v != 1.0) throw ValueError("dice_ce_loss: target is not one-hot");
      row += v;
    }
    if (row != 1.0) throw ValueError("dice_ce_loss: target is not one-hot");
  }
  const auto z = logits.values();
  std::vector<double> p(M * K), logp(M * K);
  for (std::size_t i = 0; i < M; ++i) {
    const double* zi = z.data() + i * K;
    const double mx = *std::max_element(zi, zi + K);
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(zi[k] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t k = 0; k < K; ++k) {
      logp[i * K + k] = zi[k] - lse;
      p[i * K + k] = std::exp(logp[i * K + k]);
    }
  }
  std::vector<double> inter(K, 0.0), psum(K, 0.0), tsum(K, 0.0);
  double ce = 0.0;
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t k = 0; k < K; ++k) {
      inter[k] += p[i * K + k] * t[i * K + k];
      psum[k] += p[i * K + k];
      tsum[k] += t[i * K + k];
      ce -= t[i * K + k] * logp[i * K + k];
    }
  ce /= static_cast<double>(M);
  double dice = 0.0;
  for (std::size_t k = 0; k < K; ++k) dice += (2.0 * inter[k] + kDiceSmooth) / (psum[k] + tsum[k] + kDiceSmooth);
  dice /= static_cast<double>(K);
  const double loss = (1.0 - dice) + ce;

  return autodiff::record(Tensor::scalar(loss), "dice_ce_loss", {&logits},
                          [p = std::move(p), t, inter, psum, tsum, K, M](autodiff::Node& n) {
    auto g = n.input_grad(0);
    if (g.empty()) return;
    const double up = n.grad[0];
    std::vector<double> gp(K);
    for (std::size_t i = 0; i < M; ++i) {
      const double* pi = p.data() + i * K;
      const double* ti = t.data() + i * K;
      // dL/dp for the Dice term.
      for (std::size_t k = 0; k < K; ++k) {
        const double den = psum[k] + tsum[k] + kDiceSmooth;
        gp[k] = -(2.0 * ti[k] * den - (2.0 * inter[k] + kDiceSmooth)) / (den * den) / static_cast<double>(K);
      }
      double dot = 0.0;
      for (std::size_t k = 0; k < K; ++k) dot += gp[k] * pi[k];
      for (std::size_t k = 0; k < K; ++k) {
        const double dice_part = pi[k] * (gp[k] - dot);
        const double ce_part = (pi[k] - ti[k]) / static_cast<double>(M);
        g[i * K + k] += up * (dice_part + ce_part);
      }
    }
  });
}

Tensor one_hot(const Tensor& mask, std::size_t classes) {
  Shape shape = mask.shape();
  shape.push_back(classes);
  Tensor out(shape);
  const auto m = mask.values();
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double c = m[i];
    if (c < 0 || c != std::floor(c) || c >= static_cast<double>(classes)) {
      throw ValueError("one_hot: invalid class id " + std::to_string(c));
    }
    out.mutable_data()[i * classes + static_cast<std::size_t>(c)] = 1.0;
  }
  return out;
}

Tensor binarize(const Tensor& logits, double threshold) {
  if (logits.rank() == 0 || logits.dim(-1) != 2) throw ShapeError("binarize: expects two-class logits");
  autodiff::NoGradGuard guard;
  const Tensor prob = ops::softmax(logits);
  Shape shape(logits.shape().begin(), logits.shape().end() - 1);
  Tensor out(shape);
  const auto p = prob.values();
  for (std::size_t i = 0; i < out.numel(); ++i) out.mutable_data()[i] = p[i * 2 + 1] > threshold ? 1.0 : 0.0;
  return out;
}

namespace {

struct Overlap {
  double a = 0, b = 0, both = 0;
};

Overlap overlap(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("metric: mask shapes " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  const auto a = pred.values(), b = target.values();
  Overlap o;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if ((a[i] != 0 && a[i] != 1) || (b[i] != 0 && b[i] != 1)) throw ValueError("metric: masks must be binary");
    o.a += a[i];
    o.b += b[i];
    o.both += a[i] * b[i];
  }
  return o;
}

}  // namespace

double dice_score(const Tensor& pred, const Tensor& target) {
  const Overlap o = overlap(pred, target);
  if (o.a + o.b == 0) return 1.0;
  return 2.0 * o.both / (o.a + o.b);
}

double iou(const Tensor& pred, const Tensor& target) {
  const Overlap o = overlap(pred, target);
  const double uni = o.a + o.b - o.both;
  if (uni == 0) return 1.0;
  return o.both / uni;
}

void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: parameter/gradient count mismatch");
  if (state.m.empty()) {
    for (Tensor* p : params) {
      state.m.emplace_back(p->numel(), 0.0);
      state.v.emplace_back(p->numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: state tracks a different parameter set");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape() || state.m[i].size() != params[i]->numel()) {
      throw ShapeError("adam_step: shape mismatch for parameter " + std::to_string(i));
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor g = grads[i].contiguous();
    double* p = params[i]->mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < m.size(); ++k) {
      const double gk = g.data()[k];
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * gk;
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * gk * gk;
      const double mhat = m[k] / c1, vhat = v[k] / c2;
      p[k] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

std::string to_string(TaskKind k) { return k == TaskKind::BlobsAll ? "blobs-all" : "largest-blob"; }

TaskKind parse_task(const std::string& s) {
  if (s == "blobs-all") return TaskKind::BlobsAll;
  if (s == "largest-blob") return TaskKind::LargestBlob;
  throw std::invalid_argument("unknown task '" + s + "'");
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> connected_components(const Tensor& mask) {
  if (mask.rank() != 2) throw ShapeError("connected_components: expects [H, W]");
  const std::size_t H = mask.dim(0), W = mask.dim(1);
  const auto m = mask.values();
  std::vector<std::size_t> label(H * W, 0), area{0};
  std::vector<std::size_t> queue;
  for (std::size_t start = 0; start < H * W; ++start) {
    if (m[start] == 0 || label[start] != 0) continue;
    const std::size_t id = area.size();
    area.push_back(0);
    queue.assign(1, start);
    label[start] = id;
    while (!queue.empty()) {
      const std::size_t cur = queue.back();
      queue.pop_back();
      ++area[id];
      const std::size_t i = cur / W, j = cur % W;
      const std::size_t nb[4][2] = {{i - 1, j}, {i + 1, j}, {i, j - 1}, {i, j + 1}};
      for (const auto& q : nb) {
        if (q[0] >= H || q[1] >= W) continue;  // wraps for i-1/j-1 at 0
        const std::size_t k = q[0] * W + q[1];
        if (m[k] != 0 && label[k] == 0) {
          label[k] = id;
          queue.push_back(k);
        }
      }
    }
  }
  return {label, area};
}

Sample gen_synthetic(const SynthTask& task, std::size_t index) {
  if (task.size == 0 || task.min_blobs > task.max_blobs || task.min_radius > task.max_radius) {
    throw std::invalid_argument("gen_synthetic: invalid task parameters");
  }
  Rng rng(task.seed, "synth/" + std::to_string(index));
  const std::size_t S = task.size;
  const auto count = static_cast<std::size_t>(
      rng.integer(static_cast<std::int64_t>(task.min_blobs), static_cast<std::int64_t>(task.max_blobs)));
  struct Disc {
    double ci, cj, r, intensity;
  };
  std::vector<Disc> discs;
  for (std::size_t b = 0; b < count; ++b) {
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double r = rng.uniform(task.min_radius, task.max_radius);
      const double lo = r, hi = static_cast<double>(S) - 1.0 - r;
      if (hi <= lo) break;
      const Disc d{rng.uniform(lo, hi), rng.uniform(lo, hi), r, rng.uniform(0.6, 1.0)};
      bool clear = true;
      for (const Disc& o : discs) {
        if (std::hypot(d.ci - o.ci, d.cj - o.cj) < d.r + o.r + 2.0) clear = false;
      }
      if (clear) {
        discs.push_back(d);
        break;
      }
    }
  }
  Tensor image(Shape{S, S, 1});
  Tensor blobs(Shape{S, S});
  for (std::size_t i = 0; i < S; ++i)
    for (std::size_t j = 0; j < S; ++j) {
      double v = 0.0;
      for (const Disc& d : discs) {
        const double di = static_cast<double>(i) - d.ci, dj = static_cast<double>(j) - d.cj;
        if (di * di + dj * dj <= d.r * d.r) {
          v = std::max(v, d.intensity);
          blobs.mutable_data()[i * S + j] = 1.0;
        }
      }
      image.mutable_data()[i * S + j] = std::clamp(v + rng.normal(0.0, task.noise), 0.0, 1.0);
    }
  if (task.kind == TaskKind::BlobsAll) return {image, blobs};

  const auto [label, area] = connected_components(blobs);
  std::size_t best = 0;
  std::pair<std::size_t, std::size_t> best_corner{S, S};
  for (std::size_t id = 1; id < area.size(); ++id) {
    std::pair<std::size_t, std::size_t> corner{S, S};
    for (std::size_t k = 0; k < label.size(); ++k) {
      if (label[k] == id) {
        corner.first = std::min(corner.first, k / S);
        corner.second = std::min(corner.second, k % S);
      }
    }
    if (best == 0 || area[id] > area[best] || (area[id] == area[best] && corner < best_corner)) {
      best = id;
      best_corner = corner;
    }
  }
  Tensor mask(Shape{S, S});
  for (std::size_t k = 0; k < label.size(); ++k) mask.mutable_data()[k] = (best != 0 && label[k] == best) ? 1.0 : 0.0;
  return {image, mask};
}

namespace {

struct Dataset {
  std::vector<Sample> samples;
  std::vector<Tensor> targets;  // one-hot
};

Dataset make_dataset(const SynthTask& base, const char* split, std::size_t count, std::size_t classes) {
  SynthTask task = base;
  task.seed = derive_seed(base.seed, split);
  Dataset ds;
  for (std::size_t i = 0; i < count; ++i) {
    ds.samples.push_back(gen_synthetic(task, i));
    ds.targets.push_back(one_hot(ds.samples.back().mask, classes));
  }
  return ds;
}

struct SampleScore {
  double loss, dice, iou;
};

SampleScore score(const Tensor& logits, const Tensor& loss, const Sample& s) {
  const Tensor pred = binarize(logits.detach());
  return {loss.item(), dice_score(pred, s.mask), iou(pred, s.mask)};
}

EpochMetrics summarize(std::size_t epoch, const char* split, const std::vector<SampleScore>& scores, double secs) {
  EpochMetrics m;
  m.epoch = epoch;
  m.split = split;
  m.seconds = secs;
  for (const auto& s : scores) {
    m.loss += s.loss;
    m.dice += s.dice;
    m.iou += s.iou;
  }
  const double n = static_cast<double>(std::max<std::size_t>(scores.size(), 1));
  m.loss /= n;
  m.dice /= n;
  m.iou /= n;
  return m;
}

EpochMetrics evaluate(const seg::ModelWeights& w, const Dataset& ds, std::size_t epoch, const char* split) {
  const auto t0 = std::chrono::steady_clock::now();
  autodiff::NoGradGuard guard;
  std::vector<SampleScore> scores;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Tensor logits = seg::model_forward(ds.samples[i].image, w);
    scores.push_back(score(logits, dice_ce_loss(logits, ds.targets[i]), ds.samples[i]));
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return summarize(epoch, split, scores, secs);
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const std::function<void(const EpochMetrics&)>& on_epoch) {
  if (cfg.batch == 0) throw std::invalid_argument("train: batch must be >= 1");
  TrainResult result;
  result.weights = seg::build_model(cfg.model, cfg.seed);
  auto& w = result.weights;
  SynthTask task = cfg.task;
  task.size = cfg.model.height;
  if (cfg.model.height != cfg.model.width || cfg.model.in_channels != 1) {
    throw std::invalid_argument("train: synthetic tasks need square single-channel inputs");
  }
  const Dataset train_set = make_dataset(task, "train", cfg.train_count, cfg.model.classes);
  const Dataset val_set = make_dataset(task, "val", cfg.val_count, cfg.model.classes);

  auto named = w.named_parameters();
  std::vector<Tensor*> params;
  for (auto& [name, t] : named) {
    t->set_requires_grad(true);
    params.push_back(t);
  }
  AdamState adam;
  adam.lr = cfg.lr;

  auto emit = [&](const EpochMetrics& m) {
    result.history.push_back(m);
    if (on_epoch) on_epoch(m);
  };
  emit(evaluate(w, train_set, 0, "train"));
  emit(evaluate(w, val_set, 0, "val"));

  std::vector<std::size_t> order(train_set.samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng shuffle(cfg.seed, "shuffle/" + std::to_string(epoch));
    std::shuffle(order.begin(), order.end(), shuffle.engine());
    std::vector<SampleScore> scores(order.size());
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      std::vector<std::vector<double>> acc(params.size());
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t i = order[b];
        const Tensor logits = seg::model_forward(train_set.samples[i].image, w);
        const Tensor loss = dice_ce_loss(logits, train_set.targets[i]);
        scores[i] = score(logits, loss, train_set.samples[i]);
        const autodiff::Gradients grads = autodiff::backward(loss);
        for (std::size_t p = 0; p < params.size(); ++p) {
          const Tensor g = grads.of(*params[p]);
          if (acc[p].empty()) acc[p].assign(g.numel(), 0.0);
          const double* gd = g.data();
          for (std::size_t k = 0; k < acc[p].size(); ++k) acc[p][k] += gd[k];
        }
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      std::vector<Tensor> grads;
      grads.reserve(params.size());
      for (std::size_t p = 0; p < params.size(); ++p) {
        for (double& v : acc[p]) v *= inv;
        grads.emplace_back(params[p]->shape(), std::move(acc[p]));
      }
      adam_step(params, grads, adam);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    emit(summarize(epoch, "train", scores, secs));
    const EpochMetrics val = evaluate(w, val_set, epoch, "val");
    emit(val);
    if (cfg.stop_dice > 0 && val.dice >= cfg.stop_dice) break;
  }

  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream csv(cfg.out_dir / "metrics.csv");
    write_metrics_csv(csv, result.history);
    io::save_checkpoint(cfg.out_dir / "checkpoint", std::as_const(w).named_parameters());
  }
  for (Tensor* p : params) p->set_requires_grad(false);
  return result;
}

void write_metrics_csv(std::ostream& os, const std::vector<EpochMetrics>& rows) {
  os << "epoch,split,loss,dice,iou,seconds\n";
  os << std::setprecision(17);
  for (const auto& r : rows) {
    os << r.epoch << ',' << r.split << ',' << r.loss << ',' << r.dice << ',' << r.iou << ',' << r.seconds << '\n';
  }
}

std::vector<EpochMetrics> read_metrics_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "epoch,split,loss,dice,iou,seconds") {
    throw std::runtime_error("metrics csv: unexpected header");
  }
  std::vector<EpochMetrics> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> f;
    while (std::getline(ss, field, ',')) f.push_back(field);
    if (f.size() != 6) throw std::runtime_error("metrics csv: bad row '" + line + "'");
    rows.push_back({std::stoul(f[0]), f[1], std::stod(f[2]), std::stod(f[3]), std::stod(f[4]), std::stod(f[5])});
  }
  return rows;
}

Tensor erf_map(const std::function<Tensor(const Tensor&)>& net, const Tensor& input,
               std::span<const std::size_t> probe) {
  if (input.rank() != 3 || probe.size() != 2) throw ShapeError("erf_map: expects [H, W, C] input and an (i, j) probe");
  Tensor x(input.shape(), input.values());
  x.set_requires_grad(true);
  const Tensor out = net(x);
  if (out.rank() != 3 || probe[0] >= out.dim(0) || probe[1] >= out.dim(1)) {
    throw ShapeError("erf_map: probe (" + std::to_string(probe[0]) + "," + std::to_string(probe[1]) +
                     ") outside output " + shape_str(out.shape()));
  }
  const Tensor at = out.slice(0, probe[0], probe[0] + 1).slice(1, probe[1], probe[1] + 1);
  const auto grads = autodiff::backward(ops::sum(at));
  const auto g = grads.of(x).values();
  const std::size_t H = input.dim(0), W = input.dim(1), C = input.dim(2);
  Tensor heat(Shape{H, W});
  double mx = 0.0;
  for (std::size_t k = 0; k < H * W; ++k) {
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += std::abs(g[k * C + c]);
    heat.mutable_data()[k] = s;
    mx = std::max(mx, s);
  }
  if (mx > 0) {
    for (std::size_t k = 0; k < H * W; ++k) heat.mutable_data()[k] /= mx;
  }
  return heat;
}

Tensor erf_map(const seg::ModelWeights& w, const Tensor& image, std::span<const std::size_t> probe) {
  return erf_map([&w](const Tensor& x) { return seg::model_forward(x, w); }, image, probe);
}

void write_pgm(const std::filesystem::path& path, const Tensor& map) {
  if (map.rank() != 2) throw ShapeError("write_pgm: expects [H, W]");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "P5\n" << map.dim(1) << ' ' << map.dim(0) << "\n255\n";
  for (double v : map.values()) {
    os.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  }
}

}  // namespace logvm::train
