#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "logvm/segmodel.hpp"
#include "logvm/tensor.hpp"

namespace logvm::train {

// ---- losses and metrics -------------------------------------------------------

inline constexpr double kDiceSmooth = 1e-5;

/// (1 - mean_k (2 sum p t + eps) / (sum p + sum t + eps)) + mean pixel CE,
/// with p = softmax(logits) over the trailing class axis. Differentiable in logits.
Tensor dice_ce_loss(const Tensor& logits, const Tensor& target_onehot);

/// mask [H, W] of class ids -> one-hot [H, W, classes].
Tensor one_hot(const Tensor& mask, std::size_t classes);
/// Foreground mask from binary logits: softmax probability of class 1 > threshold.
Tensor binarize(const Tensor& logits, double threshold = 0.5);
/// 2|A n B| / (|A| + |B|); 1 when both masks are empty.
double dice_score(const Tensor& pred, const Tensor& target);
/// |A n B| / |A u B|; 1 when both masks are empty.
double iou(const Tensor& pred, const Tensor& target);

// ---- optimizer ----------------------------------------------------------------

struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::vector<std::vector<double>> m, v;
};

/// Bias-corrected Adam, in place on the parameter storage.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state);

// ---- synthetic data -------------------------------------------------------------

enum class TaskKind { BlobsAll, LargestBlob };
std::string to_string(TaskKind k);
TaskKind parse_task(const std::string& s);

struct SynthTask {
  TaskKind kind = TaskKind::BlobsAll;
  std::size_t size = 32;
  std::size_t min_blobs = 1;
  std::size_t max_blobs = 4;
  double min_radius = 2.0;
  double max_radius = 6.0;
  double noise = 0.1;
  std::uint64_t seed = 1;
};

struct Sample {
  Tensor image;  // [H, W, 1] in [0, 1]
  Tensor mask;   // [H, W] in {0, 1}
};

/// Deterministic in (task.seed, index).
Sample gen_synthetic(const SynthTask& task, std::size_t index);

/// 4-connected components of a binary mask: label per pixel (0 = background)
/// and the component areas (index 0 unused).
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> connected_components(const Tensor& mask);

// ---- training -----------------------------------------------------------------

struct TrainConfig {
  seg::ModelConfig model;
  SynthTask task;
  std::size_t train_count = 200;
  std::size_t val_count = 50;
  std::size_t epochs = 10;
  std::size_t batch = 4;
  double lr = 1e-4;
  double stop_dice = 0.0;  // > 0: stop after a validation Dice at or above this
  std::uint64_t seed = 1;
  std::filesystem::path out_dir;  // empty: no artifacts
};

struct EpochMetrics {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0.0;
  double dice = 0.0;
  double iou = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  seg::ModelWeights weights;
};

/// Epoch 0 rows evaluate the initial weights; every later epoch reports the
/// per-sample losses accumulated during that epoch (train) and a fresh
/// evaluation (val). Writes metrics.csv and checkpoint/ under out_dir.
TrainResult train(const TrainConfig& cfg, const std::function<void(const EpochMetrics&)>& on_epoch = {});

void write_metrics_csv(std::ostream& os, const std::vector<EpochMetrics>& rows);
std::vector<EpochMetrics> read_metrics_csv(std::istream& is);

// ---- effective receptive field ------------------------------------------------

/// |d(sum of outputs at probe)/d input| summed over input channels, scaled to max 1.
Tensor erf_map(const std::function<Tensor(const Tensor&)>& net, const Tensor& input,
               std::span<const std::size_t> probe);
Tensor erf_map(const seg::ModelWeights& w, const Tensor& image, std::span<const std::size_t> probe);
/// 8-bit binary PGM (P5) of a [H, W] map in [0, 1].
void write_pgm(const std::filesystem::path& path, const Tensor& map);

}  // namespace logvm::train
