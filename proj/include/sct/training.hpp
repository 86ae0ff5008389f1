#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sct/checkpoint.hpp"
#include "sct/data.hpp"
#include "sct/metrics.hpp"
#include "sct/model.hpp"

namespace sct {

// Mean over all entries of max(s, 0) - s y + log(1 + exp(-|s|)).
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::span<const std::uint8_t> targets);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::uint64_t step = 0;

  static AdamState zeros_like(std::span<const NamedParameter<T>> params);
};

// One bias-corrected Adam update using the gradients stored on `params`
// (a parameter without a gradient counts as zero gradient). Throws
// NumericError naming the parameter on a non-finite gradient.
template <typename T>
void adam_step(std::span<NamedParameter<T>> params, AdamState<T>& state, const AdamConfig& config);

// Rescales all gradients so their global L2 norm is at most `max_norm`.
template <typename T>
double clip_grad_norm(std::span<NamedParameter<T>> params, double max_norm);

struct TrainConfig {
  AdamConfig adam;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double sd_rate = 0.25;
  double grad_clip = 0.0;  // 0 disables
  bool augment = true;
  AugmentConfig augmentation;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // epochs; 0 = only best + final
  double threshold = 0.5;
  double beta = 2.0;
  std::size_t eval_batch = 128;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);

// Maps each model modality (config order) to a dataset modality by name.
struct InputBinding {
  std::vector<std::size_t> dataset_index;
  std::vector<ImageGeometry> geometry;
};

InputBinding bind_inputs(const ModelConfig& config, const Dataset& dataset);

// Builds one [B, h, w, c] tensor per bound modality from the selected samples.
template <typename T>
std::vector<Tensor<T>> make_batch(const DatasetView& view, std::span<const std::size_t> indices,
                                  const InputBinding& binding, const AugmentConfig* augment = nullptr,
                                  Rng* rng = nullptr);

std::vector<std::uint8_t> batch_targets(const DatasetView& view, std::span<const std::size_t> indices);

template <typename T>
ScoreMatrix predict_scores(const Model<T>& model, const DatasetView& view, std::size_t batch = 128);

template <typename T>
MetricsReport evaluate(const Model<T>& model, const DatasetView& view, double beta = 2.0, double threshold = 0.5,
                       std::size_t batch = 128);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  MetricsReport metrics;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  Model<float> best;
  std::size_t best_epoch = 0;
  AdamState<float> optimizer;
};

using EpochCallback = std::function<void(const EpochRecord&, const Model<float>&, const AdamState<float>&)>;

// Trains `model` in place. Shuffling, augmentation and stochastic depth draw
// from child seeds of `config.seed`, so a run is reproducible bit for bit.
TrainResult train(Model<float>& model, const DatasetView& train_set, const DatasetView& eval_set,
                  const TrainConfig& config, const EpochCallback& on_epoch = {});

// "epoch,train_loss,ap_micro,ap_macro,f2_macro" plus one row per epoch.
std::string history_csv(const std::vector<EpochRecord>& history);

void attach_optimizer(Checkpoint& checkpoint, const Model<float>& model, const AdamState<float>& state);

}  // namespace sct
