#include <cmath>
#include <cstdio>
#include <numeric>

#include "sct/errors.hpp"
#include "sct/training.hpp"

namespace sct {

void TrainConfig::validate() const {
  adam.validate();
  if (epochs == 0) throw ConfigError("train.epochs must be positive");
  if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (!(sd_rate >= 0.0 && sd_rate < 1.0)) throw ConfigError("train.sd_rate must lie in [0, 1)");
  if (!(grad_clip >= 0.0)) throw ConfigError("train.grad_clip must be non-negative");
  if (eval_batch == 0) throw ConfigError("train.eval_batch must be positive");
  if (!(beta > 0.0)) throw ConfigError("metrics.beta must be positive");
  if (!std::isfinite(threshold)) throw ConfigError("metrics.threshold must be finite");
  augmentation.validate();
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.adam.lr},
          {"beta1", c.adam.beta1},
          {"beta2", c.adam.beta2},
          {"eps", c.adam.eps},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"sd_rate", c.sd_rate},
          {"grad_clip", c.grad_clip},
          {"augment", c.augment},
          {"sensor_drop", c.augmentation.sensor_drop},
          {"flip_prob", c.augmentation.flip_prob},
          {"max_shift", c.augmentation.max_shift},
          {"seed", c.seed},
          {"checkpoint_every", c.checkpoint_every},
          {"eval_batch", c.eval_batch}};
}

InputBinding bind_inputs(const ModelConfig& config, const Dataset& dataset) {
  InputBinding b;
  for (const auto& m : config.modalities) {
    const std::size_t j = dataset.modality_index(m.name);
    const auto& g = dataset.modalities[j];
    if (g.height != m.height || g.width != m.width || g.channels != m.channels) {
      throw ShapeError("modality '" + m.name + "': model expects " + std::to_string(m.height) + "x" +
                       std::to_string(m.width) + "x" + std::to_string(m.channels) + ", dataset has " +
                       std::to_string(g.height) + "x" + std::to_string(g.width) + "x" + std::to_string(g.channels));
    }
    b.dataset_index.push_back(j);
    b.geometry.push_back(g);
  }
  if (config.num_labels != dataset.num_labels()) {
    throw ShapeError("model predicts " + std::to_string(config.num_labels) + " labels, dataset has " +
                     std::to_string(dataset.num_labels()));
  }
  return b;
}

template <typename T>
std::vector<Tensor<T>> make_batch(const DatasetView& view, std::span<const std::size_t> indices,
                                  const InputBinding& binding, const AugmentConfig* augment, Rng* rng) {
  const std::size_t n = binding.dataset_index.size();
  const std::size_t b = indices.size();
  std::vector<std::vector<T>> buffers(n);
  for (std::size_t j = 0; j < n; ++j) buffers[j].reserve(b * binding.geometry[j].numel());
  for (std::size_t i : indices) {
    const Sample& full = view[i];
    Sample bound;
    for (std::size_t j = 0; j < n; ++j) bound.images.push_back(full.images.at(binding.dataset_index[j]));
    if (augment != nullptr) {
      if (rng == nullptr) throw ConfigError("make_batch: augmentation needs a random stream");
      bound = augment_sample(bound, binding.geometry, *augment, *rng);
    }
    for (std::size_t j = 0; j < n; ++j) buffers[j].insert(buffers[j].end(), bound.images[j].begin(), bound.images[j].end());
  }
  std::vector<Tensor<T>> out;
  for (std::size_t j = 0; j < n; ++j) {
    const auto& g = binding.geometry[j];
    out.emplace_back(Shape{b, g.height, g.width, g.channels}, std::move(buffers[j]));
  }
  return out;
}

std::vector<std::uint8_t> batch_targets(const DatasetView& view, std::span<const std::size_t> indices) {
  std::vector<std::uint8_t> y;
  for (std::size_t i : indices) y.insert(y.end(), view[i].labels.begin(), view[i].labels.end());
  return y;
}

template <typename T>
ScoreMatrix predict_scores(const Model<T>& model, const DatasetView& view, std::size_t batch) {
  if (batch == 0) throw ConfigError("evaluation batch size must be positive");
  const InputBinding binding = bind_inputs(model.config(), *view.dataset);
  ScoreMatrix m;
  m.samples = view.size();
  m.labels = model.config().num_labels;
  m.scores.reserve(m.samples * m.labels);
  NoGradGuard guard;
  Rng unused(0);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < view.size(); start += batch) {
    idx.resize(std::min(batch, view.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto images = make_batch<T>(view, idx, binding);
    const Tensor<T> logits = model.forward(images, false, unused);
    for (T s : logits.data()) m.scores.push_back(1.0 / (1.0 + std::exp(-static_cast<double>(s))));
    const auto y = batch_targets(view, idx);
    m.targets.insert(m.targets.end(), y.begin(), y.end());
  }
  return m;
}

template <typename T>
MetricsReport evaluate(const Model<T>& model, const DatasetView& view, double beta, double threshold,
                       std::size_t batch) {
  return compute_metrics(predict_scores(model, view, batch), beta, threshold);
}

TrainResult train(Model<float>& model, const DatasetView& train_set, const DatasetView& eval_set,
                  const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  if (std::abs(model.config().sd_rate - config.sd_rate) > 0.0) {
    throw ConfigError("model sd_rate " + std::to_string(model.config().sd_rate) + " differs from train.sd_rate " +
                      std::to_string(config.sd_rate));
  }
  if (train_set.size() == 0) throw ConfigError("training split is empty");
  if (eval_set.size() == 0) throw ConfigError("evaluation split is empty");
  const InputBinding binding = bind_inputs(model.config(), *train_set.dataset);
  bind_inputs(model.config(), *eval_set.dataset);

  auto params = model.parameters();
  TrainResult result;
  result.optimizer = AdamState<float>::zeros_like(params);
  Rng shuffle_rng(derive_seed(config.seed, SeedPurpose::kShuffle));
  Rng augment_rng(derive_seed(config.seed, SeedPurpose::kAugment));
  Rng sd_rng(derive_seed(config.seed, SeedPurpose::kStochasticDepth));
  const AugmentConfig* augment = config.augment ? &config.augmentation : nullptr;

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  double best_ap = -1.0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.index(i)]);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      std::span<const std::size_t> idx(order.data() + start, std::min(config.batch_size, order.size() - start));
      const auto images = make_batch<float>(train_set, idx, binding, augment, &augment_rng);
      const auto targets = batch_targets(train_set, idx);
      const Tensor<float> logits = model.forward(images, true, sd_rng);
      const Tensor<float> loss = bce_with_logits(logits, targets);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batches + 1));
      }
      for (auto& p : params) p.tensor.zero_grad();
      loss.backward();
      if (config.grad_clip > 0.0) clip_grad_norm<float>(params, config.grad_clip);
      adam_step<float>(params, result.optimizer, config.adam);
      loss_sum += value;
      ++batches;
    }
    EpochRecord record;
    record.epoch = epoch;
    record.train_loss = loss_sum / static_cast<double>(batches);
    record.metrics = evaluate(model, eval_set, config.beta, config.threshold, config.eval_batch);
    if (record.metrics.ap_macro > best_ap) {
      best_ap = record.metrics.ap_macro;
      result.best = model.clone();
      result.best_epoch = epoch;
    }
    result.history.push_back(record);
    if (on_epoch) on_epoch(record, model, result.optimizer);
  }
  return result;
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,train_loss,ap_micro,ap_macro,f2_macro\n";
  char line[160];
  for (const auto& r : history) {
    std::snprintf(line, sizeof line, "%zu,%.6f,%.6f,%.6f,%.6f\n", r.epoch, r.train_loss, r.metrics.ap_micro,
                  r.metrics.ap_macro, r.metrics.f2_macro);
    out += line;
  }
  return out;
}

void attach_optimizer(Checkpoint& checkpoint, const Model<float>& model, const AdamState<float>& state) {
  const auto params = model.parameters();
  if (state.m.size() != params.size()) throw ShapeError("attach_optimizer: optimizer does not match the model");
  checkpoint.optimizer_step = state.step;
  checkpoint.adam_m.clear();
  checkpoint.adam_v.clear();
  for (std::size_t k = 0; k < params.size(); ++k) {
    checkpoint.adam_m.push_back({params[k].name, params[k].tensor.shape(), state.m[k]});
    checkpoint.adam_v.push_back({params[k].name, params[k].tensor.shape(), state.v[k]});
  }
}

template std::vector<Tensor<float>> make_batch(const DatasetView&, std::span<const std::size_t>, const InputBinding&,
                                              const AugmentConfig*, Rng*);
template std::vector<Tensor<double>> make_batch(const DatasetView&, std::span<const std::size_t>, const InputBinding&,
                                               const AugmentConfig*, Rng*);
template ScoreMatrix predict_scores(const Model<float>&, const DatasetView&, std::size_t);
template ScoreMatrix predict_scores(const Model<double>&, const DatasetView&, std::size_t);
template MetricsReport evaluate(const Model<float>&, const DatasetView&, double, double, std::size_t);
template MetricsReport evaluate(const Model<double>&, const DatasetView&, double, double, std::size_t);

}  // namespace sct
