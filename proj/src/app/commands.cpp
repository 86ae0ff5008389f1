#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "sct/app.hpp"
#include "sct/errors.hpp"
#include "sct/gradcheck.hpp"

namespace sct {

namespace fs = std::filesystem;

namespace {

std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

Dataset obtain_dataset(const RunConfig& config, const std::optional<fs::path>& data_dir) {
  return data_dir ? load_dataset(*data_dir) : generate_dataset(config.data);
}

std::string checkpoint_name(std::size_t epoch) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "checkpoint_epoch_%04zu.bin", epoch);
  return buf;
}

// Validated model config plus the dataset it will see; throws before any file
// is written.
ModelConfig prepare_model(const RunConfig& config, const Dataset& ds) {
  ModelConfig mc = model_config_for(config, ds.modalities, ds.num_labels());
  mc.validate();
  bind_inputs(mc, ds);
  if (ds.train_count == 0 || ds.train_count >= ds.samples.size()) {
    throw ConfigError("dataset needs non-empty train and test splits");
  }
  if (config.train.augment) {
    for (const auto& g : ds.modalities) {
      if (config.train.augmentation.max_shift >= std::min(g.height, g.width)) {
        throw ConfigError("train.max_shift must be smaller than the sides of modality '" + g.name + "'");
      }
    }
  }
  return mc;
}

TrainOutputs run_training(const RunConfig& config, const Dataset& ds, const ModelConfig& mc, const fs::path& out_dir,
                          std::ostream* log) {
  fs::create_directories(out_dir);
  nlohmann::json echo = to_json(config);
  echo["output_dir"] = out_dir.string();
  echo["dataset"] = {{"num_samples", ds.samples.size()}, {"train_samples", ds.train_count}};
  write_text_atomic(out_dir / "config.json", echo.dump(2) + "\n");

  Model<float> model = Model<float>::build(mc, derive_seed(config.seed, SeedPurpose::kInit));
  const auto start = std::chrono::steady_clock::now();
  auto on_epoch = [&](const EpochRecord& r, const Model<float>& m, const AdamState<float>& opt) {
    if (config.train.checkpoint_every > 0 && r.epoch % config.train.checkpoint_every == 0) {
      Checkpoint ck = make_checkpoint(m, r.epoch, config.seed);
      attach_optimizer(ck, m, opt);
      save_checkpoint(ck, out_dir / checkpoint_name(r.epoch));
    }
    if (log) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      char line[200];
      std::snprintf(line, sizeof line, "[%s] epoch %zu/%zu loss %.4f ap_micro %.4f ap_macro %.4f f2 %.4f (%.1f s)\n",
                    config.mode.c_str(), r.epoch, config.train.epochs, r.train_loss, r.metrics.ap_micro,
                    r.metrics.ap_macro, r.metrics.f2_macro, secs);
      *log << line << std::flush;
    }
  };
  TrainOutputs outputs;
  outputs.directory = out_dir;
  outputs.result = train(model, train_split(ds), test_split(ds), config.train, on_epoch);
  const TrainResult& result = outputs.result;

  write_text_atomic(out_dir / "history.csv", history_csv(result.history));
  Checkpoint final_ck = make_checkpoint(model, config.train.epochs, config.seed);
  attach_optimizer(final_ck, model, result.optimizer);
  save_checkpoint(final_ck, out_dir / "checkpoint_final.bin");
  save_checkpoint(make_checkpoint(result.best, result.best_epoch, config.seed), out_dir / "checkpoint_best.bin");

  outputs.best_test = result.history.at(result.best_epoch - 1).metrics;
  nlohmann::json metrics = {{"mode", config.mode},
                            {"best_epoch", result.best_epoch},
                            {"best", to_json(outputs.best_test)},
                            {"final", to_json(result.history.back().metrics)}};
  write_text_atomic(out_dir / "metrics.json", metrics.dump(2) + "\n");
  return outputs;
}

nlohmann::json report_json(const GradCheckReport& r, std::size_t count, bool at_init) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& e : r.parameters) {
    params.push_back({{"name", e.name},
                      {"max_relative_error", e.max_relative_error},
                      {"worst_index", e.worst_index},
                      {"analytic", e.analytic},
                      {"numeric", e.numeric}});
  }
  return {{"pass", r.pass},
          {"max_relative_error", r.max_relative_error},
          {"worst_parameter", r.worst_parameter},
          {"tolerance", r.tolerance},
          {"epsilon", r.epsilon},
          {"parameter_count", count},
          {"point", at_init ? "init" : "random"},
          {"parameters", params}};
}

}  // namespace

std::uint32_t cmd_gen_data(const RunConfig& config, const fs::path& out_dir, std::ostream& out) {
  config.data.validate();
  const Dataset ds = generate_dataset(config.data);
  const std::uint32_t crc = write_dataset(ds, out_dir);
  nlohmann::json summary = {{"directory", out_dir.string()},
                            {"num_samples", ds.samples.size()},
                            {"train_samples", ds.train_count},
                            {"num_modalities", ds.modalities.size()},
                            {"num_labels", ds.num_labels()},
                            {"manifest_crc32c", hex32(crc)}};
  out << summary.dump() << "\n";
  return crc;
}

TrainOutputs cmd_train(const RunConfig& config, const std::optional<fs::path>& data_dir, const fs::path& out_dir,
                       std::ostream& out, std::ostream* log) {
  config.validate();
  const Dataset ds = obtain_dataset(config, data_dir);
  const ModelConfig mc = prepare_model(config, ds);
  TrainOutputs outputs = run_training(config, ds, mc, out_dir, log);
  nlohmann::json summary = {{"mode", config.mode},
                            {"directory", out_dir.string()},
                            {"best_epoch", outputs.result.best_epoch},
                            {"best", to_json(outputs.best_test)}};
  out << summary.dump() << "\n";
  return outputs;
}

MetricsReport cmd_eval(const fs::path& checkpoint, const fs::path& data_dir, const RunConfig& config,
                       std::ostream& out) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Model<float> model = model_from_checkpoint<float>(ck);
  const Dataset ds = load_dataset(data_dir);
  bind_inputs(model.config(), ds);
  const DatasetView view = test_split(ds);
  if (view.size() == 0) throw ConfigError("dataset " + data_dir.string() + " has no test samples");
  const MetricsReport report = evaluate(model, view, config.train.beta, config.train.threshold, config.train.eval_batch);
  out << to_json(report).dump(2) << "\n";
  return report;
}

MetricsReport cmd_eval_scores(const fs::path& scores_csv, const RunConfig& config, std::ostream& out) {
  const ScoreMatrix m = read_scores_csv(scores_csv);
  const MetricsReport report = compute_metrics(m, config.train.beta, config.train.threshold);
  out << to_json(report).dump(2) << "\n";
  return report;
}

GradCheckReport cmd_gradcheck(const RunConfig& config, const std::optional<std::string>& corrupt, std::ostream& out,
                              bool at_init) {
  config.validate();
  const ModelConfig mc = config.model_config();
  Model<double> model = Model<double>::build(mc, derive_seed(config.seed, SeedPurpose::kInit));
  const std::size_t count = count_parameters(model).total;
  if (count > kGradcheckMaxParameters) {
    throw ConfigError("gradcheck: model has " + std::to_string(count) + " parameters, the limit is " +
                      std::to_string(kGradcheckMaxParameters));
  }
  auto params = model.parameters();
  // The initialization is a poor point for central differences: zero biases,
  // unit gains and averaging fusion hide terms, and the 0.02-scale class token
  // gives LayerNorm a curvature that eps = 1e-4 cannot resolve. By default every
  // parameter gets an additive U(-0.5, 0.5) perturbation; a wholesale [-1, 1]
  // redraw saturates the logits and buries the head gradient in roundoff.
  if (!at_init) {
    Rng prng(derive_seed(config.seed, SeedPurpose::kInit) ^ 0x6772616463686b31ull);
    for (auto& p : params) {
      for (double& x : p.tensor.mutable_data()) x += prng.uniform() - 0.5;
    }
  }
  if (corrupt && std::none_of(params.begin(), params.end(), [&](const auto& p) { return p.name == *corrupt; })) {
    throw ConfigError("gradcheck: no parameter named '" + *corrupt + "'");
  }

  // Inputs uniform in [-2, 2]; two samples so batch coupling is exercised.
  constexpr std::size_t kBatch = 2;
  Rng rng(derive_seed(config.seed, SeedPurpose::kData));
  std::vector<Tensor<double>> images;
  for (const auto& m : mc.modalities) {
    std::vector<double> v(kBatch * m.height * m.width * m.channels);
    for (double& x : v) x = 4.0 * rng.uniform() - 2.0;
    images.emplace_back(Shape{kBatch, m.height, m.width, m.channels}, std::move(v));
  }
  std::vector<std::uint8_t> targets(kBatch * mc.num_labels);
  for (auto& t : targets) t = rng.bernoulli(0.5) ? 1 : 0;

  // Stochastic depth (if any) replays the same masks on every evaluation.
  const std::uint64_t sd_seed = derive_seed(config.seed, SeedPurpose::kStochasticDepth);
  const bool training = mc.sd_rate > 0.0;
  auto forward = [&]() {
    Rng sd(sd_seed);
    return bce_with_logits(model.forward(images, training, sd), targets);
  };
  GradCheckOptions options;
  if (corrupt) {
    options.analytic_hook = [name = *corrupt](const std::string& param, std::span<double> grad) {
      if (param == name) grad[0] += 0.1 + std::abs(grad[0]);
    };
  }
  const GradCheckReport report = finite_difference_check(forward, params, options);
  out << report_json(report, count, at_init).dump(2) << "\n";
  return report;
}

void cmd_params(const RunConfig& config, std::ostream& out) {
  config.validate();
  const Model<float> model = Model<float>::build(config.model_config(), 0);
  const ParameterCount count = count_parameters(model);
  char line[160];
  std::snprintf(line, sizeof line, "%-28s %12s\n", "module", "params");
  out << line;
  for (const auto& [name, n] : count.modules) {
    std::snprintf(line, sizeof line, "%-28s %12zu\n", name.c_str(), n);
    out << line;
  }
  std::snprintf(line, sizeof line, "%-28s %12zu\n", "total", count.total);
  out << line;
}

std::string cmd_params_sweep(const RunConfig& config, const std::vector<std::size_t>& dims,
                             const std::optional<fs::path>& data_dir, const fs::path& out_dir, std::ostream& out,
                             std::ostream* log) {
  if (dims.empty()) throw ConfigError("params --sweep needs at least one embedding dimension");
  const Dataset ds = obtain_dataset(config, data_dir);
  std::vector<RunConfig> runs;
  std::vector<ModelConfig> models;
  for (std::size_t d : dims) {
    RunConfig c = config;
    c.embed_dim = d;
    if (d == 0 || d % c.heads != 0) {
      throw ConfigError("params --sweep: d_e = " + std::to_string(d) + " is not divisible by heads = " +
                        std::to_string(c.heads));
    }
    c.validate();
    models.push_back(prepare_model(c, ds));
    runs.push_back(std::move(c));
  }
  std::string csv = "d_e,params,ap_macro\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const fs::path dir = out_dir / ("d_e_" + std::to_string(dims[i]));
    TrainOutputs o = run_training(runs[i], ds, models[i], dir, log);
    char row[96];
    std::snprintf(row, sizeof row, "%zu,%zu,%.6f\n", dims[i], count_parameters(o.result.best).total,
                  o.best_test.ap_macro);
    csv += row;
  }
  write_text_atomic(out_dir / "sweep.csv", csv);
  out << csv;
  return csv;
}

}  // namespace sct
