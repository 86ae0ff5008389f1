#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "sct/app.hpp"
#include "sct/errors.hpp"

namespace {

int report_error(const std::string& kind, const std::string& message) {
  std::cerr << nlohmann::json{{"error", kind}, {"message", message}}.dump() << "\n";
  return 2;
}

std::vector<std::size_t> parse_dims(const std::string& text) {
  std::vector<std::size_t> dims;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = text.find(',', pos);
    const std::string item = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    std::size_t used = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &used);
    } catch (const std::logic_error&) {
      used = 0;
    }
    if (item.empty() || used != item.size()) throw sct::ConfigError("--sweep: '" + item + "' is not a dimension");
    dims.push_back(v);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return dims;
}

}  // namespace

int main(int argc, char** argv) {
  sct::tune_allocator();
  CLI::App app{"Synchronized class-token fusion transformer: data, training, evaluation, gradient checks"};
  app.require_subcommand(1);

  std::string config_path, out_dir, mode, checkpoint, data_dir, scores, corrupt, sweep;
  std::optional<std::uint64_t> seed;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Run config JSON");
    sub->add_option("--out", out_dir, "Output directory");
    sub->add_option("--seed", seed, "Root seed (overrides the config)");
    sub->add_option("--mode", mode, "sct | early | single:<modality>");
  };
  CLI::App* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset");
  common(gen);
  CLI::App* trn = app.add_subcommand("train", "Train a model and write history, checkpoints and metrics");
  common(trn);
  trn->add_option("--data", data_dir, "Dataset directory (default: generate in memory)");
  CLI::App* evl = app.add_subcommand("eval", "Evaluate a checkpoint or a scores fixture");
  common(evl);
  evl->add_option("--checkpoint", checkpoint, "Checkpoint file");
  evl->add_option("--data", data_dir, "Dataset directory");
  evl->add_option("--scores", scores, "CSV with score_k,target_k columns");
  CLI::App* grad = app.add_subcommand("gradcheck", "Finite-difference gradient check in 64-bit");
  common(grad);
  grad->add_option("--corrupt", corrupt, "Perturb the analytic gradient of this parameter");
  bool at_init = false;
  grad->add_flag("--at-init", at_init, "Check at the initialization instead of a random parameter point");
  CLI::App* prm = app.add_subcommand("params", "Parameter-count table or embedding-dimension sweep");
  common(prm);
  prm->add_option("--sweep", sweep, "Comma-separated d_e values to train and evaluate");
  prm->add_option("--data", data_dir, "Dataset directory for the sweep");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("usage_error", e.what());
  }

  try {
    sct::RunConfig config = config_path.empty() ? sct::RunConfig{} : sct::load_run_config(config_path);
    if (seed) sct::set_run_seed(config, *seed);
    if (!mode.empty()) config.mode = mode;
    if (!out_dir.empty()) config.output_dir = out_dir;
    config.validate();
    const std::optional<std::filesystem::path> data =
        data_dir.empty() ? std::nullopt : std::optional<std::filesystem::path>(data_dir);

    if (*gen) {
      sct::cmd_gen_data(config, config.output_dir, std::cout);
    } else if (*trn) {
      sct::cmd_train(config, data, config.output_dir, std::cout, &std::cerr);
    } else if (*evl) {
      if (!scores.empty()) {
        sct::cmd_eval_scores(scores, config, std::cout);
      } else {
        if (checkpoint.empty() || data_dir.empty()) {
          return report_error("usage_error", "eval needs --checkpoint and --data, or --scores");
        }
        sct::cmd_eval(checkpoint, data_dir, config, std::cout);
      }
    } else if (*grad) {
      const auto report = sct::cmd_gradcheck(
          config, corrupt.empty() ? std::nullopt : std::optional<std::string>(corrupt), std::cout, at_init);
      return report.pass ? 0 : 1;
    } else if (*prm) {
      if (sweep.empty()) {
        sct::cmd_params(config, std::cout);
      } else {
        sct::cmd_params_sweep(config, parse_dims(sweep), data, config.output_dir, std::cout, &std::cerr);
      }
    }
  } catch (const sct::Error& e) {
    return report_error(e.kind(), e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return report_error("io_error", e.what());
  } catch (const std::exception& e) {
    return report_error("internal_error", e.what());
  }
  return 0;
}
