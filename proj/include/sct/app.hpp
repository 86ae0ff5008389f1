#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sct/data.hpp"
#include "sct/gradcheck.hpp"
#include "sct/model.hpp"
#include "sct/training.hpp"

namespace sct {

// One JSON run file. Every section is optional and falls back to the desk-scale
// defaults; unknown keys are rejected.
struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "runs/default";
  GeneratorConfig data = GeneratorConfig::desk_default();
  // Model architecture; `modalities` is derived from `data` plus `patch_sizes`.
  std::string mode = "sct";  // sct | early | single:<modality>
  std::size_t embed_dim = 32;
  std::size_t depth = 2;
  std::size_t heads = 4;
  double mlp_ratio = 4.0;
  bool use_pos_embed = true;
  bool share_fusion = false;
  std::vector<std::pair<std::string, std::size_t>> patch_sizes;  // empty: 5 for every modality
  TrainConfig train;

  RunConfig();
  // Checks every nested invariant; throws ConfigError naming the field.
  void validate() const;
  ModelConfig model_config() const;
};

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& config);

// Re-seeds every component from one root seed.
void set_run_seed(RunConfig& config, std::uint64_t seed);

// Mode-specific model config for a dataset whose geometry may differ from
// `config.data` (e.g. loaded from disk).
ModelConfig model_config_for(const RunConfig& config, const std::vector<ImageGeometry>& geometry,
                             std::size_t num_labels);

// Glibc tuning for the allocate-free pattern of the autograd graph: keeps
// activation-sized buffers on the heap instead of fresh mmap regions.
void tune_allocator();

// Writes `bytes` to `path` via a temporary file and rename.
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

// Scores fixture: header score_0..score_{l-1},target_0..target_{l-1}, one row per sample.
ScoreMatrix read_scores_csv(const std::filesystem::path& path);

struct TrainOutputs {
  TrainResult result;
  MetricsReport best_test;
  std::filesystem::path directory;
};

// Subcommands. Each validates its inputs before writing anything; results are
// printed to `out` as JSON/CSV.
std::uint32_t cmd_gen_data(const RunConfig& config, const std::filesystem::path& out_dir, std::ostream& out);
// `log` (optional) receives one progress line per epoch.
TrainOutputs cmd_train(const RunConfig& config, const std::optional<std::filesystem::path>& data_dir,
                       const std::filesystem::path& out_dir, std::ostream& out, std::ostream* log = nullptr);
MetricsReport cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& data_dir,
                       const RunConfig& config, std::ostream& out);
MetricsReport cmd_eval_scores(const std::filesystem::path& scores_csv, const RunConfig& config, std::ostream& out);
// Returns the report; `corrupt` names a parameter whose analytic gradient is
// perturbed before comparison. Parameters are checked at a random point unless
// `at_init` is set.
GradCheckReport cmd_gradcheck(const RunConfig& config, const std::optional<std::string>& corrupt, std::ostream& out,
                              bool at_init = false);
void cmd_params(const RunConfig& config, std::ostream& out);
// One row per embedding dimension: trains and evaluates each configuration.
std::string cmd_params_sweep(const RunConfig& config, const std::vector<std::size_t>& dims,
                             const std::optional<std::filesystem::path>& data_dir,
                             const std::filesystem::path& out_dir, std::ostream& out, std::ostream* log = nullptr);

inline constexpr std::size_t kGradcheckMaxParameters = 20000;

}  // namespace sct
