#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "siamese/config.h"
#include "siamese/training.h"

namespace siamese {

struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  std::string output_dir = "out";
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

// Parses and validates a config document. Malformed JSON raises ConfigError
// naming the line and column of the failure.
ExperimentConfig parse_experiment(const std::string& text, const std::string& source = "<config>");
ExperimentConfig load_experiment(const std::filesystem::path& path);

// Flags that may override a config file.
struct Overrides {
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
};

void apply_overrides(ExperimentConfig& c, const Overrides& o);

// Exit codes shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitDiverged = 2;
inline constexpr int kExitSpike = 3;

int exit_code(RunStatus status);

// Commands write human-readable progress to `log`; `out` receives machine
// output (JSON summaries).
int cmd_train(const std::filesystem::path& config, const Overrides& o, std::ostream& log);

struct CompareRow {
  std::string topology;
  double lr = 0.0;
  RunStatus status = RunStatus::kConverged;
  double final_loss = 0.0;
  double eval_acc = 0.0;
};

// comparison.csv: topology,lr,status,final_loss,eval_acc
void write_comparison_csv(std::ostream& out, const std::vector<CompareRow>& rows);

int cmd_compare(const std::vector<std::filesystem::path>& configs, const Overrides& o,
                std::size_t jobs, std::ostream& log);

struct GradCheckOptions {
  std::size_t d_model = 8;
  std::size_t n_layers = 2;
  std::size_t seq_len = 4;
  std::size_t seeds = 5;
  double tolerance = 1e-5;
  // Negative control: perturbs the RMSNorm gradient rule.
  bool corrupt = false;
};

struct GradCheckResult {
  TopologyKind kind;
  double max_rel_error = 0.0;
};

// Full-model finite-difference check for every topology.
std::vector<GradCheckResult> run_gradcheck(const GradCheckOptions& opts);
int cmd_gradcheck(const GradCheckOptions& opts, std::ostream& log);

int cmd_jacobian(const std::filesystem::path& config, const Overrides& o, std::ostream& log);
int cmd_profile(const std::filesystem::path& checkpoint, const std::filesystem::path& config,
                const Overrides& o, std::ostream& log);
int cmd_lens(const std::filesystem::path& checkpoint, const std::filesystem::path& config,
             const Overrides& o, std::ostream& out, std::ostream& log);

}  // namespace siamese
