#pragma once

#include "amimic/actor_mimic.hpp"
#include "amimic/expert.hpp"
#include "amimic/metrics.hpp"
#include "amimic/theory.hpp"
#include "amimic/transfer.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace amimic {

/// Bad config or CLI input. The message names the offending field.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline const std::vector<std::string> kStageOrder = {"experts", "amn", "baseline", "theory", "transfer"};

struct ExpertStageConfig {
  /// "oracle" (value iteration) and/or "dqn" (needed for feature regression).
  std::vector<std::string> kinds = {"oracle", "dqn"};
  int eval_episodes = 50;
  DqnConfig dqn;
};

struct TheoryStageConfig {
  FixedPointStudyConfig fixed_point;
  ContractionStudyConfig contraction;
  LemmaStudyConfig lemma;
  bool cost_to_go = true;
  CostToGoConfig cost;
};

struct TransferStageConfig {
  std::vector<std::string> targets;  // empty = every held-out target
  TransferConfig transfer;
  /// Per-game AMN steps for the checkpoints used as initializations.
  std::int64_t pretrain_steps = 2400;
  /// Feature-regression weight of the amn_feature checkpoint.
  double feature_beta = 0.01;
};

/// Everything a run needs. Missing JSON fields keep these defaults.
struct ExperimentConfig {
  std::vector<std::string> stages = {"experts", "amn", "baseline", "theory", "transfer"};
  std::vector<std::string> games;  // empty = full suite
  std::uint64_t seed = 1;
  std::string output_dir = "runs/default";
  /// Teacher for the amn stage: "oracle" or "dqn".
  std::string teacher = "oracle";
  ExpertStageConfig experts;
  AmnConfig amn;
  BaselineConfig baseline;
  TheoryStageConfig theory;
  TransferStageConfig transfer;

  /// Throws ConfigError naming the first invalid field.
  void validate() const;
};

ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Canonical JSON (sorted keys, two-space indent) of every field.
std::string config_to_json(const ExperimentConfig& config);
/// SHA-256 of the canonical JSON with output_dir removed, so relocating a
/// run keeps its hash.
std::string config_hash(const ExperimentConfig& config);

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

struct PipelineResult {
  std::vector<std::string> completed;
  std::string failed_stage;  // empty on success
  std::string error;
  bool ok() const { return failed_stage.empty(); }
};

/// Runs the configured stages in order under config.output_dir and writes
/// metrics.tsv after every stage plus manifest.json at the end, including
/// after a failed stage. `jobs` bounds the worker threads used inside stages;
/// outputs do not depend on it.
PipelineResult run_pipeline(const ExperimentConfig& config, int jobs = 1);

struct VerifyReport {
  std::vector<std::string> mismatched;
  std::vector<std::string> missing;
  std::vector<std::string> unlisted;
  int checked = 0;
  bool ok() const { return mismatched.empty() && missing.empty() && unlisted.empty(); }
};

/// Re-hashes every file listed in dir/manifest.json. Throws
/// std::runtime_error when the manifest is absent or unreadable.
VerifyReport verify_results(const std::filesystem::path& dir);

struct GameSummary {
  std::string game;
  double expert_mean = 0.0;  // NaN when the stage is missing
  double amn_mean = 0.0;
  double amn_max = 0.0;
  double ratio_percent = 0.0;  // 100 * amn_mean / expert_mean
  double amn_normalized = 0.0;
  double baseline_normalized = 0.0;
};

struct TransferSummaryRow {
  std::string target;
  std::string mode;
  std::vector<double> medians;  // per milestone
};

struct Summary {
  std::vector<GameSummary> games;
  std::vector<TransferSummaryRow> transfer;
  std::vector<std::pair<std::string, bool>> theory;
  std::vector<std::string> gaps;  // stages with no data

  std::string render() const;
};

/// Builds the tables from a results directory. Throws std::runtime_error when
/// the directory has no manifest or no metrics.
Summary summarize_results(const std::filesystem::path& dir);
/// Same, from already loaded records.
Summary summarize_metrics(const MetricSeries& metrics);

}  // namespace amimic
