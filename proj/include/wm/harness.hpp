#pragma once

// Training, evaluation and sweep driver behind the wmfold CLI.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "wm/network.hpp"
#include "wm/optimizer.hpp"
#include "wm/tasks.hpp"

namespace wm {

enum class Architecture { mlp, cnn };
std::string to_string(Architecture a);
Architecture parse_architecture(std::string_view name);

/// Everything a run depends on. Flat key=value text with dotted keys; see
/// RunConfig::keys() for the full list and README for meanings.
struct RunConfig {
  TaskSpec task;
  Architecture arch = Architecture::mlp;
  std::vector<std::size_t> hidden{64, 64};
  ConditioningMode mode = ConditioningMode::manifold;
  ManifoldSpec manifold = ManifoldSpec::ellipse();
  std::size_t embed_bins = 64;
  std::size_t embed_width = 32;
  OptimizerConfig optimizer;
  std::size_t epochs = 30;
  std::size_t steps_per_epoch = 40;
  std::size_t batch_size = 64;
  double lambda = 1e-4;                  // s-scaled L2 penalty, manifold mode only
  bool random_modulator = false;         // ignore the task's s; feed s ~ U(0, 1) per example
  std::size_t eval_per_condition = 10;   // final evaluation samples per grid condition
  std::size_t monitor_samples = 512;     // per-epoch train/test monitor size
  std::size_t noise_levels = 100;        // noise-task evaluation grid size
  std::uint64_t data_seed = 0;
  std::uint64_t init_seed = 0;
  std::string run_id;                    // empty: derived from the config
  std::string out_dir = "runs";

  static const std::vector<std::string>& keys();

  /// Throws ConfigError on unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;

  /// One "key=value" per line in keys() order. from_text(to_text()) == *this.
  std::string to_text() const;
  /// Lines are key=value; '#' starts a comment; blank lines are ignored.
  static RunConfig from_text(const std::string& text);
  static RunConfig from_file(const std::string& path);

  void validate() const;
  NetworkSpec network_spec() const;
  std::string resolved_run_id() const;
  std::string run_dir() const;

  bool operator==(const RunConfig&) const = default;
};

/// Applies "key=value" overrides in order.
void apply_overrides(RunConfig& config, const std::vector<std::string>& assignments);

// ---------------------------------------------------------------------------
// Metrics

inline constexpr const char* kMetricsHeader = "run_id,mode,manifold,sparsity,seed,epoch,split,condition_bucket,loss,accuracy";

struct MetricsRow {
  std::string run_id;
  std::string mode;
  std::string manifold;
  double sparsity = 1.0;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  std::string split;
  std::string condition_bucket;
  double loss = 0.0;
  double accuracy = 0.0;
  bool failed = false;  // sweep rows for failed children: loss/accuracy left empty

  std::string to_csv() const;
  static MetricsRow from_csv(const std::string& line);
};

struct BucketStats {
  std::string bucket;
  std::size_t count = 0;
  std::size_t correct = 0;
  double loss_sum = 0.0;

  double accuracy() const { return count ? static_cast<double>(correct) / static_cast<double>(count) : 0.0; }
  double loss() const { return count ? loss_sum / static_cast<double>(count) : 0.0; }
};

struct EvalTable {
  std::vector<BucketStats> buckets;  // condition deciles "d0".."d9"
  BucketStats aggregate;             // bucket "all"
};

/// Decile of s in [0, 1], as "d0".."d9".
std::string condition_bucket(double s);

/// Accuracy and mean loss of `net` on a fixed grid of conditions: every angle
/// of the split (rotation) or `noise_levels` evenly spaced levels in (0, S)
/// (noise), `per_condition` samples each.
/// With `random_modulator_seed`, the network sees s ~ U(0, 1) per example
/// instead of the task condition (buckets still follow the task condition).
EvalTable evaluate_network(const Network& net, const TaskSpec& task, Split split, std::size_t per_condition,
                           std::size_t noise_levels, std::optional<std::uint64_t> random_modulator_seed = {});

/// Aggregate accuracy/loss on `samples` examples from the split's stream 1.
BucketStats monitor(const Network& net, const TaskSpec& task, Split split, std::size_t samples,
                    std::optional<std::uint64_t> random_modulator_seed = {});

// ---------------------------------------------------------------------------
// Runs

struct TrainResult {
  std::string run_id;
  std::string run_dir;
  std::size_t epochs_completed = 0;
  EvalTable final_test;
  double final_train_accuracy = 0.0;
};

/// Full pipeline: writes <run_dir>/config.txt, metrics.csv and
/// checkpoint.wmck (initial state, then after every epoch). Throws
/// NumericError on a non-finite loss; the last good checkpoint stays.
TrainResult train(const RunConfig& config, std::ostream* log = nullptr);

/// Loads a checkpoint, checks it against the config's network, and evaluates.
/// Throws ConfigError naming differing fields on mismatch.
EvalTable evaluate(const std::string& checkpoint_path, const RunConfig& config, Split split);

struct SweepPlan {
  RunConfig base;
  std::vector<double> sparsities{0.05, 0.1, 0.25, 0.5, 1.0};
  std::vector<ConditioningMode> modes{ConditioningMode::manifold, ConditioningMode::concat, ConditioningMode::embed,
                                      ConditioningMode::none};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::size_t jobs = 1;
};

/// Child configs in sweep order (sparsity, mode, seed). Seeds vary the init
/// seed; every run shares base.data_seed.
std::vector<RunConfig> sweep_configs(const SweepPlan& plan);

/// Runs every child as a separate process (at most plan.jobs at once) and
/// writes <base.out_dir>/sweep.csv: one final test row per child, with empty
/// loss/accuracy for children that failed. Returns the rows.
std::vector<MetricsRow> sweep(const SweepPlan& plan, std::ostream* log = nullptr);

std::vector<MetricsRow> read_metrics(const std::string& path);

// ---------------------------------------------------------------------------
// Trend test

struct TrendResult {
  double s = 0.0;
  double variance = 0.0;
  double z = 0.0;
  double p_increasing = 1.0;  // one-sided p-value for y increasing with x
  double p_decreasing = 1.0;  // one-sided p-value for y decreasing with x
};

/// Mann-Kendall / Kendall S statistic of y against x, tie-corrected normal
/// approximation with continuity correction.
TrendResult mann_kendall(const std::vector<double>& x, const std::vector<double>& y);

// ---------------------------------------------------------------------------
// verify

struct CheckResult {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

struct VerifyOptions {
  std::size_t gradient_seeds = 100;
  std::size_t dense_instances = 50;
  std::size_t kkt_instances = 20;
  std::size_t kkt_trials = 100;
  std::size_t forward_cases = 200;
  std::size_t bayes_samples = 100000;
  bool corrupt_imt = false;  // adds 1e-3 to C[0][0] before the metric checks
};

std::vector<CheckResult> run_verification(const VerifyOptions& options);
std::string verification_json(const std::vector<CheckResult>& checks);
std::string verification_table(const std::vector<CheckResult>& checks);

}  // namespace wm
