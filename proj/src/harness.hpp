#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "flow.hpp"
#include "network.hpp"
#include "optimizers.hpp"

namespace dlrt {

struct ExperimentConfig {
  std::string task = "matrix-recovery";  // matrix-recovery | two-class |
                                         // custom-checkpoint
  std::string optimizer = "lr-adam";     // hb | adam | lr-hb | lr-adam |
                                         // lr-adam-naive | lora-adam
  double lambda = 0.05;
  double gamma = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double tau = 0.05;
  int init_rank = 8;
  int r_min = 2;
  int r_max = 0;  // 0 = unbounded (capped by the augmented size)
  long max_steps = 100;
  long batch_size = 0;  // 0 = full batch
  std::uint64_t seed = 0;
  std::string out_dir = ".";

  // Task parameters.
  int n = 32;
  int true_rank = 5;
  double noise = 0.0;
  int n_samples = 200;
  int dim = 32;
  double init_scale = 1.0;
  std::string lr_schedule = "constant";  // constant | linear
  std::string checkpoint_path;           // custom-checkpoint task

  static ExperimentConfig from_json_file(const std::string& path);
  // String-typed override, shared by the CLI and the config loader.
  void set_field(const std::string& key, const std::string& value);
  void validate() const;
};

struct MetricsRow {
  long step = 0;
  double loss = 0.0;
  double val_metric = 0.0;
  std::vector<int> ranks;
  long total_params = 0;
  double compression_ratio = 0.0;
  // Kept in memory and on stdout only; the CSV stays byte-reproducible.
  double wall_ms = 0.0;
};

struct FullHbLayerState {
  Matrix V;
};
struct FullAdamLayerState {
  Matrix V, K;
  long n = 0;
};
using LayerState = std::variant<std::monostate, HeavyBallState, AdamState,
                                FullHbLayerState, FullAdamLayerState,
                                LoraStates>;

struct RunResult {
  std::vector<MetricsRow> rows;
  MetricsRow final_row;
  Network net;
  std::vector<LayerState> states;
};

RunResult run_experiment_trace(const ExperimentConfig& cfg);
MetricsRow run_experiment(const ExperimentConfig& cfg);

// (1 - lr_params / baseline_params) * 100; unclamped below, always < 100.
double compression_ratio(long lr_params, long baseline_params);

// Low-rank layers count (n_out + n_in) r + r^2; dense layers n_out * n_in.
long count_params(const Network& net);
long count_dense_params(const Network& net);

// Writes <dir>/checkpoint.json plus <dir>/checkpoint.bin (little-endian
// float64, column-major). Round-trips bit-exactly.
void save_checkpoint(const Network& net, const std::vector<LayerState>& states,
                     const std::string& optimizer, const std::string& dir);

struct LoadedCheckpoint {
  Network net;
  std::vector<LayerState> states;
  std::string optimizer;
  std::vector<std::string> warnings;
};

// path: the manifest JSON or the directory containing checkpoint.json.
LoadedCheckpoint load_checkpoint(const std::string& path);

// Runs each optimizer on the same task/seed; writes <out_dir>/compare.csv and
// per-optimizer subdirectories. Returns (optimizer, final row) pairs.
std::vector<std::pair<std::string, MetricsRow>> run_compare(
    const ExperimentConfig& cfg, const std::vector<std::string>& optimizers);

// Flow-lab studies: energy/dissipation trace, discretization-error scaling,
// stiffness demonstration. Writes CSVs into cfg.out_dir; returns a summary.
std::string run_flow_study(const ExperimentConfig& cfg);

struct VerifyReport {
  struct Item {
    std::string name;
    bool ok = false;
    std::string detail;
  };
  std::vector<Item> items;
  bool ok() const;
  std::string to_string() const;
};

// The property suite behind the `verify` subcommand.
VerifyReport run_verification();

}  // namespace dlrt
