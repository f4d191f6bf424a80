#pragma once

// Seeded multi-task training loops and the four experiment drivers.
//
// Every run derives independent random streams from one root seed:
//   "init"        network weights
//   "data"        synthetic data generation / dataset subsetting
//   "order"       task visiting order within a round
//   "batch/<t>"   example order for task t
//   "gumbel"      allocation noise
//   "dropout"     dropout masks
// so switching the routing pattern never perturbs the data stream.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mtrl/gumbel.hpp"
#include "mtrl/modular.hpp"
#include "mtrl/nn.hpp"
#include "mtrl/random.hpp"
#include "mtrl/task_data.hpp"

namespace mtrl::harness {

enum class ExperimentKind { transfer_synthetic, gumbel_synthetic, mnist4, clusters, grad_check };
enum class Pattern { shared, none, gumbel };

std::string_view to_string(ExperimentKind kind);
std::string_view to_string(Pattern pattern);
std::optional<ExperimentKind> parse_experiment(std::string_view name);
std::optional<Pattern> parse_pattern(std::string_view name);

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::transfer_synthetic;
  Pattern pattern = Pattern::gumbel;
  std::string variant;  // label for artifacts; defaults to the pattern name
  std::uint64_t seed = 0;

  std::size_t steps_per_task = 3000;  // rounds; one batch per task per round
  std::size_t batch_size = 64;
  double lr = 0.01;
  std::optional<double> alloc_lr;  // unset: tasks x lr
  double weight_decay = 0.0;
  double clip_norm = 0.0;  // 0 disables clipping

  double p_init = 0.5;
  routing::TemperatureSchedule tau;
  routing::BudgetConfig budget;
  double dropout = 0.0;

  // synthetic data
  double rho = 0.0;
  std::size_t input_dim = 128;
  std::size_t sine_terms = 6;
  std::size_t train_examples = 10000;
  std::size_t eval_examples = 1000;

  // clusters
  std::size_t clusters = 3;
  std::size_t tasks_per_cluster = 4;
  std::size_t cluster_layers = 2;
  std::size_t cluster_components = 8;
  std::size_t cluster_hidden = 8;

  // 4-MNISTs
  std::string data_dir = "data/mnist";
  std::size_t subset_size = 4000;

  std::size_t snapshot_every = 100;
  std::size_t smoothing_window = 100;
  std::size_t eval_batch = 250;

  static ExperimentConfig defaults(ExperimentKind kind);

  double allocation_lr(std::size_t tasks) const;
  std::string label() const;
  // key=value lines with every resolved setting.
  std::string describe(std::size_t tasks) const;
};

struct StepRecord {
  std::size_t step = 0;
  std::size_t round = 0;
  std::size_t task = 0;
  double loss = 0.0;      // task loss without the budget penalty
  double accuracy = 0.0;  // NaN for regression
  double e_c = 0.0;       // expected active fraction after the update
};

struct AllocationSnapshot {
  std::size_t step = 0;
  std::vector<std::vector<double>> layers;  // per layer, tasks x components row-major
};

struct MetricsLog {
  std::size_t snapshot_every = 0;
  std::vector<StepRecord> steps;
  std::vector<AllocationSnapshot> snapshots;
};

struct LayerAllocation {
  std::size_t tasks = 0;
  std::size_t components = 0;
  std::vector<double> probabilities;
  std::vector<int> ml;
};

struct RunResult {
  ExperimentConfig config;
  std::size_t tasks = 0;
  std::vector<std::size_t> task_groups;

  MetricsLog log;
  std::vector<double> round_loss;     // mean task loss per round
  std::vector<double> smoothed_loss;  // round_loss smoothed over the configured window
  double final_smoothed_loss = 0.0;

  std::vector<double> eval_loss;      // per task, max-likelihood routing
  std::vector<double> eval_accuracy;  // per task; NaN for regression
  double mean_eval_loss = 0.0;
  double mean_eval_accuracy = 0.0;

  std::vector<LayerAllocation> allocations;
  std::vector<std::vector<int>> embeddings;
  std::vector<std::vector<double>> similarity;
  double active_fraction = 0.0;           // mean of the ML binaries
  double expected_active_fraction = 0.0;  // mean of the probabilities
};

class NanLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EvalResult {
  std::vector<double> loss;
  std::vector<double> accuracy;
};

// Draws batches from one task's training split, reshuffling every epoch.
class BatchSampler {
 public:
  BatchSampler(std::size_t examples, Rng rng);
  std::vector<std::size_t> next(std::size_t batch);

 private:
  std::size_t examples_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

class Trainer {
 public:
  Trainer(modular::MultiTaskNetwork net, data::TaskSet tasks, nn::LossKind loss,
          const ExperimentConfig& config);

  // One batch per task in a fresh random order; one optimizer step per batch.
  void train_round();
  void train(std::size_t rounds);

  EvalResult evaluate() const;

  const MetricsLog& log() const { return log_; }
  const modular::MultiTaskNetwork& network() const { return net_; }
  modular::MultiTaskNetwork& network() { return net_; }
  const data::TaskSet& tasks() const { return tasks_; }
  std::size_t steps() const { return step_; }
  std::size_t rounds() const { return round_; }
  double allocation_lr() const { return alloc_opt_.config().lr; }

 private:
  void train_step(std::size_t task);
  void snapshot();

  modular::MultiTaskNetwork net_;
  data::TaskSet tasks_;
  nn::LossKind loss_kind_;
  ExperimentConfig config_;
  nn::AdamState weight_opt_;
  nn::AdamState alloc_opt_;
  Rng order_rng_;
  Rng noise_rng_;
  Rng dropout_rng_;
  std::vector<BatchSampler> samplers_;
  MetricsLog log_;
  std::size_t step_ = 0;
  std::size_t round_ = 0;
};

// Allocation pattern matrices (tasks x components).
std::vector<std::vector<int>> shared_pattern(std::size_t tasks, std::size_t components);
// Task t owns components {t, t + tasks, t + 2 tasks, ...}.
std::vector<std::vector<int>> disjoint_pattern(std::size_t tasks, std::size_t components);
routing::AllocationLayer make_allocation(Pattern pattern, std::size_t tasks, std::size_t components,
                                         double p_init);

modular::MultiTaskNetwork build_transfer_network(const ExperimentConfig& config, std::size_t tasks, Rng& init);
modular::MultiTaskNetwork build_gumbel_synthetic_network(const ExperimentConfig& config, std::size_t tasks,
                                                         Rng& init);
modular::MultiTaskNetwork build_mnist4_network(const ExperimentConfig& config, Rng& init);
modular::MultiTaskNetwork build_cluster_network(const ExperimentConfig& config, std::size_t tasks, Rng& init);

// Final metrics, ML allocations, embeddings and the similarity matrix.
RunResult summarize(const Trainer& trainer, const ExperimentConfig& config);

RunResult run_transfer_synthetic(const ExperimentConfig& config);
RunResult run_gumbel_synthetic(const ExperimentConfig& config);
RunResult run_mnist4(const ExperimentConfig& config);
RunResult run_clusters(const ExperimentConfig& config);
RunResult run_experiment(const ExperimentConfig& config);

// Mean similarity of distinct same-group task pairs minus mean similarity of
// cross-group pairs.
double block_gap(const std::vector<std::vector<double>>& similarity, const std::vector<std::size_t>& groups);

// True when tasks of each group share one ML embedding and different groups'
// embeddings differ.
bool groups_separated(const std::vector<std::vector<int>>& embeddings, const std::vector<std::size_t>& groups);

// "N" or "N..M" (inclusive). Throws std::invalid_argument on malformed input.
std::vector<std::uint64_t> parse_seed_range(std::string_view text);

struct GradCheckRecord {
  std::string op;
  std::size_t cases = 0;
  double max_error = 0.0;
};

// Finite-difference check of every autodiff op kind plus the straight-through
// soft path over `cases` seeded inputs each.
std::vector<GradCheckRecord> run_grad_check(std::uint64_t seed, std::size_t cases = 20, double eps = 1e-4);

}  // namespace mtrl::harness
