// mtrl: run multi-task routing experiments and write their artifacts.
//
//   mtrl <experiment> [--seed N | --seeds N..M] [--pattern shared|none|gumbel] ...
//
// Each seed writes into <out-dir>/<variant>/seed_<n>/; a summary.csv with one
// row per seed lands in <out-dir>/<variant>/.
//
// Exit codes: 0 success, 1 usage error, 2 non-finite loss, 3 I/O failure,
// 4 failed gradient check.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "mtrl/artifacts.hpp"
#include "mtrl/harness.hpp"

namespace {

using namespace mtrl;
using harness::ExperimentConfig;

constexpr int kExitUsage = 1;
constexpr int kExitNan = 2;
constexpr int kExitIo = 3;
constexpr int kExitGradCheck = 4;

// Relative error bound for the grad-check experiment.
constexpr double kGradTolerance = 1e-4;

int run_grad_check(std::uint64_t seed) {
  const auto records = harness::run_grad_check(seed);
  bool ok = true;
  std::printf("%-22s %6s %12s\n", "op", "cases", "max_rel_err");
  for (const auto& r : records) {
    const bool pass = r.max_error < kGradTolerance;
    ok = ok && pass;
    std::printf("%-22s %6zu %12.3e %s\n", r.op.c_str(), r.cases, r.max_error, pass ? "ok" : "FAIL");
  }
  return ok ? 0 : kExitGradCheck;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task routing experiments with learned component allocation"};

  std::string experiment;
  app.add_option("experiment", experiment, "transfer-synthetic | gumbel-synthetic | mnist4 | clusters | grad-check")
      ->required();

  std::uint64_t seed = 0;
  std::string seeds;
  std::string pattern;
  std::string variant;
  std::optional<double> rho, budget, lambda, p_init, tau0, tau_decay, lr, alloc_lr, clip, dropout;
  std::optional<std::size_t> steps, batch_size, subset_size, components;
  std::string data_dir;
  std::string out_dir = "out";

  auto* seed_opt = app.add_option("--seed", seed, "root seed (default 0)");
  app.add_option("--seeds", seeds, "inclusive seed range N..M")->excludes(seed_opt);
  app.add_option("--pattern", pattern, "shared | none | gumbel");
  app.add_option("--variant", variant, "artifact label (default: pattern name)");
  app.add_option("--rho", rho, "task relatedness in [0, 1]");
  app.add_option("--budget", budget, "active-fraction budget in (0, 1]");
  app.add_option("--lambda", lambda, "budget penalty strength");
  app.add_option("--p-init", p_init, "initial allocation probability");
  app.add_option("--tau", tau0, "initial Gumbel-softmax temperature");
  app.add_option("--tau-decay", tau_decay, "per-step temperature decay factor");
  app.add_option("--steps", steps, "training rounds (batches per task)");
  app.add_option("--batch-size", batch_size, "examples per batch");
  app.add_option("--lr", lr, "learning rate for network weights");
  app.add_option("--alloc-lr", alloc_lr, "learning rate for allocation logits (default: tasks x lr)");
  app.add_option("--clip", clip, "global gradient-norm clip (0 disables)");
  app.add_option("--dropout", dropout, "dropout probability before task heads");
  app.add_option("--components", components, "components per layer (clusters)");
  app.add_option("--subset-size", subset_size, "MNIST training subset size (0 = all)");
  app.add_option("--data-dir", data_dir, "directory holding the MNIST IDX files");
  app.add_option("--out-dir", out_dir, "artifact root directory");

  CLI11_PARSE(app, argc, argv);

  const auto kind = harness::parse_experiment(experiment);
  if (!kind) {
    std::cerr << "unknown experiment '" << experiment << "'\n";
    return kExitUsage;
  }

  std::vector<std::uint64_t> seed_list{seed};
  if (!seeds.empty()) {
    try {
      seed_list = harness::parse_seed_range(seeds);
    } catch (const std::invalid_argument& e) {
      std::cerr << e.what() << '\n';
      return kExitUsage;
    }
  }

  if (*kind == harness::ExperimentKind::grad_check) {
    int status = 0;
    for (auto s : seed_list) status = std::max(status, run_grad_check(s));
    return status;
  }

  ExperimentConfig cfg = ExperimentConfig::defaults(*kind);
  if (!pattern.empty()) {
    const auto p = harness::parse_pattern(pattern);
    if (!p) {
      std::cerr << "unknown pattern '" << pattern << "'\n";
      return kExitUsage;
    }
    cfg.pattern = *p;
  }
  if (rho) cfg.rho = *rho;
  if (budget) cfg.budget.budget = *budget;
  if (lambda) cfg.budget.strength = *lambda;
  if (p_init) cfg.p_init = *p_init;
  if (tau0) cfg.tau.tau0 = *tau0;
  if (tau_decay) cfg.tau.decay = *tau_decay;
  if (steps) cfg.steps_per_task = *steps;
  if (batch_size) cfg.batch_size = *batch_size;
  if (lr) cfg.lr = *lr;
  if (alloc_lr) cfg.alloc_lr = *alloc_lr;
  if (clip) cfg.clip_norm = *clip;
  if (dropout) cfg.dropout = *dropout;
  if (components) cfg.cluster_components = *components;
  if (subset_size) cfg.subset_size = *subset_size;
  if (!data_dir.empty()) cfg.data_dir = data_dir;
  cfg.variant = variant;

  const std::filesystem::path root = std::filesystem::path(out_dir) / cfg.label();
  artifacts::CsvTable summary{{"seed", "final_smoothed_loss", "mean_eval_loss", "mean_eval_accuracy",
                               "active_fraction", "expected_active_fraction"},
                              {}};
  for (auto s : seed_list) {
    cfg.seed = s;
    const auto dir = root / ("seed_" + std::to_string(s));
    try {
      const harness::RunResult result = harness::run_experiment(cfg);
      artifacts::emit_artifacts(result, dir);
      summary.rows.push_back({std::to_string(s), artifacts::format_number(result.final_smoothed_loss),
                              artifacts::format_number(result.mean_eval_loss),
                              artifacts::format_number(result.mean_eval_accuracy),
                              artifacts::format_number(result.active_fraction),
                              artifacts::format_number(result.expected_active_fraction)});
      std::printf("%s %s seed=%llu final_smoothed_loss=%.6g eval_loss=%.6g eval_acc=%.4f active=%.4f\n",
                  experiment.c_str(), cfg.label().c_str(), static_cast<unsigned long long>(s),
                  result.final_smoothed_loss, result.mean_eval_loss, result.mean_eval_accuracy,
                  result.active_fraction);
      std::fflush(stdout);
    } catch (const harness::NanLossError& e) {
      std::cerr << "aborted: " << e.what() << '\n';
      try {
        std::filesystem::create_directories(dir);
        artifacts::write_file(dir / "nan_abort.txt", std::string(e.what()) + '\n');
      } catch (const std::exception& io) {
        std::cerr << io.what() << '\n';
      }
      return kExitNan;
    } catch (const artifacts::ArtifactError& e) {
      std::cerr << "I/O failure: " << e.what() << '\n';
      return kExitIo;
    } catch (const data::IdxError& e) {
      std::cerr << e.what() << '\n';
      return kExitIo;
    } catch (const std::invalid_argument& e) {
      std::cerr << "invalid configuration: " << e.what() << '\n';
      return kExitUsage;
    } catch (const std::runtime_error& e) {
      std::cerr << e.what() << '\n';
      return kExitIo;
    }
  }
  try {
    artifacts::write_file(root / "summary.csv", summary.render());
  } catch (const artifacts::ArtifactError& e) {
    std::cerr << "I/O failure: " << e.what() << '\n';
    return kExitIo;
  }
  return 0;
}
