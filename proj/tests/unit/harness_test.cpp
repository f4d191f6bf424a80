#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mtrl/artifacts.hpp"
#include "mtrl/harness.hpp"
#include "mtrl/metrics.hpp"

using namespace mtrl;
using namespace mtrl::harness;

namespace {

// A few dozen steps on small synthetic data: fast enough for unit tests.
ExperimentConfig tiny(ExperimentKind kind, Pattern pattern) {
  ExperimentConfig cfg = ExperimentConfig::defaults(kind);
  cfg.pattern = pattern;
  cfg.seed = 17;
  cfg.input_dim = 8;
  cfg.train_examples = 96;
  cfg.eval_examples = 32;
  cfg.steps_per_task = 25;
  cfg.batch_size = 16;
  cfg.snapshot_every = 5;
  cfg.smoothing_window = 10;
  return cfg;
}

data::TaskSet tiny_tasks(const ExperimentConfig& cfg, std::size_t groups, std::size_t per_group) {
  Rng rng = Rng::stream(cfg.seed, "data");
  data::SyntheticConfig sc;
  sc.dim = cfg.input_dim;
  return data::build_synthetic_groups(groups, per_group, cfg.rho, sc, {cfg.train_examples, cfg.eval_examples, true},
                                      rng);
}

Trainer tiny_trainer(const ExperimentConfig& cfg) {
  data::TaskSet tasks = tiny_tasks(cfg, 2, 2);
  Rng init = Rng::stream(cfg.seed, "init");
  auto net = build_gumbel_synthetic_network(cfg, tasks.size(), init);
  return Trainer(std::move(net), std::move(tasks), nn::LossKind::l2, cfg);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag)
      : path_(std::filesystem::temp_directory_path() /
              ("mtrl_" + tag + "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name())) {
    std::filesystem::remove_all(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace

TEST(ConfigTest, ParsesNames) {
  EXPECT_EQ(parse_experiment("gumbel-synthetic"), ExperimentKind::gumbel_synthetic);
  EXPECT_EQ(parse_experiment("grad-check"), ExperimentKind::grad_check);
  EXPECT_FALSE(parse_experiment("mnist"));
  EXPECT_EQ(parse_pattern("none"), Pattern::none);
  EXPECT_FALSE(parse_pattern("all"));
  for (auto k : {ExperimentKind::transfer_synthetic, ExperimentKind::mnist4, ExperimentKind::clusters}) {
    EXPECT_EQ(parse_experiment(to_string(k)), k);
  }
}

TEST(ConfigTest, SeedRanges) {
  EXPECT_EQ(parse_seed_range("4"), (std::vector<std::uint64_t>{4}));
  EXPECT_EQ(parse_seed_range("2..5"), (std::vector<std::uint64_t>{2, 3, 4, 5}));
  EXPECT_THROW(parse_seed_range("5..2"), std::invalid_argument);
  EXPECT_THROW(parse_seed_range("a..b"), std::invalid_argument);
  EXPECT_THROW(parse_seed_range(""), std::invalid_argument);
}

TEST(ConfigTest, AllocationLrDefaultsToTasksTimesLr) {
  ExperimentConfig cfg = ExperimentConfig::defaults(ExperimentKind::gumbel_synthetic);
  cfg.lr = 0.01;
  EXPECT_DOUBLE_EQ(cfg.allocation_lr(4), 0.04);
  const std::string text = cfg.describe(4);
  EXPECT_NE(text.find("alloc_lr=0.04\n"), std::string::npos) << text;
  EXPECT_NE(text.find("seed=0\n"), std::string::npos);
  cfg.alloc_lr = 0.5;
  EXPECT_DOUBLE_EQ(cfg.allocation_lr(4), 0.5);
}

TEST(ConfigTest, PaperHyperparametersForSyntheticRouting) {
  const auto cfg = ExperimentConfig::defaults(ExperimentKind::gumbel_synthetic);
  EXPECT_EQ(cfg.batch_size, 64u);
  EXPECT_DOUBLE_EQ(cfg.lr, 0.01);
  EXPECT_DOUBLE_EQ(cfg.clip_norm, 1.0);
  EXPECT_EQ(cfg.steps_per_task, 3000u);
  const auto clusters = ExperimentConfig::defaults(ExperimentKind::clusters);
  EXPECT_DOUBLE_EQ(clusters.budget.budget, 0.5);
  EXPECT_DOUBLE_EQ(clusters.budget.strength, 1.0);
  EXPECT_DOUBLE_EQ(clusters.p_init, 0.5);
  const auto mnist = ExperimentConfig::defaults(ExperimentKind::mnist4);
  EXPECT_EQ(mnist.batch_size, 16u);
  EXPECT_DOUBLE_EQ(mnist.dropout, 0.5);
  EXPECT_DOUBLE_EQ(mnist.allocation_lr(4), 0.01);
  EXPECT_DOUBLE_EQ(mnist.budget.budget, 1.0);
  EXPECT_DOUBLE_EQ(mnist.budget.strength, 10.0);
}

TEST(PatternTest, SharedAndDisjoint) {
  EXPECT_EQ(shared_pattern(2, 3), (std::vector<std::vector<int>>{{1, 1, 1}, {1, 1, 1}}));
  EXPECT_EQ(disjoint_pattern(2, 4), (std::vector<std::vector<int>>{{1, 0, 1, 0}, {0, 1, 0, 1}}));
  EXPECT_FALSE(make_allocation(Pattern::none, 2, 4, 0.5).trainable());
  EXPECT_TRUE(make_allocation(Pattern::gumbel, 2, 4, 0.5).trainable());
}

TEST(BatchSamplerTest, CoversEveryExampleOncePerEpoch) {
  BatchSampler sampler(10, Rng(3));
  std::vector<std::size_t> seen = sampler.next(4);
  for (auto i : sampler.next(6)) seen.push_back(i);
  std::sort(seen.begin(), seen.end());
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(seen[i], i);
  EXPECT_EQ(sampler.next(25).size(), 25u);
}

TEST(TrainerTest, OneStepPerTaskPerRound) {
  Trainer trainer = tiny_trainer(tiny(ExperimentKind::gumbel_synthetic, Pattern::gumbel));
  trainer.train_round();
  EXPECT_EQ(trainer.steps(), 4u);
  std::vector<std::size_t> tasks;
  for (const auto& s : trainer.log().steps) tasks.push_back(s.task);
  std::sort(tasks.begin(), tasks.end());
  EXPECT_EQ(tasks, (std::vector<std::size_t>{0, 1, 2, 3}));
  trainer.train(2);
  EXPECT_EQ(trainer.steps(), 12u);
  EXPECT_EQ(trainer.rounds(), 3u);
  for (std::size_t i = 0; i < trainer.log().steps.size(); ++i) EXPECT_EQ(trainer.log().steps[i].step, i);
}

TEST(TrainerTest, UsesAllocationLrRule) {
  auto cfg = tiny(ExperimentKind::gumbel_synthetic, Pattern::gumbel);
  cfg.lr = 0.005;
  EXPECT_DOUBLE_EQ(tiny_trainer(cfg).allocation_lr(), 0.02);
}

TEST(TrainerTest, SnapshotsAtFixedCadenceMatchLoggedEc) {
  Trainer trainer = tiny_trainer(tiny(ExperimentKind::gumbel_synthetic, Pattern::gumbel));
  trainer.train(10);
  const auto& log = trainer.log();
  ASSERT_EQ(log.snapshots.size(), 1u + 40u / 5u);
  for (std::size_t k = 0; k < log.snapshots.size(); ++k) {
    const auto& snap = log.snapshots[k];
    EXPECT_EQ(snap.step, k * 5);
    if (snap.step == 0) continue;
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& layer : snap.layers) {
      for (double p : layer) total += p;
      count += layer.size();
    }
    // e_c is recorded after the update that completes the snapshot's step count.
    EXPECT_NEAR(log.steps[snap.step - 1].e_c, total / static_cast<double>(count), 1e-12);
  }
}

TEST(TrainerTest, FrozenPatternsKeepLogitsBitStable) {
  for (auto pattern : {Pattern::shared, Pattern::none}) {
    Trainer trainer = tiny_trainer(tiny(ExperimentKind::gumbel_synthetic, pattern));
    const auto before = trainer.network().layers[0].allocation.logits().data();
    const std::vector<double> copy(before.begin(), before.end());
    trainer.train(5);
    const auto after = trainer.network().layers[0].allocation.logits().data();
    EXPECT_TRUE(std::equal(copy.begin(), copy.end(), after.begin()));
  }
}

TEST(TrainerTest, PatternDoesNotPerturbTaskOrder) {
  Trainer shared = tiny_trainer(tiny(ExperimentKind::gumbel_synthetic, Pattern::shared));
  Trainer none = tiny_trainer(tiny(ExperimentKind::gumbel_synthetic, Pattern::none));
  Trainer gumbel = tiny_trainer(tiny(ExperimentKind::gumbel_synthetic, Pattern::gumbel));
  shared.train(6);
  none.train(6);
  gumbel.train(6);
  for (std::size_t i = 0; i < shared.log().steps.size(); ++i) {
    EXPECT_EQ(shared.log().steps[i].task, none.log().steps[i].task);
    EXPECT_EQ(shared.log().steps[i].task, gumbel.log().steps[i].task);
  }
}

TEST(TrainerTest, PatternDoesNotPerturbData) {
  const auto a = tiny_tasks(tiny(ExperimentKind::gumbel_synthetic, Pattern::shared), 2, 2);
  const auto b = tiny_tasks(tiny(ExperimentKind::gumbel_synthetic, Pattern::none), 2, 2);
  for (std::size_t t = 0; t < 4; ++t) {
    EXPECT_TRUE(std::ranges::equal(a.tasks[t].train.targets.data(), b.tasks[t].train.targets.data()));
  }
}

TEST(TrainerTest, SameSeedGivesIdenticalLog) {
  Trainer a = tiny_trainer(tiny(ExperimentKind::gumbel_synthetic, Pattern::gumbel));
  Trainer b = tiny_trainer(tiny(ExperimentKind::gumbel_synthetic, Pattern::gumbel));
  a.train(8);
  b.train(8);
  ASSERT_EQ(a.log().steps.size(), b.log().steps.size());
  for (std::size_t i = 0; i < a.log().steps.size(); ++i) {
    EXPECT_EQ(a.log().steps[i].loss, b.log().steps[i].loss);
    EXPECT_EQ(a.log().steps[i].e_c, b.log().steps[i].e_c);
  }
}

TEST(TrainerTest, NonFiniteLossAbortsWithDiagnostic) {
  auto cfg = tiny(ExperimentKind::gumbel_synthetic, Pattern::gumbel);
  data::TaskSet tasks = tiny_tasks(cfg, 2, 2);
  for (double& y : tasks.tasks[2].train.targets.mutable_data()) y = std::nan("");
  Rng init = Rng::stream(cfg.seed, "init");
  auto net = build_gumbel_synthetic_network(cfg, tasks.size(), init);
  Trainer trainer(std::move(net), std::move(tasks), nn::LossKind::l2, cfg);
  try {
    trainer.train(1);
    FAIL() << "expected NanLossError";
  } catch (const NanLossError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("task 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("allocation probabilities"), std::string::npos) << msg;
  }
}

TEST(TrainerTest, RejectsMismatchedNetwork) {
  auto cfg = tiny(ExperimentKind::gumbel_synthetic, Pattern::gumbel);
  data::TaskSet tasks = tiny_tasks(cfg, 1, 2);
  Rng init(0);
  auto net = build_gumbel_synthetic_network(cfg, 4, init);
  EXPECT_THROW(Trainer(std::move(net), std::move(tasks), nn::LossKind::l2, cfg), std::invalid_argument);
}

TEST(TrainerTest, TrainingReducesTrainingLoss) {
  auto cfg = tiny(ExperimentKind::gumbel_synthetic, Pattern::shared);
  Trainer trainer = tiny_trainer(cfg);
  trainer.train(60);
  const RunResult r = summarize(trainer, cfg);
  EXPECT_LT(r.final_smoothed_loss, r.round_loss.front());
}

TEST(SummaryTest, SimilarityIsSymmetricWithUnitDiagonal) {
  auto cfg = tiny(ExperimentKind::clusters, Pattern::gumbel);
  cfg.clusters = 2;
  cfg.tasks_per_cluster = 2;
  const RunResult r = run_clusters(cfg);
  ASSERT_EQ(r.similarity.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(r.similarity[i][i], 1.0);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(r.similarity[i][j], r.similarity[j][i]);
  }
  EXPECT_EQ(r.round_loss.size(), cfg.steps_per_task);
  EXPECT_EQ(r.final_smoothed_loss, r.smoothed_loss.back());
}

TEST(SummaryTest, ActiveFractionsForFixedPatterns) {
  const RunResult shared = run_gumbel_synthetic(tiny(ExperimentKind::gumbel_synthetic, Pattern::shared));
  EXPECT_EQ(shared.active_fraction, 1.0);
  const RunResult none = run_gumbel_synthetic(tiny(ExperimentKind::gumbel_synthetic, Pattern::none));
  EXPECT_EQ(none.active_fraction, 0.25);
}

TEST(BlockGapTest, PerfectBlocksAndNoStructure) {
  const std::vector<std::size_t> groups{0, 0, 1, 1};
  const std::vector<std::vector<double>> blocks{{1, 1, 0, 0}, {1, 1, 0, 0}, {0, 0, 1, 1}, {0, 0, 1, 1}};
  EXPECT_DOUBLE_EQ(block_gap(blocks, groups), 1.0);
  const std::vector<std::vector<double>> flat(4, std::vector<double>(4, 1.0));
  EXPECT_DOUBLE_EQ(block_gap(flat, groups), 0.0);
  EXPECT_THROW(block_gap(flat, {0, 0, 0, 0}), std::invalid_argument);
}

TEST(BlockGapTest, GroupsSeparated) {
  const std::vector<std::size_t> groups{0, 0, 1, 1};
  EXPECT_TRUE(groups_separated({{1, 0}, {1, 0}, {0, 1}, {0, 1}}, groups));
  EXPECT_FALSE(groups_separated({{1, 0}, {1, 0}, {1, 0}, {1, 0}}, groups));
  EXPECT_FALSE(groups_separated({{1, 0}, {1, 1}, {0, 1}, {0, 1}}, groups));
}

TEST(GradCheckTest, EveryOpPasses) {
  const auto records = run_grad_check(0, 5);
  EXPECT_EQ(records.size(), all_op_kinds().size());
  for (const auto& r : records) EXPECT_LT(r.max_error, 1e-4) << r.op;
}

TEST(SmoothTest, Examples) {
  const std::vector<double> constant(50, 3.25);
  EXPECT_EQ(metrics::smooth(constant, 10), constant);
  const std::vector<double> curve{1, 5, 2, 8};
  EXPECT_EQ(metrics::smooth(curve, 1), curve);
  const std::vector<double> step{0, 0, 0, 1, 1};
  EXPECT_EQ(metrics::smooth(step, 2)[3], 0.5);
  EXPECT_EQ(metrics::smooth(curve, 3), (std::vector<double>{1, 3, 8.0 / 3.0, 5}));
  EXPECT_THROW(metrics::smooth(curve, 0), std::invalid_argument);
}

TEST(BandTest, ConstantRunsOneToTen) {
  std::vector<std::vector<double>> runs;
  for (int k = 1; k <= 10; ++k) runs.push_back({static_cast<double>(k), static_cast<double>(k)});
  const auto band = metrics::confidence_band(runs, 0.90);
  EXPECT_NEAR(band.lower[0], 1.45, 1e-12);
  EXPECT_NEAR(band.upper[1], 9.55, 1e-12);
}

TEST(BandTest, IdenticalRunsHaveZeroWidthAndContainMedian) {
  const std::vector<std::vector<double>> same(5, std::vector<double>{0.1, 0.7, 0.3});
  const auto band = metrics::confidence_band(same);
  EXPECT_EQ(band.lower, band.upper);
  Rng rng(4);
  std::vector<std::vector<double>> runs(9, std::vector<double>(6));
  for (auto& r : runs) {
    for (double& v : r) v = rng.normal();
  }
  const auto b = metrics::confidence_band(runs);
  for (std::size_t t = 0; t < 6; ++t) {
    std::vector<double> column;
    for (const auto& r : runs) column.push_back(r[t]);
    const double median = metrics::percentile(column, 0.5);
    EXPECT_LE(b.lower[t], median);
    EXPECT_GE(b.upper[t], median);
  }
  EXPECT_THROW(metrics::confidence_band(std::vector<std::vector<double>>{{1.0}}), std::invalid_argument);
}

TEST(RankTestTest, MatchesReferenceWithTies) {
  const std::vector<double> a{1, 2, 2, 5, 7}, b{3, 4, 6, 8, 9, 10, 2};
  const auto r = metrics::mann_whitney_u(a, b);
  EXPECT_DOUBLE_EQ(r.u, 8.0);
  EXPECT_NEAR(r.p_value, 0.14104093504681206, 1e-12);
}

TEST(RankTestTest, IdenticalSamplesAreIndistinguishable) {
  const std::vector<double> a{1, 2, 3, 4}, b{1, 2, 3, 4};
  EXPECT_NEAR(metrics::mann_whitney_u(a, b).p_value, 1.0, 1e-12);
}

TEST(ArtifactsTest, NumberFormatting) {
  EXPECT_EQ(artifacts::format_number(0.1), "0.1");
  EXPECT_EQ(artifacts::format_number(1.0), "1");
  EXPECT_EQ(artifacts::format_number(std::nan("")), "nan");
}

TEST(ArtifactsTest, PgmHeaderAndScaling) {
  const std::vector<double> v{0.0, 1.0, 0.5, 2.0, -1.0, 0.2};
  const std::string pgm = artifacts::render_pgm(2, 3, v);
  const std::string header = "P5\n3 2\n255\n";
  ASSERT_EQ(pgm.substr(0, header.size()), header);
  const std::string body = pgm.substr(header.size());
  ASSERT_EQ(body.size(), 6u);
  EXPECT_EQ(static_cast<unsigned char>(body[0]), 0);
  EXPECT_EQ(static_cast<unsigned char>(body[1]), 255);
  EXPECT_EQ(static_cast<unsigned char>(body[2]), 128);
  EXPECT_EQ(static_cast<unsigned char>(body[3]), 255);
  EXPECT_EQ(static_cast<unsigned char>(body[4]), 0);
  EXPECT_EQ(static_cast<unsigned char>(body[5]), 51);
  EXPECT_THROW(artifacts::render_pgm(2, 2, v), std::invalid_argument);
}

TEST(ArtifactsTest, SimilarityCsvShape) {
  RunResult r;
  r.tasks = 3;
  r.similarity = {{1, 0.5, 0}, {0.5, 1, 0.25}, {0, 0.25, 1}};
  const std::string csv = artifacts::similarity_table(r).render();
  EXPECT_EQ(csv, "task_0,task_1,task_2\n1,0.5,0\n0.5,1,0.25\n0,0.25,1\n");
}

TEST(ArtifactsTest, WritesEveryFileAndReproducesBytes) {
  const auto cfg = tiny(ExperimentKind::gumbel_synthetic, Pattern::gumbel);
  TempDir first("a"), second("b");
  artifacts::emit_artifacts(run_experiment(cfg), first.path());
  artifacts::emit_artifacts(run_experiment(cfg), second.path());
  const char* files[] = {"curves.csv",    "allocations.csv", "embeddings.csv", "similarity.csv",
                         "snapshots.csv", "eval.csv",        "run_config.txt", "similarity.pgm",
                         "embeddings.pgm", "allocation_layer0.pgm"};
  for (const char* f : files) {
    ASSERT_TRUE(std::filesystem::exists(first.path() / f)) << f;
    EXPECT_EQ(slurp(first.path() / f), slurp(second.path() / f)) << f;
  }
  const std::string curves = slurp(first.path() / "curves.csv");
  EXPECT_EQ(curves.substr(0, curves.find('\n')), "step,task,raw,smoothed,e_c");
  EXPECT_EQ(curves.find('\r'), std::string::npos);
  const std::string config = slurp(first.path() / "run_config.txt");
  EXPECT_NE(config.find("seed=17\n"), std::string::npos);
  EXPECT_NE(config.find("alloc_lr=0.04\n"), std::string::npos);
  const std::string pgm = slurp(first.path() / "similarity.pgm");
  EXPECT_EQ(pgm.substr(0, 11), "P5\n4 4\n255\n");
}

TEST(ArtifactsTest, UnwritableDirectoryNamesPath) {
  TempDir dir("blocked");
  std::filesystem::create_directories(dir.path().parent_path());
  artifacts::write_file(dir.path(), "x");  // a file where the directory should go
  RunResult r;
  r.tasks = 1;
  r.similarity = {{1.0}};
  try {
    artifacts::emit_artifacts(r, dir.path() / "run");
    FAIL() << "expected ArtifactError";
  } catch (const artifacts::ArtifactError& e) {
    EXPECT_NE(std::string(e.what()).find(dir.path().string()), std::string::npos) << e.what();
  }
}
