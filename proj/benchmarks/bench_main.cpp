#include <benchmark/benchmark.h>

#include "mtrl/harness.hpp"
#include "mtrl/nn.hpp"
#include "mtrl/tensor.hpp"

namespace {

using namespace mtrl;

Tensor random_tensor(Shape shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor(std::move(shape), std::move(v));
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor a = random_tensor({64, n}, rng), b = random_tensor({n, 16}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * 64 * static_cast<int64_t>(n) * 16);
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(128)->Arg(512);

// First 4-MNISTs layer shape: 16 x 1 x 28 x 28 through a 5x5, 4-filter kernel.
void BM_Conv2dForward(benchmark::State& state) {
  Rng rng(2);
  const Tensor x = random_tensor({16, 1, 28, 28}, rng);
  const Tensor k = random_tensor({4, 1, 5, 5}, rng), b = random_tensor({4}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, k, b, {}));
}
BENCHMARK(BM_Conv2dForward);

void BM_Conv2dBackward(benchmark::State& state) {
  Rng rng(3);
  Tensor x = random_tensor({16, 1, 28, 28}, rng);
  Tensor k = random_tensor({4, 1, 5, 5}, rng), b = random_tensor({4}, rng);
  k.set_requires_grad(true);
  b.set_requires_grad(true);
  for (auto _ : state) {
    Tape tape;
    Tensor loss;
    {
      Tape::Recording rec(tape);
      loss = sum(conv2d(x, k, b, {}));
    }
    benchmark::DoNotOptimize(backward(loss, tape));
  }
}
BENCHMARK(BM_Conv2dBackward);

void BM_MnistTrainRound(benchmark::State& state) {
  auto cfg = harness::ExperimentConfig::defaults(harness::ExperimentKind::mnist4);
  Rng init(4);
  auto net = harness::build_mnist4_network(cfg, init);
  // Random images stand in for MNIST so the benchmark needs no data files.
  data::TaskSet tasks;
  Rng rng(5);
  for (std::size_t t = 0; t < 4; ++t) {
    data::Task task;
    task.id = t;
    task.output_dim = 10;
    task.group = t / 2;
    task.train.kind = task.eval.kind = data::TaskKind::classification;
    task.train.inputs = random_tensor({256, 1, 28, 28}, rng);
    task.train.labels.resize(256);
    for (auto& l : task.train.labels) l = static_cast<int>(rng.index(10));
    task.eval = task.train;
    tasks.tasks.push_back(std::move(task));
  }
  harness::Trainer trainer(std::move(net), std::move(tasks), nn::LossKind::softmax_cross_entropy, cfg);
  for (auto _ : state) trainer.train_round();
}
BENCHMARK(BM_MnistTrainRound)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
