#include "mtrl/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "mtrl/gradcheck.hpp"
#include "mtrl/metrics.hpp"

namespace mtrl::harness {

namespace {

using routing::RoutingMode;

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t n = logits.shape()[0];
  const std::size_t k = logits.shape()[1];
  auto d = logits.data();
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = d.subspan(i * k, k);
    out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

double accuracy_of(const Tensor& logits, std::span<const int> labels) {
  const std::vector<int> pred = argmax_rows(logits);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

nn::Targets gather_targets(const data::Dataset& ds, std::span<const std::size_t> idx) {
  nn::Targets t;
  if (ds.kind == data::TaskKind::classification) {
    t.labels = ds.batch_labels(idx);
  } else {
    t.values = ds.batch_targets(idx);
  }
  return t;
}

std::vector<Tensor> touched(const GradStore& grads, std::vector<Tensor> params) {
  std::erase_if(params, [&](const Tensor& p) { return !grads.contains(p); });
  return params;
}

modular::Component mlp(std::span<const std::size_t> widths, Rng& rng) {
  modular::Component c;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const bool last = i + 2 == widths.size();
    c.stages.emplace_back(nn::DenseLayer::create(widths[i], widths[i + 1],
                                                 last ? nn::Activation::none : nn::Activation::relu, rng));
  }
  return c;
}

}  // namespace

std::string_view to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::transfer_synthetic: return "transfer-synthetic";
    case ExperimentKind::gumbel_synthetic: return "gumbel-synthetic";
    case ExperimentKind::mnist4: return "mnist4";
    case ExperimentKind::clusters: return "clusters";
    case ExperimentKind::grad_check: return "grad-check";
  }
  return "unknown";
}

std::string_view to_string(Pattern pattern) {
  switch (pattern) {
    case Pattern::shared: return "shared";
    case Pattern::none: return "none";
    case Pattern::gumbel: return "gumbel";
  }
  return "unknown";
}

std::optional<ExperimentKind> parse_experiment(std::string_view name) {
  for (auto k : {ExperimentKind::transfer_synthetic, ExperimentKind::gumbel_synthetic, ExperimentKind::mnist4,
                 ExperimentKind::clusters, ExperimentKind::grad_check}) {
    if (to_string(k) == name) return k;
  }
  return std::nullopt;
}

std::optional<Pattern> parse_pattern(std::string_view name) {
  for (auto p : {Pattern::shared, Pattern::none, Pattern::gumbel}) {
    if (to_string(p) == name) return p;
  }
  return std::nullopt;
}

ExperimentConfig ExperimentConfig::defaults(ExperimentKind kind) {
  ExperimentConfig c;
  c.kind = kind;
  switch (kind) {
    case ExperimentKind::transfer_synthetic:
      c.pattern = Pattern::shared;
      c.steps_per_task = 3000;
      c.batch_size = 64;
      c.lr = 0.01;
      break;
    case ExperimentKind::gumbel_synthetic:
      c.pattern = Pattern::gumbel;
      c.rho = 1.0;
      c.steps_per_task = 3000;
      c.batch_size = 64;
      c.lr = 0.01;
      c.clip_norm = 1.0;
      c.p_init = 0.7;
      break;
    case ExperimentKind::mnist4:
      c.pattern = Pattern::gumbel;
      c.steps_per_task = 2500;
      c.batch_size = 16;
      c.lr = 1e-3;
      // Tuned on seeds 0-2; T x lr (0.004) learns the allocation too slowly here.
      c.alloc_lr = 0.01;
      c.budget.strength = 10.0;  // inert until a budget below 1 is set
      c.dropout = 0.5;
      c.eval_batch = 500;
      break;
    case ExperimentKind::clusters:
      c.pattern = Pattern::gumbel;
      c.rho = 1.0;
      c.steps_per_task = 3000;
      c.batch_size = 64;
      c.lr = 0.01;
      c.clip_norm = 1.0;
      c.budget = {0.5, 1.0};
      c.train_examples = 5000;
      break;
    case ExperimentKind::grad_check:
      break;
  }
  return c;
}

double ExperimentConfig::allocation_lr(std::size_t tasks) const {
  return alloc_lr.value_or(static_cast<double>(tasks) * lr);
}

std::string ExperimentConfig::label() const { return variant.empty() ? std::string(to_string(pattern)) : variant; }

std::string ExperimentConfig::describe(std::size_t tasks) const {
  std::ostringstream o;
  o << "experiment=" << to_string(kind) << '\n'
    << "variant=" << label() << '\n'
    << "pattern=" << to_string(pattern) << '\n'
    << "seed=" << seed << '\n'
    << "tasks=" << tasks << '\n'
    << "steps_per_task=" << steps_per_task << '\n'
    << "batch_size=" << batch_size << '\n'
    << "lr=" << fmt(lr) << '\n'
    << "alloc_lr=" << fmt(allocation_lr(tasks)) << '\n'
    << "alloc_lr_explicit=" << (alloc_lr ? "true" : "false") << '\n'
    << "weight_decay=" << fmt(weight_decay) << '\n'
    << "clip_norm=" << fmt(clip_norm) << '\n'
    << "p_init=" << fmt(p_init) << '\n'
    << "tau0=" << fmt(tau.tau0) << '\n'
    << "tau_decay=" << fmt(tau.decay) << '\n'
    << "tau_min=" << fmt(tau.tau_min) << '\n'
    << "budget=" << fmt(budget.budget) << '\n'
    << "lambda=" << fmt(budget.strength) << '\n'
    << "dropout=" << fmt(dropout) << '\n'
    << "rho=" << fmt(rho) << '\n'
    << "input_dim=" << input_dim << '\n'
    << "sine_terms=" << sine_terms << '\n'
    << "train_examples=" << train_examples << '\n'
    << "eval_examples=" << eval_examples << '\n'
    << "clusters=" << clusters << '\n'
    << "tasks_per_cluster=" << tasks_per_cluster << '\n'
    << "cluster_components=" << cluster_components << '\n'
    << "cluster_hidden=" << cluster_hidden << '\n'
    << "data_dir=" << data_dir << '\n'
    << "subset_size=" << subset_size << '\n'
    << "snapshot_every=" << snapshot_every << '\n'
    << "smoothing_window=" << smoothing_window << '\n'
    << "eval_batch=" << eval_batch << '\n';
  return o.str();
}

// --- batching ----------------------------------------------------------------

BatchSampler::BatchSampler(std::size_t examples, Rng rng) : examples_(examples), rng_(std::move(rng)) {
  if (examples_ == 0) throw std::invalid_argument("BatchSampler: empty dataset");
}

std::vector<std::size_t> BatchSampler::next(std::size_t batch) {
  std::vector<std::size_t> out;
  out.reserve(batch);
  while (out.size() < batch) {
    if (cursor_ == order_.size()) {
      order_ = rng_.permutation(examples_);
      cursor_ = 0;
    }
    out.push_back(order_[cursor_++]);
  }
  return out;
}

// --- training ----------------------------------------------------------------

Trainer::Trainer(modular::MultiTaskNetwork net, data::TaskSet tasks, nn::LossKind loss,
                 const ExperimentConfig& config)
    : net_(std::move(net)),
      tasks_(std::move(tasks)),
      loss_kind_(loss),
      config_(config),
      weight_opt_(nn::AdamConfig{.lr = config.lr, .weight_decay = config.weight_decay}),
      alloc_opt_(nn::AdamConfig{.lr = config.allocation_lr(tasks_.size())}),
      order_rng_(Rng::stream(config.seed, "order")),
      noise_rng_(Rng::stream(config.seed, "gumbel")),
      dropout_rng_(Rng::stream(config.seed, "dropout")) {
  tasks_.validate();
  if (net_.tasks != tasks_.size()) {
    throw std::invalid_argument("network built for " + std::to_string(net_.tasks) + " tasks, task set has " +
                                std::to_string(tasks_.size()));
  }
  if (config_.batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
  if (config_.snapshot_every == 0) throw std::invalid_argument("snapshot cadence must be >= 1");
  config_.budget.validate();
  net_.check_shapes(tasks_.tasks[0].train.example_shape());
  for (std::size_t t = 0; t < tasks_.size(); ++t) {
    samplers_.emplace_back(tasks_.tasks[t].train.size(),
                           Rng::stream(config.seed, "batch/" + std::to_string(t)));
  }
  log_.snapshot_every = config_.snapshot_every;
  snapshot();
}

void Trainer::snapshot() {
  AllocationSnapshot snap;
  snap.step = step_;
  for (const auto& layer : net_.layers) snap.layers.push_back(layer.allocation.probabilities());
  log_.snapshots.push_back(std::move(snap));
}

void Trainer::train_step(std::size_t task) {
  const data::Task& t = tasks_.tasks[task];
  const std::vector<std::size_t> idx = samplers_[task].next(config_.batch_size);
  const Tensor x = t.train.batch_inputs(idx);
  const nn::Targets targets = gather_targets(t.train, idx);
  const double tau = config_.tau.at(step_);

  Tape tape;
  modular::LossBreakdown lb;
  {
    Tape::Recording rec(tape);
    lb = modular::total_loss(net_, x, targets, loss_kind_, task, config_.budget, RoutingMode::train_sample, tau,
                             noise_rng_, dropout_rng_, true);
  }
  const double total = lb.total.item();
  const auto allocations = net_.allocations();
  if (!std::isfinite(total)) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << step_ << " (round " << round_ << ", task " << task << "): total=" << total
        << " task_loss=" << lb.task_loss << " penalty=" << lb.penalty
        << " e_c=" << routing::expected_active_fraction(allocations) << "\nallocation probabilities:";
    for (std::size_t l = 0; l < net_.layers.size(); ++l) {
      msg << "\n  layer " << l << ':';
      for (double p : net_.layers[l].allocation.probabilities()) msg << ' ' << p;
    }
    throw NanLossError(msg.str());
  }

  // A step whose loss never touched a trainable tensor (every gate off and no
  // penalty) leaves all parameters as they are.
  if (lb.total.requires_grad()) {
    GradStore grads = backward(lb.total, tape);
    std::vector<Tensor> weights = touched(grads, net_.weight_parameters());
    std::vector<Tensor> logits = touched(grads, net_.allocation_parameters());
    if (config_.clip_norm > 0.0) {
      std::vector<Tensor> all = weights;
      all.insert(all.end(), logits.begin(), logits.end());
      nn::clip_grad_norm(grads, all, config_.clip_norm);
    }
    if (!weights.empty()) weight_opt_.step(grads, weights);
    if (!logits.empty()) alloc_opt_.step(grads, logits);
  }

  StepRecord rec;
  rec.step = step_;
  rec.round = round_;
  rec.task = task;
  rec.loss = lb.task_loss;
  rec.accuracy = t.train.kind == data::TaskKind::classification
                     ? accuracy_of(lb.forward.prediction, targets.labels)
                     : std::numeric_limits<double>::quiet_NaN();
  ++step_;
  rec.e_c = routing::expected_active_fraction(net_.allocations());
  log_.steps.push_back(rec);
  if (step_ % config_.snapshot_every == 0) snapshot();
}

void Trainer::train_round() {
  const std::vector<std::size_t> order = order_rng_.permutation(tasks_.size());
  for (std::size_t task : order) train_step(task);
  ++round_;
}

void Trainer::train(std::size_t rounds) {
  for (std::size_t r = 0; r < rounds; ++r) train_round();
}

EvalResult Trainer::evaluate() const {
  EvalResult res;
  Rng unused_noise(0);
  Rng unused_dropout(0);
  const std::size_t chunk = std::max<std::size_t>(config_.eval_batch, 1);
  for (std::size_t task = 0; task < tasks_.size(); ++task) {
    const data::Dataset& ds = tasks_.tasks[task].eval;
    const std::size_t n = ds.size();
    double loss_sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t start = 0; start < n; start += chunk) {
      const std::size_t len = std::min(chunk, n - start);
      std::vector<std::size_t> idx(len);
      std::iota(idx.begin(), idx.end(), start);
      const Tensor x = ds.batch_inputs(idx);
      const nn::Targets targets = gather_targets(ds, idx);
      const auto fwd =
          net_.forward(x, task, RoutingMode::max_likelihood, 1.0, unused_noise, unused_dropout, false);
      loss_sum += nn::loss_fn(loss_kind_, fwd.prediction, targets).item() * static_cast<double>(len);
      if (ds.kind == data::TaskKind::classification) {
        const std::vector<int> pred = argmax_rows(fwd.prediction);
        for (std::size_t i = 0; i < len; ++i) hits += pred[i] == targets.labels[i];
      }
    }
    res.loss.push_back(loss_sum / static_cast<double>(n));
    res.accuracy.push_back(ds.kind == data::TaskKind::classification
                               ? static_cast<double>(hits) / static_cast<double>(n)
                               : std::numeric_limits<double>::quiet_NaN());
  }
  return res;
}

// --- patterns and networks -----------------------------------------------------

std::vector<std::vector<int>> shared_pattern(std::size_t tasks, std::size_t components) {
  return std::vector<std::vector<int>>(tasks, std::vector<int>(components, 1));
}

std::vector<std::vector<int>> disjoint_pattern(std::size_t tasks, std::size_t components) {
  if (components < tasks) {
    throw std::invalid_argument("disjoint pattern needs at least one component per task (" +
                                std::to_string(components) + " components, " + std::to_string(tasks) + " tasks)");
  }
  std::vector<std::vector<int>> p(tasks, std::vector<int>(components, 0));
  for (std::size_t c = 0; c < components; ++c) p[c % tasks][c] = 1;
  return p;
}

routing::AllocationLayer make_allocation(Pattern pattern, std::size_t tasks, std::size_t components,
                                         double p_init) {
  switch (pattern) {
    case Pattern::shared: return routing::AllocationLayer::frozen(shared_pattern(tasks, components));
    case Pattern::none: return routing::AllocationLayer::frozen(disjoint_pattern(tasks, components));
    case Pattern::gumbel: return routing::AllocationLayer::init(tasks, components, p_init);
  }
  throw std::invalid_argument("unknown pattern");
}

modular::MultiTaskNetwork build_transfer_network(const ExperimentConfig& config, std::size_t tasks, Rng& init) {
  const std::size_t d = config.input_dim;
  modular::MultiTaskNetwork net;
  net.tasks = tasks;
  modular::ModularLayer layer;
  // Two single-layer and two two-layer components, 4 ReLU outputs each.
  for (std::size_t j = 0; j < 4; ++j) {
    modular::Component c;
    c.stages.emplace_back(nn::DenseLayer::create(d, 4, nn::Activation::relu, init));
    if (j >= 2) c.stages.emplace_back(nn::DenseLayer::create(4, 4, nn::Activation::relu, init));
    layer.components.push_back(std::move(c));
  }
  layer.allocation = make_allocation(config.pattern, tasks, 4, config.p_init);
  net.layers.push_back(std::move(layer));
  for (std::size_t t = 0; t < tasks; ++t) {
    net.heads.push_back(nn::DenseLayer::create(4, 1, nn::Activation::none, init));
  }
  return net;
}

modular::MultiTaskNetwork build_gumbel_synthetic_network(const ExperimentConfig& config, std::size_t tasks,
                                                         Rng& init) {
  modular::MultiTaskNetwork net;
  net.tasks = tasks;
  modular::ModularLayer layer;
  const std::size_t widths[] = {config.input_dim, 16, 16, 1};
  for (std::size_t j = 0; j < 4; ++j) layer.components.push_back(mlp(widths, init));
  layer.allocation = make_allocation(config.pattern, tasks, 4, config.p_init);
  net.layers.push_back(std::move(layer));
  return net;
}

modular::MultiTaskNetwork build_mnist4_network(const ExperimentConfig& config, Rng& init) {
  constexpr std::size_t kTasks = 4;
  constexpr std::size_t kComponents = 4;
  constexpr std::size_t kFilters = 4;
  const std::size_t kernels[] = {5, 3, 3};
  modular::MultiTaskNetwork net;
  net.tasks = kTasks;
  std::size_t in_ch = 1;
  for (std::size_t l = 0; l < 3; ++l) {
    modular::ModularLayer layer;
    for (std::size_t j = 0; j < kComponents; ++j) {
      modular::Component c;
      c.stages.emplace_back(nn::Conv2dLayer::create(in_ch, kFilters, kernels[l], kernels[l],
                                                    Conv2dAttrs{1, Padding::valid}, nn::Activation::relu, init));
      layer.components.push_back(std::move(c));
    }
    if (l < 2) layer.post.stages.emplace_back(modular::AvgPool{2});
    layer.allocation = make_allocation(config.pattern, kTasks, kComponents, config.p_init);
    net.layers.push_back(std::move(layer));
    in_ch = kFilters;
  }
  // 28 -> 24 -> 12 -> 10 -> 5 -> 3: 4 x 3 x 3 features per example.
  for (std::size_t t = 0; t < kTasks; ++t) {
    net.heads.push_back(nn::DenseLayer::create(kFilters * 3 * 3, 10, nn::Activation::none, init));
  }
  net.dropout = nn::DropoutSpec{config.dropout, true};
  return net;
}

modular::MultiTaskNetwork build_cluster_network(const ExperimentConfig& config, std::size_t tasks, Rng& init) {
  modular::MultiTaskNetwork net;
  net.tasks = tasks;
  modular::ModularLayer layer;
  const std::size_t widths[] = {config.input_dim, config.cluster_hidden, config.cluster_hidden, 1};
  for (std::size_t j = 0; j < config.cluster_components; ++j) layer.components.push_back(mlp(widths, init));
  layer.allocation = make_allocation(config.pattern, tasks, config.cluster_components, config.p_init);
  net.layers.push_back(std::move(layer));
  return net;
}

// --- results -------------------------------------------------------------------

RunResult summarize(const Trainer& trainer, const ExperimentConfig& config) {
  RunResult r;
  r.config = config;
  r.tasks = trainer.tasks().size();
  for (const auto& t : trainer.tasks().tasks) r.task_groups.push_back(t.group);
  r.log = trainer.log();

  const std::size_t rounds = trainer.rounds();
  r.round_loss.assign(rounds, 0.0);
  for (const StepRecord& s : r.log.steps) r.round_loss[s.round] += s.loss;
  for (double& v : r.round_loss) v /= static_cast<double>(r.tasks);
  r.smoothed_loss = metrics::smooth(r.round_loss, config.smoothing_window);
  r.final_smoothed_loss = r.smoothed_loss.empty() ? std::numeric_limits<double>::quiet_NaN() : r.smoothed_loss.back();

  const EvalResult ev = trainer.evaluate();
  r.eval_loss = ev.loss;
  r.eval_accuracy = ev.accuracy;
  r.mean_eval_loss = metrics::mean(ev.loss);
  r.mean_eval_accuracy = metrics::mean(ev.accuracy);

  const auto layers = trainer.network().allocations();
  std::size_t ones = 0;
  std::size_t entries = 0;
  for (const auto& layer : layers) {
    LayerAllocation a;
    a.tasks = layer.tasks();
    a.components = layer.components();
    a.probabilities = layer.probabilities();
    for (std::size_t t = 0; t < a.tasks; ++t) {
      for (int z : routing::ml_allocation(layer, t)) {
        a.ml.push_back(z);
        ones += static_cast<std::size_t>(z);
        ++entries;
      }
    }
    r.allocations.push_back(std::move(a));
  }
  r.active_fraction = entries ? static_cast<double>(ones) / static_cast<double>(entries) : 0.0;
  r.expected_active_fraction = routing::expected_active_fraction(layers);

  for (std::size_t t = 0; t < r.tasks; ++t) r.embeddings.push_back(routing::task_embedding(layers, t));
  r.similarity.assign(r.tasks, std::vector<double>(r.tasks, 0.0));
  for (std::size_t i = 0; i < r.tasks; ++i) {
    // A task is fully similar to itself even when its embedding is all zeros.
    r.similarity[i][i] = 1.0;
    for (std::size_t j = i + 1; j < r.tasks; ++j) {
      const double s = routing::cosine_similarity(r.embeddings[i], r.embeddings[j]);
      r.similarity[i][j] = r.similarity[j][i] = s;
    }
  }
  return r;
}

namespace {

RunResult train_and_summarize(modular::MultiTaskNetwork net, data::TaskSet tasks, nn::LossKind loss,
                              const ExperimentConfig& config) {
  Trainer trainer(std::move(net), std::move(tasks), loss, config);
  trainer.train(config.steps_per_task);
  return summarize(trainer, config);
}

data::TaskSet synthetic_tasks(const ExperimentConfig& config, std::size_t groups, std::size_t per_group) {
  Rng rng = Rng::stream(config.seed, "data");
  data::SyntheticConfig sc;
  sc.dim = config.input_dim;
  sc.sine_terms = config.sine_terms;
  data::SyntheticSplit split;
  split.train_examples = config.train_examples;
  split.eval_examples = config.eval_examples;
  return data::build_synthetic_groups(groups, per_group, config.rho, sc, split, rng);
}

}  // namespace

RunResult run_transfer_synthetic(const ExperimentConfig& config) {
  if (config.rho < 0.0 || config.rho > 1.0) throw std::invalid_argument("rho must lie in [0, 1]");
  data::TaskSet tasks = synthetic_tasks(config, 1, 2);
  Rng init = Rng::stream(config.seed, "init");
  auto net = build_transfer_network(config, tasks.size(), init);
  return train_and_summarize(std::move(net), std::move(tasks), nn::LossKind::l2, config);
}

RunResult run_gumbel_synthetic(const ExperimentConfig& config) {
  data::TaskSet tasks = synthetic_tasks(config, 2, 2);
  Rng init = Rng::stream(config.seed, "init");
  auto net = build_gumbel_synthetic_network(config, tasks.size(), init);
  return train_and_summarize(std::move(net), std::move(tasks), nn::LossKind::l2, config);
}

RunResult run_mnist4(const ExperimentConfig& config) {
  Rng data_rng = Rng::stream(config.seed, "data");
  data::TaskSet tasks = data::build_4mnists(config.data_dir, config.subset_size, data_rng);
  Rng init = Rng::stream(config.seed, "init");
  auto net = build_mnist4_network(config, init);
  return train_and_summarize(std::move(net), std::move(tasks), nn::LossKind::softmax_cross_entropy, config);
}

RunResult run_clusters(const ExperimentConfig& config) {
  data::TaskSet tasks = synthetic_tasks(config, config.clusters, config.tasks_per_cluster);
  Rng init = Rng::stream(config.seed, "init");
  auto net = build_cluster_network(config, tasks.size(), init);
  return train_and_summarize(std::move(net), std::move(tasks), nn::LossKind::l2, config);
}

RunResult run_experiment(const ExperimentConfig& config) {
  switch (config.kind) {
    case ExperimentKind::transfer_synthetic: return run_transfer_synthetic(config);
    case ExperimentKind::gumbel_synthetic: return run_gumbel_synthetic(config);
    case ExperimentKind::mnist4: return run_mnist4(config);
    case ExperimentKind::clusters: return run_clusters(config);
    case ExperimentKind::grad_check: break;
  }
  throw std::invalid_argument("run_experiment: grad-check is not a training experiment");
}

double block_gap(const std::vector<std::vector<double>>& similarity, const std::vector<std::size_t>& groups) {
  double within = 0.0, cross = 0.0;
  std::size_t n_within = 0, n_cross = 0;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    for (std::size_t j = i + 1; j < groups.size(); ++j) {
      if (groups[i] == groups[j]) {
        within += similarity[i][j];
        ++n_within;
      } else {
        cross += similarity[i][j];
        ++n_cross;
      }
    }
  }
  if (n_within == 0 || n_cross == 0) throw std::invalid_argument("block_gap needs within- and cross-group pairs");
  return within / static_cast<double>(n_within) - cross / static_cast<double>(n_cross);
}

bool groups_separated(const std::vector<std::vector<int>>& embeddings, const std::vector<std::size_t>& groups) {
  for (std::size_t i = 0; i < groups.size(); ++i) {
    for (std::size_t j = i + 1; j < groups.size(); ++j) {
      const bool same = embeddings[i] == embeddings[j];
      if ((groups[i] == groups[j]) != same) return false;
    }
  }
  return true;
}

std::vector<std::uint64_t> parse_seed_range(std::string_view text) {
  auto parse = [&](std::string_view part) {
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
    if (part.empty() || ec != std::errc{} || ptr != part.data() + part.size()) {
      throw std::invalid_argument("malformed seed range '" + std::string(text) + "' (expected N or N..M)");
    }
    return v;
  };
  const auto dots = text.find("..");
  const std::uint64_t lo = parse(text.substr(0, dots));
  const std::uint64_t hi = dots == std::string_view::npos ? lo : parse(text.substr(dots + 2));
  if (hi < lo) throw std::invalid_argument("seed range '" + std::string(text) + "' is empty");
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = lo;; ++s) {
    seeds.push_back(s);
    if (s == hi) break;
  }
  return seeds;
}

// --- gradient check -------------------------------------------------------------

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo, double hi) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

// Values bounded away from zero so that ReLU kinks stay outside the stencil.
Tensor away_from_zero(Shape shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) {
    const double mag = rng.uniform(0.05, 1.0);
    x = rng.uniform() < 0.5 ? -mag : mag;
  }
  return Tensor(std::move(shape), std::move(v));
}

// Reduces an op output to a scalar with fixed random weights so every output
// coordinate contributes a distinct gradient.
Tensor project(const Tensor& y, const Tensor& w) { return sum(mul(y, w)); }

double check_operand(const std::function<Tensor(const Tensor&)>& op, const Tensor& x, Rng& rng, double eps) {
  const Tensor probe = op(x);
  const Tensor w = random_tensor(probe.shape(), rng, -1.0, 1.0);
  return gradient_check([&](const Tensor& v) { return project(op(v), w); }, x, eps);
}

std::size_t dim_in(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.index(hi - lo + 1); }

double check_op(OpKind kind, Rng& rng, double eps) {
  double worst = 0.0;
  auto track = [&](double e) { worst = std::max(worst, e); };
  const std::size_t m = dim_in(rng, 1, 4), k = dim_in(rng, 1, 5), n = dim_in(rng, 1, 4);
  switch (kind) {
    case OpKind::matmul: {
      const Tensor a = random_tensor({m, k}, rng, -1, 1), b = random_tensor({k, n}, rng, -1, 1);
      track(check_operand([&](const Tensor& v) { return matmul(v, b); }, a, rng, eps));
      track(check_operand([&](const Tensor& v) { return matmul(a, v); }, b, rng, eps));
      break;
    }
    case OpKind::add:
    case OpKind::sub:
    case OpKind::mul: {
      const Tensor a = random_tensor({m, k}, rng, -1, 1), b = random_tensor({m, k}, rng, -1, 1);
      track(check_operand([&](const Tensor& v) { return forward_op(kind, std::array{v, b}); }, a, rng, eps));
      track(check_operand([&](const Tensor& v) { return forward_op(kind, std::array{a, v}); }, b, rng, eps));
      break;
    }
    case OpKind::scalar_mul: {
      const Tensor a = random_tensor({m, k}, rng, -1, 1);
      const double f = rng.uniform(-2, 2);
      const Tensor s = Tensor::scalar(rng.uniform(-2, 2));
      track(check_operand([&](const Tensor& v) { return scalar_mul(v, f); }, a, rng, eps));
      track(check_operand([&](const Tensor& v) { return scalar_mul(v, s); }, a, rng, eps));
      track(check_operand([&](const Tensor& v) { return scalar_mul(a, v); }, s, rng, eps));
      break;
    }
    case OpKind::relu:
      track(check_operand([](const Tensor& v) { return relu(v); }, away_from_zero({m, k}, rng), rng, eps));
      break;
    case OpKind::softmax_lastdim:
      track(check_operand([](const Tensor& v) { return softmax_lastdim(v); }, random_tensor({m, k}, rng, -2, 2),
                          rng, eps));
      break;
    case OpKind::log_softmax_lastdim:
      track(check_operand([](const Tensor& v) { return log_softmax_lastdim(v); },
                          random_tensor({m, k}, rng, -2, 2), rng, eps));
      break;
    case OpKind::log:
      track(check_operand([](const Tensor& v) { return log(v); }, random_tensor({m, k}, rng, 0.5, 2.0), rng, eps));
      break;
    case OpKind::exp:
      track(check_operand([](const Tensor& v) { return exp(v); }, random_tensor({m, k}, rng, -1, 1), rng, eps));
      break;
    case OpKind::mean:
      track(check_operand([](const Tensor& v) { return mean(v); }, random_tensor({m, k}, rng, -1, 1), rng, eps));
      break;
    case OpKind::sum:
      track(check_operand([](const Tensor& v) { return sum(v); }, random_tensor({m, k}, rng, -1, 1), rng, eps));
      break;
    case OpKind::reshape:
      track(check_operand([&](const Tensor& v) { return reshape(v, {k, m}); }, random_tensor({m, k}, rng, -1, 1),
                          rng, eps));
      break;
    case OpKind::concat_lastdim: {
      const Tensor a = random_tensor({m, k}, rng, -1, 1), b = random_tensor({m, n}, rng, -1, 1);
      track(check_operand([&](const Tensor& v) { return concat_lastdim(std::array{v, b}); }, a, rng, eps));
      track(check_operand([&](const Tensor& v) { return concat_lastdim(std::array{a, v}); }, b, rng, eps));
      break;
    }
    case OpKind::conv2d: {
      const std::size_t batch = dim_in(rng, 1, 2), c = dim_in(rng, 1, 2), o = dim_in(rng, 1, 3);
      const std::size_t h = dim_in(rng, 3, 6), w = dim_in(rng, 3, 6), kh = dim_in(rng, 1, 3),
                        kw = dim_in(rng, 1, 3);
      const Conv2dAttrs attrs{dim_in(rng, 1, 2), rng.uniform() < 0.5 ? Padding::valid : Padding::same};
      const Tensor x = random_tensor({batch, c, h, w}, rng, -1, 1);
      const Tensor kern = random_tensor({o, c, kh, kw}, rng, -1, 1);
      const Tensor bias = random_tensor({o}, rng, -1, 1);
      track(check_operand([&](const Tensor& v) { return conv2d(v, kern, bias, attrs); }, x, rng, eps));
      track(check_operand([&](const Tensor& v) { return conv2d(x, v, bias, attrs); }, kern, rng, eps));
      track(check_operand([&](const Tensor& v) { return conv2d(x, kern, v, attrs); }, bias, rng, eps));
      break;
    }
    case OpKind::avgpool2d: {
      const std::size_t window = dim_in(rng, 1, 3);
      const Tensor x = random_tensor({dim_in(rng, 1, 2), dim_in(rng, 1, 2), dim_in(rng, 3, 7), dim_in(rng, 3, 7)},
                                     rng, -1, 1);
      track(check_operand([&](const Tensor& v) { return avgpool2d(v, window); }, x, rng, eps));
      break;
    }
    case OpKind::bias_add: {
      const Tensor x = random_tensor({m, k}, rng, -1, 1), b = random_tensor({k}, rng, -1, 1);
      track(check_operand([&](const Tensor& v) { return bias_add(v, b); }, x, rng, eps));
      track(check_operand([&](const Tensor& v) { return bias_add(x, v); }, b, rng, eps));
      break;
    }
    case OpKind::select_row: {
      const std::size_t row = rng.index(m);
      track(check_operand([&](const Tensor& v) { return select_row(v, row); }, random_tensor({m, k, n}, rng, -1, 1),
                          rng, eps));
      break;
    }
    case OpKind::pick_lastdim: {
      const std::size_t idx = rng.index(k);
      track(check_operand([&](const Tensor& v) { return pick_lastdim(v, idx); }, random_tensor({m, k}, rng, -1, 1),
                          rng, eps));
      break;
    }
    case OpKind::weighted_sum: {
      std::vector<Tensor> parts;
      for (std::size_t i = 0; i < n; ++i) parts.push_back(random_tensor({m, k}, rng, -1, 1));
      // Include exact zeros: skipped on the forward pass, still differentiated.
      std::vector<double> wv(n);
      for (double& v : wv) v = rng.uniform() < 0.3 ? 0.0 : rng.uniform(-1, 1);
      const Tensor weights({n}, wv);
      for (std::size_t p = 0; p < n; ++p) {
        track(check_operand(
            [&](const Tensor& v) {
              std::vector<Tensor> ps = parts;
              ps[p] = v;
              return weighted_sum(ps, weights);
            },
            parts[p], rng, eps));
      }
      track(check_operand([&](const Tensor& v) { return weighted_sum(parts, v); }, weights, rng, eps));
      break;
    }
    case OpKind::straight_through: {
      // Forward is the hard value, so finite differences see zero slope; the
      // soft path is checked against the relaxation it stands in for.
      const std::size_t c = dim_in(rng, 1, 6);
      const double tau = rng.uniform(0.3, 2.0);
      const Tensor v = random_tensor({c, 2}, rng, -2, 2);
      const Tensor w = random_tensor({c}, rng, -1, 1);
      Tape tape;
      Tensor tracked = v.detach();
      tracked.set_requires_grad(true);
      Tensor loss;
      {
        Tape::Recording rec(tape);
        loss = project(routing::straight_through_gates(tracked, tau).gates, w);
      }
      const GradStore grads = backward(loss, tape);
      const auto analytic = grads.view(tracked);
      auto relaxed = [&](std::span<const double> vals) {
        double total = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          const double a = vals[2 * j] / tau, b = vals[2 * j + 1] / tau;
          total += w[j] / (1.0 + std::exp(b - a));
        }
        return total;
      };
      std::vector<double> probe(v.data().begin(), v.data().end());
      for (std::size_t i = 0; i < probe.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + eps;
        const double up = relaxed(probe);
        probe[i] = orig - eps;
        const double down = relaxed(probe);
        probe[i] = orig;
        const double numeric = (up - down) / (2.0 * eps);
        track(std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
      }
      break;
    }
  }
  return worst;
}

}  // namespace

std::vector<GradCheckRecord> run_grad_check(std::uint64_t seed, std::size_t cases, double eps) {
  std::vector<GradCheckRecord> out;
  for (OpKind kind : all_op_kinds()) {
    Rng rng = Rng::stream(seed, std::string("grad-check/") + std::string(op_name(kind)));
    GradCheckRecord rec;
    rec.op = std::string(op_name(kind));
    rec.cases = cases;
    for (std::size_t i = 0; i < cases; ++i) rec.max_error = std::max(rec.max_error, check_op(kind, rng, eps));
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace mtrl::harness
