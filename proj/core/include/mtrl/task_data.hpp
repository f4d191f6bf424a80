#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mtrl/random.hpp"
#include "mtrl/tensor.hpp"

namespace mtrl::data {

using Vector = std::vector<double>;

// Regression tasks y = w.x + Σ_{i=1..m} sin(α_i w.x + β_i) + ε with
// α_i = i, β_i = (i - 1)^2 and ε ~ N(0, noise_variance).
struct SyntheticConfig {
  std::size_t dim = 128;
  double scale = 1.0;
  std::size_t sine_terms = 6;
  double noise_variance = 0.01;
};

Vector default_alphas(std::size_t m);
Vector default_betas(std::size_t m);

// Gaussian draws orthonormalised by Gram-Schmidt; a second draw parallel to the
// first (within 1e-12) is redrawn.
std::pair<Vector, Vector> gen_orthonormal_pair(std::size_t dim, Rng& rng);
// Same, with u1 fixed by the caller (normalised); only u2 is drawn.
Vector gen_orthonormal_complement(const Vector& u1, Rng& rng);

// w1 = c u1, w2 = c (ρ u1 + sqrt(1 - ρ^2) u2).
std::pair<Vector, Vector> make_weights(const Vector& u1, const Vector& u2, double rho, double scale);

// Draws ε from rng only when noise_variance > 0.
double synth_label(std::span<const double> w, std::span<const double> x, std::span<const double> alpha,
                   std::span<const double> beta, double noise_variance, Rng& rng);

struct SyntheticTaskPair {
  SyntheticConfig config;
  double rho = 0.0;
  Vector u1, u2, w1, w2;

  static SyntheticTaskPair generate(const SyntheticConfig& config, double rho, Rng& rng);
};

enum class TaskKind { regression, classification };

struct Dataset {
  Tensor inputs;            // N x features... (row-major, batch axis first)
  Tensor targets;           // N x 1 for regression
  std::vector<int> labels;  // class indices for classification
  TaskKind kind = TaskKind::regression;

  std::size_t size() const { return inputs.defined() ? inputs.shape()[0] : 0; }
  Shape example_shape() const { return Shape(inputs.shape().begin() + 1, inputs.shape().end()); }

  // Gathers rows in `indices` order.
  Tensor batch_inputs(std::span<const std::size_t> indices) const;
  Tensor batch_targets(std::span<const std::size_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
};

struct Task {
  std::size_t id = 0;
  std::string name;
  Dataset train;
  Dataset eval;
  std::size_t output_dim = 1;
  std::size_t group = 0;  // latent cluster / relatedness group
};

struct TaskSet {
  std::vector<Task> tasks;

  std::size_t size() const { return tasks.size(); }
  void validate() const;
};

struct SyntheticSplit {
  std::size_t train_examples = 10000;
  std::size_t eval_examples = 1000;
  bool standardize = true;
};

// `groups` independent task groups of `tasks_per_group` tasks. The first task
// of a group uses w1, the others w2 at relatedness rho; tasks of one group see
// the same inputs with independent label noise. Distinct groups use
// independent (u1, u2) draws.
TaskSet build_synthetic_groups(std::size_t groups, std::size_t tasks_per_group, double rho,
                               const SyntheticConfig& config, const SyntheticSplit& split, Rng& rng);

TaskSet build_synthetic_pairs(std::size_t n_pairs, double rho_within, const SyntheticConfig& config,
                              const SyntheticSplit& split, Rng& rng);

// Writes header x_0..x_{d-1},y then one row per example.
void write_dataset_csv(const Dataset& dataset, const std::filesystem::path& path);

// --- IDX container ---------------------------------------------------------

class IdxError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

struct IdxFile {
  std::uint32_t magic = 0;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> payload;
};

IdxFile parse_idx(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> serialize_idx(const IdxFile& file);
IdxFile read_idx_file(const std::filesystem::path& path);

// N x H x W images scaled to [0, 1].
Tensor idx_images(const IdxFile& file);
std::vector<int> idx_labels(const IdxFile& file);

// out[r][c] = in[H - 1 - c][r]; input H x W, output W x H.
Tensor rotate90cw(const Tensor& image);

struct MnistFiles {
  std::string train_images = "train-images-idx3-ubyte";
  std::string train_labels = "train-labels-idx1-ubyte";
  std::string test_images = "t10k-images-idx3-ubyte";
  std::string test_labels = "t10k-labels-idx1-ubyte";
};

// Tasks 0, 1: MNIST; tasks 2, 3: MNIST rotated 90 degrees clockwise. All four
// share one seeded training subset of `subset_size` examples (0 = all) and the
// full test split; example order within a copy pair comes from the per-task
// batch streams.
TaskSet build_4mnists(const std::filesystem::path& data_dir, std::size_t subset_size, Rng& rng,
                      const MnistFiles& files = {});

}  // namespace mtrl::data
