#include "mtrl/task_data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>

namespace mtrl::data {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

void normalize(Vector& v) {
  const double n = std::sqrt(dot(v, v));
  for (double& x : v) x /= n;
}

Vector gaussian_vector(std::size_t dim, Rng& rng) {
  Vector v(dim);
  for (double& x : v) x = rng.normal();
  return v;
}

}  // namespace

Vector default_alphas(std::size_t m) {
  Vector a(m);
  for (std::size_t i = 0; i < m; ++i) a[i] = static_cast<double>(i + 1);
  return a;
}

Vector default_betas(std::size_t m) {
  Vector b(m);
  for (std::size_t i = 0; i < m; ++i) b[i] = static_cast<double>(i * i);
  return b;
}

Vector gen_orthonormal_complement(const Vector& u1_in, Rng& rng) {
  Vector u1 = u1_in;
  normalize(u1);
  for (;;) {
    Vector v = gaussian_vector(u1.size(), rng);
    const double vn = std::sqrt(dot(v, v));
    const double proj = dot(v, u1);
    // Parallel (or null) draw: the residual carries no usable direction.
    if (vn == 0.0 || std::abs(std::abs(proj) / vn - 1.0) < 1e-12) continue;
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= proj * u1[i];
    // Second Gram-Schmidt pass tightens orthogonality to rounding level.
    const double residual = dot(v, u1);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= residual * u1[i];
    normalize(v);
    return v;
  }
}

std::pair<Vector, Vector> gen_orthonormal_pair(std::size_t dim, Rng& rng) {
  if (dim < 2) throw std::invalid_argument("gen_orthonormal_pair: dimension must be >= 2");
  Vector u1;
  do {
    u1 = gaussian_vector(dim, rng);
  } while (dot(u1, u1) == 0.0);
  normalize(u1);
  Vector u2 = gen_orthonormal_complement(u1, rng);
  return {std::move(u1), std::move(u2)};
}

std::pair<Vector, Vector> make_weights(const Vector& u1, const Vector& u2, double rho, double scale) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw std::invalid_argument("relatedness must lie in [0, 1]");
  if (u1.size() != u2.size()) throw std::invalid_argument("make_weights: dimension mismatch");
  const double ortho = std::sqrt(1.0 - rho * rho);
  Vector w1(u1.size()), w2(u1.size());
  for (std::size_t i = 0; i < u1.size(); ++i) {
    w1[i] = scale * u1[i];
    w2[i] = scale * (rho * u1[i] + ortho * u2[i]);
  }
  return {std::move(w1), std::move(w2)};
}

double synth_label(std::span<const double> w, std::span<const double> x, std::span<const double> alpha,
                   std::span<const double> beta, double noise_variance, Rng& rng) {
  if (w.size() != x.size()) throw std::invalid_argument("synth_label: weight/input dimension mismatch");
  if (alpha.size() != beta.size()) throw std::invalid_argument("synth_label: alpha/beta length mismatch");
  const double wx = dot(w, x);
  double y = wx;
  for (std::size_t i = 0; i < alpha.size(); ++i) y += std::sin(alpha[i] * wx + beta[i]);
  if (noise_variance > 0.0) y += rng.normal(0.0, std::sqrt(noise_variance));
  return y;
}

SyntheticTaskPair SyntheticTaskPair::generate(const SyntheticConfig& config, double rho, Rng& rng) {
  SyntheticTaskPair pair;
  pair.config = config;
  pair.rho = rho;
  std::tie(pair.u1, pair.u2) = gen_orthonormal_pair(config.dim, rng);
  std::tie(pair.w1, pair.w2) = make_weights(pair.u1, pair.u2, rho, config.scale);
  return pair;
}

// --- datasets ----------------------------------------------------------------

Tensor Dataset::batch_inputs(std::span<const std::size_t> indices) const {
  const std::size_t row = inputs.numel() / size();
  std::vector<double> out(indices.size() * row);
  auto src = inputs.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(src.data() + indices[i] * row, row, out.data() + i * row);
  }
  Shape shape = inputs.shape();
  shape[0] = indices.size();
  return Tensor(std::move(shape), std::move(out));
}

Tensor Dataset::batch_targets(std::span<const std::size_t> indices) const {
  const std::size_t row = targets.numel() / targets.shape()[0];
  std::vector<double> out(indices.size() * row);
  auto src = targets.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(src.data() + indices[i] * row, row, out.data() + i * row);
  }
  Shape shape = targets.shape();
  shape[0] = indices.size();
  return Tensor(std::move(shape), std::move(out));
}

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) out[i] = labels[indices[i]];
  return out;
}

void TaskSet::validate() const {
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (tasks[i].id != i) throw std::invalid_argument("task ids must be contiguous from 0");
    const auto& t = tasks[i];
    for (const Dataset* d : {&t.train, &t.eval}) {
      const std::size_t n = d->size();
      const std::size_t m = d->kind == TaskKind::regression ? d->targets.shape()[0] : d->labels.size();
      if (n != m) {
        throw std::invalid_argument("task " + std::to_string(i) + ": " + std::to_string(n) +
                                    " inputs but " + std::to_string(m) + " targets");
      }
    }
  }
}

TaskSet build_synthetic_groups(std::size_t groups, std::size_t tasks_per_group, double rho,
                               const SyntheticConfig& config, const SyntheticSplit& split, Rng& rng) {
  if (groups == 0 || tasks_per_group == 0) throw std::invalid_argument("need at least one group and task");
  const Vector alpha = default_alphas(config.sine_terms);
  const Vector beta = default_betas(config.sine_terms);
  const std::size_t d = config.dim;

  TaskSet set;
  for (std::size_t g = 0; g < groups; ++g) {
    const SyntheticTaskPair pair = SyntheticTaskPair::generate(config, rho, rng);
    auto draw_inputs = [&](std::size_t n) {
      std::vector<double> x(n * d);
      for (double& v : x) v = rng.normal();
      return x;
    };
    const std::vector<double> x_train = draw_inputs(split.train_examples);
    const std::vector<double> x_eval = draw_inputs(split.eval_examples);
    // One tensor per split, shared by every task of the group.
    const Tensor train_inputs({split.train_examples, d}, x_train);
    const Tensor eval_inputs({split.eval_examples, d}, x_eval);

    for (std::size_t k = 0; k < tasks_per_group; ++k) {
      const Vector& w = k == 0 ? pair.w1 : pair.w2;
      auto labels_for = [&](const std::vector<double>& x, std::size_t n) {
        std::vector<double> y(n);
        for (std::size_t i = 0; i < n; ++i) {
          y[i] = synth_label(w, std::span<const double>(x).subspan(i * d, d), alpha, beta,
                             config.noise_variance, rng);
        }
        return y;
      };
      std::vector<double> y_train = labels_for(x_train, split.train_examples);
      std::vector<double> y_eval = labels_for(x_eval, split.eval_examples);
      if (split.standardize) {
        const double n = static_cast<double>(y_train.size());
        const double mu = std::accumulate(y_train.begin(), y_train.end(), 0.0) / n;
        double var = 0.0;
        for (double v : y_train) var += (v - mu) * (v - mu);
        const double sd = std::sqrt(var / n);
        const double inv = sd > 0.0 ? 1.0 / sd : 1.0;
        for (double& v : y_train) v = (v - mu) * inv;
        for (double& v : y_eval) v = (v - mu) * inv;
      }
      Task task;
      task.id = set.tasks.size();
      task.group = g;
      task.name = "synthetic_g" + std::to_string(g) + "_t" + std::to_string(k);
      task.output_dim = 1;
      task.train.kind = task.eval.kind = TaskKind::regression;
      task.train.inputs = train_inputs;
      task.train.targets = Tensor({split.train_examples, 1}, std::move(y_train));
      task.eval.inputs = eval_inputs;
      task.eval.targets = Tensor({split.eval_examples, 1}, std::move(y_eval));
      set.tasks.push_back(std::move(task));
    }
  }
  return set;
}

TaskSet build_synthetic_pairs(std::size_t n_pairs, double rho_within, const SyntheticConfig& config,
                              const SyntheticSplit& split, Rng& rng) {
  if (n_pairs == 0) throw std::invalid_argument("build_synthetic_pairs: need at least one pair");
  return build_synthetic_groups(n_pairs, 2, rho_within, config, split, rng);
}

void write_dataset_csv(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const std::size_t n = dataset.size();
  const std::size_t d = dataset.inputs.numel() / n;
  for (std::size_t j = 0; j < d; ++j) out << "x_" << j << ',';
  out << "y\n";
  char buf[64];
  auto put = [&](double v) {
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    out.write(buf, res.ptr - buf);
  };
  auto x = dataset.inputs.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      put(x[i * d + j]);
      out << ',';
    }
    if (dataset.kind == TaskKind::regression) {
      put(dataset.targets.data()[i]);
    } else {
      out << dataset.labels[i];
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

// --- IDX -------------------------------------------------------------------

namespace {

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

}  // namespace

IdxFile parse_idx(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) {
    throw IdxError("idx: truncated header at offset 0: need 4 bytes, have " + std::to_string(bytes.size()));
  }
  IdxFile file;
  file.magic = read_be32(bytes, 0);
  std::size_t rank = 0;
  if (file.magic == kIdxImagesMagic) {
    rank = 3;
  } else if (file.magic == kIdxLabelsMagic) {
    rank = 1;
  } else {
    std::ostringstream os;
    os << "idx: bad magic 0x" << std::hex << file.magic << " at offset 0 (expected 0x803 or 0x801)";
    throw IdxError(os.str());
  }
  const std::size_t header = 4 + 4 * rank;
  if (bytes.size() < header) {
    throw IdxError("idx: truncated header at offset " + std::to_string(bytes.size()) + ": need " +
                   std::to_string(header) + " bytes");
  }
  std::size_t expected = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    file.dims.push_back(read_be32(bytes, 4 + 4 * i));
    expected *= file.dims.back();
  }
  const std::size_t actual = bytes.size() - header;
  if (actual != expected) {
    throw IdxError("idx: payload at offset " + std::to_string(header) + " has " + std::to_string(actual) +
                   " bytes, expected " + std::to_string(expected));
  }
  file.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
  return file;
}

std::vector<std::uint8_t> serialize_idx(const IdxFile& file) {
  std::vector<std::uint8_t> out;
  out.reserve(4 + 4 * file.dims.size() + file.payload.size());
  put_be32(out, file.magic);
  for (std::uint32_t d : file.dims) put_be32(out, d);
  out.insert(out.end(), file.payload.begin(), file.payload.end());
  return out;
}

IdxFile read_idx_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError("idx: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse_idx(bytes);
  } catch (const IdxError& e) {
    throw IdxError(path.string() + ": " + e.what());
  }
}

Tensor idx_images(const IdxFile& file) {
  if (file.magic != kIdxImagesMagic) throw IdxError("idx: not an image file");
  std::vector<double> values(file.payload.size());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = file.payload[i] / 255.0;
  return Tensor({file.dims[0], file.dims[1], file.dims[2]}, std::move(values));
}

std::vector<int> idx_labels(const IdxFile& file) {
  if (file.magic != kIdxLabelsMagic) throw IdxError("idx: not a label file");
  return std::vector<int>(file.payload.begin(), file.payload.end());
}

Tensor rotate90cw(const Tensor& image) {
  if (image.dim() != 2) throw ShapeError("rotate90cw expects a 2-D image, got " + shape_str(image.shape()));
  const std::size_t h = image.shape()[0], w = image.shape()[1];
  auto in = image.data();
  std::vector<double> out(h * w);
  for (std::size_t r = 0; r < w; ++r) {
    for (std::size_t c = 0; c < h; ++c) out[r * h + c] = in[(h - 1 - c) * w + r];
  }
  return Tensor({w, h}, std::move(out));
}

namespace {

Dataset image_dataset(const Tensor& images, const std::vector<int>& labels,
                      std::span<const std::size_t> rows, bool rotate) {
  const std::size_t h = images.shape()[1], w = images.shape()[2];
  const std::size_t px = h * w;
  std::vector<double> values(rows.size() * px);
  auto src = images.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double* img = src.data() + rows[i] * px;
    double* dst = values.data() + i * px;
    if (rotate) {
      // Square images only (checked by the caller); output is w x h.
      for (std::size_t r = 0; r < w; ++r) {
        for (std::size_t c = 0; c < h; ++c) dst[r * h + c] = img[(h - 1 - c) * w + r];
      }
    } else {
      std::copy_n(img, px, dst);
    }
  }
  Dataset d;
  d.kind = TaskKind::classification;
  d.inputs = Tensor({rows.size(), 1, rotate ? w : h, rotate ? h : w}, std::move(values));
  d.labels.reserve(rows.size());
  for (std::size_t r : rows) d.labels.push_back(labels[r]);
  return d;
}

}  // namespace

TaskSet build_4mnists(const std::filesystem::path& data_dir, std::size_t subset_size, Rng& rng,
                      const MnistFiles& files) {
  const std::filesystem::path paths[] = {data_dir / files.train_images, data_dir / files.train_labels,
                                         data_dir / files.test_images, data_dir / files.test_labels};
  std::string missing;
  for (const auto& p : paths) {
    if (!std::filesystem::exists(p)) missing += "\n  " + p.string();
  }
  if (!missing.empty()) {
    throw std::runtime_error("MNIST IDX files not found; expected:" + missing +
                             "\n(run tools/fetch_mnist_subset.py or pass --data-dir)");
  }
  const Tensor train_images = idx_images(read_idx_file(paths[0]));
  const std::vector<int> train_labels = idx_labels(read_idx_file(paths[1]));
  const Tensor test_images = idx_images(read_idx_file(paths[2]));
  const std::vector<int> test_labels = idx_labels(read_idx_file(paths[3]));
  if (train_images.shape()[0] != train_labels.size() || test_images.shape()[0] != test_labels.size()) {
    throw IdxError("MNIST image and label counts differ");
  }
  if (train_images.shape()[1] != train_images.shape()[2]) throw IdxError("MNIST images must be square");

  const std::size_t available = train_labels.size();
  if (subset_size > available) {
    throw std::invalid_argument("subset size " + std::to_string(subset_size) + " exceeds the " +
                                std::to_string(available) + " available training images");
  }
  std::vector<std::size_t> train_rows = rng.permutation(available);
  if (subset_size > 0) train_rows.resize(subset_size);
  std::sort(train_rows.begin(), train_rows.end());
  std::vector<std::size_t> test_rows(test_labels.size());
  std::iota(test_rows.begin(), test_rows.end(), std::size_t{0});

  const Dataset mnist_train = image_dataset(train_images, train_labels, train_rows, false);
  const Dataset mnist_test = image_dataset(test_images, test_labels, test_rows, false);
  const Dataset rot_train = image_dataset(train_images, train_labels, train_rows, true);
  const Dataset rot_test = image_dataset(test_images, test_labels, test_rows, true);

  TaskSet set;
  const char* names[] = {"mnist_a", "mnist_b", "mnist_rot_a", "mnist_rot_b"};
  for (std::size_t i = 0; i < 4; ++i) {
    Task t;
    t.id = i;
    t.name = names[i];
    t.group = i / 2;
    t.output_dim = 10;
    t.train = i < 2 ? mnist_train : rot_train;
    t.eval = i < 2 ? mnist_test : rot_test;
    set.tasks.push_back(std::move(t));
  }
  return set;
}

}  // namespace mtrl::data
