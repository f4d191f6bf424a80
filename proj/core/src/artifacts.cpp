#include "mtrl/artifacts.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <system_error>

#include "mtrl/metrics.hpp"

namespace mtrl::artifacts {

std::string format_number(double value) {
  if (std::isnan(value)) return "nan";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

std::string CsvTable::render() const {
  std::string out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out += ',';
      out += cells[i];
    }
    out += '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
  return out;
}

std::string render_pgm(std::size_t rows, std::size_t cols, std::span<const double> values) {
  if (values.size() != rows * cols) {
    throw std::invalid_argument("render_pgm: " + std::to_string(values.size()) + " values for a " +
                                std::to_string(rows) + "x" + std::to_string(cols) + " image");
  }
  std::string out = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
  for (double v : values) {
    const double c = std::isnan(v) ? 0.0 : std::clamp(v, 0.0, 1.0);
    out += static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0)));
  }
  return out;
}

void write_file(const std::filesystem::path& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArtifactError("cannot open " + path.string() + " for writing");
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  out.close();
  if (!out) throw ArtifactError("write failed for " + path.string());
}

namespace {

using harness::RunResult;

std::string num(double v) { return format_number(v); }
std::string num(std::size_t v) { return std::to_string(v); }

}  // namespace

CsvTable curves_table(const RunResult& result) {
  CsvTable t{{"step", "task", "raw", "smoothed", "e_c"}, {}};
  // Smoothing runs over each task's own loss sequence.
  std::vector<std::vector<double>> per_task(result.tasks);
  for (const auto& s : result.log.steps) per_task[s.task].push_back(s.loss);
  std::vector<std::vector<double>> smoothed(result.tasks);
  for (std::size_t k = 0; k < result.tasks; ++k) {
    smoothed[k] = metrics::smooth(per_task[k], result.config.smoothing_window);
  }
  std::vector<std::size_t> seen(result.tasks, 0);
  for (const auto& s : result.log.steps) {
    const double sm = smoothed[s.task][seen[s.task]++];
    t.rows.push_back({num(s.step), num(s.task), num(s.loss), num(sm), num(s.e_c)});
  }
  return t;
}

CsvTable allocations_table(const RunResult& result) {
  CsvTable t{{"layer", "task", "component", "probability", "ml_binary"}, {}};
  for (std::size_t l = 0; l < result.allocations.size(); ++l) {
    const auto& a = result.allocations[l];
    for (std::size_t task = 0; task < a.tasks; ++task) {
      for (std::size_t c = 0; c < a.components; ++c) {
        const std::size_t i = task * a.components + c;
        t.rows.push_back({num(l), num(task), num(c), num(a.probabilities[i]), std::to_string(a.ml[i])});
      }
    }
  }
  return t;
}

CsvTable embeddings_table(const RunResult& result) {
  CsvTable t{{"task", "embedding"}, {}};
  for (std::size_t k = 0; k < result.embeddings.size(); ++k) {
    std::string bits;
    for (int b : result.embeddings[k]) bits += b ? '1' : '0';
    t.rows.push_back({num(k), bits});
  }
  return t;
}

CsvTable similarity_table(const RunResult& result) {
  CsvTable t;
  for (std::size_t k = 0; k < result.tasks; ++k) t.header.push_back("task_" + std::to_string(k));
  for (const auto& row : result.similarity) {
    std::vector<std::string> cells;
    for (double v : row) cells.push_back(num(v));
    t.rows.push_back(std::move(cells));
  }
  return t;
}

CsvTable snapshots_table(const RunResult& result) {
  CsvTable t{{"step", "layer", "task", "component", "probability"}, {}};
  for (const auto& snap : result.log.snapshots) {
    for (std::size_t l = 0; l < snap.layers.size(); ++l) {
      const std::size_t comps = result.allocations[l].components;
      for (std::size_t i = 0; i < snap.layers[l].size(); ++i) {
        t.rows.push_back({num(snap.step), num(l), num(i / comps), num(i % comps), num(snap.layers[l][i])});
      }
    }
  }
  return t;
}

CsvTable eval_table(const RunResult& result) {
  CsvTable t{{"task", "group", "loss", "accuracy"}, {}};
  for (std::size_t k = 0; k < result.tasks; ++k) {
    t.rows.push_back({num(k), num(result.task_groups[k]), num(result.eval_loss[k]), num(result.eval_accuracy[k])});
  }
  return t;
}

void emit_artifacts(const RunResult& result, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ArtifactError("cannot create directory " + dir.string() + ": " + ec.message());

  write_file(dir / "curves.csv", curves_table(result).render());
  write_file(dir / "allocations.csv", allocations_table(result).render());
  write_file(dir / "embeddings.csv", embeddings_table(result).render());
  write_file(dir / "similarity.csv", similarity_table(result).render());
  write_file(dir / "snapshots.csv", snapshots_table(result).render());
  write_file(dir / "eval.csv", eval_table(result).render());

  std::string config = result.config.describe(result.tasks);
  config += "final_smoothed_loss=" + num(result.final_smoothed_loss) + '\n';
  config += "mean_eval_loss=" + num(result.mean_eval_loss) + '\n';
  config += "mean_eval_accuracy=" + num(result.mean_eval_accuracy) + '\n';
  config += "active_fraction=" + num(result.active_fraction) + '\n';
  config += "expected_active_fraction=" + num(result.expected_active_fraction) + '\n';
  write_file(dir / "run_config.txt", config);

  const std::size_t n = result.tasks;
  std::vector<double> sim;
  for (const auto& row : result.similarity) sim.insert(sim.end(), row.begin(), row.end());
  write_file(dir / "similarity.pgm", render_pgm(n, n, sim));

  if (!result.embeddings.empty()) {
    std::vector<double> emb;
    for (const auto& row : result.embeddings) emb.insert(emb.end(), row.begin(), row.end());
    write_file(dir / "embeddings.pgm", render_pgm(n, result.embeddings[0].size(), emb));
  }
  for (std::size_t l = 0; l < result.allocations.size(); ++l) {
    const auto& a = result.allocations[l];
    write_file(dir / ("allocation_layer" + std::to_string(l) + ".pgm"),
               render_pgm(a.tasks, a.components, a.probabilities));
  }
}

}  // namespace mtrl::artifacts
