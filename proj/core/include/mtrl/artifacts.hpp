#pragma once

// Run artifacts: CSV tables (LF line endings, '.' decimals, shortest
// round-trip number formatting) and binary 8-bit PGM heatmaps.

#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtrl/harness.hpp"

namespace mtrl::artifacts {

class ArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shortest representation that round-trips; "nan" for NaN.
std::string format_number(double value);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::string render() const;
};

// Values are clamped to [0, 1] and mapped to round(255 v).
std::string render_pgm(std::size_t rows, std::size_t cols, std::span<const double> values);

void write_file(const std::filesystem::path& path, const std::string& contents);

CsvTable curves_table(const harness::RunResult& result);
CsvTable allocations_table(const harness::RunResult& result);
CsvTable embeddings_table(const harness::RunResult& result);
CsvTable similarity_table(const harness::RunResult& result);
CsvTable snapshots_table(const harness::RunResult& result);
CsvTable eval_table(const harness::RunResult& result);

// Writes curves.csv, allocations.csv, embeddings.csv, similarity.csv,
// snapshots.csv, eval.csv, run_config.txt and the PGM heatmaps
// (similarity.pgm, embeddings.pgm, allocation_layer<l>.pgm) into `dir`,
// creating it if needed.
void emit_artifacts(const harness::RunResult& result, const std::filesystem::path& dir);

}  // namespace mtrl::artifacts
