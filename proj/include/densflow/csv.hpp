#pragma once

#include "densflow/types.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace densflow {

/// Numeric CSV with a header row. `values` holds one record per row.
struct CsvTable {
  std::vector<std::string> header;
  Matrix values;

  Eigen::Index column(const std::string& name) const;
};

CsvTable read_csv(const std::filesystem::path& path);
std::string format_csv(const CsvTable& table);
void write_csv(const std::filesystem::path& path, const CsvTable& table);

/// Header names prefix_0 .. prefix_{n-1}.
std::vector<std::string> indexed_names(const std::string& prefix, Eigen::Index n);

/// Shortest round-trip decimal representation.
std::string format_number(double v);

/// Samples (dim x n, one per column) written as rows `prefix_0..`.
void write_samples_csv(const std::filesystem::path& path, const std::string& prefix, const Matrix& samples);

}  // namespace densflow
