#include "densflow/csv.hpp"

#include "densflow/checkpoint.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace densflow {

Eigen::Index CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return static_cast<Eigen::Index>(i);
  throw Error("CSV has no column '" + name + "'");
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    std::size_t b = 0;
    while (b < cell.size() && cell[b] == ' ') ++b;
    out.push_back(cell.substr(b));
  }
  return out;
}

}  // namespace

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open CSV file " + path.string());
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw Error("CSV file " + path.string() + " is empty");
  t.header = split_line(line);
  std::vector<double> flat;
  Eigen::Index n = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    const auto cells = split_line(line);
    if (cells.size() != t.header.size())
      throw Error("CSV row " + std::to_string(n + 2) + " of " + path.string() + " has the wrong number of fields");
    for (const auto& c : cells) {
      double v = 0.0;
      const auto res = std::from_chars(c.data(), c.data() + c.size(), v);
      if (res.ec != std::errc() || res.ptr != c.data() + c.size())
        throw Error("CSV field '" + c + "' in " + path.string() + " is not a number");
      flat.push_back(v);
    }
    ++n;
  }
  const auto k = static_cast<Eigen::Index>(t.header.size());
  t.values = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(flat.data(), n, k);
  return t;
}

std::string format_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string format_csv(const CsvTable& table) {
  std::string out;
  for (std::size_t i = 0; i < table.header.size(); ++i) {
    if (i) out += ',';
    out += table.header[i];
  }
  out += '\n';
  for (Eigen::Index r = 0; r < table.values.rows(); ++r) {
    for (Eigen::Index c = 0; c < table.values.cols(); ++c) {
      if (c) out += ',';
      out += format_number(table.values(r, c));
    }
    out += '\n';
  }
  return out;
}

void write_csv(const std::filesystem::path& path, const CsvTable& table) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_file_atomic(path, format_csv(table));
}

std::vector<std::string> indexed_names(const std::string& prefix, Eigen::Index n) {
  std::vector<std::string> out;
  for (Eigen::Index i = 0; i < n; ++i) out.push_back(prefix + "_" + std::to_string(i));
  return out;
}

void write_samples_csv(const std::filesystem::path& path, const std::string& prefix, const Matrix& samples) {
  write_csv(path, {indexed_names(prefix, samples.rows()), samples.transpose()});
}

}  // namespace densflow
