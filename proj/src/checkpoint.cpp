#include "densflow/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace densflow {

namespace fs = std::filesystem;

const MatrixF& CheckpointData::array(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return a.data;
  throw Error("checkpoint has no array named '" + name + "'");
}

bool CheckpointData::has(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return true;
  return false;
}

namespace {

std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  else return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
}

void write_bytes_atomic(const fs::path& path, const char* bytes, std::size_t n) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(bytes, static_cast<std::streamsize>(n));
    if (!out) throw Error("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

}  // namespace

void write_file_atomic(const fs::path& path, const std::string& contents) {
  write_bytes_atomic(path, contents.data(), contents.size());
}

void save_checkpoint(const fs::path& manifest, const CheckpointData& data, const std::string& blob_name) {
  std::string blob;
  nlohmann::json arrays = nlohmann::json::array();
  for (const auto& a : data.arrays) {
    const std::size_t offset = blob.size();
    const std::size_t count = static_cast<std::size_t>(a.data.size());
    blob.resize(offset + 4 * count);
    // Column-major order, matching Eigen's default storage.
    for (std::size_t i = 0; i < count; ++i) {
      const std::uint32_t bits = to_little(std::bit_cast<std::uint32_t>(a.data.data()[i]));
      std::memcpy(blob.data() + offset + 4 * i, &bits, 4);
    }
    arrays.push_back({{"name", a.name},
                      {"shape", {a.data.rows(), a.data.cols()}},
                      {"dtype", "float32"},
                      {"order", "column_major"},
                      {"offset", offset},
                      {"nbytes", 4 * count}});
  }
  nlohmann::json m;
  m["format"] = "densflow-checkpoint";
  m["version"] = 1;
  m["byte_order"] = "little";
  m["blob"] = blob_name;
  m["blob_bytes"] = blob.size();
  m["arrays"] = std::move(arrays);
  m["metadata"] = data.metadata;

  const fs::path dir = manifest.has_parent_path() ? manifest.parent_path() : fs::path(".");
  if (!dir.empty()) fs::create_directories(dir);
  write_bytes_atomic(dir / blob_name, blob.data(), blob.size());
  write_file_atomic(manifest, m.dump(2) + "\n");
}

CheckpointData load_checkpoint(const fs::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw Error("cannot open checkpoint manifest " + manifest.string());
  nlohmann::json m;
  try {
    in >> m;
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed checkpoint manifest: " + std::string(e.what()));
  }
  if (m.value("format", "") != "densflow-checkpoint") throw Error("not a densflow checkpoint manifest");

  const fs::path dir = manifest.has_parent_path() ? manifest.parent_path() : fs::path(".");
  const fs::path blob_path = dir / m.at("blob").get<std::string>();
  std::ifstream bin(blob_path, std::ios::binary);
  if (!bin) throw Error("cannot open checkpoint blob " + blob_path.string());
  std::stringstream ss;
  ss << bin.rdbuf();
  const std::string blob = ss.str();
  if (blob.size() != m.at("blob_bytes").get<std::size_t>()) throw Error("checkpoint blob size mismatch");

  CheckpointData data;
  data.metadata = m.value("metadata", nlohmann::json::object());
  for (const auto& a : m.at("arrays")) {
    if (a.at("dtype") != "float32") throw Error("unsupported dtype in checkpoint");
    const auto rows = a.at("shape")[0].get<Eigen::Index>();
    const auto cols = a.at("shape")[1].get<Eigen::Index>();
    const auto offset = a.at("offset").get<std::size_t>();
    const std::size_t count = static_cast<std::size_t>(rows * cols);
    if (offset + 4 * count > blob.size()) throw Error("checkpoint array exceeds blob");
    MatrixF mat(rows, cols);
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, blob.data() + offset + 4 * i, 4);
      mat.data()[i] = std::bit_cast<float>(to_little(bits));
    }
    data.arrays.push_back({a.at("name").get<std::string>(), std::move(mat)});
  }
  return data;
}

void append_params(CheckpointData& data, const std::string& prefix, const ParamStore<float>& params) {
  const auto& specs = params.layout().specs();
  for (std::size_t i = 0; i < specs.size(); ++i) data.arrays.push_back({prefix + specs[i].name, params.block(i)});
}

ParamStore<float> extract_params(const CheckpointData& data, const std::string& prefix, const ParamLayout& layout) {
  ParamStore<float> p(layout);
  const auto& specs = layout.specs();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const MatrixF& a = data.array(prefix + specs[i].name);
    if (a.rows() != specs[i].rows || a.cols() != specs[i].cols)
      throw ShapeError("checkpoint array '" + prefix + specs[i].name + "' has the wrong shape");
    p.block(i) = a;
  }
  return p;
}

}  // namespace densflow
