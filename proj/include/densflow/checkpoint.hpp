#pragma once

// Checkpoint format: a JSON manifest listing every array (name, shape,
// dtype, byte offset) plus one little-endian float32 blob.

#include "densflow/model.hpp"

#include "json.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace densflow {

struct NamedArray {
  std::string name;
  MatrixF data;
};

struct CheckpointData {
  std::vector<NamedArray> arrays;
  nlohmann::json metadata = nlohmann::json::object();

  const MatrixF& array(const std::string& name) const;
  bool has(const std::string& name) const;
};

/// Writes `manifest` and the blob next to it (file name `blob_name`).
/// Both files are written to a temporary name and renamed into place.
void save_checkpoint(const std::filesystem::path& manifest, const CheckpointData& data,
                     const std::string& blob_name = "checkpoint.bin");
CheckpointData load_checkpoint(const std::filesystem::path& manifest);

void append_params(CheckpointData& data, const std::string& prefix, const ParamStore<float>& params);
ParamStore<float> extract_params(const CheckpointData& data, const std::string& prefix, const ParamLayout& layout);

/// Write-temp-then-rename text file.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace densflow
