#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "prosona/backbone.hpp"

namespace prosona::ckpt {

/// Contents of checkpoint.json, the sidecar next to params.bin.
struct Metadata {
  static constexpr int kFormatVersion = 1;

  model::Architecture arch;
  int stage = 0;
  std::uint64_t seed = 0;
  std::string git_hash;
  std::string params_sha256;
  std::string checkpoint_id;  // first 16 hex chars of params_sha256
  std::string parent_id;      // stage-1 checkpoint a stage-2 run started from
  double val_ged = -1.0;
  int epoch = -1;
};

[[nodiscard]] std::string build_git_hash();

/// Writes <dir>/params.bin (little-endian float64) and <dir>/checkpoint.json.
Metadata save(const model::Model& m, const std::filesystem::path& dir, std::uint64_t seed, const std::string& parent_id = {},
              double val_ged = -1.0, int epoch = -1);

[[nodiscard]] Metadata read_metadata(const std::filesystem::path& dir);

/// Throws IoError for a missing directory, FormatError for a corrupt or mismatched blob.
[[nodiscard]] model::Model load(const std::filesystem::path& dir, Metadata* meta = nullptr);

[[nodiscard]] std::string params_sha256(const model::Model& m);

}  // namespace prosona::ckpt
