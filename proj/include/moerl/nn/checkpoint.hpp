#pragma once

#include <filesystem>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "moerl/nn/activation.hpp"

namespace moerl::nn {

/// Versioned magic at the start of every checkpoint / matrix file.
inline constexpr std::string_view kCheckpointMagic = "MOERL-CKPT-v1\n";

/// JSON header plus one or more flat float64 blocks.
///
/// Layout: magic, u64 header length, header JSON (UTF-8), u64 block count,
/// then per block a u64 length followed by little-endian doubles.
struct Checkpoint {
  nlohmann::json header;
  std::vector<Vector> blocks;
};

/// Writes atomically (temp file + rename).
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// A dense matrix stored as a one-block checkpoint with rows/cols in the header.
void save_matrix(const std::filesystem::path& path, const Matrix& m, nlohmann::json header = {});
Matrix load_matrix(const std::filesystem::path& path, nlohmann::json* header = nullptr);

/// Atomically replaces `path` with `contents`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

}  // namespace moerl::nn
