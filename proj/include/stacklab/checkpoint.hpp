#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "stacklab/tensor.hpp"

namespace stacklab {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Tensor container: a text manifest
///
///     stacklab-tensors 1
///     count <n>
///     <name> <rows> <cols> <offset>      (one line per tensor, offset in floats)
///     data
///
/// followed by a contiguous little-endian float32 blob. Reading back yields
/// bit-identical data.
void write_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_tensors(const std::filesystem::path& path);

/// Writes `contents` to a sibling temp file and renames it into place, so a
/// failed write never leaves a partial file at `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace stacklab
