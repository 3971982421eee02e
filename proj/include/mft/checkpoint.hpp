#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mft/tensor.hpp"

namespace mft {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

inline constexpr const char* kCheckpointHeader = "METAFT-CKPT v1";

/// Blob file that accompanies a manifest: "<manifest>.bin".
std::filesystem::path checkpoint_blob_path(const std::filesystem::path& manifest);

/// Writes a text manifest (header line, then "name f32 AxBxC offset" per
/// tensor) and a blob of little-endian float32 values in manifest order.
void save_checkpoint(const std::filesystem::path& manifest, std::span<const NamedTensor> tensors);

/// Reads both files back. Tensors come back as leaves without requires_grad.
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& manifest);

/// Finds a tensor by name; throws IoError naming the missing entry.
const Tensor& find_tensor(std::span<const NamedTensor> tensors, const std::string& name);

}  // namespace mft
