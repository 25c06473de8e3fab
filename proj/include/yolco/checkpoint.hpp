#pragma once

// Checkpoint archive layout (all integers little-endian):
//
//   u64 header_length
//   header_length bytes of UTF-8 JSON: {"format_version": 1, "model_config": {...}}
//   u64 tensor_count
//   per tensor:
//     u64 name_length, name bytes
//     u64 rank, rank x u64 extents
//     numel x f32 elements (IEEE-754)

#include <filesystem>
#include <string>

#include "json.hpp"
#include "yolco/optim.hpp"

namespace yolco {

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  nlohmann::json model_config;
  NamedParameters<float> tensors;

  /// Tensor by name; throws std::out_of_range when absent.
  const Tensor& at(const std::string& name) const;
};

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& model_config,
                     const NamedParameters<T>& tensors);

Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies checkpoint values into same-named parameters (shapes must match).
template <typename T>
void assign_parameters(const Checkpoint& checkpoint, NamedParameters<T>& params);

}  // namespace yolco
