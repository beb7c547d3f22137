#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "refine/model.hpp"

namespace refine {

// Binary layout, little-endian:
//   "RFNW" | u32 version | config | u32 tensor count |
//   per tensor: u32 name length, name bytes, u32 rank, u32 dims[rank], f32 data[]
// config = u32 vocab_size, d_model, n_layers, d_fast | f32 eta |
//          u32 update_mode, chunk_size, max_seq_len
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> serialize(const ModelParams& params);
ModelParams deserialize(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace refine
