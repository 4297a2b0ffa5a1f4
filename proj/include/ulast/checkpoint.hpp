#pragma once

// Binary parameter file:
//   "ULST" | u32 version | u32 count | count x { u16 name_len | name | u8 rank |
//   rank x u32 dim | f32 values }                          (little endian)
// Training step and config snapshot live in a JSON sidecar, <path>.json.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ulast/net.hpp"

namespace ulast {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointBlob {
  std::string name;
  Shape shape;
  std::vector<float> values;
  std::size_t offset = 0;  // byte position of the record
};

struct CheckpointMeta {
  std::uint64_t step = 0;
  std::string config_json;  // may be empty
};

std::vector<std::uint8_t> encode_checkpoint(const ParameterSet& params);
// Throws FormatError (with byte offset) on bad magic, version or truncation.
std::vector<CheckpointBlob> decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Model& model, const std::filesystem::path& path, const CheckpointMeta& meta = {});
// Overwrites every parameter of `model`. Unknown names, missing names and
// shape mismatches throw FormatError.
CheckpointMeta load_checkpoint(Model& model, const std::filesystem::path& path);

}  // namespace ulast
