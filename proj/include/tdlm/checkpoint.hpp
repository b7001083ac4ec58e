#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "tdlm/model.hpp"

namespace tdlm {

// File layout (all integers little-endian):
//   "TDLM" | u32 version | u64 header length | JSON header | payloads
// The header is {"config": {...}, "extra": {...}, "tensors": [{name, dtype,
// shape, offset, length}, ...]}; offsets count from the first payload byte
// and follow manifest order without gaps.
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType { F64, F32, U4, U8 };
const char* dtype_name(DType d);
DType parse_dtype(const std::string& name);
// Payload size of a tensor. u4 packs two codes per byte within each row
// (low nibble first), so a row of c codes takes ceil(c / 2) bytes.
std::size_t payload_bytes(DType d, const Shape& shape);

struct StoredTensor {
  std::string name;
  DType dtype = DType::F64;
  Shape shape;
  std::vector<std::uint8_t> payload;

  static StoredTensor from_tensor(std::string name, const Tensor& t, DType dtype = DType::F64);
  // Only for f64 / f32 payloads.
  Tensor to_tensor() const;
};

struct CheckpointData {
  ModelConfig config;
  nlohmann::ordered_json extra = nlohmann::ordered_json::object();
  std::vector<StoredTensor> tensors;

  const StoredTensor* find(const std::string& name) const;
};

nlohmann::ordered_json config_to_json(const ModelConfig& c);
// Throws ConfigError on missing or unknown fields.
ModelConfig config_from_json(const nlohmann::ordered_json& j);

void write_checkpoint(const std::string& path, const CheckpointData& data);
// Throws IoError on bad magic, unsupported version, inconsistent manifest or
// truncation (naming expected and actual byte counts).
CheckpointData read_checkpoint(const std::string& path);

// Full-precision model checkpoints.
void save_checkpoint(const TransformerParams& params, const std::string& path);
TransformerParams load_checkpoint(const std::string& path);
CheckpointData to_checkpoint(const TransformerParams& params);
// Requires every parameter as f64/f32; see load_model for quantized files.
TransformerParams params_from_checkpoint(const CheckpointData& data);

}  // namespace tdlm
