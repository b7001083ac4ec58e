#include "tdlm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace tdlm {

using ordered_json = nlohmann::ordered_json;

namespace {

constexpr char kMagic[4] = {'T', 'D', 'L', 'M'};

template <class U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <class U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

DType native_dtype() { return sizeof(Scalar) == 8 ? DType::F64 : DType::F32; }

}  // namespace

const char* dtype_name(DType d) {
  switch (d) {
    case DType::F64: return "f64";
    case DType::F32: return "f32";
    case DType::U4: return "u4";
    case DType::U8: return "u8";
  }
  return "?";
}

DType parse_dtype(const std::string& name) {
  if (name == "f64") return DType::F64;
  if (name == "f32") return DType::F32;
  if (name == "u4") return DType::U4;
  if (name == "u8") return DType::U8;
  throw IoError("unknown dtype '" + name + "'");
}

std::size_t payload_bytes(DType d, const Shape& shape) {
  const std::size_t n = shape_size(shape);
  switch (d) {
    case DType::F64: return n * 8;
    case DType::F32: return n * 4;
    case DType::U8: return n;
    case DType::U4: {
      if (shape.empty()) return 0;
      const std::size_t c = shape.back();
      return (n / c) * ((c + 1) / 2);
    }
  }
  return 0;
}

StoredTensor StoredTensor::from_tensor(std::string name, const Tensor& t, DType dtype) {
  StoredTensor s;
  s.name = std::move(name);
  s.dtype = dtype;
  s.shape = t.shape();
  s.payload.reserve(payload_bytes(dtype, t.shape()));
  if (dtype == DType::F64) {
    for (auto v : t.data()) put_le(s.payload, std::bit_cast<std::uint64_t>(static_cast<double>(v)));
  } else if (dtype == DType::F32) {
    for (auto v : t.data()) put_le(s.payload, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  } else {
    throw ContractError("StoredTensor::from_tensor: integer dtypes are built by the quantizer");
  }
  return s;
}

Tensor StoredTensor::to_tensor() const {
  Tensor t(shape);
  auto d = t.data();
  if (payload.size() != payload_bytes(dtype, shape))
    throw IoError("tensor " + name + ": payload size mismatch");
  if (dtype == DType::F64) {
    for (std::size_t i = 0; i < d.size(); ++i)
      d[i] = static_cast<Scalar>(std::bit_cast<double>(get_le<std::uint64_t>(payload.data() + 8 * i)));
  } else if (dtype == DType::F32) {
    for (std::size_t i = 0; i < d.size(); ++i)
      d[i] = static_cast<Scalar>(std::bit_cast<float>(get_le<std::uint32_t>(payload.data() + 4 * i)));
  } else {
    throw IoError("tensor " + name + " has integer dtype " + dtype_name(dtype) + "; dequantize it first");
  }
  return t;
}

const StoredTensor* CheckpointData::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

ordered_json config_to_json(const ModelConfig& c) {
  ordered_json j;
  j["vocab_size"] = c.vocab_size;
  j["n_layers"] = c.n_layers;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["max_seq_len"] = c.max_seq_len;
  j["mlp_hidden"] = c.mlp_hidden;
  return j;
}

ModelConfig config_from_json(const ordered_json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  ModelConfig c;
  std::pair<const char*, std::size_t*> fields[] = {
      {"vocab_size", &c.vocab_size}, {"n_layers", &c.n_layers},       {"d_model", &c.d_model},
      {"n_heads", &c.n_heads},       {"max_seq_len", &c.max_seq_len}, {"mlp_hidden", &c.mlp_hidden}};
  for (auto& [k, v] : j.items()) {
    bool known = false;
    for (auto& [name, dst] : fields) {
      if (k != name) continue;
      if (!v.is_number_unsigned()) throw ConfigError(std::string("model config: ") + name + " must be a positive integer");
      *dst = v.get<std::size_t>();
      known = true;
    }
    if (!known) throw ConfigError("model config: unknown key '" + k + "'");
  }
  c.validate();
  return c;
}

void write_checkpoint(const std::string& path, const CheckpointData& data) {
  ordered_json header;
  header["config"] = config_to_json(data.config);
  header["extra"] = data.extra;
  header["tensors"] = ordered_json::array();
  std::uint64_t offset = 0;
  for (const auto& t : data.tensors) {
    if (t.payload.size() != payload_bytes(t.dtype, t.shape))
      throw ContractError("write_checkpoint: payload of " + t.name + " does not match its shape");
    ordered_json e;
    e["name"] = t.name;
    e["dtype"] = dtype_name(t.dtype);
    e["shape"] = t.shape;
    e["offset"] = offset;
    e["length"] = t.payload.size();
    header["tensors"].push_back(std::move(e));
    offset += t.payload.size();
  }
  const std::string text = header.dump();
  std::vector<std::uint8_t> prefix(kMagic, kMagic + 4);
  put_le<std::uint32_t>(prefix, kCheckpointVersion);
  put_le<std::uint64_t>(prefix, text.size());

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out.write(reinterpret_cast<const char*>(prefix.data()), static_cast<std::streamsize>(prefix.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : data.tensors)
    out.write(reinterpret_cast<const char*>(t.payload.data()), static_cast<std::streamsize>(t.payload.size()));
  if (!out) throw IoError("write failed for " + path);
}

CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto need = [&](std::uint64_t expected, const char* what) {
    if (bytes.size() < expected)
      throw IoError(path + ": truncated checkpoint (" + what + "): expected at least " +
                    std::to_string(expected) + " bytes, got " + std::to_string(bytes.size()));
  };
  need(16, "preamble");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw IoError(path + ": not a TDLM checkpoint (bad magic)");
  const auto version = get_le<std::uint32_t>(bytes.data() + 4);
  if (version != kCheckpointVersion)
    throw IoError(path + ": unsupported checkpoint version " + std::to_string(version) + " (expected " +
                  std::to_string(kCheckpointVersion) + ")");
  const auto header_len = get_le<std::uint64_t>(bytes.data() + 8);
  need(16 + header_len, "header");
  ordered_json header;
  try {
    header = ordered_json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": corrupt header: " + e.what());
  }
  const std::uint64_t base = 16 + header_len;

  CheckpointData data;
  try {
    data.config = config_from_json(header.at("config"));
    if (header.contains("extra")) data.extra = header["extra"];
    std::uint64_t expected_offset = 0;
    for (const auto& e : header.at("tensors")) {
      StoredTensor t;
      t.name = e.at("name").get<std::string>();
      t.dtype = parse_dtype(e.at("dtype").get<std::string>());
      t.shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::uint64_t>();
      const auto length = e.at("length").get<std::uint64_t>();
      if (offset != expected_offset)
        throw IoError(path + ": tensor " + t.name + " offset " + std::to_string(offset) + ", expected " +
                      std::to_string(expected_offset));
      if (length != payload_bytes(t.dtype, t.shape))
        throw IoError(path + ": tensor " + t.name + " length " + std::to_string(length) +
                      " does not match shape " + shape_str(t.shape));
      need(base + offset + length, "payload");
      t.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(base + offset),
                       bytes.begin() + static_cast<std::ptrdiff_t>(base + offset + length));
      expected_offset = offset + length;
      data.tensors.push_back(std::move(t));
    }
    if (bytes.size() != base + expected_offset)
      throw IoError(path + ": expected " + std::to_string(base + expected_offset) + " bytes, got " +
                    std::to_string(bytes.size()));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": malformed header: " + e.what());
  }
  return data;
}

CheckpointData to_checkpoint(const TransformerParams& params) {
  CheckpointData data;
  data.config = params.config;
  params.visit([&](const std::string& name, const Tensor& t) {
    data.tensors.push_back(StoredTensor::from_tensor(name, t, native_dtype()));
  });
  return data;
}

TransformerParams params_from_checkpoint(const CheckpointData& data) {
  auto params = init_params(data.config, 0, {0, 0});
  params.visit([&](const std::string& name, Tensor& t) {
    const auto* s = data.find(name);
    if (!s) throw IoError("checkpoint is missing tensor " + name);
    if (s->shape != t.shape())
      throw IoError("tensor " + name + " has shape " + shape_str(s->shape) + ", expected " + shape_str(t.shape()));
    t = s->to_tensor();
  });
  return params;
}

void save_checkpoint(const TransformerParams& params, const std::string& path) {
  write_checkpoint(path, to_checkpoint(params));
}

TransformerParams load_checkpoint(const std::string& path) {
  return params_from_checkpoint(read_checkpoint(path));
}

}  // namespace tdlm
