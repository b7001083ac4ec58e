#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tdlm/checkpoint.hpp"
#include "tdlm/model.hpp"

namespace tdlm {

struct QuantConfig {
  int bits = 4;
  // Weights sharing one (scale, zero) pair along a row; 0 = whole row.
  std::size_t group_size = 64;
  // Hessian damping as a fraction of its mean diagonal.
  Scalar damping = Scalar(0.01);
  std::size_t calibration_samples = 32;
  bool symmetric = false;

  void validate() const;
  int q_max() const { return (1 << bits) - 1; }
};

struct ScaleZero {
  // Kept at f32 precision: the value in memory is the value stored on disk.
  Scalar scale;
  int zero;
};

// Min-max fit: s = (max - min) / q_max, z = clamp(round(-min / s)).
// Constant groups get s = 1e-8 and z = midpoint. Symmetric mode fixes z at
// the midpoint and sets s = max|w| / (midpoint - 1).
ScaleZero fit_scale_zero(std::span<const Scalar> group, int bits, bool symmetric = false);

struct QuantizedValue {
  int code;
  Scalar value;
};
// code = clamp(round(w / s) + z, 0, q_max), rounding half away from zero;
// value = s * (code - z).
QuantizedValue quantize_dequantize(Scalar w, Scalar s, int z, int bits);

// Two codes per byte within each row, low nibble = lower column index.
std::vector<std::uint8_t> pack_u4(std::span<const std::uint8_t> codes, std::size_t rows, std::size_t cols);
std::vector<std::uint8_t> unpack_u4(std::span<const std::uint8_t> packed, std::size_t rows, std::size_t cols);

// Quantized [rows x cols] matrix (rows = outputs, groups run along columns).
struct QuantizedLinear {
  std::size_t rows = 0, cols = 0;
  int bits = 4;
  std::size_t group_size = 0;       // effective, in (0, cols]
  std::vector<std::uint8_t> codes;  // packed u4 when bits <= 4, else one byte each
  std::vector<float> scales;        // rows x groups()
  std::vector<std::uint8_t> zeros;  // rows x groups(), one byte each in memory

  std::size_t groups() const { return (cols + group_size - 1) / group_size; }
  int code(std::size_t r, std::size_t c) const;
  Scalar scale(std::size_t r, std::size_t c) const { return scales[r * groups() + c / group_size]; }
  int zero(std::size_t r, std::size_t c) const { return zeros[r * groups() + c / group_size]; }
  Tensor dequantize() const;
  // Bytes on disk: codes + f32 scales + zero points (u4-packed when bits <= 4).
  std::size_t storage_bytes() const;
};

QuantizedLinear rtn_quantize_layer(const Tensor& w, const QuantConfig& cfg);

// ||W X - W~ X||_F^2 with W [r x c] and X [c x n].
Scalar reconstruction_error(const Tensor& w, const Tensor& w_hat, const Tensor& x);

struct QuantReportRow {
  std::string layer;
  Scalar error_gptq = 0, error_rtn = 0;
  int bits = 4;
  std::size_t bytes_before = 0;  // 32-bit storage of the same weights
  std::size_t bytes_after = 0;
};

struct GptqResult {
  QuantizedLinear layer;
  QuantReportRow report;
  Scalar damping_used = 0;
};

// Columns are processed in index order; after each column the rounding error
// is spread over the remaining columns through the upper Cholesky factor of
// H^-1, H = 2 X X^T + damping * mean(diag) * I. Each group's (s, z) is fit on
// the already-updated weights when its first column is reached. Damping is
// raised x10 (at most 3 times) if H is not positive definite.
GptqResult gptq_quantize_layer(const Tensor& w, const Tensor& x, const QuantConfig& cfg);

// y = dequantize(q) * x for x [cols x n], computed from the codes.
Tensor quantized_forward(const QuantizedLinear& q, const Tensor& x);

struct QuantReport {
  std::vector<QuantReportRow> rows;
  std::size_t total_bytes_before() const;
  std::size_t total_bytes_after() const;
  void write_csv(const std::string& path) const;
};

struct QuantizedModel {
  TransformerParams params;                     // dequantized weights, ready for forward
  std::map<std::string, QuantizedLinear> linear;  // keyed by parameter name, [out x in]
  QuantConfig config;
  QuantReport report;
};

// Quantizes every linear weight in canonical order. Inputs of each weight
// are captured by running the calibration sequences through the model with
// all earlier weights already quantized. Throws ContractError on an empty
// calibration set.
QuantizedModel quantize_model(const TransformerParams& params,
                              std::span<const TokenIds> calibration, const QuantConfig& cfg);

CheckpointData to_checkpoint(const QuantizedModel& model);
void save_quantized(const QuantizedModel& model, const std::string& path);
// Loads full-precision or quantized checkpoints; quantized weights are dequantized.
TransformerParams load_model(const std::string& path);
// Rebuilds the quantized layers of a quantized checkpoint.
std::map<std::string, QuantizedLinear> quantized_layers(const CheckpointData& data);

}  // namespace tdlm
