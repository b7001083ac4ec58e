#include "tdlm/quant.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <cmath>
#include <fstream>
#include <iomanip>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

namespace tdlm {

namespace {

using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Mat to_mat(const Tensor& t) {
  Mat m(t.rows(), t.cols());
  std::copy(t.data().begin(), t.data().end(), m.data());
  return m;
}

Tensor transposed(const Tensor& t) {
  Tensor out({t.cols(), t.rows()});
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) out.at(j, i) = t.at(i, j);
  return out;
}

std::size_t effective_group(std::size_t group_size, std::size_t cols) {
  return group_size == 0 || group_size > cols ? cols : group_size;
}

QuantizedLinear empty_layer(std::size_t rows, std::size_t cols, const QuantConfig& cfg) {
  QuantizedLinear q;
  q.rows = rows;
  q.cols = cols;
  q.bits = cfg.bits;
  q.group_size = effective_group(cfg.group_size, cols);
  q.scales.assign(rows * q.groups(), 0.0f);
  q.zeros.assign(rows * q.groups(), 0);
  return q;
}

void set_codes(QuantizedLinear& q, const std::vector<std::uint8_t>& codes) {
  q.codes = q.bits <= 4 ? pack_u4(codes, q.rows, q.cols) : codes;
}

}  // namespace

void QuantConfig::validate() const {
  if (bits < 2 || bits > 8) throw ConfigError("quant bits must be in [2, 8]");
  if (!(damping > 0)) throw ConfigError("quant damping must be > 0");
  if (calibration_samples == 0) throw ConfigError("calibration_samples must be >= 1");
}

ScaleZero fit_scale_zero(std::span<const Scalar> group, int bits, bool symmetric) {
  if (group.empty()) throw ContractError("fit_scale_zero: empty group");
  const int q_max = (1 << bits) - 1;
  const int mid = static_cast<int>(std::round(q_max / 2.0));
  const auto [lo, hi] = std::minmax_element(group.begin(), group.end());
  if (symmetric) {
    Scalar a = std::max(std::abs(*lo), std::abs(*hi));
    if (a == 0) return {Scalar(1e-8), mid};
    return {static_cast<Scalar>(static_cast<float>(a / (mid - 1 > 0 ? mid - 1 : 1))), mid};
  }
  if (*hi == *lo) return {Scalar(1e-8), mid};
  // z is fit on the exact scale; the scale itself is kept at storage precision
  const Scalar s = (*hi - *lo) / q_max;
  const int z = std::clamp(static_cast<int>(std::round(-*lo / s)), 0, q_max);
  return {static_cast<Scalar>(static_cast<float>(s)), z};
}

QuantizedValue quantize_dequantize(Scalar w, Scalar s, int z, int bits) {
  if (!(s > 0)) throw ContractError("quantize_dequantize: scale must be > 0");
  const int q_max = (1 << bits) - 1;
  const Scalar r = std::round(w / s) + z;
  const int code = static_cast<int>(std::clamp(r, Scalar(0), static_cast<Scalar>(q_max)));
  return {code, s * (code - z)};
}

std::vector<std::uint8_t> pack_u4(std::span<const std::uint8_t> codes, std::size_t rows, std::size_t cols) {
  if (codes.size() != rows * cols) throw ShapeError("pack_u4: code count does not match shape");
  const std::size_t stride = (cols + 1) / 2;
  std::vector<std::uint8_t> out(rows * stride, 0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const auto v = codes[r * cols + c];
      if (v > 15) throw ContractError("pack_u4: code out of range");
      out[r * stride + c / 2] |= static_cast<std::uint8_t>(c % 2 == 0 ? v : v << 4);
    }
  return out;
}

std::vector<std::uint8_t> unpack_u4(std::span<const std::uint8_t> packed, std::size_t rows, std::size_t cols) {
  const std::size_t stride = (cols + 1) / 2;
  if (packed.size() != rows * stride) throw ShapeError("unpack_u4: byte count does not match shape");
  std::vector<std::uint8_t> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const auto b = packed[r * stride + c / 2];
      out[r * cols + c] = c % 2 == 0 ? (b & 0x0F) : (b >> 4);
    }
  return out;
}

int QuantizedLinear::code(std::size_t r, std::size_t c) const {
  if (bits <= 4) {
    const auto b = codes[r * ((cols + 1) / 2) + c / 2];
    return c % 2 == 0 ? (b & 0x0F) : (b >> 4);
  }
  return codes[r * cols + c];
}

Tensor QuantizedLinear::dequantize() const {
  Tensor t({rows, cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t.at(r, c) = scale(r, c) * (code(r, c) - zero(r, c));
  return t;
}

std::size_t QuantizedLinear::storage_bytes() const {
  const std::size_t n_groups = rows * groups();
  if (bits <= 4) return rows * ((cols + 1) / 2) + 4 * n_groups + (n_groups + 1) / 2;
  return rows * cols + 4 * n_groups + n_groups;
}

QuantizedLinear rtn_quantize_layer(const Tensor& w, const QuantConfig& cfg) {
  cfg.validate();
  auto q = empty_layer(w.rows(), w.cols(), cfg);
  std::vector<std::uint8_t> codes(w.size());
  const auto data = w.data();
  for (std::size_t r = 0; r < q.rows; ++r)
    for (std::size_t g = 0; g < q.groups(); ++g) {
      const std::size_t begin = g * q.group_size, len = std::min(q.group_size, q.cols - begin);
      const auto sz = fit_scale_zero(data.subspan(r * q.cols + begin, len), cfg.bits, cfg.symmetric);
      q.scales[r * q.groups() + g] = static_cast<float>(sz.scale);
      q.zeros[r * q.groups() + g] = static_cast<std::uint8_t>(sz.zero);
      for (std::size_t c = begin; c < begin + len; ++c)
        codes[r * q.cols + c] = static_cast<std::uint8_t>(
            quantize_dequantize(data[r * q.cols + c], sz.scale, sz.zero, cfg.bits).code);
    }
  set_codes(q, codes);
  return q;
}

Scalar reconstruction_error(const Tensor& w, const Tensor& w_hat, const Tensor& x) {
  if (w.shape() != w_hat.shape() || w.cols() != x.rows())
    throw ShapeError("reconstruction_error: " + shape_str(w.shape()) + ", " + shape_str(w_hat.shape()) +
                     ", " + shape_str(x.shape()));
  const Mat diff = to_mat(w) - to_mat(w_hat);
  return (diff * to_mat(x)).squaredNorm();
}

GptqResult gptq_quantize_layer(const Tensor& w, const Tensor& x, const QuantConfig& cfg) {
  cfg.validate();
  const std::size_t rows = w.rows(), cols = w.cols();
  if (x.rank() != 2 || x.rows() != cols)
    throw ShapeError("gptq: weights " + shape_str(w.shape()) + " need inputs [" + std::to_string(cols) +
                     "xN], got " + shape_str(x.shape()));
  const Mat xm = to_mat(x);
  const Mat h0 = 2 * xm * xm.transpose();
  Scalar base = h0.diagonal().mean();
  if (!(base > 0)) base = 1;

  Mat upper;
  Scalar damping = cfg.damping;
  for (int attempt = 0;; ++attempt) {
    Mat h = h0;
    h.diagonal().array() += damping * base;
    Eigen::LLT<Mat> llt(h);
    bool ok = llt.info() == Eigen::Success;
    if (ok) {
      const Mat hinv = llt.solve(Mat::Identity(cols, cols));
      Eigen::LLT<Mat> llt_inv(hinv);
      ok = llt_inv.info() == Eigen::Success && hinv.allFinite();
      if (ok) {
        upper = llt_inv.matrixU();
        ok = (upper.diagonal().array() > 0).all();
      }
    }
    if (ok) break;
    if (attempt == 3)
      throw Error("gptq: Hessian not positive definite after damping " + std::to_string(damping));
    damping *= 10;
  }

  auto q = empty_layer(rows, cols, cfg);
  std::vector<std::uint8_t> codes(rows * cols);
  Mat wm = to_mat(w);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> err(rows);
  std::vector<Scalar> group;
  for (std::size_t j = 0; j < cols; ++j) {
    const std::size_t g = j / q.group_size;
    if (j % q.group_size == 0) {
      const std::size_t len = std::min(q.group_size, cols - j);
      for (std::size_t r = 0; r < rows; ++r) {
        group.assign(wm.row(r).data() + j, wm.row(r).data() + j + len);
        const auto sz = fit_scale_zero(group, cfg.bits, cfg.symmetric);
        q.scales[r * q.groups() + g] = static_cast<float>(sz.scale);
        q.zeros[r * q.groups() + g] = static_cast<std::uint8_t>(sz.zero);
      }
    }
    for (std::size_t r = 0; r < rows; ++r) {
      const auto qv = quantize_dequantize(wm(r, j), q.scales[r * q.groups() + g], q.zeros[r * q.groups() + g], cfg.bits);
      codes[r * cols + j] = static_cast<std::uint8_t>(qv.code);
      err(r) = (wm(r, j) - qv.value) / upper(j, j);
      wm(r, j) = qv.value;
    }
    const auto rest = static_cast<Eigen::Index>(cols - j - 1);
    if (rest > 0) wm.rightCols(rest).noalias() -= err * upper.row(j).tail(rest);
  }
  set_codes(q, codes);

  GptqResult result;
  result.damping_used = damping;
  result.report.bits = cfg.bits;
  result.report.error_gptq = reconstruction_error(w, q.dequantize(), x);
  result.report.error_rtn = reconstruction_error(w, rtn_quantize_layer(w, cfg).dequantize(), x);
  result.report.bytes_before = 4 * w.size();
  result.report.bytes_after = q.storage_bytes();
  result.layer = std::move(q);
  return result;
}

Tensor quantized_forward(const QuantizedLinear& q, const Tensor& x) {
  if (x.rank() != 2 || x.rows() != q.cols)
    throw ShapeError("quantized_forward: layer [" + std::to_string(q.rows) + "x" + std::to_string(q.cols) +
                     "] cannot take input " + shape_str(x.shape()));
  const std::size_t n = x.cols();
  Tensor y({q.rows, n}, Scalar(0));
  std::vector<Scalar> acc(n);
  for (std::size_t r = 0; r < q.rows; ++r) {
    for (std::size_t g = 0; g < q.groups(); ++g) {
      const std::size_t begin = g * q.group_size, end = std::min(q.cols, begin + q.group_size);
      std::fill(acc.begin(), acc.end(), Scalar(0));
      const int z = q.zeros[r * q.groups() + g];
      for (std::size_t c = begin; c < end; ++c) {
        const int k = q.code(r, c) - z;
        if (k == 0) continue;
        const Scalar* xr = x.data().data() + c * n;
        for (std::size_t t = 0; t < n; ++t) acc[t] += k * xr[t];
      }
      const Scalar s = q.scales[r * q.groups() + g];
      for (std::size_t t = 0; t < n; ++t) y.at(r, t) += s * acc[t];
    }
  }
  return y;
}

std::size_t QuantReport::total_bytes_before() const {
  std::size_t n = 0;
  for (const auto& r : rows) n += r.bytes_before;
  return n;
}

std::size_t QuantReport::total_bytes_after() const {
  std::size_t n = 0;
  for (const auto& r : rows) n += r.bytes_after;
  return n;
}

void QuantReport::write_csv(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << "layer,error_gptq,error_rtn,bytes_before,bytes_after\n" << std::setprecision(17);
  for (const auto& r : rows)
    out << r.layer << ',' << r.error_gptq << ',' << r.error_rtn << ',' << r.bytes_before << ','
        << r.bytes_after << '\n';
  if (!out) throw IoError("write failed for " + path);
}

namespace {

Var trace_input(const ForwardTrace& trace, const std::string& name) {
  if (name == "output_projection") return trace.head_in;
  const auto dot = name.find('.', 7);
  const std::size_t layer = std::stoul(name.substr(7, dot - 7));
  const auto& l = trace.layers.at(layer);
  auto ends = [&](const char* s) { return name.size() >= std::strlen(s) && name.ends_with(s); };
  if (ends(".wq") || ends(".wk") || ends(".wv")) return l.attn_in;
  if (ends(".wo")) return l.attn_mix;
  if (ends(".w1")) return l.mlp_in;
  return l.mlp_hidden;
}

Tensor* find_param(TransformerParams& p, const std::string& name) {
  Tensor* found = nullptr;
  p.visit([&](const std::string& n, Tensor& t) {
    if (n == name) found = &t;
  });
  return found;
}

}  // namespace

QuantizedModel quantize_model(const TransformerParams& params, std::span<const TokenIds> calibration,
                              const QuantConfig& cfg) {
  cfg.validate();
  if (calibration.empty()) throw ContractError("quantize_model: empty calibration set");
  QuantizedModel out;
  out.params = params;
  out.config = cfg;
  std::vector<std::string> names;
  params.visit([&](const std::string& n, const Tensor&) {
    if (TransformerParams::is_linear_weight(n)) names.push_back(n);
  });
  for (const auto& name : names) {
    Tensor* weight = find_param(out.params, name);
    // Gather this weight's inputs over all calibration positions: X [in x n].
    std::vector<Scalar> cols_major;
    std::size_t n = 0;
    const std::size_t in = weight->rows();
    for (const auto& seq : calibration) {
      Graph g;
      ForwardTrace trace;
      forward(bind(g, out.params), seq, &trace);
      auto v = trace_input(trace, name).value();
      cols_major.insert(cols_major.end(), v.begin(), v.end());
      n += v.size() / in;
    }
    Tensor x({in, n});
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t i = 0; i < in; ++i) x.at(i, t) = cols_major[t * in + i];

    auto result = gptq_quantize_layer(transposed(*weight), x, cfg);
    result.report.layer = name;
    *weight = transposed(result.layer.dequantize());
    out.report.rows.push_back(result.report);
    out.linear.emplace(name, std::move(result.layer));
  }
  return out;
}

CheckpointData to_checkpoint(const QuantizedModel& model) {
  CheckpointData data;
  data.config = model.params.config;
  auto& qj = data.extra["quant"];
  qj["bits"] = model.config.bits;
  qj["group_size"] = model.config.group_size;
  qj["symmetric"] = model.config.symmetric;
  qj["layout"] = "out_in";
  const DType code_type = model.config.bits <= 4 ? DType::U4 : DType::U8;
  model.params.visit([&](const std::string& name, const Tensor& t) {
    auto it = model.linear.find(name);
    if (it == model.linear.end()) {
      data.tensors.push_back(StoredTensor::from_tensor(name, t));
      return;
    }
    const auto& q = it->second;
    StoredTensor codes{name, code_type, {q.rows, q.cols}, q.codes};
    StoredTensor scales{name + ".scale", DType::F32, {q.rows, q.groups()}, {}};
    for (float s : q.scales)
      for (int b = 0; b < 4; ++b)
        scales.payload.push_back(static_cast<std::uint8_t>(std::bit_cast<std::uint32_t>(s) >> (8 * b)));
    StoredTensor zeros{name + ".zero", code_type, {q.zeros.size()}, {}};
    zeros.payload = code_type == DType::U4 ? pack_u4(q.zeros, 1, q.zeros.size()) : q.zeros;
    data.tensors.push_back(std::move(codes));
    data.tensors.push_back(std::move(scales));
    data.tensors.push_back(std::move(zeros));
  });
  return data;
}

void save_quantized(const QuantizedModel& model, const std::string& path) {
  write_checkpoint(path, to_checkpoint(model));
}

std::map<std::string, QuantizedLinear> quantized_layers(const CheckpointData& data) {
  std::map<std::string, QuantizedLinear> out;
  if (!data.extra.contains("quant")) return out;
  const auto& qj = data.extra["quant"];
  const int bits = qj.at("bits").get<int>();
  const auto group_size = qj.at("group_size").get<std::size_t>();
  for (const auto& t : data.tensors) {
    if (t.dtype != DType::U4 && t.dtype != DType::U8) continue;
    if (t.name.ends_with(".zero")) continue;
    const auto* scale = data.find(t.name + ".scale");
    const auto* zero = data.find(t.name + ".zero");
    if (!scale || !zero || t.shape.size() != 2) throw IoError("quantized tensor " + t.name + " lacks scale/zero");
    QuantizedLinear q;
    q.rows = t.shape[0];
    q.cols = t.shape[1];
    q.bits = bits;
    q.group_size = effective_group(group_size, q.cols);
    q.codes = t.payload;
    const Tensor s = scale->to_tensor();
    for (auto v : s.data()) q.scales.push_back(static_cast<float>(v));
    const std::size_t n_groups = q.rows * q.groups();
    if (q.scales.size() != n_groups || zero->shape != Shape{n_groups})
      throw IoError("quantized tensor " + t.name + ": group metadata does not match shape");
    q.zeros = zero->dtype == DType::U4 ? unpack_u4(zero->payload, 1, n_groups) : zero->payload;
    out.emplace(t.name, std::move(q));
  }
  return out;
}

TransformerParams load_model(const std::string& path) {
  const auto data = read_checkpoint(path);
  if (!data.extra.contains("quant")) return params_from_checkpoint(data);
  const auto layers = quantized_layers(data);
  auto params = init_params(data.config, 0, {0, 0});
  params.visit([&](const std::string& name, Tensor& t) {
    const Shape expected = t.shape();
    if (auto it = layers.find(name); it != layers.end()) {
      t = transposed(it->second.dequantize());
    } else {
      const auto* s = data.find(name);
      if (!s) throw IoError("checkpoint is missing tensor " + name);
      t = s->to_tensor();
    }
    if (t.shape() != expected)
      throw IoError("tensor " + name + " has shape " + shape_str(t.shape()) + ", expected " + shape_str(expected));
  });
  return params;
}

}  // namespace tdlm
