#include "tdlm/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "eigen_util.hpp"
#include "tdlm/ops.hpp"
#include "tdlm/rng.hpp"

namespace tdlm {
namespace {

constexpr Scalar kNormEps = Scalar(1e-5);

void check_tokens(const ModelConfig& cfg, std::span<const std::int32_t> tokens) {
  if (tokens.empty()) throw InputError("empty token sequence");
  if (tokens.size() > cfg.max_seq_len)
    throw InputError("sequence of " + std::to_string(tokens.size()) +
                     " tokens exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  for (auto t : tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size)
      throw InputError("token id " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(cfg.vocab_size));
}

bool ends_with(const std::string& s, const char* suffix) {
  const std::size_t n = std::strlen(suffix);
  return s.size() >= n && s.compare(s.size() - n, n, suffix) == 0;
}

void layer_norm(const Scalar* x, const Tensor& gain, const Tensor& bias, std::size_t n, Scalar* out) {
  Scalar mu = 0;
  for (std::size_t j = 0; j < n; ++j) mu += x[j];
  mu /= static_cast<Scalar>(n);
  Scalar var = 0;
  for (std::size_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
  var /= static_cast<Scalar>(n);
  const Scalar is = Scalar(1) / std::sqrt(var + kNormEps);
  for (std::size_t j = 0; j < n; ++j) out[j] = (x[j] - mu) * is * gain[j] + bias[j];
}

Scalar gelu_scalar(Scalar x) {
  constexpr Scalar kC = Scalar(0.7978845608028654);
  constexpr Scalar kA = Scalar(0.044715);
  return Scalar(0.5) * x * (1 + std::tanh(kC * (x + kA * x * x * x)));
}

// row vector [1 x k] times matrix [k x n] into out
void vecmat(const Scalar* v, const Tensor& m, Scalar* out) {
  const std::size_t k = m.rows(), n = m.cols();
  detail::mmap(out, 1, n).noalias() = detail::cmap(v, 1, k) * detail::cmap(m.data().data(), k, n);
}

}  // namespace

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v < 1) throw ConfigError(std::string(name) + " must be >= 1");
  };
  positive(vocab_size, "vocab_size");
  positive(n_layers, "n_layers");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(mlp_hidden, "mlp_hidden");
  if (max_seq_len < 2) throw ConfigError("max_seq_len must be >= 2");
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
}

ModelConfig ModelConfig::teacher_default() {
  ModelConfig c;
  c.n_layers = 4;
  c.d_model = 128;
  c.n_heads = 4;
  c.mlp_hidden = 512;
  return c;
}

ModelConfig ModelConfig::student_default() { return ModelConfig{}; }

std::size_t TransformerParams::parameter_count() const {
  std::size_t n = 0;
  visit([&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

void TransformerParams::zero_grad() {
  visit([](const std::string&, Tensor& t) { t.zero_grad(); });
}

bool TransformerParams::is_linear_weight(const std::string& name) {
  return ends_with(name, ".wq") || ends_with(name, ".wk") || ends_with(name, ".wv") ||
         ends_with(name, ".wo") || ends_with(name, ".w1") || ends_with(name, ".w2") ||
         name == "output_projection";
}

TransformerParams init_params(const ModelConfig& config, std::uint64_t seed, InitOptions opts) {
  config.validate();
  const std::size_t d = config.d_model, h = config.mlp_hidden, v = config.vocab_size;
  TransformerParams p;
  p.config = config;
  p.token_embedding = Tensor({v, d});
  p.position_embedding = Tensor({config.max_seq_len, d});
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    LayerParams l;
    l.ln1_gain = Tensor({d}, 1);
    l.ln1_bias = Tensor({d});
    l.wq = Tensor({d, d});
    l.wk = Tensor({d, d});
    l.wv = Tensor({d, d});
    l.wo = Tensor({d, d});
    l.ln2_gain = Tensor({d}, 1);
    l.ln2_bias = Tensor({d});
    l.mlp_w1 = Tensor({d, h});
    l.mlp_b1 = Tensor({h});
    l.mlp_w2 = Tensor({h, d});
    l.mlp_b2 = Tensor({d});
    p.layers.push_back(std::move(l));
  }
  p.final_norm_gain = Tensor({d}, 1);
  p.final_norm_bias = Tensor({d});
  p.output_projection = Tensor({d, v});

  const Scalar out_scale = opts.output_scale < 0
                               ? Scalar(1) / std::sqrt(Scalar(2 * config.n_layers))
                               : opts.output_scale;
  Rng rng(seed);
  p.visit([&](const std::string& name, Tensor& t) {
    if (t.rank() != 2) return;
    const Scalar sd = name == "output_projection" ? opts.stddev * out_scale : opts.stddev;
    for (auto& x : t.data()) x = static_cast<Scalar>(rng.normal()) * sd;
  });
  return p;
}

std::uint64_t params_checksum(const TransformerParams& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  params.visit([&](const std::string&, const Tensor& t) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data().data());
    for (std::size_t i = 0; i < t.size() * sizeof(Scalar); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  });
  return h;
}

BoundModel bind(Graph& g, TransformerParams& params, bool trainable) {
  auto b = [&](Tensor& t) { return trainable ? g.param(t) : g.leaf(t); };
  BoundModel m;
  m.config = &params.config;
  m.token_embedding = b(params.token_embedding);
  m.position_embedding = b(params.position_embedding);
  for (auto& l : params.layers) {
    m.layers.push_back({b(l.ln1_gain), b(l.ln1_bias), b(l.wq), b(l.wk), b(l.wv), b(l.wo),
                        b(l.ln2_gain), b(l.ln2_bias), b(l.mlp_w1), b(l.mlp_b1), b(l.mlp_w2),
                        b(l.mlp_b2)});
  }
  m.final_norm_gain = b(params.final_norm_gain);
  m.final_norm_bias = b(params.final_norm_bias);
  m.output_projection = b(params.output_projection);
  return m;
}

BoundModel bind(Graph& g, const TransformerParams& params) {
  // leaf() never writes through the pointer
  return bind(g, const_cast<TransformerParams&>(params), false);
}

Var attention(const BoundLayer& layer, Var h, std::size_t n_heads, Var* mixed) {
  const std::size_t d = h.cols();
  const std::size_t dk = d / n_heads;
  const Scalar inv_sqrt_dk = Scalar(1) / std::sqrt(static_cast<Scalar>(dk));
  Var q = matmul(h, layer.wq);
  Var k = matmul(h, layer.wk);
  Var v = matmul(h, layer.wv);
  std::vector<Var> heads;
  for (std::size_t i = 0; i < n_heads; ++i) {
    Var qh = n_heads == 1 ? q : slice_cols(q, i * dk, dk);
    Var kh = n_heads == 1 ? k : slice_cols(k, i * dk, dk);
    Var vh = n_heads == 1 ? v : slice_cols(v, i * dk, dk);
    Var weights = causal_softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt_dk));
    heads.push_back(matmul(weights, vh));
  }
  Var mix = n_heads == 1 ? heads[0] : concat_cols(heads);
  if (mixed) *mixed = mix;
  return matmul(mix, layer.wo);
}

Var forward(const BoundModel& model, std::span<const std::int32_t> tokens, ForwardTrace* trace) {
  const auto& cfg = *model.config;
  check_tokens(cfg, tokens);
  std::vector<std::int32_t> positions(tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int32_t>(i);
  Var x = add(embedding(model.token_embedding, tokens), embedding(model.position_embedding, positions));
  if (trace) trace->layers.clear();
  for (const auto& layer : model.layers) {
    ForwardTrace::Layer captured;
    Var h = layer_norm_rows(x, layer.ln1_gain, layer.ln1_bias, kNormEps);
    captured.attn_in = h;
    x = add(x, attention(layer, h, cfg.n_heads, &captured.attn_mix));
    Var h2 = layer_norm_rows(x, layer.ln2_gain, layer.ln2_bias, kNormEps);
    captured.mlp_in = h2;
    Var hidden = gelu(add_row(matmul(h2, layer.mlp_w1), layer.mlp_b1));
    captured.mlp_hidden = hidden;
    x = add(x, add_row(matmul(hidden, layer.mlp_w2), layer.mlp_b2));
    if (trace) trace->layers.push_back(captured);
  }
  Var hf = layer_norm_rows(x, model.final_norm_gain, model.final_norm_bias, kNormEps);
  if (trace) trace->head_in = hf;
  return matmul(hf, model.output_projection);
}

Tensor forward_logits(const TransformerParams& params, std::span<const std::int32_t> tokens) {
  Graph g;
  auto m = bind(g, params);
  return forward(m, tokens).to_tensor();
}

Var lm_loss(Var logits, std::span<const std::int32_t> targets, std::span<const std::uint8_t> mask) {
  if (targets.size() != logits.rows() || mask.size() != logits.rows())
    throw ShapeError("lm_loss: targets/mask lengths " + std::to_string(targets.size()) + "/" +
                     std::to_string(mask.size()) + " do not match logits " +
                     shape_str(logits.shape()));
  const auto count = std::count(mask.begin(), mask.end(), true);
  if (count == 0) throw ContractError("lm_loss: every position is masked");
  return scale(masked_nll_sum(logits, targets, mask), Scalar(1) / static_cast<Scalar>(count));
}

TokenIds sample(const TransformerParams& params, std::span<const std::int32_t> prompt,
                const GenerationSettings& settings) {
  const auto& cfg = params.config;
  if (settings.temperature < 0) throw ConfigError("temperature must be >= 0");
  TokenIds context(prompt.begin(), prompt.end());
  if (context.empty()) context.push_back(settings.bos_token);
  check_tokens(cfg, context);

  Decoder dec(params);
  std::span<const Scalar> logits;
  for (auto t : context) logits = dec.push(t);

  Rng rng(settings.seed);
  TokenIds out;
  std::vector<Scalar> probs(cfg.vocab_size);
  while (out.size() < settings.max_new_tokens && context.size() + out.size() < cfg.max_seq_len) {
    std::int32_t next;
    if (settings.temperature == 0) {
      next = static_cast<std::int32_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    } else {
      const Scalar mx = *std::max_element(logits.begin(), logits.end());
      for (std::size_t j = 0; j < probs.size(); ++j)
        probs[j] = std::exp((logits[j] - mx) / settings.temperature);
      next = static_cast<std::int32_t>(rng.categorical(probs));
    }
    out.push_back(next);
    if (settings.stop_token && next == *settings.stop_token) break;
    if (out.size() < settings.max_new_tokens && context.size() + out.size() < cfg.max_seq_len)
      logits = dec.push(next);
  }
  return out;
}

std::vector<Scalar> sequence_log_probs(const TransformerParams& params,
                                       std::span<const std::int32_t> tokens,
                                       std::size_t prompt_len) {
  Graph g;
  auto m = bind(g, params);
  auto v = sequence_log_probs(m, tokens, prompt_len).value();
  return {v.begin(), v.end()};
}

Var sequence_log_probs(const BoundModel& model, std::span<const std::int32_t> tokens,
                       std::size_t prompt_len) {
  if (prompt_len == 0 || prompt_len >= tokens.size())
    throw ContractError("sequence_log_probs: need 0 < prompt_len < len(tokens), got prompt_len " +
                        std::to_string(prompt_len) + " for " + std::to_string(tokens.size()) +
                        " tokens");
  Var logits = forward(model, tokens.first(tokens.size() - 1));
  const std::size_t n = tokens.size() - prompt_len;
  Var rows = slice_rows(logits, prompt_len - 1, n);
  return gather_cols(log_softmax_rows(rows), tokens.subspan(prompt_len));
}

Decoder::Decoder(const TransformerParams& params) : params_(params) {
  const auto& c = params.config;
  keys_.assign(c.n_layers, std::vector<Scalar>(c.max_seq_len * c.d_model));
  values_.assign(c.n_layers, std::vector<Scalar>(c.max_seq_len * c.d_model));
  x_.resize(c.d_model);
  h_.resize(c.d_model);
  q_.resize(c.d_model);
  mix_.resize(c.d_model);
  tmp_.resize(c.d_model);
  hidden_.resize(c.mlp_hidden);
  scores_.resize(c.max_seq_len);
  logits_.resize(c.vocab_size);
}

std::span<const Scalar> Decoder::push(std::int32_t token) {
  const auto& c = params_.config;
  const std::size_t d = c.d_model, dk = c.d_k();
  if (length_ >= c.max_seq_len) throw InputError("decoder context is full");
  if (token < 0 || static_cast<std::size_t>(token) >= c.vocab_size)
    throw InputError("token id " + std::to_string(token) + " outside vocabulary");
  const std::size_t pos = length_++;
  for (std::size_t j = 0; j < d; ++j)
    x_[j] = params_.token_embedding.at(token, j) + params_.position_embedding.at(pos, j);

  const Scalar inv_sqrt_dk = Scalar(1) / std::sqrt(static_cast<Scalar>(dk));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& L = params_.layers[l];
    layer_norm(x_.data(), L.ln1_gain, L.ln1_bias, d, h_.data());
    vecmat(h_.data(), L.wq, q_.data());
    vecmat(h_.data(), L.wk, keys_[l].data() + pos * d);
    vecmat(h_.data(), L.wv, values_[l].data() + pos * d);
    for (std::size_t hd = 0; hd < c.n_heads; ++hd) {
      const std::size_t off = hd * dk;
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (std::size_t j = 0; j <= pos; ++j) {
        Scalar s = 0;
        const Scalar* kr = keys_[l].data() + j * d + off;
        for (std::size_t e = 0; e < dk; ++e) s += q_[off + e] * kr[e];
        scores_[j] = s * inv_sqrt_dk;
        mx = std::max(mx, scores_[j]);
      }
      Scalar z = 0;
      for (std::size_t j = 0; j <= pos; ++j) z += (scores_[j] = std::exp(scores_[j] - mx));
      for (std::size_t e = 0; e < dk; ++e) mix_[off + e] = 0;
      for (std::size_t j = 0; j <= pos; ++j) {
        const Scalar w = scores_[j] / z;
        const Scalar* vr = values_[l].data() + j * d + off;
        for (std::size_t e = 0; e < dk; ++e) mix_[off + e] += w * vr[e];
      }
    }
    vecmat(mix_.data(), L.wo, tmp_.data());
    for (std::size_t j = 0; j < d; ++j) x_[j] += tmp_[j];
    layer_norm(x_.data(), L.ln2_gain, L.ln2_bias, d, h_.data());
    vecmat(h_.data(), L.mlp_w1, hidden_.data());
    for (std::size_t j = 0; j < hidden_.size(); ++j) hidden_[j] = gelu_scalar(hidden_[j] + L.mlp_b1[j]);
    vecmat(hidden_.data(), L.mlp_w2, tmp_.data());
    for (std::size_t j = 0; j < d; ++j) x_[j] += tmp_[j] + L.mlp_b2[j];
  }
  layer_norm(x_.data(), params_.final_norm_gain, params_.final_norm_bias, d, h_.data());
  vecmat(h_.data(), params_.output_projection, logits_.data());
  return logits_;
}

}  // namespace tdlm
