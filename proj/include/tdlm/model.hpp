#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tdlm/graph.hpp"
#include "tdlm/tensor.hpp"

namespace tdlm {

using TokenIds = std::vector<std::int32_t>;

// Byte vocabulary plus three special ids.
inline constexpr std::int32_t kBosToken = 256;
inline constexpr std::int32_t kEosToken = 257;
inline constexpr std::int32_t kPadToken = 258;
inline constexpr std::size_t kByteVocabSize = 259;

struct ModelConfig {
  std::size_t vocab_size = kByteVocabSize;
  std::size_t n_layers = 2;
  std::size_t d_model = 64;
  std::size_t n_heads = 2;
  std::size_t max_seq_len = 128;
  std::size_t mlp_hidden = 256;

  std::size_t d_k() const { return d_model / n_heads; }
  // Throws ConfigError naming the offending field.
  void validate() const;

  // 4 layers, d_model 128, 4 heads.
  static ModelConfig teacher_default();
  // 2 layers, d_model 64, 2 heads.
  static ModelConfig student_default();

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerParams {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, wk, wv, wo;  // [d_model x d_model], applied as x * W
  Tensor ln2_gain, ln2_bias;
  Tensor mlp_w1, mlp_b1;  // [d_model x mlp_hidden], [mlp_hidden]
  Tensor mlp_w2, mlp_b2;  // [mlp_hidden x d_model], [d_model]
};

// Pre-norm decoder: x += Attn(LN1(x)); x += MLP(LN2(x)); logits = LN_f(x) * W_out.
struct TransformerParams {
  ModelConfig config;
  Tensor token_embedding;     // [vocab x d_model]
  Tensor position_embedding;  // [max_seq_len x d_model]
  std::vector<LayerParams> layers;
  Tensor final_norm_gain, final_norm_bias;
  Tensor output_projection;  // [d_model x vocab]

  // Visits every tensor in canonical (checkpoint) order as f(name, tensor).
  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  std::size_t parameter_count() const;
  void zero_grad();
  // Names of the 2-D weights consumed by a matrix product (quantizable layers).
  static bool is_linear_weight(const std::string& name);

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    f(std::string("token_embedding"), self.token_embedding);
    f(std::string("position_embedding"), self.position_embedding);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      auto& l = self.layers[i];
      const std::string p = "layers." + std::to_string(i) + ".";
      f(p + "ln1.gain", l.ln1_gain);
      f(p + "ln1.bias", l.ln1_bias);
      f(p + "attn.wq", l.wq);
      f(p + "attn.wk", l.wk);
      f(p + "attn.wv", l.wv);
      f(p + "attn.wo", l.wo);
      f(p + "ln2.gain", l.ln2_gain);
      f(p + "ln2.bias", l.ln2_bias);
      f(p + "mlp.w1", l.mlp_w1);
      f(p + "mlp.b1", l.mlp_b1);
      f(p + "mlp.w2", l.mlp_w2);
      f(p + "mlp.b2", l.mlp_b2);
    }
    f(std::string("final_norm.gain"), self.final_norm_gain);
    f(std::string("final_norm.bias"), self.final_norm_bias);
    f(std::string("output_projection"), self.output_projection);
  }
};

struct InitOptions {
  Scalar stddev = Scalar(0.02);
  // Multiplier on the output projection's stddev; negative selects 1/sqrt(2 * n_layers).
  Scalar output_scale = Scalar(-1);
};

// Zero-mean Gaussian weights; norm gains 1, all biases 0.
TransformerParams init_params(const ModelConfig& config, std::uint64_t seed, InitOptions opts = {});

// FNV-1a over the raw bytes of every tensor, in visit order.
std::uint64_t params_checksum(const TransformerParams& params);

struct GenerationSettings {
  // 0 selects greedy argmax (first index on ties).
  Scalar temperature = 0;
  std::size_t max_new_tokens = 32;
  std::uint64_t seed = 0;
  std::optional<std::int32_t> stop_token = kEosToken;
  // Used as the prompt when the prompt is empty.
  std::int32_t bos_token = kBosToken;
};

// Graph nodes of every parameter, bound once per graph.
struct BoundLayer {
  Var ln1_gain, ln1_bias, wq, wk, wv, wo, ln2_gain, ln2_bias, mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};
struct BoundModel {
  const ModelConfig* config = nullptr;
  Var token_embedding, position_embedding;
  std::vector<BoundLayer> layers;
  Var final_norm_gain, final_norm_bias, output_projection;
};

// trainable = true binds tensors with Graph::param (gradients flow back);
// otherwise with Graph::leaf.
BoundModel bind(Graph& g, TransformerParams& params, bool trainable);
BoundModel bind(Graph& g, const TransformerParams& params);

// Inputs of each matrix product, captured during a forward pass.
struct ForwardTrace {
  struct Layer {
    Var attn_in;  // LN1 output, input of wq/wk/wv
    Var attn_mix;  // concatenated heads, input of wo
    Var mlp_in;   // LN2 output, input of mlp_w1
    Var mlp_hidden;  // GELU output, input of mlp_w2
  };
  std::vector<Layer> layers;
  Var head_in;  // final norm output, input of output_projection
};

// Causal self-attention of one layer on normalized input h [T x d_model];
// returns the W_O projection of the concatenated heads.
Var attention(const BoundLayer& layer, Var h, std::size_t n_heads, Var* mixed = nullptr);

// Logits [T x vocab] for next-token prediction at every position.
Var forward(const BoundModel& model, std::span<const std::int32_t> tokens,
            ForwardTrace* trace = nullptr);
Tensor forward_logits(const TransformerParams& params, std::span<const std::int32_t> tokens);

// Mean negative log-likelihood over positions with mask[t]; targets[t] is the
// token expected at position t. Throws ContractError when nothing is unmasked.
Var lm_loss(Var logits, std::span<const std::int32_t> targets, std::span<const std::uint8_t> mask);

// Continuation only (the prompt is not included in the result).
TokenIds sample(const TransformerParams& params, std::span<const std::int32_t> prompt,
                const GenerationSettings& settings);

// log p(tokens[t] | tokens[<t]) for t in [prompt_len, tokens.size()).
std::vector<Scalar> sequence_log_probs(const TransformerParams& params,
                                       std::span<const std::int32_t> tokens,
                                       std::size_t prompt_len);
// Differentiable variant: node of shape [tokens.size() - prompt_len].
Var sequence_log_probs(const BoundModel& model, std::span<const std::int32_t> tokens,
                       std::size_t prompt_len);

// Incremental decoder with cached keys/values; inference only. Produces the
// same logits as forward_logits, one position at a time.
class Decoder {
 public:
  explicit Decoder(const TransformerParams& params);
  // Appends a token and returns the logits predicting the next one.
  std::span<const Scalar> push(std::int32_t token);
  std::size_t length() const { return length_; }
  void reset() { length_ = 0; }

 private:
  const TransformerParams& params_;
  std::size_t length_ = 0;
  std::vector<std::vector<Scalar>> keys_, values_;  // per layer [max_seq_len x d_model]
  std::vector<Scalar> x_, h_, q_, mix_, tmp_, hidden_, scores_, logits_;
};

}  // namespace tdlm
