#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tdlm/data.hpp"
#include "tdlm/evalmetrics.hpp"
#include "tdlm/model.hpp"
#include "tdlm/optim.hpp"
#include "tdlm/rng.hpp"

namespace tdlm {

enum class KdDirection { Forward, Reverse };

struct DistillConfig {
  Scalar temperature = 2;  // tau
  Scalar alpha = Scalar(0.9);  // weight of the KD term; 1 - alpha goes to the LM loss
  Scalar learning_rate = Scalar(5e-4);
  std::size_t epochs = 5;
  KdDirection direction = KdDirection::Forward;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  // Tokens per training sequence (prompt + completion); 0 = model context + 1.
  std::size_t max_len = 0;
  OptimizerKind optimizer = OptimizerKind::Adam;
  Scalar grad_clip = 1;
  // Reverse direction: completions sampled per prompt and their length.
  std::size_t samples_per_prompt = 4;
  std::size_t max_new_tokens = 48;
  Scalar sample_temperature = 1;
  // Replace dataset completions by greedy teacher generations before training.
  bool use_teacher_sequences = false;
  // Writes measured seconds into metrics; off keeps metrics files reproducible.
  bool record_wall_time = false;
  EvalSettings eval;

  void validate() const;
  OptimizerConfig optimizer_config() const;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  Scalar train_loss = 0, eval_loss = 0, rouge_l = 0, wall_time_s = 0;
};

struct TrainMetrics {
  std::vector<EpochMetrics> rows;
  // Header: epoch,train_loss,eval_loss,rouge_l,wall_time_s
  void write_csv(const std::string& path) const;
};

// Mean over unmasked rows of KL(softmax(t / tau) || softmax(s / tau)), summed
// over the full vocabulary. Only the student receives gradient. No tau^2
// factor is applied.
Var kd_loss(Var student_logits, const Tensor& teacher_logits, std::span<const std::uint8_t> mask,
            Scalar tau);

struct SoftCeParts {
  Var kl;               // kd_loss
  Var soft_cross_entropy;  // mean of -sum p_T log p_S, built from generic ops
  Scalar teacher_entropy;  // mean of -sum p_T log p_T
};
SoftCeParts soft_ce_decomposition(Var student_logits, const Tensor& teacher_logits,
                                  std::span<const std::uint8_t> mask, Scalar tau);

// Greedy (or sampled) completions; meta "truncated" = "true" when no EOS was produced.
std::vector<PromptRecord> teacher_generate(const TransformerParams& teacher,
                                           std::span<const PromptRecord> prompts,
                                           const GenerationSettings& settings);

// Teacher logits for each row of each batch, [inputs x vocab].
using TeacherCache = std::vector<std::vector<Tensor>>;
TeacherCache teacher_logits(const TransformerParams& teacher, std::span<const Batch> batches);

// One optimizer step per batch on the token-mean LM loss over completion
// tokens. Batches run in `order` (empty = as given). Returns the mean batch loss.
Scalar sft_epoch(TransformerParams& params, std::span<const Batch> batches, Optimizer& opt,
                 std::span<const std::size_t> order = {});

// Per batch: alpha * kd_loss + (1 - alpha) * lm_loss (token means). alpha = 0
// runs exactly the SFT computation. `cache` (indexed like `batches`) skips
// teacher forwards. Throws ContractError if the teacher changes or the
// vocabularies differ.
Scalar distill_epoch(TransformerParams& student, const TransformerParams& teacher,
                     std::span<const Batch> batches, const DistillConfig& cfg, Optimizer& opt,
                     const TeacherCache* cache = nullptr, std::span<const std::size_t> order = {});

struct ReverseKlMetrics {
  Scalar reverse_kl_estimate = 0;  // mean of log q - log p_T over samples
  Scalar mean_weight = 0;          // mean |log q - log p_T|
  std::size_t samples = 0, skipped = 0;
};

// mean_i((w_i - mean of w over i's group) * log_q_i); w is a constant.
Var reverse_kl_surrogate(std::span<const Var> log_q, std::span<const Scalar> w, std::span<const std::size_t> group);

// Samples cfg.samples_per_prompt completions per prompt from the student and
// descends the surrogate mean((w - mean_group(w)) * log q), w = log q - log p_T
// held constant. Empty completions are skipped and counted.
ReverseKlMetrics reverse_kl_step(TransformerParams& student, const TransformerParams& teacher,
                                 std::span<const PromptRecord> prompts, const DistillConfig& cfg,
                                 Optimizer& opt, Rng& rng);

struct DistillRunInputs {
  ModelConfig student_config;
  const TransformerParams* teacher = nullptr;       // null runs SFT only
  const TransformerParams* student_init = nullptr;  // null initializes from the seed
  std::vector<PromptRecord> train, eval;
  const TeacherCache* cache = nullptr;  // teacher logits for training_batches(train)
  bool teacher_retention = true;        // final report compares against teacher generations
};

// Writes out_dir/metrics.csv, out_dir/student.ckpt, out_dir/eval.jsonl and
// out_dir/eval.csv. Throws IoError before training if out_dir is not writable.
TrainMetrics run_distillation(const DistillConfig& cfg, const DistillRunInputs& inputs,
                              const std::string& out_dir, TransformerParams* final_params = nullptr);

// Fixed batches used by run_distillation (batch order is shuffled per epoch).
Batches training_batches(std::span<const PromptRecord> train, const DistillConfig& cfg,
                         const ModelConfig& model);

}  // namespace tdlm
