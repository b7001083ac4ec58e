#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tdlm/data.hpp"
#include "tdlm/model.hpp"
#include "tdlm/optim.hpp"
#include "tdlm/rng.hpp"

namespace tdlm {

enum class TraceDiagnostic {
  MissingThink,      // no "<think>"
  TextBeforeThink,   // non-whitespace before "<think>"
  UnclosedThink,     // "<think>" without a later "</think>"
  DuplicateThink,    // a second "<think>" anywhere after the first
  StrayClose,        // "</think>" with no open block
  NoSteps,           // think block has no "Step <k>" line
  BadStepOrder,      // step indices not 1, 2, 3, ...
  MissingAnswer,     // nothing after "</think>"
};
const char* diagnostic_name(TraceDiagnostic d);

struct TraceStep {
  std::size_t index = 0;
  std::string text;  // rest of the line after "Step <k>", leading ':' and spaces removed
};

struct TraceParse {
  bool well_formed = false;
  std::optional<std::string> think_text;
  std::vector<TraceStep> steps;
  std::optional<std::string> final_answer;  // trimmed text after "</think>"
  std::vector<TraceDiagnostic> diagnostics;

  bool has(TraceDiagnostic d) const;
};

// Never throws. well_formed requires exactly one think block preceded only
// by whitespace, at least one step line, indices 1, 2, ... in order, and a
// nonempty answer.
TraceParse parse_trace(std::string_view text);

// longest prefix of steps numbered 1, 2, ... divided by the number of step lines
Scalar step_score(const TraceParse& parse);

struct RewardSpec {
  Scalar w_format = 1, w_steps = 1, w_correct = 2, w_length = Scalar(0.5);
  std::size_t target_length = 64;  // think bytes for full length credit
  std::size_t length_cap = 1024;   // think bytes counted at most
  void validate() const;
};

struct Reward {
  // Unweighted components, each in [0, 1].
  Scalar format = 0, steps = 0, correct = 0, length = 0;
  Scalar total = 0;
};

Reward compute_reward(const TraceParse& parse, const std::optional<std::string>& reference_answer,
                      const RewardSpec& spec);

// (r - mean) / population std; all zeros when std < 1e-8. Throws ContractError for G < 2.
std::vector<Scalar> group_advantages(std::span<const Scalar> rewards);

// r - ln r - 1 with r = exp(logp_ref - logp_current).
Scalar kl_k3(Scalar logp_current, Scalar logp_ref);
// Elementwise on a node of current log-probs; differentiable.
Var kl_k3(Var logp_current, std::span<const Scalar> logp_ref);

// min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)
Scalar clipped_surrogate(Scalar ratio, Scalar advantage, Scalar eps);
// (1/G) sum of clipped surrogates - beta * kl_mean, to be maximized.
Scalar grpo_objective(std::span<const Scalar> ratios, std::span<const Scalar> advantages, Scalar kl_mean,
                      Scalar eps, Scalar beta);
// Differentiable variant; each ratio is a single-element node. kl_mean may be
// an empty Var when beta = 0.
Var grpo_objective(std::span<const Var> ratios, std::span<const Scalar> advantages, Var kl_mean, Scalar eps,
                   Scalar beta);

struct GrpoConfig {
  std::size_t group_size = 8;  // G
  Scalar clip_eps = Scalar(0.2);
  Scalar kl_coeff = Scalar(0.04);  // beta
  Scalar learning_rate = Scalar(1e-3);
  std::size_t steps = 200;
  std::size_t prompts_per_step = 4;
  std::size_t refresh_old_every = 1;
  std::uint64_t seed = 0;
  Scalar temperature = 1;
  std::size_t max_new_tokens = 48;
  OptimizerKind optimizer = OptimizerKind::Adam;
  Scalar grad_clip = 1;

  void validate() const;
  OptimizerConfig optimizer_config() const;
};

struct GrpoStepMetrics {
  std::size_t step = 0;
  Scalar mean_reward = 0;
  Scalar kl_from_ref = 0;  // mean over completions of the per-token k3 mean
  Scalar mean_abs_advantage = 0;
  Scalar clipped_fraction = 0;  // completions with ratio outside [1 - eps, 1 + eps]
  std::size_t degenerate_groups = 0;
  bool updated = false;
};

// Samples G completions per prompt from `old_policy`, scores them, and takes
// one optimizer step on -objective. When every group is degenerate no update
// is made. The reference answer is the record's meta "answer".
GrpoStepMetrics grpo_step(TransformerParams& policy, const TransformerParams& ref_policy,
                          const TransformerParams& old_policy, std::span<const PromptRecord> prompts,
                          const RewardSpec& spec, const GrpoConfig& cfg, Optimizer& opt, Rng& rng);

struct GrpoRun {
  std::vector<GrpoStepMetrics> rows;
  std::size_t degenerate_steps = 0;
  // Header: step,mean_reward,kl_from_ref,mean_abs_advantage,clipped_fraction
  void write_csv(const std::string& path) const;
};

// Reference policy = frozen copy of `init`. Writes out_dir/metrics.csv and
// out_dir/policy.ckpt.
GrpoRun run_grpo(const GrpoConfig& cfg, const TransformerParams& init, std::span<const PromptRecord> prompts,
                 const RewardSpec& spec, const std::string& out_dir, TransformerParams* final_policy = nullptr);

}  // namespace tdlm
