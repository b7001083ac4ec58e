#include "tdlm/rlcot.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>

#include "tdlm/checkpoint.hpp"
#include "tdlm/ops.hpp"

namespace tdlm {

namespace {

constexpr std::string_view kOpen = "<think>";
constexpr std::string_view kClose = "</think>";

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

// "Step <k>" at the start of a line.
std::optional<TraceStep> parse_step_line(std::string_view line) {
  constexpr std::string_view kStep = "Step ";
  if (!line.starts_with(kStep)) return std::nullopt;
  line.remove_prefix(kStep.size());
  std::size_t digits = 0;
  while (digits < line.size() && line[digits] >= '0' && line[digits] <= '9') ++digits;
  if (digits == 0) return std::nullopt;
  TraceStep step;
  std::uint64_t index = 0;
  const auto [ptr, ec] = std::from_chars(line.data(), line.data() + digits, index);
  step.index = ec == std::errc() ? static_cast<std::size_t>(index) : 0;  // overflow never matches an order
  line.remove_prefix(digits);
  if (!line.empty() && line.front() == ':') line.remove_prefix(1);
  step.text = std::string(trim(line));
  return step;
}

}  // namespace

const char* diagnostic_name(TraceDiagnostic d) {
  switch (d) {
    case TraceDiagnostic::MissingThink: return "MISSING_THINK";
    case TraceDiagnostic::TextBeforeThink: return "TEXT_BEFORE_THINK";
    case TraceDiagnostic::UnclosedThink: return "UNCLOSED_THINK";
    case TraceDiagnostic::DuplicateThink: return "DUPLICATE_THINK";
    case TraceDiagnostic::StrayClose: return "STRAY_CLOSE";
    case TraceDiagnostic::NoSteps: return "NO_STEPS";
    case TraceDiagnostic::BadStepOrder: return "BAD_STEP_ORDER";
    case TraceDiagnostic::MissingAnswer: return "MISSING_ANSWER";
  }
  return "UNKNOWN";
}

bool TraceParse::has(TraceDiagnostic d) const {
  return std::find(diagnostics.begin(), diagnostics.end(), d) != diagnostics.end();
}

TraceParse parse_trace(std::string_view text) {
  TraceParse t;
  auto flag = [&](TraceDiagnostic d) {
    if (!t.has(d)) t.diagnostics.push_back(d);
  };
  const auto open = text.find(kOpen);
  if (open == std::string_view::npos) {
    flag(TraceDiagnostic::MissingThink);
    if (text.find(kClose) != std::string_view::npos) flag(TraceDiagnostic::StrayClose);
    return t;
  }
  const auto before = text.substr(0, open);
  if (before.find(kClose) != std::string_view::npos) flag(TraceDiagnostic::StrayClose);
  if (!trim(before).empty()) flag(TraceDiagnostic::TextBeforeThink);
  const auto body_start = open + kOpen.size();
  if (text.find(kOpen, body_start) != std::string_view::npos) flag(TraceDiagnostic::DuplicateThink);
  const auto close = text.find(kClose, body_start);
  std::string_view think;
  if (close == std::string_view::npos) {
    flag(TraceDiagnostic::UnclosedThink);
    think = text.substr(body_start);
  } else {
    think = text.substr(body_start, close - body_start);
    const auto after = text.substr(close + kClose.size());
    if (after.find(kClose) != std::string_view::npos) flag(TraceDiagnostic::StrayClose);
    const auto answer = trim(after);
    if (answer.empty()) flag(TraceDiagnostic::MissingAnswer);
    else t.final_answer = std::string(answer);
  }
  t.think_text = std::string(think);

  std::size_t pos = 0;
  while (pos <= think.size()) {
    const auto nl = think.find('\n', pos);
    const auto line = think.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    if (auto step = parse_step_line(line)) t.steps.push_back(std::move(*step));
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
  if (t.steps.empty()) flag(TraceDiagnostic::NoSteps);
  for (std::size_t i = 0; i < t.steps.size(); ++i)
    if (t.steps[i].index != i + 1) {
      flag(TraceDiagnostic::BadStepOrder);
      break;
    }
  t.well_formed = t.diagnostics.empty();
  return t;
}

Scalar step_score(const TraceParse& parse) {
  if (parse.steps.empty()) return 0;
  std::size_t prefix = 0;
  while (prefix < parse.steps.size() && parse.steps[prefix].index == prefix + 1) ++prefix;
  return static_cast<Scalar>(prefix) / static_cast<Scalar>(parse.steps.size());
}

void RewardSpec::validate() const {
  for (Scalar w : {w_format, w_steps, w_correct, w_length})
    if (!(w >= 0)) throw ConfigError("reward weights must be >= 0");
  if (!(w_format > 0 || w_steps > 0 || w_correct > 0 || w_length > 0))
    throw ConfigError("at least one reward weight must be > 0");
  if (target_length == 0) throw ConfigError("target_length must be >= 1");
  if (length_cap == 0) throw ConfigError("length_cap must be >= 1");
}

Reward compute_reward(const TraceParse& parse, const std::optional<std::string>& reference_answer,
                      const RewardSpec& spec) {
  Reward r;
  r.format = parse.well_formed ? 1 : 0;
  r.steps = step_score(parse);
  r.correct = parse.final_answer && reference_answer && trim(*parse.final_answer) == trim(*reference_answer) ? 1 : 0;
  const std::size_t len = std::min(parse.think_text ? parse.think_text->size() : 0, spec.length_cap);
  r.length = std::min(static_cast<Scalar>(len) / static_cast<Scalar>(spec.target_length), Scalar(1));
  r.total = spec.w_format * r.format + spec.w_steps * r.steps + spec.w_correct * r.correct + spec.w_length * r.length;
  return r;
}

std::vector<Scalar> group_advantages(std::span<const Scalar> rewards) {
  if (rewards.size() < 2) throw ContractError("group_advantages needs at least 2 rewards");
  const auto g = static_cast<Scalar>(rewards.size());
  const Scalar mean = std::accumulate(rewards.begin(), rewards.end(), Scalar(0)) / g;
  // second pass removes the rounding left in the first mean
  std::vector<Scalar> centered(rewards.begin(), rewards.end());
  for (auto& c : centered) c -= mean;
  const Scalar residual = std::accumulate(centered.begin(), centered.end(), Scalar(0)) / g;
  Scalar var = 0;
  for (auto& c : centered) {
    c -= residual;
    var += c * c;
  }
  const Scalar sd = std::sqrt(var / g);
  std::vector<Scalar> adv(rewards.size(), 0);
  if (sd < 1e-8) return adv;
  for (std::size_t i = 0; i < adv.size(); ++i) adv[i] = centered[i] / sd;
  return adv;
}

Scalar kl_k3(Scalar logp_current, Scalar logp_ref) {
  const Scalar d = logp_ref - logp_current;
  return std::max(Scalar(0), std::expm1(d) - d);
}

Var kl_k3(Var logp_current, std::span<const Scalar> logp_ref) {
  if (logp_ref.size() != logp_current.size()) throw ShapeError("kl_k3: reference length does not match");
  const auto cur = logp_current.value();
  std::vector<Scalar> out(cur.size()), dd(cur.size());
  for (std::size_t i = 0; i < cur.size(); ++i) {
    dd[i] = logp_ref[i] - cur[i];
    out[i] = kl_k3(cur[i], logp_ref[i]);
  }
  const auto pc = logp_current.id();
  return logp_current.graph().emit(logp_current.shape(), std::move(out), {logp_current},
                                   [pc, dd = std::move(dd)](Graph& g, std::uint32_t self) {
                                     const auto gy = g.grad_of(self);
                                     auto gx = g.grad_of(pc);
                                     for (std::size_t i = 0; i < gx.size(); ++i) gx[i] -= gy[i] * std::expm1(dd[i]);
                                   });
}

Scalar clipped_surrogate(Scalar ratio, Scalar advantage, Scalar eps) {
  return std::min(ratio * advantage, std::clamp(ratio, 1 - eps, 1 + eps) * advantage);
}

Scalar grpo_objective(std::span<const Scalar> ratios, std::span<const Scalar> advantages, Scalar kl_mean,
                      Scalar eps, Scalar beta) {
  if (ratios.size() != advantages.size() || ratios.empty())
    throw ContractError("grpo_objective: ratios and advantages differ in length");
  Scalar s = 0;
  for (std::size_t i = 0; i < ratios.size(); ++i) s += clipped_surrogate(ratios[i], advantages[i], eps);
  return s / static_cast<Scalar>(ratios.size()) - beta * kl_mean;
}

Var grpo_objective(std::span<const Var> ratios, std::span<const Scalar> advantages, Var kl_mean, Scalar eps,
                   Scalar beta) {
  if (ratios.size() != advantages.size() || ratios.empty())
    throw ContractError("grpo_objective: ratios and advantages differ in length");
  if (beta != 0 && !kl_mean.valid()) throw ContractError("grpo_objective: beta > 0 needs a KL term");
  const auto g = static_cast<Scalar>(ratios.size());
  Scalar s = 0;
  std::vector<Scalar> slope(ratios.size());
  std::vector<std::uint32_t> ids;
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    const Scalar rho = ratios[i].item(), a = advantages[i];
    const Scalar plain = rho * a, clipped = std::clamp(rho, 1 - eps, 1 + eps) * a;
    s += std::min(plain, clipped);
    slope[i] = plain <= clipped ? a / g : 0;
    ids.push_back(ratios[i].id());
  }
  std::vector<Var> parents(ratios.begin(), ratios.end());
  Var surrogate = ratios.front().graph().emit(
      {1}, {s / g}, parents, [ids = std::move(ids), slope = std::move(slope)](Graph& gr, std::uint32_t self) {
        const Scalar gy = gr.grad_of(self)[0];
        for (std::size_t i = 0; i < ids.size(); ++i) gr.grad_of(ids[i])[0] += gy * slope[i];
      });
  return beta == 0 ? surrogate : sub(surrogate, scale(kl_mean, beta));
}

void GrpoConfig::validate() const {
  if (group_size < 2) throw ConfigError("group_size must be >= 2");
  if (!(clip_eps > 0 && clip_eps < 1)) throw ConfigError("clip_eps must be in (0, 1)");
  if (!(kl_coeff >= 0)) throw ConfigError("kl_coeff must be >= 0");
  if (!(learning_rate >= 0)) throw ConfigError("learning_rate must be >= 0");
  if (prompts_per_step == 0) throw ConfigError("prompts_per_step must be >= 1");
  if (refresh_old_every == 0) throw ConfigError("refresh_old_every must be >= 1");
  if (!(temperature >= 0)) throw ConfigError("temperature must be >= 0");
  if (max_new_tokens == 0) throw ConfigError("max_new_tokens must be >= 1");
}

OptimizerConfig GrpoConfig::optimizer_config() const {
  OptimizerConfig o;
  o.kind = optimizer;
  o.learning_rate = learning_rate;
  o.grad_clip = grad_clip;
  return o;
}

GrpoStepMetrics grpo_step(TransformerParams& policy, const TransformerParams& ref_policy,
                          const TransformerParams& old_policy, std::span<const PromptRecord> prompts,
                          const RewardSpec& spec, const GrpoConfig& cfg, Optimizer& opt, Rng& rng) {
  cfg.validate();
  spec.validate();
  if (policy.config.vocab_size != ref_policy.config.vocab_size ||
      policy.config.vocab_size != old_policy.config.vocab_size)
    throw ContractError("grpo: policies have different vocabularies");
  Tokenizer tok;
  struct Group {
    std::size_t prompt_len = 0;
    std::vector<TokenIds> seqs;
    std::vector<Scalar> old_logp, rewards, adv;
    std::vector<std::vector<Scalar>> ref_logp;
  };
  std::vector<Group> groups;
  GrpoStepMetrics m;
  std::size_t completions = 0;
  for (const auto& p : prompts) {
    const auto prompt = tok.encode_prompt(p.prompt);
    if (prompt.size() >= old_policy.config.max_seq_len) continue;
    const auto* answer = p.find_meta("answer");
    const std::optional<std::string> reference = answer ? std::optional<std::string>(*answer) : std::nullopt;
    Group grp;
    grp.prompt_len = prompt.size();
    for (std::size_t k = 0; k < cfg.group_size; ++k) {
      GenerationSettings gs;
      gs.temperature = cfg.temperature;
      gs.max_new_tokens = cfg.max_new_tokens;
      gs.seed = rng.next();
      const auto out = sample(old_policy, prompt, gs);
      TokenIds seq = prompt;
      seq.insert(seq.end(), out.begin(), out.end());
      grp.rewards.push_back(compute_reward(parse_trace(tok.decode_completion(out)), reference, spec).total);
      const auto old_lp = sequence_log_probs(old_policy, seq, prompt.size());
      grp.old_logp.push_back(std::accumulate(old_lp.begin(), old_lp.end(), Scalar(0)));
      grp.ref_logp.push_back(sequence_log_probs(ref_policy, seq, prompt.size()));
      grp.seqs.push_back(std::move(seq));
    }
    grp.adv = group_advantages(grp.rewards);
    if (std::all_of(grp.adv.begin(), grp.adv.end(), [](Scalar a) { return a == 0; })) ++m.degenerate_groups;
    for (std::size_t k = 0; k < cfg.group_size; ++k) {
      m.mean_reward += grp.rewards[k];
      m.mean_abs_advantage += std::abs(grp.adv[k]);
    }
    completions += cfg.group_size;
    groups.push_back(std::move(grp));
  }
  if (groups.empty()) return m;
  const auto n = static_cast<Scalar>(completions);
  m.mean_reward /= n;
  m.mean_abs_advantage /= n;

  Graph g;
  auto model = bind(g, policy, true);
  Var total;
  std::size_t clipped = 0;
  for (const auto& grp : groups) {
    std::vector<Var> ratios;
    Var kl_sum;
    for (std::size_t k = 0; k < grp.seqs.size(); ++k) {
      auto lp = sequence_log_probs(model, grp.seqs[k], grp.prompt_len);
      auto ratio = exp(add_scalar(sum(lp), -grp.old_logp[k]));
      const Scalar rho = ratio.item();
      if (rho < 1 - cfg.clip_eps || rho > 1 + cfg.clip_eps) ++clipped;
      ratios.push_back(ratio);
      auto kl = mean(kl_k3(lp, grp.ref_logp[k]));
      m.kl_from_ref += kl.item();
      kl_sum = kl_sum.valid() ? add(kl_sum, kl) : kl;
    }
    auto kl_mean = scale(kl_sum, Scalar(1) / static_cast<Scalar>(grp.seqs.size()));
    auto obj = grpo_objective(ratios, grp.adv, kl_mean, cfg.clip_eps, cfg.kl_coeff);
    total = total.valid() ? add(total, obj) : obj;
  }
  m.kl_from_ref /= n;
  m.clipped_fraction = static_cast<Scalar>(clipped) / n;
  if (m.degenerate_groups == groups.size()) return m;
  g.backward(scale(total, Scalar(-1) / static_cast<Scalar>(groups.size())));
  opt.step(policy);
  policy.zero_grad();
  m.updated = true;
  return m;
}

void GrpoRun::write_csv(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << "step,mean_reward,kl_from_ref,mean_abs_advantage,clipped_fraction\n" << std::setprecision(17);
  for (const auto& r : rows)
    out << r.step << ',' << r.mean_reward << ',' << r.kl_from_ref << ',' << r.mean_abs_advantage << ','
        << r.clipped_fraction << '\n';
  if (!out) throw IoError("write failed for " + path);
}

GrpoRun run_grpo(const GrpoConfig& cfg, const TransformerParams& init, std::span<const PromptRecord> prompts,
                 const RewardSpec& spec, const std::string& out_dir, TransformerParams* final_policy) {
  namespace fs = std::filesystem;
  cfg.validate();
  spec.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  const auto metrics_path = (fs::path(out_dir) / "metrics.csv").string();
  GrpoRun run;
  run.write_csv(metrics_path);
  if (prompts.empty()) throw InputError("prompt set is empty");

  TransformerParams policy = init, old = init;
  const TransformerParams& ref = init;
  Optimizer opt(cfg.optimizer_config());
  Rng prompt_rng(derive_seed(cfg.seed, "grpo_prompts"));
  Rng sample_rng(derive_seed(cfg.seed, "grpo_sampling"));
  std::vector<std::size_t> order(prompts.size());
  std::size_t cursor = order.size();
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    if ((step - 1) % cfg.refresh_old_every == 0) old = policy;
    std::vector<PromptRecord> chunk;
    for (std::size_t i = 0; i < std::min(cfg.prompts_per_step, prompts.size()); ++i) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), 0);
        prompt_rng.shuffle(order.begin(), order.end());
        cursor = 0;
      }
      chunk.push_back(prompts[order[cursor++]]);
    }
    auto m = grpo_step(policy, ref, old, chunk, spec, cfg, opt, sample_rng);
    m.step = step;
    if (!m.updated) ++run.degenerate_steps;
    run.rows.push_back(m);
    run.write_csv(metrics_path);
  }
  save_checkpoint(policy, (fs::path(out_dir) / "policy.ckpt").string());
  if (final_policy) *final_policy = std::move(policy);
  return run;
}

}  // namespace tdlm
