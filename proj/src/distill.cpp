#include "tdlm/distill.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <numeric>

#include "tdlm/checkpoint.hpp"
#include "tdlm/ops.hpp"

namespace tdlm {

void DistillConfig::validate() const {
  if (!(temperature > 0)) throw ConfigError("temperature must be > 0");
  if (!(alpha >= 0 && alpha <= 1)) throw ConfigError("alpha must be in [0, 1]");
  if (!(learning_rate >= 0)) throw ConfigError("learning_rate must be >= 0");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (max_len == 1) throw ConfigError("max_len must be 0 or >= 2");
  if (samples_per_prompt == 0) throw ConfigError("samples_per_prompt must be >= 1");
  if (!(sample_temperature >= 0)) throw ConfigError("sample_temperature must be >= 0");
}

OptimizerConfig DistillConfig::optimizer_config() const {
  OptimizerConfig o;
  o.kind = optimizer;
  o.learning_rate = learning_rate;
  o.grad_clip = grad_clip;
  return o;
}

void TrainMetrics::write_csv(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << "epoch,train_loss,eval_loss,rouge_l,wall_time_s\n" << std::setprecision(17);
  for (const auto& r : rows)
    out << r.epoch << ',' << r.train_loss << ',' << r.eval_loss << ',' << r.rouge_l << ',' << r.wall_time_s << '\n';
  if (!out) throw IoError("write failed for " + path);
}

namespace {

void check_kd_shapes(Var s, const Tensor& t, std::span<const std::uint8_t> mask, Scalar tau) {
  if (!(tau > 0)) throw ConfigError("KD temperature must be > 0");
  if (s.rows() != t.rows() || s.cols() != t.cols())
    throw ShapeError("kd_loss: student " + shape_str(s.shape()) + " vs teacher " + shape_str(t.shape()));
  if (mask.size() != s.rows()) throw ShapeError("kd_loss: mask length does not match rows");
}

// Sum over unmasked rows of KL(p_T || p_S) at temperature tau.
Var kd_sum(Var student, const Tensor& teacher, std::span<const std::uint8_t> mask, Scalar tau) {
  check_kd_shapes(student, teacher, mask, tau);
  const std::size_t r = student.rows(), c = student.cols();
  auto sv = student.value();
  auto tv = teacher.data();
  // per masked row: p_S then p_T, kept for backward
  auto cache = std::make_shared<std::vector<Scalar>>();
  std::vector<std::size_t> rows_used;
  std::vector<Scalar> ls(c), lt(c);
  Scalar total = 0;
  for (std::size_t i = 0; i < r; ++i) {
    if (!mask[i]) continue;
    rows_used.push_back(i);
    auto log_softmax = [&](const Scalar* x, std::vector<Scalar>& out) {
      Scalar mx = x[0];
      for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
      Scalar z = 0;
      for (std::size_t j = 0; j < c; ++j) z += std::exp((x[j] - mx) / tau);
      const Scalar lse = std::log(z);
      for (std::size_t j = 0; j < c; ++j) out[j] = (x[j] - mx) / tau - lse;
    };
    log_softmax(sv.data() + i * c, ls);
    log_softmax(tv.data() + i * c, lt);
    Scalar kl = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const Scalar pt = std::exp(lt[j]);
      if (pt > 0) kl += pt * (lt[j] - ls[j]);
    }
    total += kl;
    for (std::size_t j = 0; j < c; ++j) cache->push_back(std::exp(ls[j]));
    for (std::size_t j = 0; j < c; ++j) cache->push_back(std::exp(lt[j]));
  }
  const auto ps = student.id();
  return student.graph().emit(
      {1}, {total}, {student},
      [ps, c, tau, cache, rows_used = std::move(rows_used)](Graph& g, std::uint32_t self) {
        const Scalar gy = g.grad_of(self)[0] / tau;
        auto gx = g.grad_of(ps);
        for (std::size_t k = 0; k < rows_used.size(); ++k) {
          const Scalar* p_s = cache->data() + 2 * k * c;
          const Scalar* p_t = p_s + c;
          Scalar* row = gx.data() + rows_used[k] * c;
          for (std::size_t j = 0; j < c; ++j) row[j] += gy * (p_s[j] - p_t[j]);
        }
      });
}

std::size_t count_mask(std::span<const std::uint8_t> mask) {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1));
}

std::vector<std::size_t> batch_order(std::span<const std::size_t> order, std::size_t n) {
  if (order.empty()) {
    std::vector<std::size_t> o(n);
    std::iota(o.begin(), o.end(), 0);
    return o;
  }
  if (order.size() != n) throw ContractError("batch order must list every batch");
  return {order.begin(), order.end()};
}

struct BatchLm {
  Var nll_sum;
  std::size_t tokens = 0;
  std::vector<Var> logits;
  std::vector<ShiftedRow> rows;
};

// Shared by SFT and KD so that alpha = 0 reproduces SFT bit for bit.
BatchLm batch_lm(const BoundModel& model, const Batch& b) {
  BatchLm out;
  for (std::size_t r = 0; r < b.rows; ++r) {
    out.rows.push_back(shift_row(b.row_tokens(r), b.row_mask(r)));
    const auto& row = out.rows.back();
    out.logits.push_back(forward(model, row.inputs));
    auto nll = masked_nll_sum(out.logits.back(), row.targets, row.mask);
    out.nll_sum = out.nll_sum.valid() ? add(out.nll_sum, nll) : nll;
    out.tokens += count_mask(row.mask);
  }
  if (out.tokens == 0) throw ContractError("batch has no completion tokens");
  return out;
}

}  // namespace

Var kd_loss(Var student_logits, const Tensor& teacher_logits, std::span<const std::uint8_t> mask, Scalar tau) {
  check_kd_shapes(student_logits, teacher_logits, mask, tau);
  const std::size_t n = count_mask(mask);
  if (n == 0) throw ContractError("kd_loss: every position is masked");
  return scale(kd_sum(student_logits, teacher_logits, mask, tau), Scalar(1) / static_cast<Scalar>(n));
}

SoftCeParts soft_ce_decomposition(Var student_logits, const Tensor& teacher_logits,
                                  std::span<const std::uint8_t> mask, Scalar tau) {
  SoftCeParts parts;
  parts.kl = kd_loss(student_logits, teacher_logits, mask, tau);
  const std::size_t r = teacher_logits.rows(), c = teacher_logits.cols();
  const auto n = static_cast<Scalar>(count_mask(mask));
  // teacher probabilities on unmasked rows, zero elsewhere
  Tensor weights({r, c}, Scalar(0));
  Scalar entropy = 0;
  for (std::size_t i = 0; i < r; ++i) {
    if (!mask[i]) continue;
    const Scalar* t = teacher_logits.data().data() + i * c;
    const Scalar mx = *std::max_element(t, t + c);
    Scalar z = 0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp((t[j] - mx) / tau);
    for (std::size_t j = 0; j < c; ++j) {
      const Scalar lp = (t[j] - mx) / tau - std::log(z);
      weights.at(i, j) = std::exp(lp);
      entropy -= weights.at(i, j) * lp;
    }
  }
  auto log_q = log_softmax_rows(scale(student_logits, 1 / tau));
  parts.soft_cross_entropy = scale(dot(log_q, weights), -1 / n);
  parts.teacher_entropy = entropy / n;
  return parts;
}

std::vector<PromptRecord> teacher_generate(const TransformerParams& teacher, std::span<const PromptRecord> prompts,
                                           const GenerationSettings& settings) {
  Tokenizer tok;
  std::vector<PromptRecord> out;
  out.reserve(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    PromptRecord r = prompts[i];
    GenerationSettings gs = settings;
    gs.seed = derive_seed(settings.seed, "teacher_generate/" + std::to_string(i));
    gs.stop_token = kEosToken;
    const auto prompt = tok.encode_prompt(r.prompt);
    const auto ids = prompt.size() < teacher.config.max_seq_len ? sample(teacher, prompt, gs) : TokenIds{};
    const bool finished = !ids.empty() && ids.back() == kEosToken;
    r.completion = tok.decode_completion(ids);
    if (!finished) r.set_meta("truncated", "true");
    out.push_back(std::move(r));
  }
  return out;
}

TeacherCache teacher_logits(const TransformerParams& teacher, std::span<const Batch> batches) {
  TeacherCache cache;
  for (const auto& b : batches) {
    auto& rows = cache.emplace_back();
    for (std::size_t r = 0; r < b.rows; ++r) {
      const auto t = b.row_tokens(r);
      rows.push_back(forward_logits(teacher, t.first(t.size() - 1)));
    }
  }
  return cache;
}

Scalar sft_epoch(TransformerParams& params, std::span<const Batch> batches, Optimizer& opt,
                 std::span<const std::size_t> order) {
  if (batches.empty()) return 0;
  Scalar total = 0;
  for (auto bi : batch_order(order, batches.size())) {
    Graph g;
    auto model = bind(g, params, true);
    auto lm = batch_lm(model, batches[bi]);
    auto loss = scale(lm.nll_sum, Scalar(1) / static_cast<Scalar>(lm.tokens));
    total += loss.item();
    g.backward(loss);
    opt.step(params);
    params.zero_grad();
  }
  return total / static_cast<Scalar>(batches.size());
}

Scalar distill_epoch(TransformerParams& student, const TransformerParams& teacher, std::span<const Batch> batches,
                     const DistillConfig& cfg, Optimizer& opt, const TeacherCache* cache,
                     std::span<const std::size_t> order) {
  cfg.validate();
  if (student.config.vocab_size != teacher.config.vocab_size)
    throw ContractError("distill: student vocab " + std::to_string(student.config.vocab_size) +
                        " != teacher vocab " + std::to_string(teacher.config.vocab_size));
  if (cache && cache->size() != batches.size()) throw ContractError("distill: teacher cache does not match batches");
  if (batches.empty()) return 0;
  const auto teacher_sum = params_checksum(teacher);
  Scalar total = 0;
  for (auto bi : batch_order(order, batches.size())) {
    const auto& b = batches[bi];
    Graph g;
    auto model = bind(g, student, true);
    auto lm = batch_lm(model, b);
    const Scalar inv = Scalar(1) / static_cast<Scalar>(lm.tokens);
    Var loss;
    if (cfg.alpha == 0) {
      loss = scale(lm.nll_sum, inv);
    } else {
      Var kd;
      for (std::size_t r = 0; r < b.rows; ++r) {
        const auto& row = lm.rows[r];
        const Tensor t = cache ? Tensor() : forward_logits(teacher, row.inputs);
        const Tensor& tl = cache ? (*cache)[bi][r] : t;
        auto term = kd_sum(lm.logits[r], tl, row.mask, cfg.temperature);
        kd = kd.valid() ? add(kd, term) : term;
      }
      loss = cfg.alpha == 1 ? scale(kd, inv)
                            : add(scale(kd, cfg.alpha * inv), scale(lm.nll_sum, (1 - cfg.alpha) * inv));
    }
    total += loss.item();
    g.backward(loss);
    opt.step(student);
    student.zero_grad();
  }
  if (params_checksum(teacher) != teacher_sum) throw ContractError("distill: teacher parameters changed");
  return total / static_cast<Scalar>(batches.size());
}

Var reverse_kl_surrogate(std::span<const Var> log_q, std::span<const Scalar> w, std::span<const std::size_t> group) {
  if (log_q.empty() || log_q.size() != w.size() || w.size() != group.size())
    throw ContractError("reverse_kl_surrogate: mismatched or empty inputs");
  std::map<std::size_t, std::pair<Scalar, Scalar>> stats;  // group -> (sum, count)
  for (std::size_t i = 0; i < w.size(); ++i) {
    stats[group[i]].first += w[i];
    stats[group[i]].second += 1;
  }
  const auto n = static_cast<Scalar>(w.size());
  Var surrogate;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const auto& [gs, gn] = stats[group[i]];
    auto term = scale(log_q[i], (w[i] - gs / gn) / n);
    surrogate = surrogate.valid() ? add(surrogate, term) : term;
  }
  return surrogate;
}

ReverseKlMetrics reverse_kl_step(TransformerParams& student, const TransformerParams& teacher,
                                 std::span<const PromptRecord> prompts, const DistillConfig& cfg, Optimizer& opt,
                                 Rng& rng) {
  cfg.validate();
  if (cfg.direction != KdDirection::Reverse) throw ContractError("reverse_kl_step needs direction = reverse");
  if (student.config.vocab_size != teacher.config.vocab_size) throw ContractError("distill: vocab mismatch");
  Tokenizer tok;
  ReverseKlMetrics m;
  struct Sampled {
    TokenIds tokens;
    std::size_t prompt_len;
    std::size_t group;
  };
  std::vector<Sampled> samples;
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    const auto prompt = tok.encode_prompt(prompts[p].prompt);
    for (std::size_t k = 0; k < cfg.samples_per_prompt; ++k) {
      GenerationSettings gs;
      gs.temperature = cfg.sample_temperature;
      gs.max_new_tokens = cfg.max_new_tokens;
      gs.seed = rng.next();
      TokenIds out;
      if (prompt.size() < student.config.max_seq_len) out = sample(student, prompt, gs);
      if (out.empty()) {
        ++m.skipped;
        continue;
      }
      TokenIds seq = prompt;
      seq.insert(seq.end(), out.begin(), out.end());
      samples.push_back({std::move(seq), prompt.size(), p});
    }
  }
  if (samples.empty()) return m;

  Graph g;
  auto model = bind(g, student, true);
  std::vector<Var> log_q;
  std::vector<Scalar> w;
  for (const auto& s : samples) {
    log_q.push_back(sum(sequence_log_probs(model, s.tokens, s.prompt_len)));
    const auto lp = sequence_log_probs(teacher, s.tokens, s.prompt_len);
    w.push_back(log_q.back().item() - std::accumulate(lp.begin(), lp.end(), Scalar(0)));
  }
  std::vector<std::size_t> group;
  for (const auto& s : samples) group.push_back(s.group);
  const auto surrogate = reverse_kl_surrogate(log_q, w, group);
  const auto n = static_cast<Scalar>(samples.size());
  for (const Scalar wi : w) {
    m.reverse_kl_estimate += wi / n;
    m.mean_weight += std::abs(wi) / n;
  }
  m.samples = samples.size();
  g.backward(surrogate);
  opt.step(student);
  student.zero_grad();
  return m;
}

Batches training_batches(std::span<const PromptRecord> train, const DistillConfig& cfg, const ModelConfig& model) {
  const std::size_t cap = model.max_seq_len + 1;
  const std::size_t len = cfg.max_len == 0 ? cap : std::min(cfg.max_len, cap);
  return batchify(train, Tokenizer{}, cfg.batch_size, len);
}

TrainMetrics run_distillation(const DistillConfig& cfg, const DistillRunInputs& in, const std::string& out_dir,
                              TransformerParams* final_params) {
  namespace fs = std::filesystem;
  cfg.validate();
  in.student_config.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  const std::string metrics_path = (fs::path(out_dir) / "metrics.csv").string();
  TrainMetrics metrics;
  metrics.write_csv(metrics_path);  // fails early when out_dir is unusable
  if (in.train.empty()) throw InputError("training set is empty");

  auto student = in.student_init ? *in.student_init
                                 : init_params(in.student_config, derive_seed(cfg.seed, "student_init"));
  std::vector<PromptRecord> train = in.train;
  const TeacherCache* cache = in.cache;
  if (cfg.use_teacher_sequences && in.teacher) {
    GenerationSettings gs;
    gs.max_new_tokens = cfg.max_new_tokens;
    gs.seed = derive_seed(cfg.seed, "teacher_sequences");
    train = teacher_generate(*in.teacher, train, gs);
    cache = nullptr;
  }
  const auto& eval = in.eval.empty() ? train : in.eval;
  const std::size_t eval_len = cfg.max_len == 0 ? student.config.max_seq_len + 1 : cfg.max_len;
  const auto batches = training_batches(train, cfg, student.config);
  const bool forward_kd = in.teacher && cfg.direction == KdDirection::Forward && cfg.alpha > 0;
  TeacherCache own_cache;
  if (forward_kd && !cache && cfg.epochs > 0) {
    own_cache = teacher_logits(*in.teacher, batches.batches);
    cache = &own_cache;
  }

  Optimizer opt(cfg.optimizer_config());
  Rng order_rng(derive_seed(cfg.seed, "batch_order"));
  Rng sample_rng(derive_seed(cfg.seed, "reverse_sampling"));
  std::vector<std::size_t> order(batches.batches.size());
  std::vector<std::size_t> prompt_order(train.size());
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    EpochMetrics row;
    row.epoch = epoch;
    if (in.teacher && cfg.direction == KdDirection::Reverse) {
      std::iota(prompt_order.begin(), prompt_order.end(), 0);
      order_rng.shuffle(prompt_order.begin(), prompt_order.end());
      Scalar est = 0;
      std::size_t steps = 0;
      for (std::size_t b = 0; b < prompt_order.size(); b += cfg.batch_size) {
        std::vector<PromptRecord> chunk;
        for (std::size_t i = b; i < std::min(prompt_order.size(), b + cfg.batch_size); ++i)
          chunk.push_back(train[prompt_order[i]]);
        est += reverse_kl_step(student, *in.teacher, chunk, cfg, opt, sample_rng).reverse_kl_estimate;
        ++steps;
      }
      row.train_loss = steps ? est / static_cast<Scalar>(steps) : 0;
    } else {
      std::iota(order.begin(), order.end(), 0);
      order_rng.shuffle(order.begin(), order.end());
      row.train_loss = forward_kd ? distill_epoch(student, *in.teacher, batches.batches, cfg, opt, cache, order)
                                  : sft_epoch(student, batches.batches, opt, order);
    }
    row.eval_loss = dataset_nll(student, eval, eval_len).mean();
    EvalSettings es = cfg.eval;
    es.max_len = eval_len;
    Scalar f = 0;
    std::size_t n = 0;
    const std::size_t limit = es.rouge_samples == 0 ? eval.size() : std::min(es.rouge_samples, eval.size());
    for (std::size_t i = 0; i < limit; ++i) {
      if (eval[i].prompt.size() + 1 >= student.config.max_seq_len) continue;
      f += rouge_l(generate_completion(student, eval[i].prompt, es.max_new_tokens), eval[i].completion).f;
      ++n;
    }
    row.rouge_l = n ? f / static_cast<Scalar>(n) : 0;
    if (cfg.record_wall_time)
      row.wall_time_s = std::chrono::duration<Scalar>(std::chrono::steady_clock::now() - start).count();
    metrics.rows.push_back(row);
    metrics.write_csv(metrics_path);
  }

  save_checkpoint(student, (fs::path(out_dir) / "student.ckpt").string());
  EvalSettings es = cfg.eval;
  es.max_len = eval_len;
  const auto report = evaluate(student, eval, es, in.teacher && in.teacher_retention ? in.teacher : nullptr);
  report.write_jsonl((fs::path(out_dir) / "eval.jsonl").string());
  report.write_csv((fs::path(out_dir) / "eval.csv").string());
  if (final_params) *final_params = std::move(student);
  return metrics;
}

}  // namespace tdlm
