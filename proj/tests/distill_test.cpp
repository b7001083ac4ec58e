#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tdlm/checkpoint.hpp"
#include "tdlm/distill.hpp"
#include "tdlm/gradcheck.hpp"
#include "tdlm/ops.hpp"

using namespace tdlm;
namespace fs = std::filesystem;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, Scalar lo = -3, Scalar hi = 3) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = lo + (hi - lo) * static_cast<Scalar>(rng.uniform());
  return t;
}

Mask random_mask(std::size_t n, Rng& rng) {
  Mask m(n);
  for (auto& v : m) v = rng.below(3) != 0;
  m[rng.below(n)] = 1;
  return m;
}

// Same next-token distribution softmax(logits) at every position.
TransformerParams constant_model(const std::vector<Scalar>& logits, std::size_t ctx = 16) {
  ModelConfig c;
  c.vocab_size = logits.size();
  c.n_layers = 1;
  c.d_model = 2;
  c.n_heads = 1;
  c.max_seq_len = ctx;
  c.mlp_hidden = 2;
  auto p = init_params(c, 1);
  for (auto& v : p.final_norm_gain.data()) v = 0;
  p.final_norm_bias = Tensor({2}, std::vector<Scalar>{1, 0});
  for (std::size_t j = 0; j < logits.size(); ++j) {
    p.output_projection.at(0, j) = logits[j];
    p.output_projection.at(1, j) = 0;
  }
  return p;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 1;
  c.d_model = 16;
  c.n_heads = 2;
  c.max_seq_len = 32;
  c.mlp_hidden = 32;
  return c;
}

PromptRecord rec(std::string p, std::string c) {
  PromptRecord r;
  r.prompt = std::move(p);
  r.completion = std::move(c);
  return r;
}

std::vector<PromptRecord> small_corpus(std::size_t n) {
  std::vector<PromptRecord> out;
  const char* words[] = {"red", "blue", "green", "gold"};
  for (std::size_t i = 0; i < n; ++i) out.push_back(rec(std::string("c") + std::to_string(i % 4), words[i % 4]));
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Scalar kd_value(const Tensor& s, const Tensor& t, const Mask& m, Scalar tau) {
  Graph g;
  return kd_loss(g.constant(s), t, m, tau).item();
}

}  // namespace

TEST(KdLoss, IdenticalDistributionsGiveZero) {
  Rng rng(1);
  auto s = random_tensor({5, 7}, rng);
  Mask m(5, 1);
  EXPECT_NEAR(kd_value(s, s, m, 2.0), 0.0, 1e-15);
}

TEST(KdLoss, HandExample) {
  // p_T = (0.75, 0.25), p_S uniform
  auto t = Tensor::matrix(1, 2, {std::log(3.0), 0});
  auto s = Tensor::matrix(1, 2, {0, 0});
  EXPECT_NEAR(kd_value(s, t, Mask{1}, 1.0), 0.130812, 1e-6);
  const Scalar exact = 0.75 * std::log(1.5) + 0.25 * std::log(0.5);
  EXPECT_NEAR(kd_value(s, t, Mask{1}, 1.0), exact, 1e-15);
}

TEST(KdLoss, LargeTemperatureVanishes) {
  Rng rng(2);
  auto s = random_tensor({4, 9}, rng), t = random_tensor({4, 9}, rng);
  Mask m(4, 1);
  Scalar prev = kd_value(s, t, m, 1.0);
  for (Scalar tau : {10.0, 100.0, 1000.0}) {
    const Scalar v = kd_value(s, t, m, tau);
    EXPECT_LT(v, prev);
    prev = v;
  }
  EXPECT_LT(prev, 1e-5);
}

TEST(KdLoss, Errors) {
  Graph g;
  auto s = g.constant(Tensor::matrix(2, 2, {0, 1, 2, 3}));
  auto t = Tensor::matrix(2, 2, {0, 0, 0, 0});
  EXPECT_THROW(kd_loss(s, t, Mask{0, 0}, 1.0), ContractError);
  EXPECT_THROW(kd_loss(s, t, Mask{1, 1}, 0.0), ConfigError);
  EXPECT_THROW(kd_loss(s, t, Mask{1, 1}, -1.0), ConfigError);
  EXPECT_THROW(kd_loss(s, Tensor::matrix(2, 3, {0, 0, 0, 0, 0, 0}), Mask{1, 1}, 1.0), ShapeError);
}

TEST(KdLoss, NonnegativeAndMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const std::size_t rows = 1 + rng.below(5), cols = 2 + rng.below(8);
    auto s = random_tensor({rows, cols}, rng), t = random_tensor({rows, cols}, rng);
    const auto m = random_mask(rows, rng);
    const Scalar tau = 0.5 + 3 * rng.uniform();
    ASSERT_GE(kd_value(s, t, m, tau), 0.0);
    const auto err = grad_check([&](Graph& g) { return kd_loss(g.param(s), t, m, tau); }, s, 1e-5);
    ASSERT_LE(err, 1e-6) << "seed " << seed;
  }
}

TEST(KdLoss, MaskedRowsReceiveNoGradient) {
  Rng rng(3);
  auto s = random_tensor({3, 4}, rng), t = random_tensor({3, 4}, rng);
  Graph g;
  auto x = g.param(s);
  g.backward(kd_loss(x, t, Mask{1, 0, 1}, 2.0));
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(s.grad()[4 + j], 0.0);
}

TEST(SoftCe, DecompositionIdentity) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(1000 + seed);
    const std::size_t rows = 1 + rng.below(5), cols = 2 + rng.below(8);
    auto s = random_tensor({rows, cols}, rng), t = random_tensor({rows, cols}, rng);
    const auto m = random_mask(rows, rng);
    const Scalar tau = 0.5 + 3 * rng.uniform();
    Graph g1, g2;
    auto x1 = g1.leaf(s), x2 = g2.leaf(s);
    auto parts = soft_ce_decomposition(x1, t, m, tau);
    ASSERT_NEAR(parts.kl.item(), parts.soft_cross_entropy.item() - parts.teacher_entropy, 1e-10);
    g1.propagate(parts.kl);
    auto parts2 = soft_ce_decomposition(x2, t, m, tau);
    g2.propagate(parts2.soft_cross_entropy);
    const auto a = x1.grad(), b = x2.grad();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a[i], b[i], 1e-10);
  }
}

TEST(SoftCe, UniformTeacherAndIdenticalStudent) {
  Rng rng(4);
  auto t = Tensor::matrix(2, 4, {1, 1, 1, 1, -2, -2, -2, -2});
  Graph g;
  auto parts = soft_ce_decomposition(g.constant(t), t, Mask{1, 1}, 1.5);
  EXPECT_NEAR(parts.teacher_entropy, std::log(4.0), 1e-14);
  EXPECT_NEAR(parts.kl.item(), 0.0, 1e-15);
  EXPECT_NEAR(parts.soft_cross_entropy.item(), parts.teacher_entropy, 1e-14);
}

TEST(TeacherGenerate, GreedyIsDeterministicAndPreservesPrompts) {
  auto teacher = init_params(tiny_config(), 5, {0.5, 1.0});
  auto prompts = small_corpus(7);
  prompts[2].set_meta("id", "two");
  GenerationSettings gs;
  gs.max_new_tokens = 10;
  auto a = teacher_generate(teacher, prompts, gs), b = teacher_generate(teacher, prompts, gs);
  ASSERT_EQ(a.size(), prompts.size());
  std::ostringstream sa, sb;
  write_dataset(sa, a);
  write_dataset(sb, b);
  EXPECT_EQ(sa.str(), sb.str());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].prompt, prompts[i].prompt);
    EXPECT_EQ(a[i].completion, generate_completion(teacher, prompts[i].prompt, 10));
  }
  EXPECT_EQ(*a[2].find_meta("id"), "two");
}

TEST(TeacherGenerate, RiggedTeacherCompletions) {
  std::vector<Scalar> logits(259, 0.0);
  logits['z'] = 4;
  GenerationSettings gs;
  gs.max_new_tokens = 5;
  auto out = teacher_generate(constant_model(logits), std::vector<PromptRecord>{rec("p", "")}, gs);
  EXPECT_EQ(out[0].completion, "zzzzz");
  ASSERT_NE(out[0].find_meta("truncated"), nullptr);
  EXPECT_EQ(*out[0].find_meta("truncated"), "true");

  logits[kEosToken] = 9;
  out = teacher_generate(constant_model(logits), std::vector<PromptRecord>{rec("p", "")}, gs);
  EXPECT_EQ(out[0].completion, "");
  EXPECT_EQ(out[0].find_meta("truncated"), nullptr);
}

TEST(Sft, ZeroLearningRateLeavesParametersUnchanged) {
  auto p = init_params(tiny_config(), 6);
  const auto before = params_checksum(p);
  DistillConfig cfg;
  cfg.batch_size = 4;
  const auto batches = training_batches(small_corpus(8), cfg, p.config);
  OptimizerConfig oc;
  oc.learning_rate = 0;
  Optimizer opt(oc);
  sft_epoch(p, batches.batches, opt);
  EXPECT_EQ(params_checksum(p), before);
}

TEST(Sft, SgdStepIsMinusLearningRateTimesGradient) {
  auto p = init_params(tiny_config(), 7);
  DistillConfig cfg;
  cfg.batch_size = 8;
  const auto batches = training_batches(small_corpus(8), cfg, p.config);
  ASSERT_EQ(batches.batches.size(), 1u);
  // reference gradient of the token-mean completion NLL
  auto ref = p;
  {
    Graph g;
    auto model = bind(g, ref, true);
    const auto& b = batches.batches[0];
    Var total;
    for (std::size_t r = 0; r < b.rows; ++r) {
      const auto row = shift_row(b.row_tokens(r), b.row_mask(r));
      auto nll = masked_nll_sum(forward(model, row.inputs), row.targets, row.mask);
      total = total.valid() ? add(total, nll) : nll;
    }
    g.backward(scale(total, 1.0 / static_cast<Scalar>(b.masked_count())));
  }
  OptimizerConfig oc;
  oc.kind = OptimizerKind::Sgd;
  oc.learning_rate = 0.125;
  oc.grad_clip = 0;
  Optimizer opt(oc);
  auto before = p;
  sft_epoch(p, batches.batches, opt);
  std::vector<const Tensor*> after_t, before_t, grad_t;
  p.visit([&](const std::string&, const Tensor& t) { after_t.push_back(&t); });
  before.visit([&](const std::string&, const Tensor& t) { before_t.push_back(&t); });
  ref.visit([&](const std::string&, const Tensor& t) { grad_t.push_back(&t); });
  for (std::size_t k = 0; k < after_t.size(); ++k) {
    const auto g = grad_t[k]->grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      ASSERT_NEAR(after_t[k]->data()[i], before_t[k]->data()[i] - 0.125 * g[i], 1e-15);
  }
}

TEST(Sft, LossDecreasesOnSmallCorpus) {
  auto p = init_params(tiny_config(), 8);
  DistillConfig cfg;
  cfg.batch_size = 10;
  const auto batches = training_batches(small_corpus(50), cfg, p.config);
  OptimizerConfig oc;
  oc.learning_rate = 1e-2;
  Optimizer opt(oc);
  std::vector<Scalar> losses;
  for (int e = 0; e < 5; ++e) losses.push_back(sft_epoch(p, batches.batches, opt));
  for (std::size_t i = 1; i < losses.size(); ++i) EXPECT_LT(losses[i], losses[i - 1]);
}

TEST(DistillEpoch, AlphaZeroReproducesSftBitForBit) {
  auto teacher = init_params(tiny_config(), 9);
  auto a = init_params(tiny_config(), 10), b = a;
  DistillConfig cfg;
  cfg.alpha = 0;
  cfg.batch_size = 4;
  const auto batches = training_batches(small_corpus(12), cfg, a.config);
  Optimizer oa(cfg.optimizer_config()), ob(cfg.optimizer_config());
  const std::vector<std::size_t> order{2, 0, 1};
  for (int e = 0; e < 2; ++e) {
    const auto la = distill_epoch(a, teacher, batches.batches, cfg, oa, nullptr, order);
    const auto lb = sft_epoch(b, batches.batches, ob, order);
    EXPECT_EQ(la, lb);
  }
  EXPECT_EQ(params_checksum(a), params_checksum(b));
}

TEST(DistillEpoch, PureKdOnItselfDoesNotDrift) {
  auto teacher = init_params(tiny_config(), 11, {0.5, 1.0});
  auto student = teacher;
  DistillConfig cfg;
  cfg.alpha = 1;
  cfg.batch_size = 4;
  const auto batches = training_batches(small_corpus(12), cfg, student.config);
  Optimizer opt(cfg.optimizer_config());
  const auto before = params_checksum(teacher);
  for (int e = 0; e < 3; ++e) distill_epoch(student, teacher, batches.batches, cfg, opt);
  EXPECT_EQ(params_checksum(student), before);
  EXPECT_EQ(params_checksum(teacher), before);
}

TEST(DistillEpoch, CacheMatchesLiveTeacher) {
  auto teacher = init_params(tiny_config(), 12, {0.5, 1.0});
  auto a = init_params(tiny_config(), 13), b = a;
  DistillConfig cfg;
  cfg.batch_size = 4;
  const auto batches = training_batches(small_corpus(12), cfg, a.config);
  const auto cache = teacher_logits(teacher, batches.batches);
  Optimizer oa(cfg.optimizer_config()), ob(cfg.optimizer_config());
  EXPECT_EQ(distill_epoch(a, teacher, batches.batches, cfg, oa, &cache),
            distill_epoch(b, teacher, batches.batches, cfg, ob));
  EXPECT_EQ(params_checksum(a), params_checksum(b));
}

TEST(DistillEpoch, VocabularyMismatchIsRejected) {
  auto teacher = constant_model(std::vector<Scalar>(300, 0.0));
  auto student = init_params(tiny_config(), 14);
  DistillConfig cfg;
  const auto batches = training_batches(small_corpus(4), cfg, student.config);
  Optimizer opt(cfg.optimizer_config());
  EXPECT_THROW(distill_epoch(student, teacher, batches.batches, cfg, opt), ContractError);
}

TEST(ReverseKl, SurrogateMatchesFiniteDifferences) {
  ModelConfig c;
  c.vocab_size = 7;
  c.n_layers = 1;
  c.d_model = 4;
  c.n_heads = 2;
  c.max_seq_len = 12;
  c.mlp_hidden = 8;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    auto p = init_params(c, seed, {0.5, 1.0});
    const std::size_t n = 2 + rng.below(4);
    std::vector<TokenIds> seqs(n);
    std::vector<std::size_t> prompt_len(n), group(n);
    std::vector<Scalar> w(n);
    for (std::size_t i = 0; i < n; ++i) {
      seqs[i].resize(2 + rng.below(8));
      for (auto& t : seqs[i]) t = static_cast<std::int32_t>(rng.below(7));
      prompt_len[i] = 1 + rng.below(seqs[i].size() - 1);
      group[i] = rng.below(2);
      w[i] = 4 * rng.uniform() - 2;
    }
    auto build = [&](Graph& g) {
      auto m = bind(g, p, true);
      std::vector<Var> log_q;
      for (std::size_t i = 0; i < n; ++i) log_q.push_back(sum(sequence_log_probs(m, seqs[i], prompt_len[i])));
      return reverse_kl_surrogate(log_q, w, group);
    };
    for (Tensor* t : {&p.token_embedding, &p.layers[0].wq, &p.layers[0].mlp_w1, &p.output_projection})
      ASSERT_LE(grad_check(build, *t, 1e-5), 1e-6) << "seed " << seed;
  }
}

TEST(ReverseKl, SurrogateCentersWeightsPerGroup) {
  Graph g;
  std::vector<Var> lq{g.constant(Tensor({1}, std::vector<Scalar>{-1})), g.constant(Tensor({1}, std::vector<Scalar>{-2})),
                      g.constant(Tensor({1}, std::vector<Scalar>{-3}))};
  // group 0: w 1, 3 -> centered -1, 1; group 1: single sample -> 0
  const std::vector<Scalar> w{1, 3, 5};
  const std::vector<std::size_t> group{0, 0, 1};
  EXPECT_DOUBLE_EQ(reverse_kl_surrogate(lq, w, group).item(), (-1 * -1 + 1 * -2 + 0 * -3) / 3.0);
  EXPECT_THROW(reverse_kl_surrogate(lq, std::vector<Scalar>{1, 2}, group), ContractError);
}

TEST(ReverseKl, StudentEqualToTeacherHasZeroWeight) {
  auto teacher = init_params(tiny_config(), 15, {0.5, 1.0});
  auto student = teacher;
  DistillConfig cfg;
  cfg.direction = KdDirection::Reverse;
  cfg.samples_per_prompt = 4;
  cfg.max_new_tokens = 6;
  Optimizer opt(cfg.optimizer_config());
  Rng rng(1);
  const auto m = reverse_kl_step(student, teacher, small_corpus(3), cfg, opt, rng);
  EXPECT_GT(m.samples, 0u);
  EXPECT_EQ(m.mean_weight, 0.0);
  EXPECT_EQ(params_checksum(student), params_checksum(teacher));
}

TEST(ReverseKl, BaselineEstimatorIsUnbiased) {
  // one-token completions from q = softmax(theta) over {a, b}; teacher p = (0.8, 0.2)
  std::vector<Scalar> ql(259, -40.0), pl(259, -40.0);
  ql['a'] = 0.7;
  ql['b'] = 0;
  pl['a'] = std::log(0.8);
  pl['b'] = std::log(0.2);
  auto student = constant_model(ql, 4);
  const auto teacher = constant_model(pl, 4);
  const Scalar qa = 1 / (1 + std::exp(-0.7)), qb = 1 - qa;
  const Scalar la = std::log(qa / 0.8), lb = std::log(qb / 0.2);
  const Scalar kl = qa * la + qb * lb;
  const Scalar grad_a = qa * (la - kl);
  // per-sample term X = (w - KL) * (1[a] - q_a), exact moments over the two outcomes
  const Scalar xa = (la - kl) * (1 - qa), xb = (lb - kl) * (-qa);
  const Scalar var = qa * xa * xa + qb * xb * xb - grad_a * grad_a;

  const std::size_t n = 10000;
  DistillConfig cfg;
  cfg.direction = KdDirection::Reverse;
  cfg.samples_per_prompt = n;
  cfg.max_new_tokens = 1;
  cfg.optimizer = OptimizerKind::Sgd;
  cfg.learning_rate = 1;
  cfg.grad_clip = 0;
  Optimizer opt(cfg.optimizer_config());
  Rng rng(77);
  const Scalar before = student.output_projection.at(0, 'a');
  const auto m = reverse_kl_step(student, teacher, std::vector<PromptRecord>{rec("q", "")}, cfg, opt, rng);
  ASSERT_EQ(m.samples, n);
  const Scalar estimate = before - student.output_projection.at(0, 'a');
  EXPECT_NEAR(estimate, grad_a, 5 * std::sqrt(var / n));
  EXPECT_NEAR(m.reverse_kl_estimate, kl, 5 * std::sqrt((qa * la * la + qb * lb * lb - kl * kl) / n));
}

TEST(ReverseKl, SeeksOneModeOfBimodalTeacher) {
  // Teacher: first token uniform over {'0','1'}, second token copies the first.
  ModelConfig c;
  c.n_layers = 1;
  c.d_model = 4;
  c.n_heads = 1;
  c.max_seq_len = 8;
  c.mlp_hidden = 4;
  auto teacher = init_params(c, 3);
  for (auto* t : {&teacher.layers[0].wo, &teacher.layers[0].mlp_w2, &teacher.layers[0].mlp_b2,
                  &teacher.token_embedding, &teacher.position_embedding, &teacher.output_projection})
    for (auto& v : t->data()) v = 0;
  auto emb = [&](int tok, std::array<Scalar, 4> v) {
    for (int i = 0; i < 4; ++i) teacher.token_embedding.at(tok, i) = v[i];
  };
  emb(kBosToken, {1, -1, 0, 0});
  emb('q', {1, -1, 0, 0});
  emb('0', {0, 0, 1, -1});
  emb('1', {0, 0, -1, 1});
  teacher.output_projection.at(0, '0') = 20;
  teacher.output_projection.at(0, '1') = 20;
  teacher.output_projection.at(2, '0') = 20;
  teacher.output_projection.at(2, '1') = -20;

  auto entropy = [](std::span<const Scalar> logits) {
    Scalar mx = logits[0], z = 0, h = 0;
    for (auto v : logits) mx = std::max(mx, v);
    for (auto v : logits) z += std::exp(v - mx);
    for (auto v : logits) {
      const Scalar lp = v - mx - std::log(z);
      h -= std::exp(lp) * lp;
    }
    return h;
  };
  auto softmax = [](std::span<const Scalar> logits) {
    std::vector<Scalar> p(logits.begin(), logits.end());
    Scalar mx = *std::max_element(p.begin(), p.end()), z = 0;
    for (auto& v : p) z += (v = std::exp(v - mx));
    for (auto& v : p) v /= z;
    return p;
  };
  // exact entropy of the teacher's two-token continuation
  const TokenIds prompt{kBosToken, 'q'};
  const auto first = forward_logits(teacher, prompt);
  const std::span<const Scalar> first_row(first.data().data() + 259, 259);
  const auto p1 = softmax(first_row);
  Scalar h_teacher = entropy(first_row);
  for (int a = 0; a < 259; ++a) {
    if (a == kEosToken) continue;
    TokenIds seq{kBosToken, 'q', a};
    const auto l = forward_logits(teacher, seq);
    h_teacher += p1[a] * entropy(std::span<const Scalar>(l.data().data() + 2 * 259, 259));
  }
  ASSERT_NEAR(h_teacher, std::log(2.0), 1e-6);

  // Factorized student: the same distribution at each position.
  std::vector<Scalar> init(259, -30.0);
  init['0'] = 0;
  init['1'] = 0;
  const auto shape = constant_model(init, 8);
  auto student = shape;
  auto student_entropy = [&] {
    std::vector<Scalar> row(259);
    for (int j = 0; j < 259; ++j) row[j] = student.output_projection.at(0, j);
    return 2 * entropy(row);
  };
  ASSERT_GT(student_entropy(), h_teacher);

  DistillConfig cfg;
  cfg.direction = KdDirection::Reverse;
  cfg.samples_per_prompt = 32;
  cfg.max_new_tokens = 2;
  cfg.learning_rate = 0.05;
  Optimizer opt(cfg.optimizer_config());
  Rng rng(5);
  const std::vector<PromptRecord> prompts{rec("q", "")};
  for (int step = 0; step < 300; ++step) {
    reverse_kl_step(student, teacher, prompts, cfg, opt, rng);
    auto next = shape;
    for (int j = 0; j < 259; ++j) next.output_projection.at(0, j) = student.output_projection.at(0, j);
    student = next;
  }
  EXPECT_LT(student_entropy(), h_teacher);
}

TEST(RunDistillation, DeterministicOutputs) {
  auto teacher = init_params(tiny_config(), 16, {0.5, 1.0});
  DistillRunInputs in;
  in.student_config = tiny_config();
  in.teacher = &teacher;
  in.train = small_corpus(12);
  in.eval = small_corpus(4);
  DistillConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.seed = 3;
  cfg.eval.max_new_tokens = 8;
  const auto base = fs::temp_directory_path() / "tdlm_distill_test";
  fs::remove_all(base);
  auto m1 = run_distillation(cfg, in, (base / "a").string());
  auto m2 = run_distillation(cfg, in, (base / "b").string());
  ASSERT_EQ(m1.rows.size(), 2u);
  for (const char* f : {"metrics.csv", "student.ckpt", "eval.jsonl", "eval.csv"})
    EXPECT_EQ(slurp(base / "a" / f), slurp(base / "b" / f)) << f;
  EXPECT_EQ(m1.rows[1].wall_time_s, 0.0);
}

TEST(RunDistillation, ZeroEpochsWritesInitialStudent) {
  DistillRunInputs in;
  in.student_config = tiny_config();
  in.train = small_corpus(4);
  DistillConfig cfg;
  cfg.epochs = 0;
  cfg.seed = 9;
  cfg.eval.max_new_tokens = 4;
  const auto dir = fs::temp_directory_path() / "tdlm_distill_zero";
  fs::remove_all(dir);
  auto m = run_distillation(cfg, in, dir.string());
  EXPECT_TRUE(m.rows.empty());
  EXPECT_EQ(slurp(dir / "metrics.csv"), "epoch,train_loss,eval_loss,rouge_l,wall_time_s\n");
  EXPECT_EQ(params_checksum(load_checkpoint((dir / "student.ckpt").string())),
            params_checksum(init_params(tiny_config(), derive_seed(9, "student_init"))));
}

TEST(RunDistillation, UnwritableOutputDirectoryFailsBeforeTraining) {
  const auto file = fs::temp_directory_path() / "tdlm_distill_blocker";
  std::ofstream(file) << "x";
  DistillRunInputs in;
  in.student_config = tiny_config();
  in.train = small_corpus(4);
  DistillConfig cfg;
  EXPECT_THROW(run_distillation(cfg, in, (file / "sub").string()), IoError);
}
