#include "tdlm/evalmetrics.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

#include "json.hpp"
#include "tdlm/ops.hpp"
#include "tdlm/quant.hpp"

namespace tdlm {

std::vector<std::string_view> split_words(std::string_view text) {
  std::vector<std::string_view> words;
  std::size_t i = 0;
  auto space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
  while (i < text.size()) {
    while (i < text.size() && space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !space(text[i])) ++i;
    if (i > start) words.push_back(text.substr(start, i - start));
  }
  return words;
}

std::size_t lcs_length(std::span<const std::string_view> a, std::span<const std::string_view> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

RougeScore rouge_l(std::string_view candidate, std::string_view reference) {
  const auto c = split_words(candidate), r = split_words(reference);
  RougeScore s;
  if (c.empty() || r.empty()) return s;
  const auto l = static_cast<Scalar>(lcs_length(c, r));
  s.precision = l / static_cast<Scalar>(c.size());
  s.recall = l / static_cast<Scalar>(r.size());
  s.f = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0;
  return s;
}

Scalar NllTotals::mean() const {
  if (tokens == 0) throw ContractError("no completion tokens to average");
  return nll / static_cast<Scalar>(tokens);
}

NllTotals dataset_nll(const TransformerParams& params, std::span<const PromptRecord> records,
                      std::size_t max_len) {
  Tokenizer tok;
  NllTotals totals;
  const std::size_t len = std::min(max_len, params.config.max_seq_len + 1);
  const auto batches = batchify(records, tok, 1, len);
  for (const auto& b : batches.batches) {
    const auto row = shift_row(b.row_tokens(0), b.row_mask(0));
    Graph g;
    auto logits = forward(bind(g, params), row.inputs);
    totals.nll += masked_nll_sum(logits, row.targets, row.mask).item();
    totals.tokens += static_cast<std::size_t>(std::count(row.mask.begin(), row.mask.end(), 1));
  }
  return totals;
}

Scalar perplexity(const TransformerParams& params, std::span<const PromptRecord> records, std::size_t max_len) {
  if (records.empty()) throw ContractError("perplexity: empty dataset");
  return std::exp(dataset_nll(params, records, max_len).mean());
}

std::optional<Scalar> retention(std::span<const Scalar> student, std::span<const Scalar> teacher) {
  if (student.empty() || teacher.empty()) throw ContractError("retention: empty score list");
  const Scalar ms = std::accumulate(student.begin(), student.end(), Scalar(0)) / static_cast<Scalar>(student.size());
  const Scalar mt = std::accumulate(teacher.begin(), teacher.end(), Scalar(0)) / static_cast<Scalar>(teacher.size());
  if (mt == 0) return std::nullopt;
  return 100 * ms / mt;
}

std::string generate_completion(const TransformerParams& params, std::string_view prompt,
                                std::size_t max_new_tokens) {
  Tokenizer tok;
  GenerationSettings gs;
  gs.temperature = 0;
  gs.max_new_tokens = max_new_tokens;
  const auto out = sample(params, tok.encode_prompt(prompt), gs);
  return tok.decode_completion(out);
}

EvalReport evaluate(const TransformerParams& params, std::span<const PromptRecord> records,
                    const EvalSettings& settings, const TransformerParams* teacher) {
  if (records.empty()) throw ContractError("evaluate: empty dataset");
  EvalReport report;
  std::vector<Scalar> student_f, teacher_f;
  const std::size_t n = settings.rouge_samples == 0 ? records.size() : std::min(settings.rouge_samples, records.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = records[i];
    if (r.prompt.size() + 1 >= params.config.max_seq_len) {
      ++report.skipped;
      continue;
    }
    EvalExample ex;
    ex.prompt = r.prompt;
    ex.reference = r.completion;
    ex.candidate = generate_completion(params, r.prompt, settings.max_new_tokens);
    ex.rouge = rouge_l(ex.candidate, ex.reference);
    student_f.push_back(ex.rouge.f);
    if (teacher) teacher_f.push_back(rouge_l(generate_completion(*teacher, r.prompt, settings.max_new_tokens), r.completion).f);
    report.examples.push_back(std::move(ex));
  }
  if (!student_f.empty())
    report.mean_rouge_l_f = std::accumulate(student_f.begin(), student_f.end(), Scalar(0)) / static_cast<Scalar>(student_f.size());
  report.perplexity = perplexity(params, records, settings.max_len);
  if (teacher && !teacher_f.empty()) report.retention_vs_teacher = retention(student_f, teacher_f);
  return report;
}

EvalReport evaluate_checkpoint(const std::string& ckpt, const std::string& dataset, const EvalSettings& settings,
                               const std::string& teacher_ckpt) {
  const auto params = load_model(ckpt);
  const auto records = load_dataset(dataset);
  if (teacher_ckpt.empty()) return evaluate(params, records, settings);
  const auto teacher = load_model(teacher_ckpt);
  return evaluate(params, records, settings, &teacher);
}

namespace {

nlohmann::ordered_json aggregates_json(const EvalReport& r) {
  nlohmann::ordered_json a;
  a["examples"] = r.examples.size();
  a["skipped"] = r.skipped;
  a["mean_rouge_l_f"] = r.mean_rouge_l_f;
  a["perplexity"] = r.perplexity;
  a["retention_vs_teacher"] = r.retention_vs_teacher ? nlohmann::ordered_json(*r.retention_vs_teacher) : nullptr;
  return a;
}

}  // namespace

void EvalReport::write_jsonl(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  const auto handler = nlohmann::json::error_handler_t::replace;
  for (const auto& e : examples) {
    nlohmann::ordered_json j;
    j["prompt"] = e.prompt;
    j["reference"] = e.reference;
    j["candidate"] = e.candidate;
    j["rouge_l"] = {{"precision", e.rouge.precision}, {"recall", e.rouge.recall}, {"f", e.rouge.f}};
    out << j.dump(-1, ' ', false, handler) << '\n';
  }
  nlohmann::ordered_json footer;
  footer["aggregates"] = aggregates_json(*this);
  out << footer.dump() << '\n';
  if (!out) throw IoError("write failed for " + path);
}

void EvalReport::write_csv(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << "examples,mean_rouge_l_f,perplexity,retention_pct\n" << std::setprecision(17);
  out << examples.size() << ',' << mean_rouge_l_f << ',' << perplexity << ',';
  if (retention_vs_teacher) out << *retention_vs_teacher;
  out << '\n';
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace tdlm
