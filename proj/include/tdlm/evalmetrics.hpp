#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tdlm/data.hpp"
#include "tdlm/model.hpp"

namespace tdlm {

struct RougeScore {
  Scalar precision = 0, recall = 0, f = 0;
};

std::vector<std::string_view> split_words(std::string_view text);
std::size_t lcs_length(std::span<const std::string_view> a, std::span<const std::string_view> b);

// Whitespace tokens, case-sensitive, F with beta = 1. Empty candidate or
// reference scores all zeros.
RougeScore rouge_l(std::string_view candidate, std::string_view reference);

// Summed masked NLL and token count over a dataset (completion tokens only).
struct NllTotals {
  Scalar nll = 0;
  std::size_t tokens = 0;
  Scalar mean() const;
};
NllTotals dataset_nll(const TransformerParams& params, std::span<const PromptRecord> records,
                      std::size_t max_len);
// exp(total NLL / total completion tokens). Throws ContractError on an empty dataset.
Scalar perplexity(const TransformerParams& params, std::span<const PromptRecord> records,
                  std::size_t max_len);

// 100 * mean(student) / mean(teacher); empty when the teacher mean is 0.
std::optional<Scalar> retention(std::span<const Scalar> student, std::span<const Scalar> teacher);

struct EvalSettings {
  std::size_t max_new_tokens = 64;
  std::size_t max_len = 128;
  // Generation uses greedy decoding; 0 scores every record.
  std::size_t rouge_samples = 0;
};

struct EvalExample {
  std::string prompt, reference, candidate;
  RougeScore rouge;
};

struct EvalReport {
  std::vector<EvalExample> examples;
  Scalar mean_rouge_l_f = 0;
  Scalar perplexity = 0;
  std::optional<Scalar> retention_vs_teacher;  // percent
  std::size_t skipped = 0;                     // prompts that leave no room to generate

  // One JSON object per example, then {"aggregates": {...}}.
  void write_jsonl(const std::string& path) const;
  // Header: examples,mean_rouge_l_f,perplexity,retention_pct
  void write_csv(const std::string& path) const;
};

// Greedy continuation of each prompt, decoded up to EOS.
std::string generate_completion(const TransformerParams& params, std::string_view prompt,
                                std::size_t max_new_tokens);

EvalReport evaluate(const TransformerParams& params, std::span<const PromptRecord> records,
                    const EvalSettings& settings, const TransformerParams* teacher = nullptr);
EvalReport evaluate_checkpoint(const std::string& ckpt, const std::string& dataset,
                               const EvalSettings& settings, const std::string& teacher_ckpt = "");

}  // namespace tdlm
