#pragma once

#include <cstdint>
#include <vector>

#include "tdlm/data.hpp"

namespace tdlm {

// Word-level instruction tasks (echo, reverse, first, last, upper, double)
// over a small word list. Deterministic in seed.
std::vector<PromptRecord> instruction_corpus(std::size_t n, std::uint64_t seed);

// Replaces each completion, with probability `fraction`, by the completion of
// a uniformly drawn record of the same corpus (misaligned pairs).
std::vector<PromptRecord> with_label_noise(std::vector<PromptRecord> records, double fraction, std::uint64_t seed);

// "add a b" prompts over single digits with meta "answer". A fraction of the
// completions are well-formed traces "<think>Step 1: a+b=c</think>c"; the rest
// are one of three malformed variants.
std::vector<PromptRecord> cot_corpus(std::size_t n, double well_formed_fraction, std::uint64_t seed);

}  // namespace tdlm
