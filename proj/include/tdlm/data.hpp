#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tdlm/model.hpp"

namespace tdlm {

struct EncodeFlags {
  bool bos = false;
  bool eos = false;
};

// Byte-level tokenizer: id = byte value, plus BOS/EOS/PAD.
class Tokenizer {
 public:
  static constexpr std::size_t vocab_size() { return kByteVocabSize; }

  TokenIds encode(std::string_view text, EncodeFlags flags = {}) const;
  // Special ids render as <bos>, <eos>, <pad>; anything else out of range as <unk:N>.
  std::string decode(std::span<const std::int32_t> ids) const;

  // BOS + prompt bytes.
  TokenIds encode_prompt(std::string_view prompt) const { return encode(prompt, {true, false}); }
  // Completion bytes + EOS.
  TokenIds encode_completion(std::string_view completion) const {
    return encode(completion, {false, true});
  }
  // Bytes of a generated continuation up to (not including) the first EOS.
  std::string decode_completion(std::span<const std::int32_t> ids) const;
};

using Meta = std::vector<std::pair<std::string, std::string>>;

struct PromptRecord {
  std::string prompt;
  std::string completion;
  Meta meta;  // insertion order is preserved on save

  const std::string* find_meta(std::string_view key) const;
  void set_meta(const std::string& key, std::string value);
  friend bool operator==(const PromptRecord&, const PromptRecord&) = default;
};

// One JSON object per line: {"prompt": str, "completion": str, "meta": {str: str}?}.
// Blank lines are skipped. Throws ParseError naming the 1-based line.
std::vector<PromptRecord> parse_dataset(std::istream& in);
std::vector<PromptRecord> load_dataset(const std::string& path);
std::string to_json_line(const PromptRecord& record);
void write_dataset(std::ostream& out, std::span<const PromptRecord> records);
void save_dataset(const std::string& path, std::span<const PromptRecord> records);

// Rows are padded with PAD to the longest row. mask is 1 exactly on
// completion tokens.
struct Batch {
  std::size_t rows = 0, cols = 0;
  std::vector<std::int32_t> tokens;  // rows x cols
  Mask mask;                         // rows x cols
  std::vector<std::size_t> prompt_lengths;
  std::vector<std::size_t> lengths;  // unpadded

  std::span<const std::int32_t> row_tokens(std::size_t r) const {
    return {tokens.data() + r * cols, lengths[r]};
  }
  std::span<const std::uint8_t> row_mask(std::size_t r) const {
    return {mask.data() + r * cols, lengths[r]};
  }
  std::size_t masked_count() const;
};

struct Batches {
  std::vector<Batch> batches;
  std::size_t skipped = 0;  // records whose prompt leaves no room for a completion token
};

// Records are kept in the given order. Sequences longer than max_len are cut
// from the right of the completion.
Batches batchify(std::span<const PromptRecord> records, const Tokenizer& tokenizer,
                 std::size_t batch_size, std::size_t max_len);

// Next-token view of one sequence: inputs = tokens[0, n-1), targets =
// tokens[1, n), mask shifted the same way.
struct ShiftedRow {
  TokenIds inputs, targets;
  Mask mask;
};
ShiftedRow shift_row(std::span<const std::int32_t> tokens, std::span<const std::uint8_t> mask);

}  // namespace tdlm
