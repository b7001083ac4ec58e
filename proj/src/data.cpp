#include "tdlm/data.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace tdlm {

using ordered_json = nlohmann::ordered_json;

TokenIds Tokenizer::encode(std::string_view text, EncodeFlags flags) const {
  TokenIds ids;
  ids.reserve(text.size() + 2);
  if (flags.bos) ids.push_back(kBosToken);
  for (unsigned char c : text) ids.push_back(c);
  if (flags.eos) ids.push_back(kEosToken);
  return ids;
}

std::string Tokenizer::decode(std::span<const std::int32_t> ids) const {
  std::string out;
  out.reserve(ids.size());
  for (auto id : ids) {
    if (id >= 0 && id < 256) {
      out.push_back(static_cast<char>(id));
    } else if (id == kBosToken) {
      out += "<bos>";
    } else if (id == kEosToken) {
      out += "<eos>";
    } else if (id == kPadToken) {
      out += "<pad>";
    } else {
      out += "<unk:" + std::to_string(id) + ">";
    }
  }
  return out;
}

std::string Tokenizer::decode_completion(std::span<const std::int32_t> ids) const {
  auto end = std::find(ids.begin(), ids.end(), kEosToken);
  return decode(std::span<const std::int32_t>(ids.begin(), end));
}

const std::string* PromptRecord::find_meta(std::string_view key) const {
  for (const auto& [k, v] : meta)
    if (k == key) return &v;
  return nullptr;
}

void PromptRecord::set_meta(const std::string& key, std::string value) {
  for (auto& [k, v] : meta) {
    if (k == key) {
      v = std::move(value);
      return;
    }
  }
  meta.emplace_back(key, std::move(value));
}

namespace {

PromptRecord parse_record(const std::string& line, std::size_t line_no) {
  ordered_json j;
  try {
    j = ordered_json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(line_no, std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ParseError(line_no, "expected a JSON object");
  auto text_field = [&](const char* key) {
    auto it = j.find(key);
    if (it == j.end()) throw ParseError(line_no, std::string("missing \"") + key + "\"");
    if (!it->is_string()) throw ParseError(line_no, std::string("\"") + key + "\" must be a string");
    return it->get<std::string>();
  };
  PromptRecord r;
  r.prompt = text_field("prompt");
  r.completion = text_field("completion");
  if (r.prompt.empty()) throw ParseError(line_no, "\"prompt\" is empty");
  if (auto it = j.find("meta"); it != j.end()) {
    if (!it->is_object()) throw ParseError(line_no, "\"meta\" must be an object");
    for (auto& [k, v] : it->items()) {
      if (!v.is_string()) throw ParseError(line_no, "meta value \"" + k + "\" must be a string");
      r.meta.emplace_back(k, v.get<std::string>());
    }
  }
  return r;
}

}  // namespace

std::vector<PromptRecord> parse_dataset(std::istream& in) {
  std::vector<PromptRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    records.push_back(parse_record(line, line_no));
  }
  return records;
}

std::vector<PromptRecord> load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset " + path);
  try {
    return parse_dataset(in);
  } catch (const ParseError& e) {
    throw ParseError(e.line(), e.detail() + " (" + path + ")");
  }
}

std::string to_json_line(const PromptRecord& record) {
  ordered_json j;
  j["prompt"] = record.prompt;
  j["completion"] = record.completion;
  if (!record.meta.empty()) {
    ordered_json m = ordered_json::object();
    for (const auto& [k, v] : record.meta) m[k] = v;
    j["meta"] = std::move(m);
  }
  // Invalid UTF-8 (possible in sampled text) is written as U+FFFD.
  return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

void write_dataset(std::ostream& out, std::span<const PromptRecord> records) {
  for (const auto& r : records) out << to_json_line(r) << '\n';
}

void save_dataset(const std::string& path, std::span<const PromptRecord> records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write dataset " + path);
  write_dataset(out, records);
  if (!out) throw IoError("write failed for " + path);
}

std::size_t Batch::masked_count() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1));
}

Batches batchify(std::span<const PromptRecord> records, const Tokenizer& tokenizer,
                 std::size_t batch_size, std::size_t max_len) {
  if (batch_size == 0) throw ContractError("batchify: batch_size must be >= 1");
  if (max_len < 2) throw ContractError("batchify: max_len must be >= 2");
  Batches out;
  struct Row {
    TokenIds tokens;
    std::size_t prompt_len;
  };
  std::vector<Row> pending;
  auto flush = [&] {
    if (pending.empty()) return;
    Batch b;
    b.rows = pending.size();
    for (const auto& r : pending) b.cols = std::max(b.cols, r.tokens.size());
    b.tokens.assign(b.rows * b.cols, kPadToken);
    b.mask.assign(b.rows * b.cols, 0);
    for (std::size_t i = 0; i < b.rows; ++i) {
      const auto& r = pending[i];
      std::copy(r.tokens.begin(), r.tokens.end(), b.tokens.begin() + i * b.cols);
      std::fill(b.mask.begin() + i * b.cols + r.prompt_len, b.mask.begin() + i * b.cols + r.tokens.size(), 1);
      b.prompt_lengths.push_back(r.prompt_len);
      b.lengths.push_back(r.tokens.size());
    }
    out.batches.push_back(std::move(b));
    pending.clear();
  };
  for (const auto& rec : records) {
    auto tokens = tokenizer.encode_prompt(rec.prompt);
    const std::size_t prompt_len = tokens.size();
    if (prompt_len >= max_len) {
      ++out.skipped;
      continue;
    }
    auto completion = tokenizer.encode_completion(rec.completion);
    const std::size_t keep = std::min(completion.size(), max_len - prompt_len);
    tokens.insert(tokens.end(), completion.begin(), completion.begin() + keep);
    pending.push_back({std::move(tokens), prompt_len});
    if (pending.size() == batch_size) flush();
  }
  flush();
  return out;
}

ShiftedRow shift_row(std::span<const std::int32_t> tokens, std::span<const std::uint8_t> mask) {
  if (tokens.size() != mask.size()) throw ShapeError("shift_row: tokens and mask differ in length");
  if (tokens.size() < 2) throw ContractError("shift_row: need at least 2 tokens");
  ShiftedRow r;
  r.inputs.assign(tokens.begin(), tokens.end() - 1);
  r.targets.assign(tokens.begin() + 1, tokens.end());
  r.mask.assign(mask.begin() + 1, mask.end());
  return r;
}

}  // namespace tdlm
