#include "tdlm/toydata.hpp"

#include <array>
#include <string>

#include "tdlm/error.hpp"
#include "tdlm/rng.hpp"

namespace tdlm {

namespace {

constexpr std::array<const char*, 24> kWords{"cat", "dog", "sun", "red", "map", "box", "tea", "pen",
                                             "owl", "sky", "ice", "jam", "fox", "hat", "cup", "bee",
                                             "oak", "ant", "bus", "egg", "fig", "gem", "ink", "net"};

std::string join(const std::vector<std::string>& words) {
  std::string s;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) s += ' ';
    s += words[i];
  }
  return s;
}

}  // namespace

std::vector<PromptRecord> instruction_corpus(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<PromptRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::string> w(2 + rng.below(3));
    for (auto& x : w) x = kWords[rng.below(kWords.size())];
    PromptRecord r;
    switch (rng.below(6)) {
      case 0:
        r.prompt = "echo: " + join(w);
        r.completion = join(w);
        break;
      case 1: {
        r.prompt = "reverse: " + join(w);
        std::vector<std::string> rev(w.rbegin(), w.rend());
        r.completion = join(rev);
        break;
      }
      case 2:
        r.prompt = "first: " + join(w);
        r.completion = w.front();
        break;
      case 3:
        r.prompt = "last: " + join(w);
        r.completion = w.back();
        break;
      case 4: {
        r.prompt = "upper: " + join(w);
        auto up = w;
        for (auto& x : up)
          for (auto& c : x) c = static_cast<char>(c - 'a' + 'A');
        r.completion = join(up);
        break;
      }
      default:
        w.resize(1);
        r.prompt = "double: " + w[0];
        r.completion = w[0] + " " + w[0];
        break;
    }
    r.set_meta("task", r.prompt.substr(0, r.prompt.find(':')));
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<PromptRecord> with_label_noise(std::vector<PromptRecord> records, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0 && fraction <= 1)) throw ContractError("label noise fraction must be in [0, 1]");
  if (records.empty() || fraction == 0) return records;
  Rng rng(seed);
  std::vector<std::string> original;
  original.reserve(records.size());
  for (const auto& r : records) original.push_back(r.completion);
  for (auto& r : records)
    if (rng.uniform() < fraction) r.completion = original[rng.below(original.size())];
  return records;
}

std::vector<PromptRecord> cot_corpus(std::size_t n, double well_formed_fraction, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<PromptRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto a = rng.below(10), b = rng.below(10);
    const auto c = std::to_string(a + b);
    const std::string sum = std::to_string(a) + "+" + std::to_string(b) + "=" + c;
    PromptRecord r;
    r.prompt = "add " + std::to_string(a) + " " + std::to_string(b);
    if (rng.uniform() < well_formed_fraction) {
      r.completion = "<think>Step 1: " + sum + "</think>" + c;
    } else {
      switch (rng.below(3)) {
        case 0: r.completion = c; break;
        case 1: r.completion = "<think>" + sum + "</think>" + c; break;
        default: r.completion = "<think>Step 1: " + sum + " " + c; break;
      }
    }
    r.set_meta("answer", c);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace tdlm
