#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "tdlm/distill.hpp"
#include "tdlm/evalmetrics.hpp"
#include "tdlm/quant.hpp"
#include "tdlm/rlcot.hpp"

namespace tdlm::cli {

enum class KeyType { Int, Real, Bool, String, RealList };

struct KeySpec {
  const char* name;
  KeyType type;
  const char* help;
};

// Every key accepted in a config file or as a --key override.
const std::vector<KeySpec>& config_keys();

// Flat key/value run configuration. Defaults come from the module config
// structs; a JSON file overrides them and --key value flags override the file.
class RunConfig {
 public:
  RunConfig() = default;
  // Throws ConfigError on unknown keys or mistyped values.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig from_file(const std::string& path);
  void set(const std::string& key, const std::string& text);

  bool has(const std::string& key) const { return values_.contains(key); }
  // ConfigError naming the key when absent.
  std::string required_path(const std::string& key) const;
  std::string path_or(const std::string& key, const std::string& fallback) const;
  std::uint64_t seed() const;

  ModelConfig model_config() const;
  DistillConfig distill_config() const;
  GrpoConfig grpo_config() const;
  QuantConfig quant_config() const;
  RewardSpec reward_spec() const;
  EvalSettings eval_settings() const;
  std::vector<Scalar> learning_rates() const;  // default {5e-4, 1e-4, 5e-5}

  const nlohmann::json& values() const { return values_; }

 private:
  nlohmann::json values_ = nlohmann::json::object();
};

// Directory-safe rendering of a learning rate ("0.0005", "5e-05").
std::string lr_label(Scalar lr);

// Subcommands: sft, distill, grpo, quantize, eval, sweep-lr, toy-data.
// Returns 0 on success, 1 on runtime failure, 2 on usage or config errors.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);

}  // namespace tdlm::cli
