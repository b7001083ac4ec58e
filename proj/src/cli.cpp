#include "tdlm/cli.hpp"

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "tdlm/checkpoint.hpp"
#include "tdlm/toydata.hpp"

namespace tdlm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<KeySpec>& config_keys() {
  static const std::vector<KeySpec> keys{
      {"seed", KeyType::Int, "global seed; every component derives its own"},
      {"dataset", KeyType::String, "JSONL dataset (training data, prompts, or calibration set)"},
      {"eval_dataset", KeyType::String, "held-out JSONL dataset"},
      {"teacher_ckpt", KeyType::String, "teacher checkpoint"},
      {"student_ckpt", KeyType::String, "student checkpoint (input)"},
      {"out_dir", KeyType::String, "output directory"},
      {"n_layers", KeyType::Int, "student layers"},
      {"d_model", KeyType::Int, "student width"},
      {"n_heads", KeyType::Int, "student attention heads"},
      {"max_seq_len", KeyType::Int, "student context length"},
      {"mlp_hidden", KeyType::Int, "student MLP width"},
      {"temperature", KeyType::Real, "KD temperature tau"},
      {"alpha", KeyType::Real, "KD weight alpha"},
      {"learning_rate", KeyType::Real, "optimizer learning rate"},
      {"epochs", KeyType::Int, "training epochs"},
      {"direction", KeyType::String, "KD direction: forward | reverse"},
      {"batch_size", KeyType::Int, "records per batch"},
      {"max_len", KeyType::Int, "tokens per training sequence, 0 = context + 1"},
      {"optimizer", KeyType::String, "adam | sgd"},
      {"grad_clip", KeyType::Real, "global gradient norm clip, 0 disables"},
      {"samples_per_prompt", KeyType::Int, "reverse KD samples per prompt"},
      {"max_new_tokens", KeyType::Int, "sampled completion length (reverse KD, GRPO)"},
      {"sample_temperature", KeyType::Real, "sampling temperature (reverse KD, GRPO)"},
      {"use_teacher_sequences", KeyType::Bool, "train on greedy teacher completions"},
      {"record_wall_time", KeyType::Bool, "write measured epoch seconds into metrics"},
      {"eval_max_new_tokens", KeyType::Int, "greedy tokens generated for ROUGE-L"},
      {"rouge_samples", KeyType::Int, "records scored with ROUGE-L, 0 = all"},
      {"group_size", KeyType::Int, "GRPO group size G"},
      {"clip_eps", KeyType::Real, "GRPO clip epsilon"},
      {"kl_coeff", KeyType::Real, "GRPO KL coefficient beta"},
      {"steps", KeyType::Int, "GRPO steps"},
      {"prompts_per_step", KeyType::Int, "GRPO prompts per step"},
      {"refresh_old_every", KeyType::Int, "GRPO old-policy refresh period"},
      {"w_format", KeyType::Real, "reward weight: well-formed trace"},
      {"w_steps", KeyType::Real, "reward weight: step numbering"},
      {"w_correct", KeyType::Real, "reward weight: exact answer"},
      {"w_length", KeyType::Real, "reward weight: think length"},
      {"target_length", KeyType::Int, "think bytes for full length credit"},
      {"length_cap", KeyType::Int, "think bytes counted at most"},
      {"bits", KeyType::Int, "quantization bits"},
      {"quant_group_size", KeyType::Int, "weights per scale/zero-point, 0 = per row"},
      {"damping", KeyType::Real, "GPTQ damping fraction"},
      {"calibration_samples", KeyType::Int, "calibration sequences"},
      {"symmetric", KeyType::Bool, "symmetric quantization"},
      {"learning_rates", KeyType::RealList, "sweep-lr learning rates (comma-separated)"},
      {"toy_kind", KeyType::String, "toy-data corpus: instruction | cot"},
      {"toy_count", KeyType::Int, "toy-data records"},
      {"well_formed_fraction", KeyType::Real, "toy-data cot: share of well-formed traces"},
      {"label_noise", KeyType::Real, "toy-data: share of completions swapped with another record's"},
  };
  return keys;
}

namespace {

const KeySpec* find_key(const std::string& name) {
  for (const auto& k : config_keys())
    if (name == k.name) return &k;
  return nullptr;
}

void check_type(const KeySpec& k, const json& v) {
  bool ok = false;
  switch (k.type) {
    case KeyType::Int: ok = v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0); break;
    case KeyType::Real: ok = v.is_number(); break;
    case KeyType::Bool: ok = v.is_boolean(); break;
    case KeyType::String: ok = v.is_string(); break;
    case KeyType::RealList:
      ok = v.is_array() && !v.empty() && std::all_of(v.begin(), v.end(), [](const json& x) { return x.is_number(); });
      break;
  }
  if (!ok) {
    static const char* names[] = {"a nonnegative integer", "a number", "true or false", "a string",
                                  "a nonempty list of numbers"};
    throw ConfigError(std::string("key '") + k.name + "' must be " + names[static_cast<int>(k.type)]);
  }
}

double parse_real(const std::string& key, const std::string& text) {
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (text.empty() || end != text.c_str() + text.size()) throw ConfigError("key '" + key + "': not a number: " + text);
  return v;
}

template <class T>
T get_or(const json& values, const char* key, T fallback) {
  return values.contains(key) ? values.at(key).get<T>() : fallback;
}

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::Adam;
  if (s == "sgd") return OptimizerKind::Sgd;
  throw ConfigError("key 'optimizer' must be adam or sgd, got " + s);
}

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  for (const auto& [key, value] : j.items()) {
    const auto* spec = find_key(key);
    if (!spec) throw ConfigError("unknown config key '" + key + "'");
    check_type(*spec, value);
    c.values_[key] = value;
  }
  return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return from_json(j);
}

void RunConfig::set(const std::string& key, const std::string& text) {
  const auto* spec = find_key(key);
  if (!spec) throw ConfigError("unknown config key '" + key + "'");
  json v;
  switch (spec->type) {
    case KeyType::Int: {
      std::uint64_t x = 0;
      const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), x);
      if (ec != std::errc() || ptr != text.data() + text.size())
        throw ConfigError("key '" + key + "' must be a nonnegative integer, got " + text);
      v = x;
      break;
    }
    case KeyType::Real: v = parse_real(key, text); break;
    case KeyType::Bool:
      if (text == "true" || text == "1") v = true;
      else if (text == "false" || text == "0") v = false;
      else throw ConfigError("key '" + key + "' must be true or false, got " + text);
      break;
    case KeyType::String: v = text; break;
    case KeyType::RealList: {
      v = json::array();
      std::size_t start = 0;
      while (start <= text.size()) {
        const auto comma = text.find(',', start);
        v.push_back(parse_real(key, text.substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
        if (comma == std::string::npos) break;
        start = comma + 1;
      }
      break;
    }
  }
  values_[key] = v;
}

std::string RunConfig::required_path(const std::string& key) const {
  if (!has(key)) throw ConfigError("missing required key '" + key + "'");
  return values_.at(key).get<std::string>();
}

std::string RunConfig::path_or(const std::string& key, const std::string& fallback) const {
  return has(key) ? values_.at(key).get<std::string>() : fallback;
}

std::uint64_t RunConfig::seed() const { return get_or<std::uint64_t>(values_, "seed", 0); }

ModelConfig RunConfig::model_config() const {
  ModelConfig m = ModelConfig::student_default();
  m.n_layers = get_or<std::size_t>(values_, "n_layers", m.n_layers);
  m.d_model = get_or<std::size_t>(values_, "d_model", m.d_model);
  m.n_heads = get_or<std::size_t>(values_, "n_heads", m.n_heads);
  m.max_seq_len = get_or<std::size_t>(values_, "max_seq_len", m.max_seq_len);
  m.mlp_hidden = get_or<std::size_t>(values_, "mlp_hidden", m.mlp_hidden);
  m.validate();
  return m;
}

EvalSettings RunConfig::eval_settings() const {
  EvalSettings e;
  e.max_new_tokens = get_or<std::size_t>(values_, "eval_max_new_tokens", e.max_new_tokens);
  e.rouge_samples = get_or<std::size_t>(values_, "rouge_samples", e.rouge_samples);
  e.max_len = get_or<std::size_t>(values_, "max_len", 0);
  return e;
}

DistillConfig RunConfig::distill_config() const {
  DistillConfig d;
  d.temperature = get_or<Scalar>(values_, "temperature", d.temperature);
  d.alpha = get_or<Scalar>(values_, "alpha", d.alpha);
  d.learning_rate = get_or<Scalar>(values_, "learning_rate", d.learning_rate);
  d.epochs = get_or<std::size_t>(values_, "epochs", d.epochs);
  const auto dir = get_or<std::string>(values_, "direction", "forward");
  if (dir == "forward") d.direction = KdDirection::Forward;
  else if (dir == "reverse") d.direction = KdDirection::Reverse;
  else throw ConfigError("key 'direction' must be forward or reverse, got " + dir);
  d.batch_size = get_or<std::size_t>(values_, "batch_size", d.batch_size);
  d.seed = seed();
  d.max_len = get_or<std::size_t>(values_, "max_len", d.max_len);
  d.optimizer = parse_optimizer(get_or<std::string>(values_, "optimizer", "adam"));
  d.grad_clip = get_or<Scalar>(values_, "grad_clip", d.grad_clip);
  d.samples_per_prompt = get_or<std::size_t>(values_, "samples_per_prompt", d.samples_per_prompt);
  d.max_new_tokens = get_or<std::size_t>(values_, "max_new_tokens", d.max_new_tokens);
  d.sample_temperature = get_or<Scalar>(values_, "sample_temperature", d.sample_temperature);
  d.use_teacher_sequences = get_or<bool>(values_, "use_teacher_sequences", d.use_teacher_sequences);
  d.record_wall_time = get_or<bool>(values_, "record_wall_time", d.record_wall_time);
  d.eval = eval_settings();
  d.validate();
  return d;
}

GrpoConfig RunConfig::grpo_config() const {
  GrpoConfig g;
  g.group_size = get_or<std::size_t>(values_, "group_size", g.group_size);
  g.clip_eps = get_or<Scalar>(values_, "clip_eps", g.clip_eps);
  g.kl_coeff = get_or<Scalar>(values_, "kl_coeff", g.kl_coeff);
  g.learning_rate = get_or<Scalar>(values_, "learning_rate", g.learning_rate);
  g.steps = get_or<std::size_t>(values_, "steps", g.steps);
  g.prompts_per_step = get_or<std::size_t>(values_, "prompts_per_step", g.prompts_per_step);
  g.refresh_old_every = get_or<std::size_t>(values_, "refresh_old_every", g.refresh_old_every);
  g.seed = seed();
  g.temperature = get_or<Scalar>(values_, "sample_temperature", g.temperature);
  g.max_new_tokens = get_or<std::size_t>(values_, "max_new_tokens", g.max_new_tokens);
  g.optimizer = parse_optimizer(get_or<std::string>(values_, "optimizer", "adam"));
  g.grad_clip = get_or<Scalar>(values_, "grad_clip", g.grad_clip);
  g.validate();
  return g;
}

QuantConfig RunConfig::quant_config() const {
  QuantConfig q;
  q.bits = get_or<int>(values_, "bits", q.bits);
  q.group_size = get_or<std::size_t>(values_, "quant_group_size", q.group_size);
  q.damping = get_or<Scalar>(values_, "damping", q.damping);
  q.calibration_samples = get_or<std::size_t>(values_, "calibration_samples", q.calibration_samples);
  q.symmetric = get_or<bool>(values_, "symmetric", q.symmetric);
  q.validate();
  return q;
}

RewardSpec RunConfig::reward_spec() const {
  RewardSpec r;
  r.w_format = get_or<Scalar>(values_, "w_format", r.w_format);
  r.w_steps = get_or<Scalar>(values_, "w_steps", r.w_steps);
  r.w_correct = get_or<Scalar>(values_, "w_correct", r.w_correct);
  r.w_length = get_or<Scalar>(values_, "w_length", r.w_length);
  r.target_length = get_or<std::size_t>(values_, "target_length", r.target_length);
  r.length_cap = get_or<std::size_t>(values_, "length_cap", r.length_cap);
  r.validate();
  return r;
}

std::vector<Scalar> RunConfig::learning_rates() const {
  if (!has("learning_rates")) return {5e-4, 1e-4, 5e-5};
  return values_.at("learning_rates").get<std::vector<Scalar>>();
}

std::string lr_label(Scalar lr) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", lr);
  return buf;
}

namespace {

int log_level() {
  const char* v = std::getenv("TDLM_LOG");
  return v ? std::atoi(v) : 1;
}

void info(const std::string& msg) {
  if (log_level() >= 1) std::cerr << "tdlm: " << msg << '\n';
}

void require_file(const std::string& path) {
  if (!fs::is_regular_file(path)) throw IoError("no such file: " + path);
}

struct TrainSetup {
  DistillConfig cfg;
  DistillRunInputs inputs;
  TransformerParams teacher, init;
  std::string out_dir;
};

enum class TeacherUse { None, Required, Optional };

// Shared by sft, distill and sweep-lr. Validates every input before loading.
TrainSetup train_setup(const RunConfig& rc, TeacherUse use) {
  TrainSetup s;
  s.cfg = rc.distill_config();
  const auto dataset = rc.required_path("dataset");
  s.out_dir = rc.required_path("out_dir");
  const auto teacher_path = use == TeacherUse::Required ? rc.required_path("teacher_ckpt")
                            : use == TeacherUse::Optional ? rc.path_or("teacher_ckpt", "")
                                                          : std::string();
  const auto init_path = rc.path_or("student_ckpt", "");
  const auto eval_path = rc.path_or("eval_dataset", "");
  s.inputs.student_config = rc.model_config();
  for (const auto& p : {dataset, teacher_path, init_path, eval_path})
    if (!p.empty()) require_file(p);
  s.inputs.train = load_dataset(dataset);
  if (!eval_path.empty()) s.inputs.eval = load_dataset(eval_path);
  if (!init_path.empty()) {
    s.init = load_model(init_path);
    s.inputs.student_config = s.init.config;
  }
  if (!teacher_path.empty()) {
    s.teacher = load_model(teacher_path);
    if (s.teacher.config.vocab_size != s.inputs.student_config.vocab_size)
      throw ContractError("teacher and student vocabularies differ");
  }
  return s;
}

TrainMetrics run_training(TrainSetup& s, const std::string& out_dir) {
  DistillRunInputs in = s.inputs;
  if (!s.teacher.layers.empty()) in.teacher = &s.teacher;
  if (!s.init.layers.empty()) in.student_init = &s.init;
  return run_distillation(s.cfg, in, out_dir);
}

void log_final(const TrainMetrics& m, const std::string& out_dir) {
  if (m.rows.empty()) {
    info("no epochs run; wrote " + out_dir);
    return;
  }
  const auto& r = m.rows.back();
  std::ostringstream os;
  os << "epoch " << r.epoch << " train_loss " << r.train_loss << " eval_loss " << r.eval_loss << " rouge_l " << r.rouge_l
     << "; wrote " << out_dir;
  info(os.str());
}

int cmd_train(const RunConfig& rc, bool distill) {
  auto s = train_setup(rc, distill ? TeacherUse::Required : TeacherUse::None);
  log_final(run_training(s, s.out_dir), s.out_dir);
  return 0;
}

int cmd_sweep(const RunConfig& rc) {
  auto s = train_setup(rc, TeacherUse::Optional);
  const auto lrs = rc.learning_rates();
  fs::create_directories(s.out_dir);
  const auto summary_path = (fs::path(s.out_dir) / "sweep_summary.csv").string();
  std::ostringstream summary;
  summary << "learning_rate,final_train_loss,final_eval_loss,final_rouge_l\n" << std::setprecision(17);
  for (const Scalar lr : lrs) {
    s.cfg.learning_rate = lr;
    s.cfg.validate();
    const auto label = lr_label(lr);
    const auto run_dir = (fs::path(s.out_dir) / ("lr_" + label)).string();
    const auto m = run_training(s, run_dir);
    fs::copy_file(fs::path(run_dir) / "metrics.csv", fs::path(s.out_dir) / ("metrics_lr_" + label + ".csv"),
                  fs::copy_options::overwrite_existing);
    summary << label << ',';
    if (m.rows.empty()) summary << ",,\n";
    else summary << m.rows.back().train_loss << ',' << m.rows.back().eval_loss << ',' << m.rows.back().rouge_l << '\n';
    std::ofstream out(summary_path, std::ios::binary | std::ios::trunc);
    out << summary.str();
    if (!out) throw IoError("cannot write " + summary_path);
    info("lr " + label + " done");
  }
  return 0;
}

int cmd_grpo(const RunConfig& rc) {
  const auto cfg = rc.grpo_config();
  const auto spec = rc.reward_spec();
  const auto init_path = rc.required_path("student_ckpt");
  const auto dataset = rc.required_path("dataset");
  const auto out_dir = rc.required_path("out_dir");
  require_file(init_path);
  require_file(dataset);
  const auto init = load_model(init_path);
  const auto prompts = load_dataset(dataset);
  const auto run = run_grpo(cfg, init, prompts, spec, out_dir);
  if (!run.rows.empty()) {
    std::ostringstream os;
    os << "step " << run.rows.back().step << " mean_reward " << run.rows.back().mean_reward << " kl_from_ref "
       << run.rows.back().kl_from_ref << " (" << run.degenerate_steps << " steps without update)";
    info(os.str());
  }
  return 0;
}

std::vector<TokenIds> calibration_tokens(std::span<const PromptRecord> records, std::size_t count, std::size_t ctx) {
  Tokenizer tok;
  std::vector<TokenIds> out;
  for (const auto& r : records) {
    if (out.size() == count) break;
    auto ids = tok.encode_prompt(r.prompt);
    const auto c = tok.encode_completion(r.completion);
    ids.insert(ids.end(), c.begin(), c.end());
    if (ids.size() > ctx) ids.resize(ctx);
    out.push_back(std::move(ids));
  }
  return out;
}

int cmd_quantize(const RunConfig& rc) {
  const auto qc = rc.quant_config();
  const auto ckpt = rc.required_path("student_ckpt");
  const auto dataset = rc.required_path("dataset");
  const auto out_dir = rc.required_path("out_dir");
  const auto eval_path = rc.path_or("eval_dataset", "");
  for (const auto& p : {ckpt, dataset, eval_path})
    if (!p.empty()) require_file(p);
  const auto params = load_model(ckpt);
  const auto calib = calibration_tokens(load_dataset(dataset), qc.calibration_samples, params.config.max_seq_len);
  const auto qm = quantize_model(params, calib, qc);
  fs::create_directories(out_dir);
  save_quantized(qm, (fs::path(out_dir) / "quantized.ckpt").string());
  qm.report.write_csv((fs::path(out_dir) / "quant_report.csv").string());
  if (!eval_path.empty()) {
    const auto records = load_dataset(eval_path);
    const std::size_t len = rc.eval_settings().max_len == 0 ? params.config.max_seq_len + 1 : rc.eval_settings().max_len;
    const Scalar before = dataset_nll(params, records, len).mean();
    const Scalar after = dataset_nll(qm.params, records, len).mean();
    std::ofstream out(fs::path(out_dir) / "quant_eval.csv", std::ios::binary | std::ios::trunc);
    out << "eval_loss_before,eval_loss_after,relative_increase\n"
        << std::setprecision(17) << before << ',' << after << ',' << (after - before) / before << '\n';
    if (!out) throw IoError("cannot write quant_eval.csv");
  }
  info("wrote " + out_dir);
  return 0;
}

int cmd_eval(const RunConfig& rc) {
  const auto ckpt = rc.required_path("student_ckpt");
  const auto dataset = rc.required_path("dataset");
  const auto out_dir = rc.required_path("out_dir");
  const auto teacher = rc.path_or("teacher_ckpt", "");
  for (const auto& p : {ckpt, dataset, teacher})
    if (!p.empty()) require_file(p);
  auto settings = rc.eval_settings();
  if (settings.max_len == 0) settings.max_len = load_model(ckpt).config.max_seq_len + 1;
  const auto report = evaluate_checkpoint(ckpt, dataset, settings, teacher);
  fs::create_directories(out_dir);
  report.write_jsonl((fs::path(out_dir) / "eval.jsonl").string());
  report.write_csv((fs::path(out_dir) / "eval.csv").string());
  std::ostringstream os;
  os << "mean_rouge_l_f " << report.mean_rouge_l_f << " perplexity " << report.perplexity;
  info(os.str());
  return 0;
}

int cmd_toy(const RunConfig& rc) {
  const auto path = rc.required_path("dataset");
  const auto kind = rc.path_or("toy_kind", "instruction");
  const auto count = get_or<std::size_t>(rc.values(), "toy_count", 400);
  std::vector<PromptRecord> records;
  if (kind == "instruction") records = instruction_corpus(count, derive_seed(rc.seed(), "toy_instruction"));
  else if (kind == "cot")
    records = cot_corpus(count, get_or<Scalar>(rc.values(), "well_formed_fraction", 0.3),
                         derive_seed(rc.seed(), "toy_cot"));
  else throw ConfigError("key 'toy_kind' must be instruction or cot, got " + kind);
  const auto noise = get_or<Scalar>(rc.values(), "label_noise", 0.0);
  if (!(noise >= 0 && noise <= 1)) throw ConfigError("key 'label_noise' must be in [0, 1]");
  records = with_label_noise(std::move(records), noise, derive_seed(rc.seed(), "toy_label_noise"));
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  save_dataset(path, records);
  info("wrote " + std::to_string(records.size()) + " records to " + path);
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Distillation, GRPO and quantization laboratory for tiny transformers", "tdlm"};
  app.require_subcommand(1);
  app.footer(
      "Settings: defaults < --config file < --key value flags. Run `tdlm <command> --help` for the key list.\n"
      "Exit codes: 0 success, 1 runtime failure, 2 usage or config error. TDLM_LOG=0 silences progress.");
  struct Sub {
    const char* name;
    const char* help;
    int (*fn)(const RunConfig&);
  };
  static const Sub subs[] = {
      {"sft", "train a student on completions only", [](const RunConfig& c) { return cmd_train(c, false); }},
      {"distill", "train a student against a teacher checkpoint", [](const RunConfig& c) { return cmd_train(c, true); }},
      {"grpo", "GRPO fine-tuning with the trace reward", cmd_grpo},
      {"quantize", "GPTQ weight quantization of a checkpoint", cmd_quantize},
      {"eval", "ROUGE-L, perplexity and teacher retention", cmd_eval},
      {"sweep-lr", "one sft/distill run per learning rate", cmd_sweep},
      {"toy-data", "write a toy corpus to `dataset`", cmd_toy},
  };
  std::string config_path;
  std::vector<std::pair<std::string, std::string>> overrides;
  std::map<std::string, const Sub*> by_name;
  for (const auto& s : subs) {
    auto* sc = app.add_subcommand(s.name, s.help);
    sc->add_option("--config", config_path, "JSON config file");
    for (const auto& k : config_keys()) {
      const std::string name = k.name;
      sc->add_option_function<std::string>(
          "--" + name, [&overrides, name](const std::string& v) { overrides.emplace_back(name, v); }, k.help)
          ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    }
    by_name[s.name] = &s;
  }
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }
  try {
    RunConfig rc = config_path.empty() ? RunConfig{} : RunConfig::from_file(config_path);
    for (const auto& [k, v] : overrides) rc.set(k, v);
    const auto* chosen = app.get_subcommands().front();
    return by_name.at(chosen->get_name())->fn(rc);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace tdlm::cli
