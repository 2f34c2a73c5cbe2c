// SPDX-License-Identifier: Apache-2.0
#include "amoe/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "amoe/errors.hpp"

namespace amoe {

namespace {

long parse_long(const std::string& key, const std::string& value) {
  long out = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ValidationError("config: key '" + key + "' expects an integer, got '" + value + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    double out = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return out;
  } catch (const std::exception&) {
    throw ValidationError("config: key '" + key + "' expects a number, got '" + value + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ValidationError("config: key '" + key + "' expects true/false, got '" + value + "'");
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void MoeConfig::validate() const {
  if (num_layers < 2) throw ValidationError("config: num_layers must be >= 2");
  if (hidden_dim < 1 || expert_hidden_dim < 1) {
    throw ValidationError("config: hidden dimensions must be positive");
  }
  if (num_routed_experts < 1 || num_shared_experts < 0) {
    throw ValidationError("config: expert counts out of range");
  }
  if (top_k < 1 || top_k > num_routed_experts) {
    throw ValidationError("config: top_k " + std::to_string(top_k) + " must be in [1, " +
                          std::to_string(num_routed_experts) + "]");
  }
  if (vocab_text < 2 || vocab_audio < 2) throw ValidationError("config: vocabularies too small");
  if (num_audio_streams < 1) throw ValidationError("config: num_audio_streams must be >= 1");
  if (max_positions < 4) throw ValidationError("config: max_positions too small");
}

void ExperimentConfig::validate() const {
  model.validate();
  if (strategy != "adaptive" && strategy != "random" && strategy != "pure_moe" &&
      strategy != "extend") {
    throw ValidationError("config: unknown strategy '" + strategy + "'");
  }
  const int n = model.num_routed_experts;
  if (audio_expert_count <= 0 || audio_expert_count >= n) {
    throw ValidationError("config: audio_expert_count " + std::to_string(audio_expert_count) +
                          " must be in (0, " + std::to_string(n) + ")");
  }
  if (strategy != "extend") {
    if (audio_expert_count < model.top_k) {
      throw ValidationError("config: audio_expert_count " + std::to_string(audio_expert_count) +
                            " leaves fewer eligible audio experts than top_k " +
                            std::to_string(model.top_k));
    }
    if (n - audio_expert_count < model.top_k) {
      throw ValidationError("config: audio_expert_count " + std::to_string(audio_expert_count) +
                            " leaves fewer text experts than top_k " +
                            std::to_string(model.top_k));
    }
  } else if (audio_expert_count < model.top_k) {
    throw ValidationError("config: extend strategy needs audio_expert_count >= top_k");
  }
  if (prompt_len < 2 || target_len < 2) throw ValidationError("config: sequence lengths too small");
  if (prompt_len + target_len + model.num_audio_streams > model.max_positions) {
    throw ValidationError("config: prompt_len + target_len + num_audio_streams exceeds "
                          "max_positions");
  }
  if (train_samples < batch_size || sft_samples < batch_size || batch_size < 1) {
    throw ValidationError("config: train_samples and sft_samples must cover at least one batch");
  }
  if (eval_samples < 1 || eval_cells_per_sample < 1 || profile_samples < 1) {
    throw ValidationError("config: evaluation sizes must be positive");
  }
  if (eval_cells_per_sample > target_len - 2) {
    throw ValidationError("config: eval_cells_per_sample must be <= target_len - 2");
  }
  if (pretrain_steps < 0 || stage1_steps < 0 || stage21_steps < 0 || stage22_steps < 0 ||
      stage3_steps < 0 || dpo_steps < 0) {
    throw ValidationError("config: step counts must be non-negative");
  }
  if (partition_iterations < 1) throw ValidationError("config: partition_iterations must be >= 1");
  if (dpo_candidates < 2 && dpo) {
    throw ValidationError("config: dpo_candidates must be >= 2");
  }
  if (dpo_topk < 1 || dpo_temperature < 0.0) {
    throw ValidationError("config: bad sampling settings for dpo");
  }
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  using Setter = std::function<void(ExperimentConfig&, const std::string&, const std::string&)>;
  static const std::map<std::string, Setter> setters = {
      {"num_layers", [](auto& c, auto& k, auto& v) { c.model.num_layers = (int)parse_long(k, v); }},
      {"hidden_dim", [](auto& c, auto& k, auto& v) { c.model.hidden_dim = (int)parse_long(k, v); }},
      {"expert_hidden_dim",
       [](auto& c, auto& k, auto& v) { c.model.expert_hidden_dim = (int)parse_long(k, v); }},
      {"num_routed_experts",
       [](auto& c, auto& k, auto& v) { c.model.num_routed_experts = (int)parse_long(k, v); }},
      {"num_shared_experts",
       [](auto& c, auto& k, auto& v) { c.model.num_shared_experts = (int)parse_long(k, v); }},
      {"top_k", [](auto& c, auto& k, auto& v) { c.model.top_k = (int)parse_long(k, v); }},
      {"vocab_text", [](auto& c, auto& k, auto& v) { c.model.vocab_text = (int)parse_long(k, v); }},
      {"vocab_audio",
       [](auto& c, auto& k, auto& v) { c.model.vocab_audio = (int)parse_long(k, v); }},
      {"num_audio_streams",
       [](auto& c, auto& k, auto& v) { c.model.num_audio_streams = (int)parse_long(k, v); }},
      {"max_positions",
       [](auto& c, auto& k, auto& v) { c.model.max_positions = (int)parse_long(k, v); }},
      {"seed",
       [](auto& c, auto& k, auto& v) { c.seed = (std::uint64_t)parse_long(k, v); }},
      {"strategy", [](auto& c, auto&, auto& v) { c.strategy = v; }},
      {"audio_expert_count",
       [](auto& c, auto& k, auto& v) { c.audio_expert_count = (int)parse_long(k, v); }},
      {"partition_iterations",
       [](auto& c, auto& k, auto& v) { c.partition_iterations = (int)parse_long(k, v); }},
      {"prompt_len", [](auto& c, auto& k, auto& v) { c.prompt_len = (int)parse_long(k, v); }},
      {"target_len", [](auto& c, auto& k, auto& v) { c.target_len = (int)parse_long(k, v); }},
      {"train_samples",
       [](auto& c, auto& k, auto& v) { c.train_samples = (int)parse_long(k, v); }},
      {"sft_samples",
       [](auto& c, auto& k, auto& v) { c.sft_samples = (int)parse_long(k, v); }},
      {"eval_samples", [](auto& c, auto& k, auto& v) { c.eval_samples = (int)parse_long(k, v); }},
      {"eval_cells_per_sample",
       [](auto& c, auto& k, auto& v) { c.eval_cells_per_sample = (int)parse_long(k, v); }},
      {"profile_samples",
       [](auto& c, auto& k, auto& v) { c.profile_samples = (int)parse_long(k, v); }},
      {"batch_size", [](auto& c, auto& k, auto& v) { c.batch_size = (int)parse_long(k, v); }},
      {"pretrain_steps",
       [](auto& c, auto& k, auto& v) { c.pretrain_steps = (int)parse_long(k, v); }},
      {"pretrain_lr", [](auto& c, auto& k, auto& v) { c.pretrain_lr = parse_double(k, v); }},
      {"stage1_steps", [](auto& c, auto& k, auto& v) { c.stage1_steps = (int)parse_long(k, v); }},
      {"stage1_lr", [](auto& c, auto& k, auto& v) { c.stage1_lr = parse_double(k, v); }},
      {"stage21_steps", [](auto& c, auto& k, auto& v) { c.stage21_steps = (int)parse_long(k, v); }},
      {"stage21_lr", [](auto& c, auto& k, auto& v) { c.stage21_lr = parse_double(k, v); }},
      {"stage22_steps", [](auto& c, auto& k, auto& v) { c.stage22_steps = (int)parse_long(k, v); }},
      {"stage22_lr", [](auto& c, auto& k, auto& v) { c.stage22_lr = parse_double(k, v); }},
      {"stage3_steps", [](auto& c, auto& k, auto& v) { c.stage3_steps = (int)parse_long(k, v); }},
      {"stage3_lr", [](auto& c, auto& k, auto& v) { c.stage3_lr = parse_double(k, v); }},
      {"shared_trainable_in_specialize",
       [](auto& c, auto& k, auto& v) { c.shared_trainable_in_specialize = parse_bool(k, v); }},
      {"load_count_weighted",
       [](auto& c, auto& k, auto& v) { c.load_count_weighted = parse_bool(k, v); }},
      {"dpo", [](auto& c, auto& k, auto& v) { c.dpo = parse_bool(k, v); }},
      {"dpo_steps", [](auto& c, auto& k, auto& v) { c.dpo_steps = (int)parse_long(k, v); }},
      {"dpo_lr", [](auto& c, auto& k, auto& v) { c.dpo_lr = parse_double(k, v); }},
      {"dpo_beta", [](auto& c, auto& k, auto& v) { c.dpo_beta = parse_double(k, v); }},
      {"dpo_prompts", [](auto& c, auto& k, auto& v) { c.dpo_prompts = (int)parse_long(k, v); }},
      {"dpo_candidates",
       [](auto& c, auto& k, auto& v) { c.dpo_candidates = (int)parse_long(k, v); }},
      {"dpo_topk", [](auto& c, auto& k, auto& v) { c.dpo_topk = (int)parse_long(k, v); }},
      {"dpo_temperature",
       [](auto& c, auto& k, auto& v) { c.dpo_temperature = parse_double(k, v); }},
  };
  auto it = setters.find(key);
  if (it == setters.end()) throw ValidationError("config: unknown key '" + key + "'");
  it->second(*this, key, value);
}

std::string ExperimentConfig::to_key_values() const {
  std::ostringstream os;
  os << "num_layers=" << model.num_layers << "\n"
     << "hidden_dim=" << model.hidden_dim << "\n"
     << "expert_hidden_dim=" << model.expert_hidden_dim << "\n"
     << "num_routed_experts=" << model.num_routed_experts << "\n"
     << "num_shared_experts=" << model.num_shared_experts << "\n"
     << "top_k=" << model.top_k << "\n"
     << "vocab_text=" << model.vocab_text << "\n"
     << "vocab_audio=" << model.vocab_audio << "\n"
     << "num_audio_streams=" << model.num_audio_streams << "\n"
     << "max_positions=" << model.max_positions << "\n"
     << "seed=" << seed << "\n"
     << "strategy=" << strategy << "\n"
     << "audio_expert_count=" << audio_expert_count << "\n"
     << "partition_iterations=" << partition_iterations << "\n"
     << "prompt_len=" << prompt_len << "\n"
     << "target_len=" << target_len << "\n"
     << "train_samples=" << train_samples << "\n"
     << "sft_samples=" << sft_samples << "\n"
     << "eval_samples=" << eval_samples << "\n"
     << "eval_cells_per_sample=" << eval_cells_per_sample << "\n"
     << "profile_samples=" << profile_samples << "\n"
     << "batch_size=" << batch_size << "\n"
     << "pretrain_steps=" << pretrain_steps << "\n"
     << "pretrain_lr=" << fmt_double(pretrain_lr) << "\n"
     << "stage1_steps=" << stage1_steps << "\n"
     << "stage1_lr=" << fmt_double(stage1_lr) << "\n"
     << "stage21_steps=" << stage21_steps << "\n"
     << "stage21_lr=" << fmt_double(stage21_lr) << "\n"
     << "stage22_steps=" << stage22_steps << "\n"
     << "stage22_lr=" << fmt_double(stage22_lr) << "\n"
     << "stage3_steps=" << stage3_steps << "\n"
     << "stage3_lr=" << fmt_double(stage3_lr) << "\n"
     << "shared_trainable_in_specialize=" << (shared_trainable_in_specialize ? "true" : "false")
     << "\n"
     << "load_count_weighted=" << (load_count_weighted ? "true" : "false") << "\n"
     << "dpo=" << (dpo ? "true" : "false") << "\n"
     << "dpo_steps=" << dpo_steps << "\n"
     << "dpo_lr=" << fmt_double(dpo_lr) << "\n"
     << "dpo_beta=" << fmt_double(dpo_beta) << "\n"
     << "dpo_prompts=" << dpo_prompts << "\n"
     << "dpo_candidates=" << dpo_candidates << "\n"
     << "dpo_topk=" << dpo_topk << "\n"
     << "dpo_temperature=" << fmt_double(dpo_temperature) << "\n";
  return os.str();
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("config: cannot open '" + path + "'");
  ExperimentConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string stripped = trim(line.substr(0, line.find('#')));
    if (stripped.empty()) continue;
    const size_t eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw ValidationError("config: " + path + ":" + std::to_string(lineno) +
                            ": expected key=value, got '" + stripped + "'");
    }
    cfg.set(trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
  }
  return cfg;
}

}  // namespace amoe
