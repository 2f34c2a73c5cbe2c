// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

namespace amoe {

// Backbone dimensions. Defaults mirror the reference architecture's
// 27-layer / 66-expert / top-6 / 7-stream structure at a size where
// brute-force test oracles run in seconds.
struct MoeConfig {
  int num_layers = 4;  // first layer dense, rest MoE
  int hidden_dim = 64;
  int expert_hidden_dim = 96;
  int num_routed_experts = 8;
  int num_shared_experts = 1;
  int top_k = 2;
  int vocab_text = 64;
  int vocab_audio = 32;
  int num_audio_streams = 3;  // S
  int max_positions = 64;

  void validate() const;  // throws ValidationError
};

// Everything a pipeline run needs beyond the model shape. One seed drives
// corpus generation, initialization, batching and sampling; two runs with the
// same config+seed produce byte-identical artifacts.
struct ExperimentConfig {
  MoeConfig model;

  std::uint64_t seed = 1;
  std::string strategy = "adaptive";  // adaptive | random | pure_moe | extend
  int audio_expert_count = 2;         // k, audio experts per layer
  int partition_iterations = 1;       // profile/partition/specialize rounds

  // synthetic corpus
  int prompt_len = 4;
  int target_len = 8;
  int train_samples = 2048;  // pretraining / alignment corpus size
  int sft_samples = 48;      // unimodal corpus per specialize/joint stage
  int eval_samples = 500;    // per eval task
  int eval_cells_per_sample = 4;
  int profile_samples = 256;
  int batch_size = 8;

  // stage schedule; learning-rate ratios follow the staged-training recipe
  // (specialization of the new modality runs hot, joint training in between)
  int pretrain_steps = 3000;
  double pretrain_lr = 0.07;
  int stage1_steps = 300;
  double stage1_lr = 0.02;
  int stage21_steps = 800;
  double stage21_lr = 0.10;
  int stage22_steps = 100;
  double stage22_lr = 0.02;
  int stage3_steps = 150;
  double stage3_lr = 0.05;

  bool shared_trainable_in_specialize = false;
  bool load_count_weighted = false;  // count routing weights instead of assignments

  // preference-training stage
  bool dpo = false;
  int dpo_steps = 60;
  double dpo_lr = 0.02;
  double dpo_beta = 0.1;
  int dpo_prompts = 24;
  int dpo_candidates = 4;
  int dpo_topk = 10;
  double dpo_temperature = 1.0;

  void validate() const;  // throws ValidationError

  // Applies "key=value"; throws ValidationError on unknown keys or bad values.
  void set(const std::string& key, const std::string& value);

  // Flat key=value text, full round-trip of every setting.
  std::string to_key_values() const;
};

// Loads a flat key=value config file. '#' starts a comment; blank lines are
// skipped. Throws ValidationError with the offending line on parse failure.
ExperimentConfig load_config_file(const std::string& path);

}  // namespace amoe
