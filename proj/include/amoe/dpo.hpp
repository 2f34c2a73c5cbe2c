// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "amoe/corpus.hpp"
#include "amoe/decode.hpp"
#include "amoe/model.hpp"

namespace amoe {

// (prompt, preferred audio grid, dispreferred audio grid). Rewards are
// WER-analog costs: lower is better, and reward_w < reward_l strictly.
struct PreferenceTriplet {
  std::vector<int> prompt;  // text token sequence
  DelayedTokenGrid preferred;
  DelayedTokenGrid dispreferred;
  double reward_w = 0.0;
  double reward_l = 0.0;
};

// Levenshtein distance between two token sequences.
long edit_distance(const std::vector<int>& a, const std::vector<int>& b);

// Normalized edit distance in [0, 1] between the concatenated audio streams
// of the sampled grid and the ground truth; 0 = exact match. The ranking
// signal standing in for ASR word error rate.
double grid_wer(const DelayedTokenGrid& sampled, const DelayedTokenGrid& truth);

// 1 - grid_wer; the "higher is better" form used in reports.
double grid_reward(const DelayedTokenGrid& sampled, const DelayedTokenGrid& truth);

// Sum of per-token log-probs over the grid's non-PAD audio cells, conditioned
// on the prompt and the grid's own text row. Differentiable through the
// model's parameters.
Tensor sequence_audio_logprob(const Model& model, const std::vector<int>& prompt_text,
                              const DelayedTokenGrid& grid);

// Samples candidates per prompt, ranks them by the WER-analog cost returned
// by reward_fn (lower = better), and pairs the best against the worst.
// Prompts where all candidates tie are skipped and counted in ties_skipped.
std::vector<PreferenceTriplet> build_preference_pairs(
    const Model& model, const std::vector<std::vector<int>>& prompts, int samples_per_prompt,
    const std::function<double(const std::vector<int>&, const DelayedTokenGrid&)>& reward_fn,
    const SamplingConfig& sampling, long max_len, int* ties_skipped = nullptr);

// -E[log sigmoid(beta (log P_theta(y_w|x)/P_ref(y_w|x) - log P_theta(y_l|x)/P_ref(y_l|x)))];
// equals ln 2 exactly when policy == reference or beta == 0. Differentiable
// w.r.t. the policy only.
Tensor dpo_loss(const Model& policy, const Model& reference,
                const std::vector<PreferenceTriplet>& batch, double beta);

// Mean implicit-reward margin beta*((lp_w - ref_w) - (lp_l - ref_l)).
double dpo_margin(const Model& policy, const Model& reference,
                  const std::vector<PreferenceTriplet>& batch, double beta);

struct DpoReport {
  std::vector<double> loss_curve;
  std::vector<double> margin_curve;
};

// Gradient descent on dpo_loss against a frozen copy of the starting policy.
DpoReport run_dpo_stage(Model& policy, const std::vector<PreferenceTriplet>& triplets,
                        double beta, int steps, double lr, int batch_size, std::uint64_t seed);

// One triplet per line: {"prompt": [...], "y_w": [[...]], "y_l": [[...]],
// "reward_w": r, "reward_l": r}; audio streams are stored undelayed.
std::string triplets_to_jsonl(const std::vector<PreferenceTriplet>& triplets);

}  // namespace amoe
