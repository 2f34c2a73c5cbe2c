// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "amoe/config.hpp"
#include "amoe/model.hpp"

namespace amoe {

// The synthetic bimodal world. Text and audio vocabularies are disjoint; the
// text vocabulary splits into a "written" half and a "colloquial" half so the
// two input modalities exercise different rules:
//
//   text-input samples:  prompt and target follow the written 2-gram rule
//                        sigma2(prev2, prev1) -> next, a dense random table
//                        the model has to memorize during pretraining.
//   audio-input samples: prompt is an audio chain under mu; the text target
//                        transcribes the continued chain into the colloquial
//                        half via tau, and the audio streams relay off the
//                        text row (stream 1 = q1(text), stream s = qs(s-1)).
//
// Audio cells are lookups of a token visible in the same input column (the
// delay pattern exposes exactly the right cells); written-text cells also
// need the token one column back. Both live in the expert FFNs, which is
// where the cross-modal parameter interference this harness measures
// happens: the written table is large enough that a damaged expert cannot be
// quietly relearned during the short later stages.
struct SyntheticRules {
  int written_size = 0;     // written half = [0, written_size)
  int colloquial_base = 0;  // colloquial half = [base, vocab_text)
  std::vector<int> sigma2;   // written 2-gram rule, indexed [prev2 * W + prev1]
  std::vector<int> mu;       // audio -> audio bigram rule
  std::vector<int> tau;      // audio -> colloquial transcription
  std::vector<int> q1;       // any text token -> audio (stream-1 relay)
  std::vector<std::vector<int>> qs;  // stream s>=2 relay, audio -> audio

  static SyntheticRules make(const MoeConfig& cfg, std::uint64_t seed);

  int written_next(int prev2, int prev1) const { return sigma2[prev2 * written_size + prev1]; }
};

enum class SampleKind {
  TextPretrain,  // written chain, text row supervised, audio rows PAD
  TextTask,      // D^T: text input, audio-text output
  AudioTask,     // D^A: audio input, audio-text output
  Align,         // D^A with only the text row supervised (ASR-like)
};

enum class EvalTask { Text, Audio, Joint };

const char* eval_task_name(EvalTask t);

// One binary-choice item: compare head logits of correct vs distractor at a
// grid cell of the referenced sample.
struct EvalItem {
  int sample_idx;
  int row;   // 0 = text, 1..S = audio streams
  long col;  // delayed-grid column
  int correct;
  int distractor;
};

struct EvalSuite {
  EvalTask task;
  BimodalBatch samples;
  std::vector<EvalItem> items;
};

struct Corpus {
  int prompt_len;
  int target_len;
  MoeConfig model_cfg;
  SyntheticRules rules;

  static Corpus make(const ExperimentConfig& cfg);

  BimodalSample sample(SampleKind kind, Rng& rng) const;
  BimodalBatch batch(SampleKind kind, int count, Rng& rng) const;

  EvalSuite eval_suite(EvalTask task, int num_samples, int cells_per_sample, Rng& rng) const;

  // The unique correct target grid for a text prompt; the DPO reward oracle.
  DelayedTokenGrid ground_truth_for_text_prompt(const std::vector<int>& prompt_text) const;
};

}  // namespace amoe
