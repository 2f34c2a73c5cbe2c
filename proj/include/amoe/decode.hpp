// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "amoe/grid.hpp"
#include "amoe/model.hpp"

namespace amoe {

struct SamplingConfig {
  int topk = 1;              // 1 = greedy
  double temperature = 1.0;  // -> 0 converges to argmax
  std::uint64_t seed = 0;
};

// Draws from the top-k truncated, temperature-scaled softmax of one logits
// row; ties in the truncation break toward the lower token id. topk == 1 is
// deterministic argmax and never consumes randomness.
int sample_topk(const double* logits, long vocab, int topk, double temperature, Rng& rng);

// Joint decode context. Two logical batch rows share the text stream: row 1
// decodes text only (audio context stays PAD), row 2 decodes audio with row
// 1's text substituted in before its audio sampling each step. Per-stream RNG
// substreams keep the text stream bit-identical to a text-only decode under
// the same seed.
struct DecodeState {
  std::vector<int> prompt_text_ids;
  std::vector<int> prompt_audio_ids;
  SamplingConfig sampling;
  int eos_id = -1;     // text token that ends generation; -1 = run to max_len
  long max_len = 16;   // logical text length cap T

  DelayedTokenGrid joint;      // row 2: substituted text + sampled audio
  DelayedTokenGrid text_only;  // row 1: its own text, PAD audio
  long step = 0;               // next grid column to fill
  long text_len = -1;          // set once EOS fires (or cap reached)
  Rng text_rng;
  std::vector<Rng> audio_rngs;

  static DecodeState make(const Model& model, std::vector<int> prompt_text,
                          std::vector<int> prompt_audio, SamplingConfig sampling, long max_len,
                          int eos_id);

  bool finished() const;
};

// Samples one grid column: row 1's text token (substituted into both rows)
// plus one token per audio stream. Returns the (1+S) tokens of the new
// column; PAD where a stream is outside its span. Errors once the grid is
// complete.
std::vector<int> decode_step(const Model& model, DecodeState& state);

struct DecodeOutput {
  std::vector<int> text;                     // length T (EOS included if fired)
  std::vector<std::vector<int>> audio;       // S undelayed streams of length T
  DelayedTokenGrid grid;                     // the raw delayed grid
  SamplingConfig sampling;
};

// Runs decode_step until the delayed grid is fully populated, then undoes the
// delay. The returned text equals a text-only decode of the same prompt under
// the same seed, token for token.
DecodeOutput batch_parallel_decode(const Model& model, const std::vector<int>& prompt_text,
                                   const std::vector<int>& prompt_audio,
                                   SamplingConfig sampling, long max_len, int eos_id = -1);

// Reference text-only path (row 1 alone).
std::vector<int> text_only_decode(const Model& model, const std::vector<int>& prompt_text,
                                  const std::vector<int>& prompt_audio, SamplingConfig sampling,
                                  long max_len, int eos_id = -1);

// {"text": [...], "audio": [[...] x S], "seed": ..., "sampling": {...}}
std::string decode_output_to_json(const DecodeOutput& out);

}  // namespace amoe
