// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "amoe/config.hpp"
#include "amoe/grid.hpp"
#include "amoe/moe.hpp"

namespace amoe {

// One teacher-forced training/eval sample. The prompt carries two parallel id
// streams (audio ids embedded by the synthetic encoder + adapter, text ids by
// the text table) that are fused position-wise; targets live on the delay
// grid. All target streams share logical length target_len before the delay.
struct BimodalSample {
  std::vector<int> prompt_text_ids;
  std::vector<int> prompt_audio_ids;
  std::vector<Modality> modality_tags;  // per prompt position
  DelayedTokenGrid grid;                // (1+S) x (T+S) targets
  std::vector<std::vector<bool>> loss_mask;  // per grid cell; PADs excluded anyway
};

using BimodalBatch = std::vector<BimodalSample>;

// Elementwise mean of two equal-shape embedding blocks.
Tensor fuse_embeddings(const Tensor& audio_emb, const Tensor& text_emb);

// Per-MoE-layer routing decisions from one forward pass.
struct ForwardTrace {
  std::vector<std::pair<int, RoutingDecision>> decisions;  // (layer, decision)
};

// Head outputs aligned to grid columns 0..W-1: row c of each tensor scores
// the tokens of grid column c.
struct StreamLogits {
  Tensor text;                // W × vocab_text
  std::vector<Tensor> audio;  // S tensors, W × vocab_audio
};

struct ModelBlock {
  Parameter norm_attn, wq, wk, wv, wo;
  Parameter norm_ffn;
  std::optional<ExpertFfn> dense;  // layer 0
  std::optional<MoeLayer> moe;     // layers >= 1
};

// Decoder-only backbone with one text head and S audio heads. The first
// layer's feed-forward is dense; the rest are sparse MoE sublayers.
struct Model {
  MoeConfig cfg;
  Tensor audio_encoder;  // fixed synthetic encoder table, (vocab_audio+2) × h
  Parameter adapter_w, adapter_b;
  Parameter text_embed;                 // (vocab_text+2) × h
  std::vector<Parameter> audio_embed;   // per stream, (vocab_audio+2) × h
  Parameter pos_embed;                  // max_positions × h
  std::vector<ModelBlock> blocks;
  Parameter final_norm;
  Parameter text_head;                  // vocab_text × h
  std::vector<Parameter> audio_heads;   // vocab_audio × h each

  static Model init(const MoeConfig& cfg, std::uint64_t seed);

  // Stable traversal order; clone() and snapshots rely on it.
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

  // Deep copy: fresh buffers, same values, tags, freeze state and masks.
  Model clone() const;

  void zero_grad();
  // Plain gradient-descent update on unfrozen parameters.
  void sgd_step(double lr);

  // H = mean(Adapter(Encoder(audio)), Embedding(text)) per prompt position.
  Tensor embed_prompt(const std::vector<int>& text_ids,
                      const std::vector<int>& audio_ids) const;

  // Mean over stream embeddings of grid columns [from_col, to_col); leading
  // delay cells embed as the stream's BOS, other PADs as PAD.
  Tensor embed_grid_columns(const DelayedTokenGrid& grid, long from_col, long to_col) const;

  // Adds positions, runs all blocks, applies the final norm.
  Tensor backbone(const Tensor& embedded, ForwardTrace* trace) const;

  StreamLogits heads(const Tensor& hidden_rows) const;

  // Full teacher-forced pass: logits for every grid column of the sample.
  StreamLogits forward_teacher(const BimodalSample& sample, ForwardTrace* trace = nullptr) const;

  // Prompt-region pass only; used for load profiling and decode boot.
  Tensor forward_prompt(const BimodalSample& sample, ForwardTrace* trace) const;

  // MoE layer indices (1..num_layers-1).
  std::vector<int> moe_layer_indices() const;
  MoeLayer& moe_layer(int layer_index);
  const MoeLayer& moe_layer(int layer_index) const;

  // Appends freshly initialized routed experts (near-zero router rows) to
  // every MoE layer; the MoExtend-style baseline.
  void extend_experts(int extra, std::uint64_t seed);
};

// Deep snapshot of parameter values in traversal order.
std::vector<std::vector<double>> snapshot_parameters(const Model& m);

}  // namespace amoe
