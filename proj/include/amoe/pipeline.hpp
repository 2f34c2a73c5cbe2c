// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "amoe/config.hpp"
#include "amoe/train.hpp"

namespace amoe {

struct DpoSummary {
  int triplets = 0;
  int ties_skipped = 0;
  double reward_before = 0.0;  // mean greedy 1-WER on held-out prompts
  double reward_after = 0.0;
};

struct PipelineResult {
  EvalMetrics before;
  EvalMetrics after;
  DropReport drop;
  std::optional<double> routing_shift_kl;  // extend strategy only
  std::optional<DpoSummary> dpo;
};

// The full staged protocol on one model: text pretraining (the stand-in for
// the pretrained text backbone), modality alignment, load profiling and
// partitioning per the configured strategy, unimodal specialization, joint
// training, and optionally preference training. Writes resolved config,
// partition JSON, load CSVs, per-stage reports and loss logs, sample decodes
// and final metrics into out_dir; byte-identical outputs for identical
// (config, seed).
PipelineResult run_pipeline(const ExperimentConfig& cfg, const std::string& out_dir);

struct AblationCell {
  std::string strategy;
  std::uint64_t seed = 0;
  std::optional<PipelineResult> result;
  std::string error;  // empty on success
};

// Per-strategy, per-seed pipeline grid over identical corpora and stage
// budgets; writes ablation.csv plus one run directory per cell. Errors are
// recorded in the cell and the sweep continues.
std::vector<AblationCell> run_ablation(const ExperimentConfig& base,
                                       const std::vector<std::string>& strategies,
                                       const std::vector<std::uint64_t>& seeds,
                                       const std::string& out_dir);

struct SweepRow {
  int k = 0;
  std::optional<PipelineResult> result;
  std::string note;  // skip reason for invalid k
};

// Audio-expert-count sweep at fixed strategy; invalid k values are skipped
// with a note. Writes sweep.csv.
std::vector<SweepRow> run_expert_sweep(const ExperimentConfig& base, const std::vector<int>& ks,
                                       const std::string& out_dir);

// Pretrains, aligns, then profiles both unimodal corpora; writes the two load
// CSVs and a per-layer max-audio-score summary.
void run_export_loads(const ExperimentConfig& cfg, const std::string& out_dir);

}  // namespace amoe
