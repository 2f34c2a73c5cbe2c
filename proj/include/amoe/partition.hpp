// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "amoe/model.hpp"
#include "amoe/moe.hpp"

namespace amoe {

// Disjoint audio/text expert index sets for one layer, plus the selection
// scores that produced them.
struct LayerPartition {
  std::vector<long> audio_experts;   // exactly k, by descending audio score
  std::vector<long> text_experts;    // the complement, by descending text score
  std::vector<double> audio_scores;  // a_i = E^A_i · (1 - E^T_i)
  std::vector<double> text_scores;   // t_i = E^T_i · (1 - E^A_i)
};

struct ModalityPartition {
  std::map<int, LayerPartition> layers;  // keyed by model layer index
  int num_experts = 0;
  int k = 0;
};

// Runs the model in inference mode over both unimodal datasets and returns
// the per-layer load profiles (audio first). Deterministic in data order.
std::pair<ExpertLoadProfile, ExpertLoadProfile> profile_modality_loads(
    const Model& model, const BimodalBatch& dataset_audio, const BimodalBatch& dataset_text,
    bool weighted = false);

// Audio experts = top-k of E^A·(1-E^T) per layer; text experts = the
// remaining experts ranked by E^T·(1-E^A). Ties break toward lower index.
// Disjointness is enforced by construction.
ModalityPartition select_partition(const ExpertLoadProfile& e_audio,
                                   const ExpertLoadProfile& e_text, int k);

// Uniformly random k-subsets per layer; the random baseline.
ModalityPartition partition_random(const std::vector<int>& layer_indices, int num_experts,
                                   int k, std::uint64_t seed);

// {"<layer>": {"audio": [...], "text": [...], "scores": {...}}, ...}
std::string partition_to_json(const ModalityPartition& p);
ModalityPartition partition_from_json(const std::string& text);

}  // namespace amoe
