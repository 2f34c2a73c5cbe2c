// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <optional>
#include <ostream>
#include <vector>

#include "amoe/ops.hpp"
#include "amoe/tensor.hpp"

namespace amoe {

enum class Modality { Audio = 0, Text = 1 };

inline const char* modality_name(Modality m) { return m == Modality::Audio ? "audio" : "text"; }

// Two-layer feed-forward expert with a sigmoid-weighted linear unit.
struct ExpertFfn {
  Parameter w1, b1, w2, b2;  // w1: eh×h, w2: h×eh

  static ExpertFfn init(int hidden_dim, int expert_hidden_dim, Rng& rng, ParamTag tag);
  Tensor forward(const Tensor& x) const;
  void collect(std::vector<Parameter*>& out);
};

// Linear modality router plus the optional score-level eligibility mask.
// Masking zeroes routing probabilities outside the eligible set and
// renormalizes the rest; the weight matrix itself is untouched.
struct RouterState {
  Parameter weight;  // E×h
  std::optional<std::vector<bool>> score_mask;  // true = expert eligible
};

// Per-token routing outcome: full pre-top-k probabilities (eligible experts
// sum to 1), the selected distinct expert indices, and their renormalized
// weights. probs and weights stay on the autograd graph.
struct RoutingDecision {
  Tensor probs;                            // n×E
  std::vector<std::vector<long>> indices;  // n×top_k, by descending probability
  Tensor weights;                          // n×top_k, rows sum to 1
};

// One sparse MoE sublayer: routed experts behind the router, plus shared
// experts applied to every token.
struct MoeLayer {
  RouterState router;
  std::vector<ExpertFfn> experts;
  std::vector<ExpertFfn> shared;
  int top_k = 1;

  static MoeLayer init(int hidden_dim, int expert_hidden_dim, int num_experts, int num_shared,
                       int top_k, int layer_index, Rng& rng);

  // Softmax over eligible experts, then top_k by probability with ties broken
  // toward the lower index. Raises RoutingError when the mask leaves fewer
  // than top_k experts.
  RoutingDecision route(const Tensor& x) const;

  // Same weight computation with the discrete index set supplied by the
  // caller; used by gradient checks that hold the selection fixed.
  RoutingDecision route_given_indices(const Tensor& x,
                                      const std::vector<std::vector<long>>& indices) const;

  // Σ_topk weight_i · expert_i(x) + Σ_shared shared_j(x).
  Tensor forward(const Tensor& x, const RoutingDecision& decision) const;

  // Restricts routing to the given expert set for subsequent route() calls.
  void apply_modality_mask(const std::vector<long>& eligible);
  void clear_modality_mask();

  void collect(std::vector<Parameter*>& out);
};

// Per-layer, per-expert token load by modality. Raw counters are exact and
// merge associatively across data shards; in the default binary mode every
// token contributes 1 to each of its top_k selected experts, so the
// normalized per-modality loads of a layer sum to top_k.
struct ExpertLoadProfile {
  struct LayerCounts {
    std::vector<double> count[2];  // [modality][expert]
    double tokens[2] = {0.0, 0.0};
  };

  std::map<int, LayerCounts> layers;  // keyed by model layer index
  int num_experts = 0;
  bool weighted = false;  // sum routing weights instead of counting assignments

  // Counts one RoutingDecision; tags must align with its token rows.
  void record_load(int layer, const RoutingDecision& decision,
                   const std::vector<Modality>& tags);
  void merge(const ExpertLoadProfile& other);

  double load_rate(int layer, Modality m, int expert) const;
  std::vector<double> loads(int layer, Modality m) const;
  std::vector<int> layer_indices() const;

  // columns: layer,expert,modality,raw_count,load_rate; rows ascending.
  void write_csv(std::ostream& os) const;
};

}  // namespace amoe
