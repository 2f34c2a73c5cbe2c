// SPDX-License-Identifier: Apache-2.0
#include "amoe/moe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "amoe/errors.hpp"

namespace amoe {

ExpertFfn ExpertFfn::init(int hidden_dim, int expert_hidden_dim, Rng& rng, ParamTag tag) {
  ExpertFfn e;
  const double s1 = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(expert_hidden_dim));
  e.w1 = Parameter(Tensor::randn({expert_hidden_dim, hidden_dim}, rng, s1), tag);
  e.b1 = Parameter(Tensor::zeros({expert_hidden_dim}), tag);
  e.w2 = Parameter(Tensor::randn({hidden_dim, expert_hidden_dim}, rng, s2), tag);
  e.b2 = Parameter(Tensor::zeros({hidden_dim}), tag);
  return e;
}

Tensor ExpertFfn::forward(const Tensor& x) const {
  Tensor h = silu(add_rowvec(matmul_nt(x, w1.value), b1.value));
  return add_rowvec(matmul_nt(h, w2.value), b2.value);
}

void ExpertFfn::collect(std::vector<Parameter*>& out) {
  out.push_back(&w1);
  out.push_back(&b1);
  out.push_back(&w2);
  out.push_back(&b2);
}

MoeLayer MoeLayer::init(int hidden_dim, int expert_hidden_dim, int num_experts, int num_shared,
                        int top_k, int layer_index, Rng& rng) {
  MoeLayer layer;
  layer.top_k = top_k;
  const double sr = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
  layer.router.weight = Parameter(Tensor::randn({num_experts, hidden_dim}, rng, sr),
                                  ParamTag{ParamKind::Router, layer_index});
  for (int e = 0; e < num_experts; ++e) {
    layer.experts.push_back(ExpertFfn::init(
        hidden_dim, expert_hidden_dim, rng, ParamTag{ParamKind::RoutedExpert, layer_index, e}));
  }
  for (int e = 0; e < num_shared; ++e) {
    layer.shared.push_back(ExpertFfn::init(
        hidden_dim, expert_hidden_dim, rng, ParamTag{ParamKind::SharedExpert, layer_index, e}));
  }
  return layer;
}

namespace {

// Softmax over eligible experts; ineligible ones get -inf logits and thus
// exactly zero probability.
Tensor masked_router_probs(const Tensor& x, const RouterState& router) {
  Tensor logits = matmul_nt(x, router.weight.value);
  if (router.score_mask) {
    const long num_experts = router.weight.value.rows();
    Tensor mask_vec = Tensor::zeros({num_experts});
    for (long e = 0; e < num_experts; ++e) {
      if (!(*router.score_mask)[e]) {
        (*mask_vec.data)[e] = -std::numeric_limits<double>::infinity();
      }
    }
    logits = add_rowvec(logits, mask_vec);
  }
  return softmax(logits, 1);
}

}  // namespace

RoutingDecision MoeLayer::route(const Tensor& x) const {
  const long num_experts = router.weight.value.rows();
  if (router.score_mask) {
    const long eligible =
        std::count(router.score_mask->begin(), router.score_mask->end(), true);
    if (eligible < top_k) {
      throw RoutingError("route: score mask leaves " + std::to_string(eligible) +
                         " eligible experts, need top_k=" + std::to_string(top_k));
    }
  }
  RoutingDecision d;
  d.probs = masked_router_probs(x, router);
  const long n = x.rows();
  d.indices.resize(n);
  std::vector<long> order(num_experts);
  for (long i = 0; i < n; ++i) {
    std::iota(order.begin(), order.end(), 0);
    const double* prow = d.probs.data->data() + i * num_experts;
    std::stable_sort(order.begin(), order.end(),
                     [prow](long a, long b) { return prow[a] > prow[b]; });
    d.indices[i].assign(order.begin(), order.begin() + top_k);
  }
  d.weights = normalize_rows(gather_per_row(d.probs, d.indices));
  return d;
}

RoutingDecision MoeLayer::route_given_indices(
    const Tensor& x, const std::vector<std::vector<long>>& indices) const {
  RoutingDecision d;
  d.probs = masked_router_probs(x, router);
  d.indices = indices;
  d.weights = normalize_rows(gather_per_row(d.probs, indices));
  return d;
}

Tensor MoeLayer::forward(const Tensor& x, const RoutingDecision& decision) const {
  const long n = x.rows();
  if (static_cast<long>(decision.indices.size()) != n) {
    throw ShapeError("moe_forward: decision covers " + std::to_string(decision.indices.size()) +
                     " tokens, input has " + std::to_string(n));
  }
  Tensor out;
  for (int slot = 0; slot < top_k; ++slot) {
    // group token rows by the expert selected at this slot
    std::map<long, std::vector<long>> groups;
    for (long i = 0; i < n; ++i) groups[decision.indices[i][slot]].push_back(i);
    Tensor slot_out;
    for (const auto& [expert, toks] : groups) {
      Tensor y = experts[expert].forward(rows(x, toks));
      Tensor placed = scatter_rows(y, toks, n);
      slot_out = slot_out.data ? add(slot_out, placed) : placed;
    }
    Tensor weighted = mul_colvec(slot_out, column(decision.weights, slot));
    out = out.data ? add(out, weighted) : weighted;
  }
  for (const auto& sh : shared) {
    Tensor y = sh.forward(x);
    out = out.data ? add(out, y) : y;
  }
  return out;
}

void MoeLayer::apply_modality_mask(const std::vector<long>& eligible) {
  const long num_experts = router.weight.value.rows();
  if (eligible.empty()) throw RoutingError("apply_modality_mask: empty eligible set");
  if (static_cast<long>(eligible.size()) < top_k) {
    throw RoutingError("apply_modality_mask: " + std::to_string(eligible.size()) +
                       " eligible experts, need top_k=" + std::to_string(top_k));
  }
  std::vector<bool> mask(num_experts, false);
  for (long e : eligible) {
    if (e < 0 || e >= num_experts) {
      throw RoutingError("apply_modality_mask: expert " + std::to_string(e) +
                         " outside 0.." + std::to_string(num_experts - 1));
    }
    mask[e] = true;
  }
  router.score_mask = std::move(mask);
}

void MoeLayer::clear_modality_mask() { router.score_mask.reset(); }

void MoeLayer::collect(std::vector<Parameter*>& out) {
  out.push_back(&router.weight);
  for (auto& e : experts) e.collect(out);
  for (auto& e : shared) e.collect(out);
}

void ExpertLoadProfile::record_load(int layer, const RoutingDecision& decision,
                                    const std::vector<Modality>& tags) {
  const size_t n = decision.indices.size();
  if (tags.size() != n) {
    throw ProfileError("record_load: " + std::to_string(tags.size()) + " tags for " +
                       std::to_string(n) + " tokens");
  }
  const int experts_here = static_cast<int>(decision.probs.cols());
  if (num_experts == 0) num_experts = experts_here;
  if (num_experts != experts_here) {
    throw ProfileError("record_load: expert count changed from " + std::to_string(num_experts) +
                       " to " + std::to_string(experts_here));
  }
  auto& lc = layers[layer];
  for (int m = 0; m < 2; ++m) {
    if (lc.count[m].empty()) lc.count[m].assign(num_experts, 0.0);
  }
  for (size_t i = 0; i < n; ++i) {
    const int m = static_cast<int>(tags[i]);
    lc.tokens[m] += 1.0;
    for (size_t j = 0; j < decision.indices[i].size(); ++j) {
      const long e = decision.indices[i][j];
      lc.count[m][e] += weighted ? decision.weights.at(static_cast<long>(i), static_cast<long>(j))
                                 : 1.0;
    }
  }
}

void ExpertLoadProfile::merge(const ExpertLoadProfile& other) {
  if (other.layers.empty()) return;
  if (num_experts == 0) num_experts = other.num_experts;
  if (num_experts != other.num_experts || weighted != other.weighted) {
    throw ProfileError("merge: profiles have incompatible shapes or counting modes");
  }
  for (const auto& [layer, oc] : other.layers) {
    auto& lc = layers[layer];
    for (int m = 0; m < 2; ++m) {
      if (lc.count[m].empty()) lc.count[m].assign(num_experts, 0.0);
      for (int e = 0; e < num_experts; ++e) lc.count[m][e] += oc.count[m][e];
      lc.tokens[m] += oc.tokens[m];
    }
  }
}

double ExpertLoadProfile::load_rate(int layer, Modality m, int expert) const {
  auto it = layers.find(layer);
  if (it == layers.end()) throw ProfileError("load_rate: no layer " + std::to_string(layer));
  const auto& lc = it->second;
  const int mi = static_cast<int>(m);
  if (lc.tokens[mi] == 0.0) return 0.0;
  return lc.count[mi][expert] / lc.tokens[mi];
}

std::vector<double> ExpertLoadProfile::loads(int layer, Modality m) const {
  std::vector<double> out(num_experts);
  for (int e = 0; e < num_experts; ++e) out[e] = load_rate(layer, m, e);
  return out;
}

std::vector<int> ExpertLoadProfile::layer_indices() const {
  std::vector<int> out;
  for (const auto& [layer, lc] : layers) out.push_back(layer);
  return out;
}

void ExpertLoadProfile::write_csv(std::ostream& os) const {
  os << "layer,expert,modality,raw_count,load_rate\n";
  std::ostringstream num;
  num.precision(17);
  for (const auto& [layer, lc] : layers) {
    for (int e = 0; e < num_experts; ++e) {
      for (int m = 0; m < 2; ++m) {
        const Modality mod = static_cast<Modality>(m);
        num.str("");
        num << lc.count[m][e];
        os << layer << "," << e << "," << modality_name(mod) << "," << num.str() << ",";
        num.str("");
        num << (lc.tokens[m] == 0.0 ? 0.0 : lc.count[m][e] / lc.tokens[m]);
        os << num.str() << "\n";
      }
    }
  }
}

}  // namespace amoe
