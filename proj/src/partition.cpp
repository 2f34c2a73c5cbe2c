// SPDX-License-Identifier: Apache-2.0
#include "amoe/partition.hpp"

#include <algorithm>
#include <numeric>

#include <json.hpp>

#include "amoe/errors.hpp"

namespace amoe {

std::pair<ExpertLoadProfile, ExpertLoadProfile> profile_modality_loads(
    const Model& model, const BimodalBatch& dataset_audio, const BimodalBatch& dataset_text,
    bool weighted) {
  if (dataset_audio.empty() || dataset_text.empty()) {
    throw ProfileError("profile_modality_loads: empty dataset");
  }
  NoGradGuard ng;
  // inference over the full teacher-forced sequence; every position of a
  // unimodal dataset counts toward that dataset's modality
  auto run = [&](const BimodalBatch& data, Modality modality) {
    ExpertLoadProfile profile;
    profile.weighted = weighted;
    for (const BimodalSample& sample : data) {
      ForwardTrace trace;
      model.forward_teacher(sample, &trace);
      for (const auto& [layer, decision] : trace.decisions) {
        profile.record_load(layer, decision,
                            std::vector<Modality>(decision.indices.size(), modality));
      }
    }
    return profile;
  };
  return {run(dataset_audio, Modality::Audio), run(dataset_text, Modality::Text)};
}

ModalityPartition select_partition(const ExpertLoadProfile& e_audio,
                                   const ExpertLoadProfile& e_text, int k) {
  if (e_audio.num_experts != e_text.num_experts ||
      e_audio.layer_indices() != e_text.layer_indices()) {
    throw ProfileError("select_partition: profiles cover different layers or expert counts");
  }
  const int n = e_audio.num_experts;
  if (k <= 0 || k >= n) {
    throw ValidationError("select_partition: k=" + std::to_string(k) + " out of range for " +
                          std::to_string(n) + " experts");
  }
  ModalityPartition part;
  part.num_experts = n;
  part.k = k;
  for (int layer : e_audio.layer_indices()) {
    const std::vector<double> ea = e_audio.loads(layer, Modality::Audio);
    const std::vector<double> et = e_text.loads(layer, Modality::Text);
    LayerPartition lp;
    lp.audio_scores.resize(n);
    lp.text_scores.resize(n);
    for (int e = 0; e < n; ++e) {
      lp.audio_scores[e] = ea[e] * (1.0 - et[e]);
      lp.text_scores[e] = et[e] * (1.0 - ea[e]);
    }
    std::vector<long> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](long a, long b) {
      return lp.audio_scores[a] > lp.audio_scores[b];
    });
    lp.audio_experts.assign(order.begin(), order.begin() + k);
    std::vector<long> rest(order.begin() + k, order.end());
    std::stable_sort(rest.begin(), rest.end(), [&](long a, long b) {
      if (lp.text_scores[a] != lp.text_scores[b]) return lp.text_scores[a] > lp.text_scores[b];
      return a < b;
    });
    lp.text_experts = std::move(rest);
    part.layers[layer] = std::move(lp);
  }
  return part;
}

ModalityPartition partition_random(const std::vector<int>& layer_indices, int num_experts,
                                   int k, std::uint64_t seed) {
  if (k <= 0 || k >= num_experts) {
    throw ValidationError("partition_random: k=" + std::to_string(k) + " out of range for " +
                          std::to_string(num_experts) + " experts");
  }
  Rng rng = make_rng(seed, "partition_random");
  ModalityPartition part;
  part.num_experts = num_experts;
  part.k = k;
  for (int layer : layer_indices) {
    std::vector<long> pool(num_experts);
    std::iota(pool.begin(), pool.end(), 0);
    // partial Fisher-Yates: first k entries become the audio set
    for (int i = 0; i < k; ++i) {
      std::uniform_int_distribution<long> pick(i, num_experts - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    LayerPartition lp;
    lp.audio_experts.assign(pool.begin(), pool.begin() + k);
    std::sort(lp.audio_experts.begin(), lp.audio_experts.end());
    lp.text_experts.assign(pool.begin() + k, pool.end());
    std::sort(lp.text_experts.begin(), lp.text_experts.end());
    lp.audio_scores.assign(num_experts, 0.0);
    lp.text_scores.assign(num_experts, 0.0);
    part.layers[layer] = std::move(lp);
  }
  return part;
}

std::string partition_to_json(const ModalityPartition& p) {
  nlohmann::ordered_json root = nlohmann::ordered_json::object();
  for (const auto& [layer, lp] : p.layers) {
    nlohmann::ordered_json entry;
    entry["audio"] = lp.audio_experts;
    entry["text"] = lp.text_experts;
    entry["scores"] = {{"audio", lp.audio_scores}, {"text", lp.text_scores}};
    root[std::to_string(layer)] = std::move(entry);
  }
  return root.dump(2) + "\n";
}

ModalityPartition partition_from_json(const std::string& text) {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("partition_from_json: ") + e.what());
  }
  ModalityPartition p;
  for (const auto& [key, entry] : root.items()) {
    LayerPartition lp;
    lp.audio_experts = entry.at("audio").get<std::vector<long>>();
    lp.text_experts = entry.at("text").get<std::vector<long>>();
    lp.audio_scores = entry.at("scores").at("audio").get<std::vector<double>>();
    lp.text_scores = entry.at("scores").at("text").get<std::vector<double>>();
    p.num_experts = static_cast<int>(lp.audio_experts.size() + lp.text_experts.size());
    p.k = static_cast<int>(lp.audio_experts.size());
    p.layers[std::stoi(key)] = std::move(lp);
  }
  return p;
}

}  // namespace amoe
