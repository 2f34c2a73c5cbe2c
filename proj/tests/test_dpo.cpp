// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "amoe/dpo.hpp"
#include "amoe/errors.hpp"

using namespace amoe;

namespace {

MoeConfig small_cfg() {
  MoeConfig mc;
  mc.num_layers = 2;
  mc.hidden_dim = 16;
  mc.expert_hidden_dim = 16;
  mc.num_routed_experts = 4;
  mc.num_shared_experts = 1;
  mc.top_k = 2;
  mc.vocab_text = 12;
  mc.vocab_audio = 6;
  mc.num_audio_streams = 2;
  mc.max_positions = 32;
  return mc;
}

DelayedTokenGrid grid_of(const std::vector<std::vector<int>>& undelayed) {
  return apply_delay(undelayed);
}

std::vector<PreferenceTriplet> toy_triplets(Rng& rng, int count) {
  std::uniform_int_distribution<int> text(0, 11), audio(0, 5);
  std::vector<PreferenceTriplet> out;
  for (int i = 0; i < count; ++i) {
    PreferenceTriplet t;
    t.prompt = {text(rng), text(rng), text(rng)};
    std::vector<std::vector<int>> w(3, std::vector<int>(4)), l(3, std::vector<int>(4));
    for (auto* g : {&w, &l}) {
      (*g)[0] = {text(rng), text(rng), text(rng), text(rng)};
      for (int r = 1; r < 3; ++r) {
        for (int c = 0; c < 4; ++c) (*g)[r][c] = audio(rng);
      }
    }
    t.preferred = grid_of(w);
    t.dispreferred = grid_of(l);
    t.reward_w = 0.1;
    t.reward_l = 0.6;
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace

TEST_CASE("edit distance basics") {
  CHECK(edit_distance({1, 2, 3}, {1, 2, 3}) == 0);
  CHECK(edit_distance({1, 2, 3}, {1, 3}) == 1);
  CHECK(edit_distance({}, {1, 2}) == 2);
  CHECK(edit_distance({1, 2, 3, 4}, {4, 3, 2, 1}) == 4);
  CHECK(edit_distance({5, 1, 2, 3}, {1, 2, 3, 9}) == 2);
}

TEST_CASE("grid reward compares concatenated audio streams") {
  auto truth = grid_of({{1, 2, 3}, {4, 5, 0}, {2, 2, 2}});
  CHECK(grid_wer(truth, truth) == 0.0);
  CHECK(grid_reward(truth, truth) == 1.0);
  // text row differences do not matter; audio rows do
  auto text_differs = grid_of({{9, 9, 9}, {4, 5, 0}, {2, 2, 2}});
  CHECK(grid_wer(text_differs, truth) == 0.0);
  auto one_audio_edit = grid_of({{1, 2, 3}, {4, 5, 1}, {2, 2, 2}});
  CHECK(grid_wer(one_audio_edit, truth) == doctest::Approx(1.0 / 6).epsilon(1e-12));
}

TEST_CASE("dpo loss equals ln 2 exactly at policy == reference") {
  Model policy = Model::init(small_cfg(), 3);
  Model reference = policy.clone();
  Rng rng(7);
  auto triplets = toy_triplets(rng, 3);
  Tensor loss = dpo_loss(policy, reference, triplets, 0.1);
  CHECK(std::abs(loss.scalar() - std::log(2.0)) < 1e-12);

  // beta == 0 forces ln 2 for arbitrary models
  Model other = Model::init(small_cfg(), 99);
  Tensor flat = dpo_loss(policy, other, triplets, 0.0);
  CHECK(std::abs(flat.scalar() - std::log(2.0)) < 1e-12);
}

TEST_CASE("dpo loss is monotone in the implicit margin") {
  // scalar sanity on the closed form: -log sigmoid(z) decreases in z
  auto nls = [](double z) { return z > 0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z)); };
  double prev = nls(-2.0);
  for (double z = -1.5; z < 2.0; z += 0.5) {
    CHECK(nls(z) < prev);
    prev = nls(z);
  }
}

TEST_CASE("reference gradients are identically zero") {
  Model policy = Model::init(small_cfg(), 5);
  Model reference = policy.clone();
  Rng rng(11);
  auto triplets = toy_triplets(rng, 2);
  Tensor loss = dpo_loss(policy, reference, triplets, 0.2);
  policy.zero_grad();
  reference.zero_grad();
  backward(loss);
  double policy_norm = 0.0;
  for (Parameter* p : policy.parameters()) {
    for (double g : *p->value.grad) policy_norm += std::abs(g);
  }
  CHECK(policy_norm > 0.0);
  for (Parameter* p : reference.parameters()) {
    for (double g : *p->value.grad) CHECK(g == 0.0);
  }
}

TEST_CASE("one descent step strictly increases the preference margin") {
  Rng rng(13);
  auto triplets = toy_triplets(rng, 4);
  for (const PreferenceTriplet& t : triplets) {
    Model policy = Model::init(small_cfg(), 17);
    const Model reference = policy.clone();
    const double m0 = dpo_margin(policy, reference, {t}, 0.1);
    CHECK(std::abs(m0) < 1e-12);  // starts at zero by construction

    Tensor loss = dpo_loss(policy, reference, {t}, 0.1);
    CHECK(std::abs(loss.scalar() - std::log(2.0)) < 1e-12);  // step-0 value
    policy.zero_grad();
    backward(loss);
    policy.sgd_step(1e-3);
    const double m1 = dpo_margin(policy, reference, {t}, 0.1);
    CHECK(m1 > m0);
  }
}

TEST_CASE("run_dpo_stage descends and reports the margin trajectory") {
  Model policy = Model::init(small_cfg(), 23);
  Rng rng(19);
  auto triplets = toy_triplets(rng, 6);
  DpoReport rep = run_dpo_stage(policy, triplets, 0.1, 30, 0.005, 4, 42);
  REQUIRE(rep.loss_curve.size() == 30);
  REQUIRE(rep.margin_curve.size() == 30);
  CHECK(std::abs(rep.loss_curve.front() - std::log(2.0)) < 1e-9);
  CHECK(rep.loss_curve.back() < rep.loss_curve.front());
  CHECK(rep.margin_curve.back() > 0.0);

  // zero steps is a no-op
  Model before = Model::init(small_cfg(), 29);
  auto snap = snapshot_parameters(before);
  DpoReport none = run_dpo_stage(before, triplets, 0.1, 0, 0.01, 4, 1);
  CHECK(none.loss_curve.empty());
  CHECK(snapshot_parameters(before) == snap);

  CHECK_THROWS_AS(run_dpo_stage(policy, {}, 0.1, 5, 0.01, 4, 1), ValidationError);
}

TEST_CASE("pair construction ranks by cost and skips ties") {
  Model model = Model::init(small_cfg(), 31);
  std::uniform_int_distribution<int> text(0, 11);
  Rng rng(23);
  std::vector<std::vector<int>> prompts;
  for (int i = 0; i < 3; ++i) prompts.push_back({text(rng), text(rng), text(rng)});

  // cost oracle driven by a per-grid hash; exhaustive min/max scan replayed here
  auto cost_fn = [](const std::vector<int>& prompt, const DelayedTokenGrid& grid) {
    (void)prompt;
    double h = 0.0;
    for (const auto& row : grid.rows)
      for (int v : row) h = std::fmod(h * 31.0 + (v + 3), 997.0);
    return h / 997.0;
  };
  SamplingConfig sampling{3, 1.0, 777};
  int ties = -1;
  auto triplets = build_preference_pairs(model, prompts, 5, cost_fn, sampling, 4, &ties);
  CHECK(ties == 0);
  REQUIRE(triplets.size() == 3);
  for (size_t pi = 0; pi < triplets.size(); ++pi) {
    CHECK(triplets[pi].reward_w < triplets[pi].reward_l);
    // replay the candidate scan
    double best = 1e300, worst = -1e300;
    for (int c = 0; c < 5; ++c) {
      SamplingConfig sc = sampling;
      sc.seed = derive_seed(sampling.seed,
                            "candidate_" + std::to_string(pi) + "_" + std::to_string(c));
      DecodeOutput dec = batch_parallel_decode(model, prompts[pi],
                                               std::vector<int>(3, kPadToken), sc, 4);
      const double r = cost_fn(prompts[pi], dec.grid);
      best = std::min(best, r);
      worst = std::max(worst, r);
    }
    CHECK(triplets[pi].reward_w == best);
    CHECK(triplets[pi].reward_l == worst);
  }

  // constant cost -> everything ties -> empty output with a warning count
  auto flat = [](const std::vector<int>&, const DelayedTokenGrid&) { return 0.5; };
  auto none = build_preference_pairs(model, prompts, 3, flat, sampling, 4, &ties);
  CHECK(none.empty());
  CHECK(ties == 3);

  CHECK_THROWS_AS(build_preference_pairs(model, prompts, 1, flat, sampling, 4, nullptr),
                  ValidationError);
}

TEST_CASE("triplets serialize to one JSON object per line") {
  Rng rng(29);
  auto triplets = toy_triplets(rng, 2);
  const std::string jsonl = triplets_to_jsonl(triplets);
  int lines = 0;
  for (char c : jsonl) lines += c == '\n';
  CHECK(lines == 2);
  CHECK(jsonl.find("\"prompt\"") != std::string::npos);
  CHECK(jsonl.find("\"y_w\"") != std::string::npos);
  CHECK(jsonl.find("\"y_l\"") != std::string::npos);
  CHECK(jsonl.find("\"reward_w\"") != std::string::npos);
}
