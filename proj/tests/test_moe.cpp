// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "amoe/errors.hpp"
#include "amoe/moe.hpp"

using namespace amoe;

namespace {

MoeLayer make_layer(int hidden, int eh, int experts, int shared, int top_k,
                    std::uint64_t seed = 1) {
  Rng rng(seed);
  return MoeLayer::init(hidden, eh, experts, shared, top_k, 1, rng);
}

// brute-force reference: full sort of the probability row, then renormalize
// the top k
std::pair<std::vector<long>, std::vector<double>> sort_oracle(const std::vector<double>& probs,
                                                              int k) {
  std::vector<long> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](long a, long b) { return probs[a] > probs[b]; });
  order.resize(k);
  double sum = 0.0;
  for (long i : order) sum += probs[i];
  std::vector<double> weights;
  for (long i : order) weights.push_back(probs[i] / sum);
  return {order, weights};
}

// an expert computing the exact identity: silu(x) - silu(-x) == x
void make_identity_expert(ExpertFfn& e, int h) {
  REQUIRE(e.w1.value.rows() == 2 * h);
  std::fill(e.w1.value.data->begin(), e.w1.value.data->end(), 0.0);
  std::fill(e.w2.value.data->begin(), e.w2.value.data->end(), 0.0);
  std::fill(e.b1.value.data->begin(), e.b1.value.data->end(), 0.0);
  std::fill(e.b2.value.data->begin(), e.b2.value.data->end(), 0.0);
  for (int i = 0; i < h; ++i) {
    e.w1.value.at(i, i) = 1.0;
    e.w1.value.at(h + i, i) = -1.0;
    e.w2.value.at(i, i) = 1.0;
    e.w2.value.at(i, h + i) = -1.0;
  }
}

void make_zero_expert(ExpertFfn& e) {
  std::fill(e.w1.value.data->begin(), e.w1.value.data->end(), 0.0);
  std::fill(e.w2.value.data->begin(), e.w2.value.data->end(), 0.0);
  std::fill(e.b1.value.data->begin(), e.b1.value.data->end(), 0.0);
  std::fill(e.b2.value.data->begin(), e.b2.value.data->end(), 0.0);
}

}  // namespace

TEST_CASE("route breaks probability ties toward the lower index") {
  MoeLayer layer = make_layer(4, 8, 4, 0, 2);
  // zero router weight -> identical logits -> uniform probabilities
  std::fill(layer.router.weight.value.data->begin(), layer.router.weight.value.data->end(), 0.0);
  Tensor x = Tensor::from({1, 4}, {0.3, -0.2, 0.9, 0.1});
  RoutingDecision d = layer.route(x);
  CHECK(d.indices[0] == std::vector<long>{0, 1});
  CHECK(d.weights.at(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(d.weights.at(0, 1) == doctest::Approx(0.5).epsilon(1e-12));
  for (long e = 0; e < 4; ++e) CHECK(d.probs.at(0, e) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("mask forces the support and weights renormalize") {
  MoeLayer layer = make_layer(4, 8, 4, 0, 2, 7);
  layer.apply_modality_mask({0, 1});
  Rng rng(3);
  Tensor x = Tensor::randn({5, 4}, rng, 1.0);
  RoutingDecision d = layer.route(x);
  for (long i = 0; i < 5; ++i) {
    std::vector<long> sel = d.indices[i];
    std::sort(sel.begin(), sel.end());
    CHECK(sel == std::vector<long>{0, 1});
    CHECK(d.probs.at(i, 2) == 0.0);
    CHECK(d.probs.at(i, 3) == 0.0);
    CHECK(d.weights.at(i, 0) + d.weights.at(i, 1) == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("masking equals softmax restricted to the eligible subset") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    MoeLayer layer = make_layer(8, 8, 8, 0, 2, seed);
    Rng rng(seed + 100);
    Tensor x = Tensor::randn({3, 8}, rng, 1.0);
    const std::vector<long> eligible = {1, 3, 4, 6};
    layer.apply_modality_mask(eligible);
    RoutingDecision d = layer.route(x);

    // oracle: softmax computed over the eligible logits only
    Tensor logits = matmul_nt(x, layer.router.weight.value);
    for (long i = 0; i < 3; ++i) {
      double mx = -1e300;
      for (long e : eligible) mx = std::max(mx, logits.at(i, e));
      double z = 0.0;
      for (long e : eligible) z += std::exp(logits.at(i, e) - mx);
      for (long e = 0; e < 8; ++e) {
        const bool in = std::find(eligible.begin(), eligible.end(), e) != eligible.end();
        const double want = in ? std::exp(logits.at(i, e) - mx) / z : 0.0;
        CHECK(std::abs(d.probs.at(i, e) - want) < 1e-12);
      }
    }
  }
}

TEST_CASE("no-op mask routes identically to unmasked") {
  MoeLayer layer = make_layer(8, 8, 8, 1, 3, 11);
  Rng rng(5);
  Tensor x = Tensor::randn({4, 8}, rng, 1.0);
  RoutingDecision plain = layer.route(x);
  layer.apply_modality_mask({0, 1, 2, 3, 4, 5, 6, 7});
  RoutingDecision masked = layer.route(x);
  CHECK(plain.indices == masked.indices);
  for (long i = 0; i < plain.probs.numel(); ++i) {
    CHECK((*plain.probs.data)[i] == (*masked.probs.data)[i]);
  }
}

TEST_CASE("top-k selection matches the sort oracle on random logits") {
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    MoeLayer layer = make_layer(8, 8, 8, 0, 3, seed);
    Rng rng(seed * 13 + 1);
    Tensor x = Tensor::randn({6, 8}, rng, 2.0);
    RoutingDecision d = layer.route(x);
    for (long i = 0; i < 6; ++i) {
      std::vector<double> probs(8);
      for (long e = 0; e < 8; ++e) probs[e] = d.probs.at(i, e);
      auto [want_idx, want_w] = sort_oracle(probs, 3);
      CHECK(d.indices[i] == want_idx);
      for (int j = 0; j < 3; ++j) {
        CHECK(d.weights.at(i, j) == doctest::Approx(want_w[j]).epsilon(1e-12));
      }
      // weights are monotone in the pre-top-k probabilities
      CHECK(d.weights.at(i, 0) >= d.weights.at(i, 1));
      CHECK(d.weights.at(i, 1) >= d.weights.at(i, 2));
      double psum = 0.0;
      for (long e = 0; e < 8; ++e) psum += probs[e];
      CHECK(std::abs(psum - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("route rejects masks smaller than top_k") {
  MoeLayer layer = make_layer(4, 8, 4, 0, 3);
  CHECK_THROWS_AS(layer.apply_modality_mask({0, 1}), RoutingError);
  try {
    layer.apply_modality_mask({0, 1});
  } catch (const RoutingError& e) {
    CHECK(std::string(e.what()).find("2") != std::string::npos);
  }
}

TEST_CASE("forward mixes identity experts back to the input") {
  const int h = 4;
  MoeLayer layer = make_layer(h, 2 * h, 2, 1, 2);
  std::fill(layer.router.weight.value.data->begin(), layer.router.weight.value.data->end(), 0.0);
  make_identity_expert(layer.experts[0], h);
  make_identity_expert(layer.experts[1], h);
  make_zero_expert(layer.shared[0]);

  Rng rng(9);
  Tensor x = Tensor::randn({3, h}, rng, 1.0);
  RoutingDecision d = layer.route(x);  // uniform -> weights [0.5, 0.5]
  Tensor out = layer.forward(x, d);
  for (long i = 0; i < x.numel(); ++i) {
    CHECK((*out.data)[i] == doctest::Approx((*x.data)[i]).epsilon(1e-12));
  }
}

TEST_CASE("degenerate top-1 mixture is expert(x) plus shared(x)") {
  const int h = 4;
  MoeLayer layer = make_layer(h, 2 * h, 2, 1, 1, 21);
  Rng rng(2);
  Tensor x = Tensor::randn({2, h}, rng, 1.0);
  RoutingDecision d = layer.route(x);
  Tensor out = layer.forward(x, d);
  for (long i = 0; i < 2; ++i) {
    Tensor xi = rows(x, {i});
    Tensor want = add(layer.experts[d.indices[i][0]].forward(xi), layer.shared[0].forward(xi));
    for (long j = 0; j < h; ++j) {
      CHECK(out.at(i, j) == doctest::Approx(want.at(0, j)).epsilon(1e-12));
    }
  }
}

TEST_CASE("router gradient through the mixture matches finite differences") {
  const int h = 6;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    MoeLayer layer = make_layer(h, 8, 4, 1, 2, seed + 40);
    Rng rng(seed);
    Tensor x = Tensor::randn({3, h}, rng, 1.0);
    // hold the discrete top-k set fixed at the evaluation point
    const auto fixed = layer.route(x).indices;
    auto loss_value = [&]() {
      NoGradGuard ng;
      RoutingDecision d = layer.route_given_indices(x, fixed);
      return mean_all(mul(layer.forward(x, d), layer.forward(x, d))).scalar();
    };
    RoutingDecision d = layer.route_given_indices(x, fixed);
    Tensor out = layer.forward(x, d);
    Tensor loss = mean_all(mul(out, out));
    backward(loss);
    auto fd = finite_difference_grad(loss_value, *layer.router.weight.value.data);
    const auto& got = *layer.router.weight.value.grad;
    for (size_t i = 0; i < fd.size(); ++i) {
      const double denom = std::max({std::abs(fd[i]), std::abs(got[i]), 1e-7});
      CHECK(std::abs(fd[i] - got[i]) / denom < 1e-4);
    }
  }
}

TEST_CASE("masked-out experts receive identically zero gradients") {
  const int h = 4;
  MoeLayer layer = make_layer(h, 8, 4, 1, 2, 33);
  layer.apply_modality_mask({0, 2});
  Rng rng(8);
  Tensor x = Tensor::randn({5, h}, rng, 1.0);
  RoutingDecision d = layer.route(x);
  Tensor loss = mean_all(mul(layer.forward(x, d), layer.forward(x, d)));
  backward(loss);
  for (int e : {1, 3}) {
    for (const Parameter* p :
         {&layer.experts[e].w1, &layer.experts[e].b1, &layer.experts[e].w2,
          &layer.experts[e].b2}) {
      for (double g : *p->value.grad) CHECK(g == 0.0);
    }
  }
  // eligible experts and the shared expert do train
  double total = 0.0;
  for (double g : *layer.experts[0].w1.value.grad) total += std::abs(g);
  for (double g : *layer.shared[0].w1.value.grad) total += std::abs(g);
  CHECK(total > 0.0);
}

TEST_CASE("load profile counts assignments per modality") {
  ExpertLoadProfile profile;
  RoutingDecision d;
  d.probs = Tensor::zeros({1, 6});
  d.indices = {{0, 3}};
  d.weights = Tensor::from({1, 2}, {0.7, 0.3});
  profile.record_load(1, d, {Modality::Audio});
  CHECK(profile.load_rate(1, Modality::Audio, 0) == 1.0);
  CHECK(profile.load_rate(1, Modality::Audio, 3) == 1.0);
  CHECK(profile.load_rate(1, Modality::Audio, 1) == 0.0);
  CHECK(profile.load_rate(1, Modality::Text, 0) == 0.0);

  CHECK_THROWS_AS(profile.record_load(1, d, {Modality::Audio, Modality::Text}), ProfileError);
}

TEST_CASE("merging shard profiles equals profiling the concatenated shard") {
  MoeLayer layer = make_layer(8, 8, 8, 0, 2, 17);
  Rng rng(4);
  Tensor xa = Tensor::randn({10, 8}, rng, 1.0);
  Tensor xb = Tensor::randn({7, 8}, rng, 1.0);
  std::vector<Modality> tags_a(10), tags_b(7);
  for (int i = 0; i < 10; ++i) tags_a[i] = i % 2 ? Modality::Audio : Modality::Text;
  for (int i = 0; i < 7; ++i) tags_b[i] = i % 3 ? Modality::Text : Modality::Audio;

  ExpertLoadProfile shard_a, shard_b, whole;
  shard_a.record_load(1, layer.route(xa), tags_a);
  shard_b.record_load(1, layer.route(xb), tags_b);

  Tensor xc = concat_rows({xa, xb});
  std::vector<Modality> tags_c = tags_a;
  tags_c.insert(tags_c.end(), tags_b.begin(), tags_b.end());
  whole.record_load(1, layer.route(xc), tags_c);

  // merge is associative and commutative on the integer counters
  ExpertLoadProfile ab = shard_a;
  ab.merge(shard_b);
  ExpertLoadProfile ba = shard_b;
  ba.merge(shard_a);
  for (int e = 0; e < 8; ++e) {
    for (Modality m : {Modality::Audio, Modality::Text}) {
      CHECK(ab.layers[1].count[(int)m][e] == whole.layers[1].count[(int)m][e]);
      CHECK(ba.layers[1].count[(int)m][e] == whole.layers[1].count[(int)m][e]);
    }
  }
}

TEST_CASE("per-modality normalized loads sum to top_k") {
  MoeLayer layer = make_layer(8, 8, 8, 0, 2, 23);
  Rng rng(6);
  Tensor x = Tensor::randn({100, 8}, rng, 1.0);
  std::vector<Modality> tags(100);
  for (int i = 0; i < 100; ++i) tags[i] = i % 2 ? Modality::Audio : Modality::Text;
  ExpertLoadProfile profile;
  profile.record_load(1, layer.route(x), tags);
  for (Modality m : {Modality::Audio, Modality::Text}) {
    double sum = 0.0;
    for (int e = 0; e < 8; ++e) sum += profile.load_rate(1, m, e);
    CHECK(std::abs(sum - 2.0) < 1e-9);
  }
}

TEST_CASE("weighted load counting sums routing weights") {
  MoeLayer layer = make_layer(8, 8, 8, 0, 2, 29);
  Rng rng(10);
  Tensor x = Tensor::randn({40, 8}, rng, 1.0);
  std::vector<Modality> tags(40, Modality::Audio);
  ExpertLoadProfile profile;
  profile.weighted = true;
  profile.record_load(1, layer.route(x), tags);
  // weights per token sum to 1, so weighted loads sum to 1 instead of top_k
  double sum = 0.0;
  for (int e = 0; e < 8; ++e) sum += profile.load_rate(1, Modality::Audio, e);
  CHECK(std::abs(sum - 1.0) < 1e-9);
}

TEST_CASE("load profile CSV is ordered and complete") {
  ExpertLoadProfile profile;
  RoutingDecision d;
  d.probs = Tensor::zeros({2, 3});
  d.indices = {{0, 2}, {1, 0}};
  d.weights = Tensor::from({2, 2}, {0.5, 0.5, 0.5, 0.5});
  profile.record_load(2, d, {Modality::Audio, Modality::Text});
  profile.record_load(1, d, {Modality::Text, Modality::Text});

  std::ostringstream os;
  profile.write_csv(os);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  CHECK(line == "layer,expert,modality,raw_count,load_rate");
  std::vector<std::string> lines;
  while (std::getline(is, line)) lines.push_back(line);
  REQUIRE(lines.size() == 12);  // 2 layers x 3 experts x 2 modalities
  CHECK(lines[0].rfind("1,0,audio,", 0) == 0);
  CHECK(lines[1].rfind("1,0,text,", 0) == 0);
  CHECK(lines[11].rfind("2,2,text,", 0) == 0);
  // layer 1 saw two text tokens routed to experts {0,2} and {1,0}
  CHECK(lines[1] == "1,0,text,2,1");
}
