// SPDX-License-Identifier: Apache-2.0
#include "amoe/dpo.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "amoe/errors.hpp"
#include "amoe/ops.hpp"

namespace amoe {

long edit_distance(const std::vector<int>& a, const std::vector<int>& b) {
  const size_t n = a.size(), m = b.size();
  std::vector<long> prev(m + 1), cur(m + 1);
  for (size_t j = 0; j <= m; ++j) prev[j] = static_cast<long>(j);
  for (size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<long>(i);
    for (size_t j = 1; j <= m; ++j) {
      const long sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

namespace {

std::vector<int> concat_audio_streams(const DelayedTokenGrid& grid) {
  std::vector<int> out;
  const auto undelayed = undo_delay(grid);
  for (size_t r = 1; r < undelayed.size(); ++r) {
    out.insert(out.end(), undelayed[r].begin(), undelayed[r].end());
  }
  return out;
}

}  // namespace

double grid_wer(const DelayedTokenGrid& sampled, const DelayedTokenGrid& truth) {
  const std::vector<int> got = concat_audio_streams(sampled);
  const std::vector<int> want = concat_audio_streams(truth);
  const long denom = std::max(got.size(), want.size());
  if (denom == 0) return 0.0;
  return static_cast<double>(edit_distance(got, want)) / denom;
}

double grid_reward(const DelayedTokenGrid& sampled, const DelayedTokenGrid& truth) {
  return 1.0 - grid_wer(sampled, truth);
}

Tensor sequence_audio_logprob(const Model& model, const std::vector<int>& prompt_text,
                              const DelayedTokenGrid& grid) {
  BimodalSample s;
  s.prompt_text_ids = prompt_text;
  s.prompt_audio_ids.assign(prompt_text.size(), kPadToken);
  s.modality_tags.assign(prompt_text.size(), Modality::Text);
  s.grid = grid;
  const int s_total = grid.num_audio_streams();
  s.loss_mask.assign(1 + s_total, std::vector<bool>(grid.width(), false));

  StreamLogits logits = model.forward_teacher(s);
  Tensor total;
  for (int stream = 1; stream <= s_total; ++stream) {
    std::vector<int> targets;
    std::vector<bool> mask;
    long count = 0;
    for (long c = 0; c < grid.width(); ++c) {
      const int tok = grid.rows[stream][c];
      const bool on = tok != kPadToken;
      mask.push_back(on);
      targets.push_back(on ? tok : 0);
      if (on) ++count;
    }
    if (count == 0) continue;
    // cross_entropy returns the mean NLL; the sequence log-prob is -mean*count
    Tensor lp = scale(cross_entropy(logits.audio[stream - 1], targets, mask),
                      -static_cast<double>(count));
    total = total.data ? add(total, lp) : lp;
  }
  if (!total.data) throw ValidationError("sequence_audio_logprob: grid has no audio tokens");
  return total;
}

std::vector<PreferenceTriplet> build_preference_pairs(
    const Model& model, const std::vector<std::vector<int>>& prompts, int samples_per_prompt,
    const std::function<double(const std::vector<int>&, const DelayedTokenGrid&)>& reward_fn,
    const SamplingConfig& sampling, long max_len, int* ties_skipped) {
  if (samples_per_prompt < 2) {
    throw ValidationError("build_preference_pairs: need at least 2 samples per prompt");
  }
  int ties = 0;
  std::vector<PreferenceTriplet> out;
  for (size_t pi = 0; pi < prompts.size(); ++pi) {
    const auto& prompt = prompts[pi];
    const std::vector<int> pad_audio(prompt.size(), kPadToken);
    double best_r = 0.0, worst_r = 0.0;
    int best = -1, worst = -1;
    std::vector<DelayedTokenGrid> grids;
    for (int c = 0; c < samples_per_prompt; ++c) {
      SamplingConfig sc = sampling;
      sc.seed = derive_seed(sampling.seed, "candidate_" + std::to_string(pi) + "_" +
                                               std::to_string(c));
      DecodeOutput dec = batch_parallel_decode(model, prompt, pad_audio, sc, max_len);
      const double r = reward_fn(prompt, dec.grid);
      grids.push_back(std::move(dec.grid));
      // lower cost wins; strict comparisons keep the earliest candidate on
      // ties, matching an exhaustive min/max scan
      if (best < 0 || r < best_r) { best = c; best_r = r; }
      if (worst < 0 || r > worst_r) { worst = c; worst_r = r; }
    }
    if (best_r == worst_r) {
      ++ties;  // all candidates tie; nothing to prefer
      continue;
    }
    PreferenceTriplet t;
    t.prompt = prompt;
    t.preferred = grids[best];
    t.dispreferred = grids[worst];
    t.reward_w = best_r;
    t.reward_l = worst_r;
    out.push_back(std::move(t));
  }
  if (ties_skipped) *ties_skipped = ties;
  return out;
}

namespace {

Tensor softplus_scalar(const Tensor& x) {
  // numerically stable softplus(x) = log(1 + e^x)
  const double v = x.scalar();
  const double y = v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
  Tensor out = Tensor::from({1}, {y}, grad_enabled() && x.requires_grad);
  if (out.requires_grad) {
    out.node = std::make_shared<Node>();
    out.node->parents = {x};
    out.node->backward = [](Tensor& o) {
      Tensor& px = o.node->parents[0];
      if (!px.requires_grad) return;
      px.ensure_grad();
      const double s = 1.0 / (1.0 + std::exp(-(*px.data)[0]));
      (*px.grad)[0] += (*o.grad)[0] * s;
    };
  }
  return out;
}

}  // namespace

Tensor dpo_loss(const Model& policy, const Model& reference,
                const std::vector<PreferenceTriplet>& batch, double beta) {
  if (batch.empty()) throw ValidationError("dpo_loss: empty triplet batch");
  if (policy.cfg.vocab_audio != reference.cfg.vocab_audio ||
      policy.cfg.vocab_text != reference.cfg.vocab_text ||
      policy.cfg.num_audio_streams != reference.cfg.num_audio_streams) {
    throw ValidationError("dpo_loss: policy and reference architectures disagree");
  }
  Tensor total;
  for (const PreferenceTriplet& t : batch) {
    double ref_w, ref_l;
    {
      NoGradGuard ng;  // the reference is a constant; no gradient ever flows
      ref_w = sequence_audio_logprob(reference, t.prompt, t.preferred).scalar();
      ref_l = sequence_audio_logprob(reference, t.prompt, t.dispreferred).scalar();
    }
    Tensor lp_w = sequence_audio_logprob(policy, t.prompt, t.preferred);
    Tensor lp_l = sequence_audio_logprob(policy, t.prompt, t.dispreferred);
    // z = beta * ((lp_w - ref_w) - (lp_l - ref_l))
    Tensor z = scale(sub(lp_w, lp_l), beta);
    Tensor shift = Tensor::from({1}, {beta * (ref_w - ref_l)});
    Tensor loss_i = softplus_scalar(scale(sub(z, shift), -1.0));  // -log sigmoid(z)
    total = total.data ? add(total, loss_i) : loss_i;
  }
  return scale(total, 1.0 / batch.size());
}

double dpo_margin(const Model& policy, const Model& reference,
                  const std::vector<PreferenceTriplet>& batch, double beta) {
  NoGradGuard ng;
  double sum = 0.0;
  for (const PreferenceTriplet& t : batch) {
    const double lw = sequence_audio_logprob(policy, t.prompt, t.preferred).scalar();
    const double ll = sequence_audio_logprob(policy, t.prompt, t.dispreferred).scalar();
    const double rw = sequence_audio_logprob(reference, t.prompt, t.preferred).scalar();
    const double rl = sequence_audio_logprob(reference, t.prompt, t.dispreferred).scalar();
    sum += beta * ((lw - rw) - (ll - rl));
  }
  return sum / batch.size();
}

DpoReport run_dpo_stage(Model& policy, const std::vector<PreferenceTriplet>& triplets,
                        double beta, int steps, double lr, int batch_size, std::uint64_t seed) {
  if (triplets.empty()) throw ValidationError("run_dpo_stage: empty triplet set");
  DpoReport report;
  if (steps == 0) return report;
  const Model reference = policy.clone();

  Rng rng = make_rng(seed, "dpo_batches");
  std::uniform_int_distribution<size_t> pick(0, triplets.size() - 1);
  const int bs = std::min<int>(batch_size, static_cast<int>(triplets.size()));
  for (int step = 0; step < steps; ++step) {
    std::vector<PreferenceTriplet> batch;
    for (int b = 0; b < bs; ++b) batch.push_back(triplets[pick(rng)]);
    Tensor loss = dpo_loss(policy, reference, batch, beta);
    policy.zero_grad();
    backward(loss);
    policy.sgd_step(lr);
    report.loss_curve.push_back(loss.scalar());
    report.margin_curve.push_back(dpo_margin(policy, reference, batch, beta));
  }
  return report;
}

std::string triplets_to_jsonl(const std::vector<PreferenceTriplet>& triplets) {
  std::string out;
  for (const PreferenceTriplet& t : triplets) {
    nlohmann::ordered_json j;
    j["prompt"] = t.prompt;
    auto und_w = undo_delay(t.preferred);
    auto und_l = undo_delay(t.dispreferred);
    j["y_w"] = std::vector<std::vector<int>>(und_w.begin() + 1, und_w.end());
    j["y_l"] = std::vector<std::vector<int>>(und_l.begin() + 1, und_l.end());
    j["reward_w"] = t.reward_w;
    j["reward_l"] = t.reward_l;
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace amoe
