// SPDX-License-Identifier: Apache-2.0
#include "amoe/corpus.hpp"

#include <algorithm>
#include <numeric>

#include "amoe/errors.hpp"

namespace amoe {

namespace {

std::vector<int> random_permutation(int n, Rng& rng) {
  std::vector<int> p(n);
  std::iota(p.begin(), p.end(), 0);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

int uniform_token(int lo, int hi, Rng& rng) {  // [lo, hi)
  std::uniform_int_distribution<int> d(lo, hi - 1);
  return d(rng);
}

}  // namespace

const char* eval_task_name(EvalTask t) {
  switch (t) {
    case EvalTask::Text: return "text";
    case EvalTask::Audio: return "audio";
    case EvalTask::Joint: return "joint";
  }
  return "unknown";
}

SyntheticRules SyntheticRules::make(const MoeConfig& cfg, std::uint64_t seed) {
  SyntheticRules r;
  r.written_size = cfg.vocab_text / 2;
  r.colloquial_base = r.written_size;
  const int colloquial_size = cfg.vocab_text - r.written_size;
  if (cfg.vocab_audio > colloquial_size) {
    throw ValidationError("corpus: vocab_audio " + std::to_string(cfg.vocab_audio) +
                          " exceeds the colloquial text half " +
                          std::to_string(colloquial_size) +
                          "; transcription would not be injective");
  }
  Rng rng = make_rng(seed, "corpus_rules");
  r.sigma2.resize(r.written_size * r.written_size);
  for (int& v : r.sigma2) v = uniform_token(0, r.written_size, rng);
  r.mu = random_permutation(cfg.vocab_audio, rng);
  // injective audio -> colloquial map
  std::vector<int> spots = random_permutation(colloquial_size, rng);
  r.tau.resize(cfg.vocab_audio);
  for (int a = 0; a < cfg.vocab_audio; ++a) r.tau[a] = r.colloquial_base + spots[a];
  // stream-1 relay covers the whole text vocabulary
  r.q1.resize(cfg.vocab_text);
  for (int v = 0; v < cfg.vocab_text; ++v) r.q1[v] = uniform_token(0, cfg.vocab_audio, rng);
  for (int s = 2; s <= cfg.num_audio_streams; ++s) {
    r.qs.push_back(random_permutation(cfg.vocab_audio, rng));
  }
  return r;
}

Corpus Corpus::make(const ExperimentConfig& cfg) {
  Corpus c;
  c.prompt_len = cfg.prompt_len;
  c.target_len = cfg.target_len;
  c.model_cfg = cfg.model;
  c.rules = SyntheticRules::make(cfg.model, cfg.seed);
  return c;
}

DelayedTokenGrid Corpus::ground_truth_for_text_prompt(
    const std::vector<int>& prompt_text) const {
  if (prompt_text.size() < 2) throw ValidationError("corpus: text prompt needs >= 2 tokens");
  const int t_len = target_len;
  std::vector<std::vector<int>> undelayed(1 + model_cfg.num_audio_streams,
                                          std::vector<int>(t_len));
  int prev2 = prompt_text[prompt_text.size() - 2];
  int prev1 = prompt_text.back();
  for (int t = 0; t < t_len; ++t) {
    const int y = rules.written_next(prev2, prev1);
    prev2 = prev1;
    prev1 = y;
    undelayed[0][t] = y;
    int z = rules.q1[y];
    undelayed[1][t] = z;
    for (int s = 2; s <= model_cfg.num_audio_streams; ++s) {
      z = rules.qs[s - 2][z];
      undelayed[s][t] = z;
    }
  }
  return apply_delay(undelayed);
}

BimodalSample Corpus::sample(SampleKind kind, Rng& rng) const {
  const int s_total = model_cfg.num_audio_streams;
  BimodalSample out;
  out.prompt_text_ids.assign(prompt_len, kPadToken);
  out.prompt_audio_ids.assign(prompt_len, kPadToken);

  std::vector<std::vector<int>> undelayed(1 + s_total, std::vector<int>(target_len));
  const bool audio_input = (kind == SampleKind::AudioTask || kind == SampleKind::Align);

  if (audio_input) {
    out.modality_tags.assign(prompt_len, Modality::Audio);
    int a = uniform_token(0, model_cfg.vocab_audio, rng);
    for (int i = 0; i < prompt_len; ++i) {
      out.prompt_audio_ids[i] = a;
      a = rules.mu[a];
    }
    // continue the chain and transcribe it into the colloquial half
    int zeta = rules.mu[out.prompt_audio_ids.back()];
    for (int t = 0; t < target_len; ++t) {
      undelayed[0][t] = rules.tau[zeta];
      zeta = rules.mu[zeta];
    }
  } else {
    out.modality_tags.assign(prompt_len, Modality::Text);
    int prev2 = uniform_token(0, rules.written_size, rng);
    int prev1 = uniform_token(0, rules.written_size, rng);
    out.prompt_text_ids[0] = prev2;
    out.prompt_text_ids[1] = prev1;
    for (int i = 2; i < prompt_len; ++i) {
      const int y = rules.written_next(prev2, prev1);
      out.prompt_text_ids[i] = y;
      prev2 = prev1;
      prev1 = y;
    }
    for (int t = 0; t < target_len; ++t) {
      const int y = rules.written_next(prev2, prev1);
      undelayed[0][t] = y;
      prev2 = prev1;
      prev1 = y;
    }
  }

  const bool audio_rows_live = (kind != SampleKind::TextPretrain);
  if (audio_rows_live) {
    for (int t = 0; t < target_len; ++t) {
      int z = rules.q1[undelayed[0][t]];
      undelayed[1][t] = z;
      for (int s = 2; s <= s_total; ++s) {
        z = rules.qs[s - 2][z];
        undelayed[s][t] = z;
      }
    }
    out.grid = apply_delay(undelayed);
  } else {
    // pure text LM data: audio rows stay PAD
    out.grid.rows.assign(1 + s_total, std::vector<int>(target_len + s_total, kPadToken));
    for (int t = 0; t < target_len; ++t) out.grid.rows[0][t] = undelayed[0][t];
  }

  const bool audio_rows_supervised =
      (kind == SampleKind::TextTask || kind == SampleKind::AudioTask);
  out.loss_mask.assign(1 + s_total, std::vector<bool>(out.grid.width(), false));
  for (int r = 0; r <= s_total; ++r) {
    if (r > 0 && !audio_rows_supervised) continue;
    for (long c = 0; c < out.grid.width(); ++c) {
      out.loss_mask[r][c] = out.grid.rows[r][c] != kPadToken;
    }
  }
  return out;
}

BimodalBatch Corpus::batch(SampleKind kind, int count, Rng& rng) const {
  BimodalBatch out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) out.push_back(sample(kind, rng));
  return out;
}

EvalSuite Corpus::eval_suite(EvalTask task, int num_samples, int cells_per_sample,
                             Rng& rng) const {
  if (num_samples < 1) throw ValidationError("eval_suite: empty suite");
  EvalSuite suite;
  suite.task = task;
  const int s_total = model_cfg.num_audio_streams;
  for (int i = 0; i < num_samples; ++i) {
    // the text-capability suite uses the pure text-LM format (PAD audio
    // rows), matching how the pre-multimodal model is trained and scored
    const SampleKind kind = (task == EvalTask::Text) ? SampleKind::TextPretrain
                                                     : SampleKind::AudioTask;
    BimodalSample s = sample(kind, rng);
    for (int c = 0; c < cells_per_sample; ++c) {
      EvalItem item;
      item.sample_idx = i;
      switch (task) {
        case EvalTask::Text: {
          // in-row bigram cells, written half
          item.row = 0;
          item.col = 1 + uniform_token(0, target_len - 1, rng);
          item.correct = s.grid.rows[0][item.col];
          do {
            item.distractor = uniform_token(0, rules.written_size, rng);
          } while (item.distractor == item.correct);
          break;
        }
        case EvalTask::Audio: {
          // stream relay cells
          const int stream = 1 + uniform_token(0, s_total, rng);
          const int t = uniform_token(0, target_len, rng);
          item.row = stream;
          item.col = t + stream;
          item.correct = s.grid.rows[stream][item.col];
          do {
            item.distractor = uniform_token(0, model_cfg.vocab_audio, rng);
          } while (item.distractor == item.correct);
          break;
        }
        case EvalTask::Joint: {
          // audio-derived text cells; cell 0 is the pure cross-modal boundary
          item.row = 0;
          item.col = (c == 0) ? 0 : uniform_token(1, target_len, rng);
          item.correct = s.grid.rows[0][item.col];
          do {
            item.distractor = rules.colloquial_base +
                              uniform_token(0, model_cfg.vocab_text - rules.colloquial_base, rng);
          } while (item.distractor == item.correct);
          break;
        }
      }
      suite.items.push_back(item);
    }
    suite.samples.push_back(std::move(s));
  }
  return suite;
}

}  // namespace amoe
