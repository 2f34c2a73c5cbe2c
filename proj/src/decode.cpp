// SPDX-License-Identifier: Apache-2.0
#include "amoe/decode.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "amoe/errors.hpp"
#include "amoe/ops.hpp"

namespace amoe {

int sample_topk(const double* logits, long vocab, int topk, double temperature, Rng& rng) {
  if (topk < 1) throw ValidationError("sample_topk: topk must be >= 1");
  const long k = std::min<long>(topk, vocab);
  std::vector<long> order(vocab);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [logits](long a, long b) { return logits[a] > logits[b]; });
  if (k == 1 || temperature < 1e-9) return static_cast<int>(order[0]);

  // truncated, temperature-scaled renormalized softmax over the top k
  std::vector<double> w(k);
  const double mx = logits[order[0]];
  double sum = 0.0;
  for (long j = 0; j < k; ++j) {
    w[j] = std::exp((logits[order[j]] - mx) / temperature);
    sum += w[j];
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double u = unit(rng) * sum;
  for (long j = 0; j < k; ++j) {
    u -= w[j];
    if (u <= 0.0) return static_cast<int>(order[j]);
  }
  return static_cast<int>(order[k - 1]);
}

namespace {

// Heads at the last context position: prompt plus the first `cols` grid
// columns.
StreamLogits last_position_logits(const Model& model, const std::vector<int>& prompt_text,
                                  const std::vector<int>& prompt_audio,
                                  const DelayedTokenGrid& grid, long cols) {
  Tensor ctx = model.embed_prompt(prompt_text, prompt_audio);
  if (cols > 0) {
    ctx = concat_rows({ctx, model.embed_grid_columns(grid, 0, cols)});
  }
  Tensor hidden = model.backbone(ctx, nullptr);
  return model.heads(rows(hidden, {hidden.rows() - 1}));
}

}  // namespace

DecodeState DecodeState::make(const Model& model, std::vector<int> prompt_text,
                              std::vector<int> prompt_audio, SamplingConfig sampling,
                              long max_len, int eos_id) {
  if (prompt_text.empty() || prompt_text.size() != prompt_audio.size()) {
    throw ValidationError("decode: prompt streams must be non-empty and equal length");
  }
  if (max_len < 1) throw ValidationError("decode: max_len must be >= 1");
  const long s_total = model.cfg.num_audio_streams;
  const long positions = static_cast<long>(prompt_text.size()) + max_len + s_total - 1;
  if (positions > model.cfg.max_positions) {
    throw ValidationError("decode: prompt + max_len exceeds max_positions " +
                          std::to_string(model.cfg.max_positions));
  }
  DecodeState st;
  st.prompt_text_ids = std::move(prompt_text);
  st.prompt_audio_ids = std::move(prompt_audio);
  st.sampling = sampling;
  st.eos_id = eos_id;
  st.max_len = max_len;
  st.joint.rows.assign(1 + s_total, {});
  st.text_only.rows.assign(1 + s_total, {});
  st.text_rng = make_rng(sampling.seed, "decode_text");
  for (long s = 1; s <= s_total; ++s) {
    st.audio_rngs.push_back(make_rng(sampling.seed, "decode_audio_" + std::to_string(s)));
  }
  return st;
}

bool DecodeState::finished() const {
  return text_len >= 0 && step >= text_len + joint.num_audio_streams();
}

std::vector<int> decode_step(const Model& model, DecodeState& state) {
  if (state.finished()) throw ValidationError("decode_step: generation exhausted");
  NoGradGuard ng;
  const int s_total = state.joint.num_audio_streams();
  std::vector<int> column(1 + s_total, kPadToken);

  // text token comes from the text-only batch row
  if (state.text_len < 0) {
    StreamLogits text_row = last_position_logits(model, state.prompt_text_ids,
                                                 state.prompt_audio_ids, state.text_only,
                                                 state.step);
    const double* lg = text_row.text.data->data();
    const int tok = sample_topk(lg, model.cfg.vocab_text, state.sampling.topk,
                                state.sampling.temperature, state.text_rng);
    column[0] = tok;
    if (tok == state.eos_id || state.step + 1 >= state.max_len) {
      state.text_len = state.step + 1;  // audio flushes S more columns
    }
  }

  // audio tokens come from the joint batch row, with the substituted text
  // already in its context
  bool need_audio = false;
  for (int s = 1; s <= s_total; ++s) {
    const bool in_span =
        state.step >= s && (state.text_len < 0 || state.step < s + state.text_len);
    need_audio = need_audio || in_span;
  }
  if (need_audio) {
    StreamLogits joint_row = last_position_logits(model, state.prompt_text_ids,
                                                  state.prompt_audio_ids, state.joint,
                                                  state.step);
    for (int s = 1; s <= s_total; ++s) {
      const bool in_span =
          state.step >= s && (state.text_len < 0 || state.step < s + state.text_len);
      if (!in_span) continue;
      const double* lg = joint_row.audio[s - 1].data->data();
      column[s] = sample_topk(lg, model.cfg.vocab_audio, state.sampling.topk,
                              state.sampling.temperature, state.audio_rngs[s - 1]);
    }
  }

  for (int r = 0; r <= s_total; ++r) {
    state.joint.rows[r].push_back(column[r]);
    state.text_only.rows[r].push_back(r == 0 ? column[0] : kPadToken);
  }
  ++state.step;
  return column;
}

DecodeOutput batch_parallel_decode(const Model& model, const std::vector<int>& prompt_text,
                                   const std::vector<int>& prompt_audio,
                                   SamplingConfig sampling, long max_len, int eos_id) {
  DecodeState st = DecodeState::make(model, prompt_text, prompt_audio, sampling, max_len, eos_id);
  while (!st.finished()) decode_step(model, st);

  DecodeOutput out;
  out.sampling = sampling;
  out.grid = st.joint;
  auto undelayed = undo_delay(st.joint);
  out.text = undelayed[0];
  out.audio.assign(undelayed.begin() + 1, undelayed.end());
  return out;
}

std::vector<int> text_only_decode(const Model& model, const std::vector<int>& prompt_text,
                                  const std::vector<int>& prompt_audio, SamplingConfig sampling,
                                  long max_len, int eos_id) {
  DecodeState st = DecodeState::make(model, prompt_text, prompt_audio, sampling, max_len, eos_id);
  NoGradGuard ng;
  std::vector<int> out;
  while (st.text_len < 0) {
    StreamLogits lg = last_position_logits(model, st.prompt_text_ids, st.prompt_audio_ids,
                                           st.text_only, st.step);
    const int tok = sample_topk(lg.text.data->data(), model.cfg.vocab_text, sampling.topk,
                                sampling.temperature, st.text_rng);
    out.push_back(tok);
    if (tok == eos_id || st.step + 1 >= st.max_len) st.text_len = st.step + 1;
    for (int r = 0; r <= st.text_only.num_audio_streams(); ++r) {
      st.text_only.rows[r].push_back(r == 0 ? tok : kPadToken);
    }
    ++st.step;
  }
  return out;
}

std::string decode_output_to_json(const DecodeOutput& out) {
  nlohmann::ordered_json j;
  j["text"] = out.text;
  j["audio"] = out.audio;
  j["seed"] = out.sampling.seed;
  j["sampling"] = {{"topk", out.sampling.topk}, {"temperature", out.sampling.temperature}};
  return j.dump(2) + "\n";
}

}  // namespace amoe
