// SPDX-License-Identifier: Apache-2.0
#include "amoe/model.hpp"

#include <cmath>
#include <limits>

#include "amoe/errors.hpp"

namespace amoe {

namespace {

long embed_row(int token, int vocab) {
  if (token >= 0) return token;
  if (token == kPadToken) return vocab;
  if (token == kBosToken) return vocab + 1;
  throw ValidationError("embed_row: unknown sentinel token " + std::to_string(token));
}

Tensor causal_mask(long n) {
  Tensor m = Tensor::zeros({n, n});
  const double ninf = -std::numeric_limits<double>::infinity();
  for (long i = 0; i < n; ++i)
    for (long j = i + 1; j < n; ++j) m.at(i, j) = ninf;
  return m;
}

}  // namespace

Tensor fuse_embeddings(const Tensor& audio_emb, const Tensor& text_emb) {
  if (audio_emb.shape != text_emb.shape) {
    throw ShapeError("fuse_embeddings: irreconcilable shapes " + audio_emb.shape_str() + " vs " +
                     text_emb.shape_str());
  }
  return scale(add(audio_emb, text_emb), 0.5);
}

Model Model::init(const MoeConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  const int h = cfg.hidden_dim;
  const double sh = 1.0 / std::sqrt(static_cast<double>(h));

  Rng enc_rng = make_rng(seed, "audio_encoder");
  m.audio_encoder = Tensor::randn({cfg.vocab_audio + 2, h}, enc_rng, 1.0);

  Rng rng = make_rng(seed, "model_params");
  m.adapter_w = Parameter(Tensor::randn({h, h}, rng, sh), ParamTag{ParamKind::Adapter});
  m.adapter_b = Parameter(Tensor::zeros({h}), ParamTag{ParamKind::Adapter});
  m.text_embed =
      Parameter(Tensor::randn({cfg.vocab_text + 2, h}, rng, 1.0), ParamTag{ParamKind::Embedding});
  for (int s = 0; s < cfg.num_audio_streams; ++s) {
    m.audio_embed.push_back(Parameter(Tensor::randn({cfg.vocab_audio + 2, h}, rng, 1.0),
                                      ParamTag{ParamKind::Embedding, -1, -1, s}));
  }
  m.pos_embed =
      Parameter(Tensor::randn({cfg.max_positions, h}, rng, 0.5), ParamTag{ParamKind::Position});

  for (int layer = 0; layer < cfg.num_layers; ++layer) {
    ModelBlock b;
    b.norm_attn = Parameter(Tensor::full({h}, 1.0), ParamTag{ParamKind::Norm, layer});
    b.wq = Parameter(Tensor::randn({h, h}, rng, sh), ParamTag{ParamKind::Attention, layer});
    b.wk = Parameter(Tensor::randn({h, h}, rng, sh), ParamTag{ParamKind::Attention, layer});
    b.wv = Parameter(Tensor::randn({h, h}, rng, sh), ParamTag{ParamKind::Attention, layer});
    b.wo = Parameter(Tensor::randn({h, h}, rng, sh), ParamTag{ParamKind::Attention, layer});
    b.norm_ffn = Parameter(Tensor::full({h}, 1.0), ParamTag{ParamKind::Norm, layer});
    if (layer == 0) {
      b.dense = ExpertFfn::init(h, cfg.expert_hidden_dim, rng,
                                ParamTag{ParamKind::DenseFfn, layer, -1});
    } else {
      b.moe = MoeLayer::init(h, cfg.expert_hidden_dim, cfg.num_routed_experts,
                             cfg.num_shared_experts, cfg.top_k, layer, rng);
    }
    m.blocks.push_back(std::move(b));
  }
  m.final_norm = Parameter(Tensor::full({h}, 1.0), ParamTag{ParamKind::Norm});
  m.text_head =
      Parameter(Tensor::randn({cfg.vocab_text, h}, rng, sh), ParamTag{ParamKind::Head});
  for (int s = 0; s < cfg.num_audio_streams; ++s) {
    m.audio_heads.push_back(Parameter(Tensor::randn({cfg.vocab_audio, h}, rng, sh),
                                      ParamTag{ParamKind::Head, -1, -1, s}));
  }
  return m;
}

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out;
  out.push_back(&adapter_w);
  out.push_back(&adapter_b);
  out.push_back(&text_embed);
  for (auto& p : audio_embed) out.push_back(&p);
  out.push_back(&pos_embed);
  for (auto& b : blocks) {
    out.push_back(&b.norm_attn);
    out.push_back(&b.wq);
    out.push_back(&b.wk);
    out.push_back(&b.wv);
    out.push_back(&b.wo);
    out.push_back(&b.norm_ffn);
    if (b.dense) b.dense->collect(out);
    if (b.moe) b.moe->collect(out);
  }
  out.push_back(&final_norm);
  out.push_back(&text_head);
  for (auto& p : audio_heads) out.push_back(&p);
  return out;
}

std::vector<const Parameter*> Model::parameters() const {
  auto mut = const_cast<Model*>(this)->parameters();
  return std::vector<const Parameter*>(mut.begin(), mut.end());
}

Model Model::clone() const {
  Model copy = *this;  // shallow: shares buffers
  copy.audio_encoder = audio_encoder.detached_copy();
  auto src = const_cast<Model*>(this)->parameters();
  auto dst = copy.parameters();
  for (size_t i = 0; i < src.size(); ++i) {
    Tensor fresh = src[i]->value.detached_copy();
    fresh.requires_grad = src[i]->value.requires_grad;
    if (fresh.requires_grad) fresh.ensure_grad();
    dst[i]->value = fresh;
    dst[i]->tag = src[i]->tag;
    dst[i]->frozen = src[i]->frozen;
  }
  return copy;
}

void Model::zero_grad() {
  for (Parameter* p : parameters()) p->value.zero_grad();
}

void Model::sgd_step(double lr) {
  for (Parameter* p : parameters()) {
    if (p->frozen || !p->value.grad) continue;
    auto& d = *p->value.data;
    const auto& g = *p->value.grad;
    for (size_t i = 0; i < d.size(); ++i) d[i] -= lr * g[i];
  }
}

Tensor Model::embed_prompt(const std::vector<int>& text_ids,
                           const std::vector<int>& audio_ids) const {
  if (text_ids.size() != audio_ids.size()) {
    throw ShapeError("embed_prompt: prompt streams of length " +
                     std::to_string(text_ids.size()) + " vs " +
                     std::to_string(audio_ids.size()));
  }
  std::vector<long> t_rows, a_rows;
  for (int id : text_ids) t_rows.push_back(embed_row(id, cfg.vocab_text));
  for (int id : audio_ids) a_rows.push_back(embed_row(id, cfg.vocab_audio));
  Tensor h_text = rows(text_embed.value, t_rows);
  Tensor enc = rows(audio_encoder, a_rows);
  Tensor h_audio = add_rowvec(matmul_nt(enc, adapter_w.value), adapter_b.value);
  return fuse_embeddings(h_audio, h_text);
}

Tensor Model::embed_grid_columns(const DelayedTokenGrid& grid, long from_col,
                                 long to_col) const {
  const int s_total = grid.num_audio_streams();
  if (s_total != cfg.num_audio_streams) {
    throw ShapeError("embed_grid_columns: grid has " + std::to_string(s_total) +
                     " audio streams, model expects " + std::to_string(cfg.num_audio_streams));
  }
  const long count = to_col - from_col;
  std::vector<long> t_rows(count);
  for (long c = 0; c < count; ++c) t_rows[c] = embed_row(grid.rows[0][from_col + c], cfg.vocab_text);
  Tensor sum = rows(text_embed.value, t_rows);
  for (int s = 1; s <= s_total; ++s) {
    std::vector<long> a_rows(count);
    for (long c = 0; c < count; ++c) {
      const long col = from_col + c;
      int tok = grid.rows[s][col];
      // a delayed stream that has not started yet reads its BOS embedding
      if (tok == kPadToken && col < s) tok = kBosToken;
      a_rows[c] = embed_row(tok, cfg.vocab_audio);
    }
    sum = add(sum, rows(audio_embed[s - 1].value, a_rows));
  }
  return scale(sum, 1.0 / (1.0 + s_total));
}

Tensor Model::backbone(const Tensor& embedded, ForwardTrace* trace) const {
  const long n = embedded.rows();
  if (n > cfg.max_positions) {
    throw ShapeError("backbone: sequence of " + std::to_string(n) +
                     " positions exceeds max_positions " + std::to_string(cfg.max_positions));
  }
  std::vector<long> pos(n);
  for (long i = 0; i < n; ++i) pos[i] = i;
  Tensor h = add(embedded, rows(pos_embed.value, pos));

  const double inv_sqrt_h = 1.0 / std::sqrt(static_cast<double>(cfg.hidden_dim));
  Tensor mask = causal_mask(n);
  for (int layer = 0; layer < cfg.num_layers; ++layer) {
    const ModelBlock& b = blocks[layer];
    Tensor a_in = rmsnorm(h, b.norm_attn.value);
    Tensor q = matmul_nt(a_in, b.wq.value);
    Tensor k = matmul_nt(a_in, b.wk.value);
    Tensor v = matmul_nt(a_in, b.wv.value);
    Tensor att = softmax(add(scale(matmul_nt(q, k), inv_sqrt_h), mask), 1);
    h = add(h, matmul_nt(matmul(att, v), b.wo.value));

    Tensor f_in = rmsnorm(h, b.norm_ffn.value);
    if (b.dense) {
      h = add(h, b.dense->forward(f_in));
    } else {
      RoutingDecision d = b.moe->route(f_in);
      if (trace) trace->decisions.push_back({layer, d});
      h = add(h, b.moe->forward(f_in, d));
    }
  }
  return rmsnorm(h, final_norm.value);
}

StreamLogits Model::heads(const Tensor& hidden_rows) const {
  StreamLogits out;
  out.text = matmul_nt(hidden_rows, text_head.value);
  for (int s = 0; s < cfg.num_audio_streams; ++s) {
    out.audio.push_back(matmul_nt(hidden_rows, audio_heads[s].value));
  }
  return out;
}

StreamLogits Model::forward_teacher(const BimodalSample& sample, ForwardTrace* trace) const {
  const long p = static_cast<long>(sample.prompt_text_ids.size());
  const long w = sample.grid.width();
  if (p < 1 || w < 2) throw ShapeError("forward_teacher: degenerate sample");
  Tensor prompt = embed_prompt(sample.prompt_text_ids, sample.prompt_audio_ids);
  // teacher forcing: grid columns 0..W-2 are inputs for predicting 1..W-1
  Tensor grid_in = embed_grid_columns(sample.grid, 0, w - 1);
  Tensor hidden = backbone(concat_rows({prompt, grid_in}), trace);
  // positions P-1 .. P+W-2 predict grid columns 0 .. W-1
  std::vector<long> pred(w);
  for (long c = 0; c < w; ++c) pred[c] = p - 1 + c;
  return heads(rows(hidden, pred));
}

Tensor Model::forward_prompt(const BimodalSample& sample, ForwardTrace* trace) const {
  return backbone(embed_prompt(sample.prompt_text_ids, sample.prompt_audio_ids), trace);
}

std::vector<int> Model::moe_layer_indices() const {
  std::vector<int> out;
  for (int layer = 1; layer < cfg.num_layers; ++layer) out.push_back(layer);
  return out;
}

MoeLayer& Model::moe_layer(int layer_index) {
  if (layer_index < 1 || layer_index >= cfg.num_layers || !blocks[layer_index].moe) {
    throw ValidationError("moe_layer: layer " + std::to_string(layer_index) + " is not MoE");
  }
  return *blocks[layer_index].moe;
}

const MoeLayer& Model::moe_layer(int layer_index) const {
  return const_cast<Model*>(this)->moe_layer(layer_index);
}

void Model::extend_experts(int extra, std::uint64_t seed) {
  Rng rng = make_rng(seed, "extend_experts");
  for (int layer : moe_layer_indices()) {
    MoeLayer& ml = moe_layer(layer);
    const int old_n = static_cast<int>(ml.experts.size());
    for (int e = 0; e < extra; ++e) {
      ml.experts.push_back(ExpertFfn::init(cfg.hidden_dim, cfg.expert_hidden_dim, rng,
                                           ParamTag{ParamKind::RoutedExpert, layer, old_n + e}));
    }
    // grow the router with near-zero rows so existing routing barely shifts
    const long h = ml.router.weight.value.cols();
    Tensor grown = Tensor::zeros({old_n + extra, h});
    for (long i = 0; i < old_n * h; ++i) (*grown.data)[i] = (*ml.router.weight.value.data)[i];
    Tensor noise = Tensor::randn({extra, h}, rng, 1e-3);
    for (long i = 0; i < extra * h; ++i) (*grown.data)[old_n * h + i] = (*noise.data)[i];
    const bool was_frozen = ml.router.weight.frozen;
    ml.router.weight = Parameter(grown, ParamTag{ParamKind::Router, layer});
    ml.router.weight.set_frozen(was_frozen);
    ml.router.score_mask.reset();
  }
  cfg.num_routed_experts += extra;
}

std::vector<std::vector<double>> snapshot_parameters(const Model& m) {
  std::vector<std::vector<double>> out;
  for (const Parameter* p : m.parameters()) out.push_back(*p->value.data);
  return out;
}

}  // namespace amoe
