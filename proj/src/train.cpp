// SPDX-License-Identifier: Apache-2.0
#include "amoe/train.hpp"

#include <algorithm>
#include <cmath>

#include "amoe/errors.hpp"

namespace amoe {

const char* stage_kind_name(StageKind k) {
  switch (k) {
    case StageKind::Align: return "align";
    case StageKind::SpecializeAudio: return "specialize_audio";
    case StageKind::SpecializeText: return "specialize_text";
    case StageKind::Joint: return "joint";
    case StageKind::Dpo: return "dpo";
  }
  return "unknown";
}

void StageConfig::validate() const {
  const bool specialize =
      stage == StageKind::SpecializeAudio || stage == StageKind::SpecializeText;
  if (specialize && !partition) {
    throw ValidationError(std::string("stage ") + stage_kind_name(stage) +
                          ": specialize stage without a partition");
  }
  if (stage == StageKind::Joint && partition) {
    throw ValidationError("stage joint: joint training must not carry a router mask");
  }
  if (lr <= 0.0 || batch_size < 1 || steps < 0) {
    throw ValidationError(std::string("stage ") + stage_kind_name(stage) +
                          ": bad optimization settings");
  }
}

Tensor joint_loss(const std::vector<StreamLogits>& outputs, const BimodalBatch& batch) {
  if (outputs.size() != batch.size() || batch.empty()) {
    throw ValidationError("joint_loss: outputs and batch sizes disagree");
  }
  const int s_total = batch[0].grid.num_audio_streams();
  Tensor total;
  int live_streams = 0;
  for (int stream = 0; stream <= s_total; ++stream) {
    std::vector<Tensor> logit_parts;
    std::vector<int> targets;
    std::vector<bool> mask;
    bool any = false;
    for (size_t i = 0; i < batch.size(); ++i) {
      const BimodalSample& s = batch[i];
      const Tensor& logits =
          stream == 0 ? outputs[i].text : outputs[i].audio[stream - 1];
      logit_parts.push_back(logits);
      for (long c = 0; c < s.grid.width(); ++c) {
        const int tok = s.grid.rows[stream][c];
        const bool on = s.loss_mask[stream][c] && tok != kPadToken;
        mask.push_back(on);
        targets.push_back(on ? tok : 0);
        any = any || on;
      }
    }
    if (!any) continue;
    Tensor ce = cross_entropy(concat_rows(logit_parts), targets, mask);
    total = total.data ? add(total, ce) : ce;
    ++live_streams;
  }
  if (live_streams == 0) throw ValidationError("joint_loss: every stream is fully masked");
  return total;
}

namespace {

// True when the routed expert (layer, index) belongs to the given side of the
// partition.
bool expert_in(const ModalityPartition& p, int layer, int expert, bool audio_side) {
  auto it = p.layers.find(layer);
  if (it == p.layers.end()) return false;
  const auto& set = audio_side ? it->second.audio_experts : it->second.text_experts;
  return std::find(set.begin(), set.end(), expert) != set.end();
}

// Group label used for parameter-change reporting; routed experts refine to
// their partition side when one is known.
std::string param_group(const Parameter& p, const std::optional<ModalityPartition>& part) {
  if (p.tag.kind == ParamKind::RoutedExpert && part) {
    if (expert_in(*part, p.tag.layer, p.tag.expert, true)) return "audio_expert";
    if (expert_in(*part, p.tag.layer, p.tag.expert, false)) return "text_expert";
  }
  return param_kind_name(p.tag.kind);
}

void apply_stage_policy(Model& model, const StageConfig& cfg) {
  for (Parameter* p : model.parameters()) {
    bool trainable = false;
    switch (cfg.stage) {
      case StageKind::Align:
        trainable = p->tag.kind == ParamKind::Adapter;
        break;
      case StageKind::SpecializeAudio:
      case StageKind::SpecializeText: {
        // only the designated experts specialize; the router stays frozen to
        // keep routing unbiased and the attention/norm core is untouched
        // until joint training
        const bool audio_stage = cfg.stage == StageKind::SpecializeAudio;
        switch (p->tag.kind) {
          case ParamKind::Router:
          case ParamKind::Attention:
          case ParamKind::Norm:
          case ParamKind::DenseFfn:
          case ParamKind::Position:
          case ParamKind::Adapter:  // the adapter trains in stages 1 and 3
            trainable = false;
            break;
          case ParamKind::RoutedExpert:
            trainable = expert_in(*cfg.partition, p->tag.layer, p->tag.expert, audio_stage);
            break;
          case ParamKind::SharedExpert:
            trainable = cfg.shared_trainable;
            break;
          default:  // heads and token embeddings
            trainable = true;
        }
        break;
      }
      case StageKind::Joint:
      case StageKind::Dpo:
        trainable = true;
        break;
    }
    p->set_frozen(!trainable);
  }
  for (int layer : model.moe_layer_indices()) {
    MoeLayer& ml = model.moe_layer(layer);
    if (cfg.stage == StageKind::SpecializeAudio || cfg.stage == StageKind::SpecializeText) {
      const bool audio_stage = cfg.stage == StageKind::SpecializeAudio;
      auto it = cfg.partition->layers.find(layer);
      if (it == cfg.partition->layers.end()) {
        throw ValidationError("run_stage: partition misses layer " + std::to_string(layer));
      }
      ml.apply_modality_mask(audio_stage ? it->second.audio_experts
                                         : it->second.text_experts);
    } else {
      ml.clear_modality_mask();
    }
  }
}

void clear_stage_policy(Model& model) {
  for (Parameter* p : model.parameters()) p->set_frozen(false);
  for (int layer : model.moe_layer_indices()) model.moe_layer(layer).clear_modality_mask();
}

}  // namespace

StageReport run_stage(Model& model, const StageConfig& config, const BimodalBatch& data) {
  config.validate();
  if (data.empty()) throw ValidationError("run_stage: empty dataset");

  StageReport report;
  report.name = stage_kind_name(config.stage);
  if (config.steps == 0) return report;

  apply_stage_policy(model, config);
  const auto before = snapshot_parameters(model);

  Rng rng = make_rng(config.seed, "stage_batches");
  std::uniform_int_distribution<size_t> pick(0, data.size() - 1);
  for (int step = 0; step < config.steps; ++step) {
    BimodalBatch batch;
    for (int b = 0; b < config.batch_size; ++b) batch.push_back(data[pick(rng)]);
    std::vector<StreamLogits> outputs;
    outputs.reserve(batch.size());
    for (const BimodalSample& s : batch) outputs.push_back(model.forward_teacher(s));
    Tensor loss = joint_loss(outputs, batch);
    model.zero_grad();
    backward(loss);
    model.sgd_step(config.lr);
    report.loss_curve.push_back(loss.scalar());
  }

  auto params = model.parameters();
  const auto after = snapshot_parameters(model);
  for (size_t i = 0; i < params.size(); ++i) {
    double sq = 0.0;
    for (size_t j = 0; j < after[i].size(); ++j) {
      const double d = after[i][j] - before[i][j];
      sq += d * d;
    }
    report.param_delta_norms[param_group(*params[i], config.partition)] += sq;
  }
  for (auto& [group, sq] : report.param_delta_norms) sq = std::sqrt(sq);

  clear_stage_policy(model);
  return report;
}

double evaluate_suite(const EvalSuite& suite, const CellScorer& scorer) {
  if (suite.items.empty()) throw ValidationError("evaluate: empty suite");
  long correct = 0;
  for (const EvalItem& item : suite.items) {
    const double sc = scorer(item.sample_idx, item, item.correct);
    const double sd = scorer(item.sample_idx, item, item.distractor);
    if (sc > sd) ++correct;
  }
  return static_cast<double>(correct) / suite.items.size();
}

EvalMetrics evaluate(const Model& model, const EvalSuite& text_suite,
                     const EvalSuite& audio_suite, const EvalSuite& joint_suite) {
  NoGradGuard ng;
  auto run = [&](const EvalSuite& suite) {
    std::vector<std::optional<StreamLogits>> cache(suite.samples.size());
    CellScorer scorer = [&](int sample_idx, const EvalItem& item, int token) {
      if (!cache[sample_idx]) {
        cache[sample_idx] = model.forward_teacher(suite.samples[sample_idx]);
      }
      const StreamLogits& logits = *cache[sample_idx];
      const Tensor& t = item.row == 0 ? logits.text : logits.audio[item.row - 1];
      return t.at(item.col, token);
    };
    return evaluate_suite(suite, scorer);
  };
  EvalMetrics m;
  m.text_task_acc = run(text_suite);
  m.audio_task_acc = run(audio_suite);
  m.joint_task_acc = run(joint_suite);
  return m;
}

DropReport forgetting_drop(const EvalMetrics& before, const EvalMetrics& after) {
  auto one = [](double b, double a) {
    if (b == 0.0) throw NumericError("forgetting_drop: zero baseline metric");
    return (a - b) / b;
  };
  DropReport d;
  d.text = one(before.text_task_acc, after.text_task_acc);
  d.audio = one(before.audio_task_acc, after.audio_task_acc);
  d.joint = one(before.joint_task_acc, after.joint_task_acc);
  d.average = (d.text + d.audio + d.joint) / 3.0;
  return d;
}

}  // namespace amoe
