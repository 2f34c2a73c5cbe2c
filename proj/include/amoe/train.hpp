// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "amoe/corpus.hpp"
#include "amoe/model.hpp"
#include "amoe/partition.hpp"

namespace amoe {

enum class StageKind { Align, SpecializeAudio, SpecializeText, Joint, Dpo };

const char* stage_kind_name(StageKind k);

// Freeze/mask policy plus the optimization knobs of one training stage.
// Specialize stages freeze the router and the opposite modality's experts and
// restrict routing to their own expert set; joint stages train everything
// with no mask; align trains the adapter only.
struct StageConfig {
  StageKind stage = StageKind::Joint;
  double lr = 0.01;
  int steps = 0;
  int batch_size = 8;
  std::uint64_t seed = 0;
  std::optional<ModalityPartition> partition;  // required for specialize stages
  bool shared_trainable = true;                // shared experts during specialize

  void validate() const;
};

struct StageReport {
  std::string name;
  std::vector<double> loss_curve;
  std::map<std::string, double> param_delta_norms;  // per tag group, L2
};

// Eq.-style joint objective: per-stream mean NLL over unmasked non-PAD grid
// cells, pooled across the batch, summed over the 1+S streams. Streams with
// no supervised cells drop out; an entirely masked batch is an error.
Tensor joint_loss(const std::vector<StreamLogits>& outputs, const BimodalBatch& batch);

// Plain gradient descent with the stage's freeze/mask policy. Leaves the
// model unfrozen and unmasked on exit.
StageReport run_stage(Model& model, const StageConfig& config, const BimodalBatch& data);

struct EvalMetrics {
  double text_task_acc = 0.0;
  double audio_task_acc = 0.0;
  double joint_task_acc = 0.0;
};

// Candidate scorer for one grid cell of one eval sample; higher wins.
using CellScorer = std::function<double(int sample_idx, const EvalItem& item, int token)>;

double evaluate_suite(const EvalSuite& suite, const CellScorer& scorer);

// Accuracy = exact binary-choice match count / total, deterministic given the
// model and suites.
EvalMetrics evaluate(const Model& model, const EvalSuite& text_suite,
                     const EvalSuite& audio_suite, const EvalSuite& joint_suite);

struct DropReport {
  double text = 0.0;
  double audio = 0.0;
  double joint = 0.0;
  double average = 0.0;
};

// Relative change (after - before) / before per task; negative = degradation.
DropReport forgetting_drop(const EvalMetrics& before, const EvalMetrics& after);

}  // namespace amoe
