// SPDX-License-Identifier: Apache-2.0
#include "amoe/pipeline.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "amoe/decode.hpp"
#include "amoe/dpo.hpp"
#include "amoe/errors.hpp"
#include "amoe/partition.hpp"

namespace amoe {

namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
}

ojson metrics_json(const EvalMetrics& m) {
  return ojson{{"text_task_acc", m.text_task_acc},
               {"audio_task_acc", m.audio_task_acc},
               {"joint_task_acc", m.joint_task_acc}};
}

void write_stage_report(const fs::path& dir, const std::string& label, const StageReport& rep,
                        const std::optional<EvalMetrics>& metrics) {
  ojson j;
  j["stage"] = label;
  j["steps"] = rep.loss_curve.size();
  j["final_loss"] = rep.loss_curve.empty() ? ojson(nullptr) : ojson(rep.loss_curve.back());
  j["param_delta_norms"] = rep.param_delta_norms;
  if (metrics) j["metrics"] = metrics_json(*metrics);
  write_file(dir / ("stage_" + label + ".json"), j.dump(2) + "\n");

  std::ostringstream csv;
  csv.precision(17);
  csv << "step,loss\n";
  for (size_t i = 0; i < rep.loss_curve.size(); ++i) csv << i << "," << rep.loss_curve[i] << "\n";
  write_file(dir / ("stage_" + label + "_loss.csv"), csv.str());
}

std::string profile_csv(const ExpertLoadProfile& p) {
  std::ostringstream os;
  p.write_csv(os);
  return os.str();
}

// Mean routing distribution shift after extending the expert set: per probe
// token, KL(pre || post restricted to the original experts and renormalized),
// averaged over tokens and MoE layers.
double routing_shift_kl(const std::vector<std::vector<std::vector<double>>>& pre,
                        const std::vector<std::vector<std::vector<double>>>& post) {
  double total = 0.0;
  long count = 0;
  for (size_t layer = 0; layer < pre.size(); ++layer) {
    for (size_t tok = 0; tok < pre[layer].size(); ++tok) {
      const auto& p = pre[layer][tok];
      const auto& q_full = post[layer][tok];
      double qsum = 0.0;
      for (size_t e = 0; e < p.size(); ++e) qsum += q_full[e];
      double kl = 0.0;
      for (size_t e = 0; e < p.size(); ++e) {
        if (p[e] <= 0.0) continue;
        const double q = q_full[e] / qsum;
        kl += p[e] * std::log(p[e] / std::max(q, 1e-300));
      }
      total += kl;
      ++count;
    }
  }
  return count == 0 ? 0.0 : total / count;
}

std::vector<std::vector<std::vector<double>>> probe_routing(const Model& model,
                                                            const BimodalBatch& probe) {
  NoGradGuard ng;
  std::vector<std::vector<std::vector<double>>> out(model.moe_layer_indices().size());
  for (const BimodalSample& s : probe) {
    ForwardTrace trace;
    model.forward_prompt(s, &trace);
    for (size_t li = 0; li < trace.decisions.size(); ++li) {
      const RoutingDecision& d = trace.decisions[li].second;
      const long n = d.probs.rows(), e = d.probs.cols();
      for (long i = 0; i < n; ++i) {
        std::vector<double> row(e);
        for (long j = 0; j < e; ++j) row[j] = d.probs.at(i, j);
        out[li].push_back(std::move(row));
      }
    }
  }
  return out;
}

ModalityPartition extend_partition(const Model& model, int original_experts, int extra) {
  ModalityPartition part;
  part.num_experts = original_experts + extra;
  part.k = extra;
  for (int layer : model.moe_layer_indices()) {
    LayerPartition lp;
    for (int e = 0; e < extra; ++e) lp.audio_experts.push_back(original_experts + e);
    for (int e = 0; e < original_experts; ++e) lp.text_experts.push_back(e);
    lp.audio_scores.assign(part.num_experts, 0.0);
    lp.text_scores.assign(part.num_experts, 0.0);
    part.layers[layer] = lp;
  }
  return part;
}

struct StageRunner {
  Model& model;
  const ExperimentConfig& cfg;
  const fs::path& dir;
  const EvalSuite& probe_text;
  const EvalSuite& probe_audio;
  const EvalSuite& probe_joint;
  std::string current_stage;

  StageReport run(const std::string& label, StageKind kind, int steps, double lr,
                  const BimodalBatch& data, std::optional<ModalityPartition> partition) {
    current_stage = label;
    StageConfig sc;
    sc.stage = kind;
    sc.lr = lr;
    sc.steps = steps;
    sc.batch_size = cfg.batch_size;
    sc.seed = derive_seed(cfg.seed, "stage_" + label);
    sc.partition = std::move(partition);
    sc.shared_trainable = cfg.shared_trainable_in_specialize;
    StageReport rep = run_stage(model, sc, data);
    rep.name = label;
    EvalMetrics probe = evaluate(model, probe_text, probe_audio, probe_joint);
    write_stage_report(dir, label, rep, probe);
    return rep;
  }
};

}  // namespace

PipelineResult run_pipeline(const ExperimentConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  write_file(dir / "resolved_config.txt", cfg.to_key_values());

  std::string current_stage = "setup";
  try {
    const Corpus corpus = Corpus::make(cfg);
    Model model = Model::init(cfg.model, cfg.seed);

    // datasets and eval suites depend on (config, seed) only, never on the
    // strategy, so ablation cells within a seed consume identical corpora
    Rng rng_pre = make_rng(cfg.seed, "data_pretrain");
    Rng rng_align = make_rng(cfg.seed, "data_align");
    Rng rng_audio = make_rng(cfg.seed, "data_audio");
    Rng rng_text = make_rng(cfg.seed, "data_text");
    const BimodalBatch data_pretrain = corpus.batch(SampleKind::TextPretrain, cfg.train_samples, rng_pre);
    const BimodalBatch data_align = corpus.batch(SampleKind::Align, cfg.train_samples, rng_align);
    // the post-pretraining stages see only a small fixed corpus per modality:
    // paired data is scarce next to the pretraining distribution, which is
    // what makes the measured forgetting persistent
    const BimodalBatch data_audio = corpus.batch(SampleKind::AudioTask, cfg.sft_samples, rng_audio);
    const BimodalBatch data_text = corpus.batch(SampleKind::TextTask, cfg.sft_samples, rng_text);
    // joint-stage mix leans audio-heavy, mirroring the stage-3 data balance
    // of the reference recipe
    BimodalBatch data_mixed = data_audio;
    data_mixed.insert(data_mixed.end(), data_audio.begin(), data_audio.end());
    data_mixed.insert(data_mixed.end(), data_text.begin(), data_text.end());

    // unimodal specialization supervises only the stage's own streams; the
    // cross-modal text row of audio-input data belongs to joint training
    BimodalBatch data_audio_streams = data_audio;
    for (BimodalSample& sample : data_audio_streams) {
      sample.loss_mask[0].assign(sample.loss_mask[0].size(), false);
    }
    BimodalBatch data_text_stream = data_text;
    for (BimodalSample& sample : data_text_stream) {
      for (size_t r = 1; r < sample.loss_mask.size(); ++r) {
        sample.loss_mask[r].assign(sample.loss_mask[r].size(), false);
      }
    }

    Rng rng_pa = make_rng(cfg.seed, "profile_audio");
    Rng rng_pt = make_rng(cfg.seed, "profile_text");
    // profile the audio side with the stage-2.1 training distribution and
    // the text side with the pure text-LM format whose capability the
    // partition is meant to protect
    const BimodalBatch profile_audio_data = corpus.batch(SampleKind::AudioTask, cfg.profile_samples, rng_pa);
    const BimodalBatch profile_text_data = corpus.batch(SampleKind::TextPretrain, cfg.profile_samples, rng_pt);

    Rng rng_et = make_rng(cfg.seed, "eval_text");
    Rng rng_ea = make_rng(cfg.seed, "eval_audio");
    Rng rng_ej = make_rng(cfg.seed, "eval_joint");
    const EvalSuite eval_text =
        corpus.eval_suite(EvalTask::Text, cfg.eval_samples, cfg.eval_cells_per_sample, rng_et);
    const EvalSuite eval_audio =
        corpus.eval_suite(EvalTask::Audio, cfg.eval_samples, cfg.eval_cells_per_sample, rng_ea);
    const EvalSuite eval_joint =
        corpus.eval_suite(EvalTask::Joint, cfg.eval_samples, cfg.eval_cells_per_sample, rng_ej);

    // small fixed suites for the per-stage progress metrics in stage reports
    Rng rng_qt = make_rng(cfg.seed, "probe_eval_text");
    Rng rng_qa = make_rng(cfg.seed, "probe_eval_audio");
    Rng rng_qj = make_rng(cfg.seed, "probe_eval_joint");
    const EvalSuite probe_text = corpus.eval_suite(EvalTask::Text, 120, 4, rng_qt);
    const EvalSuite probe_audio = corpus.eval_suite(EvalTask::Audio, 120, 4, rng_qa);
    const EvalSuite probe_joint = corpus.eval_suite(EvalTask::Joint, 120, 4, rng_qj);

    StageRunner runner{model, cfg, dir, probe_text, probe_audio, probe_joint, current_stage};

    runner.run("pretrain", StageKind::Joint, cfg.pretrain_steps, cfg.pretrain_lr, data_pretrain,
               std::nullopt);
    current_stage = "evaluate_before";
    PipelineResult result;
    result.before = evaluate(model, eval_text, eval_audio, eval_joint);

    runner.run("align", StageKind::Align, cfg.stage1_steps, cfg.stage1_lr, data_align,
               std::nullopt);

    const bool pure = cfg.strategy == "pure_moe";
    const bool adaptive = cfg.strategy == "adaptive";
    const bool random = cfg.strategy == "random";
    const bool extend = cfg.strategy == "extend";

    std::optional<ModalityPartition> partition;
    if (extend) {
      current_stage = "extend";
      Rng rng_probe = make_rng(cfg.seed, "routing_probe");
      const BimodalBatch probe = corpus.batch(SampleKind::AudioTask, 32, rng_probe);
      const auto pre = probe_routing(model, probe);
      const int original = cfg.model.num_routed_experts;
      model.extend_experts(cfg.audio_expert_count, cfg.seed);
      const auto post = probe_routing(model, probe);
      result.routing_shift_kl = routing_shift_kl(pre, post);
      partition = extend_partition(model, original, cfg.audio_expert_count);
    }

    for (int round = 0; round < cfg.partition_iterations; ++round) {
      current_stage = "profile";
      auto [e_audio, e_text] = profile_modality_loads(model, profile_audio_data,
                                                      profile_text_data, cfg.load_count_weighted);
      write_file(dir / "loads_audio.csv", profile_csv(e_audio));
      write_file(dir / "loads_text.csv", profile_csv(e_text));

      current_stage = "partition";
      if (adaptive) {
        partition = select_partition(e_audio, e_text, cfg.audio_expert_count);
      } else if (random) {
        partition = partition_random(model.moe_layer_indices(), cfg.model.num_routed_experts,
                                     cfg.audio_expert_count, cfg.seed);
      }
      if (partition) write_file(dir / "partition.json", partition_to_json(*partition));

      if (pure) {
        // no modality experts: same budgets and data, no freeze or mask
        runner.run("specialize_audio", StageKind::Joint, cfg.stage21_steps, cfg.stage21_lr,
                   data_audio_streams, std::nullopt);
        runner.run("specialize_text", StageKind::Joint, cfg.stage22_steps, cfg.stage22_lr,
                   data_text_stream, std::nullopt);
      } else {
        runner.run("specialize_audio", StageKind::SpecializeAudio, cfg.stage21_steps,
                   cfg.stage21_lr, data_audio_streams, partition);
        runner.run("specialize_text", StageKind::SpecializeText, cfg.stage22_steps,
                   cfg.stage22_lr, data_text_stream, partition);
      }
    }

    runner.run("joint", StageKind::Joint, cfg.stage3_steps, cfg.stage3_lr, data_mixed,
               std::nullopt);

    current_stage = "evaluate_after";
    result.after = evaluate(model, eval_text, eval_audio, eval_joint);
    result.drop = forgetting_drop(result.before, result.after);

    if (cfg.dpo) {
      current_stage = "dpo";
      Rng rng_dp = make_rng(cfg.seed, "dpo_prompts");
      Rng rng_de = make_rng(cfg.seed, "dpo_eval_prompts");
      auto make_prompts = [&](int count, Rng& r) {
        std::vector<std::vector<int>> ps;
        for (int i = 0; i < count; ++i) {
          ps.push_back(corpus.sample(SampleKind::TextTask, r).prompt_text_ids);
        }
        return ps;
      };
      const auto train_prompts = make_prompts(cfg.dpo_prompts, rng_dp);
      const auto eval_prompts = make_prompts(std::max(8, cfg.dpo_prompts / 2), rng_de);
      auto cost_fn = [&](const std::vector<int>& prompt, const DelayedTokenGrid& grid) {
        return grid_wer(grid, corpus.ground_truth_for_text_prompt(prompt));
      };
      SamplingConfig sampling;
      sampling.topk = cfg.dpo_topk;
      sampling.temperature = cfg.dpo_temperature;
      sampling.seed = derive_seed(cfg.seed, "dpo_sampling");

      DpoSummary summary;
      auto mean_greedy_reward = [&]() {
        double sum = 0.0;
        for (const auto& prompt : eval_prompts) {
          const std::vector<int> pad_audio(prompt.size(), kPadToken);
          DecodeOutput dec = batch_parallel_decode(model, prompt, pad_audio,
                                                   SamplingConfig{1, 1.0, 0}, cfg.target_len);
          sum += grid_reward(dec.grid, corpus.ground_truth_for_text_prompt(prompt));
        }
        return sum / eval_prompts.size();
      };
      summary.reward_before = mean_greedy_reward();
      auto triplets = build_preference_pairs(model, train_prompts, cfg.dpo_candidates, cost_fn,
                                             sampling, cfg.target_len, &summary.ties_skipped);
      summary.triplets = static_cast<int>(triplets.size());
      write_file(dir / "triplets.jsonl", triplets_to_jsonl(triplets));
      DpoReport dpo_rep;
      if (!triplets.empty()) {
        dpo_rep = run_dpo_stage(model, triplets, cfg.dpo_beta, cfg.dpo_steps, cfg.dpo_lr,
                                std::min(8, cfg.batch_size), derive_seed(cfg.seed, "stage_dpo"));
      }
      summary.reward_after = triplets.empty() ? summary.reward_before : mean_greedy_reward();
      result.dpo = summary;

      ojson dj;
      dj["triplets"] = summary.triplets;
      dj["ties_skipped"] = summary.ties_skipped;
      dj["beta"] = cfg.dpo_beta;
      dj["loss_curve"] = dpo_rep.loss_curve;
      dj["margin_curve"] = dpo_rep.margin_curve;
      dj["reward_before"] = summary.reward_before;
      dj["reward_after"] = summary.reward_after;
      write_file(dir / "dpo_report.json", dj.dump(2) + "\n");
    }

    current_stage = "decode_demo";
    {
      Rng rng_demo = make_rng(cfg.seed, "decode_demo");
      ojson decodes = ojson::array();
      for (int i = 0; i < 4; ++i) {
        const auto prompt = corpus.sample(SampleKind::TextTask, rng_demo).prompt_text_ids;
        const std::vector<int> pad_audio(prompt.size(), kPadToken);
        DecodeOutput dec = batch_parallel_decode(model, prompt, pad_audio,
                                                 SamplingConfig{1, 1.0, 0}, cfg.target_len);
        ojson entry = nlohmann::ordered_json::parse(decode_output_to_json(dec));
        entry["prompt"] = prompt;
        decodes.push_back(entry);
      }
      write_file(dir / "decodes.json", decodes.dump(2) + "\n");
    }

    current_stage = "metrics";
    ojson mj;
    mj["strategy"] = cfg.strategy;
    mj["seed"] = cfg.seed;
    mj["audio_expert_count"] = cfg.audio_expert_count;
    mj["before"] = metrics_json(result.before);
    mj["after"] = metrics_json(result.after);
    mj["drop"] = ojson{{"text", result.drop.text},
                       {"audio", result.drop.audio},
                       {"joint", result.drop.joint},
                       {"average", result.drop.average}};
    if (result.routing_shift_kl) mj["routing_shift_kl"] = *result.routing_shift_kl;
    if (result.dpo) {
      mj["dpo"] = ojson{{"triplets", result.dpo->triplets},
                        {"ties_skipped", result.dpo->ties_skipped},
                        {"reward_before", result.dpo->reward_before},
                        {"reward_after", result.dpo->reward_after}};
    }
    write_file(dir / "metrics.json", mj.dump(2) + "\n");
    return result;
  } catch (const std::exception& e) {
    throw std::runtime_error("pipeline aborted in stage '" + current_stage + "': " + e.what());
  }
}

std::vector<AblationCell> run_ablation(const ExperimentConfig& base,
                                       const std::vector<std::string>& strategies,
                                       const std::vector<std::uint64_t>& seeds,
                                       const std::string& out_dir) {
  if (strategies.empty() || seeds.empty()) {
    throw ValidationError("ablation: need at least one strategy and one seed");
  }
  const fs::path dir(out_dir);
  fs::create_directories(dir);

  std::vector<AblationCell> cells;
  for (const std::string& strategy : strategies) {
    for (std::uint64_t seed : seeds) {
      AblationCell cell;
      cell.strategy = strategy;
      cell.seed = seed;
      ExperimentConfig cfg = base;
      cfg.strategy = strategy;
      cfg.seed = seed;
      const fs::path run_dir = dir / (strategy + "_seed" + std::to_string(seed));
      try {
        cell.result = run_pipeline(cfg, run_dir.string());
      } catch (const std::exception& e) {
        cell.error = e.what();
      }
      cells.push_back(std::move(cell));
    }
  }

  std::ostringstream csv;
  csv.precision(17);
  csv << "strategy,seed,text_task_acc,audio_task_acc,joint_task_acc,text_drop_pct,error\n";
  for (const AblationCell& c : cells) {
    csv << c.strategy << "," << c.seed << ",";
    if (c.result) {
      csv << c.result->after.text_task_acc << "," << c.result->after.audio_task_acc << ","
          << c.result->after.joint_task_acc << "," << 100.0 * c.result->drop.text << ",";
    } else {
      csv << ",,,,";
    }
    // keep the CSV parseable: quote the error message
    csv << (c.error.empty() ? "" : "\"" + c.error + "\"") << "\n";
  }
  for (const std::string& strategy : strategies) {
    double text = 0, audio = 0, joint = 0, drop = 0;
    int n = 0;
    for (const AblationCell& c : cells) {
      if (c.strategy != strategy || !c.result) continue;
      text += c.result->after.text_task_acc;
      audio += c.result->after.audio_task_acc;
      joint += c.result->after.joint_task_acc;
      drop += 100.0 * c.result->drop.text;
      ++n;
    }
    csv << strategy << ",mean,";
    if (n > 0) {
      csv << text / n << "," << audio / n << "," << joint / n << "," << drop / n << ",";
    } else {
      csv << ",,,,";
    }
    csv << "\n";
  }
  write_file(dir / "ablation.csv", csv.str());
  return cells;
}

std::vector<SweepRow> run_expert_sweep(const ExperimentConfig& base, const std::vector<int>& ks,
                                       const std::string& out_dir) {
  if (ks.empty()) throw ValidationError("sweep: empty k list");
  const fs::path dir(out_dir);
  fs::create_directories(dir);

  std::vector<SweepRow> rows;
  for (int k : ks) {
    SweepRow row;
    row.k = k;
    ExperimentConfig cfg = base;
    cfg.audio_expert_count = k;
    try {
      cfg.validate();
      row.result = run_pipeline(cfg, (dir / ("k" + std::to_string(k))).string());
    } catch (const std::exception& e) {
      row.note = std::string("skipped: ") + e.what();
    }
    rows.push_back(std::move(row));
  }

  std::ostringstream csv;
  csv.precision(17);
  csv << "k,text_task_acc,audio_task_acc,joint_task_acc,text_drop_pct,note\n";
  for (const SweepRow& r : rows) {
    csv << r.k << ",";
    if (r.result) {
      csv << r.result->after.text_task_acc << "," << r.result->after.audio_task_acc << ","
          << r.result->after.joint_task_acc << "," << 100.0 * r.result->drop.text << ",";
    } else {
      csv << ",,,,";
    }
    csv << (r.note.empty() ? "" : "\"" + r.note + "\"") << "\n";
  }
  write_file(dir / "sweep.csv", csv.str());
  return rows;
}

void run_export_loads(const ExperimentConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  write_file(dir / "resolved_config.txt", cfg.to_key_values());

  const Corpus corpus = Corpus::make(cfg);
  Model model = Model::init(cfg.model, cfg.seed);

  Rng rng_pre = make_rng(cfg.seed, "data_pretrain");
  Rng rng_align = make_rng(cfg.seed, "data_align");
  const BimodalBatch data_pretrain = corpus.batch(SampleKind::TextPretrain, cfg.train_samples, rng_pre);
  const BimodalBatch data_align = corpus.batch(SampleKind::Align, cfg.train_samples, rng_align);

  StageConfig pre;
  pre.stage = StageKind::Joint;
  pre.lr = cfg.pretrain_lr;
  pre.steps = cfg.pretrain_steps;
  pre.batch_size = cfg.batch_size;
  pre.seed = derive_seed(cfg.seed, "stage_pretrain");
  run_stage(model, pre, data_pretrain);

  StageConfig align;
  align.stage = StageKind::Align;
  align.lr = cfg.stage1_lr;
  align.steps = cfg.stage1_steps;
  align.batch_size = cfg.batch_size;
  align.seed = derive_seed(cfg.seed, "stage_align");
  run_stage(model, align, data_align);

  Rng rng_pa = make_rng(cfg.seed, "profile_audio");
  Rng rng_pt = make_rng(cfg.seed, "profile_text");
  const BimodalBatch pa = corpus.batch(SampleKind::AudioTask, cfg.profile_samples, rng_pa);
  const BimodalBatch pt = corpus.batch(SampleKind::TextPretrain, cfg.profile_samples, rng_pt);
  auto [e_audio, e_text] = profile_modality_loads(model, pa, pt, cfg.load_count_weighted);
  write_file(dir / "loads_audio.csv", profile_csv(e_audio));
  write_file(dir / "loads_text.csv", profile_csv(e_text));

  // per-layer expert with the highest audio selection score
  std::ostringstream summary;
  summary << "layer,max_audio_score_expert\n";
  for (int layer : e_audio.layer_indices()) {
    const auto ea = e_audio.loads(layer, Modality::Audio);
    const auto et = e_text.loads(layer, Modality::Text);
    int best = 0;
    double best_score = -1.0;
    for (int e = 0; e < e_audio.num_experts; ++e) {
      const double score = ea[e] * (1.0 - et[e]);
      if (score > best_score) {
        best_score = score;
        best = e;
      }
    }
    summary << layer << "," << best << "\n";
  }
  write_file(dir / "loads_summary.csv", summary.str());
}

}  // namespace amoe
