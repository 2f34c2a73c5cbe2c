// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end for the adaptive modality-expert MoE harness.
// Talks to the core exclusively through the C API in amoe/amoe.h.
#include <cstdio>
#include <memory>
#include <string>

#include <CLI11.hpp>

#include "amoe/amoe.h"

namespace {

struct ConfigDeleter {
  void operator()(amoe_config* c) const { amoe_config_free(c); }
};
using ConfigPtr = std::unique_ptr<amoe_config, ConfigDeleter>;

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::string seed;
  std::string strategy;
  std::string k;
};

void add_common(CLI::App* cmd, CommonArgs& args, const char* default_out) {
  cmd->add_option("--config", args.config_path, "flat key=value config file");
  cmd->add_option("--out", args.out_dir, "output directory")->default_val(default_out);
  cmd->add_option("--seed", args.seed, "master seed (ablate accepts a comma list)");
  cmd->add_option("--strategy", args.strategy,
                  "adaptive | random | pure_moe | extend (ablate accepts a comma list)");
  cmd->add_option("--k", args.k, "audio experts per layer (sweep accepts a comma list)");
}

// Builds the config handle from --config plus single-value overrides.
// Returns nullptr after printing the error.
ConfigPtr build_config(const CommonArgs& args, bool apply_seed, bool apply_strategy,
                       bool apply_k) {
  ConfigPtr cfg(args.config_path.empty() ? amoe_config_new()
                                         : amoe_config_load(args.config_path.c_str()));
  if (!cfg) {
    std::fprintf(stderr, "error: %s\n", amoe_last_error());
    return nullptr;
  }
  auto set = [&](const char* key, const std::string& value) {
    if (value.empty()) return true;
    if (amoe_config_set(cfg.get(), key, value.c_str()) != AMOE_OK) {
      std::fprintf(stderr, "error: %s\n", amoe_last_error());
      return false;
    }
    return true;
  };
  if (apply_seed && !set("seed", args.seed)) return nullptr;
  if (apply_strategy && !set("strategy", args.strategy)) return nullptr;
  if (apply_k && !set("audio_expert_count", args.k)) return nullptr;
  return cfg;
}

int finish(int rc, const std::string& out_dir, const char* what) {
  if (rc == AMOE_OK) {
    std::printf("%s complete; artifacts in %s\n", what, out_dir.c_str());
  } else {
    std::fprintf(stderr, "error: %s\n", amoe_last_error());
  }
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adaptive modality-expert mixture-of-experts experiment harness"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(amoe_version()));

  CommonArgs run_args, ablate_args, sweep_args, loads_args, dpo_args;
  CLI::App* run = app.add_subcommand("run", "full staged pipeline for one strategy and seed");
  add_common(run, run_args, "amoe_out/run");
  CLI::App* ablate =
      app.add_subcommand("ablate", "strategy x seed comparison grid (ablation.csv)");
  add_common(ablate, ablate_args, "amoe_out/ablate");
  CLI::App* sweep = app.add_subcommand("sweep", "audio-expert-count sweep (sweep.csv)");
  add_common(sweep, sweep_args, "amoe_out/sweep");
  CLI::App* loads =
      app.add_subcommand("loads", "export per-layer modality load profiles (CSV)");
  add_common(loads, loads_args, "amoe_out/loads");
  CLI::App* dpo = app.add_subcommand("dpo", "pipeline with the preference-training stage");
  add_common(dpo, dpo_args, "amoe_out/dpo");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : AMOE_ERR_VALIDATION;
  }

  if (run->parsed()) {
    ConfigPtr cfg = build_config(run_args, true, true, true);
    if (!cfg) return AMOE_ERR_VALIDATION;
    return finish(amoe_run_pipeline(cfg.get(), run_args.out_dir.c_str()), run_args.out_dir,
                  "run");
  }
  if (ablate->parsed()) {
    ConfigPtr cfg = build_config(ablate_args, false, false, true);
    if (!cfg) return AMOE_ERR_VALIDATION;
    const std::string strategies =
        ablate_args.strategy.empty() ? "adaptive,random,pure_moe" : ablate_args.strategy;
    const std::string seeds = ablate_args.seed.empty() ? "1,2,3" : ablate_args.seed;
    return finish(amoe_run_ablation(cfg.get(), strategies.c_str(), seeds.c_str(),
                                    ablate_args.out_dir.c_str()),
                  ablate_args.out_dir, "ablation");
  }
  if (sweep->parsed()) {
    ConfigPtr cfg = build_config(sweep_args, true, true, false);
    if (!cfg) return AMOE_ERR_VALIDATION;
    if (sweep_args.k.empty()) {
      std::fprintf(stderr, "error: sweep requires --k with a comma-separated list\n");
      return AMOE_ERR_VALIDATION;
    }
    return finish(amoe_run_sweep(cfg.get(), sweep_args.k.c_str(), sweep_args.out_dir.c_str()),
                  sweep_args.out_dir, "sweep");
  }
  if (loads->parsed()) {
    ConfigPtr cfg = build_config(loads_args, true, true, true);
    if (!cfg) return AMOE_ERR_VALIDATION;
    return finish(amoe_export_loads(cfg.get(), loads_args.out_dir.c_str()), loads_args.out_dir,
                  "loads export");
  }
  if (dpo->parsed()) {
    ConfigPtr cfg = build_config(dpo_args, true, true, true);
    if (!cfg) return AMOE_ERR_VALIDATION;
    return finish(amoe_run_dpo(cfg.get(), dpo_args.out_dir.c_str()), dpo_args.out_dir, "dpo");
  }
  return AMOE_ERR_VALIDATION;
}
