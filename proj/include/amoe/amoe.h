/* SPDX-License-Identifier: Apache-2.0
 *
 * C interface to the adaptive modality-expert MoE harness. All functions
 * return AMOE_OK on success; on failure they return an error code and leave a
 * message retrievable with amoe_last_error() (per thread). Handles are opaque
 * and freed with their matching _free function.
 */
#ifndef AMOE_H
#define AMOE_H

#ifdef __cplusplus
extern "C" {
#endif

#define AMOE_OK 0
#define AMOE_ERR_VALIDATION 1
#define AMOE_ERR_RUNTIME 2

typedef struct amoe_config amoe_config;

const char* amoe_version(void);

/* Message from the most recent failing call on this thread ("" if none). */
const char* amoe_last_error(void);

/* A config pre-filled with the desk-scale defaults. Never fails. */
amoe_config* amoe_config_new(void);

/* Loads a flat key=value file; NULL on failure (see amoe_last_error). */
amoe_config* amoe_config_load(const char* path);

/* Applies one key=value setting. */
int amoe_config_set(amoe_config* cfg, const char* key, const char* value);

void amoe_config_free(amoe_config* cfg);

/* Full staged pipeline run; artifacts land in out_dir. */
int amoe_run_pipeline(const amoe_config* cfg, const char* out_dir);

/* Pipeline with the preference-training stage enabled. */
int amoe_run_dpo(const amoe_config* cfg, const char* out_dir);

/* Strategy x seed grid; comma-separated lists, e.g. "adaptive,pure_moe" and
 * "1,2,3". Writes ablation.csv plus one run directory per cell. */
int amoe_run_ablation(const amoe_config* cfg, const char* strategies_csv,
                      const char* seeds_csv, const char* out_dir);

/* Audio-expert-count sweep over a comma-separated k list, e.g. "2,3,4". */
int amoe_run_sweep(const amoe_config* cfg, const char* k_csv, const char* out_dir);

/* Pretrain + align, then export per-layer modality load CSVs. */
int amoe_export_loads(const amoe_config* cfg, const char* out_dir);

#ifdef __cplusplus
}
#endif

#endif /* AMOE_H */
