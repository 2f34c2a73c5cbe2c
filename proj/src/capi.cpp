// SPDX-License-Identifier: Apache-2.0
#include "amoe/amoe.h"

#include <charconv>
#include <string>
#include <vector>

#include "amoe/config.hpp"
#include "amoe/errors.hpp"
#include "amoe/pipeline.hpp"

struct amoe_config {
  amoe::ExperimentConfig cfg;
};

namespace {

thread_local std::string g_last_error;

template <typename Fn>
int guarded(Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return AMOE_OK;
  } catch (const amoe::ValidationError& e) {
    g_last_error = e.what();
    return AMOE_ERR_VALIDATION;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return AMOE_ERR_RUNTIME;
  }
}

std::vector<std::string> split_csv(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (!isspace(static_cast<unsigned char>(c))) {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

long parse_long_or_throw(const std::string& v, const char* what) {
  long out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw amoe::ValidationError(std::string(what) + ": expected an integer, got '" + v + "'");
  }
  return out;
}

}  // namespace

extern "C" {

const char* amoe_version(void) { return "0.1.0"; }

const char* amoe_last_error(void) { return g_last_error.c_str(); }

amoe_config* amoe_config_new(void) { return new amoe_config{}; }

amoe_config* amoe_config_load(const char* path) {
  if (!path) {
    g_last_error = "amoe_config_load: path is NULL";
    return nullptr;
  }
  amoe_config* out = nullptr;
  const int rc = guarded([&] { out = new amoe_config{amoe::load_config_file(path)}; });
  return rc == AMOE_OK ? out : nullptr;
}

int amoe_config_set(amoe_config* cfg, const char* key, const char* value) {
  if (!cfg || !key || !value) {
    g_last_error = "amoe_config_set: NULL argument";
    return AMOE_ERR_VALIDATION;
  }
  return guarded([&] { cfg->cfg.set(key, value); });
}

void amoe_config_free(amoe_config* cfg) { delete cfg; }

int amoe_run_pipeline(const amoe_config* cfg, const char* out_dir) {
  if (!cfg || !out_dir) {
    g_last_error = "amoe_run_pipeline: NULL argument";
    return AMOE_ERR_VALIDATION;
  }
  return guarded([&] { amoe::run_pipeline(cfg->cfg, out_dir); });
}

int amoe_run_dpo(const amoe_config* cfg, const char* out_dir) {
  if (!cfg || !out_dir) {
    g_last_error = "amoe_run_dpo: NULL argument";
    return AMOE_ERR_VALIDATION;
  }
  return guarded([&] {
    amoe::ExperimentConfig with_dpo = cfg->cfg;
    with_dpo.dpo = true;
    amoe::run_pipeline(with_dpo, out_dir);
  });
}

int amoe_run_ablation(const amoe_config* cfg, const char* strategies_csv,
                      const char* seeds_csv, const char* out_dir) {
  if (!cfg || !strategies_csv || !seeds_csv || !out_dir) {
    g_last_error = "amoe_run_ablation: NULL argument";
    return AMOE_ERR_VALIDATION;
  }
  return guarded([&] {
    const std::vector<std::string> strategies = split_csv(strategies_csv);
    std::vector<std::uint64_t> seeds;
    for (const std::string& s : split_csv(seeds_csv)) {
      seeds.push_back(static_cast<std::uint64_t>(parse_long_or_throw(s, "seeds")));
    }
    amoe::run_ablation(cfg->cfg, strategies, seeds, out_dir);
  });
}

int amoe_run_sweep(const amoe_config* cfg, const char* k_csv, const char* out_dir) {
  if (!cfg || !k_csv || !out_dir) {
    g_last_error = "amoe_run_sweep: NULL argument";
    return AMOE_ERR_VALIDATION;
  }
  return guarded([&] {
    std::vector<int> ks;
    for (const std::string& s : split_csv(k_csv)) {
      ks.push_back(static_cast<int>(parse_long_or_throw(s, "k list")));
    }
    amoe::run_expert_sweep(cfg->cfg, ks, out_dir);
  });
}

int amoe_export_loads(const amoe_config* cfg, const char* out_dir) {
  if (!cfg || !out_dir) {
    g_last_error = "amoe_export_loads: NULL argument";
    return AMOE_ERR_VALIDATION;
  }
  return guarded([&] { amoe::run_export_loads(cfg->cfg, out_dir); });
}

}  // extern "C"
