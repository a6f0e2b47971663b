#include "dlrt/dlrt.h"

#include <algorithm>
#include <cstring>
#include <sstream>
#include <string>
#include <vector>

#include "harness.hpp"

namespace {

thread_local std::string g_last_error;

void copy_out(const std::string& s, char* buf, size_t len) {
  if (!buf || len == 0) return;
  const size_t n = std::min(len - 1, s.size());
  std::memcpy(buf, s.data(), n);
  buf[n] = '\0';
}

dlrt_status set_error(dlrt_status st, const std::string& msg) {
  g_last_error = msg;
  return st;
}

template <typename Fn>
dlrt_status guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const dlrt::ConfigError& e) {
    return set_error(DLRT_ERR_CONFIG, e.what());
  } catch (const dlrt::NumericError& e) {
    return set_error(DLRT_ERR_NUMERIC, e.what());
  } catch (const dlrt::ShapeError& e) {
    return set_error(DLRT_ERR_NUMERIC, e.what());
  } catch (const dlrt::IoError& e) {
    return set_error(DLRT_ERR_IO, e.what());
  } catch (const std::exception& e) {
    return set_error(DLRT_ERR_UNKNOWN, e.what());
  } catch (...) {
    return set_error(DLRT_ERR_UNKNOWN, "unknown failure");
  }
}

void fill_metrics(const dlrt::MetricsRow& row, dlrt_metrics* out) {
  if (!out) return;
  out->step = row.step;
  out->loss = row.loss;
  out->val_metric = row.val_metric;
  out->total_params = row.total_params;
  out->compression_ratio = row.compression_ratio;
  out->max_rank = row.ranks.empty()
                      ? 0
                      : *std::max_element(row.ranks.begin(), row.ranks.end());
}

}  // namespace

struct dlrt_config {
  dlrt::ExperimentConfig cfg;
};

extern "C" {

const char* dlrt_version(void) { return "1.0.0"; }

const char* dlrt_last_error(void) { return g_last_error.c_str(); }

dlrt_config* dlrt_config_create(void) {
  try {
    return new dlrt_config();
  } catch (...) {
    return nullptr;
  }
}

void dlrt_config_destroy(dlrt_config* cfg) { delete cfg; }

dlrt_status dlrt_config_load_file(dlrt_config* cfg, const char* path) {
  if (!cfg || !path) return set_error(DLRT_ERR_CONFIG, "null argument");
  return guarded([&] {
    cfg->cfg = dlrt::ExperimentConfig::from_json_file(path);
    return DLRT_OK;
  });
}

dlrt_status dlrt_config_set(dlrt_config* cfg, const char* key,
                            const char* value) {
  if (!cfg || !key || !value)
    return set_error(DLRT_ERR_CONFIG, "null argument");
  return guarded([&] {
    cfg->cfg.set_field(key, value);
    return DLRT_OK;
  });
}

dlrt_status dlrt_train(const dlrt_config* cfg, dlrt_metrics* out) {
  if (!cfg) return set_error(DLRT_ERR_CONFIG, "null config");
  return guarded([&] {
    fill_metrics(dlrt::run_experiment(cfg->cfg), out);
    return DLRT_OK;
  });
}

dlrt_status dlrt_compare(const dlrt_config* cfg, const char* optimizers_csv) {
  if (!cfg || !optimizers_csv)
    return set_error(DLRT_ERR_CONFIG, "null argument");
  return guarded([&] {
    std::vector<std::string> opts;
    std::stringstream ss(optimizers_csv);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) opts.push_back(item);
    dlrt::run_compare(cfg->cfg, opts);
    return DLRT_OK;
  });
}

dlrt_status dlrt_flow_study(const dlrt_config* cfg, char* summary,
                            size_t summary_len) {
  if (!cfg) return set_error(DLRT_ERR_CONFIG, "null config");
  return guarded([&] {
    copy_out(dlrt::run_flow_study(cfg->cfg), summary, summary_len);
    return DLRT_OK;
  });
}

dlrt_status dlrt_verify(char* report, size_t report_len) {
  return guarded([&]() -> dlrt_status {
    dlrt::VerifyReport rep = dlrt::run_verification();
    copy_out(rep.to_string(), report, report_len);
    if (!rep.ok())
      return set_error(DLRT_ERR_VERIFY, "verification suite failed");
    return DLRT_OK;
  });
}

dlrt_status dlrt_compression_ratio(long lr_params, long baseline_params,
                                   double* out) {
  if (!out) return set_error(DLRT_ERR_CONFIG, "null output pointer");
  return guarded([&] {
    *out = dlrt::compression_ratio(lr_params, baseline_params);
    return DLRT_OK;
  });
}

}  // extern "C"
