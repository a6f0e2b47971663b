// Command-line front end; talks to the library through the C API only.
#include <CLI11.hpp>

#include <cstdio>
#include <string>
#include <vector>

#include "dlrt/dlrt.h"

namespace {

struct Flags {
  std::string config;
  std::vector<std::pair<std::string, std::string>> overrides;
};

// Registers the shared flag surface on a subcommand; values are forwarded to
// the config as string overrides so the library owns all parsing/validation.
void add_common_flags(CLI::App* cmd, Flags& flags) {
  cmd->add_option("--config", flags.config, "JSON config file");
  auto forward = [&flags](const std::string& key) {
    return [&flags, key](const std::string& v) {
      flags.overrides.emplace_back(key, v);
    };
  };
  cmd->add_option_function<std::string>("--seed", forward("seed"), "RNG seed");
  cmd->add_option_function<std::string>("--out-dir", forward("out_dir"),
                                        "output directory");
  cmd->add_option_function<std::string>("--optimizer", forward("optimizer"),
                                        "hb | adam | lr-hb | lr-adam | "
                                        "lr-adam-naive | lora-adam");
  cmd->add_option_function<std::string>("--lr", forward("lambda"),
                                        "learning rate");
  cmd->add_option_function<std::string>("--gamma", forward("gamma"),
                                        "momentum decay");
  cmd->add_option_function<std::string>("--beta1", forward("beta1"),
                                        "Adam first-moment decay");
  cmd->add_option_function<std::string>("--beta2", forward("beta2"),
                                        "Adam second-moment decay");
  cmd->add_option_function<std::string>("--eps", forward("eps"),
                                        "Adam epsilon");
  cmd->add_option_function<std::string>("--tau", forward("tau"),
                                        "relative truncation tolerance");
  cmd->add_option_function<std::string>("--init-rank", forward("init_rank"),
                                        "initial factor rank");
  cmd->add_option_function<std::string>("--max-steps", forward("max_steps"),
                                        "number of optimizer steps");
}

int exit_code(dlrt_status st) {
  switch (st) {
    case DLRT_OK:
      return 0;
    case DLRT_ERR_CONFIG:
      return 2;
    case DLRT_ERR_VERIFY:
      return 4;
    default:
      return 3;  // numeric, I/O and other runtime failures
  }
}

int fail(dlrt_status st) {
  std::fprintf(stderr, "error: %s\n", dlrt_last_error());
  return exit_code(st);
}

struct ConfigHandle {
  dlrt_config* ptr = dlrt_config_create();
  ~ConfigHandle() { dlrt_config_destroy(ptr); }
};

int build_config(const Flags& flags, dlrt_config* cfg) {
  if (!flags.config.empty()) {
    dlrt_status st = dlrt_config_load_file(cfg, flags.config.c_str());
    if (st != DLRT_OK) return fail(st);
  }
  for (const auto& [key, value] : flags.overrides) {
    dlrt_status st = dlrt_config_set(cfg, key.c_str(), value.c_str());
    if (st != DLRT_OK) return fail(st);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"momentum-based dynamical low-rank training"};
  app.require_subcommand(1);

  Flags train_flags, flow_flags, compare_flags;
  CLI::App* train = app.add_subcommand("train", "run one training experiment");
  add_common_flags(train, train_flags);
  CLI::App* flow = app.add_subcommand("flow", "run the gradient-flow studies");
  add_common_flags(flow, flow_flags);
  CLI::App* verify =
      app.add_subcommand("verify", "run the property suite");
  CLI::App* compare = app.add_subcommand(
      "compare", "run several optimizers on one task and join the metrics");
  add_common_flags(compare, compare_flags);
  std::string optimizers = "lr-adam,lr-adam-naive";
  compare->add_option("--optimizers", optimizers,
                      "comma-separated optimizer list");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // bad flags are config errors
  }

  if (train->parsed()) {
    ConfigHandle cfg;
    if (int rc = build_config(train_flags, cfg.ptr)) return rc;
    dlrt_metrics m{};
    dlrt_status st = dlrt_train(cfg.ptr, &m);
    if (st != DLRT_OK) return fail(st);
    std::printf(
        "final step %ld: loss %.6g, val %.6g, params %ld, "
        "compression %.2f%%, max rank %d\n",
        m.step, m.loss, m.val_metric, m.total_params, m.compression_ratio,
        m.max_rank);
    return 0;
  }

  if (flow->parsed()) {
    ConfigHandle cfg;
    if (int rc = build_config(flow_flags, cfg.ptr)) return rc;
    char summary[4096];
    dlrt_status st = dlrt_flow_study(cfg.ptr, summary, sizeof summary);
    if (st != DLRT_OK) return fail(st);
    std::fputs(summary, stdout);
    return 0;
  }

  if (verify->parsed()) {
    char report[8192];
    dlrt_status st = dlrt_verify(report, sizeof report);
    std::fputs(report, stdout);
    if (st != DLRT_OK) return fail(st);
    return 0;
  }

  if (compare->parsed()) {
    ConfigHandle cfg;
    if (int rc = build_config(compare_flags, cfg.ptr)) return rc;
    dlrt_status st = dlrt_compare(cfg.ptr, optimizers.c_str());
    if (st != DLRT_OK) return fail(st);
    std::printf("wrote compare.csv\n");
    return 0;
  }
  return 2;
}
