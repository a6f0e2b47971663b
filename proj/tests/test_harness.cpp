#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "harness.hpp"

using namespace dlrt;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("dlrt_test_" + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

ExperimentConfig small_recovery(const std::string& out_dir) {
  ExperimentConfig cfg;
  cfg.task = "matrix-recovery";
  cfg.optimizer = "lr-adam";
  cfg.n = 12;
  cfg.true_rank = 3;
  cfg.init_rank = 6;
  cfg.max_steps = 10;
  cfg.lambda = 0.05;
  cfg.seed = 5;
  cfg.out_dir = out_dir;
  return cfg;
}

// Returns matrices of every layer, densified, for bitwise comparison.
std::vector<Matrix> weights_of(const Network& net) {
  std::vector<Matrix> out;
  for (const auto& l : net.layers) out.push_back(l.dense_weight());
  return out;
}

}  // namespace

TEST_CASE("config parsing and validation") {
  ExperimentConfig cfg;
  cfg.set_field("lr", "0.25");
  CHECK(cfg.lambda == 0.25);
  cfg.set_field("lambda", "0.5");
  CHECK(cfg.lambda == 0.5);
  cfg.set_field("max_steps", "42");
  CHECK(cfg.max_steps == 42);

  CHECK_THROWS_AS(cfg.set_field("no_such_field", "1"), ConfigError);
  CHECK_THROWS_AS(cfg.set_field("lambda", "not-a-number"), ConfigError);

  // validate() names the offending field.
  ExperimentConfig bad;
  bad.lambda = -1.0;
  try {
    bad.validate();
    CHECK(false);
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("lambda") != std::string::npos);
  }
  ExperimentConfig bad2;
  bad2.optimizer = "sgd";
  try {
    bad2.validate();
    CHECK(false);
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("optimizer") != std::string::npos);
  }
  ExperimentConfig bad3;
  bad3.tau = -0.1;
  CHECK_THROWS_AS(bad3.validate(), ConfigError);
  ExperimentConfig bad4;
  bad4.gamma = 1.5;
  CHECK_THROWS_AS(bad4.validate(), ConfigError);
}

TEST_CASE("config files round-trip through JSON") {
  TempDir tmp("config");
  fs::path file = tmp.path / "cfg.json";
  {
    std::ofstream out(file);
    out << R"({"task":"matrix-recovery","optimizer":"lr-hb","lr":0.125,)"
        << R"("max_steps":7,"seed":9})";
  }
  ExperimentConfig cfg = ExperimentConfig::from_json_file(file.string());
  CHECK(cfg.optimizer == "lr-hb");
  CHECK(cfg.lambda == 0.125);
  CHECK(cfg.max_steps == 7);
  CHECK(cfg.seed == 9);

  {
    std::ofstream out(file);
    out << R"({"unknown_key": 1})";
  }
  CHECK_THROWS_AS(ExperimentConfig::from_json_file(file.string()), ConfigError);
  {
    std::ofstream out(file);
    out << "{not json";
  }
  CHECK_THROWS_AS(ExperimentConfig::from_json_file(file.string()), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json_file("/nonexistent/cfg.json"),
                  ConfigError);
}

TEST_CASE("compression_ratio") {
  CHECK(compression_ratio(1025, 10000) == doctest::Approx(89.75));
  CHECK(compression_ratio(500, 500) == 0.0);
  CHECK(compression_ratio(600, 500) < 0.0);  // unclamped below zero
  CHECK_THROWS_AS(compression_ratio(1, 0), ConfigError);
}

TEST_CASE("zero steps produce the header and an initial checkpoint") {
  TempDir tmp("zero");
  ExperimentConfig cfg = small_recovery(tmp.str());
  cfg.max_steps = 0;
  RunResult r = run_experiment_trace(cfg);
  CHECK(r.rows.empty());
  CHECK(slurp(tmp.path / "metrics.csv") ==
        "step,loss,val_metric,ranks,total_params,compression_ratio\n");
  LoadedCheckpoint ck = load_checkpoint((tmp.path / "checkpoint.json").string());
  CHECK(ck.net.layers.size() == r.net.layers.size());
  auto a = weights_of(ck.net), b = weights_of(r.net);
  for (size_t i = 0; i < a.size(); ++i) CHECK((a[i] - b[i]).norm() == 0.0);
}

TEST_CASE("identical seeds give byte-identical metrics") {
  TempDir t1("det1"), t2("det2");
  ExperimentConfig c1 = small_recovery(t1.str());
  ExperimentConfig c2 = small_recovery(t2.str());
  run_experiment(c1);
  run_experiment(c2);
  std::string m1 = slurp(t1.path / "metrics.csv");
  std::string m2 = slurp(t2.path / "metrics.csv");
  CHECK(m1 == m2);
  CHECK(m1.find("step,loss") == 0);
  CHECK(slurp(t1.path / "checkpoint.bin") == slurp(t2.path / "checkpoint.bin"));

  TempDir t3("det3");
  ExperimentConfig c3 = small_recovery(t3.str());
  c3.seed = 6;
  run_experiment(c3);
  CHECK(slurp(t3.path / "metrics.csv") != m1);
}

TEST_CASE("the thread count does not change the results") {
  TempDir t1("thr1"), t2("thr2");
  ExperimentConfig cfg;
  cfg.task = "two-class";
  cfg.optimizer = "lr-adam";
  cfg.n_samples = 40;
  cfg.dim = 10;
  cfg.init_rank = 4;
  cfg.max_steps = 8;
  cfg.seed = 3;

  setenv("DLRT_THREADS", "1", 1);
  cfg.out_dir = t1.str();
  run_experiment(cfg);
  setenv("DLRT_THREADS", "4", 1);
  cfg.out_dir = t2.str();
  run_experiment(cfg);
  unsetenv("DLRT_THREADS");
  CHECK(slurp(t1.path / "metrics.csv") == slurp(t2.path / "metrics.csv"));
  CHECK(slurp(t1.path / "checkpoint.bin") == slurp(t2.path / "checkpoint.bin"));
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  TempDir tmp("roundtrip");
  ExperimentConfig cfg = small_recovery(tmp.str());
  RunResult r = run_experiment_trace(cfg);

  LoadedCheckpoint ck = load_checkpoint(tmp.str());  // directory form
  CHECK(ck.optimizer == "lr-adam");
  CHECK(ck.warnings.empty());
  auto a = weights_of(ck.net), b = weights_of(r.net);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK((a[i] - b[i]).norm() == 0.0);

  // Saving the loaded state reproduces the blob byte for byte.
  TempDir tmp2("roundtrip2");
  save_checkpoint(ck.net, ck.states, ck.optimizer, tmp2.str());
  CHECK(slurp(tmp.path / "checkpoint.bin") ==
        slurp(tmp2.path / "checkpoint.bin"));
}

TEST_CASE("checkpoint integrity validation") {
  TempDir tmp("integrity");
  ExperimentConfig cfg = small_recovery(tmp.str());
  run_experiment(cfg);
  fs::path bin = tmp.path / "checkpoint.bin";
  const std::string original = slurp(bin);

  auto patch_first_u_entry = [&](double delta) {
    // The first layer's U array starts at offset 0 in the blob.
    std::string blob = original;
    double v;
    std::memcpy(&v, blob.data(), sizeof v);
    v += delta;
    std::memcpy(blob.data(), &v, sizeof v);
    std::ofstream out(bin, std::ios::binary | std::ios::trunc);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  };

  patch_first_u_entry(1e-6);  // mild defect: repaired with a warning
  LoadedCheckpoint warned = load_checkpoint(tmp.str());
  CHECK(!warned.warnings.empty());
  for (const auto& l : warned.net.layers) {
    if (l.kind != Layer::Kind::LowRank) continue;
    CHECK((l.f.U.transpose() * l.f.U -
           Matrix::Identity(l.f.r, l.f.r)).norm() <= 1e-10);
  }

  patch_first_u_entry(0.1);  // gross defect: rejected
  CHECK_THROWS_AS(load_checkpoint(tmp.str()), IntegrityError);

  {  // truncated blob: rejected before any parsing of the payload
    std::ofstream out(bin, std::ios::binary | std::ios::trunc);
    out.write(original.data(),
              static_cast<std::streamsize>(original.size() / 2));
  }
  CHECK_THROWS_AS(load_checkpoint(tmp.str()), IntegrityError);

  CHECK_THROWS_AS(load_checkpoint("/nonexistent/checkpoint.json"), IoError);
}

TEST_CASE("training can resume from a checkpoint") {
  TempDir t1("resume1"), t2("resume2"), t3("resume3");
  ExperimentConfig cfg = small_recovery(t1.str());
  run_experiment(cfg);

  ExperimentConfig resume = cfg;
  resume.task = "custom-checkpoint";
  resume.checkpoint_path = (t1.path / "checkpoint.json").string();
  resume.out_dir = t2.str();
  RunResult continued = run_experiment_trace(resume);

  // 10 + 10 resumed steps reproduce one straight 20-step run exactly.
  ExperimentConfig straight = cfg;
  straight.max_steps = 20;
  straight.out_dir = t3.str();
  RunResult full = run_experiment_trace(straight);
  REQUIRE(continued.rows.size() == 10);
  REQUIRE(full.rows.size() == 20);
  for (size_t i = 0; i < 10; ++i)
    CHECK(continued.rows[i].loss == full.rows[i + 10].loss);
  auto a = weights_of(continued.net), b = weights_of(full.net);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK((a[i] - b[i]).norm() == 0.0);

  // Mismatched optimizer is a config error.
  ExperimentConfig wrong = resume;
  wrong.optimizer = "lr-hb";
  CHECK_THROWS_AS(run_experiment(wrong), ConfigError);
}

TEST_CASE("metrics report ranks, parameter counts and compression") {
  TempDir tmp("metrics");
  ExperimentConfig cfg = small_recovery(tmp.str());
  cfg.r_min = 2;
  RunResult r = run_experiment_trace(cfg);
  REQUIRE(!r.rows.empty());
  const MetricsRow& row = r.final_row;
  REQUIRE(row.ranks.size() == r.net.layers.size());
  for (size_t i = 0; i < r.net.layers.size(); ++i) {
    const auto& l = r.net.layers[i];
    if (l.kind == Layer::Kind::LowRank) {
      CHECK(row.ranks[i] == l.f.r);
      CHECK(l.f.r >= cfg.r_min);
      CHECK(l.f.r <= std::min(l.n_out(), l.n_in()));
    }
  }
  CHECK(row.total_params == count_params(r.net));
  long expected = 0;
  for (const auto& l : r.net.layers)
    expected += l.kind == Layer::Kind::LowRank
                    ? static_cast<long>(l.n_out() + l.n_in()) * l.f.r +
                          static_cast<long>(l.f.r) * l.f.r
                    : static_cast<long>(l.n_out()) * l.n_in();
  CHECK(row.total_params == expected);
  CHECK(row.compression_ratio ==
        doctest::Approx(compression_ratio(expected, count_dense_params(r.net))));
}

TEST_CASE("run_compare joins the per-optimizer traces") {
  TempDir tmp("compare");
  ExperimentConfig cfg = small_recovery(tmp.str());
  cfg.max_steps = 5;
  auto rows = run_compare(cfg, {"lr-adam", "lr-adam-naive"});
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].first == "lr-adam");
  CHECK(rows[1].first == "lr-adam-naive");
  std::string joined = slurp(tmp.path / "compare.csv");
  CHECK(joined.find("loss_lr-adam") != std::string::npos);
  CHECK(joined.find("loss_lr-adam-naive") != std::string::npos);
  CHECK(fs::exists(tmp.path / "lr-adam" / "metrics.csv"));
  CHECK(fs::exists(tmp.path / "lr-adam-naive" / "metrics.csv"));
}

TEST_CASE("run_flow_study writes the study CSVs") {
  TempDir tmp("flow");
  ExperimentConfig cfg;
  cfg.out_dir = tmp.str();
  std::string summary = run_flow_study(cfg);
  CHECK(fs::exists(tmp.path / "energy.csv"));
  CHECK(fs::exists(tmp.path / "scaling.csv"));
  CHECK(slurp(tmp.path / "energy.csv").find("t,energy,momentum_sq,residual") ==
        0);
  CHECK(summary.find("stiffness") != std::string::npos);
}

TEST_CASE("run_verification passes every item") {
  VerifyReport rep = run_verification();
  for (const auto& item : rep.items) {
    INFO(item.name, ": ", item.detail);
    CHECK(item.ok);
  }
  CHECK(rep.ok());
  CHECK(rep.items.size() == 5);
  CHECK(rep.to_string().find("[PASS]") != std::string::npos);
}
