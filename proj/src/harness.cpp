#include "harness.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <chrono>
#include <climits>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace dlrt {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian");

namespace {

const std::set<std::string> kTasks = {"matrix-recovery", "two-class",
                                      "custom-checkpoint"};
const std::set<std::string> kOptimizers = {"hb",      "adam",
                                           "lr-hb",   "lr-adam",
                                           "lr-adam-naive", "lora-adam"};

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config field '" + key + "': expected a number, got '" +
                      v + "'");
  }
}

long parse_long(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    long l = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return l;
  } catch (const std::exception&) {
    throw ConfigError("config field '" + key + "': expected an integer, got '" +
                      v + "'");
  }
}

int thread_cap() {
  const char* e = std::getenv("DLRT_THREADS");
  if (!e || !*e) return 1;
  char* end = nullptr;
  long v = std::strtol(e, &end, 10);
  if (!end || *end || v < 1) return 1;
  return static_cast<int>(std::min<long>(v, 64));
}

bool is_full_rank_opt(const std::string& o) { return o == "hb" || o == "adam"; }

struct TaskData {
  LossKind loss;
  Batch train, val;
  bool classification = false;
};

TaskData build_task(const ExperimentConfig& cfg) {
  TaskData t;
  if (cfg.task == "two-class") {
    Batch all = gen_two_class(cfg.n_samples, cfg.dim, cfg.seed);
    const int ntr = (cfg.n_samples * 4) / 5;  // deterministic 80/20 split
    t.train.inputs = all.inputs.topRows(ntr);
    t.train.labels.assign(all.labels.begin(), all.labels.begin() + ntr);
    t.val.inputs = all.inputs.bottomRows(cfg.n_samples - ntr);
    t.val.labels.assign(all.labels.begin() + ntr, all.labels.end());
    t.loss.tag = LossTag::SoftmaxCrossEntropy;
    t.classification = true;
  } else {
    t.loss = gen_matrix_recovery(cfg.n, cfg.true_rank, cfg.noise, cfg.seed);
  }
  return t;
}

Network build_network(const ExperimentConfig& cfg) {
  Rng rng(cfg.seed + 1);
  auto make_layer = [&](int nout, int nin, Activation act) -> Layer {
    Matrix w0 = cfg.init_scale * rng.gaussian(nout, nin) /
                std::sqrt(static_cast<double>(nin));
    if (is_full_rank_opt(cfg.optimizer)) return Layer::dense(w0, act);
    const int r = std::min({cfg.init_rank, nout, nin});
    return Layer::low_rank(truncated_svd(w0, r), act);
  };
  Network net;
  if (cfg.task == "two-class") {
    net.layers.push_back(make_layer(cfg.dim, cfg.dim, Activation::Tanh));
    net.layers.push_back(make_layer(2, cfg.dim, Activation::Identity));
  } else {
    net.layers.push_back(make_layer(cfg.n, cfg.n, Activation::Identity));
  }
  return net;
}

LayerState init_state(const ExperimentConfig& cfg, const Layer& l) {
  if (cfg.optimizer == "hb")
    return FullHbLayerState{Matrix::Zero(l.W.rows(), l.W.cols())};
  if (cfg.optimizer == "adam")
    return FullAdamLayerState{Matrix::Zero(l.W.rows(), l.W.cols()),
                              Matrix::Zero(l.W.rows(), l.W.cols()), 0};
  if (cfg.optimizer == "lr-hb") {
    HeavyBallState st;
    st.S_V = Matrix::Zero(l.f.r, l.f.r);
    st.gamma = cfg.gamma;
    st.lambda = cfg.lambda;
    return st;
  }
  if (cfg.optimizer == "lr-adam" || cfg.optimizer == "lr-adam-naive") {
    AdamState st;
    st.S_V = Matrix::Zero(l.f.r, l.f.r);
    st.S_K = Matrix::Zero(l.f.r, l.f.r);
    return st;
  }
  LoraStates st;  // lora-adam
  st.u.S_V = Matrix::Zero(l.f.U.rows(), l.f.U.cols());
  st.u.S_K = st.u.S_V;
  st.s.S_V = Matrix::Zero(l.f.S.rows(), l.f.S.cols());
  st.s.S_K = st.s.S_V;
  st.v.S_V = Matrix::Zero(l.f.V.rows(), l.f.V.cols());
  st.v.S_K = st.v.S_V;
  return st;
}

// Gradient provider for one layer: every evaluation sees the start-of-step
// snapshot of all other layers.
class LayerOracle : public GradientOracle {
 public:
  LayerOracle(const Network& snapshot, int idx, const Batch& batch,
              const LossKind& loss)
      : snapshot_(snapshot), idx_(idx), batch_(batch), loss_(loss) {}

  std::pair<double, Matrix> grad_w(const Matrix& w) override {
    Network tmp = snapshot_;
    tmp.layers[static_cast<size_t>(idx_)] =
        Layer::dense(w, snapshot_.layers[static_cast<size_t>(idx_)].act);
    auto [value, grads] = backward(tmp, batch_, loss_);
    return {value, grads[static_cast<size_t>(idx_)]};
  }

 private:
  const Network& snapshot_;
  int idx_;
  const Batch& batch_;
  const LossKind& loss_;
};

std::pair<Layer, LayerState> step_layer(const Network& snapshot, int idx,
                                        const TaskData& task,
                                        const Batch& batch,
                                        const ExperimentConfig& cfg,
                                        const LayerState& state,
                                        double lam_t) {
  LayerOracle oracle(snapshot, idx, batch, task.loss);
  const Layer& layer = snapshot.layers[static_cast<size_t>(idx)];
  TruncationPolicy policy;
  policy.tau = cfg.tau;
  policy.r_min = cfg.r_min;
  policy.r_max = cfg.r_max > 0 ? cfg.r_max : INT_MAX;

  if (const auto* hb = std::get_if<FullHbLayerState>(&state)) {
    FullState fs;
    fs.W = layer.W;
    fs.V = hb->V;
    fs.gamma = cfg.gamma;
    fs.lambda = lam_t;
    auto [ns, value] = hb_full_step(fs, oracle);
    (void)value;
    return {Layer::dense(ns.W, layer.act), FullHbLayerState{ns.V}};
  }
  if (const auto* ad = std::get_if<FullAdamLayerState>(&state)) {
    FullState fs;
    fs.W = layer.W;
    fs.V = ad->V;
    fs.K = ad->K;
    fs.n = ad->n;
    fs.beta1 = cfg.beta1;
    fs.beta2 = cfg.beta2;
    fs.eps = cfg.eps;
    fs.lambda = lam_t;
    fs.weight_decay = cfg.weight_decay;
    auto [ns, value] = adam_full_step(fs, oracle);
    (void)value;
    return {Layer::dense(ns.W, layer.act), FullAdamLayerState{ns.V, ns.K, ns.n}};
  }
  if (const auto* hb = std::get_if<HeavyBallState>(&state)) {
    HeavyBallState st = *hb;
    st.gamma = cfg.gamma;
    st.lambda = lam_t;
    auto [f1, st1, value] = lr_hb_step(layer.f, st, oracle, policy);
    (void)value;
    return {Layer::low_rank(f1, layer.act), st1};
  }
  if (const auto* ad = std::get_if<AdamState>(&state)) {
    AdamState st = *ad;
    st.beta1 = cfg.beta1;
    st.beta2 = cfg.beta2;
    st.eps = cfg.eps;
    st.lambda = lam_t;
    st.weight_decay = cfg.weight_decay;
    auto [f1, st1, value] =
        cfg.optimizer == "lr-adam-naive"
            ? lr_adam_naive_step(layer.f, st, oracle, policy)
            : lr_adam_step(layer.f, st, oracle, policy);
    (void)value;
    return {Layer::low_rank(f1, layer.act), st1};
  }
  if (const auto* lo = std::get_if<LoraStates>(&state)) {
    LoraStates st = *lo;
    for (AdamState* a : {&st.u, &st.s, &st.v}) {
      a->beta1 = cfg.beta1;
      a->beta2 = cfg.beta2;
      a->eps = cfg.eps;
      a->lambda = lam_t;
      a->weight_decay = cfg.weight_decay;
    }
    auto [f1, st1, value] = lora_adam_step(layer.f, st, oracle);
    (void)value;
    return {Layer::low_rank(f1, layer.act), st1};
  }
  throw ConfigError("uninitialized optimizer state");
}

double accuracy(const Network& net, const Batch& b) {
  if (b.inputs.rows() == 0) return 0.0;
  Matrix out = forward(net, b.inputs);
  long hits = 0;
  for (int i = 0; i < out.rows(); ++i) {
    int best = 0;
    for (int c = 1; c < out.cols(); ++c)
      if (out(i, c) > out(i, best)) best = c;
    if (best == b.labels[static_cast<size_t>(i)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(out.rows());
}

Batch make_step_batch(const TaskData& t, long step, long batch_size) {
  const long ntr = t.train.inputs.rows();
  if (!t.classification || batch_size <= 0 || batch_size >= ntr)
    return t.train;
  Batch b;
  b.inputs = Matrix(batch_size, t.train.inputs.cols());
  b.labels.resize(static_cast<size_t>(batch_size));
  const long start = ((step - 1) * batch_size) % ntr;  // deterministic cycle
  for (long i = 0; i < batch_size; ++i) {
    const long src = (start + i) % ntr;
    b.inputs.row(i) = t.train.inputs.row(src);
    b.labels[static_cast<size_t>(i)] = t.train.labels[static_cast<size_t>(src)];
  }
  return b;
}

MetricsRow make_row(long step, double loss_value, double val_metric,
                    const Network& net, double wall_ms) {
  MetricsRow row;
  row.step = step;
  row.loss = loss_value;
  row.val_metric = val_metric;
  for (const auto& l : net.layers)
    row.ranks.push_back(l.kind == Layer::Kind::LowRank
                            ? l.f.r
                            : std::min(l.n_out(), l.n_in()));
  row.total_params = count_params(net);
  row.compression_ratio =
      compression_ratio(row.total_params, count_dense_params(net));
  row.wall_ms = wall_ms;
  return row;
}

void write_row(std::ofstream& csv, const MetricsRow& row) {
  csv << row.step << ',' << fmt_g(row.loss) << ',' << fmt_g(row.val_metric)
      << ',';
  for (size_t i = 0; i < row.ranks.size(); ++i) {
    if (i) csv << ';';
    csv << row.ranks[i];
  }
  csv << ',' << row.total_params << ',' << fmt_g(row.compression_ratio)
      << '\n';
  csv.flush();
}

double schedule_lr(const ExperimentConfig& cfg, long step) {
  if (cfg.lr_schedule == "linear" && cfg.max_steps > 0)
    return cfg.lambda * (1.0 - static_cast<double>(step - 1) /
                                   static_cast<double>(cfg.max_steps));
  return cfg.lambda;
}

double train_loss(const Network& net, const TaskData& t) {
  return eval_loss(net, t.train, t.loss);
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config file must be a JSON object");
  ExperimentConfig cfg;
  for (const auto& [key, value] : j.items()) {
    if (value.is_string())
      cfg.set_field(key, value.get<std::string>());
    else if (value.is_number_integer())
      cfg.set_field(key, std::to_string(value.get<long>()));
    else if (value.is_number())
      cfg.set_field(key, fmt_g(value.get<double>()));
    else
      throw ConfigError("config field '" + key +
                        "': unsupported value type");
  }
  return cfg;
}

void ExperimentConfig::set_field(const std::string& key,
                                 const std::string& value) {
  if (key == "task") task = value;
  else if (key == "optimizer") optimizer = value;
  else if (key == "lambda" || key == "lr") lambda = parse_double(key, value);
  else if (key == "gamma") gamma = parse_double(key, value);
  else if (key == "beta1") beta1 = parse_double(key, value);
  else if (key == "beta2") beta2 = parse_double(key, value);
  else if (key == "eps") eps = parse_double(key, value);
  else if (key == "weight_decay") weight_decay = parse_double(key, value);
  else if (key == "tau") tau = parse_double(key, value);
  else if (key == "init_rank") init_rank = static_cast<int>(parse_long(key, value));
  else if (key == "r_min") r_min = static_cast<int>(parse_long(key, value));
  else if (key == "r_max") r_max = static_cast<int>(parse_long(key, value));
  else if (key == "max_steps") max_steps = parse_long(key, value);
  else if (key == "batch_size") batch_size = parse_long(key, value);
  else if (key == "seed") seed = static_cast<std::uint64_t>(parse_long(key, value));
  else if (key == "out_dir") out_dir = value;
  else if (key == "n") n = static_cast<int>(parse_long(key, value));
  else if (key == "true_rank") true_rank = static_cast<int>(parse_long(key, value));
  else if (key == "noise") noise = parse_double(key, value);
  else if (key == "n_samples") n_samples = static_cast<int>(parse_long(key, value));
  else if (key == "dim") dim = static_cast<int>(parse_long(key, value));
  else if (key == "init_scale") init_scale = parse_double(key, value);
  else if (key == "lr_schedule") lr_schedule = value;
  else if (key == "checkpoint_path") checkpoint_path = value;
  else throw ConfigError("unknown config field: " + key);
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("config field '" + field + "': " + why);
  };
  if (!kTasks.count(task)) fail("task", "unknown task '" + task + "'");
  if (!kOptimizers.count(optimizer))
    fail("optimizer", "unknown optimizer '" + optimizer + "'");
  if (!(lambda > 0.0)) fail("lambda", "must be > 0");
  if (gamma < 0.0 || gamma > 1.0) fail("gamma", "must be in [0, 1]");
  if (beta1 < 0.0 || beta1 >= 1.0) fail("beta1", "must be in [0, 1)");
  if (beta2 < 0.0 || beta2 >= 1.0) fail("beta2", "must be in [0, 1)");
  if (!(eps > 0.0)) fail("eps", "must be > 0");
  if (weight_decay < 0.0) fail("weight_decay", "must be >= 0");
  if (tau < 0.0) fail("tau", "must be >= 0");
  if (init_rank < 1) fail("init_rank", "must be >= 1");
  if (r_min < 1) fail("r_min", "must be >= 1");
  if (r_max != 0 && r_max < r_min) fail("r_max", "must be 0 or >= r_min");
  if (max_steps < 0) fail("max_steps", "must be >= 0");
  if (batch_size < 0) fail("batch_size", "must be >= 0");
  if (n < 1) fail("n", "must be >= 1");
  if (true_rank < 1 || true_rank > n) fail("true_rank", "must be in [1, n]");
  if (noise < 0.0) fail("noise", "must be >= 0");
  if (n_samples < 2 || n_samples % 2 != 0)
    fail("n_samples", "must be positive and even");
  if (dim < 1) fail("dim", "must be >= 1");
  if (!(init_scale > 0.0)) fail("init_scale", "must be > 0");
  if (lr_schedule != "constant" && lr_schedule != "linear")
    fail("lr_schedule", "must be 'constant' or 'linear'");
  if (task == "custom-checkpoint" && checkpoint_path.empty())
    fail("checkpoint_path", "required for the custom-checkpoint task");
}

double compression_ratio(long lr_params, long baseline_params) {
  if (baseline_params <= 0)
    throw ConfigError("compression_ratio: baseline_params must be > 0");
  return (1.0 - static_cast<double>(lr_params) /
                    static_cast<double>(baseline_params)) *
         100.0;
}

long count_params(const Network& net) {
  long total = 0;
  for (const auto& l : net.layers) {
    if (l.kind == Layer::Kind::LowRank)
      total += static_cast<long>(l.n_out() + l.n_in()) * l.f.r +
               static_cast<long>(l.f.r) * l.f.r;
    else
      total += static_cast<long>(l.n_out()) * l.n_in();
  }
  return total;
}

long count_dense_params(const Network& net) {
  long total = 0;
  for (const auto& l : net.layers)
    total += static_cast<long>(l.n_out()) * l.n_in();
  return total;
}

RunResult run_experiment_trace(const ExperimentConfig& cfg) {
  cfg.validate();
  fs::create_directories(cfg.out_dir);

  TaskData task = build_task(cfg);
  RunResult res;
  if (cfg.task == "custom-checkpoint") {
    LoadedCheckpoint ck = load_checkpoint(cfg.checkpoint_path);
    if (ck.optimizer != cfg.optimizer)
      throw ConfigError("config field 'optimizer': checkpoint was written by '" +
                        ck.optimizer + "'");
    res.net = std::move(ck.net);
    res.states = std::move(ck.states);
  } else {
    res.net = build_network(cfg);
    for (const auto& l : res.net.layers)
      res.states.push_back(init_state(cfg, l));
  }

  std::ofstream csv(cfg.out_dir + "/metrics.csv",
                    std::ios::out | std::ios::trunc);
  if (!csv) throw IoError("cannot write metrics CSV in " + cfg.out_dir);
  csv << "step,loss,val_metric,ranks,total_params,compression_ratio\n";
  csv.flush();

  const int nlayers = static_cast<int>(res.net.layers.size());
  const int nthreads = std::min(thread_cap(), nlayers);

  for (long step = 1; step <= cfg.max_steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lam_t = schedule_lr(cfg, step);
    const Network snapshot = res.net;
    const Batch batch = make_step_batch(task, step, cfg.batch_size);

    std::vector<std::pair<Layer, LayerState>> updates(
        static_cast<size_t>(nlayers));
    if (nthreads <= 1) {
      for (int l = 0; l < nlayers; ++l)
        updates[static_cast<size_t>(l)] = step_layer(
            snapshot, l, task, batch, cfg, res.states[static_cast<size_t>(l)],
            lam_t);
    } else {
      std::vector<std::thread> pool;
      std::exception_ptr first_error;
      std::mutex err_mutex;
      for (int t = 0; t < nthreads; ++t) {
        pool.emplace_back([&, t] {
          try {
            for (int l = t; l < nlayers; l += nthreads)
              updates[static_cast<size_t>(l)] =
                  step_layer(snapshot, l, task, batch, cfg,
                             res.states[static_cast<size_t>(l)], lam_t);
          } catch (...) {
            std::lock_guard<std::mutex> lock(err_mutex);
            if (!first_error) first_error = std::current_exception();
          }
        });
      }
      for (auto& th : pool) th.join();
      if (first_error) std::rethrow_exception(first_error);
    }

    for (int l = 0; l < nlayers; ++l) {  // commit at the step barrier
      res.net.layers[static_cast<size_t>(l)] =
          std::move(updates[static_cast<size_t>(l)].first);
      res.states[static_cast<size_t>(l)] =
          std::move(updates[static_cast<size_t>(l)].second);
    }

    const double loss_now = train_loss(res.net, task);
    const double val = task.classification ? accuracy(res.net, task.val)
                                           : loss_now;
    const double wall_ms =
        std::chrono::duration<double, std::milli>(
            std::chrono::steady_clock::now() - t0)
            .count();
    res.rows.push_back(make_row(step, loss_now, val, res.net, wall_ms));
    write_row(csv, res.rows.back());
  }

  save_checkpoint(res.net, res.states, cfg.optimizer, cfg.out_dir);
  if (res.rows.empty()) {
    const double loss_now = train_loss(res.net, task);
    res.final_row = make_row(0, loss_now,
                             task.classification ? accuracy(res.net, task.val)
                                                 : loss_now,
                             res.net, 0.0);
  } else {
    res.final_row = res.rows.back();
  }
  return res;
}

MetricsRow run_experiment(const ExperimentConfig& cfg) {
  return run_experiment_trace(cfg).final_row;
}

// --- checkpoint persistence ------------------------------------------------

namespace {

struct NamedArray {
  std::string name;
  const Matrix* m;
};

std::vector<NamedArray> layer_arrays(const Layer& l, const LayerState& st) {
  std::vector<NamedArray> arrays;
  if (l.kind == Layer::Kind::Dense) {
    arrays.push_back({"W", &l.W});
  } else {
    arrays.push_back({"U", &l.f.U});
    arrays.push_back({"S", &l.f.S});
    arrays.push_back({"V", &l.f.V});
  }
  if (const auto* hb = std::get_if<HeavyBallState>(&st)) {
    arrays.push_back({"mom_S_V", &hb->S_V});
  } else if (const auto* ad = std::get_if<AdamState>(&st)) {
    arrays.push_back({"mom_S_V", &ad->S_V});
    arrays.push_back({"mom_S_K", &ad->S_K});
  } else if (const auto* fh = std::get_if<FullHbLayerState>(&st)) {
    arrays.push_back({"mom_V", &fh->V});
  } else if (const auto* fa = std::get_if<FullAdamLayerState>(&st)) {
    arrays.push_back({"mom_V", &fa->V});
    arrays.push_back({"mom_K", &fa->K});
  } else if (const auto* lo = std::get_if<LoraStates>(&st)) {
    arrays.push_back({"mom_U_S_V", &lo->u.S_V});
    arrays.push_back({"mom_U_S_K", &lo->u.S_K});
    arrays.push_back({"mom_S_S_V", &lo->s.S_V});
    arrays.push_back({"mom_S_S_K", &lo->s.S_K});
    arrays.push_back({"mom_V_S_V", &lo->v.S_V});
    arrays.push_back({"mom_V_S_K", &lo->v.S_K});
  }
  return arrays;
}

long state_counter(const LayerState& st) {
  if (const auto* ad = std::get_if<AdamState>(&st)) return ad->n;
  if (const auto* fa = std::get_if<FullAdamLayerState>(&st)) return fa->n;
  if (const auto* lo = std::get_if<LoraStates>(&st)) return lo->u.n;
  return 0;
}

std::string act_name(Activation a) {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::Relu: return "relu";
    case Activation::Tanh: return "tanh";
  }
  return "identity";
}

Activation act_from_name(const std::string& s) {
  if (s == "identity") return Activation::Identity;
  if (s == "relu") return Activation::Relu;
  if (s == "tanh") return Activation::Tanh;
  throw IntegrityError("checkpoint: unknown activation '" + s + "'");
}

}  // namespace

void save_checkpoint(const Network& net, const std::vector<LayerState>& states,
                     const std::string& optimizer, const std::string& dir) {
  if (states.size() != net.layers.size())
    throw ShapeError("save_checkpoint: one state per layer required");
  fs::create_directories(dir);

  std::string blob;
  json layers = json::array();
  for (size_t i = 0; i < net.layers.size(); ++i) {
    const Layer& l = net.layers[i];
    json jl;
    jl["kind"] = l.kind == Layer::Kind::Dense ? "dense" : "lowrank";
    jl["activation"] = act_name(l.act);
    jl["n_out"] = l.n_out();
    jl["n_in"] = l.n_in();
    jl["rank"] = l.kind == Layer::Kind::LowRank ? l.f.r
                                                : std::min(l.n_out(), l.n_in());
    jl["counter"] = state_counter(states[i]);
    json ja = json::array();
    for (const auto& a : layer_arrays(l, states[i])) {
      json e;
      e["name"] = a.name;
      e["rows"] = a.m->rows();
      e["cols"] = a.m->cols();
      e["byte_offset"] = blob.size();
      ja.push_back(e);
      const size_t off = blob.size();
      const size_t bytes = static_cast<size_t>(a.m->size()) * sizeof(double);
      blob.resize(off + bytes);
      std::memcpy(blob.data() + off, a.m->data(), bytes);
    }
    jl["arrays"] = ja;
    layers.push_back(jl);
  }

  json manifest;
  manifest["format"] = "dlrt-checkpoint";
  manifest["version"] = 1;
  manifest["optimizer"] = optimizer;
  manifest["blob"] = "checkpoint.bin";
  manifest["total_bytes"] = blob.size();
  manifest["layers"] = layers;

  {
    std::ofstream bin(dir + "/checkpoint.bin",
                      std::ios::out | std::ios::trunc | std::ios::binary);
    if (!bin) throw IoError("cannot write " + dir + "/checkpoint.bin");
    bin.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!bin) throw IoError("write failed: " + dir + "/checkpoint.bin");
  }
  std::ofstream mf(dir + "/checkpoint.json", std::ios::out | std::ios::trunc);
  if (!mf) throw IoError("cannot write " + dir + "/checkpoint.json");
  mf << manifest.dump(2) << '\n';
  if (!mf) throw IoError("write failed: " + dir + "/checkpoint.json");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  fs::path manifest_path(path);
  if (fs::is_directory(manifest_path)) manifest_path /= "checkpoint.json";
  std::ifstream mf(manifest_path);
  if (!mf) throw IoError("cannot open checkpoint manifest: " +
                         manifest_path.string());
  json manifest;
  try {
    mf >> manifest;
  } catch (const std::exception& e) {
    throw IntegrityError("checkpoint manifest parse error: " +
                         std::string(e.what()));
  }
  if (manifest.value("format", "") != "dlrt-checkpoint")
    throw IntegrityError("not a checkpoint manifest: " +
                         manifest_path.string());

  const fs::path blob_path =
      manifest_path.parent_path() / manifest.value("blob", "checkpoint.bin");
  std::ifstream bin(blob_path, std::ios::binary);
  if (!bin) throw IoError("cannot open checkpoint blob: " + blob_path.string());
  std::string blob((std::istreambuf_iterator<char>(bin)),
                   std::istreambuf_iterator<char>());
  if (blob.size() != manifest.value("total_bytes", size_t{0}))
    throw IntegrityError("checkpoint blob length mismatch: expected " +
                         std::to_string(manifest.value("total_bytes",
                                                       size_t{0})) +
                         " bytes, got " + std::to_string(blob.size()));

  auto read_matrix = [&](const json& e) -> Matrix {
    const long rows = e.at("rows").get<long>();
    const long cols = e.at("cols").get<long>();
    const size_t off = e.at("byte_offset").get<size_t>();
    const size_t bytes = static_cast<size_t>(rows * cols) * sizeof(double);
    if (rows < 0 || cols < 0 || off + bytes > blob.size())
      throw IntegrityError("checkpoint array out of bounds: " +
                           e.value("name", std::string("?")));
    Matrix m(rows, cols);
    std::memcpy(m.data(), blob.data() + off, bytes);
    return m;
  };

  LoadedCheckpoint out;
  out.optimizer = manifest.value("optimizer", "");
  for (const auto& jl : manifest.at("layers")) {
    std::map<std::string, Matrix> arrays;
    for (const auto& e : jl.at("arrays"))
      arrays[e.at("name").get<std::string>()] = read_matrix(e);
    const Activation act = act_from_name(jl.at("activation").get<std::string>());
    const long counter = jl.value("counter", 0L);

    Layer layer;
    if (jl.at("kind").get<std::string>() == "dense") {
      if (!arrays.count("W")) throw IntegrityError("checkpoint: missing W");
      layer = Layer::dense(arrays.at("W"), act);
    } else {
      for (const char* k : {"U", "S", "V"})
        if (!arrays.count(k))
          throw IntegrityError(std::string("checkpoint: missing ") + k);
      LowRankFactors f{arrays.at("U"), arrays.at("S"), arrays.at("V"),
                       static_cast<int>(arrays.at("S").rows())};
      for (Matrix* basis : {&f.U, &f.V}) {
        const int r = static_cast<int>(basis->cols());
        const double err =
            (basis->transpose() * *basis - Matrix::Identity(r, r)).norm();
        if (err > 1e-4)
          throw IntegrityError(
              "checkpoint: basis orthonormality defect " + fmt_g(err) +
              " exceeds 1e-4");
        if (err > 1e-8 * std::sqrt(static_cast<double>(r))) {
          out.warnings.push_back("re-orthonormalized a basis with defect " +
                                 fmt_g(err));
          *basis = orthonormalize(*basis);
        }
      }
      layer = Layer::low_rank(f, act);
    }
    out.net.layers.push_back(layer);

    LayerState st = std::monostate{};
    auto take = [&](const char* name) -> Matrix {
      auto it = arrays.find(name);
      if (it == arrays.end())
        throw IntegrityError(std::string("checkpoint: missing ") + name);
      return it->second;
    };
    if (out.optimizer == "hb") {
      st = FullHbLayerState{take("mom_V")};
    } else if (out.optimizer == "adam") {
      st = FullAdamLayerState{take("mom_V"), take("mom_K"), counter};
    } else if (out.optimizer == "lr-hb") {
      HeavyBallState s;
      s.S_V = take("mom_S_V");
      st = s;
    } else if (out.optimizer == "lr-adam" || out.optimizer == "lr-adam-naive") {
      AdamState s;
      s.S_V = take("mom_S_V");
      s.S_K = take("mom_S_K");
      s.n = counter;
      st = s;
    } else if (out.optimizer == "lora-adam") {
      LoraStates s;
      s.u.S_V = take("mom_U_S_V");
      s.u.S_K = take("mom_U_S_K");
      s.s.S_V = take("mom_S_S_V");
      s.s.S_K = take("mom_S_S_K");
      s.v.S_V = take("mom_V_S_V");
      s.v.S_K = take("mom_V_S_K");
      s.u.n = s.s.n = s.v.n = counter;
      st = s;
    }
    out.states.push_back(std::move(st));
  }
  return out;
}

// --- compare / flow study / verification ------------------------------------

std::vector<std::pair<std::string, MetricsRow>> run_compare(
    const ExperimentConfig& cfg, const std::vector<std::string>& optimizers) {
  if (optimizers.empty())
    throw ConfigError("compare: need at least one optimizer");
  fs::create_directories(cfg.out_dir);
  std::vector<std::pair<std::string, RunResult>> results;
  for (const auto& opt : optimizers) {
    ExperimentConfig sub = cfg;
    sub.optimizer = opt;
    sub.out_dir = cfg.out_dir + "/" + opt;
    results.emplace_back(opt, run_experiment_trace(sub));
  }

  std::ofstream csv(cfg.out_dir + "/compare.csv",
                    std::ios::out | std::ios::trunc);
  if (!csv) throw IoError("cannot write compare CSV in " + cfg.out_dir);
  csv << "step";
  for (const auto& [opt, res] : results) csv << ",loss_" << opt;
  csv << '\n';
  for (long i = 0; i < cfg.max_steps; ++i) {
    csv << (i + 1);
    for (const auto& [opt, res] : results)
      csv << ',' << fmt_g(res.rows[static_cast<size_t>(i)].loss);
    csv << '\n';
  }

  std::vector<std::pair<std::string, MetricsRow>> finals;
  for (const auto& [opt, res] : results) finals.emplace_back(opt, res.final_row);
  return finals;
}

namespace {

std::pair<AnalyticLoss, ProjectedFlowState> make_dissipation_problem(
    std::uint64_t seed) {
  Rng rng(seed);
  const int n = 16;
  Matrix u = orthonormalize(rng.gaussian(n, 2));
  Matrix v = orthonormalize(rng.gaussian(n, 2));
  Matrix d = Matrix::Zero(2, 2);
  d(0, 0) = 1.0;
  d(1, 1) = 0.6;
  Matrix a = u * d * v.transpose();
  // Displacement small enough that the damped transient (decay rate gamma/2)
  // is below the stationarity tolerance by the end of the standard horizon.
  LowRankFactors w0 = truncated_svd(a + 0.01 * rng.gaussian(n, n), 2);
  ProjectedFlowState s;
  s.W = reconstruct(w0);
  s.V = Matrix::Zero(n, n);
  s.rank = 2;
  s.gamma = 0.5;
  return {AnalyticLoss::quadratic(a), s};
}

}  // namespace

std::string run_flow_study(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  std::ostringstream summary;

  auto [loss, s0] = make_dissipation_problem(cfg.seed + 11);
  auto trace = run_projected_flow(s0, loss, 1e-2, 50.0);
  {
    std::ofstream csv(cfg.out_dir + "/energy.csv",
                      std::ios::out | std::ios::trunc);
    if (!csv) throw IoError("cannot write energy CSV in " + cfg.out_dir);
    csv << "t,energy,momentum_sq,residual\n";
    for (const auto& r : trace)
      csv << fmt_g(r.t) << ',' << fmt_g(r.E) << ',' << fmt_g(r.v2) << ','
          << fmt_g(r.residual) << '\n';
  }
  auto rep = verify_energy_dissipation(trace, 0.5);
  summary << "projected flow: energy monotone=" << (rep.ok ? "yes" : "NO")
          << " identity_rel_err=" << fmt_g(rep.identity_rel_err)
          << " terminal_residual=" << fmt_g(trace.back().residual) << '\n';

  {
    std::ofstream csv(cfg.out_dir + "/scaling.csv",
                      std::ios::out | std::ios::trunc);
    if (!csv) throw IoError("cannot write scaling CSV in " + cfg.out_dir);
    csv << "lambda,error_cond1,error_cond1e6\n";
    auto well = make_scaling_setup(8, 0.5, cfg.seed + 3);
    auto ill = make_scaling_setup(8, 1e-6, cfg.seed + 3);
    for (double lam : {0.1, 0.05, 0.025}) {
      const double e_w = flow_vs_discrete(well.loss, well.w0, well.gamma, lam,
                                          5.0);
      const double e_i = flow_vs_discrete(ill.loss, ill.w0, ill.gamma, lam,
                                          5.0);
      csv << fmt_g(lam) << ',' << fmt_g(e_w) << ',' << fmt_g(e_i) << '\n';
      summary << "flow vs discrete: lambda=" << fmt_g(lam)
              << " error=" << fmt_g(e_w) << " (ill-conditioned "
              << fmt_g(e_i) << ")\n";
    }
  }

  {
    Rng rng(cfg.seed + 7);
    FactoredFlowState fstate;
    fstate.U_V = orthonormalize(rng.gaussian(6, 2));
    fstate.V_V = orthonormalize(rng.gaussian(6, 2));
    fstate.S_V = Matrix::Zero(2, 2);
    fstate.S_V(0, 0) = 1.0;
    fstate.S_V(1, 1) = 1e-10;
    fstate.W = rng.gaussian(6, 6);
    fstate.gamma = 0.5;
    AnalyticLoss q = AnalyticLoss::quadratic(Matrix::Zero(6, 6));
    try {
      step_factored_momentum_flow(fstate, q, 1e-3);
      summary << "stiffness check: UNEXPECTEDLY accepted an ill-conditioned "
                 "momentum coefficient\n";
    } catch (const StiffnessError&) {
      summary << "stiffness check: cond(S_V)=1e10 step rejected as expected\n";
    }
  }
  return summary.str();
}

bool VerifyReport::ok() const {
  for (const auto& i : items)
    if (!i.ok) return false;
  return true;
}

std::string VerifyReport::to_string() const {
  std::ostringstream os;
  for (const auto& i : items)
    os << (i.ok ? "[PASS] " : "[FAIL] ") << i.name << ": " << i.detail << '\n';
  return os.str();
}

VerifyReport run_verification() {
  VerifyReport rep;

  {
    auto c = counterexample_check();
    std::ostringstream d;
    d << "naive-projected gradient max |entry| = " << fmt_g(c.naive_proj_max)
      << ", tangent-projected norm = " << fmt_g(c.tangent_norm)
      << ", loss " << fmt_g(c.loss_before) << " -> " << fmt_g(c.loss_after);
    rep.items.push_back({"stationary-point counterexample", c.ok, d.str()});
  }

  {
    auto [loss, s0] = make_dissipation_problem(11);
    auto trace = run_projected_flow(s0, loss, 1e-2, 50.0);
    auto e = verify_energy_dissipation(trace, 0.5);
    const bool ok = e.ok && trace.back().residual <= 1e-6;
    std::ostringstream d;
    d << "max energy increase = " << fmt_g(e.max_increase)
      << ", dissipation identity rel err = " << fmt_g(e.identity_rel_err)
      << ", terminal residual = " << fmt_g(trace.back().residual);
    rep.items.push_back({"energy dissipation and stationarity", ok, d.str()});
  }

  {
    Rng rng(17);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
      FactoredFlowState s;
      s.U_V = orthonormalize(rng.gaussian(6, 2));
      s.V_V = orthonormalize(rng.gaussian(6, 2));
      Matrix d = Matrix::Zero(2, 2);
      d(0, 0) = 1.5;
      d(1, 1) = 0.8;
      s.S_V = d + 0.3 * rng.gaussian(2, 2);
      s.W = rng.gaussian(6, 6);
      s.gamma = 0.5;
      AnalyticLoss q = AnalyticLoss::quadratic(rng.gaussian(6, 6));
      worst = std::max(worst, factored_identity_residual(s, q));
    }
    std::ostringstream d;
    d << "max relative defect over 100 states = " << fmt_g(worst);
    rep.items.push_back(
        {"factored momentum flow identity", worst <= 1e-8, d.str()});
  }

  {
    // Per-factor flow is stationary at the counterexample point even though
    // the tangent-projected gradient is not zero there.
    Matrix e1(2, 1);
    e1 << 1, 0;
    VanillaFlowState s;
    s.f = LowRankFactors{e1, Matrix::Identity(1, 1), e1, 1};
    s.U_V = -e1;
    s.S_V = Matrix::Zero(1, 1);
    s.V_V = e1;
    s.gamma = 0.5;
    Matrix g(2, 2);
    g << 0, 0, 1, 0;
    AnalyticLoss loss = AnalyticLoss::quadratic(reconstruct(s.f) - g);
    auto [w_dot, v_dot] = vanilla_assembled_rhs(s, loss);
    const double proj_norm = tangent_project(s.f, g).norm();
    const bool ok = w_dot.cwiseAbs().maxCoeff() <= 1e-14 &&
                    v_dot.cwiseAbs().maxCoeff() <= 1e-14 &&
                    std::abs(proj_norm - 1.0) <= 1e-12;
    std::ostringstream d;
    d << "assembled |dW|=" << fmt_g(w_dot.cwiseAbs().maxCoeff())
      << " |dV|=" << fmt_g(v_dot.cwiseAbs().maxCoeff())
      << " while projected-flow residual = " << fmt_g(proj_norm);
    rep.items.push_back({"per-factor flow stationarity defect", ok, d.str()});
  }

  {
    auto well = make_scaling_setup(8, 0.5, 3);
    auto ill = make_scaling_setup(8, 1e-6, 3);
    double ew[3], ei[3];
    const double lams[3] = {0.1, 0.05, 0.025};
    for (int i = 0; i < 3; ++i) {
      ew[i] = flow_vs_discrete(well.loss, well.w0, well.gamma, lams[i], 5.0);
      ei[i] = flow_vs_discrete(ill.loss, ill.w0, ill.gamma, lams[i], 5.0);
    }
    bool ok = true;
    for (int i = 0; i < 2; ++i) {
      const double ratio = ew[i] / ew[i + 1];
      if (ratio < 1.33 || ratio > 3.0) ok = false;
    }
    for (int i = 0; i < 3; ++i) {
      const double factor = ei[i] / ew[i];
      if (factor >= 10.0 || factor <= 0.1) ok = false;
    }
    std::ostringstream d;
    d << "errors (" << fmt_g(ew[0]) << ", " << fmt_g(ew[1]) << ", "
      << fmt_g(ew[2]) << "), ratios " << fmt_g(ew[0] / ew[1]) << ", "
      << fmt_g(ew[1] / ew[2]) << "; ill-conditioned factors "
      << fmt_g(ei[0] / ew[0]) << ", " << fmt_g(ei[1] / ew[1]) << ", "
      << fmt_g(ei[2] / ew[2]);
    rep.items.push_back({"discretization error scaling", ok, d.str()});
  }

  return rep;
}

}  // namespace dlrt
