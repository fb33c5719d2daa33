#include "wm/harness.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <ostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "wm/verification.hpp"

namespace fs = std::filesystem;

namespace wm {

namespace {

std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_fields(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size() || !std::isfinite(out))
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || res.ec != std::errc() || res.ptr != v.data() + v.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

void write_file_atomic(const std::string& path, const std::string& contents) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp);
    out << contents;
    if (!out.flush()) throw Error("write failed for " + tmp);
  }
  fs::rename(tmp, path);
}

}  // namespace

std::string to_string(Architecture a) { return a == Architecture::mlp ? "mlp" : "cnn"; }

Architecture parse_architecture(std::string_view name) {
  if (name == "mlp") return Architecture::mlp;
  if (name == "cnn") return Architecture::cnn;
  throw ConfigError("unknown architecture '" + std::string(name) + "'");
}

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k{
      "task.family",       "task.dataset",          "task.sparsity",     "task.grid",
      "task.max_noise",    "task.classes",          "network.arch",      "network.hidden",
      "network.mode",      "network.embed_bins",    "network.embed_width", "manifold.kind",
      "manifold.n_basis",  "manifold.periodic",     "optimizer.rule",    "optimizer.lr",
      "optimizer.momentum", "optimizer.beta1",      "optimizer.beta2",   "optimizer.eps",
      "train.epochs",      "train.steps_per_epoch", "train.batch_size",  "train.lambda", "train.random_modulator",
      "eval.per_condition", "eval.monitor_samples", "eval.noise_levels", "seed.data",
      "seed.init",         "run.id",                "run.out"};
  return k;
}

void RunConfig::set(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (key == "task.family") task.family = parse_task_family(v);
  else if (key == "task.dataset") task.dataset = parse_dataset(v);
  else if (key == "task.sparsity") task.sparsity = parse_double(key, v);
  else if (key == "task.grid") task.grid = parse_uint(key, v);
  else if (key == "task.max_noise") task.max_noise = parse_double(key, v);
  else if (key == "task.classes") task.classes = parse_uint(key, v);
  else if (key == "network.arch") arch = parse_architecture(v);
  else if (key == "network.hidden") {
    hidden.clear();
    if (!v.empty())
      for (const auto& part : split_fields(v, ',')) hidden.push_back(parse_uint(key, trim(part)));
  } else if (key == "network.mode") mode = parse_conditioning_mode(v);
  else if (key == "network.embed_bins") embed_bins = parse_uint(key, v);
  else if (key == "network.embed_width") embed_width = parse_uint(key, v);
  else if (key == "manifold.kind") {
    // Selecting a kind resets arity/periodicity to that kind's defaults.
    switch (parse_manifold_kind(v)) {
      case ManifoldKind::point: manifold = ManifoldSpec::point(); break;
      case ManifoldKind::line: manifold = ManifoldSpec::line(); break;
      case ManifoldKind::ellipse: manifold = ManifoldSpec::ellipse(); break;
      case ManifoldKind::tethered_rod: manifold = ManifoldSpec::tethered_rod(); break;
      case ManifoldKind::cubic_bspline: manifold = ManifoldSpec::cubic_bspline(6); break;
    }
  } else if (key == "manifold.n_basis") manifold.n_basis = parse_uint(key, v);
  else if (key == "manifold.periodic") manifold.periodic = parse_bool(key, v);
  else if (key == "optimizer.rule") {
    const auto rule = parse_update_rule(v);
    if (rule != optimizer.rule) optimizer = OptimizerConfig::defaults_for(rule);
  } else if (key == "optimizer.lr") optimizer.lr = parse_double(key, v);
  else if (key == "optimizer.momentum") optimizer.momentum = parse_double(key, v);
  else if (key == "optimizer.beta1") optimizer.beta1 = parse_double(key, v);
  else if (key == "optimizer.beta2") optimizer.beta2 = parse_double(key, v);
  else if (key == "optimizer.eps") optimizer.eps = parse_double(key, v);
  else if (key == "train.epochs") epochs = parse_uint(key, v);
  else if (key == "train.steps_per_epoch") steps_per_epoch = parse_uint(key, v);
  else if (key == "train.batch_size") batch_size = parse_uint(key, v);
  else if (key == "train.lambda") lambda = parse_double(key, v);
  else if (key == "train.random_modulator") random_modulator = parse_bool(key, v);
  else if (key == "eval.per_condition") eval_per_condition = parse_uint(key, v);
  else if (key == "eval.monitor_samples") monitor_samples = parse_uint(key, v);
  else if (key == "eval.noise_levels") noise_levels = parse_uint(key, v);
  else if (key == "seed.data") task.seed = data_seed = parse_uint(key, v);
  else if (key == "seed.init") init_seed = parse_uint(key, v);
  else if (key == "run.id") {
    if (v.find_first_of(",/\n") != std::string::npos) throw ConfigError("run.id may not contain ',', '/' or newlines");
    run_id = v;
  } else if (key == "run.out") out_dir = v;
  else throw ConfigError("unknown config key '" + key + "'");
}

std::string RunConfig::get(const std::string& key) const {
  if (key == "task.family") return to_string(task.family);
  if (key == "task.dataset") return to_string(task.dataset);
  if (key == "task.sparsity") return fmt(task.sparsity);
  if (key == "task.grid") return std::to_string(task.grid);
  if (key == "task.max_noise") return fmt(task.max_noise);
  if (key == "task.classes") return std::to_string(task.classes);
  if (key == "network.arch") return to_string(arch);
  if (key == "network.hidden") return join_sizes(hidden);
  if (key == "network.mode") return to_string(mode);
  if (key == "network.embed_bins") return std::to_string(embed_bins);
  if (key == "network.embed_width") return std::to_string(embed_width);
  if (key == "manifold.kind") return to_string(manifold.kind);
  if (key == "manifold.n_basis") return std::to_string(manifold.n_basis);
  if (key == "manifold.periodic") return manifold.periodic ? "true" : "false";
  if (key == "optimizer.rule") return to_string(optimizer.rule);
  if (key == "optimizer.lr") return fmt(optimizer.lr);
  if (key == "optimizer.momentum") return fmt(optimizer.momentum);
  if (key == "optimizer.beta1") return fmt(optimizer.beta1);
  if (key == "optimizer.beta2") return fmt(optimizer.beta2);
  if (key == "optimizer.eps") return fmt(optimizer.eps);
  if (key == "train.epochs") return std::to_string(epochs);
  if (key == "train.steps_per_epoch") return std::to_string(steps_per_epoch);
  if (key == "train.batch_size") return std::to_string(batch_size);
  if (key == "train.lambda") return fmt(lambda);
  if (key == "train.random_modulator") return random_modulator ? "true" : "false";
  if (key == "eval.per_condition") return std::to_string(eval_per_condition);
  if (key == "eval.monitor_samples") return std::to_string(monitor_samples);
  if (key == "eval.noise_levels") return std::to_string(noise_levels);
  if (key == "seed.data") return std::to_string(data_seed);
  if (key == "seed.init") return std::to_string(init_seed);
  if (key == "run.id") return run_id;
  if (key == "run.out") return out_dir;
  throw ConfigError("unknown config key '" + key + "'");
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& k : keys()) out += k + "=" + get(k) + "\n";
  return out;
}

RunConfig RunConfig::from_text(const std::string& text) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    c.set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str());
}

void apply_overrides(RunConfig& config, const std::vector<std::string>& assignments) {
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + a + "' is not key=value");
    config.set(trim(a.substr(0, eq)), a.substr(eq + 1));
  }
}

void RunConfig::validate() const {
  task.validate();
  if (arch == Architecture::mlp && task.dataset != Dataset::blobs2d)
    throw ConfigError("network.arch=mlp needs task.dataset=blobs2d");
  if (arch == Architecture::cnn && task.dataset != Dataset::digits16)
    throw ConfigError("network.arch=cnn needs task.dataset=digits16");
  manifold.validate();
  network_spec().validate();
  optimizer.validate();
  if (steps_per_epoch == 0) throw ConfigError("train.steps_per_epoch must be positive");
  if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (!(lambda >= 0.0)) throw ConfigError("train.lambda must be >= 0");
  if (eval_per_condition == 0 || monitor_samples == 0 || noise_levels == 0)
    throw ConfigError("evaluation sizes must be positive");
  if (out_dir.empty()) throw ConfigError("run.out must not be empty");
}

NetworkSpec RunConfig::network_spec() const {
  const ManifoldSpec effective = mode == ConditioningMode::manifold ? manifold : ManifoldSpec::point();
  NetworkSpec spec = arch == Architecture::mlp
                         ? default_mlp(shape_numel(task.input_shape()), task.num_classes(), mode, effective)
                         : default_cnn(task.num_classes(), mode, effective);
  if (!hidden.empty()) spec.hidden = hidden;
  spec.embed_bins = embed_bins;
  spec.embed_width = embed_width;
  return spec;
}

std::string RunConfig::resolved_run_id() const {
  if (!run_id.empty()) return run_id;
  const std::string kind = to_string(mode == ConditioningMode::manifold ? manifold.kind : ManifoldKind::point);
  const std::string cond = task.family == TaskFamily::rotation ? "p" + fmt(task.sparsity) : "S" + fmt(task.max_noise);
  return to_string(mode) + "-" + kind + "-" + cond + "-s" + std::to_string(init_seed);
}

std::string RunConfig::run_dir() const { return (fs::path(out_dir) / resolved_run_id()).string(); }

// ---------------------------------------------------------------------------

std::string MetricsRow::to_csv() const {
  std::string out = run_id + "," + mode + "," + manifold + "," + fmt(sparsity) + "," + std::to_string(seed) + "," +
                    std::to_string(epoch) + "," + split + "," + condition_bucket + ",";
  if (!failed) out += fmt(loss) + "," + fmt(accuracy);
  else out += ",";
  return out;
}

MetricsRow MetricsRow::from_csv(const std::string& line) {
  const auto f = split_fields(line, ',');
  if (f.size() != 10) throw Error("metrics row has " + std::to_string(f.size()) + " fields: " + line);
  MetricsRow r;
  r.run_id = f[0];
  r.mode = f[1];
  r.manifold = f[2];
  r.sparsity = parse_double("sparsity", f[3]);
  r.seed = parse_uint("seed", f[4]);
  r.epoch = parse_uint("epoch", f[5]);
  r.split = f[6];
  r.condition_bucket = f[7];
  if (f[8].empty() || f[9].empty()) {
    r.failed = true;
  } else {
    r.loss = parse_double("loss", f[8]);
    r.accuracy = parse_double("accuracy", f[9]);
  }
  return r;
}

std::vector<MetricsRow> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read metrics file '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw Error(path + ": unexpected metrics header");
  std::vector<MetricsRow> rows;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(MetricsRow::from_csv(line));
  return rows;
}

std::string condition_bucket(double s) {
  const auto d = std::min<long>(9, static_cast<long>(std::floor(check_modulator(s) * 10.0)));
  return "d" + std::to_string(d);
}

namespace {

std::vector<double> random_modulators(std::size_t n, std::uint64_t seed, std::uint64_t index) {
  Rng rng = Rng::derive(seed, {0x5a11, index});
  std::vector<double> s(n);
  for (auto& v : s) v = rng.uniform();
  return s;
}

// Adds per-example loss and correctness of one batch to the stats.
void score_batch(const Network& net, const ConditionedBatch& batch, std::vector<BucketStats>* buckets,
                 BucketStats& aggregate, std::optional<std::uint64_t> random_seed, std::uint64_t index) {
  Tape tape;
  const std::vector<double> fed = random_seed ? random_modulators(batch.size(), *random_seed, index) : batch.s;
  const Tensor logits = net.forward(tape, batch.inputs, fed).logits.value();
  const std::size_t classes = logits.dim(1);
  const auto pred = argmax_rows(logits);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double* row = logits.data().data() + i * classes;
    const double mx = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
    const double loss = std::log(z) + mx - row[batch.labels[i]];
    const bool ok = pred[i] == batch.labels[i];
    aggregate.count += 1;
    aggregate.correct += ok;
    aggregate.loss_sum += loss;
    if (buckets) {
      auto& b = (*buckets)[static_cast<std::size_t>(condition_bucket(batch.s[i])[1] - '0')];
      b.count += 1;
      b.correct += ok;
      b.loss_sum += loss;
    }
  }
}

ConditionedBatch concat_batches(const std::vector<ConditionedBatch>& parts) {
  std::size_t total = 0;
  for (const auto& p : parts) total += p.size();
  Shape shape = parts.front().inputs.shape();
  shape[0] = total;
  ConditionedBatch out{Tensor(shape), {}, {}};
  std::size_t at = 0;
  for (const auto& p : parts) {
    std::copy(p.inputs.data().begin(), p.inputs.data().end(), out.inputs.data().begin() + at);
    at += p.inputs.numel();
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    out.s.insert(out.s.end(), p.s.begin(), p.s.end());
  }
  return out;
}

constexpr std::size_t kEvalChunk = 256;

}  // namespace

EvalTable evaluate_network(const Network& net, const TaskSpec& task, Split split, std::size_t per_condition,
                           std::size_t noise_levels, std::optional<std::uint64_t> random_modulator_seed) {
  std::vector<double> conditions;
  if (task.family == TaskFamily::rotation) {
    std::vector<std::size_t> grid;
    if (split == Split::train) {
      grid = train_condition_indices(task);
    } else {
      grid.resize(task.grid);
      for (std::size_t g = 0; g < task.grid; ++g) grid[g] = g;
    }
    for (auto g : grid) conditions.push_back(static_cast<double>(g) / static_cast<double>(task.grid));
  } else {
    for (std::size_t j = 0; j < noise_levels; ++j)
      conditions.push_back((static_cast<double>(j) + 0.5) / static_cast<double>(noise_levels) * task.max_noise);
  }
  EvalTable table;
  table.aggregate.bucket = "all";
  std::vector<BucketStats> buckets(10);
  for (std::size_t d = 0; d < 10; ++d) buckets[d].bucket = "d" + std::to_string(d);

  const TaskStream stream(task, split, 2);
  std::vector<ConditionedBatch> pending;
  std::size_t pending_size = 0;
  std::uint64_t chunk = 0;
  auto flush = [&] {
    if (pending.empty()) return;
    score_batch(net, concat_batches(pending), &buckets, table.aggregate, random_modulator_seed, chunk++);
    pending.clear();
    pending_size = 0;
  };
  for (std::size_t c = 0; c < conditions.size(); ++c) {
    pending.push_back(stream.batch_at(c, per_condition, conditions[c]));
    pending_size += per_condition;
    if (pending_size >= kEvalChunk) flush();
  }
  flush();
  for (auto& b : buckets)
    if (b.count) table.buckets.push_back(b);
  return table;
}

BucketStats monitor(const Network& net, const TaskSpec& task, Split split, std::size_t samples,
                    std::optional<std::uint64_t> random_modulator_seed) {
  const TaskStream stream(task, split, 1);
  BucketStats stats;
  stats.bucket = "monitor";
  std::size_t done = 0;
  for (std::uint64_t b = 0; done < samples; ++b) {
    const std::size_t n = std::min(kEvalChunk, samples - done);
    score_batch(net, stream.batch(b, n), nullptr, stats, random_modulator_seed, b);
    done += n;
  }
  return stats;
}

// ---------------------------------------------------------------------------

TrainResult train(const RunConfig& config, std::ostream* log) {
  config.validate();
  TrainResult result;
  result.run_id = config.resolved_run_id();
  result.run_dir = config.run_dir();
  fs::create_directories(result.run_dir);
  write_file_atomic((fs::path(result.run_dir) / "config.txt").string(), config.to_text());

  Network net(config.network_spec(), config.init_seed);
  const std::string ckpt_path = (fs::path(result.run_dir) / "checkpoint.wmck").string();
  auto save = [&] {
    save_checkpoint(ckpt_path, Checkpoint{net.spec(), net.manifold(), config.init_seed, net.bundle()});
  };
  save();

  std::ofstream metrics((fs::path(result.run_dir) / "metrics.csv").string(), std::ios::binary | std::ios::trunc);
  if (!metrics) throw Error("cannot write metrics in " + result.run_dir);
  metrics << kMetricsHeader << '\n';
  metrics.flush();

  MetricsRow base;
  base.run_id = result.run_id;
  base.mode = to_string(config.mode);
  base.manifold = to_string(net.manifold().kind);
  base.sparsity = config.task.sparsity;
  base.seed = config.init_seed;
  auto emit = [&](std::size_t epoch, const char* split, const BucketStats& s) {
    MetricsRow r = base;
    r.epoch = epoch;
    r.split = split;
    r.condition_bucket = s.bucket;
    r.loss = s.loss();
    r.accuracy = s.accuracy();
    metrics << r.to_csv() << '\n';
  };

  const TaskStream stream(config.task, Split::train, 0);
  Optimizer opt(config.optimizer, net.bundle());
  const IMTMatrix& imt = integrated_metric_inverse(net.manifold());
  const ManifoldSpec& manifold = net.manifold();
  // The penalty is defined on M(s, P); other modes train on plain cross-entropy.
  const double lambda = config.mode == ConditioningMode::manifold ? config.lambda : 0.0;
  std::optional<std::uint64_t> eval_random;
  if (config.random_modulator) eval_random = config.data_seed + 1;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    double loss_sum = 0.0;
    for (std::size_t step = 0; step < config.steps_per_epoch; ++step) {
      const std::uint64_t index = (epoch - 1) * config.steps_per_epoch + step;
      auto batch = stream.batch(index, config.batch_size);
      if (config.random_modulator) batch.s = random_modulators(batch.size(), config.data_seed, index);
      Tape tape;
      const auto pass = net.forward(tape, batch.inputs, batch.s);
      const Var loss = regularized_loss(pass.logits, batch.labels, batch.s, pass.leaves, manifold, lambda);
      const double value = loss.value().item();
      if (!std::isfinite(value))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(step));
      const auto grads = per_basis_gradients(net, tape, pass, loss);
      opt.step(imt, net.bundle(), grads, value);
      loss_sum += value;
    }
    const auto tr = monitor(net, config.task, Split::train, config.monitor_samples, eval_random);
    const auto te = monitor(net, config.task, Split::test, config.monitor_samples, eval_random);
    emit(epoch, "train", tr);
    emit(epoch, "test", te);
    if (epoch == config.epochs) {
      result.final_test = evaluate_network(net, config.task, Split::test, config.eval_per_condition,
                                           config.noise_levels, eval_random);
      for (const auto& b : result.final_test.buckets) emit(epoch, "test", b);
      emit(epoch, "test", result.final_test.aggregate);
      result.final_train_accuracy = tr.accuracy();
    }
    metrics.flush();
    save();
    result.epochs_completed = epoch;
    if (log)
      *log << result.run_id << " epoch " << epoch << " train_loss " << fmt(loss_sum / config.steps_per_epoch)
           << " train_acc " << fmt(tr.accuracy()) << " test_acc " << fmt(te.accuracy()) << '\n';
  }
  return result;
}

EvalTable evaluate(const std::string& checkpoint_path, const RunConfig& config, Split split) {
  config.validate();
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  const NetworkSpec expected = config.network_spec();
  const auto diffs = expected.differences(ckpt.network);
  if (!diffs.empty()) {
    std::string msg = "checkpoint does not match the configured network:";
    for (const auto& d : diffs) msg += " [" + d + "]";
    throw ConfigError(msg);
  }
  const Network net(ckpt.network, ckpt.bundle);
  std::optional<std::uint64_t> eval_random;
  if (config.random_modulator) eval_random = config.data_seed + 1;
  return evaluate_network(net, config.task, split, config.eval_per_condition, config.noise_levels, eval_random);
}

// ---------------------------------------------------------------------------

std::vector<RunConfig> sweep_configs(const SweepPlan& plan) {
  std::vector<RunConfig> out;
  for (double p : plan.sparsities)
    for (auto mode : plan.modes)
      for (auto seed : plan.seeds) {
        RunConfig c = plan.base;
        c.task.sparsity = p;
        c.mode = mode;
        c.init_seed = seed;
        c.run_id.clear();
        out.push_back(c);
      }
  return out;
}

std::vector<MetricsRow> sweep(const SweepPlan& plan, std::ostream* log) {
  if (plan.jobs == 0) throw ConfigError("--jobs must be positive");
  for (double p : plan.sparsities)
    if (!(p > 0.0 && p <= 1.0)) throw ConfigError("sweep sparsity " + fmt(p) + " outside (0,1]");
  const auto configs = sweep_configs(plan);
  for (const auto& c : configs) c.validate();
  fs::create_directories(plan.base.out_dir);

  std::vector<int> status(configs.size(), -1);
  std::map<pid_t, std::size_t> running;
  auto reap_one = [&] {
    int st = 0;
    const pid_t pid = ::waitpid(-1, &st, 0);
    if (pid <= 0) throw Error("waitpid failed during sweep");
    const auto it = running.find(pid);
    if (it == running.end()) return;
    status[it->second] = WIFEXITED(st) ? WEXITSTATUS(st) : 128 + (WIFSIGNALED(st) ? WTERMSIG(st) : 0);
    if (log) *log << "finished " << configs[it->second].resolved_run_id() << " status " << status[it->second] << '\n';
    running.erase(it);
  };
  for (std::size_t i = 0; i < configs.size(); ++i) {
    while (running.size() >= plan.jobs) reap_one();
    if (log) log->flush();
    const pid_t pid = ::fork();
    if (pid < 0) throw Error("fork failed during sweep");
    if (pid == 0) {
      int code = 0;
      try {
        train(configs[i]);
      } catch (const std::exception&) {
        code = 1;
      }
      ::_exit(code);
    }
    running[pid] = i;
  }
  while (!running.empty()) reap_one();

  std::vector<MetricsRow> rows;
  std::string csv = std::string(kMetricsHeader) + "\n";
  for (std::size_t i = 0; i < configs.size(); ++i) {
    const auto& c = configs[i];
    MetricsRow row;
    row.run_id = c.resolved_run_id();
    row.mode = to_string(c.mode);
    row.manifold = to_string(c.mode == ConditioningMode::manifold ? c.manifold.kind : ManifoldKind::point);
    row.sparsity = c.task.sparsity;
    row.seed = c.init_seed;
    row.epoch = c.epochs;
    row.split = "test";
    row.condition_bucket = "all";
    row.failed = true;
    if (status[i] == 0) {
      try {
        for (const auto& r : read_metrics((fs::path(c.run_dir()) / "metrics.csv").string()))
          if (r.epoch == c.epochs && r.split == "test" && r.condition_bucket == "all") row = r;
      } catch (const Error&) {
      }
    }
    rows.push_back(row);
    csv += row.to_csv() + "\n";
  }
  write_file_atomic((fs::path(plan.base.out_dir) / "sweep.csv").string(), csv);
  return rows;
}

// ---------------------------------------------------------------------------

TrendResult mann_kendall(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ContractError("mann_kendall: x and y differ in length");
  const std::size_t n = x.size();
  TrendResult r;
  if (n < 3) return r;
  auto sgn = [](double v) { return (v > 0) - (v < 0); };
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) s += sgn(x[j] - x[i]) * sgn(y[j] - y[i]);
  auto tie_sums = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    double a = 0, b = 0, c = 0;  // sum t(t-1)(2t+5), sum t(t-1), sum t(t-1)(t-2)
    for (std::size_t i = 0; i < v.size();) {
      std::size_t j = i;
      while (j < v.size() && v[j] == v[i]) ++j;
      const double t = static_cast<double>(j - i);
      a += t * (t - 1) * (2 * t + 5);
      b += t * (t - 1);
      c += t * (t - 1) * (t - 2);
      i = j;
    }
    return std::array<double, 3>{a, b, c};
  };
  const auto tx = tie_sums(x), ty = tie_sums(y);
  const double nn = static_cast<double>(n);
  double var = (nn * (nn - 1) * (2 * nn + 5) - tx[0] - ty[0]) / 18.0 + tx[1] * ty[1] / (2 * nn * (nn - 1)) +
               tx[2] * ty[2] / (9 * nn * (nn - 1) * (nn - 2));
  r.s = s;
  r.variance = var;
  if (var <= 0.0) return r;
  r.z = s > 0 ? (s - 1) / std::sqrt(var) : s < 0 ? (s + 1) / std::sqrt(var) : 0.0;
  r.p_increasing = 0.5 * std::erfc(r.z / std::numbers::sqrt2);
  r.p_decreasing = 0.5 * std::erfc(-r.z / std::numbers::sqrt2);
  return r;
}

// ---------------------------------------------------------------------------

std::vector<CheckResult> run_verification(const VerifyOptions& options) {
  using namespace verification;
  std::vector<CheckResult> out;
  auto add = [&](std::string name, double err, double tol) { out.push_back({std::move(name), err, tol, err <= tol}); };

  const std::vector<ManifoldSpec> kinds{ManifoldSpec::line(), ManifoldSpec::ellipse(), ManifoldSpec::tethered_rod(),
                                        ManifoldSpec::cubic_bspline(8), ManifoldSpec::cubic_bspline(6, true)};
  for (const auto& spec : kinds) {
    const auto simpson = quad_gram(spec, QuadratureScheme::simpson);
    const auto gauss = quad_gram(spec, QuadratureScheme::gauss_legendre);
    const std::string tag = to_string(spec.kind) + (spec.kind == ManifoldKind::cubic_bspline
                                                        ? std::to_string(spec.n_basis) + (spec.periodic ? "p" : "")
                                                        : "");
    add("quadrature_agreement_" + tag, (simpson.t - gauss.t).cwiseAbs().maxCoeff(), 1e-12);
    IMTMatrix imt = integrated_metric_inverse(spec);
    if (options.corrupt_imt) imt(0, 0) += 1e-3;
    if (options.corrupt_imt && imt.is_frozen(0)) imt(1, 1) += 1e-3;
    add("metric_inverse_" + tag, imt_consistency_error(imt, gauss.t), 1e-10);
  }
  {
    const auto t = quad_gram(ManifoldSpec::line(), QuadratureScheme::gauss_legendre).t;
    Eigen::Matrix2d ref;
    ref << 1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 3.0;
    add("line_gram_closed_form", (t - ref).cwiseAbs().maxCoeff(), 1e-12);
    auto exact = [&](const ManifoldSpec& spec, const std::vector<double>& ref_c) {
      IMTMatrix imt = integrated_metric_inverse(spec);
      if (options.corrupt_imt) imt(imt.is_frozen(0) ? 1 : 0, imt.is_frozen(0) ? 1 : 0) += 1e-3;
      double e = 0.0;
      for (std::size_t i = 0; i < ref_c.size(); ++i) e = std::max(e, std::abs(imt.c[i] - ref_c[i]));
      return e;
    };
    add("line_inverse_exact", exact(ManifoldSpec::line(), {4, -2, -2, 4}), 0.0);
    add("ellipse_inverse_exact", exact(ManifoldSpec::ellipse(), {1, 0, 0, 0, 2, 0, 0, 0, 2}), 0.0);
    add("tethered_rod_inverse_exact", exact(ManifoldSpec::tethered_rod(), {0, 0, 0, 3}), 0.0);
  }

  const std::vector<ManifoldSpec> toys{ManifoldSpec::point(), ManifoldSpec::line(), ManifoldSpec::ellipse(),
                                       ManifoldSpec::tethered_rod(), ManifoldSpec::cubic_bspline(4)};
  {
    double worst = 0.0;
    for (std::size_t i = 0; i < options.dense_instances; ++i) {
      const auto toy = make_toy_instance(toys[i % toys.size()], 1000 + i);
      worst = std::max(worst, relative_error(dense_update(toy.net, toy.batch), factored_direction(toy.net, toy.batch)));
    }
    add("dense_update_equivalence", worst, 1e-8);
  }
  {
    double worst = 0.0;
    for (std::size_t i = 0; i < options.kkt_instances; ++i) {
      const auto toy = make_toy_instance(toys[i % toys.size()], 2000 + i);
      Tape tape;
      const auto pass = toy.net.forward(tape, toy.batch.inputs, toy.batch.s);
      const Var loss = softmax_cross_entropy(pass.logits, toy.batch.labels);
      const auto grads = per_basis_gradients(toy.net, tape, pass, loss);
      BasisBundle delta = rescale_gradients(integrated_metric_inverse(toy.net.manifold()), grads);
      for (auto& p : delta.params)
        for (auto& t : p.basis)
          for (auto& v : t.data()) v = -v;
      const auto r = kkt_optimality_check(toy.net.manifold(), grads, delta, 3000 + i, options.kkt_trials);
      worst = std::max(worst, std::max(0.0, -r.min_margin));
    }
    add("kkt_optimality", worst, 1e-9);
  }
  {
    double worst = 0.0;
    for (std::size_t i = 0; i < options.forward_cases; ++i) worst = std::max(worst, factored_forward_error(i));
    add("factored_forward", worst, 1e-12);
  }
  {
    std::map<std::string, double> worst;
    std::vector<std::string> order;
    for (std::size_t seed = 0; seed < options.gradient_seeds; ++seed)
      for (const auto& c : gradient_checks(seed)) {
        if (!worst.count(c.name)) order.push_back(c.name);
        worst[c.name] = std::max(worst[c.name], c.rel_error);
      }
    for (const auto& name : order) add("gradient_" + name, worst[name], 1e-5);
  }
  if (options.bayes_samples > 0) {
    const auto params = blobs2d_params(4);
    Rng rng = Rng::derive(7, {0xba7e5});
    std::size_t correct = 0;
    for (std::size_t i = 0; i < options.bayes_samples; ++i) {
      const std::size_t c = rng.index(params.classes);
      const auto mu = blobs2d_center(params, c);
      const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const auto x = rotate2d({mu[0] + params.sigma * rng.normal(), mu[1] + params.sigma * rng.normal()}, theta);
      correct += bayes_blobs2d(params, x, theta) == c;
    }
    add("bayes_blobs2d_error_rate", 1.0 - static_cast<double>(correct) / static_cast<double>(options.bayes_samples),
        0.01);
  }
  return out;
}

std::string verification_table(const std::vector<CheckResult>& checks) {
  std::ostringstream ss;
  char line[160];
  std::snprintf(line, sizeof line, "%-36s %14s %10s  %s\n", "check", "max_error", "tolerance", "result");
  ss << line;
  for (const auto& c : checks) {
    std::snprintf(line, sizeof line, "%-36s %14.3e %10.1e  %s\n", c.name.c_str(), c.max_error, c.tolerance,
                  c.pass ? "PASS" : "FAIL");
    ss << line;
  }
  return ss.str();
}

std::string verification_json(const std::vector<CheckResult>& checks) {
  nlohmann::json doc;
  doc["checks"] = nlohmann::json::array();
  bool all = true;
  for (const auto& c : checks) {
    all = all && c.pass;
    doc["checks"].push_back({{"name", c.name}, {"max_error", c.max_error}, {"tolerance", c.tolerance}, {"pass", c.pass}});
  }
  doc["pass"] = all;
  return doc.dump(2);
}

}  // namespace wm
