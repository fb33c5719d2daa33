#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "wm/harness.hpp"

using namespace wm;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("wm_harness_" + name);
  fs::remove_all(dir);
  return dir.string();
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig small_config(const std::string& out) {
  RunConfig c;
  c.hidden = {16};
  c.epochs = 2;
  c.steps_per_epoch = 20;
  c.batch_size = 32;
  c.monitor_samples = 64;
  c.eval_per_condition = 2;
  c.out_dir = out;
  return c;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(WMFOLD_BIN) + " " + args + " >/dev/null 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

}  // namespace

TEST_CASE("config text round trip") {
  RunConfig c;
  apply_overrides(c, {"task.family=noise", "task.dataset=digits16", "network.arch=cnn", "network.hidden=",
                      "manifold.kind=cubic_bspline", "manifold.n_basis=9", "optimizer.rule=adam", "train.lambda=0.25",
                      "seed.data=17", "run.id=abc"});
  CHECK(c.task.seed == 17);
  CHECK(c.data_seed == 17);
  CHECK(c.optimizer.lr == 2e-4);
  CHECK(c.hidden.empty());
  CHECK(RunConfig::from_text(c.to_text()) == c);
  CHECK(RunConfig::from_text("# comment\n\n  train.epochs = 3  # trailing\n").epochs == 3);
  CHECK_NOTHROW(c.validate());
  for (const auto& key : RunConfig::keys()) CHECK_NOTHROW(c.get(key));
}

TEST_CASE("config errors") {
  RunConfig c;
  CHECK_THROWS_AS(c.set("train.epoch", "3"), ConfigError);
  CHECK_THROWS_AS(c.set("train.epochs", "three"), ConfigError);
  CHECK_THROWS_AS(c.set("train.epochs", "-1"), ConfigError);
  CHECK_THROWS_AS(c.set("run.id", "a,b"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_text("novalue\n"), ConfigError);
  CHECK_THROWS_AS(apply_overrides(c, {"train.lambda"}), ConfigError);
  RunConfig bad;
  bad.arch = Architecture::cnn;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = RunConfig{};
  bad.lambda = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = RunConfig{};
  bad.task.sparsity = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_file("/nonexistent/config.txt"), ConfigError);
}

TEST_CASE("metrics rows") {
  MetricsRow r{"run", "manifold", "ellipse", 0.1, 3, 7, "test", "d4", 0.125, 0.96875};
  const auto line = r.to_csv();
  CHECK(line == "run,manifold,ellipse,0.1,3,7,test,d4,0.125,0.96875");
  const auto back = MetricsRow::from_csv(line);
  CHECK(back.loss == r.loss);
  CHECK(back.accuracy == r.accuracy);
  CHECK(back.condition_bucket == "d4");
  r.failed = true;
  CHECK(r.to_csv() == "run,manifold,ellipse,0.1,3,7,test,d4,,");
  CHECK(MetricsRow::from_csv(r.to_csv()).failed);
  CHECK_THROWS(MetricsRow::from_csv("a,b,c"));
  CHECK(condition_bucket(0.0) == "d0");
  CHECK(condition_bucket(0.15) == "d1");
  CHECK(condition_bucket(1.0) == "d9");
}

TEST_CASE("zero epochs leave the initial checkpoint and a header-only metrics file") {
  auto c = small_config(temp_dir("zero"));
  c.epochs = 0;
  const auto res = train(c);
  CHECK(res.epochs_completed == 0);
  CHECK(slurp(fs::path(res.run_dir) / "metrics.csv") == std::string(kMetricsHeader) + "\n");
  const auto ckpt = load_checkpoint((fs::path(res.run_dir) / "checkpoint.wmck").string());
  const Network init(c.network_spec(), c.init_seed);
  CHECK(encode_checkpoint(ckpt) == encode_checkpoint({init.spec(), init.manifold(), c.init_seed, init.bundle()}));
  CHECK(RunConfig::from_file((fs::path(res.run_dir) / "config.txt").string()) == c);

  // An untrained network is at chance on the 4-class task.
  c.eval_per_condition = 10;
  const auto table = evaluate((fs::path(res.run_dir) / "checkpoint.wmck").string(), c, Split::test);
  CHECK(table.aggregate.count == 3600);
  CHECK(std::abs(table.aggregate.accuracy() - 0.25) <= 0.03);
  fs::remove_all(c.out_dir);
}

TEST_CASE("training is reproducible byte for byte") {
  const auto a = small_config(temp_dir("repro_a"));
  const auto b = small_config(temp_dir("repro_b"));
  const auto ra = train(a), rb = train(b);
  CHECK(slurp(fs::path(ra.run_dir) / "metrics.csv") == slurp(fs::path(rb.run_dir) / "metrics.csv"));
  CHECK(slurp(fs::path(ra.run_dir) / "checkpoint.wmck") == slurp(fs::path(rb.run_dir) / "checkpoint.wmck"));

  const auto rows = read_metrics((fs::path(ra.run_dir) / "metrics.csv").string());
  // Two monitor rows per epoch plus ten deciles and the aggregate at the end.
  CHECK(rows.size() == 2 * 2 + 11);
  CHECK(rows.back().condition_bucket == "all");
  CHECK(rows.back().accuracy == ra.final_test.aggregate.accuracy());
  fs::remove_all(a.out_dir);
  fs::remove_all(b.out_dir);
}

TEST_CASE("evaluation tables") {
  auto c = small_config(temp_dir("eval"));
  c.epochs = 8;
  c.task.sparsity = 0.25;
  c.monitor_samples = 2000;
  const auto res = train(c);
  const auto ckpt = (fs::path(res.run_dir) / "checkpoint.wmck").string();
  const auto test = evaluate(ckpt, c, Split::test);
  std::size_t count = 0;
  double weighted = 0.0;
  for (const auto& b : test.buckets) {
    count += b.count;
    weighted += b.accuracy() * static_cast<double>(b.count);
  }
  CHECK(count == test.aggregate.count);
  CHECK(weighted / count == doctest::Approx(test.aggregate.accuracy()).epsilon(1e-12));
  CHECK(test.aggregate.accuracy() == res.final_test.aggregate.accuracy());

  const auto train_eval = evaluate(ckpt, c, Split::train);
  CHECK(train_eval.aggregate.count == 90 * 2);
  CHECK(std::abs(train_eval.aggregate.accuracy() - res.final_train_accuracy) <= 0.02);

  auto wrong = c;
  wrong.hidden = {32};
  wrong.mode = ConditioningMode::concat;
  try {
    evaluate(ckpt, wrong, Split::test);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("hidden") != std::string::npos);
    CHECK(msg.find("mode") != std::string::npos);
  }
  fs::remove_all(c.out_dir);
}

TEST_CASE("blobs2d ellipse with defaults fits the training split") {
  RunConfig c;
  c.out_dir = temp_dir("defaults");
  const auto res = train(c);
  CHECK(res.final_train_accuracy >= 0.95);
  fs::remove_all(c.out_dir);
}

TEST_CASE("sweep writes one row per run") {
  SweepPlan plan;
  plan.base = small_config(temp_dir("sweep"));
  plan.base.epochs = 1;
  plan.sparsities = {0.5, 1.0};
  plan.modes = {ConditioningMode::manifold, ConditioningMode::none};
  plan.seeds = {0, 1};
  plan.jobs = 2;
  CHECK(sweep_configs(plan).size() == 8);
  const auto rows = sweep(plan);
  REQUIRE(rows.size() == 8);
  for (const auto& r : rows) CHECK_FALSE(r.failed);
  const auto csv = read_metrics((fs::path(plan.base.out_dir) / "sweep.csv").string());
  CHECK(csv.size() == 8);
  CHECK(csv[5].mode == "manifold");
  CHECK(csv[5].sparsity == 1.0);
  CHECK(csv[5].seed == 1);
  fs::remove_all(plan.base.out_dir);
}

TEST_CASE("Mann-Kendall trend test") {
  // n = 5, perfectly increasing: S = 10, Var = 5*4*15/18, z = 9 / sqrt(Var).
  const auto up = mann_kendall({1, 2, 3, 4, 5}, {1, 2, 3, 4, 5});
  CHECK(up.s == 10);
  CHECK(up.variance == doctest::Approx(50.0 / 3));
  CHECK(up.z == doctest::Approx(9.0 / std::sqrt(50.0 / 3)));
  CHECK(up.p_increasing == doctest::Approx(0.013743168055755177).epsilon(1e-5));
  CHECK(up.p_decreasing == doctest::Approx(1.0 - 0.013743168055755177).epsilon(1e-6));
  const auto down = mann_kendall({1, 2, 3, 4, 5}, {5, 4, 3, 2, 1});
  CHECK(down.p_decreasing == doctest::Approx(0.013743168055755177).epsilon(1e-5));
  // Ties in x: x = (1,1,2,2), y = (1,2,3,4). S = 4, Var = (4*3*13 - 2*2*1*9) / 18 = 6.6667.
  const auto tied = mann_kendall({1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(tied.s == 4);
  CHECK(tied.variance == doctest::Approx(20.0 / 3));
  const auto flat = mann_kendall({1, 2, 3}, {2, 2, 2});
  CHECK(flat.p_increasing == 1.0);
  CHECK(flat.p_decreasing == 1.0);
  CHECK_THROWS_AS(mann_kendall({1, 2}, {1}), ContractError);
}

TEST_CASE("verification report") {
  VerifyOptions quick;
  quick.gradient_seeds = 2;
  quick.dense_instances = 4;
  quick.kkt_instances = 2;
  quick.kkt_trials = 20;
  quick.forward_cases = 10;
  quick.bayes_samples = 5000;
  const auto checks = run_verification(quick);
  bool all = true;
  for (const auto& c : checks) {
    INFO(c.name << " " << c.max_error);
    CHECK(c.pass);
    all = all && c.pass;
  }
  const auto doc = nlohmann::json::parse(verification_json(checks));
  CHECK(doc["pass"].get<bool>() == all);
  REQUIRE(doc["checks"].size() == checks.size());
  for (const auto& c : doc["checks"]) {
    CHECK(c.contains("name"));
    CHECK(c["max_error"].is_number());
    CHECK(c["tolerance"].is_number());
    CHECK(c["pass"].is_boolean());
  }

  quick.corrupt_imt = true;
  bool failed = false;
  for (const auto& c : run_verification(quick)) failed = failed || !c.pass;
  CHECK(failed);
}

TEST_CASE("command line exit codes") {
  const auto out = temp_dir("cli");
  CHECK(run_cli("verify --quick --json " + out + "-verify.json") == 0);
  const auto doc = nlohmann::json::parse(slurp(out + "-verify.json"));
  CHECK(doc["pass"].get<bool>());
  CHECK(run_cli("verify --quick --inject-fault imt") == 1);
  CHECK(run_cli("train --set train.bogus=1") == 2);
  CHECK(run_cli("train --set network.arch=cnn") == 2);
  CHECK(run_cli("train --config /nonexistent.cfg") == 2);
  CHECK(run_cli("frobnicate") == 2);
  CHECK(run_cli("train --quiet --out " + out +
                " --set train.epochs=1 --set train.steps_per_epoch=5 --set network.hidden=8"
                " --set eval.per_condition=1 --set run.id=tiny") == 0);
  CHECK(fs::exists(fs::path(out) / "tiny" / "metrics.csv"));
  CHECK(run_cli("evaluate --checkpoint " + out + "/tiny/checkpoint.wmck --csv " + out + "/table.csv") == 0);
  CHECK(slurp(fs::path(out) / "table.csv").rfind("condition_bucket,count,loss,accuracy\n", 0) == 0);
  CHECK(run_cli("evaluate --checkpoint " + out + "/tiny/checkpoint.wmck --set network.hidden=9") == 2);
  fs::remove_all(out);
  fs::remove(out + "-verify.json");
}
