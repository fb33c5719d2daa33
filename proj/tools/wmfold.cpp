// wmfold: train, evaluate, sweep and verify weight-manifold networks.
//
// Exit codes: 0 success, 1 training/verification failure, 2 configuration error.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "wm/harness.hpp"

namespace {

struct ConfigFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out;
  std::optional<std::uint64_t> seed;

  void add_to(CLI::App* app) {
    app->add_option("--config", config_path, "key=value config file");
    app->add_option("--set", sets, "override key=value (repeatable)");
    app->add_option("--out", out, "output directory (run.out)");
    app->add_option("--seed", seed, "initialization seed (seed.init)");
  }

  wm::RunConfig resolve(const std::string& fallback_config = {}) const {
    wm::RunConfig c;
    if (!config_path.empty()) c = wm::RunConfig::from_file(config_path);
    else if (!fallback_config.empty()) c = wm::RunConfig::from_file(fallback_config);
    wm::apply_overrides(c, sets);
    if (!out.empty()) c.set("run.out", out);
    if (seed) c.init_seed = *seed;
    c.validate();
    return c;
  }
};

void print_table(const wm::EvalTable& t) {
  std::printf("%-8s %8s %10s %10s\n", "bucket", "count", "loss", "accuracy");
  for (const auto& b : t.buckets) std::printf("%-8s %8zu %10.4f %10.4f\n", b.bucket.c_str(), b.count, b.loss(), b.accuracy());
  std::printf("%-8s %8zu %10.4f %10.4f\n", "all", t.aggregate.count, t.aggregate.loss(), t.aggregate.accuracy());
}

template <class T, class F>
std::vector<T> parse_list(const std::string& text, F parse) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(parse(item));
  if (out.empty()) throw wm::ConfigError("empty list '" + text + "'");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weight-manifold training and verification"};
  app.require_subcommand(1);

  ConfigFlags train_flags;
  bool quiet = false;
  auto* train_cmd = app.add_subcommand("train", "train one run; writes config, metrics and checkpoint");
  train_flags.add_to(train_cmd);
  train_cmd->add_flag("--quiet", quiet, "no per-epoch log");

  ConfigFlags eval_flags;
  std::string checkpoint, split_name = "test", table_out;
  auto* eval_cmd = app.add_subcommand("evaluate", "per-condition accuracy of a checkpoint");
  eval_flags.add_to(eval_cmd);
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--split", split_name, "train or test");
  eval_cmd->add_option("--csv", table_out, "also write the table as CSV");

  ConfigFlags sweep_flags;
  std::string sparsities = "0.05,0.1,0.25,0.5,1", modes = "manifold,concat,embed,none", seeds = "0,1,2,3,4";
  std::size_t jobs = 1;
  auto* sweep_cmd = app.add_subcommand("sweep", "sparsity x mode x seed grid; writes sweep.csv");
  sweep_flags.add_to(sweep_cmd);
  sweep_cmd->add_option("--sparsity", sparsities, "comma-separated sparsities");
  sweep_cmd->add_option("--modes", modes, "comma-separated conditioning modes");
  sweep_cmd->add_option("--seeds", seeds, "comma-separated init seeds");
  sweep_cmd->add_option("--jobs", jobs, "parallel child processes");

  std::string json_out, fault;
  bool quick = false;
  auto* verify_cmd = app.add_subcommand("verify", "run the analytic-vs-numeric checks");
  verify_cmd->add_option("--json", json_out, "write the JSON report here ('-' for stdout)");
  verify_cmd->add_option("--inject-fault", fault, "deliberately corrupt a constant (imt)")
      ->check(CLI::IsMember({"imt"}));
  verify_cmd->add_flag("--quick", quick, "fewer random instances");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train_cmd) {
      const auto config = train_flags.resolve();
      const auto result = wm::train(config, quiet ? nullptr : &std::cerr);
      std::printf("run %s: %zu epochs, test accuracy %.4f\n", result.run_dir.c_str(), result.epochs_completed,
                  result.final_test.aggregate.accuracy());
      return 0;
    }
    if (*eval_cmd) {
      const auto sibling = std::filesystem::path(checkpoint).parent_path() / "config.txt";
      const auto config = eval_flags.resolve(std::filesystem::exists(sibling) ? sibling.string() : std::string{});
      const auto table = wm::evaluate(checkpoint, config, wm::parse_split(split_name));
      print_table(table);
      if (!table_out.empty()) {
        std::ofstream out(table_out);
        out << "condition_bucket,count,loss,accuracy\n";
        for (const auto& b : table.buckets) out << b.bucket << ',' << b.count << ',' << b.loss() << ',' << b.accuracy() << '\n';
        out << "all," << table.aggregate.count << ',' << table.aggregate.loss() << ',' << table.aggregate.accuracy() << '\n';
      }
      return 0;
    }
    if (*sweep_cmd) {
      wm::SweepPlan plan;
      plan.base = sweep_flags.resolve();
      plan.sparsities = parse_list<double>(sparsities, [](const std::string& s) {
        try {
          return std::stod(s);
        } catch (const std::exception&) {
          throw wm::ConfigError("bad sparsity '" + s + "'");
        }
      });
      plan.modes = parse_list<wm::ConditioningMode>(modes, [](const std::string& s) { return wm::parse_conditioning_mode(s); });
      plan.seeds = parse_list<std::uint64_t>(seeds, [](const std::string& s) {
        try {
          return static_cast<std::uint64_t>(std::stoull(s));
        } catch (const std::exception&) {
          throw wm::ConfigError("bad seed '" + s + "'");
        }
      });
      plan.jobs = jobs;
      const auto rows = wm::sweep(plan, &std::cerr);
      std::size_t failed = 0;
      for (const auto& r : rows) failed += r.failed;
      std::printf("sweep: %zu runs, %zu failed -> %s\n", rows.size(), failed,
                  (std::filesystem::path(plan.base.out_dir) / "sweep.csv").c_str());
      return failed ? 1 : 0;
    }
    if (*verify_cmd) {
      wm::VerifyOptions options;
      if (quick) {
        options.gradient_seeds = 10;
        options.dense_instances = 12;
        options.kkt_instances = 4;
        options.forward_cases = 40;
        options.bayes_samples = 20000;
      }
      options.corrupt_imt = fault == "imt";
      const auto checks = wm::run_verification(options);
      std::fputs(wm::verification_table(checks).c_str(), stdout);
      const std::string json = wm::verification_json(checks);
      if (json_out == "-") std::puts(json.c_str());
      else if (!json_out.empty()) std::ofstream(json_out) << json << '\n';
      bool pass = true;
      for (const auto& c : checks) pass = pass && c.pass;
      return pass ? 0 : 1;
    }
  } catch (const wm::ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
