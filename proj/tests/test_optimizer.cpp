#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "reference_trainer.hpp"
#include "wm/harness.hpp"
#include "wm/optimizer.hpp"
#include "wm/verification.hpp"

using namespace wm;
namespace ver = wm::verification;

namespace {

Tensor randn(Rng& rng, Shape shape) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

BasisBundle random_bundle(std::size_t n, Rng& rng) {
  BasisBundle b;
  for (const char* name : {"w", "b"}) {
    ManifoldParameter p{name, {}};
    for (std::size_t k = 0; k < n; ++k) p.basis.push_back(randn(rng, name[0] == 'w' ? Shape{3, 2} : Shape{2}));
    b.params.push_back(p);
  }
  return b;
}

OptimizerConfig sgd(double lr, double momentum) {
  OptimizerConfig c;
  c.lr = lr;
  c.momentum = momentum;
  return c;
}

std::string temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("wm_test_" + name);
  std::filesystem::remove_all(dir);
  return dir.string();
}

}  // namespace

TEST_CASE("config defaults and validation") {
  CHECK(OptimizerConfig::defaults_for(UpdateRule::sgd_momentum).lr == 0.01);
  CHECK(OptimizerConfig::defaults_for(UpdateRule::adam).lr == 2e-4);
  CHECK_THROWS_AS(sgd(-1.0, 0.9).validate(), ConfigError);
  CHECK_THROWS_AS(sgd(0.1, 1.0).validate(), ConfigError);
  CHECK_THROWS_AS(parse_update_rule("rmsprop"), ConfigError);
}

TEST_CASE("line step without momentum") {
  Rng rng(1);
  BasisBundle bundle = random_bundle(2, rng);
  const BasisBundle before = bundle;
  BasisBundle grads = bundle.zeros_like();
  for (auto& p : grads.params) p.basis[0] = randn(rng, p.basis[0].shape());
  Optimizer opt(sgd(0.1, 0.0), bundle);
  opt.step(integrated_metric_inverse(ManifoldSpec::line()), bundle, grads);
  for (std::size_t p = 0; p < bundle.params.size(); ++p) {
    Tensor e0 = before.params[p].basis[0], e1 = before.params[p].basis[1];
    e0.add_scaled(grads.params[p].basis[0], -0.4);
    e1.add_scaled(grads.params[p].basis[0], 0.2);
    CHECK(ver::relative_error(bundle.params[p].basis[0], e0) <= 1e-15);
    CHECK(ver::relative_error(bundle.params[p].basis[1], e1) <= 1e-15);
  }
}

TEST_CASE("tethered basis point never moves and keeps zero buffers") {
  for (auto rule : {UpdateRule::sgd_momentum, UpdateRule::adam}) {
    Rng rng(2);
    BasisBundle bundle = random_bundle(2, rng);
    const BasisBundle before = bundle;
    Optimizer opt(OptimizerConfig::defaults_for(rule), bundle);
    const auto& imt = integrated_metric_inverse(ManifoldSpec::tethered_rod());
    for (int i = 0; i < 1000; ++i) opt.step(imt, bundle, random_bundle(2, rng));
    for (std::size_t p = 0; p < bundle.params.size(); ++p) {
      CHECK(bundle.params[p].basis[0] == before.params[p].basis[0]);
      CHECK_FALSE(bundle.params[p].basis[1] == before.params[p].basis[1]);
      CHECK(opt.first_buffers().params[p].basis[0].max_abs() == 0.0);
      if (rule == UpdateRule::adam) CHECK(opt.second_buffers().params[p].basis[0].max_abs() == 0.0);
    }
    CHECK(opt.steps() == 1000);
  }
}

TEST_CASE("adam step matches a hand computation") {
  Rng rng(3);
  BasisBundle bundle = random_bundle(1, rng);
  const BasisBundle before = bundle;
  const BasisBundle g1 = random_bundle(1, rng), g2 = random_bundle(1, rng);
  OptimizerConfig c = OptimizerConfig::defaults_for(UpdateRule::adam);
  c.lr = 0.01;
  Optimizer opt(c, bundle);
  const auto& imt = integrated_metric_inverse(ManifoldSpec::point());
  opt.step(imt, bundle, g1);
  opt.step(imt, bundle, g2);
  for (std::size_t p = 0; p < bundle.params.size(); ++p)
    for (std::size_t j = 0; j < bundle.params[p].basis[0].numel(); ++j) {
      double w = before.params[p].basis[0][j], m = 0, v = 0;
      int t = 0;
      for (const auto* g : {&g1, &g2}) {
        const double gj = g->params[p].basis[0][j];
        ++t;
        m = c.beta1 * m + (1 - c.beta1) * gj;
        v = c.beta2 * v + (1 - c.beta2) * gj * gj;
        const double mh = m / (1 - std::pow(c.beta1, t)), vh = v / (1 - std::pow(c.beta2, t));
        w -= c.lr * mh / (std::sqrt(vh) + c.eps);
      }
      CHECK(bundle.params[p].basis[0][j] == doctest::Approx(w).epsilon(1e-13));
    }
}

TEST_CASE("non-finite gradients are rejected before any update") {
  Rng rng(4);
  BasisBundle bundle = random_bundle(2, rng);
  const BasisBundle before = bundle;
  BasisBundle grads = random_bundle(2, rng);
  grads.params[1].basis[1][0] = std::numeric_limits<double>::quiet_NaN();
  Optimizer opt(sgd(0.1, 0.9), bundle);
  try {
    opt.step(integrated_metric_inverse(ManifoldSpec::line()), bundle, grads);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("b") != std::string::npos);
    CHECK(msg.find("1") != std::string::npos);
  }
  CHECK(ver::relative_error(bundle, before) == 0.0);
  CHECK_THROWS_AS(opt.step(integrated_metric_inverse(ManifoldSpec::ellipse()), bundle, random_bundle(2, rng)),
                  ContractError);
}

TEST_CASE("one-point manifold trains exactly like the plain network") {
  RunConfig config;
  config.mode = ConditioningMode::manifold;
  config.manifold = ManifoldSpec::point();
  config.hidden = {16, 16};
  config.epochs = 1;
  config.steps_per_epoch = 100;
  config.batch_size = 16;
  config.monitor_samples = 16;
  config.eval_per_condition = 1;
  config.init_seed = 5;
  config.out_dir = temp_dir("point_reduction");
  const auto result = train(config);
  const auto ckpt = load_checkpoint((std::filesystem::path(result.run_dir) / "checkpoint.wmck").string());
  const auto ref = wmtest::reference_train(config, 100);
  double num = 0.0, den = 0.0;
  for (std::size_t p = 0; p < ref.weights.size(); ++p) {
    Tensor d = ckpt.bundle.params[p].basis[0];
    d.add_scaled(ref.weights[p], -1.0);
    num += d.squared_norm();
    den += ref.weights[p].squared_norm();
  }
  CHECK(std::sqrt(num / den) <= 1e-12);
  std::filesystem::remove_all(config.out_dir);
}

TEST_CASE("rescaled gradient moves the manifold least") {
  Rng rng(6);
  const ManifoldSpec line = ManifoldSpec::line();
  const BasisBundle grads = random_bundle(2, rng);
  const BasisBundle candidate = rescale_gradients(integrated_metric_inverse(line), grads);
  CHECK(std::abs(kkt_margin(line, grads, candidate, candidate)) <= 1e-12);
  CHECK(kkt_margin(line, grads, candidate, grads) > 1e-6);

  for (const auto& spec : {ManifoldSpec::line(), ManifoldSpec::ellipse(), ManifoldSpec::tethered_rod(),
                           ManifoldSpec::cubic_bspline(6)}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const BasisBundle g = random_bundle(spec.n_basis, rng);
      const auto r = kkt_optimality_check(spec, g, rescale_gradients(integrated_metric_inverse(spec), g), seed);
      INFO(spec.describe());
      CHECK(r.pass);
      CHECK(r.trials == 100);
      CHECK(r.min_margin >= -1e-9);
      // The raw gradient is not the minimizer: the rescaled direction beats it.
      CHECK(kkt_margin(spec, g, g, rescale_gradients(integrated_metric_inverse(spec), g)) < -1e-9);
    }
  }
  const BasisBundle zero = random_bundle(3, rng).zeros_like();
  CHECK(kkt_optimality_check(ManifoldSpec::ellipse(), zero, zero, 1).pass);
}

TEST_CASE("volumetric movement matches closed forms") {
  Rng rng(7);
  BasisBundle d = random_bundle(2, rng);
  // int |(1-s) x + s y|^2 = (|x|^2 + <x,y> + |y|^2) / 3
  double xx = 0, xy = 0, yy = 0;
  for (const auto& p : d.params) {
    xx += p.basis[0].squared_norm();
    xy += p.basis[0].dot(p.basis[1]);
    yy += p.basis[1].squared_norm();
  }
  CHECK(volumetric_movement(ManifoldSpec::line(), d) == doctest::Approx((xx + xy + yy) / 3).epsilon(1e-13));
}

TEST_CASE("monotone descent on a convex linear-manifold problem") {
  // Linear softmax classifier on a line manifold: the loss is convex in P.
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    NetworkSpec spec = default_mlp(2, 3, ConditioningMode::manifold, ManifoldSpec::line());
    spec.hidden = {};
    TaskSpec task;
    task.classes = 3;
    task.seed = seed;
    const auto batch = TaskStream(task, Split::train).batch(0, 64);
    auto loss_of = [&](const Network& net, BasisBundle* grads) {
      Tape tape;
      const auto pass = net.forward(tape, batch.inputs, batch.s);
      const Var loss = softmax_cross_entropy(pass.logits, batch.labels);
      if (grads) *grads = per_basis_gradients(net, tape, pass, loss);
      return loss.value().item();
    };
    bool monotone = false;
    double lr = 1.0;
    for (; lr >= 1e-3 && !monotone; lr /= 2) {
      Network net(spec, seed);
      Optimizer opt(sgd(lr, 0.0), net.bundle());
      BasisBundle g;
      double prev = loss_of(net, &g);
      const double first = prev;
      monotone = true;
      for (int step = 0; step < 100 && monotone; ++step) {
        opt.step(integrated_metric_inverse(net.manifold()), net.bundle(), g);
        const double next = loss_of(net, &g);
        monotone = next <= prev + 1e-12;
        prev = next;
      }
      monotone = monotone && prev < first;
    }
    INFO("seed " << seed << " lr " << lr);
    CHECK(monotone);
  }
}
