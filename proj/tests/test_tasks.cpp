#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "wm/network.hpp"
#include "wm/tasks.hpp"
#include "wm/verification.hpp"

using namespace wm;
namespace ver = wm::verification;

namespace {

TaskSpec rotation(double p, std::uint64_t seed = 0) {
  TaskSpec t;
  t.sparsity = p;
  t.seed = seed;
  return t;
}

TaskSpec noise_digits() {
  TaskSpec t;
  t.family = TaskFamily::noise;
  t.dataset = Dataset::digits16;
  return t;
}

}  // namespace

TEST_CASE("task spec validation") {
  CHECK_THROWS_AS(rotation(0.0).validate(), ConfigError);
  CHECK_THROWS_AS(rotation(1.5).validate(), ConfigError);
  auto n = noise_digits();
  n.max_noise = 0.0;
  CHECK_THROWS_AS(n.validate(), ConfigError);
  CHECK(noise_digits().num_classes() == 10);
  CHECK(noise_digits().input_shape() == Shape{1, 16, 16});
  CHECK(rotation(1.0).input_shape() == Shape{2});
  CHECK_THROWS_AS(TaskStream(rotation(1.0), Split::train).batch(0, 0), ConfigError);
}

TEST_CASE("batches are deterministic") {
  for (const auto& spec : {rotation(0.1), noise_digits()}) {
    const TaskStream a(spec, Split::train), b(spec, Split::train), other(spec, Split::train, 1);
    const auto x = a.batch(7, 16), y = b.batch(7, 16);
    CHECK(x.inputs == y.inputs);
    CHECK(x.labels == y.labels);
    CHECK(x.s == y.s);
    CHECK_FALSE(a.batch(8, 16).inputs == x.inputs);
    CHECK_FALSE(other.batch(7, 16).inputs == x.inputs);
    CHECK(a.batch_at(3, 8, 0.4).inputs == b.batch_at(3, 8, 0.4).inputs);
  }
}

TEST_CASE("train angle subset") {
  for (double p : {0.05, 0.1, 0.25, 0.5, 1.0}) {
    const auto idx = train_condition_indices(rotation(p));
    CHECK(idx.size() == static_cast<std::size_t>(std::ceil(p * 360 - 1e-9)));
    CHECK(std::set<std::size_t>(idx.begin(), idx.end()).size() == idx.size());
    CHECK(std::is_sorted(idx.begin(), idx.end()));
    CHECK(idx.back() < 360);
  }
  CHECK(train_condition_indices(rotation(0.1, 1)) != train_condition_indices(rotation(0.1, 2)));
  CHECK(train_condition_indices(rotation(0.1, 1)) == train_condition_indices(rotation(0.1, 1)));

  std::vector<std::size_t> all(360);
  for (std::size_t i = 0; i < 360; ++i) all[i] = i;
  CHECK(train_condition_indices(rotation(1.0)) == all);

  // Training batches only use training angles; test batches cover the grid.
  const auto spec = rotation(0.05);
  const auto idx = train_condition_indices(spec);
  const std::set<std::size_t> allowed(idx.begin(), idx.end());
  std::set<std::size_t> seen_test;
  for (std::uint64_t i = 0; i < 20; ++i) {
    for (double s : TaskStream(spec, Split::train).batch(i, 64).s) {
      const double g = s * 360.0;
      CHECK(std::abs(g - std::round(g)) < 1e-9);
      CHECK(allowed.count(static_cast<std::size_t>(std::llround(g)) % 360) == 1);
    }
    for (double s : TaskStream(spec, Split::test).batch(i, 64).s) seen_test.insert(std::llround(s * 360.0) % 360);
  }
  CHECK(seen_test.size() > 300);

  CHECK(min_angular_distance_to_train(rotation(1.0), 0.3 * 2 * std::numbers::pi) <= std::numbers::pi / 360 + 1e-12);
  const double g0 = 2 * std::numbers::pi * static_cast<double>(idx[0]) / 360.0;
  CHECK(min_angular_distance_to_train(spec, g0) == doctest::Approx(0.0).scale(1.0));
}

TEST_CASE("rotation helpers") {
  CHECK(rotate2d({1, 0}, std::numbers::pi / 2)[1] == doctest::Approx(1.0));
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const std::array<double, 2> p{rng.normal(), rng.normal()};
    const double th = rng.uniform(0, 2 * std::numbers::pi);
    const auto q = rotate2d(rotate2d(p, th), -th);
    CHECK(std::hypot(q[0] - p[0], q[1] - p[1]) <= 1e-12);
  }
  const auto& g = digits16_glyphs()[3];
  CHECK(rotate_image(g, 0.0) == g);
  const Tensor quarter = rotate_image(rotate_image(g, std::numbers::pi / 2), -std::numbers::pi / 2);
  CHECK(ver::relative_error(quarter, g) <= 1e-12);
}

TEST_CASE("unrotated blobs sit at their centres") {
  auto spec = rotation(1.0);
  const TaskStream stream(spec, Split::test, 2);
  const auto b = stream.batch_at(0, 20000, 0.0);
  const auto params = blobs2d_params(4);
  std::vector<std::array<double, 2>> sum(4, {0, 0});
  std::vector<std::size_t> count(4, 0);
  for (std::size_t i = 0; i < b.size(); ++i) {
    sum[b.labels[i]][0] += b.inputs[2 * i];
    sum[b.labels[i]][1] += b.inputs[2 * i + 1];
    ++count[b.labels[i]];
  }
  for (std::size_t c = 0; c < 4; ++c) {
    const auto mu = blobs2d_center(params, c);
    const double tol = 5 * params.sigma / std::sqrt(static_cast<double>(count[c]));
    CHECK(std::abs(sum[c][0] / count[c] - mu[0]) <= tol);
    CHECK(std::abs(sum[c][1] / count[c] - mu[1]) <= tol);
  }
}

TEST_CASE("noise blend endpoints") {
  Rng rng(5);
  std::vector<double> x{0.25, -1.5, 3.0};
  const auto keep = x;
  blend_with_noise(x, 0.0, rng);
  CHECK(x == keep);

  std::vector<double> z(100000, 7.0);
  blend_with_noise(z, 1.0, rng);
  double mean = 0, var = 0;
  for (double v : z) mean += v / z.size();
  for (double v : z) var += (v - mean) * (v - mean) / z.size();
  CHECK(std::abs(mean) <= 0.01);
  CHECK(std::abs(var - 1.0) <= 0.01);

  const TaskStream stream(noise_digits(), Split::test);
  const auto pure = stream.batch_at(1, 400, 1.0);
  mean = var = 0;
  const double n = static_cast<double>(pure.inputs.numel());
  for (double v : pure.inputs.data()) mean += v / n;
  for (double v : pure.inputs.data()) var += (v - mean) * (v - mean) / n;
  CHECK(std::abs(mean) <= 0.01);
  CHECK(std::abs(var - 1.0) <= 0.01);

  for (double s : TaskStream(noise_digits(), Split::train).batch(0, 256).s) CHECK((s >= 0.0 && s <= 1.0));
  auto half = noise_digits();
  half.max_noise = 0.5;
  for (double s : TaskStream(half, Split::train).batch(0, 256).s) CHECK(s <= 0.5);
}

TEST_CASE("blobs2d Bayes classifier is near perfect") {
  const auto spec = rotation(1.0);
  const auto params = blobs2d_params(4);
  std::size_t correct = 0, total = 0;
  for (std::uint64_t i = 0; i < 20; ++i) {
    const auto b = TaskStream(spec, Split::test).batch(i, 1000);
    for (std::size_t k = 0; k < b.size(); ++k, ++total)
      correct += ver::bayes_blobs2d(params, {b.inputs[2 * k], b.inputs[2 * k + 1]}, 2 * std::numbers::pi * b.s[k]) ==
                 b.labels[k];
  }
  CHECK(static_cast<double>(correct) / total >= 0.99);
}

TEST_CASE("digits16 asset") {
  const auto& glyphs = digits16_glyphs();
  REQUIRE(glyphs.size() == 10);
  for (const auto& g : glyphs) {
    CHECK(g.shape() == Shape{16, 16});
    double sum = 0;
    for (double v : g.data()) {
      CHECK((v >= 0.0 && v <= 1.0));
      sum += v;
    }
    CHECK(sum > 5.0);
  }
  for (std::size_t a = 0; a < 10; ++a)
    for (std::size_t b = a + 1; b < 10; ++b) CHECK_FALSE(glyphs[a] == glyphs[b]);
  const std::vector<unsigned char> bad{'D', 'G', '1', '7', 1, 0, 0, 0, 16, 0, 16, 0};
  CHECK_THROWS(parse_digits16(bad));
  const std::vector<unsigned char> short_{'D', 'G', '1', '6', 1, 0, 1, 0, 16, 0, 16, 0};
  CHECK_THROWS(parse_digits16(short_));
}

TEST_CASE("regularized loss") {
  const ManifoldSpec line = ManifoldSpec::line();
  NetworkSpec nspec = default_mlp(2, 4, ConditioningMode::manifold, line);
  nspec.hidden = {5};
  Network net(nspec, 3);
  Rng rng(8);
  for (auto& p : net.bundle().params)
    for (auto& b : p.basis)
      for (auto& v : b.data()) v += rng.normal();
  const auto batch = TaskStream(rotation(1.0), Split::train).batch(0, 12);

  auto value = [&](const std::vector<double>& s, double lambda) {
    Tape tape;
    const auto pass = net.forward(tape, batch.inputs, s);
    const double ce = softmax_cross_entropy(pass.logits, batch.labels).value().item();
    return std::pair{regularized_loss(pass.logits, batch.labels, s, pass.leaves, line, lambda).value().item(), ce};
  };
  auto [l0, ce0] = value(batch.s, 0.0);
  CHECK(l0 == ce0);
  const std::vector<double> zeros(12, 0.0);
  auto [lz, cez] = value(zeros, 0.5);
  CHECK(lz == cez);
  CHECK_THROWS_AS(value(batch.s, -1.0), ConfigError);

  // Single example at s = 0.5: penalty is 0.5 * lambda * |W(0.5)|^2 with W assembled.
  const Tensor x0({1, 2}, std::vector<double>{batch.inputs[0], batch.inputs[1]});
  const std::vector<std::size_t> l{batch.labels[0]};
  const std::vector<double> s{0.5};
  Tape tape;
  const auto pass = net.forward(tape, x0, s);
  const double got = regularized_loss(pass.logits, l, s, pass.leaves, line, 0.1).value().item();
  double sq = 0.0;
  for (const auto& w : point_on_manifold(line, net.bundle(), 0.5)) sq += w.squared_norm();
  Tape t2;
  const double ce = softmax_cross_entropy(t2.constant(net.forward_assembled(x0, s)), l).value().item();
  CHECK(std::abs(got - (ce + 0.5 * 0.1 * sq)) <= 1e-12 * std::max(1.0, std::abs(got)));
}
