#include "wm/verification.hpp"

#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

#include "wm/rng.hpp"

namespace wm::verification {

QuadratureRule gauss_legendre(std::size_t n) {
  if (n == 0) throw ContractError("gauss_legendre needs at least one node");
  QuadratureRule rule;
  rule.nodes.assign(n, 0.0);
  rule.weights.assign(n, 0.0);
  const std::size_t half = (n + 1) / 2;
  for (std::size_t i = 0; i < half; ++i) {
    double x = std::cos(std::numbers::pi * (static_cast<double>(i) + 0.75) / (static_cast<double>(n) + 0.5));
    double dp = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      double p0 = 1.0, p1 = x;
      for (std::size_t k = 2; k <= n; ++k) {
        const double pk = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / static_cast<double>(k);
        p0 = p1;
        p1 = pk;
      }
      if (n == 1) {
        p1 = x;
        p0 = 1.0;
      }
      dp = static_cast<double>(n) * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-16) break;
    }
    // Recompute the derivative at the converged node for the weight.
    double p0 = 1.0, p1 = x;
    for (std::size_t k = 2; k <= n; ++k) {
      const double pk = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / static_cast<double>(k);
      p0 = p1;
      p1 = pk;
    }
    dp = n == 1 ? 1.0 : static_cast<double>(n) * (x * p1 - p0) / (x * x - 1.0);
    const double w = 2.0 / ((1.0 - x * x) * dp * dp);
    rule.nodes[i] = -x;
    rule.nodes[n - 1 - i] = x;
    rule.weights[i] = w;
    rule.weights[n - 1 - i] = w;
  }
  if (n % 2 == 1) rule.nodes[n / 2] = 0.0;
  return rule;
}

QuadratureRule composite_simpson(const std::vector<double>& breakpoints, std::size_t intervals_per_span) {
  if (intervals_per_span < 2 || intervals_per_span % 2 != 0)
    throw ContractError("composite Simpson needs an even interval count >= 2");
  QuadratureRule rule;
  rule.scheme = QuadratureScheme::simpson;
  for (std::size_t span = 0; span + 1 < breakpoints.size(); ++span) {
    const double lo = breakpoints[span], hi = breakpoints[span + 1];
    const double h = (hi - lo) / static_cast<double>(intervals_per_span);
    for (std::size_t j = 0; j <= intervals_per_span; ++j) {
      const double w = (j == 0 || j == intervals_per_span) ? 1.0 : (j % 2 == 1 ? 4.0 : 2.0);
      rule.nodes.push_back(lo + h * static_cast<double>(j));
      rule.weights.push_back(w * h / 3.0);
    }
  }
  return rule;
}

QuadratureRule composite_gauss(const std::vector<double>& breakpoints, std::size_t points_per_panel,
                               std::size_t panels_per_span) {
  const auto base = gauss_legendre(points_per_panel);
  QuadratureRule rule;
  rule.scheme = QuadratureScheme::gauss_legendre;
  for (std::size_t span = 0; span + 1 < breakpoints.size(); ++span) {
    const double lo = breakpoints[span], hi = breakpoints[span + 1];
    const double width = (hi - lo) / static_cast<double>(panels_per_span);
    for (std::size_t p = 0; p < panels_per_span; ++p) {
      const double a = lo + width * static_cast<double>(p);
      for (std::size_t q = 0; q < base.size(); ++q) {
        rule.nodes.push_back(a + 0.5 * width * (base.nodes[q] + 1.0));
        rule.weights.push_back(0.5 * width * base.weights[q]);
      }
    }
  }
  return rule;
}

Eigen::MatrixXd gram_with(const ManifoldSpec& spec, const QuadratureRule& rule) {
  const auto n = static_cast<Eigen::Index>(spec.n_basis);
  Eigen::MatrixXd t = Eigen::MatrixXd::Zero(n, n);
  for (std::size_t q = 0; q < rule.size(); ++q) {
    const auto a = basis_coefficients(spec, rule.nodes[q]);
    const Eigen::Map<const Eigen::VectorXd> av(a.data(), n);
    t.noalias() += rule.weights[q] * av * av.transpose();
  }
  return t;
}

GramEstimate quad_gram(const ManifoldSpec& spec, QuadratureScheme scheme) {
  spec.validate();
  const auto edges = coefficient_breakpoints(spec);
  const std::size_t spans = edges.size() - 1;
  constexpr std::size_t kMinNodes = 1024;
  constexpr std::size_t kMaxNodes = std::size_t{1} << 20;
  constexpr std::size_t kGaussPoints = 64;

  std::size_t level = 0;
  if (scheme == QuadratureScheme::simpson) {
    level = (kMinNodes + spans - 1) / spans;
    level += level % 2;
  } else {
    level = std::max<std::size_t>(1, (kMinNodes + kGaussPoints * spans - 1) / (kGaussPoints * spans));
  }
  auto rule_at = [&](std::size_t lv) {
    return scheme == QuadratureScheme::simpson ? composite_simpson(edges, lv)
                                               : composite_gauss(edges, kGaussPoints, lv);
  };
  QuadratureRule rule = rule_at(level);
  Eigen::MatrixXd prev = gram_with(spec, rule);
  while (true) {
    QuadratureRule finer = rule_at(level * 2);
    if (finer.size() > kMaxNodes) throw Error("quadrature for " + spec.describe() + " did not converge");
    Eigen::MatrixXd next = gram_with(spec, finer);
    const double change = (next - prev).cwiseAbs().maxCoeff();
    level *= 2;
    rule = std::move(finer);
    prev = std::move(next);
    if (change < 1e-12) {
      rule.error_estimate = change;
      return {prev, rule, change};
    }
  }
}

Eigen::MatrixXd masked_inverse(const Eigen::MatrixXd& t, const std::vector<bool>& frozen) {
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < t.rows(); ++i)
    if (!frozen[static_cast<std::size_t>(i)]) keep.push_back(i);
  const auto m = static_cast<Eigen::Index>(keep.size());
  Eigen::MatrixXd sub(m, m);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j) sub(i, j) = t(keep[i], keep[j]);
  const Eigen::MatrixXd inv = sub.inverse();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(t.rows(), t.cols());
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j) out(keep[i], keep[j]) = inv(i, j);
  return out;
}

double imt_consistency_error(const IMTMatrix& imt, const Eigen::MatrixXd& t) {
  double worst = 0.0;
  for (std::size_t i = 0; i < imt.n; ++i) {
    if (imt.is_frozen(i)) continue;
    for (std::size_t j = 0; j < imt.n; ++j) {
      if (imt.is_frozen(j)) continue;
      double acc = 0.0;
      for (std::size_t k = 0; k < imt.n; ++k)
        if (!imt.is_frozen(k)) acc += imt(i, k) * t(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j));
      worst = std::max(worst, std::abs(acc - (i == j ? 1.0 : 0.0)));
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------

namespace {

Eigen::VectorXd flatten_point(const std::vector<Tensor>& params) {
  std::size_t d = 0;
  for (const auto& t : params) d += t.numel();
  Eigen::VectorXd v(static_cast<Eigen::Index>(d));
  Eigen::Index at = 0;
  for (const auto& t : params)
    for (double x : t.data()) v(at++) = x;
  return v;
}

Tensor slice_rows(const Tensor& t, std::size_t i) {
  Shape one = t.shape();
  one[0] = 1;
  const std::size_t row = t.numel() / t.dim(0);
  return Tensor(one, std::vector<double>(t.data().begin() + i * row, t.data().begin() + (i + 1) * row));
}

}  // namespace

ToyInstance make_toy_instance(const ManifoldSpec& spec, std::uint64_t seed, std::size_t batch_size) {
  // 2 inputs give 6 parameters per basis point; drop to 1 input (4 per point)
  // when that would exceed 20 in total.
  const std::size_t features = 6 * spec.n_basis <= 20 ? 2 : 1;
  NetworkSpec ns;
  ns.input_shape = {features};
  ns.hidden = {};
  ns.classes = 2;
  ns.mode = ConditioningMode::manifold;
  ns.manifold = spec;
  Network net(ns, seed);
  Rng rng = Rng::derive(seed, {0x70f});
  for (auto& p : net.bundle().params)
    for (auto& b : p.basis)
      for (auto& v : b.data()) v += rng.normal();
  ConditionedBatch batch{Tensor({batch_size, features}), std::vector<std::size_t>(batch_size), std::vector<double>(batch_size)};
  for (auto& v : batch.inputs.data()) v = rng.normal();
  for (auto& l : batch.labels) l = rng.index(2);
  for (auto& s : batch.s) s = rng.uniform();
  return {std::move(net), std::move(batch)};
}

BasisBundle dense_update(const Network& net, const ConditionedBatch& batch) {
  const auto& spec = net.manifold();
  const auto& bundle = net.bundle();
  const std::size_t n = spec.n_basis;
  const auto d = static_cast<Eigen::Index>(bundle.point_elements());
  const auto N = static_cast<Eigen::Index>(n) * d;
  const std::vector<bool> frozen = integrated_metric_inverse(spec).frozen;

  auto jacobian = [&](double s) {
    const auto a = basis_coefficients(spec, s);
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(d, N);
    for (std::size_t k = 0; k < n; ++k)
      J.block(0, static_cast<Eigen::Index>(k) * d, d, d) = a[k] * Eigen::MatrixXd::Identity(d, d);
    return J;
  };

  // int_0^1 J^T J ds; 64-point Gauss per breakpoint span is exact for the
  // polynomial kinds and converged for the ellipse.
  const auto rule = composite_gauss(coefficient_breakpoints(spec), 64, 1);
  Eigen::MatrixXd metric = Eigen::MatrixXd::Zero(N, N);
  for (std::size_t q = 0; q < rule.size(); ++q) {
    const Eigen::MatrixXd J = jacobian(rule.nodes[q]);
    metric.noalias() += rule.weights[q] * J.transpose() * J;
  }

  // (1/B) sum_i J(s_i)^T grad_W l(M(s_i, P)).
  Eigen::VectorXd g = Eigen::VectorXd::Zero(N);
  const std::size_t B = batch.size();
  for (std::size_t i = 0; i < B; ++i) {
    const double s = batch.s[i];
    const auto W = point_on_manifold(spec, bundle, s);
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : W) vars.push_back(tape.variable(t));
    const Var logits = net.forward_with(tape, vars, slice_rows(batch.inputs, i), std::span<const double>(&s, 1));
    const std::size_t label = batch.labels[i];
    const Var loss = softmax_cross_entropy(logits, std::span<const std::size_t>(&label, 1));
    tape.backward(loss);
    std::vector<Tensor> grads;
    for (const auto& v : vars) grads.push_back(tape.grad(v));
    g.noalias() += jacobian(s).transpose() * flatten_point(grads) / static_cast<double>(B);
  }

  std::vector<Eigen::Index> keep;
  for (std::size_t k = 0; k < n; ++k)
    if (!frozen[k])
      for (Eigen::Index r = 0; r < d; ++r) keep.push_back(static_cast<Eigen::Index>(k) * d + r);
  const auto m = static_cast<Eigen::Index>(keep.size());
  Eigen::MatrixXd sub(m, m);
  Eigen::VectorXd rhs(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    rhs(i) = g(keep[i]);
    for (Eigen::Index j = 0; j < m; ++j) sub(i, j) = metric(keep[i], keep[j]);
  }
  Eigen::LDLT<Eigen::MatrixXd> ldlt(sub);
  if (ldlt.info() != Eigen::Success) throw Error("dense metric is singular beyond frozen basis points");
  const Eigen::VectorXd x = ldlt.solve(rhs);
  Eigen::VectorXd full = Eigen::VectorXd::Zero(N);
  for (Eigen::Index i = 0; i < m; ++i) full(keep[i]) = x(i);

  BasisBundle out = bundle.zeros_like();
  for (std::size_t k = 0; k < n; ++k) {
    Eigen::Index at = static_cast<Eigen::Index>(k) * d;
    for (auto& p : out.params)
      for (auto& v : p.basis[k].data()) v = full(at++);
  }
  return out;
}

BasisBundle factored_direction(const Network& net, const ConditionedBatch& batch) {
  Tape tape;
  const auto pass = net.forward(tape, batch.inputs, batch.s);
  const Var loss = softmax_cross_entropy(pass.logits, batch.labels);
  const auto grads = per_basis_gradients(net, tape, pass, loss);
  return rescale_gradients(integrated_metric_inverse(net.manifold()), grads);
}

double relative_error(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "relative_error");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

double relative_error(const BasisBundle& a, const BasisBundle& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  if (a.params.size() != b.params.size()) throw ContractError("relative_error: bundle layouts differ");
  for (std::size_t p = 0; p < a.params.size(); ++p) {
    const auto& pa = a.params[p].basis;
    const auto& pb = b.params[p].basis;
    if (pa.size() != pb.size()) throw ContractError("relative_error: bundle arities differ");
    for (std::size_t k = 0; k < pa.size(); ++k) {
      require_same_shape(pa[k], pb[k], "relative_error");
      for (std::size_t i = 0; i < pa[k].numel(); ++i) {
        diff += (pa[k][i] - pb[k][i]) * (pa[k][i] - pb[k][i]);
        na += pa[k][i] * pa[k][i];
        nb += pb[k][i] * pb[k][i];
      }
    }
  }
  const double denom = std::sqrt(std::max(na, nb));
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

Tensor finite_difference(const std::function<double(const Tensor&)>& f, const Tensor& x, double eps) {
  Tensor grad = Tensor::zeros_like(x);
  Tensor probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    probe[i] = x[i] + eps;
    const double up = f(probe);
    probe[i] = x[i] - eps;
    const double down = f(probe);
    probe[i] = x[i];
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

namespace {

using Objective = std::function<Var(Tape&, const std::vector<Var>&)>;

Tensor random_tensor(Rng& rng, Shape shape) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

// Reverse-mode vs central differences for every input of `objective`.
double check_objective(const Objective& objective, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.variable(t));
  tape.backward(objective(tape, vars));
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor analytic = tape.grad(vars[i]);
    const Tensor numeric = finite_difference(
        [&](const Tensor& probe) {
          Tape t;
          std::vector<Var> vs;
          for (std::size_t j = 0; j < inputs.size(); ++j) vs.push_back(t.variable(j == i ? probe : inputs[j]));
          return objective(t, vs).value().item();
        },
        inputs[i]);
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  return worst;
}

// Projects an op output onto a fixed random direction to get a scalar.
Objective projected(Rng& rng, const std::function<Var(Tape&, const std::vector<Var>&)>& op) {
  auto dir = std::make_shared<Tensor>();
  auto rng_copy = std::make_shared<Rng>(rng.next());
  return [op, dir, rng_copy](Tape& t, const std::vector<Var>& in) {
    const Var out = op(t, in);
    if (dir->empty()) *dir = random_tensor(*rng_copy, out.shape());
    return dot(out, t.constant(*dir));
  };
}

double check_network(const NetworkSpec& spec, std::uint64_t seed, double lambda) {
  Rng rng = Rng::derive(seed, {0x9e7});
  Network net(spec, seed);
  for (auto& p : net.bundle().params)
    for (auto& b : p.basis)
      for (auto& v : b.data()) v += 0.3 * rng.normal();
  const std::size_t B = 6;
  Shape shape{B};
  shape.insert(shape.end(), spec.input_shape.begin(), spec.input_shape.end());
  const Tensor x = random_tensor(rng, shape);
  std::vector<std::size_t> labels(B);
  std::vector<double> s(B);
  for (auto& l : labels) l = rng.index(spec.classes);
  for (auto& v : s) v = rng.uniform();

  const auto& manifold = net.manifold();
  auto loss_of = [&](const BasisBundle& bundle, BasisBundle* grads) {
    Network probe(spec, bundle);
    Tape tape;
    const auto pass = probe.forward(tape, x, s);
    const Var loss = regularized_loss(pass.logits, labels, s, pass.leaves, manifold, lambda);
    if (grads) *grads = per_basis_gradients(probe, tape, pass, loss);
    return loss.value().item();
  };
  BasisBundle analytic;
  loss_of(net.bundle(), &analytic);
  BasisBundle numeric = net.bundle().zeros_like();
  for (std::size_t p = 0; p < net.bundle().params.size(); ++p)
    for (std::size_t k = 0; k < manifold.n_basis; ++k) {
      numeric.params[p].basis[k] = finite_difference(
          [&](const Tensor& probe) {
            BasisBundle b = net.bundle();
            b.params[p].basis[k] = probe;
            return loss_of(b, nullptr);
          },
          net.bundle().params[p].basis[k]);
    }
  return relative_error(analytic, numeric);
}

}  // namespace

std::vector<GradCheck> gradient_checks(std::uint64_t seed) {
  Rng rng = Rng::derive(seed, {0x6c});
  std::vector<GradCheck> out;
  auto run = [&](const std::string& name, std::vector<Tensor> inputs,
                 const std::function<Var(Tape&, const std::vector<Var>&)>& op) {
    out.push_back({name, check_objective(projected(rng, op), inputs)});
  };

  run("matmul", {random_tensor(rng, {5, 7}), random_tensor(rng, {7, 3})},
      [](Tape&, const std::vector<Var>& v) { return matmul(v[0], v[1]); });
  run("conv2d", {random_tensor(rng, {2, 2, 6, 6}), random_tensor(rng, {3, 2, 3, 3})},
      [](Tape&, const std::vector<Var>& v) { return conv2d(v[0], v[1]); });
  run("relu", {random_tensor(rng, {4, 5})}, [](Tape&, const std::vector<Var>& v) { return relu(v[0]); });
  run("add", {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})},
      [](Tape&, const std::vector<Var>& v) { return add(v[0], v[1]); });
  run("scale", {random_tensor(rng, {3, 4})}, [](Tape&, const std::vector<Var>& v) { return scale(v[0], 1.7); });
  run("maxpool2x2", {random_tensor(rng, {2, 3, 4, 5})},
      [](Tape&, const std::vector<Var>& v) { return maxpool2x2(v[0]); });
  run("flatten", {random_tensor(rng, {2, 3, 2, 2})}, [](Tape&, const std::vector<Var>& v) { return flatten(v[0]); });
  run("add_bias", {random_tensor(rng, {2, 3, 4, 4}), random_tensor(rng, {3})},
      [](Tape&, const std::vector<Var>& v) { return add_bias(v[0], v[1]); });
  run("concat_cols", {random_tensor(rng, {3, 2}), random_tensor(rng, {3, 4})},
      [](Tape&, const std::vector<Var>& v) { return concat_cols(v[0], v[1]); });
  run("embedding", {random_tensor(rng, {6, 4})}, [](Tape&, const std::vector<Var>& v) {
    const std::vector<std::size_t> idx{0, 5, 2, 2};
    return embedding(v[0], idx);
  });
  {
    std::vector<double> coeffs(4 * 3);
    for (auto& c : coeffs) c = rng.normal();
    run("mix_rows", {random_tensor(rng, {4, 5}), random_tensor(rng, {4, 5}), random_tensor(rng, {4, 5})},
        [coeffs](Tape&, const std::vector<Var>& v) { return mix_rows(v, coeffs); });
  }
  run("linear_combination", {random_tensor(rng, {2, 3}), random_tensor(rng, {2, 3})},
      [](Tape&, const std::vector<Var>& v) {
        const std::vector<double> w{0.3, -1.2};
        return linear_combination(v, w);
      });
  {
    std::vector<std::size_t> labels(4);
    for (auto& l : labels) l = rng.index(3);
    out.push_back({"softmax_cross_entropy",
                   check_objective([labels](Tape&, const std::vector<Var>& v) { return softmax_cross_entropy(v[0], labels); },
                                   {random_tensor(rng, {4, 3})})});
  }
  out.push_back({"sum", check_objective([](Tape&, const std::vector<Var>& v) { return sum(v[0]); },
                                        {random_tensor(rng, {3, 3})})});
  out.push_back({"dot", check_objective([](Tape&, const std::vector<Var>& v) { return dot(v[0], v[1]); },
                                        {random_tensor(rng, {3, 2}), random_tensor(rng, {3, 2})})});

  NetworkSpec mlp;
  mlp.input_shape = {2};
  mlp.hidden = {8, 8};
  mlp.classes = 3;
  mlp.mode = ConditioningMode::manifold;
  mlp.manifold = ManifoldSpec::ellipse();
  out.push_back({"mlp_ellipse", check_network(mlp, seed, 0.0)});

  NetworkSpec cnn;
  cnn.input_shape = {1, 8, 8};
  cnn.conv_filters = {2};
  cnn.hidden = {4};
  cnn.classes = 3;
  cnn.mode = ConditioningMode::manifold;
  cnn.manifold = ManifoldSpec::line();
  out.push_back({"cnn_line", check_network(cnn, seed, 0.0)});

  NetworkSpec reg = mlp;
  reg.hidden = {6};
  reg.manifold = ManifoldSpec::line();
  out.push_back({"regularized_loss_line", check_network(reg, seed, 0.1)});
  reg.manifold = ManifoldSpec::cubic_bspline(5);
  out.push_back({"regularized_loss_bspline", check_network(reg, seed, 0.1)});
  return out;
}

double factored_forward_error(std::uint64_t seed) {
  static const ManifoldSpec kinds[] = {ManifoldSpec::line(), ManifoldSpec::ellipse(), ManifoldSpec::tethered_rod(),
                                       ManifoldSpec::cubic_bspline(6), ManifoldSpec::cubic_bspline(5, true),
                                       ManifoldSpec::point()};
  Rng rng = Rng::derive(seed, {0xf0});
  NetworkSpec spec;
  spec.mode = ConditioningMode::manifold;
  spec.manifold = kinds[seed % std::size(kinds)];
  spec.classes = 2 + rng.index(4);
  if (rng.index(3) == 0) {
    spec.input_shape = {2, 8, 8};
    spec.conv_filters = {3};
    spec.hidden = {5};
  } else {
    spec.input_shape = {2 + rng.index(4)};
    spec.hidden = {4 + rng.index(8), 4 + rng.index(8)};
  }
  Network net(spec, rng.next());
  for (auto& p : net.bundle().params)
    for (auto& b : p.basis)
      for (auto& v : b.data()) v += 0.5 * rng.normal();
  const std::size_t B = 1 + rng.index(16);
  Shape shape{B};
  shape.insert(shape.end(), spec.input_shape.begin(), spec.input_shape.end());
  const Tensor x = random_tensor(rng, shape);
  std::vector<double> s(B);
  for (auto& v : s) v = rng.uniform();
  if (B > 2) {
    s[0] = 0.0;
    s[1] = 1.0;
  }
  Tape tape;
  const Tensor factored = net.forward(tape, x, s).logits.value();
  const Tensor assembled = net.forward_assembled(x, s);
  double diff = 0.0;
  for (std::size_t i = 0; i < factored.numel(); ++i) diff = std::max(diff, std::abs(factored[i] - assembled[i]));
  const double scale = assembled.max_abs();
  return scale == 0.0 ? diff : diff / scale;
}

std::size_t bayes_blobs2d(const Blobs2dParams& params, std::array<double, 2> point, double theta) {
  const auto base = rotate2d(point, -theta);
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < params.classes; ++c) {
    const auto mu = blobs2d_center(params, c);
    const double d = (base[0] - mu[0]) * (base[0] - mu[0]) + (base[1] - mu[1]) * (base[1] - mu[1]);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

}  // namespace wm::verification
