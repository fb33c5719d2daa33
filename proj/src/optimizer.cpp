#include "wm/optimizer.hpp"

#include <cmath>
#include <deque>
#include <limits>

#include "wm/rng.hpp"

namespace wm {

std::string to_string(UpdateRule rule) { return rule == UpdateRule::sgd_momentum ? "sgd_momentum" : "adam"; }

UpdateRule parse_update_rule(std::string_view name) {
  if (name == "sgd_momentum" || name == "sgd") return UpdateRule::sgd_momentum;
  if (name == "adam") return UpdateRule::adam;
  throw ConfigError("unknown update rule '" + std::string(name) + "'");
}

OptimizerConfig OptimizerConfig::defaults_for(UpdateRule rule) {
  OptimizerConfig c;
  c.rule = rule;
  c.lr = rule == UpdateRule::adam ? 2e-4 : 0.01;
  return c;
}

void OptimizerConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive, got " + std::to_string(lr));
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adam betas must be in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("adam epsilon must be positive");
}

Optimizer::Optimizer(OptimizerConfig config, const BasisBundle& like)
    : config_(config), first_(like.zeros_like()), second_(like.zeros_like()) {
  config_.validate();
  like.check_consistent();
}

UpdateReport Optimizer::step(const IMTMatrix& imt, BasisBundle& bundle, const BasisBundle& grads, double loss) {
  const std::size_t n = imt.n;
  if (grads.params.size() != bundle.params.size() || bundle.params.size() != first_.params.size())
    throw ContractError("optimizer step: gradient layout does not match the bundle");
  for (std::size_t p = 0; p < grads.params.size(); ++p) {
    const auto& gp = grads.params[p];
    if (gp.basis.size() != n || bundle.params[p].basis.size() != n)
      throw ContractError("optimizer step: " + gp.name + " has the wrong number of basis points");
    for (std::size_t k = 0; k < n; ++k) {
      require_same_shape(gp.basis[k], bundle.params[p].basis[k], "optimizer step");
      if (!gp.basis[k].all_finite())
        throw NumericError("non-finite gradient in " + gp.name + " at basis " + std::to_string(k));
    }
  }

  UpdateReport report;
  report.step = steps_;
  report.loss = loss;
  report.grad_norms.assign(n, 0.0);
  report.rescaled_norms.assign(n, 0.0);

  const BasisBundle rescaled = rescale_gradients(imt, grads);
  for (std::size_t p = 0; p < grads.params.size(); ++p)
    for (std::size_t k = 0; k < n; ++k) {
      report.grad_norms[k] += grads.params[p].basis[k].squared_norm();
      report.rescaled_norms[k] += rescaled.params[p].basis[k].squared_norm();
    }
  for (std::size_t k = 0; k < n; ++k) {
    report.grad_norms[k] = std::sqrt(report.grad_norms[k]);
    report.rescaled_norms[k] = std::sqrt(report.rescaled_norms[k]);
  }

  ++steps_;
  const double lr = config_.lr;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (std::size_t p = 0; p < bundle.params.size(); ++p)
    for (std::size_t k = 0; k < n; ++k) {
      if (imt.is_frozen(k)) continue;
      auto w = bundle.params[p].basis[k].data();
      auto g = rescaled.params[p].basis[k].data();
      auto m = first_.params[p].basis[k].data();
      auto v = second_.params[p].basis[k].data();
      if (config_.rule == UpdateRule::sgd_momentum) {
        for (std::size_t i = 0; i < w.size(); ++i) {
          m[i] = config_.momentum * m[i] + g[i];
          w[i] -= lr * m[i];
        }
      } else {
        for (std::size_t i = 0; i < w.size(); ++i) {
          m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
          v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
          w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.eps);
        }
      }
    }
  return report;
}

// ---------------------------------------------------------------------------

namespace {

struct MovementRule {
  std::vector<double> nodes, weights;
};

const MovementRule& movement_rule(const ManifoldSpec& spec) {
  // 1024 Gauss-Legendre nodes split evenly over the coefficient spans.
  static thread_local std::deque<std::pair<ManifoldSpec, MovementRule>> cache;
  for (const auto& [s, r] : cache)
    if (s == spec) return r;
  const auto edges = coefficient_breakpoints(spec);
  const std::size_t spans = edges.size() - 1;
  const std::size_t per_span = (1024 + spans - 1) / spans;
  // Gauss-Legendre nodes by Newton iteration on P_m.
  std::vector<double> x(per_span), w(per_span);
  const std::size_t m = per_span;
  for (std::size_t i = 0; i < m; ++i) {
    double z = std::cos(3.141592653589793 * (static_cast<double>(i) + 0.75) / (static_cast<double>(m) + 0.5));
    double dp = 1.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = z;
      for (std::size_t k = 2; k <= m; ++k) {
        const double pk = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p0) / static_cast<double>(k);
        p0 = p1;
        p1 = pk;
      }
      dp = static_cast<double>(m) * (z * p1 - p0) / (z * z - 1.0);
      const double dz = p1 / dp;
      z -= dz;
      if (std::abs(dz) < 1e-15) break;
    }
    x[i] = z;
    w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
  }
  MovementRule rule;
  for (std::size_t s = 0; s < spans; ++s) {
    const double lo = edges[s], hi = edges[s + 1];
    for (std::size_t i = 0; i < m; ++i) {
      rule.nodes.push_back(lo + 0.5 * (hi - lo) * (x[i] + 1.0));
      rule.weights.push_back(0.5 * (hi - lo) * w[i]);
    }
  }
  cache.emplace_back(spec, std::move(rule));
  return cache.back().second;
}

double inner(const BasisBundle& a, const BasisBundle& b, const std::vector<bool>& frozen) {
  double acc = 0.0;
  for (std::size_t p = 0; p < a.params.size(); ++p)
    for (std::size_t k = 0; k < a.params[p].basis.size(); ++k)
      if (!frozen[k]) acc += a.params[p].basis[k].dot(b.params[p].basis[k]);
  return acc;
}

BasisBundle scaled(const BasisBundle& b, double f) {
  BasisBundle out = b;
  for (auto& p : out.params)
    for (auto& t : p.basis)
      for (auto& v : t.data()) v *= f;
  return out;
}

}  // namespace

double volumetric_movement(const ManifoldSpec& spec, const BasisBundle& delta) {
  const auto& rule = movement_rule(spec);
  const std::size_t n = spec.n_basis;
  // |sum_k a_k delta_k|^2 = a^T G a with G_kl = <delta_k, delta_l>.
  std::vector<double> gram(n * n, 0.0);
  for (const auto& p : delta.params)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t l = 0; l < n; ++l) gram[k * n + l] += p.basis[k].dot(p.basis[l]);
  double total = 0.0;
  for (std::size_t q = 0; q < rule.nodes.size(); ++q) {
    const auto a = basis_coefficients(spec, rule.nodes[q]);
    double v = 0.0;
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t l = 0; l < n; ++l) v += a[k] * a[l] * gram[k * n + l];
    total += rule.weights[q] * v;
  }
  return total;
}

double first_order_descent(const IMTMatrix& imt, const BasisBundle& grads, const BasisBundle& delta) {
  return inner(grads, delta, imt.frozen);
}

double kkt_margin(const ManifoldSpec& spec, const BasisBundle& grads, const BasisBundle& delta,
                  const BasisBundle& alternative) {
  const auto& imt = integrated_metric_inverse(spec);
  const double target = first_order_descent(imt, grads, delta);
  const double have = first_order_descent(imt, grads, alternative);
  if (have == 0.0) throw ContractError("kkt_margin: alternative gives no first-order descent");
  return volumetric_movement(spec, scaled(alternative, target / have)) - volumetric_movement(spec, delta);
}

KktResult kkt_optimality_check(const ManifoldSpec& spec, const BasisBundle& grads, const BasisBundle& delta,
                               std::uint64_t seed, std::size_t trials, double slack) {
  const auto& imt = integrated_metric_inverse(spec);
  KktResult result;
  result.candidate_movement = volumetric_movement(spec, delta);
  result.min_margin = std::numeric_limits<double>::infinity();
  const double target = first_order_descent(imt, grads, delta);
  if (inner(grads, grads, imt.frozen) == 0.0) {
    // No descent is possible; every equal-descent perturbation is zero.
    result.min_margin = -result.candidate_movement;
    result.pass = result.min_margin >= -slack;
    return result;
  }
  Rng rng = Rng::derive(seed, {0x4b4b});
  while (result.trials < trials) {
    BasisBundle alt = delta.zeros_like();
    for (auto& p : alt.params)
      for (std::size_t k = 0; k < p.basis.size(); ++k)
        if (!imt.is_frozen(k))
          for (auto& v : p.basis[k].data()) v = rng.normal();
    const double have = first_order_descent(imt, grads, alt);
    // Near-orthogonal draws would need an enormous rescale; redraw.
    if (std::abs(have) < 1e-3 * std::sqrt(inner(grads, grads, imt.frozen) * inner(alt, alt, imt.frozen))) continue;
    const double margin = volumetric_movement(spec, scaled(alt, target / have)) - result.candidate_movement;
    result.min_margin = std::min(result.min_margin, margin);
    ++result.trials;
  }
  result.pass = result.min_margin >= -slack;
  return result;
}

}  // namespace wm
