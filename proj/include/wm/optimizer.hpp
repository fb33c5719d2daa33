#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "wm/manifold.hpp"

namespace wm {

enum class UpdateRule { sgd_momentum, adam };

std::string to_string(UpdateRule rule);
UpdateRule parse_update_rule(std::string_view name);

struct OptimizerConfig {
  UpdateRule rule = UpdateRule::sgd_momentum;
  double lr = 0.01;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  /// lr 0.01 for SGD with momentum, 2e-4 for Adam.
  static OptimizerConfig defaults_for(UpdateRule rule);
  void validate() const;

  bool operator==(const OptimizerConfig&) const = default;
};

struct UpdateReport {
  std::size_t step = 0;
  double loss = 0.0;
  std::vector<double> grad_norms;      // per basis index, over all parameters
  std::vector<double> rescaled_norms;  // same, after metric rescaling
};

/// Manifold-aware first-order optimizer. Each step first applies the inverse
/// integrated metric to the per-basis gradients, then feeds the result to the
/// plain update rule. Frozen basis points never move and keep zero buffers.
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, const BasisBundle& like);

  /// Throws NumericError naming the parameter and basis index on a
  /// non-finite gradient; the bundle is untouched in that case.
  UpdateReport step(const IMTMatrix& imt, BasisBundle& bundle, const BasisBundle& grads, double loss = 0.0);

  const OptimizerConfig& config() const { return config_; }
  std::size_t steps() const { return steps_; }
  /// Velocity (SGD) or first moment (Adam) buffers, shaped like the bundle.
  const BasisBundle& first_buffers() const { return first_; }
  const BasisBundle& second_buffers() const { return second_; }

 private:
  OptimizerConfig config_;
  BasisBundle first_;
  BasisBundle second_;
  std::size_t steps_ = 0;
};

struct KktResult {
  bool pass = false;
  double min_margin = 0.0;   // min over trials of movement(trial) - movement(candidate)
  double candidate_movement = 0.0;
  std::size_t trials = 0;
};

/// Integrated squared movement int_0^1 |sum_k a_k(s) delta_k|^2 ds, evaluated
/// with at least 1000 Gauss-Legendre nodes aligned to coefficient breakpoints.
double volumetric_movement(const ManifoldSpec& spec, const BasisBundle& delta);

/// First-order descent <grads, delta> over learnable basis points.
double first_order_descent(const IMTMatrix& imt, const BasisBundle& grads, const BasisBundle& delta);

/// Checks that `delta` moves the manifold least among perturbations with the
/// same first-order descent. Random directions over the learnable basis points
/// are rescaled to match <grads, delta> and must not move less (slack -1e-9).
KktResult kkt_optimality_check(const ManifoldSpec& spec, const BasisBundle& grads, const BasisBundle& delta,
                               std::uint64_t seed, std::size_t trials = 100, double slack = 1e-9);

/// Same check against one given alternative direction.
double kkt_margin(const ManifoldSpec& spec, const BasisBundle& grads, const BasisBundle& delta,
                  const BasisBundle& alternative);

}  // namespace wm
