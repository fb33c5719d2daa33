#pragma once

// Brute-force references for the analytic machinery: quadrature of the
// manifold integrals, explicit dense construction of the steepest-descent
// update, finite-difference gradients and the Bayes classifier for blobs2d.
// Kept in the library so `wmfold verify` can run them in release builds.

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "wm/manifold.hpp"
#include "wm/network.hpp"
#include "wm/tasks.hpp"

namespace wm::verification {

enum class QuadratureScheme { simpson, gauss_legendre };

struct QuadratureRule {
  QuadratureScheme scheme = QuadratureScheme::gauss_legendre;
  std::vector<double> nodes;
  std::vector<double> weights;
  double error_estimate = 0.0;

  std::size_t size() const { return nodes.size(); }
};

/// n-point Gauss-Legendre nodes/weights on [-1, 1] (Newton on P_n).
QuadratureRule gauss_legendre(std::size_t n);

/// Composite rules over [0, 1] with every breakpoint as a panel edge.
QuadratureRule composite_simpson(const std::vector<double>& breakpoints, std::size_t intervals_per_span);
QuadratureRule composite_gauss(const std::vector<double>& breakpoints, std::size_t points_per_panel,
                               std::size_t panels_per_span);

/// Gram matrix of a rule: T_ij = sum_q w_q a_i(s_q) a_j(s_q).
Eigen::MatrixXd gram_with(const ManifoldSpec& spec, const QuadratureRule& rule);

struct GramEstimate {
  Eigen::MatrixXd t;
  QuadratureRule rule;
  double last_change = 0.0;  // max-abs change of the final doubling
};

/// int_0^1 a a^T ds, doubling the node count until successive estimates
/// differ by < 1e-12 (max-abs). Throws Error past 2^20 nodes.
GramEstimate quad_gram(const ManifoldSpec& spec, QuadratureScheme scheme);

/// Learnable-block inverse of a Gram matrix, zero rows/cols where frozen.
Eigen::MatrixXd masked_inverse(const Eigen::MatrixXd& t, const std::vector<bool>& frozen);

/// max-abs of C T - I over the learnable block.
double imt_consistency_error(const IMTMatrix& imt, const Eigen::MatrixXd& t);

// ---------------------------------------------------------------------------

/// Small network + batch used by the equivalence checks.
struct ToyInstance {
  Network net;
  ConditionedBatch batch;
};

/// Random toy: 2 -> 2 softmax classifier (6 parameters per basis point), or
/// 1 -> 2 (4 per point) when n_basis > 3, so at most 20 parameters in total.
/// Basis points are spread O(1) apart; batch of 8 with random labels and s.
ToyInstance make_toy_instance(const ManifoldSpec& spec, std::uint64_t seed, std::size_t batch_size = 8);

/// Explicit route to the steepest-descent direction:
///   [int J^T J ds]^+ (1/B) sum_i J(s_i)^T grad_W l_i
/// with J the full d x (n d) Jacobian, the integral by converged quadrature
/// and grad_W l_i from the plain network at W = M(s_i, P). The pseudo-inverse
/// is taken over learnable basis points only. Returned with bundle layout and
/// without the minus sign or step size.
BasisBundle dense_update(const Network& net, const ConditionedBatch& batch);

/// The production route: factored forward, per-basis gradients, rescaling.
BasisBundle factored_direction(const Network& net, const ConditionedBatch& batch);

/// |a - b|_2 / max(|a|_2, |b|_2), 0 when both vanish.
double relative_error(const BasisBundle& a, const BasisBundle& b);
double relative_error(const Tensor& a, const Tensor& b);

/// Central differences of a scalar function.
Tensor finite_difference(const std::function<double(const Tensor&)>& f, const Tensor& x, double eps = 1e-6);

struct GradCheck {
  std::string name;
  double rel_error = 0.0;
};

/// Reverse-mode vs central differences for every op and for end-to-end MLP,
/// CNN and the regularized manifold loss, for one seed.
std::vector<GradCheck> gradient_checks(std::uint64_t seed);

/// Max relative error (scaled by the largest logit) between factored and
/// per-example assembled forward for a random network/batch drawn from seed.
double factored_forward_error(std::uint64_t seed);

/// Maximum-likelihood class of a point under the blobs2d mixture rotated by theta.
std::size_t bayes_blobs2d(const Blobs2dParams& params, std::array<double, 2> point, double theta);

}  // namespace wm::verification
