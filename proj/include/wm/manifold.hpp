#pragma once

// Weight manifolds that are linear in their basis points:
//
//   M(s, P) = sum_i a_i(s) P_i,   s in [0, 1]
//
// Because every manifold here is linear in P, the Jacobian dM/dP is
// [a_1(s) I, ..., a_n(s) I] and the integrated metric is T (x) I with the
// small Gram matrix T_ij = int_0^1 a_i(s) a_j(s) ds. Its inverse C (x) I is the
// preconditioner for the integrated per-basis gradients, so the steepest
// descent direction for the whole manifold is out_i = sum_j C_ij grad_j.

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "wm/tensor.hpp"

namespace wm {

enum class ManifoldKind { point, line, ellipse, tethered_rod, cubic_bspline };

std::string to_string(ManifoldKind kind);
ManifoldKind parse_manifold_kind(std::string_view name);

struct ManifoldSpec {
  ManifoldKind kind = ManifoldKind::point;
  std::size_t n_basis = 1;
  bool periodic = false;

  static ManifoldSpec point() { return {ManifoldKind::point, 1, false}; }
  static ManifoldSpec line() { return {ManifoldKind::line, 2, false}; }
  static ManifoldSpec ellipse() { return {ManifoldKind::ellipse, 3, true}; }
  static ManifoldSpec tethered_rod() { return {ManifoldKind::tethered_rod, 2, false}; }
  static ManifoldSpec cubic_bspline(std::size_t n_basis, bool periodic = false) {
    return {ManifoldKind::cubic_bspline, n_basis, periodic};
  }

  /// Throws ConfigError when n_basis does not fit the kind, or when an
  /// ellipse is declared non-periodic.
  void validate() const;
  std::string describe() const;

  bool operator==(const ManifoldSpec&) const = default;
};

/// Throws DomainError unless 0 <= s <= 1.
double check_modulator(double s);

/// a(s) with M(s, P) = sum_i a_i(s) P_i.
std::vector<double> basis_coefficients(const ManifoldSpec& spec, double s);

/// Points in [0, 1] where a(s) may lose smoothness, including both ends.
/// Integrating span by span keeps polynomial quadrature exact.
std::vector<double> coefficient_breakpoints(const ManifoldSpec& spec);

/// Inverse integrated metric in coefficient form. Symmetric n x n; rows and
/// columns of frozen indices are zero and those basis points never move.
struct IMTMatrix {
  std::size_t n = 0;
  std::vector<double> c;  // row-major n x n
  std::vector<bool> frozen;

  double operator()(std::size_t i, std::size_t j) const { return c[i * n + j]; }
  double& operator()(std::size_t i, std::size_t j) { return c[i * n + j]; }
  bool is_frozen(std::size_t i) const { return frozen[i]; }
};

/// Gram matrix T_ij = int a_i a_j ds computed by exact per-span Gauss-Legendre
/// integration (row-major n x n).
std::vector<double> integrated_metric(const ManifoldSpec& spec);

/// Cached per spec. Line, ellipse, tethered rod and point use closed forms;
/// the cubic B-spline inverts integrated_metric(). Throws ConfigError if the
/// Gram matrix is numerically singular on the learnable indices.
const IMTMatrix& integrated_metric_inverse(const ManifoldSpec& spec);

/// One network parameter tensor (weight, kernel, bias, table) held as
/// n_basis basis tensors of identical shape.
struct ManifoldParameter {
  std::string name;
  std::vector<Tensor> basis;

  const Shape& shape() const { return basis.front().shape(); }
};

struct BasisBundle {
  std::vector<ManifoldParameter> params;

  std::size_t n_basis() const { return params.empty() ? 0 : params.front().basis.size(); }
  /// Elements of one full parameter set (one basis point).
  std::size_t point_elements() const;
  /// Throws ContractError on ragged basis counts or mismatched shapes.
  void check_consistent() const;
  /// Same names/shapes, all zeros.
  BasisBundle zeros_like() const;
};

/// Effective parameter set at s: one tensor per bundle parameter.
std::vector<Tensor> point_on_manifold(const ManifoldSpec& spec, const BasisBundle& bundle, double s);

/// out_i = sum_j C_ij grads_j for one parameter's per-basis gradients.
std::vector<Tensor> rescale_gradients(const IMTMatrix& imt, const std::vector<Tensor>& grads);
BasisBundle rescale_gradients(const IMTMatrix& imt, const BasisBundle& grads);

}  // namespace wm
