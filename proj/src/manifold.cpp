#include "wm/manifold.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <sstream>
#include <tuple>

namespace wm {

std::string to_string(ManifoldKind kind) {
  switch (kind) {
    case ManifoldKind::point: return "point";
    case ManifoldKind::line: return "line";
    case ManifoldKind::ellipse: return "ellipse";
    case ManifoldKind::tethered_rod: return "tethered_rod";
    case ManifoldKind::cubic_bspline: return "cubic_bspline";
  }
  return "unknown";
}

ManifoldKind parse_manifold_kind(std::string_view name) {
  if (name == "point") return ManifoldKind::point;
  if (name == "line") return ManifoldKind::line;
  if (name == "ellipse") return ManifoldKind::ellipse;
  if (name == "tethered_rod") return ManifoldKind::tethered_rod;
  if (name == "cubic_bspline") return ManifoldKind::cubic_bspline;
  throw ConfigError("unknown manifold kind '" + std::string(name) + "'");
}

std::string ManifoldSpec::describe() const {
  std::ostringstream os;
  os << to_string(kind) << "(n_basis=" << n_basis << (periodic ? ", periodic" : "") << ')';
  return os.str();
}

void ManifoldSpec::validate() const {
  auto fail = [this](const std::string& why) { throw ConfigError("invalid manifold " + describe() + ": " + why); };
  switch (kind) {
    case ManifoldKind::point:
      if (n_basis != 1) fail("point manifolds have exactly 1 basis point");
      break;
    case ManifoldKind::line:
    case ManifoldKind::tethered_rod:
      if (n_basis != 2) fail("needs exactly 2 basis points");
      break;
    case ManifoldKind::ellipse:
      if (n_basis != 3) fail("ellipse needs exactly 3 basis points");
      if (!periodic) fail("ellipse is always periodic");
      break;
    case ManifoldKind::cubic_bspline:
      if (n_basis < 4) fail("cubic B-spline needs at least 4 control points");
      break;
  }
}

double check_modulator(double s) {
  if (!(s >= 0.0 && s <= 1.0)) throw DomainError("modulator s=" + std::to_string(s) + " outside [0,1]");
  return s;
}

namespace {

// Cox-de Boor recursion for basis i of the given degree on `knots`, with the
// 0/0 = 0 convention. Spans are half-open; callers handle the right endpoint.
double cox_de_boor(const std::vector<double>& knots, std::size_t i, int degree, double x) {
  if (degree == 0) return (knots[i] <= x && x < knots[i + 1]) ? 1.0 : 0.0;
  double left = 0.0, right = 0.0;
  const double dl = knots[i + degree] - knots[i];
  if (dl > 0.0) left = (x - knots[i]) / dl * cox_de_boor(knots, i, degree - 1, x);
  const double dr = knots[i + degree + 1] - knots[i + 1];
  if (dr > 0.0) right = (knots[i + degree + 1] - x) / dr * cox_de_boor(knots, i + 1, degree - 1, x);
  return left + right;
}

std::vector<double> clamped_knots(std::size_t n_basis) {
  const std::size_t spans = n_basis - 3;
  std::vector<double> knots(n_basis + 4);
  for (std::size_t j = 0; j < knots.size(); ++j) {
    if (j <= 3)
      knots[j] = 0.0;
    else if (j >= n_basis)
      knots[j] = 1.0;
    else
      knots[j] = static_cast<double>(j - 3) / static_cast<double>(spans);
  }
  return knots;
}

std::vector<double> bspline_coefficients(const ManifoldSpec& spec, double s) {
  const std::size_t n = spec.n_basis;
  std::vector<double> a(n, 0.0);
  if (spec.periodic) {
    // Cardinal cubic on integer knots 0..4, wrapped onto n uniform spans.
    static const std::vector<double> cardinal{0.0, 1.0, 2.0, 3.0, 4.0};
    for (std::size_t i = 0; i < n; ++i) {
      double u = std::fmod(s * static_cast<double>(n) - static_cast<double>(i), static_cast<double>(n));
      if (u < 0.0) u += static_cast<double>(n);
      if (u < 4.0) a[i] = cox_de_boor(cardinal, 0, 3, u);
    }
    return a;
  }
  if (s >= 1.0) {
    a[n - 1] = 1.0;
    return a;
  }
  const auto knots = clamped_knots(n);
  for (std::size_t i = 0; i < n; ++i) a[i] = cox_de_boor(knots, i, 3, s);
  return a;
}

}  // namespace

std::vector<double> basis_coefficients(const ManifoldSpec& spec, double s) {
  check_modulator(s);
  switch (spec.kind) {
    case ManifoldKind::point: return {1.0};
    case ManifoldKind::line:
    case ManifoldKind::tethered_rod: return {1.0 - s, s};
    case ManifoldKind::ellipse: {
      // cos/sin of 2*pi*s with s reduced so that s=0 and s=1 agree bit-for-bit.
      const double phase = 2.0 * std::numbers::pi * (s == 1.0 ? 0.0 : s);
      return {1.0, std::cos(phase), std::sin(phase)};
    }
    case ManifoldKind::cubic_bspline: return bspline_coefficients(spec, s);
  }
  throw ContractError("unhandled manifold kind");
}

std::vector<double> coefficient_breakpoints(const ManifoldSpec& spec) {
  if (spec.kind != ManifoldKind::cubic_bspline) return {0.0, 1.0};
  const std::size_t spans = spec.periodic ? spec.n_basis : spec.n_basis - 3;
  std::vector<double> b(spans + 1);
  for (std::size_t j = 0; j <= spans; ++j) b[j] = static_cast<double>(j) / static_cast<double>(spans);
  return b;
}

std::vector<double> integrated_metric(const ManifoldSpec& spec) {
  spec.validate();
  // 5-point Gauss-Legendre is exact up to degree 9; products of the cubic
  // pieces have degree 6. Smooth kinds (ellipse) get 64 panels instead.
  static constexpr std::array<double, 5> x{-0.9061798459386640, -0.5384693101056831, 0.0, 0.5384693101056831,
                                           0.9061798459386640};
  static constexpr std::array<double, 5> w{0.2369268850561891, 0.4786286704993665, 0.5688888888888889,
                                           0.4786286704993665, 0.2369268850561891};
  std::vector<double> edges = coefficient_breakpoints(spec);
  if (spec.kind == ManifoldKind::ellipse) {
    edges.clear();
    for (int j = 0; j <= 64; ++j) edges.push_back(j / 64.0);
  }
  const std::size_t n = spec.n_basis;
  std::vector<double> t(n * n, 0.0);
  for (std::size_t span = 0; span + 1 < edges.size(); ++span) {
    const double lo = edges[span], hi = edges[span + 1];
    const double half = 0.5 * (hi - lo), mid = 0.5 * (hi + lo);
    for (std::size_t q = 0; q < x.size(); ++q) {
      const auto a = basis_coefficients(spec, mid + half * x[q]);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) t[i * n + j] += half * w[q] * a[i] * a[j];
    }
  }
  return t;
}

namespace {

IMTMatrix build_imt(const ManifoldSpec& spec) {
  IMTMatrix imt;
  imt.n = spec.n_basis;
  imt.c.assign(imt.n * imt.n, 0.0);
  imt.frozen.assign(imt.n, false);
  switch (spec.kind) {
    case ManifoldKind::point:
      imt(0, 0) = 1.0;
      return imt;
    case ManifoldKind::line:
      // [[1/3, 1/6], [1/6, 1/3]]^-1
      imt(0, 0) = 4.0;
      imt(0, 1) = -2.0;
      imt(1, 0) = -2.0;
      imt(1, 1) = 4.0;
      return imt;
    case ManifoldKind::ellipse:
      imt(0, 0) = 1.0;
      imt(1, 1) = 2.0;
      imt(2, 2) = 2.0;
      return imt;
    case ManifoldKind::tethered_rod:
      // P_1 is pinned; the learnable block is (int s^2 ds)^-1 = 3.
      imt.frozen[0] = true;
      imt(1, 1) = 3.0;
      return imt;
    case ManifoldKind::cubic_bspline: break;
  }
  const std::size_t n = imt.n;
  const auto t = integrated_metric(spec);
  Eigen::MatrixXd gram(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) gram(i, j) = t[i * n + j];
  Eigen::LLT<Eigen::MatrixXd> llt(gram);
  const Eigen::VectorXd eig = gram.selfadjointView<Eigen::Lower>().eigenvalues();
  if (llt.info() != Eigen::Success || eig.minCoeff() <= 1e-12 * eig.maxCoeff())
    throw ConfigError("Gram matrix of " + spec.describe() + " is numerically singular");
  const Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(n, n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) imt(i, j) = 0.5 * (inv(i, j) + inv(j, i));
  return imt;
}

}  // namespace

const IMTMatrix& integrated_metric_inverse(const ManifoldSpec& spec) {
  spec.validate();
  static std::mutex mu;
  static std::map<std::tuple<int, std::size_t, bool>, IMTMatrix> cache;
  const auto key = std::make_tuple(static_cast<int>(spec.kind), spec.n_basis, spec.periodic);
  std::lock_guard lock(mu);
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, build_imt(spec)).first;
  return it->second;
}

std::size_t BasisBundle::point_elements() const {
  std::size_t n = 0;
  for (const auto& p : params) n += shape_numel(p.shape());
  return n;
}

void BasisBundle::check_consistent() const {
  const std::size_t n = n_basis();
  for (const auto& p : params) {
    if (p.basis.size() != n || n == 0)
      throw ContractError("parameter '" + p.name + "' has " + std::to_string(p.basis.size()) +
                          " basis points, expected " + std::to_string(n));
    for (const auto& b : p.basis)
      if (b.shape() != p.basis.front().shape())
        throw ContractError("parameter '" + p.name + "' has basis points of differing shapes");
  }
}

BasisBundle BasisBundle::zeros_like() const {
  BasisBundle out;
  out.params.reserve(params.size());
  for (const auto& p : params) {
    ManifoldParameter z{p.name, {}};
    for (const auto& b : p.basis) z.basis.push_back(Tensor::zeros_like(b));
    out.params.push_back(std::move(z));
  }
  return out;
}

std::vector<Tensor> point_on_manifold(const ManifoldSpec& spec, const BasisBundle& bundle, double s) {
  bundle.check_consistent();
  if (bundle.n_basis() != spec.n_basis)
    throw ContractError("bundle has " + std::to_string(bundle.n_basis()) + " basis points but " + spec.describe() +
                        " needs " + std::to_string(spec.n_basis));
  const auto a = basis_coefficients(spec, s);
  std::vector<Tensor> out;
  out.reserve(bundle.params.size());
  for (const auto& p : bundle.params) {
    Tensor acc = Tensor::zeros_like(p.basis.front());
    for (std::size_t k = 0; k < a.size(); ++k) acc.add_scaled(p.basis[k], a[k]);
    out.push_back(std::move(acc));
  }
  return out;
}

std::vector<Tensor> rescale_gradients(const IMTMatrix& imt, const std::vector<Tensor>& grads) {
  if (grads.size() != imt.n)
    throw ContractError("rescale_gradients: " + std::to_string(grads.size()) + " gradients for " +
                        std::to_string(imt.n) + " basis points");
  std::vector<Tensor> out;
  out.reserve(imt.n);
  for (std::size_t i = 0; i < imt.n; ++i) {
    Tensor acc = Tensor::zeros_like(grads[i]);
    if (!imt.is_frozen(i))
      for (std::size_t j = 0; j < imt.n; ++j)
        if (imt(i, j) != 0.0) acc.add_scaled(grads[j], imt(i, j));
    out.push_back(std::move(acc));
  }
  return out;
}

BasisBundle rescale_gradients(const IMTMatrix& imt, const BasisBundle& grads) {
  BasisBundle out;
  out.params.reserve(grads.params.size());
  for (const auto& p : grads.params) out.params.push_back({p.name, rescale_gradients(imt, p.basis)});
  return out;
}

}  // namespace wm
