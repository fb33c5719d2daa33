#include "wm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

namespace wm {

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("value() on an unbound Var");
  return tape_->value(*this);
}

Var Tape::push(Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw NumericError("non-finite value fed to tape");
  nodes_.push_back(Node{std::move(value), Tensor{}, nullptr, requires_grad});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) { return push(std::move(value), false); }

Var Tape::parameter(Tensor value) {
  parameter_elements_ += value.numel();
  return push(std::move(value), true);
}

Var Tape::variable(Tensor value) { return push(std::move(value), true); }

void Tape::check_owner(Var v, const char* op) const {
  if (v.tape() != this) throw ContractError(std::string(op) + ": operand belongs to a different tape");
}

Var Tape::record(const char* op, Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  if (!value.all_finite()) throw NumericError(std::string(op) + " produced a non-finite value");
  bool needs = false;
  for (const auto& in : inputs) {
    check_owner(in, op);
    needs = needs || nodes_[in.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), Tensor{}, needs ? std::move(fn) : nullptr, needs});
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_buffer(Var v) {
  auto& node = nodes_.at(v.id());
  if (node.grad.empty()) node.grad = Tensor::zeros_like(node.value);
  return node.grad;
}

Tensor Tape::grad(Var v) const {
  check_owner(v, "grad");
  const auto& node = nodes_.at(v.id());
  return node.grad.empty() ? Tensor::zeros_like(node.value) : node.grad;
}

void Tape::backward(Var loss, double seed) {
  check_owner(loss, "backward");
  if (value(loss).numel() != 1)
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(value(loss).shape()));
  for (auto& n : nodes_) n.grad = Tensor{};
  if (!nodes_[loss.id()].requires_grad) return;
  grad_buffer(loss)[0] = seed;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (!node.backward || node.grad.empty()) continue;
    node.backward(*this, node.grad);
  }
}

namespace {

Var record(Var proto, const char* op, Tensor value, std::initializer_list<Var> inputs, Tape::BackwardFn fn) {
  std::vector<Var> in(inputs);
  return proto.tape()->record(op, std::move(value), in, std::move(fn));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* name) {
  if (t.rank() != rank)
    throw DimensionError(std::string(op) + ": " + name + " must have rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
}

// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  const auto& A = a.value();
  const auto& B = b.value();
  require_rank(A, 2, "matmul", "lhs");
  require_rank(B, 2, "matmul", "rhs");
  if (A.dim(1) != B.dim(0))
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(A.shape()) + " * " +
                         shape_str(B.shape()));
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor out({m, n});
  gemm_nn(A.data().data(), B.data().data(), out.data().data(), m, k, n);
  return record(a, "matmul", std::move(out), {a, b}, [a, b, m, k, n](Tape& t, const Tensor& g) {
    const double* G = g.data().data();
    if (t.requires_grad(a)) {
      // dA[i,p] += sum_j G[i,j] B[p,j]
      const double* Bv = t.value(b).data().data();
      double* dA = t.grad_buffer(a).data().data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * Bv[p * n + j];
          dA[i * k + p] += acc;
        }
    }
    if (t.requires_grad(b)) {
      // dB[p,j] += sum_i A[i,p] G[i,j]
      const double* Av = t.value(a).data().data();
      double* dB = t.grad_buffer(b).data().data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = Av[i * k + p];
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) dB[p * n + j] += av * G[i * n + j];
        }
    }
  });
}

Var conv2d(Var x, Var k) {
  const auto& X = x.value();
  const auto& K = k.value();
  require_rank(X, 4, "conv2d", "input");
  require_rank(K, 4, "conv2d", "kernel");
  const std::size_t B = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
  const std::size_t F = K.dim(0), Kh = K.dim(2), Kw = K.dim(3);
  if (K.dim(1) != C)
    throw DimensionError("conv2d: channel mismatch, input " + shape_str(X.shape()) + " kernel " +
                         shape_str(K.shape()));
  if (Kh > H || Kw > W)
    throw DimensionError("conv2d: kernel " + shape_str(K.shape()) + " larger than input " + shape_str(X.shape()));
  const std::size_t Ho = H - Kh + 1, Wo = W - Kw + 1;
  Tensor out({B, F, Ho, Wo});
  const double* xp = X.data().data();
  const double* kp = K.data().data();
  double* op = out.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t f = 0; f < F; ++f) {
      double* o = op + (b * F + f) * Ho * Wo;
      for (std::size_t c = 0; c < C; ++c) {
        const double* xc = xp + (b * C + c) * H * W;
        const double* kc = kp + (f * C + c) * Kh * Kw;
        for (std::size_t u = 0; u < Kh; ++u)
          for (std::size_t v = 0; v < Kw; ++v) {
            const double kv = kc[u * Kw + v];
            for (std::size_t i = 0; i < Ho; ++i) {
              const double* xr = xc + (i + u) * W + v;
              double* orow = o + i * Wo;
              for (std::size_t j = 0; j < Wo; ++j) orow[j] += kv * xr[j];
            }
          }
      }
    }
  return record(x, "conv2d", std::move(out), {x, k},
                [x, k, B, C, H, W, F, Kh, Kw, Ho, Wo](Tape& t, const Tensor& g) {
                  const double* gp = g.data().data();
                  const bool want_x = t.requires_grad(x), want_k = t.requires_grad(k);
                  const double* xp = t.value(x).data().data();
                  const double* kp = t.value(k).data().data();
                  double* dx = want_x ? t.grad_buffer(x).data().data() : nullptr;
                  double* dk = want_k ? t.grad_buffer(k).data().data() : nullptr;
                  for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t f = 0; f < F; ++f) {
                      const double* go = gp + (b * F + f) * Ho * Wo;
                      for (std::size_t c = 0; c < C; ++c) {
                        const std::size_t xoff = (b * C + c) * H * W;
                        const std::size_t koff = (f * C + c) * Kh * Kw;
                        for (std::size_t u = 0; u < Kh; ++u)
                          for (std::size_t v = 0; v < Kw; ++v) {
                            const double kv = kp[koff + u * Kw + v];
                            double kacc = 0.0;
                            for (std::size_t i = 0; i < Ho; ++i) {
                              const std::size_t xrow = xoff + (i + u) * W + v;
                              const double* grow = go + i * Wo;
                              if (dx)
                                for (std::size_t j = 0; j < Wo; ++j) dx[xrow + j] += grow[j] * kv;
                              if (dk)
                                for (std::size_t j = 0; j < Wo; ++j) kacc += grow[j] * xp[xrow + j];
                            }
                            if (dk) dk[koff + u * Kw + v] += kacc;
                          }
                      }
                    }
                });
}

Var relu(Var x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  return record(x, "relu", std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    const auto& in = t.value(x);
    auto& dx = t.grad_buffer(x);
    // Subgradient 0 at exactly 0.
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (in[i] > 0.0) dx[i] += g[i];
  });
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  out.add_scaled(b.value(), 1.0);
  return record(a, "add", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) t.grad_buffer(a).add_scaled(g, 1.0);
    if (t.requires_grad(b)) t.grad_buffer(b).add_scaled(g, 1.0);
  });
}

Var scale(Var x, double factor) {
  Tensor out = x.value();
  for (auto& v : out.data()) v *= factor;
  return record(x, "scale", std::move(out), {x},
                [x, factor](Tape& t, const Tensor& g) { t.grad_buffer(x).add_scaled(g, factor); });
}

Var maxpool2x2(Var x) {
  const auto& X = x.value();
  require_rank(X, 4, "maxpool2x2", "input");
  const std::size_t B = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
  if (H < 2 || W < 2) throw DimensionError("maxpool2x2: input " + shape_str(X.shape()) + " smaller than window");
  const std::size_t Ho = H / 2, Wo = W / 2;
  Tensor out({B, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        std::size_t best = bc * H * W + (2 * i) * W + 2 * j;
        for (std::size_t u = 0; u < 2; ++u)
          for (std::size_t v = 0; v < 2; ++v) {
            const std::size_t idx = bc * H * W + (2 * i + u) * W + (2 * j + v);
            if (X[idx] > X[best]) best = idx;
          }
        const std::size_t o = bc * Ho * Wo + i * Wo + j;
        out[o] = X[best];
        (*argmax)[o] = best;
      }
  return record(x, "maxpool2x2", std::move(out), {x}, [x, argmax](Tape& t, const Tensor& g) {
    auto& dx = t.grad_buffer(x);
    for (std::size_t o = 0; o < g.numel(); ++o) dx[(*argmax)[o]] += g[o];
  });
}

Var flatten(Var x) {
  const auto& X = x.value();
  if (X.rank() < 2) throw DimensionError("flatten: need a batch dimension, got " + shape_str(X.shape()));
  const std::size_t b = X.dim(0);
  return record(x, "flatten", X.reshaped({b, X.numel() / b}), {x},
                [x](Tape& t, const Tensor& g) {
                  auto& dx = t.grad_buffer(x);
                  for (std::size_t i = 0; i < g.numel(); ++i) dx[i] += g[i];
                });
}

Var add_bias(Var x, Var bias) {
  const auto& X = x.value();
  const auto& b = bias.value();
  if (X.rank() < 2 || b.rank() != 1 || b.dim(0) != X.dim(1))
    throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " does not match dim 1 of " +
                         shape_str(X.shape()));
  const std::size_t n = X.dim(0), c = X.dim(1), inner = X.numel() / (n * c);
  Tensor out = X;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      double* p = out.data().data() + (i * c + j) * inner;
      for (std::size_t r = 0; r < inner; ++r) p[r] += b[j];
    }
  return record(x, "add_bias", std::move(out), {x, bias}, [x, bias, n, c, inner](Tape& t, const Tensor& g) {
    if (t.requires_grad(x)) t.grad_buffer(x).add_scaled(g, 1.0);
    if (t.requires_grad(bias)) {
      auto& db = t.grad_buffer(bias);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          const double* p = g.data().data() + (i * c + j) * inner;
          double acc = 0.0;
          for (std::size_t r = 0; r < inner; ++r) acc += p[r];
          db[j] += acc;
        }
    }
  });
}

Var concat_cols(Var a, Var b) {
  const auto& A = a.value();
  const auto& B = b.value();
  require_rank(A, 2, "concat_cols", "lhs");
  require_rank(B, 2, "concat_cols", "rhs");
  if (A.dim(0) != B.dim(0))
    throw DimensionError("concat_cols: row mismatch " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
  const std::size_t n = A.dim(0), fa = A.dim(1), fb = B.dim(1);
  Tensor out({n, fa + fb});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(A.data().data() + i * fa, fa, out.data().data() + i * (fa + fb));
    std::copy_n(B.data().data() + i * fb, fb, out.data().data() + i * (fa + fb) + fa);
  }
  return record(a, "concat_cols", std::move(out), {a, b}, [a, b, n, fa, fb](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) {
      auto& da = t.grad_buffer(a);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < fa; ++j) da[i * fa + j] += g[i * (fa + fb) + j];
    }
    if (t.requires_grad(b)) {
      auto& db = t.grad_buffer(b);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < fb; ++j) db[i * fb + j] += g[i * (fa + fb) + fa + j];
    }
  });
}

Var embedding(Var table, std::span<const std::size_t> indices) {
  const auto& T = table.value();
  require_rank(T, 2, "embedding", "table");
  const std::size_t V = T.dim(0), D = T.dim(1), n = indices.size();
  if (n == 0) throw DimensionError("embedding: empty index list");
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  Tensor out({n, D});
  for (std::size_t i = 0; i < n; ++i) {
    if (idx[i] >= V)
      throw IndexError("embedding: index " + std::to_string(idx[i]) + " outside table of " + std::to_string(V));
    std::copy_n(T.data().data() + idx[i] * D, D, out.data().data() + i * D);
  }
  return record(table, "embedding", std::move(out), {table}, [table, idx = std::move(idx), D](Tape& t, const Tensor& g) {
    auto& dt = t.grad_buffer(table);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < D; ++j) dt[idx[i] * D + j] += g[i * D + j];
  });
}

Var mix_rows(std::span<const Var> parts, std::span<const double> coeffs) {
  if (parts.empty()) throw ContractError("mix_rows: no parts");
  const auto& first = parts[0].value();
  if (first.rank() < 1) throw DimensionError("mix_rows: parts need a batch dimension");
  const std::size_t n = parts.size(), B = first.dim(0), row = first.numel() / B;
  if (coeffs.size() != B * n)
    throw DimensionError("mix_rows: expected " + std::to_string(B * n) + " coefficients, got " +
                         std::to_string(coeffs.size()));
  for (const auto& p : parts) require_same_shape(first, p.value(), "mix_rows");
  Tensor out(first.shape());
  for (std::size_t k = 0; k < n; ++k) {
    const double* src = parts[k].value().data().data();
    for (std::size_t i = 0; i < B; ++i) {
      const double c = coeffs[i * n + k];
      double* dst = out.data().data() + i * row;
      for (std::size_t r = 0; r < row; ++r) dst[r] += c * src[i * row + r];
    }
  }
  std::vector<Var> in(parts.begin(), parts.end());
  std::vector<double> cf(coeffs.begin(), coeffs.end());
  return parts[0].tape()->record("mix_rows", std::move(out), in, [in, cf, n, B, row](Tape& t, const Tensor& g) {
    for (std::size_t k = 0; k < n; ++k) {
      if (!t.requires_grad(in[k])) continue;
      double* dst = t.grad_buffer(in[k]).data().data();
      for (std::size_t i = 0; i < B; ++i) {
        const double c = cf[i * n + k];
        const double* src = g.data().data() + i * row;
        for (std::size_t r = 0; r < row; ++r) dst[i * row + r] += c * src[r];
      }
    }
  });
}

Var linear_combination(std::span<const Var> xs, std::span<const double> weights) {
  if (xs.empty()) throw ContractError("linear_combination: no operands");
  if (xs.size() != weights.size())
    throw ContractError("linear_combination: " + std::to_string(xs.size()) + " operands but " +
                        std::to_string(weights.size()) + " weights");
  Tensor out = Tensor::zeros_like(xs[0].value());
  for (std::size_t k = 0; k < xs.size(); ++k) out.add_scaled(xs[k].value(), weights[k]);
  std::vector<Var> in(xs.begin(), xs.end());
  std::vector<double> w(weights.begin(), weights.end());
  return xs[0].tape()->record("linear_combination", std::move(out), in, [in, w](Tape& t, const Tensor& g) {
    for (std::size_t k = 0; k < in.size(); ++k)
      if (t.requires_grad(in[k])) t.grad_buffer(in[k]).add_scaled(g, w[k]);
  });
}

Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels) {
  const auto& Z = logits.value();
  require_rank(Z, 2, "softmax_cross_entropy", "logits");
  const std::size_t B = Z.dim(0), K = Z.dim(1);
  if (labels.size() != B)
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(B));
  auto probs = std::make_shared<Tensor>(Z.shape());
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  double total = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    if (lab[i] >= K)
      throw IndexError("softmax_cross_entropy: label " + std::to_string(lab[i]) + " outside [0," +
                       std::to_string(K) + ")");
    const double* z = Z.data().data() + i * K;
    const double m = *std::max_element(z, z + K);
    double se = 0.0;
    for (std::size_t j = 0; j < K; ++j) se += std::exp(z[j] - m);
    const double lse = m + std::log(se);
    for (std::size_t j = 0; j < K; ++j) (*probs)[i * K + j] = std::exp(z[j] - lse);
    total += lse - z[lab[i]];
  }
  return record(logits, "softmax_cross_entropy", Tensor::scalar(total / static_cast<double>(B)), {logits},
                [logits, probs, lab = std::move(lab), B, K](Tape& t, const Tensor& g) {
                  auto& dz = t.grad_buffer(logits);
                  const double f = g[0] / static_cast<double>(B);
                  for (std::size_t i = 0; i < B; ++i)
                    for (std::size_t j = 0; j < K; ++j)
                      dz[i * K + j] += f * ((*probs)[i * K + j] - (j == lab[i] ? 1.0 : 0.0));
                });
}

Var sum(Var x) {
  double acc = 0.0;
  for (double v : x.value().data()) acc += v;
  return record(x, "sum", Tensor::scalar(acc), {x}, [x](Tape& t, const Tensor& g) {
    auto& dx = t.grad_buffer(x);
    for (auto& v : dx.data()) v += g[0];
  });
}

Var dot(Var a, Var b) {
  const double v = a.value().dot(b.value());
  return record(a, "dot", Tensor::scalar(v), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) t.grad_buffer(a).add_scaled(t.value(b), g[0]);
    if (t.requires_grad(b)) t.grad_buffer(b).add_scaled(t.value(a), g[0]);
  });
}

}  // namespace wm
