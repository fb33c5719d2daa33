#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "wm/autodiff.hpp"
#include "wm/manifold.hpp"

namespace wm {

/// How the modulator s reaches the network.
///  - manifold: weights are M(s, P); every layer is mixed per example.
///  - concat:   s is appended to the flattened features before the dense head.
///  - embed:    a learned embedding of binned s is appended there instead.
///  - none:     s is ignored.
enum class ConditioningMode { manifold, concat, embed, none };

std::string to_string(ConditioningMode mode);
ConditioningMode parse_conditioning_mode(std::string_view name);

struct NetworkSpec {
  Shape input_shape{2};                 // {features} or {channels, height, width}
  std::vector<std::size_t> conv_filters;  // each: conv kxk, bias, relu, maxpool2x2
  std::vector<std::size_t> hidden{64, 64};  // dense widths, each followed by relu
  std::size_t classes = 4;
  ConditioningMode mode = ConditioningMode::none;
  ManifoldSpec manifold = ManifoldSpec::point();
  std::size_t kernel = 3;
  std::size_t embed_width = 32;
  std::size_t embed_bins = 64;

  /// The manifold actually used: the configured one in manifold mode, a
  /// point everywhere else.
  ManifoldSpec effective_manifold() const {
    return mode == ConditioningMode::manifold ? manifold : ManifoldSpec::point();
  }
  bool needs_modulator() const { return mode != ConditioningMode::none; }

  /// Throws ConfigError on an unbuildable architecture.
  void validate() const;

  /// key=value lines, stable order; from_text() inverts it.
  std::string to_text() const;
  static NetworkSpec from_text(const std::string& text);
  /// Human-readable list of fields that differ ("classes: 4 vs 10").
  std::vector<std::string> differences(const NetworkSpec& other) const;

  bool operator==(const NetworkSpec&) const = default;
};

/// MLP for flat inputs: features -> 64 -> 64 -> classes.
NetworkSpec default_mlp(std::size_t features, std::size_t classes, ConditioningMode mode, ManifoldSpec manifold);
/// Reduced CNN for 1x16x16 images: conv8, conv16 (kernel 3, pool 2), dense 64.
NetworkSpec default_cnn(std::size_t classes, ConditioningMode mode, ManifoldSpec manifold);

/// Leaves created for one forward pass: leaves[param][basis].
struct ForwardPass {
  Var logits;
  std::vector<std::vector<Var>> leaves;
};

class Network {
 public:
  /// Fresh initialization. Basis points start near-coincident: the first (or
  /// the ellipse centre) gets a fan-in uniform draw, the rest are 1e-2-scale
  /// perturbations of it (ellipse radii are 1e-2-scale on their own).
  Network(NetworkSpec spec, std::uint64_t init_seed);
  /// Restores from an existing bundle (checkpoint load).
  Network(NetworkSpec spec, BasisBundle bundle);

  const NetworkSpec& spec() const { return spec_; }
  const ManifoldSpec& manifold() const { return manifold_; }
  BasisBundle& bundle() { return bundle_; }
  const BasisBundle& bundle() const { return bundle_; }

  /// Factored forward. Each layer evaluates its n_basis partial outputs for
  /// the whole batch, then mixes them with a(s_i) per example; the effective
  /// weights W(s_i) are never formed.
  ForwardPass forward(Tape& tape, const Tensor& inputs, std::span<const double> s) const;

  /// Reference path: assemble M(s_i, P) for every example and run the plain
  /// network on that example alone. O(B) parameter copies; tests only.
  Tensor forward_assembled(const Tensor& inputs, std::span<const double> s) const;

  /// Plain network with one explicit parameter set (ordered like bundle()).
  Var forward_with(Tape& tape, std::span<const Var> params, const Tensor& inputs,
                   std::span<const double> s) const;

 private:
  Var body(Tape& tape, const std::vector<std::vector<Var>>& leaves, const std::vector<double>& coeffs,
           const Tensor& inputs, std::span<const double> s) const;
  void check_inputs(const Tensor& inputs, std::span<const double> s) const;

  NetworkSpec spec_;
  ManifoldSpec manifold_;
  BasisBundle bundle_;
};

/// Backward from `loss` and collect d loss / d P_k for every parameter. With
/// a mean batch loss this is (1/B) sum_i a_k(s_i) grad_W l_i by the chain rule.
BasisBundle per_basis_gradients(const Network& net, Tape& tape, const ForwardPass& pass, Var loss);

/// Index of the largest logit per row.
std::vector<std::size_t> argmax_rows(const Tensor& logits);

/// Modulator bin used by embed mode.
std::size_t embed_bin(double s, std::size_t bins);

// ---------------------------------------------------------------------------
// Checkpoints. Layout (all integers little-endian):
//
//   magic        8 bytes  "WMCKPT\0\0"
//   version      u32      (1)
//   network      u32 length + UTF-8 NetworkSpec::to_text()
//   manifold     u32 length + kind string, u32 n_basis, u8 periodic
//   seed         u64
//   records      u32 count, then per record:
//                  u32 name length + name, u32 basis index,
//                  u32 rank, rank x u64 dims, numel x f64 (IEEE-754 LE)
//
// Records appear in bundle order, basis index ascending.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  NetworkSpec network;
  ManifoldSpec manifold;
  std::uint64_t seed = 0;
  BasisBundle bundle;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

/// Writes to `path + ".tmp"` and renames over `path`.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace wm
