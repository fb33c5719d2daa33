#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "wm/autodiff.hpp"
#include "wm/manifold.hpp"
#include "wm/rng.hpp"

namespace wm {

enum class TaskFamily { rotation, noise };
enum class Dataset { blobs2d, digits16 };
enum class Split { train, test };

std::string to_string(TaskFamily f);
std::string to_string(Dataset d);
std::string to_string(Split s);
TaskFamily parse_task_family(std::string_view name);
Dataset parse_dataset(std::string_view name);
Split parse_split(std::string_view name);

struct TaskSpec {
  TaskFamily family = TaskFamily::rotation;
  Dataset dataset = Dataset::blobs2d;
  double sparsity = 1.0;      // rotation: fraction p of the angle grid seen in training
  std::size_t grid = 360;     // rotation: angle grid size M
  double max_noise = 1.0;     // noise: S, with s ~ U(0, S)
  std::size_t classes = 4;    // blobs2d only; digits16 always has 10
  std::uint64_t seed = 0;     // data seed

  void validate() const;
  Shape input_shape() const;
  std::size_t num_classes() const;

  bool operator==(const TaskSpec&) const = default;
};

struct ConditionedBatch {
  Tensor inputs;
  std::vector<std::size_t> labels;
  std::vector<double> s;

  std::size_t size() const { return labels.size(); }
};

// ---------------------------------------------------------------------------
// blobs2d: one isotropic Gaussian per class, centre at angle 2*pi*c/K and
// radius base + c * step. A rotated example is R(theta) applied to a draw from
// the unrotated mixture; the label is unchanged.

struct Blobs2dParams {
  std::size_t classes = 4;
  double radius = 1.0;
  double radius_step = 0.25;
  double sigma = 0.2;
};

Blobs2dParams blobs2d_params(std::size_t classes);
std::array<double, 2> blobs2d_center(const Blobs2dParams& params, std::size_t cls);
std::array<double, 2> rotate2d(std::array<double, 2> p, double theta);

// ---------------------------------------------------------------------------
// digits16: ten 16x16 grayscale glyphs in [0, 1], embedded from
// assets/digits16.bin (layout in README.md).

const std::vector<Tensor>& digits16_glyphs();
std::vector<Tensor> parse_digits16(std::span<const unsigned char> bytes);

/// In-place x <- (1 - s) x + s * eta with eta ~ N(0, I).
void blend_with_noise(std::span<double> x, double s, Rng& rng);

/// Bilinear rotation of a square image about its centre; samples outside the
/// image read as 0.
Tensor rotate_image(const Tensor& image, double theta);

// ---------------------------------------------------------------------------

/// Grid indices g (angle 2*pi*g/M) available to the training split:
/// ceil(p*M) of them, drawn without replacement once per data seed. Sorted.
std::vector<std::size_t> train_condition_indices(const TaskSpec& spec);

/// Smallest circular distance (radians) from theta to a training angle.
double min_angular_distance_to_train(const TaskSpec& spec, double theta);

/// Deterministic batch source. batch(i, n) is a pure function of
/// (spec, split, stream, i, n): rotation batches draw angles from the training
/// subset (train) or the full grid (test) with s = theta / 2pi; noise batches
/// draw s ~ U(0, S) and blend x_hat = (1 - s) x + s * eta.
class TaskStream {
 public:
  TaskStream(TaskSpec spec, Split split, std::uint64_t stream = 0);

  ConditionedBatch batch(std::uint64_t index, std::size_t size) const;
  /// Same, but every example uses modulator s (rotation angle 2*pi*s, or noise
  /// level s). Used for evaluation on an exact condition grid.
  ConditionedBatch batch_at(std::uint64_t index, std::size_t size, double s) const;

  const TaskSpec& spec() const { return spec_; }
  Split split() const { return split_; }

 private:
  void draw_base(Rng& rng, std::size_t label, std::span<double> out) const;
  void draw_example(Rng& rng, std::size_t label, double s, std::span<double> out) const;

  TaskSpec spec_;
  Split split_;
  std::uint64_t stream_;
  std::vector<std::size_t> conditions_;
};

/// mean_i [ CE_i + s_i * lambda * |M(s_i, P)|^2 ]. The squared norm is
/// expanded as sum_kl a_k a_l <P_k, P_l> over the basis leaves of the forward
/// pass, so W(s_i) is never formed. Throws ConfigError for lambda < 0.
Var regularized_loss(Var logits, std::span<const std::size_t> labels, std::span<const double> s,
                     const std::vector<std::vector<Var>>& leaves, const ManifoldSpec& spec, double lambda);

}  // namespace wm
