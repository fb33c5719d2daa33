#include "wm/tasks.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <numeric>

namespace wm {

extern const unsigned char kDigits16Asset[];
extern const std::size_t kDigits16AssetSize;

std::string to_string(TaskFamily f) { return f == TaskFamily::rotation ? "rotation" : "noise"; }
std::string to_string(Dataset d) { return d == Dataset::blobs2d ? "blobs2d" : "digits16"; }
std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

TaskFamily parse_task_family(std::string_view name) {
  if (name == "rotation") return TaskFamily::rotation;
  if (name == "noise") return TaskFamily::noise;
  throw ConfigError("unknown task family '" + std::string(name) + "'");
}

Dataset parse_dataset(std::string_view name) {
  if (name == "blobs2d") return Dataset::blobs2d;
  if (name == "digits16") return Dataset::digits16;
  throw ConfigError("unknown dataset '" + std::string(name) + "'");
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "test") return Split::test;
  throw ConfigError("unknown split '" + std::string(name) + "'");
}

void TaskSpec::validate() const {
  if (family == TaskFamily::rotation) {
    if (!(sparsity > 0.0 && sparsity <= 1.0))
      throw ConfigError("rotation sparsity p=" + std::to_string(sparsity) + " outside (0,1]");
    if (grid == 0) throw ConfigError("rotation grid must be positive");
  } else {
    if (!(max_noise > 0.0 && max_noise <= 1.0))
      throw ConfigError("noise level S=" + std::to_string(max_noise) + " outside (0,1]");
  }
  if (dataset == Dataset::blobs2d && classes < 2) throw ConfigError("blobs2d needs at least 2 classes");
}

Shape TaskSpec::input_shape() const { return dataset == Dataset::blobs2d ? Shape{2} : Shape{1, 16, 16}; }

std::size_t TaskSpec::num_classes() const { return dataset == Dataset::blobs2d ? classes : 10; }

Blobs2dParams blobs2d_params(std::size_t classes) {
  Blobs2dParams p;
  p.classes = classes;
  return p;
}

std::array<double, 2> blobs2d_center(const Blobs2dParams& params, std::size_t cls) {
  const double phi = 2.0 * std::numbers::pi * static_cast<double>(cls) / static_cast<double>(params.classes);
  const double r = params.radius + params.radius_step * static_cast<double>(cls);
  return {r * std::cos(phi), r * std::sin(phi)};
}

std::array<double, 2> rotate2d(std::array<double, 2> p, double theta) {
  const double c = std::cos(theta), s = std::sin(theta);
  return {c * p[0] - s * p[1], s * p[0] + c * p[1]};
}

std::vector<Tensor> parse_digits16(std::span<const unsigned char> bytes) {
  auto u16 = [&](std::size_t off) {
    if (off + 2 > bytes.size()) throw Error("digits16 asset truncated");
    return static_cast<std::size_t>(bytes[off] | (bytes[off + 1] << 8));
  };
  if (bytes.size() < 12 || !std::equal(bytes.begin(), bytes.begin() + 4, "DG16"))
    throw Error("digits16 asset has bad magic");
  if (u16(4) != 1) throw Error("unsupported digits16 version " + std::to_string(u16(4)));
  const std::size_t count = u16(6), h = u16(8), w = u16(10);
  if (h != 16 || w != 16) throw Error("digits16 glyphs must be 16x16");
  const std::size_t record = 1 + h * w;
  if (bytes.size() != 12 + count * record) throw Error("digits16 asset size mismatch");
  std::vector<Tensor> glyphs(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto* rec = bytes.data() + 12 + i * record;
    const std::size_t label = rec[0];
    if (label >= count) throw Error("digits16 label out of range");
    Tensor g({h, w});
    for (std::size_t j = 0; j < h * w; ++j) g[j] = rec[1 + j] / 255.0;
    glyphs[label] = std::move(g);
  }
  return glyphs;
}

const std::vector<Tensor>& digits16_glyphs() {
  static const std::vector<Tensor> glyphs = parse_digits16({kDigits16Asset, kDigits16AssetSize});
  return glyphs;
}

Tensor rotate_image(const Tensor& image, double theta) {
  const std::size_t h = image.dim(0), w = image.dim(1);
  const double cy = 0.5 * static_cast<double>(h - 1), cx = 0.5 * static_cast<double>(w - 1);
  const double c = std::cos(theta), s = std::sin(theta);
  auto at = [&](long y, long x) -> double {
    if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w)) return 0.0;
    return image[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
  };
  Tensor out({h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      // Inverse map: source = R(-theta) (p - centre) + centre.
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const double sx = c * dx + s * dy + cx;
      const double sy = -s * dx + c * dy + cy;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double tx = sx - fx, ty = sy - fy;
      const long ix = static_cast<long>(fx), iy = static_cast<long>(fy);
      out[y * w + x] = (1 - ty) * ((1 - tx) * at(iy, ix) + tx * at(iy, ix + 1)) +
                       ty * ((1 - tx) * at(iy + 1, ix) + tx * at(iy + 1, ix + 1));
    }
  return out;
}

void blend_with_noise(std::span<double> x, double s, Rng& rng) {
  for (auto& v : x) {
    const double eta = rng.normal();
    v = (1.0 - s) * v + s * eta;
  }
}

std::vector<std::size_t> train_condition_indices(const TaskSpec& spec) {
  spec.validate();
  const std::size_t m = spec.grid;
  const auto keep = static_cast<std::size_t>(std::ceil(spec.sparsity * static_cast<double>(m) - 1e-9));
  std::vector<std::size_t> all(m);
  std::iota(all.begin(), all.end(), 0);
  if (keep >= m) return all;
  Rng rng = Rng::derive(spec.seed, {0xa11ce});
  for (std::size_t i = 0; i < keep; ++i) std::swap(all[i], all[i + rng.index(m - i)]);
  all.resize(std::max<std::size_t>(keep, 1));
  std::sort(all.begin(), all.end());
  return all;
}

double min_angular_distance_to_train(const TaskSpec& spec, double theta) {
  double best = std::numbers::pi;
  for (auto g : train_condition_indices(spec)) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(g) / static_cast<double>(spec.grid);
    double d = std::fmod(std::abs(theta - a), 2.0 * std::numbers::pi);
    d = std::min(d, 2.0 * std::numbers::pi - d);
    best = std::min(best, d);
  }
  return best;
}

TaskStream::TaskStream(TaskSpec spec, Split split, std::uint64_t stream)
    : spec_(std::move(spec)), split_(split), stream_(stream) {
  spec_.validate();
  if (spec_.family == TaskFamily::rotation) {
    if (split_ == Split::train) {
      conditions_ = train_condition_indices(spec_);
    } else {
      conditions_.resize(spec_.grid);
      std::iota(conditions_.begin(), conditions_.end(), 0);
    }
  }
}

void TaskStream::draw_base(Rng& rng, std::size_t label, std::span<double> out) const {
  if (spec_.dataset == Dataset::blobs2d) {
    const auto params = blobs2d_params(spec_.classes);
    const auto c = blobs2d_center(params, label);
    out[0] = c[0] + params.sigma * rng.normal();
    out[1] = c[1] + params.sigma * rng.normal();
    return;
  }
  const auto& glyph = digits16_glyphs()[label];
  const long dx = static_cast<long>(rng.index(3)) - 1, dy = static_cast<long>(rng.index(3)) - 1;
  const double gain = rng.uniform(0.8, 1.2);
  for (long y = 0; y < 16; ++y)
    for (long x = 0; x < 16; ++x) {
      const long sy = y - dy, sx = x - dx;
      const double v = (sy >= 0 && sy < 16 && sx >= 0 && sx < 16) ? glyph[static_cast<std::size_t>(sy * 16 + sx)] : 0.0;
      out[static_cast<std::size_t>(y * 16 + x)] = gain * v + 0.05 * rng.normal();
    }
}

void TaskStream::draw_example(Rng& rng, std::size_t label, double s, std::span<double> x) const {
  draw_base(rng, label, x);
  if (spec_.family == TaskFamily::noise) {
    blend_with_noise(x, s, rng);
    return;
  }
  const double theta = 2.0 * std::numbers::pi * s;
  if (spec_.dataset == Dataset::blobs2d) {
    const auto r = rotate2d({x[0], x[1]}, theta);
    x[0] = r[0];
    x[1] = r[1];
  } else {
    const Tensor rotated = rotate_image(Tensor({16, 16}, std::vector<double>(x.begin(), x.end())), theta);
    std::copy(rotated.data().begin(), rotated.data().end(), x.begin());
  }
}

ConditionedBatch TaskStream::batch(std::uint64_t index, std::size_t size) const {
  if (size == 0) throw ConfigError("batch size must be positive");
  Rng rng = Rng::derive(spec_.seed, {static_cast<std::uint64_t>(spec_.family), static_cast<std::uint64_t>(split_),
                                     stream_, index});
  Shape shape{size};
  const auto in = spec_.input_shape();
  shape.insert(shape.end(), in.begin(), in.end());
  ConditionedBatch b{Tensor(shape), std::vector<std::size_t>(size), std::vector<double>(size)};
  const std::size_t row = shape_numel(in);
  const std::size_t classes = spec_.num_classes();
  for (std::size_t i = 0; i < size; ++i) {
    const std::size_t label = rng.index(classes);
    double s = 0.0;
    if (spec_.family == TaskFamily::rotation) {
      const std::size_t g = conditions_[rng.index(conditions_.size())];
      s = static_cast<double>(g) / static_cast<double>(spec_.grid);
    } else {
      s = rng.uniform(0.0, spec_.max_noise);
    }
    b.labels[i] = label;
    b.s[i] = s;
    draw_example(rng, label, s, b.inputs.data().subspan(i * row, row));
  }
  return b;
}

ConditionedBatch TaskStream::batch_at(std::uint64_t index, std::size_t size, double s) const {
  if (size == 0) throw ConfigError("batch size must be positive");
  check_modulator(s);
  Rng rng = Rng::derive(spec_.seed, {static_cast<std::uint64_t>(spec_.family), static_cast<std::uint64_t>(split_),
                                     stream_, index, std::bit_cast<std::uint64_t>(s), 0xf1ced});
  Shape shape{size};
  const auto in = spec_.input_shape();
  shape.insert(shape.end(), in.begin(), in.end());
  ConditionedBatch b{Tensor(shape), std::vector<std::size_t>(size), std::vector<double>(size, s)};
  const std::size_t row = shape_numel(in);
  for (std::size_t i = 0; i < size; ++i) {
    b.labels[i] = rng.index(spec_.num_classes());
    draw_example(rng, b.labels[i], s, b.inputs.data().subspan(i * row, row));
  }
  return b;
}

Var regularized_loss(Var logits, std::span<const std::size_t> labels, std::span<const double> s,
                     const std::vector<std::vector<Var>>& leaves, const ManifoldSpec& spec, double lambda) {
  if (!(lambda >= 0.0)) throw ConfigError("regularization strength must be >= 0, got " + std::to_string(lambda));
  if (s.size() != labels.size())
    throw ContractError("regularized_loss: " + std::to_string(s.size()) + " modulators for " +
                        std::to_string(labels.size()) + " labels");
  const Var ce = softmax_cross_entropy(logits, labels);
  const std::size_t n = spec.n_basis, B = labels.size();
  // weight[k][l] = lambda / B * sum_i s_i a_k(s_i) a_l(s_i)
  std::vector<double> weight(n * n, 0.0);
  bool any = false;
  for (std::size_t i = 0; i < B; ++i) {
    if (s[i] == 0.0) continue;
    const auto a = basis_coefficients(spec, s[i]);
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t l = 0; l < n; ++l) weight[k * n + l] += lambda * s[i] * a[k] * a[l] / static_cast<double>(B);
    any = true;
  }
  if (!any || lambda == 0.0) return ce;

  std::vector<Var> terms;
  std::vector<double> coeffs;
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t l = k; l < n; ++l) {
      const double w = (k == l ? 1.0 : 2.0) * weight[k * n + l];
      if (w == 0.0) continue;
      for (const auto& param : leaves) {
        if (param.size() != n) throw ContractError("regularized_loss: leaves do not match " + spec.describe());
        terms.push_back(dot(param[k], param[l]));
        coeffs.push_back(w);
      }
    }
  if (terms.empty()) return ce;
  return add(ce, linear_combination(terms, coeffs));
}

}  // namespace wm
