#include "wm/network.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "wm/rng.hpp"

namespace wm {

std::string to_string(ConditioningMode mode) {
  switch (mode) {
    case ConditioningMode::manifold: return "manifold";
    case ConditioningMode::concat: return "concat";
    case ConditioningMode::embed: return "embed";
    case ConditioningMode::none: return "none";
  }
  return "unknown";
}

ConditioningMode parse_conditioning_mode(std::string_view name) {
  if (name == "manifold") return ConditioningMode::manifold;
  if (name == "concat") return ConditioningMode::concat;
  if (name == "embed") return ConditioningMode::embed;
  if (name == "none") return ConditioningMode::none;
  throw ConfigError("unknown conditioning mode '" + std::string(name) + "'");
}

namespace {

std::string join(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::vector<std::size_t> split_sizes(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      const long long v = std::stoll(item, &used);
      if (used != item.size() || v <= 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError("expected a comma-separated list of positive integers, got '" + text + "'");
    }
  }
  return out;
}

struct ParamInfo {
  std::string name;
  Shape shape;
  double bound;  // init: U(-bound, bound)
};

std::vector<ParamInfo> layout(const NetworkSpec& spec) {
  std::vector<ParamInfo> out;
  std::size_t features = 0;
  if (!spec.conv_filters.empty()) {
    std::size_t c = spec.input_shape[0], h = spec.input_shape[1], w = spec.input_shape[2];
    const std::size_t k = spec.kernel;
    for (std::size_t i = 0; i < spec.conv_filters.size(); ++i) {
      const std::size_t f = spec.conv_filters[i];
      const double bound = 1.0 / std::sqrt(static_cast<double>(c * k * k));
      out.push_back({"conv" + std::to_string(i) + ".kernel", {f, c, k, k}, bound});
      out.push_back({"conv" + std::to_string(i) + ".bias", {f}, bound});
      c = f;
      h = (h - k + 1) / 2;
      w = (w - k + 1) / 2;
    }
    features = c * h * w;
  } else {
    features = shape_numel(spec.input_shape);
  }
  if (spec.mode == ConditioningMode::embed) {
    out.push_back({"embed.table", {spec.embed_bins, spec.embed_width}, 1.0});
    features += spec.embed_width;
  } else if (spec.mode == ConditioningMode::concat) {
    features += 1;
  }
  std::vector<std::size_t> widths = spec.hidden;
  widths.push_back(spec.classes);
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(features));
    out.push_back({"dense" + std::to_string(i) + ".weight", {features, widths[i]}, bound});
    out.push_back({"dense" + std::to_string(i) + ".bias", {widths[i]}, bound});
    features = widths[i];
  }
  return out;
}

}  // namespace

void NetworkSpec::validate() const {
  if (classes < 2) throw ConfigError("network needs at least 2 classes");
  if (input_shape.empty() || shape_numel(input_shape) == 0) throw ConfigError("network input shape is empty");
  for (auto d : input_shape)
    if (d == 0) throw ConfigError("network input dimensions must be positive");
  for (auto h : hidden)
    if (h == 0) throw ConfigError("hidden widths must be positive");
  if (mode == ConditioningMode::embed && (embed_bins == 0 || embed_width == 0))
    throw ConfigError("embed mode needs positive embed_bins and embed_width");
  if (!conv_filters.empty()) {
    if (input_shape.size() != 3) throw ConfigError("conv layers need a {channels,height,width} input shape");
    if (kernel == 0) throw ConfigError("conv kernel must be positive");
    std::size_t h = input_shape[1], w = input_shape[2];
    for (auto f : conv_filters) {
      if (f == 0) throw ConfigError("conv filter counts must be positive");
      if (kernel > h || kernel > w) throw ConfigError("conv kernel larger than feature map");
      h = (h - kernel + 1) / 2;
      w = (w - kernel + 1) / 2;
      if (h == 0 || w == 0) throw ConfigError("feature map vanishes after pooling");
    }
  }
  if (mode == ConditioningMode::manifold) manifold.validate();
}

std::string NetworkSpec::to_text() const {
  std::ostringstream os;
  os << "input_shape=" << join(input_shape) << '\n'
     << "conv_filters=" << join(conv_filters) << '\n'
     << "hidden=" << join(hidden) << '\n'
     << "classes=" << classes << '\n'
     << "mode=" << to_string(mode) << '\n'
     << "manifold.kind=" << to_string(manifold.kind) << '\n'
     << "manifold.n_basis=" << manifold.n_basis << '\n'
     << "manifold.periodic=" << (manifold.periodic ? 1 : 0) << '\n'
     << "kernel=" << kernel << '\n'
     << "embed_width=" << embed_width << '\n'
     << "embed_bins=" << embed_bins << '\n';
  return os.str();
}

NetworkSpec NetworkSpec::from_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("malformed network spec line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw ConfigError("network spec is missing '" + k + "'");
    return it->second;
  };
  auto get_size = [&](const std::string& k) {
    const auto v = split_sizes(get(k));
    if (v.size() != 1) throw ConfigError("network spec field '" + k + "' must be one positive integer");
    return v[0];
  };
  NetworkSpec spec;
  spec.input_shape = split_sizes(get("input_shape"));
  spec.conv_filters = split_sizes(get("conv_filters"));
  spec.hidden = split_sizes(get("hidden"));
  spec.classes = get_size("classes");
  spec.mode = parse_conditioning_mode(get("mode"));
  spec.manifold.kind = parse_manifold_kind(get("manifold.kind"));
  spec.manifold.n_basis = get_size("manifold.n_basis");
  spec.manifold.periodic = get("manifold.periodic") == "1";
  spec.kernel = get_size("kernel");
  spec.embed_width = get_size("embed_width");
  spec.embed_bins = get_size("embed_bins");
  return spec;
}

std::vector<std::string> NetworkSpec::differences(const NetworkSpec& other) const {
  std::map<std::string, std::string> mine, theirs;
  auto parse = [](const std::string& text, std::map<std::string, std::string>& out) {
    std::stringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
      const auto eq = line.find('=');
      if (eq != std::string::npos) out[line.substr(0, eq)] = line.substr(eq + 1);
    }
  };
  parse(to_text(), mine);
  parse(other.to_text(), theirs);
  std::vector<std::string> diffs;
  for (const auto& [k, v] : mine)
    if (theirs[k] != v) diffs.push_back(k + ": '" + v + "' vs '" + theirs[k] + "'");
  return diffs;
}

NetworkSpec default_mlp(std::size_t features, std::size_t classes, ConditioningMode mode, ManifoldSpec manifold) {
  NetworkSpec spec;
  spec.input_shape = {features};
  spec.hidden = {64, 64};
  spec.classes = classes;
  spec.mode = mode;
  spec.manifold = manifold;
  return spec;
}

NetworkSpec default_cnn(std::size_t classes, ConditioningMode mode, ManifoldSpec manifold) {
  NetworkSpec spec;
  spec.input_shape = {1, 16, 16};
  spec.conv_filters = {8, 16};
  spec.hidden = {64};
  spec.classes = classes;
  spec.mode = mode;
  spec.manifold = manifold;
  return spec;
}

std::size_t embed_bin(double s, std::size_t bins) {
  check_modulator(s);
  const auto b = static_cast<std::size_t>(std::floor(s * static_cast<double>(bins)));
  return std::min(b, bins - 1);
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  std::vector<std::size_t> out(B);
  for (std::size_t i = 0; i < B; ++i) {
    const double* z = logits.data().data() + i * K;
    out[i] = static_cast<std::size_t>(std::max_element(z, z + K) - z);
  }
  return out;
}

Network::Network(NetworkSpec spec, std::uint64_t init_seed)
    : spec_(std::move(spec)), manifold_(spec_.effective_manifold()) {
  spec_.manifold = manifold_;
  spec_.validate();
  manifold_.validate();
  Rng rng = Rng::derive(init_seed, {0x1417});
  const std::size_t n = manifold_.n_basis;
  for (const auto& info : layout(spec_)) {
    ManifoldParameter p{info.name, {}};
    Tensor base(info.shape);
    for (auto& v : base.data()) v = rng.uniform(-info.bound, info.bound);
    const double jitter = 1e-2 * info.bound;
    for (std::size_t k = 0; k < n; ++k) {
      if (k == 0) {
        p.basis.push_back(base);
        continue;
      }
      Tensor t(info.shape);
      for (auto& v : t.data()) v = rng.uniform(-jitter, jitter);
      // Ellipse radii start small on their own; other kinds start near P_1.
      if (manifold_.kind != ManifoldKind::ellipse) t.add_scaled(base, 1.0);
      p.basis.push_back(std::move(t));
    }
    bundle_.params.push_back(std::move(p));
  }
}

Network::Network(NetworkSpec spec, BasisBundle bundle)
    : spec_(std::move(spec)), manifold_(spec_.effective_manifold()), bundle_(std::move(bundle)) {
  spec_.manifold = manifold_;
  spec_.validate();
  bundle_.check_consistent();
  const auto expected = layout(spec_);
  if (expected.size() != bundle_.params.size())
    throw ContractError("bundle has " + std::to_string(bundle_.params.size()) + " parameters, network expects " +
                        std::to_string(expected.size()));
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& p = bundle_.params[i];
    if (p.name != expected[i].name || p.shape() != expected[i].shape)
      throw ContractError("bundle parameter '" + p.name + "' " + shape_str(p.shape()) + " does not match '" +
                          expected[i].name + "' " + shape_str(expected[i].shape));
    if (p.basis.size() != manifold_.n_basis)
      throw ContractError("bundle arity " + std::to_string(p.basis.size()) + " does not match " +
                          manifold_.describe());
  }
}

void Network::check_inputs(const Tensor& inputs, std::span<const double> s) const {
  Shape expected{inputs.rank() ? inputs.dim(0) : 0};
  expected.insert(expected.end(), spec_.input_shape.begin(), spec_.input_shape.end());
  if (inputs.shape() != expected)
    throw DimensionError("network input " + shape_str(inputs.shape()) + " does not match " +
                         shape_str(spec_.input_shape) + " per example");
  if (spec_.needs_modulator()) {
    if (s.size() != inputs.dim(0))
      throw ContractError("conditioning mode '" + to_string(spec_.mode) + "' needs one modulator per example, got " +
                          std::to_string(s.size()) + " for batch of " + std::to_string(inputs.dim(0)));
    for (double v : s) check_modulator(v);
  }
}

Var Network::body(Tape& tape, const std::vector<std::vector<Var>>& leaves, const std::vector<double>& coeffs,
                  const Tensor& inputs, std::span<const double> s) const {
  const std::size_t B = inputs.dim(0);
  std::size_t p = 0;
  auto mix = [&](const std::vector<Var>& parts) { return parts.size() == 1 ? parts[0] : mix_rows(parts, coeffs); };

  Var x = tape.constant(inputs);
  for (std::size_t i = 0; i < spec_.conv_filters.size(); ++i) {
    const auto& kernels = leaves[p++];
    const auto& biases = leaves[p++];
    std::vector<Var> parts;
    for (std::size_t k = 0; k < kernels.size(); ++k) parts.push_back(add_bias(conv2d(x, kernels[k]), biases[k]));
    x = maxpool2x2(relu(mix(parts)));
  }
  if (x.value().rank() > 2) x = flatten(x);

  if (spec_.mode == ConditioningMode::concat) {
    x = concat_cols(x, tape.constant(Tensor({B, 1}, std::vector<double>(s.begin(), s.end()))));
  } else if (spec_.mode == ConditioningMode::embed) {
    const auto& table = leaves[p++];
    std::vector<std::size_t> bins(B);
    for (std::size_t i = 0; i < B; ++i) bins[i] = embed_bin(s[i], spec_.embed_bins);
    x = concat_cols(x, embedding(table.front(), bins));
  }

  const std::size_t dense_layers = spec_.hidden.size() + 1;
  for (std::size_t i = 0; i < dense_layers; ++i) {
    const auto& weights = leaves[p++];
    const auto& biases = leaves[p++];
    std::vector<Var> parts;
    for (std::size_t k = 0; k < weights.size(); ++k) parts.push_back(add_bias(matmul(x, weights[k]), biases[k]));
    x = mix(parts);
    if (i + 1 < dense_layers) x = relu(x);
  }
  return x;
}

ForwardPass Network::forward(Tape& tape, const Tensor& inputs, std::span<const double> s) const {
  check_inputs(inputs, s);
  const std::size_t B = inputs.dim(0), n = manifold_.n_basis;
  std::vector<double> coeffs;
  if (n > 1) {
    coeffs.reserve(B * n);
    for (std::size_t i = 0; i < B; ++i) {
      const auto a = basis_coefficients(manifold_, s[i]);
      coeffs.insert(coeffs.end(), a.begin(), a.end());
    }
  }
  ForwardPass pass;
  pass.leaves.reserve(bundle_.params.size());
  for (const auto& param : bundle_.params) {
    std::vector<Var> ks;
    for (const auto& b : param.basis) ks.push_back(tape.parameter(b));
    pass.leaves.push_back(std::move(ks));
  }
  pass.logits = body(tape, pass.leaves, coeffs, inputs, s);
  return pass;
}

Var Network::forward_with(Tape& tape, std::span<const Var> params, const Tensor& inputs,
                          std::span<const double> s) const {
  check_inputs(inputs, s);
  if (params.size() != bundle_.params.size())
    throw ContractError("forward_with: " + std::to_string(params.size()) + " parameters, network has " +
                        std::to_string(bundle_.params.size()));
  std::vector<std::vector<Var>> leaves;
  for (const auto& v : params) leaves.push_back({v});
  return body(tape, leaves, {}, inputs, s);
}

Tensor Network::forward_assembled(const Tensor& inputs, std::span<const double> s) const {
  check_inputs(inputs, s);
  const std::size_t B = inputs.dim(0), row = inputs.numel() / B;
  Tensor out({B, spec_.classes});
  for (std::size_t i = 0; i < B; ++i) {
    const double si = s.empty() ? 0.0 : s[i];
    const auto params = point_on_manifold(manifold_, bundle_, si);
    Shape one = inputs.shape();
    one[0] = 1;
    Tensor xi(one, std::vector<double>(inputs.data().begin() + i * row, inputs.data().begin() + (i + 1) * row));
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : params) vars.push_back(tape.constant(t));
    const Var logits = forward_with(tape, vars, xi, s.empty() ? std::span<const double>{} : s.subspan(i, 1));
    std::copy_n(logits.value().data().data(), spec_.classes, out.data().data() + i * spec_.classes);
  }
  return out;
}

BasisBundle per_basis_gradients(const Network& net, Tape& tape, const ForwardPass& pass, Var loss) {
  tape.backward(loss);
  BasisBundle grads;
  const auto& bundle = net.bundle();
  for (std::size_t p = 0; p < bundle.params.size(); ++p) {
    ManifoldParameter g{bundle.params[p].name, {}};
    for (const auto& leaf : pass.leaves.at(p)) g.basis.push_back(tape.grad(leaf));
    grads.params.push_back(std::move(g));
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'W', 'M', 'C', 'K', 'P', 'T', '\0', '\0'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_str(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}
  std::uint64_t uint(int width) {
    need(width);
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += width;
    return v;
  }
  std::string str() {
    const auto len = uint(4);
    need(len);
    std::string s = bytes_.substr(pos_, len);
    pos_ += len;
    return s;
  }
  std::string raw(std::size_t len) {
    need(len);
    std::string s = bytes_.substr(pos_, len);
    pos_ += len;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw Error("checkpoint truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, sizeof kMagic);
  put_u32(out, kCheckpointVersion);
  put_str(out, ckpt.network.to_text());
  put_str(out, to_string(ckpt.manifold.kind));
  put_u32(out, static_cast<std::uint32_t>(ckpt.manifold.n_basis));
  out.push_back(ckpt.manifold.periodic ? 1 : 0);
  put_u64(out, ckpt.seed);
  std::uint32_t count = 0;
  for (const auto& p : ckpt.bundle.params) count += static_cast<std::uint32_t>(p.basis.size());
  put_u32(out, count);
  for (const auto& p : ckpt.bundle.params)
    for (std::size_t k = 0; k < p.basis.size(); ++k) {
      const auto& t = p.basis[k];
      put_str(out, p.name);
      put_u32(out, static_cast<std::uint32_t>(k));
      put_u32(out, static_cast<std::uint32_t>(t.rank()));
      for (auto d : t.shape()) put_u64(out, d);
      for (double v : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.raw(sizeof kMagic) != std::string(kMagic, sizeof kMagic)) throw Error("not a checkpoint (bad magic)");
  const auto version = r.uint(4);
  if (version != kCheckpointVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.network = NetworkSpec::from_text(r.str());
  ckpt.manifold.kind = parse_manifold_kind(r.str());
  ckpt.manifold.n_basis = r.uint(4);
  ckpt.manifold.periodic = r.uint(1) != 0;
  ckpt.seed = r.uint(8);
  const auto count = r.uint(4);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const auto basis = r.uint(4);
    const auto rank = r.uint(4);
    Shape shape;
    for (std::uint64_t d = 0; d < rank; ++d) shape.push_back(r.uint(8));
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = std::bit_cast<double>(r.uint(8));
    if (ckpt.bundle.params.empty() || ckpt.bundle.params.back().name != name) {
      if (basis != 0) throw Error("checkpoint record '" + name + "' does not start at basis 0");
      ckpt.bundle.params.push_back({name, {}});
    } else if (basis != ckpt.bundle.params.back().basis.size()) {
      throw Error("checkpoint record '" + name + "' has out-of-order basis index");
    }
    ckpt.bundle.params.back().basis.emplace_back(std::move(shape), std::move(data));
  }
  if (!r.done()) throw Error("trailing bytes after checkpoint records");
  ckpt.bundle.check_consistent();
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + tmp + "' for writing");
    const auto bytes = encode_checkpoint(ckpt);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw Error("failed writing '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace wm
