#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "cacr/errors.hpp"
#include "cacr/matrix.hpp"
#include "cacr/rng.hpp"

namespace cacr {

enum class Activation { kRelu, kTanh };

// Encoder architecture: input -> hidden ... -> output linear layer, followed
// by row-wise l2 normalization onto the unit sphere.
struct MlpSpec {
  std::vector<std::size_t> layer_widths;  // [d_in, hidden..., d_out]
  Activation activation = Activation::kRelu;

  std::size_t n_layers() const { return layer_widths.empty() ? 0 : layer_widths.size() - 1; }
  std::size_t input_dim() const { return layer_widths.front(); }
  std::size_t output_dim() const { return layer_widths.back(); }

  void validate() const {
    if (layer_widths.size() < 3)
      throw InvalidArgument("MlpSpec: need at least one hidden layer (>= 3 widths)");
    if (layer_widths.back() < 2) throw InvalidArgument("MlpSpec: output width must be >= 2");
    for (std::size_t w : layer_widths)
      if (w == 0) throw InvalidArgument("MlpSpec: zero layer width");
  }

  bool operator==(const MlpSpec&) const = default;
};

struct MlpParams {
  std::vector<Matrix> weights;               // layer l: out x in
  std::vector<std::vector<double>> biases;   // layer l: out

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& w : weights) n += w.size();
    for (const auto& b : biases) n += b.size();
    return n;
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(count());
    for (std::size_t l = 0; l < weights.size(); ++l) {
      out.insert(out.end(), weights[l].data().begin(), weights[l].data().end());
      out.insert(out.end(), biases[l].begin(), biases[l].end());
    }
    return out;
  }

  void unflatten(std::span<const double> flat) {
    std::size_t pos = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      std::copy(flat.begin() + pos, flat.begin() + pos + weights[l].size(),
                weights[l].data().begin());
      pos += weights[l].size();
      std::copy(flat.begin() + pos, flat.begin() + pos + biases[l].size(), biases[l].begin());
      pos += biases[l].size();
    }
  }
};

// Gradient (or optimizer state) with the same shape as MlpParams.
using MlpGrads = MlpParams;

inline MlpParams zeros_like(const MlpSpec& spec) {
  MlpParams p;
  for (std::size_t l = 0; l + 1 < spec.layer_widths.size(); ++l) {
    p.weights.emplace_back(spec.layer_widths[l + 1], spec.layer_widths[l]);
    p.biases.emplace_back(spec.layer_widths[l + 1], 0.0);
  }
  return p;
}

// Glorot-uniform weights, zero biases.
inline MlpParams init_params(const MlpSpec& spec, Rng& rng) {
  spec.validate();
  MlpParams p = zeros_like(spec);
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    const double fan_in = static_cast<double>(spec.layer_widths[l]);
    const double fan_out = static_cast<double>(spec.layer_widths[l + 1]);
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    for (double& w : p.weights[l].data()) w = rng.uniform(-a, a);
  }
  return p;
}

struct ForwardCache {
  Matrix input;                  // B x d_in
  std::vector<Matrix> pre_act;   // per layer, B x width
  std::vector<Matrix> post_act;  // per hidden layer, B x width
  Matrix pre_norm;               // final linear output u
  std::vector<double> row_norms;
  Matrix output;                 // z = u / ||u|| rows
};

namespace detail {

inline double act_value(Activation a, double x) {
  return a == Activation::kRelu ? (x > 0.0 ? x : 0.0) : std::tanh(x);
}

inline double act_deriv(Activation a, double pre) {
  if (a == Activation::kRelu) return pre > 0.0 ? 1.0 : 0.0;
  const double t = std::tanh(pre);
  return 1.0 - t * t;
}

inline Matrix linear(const Matrix& x, const Matrix& w, const std::vector<double>& b) {
  Matrix y = matmul_nt(x, w);
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += b[j];
  return y;
}

}  // namespace detail

// Forward pass; caches everything the exact backward needs. Raises ZeroNorm
// if any pre-normalization row vanishes (a collapsed/dead network must be
// visible, not clamped away).
inline std::pair<UnitEmbeddingBatch, ForwardCache> mlp_forward(const MlpSpec& spec,
                                                               const MlpParams& params,
                                                               const Matrix& x) {
  spec.validate();
  if (x.cols() != spec.input_dim()) throw DimMismatch("mlp_forward: input dimension mismatch");
  if (params.weights.size() != spec.n_layers())
    throw ShapeMismatch("mlp_forward: params do not match spec");

  ForwardCache cache;
  cache.input = x;
  Matrix cur = x;
  const std::size_t n_layers = spec.n_layers();
  for (std::size_t l = 0; l < n_layers; ++l) {
    Matrix pre = detail::linear(cur, params.weights[l], params.biases[l]);
    cache.pre_act.push_back(pre);
    if (l + 1 < n_layers) {
      Matrix post = pre;
      for (double& v : post.data()) v = detail::act_value(spec.activation, v);
      cache.post_act.push_back(post);
      cur = std::move(post);
    } else {
      cur = std::move(pre);
    }
  }
  cache.pre_norm = cur;
  cache.row_norms.resize(cur.rows());
  Matrix z = cur;
  for (std::size_t i = 0; i < z.rows(); ++i) {
    const double n = norm(z.row(i));
    if (n < kZeroNormThreshold) throw ZeroNorm("mlp_forward: pre-normalization row vanished");
    cache.row_norms[i] = n;
    for (double& v : z.row(i)) v /= n;
  }
  cache.output = z;
  return {UnitEmbeddingBatch(std::move(z)), std::move(cache)};
}

// Exact backward through the normalization Jacobian (I - z z^T)/||u|| and the
// linear/activation stack. grad_z is d loss / d output rows.
inline MlpGrads mlp_backward(const MlpSpec& spec, const MlpParams& params,
                             const ForwardCache& cache, const Matrix& grad_z) {
  if (grad_z.rows() != cache.output.rows() || grad_z.cols() != cache.output.cols())
    throw ShapeMismatch("mlp_backward: upstream gradient shape mismatch");

  const std::size_t n_layers = spec.n_layers();
  // normalization Jacobian
  Matrix g = grad_z;
  for (std::size_t i = 0; i < g.rows(); ++i) {
    auto zi = cache.output.row(i);
    auto gi = g.row(i);
    const double proj = dot(gi, zi);
    for (std::size_t j = 0; j < gi.size(); ++j) gi[j] = (gi[j] - proj * zi[j]) / cache.row_norms[i];
  }

  MlpGrads grads = zeros_like(spec);
  for (std::size_t l = n_layers; l-- > 0;) {
    const Matrix& layer_input = l == 0 ? cache.input : cache.post_act[l - 1];
    // g is d loss / d pre_act[l]
    grads.weights[l] = matmul_tn(g, layer_input);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) grads.biases[l][j] += g(i, j);
    if (l > 0) {
      Matrix gx = matmul(g, params.weights[l]);
      for (std::size_t i = 0; i < gx.rows(); ++i)
        for (std::size_t j = 0; j < gx.cols(); ++j)
          gx(i, j) *= detail::act_deriv(spec.activation, cache.pre_act[l - 1](i, j));
      g = std::move(gx);
    }
  }
  return grads;
}

// target' = m * target + (1 - m) * online, elementwise.
inline void ema_update(MlpParams& target, const MlpParams& online, double m) {
  if (!(m >= 0.0 && m <= 1.0)) throw InvalidArgument("ema_update: m must lie in [0, 1]");
  if (target.weights.size() != online.weights.size())
    throw ShapeMismatch("ema_update: layer count mismatch");
  for (std::size_t l = 0; l < target.weights.size(); ++l) {
    if (target.weights[l].size() != online.weights[l].size())
      throw ShapeMismatch("ema_update: weight shape mismatch");
    for (std::size_t t = 0; t < target.weights[l].size(); ++t)
      target.weights[l].data()[t] =
          m * target.weights[l].data()[t] + (1.0 - m) * online.weights[l].data()[t];
    for (std::size_t t = 0; t < target.biases[l].size(); ++t)
      target.biases[l][t] = m * target.biases[l][t] + (1.0 - m) * online.biases[l][t];
  }
}

// ---------------------------------------------------------------------------
// Checkpoint file: magic, version, config hash, spec header, little-endian
// f64 parameter blob, trailing FNV-1a checksum of everything before it.
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'C', 'A', 'C', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f64(std::string& buf, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  put_u64(buf, bits);
}

struct ByteReader {
  const std::string& buf;
  std::size_t pos = 0;

  std::uint32_t u32() {
    if (pos + 4 > buf.size()) throw IoError("checkpoint: truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    if (pos + 8 > buf.size()) throw IoError("checkpoint: truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    return v;
  }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
  }
};

inline std::uint64_t fnv1a64_bytes(const char* data, std::size_t n) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace detail

struct Checkpoint {
  MlpSpec spec;
  MlpParams params;
  std::uint64_t config_hash = 0;
};

inline void save_checkpoint(const std::string& path, const MlpSpec& spec, const MlpParams& params,
                            std::uint64_t config_hash) {
  std::string buf;
  buf.append(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
  detail::put_u32(buf, detail::kCheckpointVersion);
  detail::put_u64(buf, config_hash);
  detail::put_u32(buf, spec.activation == Activation::kRelu ? 0u : 1u);
  detail::put_u32(buf, static_cast<std::uint32_t>(spec.layer_widths.size()));
  for (std::size_t w : spec.layer_widths) detail::put_u64(buf, w);
  for (double v : params.flatten()) detail::put_f64(buf, v);
  detail::put_u64(buf, detail::fnv1a64_bytes(buf.data(), buf.size()));

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_checkpoint: cannot open " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("save_checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_checkpoint: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < sizeof(detail::kCheckpointMagic) + 8)
    throw IoError("load_checkpoint: file too short");

  const std::uint64_t stored =
      detail::ByteReader{buf, buf.size() - 8}.u64();
  const std::uint64_t computed = detail::fnv1a64_bytes(buf.data(), buf.size() - 8);
  if (stored != computed) throw ChecksumMismatch("load_checkpoint: checksum mismatch in " + path);

  detail::ByteReader r{buf};
  if (std::memcmp(buf.data(), detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic)) != 0)
    throw IoError("load_checkpoint: bad magic in " + path);
  r.pos += sizeof(detail::kCheckpointMagic);
  if (r.u32() != detail::kCheckpointVersion) throw IoError("load_checkpoint: unsupported version");

  Checkpoint ckpt;
  ckpt.config_hash = r.u64();
  ckpt.spec.activation = r.u32() == 0 ? Activation::kRelu : Activation::kTanh;
  const std::uint32_t n_widths = r.u32();
  ckpt.spec.layer_widths.resize(n_widths);
  for (auto& w : ckpt.spec.layer_widths) w = static_cast<std::size_t>(r.u64());
  ckpt.spec.validate();
  ckpt.params = zeros_like(ckpt.spec);
  std::vector<double> flat(ckpt.params.count());
  for (double& v : flat) v = r.f64();
  ckpt.params.unflatten(flat);
  if (r.pos != buf.size() - 8) throw IoError("load_checkpoint: trailing bytes in " + path);
  return ckpt;
}

}  // namespace cacr
