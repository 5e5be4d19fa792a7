#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "subtail/binary_io.hpp"
#include "subtail/common.hpp"

namespace subtail {

enum class Arch { Linear, Mlp1 };

inline const char* arch_name(Arch a) { return a == Arch::Linear ? "linear" : "mlp1"; }

inline Arch parse_arch(const std::string& s) {
  if (s == "linear") return Arch::Linear;
  if (s == "mlp1") return Arch::Mlp1;
  throw std::invalid_argument("unknown architecture '" + s + "' (expected linear or mlp1)");
}

// Thrown when an embedding's pre-normalization length drops below 1e-12.
class EncoderCollapse : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Feature extractor followed by L2 normalization.
///
///   linear: u = W1 x + b1
///   mlp1:   u = W2 tanh(W1 x + b1) + b2
///
/// params holds W1, b1 and, for mlp1, W2, b2. Weight matrices are (out x in),
/// biases are (1 x out).
struct Encoder {
  Arch arch = Arch::Linear;
  std::size_t input_dim = 0;
  std::size_t hidden = 0;
  std::size_t embed_dim = 0;
  std::vector<Matrix> params;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.data.size();
    return n;
  }

  bool operator==(const Encoder&) const = default;
};

/// Glorot-uniform weights, zero biases.
inline Encoder make_encoder(Arch arch, std::size_t input_dim, std::size_t hidden, std::size_t embed_dim,
                            std::uint64_t seed) {
  if (input_dim < 1 || embed_dim < 1 || (arch == Arch::Mlp1 && hidden < 1))
    throw std::invalid_argument("make_encoder: dimensions must be >= 1");
  Encoder enc{arch, input_dim, arch == Arch::Mlp1 ? hidden : 0, embed_dim, {}};
  std::mt19937_64 rng(seed);
  auto layer = [&](std::size_t in, std::size_t out) {
    const double r = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> u(-r, r);
    Matrix w(out, in);
    for (double& v : w.data) v = u(rng);
    enc.params.push_back(std::move(w));
    enc.params.emplace_back(1, out);
  };
  if (arch == Arch::Linear) {
    layer(input_dim, embed_dim);
  } else {
    layer(input_dim, hidden);
    layer(hidden, embed_dim);
  }
  return enc;
}

struct ForwardCache {
  Matrix inputs;
  Matrix hidden;  // tanh activations, mlp1 only
  std::vector<double> norms;
  Matrix embeddings;
};

struct EncoderGradients {
  std::vector<Matrix> params;
  Matrix inputs;
};

namespace detail {

// out = in * W^T + b, row by row.
inline Matrix affine(const Matrix& in, const Matrix& w, const Matrix& b) {
  Matrix out(in.rows, w.rows);
  for (std::size_t i = 0; i < in.rows; ++i)
    for (std::size_t o = 0; o < w.rows; ++o) out(i, o) = b.data[o] + dot(in.row(i), w.row(o));
  return out;
}

}  // namespace detail

inline ForwardCache forward(const Encoder& enc, const Matrix& inputs) {
  if (inputs.cols != enc.input_dim)
    throw std::invalid_argument("forward: input width " + std::to_string(inputs.cols) + " does not match encoder " +
                                std::to_string(enc.input_dim));
  ForwardCache cache;
  cache.inputs = inputs;
  Matrix u;
  if (enc.arch == Arch::Linear) {
    u = detail::affine(inputs, enc.params[0], enc.params[1]);
  } else {
    cache.hidden = detail::affine(inputs, enc.params[0], enc.params[1]);
    for (double& v : cache.hidden.data) v = std::tanh(v);
    u = detail::affine(cache.hidden, enc.params[2], enc.params[3]);
  }
  cache.norms.resize(u.rows);
  for (std::size_t i = 0; i < u.rows; ++i) {
    auto r = u.row(i);
    const double n = norm2(r);
    if (!(n >= 1e-12)) throw EncoderCollapse("encoder output collapsed to zero length at row " + std::to_string(i));
    cache.norms[i] = n;
    for (double& v : r) v /= n;
  }
  cache.embeddings = std::move(u);
  return cache;
}

/// Reverse pass. The normalization Jacobian projects the upstream gradient
/// onto the tangent space of the embedding and scales by 1/||u||.
inline EncoderGradients backward(const Encoder& enc, const ForwardCache& cache, const Matrix& grad_embeddings) {
  const Matrix& z = cache.embeddings;
  if (grad_embeddings.rows != z.rows || grad_embeddings.cols != z.cols || z.cols != enc.embed_dim ||
      cache.inputs.cols != enc.input_dim || (enc.arch == Arch::Mlp1 && cache.hidden.cols != enc.hidden))
    throw std::invalid_argument("backward: cache or gradient does not match the encoder");
  const std::size_t n = z.rows;
  Matrix du(n, z.cols);
  for (std::size_t i = 0; i < n; ++i) {
    const auto g = grad_embeddings.row(i);
    const auto zi = z.row(i);
    const double radial = dot(g, zi);
    for (std::size_t t = 0; t < z.cols; ++t) du(i, t) = (g[t] - zi[t] * radial) / cache.norms[i];
  }

  EncoderGradients out;
  for (const auto& p : enc.params) out.params.emplace_back(p.rows, p.cols);

  // dW += delta^T * in, db += column sums, returns delta * W.
  auto layer_back = [n](const Matrix& delta, const Matrix& in, const Matrix& w, Matrix& dw, Matrix& db) {
    Matrix din(n, w.cols);
    for (std::size_t i = 0; i < n; ++i) {
      const auto d = delta.row(i);
      const auto x = in.row(i);
      auto dx = din.row(i);
      for (std::size_t o = 0; o < w.rows; ++o) {
        if (d[o] == 0.0) continue;
        db.data[o] += d[o];
        auto dwo = dw.row(o);
        const auto wo = w.row(o);
        for (std::size_t k = 0; k < w.cols; ++k) {
          dwo[k] += d[o] * x[k];
          dx[k] += d[o] * wo[k];
        }
      }
    }
    return din;
  };

  if (enc.arch == Arch::Linear) {
    out.inputs = layer_back(du, cache.inputs, enc.params[0], out.params[0], out.params[1]);
  } else {
    Matrix dh = layer_back(du, cache.hidden, enc.params[2], out.params[2], out.params[3]);
    for (std::size_t k = 0; k < dh.data.size(); ++k) {
      const double h = cache.hidden.data[k];
      dh.data[k] *= 1.0 - h * h;
    }
    out.inputs = layer_back(dh, cache.inputs, enc.params[0], out.params[0], out.params[1]);
  }
  return out;
}

/// Embeddings only.
inline Matrix embed(const Encoder& enc, const Matrix& inputs) { return forward(enc, inputs).embeddings; }

struct AugmentationConfig {
  double sigma = 0.1;
};

/// x~ = x + N(0, sigma^2) elementwise.
template <class Rng>
Matrix augment(const Matrix& inputs, const AugmentationConfig& config, Rng& rng) {
  if (!(config.sigma >= 0.0)) throw std::invalid_argument("augment: sigma must be >= 0");
  Matrix out = inputs;
  if (config.sigma == 0.0) return out;
  std::normal_distribution<double> gauss(0.0, config.sigma);
  for (double& v : out.data) v += gauss(rng);
  return out;
}

/// SGD with momentum under a cosine schedule over the whole run.
struct OptimizerState {
  double base_lr = 0.5;
  double momentum = 0.9;
  std::vector<Matrix> velocity;
};

inline OptimizerState make_optimizer(const Encoder& enc, double base_lr, double momentum) {
  OptimizerState opt{base_lr, momentum, {}};
  for (const auto& p : enc.params) opt.velocity.emplace_back(p.rows, p.cols);
  return opt;
}

/// base_lr * (1 + cos(pi * epoch / total_epochs)) / 2
inline double cosine_lr(double base_lr, double epoch, double total_epochs) {
  if (total_epochs <= 0.0) return base_lr;
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / total_epochs));
}

inline void step(OptimizerState& opt, Encoder& enc, const std::vector<Matrix>& grads, double epoch,
                 double total_epochs) {
  if (grads.size() != enc.params.size() || opt.velocity.size() != enc.params.size())
    throw std::invalid_argument("step: gradient/parameter count mismatch");
  const double lr = cosine_lr(opt.base_lr, epoch, total_epochs);
  for (std::size_t p = 0; p < enc.params.size(); ++p) {
    auto& w = enc.params[p].data;
    auto& v = opt.velocity[p].data;
    const auto& g = grads[p].data;
    if (g.size() != w.size() || v.size() != w.size()) throw std::invalid_argument("step: shape mismatch");
    for (std::size_t k = 0; k < w.size(); ++k) {
      v[k] = opt.momentum * v[k] + g[k];
      w[k] -= lr * v[k];
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoint: one text header line, then every parameter as little-endian f64
// in declaration order.

inline void save_encoder(const Encoder& enc, std::ostream& os) {
  os << "subtail-enc v1 arch=" << arch_name(enc.arch) << " dims=" << enc.input_dim;
  if (enc.arch == Arch::Mlp1) os << ',' << enc.hidden;
  os << ',' << enc.embed_dim << '\n';
  for (const auto& p : enc.params)
    for (double v : p.data) binio::put_f64(os, v);
}

inline void save_encoder(const Encoder& enc, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  save_encoder(enc, os);
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline Encoder load_encoder(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("checkpoint: empty file");
  std::istringstream hs(line);
  std::string magic, ver, arch_tok, dims_tok;
  if (!(hs >> magic >> ver >> arch_tok >> dims_tok) || magic != "subtail-enc" || ver != "v1" ||
      arch_tok.rfind("arch=", 0) != 0 || dims_tok.rfind("dims=", 0) != 0)
    throw std::runtime_error("checkpoint: malformed header '" + line + "'");
  const Arch arch = parse_arch(arch_tok.substr(5));
  std::vector<std::size_t> dims;
  std::stringstream ds(dims_tok.substr(5));
  std::string part;
  while (std::getline(ds, part, ',')) {
    if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos)
      throw std::runtime_error("checkpoint: bad dims '" + dims_tok + "'");
    dims.push_back(std::stoull(part));
  }
  const std::size_t want = arch == Arch::Linear ? 2 : 3;
  if (dims.size() != want) throw std::runtime_error("checkpoint: dims do not match arch");
  Encoder enc = make_encoder(arch, dims[0], arch == Arch::Mlp1 ? dims[1] : 0, dims.back(), 0);
  for (auto& p : enc.params)
    for (double& v : p.data)
      if (!binio::get_f64(is, v)) throw std::runtime_error("checkpoint: truncated parameter data");
  if (is.peek() != std::char_traits<char>::eof()) throw std::runtime_error("checkpoint: trailing data");
  return enc;
}

inline Encoder load_encoder(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  return load_encoder(is);
}

}  // namespace subtail
