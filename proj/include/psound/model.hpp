#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "psound/autodiff.hpp"
#include "psound/errors.hpp"
#include "psound/ops.hpp"
#include "psound/rng.hpp"
#include "psound/tensor.hpp"

namespace psound {

inline constexpr double kCosineEps = 1e-8;

// ---------------------------------------------------------------------------
// Prototype similarity layers
// ---------------------------------------------------------------------------

namespace detail {

/// d cos(u,v) / du for cos = ip / (|u||v| + eps); the |u|=0 branch drops the
/// curvature term (the function is flat there up to the epsilon floor).
template <typename T>
inline void accumulate_cosine_grad(const T* u, const T* v, std::size_t n, std::size_t stride,
                                   T nu, T nv, T ip, T denom, T coef, T* du) {
  const T a = coef / denom;
  const T b = nu > T(0) ? coef * ip * nv / (denom * denom * nu) : T(0);
  for (std::size_t c = 0; c < n; ++c) du[c * stride] += a * v[c * stride] - b * u[c * stride];
}

template <typename T>
inline T strided_norm(const T* p, std::size_t n, std::size_t stride) {
  T s = T(0);
  for (std::size_t c = 0; c < n; ++c) s += p[c * stride] * p[c * stride];
  return std::sqrt(s);
}

template <typename T>
inline T strided_dot(const T* a, const T* b, std::size_t n, std::size_t stride) {
  T s = T(0);
  for (std::size_t c = 0; c < n; ++c) s += a[c * stride] * b[c * stride];
  return s;
}

}  // namespace detail

/// Cosine similarity between two vectors (the 1D prototype layer).
template <typename T>
Variable<T> sim_1d(const Variable<T>& f, const Variable<T>& p) {
  const auto& fv = f.value();
  const auto& pv = p.value();
  detail::require(fv.rank() == 1 && pv.rank() == 1 && fv.size() == pv.size(),
                  "sim_1d: inputs must be equal-length vectors");
  const std::size_t C = fv.size();
  const T nf = detail::strided_norm(fv.data(), C, 1);
  const T np = detail::strided_norm(pv.data(), C, 1);
  const T denom = nf * np + static_cast<T>(kCosineEps);
  const T ip = detail::strided_dot(fv.data(), pv.data(), C, 1);
  auto fn = f.node(), pn = p.node();
  return f.tape()->emit(Tensor<T>::scalar(ip / denom), "sim_1d", {fn, pn},
                        [fn, pn, C, nf, np, ip, denom](TapeNode<T>& n) {
                          const T g = n.grad[0];
                          const T* fp = fn->value.data();
                          const T* pp = pn->value.data();
                          if (fn->requires_grad)
                            detail::accumulate_cosine_grad(fp, pp, C, std::size_t{1}, nf, np, ip,
                                                           denom, g, fn->ensure_grad().data());
                          if (pn->requires_grad)
                            detail::accumulate_cosine_grad(pp, fp, C, std::size_t{1}, np, nf, ip,
                                                           denom, g, pn->ensure_grad().data());
                        });
}

namespace detail {
template <typename T>
inline void check_2d_pair(const Variable<T>& f, const Variable<T>& p, const char* who) {
  require(f.value().rank() == 3 && p.value().rank() == 3 && f.shape() == p.shape(),
          std::string(who) + ": inputs must be equal-shape (C,T,R) tensors, got " +
              shape_str(f.shape()) + " vs " + shape_str(p.shape()));
}
}  // namespace detail

/// Element-wise similarity map: cell (t,r) is the cosine between the channel
/// vectors of f and p at the same time-frequency bin.
template <typename T>
Variable<T> sim_2ev(const Variable<T>& f, const Variable<T>& p) {
  detail::check_2d_pair(f, p, "sim_2ev");
  const auto& fv = f.value();
  const std::size_t C = fv.dim(0), TR = fv.dim(1) * fv.dim(2);
  Tensor<T> out(Shape{fv.dim(1), fv.dim(2)});
  const T* fp = fv.data();
  const T* pp = p.value().data();
  for (std::size_t b = 0; b < TR; ++b) {
    const T nf = detail::strided_norm(fp + b, C, TR);
    const T np = detail::strided_norm(pp + b, C, TR);
    const T ip = detail::strided_dot(fp + b, pp + b, C, TR);
    out[b] = ip / (nf * np + static_cast<T>(kCosineEps));
  }
  auto fn = f.node(), pn = p.node();
  return f.tape()->emit(std::move(out), "sim_2ev", {fn, pn}, [fn, pn, C, TR](TapeNode<T>& n) {
    const T* fp = fn->value.data();
    const T* pp = pn->value.data();
    const T* g = n.grad.data();
    for (std::size_t b = 0; b < TR; ++b) {
      if (g[b] == T(0)) continue;
      const T nf = detail::strided_norm(fp + b, C, TR);
      const T np = detail::strided_norm(pp + b, C, TR);
      const T ip = detail::strided_dot(fp + b, pp + b, C, TR);
      const T denom = nf * np + static_cast<T>(kCosineEps);
      if (fn->requires_grad)
        detail::accumulate_cosine_grad(fp + b, pp + b, C, TR, nf, np, ip, denom, g[b],
                                       fn->ensure_grad().data() + b);
      if (pn->requires_grad)
        detail::accumulate_cosine_grad(pp + b, fp + b, C, TR, np, nf, ip, denom, g[b],
                                       pn->ensure_grad().data() + b);
    }
  });
}

/// Average similarity map: cell (t,r) is the mean cosine between f's channel
/// vector at (t,r) and p's channel vectors at every bin.
template <typename T>
Variable<T> sim_2av(const Variable<T>& f, const Variable<T>& p) {
  detail::check_2d_pair(f, p, "sim_2av");
  const auto& fv = f.value();
  const std::size_t C = fv.dim(0), TR = fv.dim(1) * fv.dim(2);
  const T* fp = fv.data();
  const T* pp = p.value().data();
  std::vector<T> nf(TR), np(TR);
  for (std::size_t b = 0; b < TR; ++b) {
    nf[b] = detail::strided_norm(fp + b, C, TR);
    np[b] = detail::strided_norm(pp + b, C, TR);
  }
  Tensor<T> out(Shape{fv.dim(1), fv.dim(2)});
  const T inv = T(1) / static_cast<T>(TR);
  for (std::size_t a = 0; a < TR; ++a) {
    T acc = T(0);
    for (std::size_t b = 0; b < TR; ++b) {
      const T ip = detail::strided_dot(fp + a, pp + b, C, TR);
      acc += ip / (nf[a] * np[b] + static_cast<T>(kCosineEps));
    }
    out[a] = acc * inv;
  }
  auto fn = f.node(), pn = p.node();
  return f.tape()->emit(std::move(out), "sim_2av", {fn, pn}, [fn, pn, C, TR](TapeNode<T>& n) {
    const T* fp = fn->value.data();
    const T* pp = pn->value.data();
    const T* g = n.grad.data();
    const T inv = T(1) / static_cast<T>(TR);
    std::vector<T> nf(TR), np(TR);
    for (std::size_t b = 0; b < TR; ++b) {
      nf[b] = detail::strided_norm(fp + b, C, TR);
      np[b] = detail::strided_norm(pp + b, C, TR);
    }
    T* df = fn->requires_grad ? fn->ensure_grad().data() : nullptr;
    T* dp = pn->requires_grad ? pn->ensure_grad().data() : nullptr;
    for (std::size_t a = 0; a < TR; ++a) {
      if (g[a] == T(0)) continue;
      const T coef = g[a] * inv;
      for (std::size_t b = 0; b < TR; ++b) {
        const T ip = detail::strided_dot(fp + a, pp + b, C, TR);
        const T denom = nf[a] * np[b] + static_cast<T>(kCosineEps);
        if (df)
          detail::accumulate_cosine_grad(fp + a, pp + b, C, TR, nf[a], np[b], ip, denom, coef,
                                         df + a);
        if (dp)
          detail::accumulate_cosine_grad(pp + b, fp + a, C, TR, np[b], nf[a], ip, denom, coef,
                                         dp + b);
      }
    }
  });
}

namespace detail {
/// Max cosine per f bin plus the argmax p bin, shared by sim_2mv and sim_2ma.
template <typename T>
void max_cosine_map(const T* fp, const T* pp, std::size_t C, std::size_t TR, T* out,
                    std::uint32_t* argmax) {
  std::vector<T> nf(TR), np(TR);
  for (std::size_t b = 0; b < TR; ++b) {
    nf[b] = strided_norm(fp + b, C, TR);
    np[b] = strided_norm(pp + b, C, TR);
  }
  for (std::size_t a = 0; a < TR; ++a) {
    T best = T(0);
    std::size_t bi = 0;
    for (std::size_t b = 0; b < TR; ++b) {
      const T ip = strided_dot(fp + a, pp + b, C, TR);
      const T cosv = ip / (nf[a] * np[b] + static_cast<T>(kCosineEps));
      if (b == 0 || cosv > best) {
        best = cosv;
        bi = b;
      }
    }
    out[a] = best;
    argmax[a] = static_cast<std::uint32_t>(bi);
  }
}
}  // namespace detail

/// Maximum similarity map: cell (t,r) is the cosine between f's channel
/// vector at (t,r) and its most similar p bin (first-index tie-break).
template <typename T>
Variable<T> sim_2mv(const Variable<T>& f, const Variable<T>& p) {
  detail::check_2d_pair(f, p, "sim_2mv");
  const auto& fv = f.value();
  const std::size_t C = fv.dim(0), TR = fv.dim(1) * fv.dim(2);
  Tensor<T> out(Shape{fv.dim(1), fv.dim(2)});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(TR);
  detail::max_cosine_map(fv.data(), p.value().data(), C, TR, out.data(), argmax->data());
  auto fn = f.node(), pn = p.node();
  return f.tape()->emit(std::move(out), "sim_2mv", {fn, pn},
                        [fn, pn, argmax, C, TR](TapeNode<T>& n) {
                          const T* fp = fn->value.data();
                          const T* pp = pn->value.data();
                          const T* g = n.grad.data();
                          for (std::size_t a = 0; a < TR; ++a) {
                            if (g[a] == T(0)) continue;
                            const std::size_t b = (*argmax)[a];
                            const T nf = detail::strided_norm(fp + a, C, TR);
                            const T np = detail::strided_norm(pp + b, C, TR);
                            const T ip = detail::strided_dot(fp + a, pp + b, C, TR);
                            const T denom = nf * np + static_cast<T>(kCosineEps);
                            if (fn->requires_grad)
                              detail::accumulate_cosine_grad(fp + a, pp + b, C, TR, nf, np, ip,
                                                             denom, g[a],
                                                             fn->ensure_grad().data() + a);
                            if (pn->requires_grad)
                              detail::accumulate_cosine_grad(pp + b, fp + a, C, TR, np, nf, ip,
                                                             denom, g[a],
                                                             pn->ensure_grad().data() + b);
                          }
                        });
}

/// Collapse a similarity map to one scalar per prototype (arithmetic mean).
template <typename T>
Variable<T> scalarize(const Variable<T>& map) {
  return mean_all(map);
}

/// Attention-weighted element-wise similarity: softmax over the sim_2ev map
/// weights the per-bin inner products (summed over channels).
template <typename T>
Variable<T> sim_2ea(const Variable<T>& f, const Variable<T>& p) {
  detail::check_2d_pair(f, p, "sim_2ea");
  const auto& fv = f.value();
  const std::size_t C = fv.dim(0), TR = fv.dim(1) * fv.dim(2);
  const T* fp = fv.data();
  const T* pp = p.value().data();
  auto attn = std::make_shared<std::vector<T>>(TR);
  auto inner = std::make_shared<std::vector<T>>(TR);
  std::vector<T> simmap(TR);
  for (std::size_t b = 0; b < TR; ++b) {
    const T nf = detail::strided_norm(fp + b, C, TR);
    const T np = detail::strided_norm(pp + b, C, TR);
    const T ip = detail::strided_dot(fp + b, pp + b, C, TR);
    simmap[b] = ip / (nf * np + static_cast<T>(kCosineEps));
    (*inner)[b] = ip;
  }
  T mx = simmap[0];
  for (std::size_t b = 1; b < TR; ++b) mx = std::max(mx, simmap[b]);
  T z = T(0);
  for (std::size_t b = 0; b < TR; ++b) {
    (*attn)[b] = std::exp(simmap[b] - mx);
    z += (*attn)[b];
  }
  T value = T(0);
  for (std::size_t b = 0; b < TR; ++b) {
    (*attn)[b] /= z;
    value += (*attn)[b] * (*inner)[b];
  }
  auto fn = f.node(), pn = p.node();
  return f.tape()->emit(
      Tensor<T>::scalar(value), "sim_2ea", {fn, pn},
      [fn, pn, attn, inner, value, C, TR](TapeNode<T>& n) {
        const T g = n.grad[0];
        const T* fp = fn->value.data();
        const T* pp = pn->value.data();
        T* df = fn->requires_grad ? fn->ensure_grad().data() : nullptr;
        T* dp = pn->requires_grad ? pn->ensure_grad().data() : nullptr;
        for (std::size_t b = 0; b < TR; ++b) {
          const T a = (*attn)[b];
          // Through the inner products, attention fixed.
          if (df)
            for (std::size_t c = 0; c < C; ++c) df[c * TR + b] += g * a * pp[c * TR + b];
          if (dp)
            for (std::size_t c = 0; c < C; ++c) dp[c * TR + b] += g * a * fp[c * TR + b];
          // Through the attention weights: softmax backward feeds the cosine.
          const T dsim = g * a * ((*inner)[b] - value);
          if (dsim != T(0)) {
            const T nf = detail::strided_norm(fp + b, C, TR);
            const T np = detail::strided_norm(pp + b, C, TR);
            const T ip = detail::strided_dot(fp + b, pp + b, C, TR);
            const T denom = nf * np + static_cast<T>(kCosineEps);
            if (df) detail::accumulate_cosine_grad(fp + b, pp + b, C, TR, nf, np, ip, denom, dsim, df + b);
            if (dp) detail::accumulate_cosine_grad(pp + b, fp + b, C, TR, np, nf, ip, denom, dsim, dp + b);
          }
        }
      });
}

/// Attention-weighted maximum similarity: softmax over the sim_2mv map
/// weights inner products against each bin's most similar p bin.
template <typename T>
Variable<T> sim_2ma(const Variable<T>& f, const Variable<T>& p) {
  detail::check_2d_pair(f, p, "sim_2ma");
  const auto& fv = f.value();
  const std::size_t C = fv.dim(0), TR = fv.dim(1) * fv.dim(2);
  const T* fp = fv.data();
  const T* pp = p.value().data();
  std::vector<T> maxmap(TR);
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(TR);
  detail::max_cosine_map(fp, pp, C, TR, maxmap.data(), argmax->data());
  auto attn = std::make_shared<std::vector<T>>(TR);
  auto inner = std::make_shared<std::vector<T>>(TR);
  for (std::size_t a = 0; a < TR; ++a)
    (*inner)[a] = detail::strided_dot(fp + a, pp + (*argmax)[a], C, TR);
  T mx = maxmap[0];
  for (std::size_t a = 1; a < TR; ++a) mx = std::max(mx, maxmap[a]);
  T z = T(0);
  for (std::size_t a = 0; a < TR; ++a) {
    (*attn)[a] = std::exp(maxmap[a] - mx);
    z += (*attn)[a];
  }
  T value = T(0);
  for (std::size_t a = 0; a < TR; ++a) {
    (*attn)[a] /= z;
    value += (*attn)[a] * (*inner)[a];
  }
  auto fn = f.node(), pn = p.node();
  return f.tape()->emit(
      Tensor<T>::scalar(value), "sim_2ma", {fn, pn},
      [fn, pn, attn, inner, argmax, value, C, TR](TapeNode<T>& n) {
        const T g = n.grad[0];
        const T* fp = fn->value.data();
        const T* pp = pn->value.data();
        T* df = fn->requires_grad ? fn->ensure_grad().data() : nullptr;
        T* dp = pn->requires_grad ? pn->ensure_grad().data() : nullptr;
        for (std::size_t a = 0; a < TR; ++a) {
          const std::size_t b = (*argmax)[a];
          const T at = (*attn)[a];
          if (df)
            for (std::size_t c = 0; c < C; ++c) df[c * TR + a] += g * at * pp[c * TR + b];
          if (dp)
            for (std::size_t c = 0; c < C; ++c) dp[c * TR + b] += g * at * fp[c * TR + a];
          const T dsim = g * at * ((*inner)[a] - value);
          if (dsim != T(0)) {
            const T nf = detail::strided_norm(fp + a, C, TR);
            const T np = detail::strided_norm(pp + b, C, TR);
            const T ip = detail::strided_dot(fp + a, pp + b, C, TR);
            const T denom = nf * np + static_cast<T>(kCosineEps);
            if (df) detail::accumulate_cosine_grad(fp + a, pp + b, C, TR, nf, np, ip, denom, dsim, df + a);
            if (dp) detail::accumulate_cosine_grad(pp + b, fp + a, C, TR, np, nf, ip, denom, dsim, dp + b);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Model configuration
// ---------------------------------------------------------------------------

enum class Variant { P1D, P2D_EV, P2D_AV, P2D_MV, P2D_EA, P2D_MA };
enum class HeadNorm { None, Batch, Layer };

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::P1D: return "p1d";
    case Variant::P2D_EV: return "p2d-ev";
    case Variant::P2D_AV: return "p2d-av";
    case Variant::P2D_MV: return "p2d-mv";
    case Variant::P2D_EA: return "p2d-ea";
    case Variant::P2D_MA: return "p2d-ma";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "p1d") return Variant::P1D;
  if (s == "p2d-ev") return Variant::P2D_EV;
  if (s == "p2d-av") return Variant::P2D_AV;
  if (s == "p2d-mv") return Variant::P2D_MV;
  if (s == "p2d-ea") return Variant::P2D_EA;
  if (s == "p2d-ma") return Variant::P2D_MA;
  throw std::invalid_argument("unknown variant '" + s + "'");
}

inline std::string head_norm_name(HeadNorm n) {
  switch (n) {
    case HeadNorm::None: return "none";
    case HeadNorm::Batch: return "batch";
    case HeadNorm::Layer: return "layer";
  }
  return "?";
}

inline HeadNorm parse_head_norm(const std::string& s) {
  if (s == "none") return HeadNorm::None;
  if (s == "batch") return HeadNorm::Batch;
  if (s == "layer") return HeadNorm::Layer;
  throw std::invalid_argument("unknown head norm '" + s + "'");
}

/// The best normalisation per vanilla similarity; attention and 1D variants
/// take layer normalisation by construction.
inline HeadNorm default_head_norm(Variant v) {
  switch (v) {
    case Variant::P2D_EV:
    case Variant::P2D_AV: return HeadNorm::Batch;
    case Variant::P2D_MV: return HeadNorm::None;
    default: return HeadNorm::Layer;
  }
}

struct Cnn8Config {
  std::vector<std::size_t> block_channels{64, 128, 256, 512};
  int conv_kernel = 3;
  std::size_t input_channels = 3;

  void validate() const {
    if (block_channels.size() != 4)
      throw std::invalid_argument("Cnn8Config: exactly 4 blocks required");
    for (std::size_t i = 1; i < block_channels.size(); ++i)
      if (block_channels[i] <= block_channels[i - 1])
        throw std::invalid_argument("Cnn8Config: channels must be strictly increasing");
    if (conv_kernel < 1 || conv_kernel % 2 == 0)
      throw std::invalid_argument("Cnn8Config: conv kernel must be odd and positive");
  }
};

struct ModelConfig {
  Cnn8Config encoder;
  std::size_t input_time = 124;
  std::size_t input_mel = 128;
  Variant variant = Variant::P2D_EV;
  HeadNorm norm = HeadNorm::Batch;
  std::size_t classes = 4;
  std::size_t per_class = 1;  // N in [1,5]

  void validate() const {
    encoder.validate();
    if (per_class < 1 || per_class > 5)
      throw std::invalid_argument("ModelConfig: prototypes per class must be in [1,5]");
    if (classes < 2) throw std::invalid_argument("ModelConfig: need at least two classes");
  }
};

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <typename T>
struct NamedParam {
  std::string name;
  Variable<T> var;
};

template <typename T>
struct NamedBuffer {
  std::string name;
  Tensor<T>* tensor;
};

template <typename T>
struct ConvLayer {
  Variable<T> weight;  // (Co,Ci,k,k)
  Variable<T> bias;    // (Co)

  static ConvLayer init(Tape<T>& tape, std::size_t co, std::size_t ci, std::size_t k, Rng& rng) {
    Tensor<T> w(Shape{co, ci, k, k});
    const double stddev = std::sqrt(2.0 / static_cast<double>(ci * k * k));
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(rng.normal() * stddev);
    return {Variable<T>::leaf(tape, std::move(w), true),
            Variable<T>::leaf(tape, Tensor<T>::zeros(Shape{co}), true)};
  }
};

template <typename T>
struct BatchNormLayer {
  Variable<T> gamma, beta;
  BatchNormState<T> state;

  static BatchNormLayer init(Tape<T>& tape, std::size_t c) {
    return {Variable<T>::leaf(tape, Tensor<T>::full(Shape{c}, T(1)), true),
            Variable<T>::leaf(tape, Tensor<T>::zeros(Shape{c}), true),
            {Tensor<T>::zeros(Shape{c}), Tensor<T>::full(Shape{c}, T(1))}};
  }
};

template <typename T>
struct LayerNormLayer {
  Variable<T> gamma, beta;

  static LayerNormLayer init(Tape<T>& tape, std::size_t d) {
    return {Variable<T>::leaf(tape, Tensor<T>::full(Shape{d}, T(1)), true),
            Variable<T>::leaf(tape, Tensor<T>::zeros(Shape{d}), true)};
  }
};

template <typename T>
struct LinearLayer {
  Variable<T> weight, bias;

  static LinearLayer init(Tape<T>& tape, std::size_t k, std::size_t d, Rng& rng) {
    Tensor<T> w(Shape{k, d});
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(rng.uniform(-bound, bound));
    return {Variable<T>::leaf(tape, std::move(w), true),
            Variable<T>::leaf(tape, Tensor<T>::zeros(Shape{k}), true)};
  }
};

// ---------------------------------------------------------------------------
// CNN-8 encoder: four blocks of [conv3x3 -> BN -> ReLU] x2 -> maxpool 2x2
// ---------------------------------------------------------------------------

template <typename T>
class Cnn8 {
 public:
  struct Block {
    ConvLayer<T> conv1, conv2;
    BatchNormLayer<T> bn1, bn2;
  };

  Cnn8(Tape<T>& tape, const Cnn8Config& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    std::size_t cin = cfg_.input_channels;
    const std::size_t k = static_cast<std::size_t>(cfg_.conv_kernel);
    for (std::size_t c : cfg_.block_channels) {
      Block b;
      b.conv1 = ConvLayer<T>::init(tape, c, cin, k, rng);
      b.bn1 = BatchNormLayer<T>::init(tape, c);
      b.conv2 = ConvLayer<T>::init(tape, c, c, k, rng);
      b.bn2 = BatchNormLayer<T>::init(tape, c);
      blocks_.push_back(std::move(b));
      cin = c;
    }
  }

  /// (B,3,H,W) -> (B,C,H/16,W/16); also accepts a single (3,H,W) sample.
  Variable<T> forward(const Variable<T>& x, bool training) {
    const auto& shape = x.shape();
    const std::size_t ch = shape.size() == 4 ? shape[1] : shape[0];
    detail::require(ch == cfg_.input_channels,
                    "Cnn8: expected " + std::to_string(cfg_.input_channels) +
                        " input channels, got " + shape_str(shape));
    const int pad = cfg_.conv_kernel / 2;
    Variable<T> h = x;
    for (auto& b : blocks_) {
      h = relu(batchnorm(conv2d(h, b.conv1.weight, b.conv1.bias, pad), b.bn1.gamma, b.bn1.beta,
                         b.bn1.state, training));
      h = relu(batchnorm(conv2d(h, b.conv2.weight, b.conv2.bias, pad), b.bn2.gamma, b.bn2.beta,
                         b.bn2.state, training));
      h = maxpool2d(h, 2);
    }
    return h;
  }

  /// Spatial size after the four pooling stages.
  static std::pair<std::size_t, std::size_t> output_spatial(std::size_t h, std::size_t w) {
    for (int i = 0; i < 4; ++i) {
      h /= 2;
      w /= 2;
    }
    return {h, w};
  }
  std::size_t output_channels() const { return cfg_.block_channels.back(); }

  std::vector<NamedParam<T>> parameters(const std::string& prefix) {
    std::vector<NamedParam<T>> out;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const std::string base = prefix + ".block" + std::to_string(i);
      out.push_back({base + ".conv1.weight", blocks_[i].conv1.weight});
      out.push_back({base + ".conv1.bias", blocks_[i].conv1.bias});
      out.push_back({base + ".bn1.gamma", blocks_[i].bn1.gamma});
      out.push_back({base + ".bn1.beta", blocks_[i].bn1.beta});
      out.push_back({base + ".conv2.weight", blocks_[i].conv2.weight});
      out.push_back({base + ".conv2.bias", blocks_[i].conv2.bias});
      out.push_back({base + ".bn2.gamma", blocks_[i].bn2.gamma});
      out.push_back({base + ".bn2.beta", blocks_[i].bn2.beta});
    }
    return out;
  }

  std::vector<NamedBuffer<T>> buffers(const std::string& prefix) {
    std::vector<NamedBuffer<T>> out;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const std::string base = prefix + ".block" + std::to_string(i);
      out.push_back({base + ".bn1.running_mean", &blocks_[i].bn1.state.running_mean});
      out.push_back({base + ".bn1.running_var", &blocks_[i].bn1.state.running_var});
      out.push_back({base + ".bn2.running_mean", &blocks_[i].bn2.state.running_mean});
      out.push_back({base + ".bn2.running_var", &blocks_[i].bn2.state.running_var});
    }
    return out;
  }

  std::vector<Block>& blocks() { return blocks_; }

 private:
  Cnn8Config cfg_;
  std::vector<Block> blocks_;
};

// ---------------------------------------------------------------------------
// Prototype bank
// ---------------------------------------------------------------------------

template <typename T>
struct PrototypeBank {
  Variable<T> prototypes;  // (L*N, C) for 1D, (L*N, C, T, R) for 2D
  Variant variant = Variant::P1D;
  std::size_t classes = 4;
  std::size_t per_class = 1;

  std::size_t count() const { return classes * per_class; }
  std::size_t class_of(std::size_t index) const { return index / per_class; }

  static PrototypeBank init(Tape<T>& tape, Variant variant, std::size_t classes,
                            std::size_t per_class, std::size_t channels, std::size_t t,
                            std::size_t r, Rng& rng) {
    const std::size_t rows = classes * per_class;
    Shape shape = variant == Variant::P1D ? Shape{rows, channels} : Shape{rows, channels, t, r};
    Tensor<T> protos(shape);
    for (std::size_t i = 0; i < protos.size(); ++i)
      protos[i] = static_cast<T>(rng.uniform(-0.5, 0.5));
    PrototypeBank bank;
    bank.prototypes = Variable<T>::leaf(tape, std::move(protos), true);
    bank.variant = variant;
    bank.classes = classes;
    bank.per_class = per_class;
    return bank;
  }
};

/// Scalar similarity between a sample representation and one prototype,
/// according to the bank's variant.
template <typename T>
Variable<T> prototype_similarity(Variant variant, const Variable<T>& f, const Variable<T>& proto) {
  switch (variant) {
    case Variant::P1D: return sim_1d(f, proto);
    case Variant::P2D_EV: return scalarize(sim_2ev(f, proto));
    case Variant::P2D_AV: return scalarize(sim_2av(f, proto));
    case Variant::P2D_MV: return scalarize(sim_2mv(f, proto));
    case Variant::P2D_EA: return sim_2ea(f, proto);
    case Variant::P2D_MA: return sim_2ma(f, proto);
  }
  throw std::invalid_argument("prototype_similarity: bad variant");
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

template <typename T>
class PrototypeModel {
 public:
  PrototypeModel(const ModelConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(init_seed);
    encoder_ = std::make_unique<Cnn8<T>>(tape_, cfg_.encoder, rng);
    auto [t, r] = Cnn8<T>::output_spatial(cfg_.input_time, cfg_.input_mel);
    feat_t_ = t;
    feat_r_ = r;
    detail::require(t >= 1 && r >= 1, "PrototypeModel: input too small for four pooling stages");
    bank_ = PrototypeBank<T>::init(tape_, cfg_.variant, cfg_.classes, cfg_.per_class,
                                   encoder_->output_channels(), t, r, rng);
    const std::size_t d = cfg_.classes * cfg_.per_class;
    if (cfg_.norm == HeadNorm::Layer) head_ln_ = LayerNormLayer<T>::init(tape_, d);
    if (cfg_.norm == HeadNorm::Batch) head_bn_ = BatchNormLayer<T>::init(tape_, d);
    fc_ = LinearLayer<T>::init(tape_, cfg_.classes, d, rng);
  }

  /// Similarities of one encoded sample against every prototype, as (L*N).
  Variable<T> similarity_vector(const Variable<T>& sample_features) {
    std::vector<Variable<T>> sims;
    sims.reserve(bank_.count());
    for (std::size_t i = 0; i < bank_.count(); ++i) {
      Variable<T> proto = slice_first(bank_.prototypes, i);
      sims.push_back(prototype_similarity(cfg_.variant, sample_features, proto));
    }
    return concat_scalars(sims);
  }

  /// Class logits for a batch (B,3,H,W).
  Variable<T> forward_logits(const Tensor<T>& batch, bool training) {
    detail::require(batch.rank() == 4, "forward_logits: batch must be (B,3,H,W)");
    detail::require(batch.dim(2) == cfg_.input_time && batch.dim(3) == cfg_.input_mel,
                    "forward_logits: input " + shape_str(batch.shape()) + " does not match (" +
                        std::to_string(cfg_.input_time) + "," + std::to_string(cfg_.input_mel) +
                        ")");
    Variable<T> x = Variable<T>::leaf(tape_, batch, false);
    Variable<T> enc = encoder_->forward(x, training);
    if (cfg_.variant == Variant::P1D) enc = global_maxpool(enc);
    std::vector<Variable<T>> rows;
    rows.reserve(batch.dim(0));
    for (std::size_t b = 0; b < batch.dim(0); ++b)
      rows.push_back(similarity_vector(slice_first(enc, b)));
    Variable<T> s = stack_rows(rows);
    switch (cfg_.norm) {
      case HeadNorm::Layer: s = layernorm(s, head_ln_.gamma, head_ln_.beta); break;
      case HeadNorm::Batch:
        s = batchnorm(s, head_bn_.gamma, head_bn_.beta, head_bn_.state, training);
        break;
      case HeadNorm::None: break;
    }
    return linear(s, fc_.weight, fc_.bias);
  }

  Variable<T> forward_log_probs(const Tensor<T>& batch, bool training) {
    return log_softmax(forward_logits(batch, training));
  }

  /// Class probabilities for one feature map, evaluation mode, no gradients.
  Tensor<T> predict_probs(const Tensor<T>& feature) {
    detail::require(feature.rank() == 3, "predict_probs: input must be (3,T,F)");
    NoGradGuard<T> guard(tape_);
    Tensor<T> batch(Shape{1, feature.dim(0), feature.dim(1), feature.dim(2)}, feature.vec());
    Variable<T> probs = softmax(forward_logits(batch, false));
    Tensor<T> out(Shape{cfg_.classes});
    std::copy_n(probs.value().data(), cfg_.classes, out.data());
    return out;
  }

  /// Encoded representation of one sample (C,t,r), or (C) for the 1D variant;
  /// evaluation mode, no gradients. This is f(x) for prototype projection.
  Tensor<T> encode_sample(const Tensor<T>& feature) {
    detail::require(feature.rank() == 3, "encode_sample: input must be (3,T,F)");
    NoGradGuard<T> guard(tape_);
    Tensor<T> batch(Shape{1, feature.dim(0), feature.dim(1), feature.dim(2)}, feature.vec());
    Variable<T> x = Variable<T>::leaf(tape_, std::move(batch), false);
    Variable<T> enc = encoder_->forward(x, false);
    if (cfg_.variant == Variant::P1D) enc = global_maxpool(enc);
    return slice_first(enc, 0).value();
  }

  std::vector<NamedParam<T>> parameters() {
    auto out = encoder_->parameters("encoder");
    out.push_back({"bank.prototypes", bank_.prototypes});
    if (cfg_.norm == HeadNorm::Layer) {
      out.push_back({"head.ln.gamma", head_ln_.gamma});
      out.push_back({"head.ln.beta", head_ln_.beta});
    }
    if (cfg_.norm == HeadNorm::Batch) {
      out.push_back({"head.bn.gamma", head_bn_.gamma});
      out.push_back({"head.bn.beta", head_bn_.beta});
    }
    out.push_back({"fc.weight", fc_.weight});
    out.push_back({"fc.bias", fc_.bias});
    return out;
  }

  std::vector<NamedBuffer<T>> buffers() {
    auto out = encoder_->buffers("encoder");
    if (cfg_.norm == HeadNorm::Batch) {
      out.push_back({"head.bn.running_mean", &head_bn_.state.running_mean});
      out.push_back({"head.bn.running_var", &head_bn_.state.running_var});
    }
    return out;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.var.zero_grad();
  }

  Tape<T>& tape() { return tape_; }
  const ModelConfig& config() const { return cfg_; }
  Cnn8<T>& encoder() { return *encoder_; }
  PrototypeBank<T>& bank() { return bank_; }
  std::pair<std::size_t, std::size_t> feature_spatial() const { return {feat_t_, feat_r_}; }

 private:
  ModelConfig cfg_;
  Tape<T> tape_;
  std::unique_ptr<Cnn8<T>> encoder_;
  PrototypeBank<T> bank_;
  LayerNormLayer<T> head_ln_;
  BatchNormLayer<T> head_bn_;
  LinearLayer<T> fc_;
  std::size_t feat_t_ = 0, feat_r_ = 0;
};

}  // namespace psound
