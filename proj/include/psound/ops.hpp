#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "psound/autodiff.hpp"
#include "psound/tensor.hpp"

namespace psound {

namespace detail {
inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / reductions
// ---------------------------------------------------------------------------

template <typename T>
Variable<T> relu(const Variable<T>& x) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  const T* xp = xv.data();
  T* op = out.data();
  for (std::size_t i = 0; i < xv.size(); ++i) op[i] = xp[i] > T(0) ? xp[i] : T(0);
  auto xn = x.node();
  return x.tape()->emit(std::move(out), "relu", {xn}, [xn](TapeNode<T>& n) {
    if (!xn->requires_grad) return;
    T* dx = xn->ensure_grad().data();
    const T* xp = xn->value.data();
    const T* g = n.grad.data();
    for (std::size_t i = 0; i < n.value.size(); ++i)
      if (xp[i] > T(0)) dx[i] += g[i];
  });
}

/// Mean over every element; returns a scalar.
template <typename T>
Variable<T> mean_all(const Variable<T>& x) {
  const auto& xv = x.value();
  T acc = T(0);
  for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i];
  const T inv = T(1) / static_cast<T>(xv.size());
  auto xn = x.node();
  return x.tape()->emit(Tensor<T>::scalar(acc * inv), "mean_all", {xn}, [xn, inv](TapeNode<T>& n) {
    if (!xn->requires_grad) return;
    T* dx = xn->ensure_grad().data();
    const T g = n.grad[0] * inv;
    for (std::size_t i = 0; i < xn->value.size(); ++i) dx[i] += g;
  });
}

/// Sum over every element; returns a scalar.
template <typename T>
Variable<T> sum_all(const Variable<T>& x) {
  const auto& xv = x.value();
  T acc = T(0);
  for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i];
  auto xn = x.node();
  return x.tape()->emit(Tensor<T>::scalar(acc), "sum_all", {xn}, [xn](TapeNode<T>& n) {
    if (!xn->requires_grad) return;
    T* dx = xn->ensure_grad().data();
    const T g = n.grad[0];
    for (std::size_t i = 0; i < xn->value.size(); ++i) dx[i] += g;
  });
}

// ---------------------------------------------------------------------------
// Scalar arithmetic (size-1 variables), used to compose losses
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
void require_scalar(const Variable<T>& v, const char* who) {
  require(v.size() == 1, std::string(who) + ": expected scalar operand");
}
}  // namespace detail

template <typename T>
Variable<T> add(const Variable<T>& a, const Variable<T>& b) {
  detail::require_scalar(a, "add");
  detail::require_scalar(b, "add");
  auto an = a.node(), bn = b.node();
  return a.tape()->emit(Tensor<T>::scalar(a.value()[0] + b.value()[0]), "add", {an, bn},
                        [an, bn](TapeNode<T>& n) {
                          if (an->requires_grad) an->ensure_grad()[0] += n.grad[0];
                          if (bn->requires_grad) bn->ensure_grad()[0] += n.grad[0];
                        });
}

template <typename T>
Variable<T> mul(const Variable<T>& a, const Variable<T>& b) {
  detail::require_scalar(a, "mul");
  detail::require_scalar(b, "mul");
  auto an = a.node(), bn = b.node();
  return a.tape()->emit(Tensor<T>::scalar(a.value()[0] * b.value()[0]), "mul", {an, bn},
                        [an, bn](TapeNode<T>& n) {
                          if (an->requires_grad) an->ensure_grad()[0] += n.grad[0] * bn->value[0];
                          if (bn->requires_grad) bn->ensure_grad()[0] += n.grad[0] * an->value[0];
                        });
}

template <typename T>
Variable<T> div(const Variable<T>& a, const Variable<T>& b) {
  detail::require_scalar(a, "div");
  detail::require_scalar(b, "div");
  auto an = a.node(), bn = b.node();
  return a.tape()->emit(Tensor<T>::scalar(a.value()[0] / b.value()[0]), "div", {an, bn},
                        [an, bn](TapeNode<T>& n) {
                          const T bv = bn->value[0];
                          if (an->requires_grad) an->ensure_grad()[0] += n.grad[0] / bv;
                          if (bn->requires_grad)
                            bn->ensure_grad()[0] -= n.grad[0] * an->value[0] / (bv * bv);
                        });
}

template <typename T>
Variable<T> scale(const Variable<T>& a, T c) {
  detail::require_scalar(a, "scale");
  auto an = a.node();
  return a.tape()->emit(Tensor<T>::scalar(a.value()[0] * c), "scale", {an},
                        [an, c](TapeNode<T>& n) {
                          if (an->requires_grad) an->ensure_grad()[0] += n.grad[0] * c;
                        });
}

template <typename T>
Variable<T> sum_scalars(const std::vector<Variable<T>>& xs) {
  detail::require(!xs.empty(), "sum_scalars: empty input");
  T acc = T(0);
  std::vector<std::shared_ptr<TapeNode<T>>> parents;
  parents.reserve(xs.size());
  for (const auto& x : xs) {
    detail::require_scalar(x, "sum_scalars");
    acc += x.value()[0];
    parents.push_back(x.node());
  }
  auto ps = parents;
  return xs.front().tape()->emit(Tensor<T>::scalar(acc), "sum_scalars", std::move(parents),
                                 [ps](TapeNode<T>& n) {
                                   for (const auto& p : ps)
                                     if (p->requires_grad) p->ensure_grad()[0] += n.grad[0];
                                 });
}

template <typename T>
Variable<T> mean_scalars(const std::vector<Variable<T>>& xs) {
  return scale(sum_scalars(xs), T(1) / static_cast<T>(xs.size()));
}

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

/// Index the first axis: (N, rest...) -> (rest...). Used both to pick one
/// sample out of a batch and one prototype out of a bank.
template <typename T>
Variable<T> slice_first(const Variable<T>& x, std::size_t index) {
  const auto& xv = x.value();
  detail::require(xv.rank() >= 1 && index < xv.dim(0), "slice_first: index out of range");
  Shape out_shape(xv.shape().begin() + 1, xv.shape().end());
  if (out_shape.empty()) out_shape = {1};
  const std::size_t block = shape_numel(out_shape);
  Tensor<T> out(out_shape);
  std::copy_n(xv.data() + index * block, block, out.data());
  auto xn = x.node();
  return x.tape()->emit(std::move(out), "slice_first", {xn}, [xn, index, block](TapeNode<T>& n) {
    if (!xn->requires_grad) return;
    T* dx = xn->ensure_grad().data() + index * block;
    const T* g = n.grad.data();
    for (std::size_t i = 0; i < block; ++i) dx[i] += g[i];
  });
}

/// Stack equal-length vectors into a (B, D) matrix.
template <typename T>
Variable<T> stack_rows(const std::vector<Variable<T>>& rows) {
  detail::require(!rows.empty(), "stack_rows: empty input");
  const std::size_t d = rows.front().size();
  Tensor<T> out(Shape{rows.size(), d});
  std::vector<std::shared_ptr<TapeNode<T>>> parents;
  parents.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    detail::require(rows[r].size() == d, "stack_rows: ragged rows");
    std::copy_n(rows[r].value().data(), d, out.data() + r * d);
    parents.push_back(rows[r].node());
  }
  auto ps = parents;
  return rows.front().tape()->emit(std::move(out), "stack_rows", std::move(parents),
                                   [ps, d](TapeNode<T>& n) {
                                     for (std::size_t r = 0; r < ps.size(); ++r) {
                                       if (!ps[r]->requires_grad) continue;
                                       T* dp = ps[r]->ensure_grad().data();
                                       const T* g = n.grad.data() + r * d;
                                       for (std::size_t i = 0; i < d; ++i) dp[i] += g[i];
                                     }
                                   });
}

/// Concatenate scalars into a vector of length N.
template <typename T>
Variable<T> concat_scalars(const std::vector<Variable<T>>& xs) {
  detail::require(!xs.empty(), "concat_scalars: empty input");
  Tensor<T> out(Shape{xs.size()});
  std::vector<std::shared_ptr<TapeNode<T>>> parents;
  parents.reserve(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    detail::require_scalar(xs[i], "concat_scalars");
    out[i] = xs[i].value()[0];
    parents.push_back(xs[i].node());
  }
  auto ps = parents;
  return xs.front().tape()->emit(std::move(out), "concat_scalars", std::move(parents),
                                 [ps](TapeNode<T>& n) {
                                   for (std::size_t i = 0; i < ps.size(); ++i)
                                     if (ps[i]->requires_grad)
                                       ps[i]->ensure_grad()[0] += n.grad[i];
                                 });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// 2D convolution, stride 1, zero padding. Accepts (C,H,W) or (B,C,H,W)
/// input; weight is (Co,Ci,k,k), bias (Co). Output H' = H + 2*padding - k + 1.
template <typename T>
Variable<T> conv2d(const Variable<T>& x, const Variable<T>& w, const Variable<T>& b,
                   int padding) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = b.value();
  detail::require(xv.rank() == 3 || xv.rank() == 4, "conv2d: input must be (C,H,W) or (B,C,H,W)");
  detail::require(wv.rank() == 4, "conv2d: weight must be (Co,Ci,k,k)");
  detail::require(wv.dim(2) == wv.dim(3), "conv2d: kernel must be square");
  detail::require(padding >= 0, "conv2d: padding must be >= 0");
  const bool batched = xv.rank() == 4;
  const std::size_t B = batched ? xv.dim(0) : 1;
  const std::size_t Ci = batched ? xv.dim(1) : xv.dim(0);
  const std::size_t H = batched ? xv.dim(2) : xv.dim(1);
  const std::size_t W = batched ? xv.dim(3) : xv.dim(2);
  const std::size_t Co = wv.dim(0);
  const std::size_t K = wv.dim(2);
  detail::require(wv.dim(1) == Ci, "conv2d: input channels " + std::to_string(Ci) +
                                       " do not match weight " + shape_str(wv.shape()));
  detail::require(bv.rank() == 1 && bv.dim(0) == Co, "conv2d: bias must be (Co)");
  const std::ptrdiff_t P = padding;
  const std::ptrdiff_t Ho = static_cast<std::ptrdiff_t>(H) + 2 * P - static_cast<std::ptrdiff_t>(K) + 1;
  const std::ptrdiff_t Wo = static_cast<std::ptrdiff_t>(W) + 2 * P - static_cast<std::ptrdiff_t>(K) + 1;
  detail::require(Ho >= 1 && Wo >= 1, "conv2d: kernel larger than padded input");
  const std::size_t HO = Ho, WO = Wo;

  Tensor<T> out(batched ? Shape{B, Co, HO, WO} : Shape{Co, HO, WO});
  const T* xp = xv.data();
  const T* wp = wv.data();
  const T* bp = bv.data();
  T* op = out.data();

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t bc = 0; bc < static_cast<std::ptrdiff_t>(B * Co); ++bc) {
    const std::size_t bi = bc / Co, co = bc % Co;
    T* oplane = op + (bi * Co + co) * HO * WO;
    std::fill_n(oplane, HO * WO, bp[co]);
    for (std::size_t ci = 0; ci < Ci; ++ci) {
      const T* xplane = xp + (bi * Ci + ci) * H * W;
      const T* wk = wp + (co * Ci + ci) * K * K;
      for (std::size_t kh = 0; kh < K; ++kh) {
        for (std::size_t kw = 0; kw < K; ++kw) {
          const T wvscalar = wk[kh * K + kw];
          const std::ptrdiff_t oh_lo = std::max<std::ptrdiff_t>(0, P - static_cast<std::ptrdiff_t>(kh));
          const std::ptrdiff_t oh_hi = std::min<std::ptrdiff_t>(Ho, static_cast<std::ptrdiff_t>(H) + P - kh);
          const std::ptrdiff_t ow_lo = std::max<std::ptrdiff_t>(0, P - static_cast<std::ptrdiff_t>(kw));
          const std::ptrdiff_t ow_hi = std::min<std::ptrdiff_t>(Wo, static_cast<std::ptrdiff_t>(W) + P - kw);
          for (std::ptrdiff_t oh = oh_lo; oh < oh_hi; ++oh) {
            const T* xrow = xplane + (oh + kh - P) * W + (kw - P);
            T* orow = oplane + oh * WO;
            for (std::ptrdiff_t ow = ow_lo; ow < ow_hi; ++ow) orow[ow] += wvscalar * xrow[ow];
          }
        }
      }
    }
  }

  auto xn = x.node(), wn = w.node(), bn = b.node();
  return x.tape()->emit(
      std::move(out), "conv2d", {xn, wn, bn},
      [xn, wn, bn, B, Ci, H, W, Co, K, P, HO, WO](TapeNode<T>& n) {
        const std::ptrdiff_t Ho = HO, Wo = WO;
        const T* g = n.grad.data();
        const T* xp = xn->value.data();
        const T* wp = wn->value.data();
        if (bn->requires_grad) {
          T* db = bn->ensure_grad().data();
          for (std::size_t co = 0; co < Co; ++co) {
            T acc = T(0);
            for (std::size_t bi = 0; bi < B; ++bi) {
              const T* gplane = g + (bi * Co + co) * HO * WO;
              for (std::size_t i = 0; i < HO * WO; ++i) acc += gplane[i];
            }
            db[co] += acc;
          }
        }
        if (wn->requires_grad) {
          T* dw = wn->ensure_grad().data();
#pragma omp parallel for schedule(static)
          for (std::ptrdiff_t co = 0; co < static_cast<std::ptrdiff_t>(Co); ++co) {
            for (std::size_t ci = 0; ci < Ci; ++ci) {
              for (std::size_t kh = 0; kh < K; ++kh) {
                for (std::size_t kw = 0; kw < K; ++kw) {
                  const std::ptrdiff_t oh_lo = std::max<std::ptrdiff_t>(0, P - static_cast<std::ptrdiff_t>(kh));
                  const std::ptrdiff_t oh_hi = std::min<std::ptrdiff_t>(Ho, static_cast<std::ptrdiff_t>(H) + P - kh);
                  const std::ptrdiff_t ow_lo = std::max<std::ptrdiff_t>(0, P - static_cast<std::ptrdiff_t>(kw));
                  const std::ptrdiff_t ow_hi = std::min<std::ptrdiff_t>(Wo, static_cast<std::ptrdiff_t>(W) + P - kw);
                  T acc = T(0);
                  for (std::size_t bi = 0; bi < B; ++bi) {
                    const T* xplane = xp + (bi * Ci + ci) * H * W;
                    const T* gplane = g + (bi * Co + co) * HO * WO;
                    for (std::ptrdiff_t oh = oh_lo; oh < oh_hi; ++oh) {
                      const T* xrow = xplane + (oh + kh - P) * W + (kw - P);
                      const T* grow = gplane + oh * WO;
                      for (std::ptrdiff_t ow = ow_lo; ow < ow_hi; ++ow) acc += xrow[ow] * grow[ow];
                    }
                  }
                  dw[(co * Ci + ci) * K * K + kh * K + kw] += acc;
                }
              }
            }
          }
        }
        if (xn->requires_grad) {
          T* dx = xn->ensure_grad().data();
#pragma omp parallel for schedule(static)
          for (std::ptrdiff_t bc = 0; bc < static_cast<std::ptrdiff_t>(B * Ci); ++bc) {
            const std::size_t bi = bc / Ci, ci = bc % Ci;
            T* dxplane = dx + (bi * Ci + ci) * H * W;
            for (std::size_t co = 0; co < Co; ++co) {
              const T* gplane = g + (bi * Co + co) * HO * WO;
              const T* wk = wp + (co * Ci + ci) * K * K;
              for (std::size_t kh = 0; kh < K; ++kh) {
                for (std::size_t kw = 0; kw < K; ++kw) {
                  const T wvscalar = wk[kh * K + kw];
                  const std::ptrdiff_t oh_lo = std::max<std::ptrdiff_t>(0, P - static_cast<std::ptrdiff_t>(kh));
                  const std::ptrdiff_t oh_hi = std::min<std::ptrdiff_t>(Ho, static_cast<std::ptrdiff_t>(H) + P - kh);
                  const std::ptrdiff_t ow_lo = std::max<std::ptrdiff_t>(0, P - static_cast<std::ptrdiff_t>(kw));
                  const std::ptrdiff_t ow_hi = std::min<std::ptrdiff_t>(Wo, static_cast<std::ptrdiff_t>(W) + P - kw);
                  for (std::ptrdiff_t oh = oh_lo; oh < oh_hi; ++oh) {
                    T* dxrow = dxplane + (oh + kh - P) * W + (kw - P);
                    const T* grow = gplane + oh * WO;
                    for (std::ptrdiff_t ow = ow_lo; ow < ow_hi; ++ow) dxrow[ow] += wvscalar * grow[ow];
                  }
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Non-overlapping k x k max pooling; trailing remainder rows/cols dropped.
/// Gradient is routed to the first (row-major) argmax of each window.
template <typename T>
Variable<T> maxpool2d(const Variable<T>& x, int k = 2) {
  detail::require(k >= 1, "maxpool2d: kernel size must be positive");
  const auto& xv = x.value();
  detail::require(xv.rank() == 3 || xv.rank() == 4, "maxpool2d: input must be (C,H,W) or (B,C,H,W)");
  const bool batched = xv.rank() == 4;
  const std::size_t B = batched ? xv.dim(0) : 1;
  const std::size_t C = batched ? xv.dim(1) : xv.dim(0);
  const std::size_t H = batched ? xv.dim(2) : xv.dim(1);
  const std::size_t W = batched ? xv.dim(3) : xv.dim(2);
  const std::size_t kk = static_cast<std::size_t>(k);
  detail::require(H >= kk && W >= kk, "maxpool2d: input smaller than kernel");
  const std::size_t HO = H / kk, WO = W / kk;

  Tensor<T> out(batched ? Shape{B, C, HO, WO} : Shape{C, HO, WO});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(B * C * HO * WO);
  const T* xp = xv.data();
  T* op = out.data();
  std::uint32_t* am = argmax->data();

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t pc = 0; pc < static_cast<std::ptrdiff_t>(B * C); ++pc) {
    const T* plane = xp + pc * H * W;
    T* oplane = op + pc * HO * WO;
    std::uint32_t* aplane = am + pc * HO * WO;
    for (std::size_t oh = 0; oh < HO; ++oh) {
      for (std::size_t ow = 0; ow < WO; ++ow) {
        T best = plane[oh * kk * W + ow * kk];
        std::size_t best_idx = oh * kk * W + ow * kk;
        for (std::size_t dh = 0; dh < kk; ++dh) {
          for (std::size_t dw = 0; dw < kk; ++dw) {
            const std::size_t idx = (oh * kk + dh) * W + ow * kk + dw;
            if (plane[idx] > best) {
              best = plane[idx];
              best_idx = idx;
            }
          }
        }
        oplane[oh * WO + ow] = best;
        aplane[oh * WO + ow] = static_cast<std::uint32_t>(best_idx);
      }
    }
  }

  auto xn = x.node();
  const std::size_t plane_in = H * W, plane_out = HO * WO, planes = B * C;
  return x.tape()->emit(std::move(out), "maxpool2d", {xn},
                        [xn, argmax, plane_in, plane_out, planes](TapeNode<T>& n) {
                          if (!xn->requires_grad) return;
                          T* dx = xn->ensure_grad().data();
                          const T* g = n.grad.data();
                          const std::uint32_t* am = argmax->data();
                          for (std::size_t pc = 0; pc < planes; ++pc)
                            for (std::size_t i = 0; i < plane_out; ++i)
                              dx[pc * plane_in + am[pc * plane_out + i]] += g[pc * plane_out + i];
                        });
}

/// Per-channel max over all spatial bins: (C,H,W) -> (C), (B,C,H,W) -> (B,C).
template <typename T>
Variable<T> global_maxpool(const Variable<T>& x) {
  const auto& xv = x.value();
  detail::require(xv.rank() == 3 || xv.rank() == 4,
                  "global_maxpool: input must be (C,H,W) or (B,C,H,W)");
  const bool batched = xv.rank() == 4;
  const std::size_t planes = batched ? xv.dim(0) * xv.dim(1) : xv.dim(0);
  const std::size_t plane = batched ? xv.dim(2) * xv.dim(3) : xv.dim(1) * xv.dim(2);

  Tensor<T> out(batched ? Shape{xv.dim(0), xv.dim(1)} : Shape{xv.dim(0)});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(planes);
  const T* xp = xv.data();
  for (std::size_t c = 0; c < planes; ++c) {
    const T* p = xp + c * plane;
    T best = p[0];
    std::size_t bi = 0;
    for (std::size_t i = 1; i < plane; ++i)
      if (p[i] > best) {
        best = p[i];
        bi = i;
      }
    out[c] = best;
    (*argmax)[c] = static_cast<std::uint32_t>(bi);
  }

  auto xn = x.node();
  return x.tape()->emit(std::move(out), "global_maxpool", {xn},
                        [xn, argmax, planes, plane](TapeNode<T>& n) {
                          if (!xn->requires_grad) return;
                          T* dx = xn->ensure_grad().data();
                          for (std::size_t c = 0; c < planes; ++c)
                            dx[c * plane + (*argmax)[c]] += n.grad[c];
                        });
}

// ---------------------------------------------------------------------------
// Affine map
// ---------------------------------------------------------------------------

/// y = W x + b, with x either (D) or (B,D); weight (K,D), bias (K).
template <typename T>
Variable<T> linear(const Variable<T>& x, const Variable<T>& w, const Variable<T>& b) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = b.value();
  detail::require(xv.rank() == 1 || xv.rank() == 2, "linear: input must be (D) or (B,D)");
  detail::require(wv.rank() == 2, "linear: weight must be (K,D)");
  const std::size_t B = xv.rank() == 2 ? xv.dim(0) : 1;
  const std::size_t D = xv.rank() == 2 ? xv.dim(1) : xv.dim(0);
  const std::size_t K = wv.dim(0);
  detail::require(wv.dim(1) == D, "linear: input dim " + std::to_string(D) +
                                      " does not match weight " + shape_str(wv.shape()));
  detail::require(bv.rank() == 1 && bv.dim(0) == K, "linear: bias must be (K)");

  Tensor<T> out(xv.rank() == 2 ? Shape{B, K} : Shape{K});
  for (std::size_t bi = 0; bi < B; ++bi) {
    const T* xrow = xv.data() + bi * D;
    T* orow = out.data() + bi * K;
    for (std::size_t k = 0; k < K; ++k) {
      T acc = bv[k];
      const T* wrow = wv.data() + k * D;
      for (std::size_t d = 0; d < D; ++d) acc += wrow[d] * xrow[d];
      orow[k] = acc;
    }
  }

  auto xn = x.node(), wn = w.node(), bn = b.node();
  return x.tape()->emit(std::move(out), "linear", {xn, wn, bn},
                        [xn, wn, bn, B, D, K](TapeNode<T>& n) {
                          const T* g = n.grad.data();
                          const T* xp = xn->value.data();
                          const T* wp = wn->value.data();
                          for (std::size_t bi = 0; bi < B; ++bi) {
                            const T* grow = g + bi * K;
                            const T* xrow = xp + bi * D;
                            if (bn->requires_grad) {
                              T* db = bn->ensure_grad().data();
                              for (std::size_t k = 0; k < K; ++k) db[k] += grow[k];
                            }
                            if (wn->requires_grad) {
                              T* dw = wn->ensure_grad().data();
                              for (std::size_t k = 0; k < K; ++k)
                                for (std::size_t d = 0; d < D; ++d)
                                  dw[k * D + d] += grow[k] * xrow[d];
                            }
                            if (xn->requires_grad) {
                              T* dx = xn->ensure_grad().data() + bi * D;
                              for (std::size_t k = 0; k < K; ++k)
                                for (std::size_t d = 0; d < D; ++d)
                                  dx[d] += grow[k] * wp[k * D + d];
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Normalisation
// ---------------------------------------------------------------------------

/// Running statistics owned by a batch-norm layer.
template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

/// Batch normalisation over the channel axis. Accepts (B,C,H,W) with
/// statistics over (B,H,W), (C,H,W) as a batch of one, or (B,D) with
/// statistics over B. Population variance throughout.
template <typename T>
Variable<T> batchnorm(const Variable<T>& x, const Variable<T>& gamma, const Variable<T>& beta,
                      BatchNormState<T>& state, bool training, T momentum = T(0.9),
                      T eps = T(1e-5)) {
  const auto& xv = x.value();
  detail::require(xv.rank() >= 2 && xv.rank() <= 4, "batchnorm: input rank must be 2, 3 or 4");
  const std::size_t C = xv.rank() == 2 ? xv.dim(1) : (xv.rank() == 3 ? xv.dim(0) : xv.dim(1));
  detail::require(gamma.size() == C && beta.size() == C, "batchnorm: scale/shift must be (C)");
  detail::require(state.running_mean.size() == C && state.running_var.size() == C,
                  "batchnorm: running stats must be (C)");

  // Per-channel element walk: rank 2 -> B strided rows; rank 3/4 -> contiguous
  // HW runs per batch item.
  const bool strided = xv.rank() == 2;
  const std::size_t B = xv.rank() == 4 ? xv.dim(0) : (xv.rank() == 2 ? xv.dim(0) : 1);
  const std::size_t plane = xv.rank() == 2 ? 1
                            : (xv.rank() == 3 ? xv.dim(1) * xv.dim(2) : xv.dim(2) * xv.dim(3));
  const std::size_t per_channel = B * plane;

  auto mean = std::make_shared<std::vector<T>>(C);
  auto inv_std = std::make_shared<std::vector<T>>(C);
  const T* xp = xv.data();

  auto for_each_in_channel = [&](std::size_t c, auto&& fn) {
    if (strided) {
      for (std::size_t bi = 0; bi < B; ++bi) fn(bi * C + c, bi);
    } else {
      for (std::size_t bi = 0; bi < B; ++bi) {
        const std::size_t base = (bi * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) fn(base + i, bi * plane + i);
      }
    }
  };

  if (training) {
    for (std::size_t c = 0; c < C; ++c) {
      T s = T(0), s2 = T(0);
      for_each_in_channel(c, [&](std::size_t idx, std::size_t) {
        s += xp[idx];
        s2 += xp[idx] * xp[idx];
      });
      const T m = s / static_cast<T>(per_channel);
      T var = s2 / static_cast<T>(per_channel) - m * m;
      if (var < T(0)) var = T(0);
      (*mean)[c] = m;
      (*inv_std)[c] = T(1) / std::sqrt(var + eps);
      state.running_mean[c] = momentum * state.running_mean[c] + (T(1) - momentum) * m;
      state.running_var[c] = momentum * state.running_var[c] + (T(1) - momentum) * var;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      (*mean)[c] = state.running_mean[c];
      (*inv_std)[c] = T(1) / std::sqrt(state.running_var[c] + eps);
    }
  }

  Tensor<T> out(xv.shape());
  T* op = out.data();
  const T* gp = gamma.value().data();
  const T* bp = beta.value().data();
  for (std::size_t c = 0; c < C; ++c) {
    const T m = (*mean)[c], is = (*inv_std)[c], ga = gp[c], be = bp[c];
    for_each_in_channel(c, [&](std::size_t idx, std::size_t) { op[idx] = ga * (xp[idx] - m) * is + be; });
  }

  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return x.tape()->emit(
      std::move(out), "batchnorm", {xn, gn, bn},
      [xn, gn, bn, mean, inv_std, training, C, B, plane, strided, per_channel](TapeNode<T>& n) {
        const T* g = n.grad.data();
        const T* xp = xn->value.data();
        const T* gp = gn->value.data();
        auto for_each_in_channel = [&](std::size_t c, auto&& fn) {
          if (strided) {
            for (std::size_t bi = 0; bi < B; ++bi) fn(bi * C + c);
          } else {
            for (std::size_t bi = 0; bi < B; ++bi) {
              const std::size_t base = (bi * C + c) * plane;
              for (std::size_t i = 0; i < plane; ++i) fn(base + i);
            }
          }
        };
        for (std::size_t c = 0; c < C; ++c) {
          const T m = (*mean)[c], is = (*inv_std)[c];
          T sum_dy = T(0), sum_dy_xhat = T(0);
          for_each_in_channel(c, [&](std::size_t idx) {
            sum_dy += g[idx];
            sum_dy_xhat += g[idx] * (xp[idx] - m) * is;
          });
          if (gn->requires_grad) gn->ensure_grad()[c] += sum_dy_xhat;
          if (bn->requires_grad) bn->ensure_grad()[c] += sum_dy;
          if (xn->requires_grad) {
            T* dx = xn->ensure_grad().data();
            const T ga = gp[c];
            if (training) {
              const T inv_n = T(1) / static_cast<T>(per_channel);
              for_each_in_channel(c, [&](std::size_t idx) {
                const T xhat = (xp[idx] - m) * is;
                dx[idx] += ga * is * (g[idx] - sum_dy * inv_n - xhat * sum_dy_xhat * inv_n);
              });
            } else {
              for_each_in_channel(c, [&](std::size_t idx) { dx[idx] += ga * is * g[idx]; });
            }
          }
        }
      });
}

/// Layer normalisation over the last axis with learnable scale/shift.
template <typename T>
Variable<T> layernorm(const Variable<T>& x, const Variable<T>& gamma, const Variable<T>& beta,
                      T eps = T(1e-5)) {
  const auto& xv = x.value();
  detail::require(xv.rank() >= 1, "layernorm: input must have at least one axis");
  const std::size_t D = xv.dim(xv.rank() - 1);
  detail::require(gamma.size() == D && beta.size() == D, "layernorm: scale/shift must be (D)");
  const std::size_t rows = xv.size() / D;

  auto mean = std::make_shared<std::vector<T>>(rows);
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  Tensor<T> out(xv.shape());
  const T* xp = xv.data();
  const T* gp = gamma.value().data();
  const T* bp = beta.value().data();
  T* op = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xp + r * D;
    T s = T(0), s2 = T(0);
    for (std::size_t d = 0; d < D; ++d) {
      s += row[d];
      s2 += row[d] * row[d];
    }
    const T m = s / static_cast<T>(D);
    T var = s2 / static_cast<T>(D) - m * m;
    if (var < T(0)) var = T(0);
    const T is = T(1) / std::sqrt(var + eps);
    (*mean)[r] = m;
    (*inv_std)[r] = is;
    T* orow = op + r * D;
    for (std::size_t d = 0; d < D; ++d) orow[d] = gp[d] * (row[d] - m) * is + bp[d];
  }

  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return x.tape()->emit(
      std::move(out), "layernorm", {xn, gn, bn},
      [xn, gn, bn, mean, inv_std, rows, D](TapeNode<T>& n) {
        const T* g = n.grad.data();
        const T* xp = xn->value.data();
        const T* gp = gn->value.data();
        for (std::size_t r = 0; r < rows; ++r) {
          const T m = (*mean)[r], is = (*inv_std)[r];
          const T* grow = g + r * D;
          const T* xrow = xp + r * D;
          T sum_gg = T(0), sum_gg_xhat = T(0);
          for (std::size_t d = 0; d < D; ++d) {
            const T gg = grow[d] * gp[d];
            const T xhat = (xrow[d] - m) * is;
            sum_gg += gg;
            sum_gg_xhat += gg * xhat;
          }
          if (gn->requires_grad || bn->requires_grad) {
            for (std::size_t d = 0; d < D; ++d) {
              const T xhat = (xrow[d] - m) * is;
              if (gn->requires_grad) gn->ensure_grad()[d] += grow[d] * xhat;
              if (bn->requires_grad) bn->ensure_grad()[d] += grow[d];
            }
          }
          if (xn->requires_grad) {
            T* dx = xn->ensure_grad().data() + r * D;
            const T inv_d = T(1) / static_cast<T>(D);
            for (std::size_t d = 0; d < D; ++d) {
              const T gg = grow[d] * gp[d];
              const T xhat = (xrow[d] - m) * is;
              dx[d] += is * (gg - sum_gg * inv_d - xhat * sum_gg_xhat * inv_d);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Softmax family (last axis, max-subtracted for stability)
// ---------------------------------------------------------------------------

template <typename T>
Variable<T> softmax(const Variable<T>& x) {
  const auto& xv = x.value();
  detail::require(xv.rank() >= 1, "softmax: input must have at least one axis");
  const std::size_t D = xv.dim(xv.rank() - 1);
  const std::size_t rows = xv.size() / D;
  Tensor<T> out(xv.shape());
  const T* xp = xv.data();
  T* op = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xp + r * D;
    T* orow = op + r * D;
    T mx = row[0];
    for (std::size_t d = 1; d < D; ++d) mx = std::max(mx, row[d]);
    T z = T(0);
    for (std::size_t d = 0; d < D; ++d) {
      orow[d] = std::exp(row[d] - mx);
      z += orow[d];
    }
    for (std::size_t d = 0; d < D; ++d) orow[d] /= z;
  }
  auto xn = x.node();
  return x.tape()->emit(std::move(out), "softmax", {xn}, [xn, rows, D](TapeNode<T>& n) {
    if (!xn->requires_grad) return;
    T* dx = xn->ensure_grad().data();
    const T* g = n.grad.data();
    const T* y = n.value.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* grow = g + r * D;
      const T* yrow = y + r * D;
      T dot = T(0);
      for (std::size_t d = 0; d < D; ++d) dot += grow[d] * yrow[d];
      T* dxrow = dx + r * D;
      for (std::size_t d = 0; d < D; ++d) dxrow[d] += yrow[d] * (grow[d] - dot);
    }
  });
}

template <typename T>
Variable<T> log_softmax(const Variable<T>& x) {
  const auto& xv = x.value();
  detail::require(xv.rank() >= 1, "log_softmax: input must have at least one axis");
  const std::size_t D = xv.dim(xv.rank() - 1);
  const std::size_t rows = xv.size() / D;
  Tensor<T> out(xv.shape());
  const T* xp = xv.data();
  T* op = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xp + r * D;
    T* orow = op + r * D;
    T mx = row[0];
    for (std::size_t d = 1; d < D; ++d) mx = std::max(mx, row[d]);
    T z = T(0);
    for (std::size_t d = 0; d < D; ++d) z += std::exp(row[d] - mx);
    const T lz = std::log(z) + mx;
    for (std::size_t d = 0; d < D; ++d) orow[d] = row[d] - lz;
  }
  auto xn = x.node();
  return x.tape()->emit(std::move(out), "log_softmax", {xn}, [xn, rows, D](TapeNode<T>& n) {
    if (!xn->requires_grad) return;
    T* dx = xn->ensure_grad().data();
    const T* g = n.grad.data();
    const T* y = n.value.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* grow = g + r * D;
      const T* yrow = y + r * D;
      T gsum = T(0);
      for (std::size_t d = 0; d < D; ++d) gsum += grow[d];
      T* dxrow = dx + r * D;
      for (std::size_t d = 0; d < D; ++d) dxrow[d] += grow[d] - std::exp(yrow[d]) * gsum;
    }
  });
}

// ---------------------------------------------------------------------------
// Loss kernel
// ---------------------------------------------------------------------------

/// Mean over the batch of -weights[y_b] * log_probs[b, y_b].
template <typename T>
Variable<T> nll_loss(const Variable<T>& log_probs, const std::vector<int>& labels,
                     const Tensor<T>& weights) {
  const auto& lp = log_probs.value();
  detail::require(lp.rank() == 2, "nll_loss: log_probs must be (B,L)");
  const std::size_t B = lp.dim(0), L = lp.dim(1);
  detail::require(labels.size() == B, "nll_loss: batch/label count mismatch");
  detail::require(weights.size() == L, "nll_loss: weights must be (L)");
  for (int y : labels)
    detail::require(y >= 0 && static_cast<std::size_t>(y) < L,
                    "nll_loss: label " + std::to_string(y) + " out of range [0," +
                        std::to_string(L) + ")");
  T acc = T(0);
  for (std::size_t b = 0; b < B; ++b) acc -= weights[labels[b]] * lp.at(b, labels[b]);
  acc /= static_cast<T>(B);
  auto xn = log_probs.node();
  auto ls = std::make_shared<std::vector<int>>(labels);
  auto ws = std::make_shared<Tensor<T>>(weights);
  return log_probs.tape()->emit(Tensor<T>::scalar(acc), "nll_loss", {xn},
                                [xn, ls, ws, B, L](TapeNode<T>& n) {
                                  if (!xn->requires_grad) return;
                                  T* dx = xn->ensure_grad().data();
                                  const T g = n.grad[0] / static_cast<T>(B);
                                  for (std::size_t b = 0; b < B; ++b)
                                    dx[b * L + (*ls)[b]] -= g * (*ws)[(*ls)[b]];
                                });
}

}  // namespace psound
