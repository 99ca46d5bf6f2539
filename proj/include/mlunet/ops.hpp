#pragma once

// Differentiable primitives over dense tensors. Feature maps are B×C×H×W,
// token sequences B×N×C, all row-major and contiguous.

#include <cstdint>
#include <numbers>
#include <optional>

#include "mlunet/tensor.hpp"

namespace mlunet {

// Multiply-accumulate counter for the conv/linear/bmm/scan kernels. Used to
// cross-check the analytic FLOP estimate and the linear cost of the scan.
inline std::uint64_t& mac_counter() {
  thread_local std::uint64_t n = 0;
  return n;
}

namespace detail {

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
inline void require_rank(const Tensor<T>& x, std::size_t r, const char* op) {
  if (x.rank() != r)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                     shape_str(x.shape()));
}

template <typename T>
inline void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

template <typename T>
inline bool wants(const NodePtr<T>& p) {
  return p && p->requires_grad;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Shape plumbing

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  auto xn = x.node_ptr();
  return make_result<T>("reshape", std::move(shape), xn->value, {x}, [xn](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// B×C×H×W -> B×(H·W)×C, tokens in row-major spatial order.
template <typename T>
Tensor<T> to_tokens(const Tensor<T>& x) {
  detail::require_rank(x, 4, "to_tokens");
  const std::size_t B = x.dim(0), C = x.dim(1), N = x.dim(2) * x.dim(3);
  std::vector<T> out(x.size());
  auto xv = x.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t n = 0; n < N; ++n) out[(b * N + n) * C + c] = xv[(b * C + c) * N + n];
  auto xn = x.node_ptr();
  return make_result<T>("to_tokens", {B, N, C}, std::move(out), {x}, [xn, B, C, N](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t n = 0; n < N; ++n) g[(b * C + c) * N + n] += self.grad[(b * N + n) * C + c];
  });
}

/// B×(H·W)×C -> B×C×H×W.
template <typename T>
Tensor<T> from_tokens(const Tensor<T>& t, std::size_t H, std::size_t W) {
  detail::require_rank(t, 3, "from_tokens");
  const std::size_t B = t.dim(0), N = t.dim(1), C = t.dim(2);
  if (N != H * W)
    throw ShapeError("from_tokens: N=" + std::to_string(N) + " != H*W=" + std::to_string(H * W));
  std::vector<T> out(t.size());
  auto tv = t.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) out[(b * C + c) * N + n] = tv[(b * N + n) * C + c];
  auto tn = t.node_ptr();
  return make_result<T>("from_tokens", {B, C, H, W}, std::move(out), {t},
                        [tn, B, C, N](Node<T>& self) {
                          auto& g = tn->ensure_grad();
                          for (std::size_t b = 0; b < B; ++b)
                            for (std::size_t n = 0; n < N; ++n)
                              for (std::size_t c = 0; c < C; ++c)
                                g[(b * N + n) * C + c] += self.grad[(b * C + c) * N + n];
                        });
}

/// y[b, i, :] = x[b, order[i], :]. `order` must be a permutation of 0..L-1.
template <typename T>
Tensor<T> permute_tokens(const Tensor<T>& x, std::span<const std::size_t> order) {
  detail::require_rank(x, 3, "permute_tokens");
  const std::size_t B = x.dim(0), L = x.dim(1), C = x.dim(2);
  if (order.size() != L) throw ShapeError("permute_tokens: order length mismatch");
  std::vector<std::size_t> ord(order.begin(), order.end());
  std::vector<T> out(x.size());
  auto xv = x.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < L; ++i) {
      const T* src = xv.data() + (b * L + ord[i]) * C;
      std::copy(src, src + C, out.begin() + static_cast<std::ptrdiff_t>((b * L + i) * C));
    }
  auto xn = x.node_ptr();
  return make_result<T>("permute_tokens", x.shape(), std::move(out), {x},
                        [xn, ord = std::move(ord), B, L, C](Node<T>& self) {
                          auto& g = xn->ensure_grad();
                          for (std::size_t b = 0; b < B; ++b)
                            for (std::size_t i = 0; i < L; ++i)
                              for (std::size_t c = 0; c < C; ++c)
                                g[(b * L + ord[i]) * C + c] += self.grad[(b * L + i) * C + c];
                        });
}

/// Concatenate along axis 1 (channels for maps, works for any rank ≥ 2).
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: empty list");
  const Shape& s0 = xs[0].shape();
  if (s0.size() < 2) throw ShapeError("concat_channels: rank < 2");
  const std::size_t B = s0[0];
  const std::size_t inner = numel(Shape(s0.begin() + 2, s0.end()));
  std::size_t Ctot = 0;
  for (auto& x : xs) {
    const Shape& s = x.shape();
    if (s.size() != s0.size() || s[0] != B || numel(Shape(s.begin() + 2, s.end())) != inner ||
        !std::equal(s.begin() + 2, s.end(), s0.begin() + 2))
      throw ShapeError("concat_channels: incompatible shape " + shape_str(s));
    Ctot += s[1];
  }
  Shape out_shape = s0;
  out_shape[1] = Ctot;
  std::vector<T> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (auto& x : xs) {
    offsets.push_back(off);
    const std::size_t C = x.dim(1);
    auto xv = x.data();
    for (std::size_t b = 0; b < B; ++b)
      std::copy(xv.begin() + static_cast<std::ptrdiff_t>(b * C * inner),
                xv.begin() + static_cast<std::ptrdiff_t>((b + 1) * C * inner),
                out.begin() + static_cast<std::ptrdiff_t>((b * Ctot + off) * inner));
    off += C;
  }
  std::vector<detail::NodePtr<T>> nodes;
  std::vector<std::size_t> widths;
  for (auto& x : xs) {
    nodes.push_back(x.node_ptr());
    widths.push_back(x.dim(1));
  }
  return make_result<T>(
      "concat_channels", out_shape, std::move(out), xs,
      [nodes, widths, offsets, B, Ctot, inner](Node<T>& self) {
        for (std::size_t k = 0; k < nodes.size(); ++k) {
          if (!detail::wants(nodes[k])) continue;
          auto& g = nodes[k]->ensure_grad();
          const std::size_t C = widths[k];
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < C * inner; ++i)
              g[b * C * inner + i] += self.grad[(b * Ctot + offsets[k]) * inner + i];
        }
      });
}

/// Channel slice [begin, begin+count) along axis 1.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  const Shape& s = x.shape();
  if (s.size() < 2 || begin + count > s[1] || count == 0)
    throw ShapeError("slice_channels: bad range on " + shape_str(s));
  const std::size_t B = s[0], C = s[1];
  const std::size_t inner = numel(Shape(s.begin() + 2, s.end()));
  Shape os = s;
  os[1] = count;
  std::vector<T> out(numel(os));
  auto xv = x.data();
  for (std::size_t b = 0; b < B; ++b)
    std::copy(xv.begin() + static_cast<std::ptrdiff_t>((b * C + begin) * inner),
              xv.begin() + static_cast<std::ptrdiff_t>((b * C + begin + count) * inner),
              out.begin() + static_cast<std::ptrdiff_t>(b * count * inner));
  auto xn = x.node_ptr();
  return make_result<T>("slice_channels", os, std::move(out), {x},
                        [xn, B, C, begin, count, inner](Node<T>& self) {
                          auto& g = xn->ensure_grad();
                          for (std::size_t b = 0; b < B; ++b)
                            for (std::size_t i = 0; i < count * inner; ++i)
                              g[(b * C + begin) * inner + i] += self.grad[b * count * inner + i];
                        });
}

template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& x, std::size_t k) {
  if (x.rank() < 2 || k == 0 || x.dim(1) % k != 0)
    throw ShapeError("split_channels: " + std::to_string(k) + " does not divide channels of " +
                     shape_str(x.shape()));
  const std::size_t w = x.dim(1) / k;
  std::vector<Tensor<T>> parts;
  parts.reserve(k);
  for (std::size_t i = 0; i < k; ++i) parts.push_back(slice_channels(x, i * w, w));
  return parts;
}

/// B×1×... -> B×C×... by replication along axis 1.
template <typename T>
Tensor<T> repeat_channels(const Tensor<T>& x, std::size_t C) {
  if (x.rank() < 2 || x.dim(1) != 1) throw ShapeError("repeat_channels: expects B×1×...");
  const std::size_t B = x.dim(0);
  const std::size_t inner = x.size() / B;
  Shape os = x.shape();
  os[1] = C;
  std::vector<T> out(numel(os));
  auto xv = x.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      std::copy(xv.begin() + static_cast<std::ptrdiff_t>(b * inner),
                xv.begin() + static_cast<std::ptrdiff_t>((b + 1) * inner),
                out.begin() + static_cast<std::ptrdiff_t>((b * C + c) * inner));
  auto xn = x.node_ptr();
  return make_result<T>("repeat_channels", os, std::move(out), {x}, [xn, B, C, inner](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < inner; ++i) g[b * inner + i] += self.grad[(b * C + c) * inner + i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>("add", a.shape(), std::move(out), {a, b}, [an, bn](Node<T>& self) {
    for (auto* p : {an.get(), bn.get()}) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>("sub", a.shape(), std::move(out), {a, b}, [an, bn](Node<T>& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>("mul", a.shape(), std::move(out), {a, b}, [an, bn](Node<T>& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.size());
  auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  auto an = a.node_ptr();
  return make_result<T>("scale", a.shape(), std::move(out), {a}, [an, s](Node<T>& self) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

/// x · alpha where alpha is a single-element (trainable) tensor.
template <typename T>
Tensor<T> scale_by(const Tensor<T>& x, const Tensor<T>& alpha) {
  if (alpha.size() != 1) throw ShapeError("scale_by: alpha must hold one value");
  const T s = alpha[0];
  std::vector<T> out(x.size());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * s;
  auto xn = x.node_ptr(), an = alpha.node_ptr();
  return make_result<T>("scale_by", x.shape(), std::move(out), {x, alpha}, [xn, an](Node<T>& self) {
    const T s = an->value[0];
    if (xn->requires_grad) {
      auto& g = xn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
    }
    if (an->requires_grad) {
      T acc = 0;
      for (std::size_t i = 0; i < xn->value.size(); ++i) acc += self.grad[i] * xn->value[i];
      an->ensure_grad()[0] += acc;
    }
  });
}

enum class EwOp { add, mul, scale };

/// Dispatcher matching the single "ew" primitive; `b` is ignored for scale.
template <typename T>
Tensor<T> ew(EwOp op, const Tensor<T>& a, const Tensor<T>& b, T s = T(1)) {
  switch (op) {
    case EwOp::add: return add(a, b);
    case EwOp::mul: return mul(a, b);
    case EwOp::scale: return scale(a, s);
  }
  throw std::logic_error("ew: unknown op");
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  auto xn = x.node_ptr();
  return make_result<T>("sum", {1}, {acc}, {x}, [xn](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

// ---------------------------------------------------------------------------
// Activations

enum class Act { silu, gelu, relu, sigmoid, softplus };

namespace detail {

template <typename T>
inline T sigmoid(T v) {
  return v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

template <typename T>
inline T softplus(T v) {
  return v > T(20) ? v : std::log1p(std::exp(v));
}

template <typename T>
inline T act_value(Act k, T v) {
  switch (k) {
    case Act::silu: return v * sigmoid(v);
    case Act::gelu: return T(0.5) * v * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
    case Act::relu: return v > 0 ? v : T(0);
    case Act::sigmoid: return sigmoid(v);
    case Act::softplus: return softplus(v);
  }
  return v;
}

template <typename T>
inline T act_deriv(Act k, T v) {
  switch (k) {
    case Act::silu: {
      const T s = sigmoid(v);
      return s * (T(1) + v * (T(1) - s));
    }
    case Act::gelu: {
      const T cdf = T(0.5) * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
      const T pdf = std::exp(T(-0.5) * v * v) * std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
      return cdf + v * pdf;
    }
    case Act::relu: return v > 0 ? T(1) : T(0);
    case Act::sigmoid: {
      const T s = sigmoid(v);
      return s * (T(1) - s);
    }
    case Act::softplus: return sigmoid(v);
  }
  return T(1);
}

inline const char* act_name(Act k) {
  switch (k) {
    case Act::silu: return "silu";
    case Act::gelu: return "gelu";
    case Act::relu: return "relu";
    case Act::sigmoid: return "sigmoid";
    case Act::softplus: return "softplus";
  }
  return "act";
}

}  // namespace detail

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Act kind) {
  std::vector<T> out(x.size());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::act_value(kind, xv[i]);
  auto xn = x.node_ptr();
  return make_result<T>(detail::act_name(kind), x.shape(), std::move(out), {x}, [xn, kind](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * detail::act_deriv(kind, xn->value[i]);
  });
}

template <typename T> Tensor<T> silu(const Tensor<T>& x) { return activation(x, Act::silu); }
template <typename T> Tensor<T> gelu(const Tensor<T>& x) { return activation(x, Act::gelu); }
template <typename T> Tensor<T> relu(const Tensor<T>& x) { return activation(x, Act::relu); }
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x) { return activation(x, Act::sigmoid); }
template <typename T> Tensor<T> softplus(const Tensor<T>& x) { return activation(x, Act::softplus); }

// ---------------------------------------------------------------------------
// Convolution, pooling, resampling

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

/// Cross-correlation. weight: Cout × (Cin/groups) × kh × kw; bias optional (Cout).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dOptions opt = {}) {
  detail::require_rank(x, 4, "conv2d");
  detail::require_rank(weight, 4, "conv2d weight");
  const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Cout = weight.dim(0), Kh = weight.dim(2), Kw = weight.dim(3);
  const std::size_t G = opt.groups, S = opt.stride, P = opt.padding;
  if (G == 0 || Cin % G != 0 || Cout % G != 0)
    throw ShapeError("conv2d: groups=" + std::to_string(G) + " does not divide channels");
  if (weight.dim(1) != Cin / G)
    throw ShapeError("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  if (bias.defined() && bias.size() != Cout) throw ShapeError("conv2d: bias size mismatch");
  if (S == 0 || H + 2 * P < Kh || W + 2 * P < Kw) throw ShapeError("conv2d: kernel larger than input");
  const std::size_t Ho = (H + 2 * P - Kh) / S + 1, Wo = (W + 2 * P - Kw) / S + 1;
  const std::size_t cin_g = Cin / G, cout_g = Cout / G;

  // Valid output column range for a given kernel column offset.
  auto col_range = [=](std::size_t k, std::size_t extent, std::size_t out_extent) {
    const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(P);
    std::ptrdiff_t lo = 0;
    if (off < 0) lo = (-off + static_cast<std::ptrdiff_t>(S) - 1) / static_cast<std::ptrdiff_t>(S);
    std::ptrdiff_t hi_in = static_cast<std::ptrdiff_t>(extent) - 1 - off;  // max o*S
    std::ptrdiff_t hi = hi_in < 0 ? -1 : hi_in / static_cast<std::ptrdiff_t>(S);
    hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(out_extent) - 1);
    return std::pair<std::ptrdiff_t, std::ptrdiff_t>{lo, hi};
  };

  std::vector<T> out(B * Cout * Ho * Wo, T(0));
  auto xv = x.data();
  auto wv = weight.data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t oc = 0; oc < Cout; ++oc) {
      T* op = out.data() + (b * Cout + oc) * Ho * Wo;
      if (bias.defined()) std::fill(op, op + Ho * Wo, bias[oc]);
      const std::size_t g = oc / cout_g;
      for (std::size_t icg = 0; icg < cin_g; ++icg) {
        const std::size_t ic = g * cin_g + icg;
        const T* ip = xv.data() + (b * Cin + ic) * H * W;
        for (std::size_t kh = 0; kh < Kh; ++kh) {
          auto [rlo, rhi] = col_range(kh, H, Ho);
          for (std::size_t kw = 0; kw < Kw; ++kw) {
            const T wval = wv[((oc * cin_g + icg) * Kh + kh) * Kw + kw];
            auto [clo, chi] = col_range(kw, W, Wo);
            for (std::ptrdiff_t oh = rlo; oh <= rhi; ++oh) {
              const std::size_t ih = static_cast<std::size_t>(oh) * S + kh - P;
              const T* irow = ip + ih * W;
              T* orow = op + static_cast<std::size_t>(oh) * Wo;
              if (S == 1) {
                const T* src = irow + kw - P;
                for (std::ptrdiff_t ow = clo; ow <= chi; ++ow) orow[ow] += wval * src[ow];
              } else {
                for (std::ptrdiff_t ow = clo; ow <= chi; ++ow)
                  orow[ow] += wval * irow[static_cast<std::size_t>(ow) * S + kw - P];
              }
            }
          }
        }
      }
    }
  }
  mac_counter() += static_cast<std::uint64_t>(B) * Cout * cin_g * Kh * Kw * Ho * Wo;

  auto xn = x.node_ptr(), wn = weight.node_ptr();
  auto bn = bias.defined() ? bias.node_ptr() : detail::NodePtr<T>{};
  std::vector<Tensor<T>> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return make_result<T>(
      "conv2d", {B, Cout, Ho, Wo}, std::move(out), parents,
      [=](Node<T>& self) {
        const auto& gy = self.grad;
        if (detail::wants(bn)) {
          auto& gb = bn->ensure_grad();
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t oc = 0; oc < Cout; ++oc) {
              const T* gp = gy.data() + (b * Cout + oc) * Ho * Wo;
              T acc = 0;
              for (std::size_t i = 0; i < Ho * Wo; ++i) acc += gp[i];
              gb[oc] += acc;
            }
        }
        const bool gx_on = xn->requires_grad, gw_on = wn->requires_grad;
        if (!gx_on && !gw_on) return;
        T* gx = gx_on ? xn->ensure_grad().data() : nullptr;
        T* gw = gw_on ? wn->ensure_grad().data() : nullptr;
        const T* xd = xn->value.data();
        const T* wd = wn->value.data();
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t oc = 0; oc < Cout; ++oc) {
            const T* gp = gy.data() + (b * Cout + oc) * Ho * Wo;
            const std::size_t g = oc / cout_g;
            for (std::size_t icg = 0; icg < cin_g; ++icg) {
              const std::size_t ic = g * cin_g + icg;
              const T* ip = xd + (b * Cin + ic) * H * W;
              T* gip = gx ? gx + (b * Cin + ic) * H * W : nullptr;
              for (std::size_t kh = 0; kh < Kh; ++kh) {
                auto [rlo, rhi] = col_range(kh, H, Ho);
                for (std::size_t kw = 0; kw < Kw; ++kw) {
                  const std::size_t widx = ((oc * cin_g + icg) * Kh + kh) * Kw + kw;
                  const T wval = wd[widx];
                  auto [clo, chi] = col_range(kw, W, Wo);
                  T wacc = 0;
                  for (std::ptrdiff_t oh = rlo; oh <= rhi; ++oh) {
                    const std::size_t ih = static_cast<std::size_t>(oh) * S + kh - P;
                    const T* grow = gp + static_cast<std::size_t>(oh) * Wo;
                    for (std::ptrdiff_t ow = clo; ow <= chi; ++ow) {
                      const std::size_t iw = static_cast<std::size_t>(ow) * S + kw - P;
                      wacc += grow[ow] * ip[ih * W + iw];
                      if (gip) gip[ih * W + iw] += grow[ow] * wval;
                    }
                  }
                  if (gw) gw[widx] += wacc;
                }
              }
            }
          }
        }
      });
}

/// 2×2 max pooling, stride 2. Ties resolve to the first element in row-major order.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x) {
  detail::require_rank(x, 4, "max_pool2d");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 || W % 2) throw ShapeError("max_pool2d: odd spatial dims " + shape_str(x.shape()));
  const std::size_t Ho = H / 2, Wo = W / 2;
  std::vector<T> out(B * C * Ho * Wo);
  std::vector<std::size_t> arg(out.size());
  auto xv = x.data();
  for (std::size_t p = 0; p < B * C; ++p)
    for (std::size_t oh = 0; oh < Ho; ++oh)
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        std::size_t best = p * H * W + (2 * oh) * W + 2 * ow;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = p * H * W + (2 * oh + dy) * W + 2 * ow + dx;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = (p * Ho + oh) * Wo + ow;
        out[o] = xv[best];
        arg[o] = best;
      }
  auto xn = x.node_ptr();
  return make_result<T>("max_pool2d", {B, C, Ho, Wo}, std::move(out), {x},
                        [xn, arg = std::move(arg)](Node<T>& self) {
                          auto& g = xn->ensure_grad();
                          for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += self.grad[o];
                        });
}

/// Nearest-neighbour ×2 upsampling.
template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x) {
  detail::require_rank(x, 4, "upsample2x");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Ho = 2 * H, Wo = 2 * W;
  std::vector<T> out(B * C * Ho * Wo);
  auto xv = x.data();
  for (std::size_t p = 0; p < B * C; ++p)
    for (std::size_t oh = 0; oh < Ho; ++oh)
      for (std::size_t ow = 0; ow < Wo; ++ow)
        out[(p * Ho + oh) * Wo + ow] = xv[(p * H + oh / 2) * W + ow / 2];
  auto xn = x.node_ptr();
  return make_result<T>("upsample2x", {B, C, Ho, Wo}, std::move(out), {x},
                        [xn, B, C, H, W](Node<T>& self) {
                          auto& g = xn->ensure_grad();
                          const std::size_t Ho = 2 * H, Wo = 2 * W;
                          for (std::size_t p = 0; p < B * C; ++p)
                            for (std::size_t oh = 0; oh < Ho; ++oh)
                              for (std::size_t ow = 0; ow < Wo; ++ow)
                                g[(p * H + oh / 2) * W + ow / 2] += self.grad[(p * Ho + oh) * Wo + ow];
                        });
}

// ---------------------------------------------------------------------------
// Normalization

namespace detail {

// Shared kernel: normalize `rows` independent slices, each made of `len`
// elements at positions index(r, i). Affine parameters are indexed by chan(r, i).
template <typename T, typename Index, typename Chan>
Tensor<T> normalize_slices(const char* op, const Tensor<T>& x, const Tensor<T>& gamma,
                           const Tensor<T>& beta, T eps, std::size_t rows, std::size_t len,
                           Index index, Chan chan) {
  auto xv = x.data();
  auto gv = gamma.data(), bv = beta.data();
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T mu = 0;
    for (std::size_t i = 0; i < len; ++i) mu += xv[index(r, i)];
    mu /= static_cast<T>(len);
    T var = 0;
    for (std::size_t i = 0; i < len; ++i) {
      const T d = xv[index(r, i)] - mu;
      var += d * d;
    }
    var /= static_cast<T>(len);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t k = index(r, i);
      xhat[k] = (xv[k] - mu) * is;
      const std::size_t c = chan(r, i);
      out[k] = xhat[k] * gv[c] + bv[c];
    }
  }
  auto xn = x.node_ptr(), gn = gamma.node_ptr(), bn = beta.node_ptr();
  return make_result<T>(
      op, x.shape(), std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        const auto& gy = self.grad;
        if (gn->requires_grad || bn->requires_grad) {
          auto& gg = gn->ensure_grad();
          auto& gb = bn->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < len; ++i) {
              const std::size_t k = index(r, i), c = chan(r, i);
              gg[c] += gy[k] * xhat[k];
              gb[c] += gy[k];
            }
        }
        if (!xn->requires_grad) return;
        auto& gx = xn->ensure_grad();
        const auto& gam = gn->value;
        const T n = static_cast<T>(len);
        for (std::size_t r = 0; r < rows; ++r) {
          T s1 = 0, s2 = 0;
          for (std::size_t i = 0; i < len; ++i) {
            const std::size_t k = index(r, i);
            const T d = gy[k] * gam[chan(r, i)];
            s1 += d;
            s2 += d * xhat[k];
          }
          for (std::size_t i = 0; i < len; ++i) {
            const std::size_t k = index(r, i);
            const T d = gy[k] * gam[chan(r, i)];
            gx[k] += inv_std[r] * (d - s1 / n - xhat[k] * s2 / n);
          }
        }
      });
}

}  // namespace detail

/// LayerNorm over the last axis.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  if (x.rank() < 1) throw ShapeError("layer_norm: rank 0");
  const std::size_t C = x.shape().back();
  if (C == 0 || gamma.size() != C || beta.size() != C) throw ShapeError("layer_norm: affine size mismatch");
  const std::size_t rows = x.size() / C;
  return detail::normalize_slices<T>(
      "layer_norm", x, gamma, beta, eps, rows, C, [C](std::size_t r, std::size_t i) { return r * C + i; },
      [](std::size_t, std::size_t i) { return i; });
}

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t num_groups, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
  detail::require_rank(x, 4, "group_norm");
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (num_groups == 0 || C % num_groups != 0)
    throw ShapeError("group_norm: " + std::to_string(num_groups) + " groups do not divide " +
                     std::to_string(C) + " channels");
  if (gamma.size() != C || beta.size() != C) throw ShapeError("group_norm: affine size mismatch");
  const std::size_t cpg = C / num_groups;
  const std::size_t len = cpg * HW;
  // Each group is a contiguous block of cpg·HW values.
  return detail::normalize_slices<T>(
      "group_norm", x, gamma, beta, eps, B * num_groups, len,
      [len](std::size_t r, std::size_t i) { return r * len + i; },
      [cpg, HW, num_groups](std::size_t r, std::size_t i) { return (r % num_groups) * cpg + i / HW; });
}

template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  std::size_t batches_tracked = 0;

  static BatchNormState initialized(std::size_t C) {
    return {std::vector<T>(C, T(0)), std::vector<T>(C, T(1)), 0};
  }
  bool has_stats() const { return !running_mean.empty(); }
};

enum class BNMode { train, infer };

template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       BatchNormState<T>& stats, BNMode mode, T eps = T(1e-5), T momentum = T(0.1)) {
  detail::require_rank(x, 4, "batch_norm2d");
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gamma.size() != C || beta.size() != C) throw ShapeError("batch_norm2d: affine size mismatch");
  if (mode == BNMode::infer) {
    if (!stats.has_stats()) throw std::logic_error("batch_norm2d: inference before any statistics were recorded");
    if (stats.running_mean.size() != C) throw ShapeError("batch_norm2d: running stats size mismatch");
    std::vector<T> out(x.size());
    std::vector<T> inv(C);
    auto xv = x.data();
    for (std::size_t c = 0; c < C; ++c) inv[c] = T(1) / std::sqrt(stats.running_var[c] + eps);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < HW; ++i) {
          const std::size_t k = (b * C + c) * HW + i;
          out[k] = (xv[k] - stats.running_mean[c]) * inv[c] * gamma[c] + beta[c];
        }
    auto xn = x.node_ptr(), gn = gamma.node_ptr(), bn = beta.node_ptr();
    std::vector<T> rmean = stats.running_mean;
    return make_result<T>("batch_norm2d", x.shape(), std::move(out), {x, gamma, beta},
                          [=](Node<T>& self) {
                            for (std::size_t b = 0; b < B; ++b)
                              for (std::size_t c = 0; c < C; ++c)
                                for (std::size_t i = 0; i < HW; ++i) {
                                  const std::size_t k = (b * C + c) * HW + i;
                                  const T xh = (xn->value[k] - rmean[c]) * inv[c];
                                  if (xn->requires_grad) xn->ensure_grad()[k] += self.grad[k] * inv[c] * gn->value[c];
                                  if (gn->requires_grad) gn->ensure_grad()[c] += self.grad[k] * xh;
                                  if (bn->requires_grad) bn->ensure_grad()[c] += self.grad[k];
                                }
                          });
  }
  const std::size_t len = B * HW;
  if (len < 2) throw std::invalid_argument("batch_norm2d: train mode needs batch*H*W >= 2");
  if (!stats.has_stats()) stats = BatchNormState<T>::initialized(C);
  auto xv = x.data();
  for (std::size_t c = 0; c < C; ++c) {
    T mu = 0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < HW; ++i) mu += xv[(b * C + c) * HW + i];
    mu /= static_cast<T>(len);
    T var = 0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < HW; ++i) {
        const T d = xv[(b * C + c) * HW + i] - mu;
        var += d * d;
      }
    const T unbiased = var / static_cast<T>(len - 1);
    stats.running_mean[c] = (T(1) - momentum) * stats.running_mean[c] + momentum * mu;
    stats.running_var[c] = (T(1) - momentum) * stats.running_var[c] + momentum * unbiased;
  }
  ++stats.batches_tracked;
  return detail::normalize_slices<T>(
      "batch_norm2d", x, gamma, beta, eps, C, len,
      [C, HW](std::size_t c, std::size_t i) { return ((i / HW) * C + c) * HW + i % HW; },
      [](std::size_t c, std::size_t) { return c; });
}

// ---------------------------------------------------------------------------
// Dense algebra

/// y = x·Wᵀ + b over the last axis. W: Cout × Cin.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
  detail::require_rank(weight, 2, "linear weight");
  const std::size_t Cin = weight.dim(1), Cout = weight.dim(0);
  if (x.rank() < 1 || x.shape().back() != Cin)
    throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  if (bias.defined() && bias.size() != Cout) throw ShapeError("linear: bias size mismatch");
  const std::size_t rows = x.size() / Cin;
  Shape os = x.shape();
  os.back() = Cout;
  std::vector<T> out(rows * Cout);
  auto xv = x.data(), wv = weight.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * Cin;
    for (std::size_t o = 0; o < Cout; ++o) {
      const T* wr = wv.data() + o * Cin;
      T acc = bias.defined() ? bias[o] : T(0);
      for (std::size_t i = 0; i < Cin; ++i) acc += xr[i] * wr[i];
      out[r * Cout + o] = acc;
    }
  }
  mac_counter() += static_cast<std::uint64_t>(rows) * Cin * Cout;
  auto xn = x.node_ptr(), wn = weight.node_ptr();
  auto bn = bias.defined() ? bias.node_ptr() : detail::NodePtr<T>{};
  std::vector<Tensor<T>> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return make_result<T>("linear", os, std::move(out), parents, [=](Node<T>& self) {
    const auto& gy = self.grad;
    if (xn->requires_grad) {
      auto& gx = xn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < Cout; ++o) {
          const T g = gy[r * Cout + o];
          const T* wr = wn->value.data() + o * Cin;
          for (std::size_t i = 0; i < Cin; ++i) gx[r * Cin + i] += g * wr[i];
        }
    }
    if (wn->requires_grad) {
      auto& gw = wn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < Cout; ++o) {
          const T g = gy[r * Cout + o];
          const T* xr = xn->value.data() + r * Cin;
          for (std::size_t i = 0; i < Cin; ++i) gw[o * Cin + i] += g * xr[i];
        }
    }
    if (detail::wants(bn)) {
      auto& gb = bn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < Cout; ++o) gb[o] += gy[r * Cout + o];
    }
  });
}

/// Batched matmul: a G×M×K times b G×K×N (or b G×N×K when transpose_b).
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  detail::require_rank(a, 3, "bmm");
  detail::require_rank(b, 3, "bmm");
  const std::size_t G = a.dim(0), M = a.dim(1), K = a.dim(2);
  const std::size_t N = transpose_b ? b.dim(1) : b.dim(2);
  const std::size_t Kb = transpose_b ? b.dim(2) : b.dim(1);
  if (b.dim(0) != G || Kb != K)
    throw ShapeError("bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  auto bidx = [=](std::size_t g, std::size_t k, std::size_t n) {
    return transpose_b ? (g * N + n) * K + k : (g * K + k) * N + n;
  };
  std::vector<T> out(G * M * N, T(0));
  auto av = a.data(), bv = b.data();
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t k = 0; k < K; ++k) {
        const T aval = av[(g * M + m) * K + k];
        T* orow = out.data() + (g * M + m) * N;
        for (std::size_t n = 0; n < N; ++n) orow[n] += aval * bv[bidx(g, k, n)];
      }
  mac_counter() += static_cast<std::uint64_t>(G) * M * N * K;
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>("bmm", {G, M, N}, std::move(out), {a, b}, [=](Node<T>& self) {
    const auto& gy = self.grad;
    if (an->requires_grad) {
      auto& ga = an->ensure_grad();
      for (std::size_t g = 0; g < G; ++g)
        for (std::size_t m = 0; m < M; ++m)
          for (std::size_t k = 0; k < K; ++k) {
            T acc = 0;
            for (std::size_t n = 0; n < N; ++n) acc += gy[(g * M + m) * N + n] * bn->value[bidx(g, k, n)];
            ga[(g * M + m) * K + k] += acc;
          }
    }
    if (bn->requires_grad) {
      auto& gb = bn->ensure_grad();
      for (std::size_t g = 0; g < G; ++g)
        for (std::size_t m = 0; m < M; ++m)
          for (std::size_t k = 0; k < K; ++k) {
            const T aval = an->value[(g * M + m) * K + k];
            for (std::size_t n = 0; n < N; ++n) gb[bidx(g, k, n)] += aval * gy[(g * M + m) * N + n];
          }
    }
  });
}

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  if (x.rank() < 1) throw ShapeError("softmax_lastdim: rank 0");
  const std::size_t C = x.shape().back();
  const std::size_t rows = x.size() / C;
  std::vector<T> out(x.size());
  auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * C;
    T* orow = out.data() + r * C;
    const T mx = *std::max_element(xr, xr + C);
    T z = 0;
    for (std::size_t i = 0; i < C; ++i) z += (orow[i] = std::exp(xr[i] - mx));
    for (std::size_t i = 0; i < C; ++i) orow[i] /= z;
  }
  auto xn = x.node_ptr();
  auto y = std::make_shared<std::vector<T>>(out);
  return make_result<T>("softmax", x.shape(), std::move(out), {x}, [xn, y, rows, C](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t i = 0; i < C; ++i) dot += self.grad[r * C + i] * (*y)[r * C + i];
      for (std::size_t i = 0; i < C; ++i) g[r * C + i] += (*y)[r * C + i] * (self.grad[r * C + i] - dot);
    }
  });
}

/// B×N×C -> (B·h)×N×(C/h).
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  detail::require_rank(x, 3, "split_heads");
  const std::size_t B = x.dim(0), N = x.dim(1), C = x.dim(2);
  if (heads == 0 || C % heads != 0)
    throw ShapeError("split_heads: " + std::to_string(heads) + " heads do not divide C=" + std::to_string(C));
  const std::size_t d = C / heads;
  auto map = [=](std::size_t b, std::size_t h, std::size_t n, std::size_t i) {
    return std::pair<std::size_t, std::size_t>{((b * heads + h) * N + n) * d + i, (b * N + n) * C + h * d + i};
  };
  std::vector<T> out(x.size());
  auto xv = x.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < d; ++i) {
          auto [o, s] = map(b, h, n, i);
          out[o] = xv[s];
        }
  auto xn = x.node_ptr();
  return make_result<T>("split_heads", {B * heads, N, d}, std::move(out), {x}, [=](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t i = 0; i < d; ++i) {
            auto [o, s] = map(b, h, n, i);
            g[s] += self.grad[o];
          }
  });
}

/// (B·h)×N×d -> B×N×(h·d).
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, std::size_t heads) {
  detail::require_rank(x, 3, "merge_heads");
  if (heads == 0 || x.dim(0) % heads != 0) throw ShapeError("merge_heads: bad head count");
  const std::size_t B = x.dim(0) / heads, N = x.dim(1), d = x.dim(2), C = d * heads;
  std::vector<T> out(x.size());
  auto xv = x.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < d; ++i)
          out[(b * N + n) * C + h * d + i] = xv[((b * heads + h) * N + n) * d + i];
  auto xn = x.node_ptr();
  return make_result<T>("merge_heads", {B, N, C}, std::move(out), {x}, [=](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t i = 0; i < d; ++i)
            g[((b * heads + h) * N + n) * d + i] += self.grad[(b * N + n) * C + h * d + i];
  });
}

template <typename T>
struct MhaParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;  // weights C×C, biases C
};

/// Multi-head self-attention over B×N×C tokens, no positional encoding.
template <typename T>
Tensor<T> mha_forward(const Tensor<T>& x, const MhaParams<T>& p, std::size_t heads) {
  detail::require_rank(x, 3, "mha_forward");
  const std::size_t C = x.dim(2);
  if (heads == 0 || C % heads != 0)
    throw ShapeError("mha_forward: " + std::to_string(heads) + " heads do not divide C=" + std::to_string(C));
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(C / heads));
  auto q = split_heads(linear(x, p.wq, p.bq), heads);
  auto k = split_heads(linear(x, p.wk, p.bk), heads);
  auto v = split_heads(linear(x, p.wv, p.bv), heads);
  auto attn = softmax_lastdim(scale(bmm(q, k, true), inv_sqrt_d));
  auto ctx = merge_heads(bmm(attn, v), heads);
  return linear(ctx, p.wo, p.bo);
}

}  // namespace mlunet
