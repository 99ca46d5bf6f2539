#pragma once

#include <array>

#include "mlunet/params.hpp"

namespace mlunet {

struct ScanOptions {
  bool exact_zoh = false;  // B̄ = (exp(ΔA) − 1)/A · B instead of Δ·B
};

template <typename T>
struct S6Params {
  Tensor<T> A_log;    // d_inner × d_state, A = −exp(A_log)
  Tensor<T> W_delta;  // d_inner × d_inner
  Tensor<T> b_delta;  // d_inner
  Tensor<T> W_B;      // d_state × d_inner
  Tensor<T> W_C;      // d_state × d_inner
  Tensor<T> D;        // d_inner

  std::size_t d_inner() const { return D.size(); }
  std::size_t d_state() const { return A_log.dim(1); }

  static S6Params make(const Scope<T>& s, std::size_t d_inner, std::size_t d_state) {
    S6Params p;
    std::vector<T> alog(d_inner * d_state);
    for (std::size_t j = 0; j < d_inner; ++j)
      for (std::size_t k = 0; k < d_state; ++k) alog[j * d_state + k] = static_cast<T>(std::log(double(k + 1)));
    p.A_log = s.values("A_log", {d_inner, d_state}, std::move(alog));
    p.W_delta = s.uniform("W_delta", {d_inner, d_inner}, d_inner);
    // softplus(b) = 0.01
    p.b_delta = s.constant("b_delta", {d_inner}, static_cast<T>(std::log(std::expm1(0.01))));
    p.W_B = s.uniform("W_B", {d_state, d_inner}, d_inner);
    p.W_C = s.uniform("W_C", {d_state, d_inner}, d_inner);
    p.D = s.constant("D", {d_inner}, T(1));
    return p;
  }
};

/// Fused selective-scan recurrence over precomputed Δ, B, C.
///   x, delta: B×L×d   Bm, Cm: B×L×n   A_log: d×n   D: d
/// The state is laid out state-major per channel so the inner loop runs over
/// contiguous memory; the backward pass replays the stored states.
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& A_log,
                         const Tensor<T>& Bm, const Tensor<T>& Cm, const Tensor<T>& D,
                         ScanOptions opt = {}) {
  detail::require_rank(x, 3, "selective_scan");
  detail::require_same_shape(x, delta, "selective_scan delta");
  const std::size_t Bsz = x.dim(0), L = x.dim(1), d = x.dim(2);
  if (L == 0) throw ShapeError("selective_scan: empty sequence");
  detail::require_rank(A_log, 2, "selective_scan A_log");
  const std::size_t n = A_log.dim(1);
  if (A_log.dim(0) != d || D.size() != d) throw ShapeError("selective_scan: channel mismatch");
  if (Bm.shape() != Shape{Bsz, L, n} || Cm.shape() != Shape{Bsz, L, n})
    throw ShapeError("selective_scan: B/C must be " + shape_str({Bsz, L, n}));

  const bool keep = grad_mode_flag() &&
                    (x.requires_grad() || delta.requires_grad() || A_log.requires_grad() ||
                     Bm.requires_grad() || Cm.requires_grad() || D.requires_grad());

  std::vector<T> A(d * n);
  for (std::size_t i = 0; i < d * n; ++i) A[i] = -std::exp(A_log[i]);

  auto xv = x.data(), dv = delta.data(), bv = Bm.data(), cv = Cm.data(), Dv = D.data();
  std::vector<T> out(Bsz * L * d);
  std::vector<T> h(d * n);
  // states[(b*L + t)*d*n + j*n + k] = h_t
  std::vector<T> states;
  if (keep) states.resize(Bsz * L * d * n);
  for (std::size_t b = 0; b < Bsz; ++b) {
    std::fill(h.begin(), h.end(), T(0));
    for (std::size_t t = 0; t < L; ++t) {
      const std::size_t row = b * L + t;
      const T* Bt = bv.data() + row * n;
      const T* Ct = cv.data() + row * n;
      for (std::size_t j = 0; j < d; ++j) {
        const T dt = dv[row * d + j];
        const T xt = xv[row * d + j];
        const T* Aj = A.data() + j * n;
        T* hj = h.data() + j * n;
        T y = Dv[j] * xt;
        for (std::size_t k = 0; k < n; ++k) {
          const T dA = std::exp(dt * Aj[k]);
          const T coef = opt.exact_zoh ? std::expm1(dt * Aj[k]) / Aj[k] : dt;
          hj[k] = dA * hj[k] + coef * Bt[k] * xt;
          y += Ct[k] * hj[k];
        }
        out[row * d + j] = y;
      }
      if (keep) std::copy(h.begin(), h.end(), states.begin() + static_cast<std::ptrdiff_t>(row * d * n));
    }
  }
  mac_counter() += 2ull * Bsz * L * d * n;

  auto xn = x.node_ptr(), dn = delta.node_ptr(), an = A_log.node_ptr(), bn = Bm.node_ptr(),
       cn = Cm.node_ptr(), Dn = D.node_ptr();
  return make_result<T>(
      "selective_scan", {Bsz, L, d}, std::move(out), {x, delta, A_log, Bm, Cm, D},
      [=, A = std::move(A), states = std::move(states)](Node<T>& self) {
        const auto& gy = self.grad;
        const auto& X = xn->value;
        const auto& DT = dn->value;
        const auto& BB = bn->value;
        const auto& CC = cn->value;
        const auto& DD = Dn->value;
        std::vector<T> gx(X.size(), T(0)), gdt(X.size(), T(0)), gA(d * n, T(0)), gB(BB.size(), T(0)),
            gC(CC.size(), T(0)), gD(d, T(0));
        std::vector<T> dh(d * n);
        for (std::size_t b = 0; b < Bsz; ++b) {
          std::fill(dh.begin(), dh.end(), T(0));
          for (std::size_t t = L; t-- > 0;) {
            const std::size_t row = b * L + t;
            const T* ht = states.data() + row * d * n;
            const T* hprev = t ? states.data() + (row - 1) * d * n : nullptr;
            for (std::size_t j = 0; j < d; ++j) {
              const T g = gy[row * d + j];
              const T xt = X[row * d + j];
              const T dt = DT[row * d + j];
              gD[j] += g * xt;
              T gxt = g * DD[j];
              T gdtt = 0;
              for (std::size_t k = 0; k < n; ++k) {
                const std::size_t jk = j * n + k;
                const T a = A[jk];
                gC[row * n + k] += g * ht[jk];
                T& adj = dh[jk];
                adj += g * CC[row * n + k];
                const T dA = std::exp(dt * a);
                const T hp = hprev ? hprev[jk] : T(0);
                const T gdA = adj * hp;
                gdtt += gdA * dA * a;
                gA[jk] += gdA * dA * dt;
                const T bk = BB[row * n + k];
                T coef;
                if (opt.exact_zoh) {
                  const T em1 = std::expm1(dt * a);
                  coef = em1 / a;
                  gdtt += adj * bk * xt * dA;
                  gA[jk] += adj * bk * xt * (dt * dA * a - em1) / (a * a);
                } else {
                  coef = dt;
                  gdtt += adj * bk * xt;
                }
                gB[row * n + k] += adj * coef * xt;
                gxt += adj * coef * bk;
                adj *= dA;
              }
              gx[row * d + j] += gxt;
              gdt[row * d + j] += gdtt;
            }
          }
        }
        auto acc = [](const detail::NodePtr<T>& p, const std::vector<T>& g) {
          if (!p->requires_grad) return;
          auto& dst = p->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        };
        acc(xn, gx);
        acc(dn, gdt);
        acc(bn, gB);
        acc(cn, gC);
        acc(Dn, gD);
        if (an->requires_grad) {
          auto& ga = an->ensure_grad();
          for (std::size_t i = 0; i < d * n; ++i) ga[i] += gA[i] * A[i];  // dA/dA_log = A
        }
      });
}

/// One S6 block over B×L×d tokens.
template <typename T>
Tensor<T> s6_scan(const Tensor<T>& x, const S6Params<T>& p, ScanOptions opt = {}) {
  detail::require_rank(x, 3, "s6_scan");
  if (x.dim(2) != p.d_inner())
    throw ShapeError("s6_scan: input width " + std::to_string(x.dim(2)) + " != d_inner " +
                     std::to_string(p.d_inner()));
  auto delta = softplus(linear(x, p.W_delta, p.b_delta));
  auto Bm = linear(x, p.W_B);
  auto Cm = linear(x, p.W_C);
  return selective_scan(x, delta, p.A_log, Bm, Cm, p.D, opt);
}

enum class ScanDir { row_fwd = 0, row_rev = 1, col_fwd = 2, col_rev = 3 };

/// Token visiting order: order[i] is the row-major token index at sequence position i.
inline std::vector<std::size_t> scan_order(ScanDir dir, std::size_t H, std::size_t W) {
  const std::size_t L = H * W;
  std::vector<std::size_t> ord(L);
  for (std::size_t i = 0; i < L; ++i) {
    switch (dir) {
      case ScanDir::row_fwd: ord[i] = i; break;
      case ScanDir::row_rev: ord[i] = L - 1 - i; break;
      case ScanDir::col_fwd: ord[i] = (i % H) * W + i / H; break;
      case ScanDir::col_rev: {
        const std::size_t m = L - 1 - i;
        ord[i] = (m % H) * W + m / H;
        break;
      }
    }
  }
  return ord;
}

inline std::vector<std::size_t> inverse_order(const std::vector<std::size_t>& ord) {
  std::vector<std::size_t> inv(ord.size());
  for (std::size_t i = 0; i < ord.size(); ++i) inv[ord[i]] = i;
  return inv;
}

/// One directional scan over row-major tokens, result back in row-major order.
template <typename T>
Tensor<T> directional_scan(const Tensor<T>& tokens, std::size_t H, std::size_t W, ScanDir dir,
                           const S6Params<T>& p, ScanOptions opt = {}) {
  const auto ord = scan_order(dir, H, W);
  auto y = s6_scan(permute_tokens<T>(tokens, ord), p, opt);
  return permute_tokens<T>(y, inverse_order(ord));
}

/// SS2D on tokens (B×N×C, N = H·W, row-major): sum of the four directional scans.
template <typename T>
Tensor<T> ss2d_tokens(const Tensor<T>& tokens, std::size_t H, std::size_t W,
                      const std::array<S6Params<T>, 4>& p, ScanOptions opt = {}) {
  detail::require_rank(tokens, 3, "ss2d");
  if (tokens.dim(1) != H * W) throw ShapeError("ss2d: token count does not match H*W");
  Tensor<T> acc = directional_scan(tokens, H, W, ScanDir::row_fwd, p[0], opt);
  for (int k = 1; k < 4; ++k) acc = add(acc, directional_scan(tokens, H, W, static_cast<ScanDir>(k), p[k], opt));
  return acc;
}

template <typename T>
Tensor<T> ss2d_forward(const Tensor<T>& x, const std::array<S6Params<T>, 4>& p, ScanOptions opt = {}) {
  detail::require_rank(x, 4, "ss2d_forward");
  const std::size_t H = x.dim(2), W = x.dim(3);
  return from_tokens(ss2d_tokens(to_tokens(x), H, W, p, opt), H, W);
}

template <typename T>
struct MambaBlockParams {
  LinearLayer<T> W_g, W_z;  // bias-free C×C
  ConvLayer<T> dw;          // 3×3 depthwise
  std::array<S6Params<T>, 4> ss2d;
  NormAffine<T> ln;

  static MambaBlockParams make(const Scope<T>& s, std::size_t C, std::size_t d_state) {
    MambaBlockParams p;
    p.W_g = LinearLayer<T>::make(s.sub("W_g"), C, C, false);
    p.W_z = LinearLayer<T>::make(s.sub("W_z"), C, C, false);
    p.dw = ConvLayer<T>::depthwise(s.sub("dw"), C);
    for (std::size_t k = 0; k < 4; ++k) p.ss2d[k] = S6Params<T>::make(s.sub("ss2d.dir" + std::to_string(k)), C, d_state);
    p.ln = NormAffine<T>::make(s.sub("ln"), C);
    return p;
  }
};

/// Y = SiLU(K·W_g) ⊙ LN(SS2D(DW(SiLU(K·W_z)))). K is expected to be layer-normalized already.
template <typename T>
Tensor<T> mamba_block_forward(const Tensor<T>& K, const MambaBlockParams<T>& p, std::size_t H, std::size_t W,
                              ScanOptions opt = {}) {
  detail::require_rank(K, 3, "mamba_block_forward");
  if (K.dim(1) != H * W)
    throw ShapeError("mamba_block_forward: N=" + std::to_string(K.dim(1)) + " != H*W=" + std::to_string(H * W));
  auto G = silu(p.W_g(K));
  auto Z = from_tokens(silu(p.W_z(K)), H, W);
  Z = p.dw(Z);
  auto S = ss2d_tokens(to_tokens(Z), H, W, p.ss2d, opt);
  auto Hf = layer_norm(S, p.ln.gamma, p.ln.beta);
  return mul(G, Hf);
}

}  // namespace mlunet
