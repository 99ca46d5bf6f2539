#pragma once

#include "mlunet/ssm.hpp"

namespace mlunet {

/// LN over channels of a B×C×H×W map, then a Mamba block, back to a map.
template <typename T>
struct TokenMamba {
  NormAffine<T> ln;
  MambaBlockParams<T> mamba;

  static TokenMamba make(const Scope<T>& s, std::size_t C, std::size_t d_state) {
    TokenMamba m;
    m.ln = NormAffine<T>::make(s.sub("ln"), C);
    m.mamba = MambaBlockParams<T>::make(s.sub("mamba"), C, d_state);
    return m;
  }

  Tensor<T> operator()(const Tensor<T>& x, ScanOptions opt = {}) const {
    const std::size_t H = x.dim(2), W = x.dim(3);
    auto tok = layer_norm(to_tokens(x), ln.gamma, ln.beta);
    return from_tokens(mamba_block_forward(tok, mamba, H, W, opt), H, W);
  }
};

template <typename T>
struct AMFParams {
  std::vector<TokenMamba<T>> branches;
  Tensor<T> alpha;  // one scalar, init 0
  ConvLayer<T> s_dw, s_pw, t_dw, t_pw;

  std::size_t channels() const { return s_pw.cout(); }

  static AMFParams make(const Scope<T>& s, std::size_t C, std::size_t k, std::size_t d_state) {
    if (k == 0 || C % k != 0)
      throw ShapeError("AMF: " + std::to_string(k) + " branches do not divide C=" + std::to_string(C));
    AMFParams p;
    for (std::size_t i = 0; i < k; ++i)
      p.branches.push_back(TokenMamba<T>::make(s.sub("branch" + std::to_string(i)), C / k, d_state));
    p.alpha = s.constant("alpha", {1}, T(0));
    p.s_dw = ConvLayer<T>::depthwise(s.sub("s_dw"), C);
    p.s_pw = ConvLayer<T>::make(s.sub("s_pw"), C, C, 1);
    p.t_dw = ConvLayer<T>::depthwise(s.sub("t_dw"), C);
    p.t_pw = ConvLayer<T>::make(s.sub("t_pw"), C, C, 1);
    return p;
  }
};

/// Adaptive multi-branch Mamba fusion.
template <typename T>
Tensor<T> amf_forward(const Tensor<T>& X, const AMFParams<T>& p, ScanOptions opt = {}) {
  detail::require_rank(X, 4, "amf_forward");
  const std::size_t k = p.branches.size();
  if (X.dim(1) % k != 0) throw ShapeError("amf_forward: channels not divisible by branch count");
  auto parts = split_channels(X, k);
  std::vector<Tensor<T>> Z(k);
  for (std::size_t i = 0; i < k; ++i) Z[i] = add(p.branches[i](parts[i], opt), scale_by(parts[i], p.alpha));
  auto Zcat = concat_channels(Z);
  auto S = sigmoid(p.s_pw(p.s_dw(Zcat)));
  // S is sliced per branch in the same channel order as Zcat, so one product covers every S_k ⊙ Z_k.
  auto ZS = mul(S, Zcat);
  auto Tm = add(p.t_pw(p.t_dw(ZS)), ZS);
  return add(Tm, X);
}

template <typename T>
struct LGFMParams {
  ConvLayer<T> local;
  MhaParams<T> mha;
  std::size_t heads = 8;
  ConvLayer<T> fuse;  // 1×1, 2C -> C
  NormAffine<T> ln;
  ConvLayer<T> out_dw;

  static LGFMParams make(const Scope<T>& s, std::size_t C, std::size_t heads) {
    if (heads == 0 || C % heads != 0)
      throw ShapeError("LGFM: " + std::to_string(heads) + " heads do not divide C=" + std::to_string(C));
    LGFMParams p;
    p.local = ConvLayer<T>::depthwise(s.sub("local"), C);
    auto m = s.sub("mha");
    auto proj = [&](const char* n) { return LinearLayer<T>::make(m.sub(n), C, C, true); };
    auto q = proj("q"), kk = proj("k"), v = proj("v"), o = proj("o");
    p.mha = {q.weight, q.bias, kk.weight, kk.bias, v.weight, v.bias, o.weight, o.bias};
    p.heads = heads;
    p.fuse = ConvLayer<T>::make(s.sub("fuse"), 2 * C, C, 1);
    p.ln = NormAffine<T>::make(s.sub("ln"), C);
    p.out_dw = ConvLayer<T>::depthwise(s.sub("out_dw"), C);
    return p;
  }
};

/// Local-global feature mixing.
template <typename T>
Tensor<T> lgfm_forward(const Tensor<T>& F, const LGFMParams<T>& p) {
  detail::require_rank(F, 4, "lgfm_forward");
  const std::size_t H = F.dim(2), W = F.dim(3);
  auto Fl = p.local(F);
  auto Fg = from_tokens(mha_forward(to_tokens(F), p.mha, p.heads), H, W);
  auto h = p.fuse(concat_channels<T>({Fl, Fg}));
  h = from_tokens(gelu(layer_norm(to_tokens(h), p.ln.gamma, p.ln.beta)), H, W);
  return p.out_dw(h);
}

template <typename T>
struct CGAParams {
  std::vector<TokenMamba<T>> x_mamba, g_mamba;
  std::vector<ConvLayer<T>> x_dw, g_dw;
  NormAffine<T> bn;
  std::shared_ptr<BatchNormState<T>> bn_stats;
  ConvLayer<T> mask;  // 3×3, C -> 1

  static CGAParams make(const Scope<T>& s, std::size_t C, std::size_t k, std::size_t d_state) {
    if (k == 0 || C % k != 0)
      throw ShapeError("CGA: " + std::to_string(k) + " pairs do not divide C=" + std::to_string(C));
    CGAParams p;
    const std::size_t w = C / k;
    for (std::size_t i = 0; i < k; ++i) {
      auto ps = s.sub("pair" + std::to_string(i));
      p.x_mamba.push_back(TokenMamba<T>::make(ps.sub("x"), w, d_state));
      p.g_mamba.push_back(TokenMamba<T>::make(ps.sub("g"), w, d_state));
      p.x_dw.push_back(ConvLayer<T>::depthwise(ps.sub("x_dw"), w));
      p.g_dw.push_back(ConvLayer<T>::depthwise(ps.sub("g_dw"), w));
    }
    p.bn = NormAffine<T>::make(s.sub("bn"), C);
    p.bn_stats = s.bn_state("bn", C);
    p.mask = ConvLayer<T>::make(s.sub("mask"), C, 1, 3);
    return p;
  }
};

template <typename T>
struct CGAResult {
  Tensor<T> x_att;
  Tensor<T> psi;  // B×1×H×W
};

/// Cross-gated attention on the encoder skip x, driven by decoder feature g.
template <typename T>
CGAResult<T> cga_forward(const Tensor<T>& x, const Tensor<T>& g, const CGAParams<T>& p, bool training,
                         ScanOptions opt = {}) {
  detail::require_rank(x, 4, "cga_forward");
  detail::require_same_shape(x, g, "cga_forward");
  const std::size_t k = p.x_mamba.size();
  if (x.dim(1) % k != 0) throw ShapeError("cga_forward: channels not divisible by pair count");
  auto xs = split_channels(x, k);
  auto gs = split_channels(g, k);
  std::vector<Tensor<T>> cross(k);
  for (std::size_t i = 0; i < k; ++i) {
    auto hx = p.x_mamba[i](xs[i], opt);
    auto hg = p.g_mamba[i](gs[i], opt);
    auto xp = p.x_dw[i](hx);
    auto gp = p.g_dw[i](hg);
    cross[i] = add(mul(hx, sigmoid(gp)), mul(hg, sigmoid(xp)));
  }
  auto Zcat = concat_channels(cross);
  auto bnout = batch_norm2d(Zcat, p.bn.gamma, p.bn.beta, *p.bn_stats, training ? BNMode::train : BNMode::infer);
  auto psi = sigmoid(p.mask(relu(bnout)));
  return {mul(repeat_channels(psi, x.dim(1)), x), psi};
}

}  // namespace mlunet
