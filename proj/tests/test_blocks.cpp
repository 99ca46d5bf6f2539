#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace mlunet;

namespace {

using V = std::vector<double>;

V vals(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

void fill(Tensor<double> t, const V& v) { std::copy(v.begin(), v.end(), t.values().begin()); }

template <typename Pred>
void randomize(ParamStore<double>& st, std::uint64_t seed, Pred select, double sd = 0.5) {
  std::mt19937_64 rng(seed);
  for (auto& p : st.params())
    if (select(p.name)) fill(p.tensor, oracle::randn(rng, p.tensor.size(), sd));
}

void randomize(ParamStore<double>& st, std::uint64_t seed, double sd = 0.5) {
  randomize(st, seed, [](const std::string&) { return true; }, sd);
}

bool contains(const std::string& s, const std::string& part) { return s.find(part) != std::string::npos; }

V conv(const V& x, std::size_t B, std::size_t C, std::size_t H, std::size_t W, const ConvLayer<double>& l) {
  return oracle::conv2d(x, B, C, H, W, vals(l.weight), l.cout(), l.k(), l.bias.defined() ? vals(l.bias) : V{}, 1,
                        l.k() / 2, l.opt.groups);
}

double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }
double gelu(double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); }

// LN over the channel axis of an NCHW buffer.
V ln_channels(const V& x, std::size_t B, std::size_t C, std::size_t HW, const V& g, const V& b) {
  V y(x.size());
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t p = 0; p < HW; ++p) {
      double m = 0, s = 0;
      for (std::size_t c = 0; c < C; ++c) m += x[(n * C + c) * HW + p];
      m /= double(C);
      for (std::size_t c = 0; c < C; ++c) s += std::pow(x[(n * C + c) * HW + p] - m, 2);
      const double is = 1.0 / std::sqrt(s / double(C) + 1e-5);
      for (std::size_t c = 0; c < C; ++c) y[(n * C + c) * HW + p] = (x[(n * C + c) * HW + p] - m) * is * g[c] + b[c];
    }
  return y;
}

// Naive multi-head attention on an NCHW buffer, tokens in row-major pixel order.
V attention(const V& x, std::size_t B, std::size_t C, std::size_t N, std::size_t heads, const MhaParams<double>& p) {
  V out(x.size());
  const std::size_t dh = C / heads;
  for (std::size_t n = 0; n < B; ++n) {
    V tok(N * C);
    for (std::size_t t = 0; t < N; ++t)
      for (std::size_t c = 0; c < C; ++c) tok[t * C + c] = x[(n * C + c) * N + t];
    auto q = oracle::linear(tok, N, C, vals(p.wq), C, vals(p.bq));
    auto k = oracle::linear(tok, N, C, vals(p.wk), C, vals(p.bk));
    auto v = oracle::linear(tok, N, C, vals(p.wv), C, vals(p.bv));
    V ctx(N * C, 0.0);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < N; ++i) {
        V s(N);
        double mx = -1e300, den = 0;
        for (std::size_t j = 0; j < N; ++j) {
          double d = 0;
          for (std::size_t e = 0; e < dh; ++e) d += q[i * C + h * dh + e] * k[j * C + h * dh + e];
          s[j] = d / std::sqrt(double(dh));
          mx = std::max(mx, s[j]);
        }
        for (auto& e : s) den += (e = std::exp(e - mx));
        for (std::size_t j = 0; j < N; ++j)
          for (std::size_t e = 0; e < dh; ++e) ctx[i * C + h * dh + e] += s[j] / den * v[j * C + h * dh + e];
      }
    auto o = oracle::linear(ctx, N, C, vals(p.wo), C, vals(p.bo));
    for (std::size_t t = 0; t < N; ++t)
      for (std::size_t c = 0; c < C; ++c) out[(n * C + c) * N + t] = o[t * C + c];
  }
  return out;
}

V concat(const std::vector<V>& parts, std::size_t B, std::size_t HW, std::size_t w) {
  const std::size_t C = parts.size() * w;
  V out(B * C * HW);
  for (std::size_t i = 0; i < parts.size(); ++i)
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t c = 0; c < w; ++c)
        for (std::size_t p = 0; p < HW; ++p) out[(n * C + i * w + c) * HW + p] = parts[i][(n * w + c) * HW + p];
  return out;
}

std::vector<std::pair<std::string, Tensor<double>>> all_params(ParamStore<double>& st) {
  std::vector<std::pair<std::string, Tensor<double>>> out;
  for (auto& q : st.params()) out.emplace_back(q.name, q.tensor);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// AMF

TEST(AMF, ZeroBranchesAtZeroAlphaIsIdentity) {
  ParamStore<double> st(1);
  auto p = AMFParams<double>::make(Scope<double>(st, "amf"), 8, 4, 4);
  for (auto& q : st.params())
    if (contains(q.name, "branch")) fill(q.tensor, V(q.tensor.size(), 0.0));
  std::mt19937_64 rng(1);
  auto X = testutil::leaf({2, 8, 5, 3}, rng);
  auto F = amf_forward(X, p);
  for (std::size_t i = 0; i < X.size(); ++i) EXPECT_DOUBLE_EQ(F[i], X[i]);
}

TEST(AMF, ZeroBranchesGiveAlphaScaledInput) {
  // branch Mamba outputs vanish, so Z_k = alpha * X_k and the rest is plain convolution algebra
  ParamStore<double> st(2);
  const std::size_t B = 2, C = 8, H = 4, W = 5, HW = H * W;
  auto p = AMFParams<double>::make(Scope<double>(st, "amf"), C, 2, 4);
  randomize(st, 2, [](const std::string& n) { return !contains(n, "branch"); });
  for (auto& q : st.params())
    if (contains(q.name, "branch")) fill(q.tensor, V(q.tensor.size(), 0.0));
  fill(p.alpha, {0.7});
  std::mt19937_64 rng(2);
  auto X = testutil::leaf({B, C, H, W}, rng);
  auto F = amf_forward(X, p);

  V Z = vals(X);
  for (auto& z : Z) z *= 0.7;
  auto S = conv(conv(Z, B, C, H, W, p.s_dw), B, C, H, W, p.s_pw);
  V ZS(Z.size());
  for (std::size_t i = 0; i < Z.size(); ++i) ZS[i] = sig(S[i]) * Z[i];
  auto Tm = conv(conv(ZS, B, C, H, W, p.t_dw), B, C, H, W, p.t_pw);
  for (std::size_t i = 0; i < B * C * HW; ++i) EXPECT_NEAR(F[i], Tm[i] + ZS[i] + X[i], 1e-12);
}

TEST(AMF, MatchesCompositionGivenBranchOutputs) {
  ParamStore<double> st(3);
  const std::size_t B = 1, C = 12, H = 3, W = 4, k = 3, w = C / k;
  auto p = AMFParams<double>::make(Scope<double>(st, "amf"), C, k, 4);
  randomize(st, 3, [](const std::string& n) { return !contains(n, "A_log") && !contains(n, "b_delta"); });
  std::mt19937_64 rng(3);
  auto X = testutil::leaf({B, C, H, W}, rng);
  auto F = amf_forward(X, p);

  auto parts = split_channels(X, k);
  std::vector<V> Zk;
  for (std::size_t i = 0; i < k; ++i) {
    auto m = vals(p.branches[i](parts[i]));
    auto xi = vals(parts[i]);
    for (std::size_t j = 0; j < m.size(); ++j) m[j] += p.alpha[0] * xi[j];
    Zk.push_back(m);
  }
  auto Z = concat(Zk, B, H * W, w);
  auto S = conv(conv(Z, B, C, H, W, p.s_dw), B, C, H, W, p.s_pw);
  V ZS(Z.size());
  for (std::size_t i = 0; i < Z.size(); ++i) ZS[i] = sig(S[i]) * Z[i];
  auto Tm = conv(conv(ZS, B, C, H, W, p.t_dw), B, C, H, W, p.t_pw);
  for (std::size_t i = 0; i < Z.size(); ++i) EXPECT_NEAR(F[i], Tm[i] + ZS[i] + X[i], 1e-12);
}

TEST(AMF, BranchCountMustDivideChannels) {
  ParamStore<double> st(4);
  EXPECT_THROW(AMFParams<double>::make(Scope<double>(st, "amf"), 10, 4, 4), ShapeError);
  auto p = AMFParams<double>::make(Scope<double>(st, "ok"), 8, 4, 4);
  auto X = Tensor<double>::zeros({1, 6, 2, 2});
  EXPECT_THROW(amf_forward(X, p), ShapeError);
}

TEST(AMF, ShapePreservedAcrossBranchCounts) {
  for (std::size_t k : {1u, 2u, 4u, 8u}) {
    ParamStore<float> st(5);
    auto p = AMFParams<float>::make(Scope<float>(st, "amf"), 8, k, 4);
    auto X = Tensor<float>::zeros({2, 8, 3, 5});
    EXPECT_EQ(amf_forward(X, p).shape(), X.shape()) << k;
  }
}

TEST(AMF, GradcheckAllParameters) {
  ParamStore<double> st(6);
  auto p = AMFParams<double>::make(Scope<double>(st, "amf"), 8, 2, 3);
  randomize(st, 6, [](const std::string& n) { return contains(n, "bias") || contains(n, "alpha"); }, 0.3);
  testutil::condition_scans(st, 6);
  std::mt19937_64 rng(6);
  auto X = testutil::leaf({1, 8, 4, 4}, rng);
  auto f = [&] { return testutil::probe(amf_forward(X, p), 6); };
  auto all = all_params(st);
  all.emplace_back("X", X);
  auto rep = finite_diff_check(f, all);
  EXPECT_LT(rep.max_rel_err, 1e-4) << rep.worst;
}

// ---------------------------------------------------------------------------
// LGFM

TEST(LGFM, MatchesOracle) {
  ParamStore<double> st(7);
  const std::size_t B = 2, C = 8, H = 3, W = 4, HW = H * W, heads = 2;
  auto p = LGFMParams<double>::make(Scope<double>(st, "lgfm"), C, heads);
  randomize(st, 7);
  std::mt19937_64 rng(7);
  auto F = testutil::leaf({B, C, H, W}, rng);
  auto Y = lgfm_forward(F, p);

  auto x = vals(F);
  auto Fl = conv(x, B, C, H, W, p.local);
  auto Fg = attention(x, B, C, HW, heads, p.mha);
  V cat(2 * B * C * HW);
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t q = 0; q < HW; ++q) {
        cat[(n * 2 * C + c) * HW + q] = Fl[(n * C + c) * HW + q];
        cat[(n * 2 * C + C + c) * HW + q] = Fg[(n * C + c) * HW + q];
      }
  auto h = ln_channels(conv(cat, B, 2 * C, H, W, p.fuse), B, C, HW, vals(p.ln.gamma), vals(p.ln.beta));
  for (auto& v : h) v = gelu(v);
  auto ref = conv(h, B, C, H, W, p.out_dw);
  ASSERT_EQ(Y.shape(), F.shape());
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(Y[i], ref[i], 1e-12);
}

TEST(LGFM, SinglePixelClosedForm) {
  // one token: attention weight is exactly 1 and each 3×3 depthwise conv sees only its center tap
  ParamStore<double> st(8);
  const std::size_t C = 8;
  auto p = LGFMParams<double>::make(Scope<double>(st, "lgfm"), C, 4);
  randomize(st, 8);
  std::mt19937_64 rng(8);
  auto F = testutil::leaf({1, C, 1, 1}, rng);
  auto Y = lgfm_forward(F, p);

  auto x = vals(F);
  auto dwl = vals(p.local.weight), bl = vals(p.local.bias);
  V Fl(C);
  for (std::size_t c = 0; c < C; ++c) Fl[c] = dwl[c * 9 + 4] * x[c] + bl[c];
  auto v = oracle::linear(x, 1, C, vals(p.mha.wv), C, vals(p.mha.bv));
  auto Fg = oracle::linear(v, 1, C, vals(p.mha.wo), C, vals(p.mha.bo));
  V cat(Fl);
  cat.insert(cat.end(), Fg.begin(), Fg.end());
  auto h = oracle::linear(cat, 1, 2 * C, vals(p.fuse.weight), C, vals(p.fuse.bias));
  h = ln_channels(h, 1, C, 1, vals(p.ln.gamma), vals(p.ln.beta));
  auto dwo = vals(p.out_dw.weight), bo = vals(p.out_dw.bias);
  for (std::size_t c = 0; c < C; ++c) EXPECT_NEAR(Y[c], dwo[c * 9 + 4] * gelu(h[c]) + bo[c], 1e-12);
}

TEST(LGFM, ConstantInputGivesConstantInterior) {
  ParamStore<double> st(9);
  const std::size_t C = 8, H = 7, W = 6;
  auto p = LGFMParams<double>::make(Scope<double>(st, "lgfm"), C, 8);
  randomize(st, 9);
  std::mt19937_64 rng(9);
  auto col = oracle::randn(rng, C);
  V x(C * H * W);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t q = 0; q < H * W; ++q) x[c * H * W + q] = col[c];
  auto Y = lgfm_forward(oracle::tensor<double>({1, C, H, W}, x), p);
  // two stacked 3×3 convs: pixels at distance ≥ 2 from the border never touch padding
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 2; i + 2 < H; ++i)
      for (std::size_t j = 2; j + 2 < W; ++j)
        EXPECT_NEAR(Y[(c * H + i) * W + j], Y[(c * H + 2) * W + 2], 1e-12);
}

TEST(LGFM, HeadsMustDivideChannels) {
  ParamStore<double> st(10);
  EXPECT_THROW(LGFMParams<double>::make(Scope<double>(st, "a"), 12, 8), ShapeError);
  EXPECT_THROW(LGFMParams<double>::make(Scope<double>(st, "b"), 8, 0), ShapeError);
}

TEST(LGFM, GradcheckAllParameters) {
  ParamStore<double> st(11);
  auto p = LGFMParams<double>::make(Scope<double>(st, "lgfm"), 8, 2);
  randomize(st, 11);
  std::mt19937_64 rng(11);
  auto X = testutil::leaf({1, 8, 3, 3}, rng);
  auto f = [&] { return testutil::probe(lgfm_forward(X, p), 11); };
  std::vector<std::pair<std::string, Tensor<double>>> all{{"X", X}};
  for (auto& q : st.params())
    if (!contains(q.name, "mha.k.bias")) all.emplace_back(q.name, q.tensor);  // exactly zero, see test_ops
  auto rep = finite_diff_check(f, all);
  EXPECT_LT(rep.max_rel_err, 1e-4) << rep.worst;
}

// ---------------------------------------------------------------------------
// CGA

TEST(CGA, MatchesCompositionGivenMambaOutputs) {
  ParamStore<double> st(12);
  const std::size_t B = 2, C = 8, H = 3, W = 4, HW = H * W, k = 2, w = C / k;
  auto p = CGAParams<double>::make(Scope<double>(st, "cga"), C, k, 3);
  randomize(st, 12, [](const std::string& n) { return !contains(n, "A_log") && !contains(n, "b_delta"); });
  std::mt19937_64 rng(12);
  auto x = testutil::leaf({B, C, H, W}, rng), g = testutil::leaf({B, C, H, W}, rng);
  auto r = cga_forward(x, g, p, true);

  auto xs = split_channels(x, k), gs = split_channels(g, k);
  std::vector<V> cross;
  for (std::size_t i = 0; i < k; ++i) {
    auto hx = vals(p.x_mamba[i](xs[i])), hg = vals(p.g_mamba[i](gs[i]));
    auto xp = conv(hx, B, w, H, W, p.x_dw[i]), gp = conv(hg, B, w, H, W, p.g_dw[i]);
    V z(hx.size());
    for (std::size_t j = 0; j < z.size(); ++j) z[j] = hx[j] * sig(gp[j]) + hg[j] * sig(xp[j]);
    cross.push_back(z);
  }
  auto Z = concat(cross, B, HW, w);
  auto gam = vals(p.bn.gamma), bet = vals(p.bn.beta);
  for (std::size_t c = 0; c < C; ++c) {
    double m = 0, s = 0;
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t q = 0; q < HW; ++q) m += Z[(n * C + c) * HW + q];
    m /= double(B * HW);
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t q = 0; q < HW; ++q) s += std::pow(Z[(n * C + c) * HW + q] - m, 2);
    const double is = 1.0 / std::sqrt(s / double(B * HW) + 1e-5);
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t q = 0; q < HW; ++q) {
        auto& e = Z[(n * C + c) * HW + q];
        e = std::max(0.0, (e - m) * is * gam[c] + bet[c]);
      }
  }
  auto psi = conv(Z, B, C, H, W, p.mask);
  ASSERT_EQ(r.psi.shape(), (Shape{B, 1, H, W}));
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t q = 0; q < HW; ++q) {
      const double ps = sig(psi[n * HW + q]);
      EXPECT_NEAR(r.psi[n * HW + q], ps, 1e-12);
      for (std::size_t c = 0; c < C; ++c)
        EXPECT_NEAR(r.x_att[(n * C + c) * HW + q], ps * x[(n * C + c) * HW + q], 1e-12);
    }
}

TEST(CGA, GateIsOpenIntervalAndShrinksSkip) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ParamStore<double> st(seed);
    auto p = CGAParams<double>::make(Scope<double>(st, "cga"), 8, 4, 4);
    std::mt19937_64 rng(seed);
    auto x = testutil::leaf({2, 8, 4, 4}, rng), g = testutil::leaf({2, 8, 4, 4}, rng);
    auto r = cga_forward(x, g, p, true);
    for (double v : r.psi.data()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LT(std::abs(r.x_att[i]), std::abs(x[i]));
  }
}

TEST(CGA, ZeroSkipGivesZeroOutput) {
  ParamStore<double> st(13);
  auto p = CGAParams<double>::make(Scope<double>(st, "cga"), 8, 2, 4);
  randomize(st, 13, [](const std::string& n) { return contains(n, "bias"); });
  std::mt19937_64 rng(13);
  auto x = Tensor<double>::zeros({1, 8, 3, 3});
  auto g = testutil::leaf({1, 8, 3, 3}, rng);
  auto r = cga_forward(x, g, p, true);
  for (double v : r.x_att.data()) EXPECT_EQ(v, 0.0);
}

TEST(CGA, InferenceUsesRunningStatistics) {
  ParamStore<double> st(14);
  auto p = CGAParams<double>::make(Scope<double>(st, "cga"), 8, 2, 4);
  std::mt19937_64 rng(14);
  auto x = testutil::leaf({2, 8, 3, 3}, rng), g = testutil::leaf({2, 8, 3, 3}, rng);
  const auto before = p.bn_stats->running_mean;
  auto a = cga_forward(x, g, p, false);
  EXPECT_EQ(p.bn_stats->running_mean, before);
  auto b = cga_forward(x, g, p, false);
  EXPECT_EQ(vals(a.x_att), vals(b.x_att));
  cga_forward(x, g, p, true);
  EXPECT_NE(p.bn_stats->running_mean, before);
}

TEST(CGA, ShapeErrors) {
  ParamStore<double> st(15);
  EXPECT_THROW(CGAParams<double>::make(Scope<double>(st, "a"), 8, 3, 4), ShapeError);
  auto p = CGAParams<double>::make(Scope<double>(st, "b"), 8, 2, 4);
  auto x = Tensor<double>::zeros({1, 8, 3, 3});
  auto g = Tensor<double>::zeros({1, 8, 3, 4});
  EXPECT_THROW(cga_forward(x, g, p, true), ShapeError);
}

TEST(CGA, GradcheckThroughSkipGatingAndParameters) {
  ParamStore<double> st(16);
  auto p = CGAParams<double>::make(Scope<double>(st, "cga"), 8, 2, 3);
  randomize(st, 16, [](const std::string& n) { return contains(n, "bias") || contains(n, "beta"); }, 0.3);
  testutil::condition_scans(st, 16);
  std::mt19937_64 rng(16);
  auto x = testutil::leaf({1, 8, 4, 4}, rng), g = testutil::leaf({1, 8, 4, 4}, rng);
  auto f = [&] { return testutil::probe(cga_forward(x, g, p, true).x_att, 16); };
  auto all = all_params(st);
  all.emplace_back("x", x);
  all.emplace_back("g", g);
  auto rep = finite_diff_check(f, all);
  EXPECT_LT(rep.max_rel_err, 1e-4) << rep.worst;
}
