#pragma once

#include "mlunet/ops.hpp"

namespace mlunet {

enum class LossMode { bce, dice, both };

inline LossMode parse_loss_mode(const std::string& s) {
  if (s == "bce") return LossMode::bce;
  if (s == "dice") return LossMode::dice;
  if (s == "both") return LossMode::both;
  throw std::invalid_argument("unknown loss mode: " + s + " (bce|dice|both)");
}

inline std::string to_string(LossMode m) {
  switch (m) {
    case LossMode::bce: return "bce";
    case LossMode::dice: return "dice";
    case LossMode::both: return "both";
  }
  return "?";
}

struct LossConfig {
  LossMode mode = LossMode::both;
  double dice_smooth = 1.0;
};

inline constexpr double kProbClamp = 1e-7;

namespace detail {

template <typename T>
void check_loss_inputs(const Tensor<T>& p, const Tensor<T>& g, const char* op) {
  detail::require_same_shape(p, g, op);
  if (p.rank() < 1) throw ShapeError(std::string(op) + ": rank 0");
  for (T v : g.data())
    if (v != T(0) && v != T(1)) throw std::invalid_argument(std::string(op) + ": mask is not binary");
}

}  // namespace detail

/// −mean(g·log p + (1−g)·log(1−p)) with p clamped to [1e−7, 1−1e−7].
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& p, const Tensor<T>& g) {
  detail::check_loss_inputs(p, g, "bce_loss");
  const T lo = T(kProbClamp), hi = T(1) - T(kProbClamp);
  const std::size_t N = p.size();
  auto pv = p.data(), gv = g.data();
  double acc = 0;
  for (std::size_t i = 0; i < N; ++i) {
    const double pc = std::clamp<double>(pv[i], lo, hi);
    acc += gv[i] ? std::log(pc) : std::log1p(-pc);
  }
  const T value = static_cast<T>(-acc / static_cast<double>(N));
  auto pn = p.node_ptr(), gn = g.node_ptr();
  return make_result<T>("bce_loss", {1}, {value}, {p, g}, [pn, gn, N, lo, hi](Node<T>& self) {
    if (!pn->requires_grad) return;
    auto& gp = pn->ensure_grad();
    const T s = self.grad[0] / static_cast<T>(N);
    for (std::size_t i = 0; i < N; ++i) {
      const T v = pn->value[i];
      if (v < lo || v > hi) continue;
      gp[i] += gn->value[i] ? -s / v : s / (T(1) - v);
    }
  });
}

/// Soft Dice per image, averaged over the batch: 1 − (2Σpg + s)/(Σp + Σg + s).
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& p, const Tensor<T>& g, double smooth = 1.0) {
  detail::check_loss_inputs(p, g, "dice_loss");
  if (!(smooth > 0)) throw std::invalid_argument("dice_loss: smooth must be positive");
  const std::size_t B = p.dim(0), per = p.size() / B;
  auto pv = p.data(), gv = g.data();
  std::vector<double> num(B), den(B);
  double acc = 0;
  for (std::size_t b = 0; b < B; ++b) {
    double I = 0, P = 0, G = 0;
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      I += static_cast<double>(pv[i]) * gv[i];
      P += pv[i];
      G += gv[i];
    }
    num[b] = 2 * I + smooth;
    den[b] = P + G + smooth;
    acc += 1 - num[b] / den[b];
  }
  const T value = static_cast<T>(acc / static_cast<double>(B));
  auto pn = p.node_ptr(), gn = g.node_ptr();
  return make_result<T>("dice_loss", {1}, {value}, {p, g}, [pn, gn, B, per, num, den](Node<T>& self) {
    if (!pn->requires_grad) return;
    auto& gp = pn->ensure_grad();
    const double s = static_cast<double>(self.grad[0]) / static_cast<double>(B);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = b * per; i < (b + 1) * per; ++i)
        gp[i] += static_cast<T>(-s * (2 * gn->value[i] * den[b] - num[b]) / (den[b] * den[b]));
  });
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& p, const Tensor<T>& g, const LossConfig& cfg = {}) {
  switch (cfg.mode) {
    case LossMode::bce: return bce_loss(p, g);
    case LossMode::dice: return dice_loss(p, g, cfg.dice_smooth);
    case LossMode::both: return add(bce_loss(p, g), dice_loss(p, g, cfg.dice_smooth));
  }
  throw std::logic_error("total_loss: bad mode");
}

}  // namespace mlunet
