#pragma once

#include <functional>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include "mlunet/tensor.hpp"

namespace mlunet {

struct GradCheckReport {
  double max_rel_err = 0;
  double max_abs_err = 0;
  std::size_t checked = 0;
  std::string worst;  // "name[index]" of the worst coordinate
  std::size_t refined = 0;
  bool pass = true;
};

struct GradCheckOptions {
  double h = 1e-4;
  double tol = 1e-4;
  std::size_t max_coords_per_tensor = 0;  // 0: every coordinate
  std::uint64_t seed = 0;
  double floor = 1e-8;
  // On a mismatch, re-probe at h/10 and h/100 and use the finer estimate when
  // the two agree. Catches steps that straddle a max-pool argmax switch.
  bool refine_on_kink = false;
};

/// |a - n| / max(|a|, |n|, floor).
inline double grad_rel_err(double a, double n, double floor = 1e-8) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// Central finite differences against the analytic gradient of f at the
/// current values of `tensors`. The tensors are perturbed in place and restored.
inline GradCheckReport finite_diff_check(const std::function<Tensor<double>()>& f,
                                         const std::vector<std::pair<std::string, Tensor<double>>>& tensors,
                                         GradCheckOptions opt = {}) {
  for (auto& [_, t] : tensors) {
    Tensor<double> tt = t;
    tt.zero_grad();
    if (!tt.requires_grad()) throw std::invalid_argument("finite_diff_check: tensor does not require grad");
  }
  Tensor<double> loss = f();
  if (loss.size() != 1) throw ShapeError("finite_diff_check: f must return a scalar");
  if (!std::isfinite(loss.item())) throw NumericError("finite_diff_check: f is not finite");
  if (loss.requires_grad()) loss.backward();

  auto eval = [&]() {
    NoGradGuard ng;
    const double v = f().item();
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: f is not finite at a probe point");
    return v;
  };

  GradCheckReport rep;
  std::mt19937_64 rng(opt.seed);
  for (auto& [name, t] : tensors) {
    Tensor<double> tt = t;
    std::vector<double> analytic = tt.has_grad() ? std::vector<double>(tt.grad().begin(), tt.grad().end())
                                                 : std::vector<double>(tt.size(), 0.0);
    std::vector<std::size_t> coords(tt.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opt.max_coords_per_tensor && coords.size() > opt.max_coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.max_coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    auto& vals = tt.values();
    for (std::size_t i : coords) {
      const double orig = vals[i];
      vals[i] = orig + opt.h;
      const double fp = eval();
      vals[i] = orig - opt.h;
      const double fm = eval();
      vals[i] = orig;
      double numeric = (fp - fm) / (2 * opt.h);
      auto probe = [&](double h) {
        vals[i] = orig + h;
        const double p = eval();
        vals[i] = orig - h;
        const double m = eval();
        vals[i] = orig;
        return (p - m) / (2 * h);
      };
      if (opt.refine_on_kink && grad_rel_err(analytic[i], numeric, opt.floor) >= opt.tol) {
        const double n1 = probe(opt.h / 10), n2 = probe(opt.h / 100);
        if (grad_rel_err(n1, n2, opt.floor) < opt.tol) {
          numeric = n2;
          ++rep.refined;
        }
      }
      const double rel = grad_rel_err(analytic[i], numeric, opt.floor);
      ++rep.checked;
      rep.max_abs_err = std::max(rep.max_abs_err, std::abs(analytic[i] - numeric));
      if (rel > rep.max_rel_err || rep.worst.empty()) {
        if (rel >= rep.max_rel_err) {
          rep.max_rel_err = rel;
          rep.worst = name + "[" + std::to_string(i) + "]";
        }
      }
    }
  }
  rep.pass = rep.max_rel_err < opt.tol;
  return rep;
}

}  // namespace mlunet
