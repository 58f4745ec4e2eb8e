#pragma once

#include <cmath>
#include <iostream>
#include <string>
#include <vector>

#include "spx/tensor.hpp"

namespace spx {

// Named parameter handle; `backbone` selects the reduced-learning-rate group.
template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T> tensor;
  bool backbone = false;
};

template <typename T>
using ParamRegistry = std::vector<ParamRef<T>>;

struct PolySchedule {
  double base_lr = 1e-3;
  int warmup_steps = 100;
  int total_steps = 3000;
  double poly_power = 0.9;
};

// Linear warmup from 0 to base_lr, then polynomial decay to 0 at
// total_steps.
inline double poly_lr(int step, const PolySchedule& s) {
  check(step >= 0 && step <= s.total_steps, "poly_lr: step out of range");
  if (step < s.warmup_steps)
    return s.base_lr * static_cast<double>(step) / s.warmup_steps;
  if (s.total_steps == s.warmup_steps) return s.base_lr;
  const double progress = static_cast<double>(step - s.warmup_steps) /
                          (s.total_steps - s.warmup_steps);
  return s.base_lr * std::pow(1.0 - progress, s.poly_power);
}

// Decoupled-weight-decay Adam, beta = (0.9, 0.999), eps = 1e-8.
template <typename T>
struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t t = 0;
  int skipped_steps = 0;
  std::vector<std::vector<T>> m, v;

  void init(const ParamRegistry<T>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.tensor.data().size(), T(0));
      v.emplace_back(p.tensor.data().size(), T(0));
    }
    t = 0;
    skipped_steps = 0;
  }

  // One update over all parameter groups. Returns false (and leaves all
  // state untouched) when any gradient is non-finite.
  bool step(ParamRegistry<T>& params, double lr, double weight_decay,
            double backbone_lr_mult) {
    check(m.size() == params.size(), "AdamW: state not initialized");
    for (const auto& p : params) {
      const auto& g = p.tensor.grad();
      if (g.empty()) continue;
      for (T gv : g)
        if (!std::isfinite(static_cast<double>(gv))) {
          ++skipped_steps;
          std::cerr << "adamw: non-finite gradient in '" << p.name
                    << "', step skipped (total skipped " << skipped_steps
                    << ")\n";
          return false;
        }
    }
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      const double plr = p.backbone ? lr * backbone_lr_mult : lr;
      auto& val = p.tensor.data();
      const auto& g = p.tensor.grad();
      auto& mi = m[i];
      auto& vi = v[i];
      for (std::size_t j = 0; j < val.size(); ++j) {
        const double gj = g.empty() ? 0.0 : static_cast<double>(g[j]);
        const double mj = beta1 * static_cast<double>(mi[j]) + (1.0 - beta1) * gj;
        const double vj =
            beta2 * static_cast<double>(vi[j]) + (1.0 - beta2) * gj * gj;
        mi[j] = static_cast<T>(mj);
        vi[j] = static_cast<T>(vj);
        const double mhat = mj / bc1;
        const double vhat = vj / bc2;
        val[j] = static_cast<T>(
            static_cast<double>(val[j]) -
            plr * (mhat / (std::sqrt(vhat) + eps) +
                   weight_decay * static_cast<double>(val[j])));
      }
    }
    return true;
  }
};

}  // namespace spx
