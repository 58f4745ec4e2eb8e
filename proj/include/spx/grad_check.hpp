#pragma once

#include <cmath>
#include <functional>
#include <type_traits>
#include <vector>

#include "spx/ops.hpp"

namespace spx {

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  // 0 checks every coordinate; otherwise a seeded random subset per input.
  int max_coords_per_input = 0;
  std::uint64_t sample_seed = 0;
  // Relative error denominator floor, so near-zero gradients are compared
  // absolutely at tol * floor.
  double denom_floor = 1e-4;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  double tol = 0.0;
  std::size_t coords_checked = 0;
  bool pass = false;
  int worst_input = -1;
  std::size_t worst_coord = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Compares tape gradients of a scalar-valued function against central finite
// differences. 64-bit only; eps must lie in [1e-7, 1e-4].
template <typename T>
GradCheckReport grad_check(
    const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& f,
    std::vector<Tensor<T>> inputs, GradCheckOptions opt = {}) {
  static_assert(std::is_same_v<T, double>,
                "grad_check requires 64-bit precision");
  if (opt.eps < 1e-7 || opt.eps > 1e-4)
    throw std::invalid_argument("grad_check: eps must be in [1e-7, 1e-4]");

  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  Tape<T> tape;
  Tensor<T> y;
  {
    typename Tape<T>::Scope scope(tape);
    y = f(inputs);
  }
  check(y.defined() && y.size() == 1, "grad_check: f must return a scalar");
  tape.backward(y);

  GradCheckReport report;
  report.tol = opt.tol;
  for (std::size_t ii = 0; ii < inputs.size(); ++ii) {
    auto& in = inputs[ii];
    const std::size_t n = in.data().size();
    std::vector<std::size_t> coords;
    if (opt.max_coords_per_input <= 0 ||
        n <= static_cast<std::size_t>(opt.max_coords_per_input)) {
      coords.resize(n);
      for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      Pcg32 rng(opt.sample_seed, ii + 1);
      coords.resize(static_cast<std::size_t>(opt.max_coords_per_input));
      for (auto& c : coords) c = rng.uniform_int(static_cast<std::uint32_t>(n));
    }
    for (std::size_t c : coords) {
      const T saved = in.data()[c];
      in.data()[c] = saved + static_cast<T>(opt.eps);
      const T fp = f(inputs).data()[0];
      in.data()[c] = saved - static_cast<T>(opt.eps);
      const T fm = f(inputs).data()[0];
      in.data()[c] = saved;
      const double numeric =
          (static_cast<double>(fp) - static_cast<double>(fm)) / (2.0 * opt.eps);
      if (!std::isfinite(numeric))
        throw std::runtime_error(
            "grad_check: non-finite finite-difference estimate");
      const double analytic = static_cast<double>(in.grad()[c]);
      const double denom = std::max(
          {std::abs(analytic), std::abs(numeric), opt.denom_floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++report.coords_checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_input = static_cast<int>(ii);
        report.worst_coord = c;
        report.worst_analytic = analytic;
        report.worst_numeric = numeric;
      }
    }
  }
  report.pass = report.max_rel_err <= opt.tol;
  return report;
}

}  // namespace spx
