#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <stdexcept>
#include <vector>

#include "spx/tensor.hpp"

// Differentiable primitives. Every op computes its forward result eagerly
// and, when a tape is active and some input requires grad, records a
// backward closure capturing the involved storages. Closures that find an
// un-touched output grad return immediately (nothing flowed through them).

namespace spx {

namespace detail {

template <typename T>
inline Tape<T>* tape_if(std::initializer_list<const Tensor<T>*> inputs) {
  return trace_enabled<T>(inputs) ? Tape<T>::active() : nullptr;
}

inline void check_same_shape(const Shape& a, const Shape& b, const char* op) {
  check(a == b, std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                    shape_str(b));
}

// Mask surrogate: invalid entries get this added before softmax. exp() of
// the shifted value underflows to exactly 0 for any realistic logit scale.
template <typename T>
constexpr T mask_sentinel() {
  return T(-1e9);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const std::size_t n = a.data().size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (auto* tp = detail::tape_if<T>({&a, &b})) {
    out.set_requires_grad(true);
    tp->record([ad = a.ptr(), bd = b.ptr(), od = out.ptr()] {
      if (od->grad.empty()) return;
      const std::size_t m = od->grad.size();
      if (ad->requires_grad) {
        ad->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) ad->grad[i] += od->grad[i];
      }
      if (bd->requires_grad) {
        bd->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) bd->grad[i] += od->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const std::size_t n = a.data().size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (auto* tp = detail::tape_if<T>({&a, &b})) {
    out.set_requires_grad(true);
    tp->record([ad = a.ptr(), bd = b.ptr(), od = out.ptr()] {
      if (od->grad.empty()) return;
      const std::size_t m = od->grad.size();
      if (ad->requires_grad) {
        ad->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) ad->grad[i] += od->grad[i];
      }
      if (bd->requires_grad) {
        bd->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) bd->grad[i] -= od->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const std::size_t n = a.data().size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (auto* tp = detail::tape_if<T>({&a, &b})) {
    out.set_requires_grad(true);
    tp->record([ad = a.ptr(), bd = b.ptr(), od = out.ptr()] {
      if (od->grad.empty()) return;
      const std::size_t m = od->grad.size();
      if (ad->requires_grad) {
        ad->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          ad->grad[i] += od->grad[i] * bd->value[i];
      }
      if (bd->requires_grad) {
        bd->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          bd->grad[i] += od->grad[i] * ad->value[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const std::size_t n = a.data().size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
  if (auto* tp = detail::tape_if<T>({&a})) {
    out.set_requires_grad(true);
    tp->record([ad = a.ptr(), od = out.ptr(), c] {
      if (od->grad.empty() || !ad->requires_grad) return;
      ad->ensure_grad();
      for (std::size_t i = 0; i < od->grad.size(); ++i)
        ad->grad[i] += od->grad[i] * c;
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const std::size_t n = a.data().size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + c;
  if (auto* tp = detail::tape_if<T>({&a})) {
    out.set_requires_grad(true);
    tp->record([ad = a.ptr(), od = out.ptr()] {
      if (od->grad.empty() || !ad->requires_grad) return;
      ad->ensure_grad();
      for (std::size_t i = 0; i < od->grad.size(); ++i)
        ad->grad[i] += od->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const std::size_t n = a.data().size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = std::exp(a.data()[i]);
  if (auto* tp = detail::tape_if<T>({&a})) {
    out.set_requires_grad(true);
    tp->record([ad = a.ptr(), od = out.ptr()] {
      if (od->grad.empty() || !ad->requires_grad) return;
      ad->ensure_grad();
      for (std::size_t i = 0; i < od->grad.size(); ++i)
        ad->grad[i] += od->grad[i] * od->value[i];
    });
  }
  return out;
}

// Smooth tanh-form GELU; smoothness keeps finite-difference checks clean.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const std::size_t n = a.data().size();
  for (std::size_t i = 0; i < n; ++i) {
    T x = a.data()[i];
    T t = std::tanh(kC * (x + kA * x * x * x));
    out.data()[i] = T(0.5) * x * (T(1) + t);
  }
  if (auto* tp = detail::tape_if<T>({&a})) {
    out.set_requires_grad(true);
    tp->record([ad = a.ptr(), od = out.ptr()] {
      if (od->grad.empty() || !ad->requires_grad) return;
      constexpr T c0 = T(0.7978845608028654);
      constexpr T a0 = T(0.044715);
      ad->ensure_grad();
      for (std::size_t i = 0; i < od->grad.size(); ++i) {
        T x = ad->value[i];
        T u = c0 * (x + a0 * x * x * x);
        T t = std::tanh(u);
        T du = c0 * (T(1) + T(3) * a0 * x * x);
        T d = T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
        ad->grad[i] += od->grad[i] * d;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reciprocal(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const std::size_t n = a.data().size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = T(1) / a.data()[i];
  if (auto* tp = detail::tape_if<T>({&a})) {
    out.set_requires_grad(true);
    tp->record([ad = a.ptr(), od = out.ptr()] {
      if (od->grad.empty() || !ad->requires_grad) return;
      ad->ensure_grad();
      for (std::size_t i = 0; i < od->grad.size(); ++i)
        ad->grad[i] -= od->grad[i] * od->value[i] * od->value[i];
    });
  }
  return out;
}

// max(x, c); gradient passes where x >= c.
template <typename T>
Tensor<T> clamp_min(const Tensor<T>& a, T c) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const std::size_t n = a.data().size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = std::max(a.data()[i], c);
  if (auto* tp = detail::tape_if<T>({&a})) {
    out.set_requires_grad(true);
    tp->record([ad = a.ptr(), od = out.ptr(), c] {
      if (od->grad.empty() || !ad->requires_grad) return;
      ad->ensure_grad();
      for (std::size_t i = 0; i < od->grad.size(); ++i)
        if (ad->value[i] >= c) ad->grad[i] += od->grad[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape and data movement
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
  check(numel(new_shape) == a.size(),
        "reshape: cannot reshape " + shape_str(a.shape()) + " to " +
            shape_str(new_shape));
  Tensor<T> out = Tensor<T>::from(std::move(new_shape), a.data());
  if (auto* tp = detail::tape_if<T>({&a})) {
    out.set_requires_grad(true);
    tp->record([ad = a.ptr(), od = out.ptr()] {
      if (od->grad.empty() || !ad->requires_grad) return;
      ad->ensure_grad();
      for (std::size_t i = 0; i < od->grad.size(); ++i)
        ad->grad[i] += od->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  check(a.rank() == 2, "transpose2d: expects a rank-2 tensor");
  const int m = a.dim(0), n = a.dim(1);
  Tensor<T> out = Tensor<T>::zeros({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out.data()[static_cast<std::size_t>(j) * m + i] =
          a.data()[static_cast<std::size_t>(i) * n + j];
  if (auto* tp = detail::tape_if<T>({&a})) {
    out.set_requires_grad(true);
    tp->record([ad = a.ptr(), od = out.ptr(), m, n] {
      if (od->grad.empty() || !ad->requires_grad) return;
      ad->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          ad->grad[static_cast<std::size_t>(i) * n + j] +=
              od->grad[static_cast<std::size_t>(j) * m + i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_last(const std::vector<Tensor<T>>& parts) {
  check(!parts.empty(), "concat_last: no inputs");
  Shape lead = parts[0].shape();
  lead.pop_back();
  int total = 0;
  for (const auto& p : parts) {
    Shape l = p.shape();
    check(!l.empty(), "concat_last: rank must be >= 1");
    int last = l.back();
    l.pop_back();
    check(l == lead, "concat_last: leading dims mismatch");
    total += last;
  }
  Shape out_shape = parts[0].shape();
  out_shape.back() = total;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const std::size_t rows = static_cast<std::size_t>(numel(lead));
  std::size_t col_off = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    const std::size_t w = static_cast<std::size_t>(p.shape().back());
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(p.data().begin() + r * w, w,
                  out.data().begin() + r * total + col_off);
    col_off += w;
    any_grad = any_grad || p.requires_grad();
  }
  if (any_grad && Tape<T>::active() != nullptr) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorData<T>>> srcs;
    for (const auto& p : parts) srcs.push_back(p.ptr());
    Tape<T>::active()->record([srcs, od = out.ptr(), rows, total] {
      if (od->grad.empty()) return;
      std::size_t off = 0;
      for (const auto& s : srcs) {
        const std::size_t w = static_cast<std::size_t>(s->shape.back());
        if (s->requires_grad) {
          s->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < w; ++c)
              s->grad[r * w + c] += od->grad[r * total + off + c];
        }
        off += w;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_last(const Tensor<T>& a, int start, int len) {
  check(a.rank() >= 1, "slice_last: rank must be >= 1");
  const int last = a.shape().back();
  check(start >= 0 && len >= 1 && start + len <= last,
        "slice_last: invalid slice [" + std::to_string(start) + "," +
            std::to_string(start + len) + ") of extent " + std::to_string(last));
  Shape out_shape = a.shape();
  out_shape.back() = len;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const std::size_t rows = a.data().size() / static_cast<std::size_t>(last);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(a.data().begin() + r * last + start, len,
                out.data().begin() + r * len);
  if (auto* tp = detail::tape_if<T>({&a})) {
    out.set_requires_grad(true);
    tp->record([ad = a.ptr(), od = out.ptr(), rows, last, start, len] {
      if (od->grad.empty() || !ad->requires_grad) return;
      ad->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (int c = 0; c < len; ++c)
          ad->grad[r * last + start + c] += od->grad[r * len + c];
    });
  }
  return out;
}

// Row gather. For rank-2 [M,C] -> [N,C]; a rank-1 tensor is treated as M
// rows of width 1.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<int>& idx) {
  check(a.rank() == 1 || a.rank() == 2, "gather_rows: rank must be 1 or 2");
  const int m = a.dim(0);
  const int width = a.rank() == 2 ? a.dim(1) : 1;
  for (int i : idx)
    check(i >= 0 && i < m, "gather_rows: index " + std::to_string(i) +
                               " out of range [0," + std::to_string(m) + ")");
  Shape out_shape = a.rank() == 2
                        ? Shape{static_cast<int>(idx.size()), width}
                        : Shape{static_cast<int>(idx.size())};
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(a.data().begin() + static_cast<std::size_t>(idx[r]) * width,
                width, out.data().begin() + r * width);
  if (auto* tp = detail::tape_if<T>({&a})) {
    out.set_requires_grad(true);
    auto ids = std::make_shared<std::vector<int>>(idx);
    tp->record([ad = a.ptr(), od = out.ptr(), ids, width] {
      if (od->grad.empty() || !ad->requires_grad) return;
      ad->ensure_grad();
      for (std::size_t r = 0; r < ids->size(); ++r) {
        const std::size_t src = r * width;
        const std::size_t dst = static_cast<std::size_t>((*ids)[r]) * width;
        for (int c = 0; c < width; ++c) ad->grad[dst + c] += od->grad[src + c];
      }
    });
  }
  return out;
}

// out[idx[r]] += a[r]; the adjoint of gather_rows.
template <typename T>
Tensor<T> scatter_add_rows(const Tensor<T>& a, const std::vector<int>& idx,
                           int out_rows) {
  check(a.rank() == 1 || a.rank() == 2, "scatter_add_rows: rank must be 1 or 2");
  check(static_cast<int>(idx.size()) == a.dim(0),
        "scatter_add_rows: index count must match rows");
  const int width = a.rank() == 2 ? a.dim(1) : 1;
  for (int i : idx)
    check(i >= 0 && i < out_rows, "scatter_add_rows: index out of range");
  Shape out_shape =
      a.rank() == 2 ? Shape{out_rows, width} : Shape{out_rows};
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const std::size_t dst = static_cast<std::size_t>(idx[r]) * width;
    const std::size_t src = r * width;
    for (int c = 0; c < width; ++c) out.data()[dst + c] += a.data()[src + c];
  }
  if (auto* tp = detail::tape_if<T>({&a})) {
    out.set_requires_grad(true);
    auto ids = std::make_shared<std::vector<int>>(idx);
    tp->record([ad = a.ptr(), od = out.ptr(), ids, width] {
      if (od->grad.empty() || !ad->requires_grad) return;
      ad->ensure_grad();
      for (std::size_t r = 0; r < ids->size(); ++r) {
        const std::size_t src = static_cast<std::size_t>((*ids)[r]) * width;
        const std::size_t dst = r * width;
        for (int c = 0; c < width; ++c) ad->grad[dst + c] += od->grad[src + c];
      }
    });
  }
  return out;
}

// K rank-1 tensors of length N -> [N, K].
template <typename T>
Tensor<T> stack_cols(const std::vector<Tensor<T>>& cols) {
  check(!cols.empty(), "stack_cols: no inputs");
  const int n = cols[0].dim(0);
  const int k = static_cast<int>(cols.size());
  bool any_grad = false;
  for (const auto& c : cols) {
    check(c.rank() == 1 && c.dim(0) == n, "stack_cols: all inputs must be [N]");
    any_grad = any_grad || c.requires_grad();
  }
  Tensor<T> out = Tensor<T>::zeros({n, k});
  for (int j = 0; j < k; ++j)
    for (int i = 0; i < n; ++i)
      out.data()[static_cast<std::size_t>(i) * k + j] = cols[j].data()[i];
  if (any_grad && Tape<T>::active() != nullptr) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorData<T>>> srcs;
    for (const auto& c : cols) srcs.push_back(c.ptr());
    Tape<T>::active()->record([srcs, od = out.ptr(), n, k] {
      if (od->grad.empty()) return;
      for (int j = 0; j < k; ++j) {
        if (!srcs[j]->requires_grad) continue;
        srcs[j]->ensure_grad();
        for (int i = 0; i < n; ++i)
          srcs[j]->grad[i] += od->grad[static_cast<std::size_t>(i) * k + j];
      }
    });
  }
  return out;
}

// Broadcast multiply: row i of a is scaled by v[i]. v is [N] or [N,1].
template <typename T>
Tensor<T> mul_colvec(const Tensor<T>& a, const Tensor<T>& v) {
  check(a.rank() == 2, "mul_colvec: a must be rank 2");
  const int n = a.dim(0), c = a.dim(1);
  check(static_cast<int>(v.size()) == n, "mul_colvec: v length must match rows");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  for (int i = 0; i < n; ++i) {
    const T s = v.data()[i];
    const std::size_t base = static_cast<std::size_t>(i) * c;
    for (int j = 0; j < c; ++j) out.data()[base + j] = a.data()[base + j] * s;
  }
  if (auto* tp = detail::tape_if<T>({&a, &v})) {
    out.set_requires_grad(true);
    tp->record([ad = a.ptr(), vd = v.ptr(), od = out.ptr(), n, c] {
      if (od->grad.empty()) return;
      if (ad->requires_grad) {
        ad->ensure_grad();
        for (int i = 0; i < n; ++i) {
          const T s = vd->value[i];
          const std::size_t base = static_cast<std::size_t>(i) * c;
          for (int j = 0; j < c; ++j)
            ad->grad[base + j] += od->grad[base + j] * s;
        }
      }
      if (vd->requires_grad) {
        vd->ensure_grad();
        for (int i = 0; i < n; ++i) {
          const std::size_t base = static_cast<std::size_t>(i) * c;
          T acc = T(0);
          for (int j = 0; j < c; ++j)
            acc += od->grad[base + j] * ad->value[base + j];
          vd->grad[i] += acc;
        }
      }
    });
  }
  return out;
}

// Broadcast add: v (length C) is added to every row of a [N, C].
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& a, const Tensor<T>& v) {
  check(a.rank() >= 1, "add_rowvec: a must have rank >= 1");
  const int c = a.shape().back();
  check(static_cast<int>(v.size()) == c,
        "add_rowvec: v length must match last axis");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const std::size_t rows = a.data().size() / static_cast<std::size_t>(c);
  for (std::size_t i = 0; i < rows; ++i) {
    const std::size_t base = i * c;
    for (int j = 0; j < c; ++j)
      out.data()[base + j] = a.data()[base + j] + v.data()[j];
  }
  if (auto* tp = detail::tape_if<T>({&a, &v})) {
    out.set_requires_grad(true);
    tp->record([ad = a.ptr(), vd = v.ptr(), od = out.ptr(), rows, c] {
      if (od->grad.empty()) return;
      if (ad->requires_grad) {
        ad->ensure_grad();
        for (std::size_t i = 0; i < od->grad.size(); ++i)
          ad->grad[i] += od->grad[i];
      }
      if (vd->requires_grad) {
        vd->ensure_grad();
        for (std::size_t i = 0; i < rows; ++i)
          for (int j = 0; j < c; ++j) vd->grad[j] += od->grad[i * c + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros({1});
  T acc = T(0);
  for (T v : a.data()) acc += v;
  out.data()[0] = acc;
  if (auto* tp = detail::tape_if<T>({&a})) {
    out.set_requires_grad(true);
    tp->record([ad = a.ptr(), od = out.ptr()] {
      if (od->grad.empty() || !ad->requires_grad) return;
      ad->ensure_grad();
      const T g = od->grad[0];
      for (std::size_t i = 0; i < ad->grad.size(); ++i) ad->grad[i] += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& a) {
  check(a.size() > 0, "reduce_mean: empty tensor");
  Tensor<T> s = reduce_sum(a);
  return scale(s, T(1) / static_cast<T>(a.size()));
}

// Sum over the last axis: [d0,...,dk,C] -> [d0,...,dk].
template <typename T>
Tensor<T> rowsum(const Tensor<T>& a) {
  check(a.rank() >= 2, "rowsum: rank must be >= 2");
  const int c = a.shape().back();
  Shape out_shape = a.shape();
  out_shape.pop_back();
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const std::size_t rows = out.data().size();
  for (std::size_t i = 0; i < rows; ++i) {
    T acc = T(0);
    const std::size_t base = i * c;
    for (int j = 0; j < c; ++j) acc += a.data()[base + j];
    out.data()[i] = acc;
  }
  if (auto* tp = detail::tape_if<T>({&a})) {
    out.set_requires_grad(true);
    tp->record([ad = a.ptr(), od = out.ptr(), rows, c] {
      if (od->grad.empty() || !ad->requires_grad) return;
      ad->ensure_grad();
      for (std::size_t i = 0; i < rows; ++i) {
        const T g = od->grad[i];
        const std::size_t base = i * c;
        for (int j = 0; j < c; ++j) ad->grad[base + j] += g;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.rank() == 2 && b.rank() == 2, "matmul: expects rank-2 tensors");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  check(b.dim(0) == k, "matmul: inner dims mismatch " + shape_str(a.shape()) +
                           " x " + shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::zeros({m, n});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (int i = 0; i < m; ++i) {
    for (int l = 0; l < k; ++l) {
      const T av = pa[static_cast<std::size_t>(i) * k + l];
      const T* brow = pb + static_cast<std::size_t>(l) * n;
      T* orow = po + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  if (auto* tp = detail::tape_if<T>({&a, &b})) {
    out.set_requires_grad(true);
    tp->record([ad = a.ptr(), bd = b.ptr(), od = out.ptr(), m, k, n] {
      if (od->grad.empty()) return;
      const T* g = od->grad.data();
      if (ad->requires_grad) {
        ad->ensure_grad();
        // dA = G * B^T
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) {
            const T gv = g[static_cast<std::size_t>(i) * n + j];
            const T* brow = bd->value.data();
            T* arow = ad->grad.data() + static_cast<std::size_t>(i) * k;
            for (int l = 0; l < k; ++l)
              arow[l] += gv * brow[static_cast<std::size_t>(l) * n + j];
          }
      }
      if (bd->requires_grad) {
        bd->ensure_grad();
        // dB = A^T * G
        for (int l = 0; l < k; ++l)
          for (int i = 0; i < m; ++i) {
            const T av = ad->value[static_cast<std::size_t>(i) * k + l];
            const T* grow = g + static_cast<std::size_t>(i) * n;
            T* brow = bd->grad.data() + static_cast<std::size_t>(l) * n;
            for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
          }
      }
    });
  }
  return out;
}

// x [N,C] * w [C,D] + b [D]; pass an undefined bias to skip it.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  Tensor<T> y = matmul(x, w);
  if (b.defined()) y = add_rowvec(y, b);
  return y;
}

// ---------------------------------------------------------------------------
// Softmax and losses
// ---------------------------------------------------------------------------

// Softmax along `axis` with max-subtraction. `mask`, when defined, carries
// 1 for valid and 0 for invalid entries; invalid entries receive an additive
// -1e9 before normalization (single code path, gradient-correct) which
// underflows to an exact zero weight. Assumes |x| << 1e9. Non-finite inputs
// are an error. Each (masked) row must keep at least one valid entry.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis,
                  const Tensor<T>& mask = Tensor<T>()) {
  check(axis >= 0 && axis < x.rank(), "softmax: axis out of range");
  for (T v : x.data())
    if (!std::isfinite(v))
      throw std::domain_error("softmax: non-finite input value");
  if (mask.defined())
    detail::check_same_shape(x.shape(), mask.shape(), "softmax mask");

  const int n = x.dim(axis);
  std::size_t inner = 1;
  for (int i = axis + 1; i < x.rank(); ++i)
    inner *= static_cast<std::size_t>(x.dim(i));
  const std::size_t outer = x.data().size() / (inner * n);

  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* pm = mask.defined() ? mask.data().data() : nullptr;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      bool any_valid = false;
      for (int i = 0; i < n; ++i) {
        const std::size_t at = base + i * inner;
        T v = x.data()[at];
        if (pm) {
          if (pm[at] == T(0))
            v += detail::mask_sentinel<T>();
          else
            any_valid = true;
        } else {
          any_valid = true;
        }
        mx = std::max(mx, v);
      }
      if (!any_valid)
        throw std::logic_error("softmax: row has zero valid entries");
      T denom = T(0);
      for (int i = 0; i < n; ++i) {
        const std::size_t at = base + i * inner;
        T v = x.data()[at];
        if (pm && pm[at] == T(0)) v += detail::mask_sentinel<T>();
        T e = std::exp(v - mx);
        out.data()[at] = e;
        denom += e;
      }
      const T inv = T(1) / denom;
      for (int i = 0; i < n; ++i) out.data()[base + i * inner] *= inv;
    }
  }
  if (auto* tp = detail::tape_if<T>({&x})) {
    out.set_requires_grad(true);
    tp->record([xd = x.ptr(), od = out.ptr(), outer, inner, n] {
      if (od->grad.empty() || !xd->requires_grad) return;
      xd->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * n * inner + in;
          T dot = T(0);
          for (int i = 0; i < n; ++i) {
            const std::size_t at = base + i * inner;
            dot += od->grad[at] * od->value[at];
          }
          for (int i = 0; i < n; ++i) {
            const std::size_t at = base + i * inner;
            xd->grad[at] += od->value[at] * (od->grad[at] - dot);
          }
        }
    });
  }
  return out;
}

// Per-row softmax cross-entropy. logits [N,K], labels length N; rows whose
// label equals ignore_label contribute loss 0 and no gradient. Returns [N].
template <typename T>
Tensor<T> cross_entropy_softmax(const Tensor<T>& logits,
                                const std::vector<int>& labels,
                                int ignore_label = -1) {
  check(logits.rank() == 2, "cross_entropy_softmax: logits must be [N,K]");
  const int n = logits.dim(0), k = logits.dim(1);
  check(static_cast<int>(labels.size()) == n,
        "cross_entropy_softmax: label count mismatch");
  Tensor<T> out = Tensor<T>::zeros({n});
  for (int i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y == ignore_label) continue;
    check(y >= 0 && y < k,
          "cross_entropy_softmax: label " + std::to_string(y) +
              " out of range [0," + std::to_string(k) + ")");
    const std::size_t base = static_cast<std::size_t>(i) * k;
    T mx = logits.data()[base];
    for (int j = 1; j < k; ++j) mx = std::max(mx, logits.data()[base + j]);
    T denom = T(0);
    for (int j = 0; j < k; ++j) denom += std::exp(logits.data()[base + j] - mx);
    out.data()[i] = mx + std::log(denom) - logits.data()[base + y];
  }
  if (auto* tp = detail::tape_if<T>({&logits})) {
    out.set_requires_grad(true);
    auto labs = std::make_shared<std::vector<int>>(labels);
    tp->record([ld = logits.ptr(), od = out.ptr(), labs, n, k, ignore_label] {
      if (od->grad.empty() || !ld->requires_grad) return;
      ld->ensure_grad();
      for (int i = 0; i < n; ++i) {
        const int y = (*labs)[i];
        if (y == ignore_label) continue;
        const T g = od->grad[i];
        if (g == T(0)) continue;
        const std::size_t base = static_cast<std::size_t>(i) * k;
        T mx = ld->value[base];
        for (int j = 1; j < k; ++j) mx = std::max(mx, ld->value[base + j]);
        T denom = T(0);
        for (int j = 0; j < k; ++j)
          denom += std::exp(ld->value[base + j] - mx);
        for (int j = 0; j < k; ++j) {
          T p = std::exp(ld->value[base + j] - mx) / denom;
          ld->grad[base + j] += g * (p - (j == y ? T(1) : T(0)));
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bilinear resize
// ---------------------------------------------------------------------------

namespace detail {

struct ResizeTap {
  int lo, hi;   // source indices
  double frac;  // weight of hi
};

// Half-pixel-center convention: src = (dst + 0.5) * in/out - 0.5, with the
// source coordinate clamped to [lo_bound, hi_bound].
inline std::vector<ResizeTap> resize_taps(int in_extent, int out_extent,
                                          int lo_bound, int hi_bound) {
  std::vector<ResizeTap> taps(static_cast<std::size_t>(out_extent));
  const double scale = static_cast<double>(in_extent) / out_extent;
  for (int o = 0; o < out_extent; ++o) {
    double s = (o + 0.5) * scale - 0.5;
    s = std::min(std::max(s, static_cast<double>(lo_bound)),
                 static_cast<double>(hi_bound));
    int lo = static_cast<int>(std::floor(s));
    lo = std::min(std::max(lo, lo_bound), hi_bound);
    int hi = std::min(lo + 1, hi_bound);
    taps[static_cast<std::size_t>(o)] = {lo, hi, s - lo};
  }
  return taps;
}

}  // namespace detail

// Bilinear resize of [H,W,C] to [out_h,out_w,C], half-pixel centers, border
// clamp. The optional window (inclusive row/col bounds) clamps the *source*
// coordinates; the association upsampler uses it to keep each slot channel
// from sampling out of its valid rectangle. Identical sizes with the default
// window return a bitwise copy.
template <typename T>
Tensor<T> bilinear_resize_window(const Tensor<T>& x, int out_h, int out_w,
                                 int r0, int r1, int c0, int c1) {
  check(x.rank() == 3, "bilinear_resize: expects [H,W,C]");
  check(out_h >= 1 && out_w >= 1, "bilinear_resize: target dims must be >= 1");
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  check(r0 >= 0 && r1 < h && r0 <= r1 && c0 >= 0 && c1 < w && c0 <= c1,
        "bilinear_resize: invalid clamp window");

  const bool identity = out_h == h && out_w == w && r0 == 0 && r1 == h - 1 &&
                        c0 == 0 && c1 == w - 1;
  Tensor<T> out = Tensor<T>::zeros({out_h, out_w, c});
  if (identity) {
    out.data() = x.data();
    if (auto* tp = detail::tape_if<T>({&x})) {
      out.set_requires_grad(true);
      tp->record([xd = x.ptr(), od = out.ptr()] {
        if (od->grad.empty() || !xd->requires_grad) return;
        xd->ensure_grad();
        for (std::size_t i = 0; i < od->grad.size(); ++i)
          xd->grad[i] += od->grad[i];
      });
    }
    return out;
  }

  auto rows = std::make_shared<std::vector<detail::ResizeTap>>(
      detail::resize_taps(h, out_h, r0, r1));
  auto cols = std::make_shared<std::vector<detail::ResizeTap>>(
      detail::resize_taps(w, out_w, c0, c1));

  const T* px = x.data().data();
  T* po = out.data().data();
  for (int oy = 0; oy < out_h; ++oy) {
    const auto& ry = (*rows)[static_cast<std::size_t>(oy)];
    const T wy = static_cast<T>(ry.frac);
    for (int ox = 0; ox < out_w; ++ox) {
      const auto& rx = (*cols)[static_cast<std::size_t>(ox)];
      const T wx = static_cast<T>(rx.frac);
      const T* p00 = px + (static_cast<std::size_t>(ry.lo) * w + rx.lo) * c;
      const T* p01 = px + (static_cast<std::size_t>(ry.lo) * w + rx.hi) * c;
      const T* p10 = px + (static_cast<std::size_t>(ry.hi) * w + rx.lo) * c;
      const T* p11 = px + (static_cast<std::size_t>(ry.hi) * w + rx.hi) * c;
      T* dst = po + (static_cast<std::size_t>(oy) * out_w + ox) * c;
      for (int ch = 0; ch < c; ++ch) {
        const T top = p00[ch] * (T(1) - wx) + p01[ch] * wx;
        const T bot = p10[ch] * (T(1) - wx) + p11[ch] * wx;
        dst[ch] = top * (T(1) - wy) + bot * wy;
      }
    }
  }
  if (auto* tp = detail::tape_if<T>({&x})) {
    out.set_requires_grad(true);
    tp->record([xd = x.ptr(), od = out.ptr(), rows, cols, w, c, out_h, out_w] {
      if (od->grad.empty() || !xd->requires_grad) return;
      xd->ensure_grad();
      for (int oy = 0; oy < out_h; ++oy) {
        const auto& ry = (*rows)[static_cast<std::size_t>(oy)];
        const T wy = static_cast<T>(ry.frac);
        for (int ox = 0; ox < out_w; ++ox) {
          const auto& rx = (*cols)[static_cast<std::size_t>(ox)];
          const T wx = static_cast<T>(rx.frac);
          const std::size_t g00 = (static_cast<std::size_t>(ry.lo) * w + rx.lo) * c;
          const std::size_t g01 = (static_cast<std::size_t>(ry.lo) * w + rx.hi) * c;
          const std::size_t g10 = (static_cast<std::size_t>(ry.hi) * w + rx.lo) * c;
          const std::size_t g11 = (static_cast<std::size_t>(ry.hi) * w + rx.hi) * c;
          const std::size_t src = (static_cast<std::size_t>(oy) * out_w + ox) * c;
          for (int ch = 0; ch < c; ++ch) {
            const T g = od->grad[src + ch];
            xd->grad[g00 + ch] += g * (T(1) - wx) * (T(1) - wy);
            xd->grad[g01 + ch] += g * wx * (T(1) - wy);
            xd->grad[g10 + ch] += g * (T(1) - wx) * wy;
            xd->grad[g11 + ch] += g * wx * wy;
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int out_h, int out_w) {
  return bilinear_resize_window(x, out_h, out_w, 0, x.dim(0) - 1, 0,
                                x.dim(1) - 1);
}

// ---------------------------------------------------------------------------
// Convolution and normalization
// ---------------------------------------------------------------------------

// x [H,W,Cin], w [kh,kw,Cin,Cout], optional bias [Cout]; zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 int stride, int pad) {
  check(x.rank() == 3 && w.rank() == 4, "conv2d: x must be [H,W,Ci], w [kh,kw,Ci,Co]");
  check(stride >= 1 && pad >= 0, "conv2d: invalid stride/pad");
  const int h = x.dim(0), wd = x.dim(1), ci = x.dim(2);
  const int kh = w.dim(0), kw = w.dim(1), co = w.dim(3);
  check(w.dim(2) == ci, "conv2d: channel mismatch");
  if (bias.defined())
    check(bias.rank() == 1 && bias.dim(0) == co, "conv2d: bad bias shape");
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (wd + 2 * pad - kw) / stride + 1;
  check(oh >= 1 && ow >= 1, "conv2d: output would be empty");

  Tensor<T> out = Tensor<T>::zeros({oh, ow, co});
  const T* px = x.data().data();
  const T* pw = w.data().data();
  T* po = out.data().data();
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      T* dst = po + (static_cast<std::size_t>(oy) * ow + ox) * co;
      if (bias.defined())
        for (int f = 0; f < co; ++f) dst[f] = bias.data()[f];
      for (int ky = 0; ky < kh; ++ky) {
        const int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < kw; ++kx) {
          const int ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= wd) continue;
          const T* src = px + (static_cast<std::size_t>(iy) * wd + ix) * ci;
          const T* wk = pw + ((static_cast<std::size_t>(ky) * kw + kx) * ci) * co;
          for (int ic = 0; ic < ci; ++ic) {
            const T xv = src[ic];
            const T* wrow = wk + static_cast<std::size_t>(ic) * co;
            for (int f = 0; f < co; ++f) dst[f] += xv * wrow[f];
          }
        }
      }
    }
  }
  if (auto* tp = detail::tape_if<T>({&x, &w, &bias})) {
    out.set_requires_grad(true);
    tp->record([xd = x.ptr(), wdp = w.ptr(),
                bd = bias.defined() ? bias.ptr() : nullptr, od = out.ptr(),
                h, wd, ci, kh, kw, co, oh, ow, stride, pad] {
      if (od->grad.empty()) return;
      const T* g = od->grad.data();
      const bool need_x = xd->requires_grad;
      const bool need_w = wdp->requires_grad;
      const bool need_b = bd && bd->requires_grad;
      if (need_x) xd->ensure_grad();
      if (need_w) wdp->ensure_grad();
      if (need_b) bd->ensure_grad();
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          const T* gv = g + (static_cast<std::size_t>(oy) * ow + ox) * co;
          if (need_b)
            for (int f = 0; f < co; ++f) bd->grad[f] += gv[f];
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= wd) continue;
              const std::size_t xoff =
                  (static_cast<std::size_t>(iy) * wd + ix) * ci;
              const std::size_t woff =
                  (static_cast<std::size_t>(ky) * kw + kx) * ci * co;
              for (int ic = 0; ic < ci; ++ic) {
                const std::size_t wrow = woff + static_cast<std::size_t>(ic) * co;
                if (need_x) {
                  T acc = T(0);
                  for (int f = 0; f < co; ++f)
                    acc += wdp->value[wrow + f] * gv[f];
                  xd->grad[xoff + ic] += acc;
                }
                if (need_w) {
                  const T xv = xd->value[xoff + ic];
                  for (int f = 0; f < co; ++f)
                    wdp->grad[wrow + f] += xv * gv[f];
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// Layer normalization over the last axis with affine parameters.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
  check(x.rank() >= 1, "layer_norm: rank must be >= 1");
  const int c = x.shape().back();
  check(static_cast<int>(gamma.size()) == c && static_cast<int>(beta.size()) == c,
        "layer_norm: gamma/beta must match last axis");
  const std::size_t rows = x.data().size() / static_cast<std::size_t>(c);
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(x.data().size());
  auto inv_sigma = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * c;
    T mean = T(0);
    for (int j = 0; j < c; ++j) mean += x.data()[base + j];
    mean /= static_cast<T>(c);
    T var = T(0);
    for (int j = 0; j < c; ++j) {
      const T d = x.data()[base + j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(c);
    const T inv = T(1) / std::sqrt(var + eps);
    (*inv_sigma)[r] = inv;
    for (int j = 0; j < c; ++j) {
      const T xh = (x.data()[base + j] - mean) * inv;
      (*xhat)[base + j] = xh;
      out.data()[base + j] = gamma.data()[j] * xh + beta.data()[j];
    }
  }
  if (auto* tp = detail::tape_if<T>({&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    tp->record([xd = x.ptr(), gd = gamma.ptr(), bd = beta.ptr(),
                od = out.ptr(), xhat, inv_sigma, rows, c] {
      if (od->grad.empty()) return;
      if (gd->requires_grad) gd->ensure_grad();
      if (bd->requires_grad) bd->ensure_grad();
      if (xd->requires_grad) xd->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * c;
        if (gd->requires_grad || bd->requires_grad) {
          for (int j = 0; j < c; ++j) {
            const T g = od->grad[base + j];
            if (gd->requires_grad) gd->grad[j] += g * (*xhat)[base + j];
            if (bd->requires_grad) bd->grad[j] += g;
          }
        }
        if (xd->requires_grad) {
          T mean_dxh = T(0), mean_dxh_xh = T(0);
          for (int j = 0; j < c; ++j) {
            const T dxh = od->grad[base + j] * gd->value[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * (*xhat)[base + j];
          }
          mean_dxh /= static_cast<T>(c);
          mean_dxh_xh /= static_cast<T>(c);
          const T inv = (*inv_sigma)[r];
          for (int j = 0; j < c; ++j) {
            const T dxh = od->grad[base + j] * gd->value[j];
            xd->grad[base + j] +=
                (dxh - mean_dxh - (*xhat)[base + j] * mean_dxh_xh) * inv;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Neighborhood attention
// ---------------------------------------------------------------------------

// Multi-head attention where query row i attends over the <=K rows of k/v
// listed in nbr[i*K..i*K+K), with valid[] marking live slots. Head channels
// are contiguous: head h covers [h*C/heads, (h+1)*C/heads). Softmax runs
// over valid slots only (equivalent to the additive -1e9 surrogate). Used
// for both local cross-attention paths and, with full index lists, dense
// self-attention. If weights_out is non-null it receives the post-softmax
// weights, laid out [Nq, heads, K] with zeros at invalid slots.
template <typename T>
Tensor<T> neighbor_attention(const Tensor<T>& q, const Tensor<T>& k,
                             const Tensor<T>& v, const std::vector<int>& nbr,
                             const std::vector<std::uint8_t>& valid,
                             int slots, int n_heads, T logit_scale,
                             std::vector<T>* weights_out = nullptr) {
  check(q.rank() == 2 && k.rank() == 2 && v.rank() == 2,
        "neighbor_attention: q/k/v must be rank 2");
  const int nq = q.dim(0), c = q.dim(1);
  const int nkv = k.dim(0);
  check(k.dim(1) == c && v.dim(1) == c && v.dim(0) == nkv,
        "neighbor_attention: q/k/v channel or row mismatch");
  check(n_heads >= 1 && c % n_heads == 0,
        "neighbor_attention: channels must divide heads");
  check(nbr.size() == static_cast<std::size_t>(nq) * slots &&
            valid.size() == nbr.size(),
        "neighbor_attention: index size mismatch");
  const int dh = c / n_heads;

  Tensor<T> out = Tensor<T>::zeros({nq, c});
  auto weights = std::make_shared<std::vector<T>>(
      static_cast<std::size_t>(nq) * n_heads * slots, T(0));
  const T* pq = q.data().data();
  const T* pk = k.data().data();
  const T* pv = v.data().data();
  T* po = out.data().data();
  std::vector<T> logits(static_cast<std::size_t>(slots));
  for (int i = 0; i < nq; ++i) {
    const std::size_t ibase = static_cast<std::size_t>(i) * slots;
    bool any_valid = false;
    for (int s = 0; s < slots; ++s) any_valid = any_valid || valid[ibase + s];
    if (!any_valid)
      throw std::logic_error("neighbor_attention: row " + std::to_string(i) +
                             " has zero valid slots");
    for (int h = 0; h < n_heads; ++h) {
      const std::size_t qoff = static_cast<std::size_t>(i) * c + h * dh;
      T mx = -std::numeric_limits<T>::infinity();
      for (int s = 0; s < slots; ++s) {
        if (!valid[ibase + s]) continue;
        const int j = nbr[ibase + s];
        check(j >= 0 && j < nkv, "neighbor_attention: neighbor id out of range");
        const std::size_t koff = static_cast<std::size_t>(j) * c + h * dh;
        T dot = T(0);
        for (int d = 0; d < dh; ++d) dot += pq[qoff + d] * pk[koff + d];
        logits[static_cast<std::size_t>(s)] = dot * logit_scale;
        mx = std::max(mx, logits[static_cast<std::size_t>(s)]);
      }
      T denom = T(0);
      const std::size_t wbase = (ibase * n_heads) + static_cast<std::size_t>(h) * slots;
      for (int s = 0; s < slots; ++s) {
        if (!valid[ibase + s]) continue;
        const T e = std::exp(logits[static_cast<std::size_t>(s)] - mx);
        (*weights)[wbase + s] = e;
        denom += e;
      }
      const T inv = T(1) / denom;
      T* dst = po + qoff;
      for (int s = 0; s < slots; ++s) {
        if (!valid[ibase + s]) continue;
        const T wgt = (*weights)[wbase + s] * inv;
        (*weights)[wbase + s] = wgt;
        const std::size_t voff =
            static_cast<std::size_t>(nbr[ibase + s]) * c + h * dh;
        for (int d = 0; d < dh; ++d) dst[d] += wgt * pv[voff + d];
      }
    }
  }
  if (weights_out) *weights_out = *weights;

  if (auto* tp = detail::tape_if<T>({&q, &k, &v})) {
    out.set_requires_grad(true);
    auto ids = std::make_shared<std::vector<int>>(nbr);
    auto vmask = std::make_shared<std::vector<std::uint8_t>>(valid);
    tp->record([qd = q.ptr(), kd = k.ptr(), vd = v.ptr(), od = out.ptr(),
                weights, ids, vmask, nq, c, n_heads, dh, slots, logit_scale] {
      if (od->grad.empty()) return;
      const bool need_q = qd->requires_grad;
      const bool need_k = kd->requires_grad;
      const bool need_v = vd->requires_grad;
      if (need_q) qd->ensure_grad();
      if (need_k) kd->ensure_grad();
      if (need_v) vd->ensure_grad();
      std::vector<T> dw(static_cast<std::size_t>(slots));
      for (int i = 0; i < nq; ++i) {
        const std::size_t ibase = static_cast<std::size_t>(i) * slots;
        for (int h = 0; h < n_heads; ++h) {
          const std::size_t qoff = static_cast<std::size_t>(i) * c + h * dh;
          const std::size_t wbase =
              (ibase * n_heads) + static_cast<std::size_t>(h) * slots;
          const T* g = od->grad.data() + qoff;
          // dL/dw_s and value gradient
          T wdot = T(0);
          for (int s = 0; s < slots; ++s) {
            if (!(*vmask)[ibase + s]) continue;
            const std::size_t voff =
                static_cast<std::size_t>((*ids)[ibase + s]) * c + h * dh;
            T acc = T(0);
            for (int d = 0; d < dh; ++d) acc += g[d] * vd->value[voff + d];
            dw[static_cast<std::size_t>(s)] = acc;
            wdot += (*weights)[wbase + s] * acc;
            if (need_v) {
              const T wgt = (*weights)[wbase + s];
              for (int d = 0; d < dh; ++d)
                vd->grad[voff + d] += wgt * g[d];
            }
          }
          if (!need_q && !need_k) continue;
          for (int s = 0; s < slots; ++s) {
            if (!(*vmask)[ibase + s]) continue;
            const T dlogit = (*weights)[wbase + s] *
                             (dw[static_cast<std::size_t>(s)] - wdot) *
                             logit_scale;
            if (dlogit == T(0)) continue;
            const std::size_t koff =
                static_cast<std::size_t>((*ids)[ibase + s]) * c + h * dh;
            for (int d = 0; d < dh; ++d) {
              if (need_q) qd->grad[qoff + d] += dlogit * kd->value[koff + d];
              if (need_k) kd->grad[koff + d] += dlogit * qd->value[qoff + d];
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace spx
