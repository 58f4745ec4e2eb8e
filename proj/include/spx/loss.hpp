#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "spx/metrics.hpp"
#include "spx/ops.hpp"

namespace spx {

// Softmax cross-entropy over the top `frac` fraction of non-ignored pixels
// of one image, ranked by per-pixel loss (hard-pixel mining). Ties at the
// selection threshold are included in index order. Gradients flow only
// through the selected pixels.
template <typename T>
Tensor<T> topk_cross_entropy(const Tensor<T>& logits,
                             const std::vector<int>& labels, double frac) {
  check(frac > 0.0 && frac <= 1.0, "topk_cross_entropy: frac must be in (0,1]");
  check(logits.rank() >= 2, "topk_cross_entropy: logits must be [..., classes]");
  const int ncls = logits.shape().back();
  const int pixels = static_cast<int>(logits.size() / ncls);
  check(static_cast<int>(labels.size()) == pixels,
        "topk_cross_entropy: label count mismatch");

  Tensor<T> flat = logits.rank() == 2 ? logits : reshape(logits, {pixels, ncls});
  Tensor<T> per_pixel = cross_entropy_softmax(flat, labels, kIgnoreLabel);

  std::vector<int> kept;
  kept.reserve(labels.size());
  for (int i = 0; i < pixels; ++i)
    if (labels[static_cast<std::size_t>(i)] != kIgnoreLabel) kept.push_back(i);
  check(!kept.empty(), "topk_cross_entropy: zero non-ignored pixels");

  const int n = static_cast<int>(kept.size());
  int k = static_cast<int>(std::ceil(frac * n - 1e-9));
  k = std::max(1, std::min(k, n));
  // stable sort by loss descending keeps ties in index order
  std::stable_sort(kept.begin(), kept.end(), [&](int a, int b) {
    return per_pixel.data()[static_cast<std::size_t>(a)] >
           per_pixel.data()[static_cast<std::size_t>(b)];
  });
  kept.resize(static_cast<std::size_t>(k));
  return reduce_mean(gather_rows(per_pixel, kept));
}

// Argmax labels of a dense [H, W, classes] logit map, ties to the lowest
// class id.
template <typename T>
IdMap argmax_labels(const Tensor<T>& logits) {
  check(logits.rank() == 3, "argmax_labels: expects [H,W,classes]");
  const int h = logits.dim(0), w = logits.dim(1), ncls = logits.dim(2);
  IdMap map;
  map.h = h;
  map.w = w;
  map.ids.resize(static_cast<std::size_t>(h) * w);
  for (int p = 0; p < h * w; ++p) {
    const std::size_t base = static_cast<std::size_t>(p) * ncls;
    int best = 0;
    for (int c = 1; c < ncls; ++c)
      if (logits.data()[base + c] > logits.data()[base + best]) best = c;
    map.ids[static_cast<std::size_t>(p)] = best;
  }
  return map;
}

}  // namespace spx
