#pragma once

#include <iostream>
#include <vector>

#include "spx/tokenizer.hpp"

// Differentiable SLIC iterations (soft k-means with exponential similarity
// weights), restricted to the 3x3 superpixel neighborhood of each pixel.
// Serves as the classical baseline and as an oracle for superpixel
// formation.

namespace spx {

template <typename T>
struct SsnState {
  Tensor<T> S;  // [G, C] centers after the last update
  Tensor<T> Q;  // [P, 9] unnormalized soft weights used for that update
  Tensor<T> Z;  // [G, 1] per-superpixel normalizers (sum of Q columns)
};

// Mean feature over the h x w patch owned by each superpixel (the center
// cell only, not the 3x3 window).
template <typename T>
Tensor<T> slic_init(const Tensor<T>& feat, const NeighborhoodIndex& idx) {
  check(feat.rank() == 3 && feat.dim(0) == idx.feat_h && feat.dim(1) == idx.feat_w,
        "slic_init: feature map does not match the index");
  const int c = feat.dim(2);
  Tensor<T> flat = reshape(feat, {idx.pixels(), c});
  // ownership scatter: pixel p belongs to the cell it sits in
  std::vector<int> owner(static_cast<std::size_t>(idx.pixels()));
  for (int y = 0; y < idx.feat_h; ++y)
    for (int x = 0; x < idx.feat_w; ++x)
      owner[static_cast<std::size_t>(y) * idx.feat_w + x] =
          (y / idx.h) * idx.gw + (x / idx.w);
  Tensor<T> sums = scatter_add_rows(flat, owner, idx.superpixels());
  return scale(sums, T(1) / static_cast<T>(idx.h * idx.w));
}

// Appends (row, col) / max(H, W) channels scaled by the compactness weight,
// giving the classical color+position SLIC feature.
template <typename T>
Tensor<T> append_position_channels(const Tensor<T>& feat, T compactness) {
  check(feat.rank() == 3, "append_position_channels: expects [H,W,C]");
  const int h = feat.dim(0), w = feat.dim(1);
  const T denom = static_cast<T>(std::max(h, w));
  Tensor<T> pos = Tensor<T>::zeros({h, w, 2});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      pos.at(y, x, 0) = compactness * static_cast<T>(y) / denom;
      pos.at(y, x, 1) = compactness * static_cast<T>(x) / denom;
    }
  return concat_last(std::vector<Tensor<T>>{feat, pos});
}

// Applies Q_pi = exp(-||I_p - S_i||^2) then S_i = sum_p Q_pi I_p / Z_i for
// `iters` rounds, Q restricted to the 3x3 neighborhood index. Fully
// differentiable; Z is floored at 1e-12 when all weights underflow.
template <typename T>
SsnState<T> ssn_iterate(const Tensor<T>& feat, const Tensor<T>& centers,
                        const NeighborhoodIndex& idx, int iters) {
  check(iters >= 1, "ssn_iterate: iters must be >= 1");
  const int c = feat.dim(2);
  check(centers.rank() == 2 && centers.dim(0) == idx.superpixels() &&
            centers.dim(1) == c,
        "ssn_iterate: centers must be [Gh*Gw, C]");
  Tensor<T> flat = reshape(feat, {idx.pixels(), c});

  // per-slot neighbor ids (invalid slots redirected to 0 and masked)
  std::array<std::vector<int>, 9> slot_ids;
  Tensor<T> mask = Tensor<T>::zeros({idx.pixels(), 9});
  for (int k = 0; k < 9; ++k) {
    slot_ids[static_cast<std::size_t>(k)].resize(
        static_cast<std::size_t>(idx.pixels()));
    for (int p = 0; p < idx.pixels(); ++p) {
      const std::size_t at = static_cast<std::size_t>(p) * 9 + k;
      slot_ids[static_cast<std::size_t>(k)][static_cast<std::size_t>(p)] =
          idx.pixel_valid[at] ? idx.pixel_to_sp[at] : 0;
      mask.data()[at] = idx.pixel_valid[at] ? T(1) : T(0);
    }
  }

  SsnState<T> state;
  state.S = centers;
  for (int it = 0; it < iters; ++it) {
    std::vector<Tensor<T>> dists;
    for (int k = 0; k < 9; ++k) {
      Tensor<T> nbr = gather_rows(state.S, slot_ids[static_cast<std::size_t>(k)]);
      Tensor<T> d = sub(flat, nbr);
      dists.push_back(rowsum(mul(d, d)));
    }
    Tensor<T> q = exp(scale(stack_cols(dists), T(-1)));
    state.Q = mul(q, mask);  // invalid slots exactly 0

    Tensor<T> z;
    Tensor<T> numer;
    for (int k = 0; k < 9; ++k) {
      Tensor<T> qcol = slice_last(state.Q, k, 1);  // [P,1]
      Tensor<T> zk = scatter_add_rows(qcol, slot_ids[static_cast<std::size_t>(k)],
                                      idx.superpixels());
      z = z.defined() ? add(z, zk) : zk;
      Tensor<T> nk =
          scatter_add_rows(mul_colvec(flat, qcol),
                           slot_ids[static_cast<std::size_t>(k)],
                           idx.superpixels());
      numer = numer.defined() ? add(numer, nk) : nk;
    }
    int floored = 0;
    for (T v : z.data())
      if (v < T(1e-12)) ++floored;
    if (floored > 0)
      std::cerr << "ssn_iterate: " << floored
                << " superpixels with underflowed weights, epsilon floor applied\n";
    state.Z = z;
    state.S = mul_colvec(numer, reciprocal(clamp_min(z, T(1e-12))));
  }
  return state;
}

// Argmax over valid slots, ties to the lowest slot index (row-major offset
// order).
template <typename T>
IdMap ssn_hard_labels(const SsnState<T>& state, const NeighborhoodIndex& idx) {
  IdMap map;
  map.h = idx.feat_h;
  map.w = idx.feat_w;
  map.ids.resize(static_cast<std::size_t>(idx.pixels()));
  for (int p = 0; p < idx.pixels(); ++p) {
    int best_slot = -1;
    T best = T(0);
    for (int k = 0; k < 9; ++k) {
      const std::size_t at = static_cast<std::size_t>(p) * 9 + k;
      if (!idx.pixel_valid[at]) continue;
      const T v = state.Q.data()[at];
      if (best_slot < 0 || v > best) {
        best_slot = k;
        best = v;
      }
    }
    map.ids[static_cast<std::size_t>(p)] =
        idx.pixel_to_sp[static_cast<std::size_t>(p) * 9 + best_slot];
  }
  return map;
}

}  // namespace spx
