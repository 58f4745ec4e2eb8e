#pragma once

#include <queue>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "spx/image.hpp"
#include "spx/tokenizer.hpp"

// Superpixel association: per-pixel 9-slot soft assignments from dot
// products of tokenizer outputs, bilinear upsampling of the association
// logits to the output resolution, unfolding of superpixel class logits to
// dense per-pixel logits, and the hard-assignment visualization.

namespace spx {

template <typename T>
struct AssociationMap {
  Tensor<T> weights;       // [H, W, 9], valid slots sum to 1, invalid exact 0
  NeighborhoodIndex index; // pixel-side index at the same resolution
};

namespace detail {

// Slot k is valid for pixels whose grid cell keeps cell+offset inside the
// grid, so the valid region of one slot channel is a rectangle of cells.
struct SlotRect {
  bool empty;
  int r0, r1, c0, c1;  // inclusive pixel bounds at the channel's resolution
};

inline SlotRect slot_valid_rect(int slot, const NeighborhoodIndex& idx) {
  const int di = slot / 3 - 1, dj = slot % 3 - 1;
  const int ci_lo = std::max(0, -di), ci_hi = std::min(idx.gh - 1, idx.gh - 1 - di);
  const int cj_lo = std::max(0, -dj), cj_hi = std::min(idx.gw - 1, idx.gw - 1 - dj);
  if (ci_lo > ci_hi || cj_lo > cj_hi) return {true, 0, 0, 0, 0};
  return {false, ci_lo * idx.h, (ci_hi + 1) * idx.h - 1, cj_lo * idx.w,
          (cj_hi + 1) * idx.w - 1};
}

template <typename T>
Tensor<T> validity_mask(const NeighborhoodIndex& idx) {
  Tensor<T> mask = Tensor<T>::zeros({idx.feat_h, idx.feat_w, 9});
  for (std::size_t i = 0; i < idx.pixel_valid.size(); ++i)
    mask.data()[i] = idx.pixel_valid[i] ? T(1) : T(0);
  return mask;
}

}  // namespace detail

// Logit for slot k of pixel p is the dot product I_p . S_i(p,k); invalid
// slots carry the mask sentinel. Returns [H, W, 9] at the index resolution.
template <typename T>
Tensor<T> association_logits(const Tensor<T>& I_final, const Tensor<T>& S_final,
                             const NeighborhoodIndex& idx) {
  const int c = I_final.dim(1);
  check(I_final.rank() == 2 && I_final.dim(0) == idx.pixels(),
        "association_logits: I must be [H*W, C] matching the index");
  check(S_final.rank() == 2 && S_final.dim(0) == idx.superpixels() &&
            S_final.dim(1) == c,
        "association_logits: S must be [Gh*Gw, C]");
  std::vector<Tensor<T>> dots;
  std::vector<int> ids(static_cast<std::size_t>(idx.pixels()));
  for (int k = 0; k < 9; ++k) {
    for (int p = 0; p < idx.pixels(); ++p) {
      const std::size_t at = static_cast<std::size_t>(p) * 9 + k;
      ids[static_cast<std::size_t>(p)] =
          idx.pixel_valid[at] ? idx.pixel_to_sp[at] : 0;
    }
    dots.push_back(rowsum(mul(I_final, gather_rows(S_final, ids))));
  }
  Tensor<T> logits = stack_cols(dots);  // [P, 9]
  // sentinel for invalid slots; the mask is a constant, so no gradient leaks
  Tensor<T> mask = Tensor<T>::zeros({idx.pixels(), 9});
  Tensor<T> sentinel = Tensor<T>::zeros({idx.pixels(), 9});
  for (std::size_t i = 0; i < idx.pixel_valid.size(); ++i) {
    mask.data()[i] = idx.pixel_valid[i] ? T(1) : T(0);
    sentinel.data()[i] = idx.pixel_valid[i] ? T(0) : detail::mask_sentinel<T>();
  }
  logits = add(mul(logits, mask), sentinel);
  return reshape(logits, {idx.feat_h, idx.feat_w, 9});
}

// Bilinear-upsamples each slot channel of the stride-8 association logits
// to the output resolution (interpolating logits, not weights), then applies
// the masked softmax at full resolution. Sources for each slot channel are
// clamped to the slot's valid rectangle so the border sentinel never bleeds
// into valid positions. Target dims must be an integer multiple of the logit
// dims (the model pipeline uses x8, scale 1 is the identity test mode).
template <typename T>
AssociationMap<T> upsample_associate(const Tensor<T>& logits, int out_h,
                                     int out_w, const NeighborhoodIndex& idx) {
  check(logits.rank() == 3 && logits.dim(2) == 9,
        "upsample_associate: logits must be [h, w, 9]");
  const int sh = logits.dim(0), sw = logits.dim(1);
  check(idx.feat_h == sh && idx.feat_w == sw,
        "upsample_associate: index resolution does not match the logits");
  check(out_h >= sh && out_w >= sw && out_h % sh == 0 && out_w % sw == 0,
        "upsample_associate: target dims " + std::to_string(out_h) + "x" +
            std::to_string(out_w) + " must be an integer multiple of " +
            std::to_string(sh) + "x" + std::to_string(sw));

  GridConfig cfg;
  cfg.gh = idx.gh;
  cfg.gw = idx.gw;
  cfg.c_model = 1;
  cfg.n_heads = 1;
  NeighborhoodIndex full = build_neighborhood_index(out_h, out_w, cfg);

  std::vector<Tensor<T>> channels;
  for (int k = 0; k < 9; ++k) {
    Tensor<T> ch = slice_last(logits, k, 1);  // [sh, sw, 1]
    auto rect = detail::slot_valid_rect(k, idx);
    if (rect.empty) {
      channels.push_back(
          Tensor<T>::filled({out_h, out_w, 1}, detail::mask_sentinel<T>()));
    } else {
      channels.push_back(bilinear_resize_window(ch, out_h, out_w, rect.r0,
                                                rect.r1, rect.c0, rect.c1));
    }
  }
  Tensor<T> up = concat_last(channels);  // [out_h, out_w, 9]
  AssociationMap<T> assoc;
  assoc.weights = softmax(up, 2, detail::validity_mask<T>(full));
  assoc.index = std::move(full);
  return assoc;
}

template <typename T>
struct DensePrediction {
  Tensor<T> logits;  // [H, W, n_classes] unfolded Y_p
  IdMap labels;      // argmax_c Y_p, ties to the lowest class id
};

// Y_p = sum over valid slots of Q_p[k] * C_{i(p,k)}.
template <typename T>
DensePrediction<T> unfold(const AssociationMap<T>& assoc,
                          const Tensor<T>& class_logits) {
  const NeighborhoodIndex& idx = assoc.index;
  check(class_logits.rank() == 2 && class_logits.dim(0) == idx.superpixels(),
        "unfold: class logits must be [Gh*Gw, n_classes]");
  const int ncls = class_logits.dim(1);
  Tensor<T> qflat = reshape(assoc.weights, {idx.pixels(), 9});
  Tensor<T> acc;
  std::vector<int> ids(static_cast<std::size_t>(idx.pixels()));
  for (int k = 0; k < 9; ++k) {
    for (int p = 0; p < idx.pixels(); ++p) {
      const std::size_t at = static_cast<std::size_t>(p) * 9 + k;
      ids[static_cast<std::size_t>(p)] =
          idx.pixel_valid[at] ? idx.pixel_to_sp[at] : 0;
    }
    Tensor<T> term =
        mul_colvec(gather_rows(class_logits, ids), slice_last(qflat, k, 1));
    acc = acc.defined() ? add(acc, term) : term;
  }
  DensePrediction<T> pred;
  pred.logits = reshape(acc, {idx.feat_h, idx.feat_w, ncls});
  pred.labels.h = idx.feat_h;
  pred.labels.w = idx.feat_w;
  pred.labels.ids.resize(static_cast<std::size_t>(idx.pixels()));
  for (int p = 0; p < idx.pixels(); ++p) {
    const std::size_t base = static_cast<std::size_t>(p) * ncls;
    int best = 0;
    for (int c = 1; c < ncls; ++c)
      if (pred.logits.data()[base + c] > pred.logits.data()[base + best])
        best = c;
    pred.labels.ids[static_cast<std::size_t>(p)] = best;
  }
  return pred;
}

// Hard assignment: argmax of the soft association over valid slots, ties to
// the lowest slot index.
template <typename T>
IdMap hard_assign(const AssociationMap<T>& assoc) {
  const NeighborhoodIndex& idx = assoc.index;
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
      const T v = assoc.weights.data()[at];
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

// Boundary pixels: any 4-neighbor with a different id.
inline std::vector<std::uint8_t> boundary_mask(const IdMap& map) {
  std::vector<std::uint8_t> mask(map.ids.size(), 0);
  for (int y = 0; y < map.h; ++y)
    for (int x = 0; x < map.w; ++x) {
      const int id = map.at(y, x);
      const bool edge = (y > 0 && map.at(y - 1, x) != id) ||
                        (y + 1 < map.h && map.at(y + 1, x) != id) ||
                        (x > 0 && map.at(y, x - 1) != id) ||
                        (x + 1 < map.w && map.at(y, x + 1) != id);
      if (edge) mask[static_cast<std::size_t>(y) * map.w + x] = 1;
    }
  return mask;
}

template <typename T>
Tensor<T> draw_boundaries(const Tensor<T>& image, const IdMap& map,
                          Rgb color = {255, 40, 40}) {
  check(image.rank() == 3 && image.dim(0) == map.h && image.dim(1) == map.w,
        "draw_boundaries: image dims must match the id map");
  Tensor<T> out = Tensor<T>::from(image.shape(), image.data());
  auto mask = boundary_mask(map);
  for (int y = 0; y < map.h; ++y)
    for (int x = 0; x < map.w; ++x)
      if (mask[static_cast<std::size_t>(y) * map.w + x]) {
        out.at(y, x, 0) = static_cast<T>(color.r) / T(255);
        out.at(y, x, 1) = static_cast<T>(color.g) / T(255);
        out.at(y, x, 2) = static_cast<T>(color.b) / T(255);
      }
  return out;
}

// Boundary overlay written as binary P6.
template <typename T>
void render_overlay(const std::string& path, const Tensor<T>& image,
                    const IdMap& map, Rgb color = {255, 40, 40}) {
  write_ppm(path, draw_boundaries(image, map, color));
}

// Semantic label rendering through the palette, written as binary P6.
inline void render_labels(const std::string& path, const IdMap& labels,
                          const std::vector<Rgb>& palette) {
  Tensor<float> img = Tensor<float>::zeros({labels.h, labels.w, 3});
  for (int y = 0; y < labels.h; ++y)
    for (int x = 0; x < labels.w; ++x) {
      const Rgb c = palette[static_cast<std::size_t>(labels.at(y, x)) %
                            palette.size()];
      img.at(y, x, 0) = static_cast<float>(c.r) / 255.0f;
      img.at(y, x, 1) = static_cast<float>(c.g) / 255.0f;
      img.at(y, x, 2) = static_cast<float>(c.b) / 255.0f;
    }
  write_ppm(path, img);
}

// Fraction of distinct ids whose pixel set is 4-connected (one component).
inline double connected_fraction(const IdMap& map) {
  std::unordered_map<int, int> total;
  for (int id : map.ids) ++total[id];
  if (total.empty()) return 1.0;
  std::unordered_set<int> done;
  std::vector<std::uint8_t> visited(map.ids.size(), 0);
  int connected = 0;
  for (std::size_t start = 0; start < map.ids.size(); ++start) {
    const int id = map.ids[start];
    if (done.count(id)) continue;
    done.insert(id);
    std::fill(visited.begin(), visited.end(), 0);
    std::queue<int> frontier;
    frontier.push(static_cast<int>(start));
    visited[start] = 1;
    int reached = 0;
    while (!frontier.empty()) {
      const int p = frontier.front();
      frontier.pop();
      ++reached;
      const int y = p / map.w, x = p % map.w;
      const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
      for (int d = 0; d < 4; ++d) {
        const int ny = y + dy[d], nx = x + dx[d];
        if (ny < 0 || ny >= map.h || nx < 0 || nx >= map.w) continue;
        const std::size_t np = static_cast<std::size_t>(ny) * map.w + nx;
        if (visited[np] || map.ids[np] != id) continue;
        visited[np] = 1;
        frontier.push(static_cast<int>(np));
      }
    }
    if (reached == total[id]) ++connected;
  }
  return static_cast<double>(connected) / static_cast<double>(total.size());
}

}  // namespace spx
