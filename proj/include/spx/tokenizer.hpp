#pragma once

#include <string>
#include <utility>
#include <vector>

#include "spx/ops.hpp"

// Superpixel tokenization: repeated local dual-path cross-attention between
// a learned superpixel query grid and the hypercolumn pixel features. Each
// pixel sees its 3x3 superpixel neighborhood (9 slots); each superpixel
// sees the pixels of the same 3x3 window (9*h*w slots). Border
// neighborhoods are truncated via validity masks.

namespace spx {

struct GridConfig {
  int gh = 4, gw = 4;       // superpixel grid extents
  int n_layers = 2;
  int n_heads = 2;
  int c_model = 256;
  bool pos_every_layer = true;  // re-add position embeddings to q/k inputs
  bool logit_scaling = true;    // 1/sqrt(head dim); off = equation-literal
  bool pre_norm = false;

  void validate() const {
    check_cfg(gh >= 1 && gw >= 1, "grid_h/grid_w must be >= 1");
    check_cfg(n_layers >= 1, "tok_layers must be >= 1");
    check_cfg(n_heads >= 1, "tok_heads must be >= 1");
    check_cfg(c_model % n_heads == 0,
              "channels " + std::to_string(c_model) +
                  " must be divisible by tok_heads " + std::to_string(n_heads));
  }
};

enum class BorderMode {
  truncate,  // offsets leaving the grid are masked invalid
  periodic   // wrap-around; used by translation-consistency tests
};

struct NeighborhoodIndex {
  int feat_h = 0, feat_w = 0;  // pixel extents at the feature stride
  int gh = 0, gw = 0;          // superpixel grid extents
  int h = 0, w = 0;            // pixels per superpixel patch

  // pixel side: 9 slots, row-major over (di,dj) in {-1,0,1}^2
  std::vector<int> pixel_to_sp;
  std::vector<std::uint8_t> pixel_valid;
  // superpixel side: slot ((di+1)*3+(dj+1))*h*w + r*w + c
  std::vector<int> sp_to_pixel;
  std::vector<std::uint8_t> sp_valid;

  int pixels() const { return feat_h * feat_w; }
  int superpixels() const { return gh * gw; }
  static constexpr int pixel_slots() { return 9; }
  int sp_slots() const { return 9 * h * w; }
};

inline NeighborhoodIndex build_neighborhood_index(
    int feat_h, int feat_w, const GridConfig& cfg,
    BorderMode mode = BorderMode::truncate) {
  cfg.validate();
  check_cfg(feat_h % cfg.gh == 0,
            "feature height " + std::to_string(feat_h) +
                " not divisible by grid_h " + std::to_string(cfg.gh));
  check_cfg(feat_w % cfg.gw == 0,
            "feature width " + std::to_string(feat_w) +
                " not divisible by grid_w " + std::to_string(cfg.gw));
  NeighborhoodIndex idx;
  idx.feat_h = feat_h;
  idx.feat_w = feat_w;
  idx.gh = cfg.gh;
  idx.gw = cfg.gw;
  idx.h = feat_h / cfg.gh;
  idx.w = feat_w / cfg.gw;

  const bool wrap = mode == BorderMode::periodic;
  auto wrap_cell = [](int c, int n) { return ((c % n) + n) % n; };

  const int pixels = idx.pixels();
  idx.pixel_to_sp.assign(static_cast<std::size_t>(pixels) * 9, 0);
  idx.pixel_valid.assign(static_cast<std::size_t>(pixels) * 9, 0);
  for (int y = 0; y < feat_h; ++y) {
    for (int x = 0; x < feat_w; ++x) {
      const int p = y * feat_w + x;
      const int ci = y / idx.h, cj = x / idx.w;
      for (int di = -1; di <= 1; ++di) {
        for (int dj = -1; dj <= 1; ++dj) {
          const int slot = (di + 1) * 3 + (dj + 1);
          int ni = ci + di, nj = cj + dj;
          bool ok = true;
          if (wrap) {
            ni = wrap_cell(ni, cfg.gh);
            nj = wrap_cell(nj, cfg.gw);
          } else {
            ok = ni >= 0 && ni < cfg.gh && nj >= 0 && nj < cfg.gw;
          }
          if (ok) {
            idx.pixel_to_sp[static_cast<std::size_t>(p) * 9 + slot] =
                ni * cfg.gw + nj;
            idx.pixel_valid[static_cast<std::size_t>(p) * 9 + slot] = 1;
          }
        }
      }
    }
  }

  const int sp_slots = idx.sp_slots();
  const int supers = idx.superpixels();
  idx.sp_to_pixel.assign(static_cast<std::size_t>(supers) * sp_slots, 0);
  idx.sp_valid.assign(static_cast<std::size_t>(supers) * sp_slots, 0);
  for (int ci = 0; ci < cfg.gh; ++ci) {
    for (int cj = 0; cj < cfg.gw; ++cj) {
      const int i = ci * cfg.gw + cj;
      const std::size_t base = static_cast<std::size_t>(i) * sp_slots;
      for (int di = -1; di <= 1; ++di) {
        for (int dj = -1; dj <= 1; ++dj) {
          const int slot9 = (di + 1) * 3 + (dj + 1);
          int ni = ci + di, nj = cj + dj;
          bool ok = true;
          if (wrap) {
            ni = wrap_cell(ni, cfg.gh);
            nj = wrap_cell(nj, cfg.gw);
          } else {
            ok = ni >= 0 && ni < cfg.gh && nj >= 0 && nj < cfg.gw;
          }
          if (!ok) continue;
          for (int r = 0; r < idx.h; ++r) {
            for (int c = 0; c < idx.w; ++c) {
              const int py = ni * idx.h + r;
              const int px = nj * idx.w + c;
              const int slot = slot9 * idx.h * idx.w + r * idx.w + c;
              idx.sp_to_pixel[base + slot] = py * feat_w + px;
              idx.sp_valid[base + slot] = 1;
            }
          }
        }
      }
    }
  }
  return idx;
}

template <typename T>
struct TokenizerLayerParams {
  // S path: queries from superpixels, keys/values from pixels
  Tensor<T> s_wq, s_bq, s_wk, s_bk, s_wv, s_bv;
  // I path: queries from pixels, keys/values from superpixels
  Tensor<T> i_wq, i_bq, i_wk, i_bk, i_wv, i_bv;
  // pre-norm affine parameters, used only when cfg.pre_norm
  Tensor<T> ln_s_gamma, ln_s_beta, ln_i_gamma, ln_i_beta;
};

template <typename T>
struct TokenizerParams {
  Tensor<T> queries;   // learned S^0, [gh, gw, C]
  Tensor<T> pixel_pe;  // stored at quarter resolution (or full, see below)
  Tensor<T> sp_pe;
  std::vector<TokenizerLayerParams<T>> layers;
};

// Learned position embeddings live at quarter resolution and are bilinearly
// upsampled every forward pass; axes smaller than 4 fall back to full
// resolution so the parameter stays well-defined.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> init_position_embeddings(int feat_h, int feat_w,
                                                         const GridConfig& cfg,
                                                         Pcg32& rng) {
  auto quarter = [](int v) { return v >= 4 ? v / 4 : v; };
  Tensor<T> pixel_pe = Tensor<T>::randn(
      {quarter(feat_h), quarter(feat_w), cfg.c_model}, rng, T(0.02), true);
  Tensor<T> sp_pe = Tensor<T>::randn(
      {quarter(cfg.gh), quarter(cfg.gw), cfg.c_model}, rng, T(0.02), true);
  return {pixel_pe, sp_pe};
}

template <typename T>
TokenizerParams<T> init_tokenizer(int feat_h, int feat_w, const GridConfig& cfg,
                                  Pcg32& rng) {
  cfg.validate();
  TokenizerParams<T> p;
  p.queries =
      Tensor<T>::randn({cfg.gh, cfg.gw, cfg.c_model}, rng, T(0.02), true);
  auto pes = init_position_embeddings<T>(feat_h, feat_w, cfg, rng);
  p.pixel_pe = pes.first;
  p.sp_pe = pes.second;
  const int c = cfg.c_model;
  const T stddev = static_cast<T>(std::sqrt(1.0 / c));
  auto lin = [&] { return Tensor<T>::randn({c, c}, rng, stddev, true); };
  auto bias = [&] { return Tensor<T>::zeros({c}, true); };
  for (int l = 0; l < cfg.n_layers; ++l) {
    TokenizerLayerParams<T> lp;
    lp.s_wq = lin(); lp.s_bq = bias();
    lp.s_wk = lin(); lp.s_bk = bias();
    lp.s_wv = lin(); lp.s_bv = bias();
    lp.i_wq = lin(); lp.i_bq = bias();
    lp.i_wk = lin(); lp.i_bk = bias();
    lp.i_wv = lin(); lp.i_bv = bias();
    lp.ln_s_gamma = Tensor<T>::filled({c}, T(1), true);
    lp.ln_s_beta = Tensor<T>::zeros({c}, true);
    lp.ln_i_gamma = Tensor<T>::filled({c}, T(1), true);
    lp.ln_i_beta = Tensor<T>::zeros({c}, true);
    p.layers.push_back(std::move(lp));
  }
  return p;
}

// Post-softmax attention weights of one layer, for inspection in tests.
template <typename T>
struct DualPathTrace {
  std::vector<T> s_weights;  // [G, heads, 9hw]
  std::vector<T> i_weights;  // [P, heads, 9]
};

// One local dual-path cross-attention layer over token matrices S [G,C] and
// I [P,C]. Residual updates on both paths; both paths read the incoming
// (t-1) state. pe_s / pe_i are the upsampled position embeddings, re-added
// to q/k inputs when cfg.pos_every_layer.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> dual_path_layer(
    const Tensor<T>& S, const Tensor<T>& I, const NeighborhoodIndex& idx,
    const TokenizerLayerParams<T>& lp, const GridConfig& cfg,
    const Tensor<T>& pe_s = Tensor<T>(), const Tensor<T>& pe_i = Tensor<T>(),
    DualPathTrace<T>* trace = nullptr) {
  check(S.rank() == 2 && S.dim(0) == idx.superpixels() && S.dim(1) == cfg.c_model,
        "dual_path_layer: S must be [Gh*Gw, C]");
  check(I.rank() == 2 && I.dim(0) == idx.pixels() && I.dim(1) == cfg.c_model,
        "dual_path_layer: I must be [H*W, C]");
  const T scale =
      cfg.logit_scaling
          ? static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.c_model) /
                                           cfg.n_heads))
          : T(1);

  Tensor<T> s_base = cfg.pre_norm ? layer_norm(S, lp.ln_s_gamma, lp.ln_s_beta) : S;
  Tensor<T> i_base = cfg.pre_norm ? layer_norm(I, lp.ln_i_gamma, lp.ln_i_beta) : I;
  const bool reuse_pe = cfg.pos_every_layer && pe_s.defined() && pe_i.defined();
  Tensor<T> s_qk = reuse_pe ? add(s_base, pe_s) : s_base;
  Tensor<T> i_qk = reuse_pe ? add(i_base, pe_i) : i_base;

  // S path: superpixels query their 9hw neighbor pixels
  Tensor<T> q_s = linear(s_qk, lp.s_wq, lp.s_bq);
  Tensor<T> k_i = linear(i_qk, lp.s_wk, lp.s_bk);
  Tensor<T> v_i = linear(i_base, lp.s_wv, lp.s_bv);
  Tensor<T> s_upd = neighbor_attention(
      q_s, k_i, v_i, idx.sp_to_pixel, idx.sp_valid, idx.sp_slots(),
      cfg.n_heads, scale, trace ? &trace->s_weights : nullptr);

  // I path: pixels query their 9 neighbor superpixels
  Tensor<T> q_i = linear(i_qk, lp.i_wq, lp.i_bq);
  Tensor<T> k_s = linear(s_qk, lp.i_wk, lp.i_bk);
  Tensor<T> v_s = linear(s_base, lp.i_wv, lp.i_bv);
  Tensor<T> i_upd = neighbor_attention(
      q_i, k_s, v_s, idx.pixel_to_sp, idx.pixel_valid,
      NeighborhoodIndex::pixel_slots(), cfg.n_heads, scale,
      trace ? &trace->i_weights : nullptr);

  return {add(S, s_upd), add(I, i_upd)};
}

template <typename T>
struct TokenizerOutput {
  Tensor<T> S;  // [Gh*Gw, C] final superpixel features
  Tensor<T> I;  // [H*W, C] final pixel features
};

// Runs n_layers of dual-path cross-attention starting from the learned
// queries plus position embeddings.
template <typename T>
TokenizerOutput<T> tokenize(const Tensor<T>& hypercolumn,
                            const TokenizerParams<T>& params,
                            const GridConfig& cfg, const NeighborhoodIndex& idx,
                            std::vector<DualPathTrace<T>>* traces = nullptr) {
  check(hypercolumn.rank() == 3 && hypercolumn.dim(2) == cfg.c_model,
        "tokenize: hypercolumn must be [H,W,C]");
  check(hypercolumn.dim(0) == idx.feat_h && hypercolumn.dim(1) == idx.feat_w,
        "tokenize: hypercolumn dims do not match the neighborhood index");
  check(static_cast<int>(params.layers.size()) == cfg.n_layers,
        "tokenize: layer parameter count mismatch");

  Tensor<T> pe_i =
      bilinear_resize(params.pixel_pe, idx.feat_h, idx.feat_w);
  pe_i = reshape(pe_i, {idx.pixels(), cfg.c_model});
  Tensor<T> pe_s = bilinear_resize(params.sp_pe, cfg.gh, cfg.gw);
  pe_s = reshape(pe_s, {idx.superpixels(), cfg.c_model});

  Tensor<T> I = add(reshape(hypercolumn, {idx.pixels(), cfg.c_model}), pe_i);
  Tensor<T> S = add(reshape(params.queries, {idx.superpixels(), cfg.c_model}),
                    pe_s);
  for (int l = 0; l < cfg.n_layers; ++l) {
    DualPathTrace<T>* tr = nullptr;
    if (traces) {
      traces->emplace_back();
      tr = &traces->back();
    }
    auto next = dual_path_layer(S, I, idx, params.layers[static_cast<std::size_t>(l)],
                                cfg, pe_s, pe_i, tr);
    S = next.first;
    I = next.second;
  }
  return {S, I};
}

}  // namespace spx
