#pragma once

#include <array>
#include <string>
#include <vector>

#include "spx/ops.hpp"

// Stand-in convolutional encoder: five stride-2 conv blocks (conv ->
// layernorm -> GELU) with channels doubling per block, tapped after blocks
// 1, 3 and 5 for strides 2, 8, 32. Each stage is projected pointwise to the
// model width, resized to stride 8 and summed into hypercolumn features.

namespace spx {

struct BackboneConfig {
  int width = 16;     // channels of block 1; doubles per block
  int c_model = 256;  // hypercolumn channels
  static constexpr int kBlocks = 5;

  int block_channels(int i) const { return width << i; }
};

template <typename T>
struct ConvBlockParams {
  Tensor<T> w, b, ln_gamma, ln_beta;
};

template <typename T>
struct BackboneParams {
  std::vector<ConvBlockParams<T>> blocks;      // kBlocks entries
  std::array<Tensor<T>, 3> proj_w, proj_b;     // per-stage hypercolumn MLP
};

template <typename T>
struct EncoderFeatures {
  Tensor<T> s2, s8, s32;  // strides 2, 8, 32 relative to the input
};

template <typename T>
BackboneParams<T> init_backbone(const BackboneConfig& cfg, Pcg32& rng) {
  BackboneParams<T> p;
  int cin = 3;
  for (int i = 0; i < BackboneConfig::kBlocks; ++i) {
    const int cout = cfg.block_channels(i);
    ConvBlockParams<T> blk;
    // fan-in scaled init for the 3x3 kernels
    const T stddev = static_cast<T>(std::sqrt(2.0 / (9.0 * cin)));
    blk.w = Tensor<T>::randn({3, 3, cin, cout}, rng, stddev, true);
    blk.b = Tensor<T>::zeros({cout}, true);
    blk.ln_gamma = Tensor<T>::filled({cout}, T(1), true);
    blk.ln_beta = Tensor<T>::zeros({cout}, true);
    p.blocks.push_back(std::move(blk));
    cin = cout;
  }
  const int stage_c[3] = {cfg.block_channels(0), cfg.block_channels(2),
                          cfg.block_channels(4)};
  for (int s = 0; s < 3; ++s) {
    const T stddev = static_cast<T>(std::sqrt(1.0 / stage_c[s]));
    p.proj_w[s] = Tensor<T>::randn({stage_c[s], cfg.c_model}, rng, stddev, true);
    p.proj_b[s] = Tensor<T>::zeros({cfg.c_model}, true);
  }
  return p;
}

template <typename T>
EncoderFeatures<T> encode(const Tensor<T>& image, const BackboneParams<T>& p) {
  check(image.rank() == 3 && image.dim(2) == 3, "encode: image must be [H,W,3]");
  const int h = image.dim(0), w = image.dim(1);
  check_cfg(h % 32 == 0 && h >= 32,
            "encode: image height " + std::to_string(h) +
                " must be a positive multiple of 32");
  check_cfg(w % 32 == 0 && w >= 32,
            "encode: image width " + std::to_string(w) +
                " must be a positive multiple of 32");
  EncoderFeatures<T> feats;
  Tensor<T> x = image;
  for (int i = 0; i < BackboneConfig::kBlocks; ++i) {
    const auto& blk = p.blocks[static_cast<std::size_t>(i)];
    x = conv2d(x, blk.w, blk.b, 2, 1);
    x = layer_norm(x, blk.ln_gamma, blk.ln_beta);
    x = gelu(x);
    if (i == 0) feats.s2 = x;
    if (i == 2) feats.s8 = x;
    if (i == 4) feats.s32 = x;
  }
  return feats;
}

namespace detail {

template <typename T>
Tensor<T> project_stage(const Tensor<T>& stage, const Tensor<T>& w,
                        const Tensor<T>& b, int out_h, int out_w) {
  const int h = stage.dim(0), wd = stage.dim(1), c = stage.dim(2);
  Tensor<T> flat = reshape(stage, {h * wd, c});
  Tensor<T> proj = linear(flat, w, b);
  proj = reshape(proj, {h, wd, static_cast<int>(w.dim(1))});
  return bilinear_resize(proj, out_h, out_w);
}

}  // namespace detail

// Per-stage pointwise MLP to c_model channels, bilinear resize to stride 8,
// additive fusion. `enabled` lets tests isolate single branches.
template <typename T>
Tensor<T> build_hypercolumn(const EncoderFeatures<T>& feats,
                            const BackboneParams<T>& p,
                            std::array<bool, 3> enabled = {true, true, true}) {
  for (int s = 0; s < 3; ++s) {
    const Tensor<T>& stage = s == 0 ? feats.s2 : (s == 1 ? feats.s8 : feats.s32);
    check_cfg(stage.dim(2) == p.proj_w[static_cast<std::size_t>(s)].dim(0),
              "build_hypercolumn: stage " + std::to_string(s) +
                  " channel count does not match its projection");
  }
  const int out_h = feats.s8.dim(0), out_w = feats.s8.dim(1);
  Tensor<T> acc;
  for (int s = 0; s < 3; ++s) {
    if (!enabled[static_cast<std::size_t>(s)]) continue;
    const Tensor<T>& stage = s == 0 ? feats.s2 : (s == 1 ? feats.s8 : feats.s32);
    Tensor<T> branch = detail::project_stage(
        stage, p.proj_w[static_cast<std::size_t>(s)],
        p.proj_b[static_cast<std::size_t>(s)], out_h, out_w);
    acc = acc.defined() ? add(acc, branch) : branch;
  }
  check(acc.defined(), "build_hypercolumn: all branches disabled");
  return acc;
}

}  // namespace spx
