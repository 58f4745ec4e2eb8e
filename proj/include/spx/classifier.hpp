#pragma once

#include <string>
#include <vector>

#include "spx/ops.hpp"

// Superpixel classification: k residual multi-head self-attention layers
// with global attention over all superpixel tokens, then a linear head.
// No position embeddings; the grid order carries no meaning here, so the
// stage is permutation-equivariant.

namespace spx {

struct ClassifierConfig {
  int n_layers = 4;
  int n_heads = 4;
  int c_model = 256;
  int n_classes = 4;
  bool pre_norm = false;
  bool use_ffn = false;  // optional FFN sublayer, expansion 4

  void validate() const {
    check_cfg(n_layers >= 0, "cls_layers must be >= 0");
    check_cfg(n_heads >= 1, "cls_heads must be >= 1");
    check_cfg(c_model % n_heads == 0,
              "channels " + std::to_string(c_model) +
                  " must be divisible by cls_heads " + std::to_string(n_heads));
    check_cfg(n_classes >= 2, "n_classes must be >= 2");
  }
};

template <typename T>
struct MhsaLayerParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<T> ln_gamma, ln_beta;          // pre-norm affine (optional path)
  Tensor<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  Tensor<T> ln2_gamma, ln2_beta;
};

template <typename T>
struct ClassifierParams {
  std::vector<MhsaLayerParams<T>> layers;
  Tensor<T> head_w, head_b;  // C -> n_classes
};

template <typename T>
ClassifierParams<T> init_classifier(const ClassifierConfig& cfg, Pcg32& rng) {
  cfg.validate();
  ClassifierParams<T> p;
  const int c = cfg.c_model;
  const T stddev = static_cast<T>(std::sqrt(1.0 / c));
  auto lin = [&](int in, int out) {
    return Tensor<T>::randn({in, out}, rng,
                            static_cast<T>(std::sqrt(1.0 / in)), true);
  };
  for (int l = 0; l < cfg.n_layers; ++l) {
    MhsaLayerParams<T> lp;
    lp.wq = Tensor<T>::randn({c, c}, rng, stddev, true);
    lp.bq = Tensor<T>::zeros({c}, true);
    lp.wk = Tensor<T>::randn({c, c}, rng, stddev, true);
    lp.bk = Tensor<T>::zeros({c}, true);
    lp.wv = Tensor<T>::randn({c, c}, rng, stddev, true);
    lp.bv = Tensor<T>::zeros({c}, true);
    lp.wo = Tensor<T>::randn({c, c}, rng, stddev, true);
    lp.bo = Tensor<T>::zeros({c}, true);
    lp.ln_gamma = Tensor<T>::filled({c}, T(1), true);
    lp.ln_beta = Tensor<T>::zeros({c}, true);
    if (cfg.use_ffn) {
      lp.ffn_w1 = lin(c, 4 * c);
      lp.ffn_b1 = Tensor<T>::zeros({4 * c}, true);
      lp.ffn_w2 = lin(4 * c, c);
      lp.ffn_b2 = Tensor<T>::zeros({c}, true);
      lp.ln2_gamma = Tensor<T>::filled({c}, T(1), true);
      lp.ln2_beta = Tensor<T>::zeros({c}, true);
    }
    p.layers.push_back(std::move(lp));
  }
  p.head_w = lin(c, cfg.n_classes);
  p.head_b = Tensor<T>::zeros({cfg.n_classes}, true);
  return p;
}

template <typename T>
struct ClassifierOutput {
  Tensor<T> logits;    // [Gh*Gw, n_classes] raw logits C_i
  Tensor<T> features;  // [Gh*Gw, C] refined features F_i
};

// S is the flattened superpixel token matrix [Gh*Gw, C].
template <typename T>
ClassifierOutput<T> classify(const Tensor<T>& S, const ClassifierParams<T>& p,
                             const ClassifierConfig& cfg,
                             std::vector<std::vector<T>>* attn_weights = nullptr) {
  check(S.rank() == 2 && S.dim(1) == cfg.c_model,
        "classify: S must be [tokens, C]");
  const int tokens = S.dim(0);
  const T scale = static_cast<T>(
      1.0 / std::sqrt(static_cast<double>(cfg.c_model) / cfg.n_heads));

  // dense self-attention expressed as a full neighbor list
  std::vector<int> nbr(static_cast<std::size_t>(tokens) * tokens);
  std::vector<std::uint8_t> valid(nbr.size(), 1);
  for (int i = 0; i < tokens; ++i)
    for (int j = 0; j < tokens; ++j)
      nbr[static_cast<std::size_t>(i) * tokens + j] = j;

  Tensor<T> x = S;
  for (const auto& lp : p.layers) {
    Tensor<T> base = cfg.pre_norm ? layer_norm(x, lp.ln_gamma, lp.ln_beta) : x;
    Tensor<T> q = linear(base, lp.wq, lp.bq);
    Tensor<T> k = linear(base, lp.wk, lp.bk);
    Tensor<T> v = linear(base, lp.wv, lp.bv);
    std::vector<T>* wout = nullptr;
    if (attn_weights) {
      attn_weights->emplace_back();
      wout = &attn_weights->back();
    }
    Tensor<T> attn = neighbor_attention(q, k, v, nbr, valid, tokens,
                                        cfg.n_heads, scale, wout);
    x = add(x, linear(attn, lp.wo, lp.bo));
    if (cfg.use_ffn) {
      Tensor<T> fbase =
          cfg.pre_norm ? layer_norm(x, lp.ln2_gamma, lp.ln2_beta) : x;
      Tensor<T> hidden = gelu(linear(fbase, lp.ffn_w1, lp.ffn_b1));
      x = add(x, linear(hidden, lp.ffn_w2, lp.ffn_b2));
    }
  }
  ClassifierOutput<T> out;
  out.features = x;
  out.logits = linear(x, p.head_w, p.head_b);
  return out;
}

}  // namespace spx
