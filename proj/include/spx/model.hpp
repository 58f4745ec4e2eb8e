#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "spx/assoc.hpp"
#include "spx/backbone.hpp"
#include "spx/checkpoint.hpp"
#include "spx/classifier.hpp"
#include "spx/loss.hpp"
#include "spx/optim.hpp"
#include "spx/tokenizer.hpp"

// Full model: encoder -> hypercolumn -> superpixel tokenization -> global
// self-attention classification -> association unfolding to dense logits.

namespace spx {

struct ModelConfig {
  int image_h = 64;
  int image_w = 64;
  BackboneConfig backbone;
  GridConfig grid;
  ClassifierConfig cls;

  int feat_h() const { return image_h / 8; }
  int feat_w() const { return image_w / 8; }

  void validate() const {
    check_cfg(image_h % 32 == 0 && image_h >= 32,
              "image_h " + std::to_string(image_h) +
                  " must be a positive multiple of 32");
    check_cfg(image_w % 32 == 0 && image_w >= 32,
              "image_w " + std::to_string(image_w) +
                  " must be a positive multiple of 32");
    check_cfg(backbone.c_model == grid.c_model && grid.c_model == cls.c_model,
              "channels must agree across backbone, tokenizer and classifier");
    grid.validate();
    cls.validate();
    check_cfg(cls.n_classes <= 254, "n_classes must be <= 254 (255 is ignore)");
    check_cfg(feat_h() % grid.gh == 0,
              "stride-8 height " + std::to_string(feat_h()) +
                  " not divisible by grid_h " + std::to_string(grid.gh));
    check_cfg(feat_w() % grid.gw == 0,
              "stride-8 width " + std::to_string(feat_w()) +
                  " not divisible by grid_w " + std::to_string(grid.gw));
  }
};

template <typename T>
struct ForwardResult {
  TokenizerOutput<T> tok;        // S^{t_n} [G,C], I^{t_n} [P,C]
  ClassifierOutput<T> cls;       // logits C_i, refined features F_i
  AssociationMap<T> assoc;       // full-resolution soft assignment
  DensePrediction<T> pred;       // dense logits Y and hard labels
};

template <typename T>
class Model {
 public:
  ModelConfig cfg;
  BackboneParams<T> backbone;
  TokenizerParams<T> tokenizer;
  ClassifierParams<T> classifier;
  NeighborhoodIndex index8;  // stride-8 neighborhood

  static Model init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    Pcg32 rng(seed, 1);
    m.backbone = init_backbone<T>(cfg.backbone, rng);
    m.tokenizer = init_tokenizer<T>(cfg.feat_h(), cfg.feat_w(), cfg.grid, rng);
    m.classifier = init_classifier<T>(cfg.cls, rng);
    m.index8 = build_neighborhood_index(cfg.feat_h(), cfg.feat_w(), cfg.grid);
    return m;
  }

  ForwardResult<T> forward(const Tensor<T>& image) const {
    check(image.dim(0) == cfg.image_h && image.dim(1) == cfg.image_w,
          "forward: image dims do not match the model config");
    ForwardResult<T> r;
    auto feats = encode(image, backbone);
    Tensor<T> hyper = build_hypercolumn(feats, backbone);
    r.tok = tokenize(hyper, tokenizer, cfg.grid, index8);
    r.cls = classify(r.tok.S, classifier, cfg.cls);
    Tensor<T> logits = association_logits(r.tok.I, r.tok.S, index8);
    r.assoc = upsample_associate(logits, cfg.image_h, cfg.image_w, index8);
    r.pred = unfold(r.assoc, r.cls.logits);
    return r;
  }

  // Dense prediction only (no tape, inference use).
  IdMap predict(const Tensor<T>& image) const {
    return forward(image).pred.labels;
  }

  // Stable name -> tensor registry; registration order is the checkpoint
  // and optimizer-state order.
  ParamRegistry<T> params() {
    ParamRegistry<T> reg;
    auto add = [&reg](const std::string& name, const Tensor<T>& t,
                      bool backbone_group) {
      reg.push_back({name, t, backbone_group});
    };
    for (std::size_t i = 0; i < backbone.blocks.size(); ++i) {
      const std::string base = "backbone.block" + std::to_string(i);
      add(base + ".conv_w", backbone.blocks[i].w, true);
      add(base + ".conv_b", backbone.blocks[i].b, true);
      add(base + ".ln_g", backbone.blocks[i].ln_gamma, true);
      add(base + ".ln_b", backbone.blocks[i].ln_beta, true);
    }
    for (int s = 0; s < 3; ++s) {
      const std::string base = "hyper.stage" + std::to_string(s);
      add(base + ".w", backbone.proj_w[static_cast<std::size_t>(s)], false);
      add(base + ".b", backbone.proj_b[static_cast<std::size_t>(s)], false);
    }
    add("tok.queries", tokenizer.queries, false);
    add("tok.pe_pixel", tokenizer.pixel_pe, false);
    add("tok.pe_sp", tokenizer.sp_pe, false);
    for (std::size_t l = 0; l < tokenizer.layers.size(); ++l) {
      const std::string base = "tok.layer" + std::to_string(l);
      auto& lp = tokenizer.layers[l];
      add(base + ".s_wq", lp.s_wq, false);
      add(base + ".s_bq", lp.s_bq, false);
      add(base + ".s_wk", lp.s_wk, false);
      add(base + ".s_bk", lp.s_bk, false);
      add(base + ".s_wv", lp.s_wv, false);
      add(base + ".s_bv", lp.s_bv, false);
      add(base + ".i_wq", lp.i_wq, false);
      add(base + ".i_bq", lp.i_bq, false);
      add(base + ".i_wk", lp.i_wk, false);
      add(base + ".i_bk", lp.i_bk, false);
      add(base + ".i_wv", lp.i_wv, false);
      add(base + ".i_bv", lp.i_bv, false);
      add(base + ".ln_s_g", lp.ln_s_gamma, false);
      add(base + ".ln_s_b", lp.ln_s_beta, false);
      add(base + ".ln_i_g", lp.ln_i_gamma, false);
      add(base + ".ln_i_b", lp.ln_i_beta, false);
    }
    for (std::size_t l = 0; l < classifier.layers.size(); ++l) {
      const std::string base = "cls.layer" + std::to_string(l);
      auto& lp = classifier.layers[l];
      add(base + ".wq", lp.wq, false);
      add(base + ".bq", lp.bq, false);
      add(base + ".wk", lp.wk, false);
      add(base + ".bk", lp.bk, false);
      add(base + ".wv", lp.wv, false);
      add(base + ".bv", lp.bv, false);
      add(base + ".wo", lp.wo, false);
      add(base + ".bo", lp.bo, false);
      add(base + ".ln_g", lp.ln_gamma, false);
      add(base + ".ln_b", lp.ln_beta, false);
      if (cfg.cls.use_ffn) {
        add(base + ".ffn_w1", lp.ffn_w1, false);
        add(base + ".ffn_b1", lp.ffn_b1, false);
        add(base + ".ffn_w2", lp.ffn_w2, false);
        add(base + ".ffn_b2", lp.ffn_b2, false);
        add(base + ".ln2_g", lp.ln2_gamma, false);
        add(base + ".ln2_b", lp.ln2_beta, false);
      }
    }
    add("cls.head.w", classifier.head_w, false);
    add("cls.head.b", classifier.head_b, false);
    return reg;
  }

  std::int64_t param_count() {
    std::int64_t n = 0;
    for (const auto& p : params()) n += p.tensor.size();
    return n;
  }
};

// Loads parameter records by name; every model parameter must be present.
template <typename T>
void load_params(Model<T>& model, const std::vector<CheckpointRecord>& records) {
  std::unordered_map<std::string, const CheckpointRecord*> by_name;
  for (const auto& r : records) by_name[r.name] = &r;
  for (auto& p : model.params()) {
    auto it = by_name.find(p.name);
    check(it != by_name.end(),
          "checkpoint: missing parameter '" + p.name + "'");
    load_record_into(*it->second, p.tensor);
  }
}

}  // namespace spx
