#pragma once

#include <algorithm>
#include <chrono>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "spx/config.hpp"

// Analytic FLOPs / parameter accounting and per-component wall-time
// benchmarking. FLOPs are 2x multiply-accumulates of the contraction ops
// (convolutions, linear projections, attention logits and value mixing);
// norms, softmax and resampling are excluded, and truncated border
// neighborhoods are counted at the full 9 slots.

namespace spx {

struct CostRow {
  std::string name;
  std::int64_t params = 0;
  double flops = 0.0;
  double time_ms = 0.0;
};

struct CostReport {
  std::vector<CostRow> rows;
  bool has_time = false;
  double overhead_ms = 0.0;  // full forward minus component sum (bench only)
  double spatial_ratio = 0.0;
  double self_attn_quadratic_ratio = 0.0;

  CostRow total() const {
    CostRow t;
    t.name = "Total";
    for (const auto& r : rows) {
      t.params += r.params;
      t.flops += r.flops;
      t.time_ms += r.time_ms;
    }
    return t;
  }

  std::string table() const {
    std::ostringstream os;
    os << std::left << std::setw(28) << "Component" << std::right
       << std::setw(12) << "Params" << std::setw(16) << "FLOPs";
    if (has_time) os << std::setw(12) << "Time (ms)";
    os << "\n";
    auto line = [&](const CostRow& r) {
      os << std::left << std::setw(28) << r.name << std::right << std::setw(12)
         << r.params << std::setw(16) << std::setprecision(6) << r.flops;
      if (has_time)
        os << std::setw(12) << std::fixed << std::setprecision(3) << r.time_ms
           << std::defaultfloat;
      os << "\n";
    };
    for (const auto& r : rows) line(r);
    line(total());
    if (has_time)
      os << "(overhead " << std::fixed << std::setprecision(3) << overhead_ms
         << " ms)\n"
         << std::defaultfloat;
    os << "superpixel spatial ratio: " << std::setprecision(12) << spatial_ratio
       << "\nself-attention quadratic-term ratio: " << self_attn_quadratic_ratio
       << "\n";
    return os.str();
  }

  std::string to_json() const {
    nlohmann::json j;
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rows) {
      nlohmann::json row;
      row["name"] = r.name;
      row["params"] = r.params;
      row["flops"] = r.flops;
      if (has_time) row["time_ms"] = r.time_ms;
      j["rows"].push_back(row);
    }
    CostRow t = total();
    j["total"]["params"] = t.params;
    j["total"]["flops"] = t.flops;
    if (has_time) {
      j["total"]["time_ms"] = t.time_ms;
      j["overhead_ms"] = overhead_ms;
    }
    j["superpixel_spatial_ratio"] = spatial_ratio;
    j["self_attention_quadratic_ratio"] = self_attn_quadratic_ratio;
    return j.dump(2);
  }
};

namespace detail {

inline const char* kComponentNames[5] = {
    "Backbone", "Hypercolumn", "Superpixel Tokenization",
    "Superpixel Self-Attention", "Superpixel Association"};

inline int component_of_param(const std::string& name) {
  if (name.rfind("backbone.", 0) == 0) return 0;
  if (name.rfind("hyper.", 0) == 0) return 1;
  if (name.rfind("tok.", 0) == 0) return 2;
  if (name.rfind("cls.", 0) == 0) return 3;
  return 4;
}

}  // namespace detail

inline CostReport flops_count(const RunConfig& cfg) {
  CostReport rep;
  for (const char* n : detail::kComponentNames) {
    CostRow r;
    r.name = n;
    rep.rows.push_back(r);
  }
  const double h = cfg.image_h, w = cfg.image_w;
  const double c = cfg.channels;
  const double g = static_cast<double>(cfg.grid_h) * cfg.grid_w;
  const double p8 = (h / 8.0) * (w / 8.0);

  // Backbone: five stride-2 3x3 conv blocks, channels doubling.
  double cin = 3;
  for (int i = 0; i < BackboneConfig::kBlocks; ++i) {
    const double cout = static_cast<double>(cfg.backbone_width) * (1 << i);
    const double oh = h / (2 << i), ow = w / (2 << i);
    rep.rows[0].flops += 2.0 * oh * ow * cin * cout * 9.0;
    cin = cout;
  }
  // Hypercolumn: pointwise MLP per tapped stage at native resolution.
  const double stage_dims[3][3] = {
      {h / 2, w / 2, static_cast<double>(cfg.backbone_width)},
      {h / 8, w / 8, static_cast<double>(cfg.backbone_width) * 4},
      {h / 32, w / 32, static_cast<double>(cfg.backbone_width) * 16}};
  for (const auto& s : stage_dims)
    rep.rows[1].flops += 2.0 * s[0] * s[1] * s[2] * c;
  // Tokenization: q/k/v projections on both paths plus the two local
  // attention contractions (logits and values); G*9hw == 9*P8.
  rep.rows[2].flops +=
      cfg.tok_layers * (2.0 * c * c * 3.0 * (g + p8) + 4.0 * (2.0 * 9.0 * p8 * c));
  // Self-attention: dense MHSA over G tokens plus the linear head.
  rep.rows[3].flops +=
      cfg.cls_layers * (4.0 * 2.0 * g * c * c + 2.0 * 2.0 * g * g * c) +
      2.0 * g * c * cfg.n_classes;
  // Association: stride-8 dot products and full-resolution unfolding.
  rep.rows[4].flops += 2.0 * p8 * 9.0 * c + 2.0 * h * w * 9.0 * cfg.n_classes;

  // Parameter counts from the registry (model built at the configured size;
  // tok_layers = 0 configs are analytic-only and carry no tokenizer layers).
  if (cfg.tok_layers >= 1) {
    auto model = Model<float>::init(cfg.model_config(), cfg.seed);
    for (const auto& prm : model.params())
      rep.rows[static_cast<std::size_t>(detail::component_of_param(prm.name))]
          .params += prm.tensor.size();
  }

  rep.spatial_ratio = g / (h * w);
  rep.self_attn_quadratic_ratio = rep.spatial_ratio * rep.spatial_ratio;
  return rep;
}

namespace detail {

// Median wall time of fn over `repeats` runs after `warmups`; the inner
// loop count doubles until one run spans at least 10 timer ticks (and 1us).
inline double median_ms(const std::function<void()>& fn, int repeats,
                        int warmups) {
  using clock = std::chrono::steady_clock;
  static const double tick_ns = [] {
    auto a = clock::now();
    auto b = a;
    while (b == a) b = clock::now();
    return std::max(1.0, std::chrono::duration<double, std::nano>(b - a).count());
  }();
  for (int i = 0; i < warmups; ++i) fn();
  int inner = 1;
  for (;;) {
    auto t0 = clock::now();
    for (int i = 0; i < inner; ++i) fn();
    double ns = std::chrono::duration<double, std::nano>(clock::now() - t0).count();
    if (ns >= std::max(10.0 * tick_ns, 1000.0) || inner > (1 << 20)) break;
    inner *= 2;
  }
  std::vector<double> times(static_cast<std::size_t>(repeats));
  for (auto& t : times) {
    auto t0 = clock::now();
    for (int i = 0; i < inner; ++i) fn();
    t = std::chrono::duration<double, std::milli>(clock::now() - t0).count() /
        inner;
  }
  std::nth_element(times.begin(), times.begin() + times.size() / 2, times.end());
  return times[times.size() / 2];
}

}  // namespace detail

// Per-component median wall times for one forward pass at the configured
// input size; rows mirror the latency table and Total is their exact sum.
// The measured full-pass minus the sum is reported separately as overhead.
inline CostReport benchmark(const RunConfig& cfg, int repeats) {
  check_cfg(repeats >= 1, "bench repeats must be >= 1");
  CostReport rep = flops_count(cfg);
  rep.has_time = true;
  auto model = Model<float>::init(cfg.model_config(), cfg.seed);
  Pcg32 rng(cfg.seed, 7777);
  Tensor<float> image =
      Tensor<float>::rand_uniform({cfg.image_h, cfg.image_w, 3}, rng, 0.0f, 1.0f);

  // stage outputs reused as downstream inputs
  EncoderFeatures<float> feats = encode(image, model.backbone);
  Tensor<float> hyper = build_hypercolumn(feats, model.backbone);
  TokenizerOutput<float> tok =
      tokenize(hyper, model.tokenizer, model.cfg.grid, model.index8);
  ClassifierOutput<float> cls = classify(tok.S, model.classifier, model.cfg.cls);

  const int warmups = 3;
  rep.rows[0].time_ms = detail::median_ms(
      [&] { feats = encode(image, model.backbone); }, repeats, warmups);
  rep.rows[1].time_ms = detail::median_ms(
      [&] { hyper = build_hypercolumn(feats, model.backbone); }, repeats,
      warmups);
  rep.rows[2].time_ms = detail::median_ms(
      [&] {
        tok = tokenize(hyper, model.tokenizer, model.cfg.grid, model.index8);
      },
      repeats, warmups);
  rep.rows[3].time_ms = detail::median_ms(
      [&] { cls = classify(tok.S, model.classifier, model.cfg.cls); }, repeats,
      warmups);
  rep.rows[4].time_ms = detail::median_ms(
      [&] {
        Tensor<float> logits =
            association_logits(tok.I, tok.S, model.index8);
        auto assoc = upsample_associate(logits, cfg.image_h, cfg.image_w,
                                        model.index8);
        unfold(assoc, cls.logits);
      },
      repeats, warmups);

  const double full = detail::median_ms(
      [&] { model.forward(image); }, repeats, warmups);
  rep.overhead_ms = full - rep.total().time_ms;
  return rep;
}

}  // namespace spx
