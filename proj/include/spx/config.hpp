#pragma once

#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "spx/model.hpp"
#include "spx/trainer.hpp"

// Run configuration: key=value text file plus repeatable --set overrides.
// Every key is validated against the schema below; unknown keys are
// rejected with the offending key named.

namespace spx {

struct RunConfig {
  int image_h = 64;
  int image_w = 64;
  int channels = 256;
  int grid_h = 4;
  int grid_w = 4;
  int tok_layers = 2;
  int tok_heads = 2;
  int cls_layers = 4;
  int cls_heads = 4;
  int n_classes = 4;
  int backbone_width = 16;
  bool pos_every_layer = true;
  bool attn_scale = true;
  bool pre_norm = false;
  bool use_ffn = false;
  int ssn_iters = 5;
  double ssn_compactness = 0.5;
  double base_lr = 1e-3;
  int warmup_steps = 100;
  int total_steps = 3000;
  double weight_decay = 0.05;
  double backbone_lr_mult = 0.1;
  double topk_frac = 0.2;
  int batch_size = 4;
  std::uint64_t seed = 7;
  double poly_power = 0.9;
  int eval_interval = 100;
  int checkpoint_interval = 0;

  ModelConfig model_config() const {
    ModelConfig m;
    m.image_h = image_h;
    m.image_w = image_w;
    m.backbone.width = backbone_width;
    m.backbone.c_model = channels;
    m.grid.gh = grid_h;
    m.grid.gw = grid_w;
    m.grid.n_layers = tok_layers;
    m.grid.n_heads = tok_heads;
    m.grid.c_model = channels;
    m.grid.pos_every_layer = pos_every_layer;
    m.grid.logit_scaling = attn_scale;
    m.grid.pre_norm = pre_norm;
    m.cls.n_layers = cls_layers;
    m.cls.n_heads = cls_heads;
    m.cls.c_model = channels;
    m.cls.n_classes = n_classes;
    m.cls.pre_norm = pre_norm;
    m.cls.use_ffn = use_ffn;
    return m;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.base_lr = base_lr;
    t.warmup_steps = warmup_steps;
    t.total_steps = total_steps;
    t.weight_decay = weight_decay;
    t.backbone_lr_mult = backbone_lr_mult;
    t.topk_frac = topk_frac;
    t.batch_size = batch_size;
    t.seed = seed;
    t.poly_power = poly_power;
    t.eval_interval = eval_interval;
    t.checkpoint_interval = checkpoint_interval;
    return t;
  }
};

namespace detail {

inline int parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    int r = std::stoi(v, &used);
    check_cfg(used == v.size(), "");
    return r;
  } catch (...) {
    throw ConfigError("config key '" + key + "': expected integer, got '" + v +
                      "'");
  }
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double r = std::stod(v, &used);
    check_cfg(used == v.size(), "");
    return r;
  } catch (...) {
    throw ConfigError("config key '" + key + "': expected number, got '" + v +
                      "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v +
                    "'");
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    unsigned long long r = std::stoull(v, &used);
    check_cfg(used == v.size(), "");
    return static_cast<std::uint64_t>(r);
  } catch (...) {
    throw ConfigError("config key '" + key +
                      "': expected unsigned integer, got '" + v + "'");
  }
}

}  // namespace detail

inline void apply_config_entry(RunConfig& cfg, const std::string& key,
                               const std::string& value) {
  using Setter = std::function<void(RunConfig&, const std::string&)>;
  static const std::map<std::string, Setter> schema = {
      {"image_h", [](RunConfig& c, const std::string& v) { c.image_h = detail::parse_int("image_h", v); }},
      {"image_w", [](RunConfig& c, const std::string& v) { c.image_w = detail::parse_int("image_w", v); }},
      {"channels", [](RunConfig& c, const std::string& v) { c.channels = detail::parse_int("channels", v); }},
      {"grid_h", [](RunConfig& c, const std::string& v) { c.grid_h = detail::parse_int("grid_h", v); }},
      {"grid_w", [](RunConfig& c, const std::string& v) { c.grid_w = detail::parse_int("grid_w", v); }},
      {"tok_layers", [](RunConfig& c, const std::string& v) { c.tok_layers = detail::parse_int("tok_layers", v); }},
      {"tok_heads", [](RunConfig& c, const std::string& v) { c.tok_heads = detail::parse_int("tok_heads", v); }},
      {"cls_layers", [](RunConfig& c, const std::string& v) { c.cls_layers = detail::parse_int("cls_layers", v); }},
      {"cls_heads", [](RunConfig& c, const std::string& v) { c.cls_heads = detail::parse_int("cls_heads", v); }},
      {"n_classes", [](RunConfig& c, const std::string& v) { c.n_classes = detail::parse_int("n_classes", v); }},
      {"backbone_width", [](RunConfig& c, const std::string& v) { c.backbone_width = detail::parse_int("backbone_width", v); }},
      {"pos_every_layer", [](RunConfig& c, const std::string& v) { c.pos_every_layer = detail::parse_bool("pos_every_layer", v); }},
      {"attn_scale", [](RunConfig& c, const std::string& v) { c.attn_scale = detail::parse_bool("attn_scale", v); }},
      {"pre_norm", [](RunConfig& c, const std::string& v) { c.pre_norm = detail::parse_bool("pre_norm", v); }},
      {"use_ffn", [](RunConfig& c, const std::string& v) { c.use_ffn = detail::parse_bool("use_ffn", v); }},
      {"ssn_iters", [](RunConfig& c, const std::string& v) { c.ssn_iters = detail::parse_int("ssn_iters", v); }},
      {"ssn_compactness", [](RunConfig& c, const std::string& v) { c.ssn_compactness = detail::parse_double("ssn_compactness", v); }},
      {"base_lr", [](RunConfig& c, const std::string& v) { c.base_lr = detail::parse_double("base_lr", v); }},
      {"warmup_steps", [](RunConfig& c, const std::string& v) { c.warmup_steps = detail::parse_int("warmup_steps", v); }},
      {"total_steps", [](RunConfig& c, const std::string& v) { c.total_steps = detail::parse_int("total_steps", v); }},
      {"weight_decay", [](RunConfig& c, const std::string& v) { c.weight_decay = detail::parse_double("weight_decay", v); }},
      {"backbone_lr_mult", [](RunConfig& c, const std::string& v) { c.backbone_lr_mult = detail::parse_double("backbone_lr_mult", v); }},
      {"topk_frac", [](RunConfig& c, const std::string& v) { c.topk_frac = detail::parse_double("topk_frac", v); }},
      {"batch_size", [](RunConfig& c, const std::string& v) { c.batch_size = detail::parse_int("batch_size", v); }},
      {"seed", [](RunConfig& c, const std::string& v) { c.seed = detail::parse_u64("seed", v); }},
      {"poly_power", [](RunConfig& c, const std::string& v) { c.poly_power = detail::parse_double("poly_power", v); }},
      {"eval_interval", [](RunConfig& c, const std::string& v) { c.eval_interval = detail::parse_int("eval_interval", v); }},
      {"checkpoint_interval", [](RunConfig& c, const std::string& v) { c.checkpoint_interval = detail::parse_int("checkpoint_interval", v); }},
  };
  auto it = schema.find(key);
  if (it == schema.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(cfg, value);
}

// Basic per-key range validation; structural checks (divisibility and
// channel/head compatibility) run in ModelConfig::validate.
inline void validate_run_config(const RunConfig& c) {
  check_cfg(c.channels >= 1, "channels must be >= 1");
  check_cfg(c.grid_h >= 1 && c.grid_w >= 1, "grid_h/grid_w must be >= 1");
  check_cfg(c.tok_layers >= 0, "tok_layers must be >= 0");
  check_cfg(c.cls_layers >= 0, "cls_layers must be >= 0");
  check_cfg(c.tok_heads >= 1 && c.cls_heads >= 1,
            "tok_heads/cls_heads must be >= 1");
  check_cfg(c.backbone_width >= 1, "backbone_width must be >= 1");
  check_cfg(c.n_classes >= 2, "n_classes must be >= 2");
  check_cfg(c.ssn_iters >= 1, "ssn_iters must be >= 1");
  check_cfg(c.ssn_compactness >= 0.0, "ssn_compactness must be >= 0");
  check_cfg(c.total_steps >= 0, "total_steps must be >= 0");
}

inline std::string strip(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline void apply_config_line(RunConfig& cfg, const std::string& raw) {
  std::string line = raw;
  const auto hash = line.find('#');
  if (hash != std::string::npos) line.resize(hash);
  line = strip(line);
  if (line.empty()) return;
  const auto eq = line.find('=');
  check_cfg(eq != std::string::npos,
            "malformed config line '" + line + "' (expected key=value)");
  apply_config_entry(cfg, strip(line.substr(0, eq)), strip(line.substr(eq + 1)));
}

// Loads the optional file then applies --set overrides (key=value each).
inline RunConfig load_run_config(const std::string& path,
                                 const std::vector<std::string>& overrides) {
  RunConfig cfg;
  if (!path.empty()) {
    std::ifstream in(path);
    check_cfg(in.good(), "cannot open config file '" + path + "'");
    std::string line;
    while (std::getline(in, line)) apply_config_line(cfg, line);
  }
  for (const auto& o : overrides) apply_config_line(cfg, o);
  validate_run_config(cfg);
  return cfg;
}

}  // namespace spx
