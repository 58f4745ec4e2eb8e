#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "spx/image.hpp"
#include "spx/metrics.hpp"
#include "spx/random.hpp"

// Synthetic shapes dataset: colored background plus 1-4 non-overlapping
// rectangles, circles and triangles; the class is the shape type and labels
// are exact. Deterministic per seed (one RNG stream per sample).

namespace spx {

struct DatasetMeta {
  int n_classes = 0;
  int height = 0;
  int width = 0;
  int count = 0;
};

template <typename T>
struct Dataset {
  DatasetMeta meta;
  std::vector<Tensor<T>> images;   // [H,W,3] in [0,1]
  std::vector<LabelMap> labels;    // class ids, 255 = ignore
};

namespace detail {

struct ShapeSpec {
  int type;  // 1 rect, 2 circle, 3 triangle
  int cy, cx, half_h, half_w;
  float r, g, b;
};

inline bool boxes_overlap(const ShapeSpec& a, const ShapeSpec& b) {
  return std::abs(a.cy - b.cy) <= a.half_h + b.half_h + 1 &&
         std::abs(a.cx - b.cx) <= a.half_w + b.half_w + 1;
}

inline bool shape_covers(const ShapeSpec& s, int y, int x) {
  switch (s.type) {
    case 1:
      return std::abs(y - s.cy) <= s.half_h && std::abs(x - s.cx) <= s.half_w;
    case 2: {
      const double dy = y - s.cy, dx = x - s.cx;
      const double r = std::min(s.half_h, s.half_w);
      return dy * dy + dx * dx <= r * r;
    }
    default: {  // apex-up isoceles triangle inside the bbox
      if (y < s.cy - s.half_h || y > s.cy + s.half_h) return false;
      const double t = static_cast<double>(y - (s.cy - s.half_h)) /
                       (2.0 * s.half_h);
      return std::abs(x - s.cx) <= t * s.half_w;
    }
  }
}

}  // namespace detail

// Fixed base colors per shape class; the background is class 0.
inline void shape_base_color(int cls, float& r, float& g, float& b) {
  switch (cls) {
    case 1: r = 0.85f; g = 0.25f; b = 0.20f; break;
    case 2: r = 0.20f; g = 0.80f; b = 0.30f; break;
    default: r = 0.25f; g = 0.35f; b = 0.90f; break;
  }
}

template <typename T>
Dataset<T> generate_shapes_dataset(std::uint64_t seed, int count, int height,
                                   int width, int n_classes) {
  check_cfg(n_classes >= 2, "gen-data: n_classes must be >= 2");
  check_cfg(count >= 0, "gen-data: count must be >= 0");
  check_cfg(height >= 8 && width >= 8, "gen-data: dims must be >= 8");
  Dataset<T> ds;
  ds.meta = {n_classes, height, width, count};
  const int shape_types = std::min(3, n_classes - 1);
  const int min_half = std::max(3, height / 10);
  const int max_half = std::max(min_half + 1, height / 5);

  for (int s = 0; s < count; ++s) {
    Pcg32 rng(seed, 1000 + static_cast<std::uint64_t>(s));
    Tensor<T> img = Tensor<T>::zeros({height, width, 3});
    LabelMap lab;
    lab.h = height;
    lab.w = width;
    lab.ids.assign(static_cast<std::size_t>(height) * width, 0);

    float bg[3];
    for (float& c : bg) c = static_cast<float>(rng.uniform(0.05, 0.40));

    const int want = 1 + static_cast<int>(rng.uniform_int(4));
    std::vector<detail::ShapeSpec> shapes;
    for (int n = 0; n < want; ++n) {
      bool placed = false;
      for (int attempt = 0; attempt < 40 && !placed; ++attempt) {
        detail::ShapeSpec spec;
        spec.type = 1 + static_cast<int>(rng.uniform_int(
                            static_cast<std::uint32_t>(shape_types)));
        spec.half_h = min_half + static_cast<int>(rng.uniform_int(
                                     static_cast<std::uint32_t>(max_half - min_half)));
        spec.half_w = min_half + static_cast<int>(rng.uniform_int(
                                     static_cast<std::uint32_t>(max_half - min_half)));
        if (spec.half_h + 1 >= height / 2 || spec.half_w + 1 >= width / 2)
          continue;
        spec.cy = spec.half_h + 1 +
                  static_cast<int>(rng.uniform_int(static_cast<std::uint32_t>(
                      height - 2 * (spec.half_h + 1))));
        spec.cx = spec.half_w + 1 +
                  static_cast<int>(rng.uniform_int(static_cast<std::uint32_t>(
                      width - 2 * (spec.half_w + 1))));
        bool clash = false;
        for (const auto& other : shapes)
          clash = clash || detail::boxes_overlap(spec, other);
        if (clash) continue;
        float r, g, b;
        shape_base_color(spec.type, r, g, b);
        spec.r = r + static_cast<float>(rng.uniform(-0.08, 0.08));
        spec.g = g + static_cast<float>(rng.uniform(-0.08, 0.08));
        spec.b = b + static_cast<float>(rng.uniform(-0.08, 0.08));
        shapes.push_back(spec);
        placed = true;
      }
      if (!placed) {
        std::cerr << "gen-data: sample " << s << " placed only "
                  << shapes.size() << " of " << want << " shapes\n";
        break;
      }
    }

    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        float px[3] = {bg[0], bg[1], bg[2]};
        for (const auto& spec : shapes) {
          if (!detail::shape_covers(spec, y, x)) continue;
          px[0] = spec.r;
          px[1] = spec.g;
          px[2] = spec.b;
          lab.at(y, x) = spec.type;
        }
        for (int c = 0; c < 3; ++c) {
          double v = px[c] + 0.05 * rng.normal();
          img.at(y, x, c) = static_cast<T>(std::min(std::max(v, 0.0), 1.0));
        }
      }
    }
    ds.images.push_back(std::move(img));
    ds.labels.push_back(std::move(lab));
  }
  return ds;
}

inline std::string sample_image_path(const std::string& dir, int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img_%05d.ppm", i);
  return dir + "/" + buf;
}

inline std::string sample_label_path(const std::string& dir, int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "lbl_%05d.pgm", i);
  return dir + "/" + buf;
}

template <typename T>
void save_dataset(const std::string& dir, const Dataset<T>& ds) {
  std::filesystem::create_directories(dir);
  std::ofstream meta(dir + "/meta.txt");
  check(meta.good(), "save_dataset: cannot write " + dir + "/meta.txt");
  meta << "n_classes " << ds.meta.n_classes << "\n"
       << "height " << ds.meta.height << "\n"
       << "width " << ds.meta.width << "\n"
       << "count " << ds.meta.count << "\n";
  for (int i = 0; i < ds.meta.count; ++i) {
    write_ppm(sample_image_path(dir, i), ds.images[static_cast<std::size_t>(i)]);
    write_pgm(sample_label_path(dir, i), ds.labels[static_cast<std::size_t>(i)]);
  }
}

inline DatasetMeta load_dataset_meta(const std::string& dir) {
  std::ifstream meta(dir + "/meta.txt");
  check(meta.good(), "load_dataset: cannot open " + dir + "/meta.txt");
  DatasetMeta m;
  std::string key;
  while (meta >> key) {
    if (key == "n_classes") meta >> m.n_classes;
    else if (key == "height") meta >> m.height;
    else if (key == "width") meta >> m.width;
    else if (key == "count") meta >> m.count;
    else check(false, "load_dataset: unknown meta key '" + key + "'");
  }
  check(m.n_classes >= 2 && m.height > 0 && m.width > 0 && m.count >= 0,
        "load_dataset: malformed meta.txt in " + dir);
  return m;
}

template <typename T>
Dataset<T> load_dataset(const std::string& dir) {
  Dataset<T> ds;
  ds.meta = load_dataset_meta(dir);
  for (int i = 0; i < ds.meta.count; ++i) {
    ds.images.push_back(read_ppm<T>(sample_image_path(dir, i)));
    ds.labels.push_back(read_pgm(sample_label_path(dir, i)));
  }
  return ds;
}

}  // namespace spx
