#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "spx/tensor.hpp"

// Binary PPM (P6) / PGM (P5) readers and writers, plus the deterministic
// class palette. Images travel as [H,W,3] tensors with values in [0,1];
// label maps as flat uint8 vectors.

namespace spx {

struct LabelMap {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> ids;  // row-major class or superpixel ids

  std::uint8_t at(int y, int x) const {
    return ids[static_cast<std::size_t>(y) * w + x];
  }
};

namespace detail {

inline void skip_pnm_space(std::istream& in) {
  for (;;) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      return;
    }
  }
}

inline int read_pnm_int(std::istream& in, const std::string& path) {
  skip_pnm_space(in);
  int v = -1;
  in >> v;
  check(in.good() && v >= 0, "malformed PNM header in " + path);
  return v;
}

inline std::uint8_t to_byte(float v) {
  float s = v * 255.0f + 0.5f;
  s = std::min(std::max(s, 0.0f), 255.0f);
  return static_cast<std::uint8_t>(s);
}

}  // namespace detail

template <typename T>
inline void write_ppm(const std::string& path, const Tensor<T>& image) {
  check(image.rank() == 3 && image.dim(2) == 3,
        "write_ppm: image must be [H,W,3]");
  std::ofstream out(path, std::ios::binary);
  check(out.good(), "write_ppm: cannot open " + path);
  const int h = image.dim(0), w = image.dim(1);
  out << "P6\n" << w << " " << h << "\n255\n";
  std::vector<std::uint8_t> row(static_cast<std::size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        row[static_cast<std::size_t>(x) * 3 + c] =
            detail::to_byte(static_cast<float>(image.at(y, x, c)));
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size()));
  }
  check(out.good(), "write_ppm: write failed for " + path);
}

template <typename T = float>
inline Tensor<T> read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "read_ppm: cannot open " + path);
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  check(magic == "P6", "read_ppm: " + path + " is not binary P6");
  const int w = detail::read_pnm_int(in, path);
  const int h = detail::read_pnm_int(in, path);
  const int maxv = detail::read_pnm_int(in, path);
  check(maxv == 255, "read_ppm: only maxval 255 supported in " + path);
  in.get();  // single whitespace after header
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(raw.data()),
          static_cast<std::streamsize>(raw.size()));
  check(in.gcount() == static_cast<std::streamsize>(raw.size()),
        "read_ppm: truncated pixel data in " + path);
  Tensor<T> img = Tensor<T>::zeros({h, w, 3});
  for (std::size_t i = 0; i < raw.size(); ++i)
    img.data()[i] = static_cast<T>(raw[i]) / T(255);
  return img;
}

inline void write_pgm(const std::string& path, const LabelMap& map) {
  std::ofstream out(path, std::ios::binary);
  check(out.good(), "write_pgm: cannot open " + path);
  out << "P5\n" << map.w << " " << map.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(map.ids.data()),
            static_cast<std::streamsize>(map.ids.size()));
  check(out.good(), "write_pgm: write failed for " + path);
}

inline LabelMap read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "read_pgm: cannot open " + path);
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  check(magic == "P5", "read_pgm: " + path + " is not binary P5");
  LabelMap map;
  map.w = detail::read_pnm_int(in, path);
  map.h = detail::read_pnm_int(in, path);
  const int maxv = detail::read_pnm_int(in, path);
  check(maxv == 255, "read_pgm: only maxval 255 supported in " + path);
  in.get();
  map.ids.resize(static_cast<std::size_t>(map.w) * map.h);
  in.read(reinterpret_cast<char*>(map.ids.data()),
          static_cast<std::streamsize>(map.ids.size()));
  check(in.gcount() == static_cast<std::streamsize>(map.ids.size()),
        "read_pgm: truncated pixel data in " + path);
  return map;
}

struct Rgb {
  std::uint8_t r, g, b;
};

// Deterministic palette: golden-ratio hue walk at full saturation. Entry 0
// is dark gray so the background class stays visually quiet.
inline Rgb palette_color(int class_id) {
  if (class_id == 0) return {64, 64, 64};
  double hue = std::fmod(0.61803398875 * class_id, 1.0) * 6.0;
  int sector = static_cast<int>(hue);
  double f = hue - sector;
  auto q = static_cast<std::uint8_t>(255 * (1.0 - f));
  auto t = static_cast<std::uint8_t>(255 * f);
  switch (sector % 6) {
    case 0: return {255, t, 0};
    case 1: return {q, 255, 0};
    case 2: return {0, 255, t};
    case 3: return {0, q, 255};
    case 4: return {t, 0, 255};
    default: return {255, 0, q};
  }
}

// Palette file: one "class_id R G B" line per class.
inline std::vector<Rgb> load_palette(const std::string& path, int n_classes) {
  std::vector<Rgb> pal(static_cast<std::size_t>(n_classes));
  for (int i = 0; i < n_classes; ++i) pal[i] = palette_color(i);
  std::ifstream in(path);
  check(in.good(), "load_palette: cannot open " + path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    int id, r, g, b;
    check(static_cast<bool>(ls >> id >> r >> g >> b),
          "load_palette: malformed line '" + line + "' in " + path);
    check(id >= 0 && id < n_classes,
          "load_palette: class id out of range in " + path);
    pal[static_cast<std::size_t>(id)] = {static_cast<std::uint8_t>(r),
                                         static_cast<std::uint8_t>(g),
                                         static_cast<std::uint8_t>(b)};
  }
  return pal;
}

template <typename T>
inline Tensor<T> colorize_labels(const LabelMap& map,
                                 const std::vector<Rgb>& palette) {
  Tensor<T> img = Tensor<T>::zeros({map.h, map.w, 3});
  for (int y = 0; y < map.h; ++y)
    for (int x = 0; x < map.w; ++x) {
      const Rgb c = palette[map.at(y, x) % palette.size()];
      img.at(y, x, 0) = static_cast<T>(c.r) / T(255);
      img.at(y, x, 1) = static_cast<T>(c.g) / T(255);
      img.at(y, x, 2) = static_cast<T>(c.b) / T(255);
    }
  return img;
}

}  // namespace spx
