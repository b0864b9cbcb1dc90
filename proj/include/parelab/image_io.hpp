#pragma once
// Image and mesh export: minimal PNG writer (RGB + palette), ASCII PLY with
// optional vertex colors, CSV tables, color palettes, and the synthetic
// sample renderer (flat part colors over a noise background).

#include <zlib.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "parelab/raster.hpp"
#include "parelab/rng.hpp"

namespace parelab {

using Rgb = std::array<double, 3>;  // components in [0,1]

inline uint8_t quantize8(double v) {
  double c = std::min(1.0, std::max(0.0, v));
  return uint8_t(std::lround(c * 255.0));
}

namespace detail {

inline void put_be32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(uint8_t(v >> 24));
  out.push_back(uint8_t(v >> 16));
  out.push_back(uint8_t(v >> 8));
  out.push_back(uint8_t(v));
}

inline void png_chunk(std::vector<uint8_t>& out, const char type[4],
                      const std::vector<uint8_t>& data) {
  put_be32(out, uint32_t(data.size()));
  size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  uint32_t crc = uint32_t(crc32(0L, out.data() + start, uInt(out.size() - start)));
  put_be32(out, crc);
}

inline std::vector<uint8_t> zlib_deflate(const std::vector<uint8_t>& raw) {
  uLongf bound = compressBound(uLong(raw.size()));
  std::vector<uint8_t> buf(static_cast<size_t>(bound));
  if (compress2(buf.data(), &bound, raw.data(), uLong(raw.size()), 6) != Z_OK)
    throw std::runtime_error("png: zlib compression failed");
  buf.resize(static_cast<size_t>(bound));
  return buf;
}

inline void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          std::streamsize(bytes.size()));
  if (!f) throw std::runtime_error("short write: " + path);
}

// Shared PNG skeleton. color_type 2 = RGB (3 bytes/px), 3 = palette (1 byte/px).
inline void write_png(const std::string& path, int64_t height, int64_t width,
                      int color_type, const std::vector<uint8_t>& pixels,
                      const std::vector<uint8_t>& plte) {
  if (height < 1 || width < 1)
    throw std::invalid_argument("png: image dimensions must be >= 1");
  const size_t bpp = color_type == 2 ? 3 : 1;
  if (pixels.size() != size_t(height * width) * bpp)
    throw std::invalid_argument("png: pixel buffer size mismatch");

  std::vector<uint8_t> raw;
  raw.reserve(size_t(height) * (size_t(width) * bpp + 1));
  for (int64_t y = 0; y < height; ++y) {
    raw.push_back(0);  // filter type: none
    const uint8_t* row = pixels.data() + size_t(y * width) * bpp;
    raw.insert(raw.end(), row, row + size_t(width) * bpp);
  }

  std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  std::vector<uint8_t> ihdr;
  put_be32(ihdr, uint32_t(width));
  put_be32(ihdr, uint32_t(height));
  ihdr.push_back(8);                    // bit depth
  ihdr.push_back(uint8_t(color_type));  // color type
  ihdr.push_back(0);                    // compression
  ihdr.push_back(0);                    // filter
  ihdr.push_back(0);                    // interlace
  png_chunk(out, "IHDR", ihdr);
  if (color_type == 3) png_chunk(out, "PLTE", plte);
  png_chunk(out, "IDAT", zlib_deflate(raw));
  png_chunk(out, "IEND", {});
  write_file(path, out);
}

}  // namespace detail

// RGB image from row-major H*W*3 values in [0,1].
inline void write_png_rgb(const std::string& path, int64_t height, int64_t width,
                          const std::vector<double>& rgb) {
  if (rgb.size() != size_t(height * width * 3))
    throw std::invalid_argument("png: expected H*W*3 values");
  std::vector<uint8_t> px(rgb.size());
  for (size_t i = 0; i < rgb.size(); ++i) px[i] = quantize8(rgb[i]);
  detail::write_png(path, height, width, 2, px, {});
}

// Grayscale convenience: H*W values in [0,1] written as RGB.
inline void write_png_gray(const std::string& path, int64_t height, int64_t width,
                           const std::vector<double>& gray) {
  if (gray.size() != size_t(height * width))
    throw std::invalid_argument("png: expected H*W values");
  std::vector<double> rgb(gray.size() * 3);
  for (size_t i = 0; i < gray.size(); ++i)
    rgb[3 * i] = rgb[3 * i + 1] = rgb[3 * i + 2] = gray[i];
  write_png_rgb(path, height, width, rgb);
}

// Indexed image: labels in [0, palette.size()) rendered through the palette.
inline void write_png_labels(const std::string& path, int64_t height,
                             int64_t width, const std::vector<int>& labels,
                             const std::vector<Rgb>& palette) {
  if (labels.size() != size_t(height * width))
    throw std::invalid_argument("png: expected H*W labels");
  if (palette.empty() || palette.size() > 256)
    throw std::invalid_argument("png: palette must hold 1..256 entries");
  std::vector<uint8_t> plte;
  plte.reserve(palette.size() * 3);
  for (const Rgb& c : palette)
    for (int d = 0; d < 3; ++d) plte.push_back(quantize8(c[size_t(d)]));
  std::vector<uint8_t> px(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) {
    int v = labels[i];
    if (v < 0 || size_t(v) >= palette.size())
      throw std::invalid_argument("png: label outside palette range");
    px[i] = uint8_t(v);
  }
  detail::write_png(path, height, width, 3, px, plte);
}

// ASCII PLY mesh export with optional per-vertex colors. Comment lines are
// embedded in the header (one per entry; newlines are not allowed).
inline void write_ply(const std::string& path,
                      const std::vector<std::array<double, 3>>& vertices,
                      const std::vector<int64_t>& faces,
                      const std::vector<Rgb>& vertex_colors = {},
                      const std::vector<std::string>& comments = {}) {
  if (faces.size() % 3 != 0)
    throw std::invalid_argument("ply: faces must be triples");
  if (!vertex_colors.empty() && vertex_colors.size() != vertices.size())
    throw std::invalid_argument("ply: one color per vertex required");
  for (const std::string& c : comments)
    if (c.find('\n') != std::string::npos)
      throw std::invalid_argument("ply: comments must be single lines");
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  const bool colored = !vertex_colors.empty();
  f << "ply\nformat ascii 1.0\n";
  for (const std::string& c : comments) f << "comment " << c << "\n";
  f << "element vertex " << vertices.size() << "\n";
  f << "property float x\nproperty float y\nproperty float z\n";
  if (colored)
    f << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  f << "element face " << faces.size() / 3 << "\n";
  f << "property list uchar int vertex_indices\nend_header\n";
  char buf[128];
  for (size_t v = 0; v < vertices.size(); ++v) {
    std::snprintf(buf, sizeof buf, "%.9g %.9g %.9g", vertices[v][0],
                  vertices[v][1], vertices[v][2]);
    f << buf;
    if (colored) {
      const Rgb& c = vertex_colors[v];
      f << ' ' << int(quantize8(c[0])) << ' ' << int(quantize8(c[1])) << ' '
        << int(quantize8(c[2]));
    }
    f << '\n';
  }
  for (size_t t = 0; t + 2 < faces.size(); t += 3)
    f << "3 " << faces[t] << ' ' << faces[t + 1] << ' ' << faces[t + 2] << '\n';
  if (!f) throw std::runtime_error("short write: " + path);
}

// CSV table with fixed header; numbers printed at full round-trip precision.
inline void write_csv(const std::string& path,
                      const std::vector<std::string>& header,
                      const std::vector<std::vector<double>>& rows) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  for (size_t i = 0; i < header.size(); ++i)
    f << header[i] << (i + 1 == header.size() ? '\n' : ',');
  char buf[64];
  for (const auto& row : rows) {
    for (size_t i = 0; i < row.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.12g", row[i]);
      f << buf << (i + 1 == row.size() ? '\n' : ',');
    }
  }
  if (!f) throw std::runtime_error("short write: " + path);
}

// Deterministic, well-separated part colors: golden-angle hue stepping.
// Entry 0 is the background placeholder (dark gray).
inline std::vector<Rgb> part_palette(int64_t parts) {
  auto hsv = [](double h, double s, double v) -> Rgb {
    double c = v * s;
    double hp = h * 6.0;
    double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1) { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else { r = c; b = x; }
    double m = v - c;
    return {r + m, g + m, b + m};
  };
  std::vector<Rgb> pal;
  pal.reserve(size_t(parts) + 1);
  pal.push_back({0.12, 0.12, 0.12});
  const double golden = 0.61803398874989485;
  double h = 0.11;
  for (int64_t k = 0; k < parts; ++k) {
    pal.push_back(hsv(h, 0.65, 0.92));
    h = std::fmod(h + golden, 1.0);
  }
  return pal;
}

// Monotone-lightness heat ramp for scalar maps ([0,1] -> RGB).
inline Rgb colormap_heat(double t) {
  static const std::array<Rgb, 5> anchors = {{{0.001, 0.000, 0.014},
                                              {0.341, 0.062, 0.429},
                                              {0.729, 0.212, 0.333},
                                              {0.973, 0.552, 0.039},
                                              {0.988, 0.998, 0.645}}};
  double c = std::min(1.0, std::max(0.0, t));
  double pos = c * double(anchors.size() - 1);
  size_t i = std::min(anchors.size() - 2, size_t(pos));
  double u = pos - double(i);
  Rgb out;
  for (int d = 0; d < 3; ++d)
    out[size_t(d)] = (1.0 - u) * anchors[i][size_t(d)] + u * anchors[i + 1][size_t(d)];
  return out;
}

// Textured noise background: per-pixel gray values, deterministic in the seed.
inline std::vector<double> make_noise_background(int64_t height, int64_t width,
                                                 uint64_t seed) {
  std::vector<double> img(static_cast<size_t>(height * width * 3));
  Rng rng(seed, RngUse::background);
  for (int64_t p = 0; p < height * width; ++p) {
    double g = rng.uniform(0.25, 0.75);
    img[size_t(3 * p)] = img[size_t(3 * p + 1)] = img[size_t(3 * p + 2)] = g;
  }
  return img;
}

// Compose a rendered sample: background pixels come from `background`
// (H*W*3), part pixels take the palette color scaled by a per-part constant
// shading jitter of relative amplitude `jitter` (0 disables it).
inline std::vector<double> render_sample_image(const RasterOutput& raster,
                                               const std::vector<Rgb>& palette,
                                               const std::vector<double>& background,
                                               uint64_t seed,
                                               double jitter = 0.25) {
  const size_t n = size_t(raster.height * raster.width);
  if (background.size() != 3 * n)
    throw std::invalid_argument("render: background must be H*W*3");
  std::vector<double> img = background;
  std::vector<double> shade(palette.size(), 1.0);
  for (size_t k = 1; k < palette.size(); ++k) {
    Rng rng(seed, RngUse::shade_jitter, k);
    shade[k] = 1.0 + jitter * (2.0 * rng.uniform() - 1.0);
  }
  for (size_t p = 0; p < n; ++p) {
    int lab = raster.label_map[p];
    if (lab == 0) continue;
    if (size_t(lab) >= palette.size())
      throw std::invalid_argument("render: label outside palette range");
    for (int d = 0; d < 3; ++d) {
      double c = palette[size_t(lab)][size_t(d)] * shade[size_t(lab)];
      img[3 * p + size_t(d)] = std::min(1.0, std::max(0.0, c));
    }
  }
  return img;
}

}  // namespace parelab
