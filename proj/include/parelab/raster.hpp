#pragma once
// Z-buffer triangle rasterizer over pixel centers, producing part-label maps,
// depth, and per-vertex visibility. Non-differentiable by design: it provides
// rendering targets, not gradients.
//
// Conventions (shared project-wide):
//   * image x grows right, y grows down; origin is the top-left pixel center;
//   * normalized device coordinates [-1,1] map to [0,W-1] x [0,H-1], so pixel
//     centers sit at integer coordinates;
//   * depth is camera-space z after the camera rotation, smaller = nearer;
//   * faces are two-sided; zero-area triangles are skipped silently;
//   * ties in depth resolve to the earlier face in the face list.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "parelab/body_model.hpp"
#include "parelab/camera.hpp"

namespace parelab {

struct RasterOutput {
  int64_t height = 0, width = 0;
  std::vector<int> label_map;        // H*W, row-major; 0 = background
  std::vector<double> depth;         // H*W; +inf where empty
  std::vector<int64_t> face_id;      // H*W; index of the winning face, -1 = none
  std::vector<uint8_t> vertex_visible;  // V; 1 where the vertex is visible

  int label_at(int64_t y, int64_t x) const { return label_map[size_t(y * width + x)]; }
  double depth_at(int64_t y, int64_t x) const { return depth[size_t(y * width + x)]; }
  int64_t face_at(int64_t y, int64_t x) const { return face_id[size_t(y * width + x)]; }
};

// Label each face by the dominant skinning part of its vertices: sum the three
// vertices' weight rows and take the argmax; ties go to the lower part index.
// Labels are 1-based so 0 can mean background in rendered maps.
inline std::vector<int> face_part_labels(const BodyModelDef& model) {
  std::vector<int> labels(model.faces.size() / 3);
  std::vector<double> acc(static_cast<size_t>(model.K));
  for (size_t f = 0; f < labels.size(); ++f) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int c = 0; c < 3; ++c) {
      int64_t v = model.faces[3 * f + size_t(c)];
      for (int64_t k = 0; k < model.K; ++k)
        acc[size_t(k)] += model.weights[size_t(v * model.K + k)];
    }
    // max_element returns the first maximum: the documented lower-index tie rule.
    auto it = std::max_element(acc.begin(), acc.end());
    labels[f] = int(it - acc.begin()) + 1;
  }
  return labels;
}

namespace detail {

// Map normalized device coordinates to pixel coordinates.
inline double ndc_to_px(double ndc, int64_t extent) {
  return (ndc + 1.0) * 0.5 * double(extent - 1);
}

}  // namespace detail

// Reshape a flat x0,y0,z0,x1,... buffer into point triples.
inline std::vector<std::array<double, 3>> as_points(const std::vector<double>& flat) {
  if (flat.size() % 3 != 0)
    throw std::invalid_argument("as_points: buffer length must be a multiple of 3");
  std::vector<std::array<double, 3>> pts(flat.size() / 3);
  for (size_t i = 0; i < pts.size(); ++i)
    pts[i] = {flat[3 * i], flat[3 * i + 1], flat[3 * i + 2]};
  return pts;
}

inline std::vector<int64_t> as_face_indices(const std::vector<int32_t>& faces) {
  return std::vector<int64_t>(faces.begin(), faces.end());
}

inline RasterOutput rasterize(const std::vector<std::array<double, 3>>& mesh,
                              const std::vector<int64_t>& faces,
                              const std::vector<int>& face_labels,
                              const WeakPerspectiveCamera& cam, int64_t height,
                              int64_t width) {
  if (height < 1 || width < 1)
    throw std::invalid_argument("rasterize: image dimensions must be >= 1");
  if (faces.size() % 3 != 0)
    throw std::invalid_argument("rasterize: faces must be triples");
  if (face_labels.size() != faces.size() / 3)
    throw std::invalid_argument("rasterize: one label per face required");

  const double inf = std::numeric_limits<double>::infinity();
  RasterOutput out;
  out.height = height;
  out.width = width;
  out.label_map.assign(static_cast<size_t>(height * width), 0);
  out.depth.assign(static_cast<size_t>(height * width), inf);
  out.face_id.assign(static_cast<size_t>(height * width), -1);
  out.vertex_visible.assign(mesh.size(), 0);

  const size_t V = mesh.size();
  std::vector<double> px(V), py(V);
  std::vector<double> pz = camera_depths(mesh, cam.R);
  {
    auto xy = project_points(mesh, cam);
    for (size_t v = 0; v < V; ++v) {
      px[v] = detail::ndc_to_px(xy[v][0], width);
      py[v] = detail::ndc_to_px(xy[v][1], height);
    }
  }

  const size_t F = faces.size() / 3;
  for (size_t f = 0; f < F; ++f) {
    const size_t a = size_t(faces[3 * f + 0]);
    const size_t b = size_t(faces[3 * f + 1]);
    const size_t c = size_t(faces[3 * f + 2]);
    if (a >= V || b >= V || c >= V)
      throw std::invalid_argument("rasterize: face vertex index out of range");

    // twice the signed area in pixel space
    const double area = (px[b] - px[a]) * (py[c] - py[a]) -
                        (py[b] - py[a]) * (px[c] - px[a]);
    if (std::abs(area) < 1e-14) continue;  // degenerate: skip silently

    const int64_t x0 = std::max<int64_t>(0, int64_t(std::ceil(std::min({px[a], px[b], px[c]}))));
    const int64_t x1 = std::min<int64_t>(width - 1, int64_t(std::floor(std::max({px[a], px[b], px[c]}))));
    const int64_t y0 = std::max<int64_t>(0, int64_t(std::ceil(std::min({py[a], py[b], py[c]}))));
    const int64_t y1 = std::min<int64_t>(height - 1, int64_t(std::floor(std::max({py[a], py[b], py[c]}))));
    if (x0 > x1 || y0 > y1) continue;

    const double inv_area = 1.0 / area;
    for (int64_t y = y0; y <= y1; ++y) {
      for (int64_t x = x0; x <= x1; ++x) {
        const double qx = double(x), qy = double(y);
        // barycentric weights, signed; same sign as area <=> inside (two-sided)
        const double w0 = ((px[b] - qx) * (py[c] - qy) - (py[b] - qy) * (px[c] - qx)) * inv_area;
        const double w1 = ((px[c] - qx) * (py[a] - qy) - (py[c] - qy) * (px[a] - qx)) * inv_area;
        const double w2 = 1.0 - w0 - w1;
        if (w0 < 0.0 || w1 < 0.0 || w2 < 0.0) continue;
        const double z = w0 * pz[a] + w1 * pz[b] + w2 * pz[c];
        const size_t idx = size_t(y * width + x);
        if (z < out.depth[idx]) {  // strict: equal depth keeps the earlier face
          out.depth[idx] = z;
          out.label_map[idx] = face_labels[f];
          out.face_id[idx] = int64_t(f);
        }
      }
    }
  }

  // Depth tolerance scales with the camera-space bounding box diagonal.
  double tol = 0.0;
  if (V > 0) {
    std::array<double, 3> lo{inf, inf, inf}, hi{-inf, -inf, -inf};
    for (size_t v = 0; v < V; ++v) {
      Vec3 r = mat3_apply(cam.R, mesh[v]);
      for (int d = 0; d < 3; ++d) {
        lo[size_t(d)] = std::min(lo[size_t(d)], r[size_t(d)]);
        hi[size_t(d)] = std::max(hi[size_t(d)], r[size_t(d)]);
      }
    }
    double diag2 = 0.0;
    for (int d = 0; d < 3; ++d) diag2 += (hi[size_t(d)] - lo[size_t(d)]) * (hi[size_t(d)] - lo[size_t(d)]);
    tol = 1e-4 * std::sqrt(diag2);
  }

  // A vertex is visible iff it lands on an in-image pixel where either
  //  (a) the face that won the z-buffer has the vertex as one of its corners
  //      (exact: the vertex's own surface is frontmost there), or
  //  (b) the z-buffer entry agrees with the vertex depth to within the
  //      tolerance (covers flat geometry whose winner is a neighboring face).
  // Rule (a) is needed because interpolated depth across a face spanning only
  // a few pixels differs from a corner's depth by the face's depth extent,
  // which dwarfs any fixed tolerance; an id test has no interpolation error.
  for (size_t v = 0; v < V; ++v) {
    const int64_t ix = int64_t(std::lround(px[v]));
    const int64_t iy = int64_t(std::lround(py[v]));
    if (ix < 0 || ix >= width || iy < 0 || iy >= height) continue;
    const size_t idx = size_t(iy * width + ix);
    const int64_t win = out.face_id[idx];
    if (win >= 0) {
      const bool corner = size_t(faces[size_t(3 * win)]) == v ||
                          size_t(faces[size_t(3 * win + 1)]) == v ||
                          size_t(faces[size_t(3 * win + 2)]) == v;
      if (corner || std::abs(out.depth[idx] - pz[v]) <= tol)
        out.vertex_visible[v] = 1;
    }
  }
  return out;
}

// Convenience overload for the body-model layout (flat vertices, i32 faces).
inline RasterOutput rasterize(const std::vector<double>& mesh_flat,
                              const std::vector<int32_t>& faces,
                              const std::vector<int>& face_labels,
                              const WeakPerspectiveCamera& cam, int64_t height,
                              int64_t width) {
  return rasterize(as_points(mesh_flat), as_face_indices(faces), face_labels,
                   cam, height, width);
}

}  // namespace parelab
