#pragma once
// Weak-perspective camera: orthographic drop of z after a rigid rotation,
// followed by scale and in-plane translation. Provides both a plain kernel
// and a differentiable tensor path (gradients w.r.t. points, s, t).

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "parelab/rotations.hpp"
#include "parelab/tensor.hpp"

namespace parelab {

struct WeakPerspectiveCamera {
  double s = 1.0;                       // scale, must stay positive
  std::array<double, 2> t{0.0, 0.0};    // translation in normalized image units
  Mat3 R = mat3_identity();             // camera rotation (identity in training)

  void validate() const {
    if (!(s > 0.0)) throw std::invalid_argument("camera scale must be positive");
    // orthonormality: R * R^T == I
    Mat3 rrt = mat3_mul(R, mat3_transpose(R));
    Mat3 eye = mat3_identity();
    for (int i = 0; i < 9; ++i) {
      if (std::abs(rrt[i] - eye[i]) > 1e-9)
        throw std::invalid_argument("camera rotation must be orthonormal");
    }
  }
};

// Plain kernel: y_i = s * Pi(R x_i) + t, where Pi drops the z coordinate.
inline std::vector<std::array<double, 2>> project_points(
    const std::vector<std::array<double, 3>>& points,
    const WeakPerspectiveCamera& cam) {
  std::vector<std::array<double, 2>> out(points.size());
  for (size_t i = 0; i < points.size(); ++i) {
    Vec3 r = mat3_apply(cam.R, points[i]);
    out[i] = {cam.s * r[0] + cam.t[0], cam.s * r[1] + cam.t[1]};
  }
  return out;
}

// Camera-space z per point (depth used by the rasterizer; smaller = nearer).
inline std::vector<double> camera_depths(
    const std::vector<std::array<double, 3>>& points, const Mat3& R) {
  std::vector<double> z(points.size());
  for (size_t i = 0; i < points.size(); ++i) {
    z[i] = R[6] * points[i][0] + R[7] * points[i][1] + R[8] * points[i][2];
  }
  return z;
}

// Differentiable path. points: [N,3]; s: scalar tensor [1]; t: [2].
// R is a constant (the training-time camera keeps R = identity).
template <class T>
Tensor<T> project(const Tensor<T>& points, const Tensor<T>& s,
                  const Tensor<T>& t, const Mat3& R = mat3_identity()) {
  const Shape& ps = points.shape();
  if (ps.size() != 2 || ps[1] != 3)
    throw std::invalid_argument("project: points must be [N,3]");
  if (shape_numel(s.shape()) != 1)
    throw std::invalid_argument("project: s must hold one element");
  if (shape_numel(t.shape()) != 2)
    throw std::invalid_argument("project: t must hold two elements");

  // rows of (points * R^T) are R * x_i; keep only columns 0..1 of R^T.
  std::vector<T> rt_xy = {T(R[0]), T(R[3]), T(R[1]), T(R[4]), T(R[2]), T(R[5])};
  Tensor<T> rt = Tensor<T>::from_data({3, 2}, std::move(rt_xy));
  Tensor<T> xy = matmul(points, rt);                       // [N,2]
  Tensor<T> scaled = mul(xy, reshape(s, {1, 1}));          // broadcast scale
  return add(scaled, reshape(t, {1, 2}));                  // broadcast shift
}

}  // namespace parelab
