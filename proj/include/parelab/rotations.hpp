#pragma once

// Rotation representations: axis-angle, 6D (first two rotation-matrix
// columns, stacked column-major), and row-major 3x3 matrices. Plain-double
// kernels for data synthesis and evaluation, plus a differentiable 6D path
// for the regressor.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "parelab/tensor.hpp"

namespace parelab {

using Mat3 = std::array<double, 9>;  // row-major
using Vec3 = std::array<double, 3>;

inline Mat3 mat3_identity() { return {1, 0, 0, 0, 1, 0, 0, 0, 1}; }

inline Mat3 mat3_mul(const Mat3& a, const Mat3& b) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      r[size_t(i * 3 + j)] = a[size_t(i * 3)] * b[size_t(j)] +
                             a[size_t(i * 3 + 1)] * b[size_t(3 + j)] +
                             a[size_t(i * 3 + 2)] * b[size_t(6 + j)];
  return r;
}

inline Vec3 mat3_apply(const Mat3& m, const Vec3& v) {
  return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
          m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
          m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}

inline Mat3 mat3_transpose(const Mat3& m) {
  return {m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]};
}

inline double mat3_det(const Mat3& m) {
  return m[0] * (m[4] * m[8] - m[5] * m[7]) -
         m[1] * (m[3] * m[8] - m[5] * m[6]) +
         m[2] * (m[3] * m[7] - m[4] * m[6]);
}

// Rodrigues with a 2nd-order Taylor branch near the origin so the map (and
// its derivative) stays finite as |aa| -> 0.
inline Mat3 axis_angle_to_matrix(const Vec3& aa) {
  const double x = aa[0], y = aa[1], z = aa[2];
  const double t2 = x * x + y * y + z * z;
  const double t = std::sqrt(t2);
  double a, b;  // sin t / t and (1 - cos t) / t^2
  if (t < 1e-8) {
    a = 1.0 - t2 / 6.0;
    b = 0.5 - t2 / 24.0;
  } else {
    a = std::sin(t) / t;
    b = (1.0 - std::cos(t)) / t2;
  }
  // R = I + a K + b K^2,  K = skew(aa)
  return {1 + b * (-z * z - y * y), -a * z + b * x * y, a * y + b * x * z,
          a * z + b * x * y, 1 + b * (-z * z - x * x), -a * x + b * y * z,
          -a * y + b * x * z, a * x + b * y * z, 1 + b * (-y * y - x * x)};
}

// Gram-Schmidt on the two stored columns; throws on zero/parallel input.
inline Mat3 rot6d_to_matrix(const std::array<double, 6>& r6) {
  const double* a1 = r6.data();
  const double* a2 = r6.data() + 3;
  double n1 = std::sqrt(a1[0] * a1[0] + a1[1] * a1[1] + a1[2] * a1[2]);
  if (n1 < 1e-12)
    tensor_error("rot6d_to_matrix: first column has near-zero norm");
  double b1[3] = {a1[0] / n1, a1[1] / n1, a1[2] / n1};
  double d = b1[0] * a2[0] + b1[1] * a2[1] + b1[2] * a2[2];
  double u[3] = {a2[0] - d * b1[0], a2[1] - d * b1[1], a2[2] - d * b1[2]};
  double n2 = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
  if (n2 < 1e-12)
    tensor_error("rot6d_to_matrix: columns are parallel or second is zero");
  double b2[3] = {u[0] / n2, u[1] / n2, u[2] / n2};
  double b3[3] = {b1[1] * b2[2] - b1[2] * b2[1], b1[2] * b2[0] - b1[0] * b2[2],
                  b1[0] * b2[1] - b1[1] * b2[0]};
  return {b1[0], b2[0], b3[0], b1[1], b2[1], b3[1], b1[2], b2[2], b3[2]};
}

inline std::array<double, 6> matrix_to_rot6d(const Mat3& m) {
  return {m[0], m[3], m[6], m[1], m[4], m[7]};  // first two columns
}

// Angle of relative rotation between two rotation matrices, in radians.
// Uses |A-B|_F = 2*sqrt(2)*sin(theta/2), which keeps precision near zero
// where the trace/acos form loses half the significant digits.
inline double geodesic_angle(const Mat3& a, const Mat3& b) {
  double f2 = 0;
  for (int i = 0; i < 9; ++i)
    f2 += (a[size_t(i)] - b[size_t(i)]) * (a[size_t(i)] - b[size_t(i)]);
  double s = std::sqrt(f2) / (2.0 * std::sqrt(2.0));
  return 2.0 * std::asin(std::min(1.0, s));
}

// ---- pose bookkeeping ----

enum class PoseRep { axis_angle, rot6d };

// K per-joint rotations in one of the two storage forms.
struct Pose {
  PoseRep rep = PoseRep::axis_angle;
  int64_t joints = 0;
  std::vector<double> data;  // joints*3 (axis-angle) or joints*6 (rot6d)

  static Pose identity(int64_t joints) {
    Pose p;
    p.rep = PoseRep::axis_angle;
    p.joints = joints;
    p.data.assign(size_t(joints * 3), 0.0);
    return p;
  }

  void validate() const {
    int64_t per = rep == PoseRep::axis_angle ? 3 : 6;
    if (int64_t(data.size()) != joints * per)
      tensor_error("pose: " + std::to_string(data.size()) +
                   " values for " + std::to_string(joints) + " joints");
    for (double v : data)
      if (!std::isfinite(v)) tensor_error("pose: non-finite entry");
  }

  std::vector<Mat3> matrices() const {
    validate();
    std::vector<Mat3> out(static_cast<size_t>(joints));
    for (int64_t k = 0; k < joints; ++k) {
      if (rep == PoseRep::axis_angle) {
        out[size_t(k)] = axis_angle_to_matrix(
            {data[size_t(k * 3)], data[size_t(k * 3 + 1)],
             data[size_t(k * 3 + 2)]});
      } else {
        std::array<double, 6> r6;
        for (int i = 0; i < 6; ++i) r6[size_t(i)] = data[size_t(k * 6 + i)];
        out[size_t(k)] = rot6d_to_matrix(r6);
      }
    }
    return out;
  }
};

// ---- differentiable 6D -> matrix, rowwise over [M, 6] ----

// Output is [M, 9] row-major rotation matrices. Throws on degenerate rows
// (checked against the forward values before any tape is built on them).
template <class T>
Tensor<T> rot6d_to_matrix_rows(const Tensor<T>& r6) {
  if (r6.dim() != 2 || r6.size(1) != 6)
    tensor_error("rot6d_to_matrix_rows: expected [M, 6], got " +
                 shape_str(r6.shape()));
  const int64_t m = r6.size(0);
  {
    const auto& v = r6.data();
    for (int64_t i = 0; i < m; ++i) {
      const T* a1 = v.data() + i * 6;
      const T* a2 = a1 + 3;
      double n1 = std::sqrt(double(a1[0]) * double(a1[0]) +
                            double(a1[1]) * double(a1[1]) +
                            double(a1[2]) * double(a1[2]));
      if (n1 < 1e-12)
        tensor_error("rot6d_to_matrix_rows: row " + std::to_string(i) +
                     " first column has near-zero norm");
      double b1x = a1[0] / n1, b1y = a1[1] / n1, b1z = a1[2] / n1;
      double d = b1x * a2[0] + b1y * a2[1] + b1z * a2[2];
      double ux = a2[0] - d * b1x, uy = a2[1] - d * b1y, uz = a2[2] - d * b1z;
      if (std::sqrt(ux * ux + uy * uy + uz * uz) < 1e-12)
        tensor_error("rot6d_to_matrix_rows: row " + std::to_string(i) +
                     " columns are parallel or second is zero");
    }
  }

  auto a1 = slice(r6, 1, 0, 3);
  auto a2 = slice(r6, 1, 3, 3);
  auto n1 = sqrt_t(sum(square(a1), 1, true));
  auto b1 = div(a1, n1);
  auto d = sum(mul(b1, a2), 1, true);
  auto u = sub(a2, mul(d, b1));
  auto n2 = sqrt_t(sum(square(u), 1, true));
  auto b2 = div(u, n2);

  auto comp = [](const Tensor<T>& t, int64_t i) { return slice(t, 1, i, 1); };
  auto b1x = comp(b1, 0), b1y = comp(b1, 1), b1z = comp(b1, 2);
  auto b2x = comp(b2, 0), b2y = comp(b2, 1), b2z = comp(b2, 2);
  auto b3x = sub(mul(b1y, b2z), mul(b1z, b2y));
  auto b3y = sub(mul(b1z, b2x), mul(b1x, b2z));
  auto b3z = sub(mul(b1x, b2y), mul(b1y, b2x));

  // row-major [b1 b2 b3] as columns
  return concat<T>({b1x, b2x, b3x, b1y, b2y, b3y, b1z, b2z, b3z}, 1);
}

}  // namespace parelab
