#pragma once

// SMPL-compatible parametric body: shape blendshapes, forward kinematics
// over a joint tree, linear blend skinning, and the linear joint regressor.
// Plain-double kernels serve data synthesis and evaluation; BodyTensors
// provides the differentiable path used by the training losses.

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "parelab/container.hpp"
#include "parelab/rng.hpp"
#include "parelab/rotations.hpp"
#include "parelab/tensor.hpp"

namespace parelab {

struct BodyModelDef {
  int64_t V = 0, K = 0, B = 0, T = 0;
  std::vector<double> v_template;       // V*3 rest vertices
  std::vector<double> shapedirs;        // V*3*B, laid out [(v*3+c)*B + b]
  std::vector<double> posedirs;         // empty, or V*3*(9*(K-1))
  std::vector<double> weights;          // V*K skinning weights
  std::vector<int32_t> parents;         // K, parents[0] == -1
  std::vector<int32_t> faces;           // T*3 vertex indices
  std::vector<double> joint_regressor;  // K*V

  bool has_posedirs() const { return !posedirs.empty(); }

  void validate() const {
    if (V <= 0 || K <= 0 || B <= 0) tensor_error("body model: empty dims");
    auto want = [&](const char* name, size_t got, int64_t expect) {
      if (int64_t(got) != expect)
        tensor_error(std::string("body model: ") + name + " has " +
                     std::to_string(got) + " values, expected " +
                     std::to_string(expect));
    };
    want("v_template", v_template.size(), V * 3);
    want("shapedirs", shapedirs.size(), V * 3 * B);
    want("weights", weights.size(), V * K);
    want("parents", parents.size(), K);
    want("faces", faces.size(), T * 3);
    want("joint_regressor", joint_regressor.size(), K * V);
    if (!posedirs.empty())
      want("posedirs", posedirs.size(), V * 3 * 9 * (K - 1));

    if (parents[0] != -1)
      tensor_error("body model: joint 0 must be the root (parent -1)");
    for (int64_t k = 1; k < K; ++k)
      if (parents[size_t(k)] < 0 || parents[size_t(k)] >= k)
        tensor_error("body model: parents[" + std::to_string(k) +
                     "] = " + std::to_string(parents[size_t(k)]) +
                     " is not an earlier joint");

    for (int64_t v = 0; v < V; ++v) {
      double s = 0;
      for (int64_t k = 0; k < K; ++k) {
        double w = weights[size_t(v * K + k)];
        if (w < 0)
          tensor_error("body model: negative skinning weight at vertex " +
                       std::to_string(v));
        s += w;
      }
      if (std::fabs(s - 1.0) > 1e-8)
        tensor_error("body model: weight row " + std::to_string(v) +
                     " sums to " + std::to_string(s));
    }
    for (int64_t k = 0; k < K; ++k) {
      double s = 0;
      for (int64_t v = 0; v < V; ++v) s += joint_regressor[size_t(k * V + v)];
      if (std::fabs(s - 1.0) > 1e-6)
        tensor_error("body model: joint_regressor row " + std::to_string(k) +
                     " sums to " + std::to_string(s));
    }
    for (int32_t idx : faces)
      if (idx < 0 || int64_t(idx) >= V)
        tensor_error("body model: face index " + std::to_string(idx) +
                     " out of range");
    for (double x : v_template)
      if (!std::isfinite(x)) tensor_error("body model: non-finite vertex");
  }

  // beta -> V*3 shaped rest vertices (template + shape blendshapes).
  std::vector<double> shaped_vertices(const std::vector<double>& beta) const {
    if (int64_t(beta.size()) != B)
      tensor_error("body model: beta has " + std::to_string(beta.size()) +
                   " coefficients, model expects " + std::to_string(B));
    std::vector<double> out = v_template;
    for (int64_t i = 0; i < V * 3; ++i) {
      double acc = 0;
      const double* row = shapedirs.data() + i * B;
      for (int64_t b = 0; b < B; ++b) acc += row[b] * beta[size_t(b)];
      out[size_t(i)] += acc;
    }
    return out;
  }

  // joint_regressor applied to any V*3 point set -> K*3.
  std::vector<double> regress(const std::vector<double>& mesh) const {
    if (int64_t(mesh.size()) != V * 3)
      tensor_error("body model: regress expects V*3 mesh");
    std::vector<double> out(size_t(K * 3), 0.0);
    for (int64_t k = 0; k < K; ++k) {
      const double* w = joint_regressor.data() + k * V;
      double x = 0, y = 0, z = 0;
      for (int64_t v = 0; v < V; ++v) {
        x += w[v] * mesh[size_t(v * 3)];
        y += w[v] * mesh[size_t(v * 3 + 1)];
        z += w[v] * mesh[size_t(v * 3 + 2)];
      }
      out[size_t(k * 3)] = x;
      out[size_t(k * 3 + 1)] = y;
      out[size_t(k * 3 + 2)] = z;
    }
    return out;
  }

  std::vector<double> rest_joints() const { return regress(v_template); }
};

// ---- forward kinematics (plain path) ----

struct JointTransforms {
  std::vector<Mat3> rot;       // world rotation per joint
  std::vector<Vec3> pos;       // world joint position
  std::vector<Mat3> skin_rot;  // relative ("inverse bind") transform
  std::vector<Vec3> skin_t;
};

// World transforms down the tree; root local translation is the root rest
// joint, every other local translation is the bone offset to the parent.
// Skinning transforms subtract each joint's rest contribution.
inline JointTransforms forward_kinematics(const BodyModelDef& m,
                                          const std::vector<Mat3>& rots,
                                          const std::vector<double>& rest_j) {
  if (int64_t(rots.size()) != m.K)
    tensor_error("forward_kinematics: rotation count != K");
  if (int64_t(rest_j.size()) != m.K * 3)
    tensor_error("forward_kinematics: rest joints must be K*3");
  JointTransforms out;
  out.rot.resize(size_t(m.K));
  out.pos.resize(size_t(m.K));
  out.skin_rot.resize(size_t(m.K));
  out.skin_t.resize(size_t(m.K));
  for (int64_t k = 0; k < m.K; ++k) {
    Vec3 jk = {rest_j[size_t(k * 3)], rest_j[size_t(k * 3 + 1)],
               rest_j[size_t(k * 3 + 2)]};
    if (k == 0) {
      out.rot[0] = rots[0];
      out.pos[0] = jk;
    } else {
      int64_t p = m.parents[size_t(k)];
      Vec3 jp = {rest_j[size_t(p * 3)], rest_j[size_t(p * 3 + 1)],
                 rest_j[size_t(p * 3 + 2)]};
      Vec3 off = {jk[0] - jp[0], jk[1] - jp[1], jk[2] - jp[2]};
      out.rot[size_t(k)] = mat3_mul(out.rot[size_t(p)], rots[size_t(k)]);
      Vec3 r = mat3_apply(out.rot[size_t(p)], off);
      out.pos[size_t(k)] = {out.pos[size_t(p)][0] + r[0],
                            out.pos[size_t(p)][1] + r[1],
                            out.pos[size_t(p)][2] + r[2]};
    }
    out.skin_rot[size_t(k)] = out.rot[size_t(k)];
    Vec3 rj = mat3_apply(out.rot[size_t(k)], jk);
    out.skin_t[size_t(k)] = {out.pos[size_t(k)][0] - rj[0],
                             out.pos[size_t(k)][1] - rj[1],
                             out.pos[size_t(k)][2] - rj[2]};
  }
  return out;
}

// ---- linear blend skinning (plain path) ----

inline std::vector<double> lbs(const BodyModelDef& m,
                               const std::vector<Mat3>& rots,
                               const std::vector<double>& beta,
                               bool use_posedirs = false) {
  auto v_shaped = m.shaped_vertices(beta);
  if (use_posedirs) {
    if (!m.has_posedirs())
      tensor_error("lbs: posedirs requested but the model has none");
    // pose correctives driven by vec(R_k - I) for the non-root joints
    std::vector<double> feat(size_t(9 * (m.K - 1)));
    for (int64_t k = 1; k < m.K; ++k)
      for (int i = 0; i < 9; ++i)
        feat[size_t((k - 1) * 9 + i)] =
            rots[size_t(k)][size_t(i)] - (i % 4 == 0 ? 1.0 : 0.0);
    const int64_t P = int64_t(feat.size());
    for (int64_t i = 0; i < m.V * 3; ++i) {
      double acc = 0;
      const double* row = m.posedirs.data() + i * P;
      for (int64_t p = 0; p < P; ++p) acc += row[p] * feat[size_t(p)];
      v_shaped[size_t(i)] += acc;
    }
  }
  auto rest_j = m.regress(v_shaped);
  auto tf = forward_kinematics(m, rots, rest_j);

  std::vector<double> out(size_t(m.V * 3));
  for (int64_t v = 0; v < m.V; ++v) {
    const double* w = m.weights.data() + v * m.K;
    Vec3 x = {v_shaped[size_t(v * 3)], v_shaped[size_t(v * 3 + 1)],
              v_shaped[size_t(v * 3 + 2)]};
    Vec3 acc = {0, 0, 0};
    for (int64_t k = 0; k < m.K; ++k) {
      if (w[k] == 0) continue;
      Vec3 r = mat3_apply(tf.skin_rot[size_t(k)], x);
      acc[0] += w[k] * (r[0] + tf.skin_t[size_t(k)][0]);
      acc[1] += w[k] * (r[1] + tf.skin_t[size_t(k)][1]);
      acc[2] += w[k] * (r[2] + tf.skin_t[size_t(k)][2]);
    }
    out[size_t(v * 3)] = acc[0];
    out[size_t(v * 3 + 1)] = acc[1];
    out[size_t(v * 3 + 2)] = acc[2];
  }
  return out;
}

inline std::vector<double> lbs(const BodyModelDef& m, const Pose& pose,
                               const std::vector<double>& beta,
                               bool use_posedirs = false) {
  if (pose.joints != m.K) tensor_error("lbs: pose joint count != K");
  return lbs(m, pose.matrices(), beta, use_posedirs);
}

// ---- differentiable path ----

// Constant tensors built once from a model; lbs/regress build fresh tape
// nodes per call, so one instance serves any number of training steps.
struct BodyTensors {
  const BodyModelDef* def;
  Tensor64 v_template;  // [V,3]
  Tensor64 shapedirs;   // [V*3,B]
  Tensor64 posedirs;    // [V*3,9(K-1)] or undefined
  Tensor64 weights;     // [V,K]
  Tensor64 regressor;   // [K,V]
  Tensor64 bottom_row;  // [1,4] constant (0,0,0,1)

  explicit BodyTensors(const BodyModelDef& m) : def(&m) {
    m.validate();
    v_template = Tensor64::from_data({m.V, 3}, m.v_template);
    shapedirs = Tensor64::from_data({m.V * 3, m.B}, m.shapedirs);
    if (m.has_posedirs())
      posedirs = Tensor64::from_data({m.V * 3, 9 * (m.K - 1)}, m.posedirs);
    weights = Tensor64::from_data({m.V, m.K}, m.weights);
    regressor = Tensor64::from_data({m.K, m.V}, m.joint_regressor);
    bottom_row = Tensor64::from_data({1, 4}, {0, 0, 0, 1});
  }

  // rotmats [K,9] row-major, beta [B] -> posed mesh [V,3].
  Tensor64 lbs(const Tensor64& rotmats, const Tensor64& beta,
               bool use_posedirs = false) const {
    const int64_t K = def->K, V = def->V, B = def->B;
    if (rotmats.shape() != Shape{K, 9})
      tensor_error("lbs: rotmats must be [K,9], got " +
                   shape_str(rotmats.shape()));
    if (beta.numel() != B) tensor_error("lbs: beta size != B");

    auto offsets = matmul(shapedirs, reshape(beta, {B, 1}));  // [V*3,1]
    auto v_shaped = add(v_template, reshape(offsets, {V, 3}));
    if (use_posedirs) {
      if (!posedirs.defined())
        tensor_error("lbs: posedirs requested but the model has none");
      std::vector<double> ident(size_t(9 * (K - 1)));
      for (int64_t k = 0; k < K - 1; ++k)
        for (int i = 0; i < 9; ++i)
          ident[size_t(k * 9 + i)] = (i % 4 == 0) ? 1.0 : 0.0;
      auto feat = sub(reshape(slice(rotmats, 0, 1, K - 1), {9 * (K - 1), 1}),
                      Tensor64::from_data({9 * (K - 1), 1}, ident));
      v_shaped = add(v_shaped, reshape(matmul(posedirs, feat), {V, 3}));
    }
    auto j = matmul(regressor, v_shaped);  // [K,3]

    // forward kinematics over 4x4 transforms
    std::vector<Tensor64> world(static_cast<size_t>(K));
    std::vector<Tensor64> j_col(static_cast<size_t>(K));
    std::vector<Tensor64> a_rows;
    a_rows.reserve(size_t(K));
    for (int64_t k = 0; k < K; ++k) {
      auto R = reshape(slice(rotmats, 0, k, 1), {3, 3});
      j_col[size_t(k)] = transpose(slice(j, 0, k, 1));  // [3,1]
      Tensor64 t_local;
      if (k == 0) {
        t_local = j_col[0];
      } else {
        t_local = sub(j_col[size_t(k)], j_col[size_t(def->parents[size_t(k)])]);
      }
      auto local = concat<double>({concat<double>({R, t_local}, 1), bottom_row}, 0);
      world[size_t(k)] =
          k == 0 ? local : matmul(world[size_t(def->parents[size_t(k)])], local);

      auto top = slice(world[size_t(k)], 0, 0, 3);  // [3,4]
      auto Rg = slice(top, 1, 0, 3);
      auto tg = slice(top, 1, 3, 1);
      auto at = sub(tg, matmul(Rg, j_col[size_t(k)]));
      a_rows.push_back(reshape(concat<double>({Rg, at}, 1), {1, 12}));
    }
    auto A = concat<double>(a_rows, 0);      // [K,12]
    auto Tv = matmul(weights, A);            // [V,12]

    auto X = slice(v_shaped, 1, 0, 1), Y = slice(v_shaped, 1, 1, 1),
         Z = slice(v_shaped, 1, 2, 1);
    auto coord = [&](int64_t r) {
      auto c = [&](int64_t i) { return slice(Tv, 1, r * 4 + i, 1); };
      return add(add(mul(c(0), X), mul(c(1), Y)), add(mul(c(2), Z), c(3)));
    };
    return concat<double>({coord(0), coord(1), coord(2)}, 1);  // [V,3]
  }

  // mesh [V,3] -> joints [K,3]
  Tensor64 regress(const Tensor64& mesh) const {
    return matmul(regressor, mesh);
  }
};

// ---- toy model generation ----

namespace detail {

// Canonical 24-joint layout (root at the origin): pelvis, hips, spine
// chain, knees, ankles, feet, neck, collars, head, shoulders, elbows,
// wrists, hands. Generic joint counts reuse a prefix / extend the chain.
inline void toy_skeleton(int64_t K, std::vector<int32_t>& parents,
                         std::vector<Vec3>& pos, std::vector<double>& radius) {
  static const int32_t kParents24[24] = {-1, 0, 0,  0,  1,  2,  3,  4,
                                         5,  6, 7,  8,  9,  9,  9,  12,
                                         13, 14, 16, 17, 18, 19, 20, 21};
  static const double kPos24[24][3] = {
      {0.00, 0.00, 0.00},    {0.09, -0.04, 0.00},  {-0.09, -0.04, 0.00},
      {0.00, 0.10, 0.00},    {0.10, -0.45, 0.00},  {-0.10, -0.45, 0.00},
      {0.00, 0.20, 0.00},    {0.11, -0.86, 0.00},  {-0.11, -0.86, 0.00},
      {0.00, 0.30, 0.00},    {0.12, -0.93, 0.08},  {-0.12, -0.93, 0.08},
      {0.00, 0.45, 0.00},    {0.07, 0.40, 0.00},   {-0.07, 0.40, 0.00},
      {0.00, 0.60, 0.00},    {0.18, 0.40, 0.00},   {-0.18, 0.40, 0.00},
      {0.42, 0.38, 0.00},    {-0.42, 0.38, 0.00},  {0.65, 0.36, 0.00},
      {-0.65, 0.36, 0.00},   {0.75, 0.35, 0.00},   {-0.75, 0.35, 0.00}};
  static const double kRadius24[24] = {0.10, 0.07, 0.07, 0.10, 0.055, 0.055,
                                       0.10, 0.04, 0.04, 0.095, 0.035, 0.035,
                                       0.045, 0.05, 0.05, 0.085, 0.05, 0.05,
                                       0.04, 0.04, 0.035, 0.035, 0.03, 0.03};
  parents.resize(size_t(K));
  pos.resize(size_t(K));
  radius.resize(size_t(K));
  for (int64_t k = 0; k < K; ++k) {
    if (k < 24) {
      parents[size_t(k)] = kParents24[k];
      pos[size_t(k)] = {kPos24[k][0], kPos24[k][1], kPos24[k][2]};
      radius[size_t(k)] = kRadius24[k];
    } else {
      // extra joints continue as a zig-zag chain off the last one
      parents[size_t(k)] = int32_t(k - 1);
      Vec3 prev = pos[size_t(k - 1)];
      double sgn = (k % 2 == 0) ? 1.0 : -1.0;
      pos[size_t(k)] = {prev[0] + 0.05 * sgn, prev[1] + 0.04,
                        prev[2] + 0.02};
      radius[size_t(k)] = 0.03;
    }
  }
}

struct Segment {
  Vec3 a, b;
  double radius;
};

inline double point_segment_dist(const Vec3& p, const Segment& s) {
  Vec3 d = {s.b[0] - s.a[0], s.b[1] - s.a[1], s.b[2] - s.a[2]};
  Vec3 w = {p[0] - s.a[0], p[1] - s.a[1], p[2] - s.a[2]};
  double dd = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
  double t = dd > 0 ? (w[0] * d[0] + w[1] * d[1] + w[2] * d[2]) / dd : 0.0;
  t = std::min(1.0, std::max(0.0, t));
  double dx = w[0] - t * d[0], dy = w[1] - t * d[1], dz = w[2] - t * d[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

// Mesh one capsule-ish segment with exactly m vertices appended at
// base_index; emits triangles into faces.
inline void mesh_segment(const Segment& s, int64_t m, int64_t base_index,
                         std::vector<double>& verts,
                         std::vector<int32_t>& faces) {
  Vec3 d = {s.b[0] - s.a[0], s.b[1] - s.a[1], s.b[2] - s.a[2]};
  double len = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
  Vec3 u = len > 1e-9 ? Vec3{d[0] / len, d[1] / len, d[2] / len}
                      : Vec3{0, 1, 0};
  // any stable perpendicular frame
  Vec3 ref = std::fabs(u[1]) < 0.9 ? Vec3{0, 1, 0} : Vec3{1, 0, 0};
  Vec3 e1 = {u[1] * ref[2] - u[2] * ref[1], u[2] * ref[0] - u[0] * ref[2],
             u[0] * ref[1] - u[1] * ref[0]};
  double n1 = std::sqrt(e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2]);
  e1 = {e1[0] / n1, e1[1] / n1, e1[2] / n1};
  Vec3 e2 = {u[1] * e1[2] - u[2] * e1[1], u[2] * e1[0] - u[0] * e1[2],
             u[0] * e1[1] - u[1] * e1[0]};

  auto push = [&](const Vec3& p) {
    verts.push_back(p[0]);
    verts.push_back(p[1]);
    verts.push_back(p[2]);
  };
  auto axis_point = [&](double t) {
    return Vec3{s.a[0] + t * d[0], s.a[1] + t * d[1], s.a[2] + t * d[2]};
  };
  auto ring_point = [&](double t, double theta, double r) {
    Vec3 c = axis_point(t);
    double cx = std::cos(theta), sx = std::sin(theta);
    return Vec3{c[0] + r * (cx * e1[0] + sx * e2[0]),
                c[1] + r * (cx * e1[1] + sx * e2[1]),
                c[2] + r * (cx * e1[2] + sx * e2[2])};
  };
  auto tri = [&](int64_t i, int64_t j, int64_t k) {
    faces.push_back(int32_t(base_index + i));
    faces.push_back(int32_t(base_index + j));
    faces.push_back(int32_t(base_index + k));
  };

  if (m < 5) {
    // tetrahedron: ring of (m-1) plus one tip
    int64_t ring_n = m - 1;
    for (int64_t i = 0; i < ring_n; ++i)
      push(ring_point(0.25, 2 * M_PI * double(i) / double(ring_n), s.radius));
    Vec3 tip = axis_point(1.0);
    tip = {tip[0] + u[0] * s.radius * 0.8, tip[1] + u[1] * s.radius * 0.8,
           tip[2] + u[2] * s.radius * 0.8};
    push(tip);
    for (int64_t i = 0; i < ring_n; ++i)
      tri(i, (i + 1) % ring_n, ring_n);
    if (ring_n == 3) tri(0, 2, 1);  // base
    return;
  }

  // two tips + rings of `sides`, leftovers tucked inside the volume
  int64_t interior = m - 2;
  int64_t sides = std::max<int64_t>(3, std::min<int64_t>(10, interior / 2));
  while (sides > 3 && interior / sides < 2) --sides;
  int64_t rings = std::max<int64_t>(1, interior / sides);
  int64_t used = rings * sides;
  int64_t extras = interior - used;

  // index 0..used-1: rings bottom to top; used, used+1: tips; rest: interior
  for (int64_t rgi = 0; rgi < rings; ++rgi) {
    double t = rings == 1 ? 0.5 : double(rgi) / double(rings - 1);
    for (int64_t i = 0; i < sides; ++i)
      push(ring_point(t, 2 * M_PI * double(i) / double(sides), s.radius));
  }
  Vec3 tip0 = axis_point(0.0), tip1 = axis_point(1.0);
  tip0 = {tip0[0] - u[0] * s.radius * 0.8, tip0[1] - u[1] * s.radius * 0.8,
          tip0[2] - u[2] * s.radius * 0.8};
  tip1 = {tip1[0] + u[0] * s.radius * 0.8, tip1[1] + u[1] * s.radius * 0.8,
          tip1[2] + u[2] * s.radius * 0.8};
  push(tip0);
  push(tip1);
  for (int64_t x = 0; x < extras; ++x) {
    double t = double(x + 1) / double(extras + 1);
    push(ring_point(t, 2.39996 * double(x), s.radius * 0.5));
  }

  for (int64_t rgi = 0; rgi + 1 < rings; ++rgi)
    for (int64_t i = 0; i < sides; ++i) {
      int64_t a0 = rgi * sides + i, a1 = rgi * sides + (i + 1) % sides;
      int64_t b0 = a0 + sides, b1 = a1 + sides;
      tri(a0, a1, b0);
      tri(a1, b1, b0);
    }
  for (int64_t i = 0; i < sides; ++i) {
    tri((i + 1) % sides, i, used);                                  // bottom fan
    tri((rings - 1) * sides + i, (rings - 1) * sides + (i + 1) % sides,
        used + 1);                                                  // top fan
  }
}

}  // namespace detail

// Deterministic humanoid-ish capsule body: K segments meshed into V
// vertices, nearest-two-bones skinning, smooth random shape basis scaled so
// a unit-norm beta moves vertices by at most 5% of body height.
inline BodyModelDef generate_toy_model(uint64_t seed, int64_t V, int64_t K,
                                       int64_t B) {
  if (K < 4) tensor_error("toy model: need K >= 4 joints");
  if (B < 1) tensor_error("toy model: need B >= 1 shape coefficients");
  if (V < 4 * K)
    tensor_error("toy model: need V >= 4K vertices (" + std::to_string(V) +
                 " < " + std::to_string(4 * K) + ")");

  std::vector<int32_t> parents;
  std::vector<Vec3> jpos;
  std::vector<double> jradius;
  detail::toy_skeleton(K, parents, jpos, jradius);

  // one segment per joint: root gets a vertical blob, joints with children
  // span to their first child, leaves get a stub along the parent bone
  std::vector<detail::Segment> segs(static_cast<size_t>(K));
  std::vector<int64_t> first_child(size_t(K), -1);
  for (int64_t k = K - 1; k >= 1; --k) first_child[size_t(parents[size_t(k)])] = k;
  for (int64_t k = 0; k < K; ++k) {
    if (k == 0) {
      segs[0] = {{jpos[0][0], jpos[0][1] - 0.05, jpos[0][2]},
                 {jpos[0][0], jpos[0][1] + 0.05, jpos[0][2]},
                 jradius[0]};
    } else if (first_child[size_t(k)] >= 0) {
      segs[size_t(k)] = {jpos[size_t(k)], jpos[size_t(first_child[size_t(k)])],
                         jradius[size_t(k)]};
    } else {
      Vec3 p = jpos[size_t(parents[size_t(k)])], c = jpos[size_t(k)];
      Vec3 dir = {c[0] - p[0], c[1] - p[1], c[2] - p[2]};
      double n = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
      if (n < 1e-9) dir = {0, 1, 0}, n = 1;
      double stub = 0.08;
      segs[size_t(k)] = {c,
                         {c[0] + dir[0] / n * stub, c[1] + dir[1] / n * stub,
                          c[2] + dir[2] / n * stub},
                         jradius[size_t(k)]};
    }
  }

  BodyModelDef m;
  m.V = V;
  m.K = K;
  m.B = B;
  m.parents = parents;

  // distribute vertices over segments
  std::vector<int64_t> per(size_t(K), V / K);
  for (int64_t k = 0; k < V % K; ++k) per[size_t(k)]++;
  std::vector<int64_t> seg_base(static_cast<size_t>(K));
  for (int64_t k = 0, at = 0; k < K; ++k) {
    seg_base[size_t(k)] = at;
    detail::mesh_segment(segs[size_t(k)], per[size_t(k)], at, m.v_template,
                         m.faces);
    at += per[size_t(k)];
  }
  m.T = int64_t(m.faces.size()) / 3;

  // nearest-two-bones skinning with inverse-distance normalization
  m.weights.assign(size_t(V * K), 0.0);
  for (int64_t v = 0; v < V; ++v) {
    Vec3 p = {m.v_template[size_t(v * 3)], m.v_template[size_t(v * 3 + 1)],
              m.v_template[size_t(v * 3 + 2)]};
    int64_t k1 = -1, k2 = -1;
    double d1 = 1e18, d2 = 1e18;
    for (int64_t k = 0; k < K; ++k) {
      double d = detail::point_segment_dist(p, segs[size_t(k)]);
      if (d < d1) {
        d2 = d1, k2 = k1;
        d1 = d, k1 = k;
      } else if (d < d2) {
        d2 = d, k2 = k;
      }
    }
    const double eps = 1e-3;
    double w1 = 1.0 / (d1 + eps), w2 = 1.0 / (d2 + eps);
    m.weights[size_t(v * K + k1)] = w1 / (w1 + w2);
    m.weights[size_t(v * K + k2)] = w2 / (w1 + w2);
  }

  // joint regressor: gaussian over the nearest handful of vertices
  m.joint_regressor.assign(size_t(K * V), 0.0);
  for (int64_t k = 0; k < K; ++k) {
    std::vector<std::pair<double, int64_t>> near;
    near.reserve(size_t(V));
    for (int64_t v = 0; v < V; ++v) {
      Vec3 p = {m.v_template[size_t(v * 3)], m.v_template[size_t(v * 3 + 1)],
                m.v_template[size_t(v * 3 + 2)]};
      double dx = p[0] - jpos[size_t(k)][0], dy = p[1] - jpos[size_t(k)][1],
             dz = p[2] - jpos[size_t(k)][2];
      near.push_back({std::sqrt(dx * dx + dy * dy + dz * dz), v});
    }
    int64_t take = std::min<int64_t>(8, V);
    std::partial_sort(near.begin(), near.begin() + take, near.end());
    double sigma = 0, sum = 0;
    for (int64_t i = 0; i < take; ++i) sigma += near[size_t(i)].first;
    sigma = sigma / double(take) + 1e-9;
    for (int64_t i = 0; i < take; ++i) {
      double d = near[size_t(i)].first;
      double w = std::exp(-(d * d) / (2 * sigma * sigma));
      m.joint_regressor[size_t(k * V + near[size_t(i)].second)] = w;
      sum += w;
    }
    for (int64_t v = 0; v < V; ++v) m.joint_regressor[size_t(k * V + v)] /= sum;
  }

  // body height for shape-basis scaling
  double ymin = 1e18, ymax = -1e18;
  for (int64_t v = 0; v < V; ++v) {
    ymin = std::min(ymin, m.v_template[size_t(v * 3 + 1)]);
    ymax = std::max(ymax, m.v_template[size_t(v * 3 + 1)]);
  }
  const double height = ymax - ymin;

  // smooth random shape basis: affine field plus one low-frequency sine,
  // each basis scaled so its peak displacement is (5% height)/sqrt(B)
  Rng rng(derive_key(seed, uint64_t(RngUse::toy_model)));
  m.shapedirs.assign(size_t(V * 3 * B), 0.0);
  for (int64_t b = 0; b < B; ++b) {
    double A[3][4], amp[3], freq[3], phase[3];
    for (auto& row : A)
      for (auto& x : row) x = rng.uniform(-1, 1);
    for (int i = 0; i < 3; ++i) {
      amp[i] = rng.uniform(-0.5, 0.5);
      freq[i] = rng.uniform(1.0, 3.0);
      phase[i] = rng.uniform(0.0, 2 * M_PI);
    }
    double peak = 0;
    std::vector<double> field(size_t(V * 3));
    for (int64_t v = 0; v < V; ++v) {
      double x = m.v_template[size_t(v * 3)], y = m.v_template[size_t(v * 3 + 1)],
             z = m.v_template[size_t(v * 3 + 2)];
      double n2 = 0;
      for (int i = 0; i < 3; ++i) {
        double val = A[i][0] * x + A[i][1] * y + A[i][2] * z + A[i][3] * 0.3 +
                     amp[i] * std::sin(freq[i] * (x + y + z) + phase[i]);
        field[size_t(v * 3 + i)] = val;
        n2 += val * val;
      }
      peak = std::max(peak, std::sqrt(n2));
    }
    double scale = (0.05 * height / std::sqrt(double(B))) / (peak + 1e-12);
    for (int64_t v = 0; v < V; ++v)
      for (int i = 0; i < 3; ++i)
        m.shapedirs[size_t((v * 3 + i) * B + b)] =
            field[size_t(v * 3 + i)] * scale;
  }

  m.validate();
  return m;
}

// ---- container I/O ----

inline void save_model(const BodyModelDef& m, const std::string& path) {
  Container c;
  c.config_hash = fnv1a_hex("body:" + std::to_string(m.V) + ":" +
                            std::to_string(m.K) + ":" + std::to_string(m.B));
  c.meta = {{"kind", "body_model"}};
  c.put_vector<double>("v_template", DType::f64, {m.V, 3}, m.v_template);
  c.put_vector<double>("shapedirs", DType::f64, {m.V, 3, m.B}, m.shapedirs);
  if (m.has_posedirs())
    c.put_vector<double>("posedirs", DType::f64, {m.V, 3, 9 * (m.K - 1)},
                         m.posedirs);
  c.put_vector<double>("weights", DType::f64, {m.V, m.K}, m.weights);
  c.put_vector<int32_t>("parents", DType::i32, {m.K}, m.parents);
  c.put_vector<int32_t>("faces", DType::i32, {m.T, 3}, m.faces);
  c.put_vector<double>("joint_regressor", DType::f64, {m.K, m.V},
                       m.joint_regressor);
  c.save(path);
}

inline BodyModelDef load_model(const std::string& path) {
  Container c = Container::load(path);
  for (const char* req : {"v_template", "shapedirs", "weights", "parents",
                          "faces", "joint_regressor"})
    if (!c.has(req))
      tensor_error("body model file: missing array '" + std::string(req) +
                   "'");
  BodyModelDef m;
  const auto& vt = c.get("v_template");
  m.V = vt.shape.at(0);
  const auto& sd = c.get("shapedirs");
  m.B = sd.shape.at(2);
  const auto& pr = c.get("parents");
  m.K = pr.shape.at(0);
  const auto& fc = c.get("faces");
  m.T = fc.shape.at(0);
  m.v_template = vt.as_vector<double>();
  m.shapedirs = sd.as_vector<double>();
  if (c.has("posedirs")) m.posedirs = c.get("posedirs").as_vector<double>();
  m.weights = c.get("weights").as_vector<double>();
  m.parents = pr.as_vector<int32_t>();
  m.faces = fc.as_vector<int32_t>();
  m.joint_regressor = c.get("joint_regressor").as_vector<double>();
  m.validate();
  return m;
}

}  // namespace parelab
