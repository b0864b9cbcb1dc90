#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include <parelab/body_model.hpp>
#include <parelab/camera.hpp>
#include <parelab/raster.hpp>

#include "oracles.hpp"

using namespace parelab;

namespace {

// Independent point-in-triangle oracle: consistent edge signs (boundary in).
bool inside_tri(double qx, double qy, const std::array<double, 2>& a,
                const std::array<double, 2>& b, const std::array<double, 2>& c) {
  auto edge = [&](const std::array<double, 2>& p, const std::array<double, 2>& q) {
    return (q[0] - p[0]) * (qy - p[1]) - (q[1] - p[1]) * (qx - p[0]);
  };
  double d1 = edge(a, b), d2 = edge(b, c), d3 = edge(c, a);
  bool neg = d1 < 0 || d2 < 0 || d3 < 0;
  bool pos = d1 > 0 || d2 > 0 || d3 > 0;
  return !(neg && pos);
}

// NDC coordinates whose pixel mapping hits the requested pixel center exactly.
double px_to_ndc(double px, int64_t extent) { return 2.0 * px / double(extent - 1) - 1.0; }

}  // namespace

TEST_CASE("projection drops z and applies scale then shift") {
  WeakPerspectiveCamera cam;  // s=1, t=0, R=I
  auto out = project_points({{0.3, -0.7, 2.5}}, cam);
  CHECK(out[0][0] == Catch::Approx(0.3).margin(1e-15));
  CHECK(out[0][1] == Catch::Approx(-0.7).margin(1e-15));

  cam.s = 2.0;
  cam.t = {1.0, 1.0};
  out = project_points({{0.5, -0.5, 7.0}}, cam);
  CHECK(out[0][0] == Catch::Approx(2.0).margin(1e-15));
  CHECK(out[0][1] == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("projection matches the direct formula on random batches") {
  Rng rng(7, RngUse::test, 0);
  for (int trial = 0; trial < 20; ++trial) {
    WeakPerspectiveCamera cam;
    cam.s = rng.uniform(0.2, 3.0);
    cam.t = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
    cam.R = axis_angle_to_matrix({rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)});
    std::vector<std::array<double, 3>> pts(50);
    for (auto& p : pts) p = {rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};

    auto got = project_points(pts, cam);
    double worst = 0;
    for (size_t i = 0; i < pts.size(); ++i) {
      double rx = cam.R[0] * pts[i][0] + cam.R[1] * pts[i][1] + cam.R[2] * pts[i][2];
      double ry = cam.R[3] * pts[i][0] + cam.R[4] * pts[i][1] + cam.R[5] * pts[i][2];
      worst = std::max(worst, std::abs(got[i][0] - (cam.s * rx + cam.t[0])));
      worst = std::max(worst, std::abs(got[i][1] - (cam.s * ry + cam.t[1])));
    }
    CHECK(worst <= 1e-12);
  }
}

TEST_CASE("projection linearity in the points for identity camera") {
  Rng rng(11, RngUse::test, 1);
  WeakPerspectiveCamera cam;  // s=1, t=0
  std::vector<std::array<double, 3>> pts(20), scaled(20);
  double alpha = 1.7;
  for (size_t i = 0; i < pts.size(); ++i) {
    pts[i] = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    for (int d = 0; d < 3; ++d) scaled[i][size_t(d)] = alpha * pts[i][size_t(d)];
  }
  auto a = project_points(pts, cam);
  auto b = project_points(scaled, cam);
  for (size_t i = 0; i < pts.size(); ++i) {
    CHECK(b[i][0] == Catch::Approx(alpha * a[i][0]).margin(1e-12));
    CHECK(b[i][1] == Catch::Approx(alpha * a[i][1]).margin(1e-12));
  }
}

TEST_CASE("camera validation rejects bad scale and non-orthonormal rotation") {
  WeakPerspectiveCamera cam;
  cam.validate();
  cam.s = 0.0;
  CHECK_THROWS_AS(cam.validate(), std::invalid_argument);
  cam.s = 1.0;
  cam.R[0] = 2.0;
  CHECK_THROWS_AS(cam.validate(), std::invalid_argument);
}

TEST_CASE("tensor projection agrees with the plain kernel and its gradients check out") {
  Rng rng(13, RngUse::test, 2);
  const int64_t N = 6;
  Mat3 R = axis_angle_to_matrix({0.4, -0.2, 0.9});

  std::vector<double> pv = oracle::random_vec(rng, N * 3);
  double sv = rng.uniform(0.5, 2.0);
  std::vector<double> tv = {rng.uniform(-1, 1), rng.uniform(-1, 1)};

  Tensor64 points = Tensor64::from_data({N, 3}, pv, true);
  Tensor64 s = Tensor64::from_data({1}, {sv}, true);
  Tensor64 t = Tensor64::from_data({2}, tv, true);
  Tensor64 proj = project(points, s, t, R);

  // forward agreement
  WeakPerspectiveCamera cam;
  cam.s = sv;
  cam.t = {tv[0], tv[1]};
  cam.R = R;
  std::vector<std::array<double, 3>> pts(N);
  for (int64_t i = 0; i < N; ++i)
    pts[size_t(i)] = {pv[size_t(3 * i)], pv[size_t(3 * i + 1)], pv[size_t(3 * i + 2)]};
  auto plain = project_points(pts, cam);
  for (int64_t i = 0; i < N; ++i) {
    CHECK(proj.data()[size_t(2 * i)] == Catch::Approx(plain[size_t(i)][0]).margin(1e-12));
    CHECK(proj.data()[size_t(2 * i) + 1] == Catch::Approx(plain[size_t(i)][1]).margin(1e-12));
  }

  // scalarize with fixed positive weights and check all three gradients by FD
  std::vector<double> wv = oracle::random_vec(rng, N * 2, 0.1, 1.0);
  Tensor64 w = Tensor64::from_data({N, 2}, wv);
  Tensor64 loss = sum(mul(proj, w));
  loss.backward();

  auto loss_of = [&](const std::vector<double>& p, double sc, const std::vector<double>& tc) {
    double acc = 0;
    for (int64_t i = 0; i < N; ++i) {
      double x = p[size_t(3 * i)], y = p[size_t(3 * i + 1)], z = p[size_t(3 * i + 2)];
      double rx = R[0] * x + R[1] * y + R[2] * z;
      double ry = R[3] * x + R[4] * y + R[5] * z;
      acc += wv[size_t(2 * i)] * (sc * rx + tc[0]);
      acc += wv[size_t(2 * i) + 1] * (sc * ry + tc[1]);
    }
    return acc;
  };

  auto gp = oracle::finite_diff(pv, [&](const std::vector<double>& p) { return loss_of(p, sv, tv); });
  auto gs = oracle::finite_diff({sv}, [&](const std::vector<double>& v) { return loss_of(pv, v[0], tv); });
  auto gt = oracle::finite_diff(tv, [&](const std::vector<double>& v) { return loss_of(pv, sv, v); });
  CHECK(oracle::max_rel_err(points.grad(), gp) <= 1e-6);
  CHECK(oracle::max_rel_err(s.grad(), gs) <= 1e-6);
  CHECK(oracle::max_rel_err(t.grad(), gt) <= 1e-6);
}

TEST_CASE("face labels take the dominant part, ties to the lower index") {
  BodyModelDef m;
  m.V = 4;
  m.K = 4;
  m.B = 1;
  m.T = 2;
  m.v_template = {0, 0, 0, 1, 0, 0, 0, 1, 0, 1, 1, 0};
  m.shapedirs.assign(size_t(m.V * 3 * m.B), 0.0);
  m.parents = {-1, 0, 1, 2};
  m.faces = {0, 1, 2, 1, 2, 3};
  // face 0: all three vertices fully on part 2 (index 2 -> label 3)
  // face 1: vertices split so parts 0 and 1 tie exactly -> label 1
  m.weights = {
      0.0, 0.0, 1.0, 0.0,   // v0: bone 2
      0.5, 0.5, 0.5 - 0.5, 0.5 - 0.5 + 0.0,  // placeholder, replaced below
      0.0, 0.0, 1.0, 0.0,   // v2: bone 2
      0.0, 1.0, 0.0, 0.0,   // v3: bone 1
  };
  // v1: equal halves on bones 0 and 1
  m.weights[4] = 0.5;
  m.weights[5] = 0.5;
  m.weights[6] = 0.0;
  m.weights[7] = 0.0;
  // v2 contributes bone 0 for face 1's tie: set v2 half bone0 half bone2
  m.weights[8] = 0.5;
  m.weights[9] = 0.0;
  m.weights[10] = 0.5;
  m.weights[11] = 0.0;
  m.joint_regressor.assign(size_t(m.K * m.V), 0.0);
  for (int64_t k = 0; k < m.K; ++k) m.joint_regressor[size_t(k * m.V + k % m.V)] = 1.0;

  auto labels = face_part_labels(m);
  REQUIRE(labels.size() == 2);
  // face 0 sums: bone0 = 0.5 (v2), bone2 = 2.5 -> label 3... recompute:
  // v0 bone2=1, v1 bone0/1=.5/.5, v2 bone0=.5 bone2=.5 => bone0=1.0, bone1=0.5, bone2=1.5
  CHECK(labels[0] == 3);
  // face 1: v1 (.5,.5,0,0), v2 (.5,0,.5,0), v3 (0,1,0,0) => bone0=1.0, bone1=1.5, bone2=0.5
  CHECK(labels[1] == 2);
}

TEST_CASE("face labels: exact tie picks the lower part") {
  BodyModelDef m;
  m.V = 3;
  m.K = 2;
  m.B = 1;
  m.T = 1;
  m.v_template = {0, 0, 0, 1, 0, 0, 0, 1, 0};
  m.shapedirs.assign(size_t(m.V * 3 * m.B), 0.0);
  m.parents = {-1, 0};
  m.faces = {0, 1, 2};
  m.weights = {0.5, 0.5, 0.5, 0.5, 0.5, 0.5};
  m.joint_regressor = {1, 0, 0, 0, 1, 0};
  auto labels = face_part_labels(m);
  REQUIRE(labels.size() == 1);
  CHECK(labels[0] == 1);
}

TEST_CASE("toy model uses every part label on at least one face") {
  auto m = generate_toy_model(3, 600, 24, 8);
  auto labels = face_part_labels(m);
  std::vector<int> seen(size_t(m.K) + 1, 0);
  for (int lab : labels) {
    REQUIRE(lab >= 1);
    REQUIRE(lab <= int(m.K));
    seen[size_t(lab)] = 1;
  }
  for (int64_t k = 1; k <= m.K; ++k) CHECK(seen[size_t(k)] == 1);
}

TEST_CASE("empty face list renders pure background") {
  std::vector<std::array<double, 3>> mesh = {{0, 0, 1}};
  auto out = rasterize(mesh, std::vector<int64_t>{}, std::vector<int>{},
                       WeakPerspectiveCamera{}, 8, 8);
  for (int v : out.label_map) CHECK(v == 0);
  for (double d : out.depth) CHECK(std::isinf(d));
  CHECK(out.vertex_visible.size() == 1);
}

TEST_CASE("one large triangle labels the pixels the oracle says it covers") {
  const int64_t H = 33, W = 33;
  // place vertices at known NDC spots
  std::vector<std::array<double, 3>> mesh = {
      {px_to_ndc(4.0, W), px_to_ndc(4.0, H), 1.0},
      {px_to_ndc(28.0, W), px_to_ndc(6.0, H), 1.0},
      {px_to_ndc(12.0, W), px_to_ndc(30.0, H), 1.0},
  };
  auto out = rasterize(mesh, {0, 1, 2}, {3}, WeakPerspectiveCamera{}, H, W);

  std::array<double, 2> a{4.0, 4.0}, b{28.0, 6.0}, c{12.0, 30.0};
  int covered = 0;
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      bool in = inside_tri(double(x), double(y), a, b, c);
      int lab = out.label_at(y, x);
      if (in) {
        CHECK(lab == 3);
        ++covered;
      } else {
        CHECK(lab == 0);
      }
    }
  CHECK(covered > 100);  // the triangle really covers a region
  CHECK(out.label_at(16, 14) == 3);  // interior spot-check
}

TEST_CASE("z-buffer keeps the nearer triangle on the overlap") {
  const int64_t H = 17, W = 17;
  auto tri = [&](double z) -> std::vector<std::array<double, 3>> {
    return {{px_to_ndc(2, W), px_to_ndc(2, H), z},
            {px_to_ndc(14, W), px_to_ndc(2, H), z},
            {px_to_ndc(8, W), px_to_ndc(14, H), z}};
  };
  auto mesh = tri(1.0);
  auto far = tri(2.0);
  mesh.insert(mesh.end(), far.begin(), far.end());
  auto out = rasterize(mesh, {0, 1, 2, 3, 4, 5}, {7, 9}, WeakPerspectiveCamera{}, H, W);
  CHECK(out.label_at(6, 8) == 7);
  CHECK(out.depth_at(6, 8) == Catch::Approx(1.0));

  // same geometry listed in the opposite order: nearer still wins
  std::vector<std::array<double, 3>> mesh2 = far;
  auto near_tri = tri(1.0);
  mesh2.insert(mesh2.end(), near_tri.begin(), near_tri.end());
  auto out2 = rasterize(mesh2, {0, 1, 2, 3, 4, 5}, {9, 7}, WeakPerspectiveCamera{}, H, W);
  CHECK(out2.label_at(6, 8) == 7);

  // exactly equal depths: the earlier face in the list wins
  std::vector<std::array<double, 3>> tie = tri(1.5);
  auto t2 = tri(1.5);
  tie.insert(tie.end(), t2.begin(), t2.end());
  auto out4 = rasterize(tie, {0, 1, 2, 3, 4, 5}, {4, 6}, WeakPerspectiveCamera{}, H, W);
  CHECK(out4.label_at(6, 8) == 4);
}

TEST_CASE("back faces render (two-sided) and zero-area faces are skipped") {
  const int64_t H = 9, W = 9;
  std::vector<std::array<double, 3>> mesh = {
      {px_to_ndc(1, W), px_to_ndc(1, H), 1.0},
      {px_to_ndc(7, W), px_to_ndc(1, H), 1.0},
      {px_to_ndc(4, W), px_to_ndc(7, H), 1.0},
  };
  auto ccw = rasterize(mesh, {0, 1, 2}, {5}, WeakPerspectiveCamera{}, H, W);
  auto cw = rasterize(mesh, {0, 2, 1}, {5}, WeakPerspectiveCamera{}, H, W);
  CHECK(ccw.label_map == cw.label_map);
  CHECK(ccw.label_at(3, 4) == 5);

  // a degenerate triangle (all vertices collinear) contributes nothing
  std::vector<std::array<double, 3>> line = {
      {px_to_ndc(1, W), px_to_ndc(1, H), 0.5},
      {px_to_ndc(4, W), px_to_ndc(4, H), 0.5},
      {px_to_ndc(7, W), px_to_ndc(7, H), 0.5},
  };
  auto deg = rasterize(line, {0, 1, 2}, {2}, WeakPerspectiveCamera{}, H, W);
  for (int v : deg.label_map) CHECK(v == 0);
}

TEST_CASE("every lit pixel is inside some projected face (random meshes)") {
  Rng rng(21, RngUse::test, 3);
  for (int trial = 0; trial < 5; ++trial) {
    const int64_t H = 21, W = 21;
    const int64_t nf = 6;
    std::vector<std::array<double, 3>> mesh;
    std::vector<int64_t> faces;
    std::vector<int> labels;
    for (int64_t f = 0; f < nf; ++f) {
      for (int v = 0; v < 3; ++v)
        mesh.push_back({rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9), rng.uniform(0.5, 2.0)});
      faces.insert(faces.end(), {3 * f, 3 * f + 1, 3 * f + 2});
      labels.push_back(int(f) + 1);
    }
    WeakPerspectiveCamera cam;
    auto out = rasterize(mesh, faces, labels, cam, H, W);

    auto xy = project_points(mesh, cam);
    std::vector<std::array<double, 2>> px(mesh.size());
    for (size_t v = 0; v < mesh.size(); ++v)
      px[v] = {(xy[v][0] + 1) * 0.5 * double(W - 1), (xy[v][1] + 1) * 0.5 * double(H - 1)};

    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        int lab = out.label_at(y, x);
        if (lab == 0) continue;
        bool found = false;
        for (int64_t f = 0; f < nf && !found; ++f)
          found = inside_tri(double(x), double(y), px[size_t(3 * f)],
                             px[size_t(3 * f + 1)], px[size_t(3 * f + 2)]);
        CHECK(found);
      }
  }
}

TEST_CASE("visibility soundness: no face sits in front of a visible vertex") {
  auto model = generate_toy_model(5, 400, 24, 4);
  auto flat = lbs(model, Pose::identity(model.K), std::vector<double>(size_t(model.B), 0.0));
  auto mesh = as_points(flat);
  WeakPerspectiveCamera cam;
  cam.s = 1.0;
  auto labels = face_part_labels(model);
  const int64_t H = 64, W = 64;
  auto out = rasterize(flat, model.faces, labels, cam, H, W);

  auto xy = project_points(mesh, cam);
  auto pz = camera_depths(mesh, cam.R);

  // tolerance recomputed independently from the mesh bbox
  double lo[3] = {1e300, 1e300, 1e300}, hi[3] = {-1e300, -1e300, -1e300};
  for (auto& p : mesh)
    for (int d = 0; d < 3; ++d) {
      lo[d] = std::min(lo[d], p[size_t(d)]);
      hi[d] = std::max(hi[d], p[size_t(d)]);
    }
  double diag = std::sqrt((hi[0] - lo[0]) * (hi[0] - lo[0]) +
                          (hi[1] - lo[1]) * (hi[1] - lo[1]) +
                          (hi[2] - lo[2]) * (hi[2] - lo[2]));
  double tol = 1e-4 * diag;

  // Recompute the documented rule independently: a vertex is visible iff its
  // rounded pixel is in-image and covered, and either the winning face has the
  // vertex as a corner or the z-buffer agrees with the vertex depth within tol.
  int visible = 0;
  for (size_t v = 0; v < mesh.size(); ++v) {
    int64_t ix = int64_t(std::lround((xy[v][0] + 1) * 0.5 * double(W - 1)));
    int64_t iy = int64_t(std::lround((xy[v][1] + 1) * 0.5 * double(H - 1)));
    bool expect = false;
    if (ix >= 0 && ix < W && iy >= 0 && iy < H) {
      int64_t win = out.face_at(iy, ix);
      if (win >= 0) {
        bool corner = false;
        for (int c = 0; c < 3; ++c)
          corner = corner || size_t(model.faces[size_t(3 * win + c)]) == v;
        expect = corner || std::abs(out.depth_at(iy, ix) - pz[v]) <= tol;
      }
    }
    CHECK(bool(out.vertex_visible[v]) == expect);
    if (out.vertex_visible[v]) {
      ++visible;
      // soundness: nothing sits in front of the vertex's own surface at its
      // pixel. The winning face passes through the vertex (or matches its
      // depth), so the buffer can be nearer than the vertex by at most the
      // winning face's own depth extent plus the tolerance.
      int64_t win = out.face_at(iy, ix);
      REQUIRE(win >= 0);
      double span = 0;
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b)
          span = std::max(span, pz[size_t(model.faces[size_t(3 * win + a)])] -
                                    pz[size_t(model.faces[size_t(3 * win + b)])]);
      CHECK(out.depth_at(iy, ix) >= pz[v] - span - tol);
      CHECK(out.depth_at(iy, ix) <= pz[v] + tol + span);
    }
  }
  // A rest pose shows a meaningful share of the surface. Limbs span only a
  // few pixels at this resolution, so many front vertices legitimately round
  // to a pixel whose winner is a neighboring face and fail the strict rule.
  CHECK(visible > int(mesh.size()) * 3 / 20);
  // ...and at least some vertices are hidden by nearer geometry
  int hidden = int(mesh.size()) - visible;
  CHECK(hidden > 0);
}

TEST_CASE("rasterizer output is deterministic") {
  auto model = generate_toy_model(9, 256, 16, 4);
  auto mesh = lbs(model, Pose::identity(model.K), std::vector<double>(size_t(model.B), 0.0));
  auto labels = face_part_labels(model);
  WeakPerspectiveCamera cam;
  auto a = rasterize(mesh, model.faces, labels, cam, 48, 48);
  auto b = rasterize(mesh, model.faces, labels, cam, 48, 48);
  CHECK(a.label_map == b.label_map);
  CHECK(a.depth == b.depth);
  CHECK(a.vertex_visible == b.vertex_visible);
}

TEST_CASE("rasterize rejects bad arguments") {
  std::vector<std::array<double, 3>> one = {{0, 0, 1}};
  std::vector<int64_t> pair = {0, 0};
  std::vector<int64_t> tri = {0, 0, 0};
  std::vector<int> lab1 = {1};
  std::vector<int> lab2 = {1, 2};
  CHECK_THROWS_AS(rasterize(std::vector<std::array<double, 3>>{}, std::vector<int64_t>{},
                            std::vector<int>{}, WeakPerspectiveCamera{}, 0, 8),
                  std::invalid_argument);
  CHECK_THROWS_AS(rasterize(one, pair, lab1, WeakPerspectiveCamera{}, 8, 8),
                  std::invalid_argument);
  CHECK_THROWS_AS(rasterize(one, tri, lab2, WeakPerspectiveCamera{}, 8, 8),
                  std::invalid_argument);
}
