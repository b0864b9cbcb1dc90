#pragma once
//
// Occlusion-sensitivity analysis. A gray patch slides across the input on а
// regular grid; at every position the network re-estimates the body and the
// per-joint 3D error (root-aligned, no similarity alignment) is recorded,
// yielding one error grid per joint plus their mean as an aggregate channel.
// Per-image grids are transferred onto the predicted mesh at the visible
// vertices and pooled over a dataset into a per-vertex sensitivity mesh.
// Exporters write heatmap PNGs with recorded ranges, colored PLY meshes, and
// raw CSV grids.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "parelab/body_model.hpp"
#include "parelab/camera.hpp"
#include "parelab/data.hpp"
#include "parelab/image_io.hpp"
#include "parelab/losses.hpp"
#include "parelab/net.hpp"
#include "parelab/raster.hpp"
#include "parelab/tensor.hpp"

namespace parelab {

// ---------------------------------------------------------------------------
// configuration

struct ProbeConfig {
  int64_t patch_size = 12;
  int64_t stride = 0;  // 0 resolves to patch_size / 3, rounded, at least 1
  double gray = 0.5;   // patch fill, in [0,1] image space
  int64_t threads = 1;

  int64_t resolved_stride() const {
    if (stride > 0) return stride;
    return std::max<int64_t>(1, std::llround(double(patch_size) / 3.0));
  }

  void validate(int64_t image_size) const {
    if (patch_size < 1)
      throw std::invalid_argument("probe: patch_size must be >= 1");
    if (patch_size >= image_size)
      throw std::invalid_argument("probe: the patch must be smaller than the image");
    if (stride < 0) throw std::invalid_argument("probe: stride must be >= 0");
    if (!(gray >= 0.0 && gray <= 1.0))
      throw std::invalid_argument("probe: gray must lie in [0,1]");
    if (threads < 1) throw std::invalid_argument("probe: threads must be >= 1");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"patch_size", patch_size},
                          {"stride", stride},
                          {"gray", gray},
                          {"threads", threads}};
  }

  static ProbeConfig from_json(const nlohmann::json& j) {
    ProbeConfig c;
    nlohmann::json known = c.to_json();
    for (auto it = j.begin(); it != j.end(); ++it)
      if (!known.contains(it.key()))
        throw std::invalid_argument("probe config: unknown key '" + it.key() + "'");
    c.patch_size = j.value("patch_size", c.patch_size);
    c.stride = j.value("stride", c.stride);
    c.gray = j.value("gray", c.gray);
    c.threads = j.value("threads", c.threads);
    return c;
  }
};

// ---------------------------------------------------------------------------
// domain types

// Per-position error grids for one image: channels 0..joints-1 hold each
// joint's error with the patch centered at that grid node, channel `joints`
// holds their mean. Grid node (iy, ix) corresponds to the pixel
// (ix*stride, iy*stride); patches are clipped at the borders so the grid
// covers the full image.
struct SensitivityMap {
  int64_t image_size = 0;
  int64_t patch_size = 0;
  int64_t stride = 0;
  double gray = 0.5;
  int64_t joints = 0;
  int64_t gy = 0, gx = 0;
  std::vector<double> grid;                // (joints+1) * gy * gx, aggregate last
  std::vector<double> baseline_per_joint;  // joints; error with no patch
  double baseline_error = 0.0;             // mean of the per-joint baselines

  int64_t channels() const { return joints + 1; }
  int64_t aggregate_channel() const { return joints; }

  double at(int64_t ch, int64_t iy, int64_t ix) const {
    return grid[size_t((ch * gy + iy) * gx + ix)];
  }
  double& at(int64_t ch, int64_t iy, int64_t ix) {
    return grid[size_t((ch * gy + iy) * gx + ix)];
  }

  // Bilinear sample of one channel at a continuous pixel position. Pixels
  // past the last grid node clamp to the border cells.
  double sample(int64_t ch, double px, double py) const {
    const double gxf = px / double(stride), gyf = py / double(stride);
    const int64_t x0 = std::clamp<int64_t>(int64_t(std::floor(gxf)), 0, gx - 1);
    const int64_t y0 = std::clamp<int64_t>(int64_t(std::floor(gyf)), 0, gy - 1);
    const int64_t x1 = std::min<int64_t>(x0 + 1, gx - 1);
    const int64_t y1 = std::min<int64_t>(y0 + 1, gy - 1);
    const double fx = std::clamp(gxf - double(x0), 0.0, 1.0);
    const double fy = std::clamp(gyf - double(y0), 0.0, 1.0);
    const double top = (1.0 - fx) * at(ch, y0, x0) + fx * at(ch, y0, x1);
    const double bot = (1.0 - fx) * at(ch, y1, x0) + fx * at(ch, y1, x1);
    return (1.0 - fy) * top + fy * bot;
  }

  void validate() const {
    if (image_size < 1 || joints < 1 || gy < 1 || gx < 1 || stride < 1)
      throw std::runtime_error("sensitivity map: bad dimensions");
    if (gy != (image_size - 1) / stride + 1 || gx != gy)
      throw std::runtime_error("sensitivity map: grid does not match the stride");
    if (int64_t(grid.size()) != channels() * gy * gx)
      throw std::runtime_error("sensitivity map: grid length mismatch");
    if (int64_t(baseline_per_joint.size()) != joints)
      throw std::runtime_error("sensitivity map: baseline length mismatch");
    for (double v : grid)
      if (!std::isfinite(v))
        throw std::runtime_error("sensitivity map: grid must be finite");
  }
};

// Per-vertex pooled error: one channel per joint plus the aggregate, each with
// an accumulated error sum and a contribution count per vertex. The mean is
// defined only where the count is positive.
struct SensitivityMesh {
  int64_t channels = 0;  // joints + 1, aggregate last
  int64_t vertices = 0;
  std::vector<double> error_sum;  // channels * vertices
  std::vector<int64_t> count;     // channels * vertices

  static SensitivityMesh zeros(int64_t channels_, int64_t vertices_) {
    SensitivityMesh m;
    m.channels = channels_;
    m.vertices = vertices_;
    m.error_sum.assign(size_t(channels_ * vertices_), 0.0);
    m.count.assign(size_t(channels_ * vertices_), 0);
    return m;
  }

  double mean_at(int64_t ch, int64_t v) const {
    const size_t i = size_t(ch * vertices + v);
    return count[i] > 0 ? error_sum[i] / double(count[i])
                        : std::numeric_limits<double>::quiet_NaN();
  }

  void accumulate(const SensitivityMesh& other) {
    if (other.channels != channels || other.vertices != vertices)
      throw std::invalid_argument("sensitivity mesh: shape mismatch");
    for (size_t i = 0; i < error_sum.size(); ++i) {
      error_sum[i] += other.error_sum[i];
      count[i] += other.count[i];
    }
  }
};

// ---------------------------------------------------------------------------
// probing

namespace detail {

// Overwrite the square patch centered at pixel (cx, cy), clipped to the image.
inline void paint_patch(std::vector<double>& image, int64_t size, int64_t cx,
                        int64_t cy, int64_t patch, double gray) {
  const int64_t half = patch / 2;
  const int64_t x0 = std::max<int64_t>(0, cx - half);
  const int64_t y0 = std::max<int64_t>(0, cy - half);
  const int64_t x1 = std::min(size, cx - half + patch);
  const int64_t y1 = std::min(size, cy - half + patch);
  for (int64_t y = y0; y < y1; ++y)
    for (int64_t x = x0; x < x1; ++x)
      for (int64_t c = 0; c < 3; ++c)
        image[size_t((y * size + x) * 3 + c)] = gray;
}

// Inference on one interleaved-RGB image: root-aligned per-joint errors
// against the given ground truth, plus the predicted geometry.
struct SingleInference {
  std::vector<double> per_joint;  // root-aligned distances, length units
  double mean_error = 0.0;        // mean of per_joint
  std::vector<double> mesh;       // V*3 predicted vertices
  WeakPerspectiveCamera cam;      // predicted camera
};

inline SingleInference infer_errors(PartAttentionNet& net, BodyTensors& body,
                                    const std::vector<double>& image,
                                    int64_t size, const Points3& gt_joints) {
  std::vector<double> planar(image.size());
  const int64_t px_count = size * size;
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t p = 0; p < px_count; ++p)
      planar[size_t(c * px_count + p)] = image[size_t(3 * p + c)];
  Tensor64 input = Tensor64::from_data({1, 3, size, size}, std::move(planar));
  ForwardOut fwd = net.forward(input, net.params.step_count(), &body);

  SingleInference out;
  const Points3 pj = as_points(fwd.pred.joints3d[0].data());
  out.per_joint = per_joint_error(pj, gt_joints);
  out.mean_error =
      std::accumulate(out.per_joint.begin(), out.per_joint.end(), 0.0) /
      double(out.per_joint.size());
  out.mesh = fwd.pred.mesh[0].data();
  out.cam.s = fwd.pred.cam_s.data()[0];
  out.cam.t = {fwd.pred.cam_t.data()[0], fwd.pred.cam_t.data()[1]};
  return out;
}

struct ProbeImageResult {
  SensitivityMap map;
  SingleInference clean;  // the no-patch inference behind baseline_error
};

inline ProbeImageResult probe_image_full(PartAttentionNet& net,
                                         const BodyModelDef& model,
                                         const Sample& sample,
                                         const ProbeConfig& cfg) {
  cfg.validate(sample.image_size);
  if (sample.joints3d_gt.empty())
    throw std::invalid_argument("probe: sample has no 3D ground truth");
  if (net.cfg.image_size != sample.image_size)
    throw std::invalid_argument("probe: network expects " +
                                std::to_string(net.cfg.image_size) +
                                "px input, sample is " +
                                std::to_string(sample.image_size) + "px");
  if (net.cfg.joints != int64_t(sample.joints3d_gt.size()))
    throw std::invalid_argument("probe: joint count mismatch");

  InferenceModeGuard mode_guard(net);
  BodyTensors body(model);
  const int64_t size = sample.image_size;
  const int64_t stride = cfg.resolved_stride();

  ProbeImageResult out;
  SensitivityMap& map = out.map;
  map.image_size = size;
  map.patch_size = cfg.patch_size;
  map.stride = stride;
  map.gray = cfg.gray;
  map.joints = net.cfg.joints;
  map.gy = map.gx = (size - 1) / stride + 1;
  map.grid.assign(size_t(map.channels() * map.gy * map.gx), 0.0);

  {
    NoGradGuard tape_guard;
    out.clean = infer_errors(net, body, sample.image, size, sample.joints3d_gt);
  }
  map.baseline_per_joint = out.clean.per_joint;
  map.baseline_error = out.clean.mean_error;

  // Grid positions are independent inferences; workers stride across the
  // cell index and write disjoint entries, so the result does not depend on
  // the worker count.
  const int64_t cells = map.gy * map.gx;
  const int64_t workers = std::min<int64_t>(cfg.threads, cells);
  std::exception_ptr first_error;
  std::mutex error_mutex;

  auto run_cells = [&](int64_t begin, int64_t step) {
    NoGradGuard tape_guard;
    try {
      for (int64_t cell = begin; cell < cells; cell += step) {
        const int64_t iy = cell / map.gx, ix = cell % map.gx;
        std::vector<double> patched = sample.image;
        paint_patch(patched, size, ix * stride, iy * stride, cfg.patch_size,
                    cfg.gray);
        SingleInference si =
            infer_errors(net, body, patched, size, sample.joints3d_gt);
        for (int64_t j = 0; j < map.joints; ++j)
          map.at(j, iy, ix) = si.per_joint[size_t(j)];
        map.at(map.aggregate_channel(), iy, ix) = si.mean_error;
      }
    } catch (...) {
      std::lock_guard<std::mutex> lock(error_mutex);
      if (!first_error) first_error = std::current_exception();
    }
  };

  if (workers <= 1) {
    run_cells(0, 1);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(size_t(workers));
    for (int64_t w = 0; w < workers; ++w)
      pool.emplace_back(run_cells, w, workers);
    for (std::thread& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);
  return out;
}

}  // namespace detail

inline SensitivityMap probe_image(PartAttentionNet& net, const BodyModelDef& model,
                                  const Sample& sample, const ProbeConfig& cfg) {
  return detail::probe_image_full(net, model, sample, cfg).map;
}

// ---------------------------------------------------------------------------
// transfer to the mesh

// Sample every channel of the error grid at each visible vertex's projected
// pixel (bilinear); vertices that are marked hidden or that project outside
// the image contribute nothing.
inline SensitivityMesh transfer_to_mesh(const SensitivityMap& map,
                                        const std::vector<double>& mesh_flat,
                                        const WeakPerspectiveCamera& cam,
                                        const std::vector<uint8_t>& visibility) {
  if (mesh_flat.size() % 3 != 0)
    throw std::invalid_argument("transfer: mesh must be V*3 values");
  const int64_t v_count = int64_t(mesh_flat.size() / 3);
  if (int64_t(visibility.size()) != v_count)
    throw std::invalid_argument("transfer: one visibility flag per vertex");

  SensitivityMesh out = SensitivityMesh::zeros(map.channels(), v_count);
  const Points2 ndc = project_points(as_points(mesh_flat), cam);
  const double half_px = 0.5 * double(map.image_size - 1);
  for (int64_t v = 0; v < v_count; ++v) {
    if (!visibility[size_t(v)]) continue;
    const double px = (ndc[size_t(v)][0] + 1.0) * half_px;
    const double py = (ndc[size_t(v)][1] + 1.0) * half_px;
    if (px < 0.0 || px > double(map.image_size - 1) || py < 0.0 ||
        py > double(map.image_size - 1))
      continue;
    for (int64_t ch = 0; ch < map.channels(); ++ch) {
      out.error_sum[size_t(ch * v_count + v)] += map.sample(ch, px, py);
      out.count[size_t(ch * v_count + v)] += 1;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// dataset aggregation

struct DatasetSensitivity {
  SensitivityMesh mesh;    // pooled per-vertex contributions
  SensitivityMap mean_map; // element-wise mean of the per-image grids
  int64_t images = 0;
};

// Probes each sample (in index order), overlays the predicted body to collect
// per-vertex contributions, and accumulates both the mesh and the mean grid.
// The reduction is sequential and ordered, so results are reproducible.
// `limit` > 0 restricts the pass to the first `limit` samples.
inline DatasetSensitivity aggregate_dataset(PartAttentionNet& net,
                                            const BodyModelDef& model,
                                            const Dataset& ds,
                                            const ProbeConfig& cfg,
                                            int64_t limit = 0) {
  if (ds.samples.empty())
    throw std::invalid_argument("aggregate: dataset is empty");
  const int64_t n = limit > 0 ? std::min<int64_t>(limit, int64_t(ds.samples.size()))
                              : int64_t(ds.samples.size());
  const std::vector<int> face_labels = face_part_labels(model);

  DatasetSensitivity out;
  out.mesh = SensitivityMesh::zeros(net.cfg.joints + 1, model.V);
  for (int64_t i = 0; i < n; ++i) {
    const Sample& s = ds.samples[size_t(i)];
    detail::ProbeImageResult r = detail::probe_image_full(net, model, s, cfg);

    const RasterOutput raster =
        rasterize(r.clean.mesh, model.faces, face_labels, r.clean.cam,
                  s.image_size, s.image_size);
    out.mesh.accumulate(
        transfer_to_mesh(r.map, r.clean.mesh, r.clean.cam, raster.vertex_visible));

    if (i == 0) {
      out.mean_map = r.map;
    } else {
      for (size_t g = 0; g < out.mean_map.grid.size(); ++g)
        out.mean_map.grid[g] += r.map.grid[g];
      for (size_t j = 0; j < out.mean_map.baseline_per_joint.size(); ++j)
        out.mean_map.baseline_per_joint[j] += r.map.baseline_per_joint[j];
      out.mean_map.baseline_error += r.map.baseline_error;
    }
    ++out.images;
  }

  const double inv = 1.0 / double(out.images);
  for (double& g : out.mean_map.grid) g *= inv;
  for (double& b : out.mean_map.baseline_per_joint) b *= inv;
  out.mean_map.baseline_error *= inv;
  return out;
}

// ---------------------------------------------------------------------------
// exports

namespace detail {

inline std::string channel_name(const SensitivityMap& map, int64_t ch) {
  if (ch == map.aggregate_channel()) return "aggregate";
  char buf[32];
  std::snprintf(buf, sizeof buf, "joint_%02lld", static_cast<long long>(ch));
  return buf;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

// One PNG per channel, each normalized to its own range through the heat
// colormap (flat channels render as the low end). The per-panel ranges and
// the baseline go to <prefix>_ranges.json so the absolute scale is never
// lost. Returns the ranges document.
inline nlohmann::json export_map_pngs(const SensitivityMap& map,
                                      const std::string& prefix) {
  map.validate();
  nlohmann::json ranges;
  ranges["baseline_error"] = map.baseline_error;
  ranges["units"] = "length units, root-aligned joint error";
  for (int64_t ch = 0; ch < map.channels(); ++ch) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (int64_t iy = 0; iy < map.gy; ++iy)
      for (int64_t ix = 0; ix < map.gx; ++ix) {
        lo = std::min(lo, map.at(ch, iy, ix));
        hi = std::max(hi, map.at(ch, iy, ix));
      }
    const std::string name = detail::channel_name(map, ch);
    ranges[name] = {{"min", lo}, {"max", hi}};

    std::vector<double> rgb(size_t(map.gy * map.gx * 3));
    const double span = hi - lo;
    for (int64_t iy = 0; iy < map.gy; ++iy)
      for (int64_t ix = 0; ix < map.gx; ++ix) {
        const double t = span > 0 ? (map.at(ch, iy, ix) - lo) / span : 0.0;
        const Rgb c = colormap_heat(t);
        const size_t base = size_t((iy * map.gx + ix) * 3);
        rgb[base] = c[0];
        rgb[base + 1] = c[1];
        rgb[base + 2] = c[2];
      }
    write_png_rgb(prefix + "_" + name + ".png", map.gy, map.gx, rgb);
  }
  std::ofstream f(prefix + "_ranges.json");
  if (!f) throw std::runtime_error("cannot open for writing: " + prefix + "_ranges.json");
  f << ranges.dump(2) << "\n";
  return ranges;
}

// Colored rest-pose mesh for one channel: vertex color encodes the mean
// pooled error through the heat colormap; vertices that never received a
// contribution render neutral gray. The value range sits in the header.
inline void export_sensitivity_ply(const std::string& path,
                                   const BodyModelDef& model,
                                   const SensitivityMesh& mesh, int64_t channel) {
  if (mesh.vertices != model.V)
    throw std::invalid_argument("ply export: mesh vertex count mismatch");
  if (channel < 0 || channel >= mesh.channels)
    throw std::invalid_argument("ply export: channel out of range");

  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (int64_t v = 0; v < mesh.vertices; ++v) {
    const double m = mesh.mean_at(channel, v);
    if (std::isnan(m)) continue;
    lo = std::min(lo, m);
    hi = std::max(hi, m);
  }
  const bool any = std::isfinite(lo);
  const double span = any ? hi - lo : 0.0;

  const Rgb neutral = {0.5, 0.5, 0.5};
  std::vector<Rgb> colors(size_t(mesh.vertices), neutral);
  for (int64_t v = 0; v < mesh.vertices; ++v) {
    const double m = mesh.mean_at(channel, v);
    if (std::isnan(m)) continue;
    const double t = span > 0 ? (m - lo) / span : 0.0;
    colors[size_t(v)] = colormap_heat(t);
  }

  std::vector<std::string> comments = {
      "occlusion sensitivity, channel " + std::to_string(channel)};
  if (any)
    comments.push_back("error range " + detail::format_double(lo) + " to " +
                       detail::format_double(hi) + " (length units)");
  else
    comments.push_back("no vertex received a contribution");

  write_ply(path, as_points(model.v_template), as_face_indices(model.faces),
            colors, comments);
}

// Raw grids at full double precision, with enough metadata to reconstruct
// the map exactly.
inline void write_sensitivity_csv(const SensitivityMap& map,
                                  const std::string& path) {
  map.validate();
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f << "sensitivity_map,1\n";
  f << "image_size," << map.image_size << "\n";
  f << "patch_size," << map.patch_size << "\n";
  f << "stride," << map.stride << "\n";
  f << "gray," << detail::format_double(map.gray) << "\n";
  f << "joints," << map.joints << "\n";
  f << "gy," << map.gy << "\n";
  f << "gx," << map.gx << "\n";
  f << "baseline_error," << detail::format_double(map.baseline_error) << "\n";
  f << "baseline_per_joint";
  for (double b : map.baseline_per_joint) f << "," << detail::format_double(b);
  f << "\n";
  for (int64_t ch = 0; ch < map.channels(); ++ch) {
    f << "channel," << detail::channel_name(map, ch) << "\n";
    for (int64_t iy = 0; iy < map.gy; ++iy) {
      for (int64_t ix = 0; ix < map.gx; ++ix)
        f << (ix ? "," : "") << detail::format_double(map.at(ch, iy, ix));
      f << "\n";
    }
  }
  if (!f) throw std::runtime_error("short write: " + path);
}

inline SensitivityMap read_sensitivity_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open: " + path);
  auto fail = [&path](const std::string& why) -> std::runtime_error {
    return std::runtime_error("sensitivity csv " + path + ": " + why);
  };

  std::string line;
  auto next_fields = [&]() {
    if (!std::getline(f, line)) throw fail("unexpected end of file");
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string item;
    while (std::getline(ss, item, ',')) fields.push_back(item);
    return fields;
  };
  auto expect_scalar = [&](const std::string& key) {
    std::vector<std::string> fields = next_fields();
    if (fields.size() != 2 || fields[0] != key)
      throw fail("expected '" + key + ",<value>', got '" + line + "'");
    return fields[1];
  };

  if (expect_scalar("sensitivity_map") != "1") throw fail("unknown format version");
  SensitivityMap map;
  map.image_size = std::stoll(expect_scalar("image_size"));
  map.patch_size = std::stoll(expect_scalar("patch_size"));
  map.stride = std::stoll(expect_scalar("stride"));
  map.gray = std::stod(expect_scalar("gray"));
  map.joints = std::stoll(expect_scalar("joints"));
  map.gy = std::stoll(expect_scalar("gy"));
  map.gx = std::stoll(expect_scalar("gx"));
  map.baseline_error = std::stod(expect_scalar("baseline_error"));

  std::vector<std::string> base = next_fields();
  if (base.empty() || base[0] != "baseline_per_joint")
    throw fail("expected baseline_per_joint row");
  for (size_t i = 1; i < base.size(); ++i)
    map.baseline_per_joint.push_back(std::stod(base[i]));

  map.grid.assign(size_t(map.channels() * map.gy * map.gx), 0.0);
  for (int64_t ch = 0; ch < map.channels(); ++ch) {
    const std::string name = expect_scalar("channel");
    if (name != detail::channel_name(map, ch))
      throw fail("channel order mismatch at '" + name + "'");
    for (int64_t iy = 0; iy < map.gy; ++iy) {
      std::vector<std::string> row = next_fields();
      if (int64_t(row.size()) != map.gx) throw fail("grid row width mismatch");
      for (int64_t ix = 0; ix < map.gx; ++ix)
        map.at(ch, iy, ix) = std::stod(row[size_t(ix)]);
    }
  }
  map.validate();
  return map;
}

}  // namespace parelab
