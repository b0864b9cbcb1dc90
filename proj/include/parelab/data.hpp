#pragma once

// Synthetic training data for the body regressor.
//
// Each sample is fully determined by (dataset seed, sample index): pose,
// shape, and camera parameters come from dedicated counter-based RNG streams,
// the posed mesh is rasterized into a part-label map and a shaded color
// render over a noise background, and the ground-truth tensors (axis-angle
// pose, shape coefficients, camera, 3D/2D joints, per-joint visibility) are
// derived from the same state. Occlusion and crop augmentations operate on
// samples in memory — datasets on disk always hold clean samples — and
// sharded container files plus a JSON manifest give byte-stable storage.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "parelab/body_model.hpp"
#include "parelab/camera.hpp"
#include "parelab/container.hpp"
#include "parelab/image_io.hpp"
#include "parelab/raster.hpp"
#include "parelab/rng.hpp"
#include "parelab/tensor.hpp"

namespace parelab {

// ---- augmentation configuration ----

// Paste one axis-aligned uniform-color rectangle over the image.
struct OccluderConfig {
  double prob = 0.5;      // per-sample application probability
  double side_lo = 0.10;  // rectangle sides, as fractions of the image side
  double side_hi = 0.40;

  void validate() const {
    if (!(prob >= 0.0 && prob <= 1.0))
      tensor_error("occluder: prob must be in [0,1]");
    if (!(side_lo > 0.0 && side_lo <= side_hi && side_hi <= 1.0))
      tensor_error("occluder: need 0 < side_lo <= side_hi <= 1");
  }

  nlohmann::json to_json() const {
    return {{"prob", prob}, {"side_lo", side_lo}, {"side_hi", side_hi}};
  }

  static OccluderConfig from_json(const nlohmann::json& j) {
    OccluderConfig c;
    nlohmann::json known = c.to_json();
    for (auto it = j.begin(); it != j.end(); ++it)
      if (!known.contains(it.key()))
        throw std::invalid_argument("occluder: unknown key '" + it.key() + "'");
    c.prob = j.value("prob", c.prob);
    c.side_lo = j.value("side_lo", c.side_lo);
    c.side_hi = j.value("side_hi", c.side_hi);
    c.validate();
    return c;
  }
};

// Blank out a band of the person's 2D bounding box from one random side and
// drop the 2D confidence of the joints that fall inside it.
struct CropConfig {
  double prob = 0.30;
  double frac_lo = 0.30;  // band extent, as a fraction of the bbox side
  double frac_hi = 0.50;

  void validate() const {
    if (!(prob >= 0.0 && prob <= 1.0))
      tensor_error("crop: prob must be in [0,1]");
    if (!(frac_lo > 0.0 && frac_lo <= frac_hi && frac_hi <= 1.0))
      tensor_error("crop: need 0 < frac_lo <= frac_hi <= 1");
  }

  nlohmann::json to_json() const {
    return {{"prob", prob}, {"frac_lo", frac_lo}, {"frac_hi", frac_hi}};
  }

  static CropConfig from_json(const nlohmann::json& j) {
    CropConfig c;
    nlohmann::json known = c.to_json();
    for (auto it = j.begin(); it != j.end(); ++it)
      if (!known.contains(it.key()))
        throw std::invalid_argument("crop: unknown key '" + it.key() + "'");
    c.prob = j.value("prob", c.prob);
    c.frac_lo = j.value("frac_lo", c.frac_lo);
    c.frac_hi = j.value("frac_hi", c.frac_hi);
    c.validate();
    return c;
  }
};

// ---- dataset configuration ----

struct DatasetSpec {
  int64_t size = 2000;      // number of samples
  uint64_t seed = 1;        // master seed; every stream derives from it
  int64_t image_size = 64;  // rendered image side
  int64_t label_size = 32;  // part-label map side

  double root_limit = std::numbers::pi;  // axis-angle range, root joint
  double joint_limit = 0.4;              // axis-angle range, other joints
  double beta_std = 0.5;                 // shape coefficient std dev
  double beta_clip = 2.0;                // clip betas at beta_clip * beta_std

  double fill_lo = 0.5;  // body half-extent as a fraction of the half-frame
  double fill_hi = 0.9;
  double center_jitter = 0.8;  // fraction of the leftover margin
  double shade_jitter = 0.25;  // per-part shading amplitude

  OccluderConfig occluder;
  CropConfig crop;

  double pose_limit(int64_t joint) const {
    return joint == 0 ? root_limit : joint_limit;
  }

  void validate() const {
    if (size < 1) tensor_error("dataset: size must be >= 1");
    if (image_size < 4 || label_size < 4)
      tensor_error("dataset: image/label sides must be >= 4");
    if (root_limit < 0.0 || joint_limit < 0.0)
      tensor_error("dataset: pose limits must be >= 0");
    if (beta_std < 0.0 || beta_clip < 0.0)
      tensor_error("dataset: beta_std and beta_clip must be >= 0");
    if (!(fill_lo > 0.0 && fill_lo <= fill_hi && fill_hi < 1.0))
      tensor_error("dataset: need 0 < fill_lo <= fill_hi < 1");
    if (!(center_jitter >= 0.0 && center_jitter <= 1.0))
      tensor_error("dataset: center_jitter must be in [0,1]");
    if (!(shade_jitter >= 0.0 && shade_jitter < 1.0))
      tensor_error("dataset: shade_jitter must be in [0,1)");
    occluder.validate();
    crop.validate();
  }

  nlohmann::json to_json() const {
    return {
        {"size", size},
        {"seed", seed},
        {"image_size", image_size},
        {"label_size", label_size},
        {"root_limit", root_limit},
        {"joint_limit", joint_limit},
        {"beta_std", beta_std},
        {"beta_clip", beta_clip},
        {"fill_lo", fill_lo},
        {"fill_hi", fill_hi},
        {"center_jitter", center_jitter},
        {"shade_jitter", shade_jitter},
        {"occluder", occluder.to_json()},
        {"crop", crop.to_json()},
    };
  }

  static DatasetSpec from_json(const nlohmann::json& j) {
    DatasetSpec c;
    nlohmann::json known = c.to_json();
    for (auto it = j.begin(); it != j.end(); ++it)
      if (!known.contains(it.key()))
        throw std::invalid_argument("dataset: unknown key '" + it.key() + "'");
    c.size = j.value("size", c.size);
    c.seed = j.value("seed", c.seed);
    c.image_size = j.value("image_size", c.image_size);
    c.label_size = j.value("label_size", c.label_size);
    c.root_limit = j.value("root_limit", c.root_limit);
    c.joint_limit = j.value("joint_limit", c.joint_limit);
    c.beta_std = j.value("beta_std", c.beta_std);
    c.beta_clip = j.value("beta_clip", c.beta_clip);
    c.fill_lo = j.value("fill_lo", c.fill_lo);
    c.fill_hi = j.value("fill_hi", c.fill_hi);
    c.center_jitter = j.value("center_jitter", c.center_jitter);
    c.shade_jitter = j.value("shade_jitter", c.shade_jitter);
    if (j.contains("occluder"))
      c.occluder = OccluderConfig::from_json(j.at("occluder"));
    if (j.contains("crop")) c.crop = CropConfig::from_json(j.at("crop"));
    c.validate();
    return c;
  }

  // Canonical content hash (nlohmann serializes with sorted keys).
  std::string hash() const { return fnv1a_hex(to_json().dump()); }
};

// ---- sample synthesis ----

struct SampleState {
  std::vector<double> theta;  // K*3 axis-angle
  std::vector<double> beta;   // B
  WeakPerspectiveCamera cam;
};

// Draw pose, shape, and camera for one sample. Streams are independent per
// quantity and keyed by the sample index, so any sample can be regenerated
// in isolation. The camera frames the posed mesh directly: scale maps the
// larger half-extent of the mesh's XY bounding box to `fill`, and the
// translation centers the box up to a jitter bounded by the leftover margin.
// Every vertex — and therefore every regressed joint, a convex combination
// of vertices — projects inside the frame by construction.
inline SampleState sample_state(const DatasetSpec& spec,
                                const BodyModelDef& model, int64_t index) {
  SampleState st;

  Rng pose_rng(spec.seed, RngUse::pose, uint64_t(index));
  st.theta.resize(static_cast<size_t>(model.K * 3));
  for (int64_t k = 0; k < model.K; ++k) {
    const double lim = spec.pose_limit(k);
    for (int64_t d = 0; d < 3; ++d)
      st.theta[size_t(k * 3 + d)] = pose_rng.uniform(-lim, lim);
  }

  Rng shape_rng(spec.seed, RngUse::shape, uint64_t(index));
  st.beta.resize(static_cast<size_t>(model.B));
  const double cap = spec.beta_clip * spec.beta_std;
  for (int64_t b = 0; b < model.B; ++b)
    st.beta[size_t(b)] =
        std::clamp(shape_rng.normal(0.0, spec.beta_std), -cap, cap);

  Pose pose;
  pose.rep = PoseRep::axis_angle;
  pose.joints = model.K;
  pose.data = st.theta;
  const std::vector<double> mesh = lbs(model, pose, st.beta);

  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  for (int64_t v = 0; v < model.V; ++v) {
    xmin = std::min(xmin, mesh[size_t(v * 3)]);
    xmax = std::max(xmax, mesh[size_t(v * 3)]);
    ymin = std::min(ymin, mesh[size_t(v * 3 + 1)]);
    ymax = std::max(ymax, mesh[size_t(v * 3 + 1)]);
  }
  const double cx = 0.5 * (xmin + xmax);
  const double cy = 0.5 * (ymin + ymax);
  const double half =
      std::max({0.5 * (xmax - xmin), 0.5 * (ymax - ymin), 1e-6});

  Rng cam_rng(spec.seed, RngUse::camera, uint64_t(index));
  const double fill = cam_rng.uniform(spec.fill_lo, spec.fill_hi);
  const double jx = cam_rng.uniform(-1.0, 1.0);
  const double jy = cam_rng.uniform(-1.0, 1.0);
  const double margin = spec.center_jitter * (1.0 - fill);
  st.cam.s = fill / half;
  st.cam.t = {-st.cam.s * cx + jx * margin, -st.cam.s * cy + jy * margin};
  return st;
}

// Dominant skinning part per vertex (argmax of the weight row, ties to the
// lower index — the same rule face labels use). Labels are 1-based.
inline std::vector<int> vertex_part_labels(const BodyModelDef& model) {
  std::vector<int> out(static_cast<size_t>(model.V));
  for (int64_t v = 0; v < model.V; ++v) {
    const double* w = model.weights.data() + v * model.K;
    int64_t best = 0;
    for (int64_t k = 1; k < model.K; ++k)
      if (w[k] > w[best]) best = k;
    out[size_t(v)] = int(best) + 1;
  }
  return out;
}

// Radius (in pixels) of the disc used both to decide joint visibility at
// image resolution and to check label/keypoint agreement on the label map.
inline constexpr int64_t kVisibilityDiscRadius = 3;

// Applied-augmentation records. These live only in memory: saved datasets
// always contain clean samples, and augmentations are re-applied per step.
struct OccluderBox {
  bool applied = false;
  int64_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open pixel rect
  std::array<double, 3> color{0.0, 0.0, 0.0};
};

struct CropBand {
  bool applied = false;
  int64_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open pixel rect
};

struct Sample {
  int64_t index = 0;
  int64_t image_size = 0, label_size = 0;
  std::vector<double> image;  // image_size^2 * 3, interleaved RGB in [0,1]
  std::vector<double> theta_gt;  // K*3 axis-angle
  std::vector<double> beta_gt;   // B
  WeakPerspectiveCamera cam_gt;
  std::vector<std::array<double, 3>> joints3d_gt;  // K, model units
  std::vector<std::array<double, 2>> joints2d_gt;  // K, normalized coords
  std::vector<int> part_labels;  // label_size^2, row-major, 0 = background
  std::vector<uint8_t> joint_visibility;  // K; 1 where the joint's part is
                                          // rendered near the joint's pixel
  std::vector<double> conf2d;             // K; crops zero occluded joints
  OccluderBox occluder;
  CropBand crop;
};

inline Sample make_sample(const DatasetSpec& spec, const BodyModelDef& model,
                          int64_t index) {
  const SampleState st = sample_state(spec, model, index);

  Pose pose;
  pose.rep = PoseRep::axis_angle;
  pose.joints = model.K;
  pose.data = st.theta;
  const std::vector<double> mesh = lbs(model, pose, st.beta);
  const std::vector<double> j3 = model.regress(mesh);

  Sample s;
  s.index = index;
  s.image_size = spec.image_size;
  s.label_size = spec.label_size;
  s.theta_gt = st.theta;
  s.beta_gt = st.beta;
  s.cam_gt = st.cam;
  s.joints3d_gt = as_points(j3);
  s.joints2d_gt = project_points(s.joints3d_gt, st.cam);

  const std::vector<int> face_labels = face_part_labels(model);
  const RasterOutput full = rasterize(mesh, model.faces, face_labels, st.cam,
                                      spec.image_size, spec.image_size);
  const RasterOutput coarse = rasterize(mesh, model.faces, face_labels, st.cam,
                                        spec.label_size, spec.label_size);
  s.part_labels = coarse.label_map;

  // A joint is visible when its own part is actually rendered within a small
  // disc of the projected joint position at full image resolution — i.e. the
  // joint's body region is depicted where the joint lands, not merely some
  // distal piece of the part somewhere in the frame.
  s.joint_visibility.assign(static_cast<size_t>(model.K), 0);
  for (int64_t k = 0; k < model.K; ++k) {
    const int64_t cx = std::llround(
        detail::ndc_to_px(s.joints2d_gt[size_t(k)][0], spec.image_size));
    const int64_t cy = std::llround(
        detail::ndc_to_px(s.joints2d_gt[size_t(k)][1], spec.image_size));
    for (int64_t dy = -kVisibilityDiscRadius;
         dy <= kVisibilityDiscRadius && !s.joint_visibility[size_t(k)]; ++dy)
      for (int64_t dx = -kVisibilityDiscRadius;
           dx <= kVisibilityDiscRadius; ++dx) {
        if (dx * dx + dy * dy > kVisibilityDiscRadius * kVisibilityDiscRadius)
          continue;
        const int64_t x = cx + dx, y = cy + dy;
        if (x < 0 || x >= spec.image_size || y < 0 || y >= spec.image_size)
          continue;
        if (full.label_map[size_t(y * spec.image_size + x)] == int(k) + 1) {
          s.joint_visibility[size_t(k)] = 1;
          break;
        }
      }
  }

  // Background and shading jitter use sub-keys of (seed, index) so they stay
  // decorrelated from the pose/shape/camera streams.
  const std::vector<double> bg = make_noise_background(
      spec.image_size, spec.image_size, derive_key(spec.seed, uint64_t(index), 1));
  s.image = render_sample_image(full, part_palette(model.K), bg,
                                derive_key(spec.seed, uint64_t(index), 2),
                                spec.shade_jitter);

  s.conf2d.assign(static_cast<size_t>(model.K), 1.0);
  return s;
}

// ---- augmentations ----

// Paste one uniform-color rectangle. Draw order: bernoulli(prob), width,
// height, center x, center y, then R,G,B — all from `rng`. The rectangle is
// clipped to the image and widened to at least one pixel per axis. Only the
// image changes; every ground-truth field is untouched.
inline OccluderBox apply_occluder(std::vector<double>& image, int64_t height,
                                  int64_t width, Rng& rng,
                                  const OccluderConfig& cfg) {
  cfg.validate();
  if (image.size() != size_t(height * width * 3))
    tensor_error("occluder: image must be H*W*3");
  OccluderBox box;
  if (!rng.bernoulli(cfg.prob)) return box;

  const double w = rng.uniform(cfg.side_lo, cfg.side_hi) * double(width);
  const double h = rng.uniform(cfg.side_lo, cfg.side_hi) * double(height);
  const double cx = rng.uniform(0.0, double(width));
  const double cy = rng.uniform(0.0, double(height));
  box.color = {rng.uniform(), rng.uniform(), rng.uniform()};

  auto clip = [](double v, int64_t lim) {
    return std::clamp<int64_t>(int64_t(std::llround(v)), 0, lim);
  };
  box.x0 = clip(cx - 0.5 * w, width);
  box.x1 = clip(cx + 0.5 * w, width);
  box.y0 = clip(cy - 0.5 * h, height);
  box.y1 = clip(cy + 0.5 * h, height);
  if (box.x1 <= box.x0) {
    box.x0 = std::min(box.x0, width - 1);
    box.x1 = box.x0 + 1;
  }
  if (box.y1 <= box.y0) {
    box.y0 = std::min(box.y0, height - 1);
    box.y1 = box.y0 + 1;
  }
  box.applied = true;

  for (int64_t y = box.y0; y < box.y1; ++y)
    for (int64_t x = box.x0; x < box.x1; ++x)
      for (int64_t d = 0; d < 3; ++d)
        image[size_t((y * width + x) * 3 + d)] = box.color[size_t(d)];
  return box;
}

// Convenience overload operating on a sample and recording the box in it.
inline bool apply_occluder(Sample& s, Rng& rng, const OccluderConfig& cfg) {
  s.occluder = apply_occluder(s.image, s.image_size, s.image_size, rng, cfg);
  return s.occluder.applied;
}

// Blank a band of the person's bounding box from one side. Draw order:
// bernoulli(prob), band fraction, side (0 left, 1 right, 2 top, 3 bottom),
// then one gray level per band pixel in row-major order (the same
// distribution the noise background uses). Joints whose projected pixel
// falls inside the band get conf2d zeroed; 3D targets, labels, visibility,
// and the image size never change.
inline bool apply_crop(Sample& s, Rng& rng, const CropConfig& cfg) {
  cfg.validate();
  if (s.joints2d_gt.empty()) tensor_error("crop: sample has no 2D joints");
  if (s.conf2d.size() != s.joints2d_gt.size())
    tensor_error("crop: conf2d and joints2d sizes disagree");
  if (!rng.bernoulli(cfg.prob)) return false;
  const double frac = rng.uniform(cfg.frac_lo, cfg.frac_hi);
  const uint64_t side = rng.below(4);

  const int64_t S = s.image_size;
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  for (const auto& p : s.joints2d_gt) {
    xmin = std::min(xmin, detail::ndc_to_px(p[0], S));
    xmax = std::max(xmax, detail::ndc_to_px(p[0], S));
    ymin = std::min(ymin, detail::ndc_to_px(p[1], S));
    ymax = std::max(ymax, detail::ndc_to_px(p[1], S));
  }
  auto clip = [S](double v) {
    return std::clamp<int64_t>(int64_t(v), 0, S - 1);
  };
  const int64_t bx0 = clip(std::floor(xmin)), bx1 = clip(std::ceil(xmax));
  const int64_t by0 = clip(std::floor(ymin)), by1 = clip(std::ceil(ymax));
  const int64_t bw = bx1 - bx0 + 1, bh = by1 - by0 + 1;
  const int64_t cutx =
      std::clamp<int64_t>(std::llround(frac * double(bw)), 1, bw);
  const int64_t cuty =
      std::clamp<int64_t>(std::llround(frac * double(bh)), 1, bh);

  CropBand band;
  band.applied = true;
  switch (side) {
    case 0:  // left
      band.x0 = bx0, band.x1 = bx0 + cutx, band.y0 = by0, band.y1 = by1 + 1;
      break;
    case 1:  // right
      band.x0 = bx1 + 1 - cutx, band.x1 = bx1 + 1, band.y0 = by0,
      band.y1 = by1 + 1;
      break;
    case 2:  // top
      band.x0 = bx0, band.x1 = bx1 + 1, band.y0 = by0, band.y1 = by0 + cuty;
      break;
    default:  // bottom
      band.x0 = bx0, band.x1 = bx1 + 1, band.y0 = by1 + 1 - cuty,
      band.y1 = by1 + 1;
      break;
  }

  for (int64_t y = band.y0; y < band.y1; ++y)
    for (int64_t x = band.x0; x < band.x1; ++x) {
      const double g = rng.uniform(0.25, 0.75);
      for (int64_t d = 0; d < 3; ++d)
        s.image[size_t((y * S + x) * 3 + d)] = g;
    }

  for (size_t k = 0; k < s.joints2d_gt.size(); ++k) {
    const int64_t px = std::llround(detail::ndc_to_px(s.joints2d_gt[k][0], S));
    const int64_t py = std::llround(detail::ndc_to_px(s.joints2d_gt[k][1], S));
    if (px >= band.x0 && px < band.x1 && py >= band.y0 && py < band.y1)
      s.conf2d[k] = 0.0;
  }
  s.crop = band;
  return true;
}

// ---- batching ----

// Pack interleaved H*W*3 sample images into a planar [N, 3, H, W] tensor.
inline Tensor64 batch_image_tensor(const std::vector<Sample>& samples,
                                   const std::vector<int64_t>& indices) {
  if (indices.empty()) tensor_error("batch: empty index list");
  const Sample& first = samples.at(size_t(indices.at(0)));
  const int64_t S = first.image_size;
  const int64_t n = int64_t(indices.size());
  std::vector<double> out(static_cast<size_t>(n * 3 * S * S));
  for (int64_t i = 0; i < n; ++i) {
    const Sample& s = samples.at(size_t(indices[size_t(i)]));
    if (s.image_size != S) tensor_error("batch: mixed image sizes");
    if (s.image.size() != size_t(S * S * 3))
      tensor_error("batch: sample image has the wrong length");
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t p = 0; p < S * S; ++p)
        out[size_t((i * 3 + c) * S * S + p)] = s.image[size_t(3 * p + c)];
  }
  return Tensor64::from_data(Shape{n, 3, S, S}, std::move(out));
}

inline Tensor64 image_tensor(const Sample& s) {
  return batch_image_tensor({s}, {0});
}

// ---- dataset generation and storage ----

struct Dataset {
  DatasetSpec spec;
  std::vector<Sample> samples;
};

inline Dataset generate_dataset(const DatasetSpec& spec,
                                const BodyModelDef& model) {
  spec.validate();
  Dataset d;
  d.spec = spec;
  d.samples.reserve(static_cast<size_t>(spec.size));
  for (int64_t i = 0; i < spec.size; ++i)
    d.samples.push_back(make_sample(spec, model, i));
  return d;
}

inline constexpr int64_t kSamplesPerShard = 256;

namespace detail {

inline std::string shard_file_name(int64_t shard) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "shard_%05lld.bin",
                static_cast<long long>(shard));
  return buf;
}

inline std::vector<double> flatten2(
    const std::vector<std::array<double, 2>>& pts) {
  std::vector<double> out;
  out.reserve(pts.size() * 2);
  for (const auto& p : pts) {
    out.push_back(p[0]);
    out.push_back(p[1]);
  }
  return out;
}

inline std::vector<double> flatten3(
    const std::vector<std::array<double, 3>>& pts) {
  std::vector<double> out;
  out.reserve(pts.size() * 3);
  for (const auto& p : pts) {
    out.push_back(p[0]);
    out.push_back(p[1]);
    out.push_back(p[2]);
  }
  return out;
}

}  // namespace detail

// Write `dataset.json` plus fixed-size shard containers into a directory.
// Augmentation records are never serialized: stored samples are clean.
inline void save_dataset(const Dataset& d, const std::string& dir) {
  namespace fs = std::filesystem;
  d.spec.validate();
  if (int64_t(d.samples.size()) != d.spec.size)
    tensor_error("dataset: sample count does not match spec size");
  fs::create_directories(dir);

  const int64_t shards =
      (d.spec.size + kSamplesPerShard - 1) / kSamplesPerShard;
  for (int64_t sh = 0; sh < shards; ++sh) {
    const int64_t first = sh * kSamplesPerShard;
    const int64_t count = std::min(kSamplesPerShard, d.spec.size - first);
    Container c;
    c.config_hash = d.spec.hash();
    c.meta = {{"kind", "dataset_shard"}, {"first", first}, {"count", count}};
    for (int64_t i = first; i < first + count; ++i) {
      const Sample& s = d.samples[size_t(i)];
      const std::string p = "s" + std::to_string(i) + "/";
      const int64_t S = s.image_size, L = s.label_size;
      const int64_t K = int64_t(s.joints3d_gt.size());
      const int64_t B = int64_t(s.beta_gt.size());
      c.put_vector<double>(p + "image", DType::f64, {S, S, 3}, s.image);
      c.put_vector<double>(p + "theta", DType::f64, {K, 3}, s.theta_gt);
      c.put_vector<double>(p + "beta", DType::f64, {B}, s.beta_gt);
      c.put_vector<double>(p + "camera", DType::f64, {3},
                           {s.cam_gt.s, s.cam_gt.t[0], s.cam_gt.t[1]});
      c.put_vector<double>(p + "joints3d", DType::f64, {K, 3},
                           detail::flatten3(s.joints3d_gt));
      c.put_vector<double>(p + "joints2d", DType::f64, {K, 2},
                           detail::flatten2(s.joints2d_gt));
      c.put_vector<int32_t>(
          p + "part_labels", DType::i32, {L, L},
          std::vector<int32_t>(s.part_labels.begin(), s.part_labels.end()));
      c.put_vector<uint8_t>(p + "joint_visibility", DType::u8, {K},
                            s.joint_visibility);
      c.put_vector<double>(p + "conf2d", DType::f64, {K}, s.conf2d);
    }
    c.save((fs::path(dir) / detail::shard_file_name(sh)).string());
  }

  const nlohmann::json manifest = {
      {"kind", "dataset"},       {"spec", d.spec.to_json()},
      {"count", d.spec.size},    {"shard_size", kSamplesPerShard},
      {"shards", shards},
  };
  std::ofstream out(fs::path(dir) / "dataset.json");
  out << manifest.dump(2) << "\n";
  if (!out) tensor_error("dataset: failed to write manifest in " + dir);
}

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream in(fs::path(dir) / "dataset.json");
  if (!in) tensor_error("dataset: no manifest at " + dir + "/dataset.json");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    tensor_error(std::string("dataset: bad manifest: ") + e.what());
  }
  if (manifest.value("kind", "") != std::string("dataset"))
    tensor_error("dataset: manifest kind mismatch");

  Dataset d;
  d.spec = DatasetSpec::from_json(manifest.at("spec"));
  const int64_t count = manifest.at("count").get<int64_t>();
  const int64_t shard_size = manifest.at("shard_size").get<int64_t>();
  const int64_t shards = manifest.at("shards").get<int64_t>();
  if (count != d.spec.size)
    tensor_error("dataset: manifest count does not match spec size");
  if (shard_size < 1 || shards != (count + shard_size - 1) / shard_size)
    tensor_error("dataset: inconsistent shard bookkeeping in manifest");

  d.samples.resize(static_cast<size_t>(count));
  int64_t loaded = 0;
  for (int64_t sh = 0; sh < shards; ++sh) {
    const std::string path =
        (fs::path(dir) / detail::shard_file_name(sh)).string();
    Container c = Container::load(path);
    if (c.config_hash != d.spec.hash())
      tensor_error("dataset: shard " + path +
                   " was written for a different configuration");
    const int64_t first = c.meta.at("first").get<int64_t>();
    const int64_t n = c.meta.at("count").get<int64_t>();
    if (first != sh * shard_size || n < 1 || first + n > count)
      tensor_error("dataset: shard " + path + " covers an unexpected range");
    for (int64_t i = first; i < first + n; ++i) {
      const std::string p = "s" + std::to_string(i) + "/";
      Sample s;
      s.index = i;

      const NamedArray& img = c.get(p + "image");
      if (img.shape.size() != 3 || img.shape[2] != 3 ||
          img.shape[0] != img.shape[1])
        tensor_error("dataset: sample image has a bad shape");
      s.image_size = img.shape[0];
      s.image = img.as_vector<double>();

      s.theta_gt = c.get(p + "theta").as_vector<double>();
      s.beta_gt = c.get(p + "beta").as_vector<double>();
      const std::vector<double> cam = c.get(p + "camera").as_vector<double>();
      if (cam.size() != 3) tensor_error("dataset: camera must hold 3 values");
      s.cam_gt.s = cam[0];
      s.cam_gt.t = {cam[1], cam[2]};

      s.joints3d_gt = as_points(c.get(p + "joints3d").as_vector<double>());
      const std::vector<double> j2 =
          c.get(p + "joints2d").as_vector<double>();
      if (j2.size() % 2 != 0) tensor_error("dataset: joints2d length is odd");
      s.joints2d_gt.resize(j2.size() / 2);
      for (size_t k = 0; k < s.joints2d_gt.size(); ++k)
        s.joints2d_gt[k] = {j2[2 * k], j2[2 * k + 1]};

      const NamedArray& lab = c.get(p + "part_labels");
      if (lab.shape.size() != 2 || lab.shape[0] != lab.shape[1])
        tensor_error("dataset: label map has a bad shape");
      s.label_size = lab.shape[0];
      const std::vector<int32_t> li = lab.as_vector<int32_t>();
      s.part_labels.assign(li.begin(), li.end());

      s.joint_visibility = c.get(p + "joint_visibility").as_vector<uint8_t>();
      s.conf2d = c.get(p + "conf2d").as_vector<double>();
      if (s.joints3d_gt.size() != s.joints2d_gt.size() ||
          s.joint_visibility.size() != s.joints3d_gt.size() ||
          s.conf2d.size() != s.joints3d_gt.size() ||
          s.theta_gt.size() != 3 * s.joints3d_gt.size())
        tensor_error("dataset: per-joint arrays disagree on joint count");

      d.samples[size_t(i)] = std::move(s);
      ++loaded;
    }
  }
  if (loaded != count)
    tensor_error("dataset: shards held " + std::to_string(loaded) +
                 " samples, manifest promised " + std::to_string(count));
  return d;
}

// PNG previews of a sample (color render plus label map) for inspection.
inline void export_sample_pngs(const Sample& s, const std::string& prefix,
                               int64_t parts) {
  write_png_rgb(prefix + "_image.png", s.image_size, s.image_size, s.image);
  write_png_labels(prefix + "_labels.png", s.label_size, s.label_size,
                   s.part_labels, part_palette(parts));
}

}  // namespace parelab
