#pragma once
// Part-attention body regressor and its global-average-pooling baseline.
//
// The main architecture runs a small strided conv backbone, then two parallel
// upsampling conv branches at the same spatial resolution: one emits per-part
// spatial logits (parts + background), the other a feature volume. Per-part
// spatial softmax over the logits aggregates the feature volume into one
// feature vector per joint (attention), or picks a soft-argmax location to
// bilinearly sample the features (pooling). Per-joint linear heads regress 6D
// rotations; one linear head on the flattened aggregate regresses shape and
// weak-perspective camera. The baseline collapses the backbone output by
// global average pooling and refines a parameter vector with an MLP over a
// fixed number of iterations — structurally blind to where image evidence
// sits, which is exactly the contrast the occlusion study probes.

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "parelab/body_model.hpp"
#include "parelab/camera.hpp"
#include "parelab/container.hpp"
#include "parelab/nn.hpp"
#include "parelab/rotations.hpp"
#include "parelab/tensor.hpp"

namespace parelab {

enum class SupervisionMode { parts, keypoints, none, mixed };
enum class SamplingMode { attention, pooling };

inline std::string to_string(SupervisionMode m) {
  switch (m) {
    case SupervisionMode::parts: return "parts";
    case SupervisionMode::keypoints: return "keypoints";
    case SupervisionMode::none: return "none";
    case SupervisionMode::mixed: return "mixed";
  }
  return "?";
}

inline std::string to_string(SamplingMode m) {
  return m == SamplingMode::attention ? "attention" : "pooling";
}

inline SupervisionMode supervision_mode_from_string(const std::string& s) {
  if (s == "parts") return SupervisionMode::parts;
  if (s == "keypoints") return SupervisionMode::keypoints;
  if (s == "none") return SupervisionMode::none;
  if (s == "mixed") return SupervisionMode::mixed;
  throw std::invalid_argument("unknown supervision mode '" + s + "'");
}

inline SamplingMode sampling_mode_from_string(const std::string& s) {
  if (s == "attention") return SamplingMode::attention;
  if (s == "pooling") return SamplingMode::pooling;
  throw std::invalid_argument("unknown sampling mode '" + s + "'");
}

struct NetConfig {
  int64_t image_size = 64;                          // square input, pixels
  std::vector<int64_t> backbone_widths = {16, 32, 48, 64};  // one per stride-2 stage
  int64_t branch_width = 32;   // intermediate conv channels in both branches
  int64_t feat_h = 32;         // spatial height of the logit/feature maps
  int64_t feat_w = 32;
  int64_t channels = 64;       // C: feature-volume channels
  int64_t joints = 24;         // J
  int64_t betas = 8;           // shape coefficients the head regresses
  SupervisionMode supervision_mode = SupervisionMode::mixed;
  SamplingMode sampling_mode = SamplingMode::attention;
  int64_t mixed_switch_step = 6000;   // mixed mode: spatial supervision before this step
  bool baseline_gap = false;          // use the pooling baseline instead
  int64_t gap_hidden = 128;           // baseline MLP hidden width
  int64_t gap_iterations = 3;         // baseline refinement iterations
  double heatmap_sigma = 2.0;         // px, keypoint-supervision targets
  uint64_t init_seed = 1;

  int64_t stages() const { return int64_t(backbone_widths.size()); }
  int64_t stride() const { return int64_t(1) << stages(); }
  int64_t backbone_hw() const { return image_size / stride(); }

  void validate() const {
    if (image_size < 1) throw std::invalid_argument("config: image_size must be >= 1");
    if (backbone_widths.empty())
      throw std::invalid_argument("config: need at least one backbone stage");
    for (int64_t w : backbone_widths)
      if (w < 1) throw std::invalid_argument("config: backbone widths must be >= 1");
    if (image_size % stride() != 0)
      throw std::invalid_argument("config: image_size " + std::to_string(image_size) +
                                  " not divisible by backbone stride " +
                                  std::to_string(stride()));
    if (backbone_hw() < 1)
      throw std::invalid_argument("config: backbone output would be empty");
    const int64_t expect = 8 * backbone_hw();  // three 2x upsamplings
    if (feat_h != expect || feat_w != expect)
      throw std::invalid_argument(
          "config: feat_h/feat_w must equal 8 * (image_size / stride) = " +
          std::to_string(expect));
    if (channels < 1 || joints < 1 || betas < 1 || branch_width < 1)
      throw std::invalid_argument("config: channels, joints, betas, branch_width must be >= 1");
    if (mixed_switch_step < 0)
      throw std::invalid_argument("config: mixed_switch_step must be >= 0");
    if (gap_hidden < 1 || gap_iterations < 1)
      throw std::invalid_argument("config: gap_hidden and gap_iterations must be >= 1");
    if (!(heatmap_sigma > 0))
      throw std::invalid_argument("config: heatmap_sigma must be positive");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"image_size", image_size},
                          {"backbone_widths", backbone_widths},
                          {"branch_width", branch_width},
                          {"feat_h", feat_h},
                          {"feat_w", feat_w},
                          {"channels", channels},
                          {"joints", joints},
                          {"betas", betas},
                          {"supervision_mode", to_string(supervision_mode)},
                          {"sampling_mode", to_string(sampling_mode)},
                          {"mixed_switch_step", mixed_switch_step},
                          {"baseline_gap", baseline_gap},
                          {"gap_hidden", gap_hidden},
                          {"gap_iterations", gap_iterations},
                          {"heatmap_sigma", heatmap_sigma},
                          {"init_seed", init_seed}};
  }

  static NetConfig from_json(const nlohmann::json& j) {
    NetConfig c;
    nlohmann::json known = c.to_json();
    for (auto it = j.begin(); it != j.end(); ++it)
      if (!known.contains(it.key()))
        throw std::invalid_argument("config: unknown key '" + it.key() + "'");
    c.image_size = j.value("image_size", c.image_size);
    if (j.contains("backbone_widths"))
      c.backbone_widths = j.at("backbone_widths").get<std::vector<int64_t>>();
    c.branch_width = j.value("branch_width", c.branch_width);
    c.feat_h = j.value("feat_h", c.feat_h);
    c.feat_w = j.value("feat_w", c.feat_w);
    c.channels = j.value("channels", c.channels);
    c.joints = j.value("joints", c.joints);
    c.betas = j.value("betas", c.betas);
    if (j.contains("supervision_mode"))
      c.supervision_mode = supervision_mode_from_string(j.at("supervision_mode"));
    if (j.contains("sampling_mode"))
      c.sampling_mode = sampling_mode_from_string(j.at("sampling_mode"));
    c.mixed_switch_step = j.value("mixed_switch_step", c.mixed_switch_step);
    c.baseline_gap = j.value("baseline_gap", c.baseline_gap);
    c.gap_hidden = j.value("gap_hidden", c.gap_hidden);
    c.gap_iterations = j.value("gap_iterations", c.gap_iterations);
    c.heatmap_sigma = j.value("heatmap_sigma", c.heatmap_sigma);
    c.init_seed = j.value("init_seed", c.init_seed);
    c.validate();
    return c;
  }

  // Stable content hash for checkpoint compatibility checks (nlohmann objects
  // serialize with sorted keys, so the dump is canonical).
  std::string hash() const { return fnv1a_hex(to_json().dump()); }

  // Large-scale preset: 224x224 input, 5 stride-2 stages to 7x7, 56x56 maps,
  // 256 feature channels.
  static NetConfig large() {
    NetConfig c;
    c.image_size = 224;
    c.backbone_widths = {32, 64, 128, 256, 256};
    c.branch_width = 256;
    c.feat_h = c.feat_w = 56;
    c.channels = 256;
    return c;
  }
};

// The regressed state plus derived geometry. Raw fields come straight from
// the heads; derived per-sample tensors are filled by finalize_prediction.
struct Prediction {
  Tensor64 theta6d;   // [N, J*6]
  Tensor64 rotmats;   // [N*J, 9], row n*J + j
  Tensor64 beta;      // [N, B]
  Tensor64 cam_s;     // [N, 1], strictly positive
  Tensor64 cam_t;     // [N, 2]
  std::vector<Tensor64> mesh;      // N tensors [V, 3]
  std::vector<Tensor64> joints3d;  // N tensors [K, 3]
  std::vector<Tensor64> joints2d;  // N tensors [K, 2]

  int64_t batch() const { return theta6d.size(0); }
};

// Per-joint spatial softmax over flattened positions, background channel
// dropped. logits [N, J+1, H, W] -> [N, J, H*W].
inline Tensor64 spatial_attention(const Tensor64& logits, int64_t joints) {
  if (logits.dim() != 4)
    throw std::invalid_argument("spatial_attention: logits must be [N,J+1,H,W]");
  if (logits.size(1) != joints + 1)
    throw std::invalid_argument("spatial_attention: channel axis must hold J+1 maps");
  const int64_t n = logits.size(0), h = logits.size(2), w = logits.size(3);
  Tensor64 parts = slice(logits, 1, 1, joints);  // drop background channel 0
  return softmax(reshape(parts, {n, joints, h * w}), 2);
}

// Attention aggregation: per sample, F'[j, c] = sum_p A[j, p] * F[c, p].
inline Tensor64 attention_fuse(const Tensor64& part_logits, const Tensor64& features) {
  if (features.dim() != 4)
    throw std::invalid_argument("attention_fuse: features must be [N,C,H,W]");
  if (part_logits.size(0) != features.size(0) ||
      part_logits.size(2) != features.size(2) ||
      part_logits.size(3) != features.size(3))
    throw std::invalid_argument("attention_fuse: spatial/batch axes differ between maps");
  const int64_t n = features.size(0), c = features.size(1);
  const int64_t hw = features.size(2) * features.size(3);
  const int64_t j = part_logits.size(1) - 1;
  Tensor64 attn = spatial_attention(part_logits, j);   // [N,J,HW]
  Tensor64 fr = reshape(features, {n, c, hw});
  std::vector<Tensor64> rows;
  rows.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    Tensor64 ai = reshape(slice(attn, 0, i, 1), {j, hw});
    Tensor64 fi = transpose(reshape(slice(fr, 0, i, 1), {c, hw}));  // [HW,C]
    rows.push_back(reshape(matmul(ai, fi), {1, j, c}));
  }
  return concat(rows, 0);  // [N,J,C]
}

// Pooling aggregation: soft-argmax of the attention map per joint, then a
// bilinear sample of the feature volume at that location.
inline Tensor64 pooling_fuse(const Tensor64& part_logits, const Tensor64& features) {
  if (features.dim() != 4)
    throw std::invalid_argument("pooling_fuse: features must be [N,C,H,W]");
  if (part_logits.size(0) != features.size(0) ||
      part_logits.size(2) != features.size(2) ||
      part_logits.size(3) != features.size(3))
    throw std::invalid_argument("pooling_fuse: spatial/batch axes differ");
  const int64_t h = features.size(2), w = features.size(3);
  const int64_t hw = h * w;
  const int64_t j = part_logits.size(1) - 1;
  // The sampling locations are treated as constants: pooling reads the
  // feature volume at the predicted spots, but the spot choice itself
  // receives no gradient, so the part branch learns only from its explicit
  // spatial loss in this mode (soft attention is the mode where fusion
  // itself trains the maps).
  Tensor64 attn_graph = spatial_attention(part_logits, j);  // [N,J,HW]
  Tensor64 attn = Tensor64::from_data(attn_graph.shape(), attn_graph.data());

  std::vector<double> xs(static_cast<size_t>(hw)), ys(static_cast<size_t>(hw));
  for (int64_t p = 0; p < hw; ++p) {
    xs[size_t(p)] = double(p % w);
    ys[size_t(p)] = double(p / w);
  }
  Tensor64 xg = Tensor64::from_data({1, 1, hw}, std::move(xs));
  Tensor64 yg = Tensor64::from_data({1, 1, hw}, std::move(ys));
  Tensor64 cx = sum(mul(attn, xg), 2);  // [N,J] expected pixel x
  Tensor64 cy = sum(mul(attn, yg), 2);
  // pixel -> [-1,1] device coords, the convention bilinear_sample expects
  Tensor64 nx = w > 1 ? sub(mul(cx, 2.0 / double(w - 1)), 1.0) : mul(cx, 0.0);
  Tensor64 ny = h > 1 ? sub(mul(cy, 2.0 / double(h - 1)), 1.0) : mul(cy, 0.0);
  const int64_t n = features.size(0);
  Tensor64 loc = concat(std::vector<Tensor64>{reshape(nx, {n, j, 1}), reshape(ny, {n, j, 1})}, 2);
  return bilinear_sample(features, loc);  // [N,J,C]
}

// Gaussian target heatmaps for keypoint supervision: one map per joint with a
// unit peak at the projected location. Locations in [-1,1] device coords.
inline Tensor64 keypoint_heatmap_targets(const std::vector<std::array<double, 2>>& j2d,
                                         int64_t height, int64_t width, double sigma_px) {
  if (!(sigma_px > 0))
    throw std::invalid_argument("heatmaps: sigma must be positive");
  const int64_t k = int64_t(j2d.size());
  std::vector<double> maps(static_cast<size_t>(k * height * width), 0.0);
  const double inv = 1.0 / (2.0 * sigma_px * sigma_px);
  for (int64_t q = 0; q < k; ++q) {
    const double cx = (j2d[size_t(q)][0] + 1.0) * 0.5 * double(width - 1);
    const double cy = (j2d[size_t(q)][1] + 1.0) * 0.5 * double(height - 1);
    for (int64_t y = 0; y < height; ++y)
      for (int64_t x = 0; x < width; ++x) {
        const double d2 = (double(x) - cx) * (double(x) - cx) +
                          (double(y) - cy) * (double(y) - cy);
        maps[size_t((q * height + y) * width + x)] = std::exp(-d2 * inv);
      }
  }
  return Tensor64::from_data({k, height, width}, std::move(maps));
}

// Fill the derived geometry of a prediction through the body model and the
// weak-perspective projection (camera rotation fixed to identity here; a
// nontrivial rotation only matters for analysis-time mesh transfer).
inline void finalize_prediction(Prediction& pred, BodyTensors& body,
                                bool use_posedirs = false) {
  const int64_t n = pred.batch();
  const int64_t j = pred.theta6d.size(1) / 6;
  pred.mesh.clear();
  pred.joints3d.clear();
  pred.joints2d.clear();
  for (int64_t i = 0; i < n; ++i) {
    Tensor64 rots = slice(pred.rotmats, 0, i * j, j);               // [K,9]
    Tensor64 beta_i = reshape(slice(pred.beta, 0, i, 1), {pred.beta.size(1)});
    Tensor64 mesh_i = body.lbs(rots, beta_i, use_posedirs);         // [V,3]
    Tensor64 j3_i = body.regress(mesh_i);                           // [K,3]
    Tensor64 s_i = reshape(slice(pred.cam_s, 0, i, 1), {1});
    Tensor64 t_i = reshape(slice(pred.cam_t, 0, i, 1), {2});
    pred.mesh.push_back(mesh_i);
    pred.joints3d.push_back(j3_i);
    pred.joints2d.push_back(project(j3_i, s_i, t_i));
  }
}

struct ForwardOut {
  Prediction pred;
  Tensor64 part_logits;     // [N, J+1, H, W]; undefined for the baseline
  bool part_loss_active = false;  // whether spatial supervision applies now
};

class PartAttentionNet {
 public:
  NetConfig cfg;
  ParamStore<double> params;
  bool training = true;

  explicit PartAttentionNet(NetConfig config) : cfg(std::move(config)) {
    cfg.validate();
    Rng rng(cfg.init_seed, RngUse::weight_init);

    // backbone: stride-2 conv / batchnorm / relu stages
    int64_t cin = 3;
    for (size_t i = 0; i < cfg.backbone_widths.size(); ++i) {
      const int64_t cout = cfg.backbone_widths[i];
      make_conv("backbone.s" + std::to_string(i), cout, cin, 3, rng);
      make_bn("backbone.s" + std::to_string(i), cout);
      cin = cout;
    }

    if (cfg.baseline_gap) {
      const int64_t feat = cfg.backbone_widths.back();
      const int64_t state = cfg.joints * 6 + cfg.betas + 3;
      make_linear("gap.fc0", feat + state, cfg.gap_hidden, rng);
      make_linear("gap.fc1", cfg.gap_hidden, cfg.gap_hidden, rng);
      make_linear("gap.out", cfg.gap_hidden, state, rng);
      // residual refinement starts tiny so early iterations stay near the
      // identity-pose initialization
      for (double& v : params.get("gap.out.w").mutable_data()) v *= 0.01;
      return;
    }

    // two upsampling branches, three 2x stages each
    const int64_t bw = cfg.branch_width;
    for (int b = 0; b < 2; ++b) {
      const std::string prefix = b == 0 ? "p_branch" : "f_branch";
      int64_t ch = cfg.backbone_widths.back();
      for (int i = 0; i < 3; ++i) {
        make_conv(prefix + ".u" + std::to_string(i), bw, ch, 3, rng);
        make_bn(prefix + ".u" + std::to_string(i), bw);
        ch = bw;
      }
      const int64_t out = b == 0 ? cfg.joints + 1 : cfg.channels;
      make_conv(prefix + ".head", out, bw, 1, rng);
    }

    // per-joint rotation heads; bias starts at the 6D identity so the initial
    // prediction is the rest pose
    for (int64_t j = 0; j < cfg.joints; ++j) {
      const std::string name = "head.rot" + std::to_string(j);
      make_linear(name, cfg.channels, 6, rng);
      auto& b = params.get(name + ".b").mutable_data();
      b = {1, 0, 0, 0, 1, 0};
    }
    // shape + camera head on the flattened per-joint features; the scale bias
    // makes softplus(raw) start at 1
    make_linear("head.bc", cfg.joints * cfg.channels, cfg.betas + 3, rng);
    params.get("head.bc.b").mutable_data()[size_t(cfg.betas)] =
        std::log(std::expm1(1.0));

    // the spatial heads benefit from small initial logits/features
    for (double& v : params.get("p_branch.head.w").mutable_data()) v *= 0.1;
  }

  Tensor64 backbone_forward(const Tensor64& image) {
    if (image.dim() != 4 || image.size(1) != 3)
      throw std::invalid_argument("backbone: input must be [N,3,S,S]");
    if (image.size(2) != cfg.image_size || image.size(3) != cfg.image_size)
      throw std::invalid_argument("backbone: expected " +
                                  std::to_string(cfg.image_size) + "x" +
                                  std::to_string(cfg.image_size) + " input, got " +
                                  std::to_string(image.size(2)) + "x" +
                                  std::to_string(image.size(3)));
    if (cfg.image_size % cfg.stride() != 0)
      throw std::invalid_argument("backbone: image size not divisible by stride");
    Tensor64 x = image;
    for (size_t i = 0; i < cfg.backbone_widths.size(); ++i) {
      const std::string s = "backbone.s" + std::to_string(i);
      x = conv2d(x, params.get(s + ".w"), params.get(s + ".b"), 2, 1);
      x = (*bn_.at(s))(x, training);
      x = relu(x);
    }
    return x;
  }

  // Shared branch recipe: three (upsample, conv3x3, bn, relu) stages and a
  // linear 1x1 head. Emits J+1 logit maps or C feature channels.
  Tensor64 branch_2d(const Tensor64& feat) { return run_branch("p_branch", feat); }
  Tensor64 branch_3d(const Tensor64& feat) { return run_branch("f_branch", feat); }

  // Per-joint linear rotation heads + one shape/camera head.
  Prediction regress(const Tensor64& fused) {
    if (fused.dim() != 3 || fused.size(1) != cfg.joints || fused.size(2) != cfg.channels)
      throw std::invalid_argument("regress: expected [N,J,C] fused features");
    const int64_t n = fused.size(0);
    std::vector<Tensor64> rows;
    rows.reserve(static_cast<size_t>(cfg.joints));
    for (int64_t j = 0; j < cfg.joints; ++j) {
      Tensor64 xj = reshape(slice(fused, 1, j, 1), {n, cfg.channels});
      const std::string name = "head.rot" + std::to_string(j);
      rows.push_back(linear(xj, params.get(name + ".w"), params.get(name + ".b")));
    }
    Tensor64 theta6d = concat(rows, 1);  // [N, J*6]
    Tensor64 flat = reshape(fused, {n, cfg.joints * cfg.channels});
    Tensor64 bc = linear(flat, params.get("head.bc.w"), params.get("head.bc.b"));
    return assemble_prediction(theta6d, bc, n);
  }

  // Baseline: global average pooling over the backbone map, then iterative
  // residual refinement of [pose, shape, camera] by an MLP.
  Prediction baseline_gap_forward(const Tensor64& image) {
    if (!cfg.baseline_gap)
      throw std::invalid_argument("baseline forward requires baseline_gap config");
    Tensor64 feat = backbone_forward(image);
    const int64_t n = feat.size(0), c = feat.size(1);
    Tensor64 pooled = mean(reshape(feat, {n, c, feat.size(2) * feat.size(3)}), 2);

    // mean/identity initialization: identity 6D pose, zero shape, unit scale
    std::vector<double> init(static_cast<size_t>(cfg.joints * 6 + cfg.betas + 3), 0.0);
    for (int64_t j = 0; j < cfg.joints; ++j) {
      init[size_t(j * 6 + 0)] = 1.0;
      init[size_t(j * 6 + 4)] = 1.0;
    }
    init[size_t(cfg.joints * 6 + cfg.betas)] = std::log(std::expm1(1.0));
    std::vector<double> tiled;
    tiled.reserve(init.size() * static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) tiled.insert(tiled.end(), init.begin(), init.end());
    Tensor64 state = Tensor64::from_data({n, int64_t(init.size())}, std::move(tiled));

    for (int64_t it = 0; it < cfg.gap_iterations; ++it) {
      Tensor64 inp = concat(std::vector<Tensor64>{pooled, state}, 1);
      Tensor64 h0 = relu(linear(inp, params.get("gap.fc0.w"), params.get("gap.fc0.b")));
      Tensor64 h1 = relu(linear(h0, params.get("gap.fc1.w"), params.get("gap.fc1.b")));
      Tensor64 res = linear(h1, params.get("gap.out.w"), params.get("gap.out.b"));
      state = add(state, res);
    }
    Tensor64 theta6d = slice(state, 1, 0, cfg.joints * 6);
    Tensor64 bc = slice(state, 1, cfg.joints * 6, cfg.betas + 3);
    return assemble_prediction(theta6d, bc, n);
  }

  // Full pipeline. The returned flag says whether spatial supervision is
  // active at this step (mixed mode switches it off at mixed_switch_step).
  ForwardOut forward(const Tensor64& image, int64_t global_step,
                     BodyTensors* body = nullptr, bool use_posedirs = false) {
    ForwardOut out;
    if (cfg.baseline_gap) {
      out.pred = baseline_gap_forward(image);
      out.part_loss_active = false;
    } else {
      Tensor64 feat = backbone_forward(image);
      out.part_logits = branch_2d(feat);
      Tensor64 fvol = branch_3d(feat);
      Tensor64 fused = cfg.sampling_mode == SamplingMode::attention
                           ? attention_fuse(out.part_logits, fvol)
                           : pooling_fuse(out.part_logits, fvol);
      out.pred = regress(fused);
      switch (cfg.supervision_mode) {
        case SupervisionMode::parts:
        case SupervisionMode::keypoints: out.part_loss_active = true; break;
        case SupervisionMode::none: out.part_loss_active = false; break;
        case SupervisionMode::mixed:
          out.part_loss_active = global_step < cfg.mixed_switch_step;
          break;
      }
    }
    if (body) finalize_prediction(out.pred, *body, use_posedirs);
    return out;
  }

  void save(const std::string& path, nlohmann::json meta = {}) {
    meta["config"] = cfg.to_json();
    save_params(params, path, cfg.hash(), std::move(meta));
  }

  // Loads weights, optimizer state, and batchnorm buffers; rejects files
  // whose config hash differs. Returns the stored metadata.
  nlohmann::json load(const std::string& path) {
    nlohmann::json info = load_params(params, path);
    if (info.at("config_hash").get<std::string>() != cfg.hash())
      throw std::runtime_error("checkpoint config hash mismatch: file " +
                               info.at("config_hash").get<std::string>() +
                               " vs current " + cfg.hash());
    return info.at("meta");
  }

 private:
  std::map<std::string, std::unique_ptr<BatchNorm2d<double>>> bn_;

  void make_conv(const std::string& name, int64_t cout, int64_t cin, int64_t k,
                 Rng& rng) {
    params.create(name + ".w", {cout, cin, k, k},
                  he_uniform<double>(cin * k * k, cout * cin * k * k, rng));
    params.create(name + ".b", {cout}, std::vector<double>(static_cast<size_t>(cout), 0.0));
  }

  void make_linear(const std::string& name, int64_t in, int64_t out, Rng& rng) {
    params.create(name + ".w", {in, out}, he_uniform<double>(in, in * out, rng));
    params.create(name + ".b", {out}, std::vector<double>(static_cast<size_t>(out), 0.0));
  }

  void make_bn(const std::string& name, int64_t channels) {
    auto bn = std::make_unique<BatchNorm2d<double>>(channels);
    params.adopt(name + ".bn.gamma", bn->gamma);
    params.adopt(name + ".bn.beta", bn->beta);
    params.add_buffer(name + ".bn.rm", &bn->running_mean);
    params.add_buffer(name + ".bn.rv", &bn->running_var);
    bn_.emplace(name, std::move(bn));
  }

  Tensor64 run_branch(const std::string& prefix, const Tensor64& feat) {
    Tensor64 x = feat;
    for (int i = 0; i < 3; ++i) {
      const std::string s = prefix + ".u" + std::to_string(i);
      x = upsample2x_nearest(x);
      x = conv2d(x, params.get(s + ".w"), params.get(s + ".b"), 1, 1);
      x = (*bn_.at(s))(x, training);
      x = relu(x);
    }
    return conv2d(x, params.get(prefix + ".head.w"), params.get(prefix + ".head.b"), 1, 0);
  }

  Prediction assemble_prediction(const Tensor64& theta6d, const Tensor64& bc, int64_t n) {
    Prediction pred;
    pred.theta6d = theta6d;
    pred.rotmats = rot6d_to_matrix_rows(reshape(theta6d, {n * cfg.joints, 6}));
    pred.beta = slice(bc, 1, 0, cfg.betas);
    pred.cam_s = add(softplus(slice(bc, 1, cfg.betas, 1)), 1e-4);
    pred.cam_t = slice(bc, 1, cfg.betas + 1, 2);
    return pred;
  }
};

// Scoped switch to inference behavior (batchnorm running statistics); restores
// the previous mode on exit. Pair with NoGradGuard to also skip the tape.
struct InferenceModeGuard {
  PartAttentionNet& net;
  bool saved;
  explicit InferenceModeGuard(PartAttentionNet& n) : net(n), saved(n.training) {
    net.training = false;
  }
  ~InferenceModeGuard() { net.training = saved; }
  InferenceModeGuard(const InferenceModeGuard&) = delete;
  InferenceModeGuard& operator=(const InferenceModeGuard&) = delete;
};

}  // namespace parelab
