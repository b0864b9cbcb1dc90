#pragma once
// Training losses and evaluation metrics for the body regressor.
//
// Losses are autodiff scalars. 3D joint loss root-centers both sets first
// (the body model is translation-free, so absolute position carries no
// signal); the 2D loss is confidence-weighted and operates on [-1,1]
// normalized image coordinates so its weight is resolution-independent.
// Pose loss compares rotation matrices; part loss is per-pixel cross-entropy
// against rendered labels; keypoint loss is mean squared error between the
// joint channels of the spatial logits and Gaussian target heatmaps.
//
// Metrics are plain doubles: MPJPE (root-aligned), PA-MPJPE (after a
// similarity Procrustes alignment), PVE, PCK, and part-segmentation IoU.
// Distances are reported in millimetres assuming 1 model unit = 1 metre.

#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "parelab/rotations.hpp"
#include "parelab/tensor.hpp"

namespace parelab {

inline constexpr double kUnitsToMm = 1000.0;

struct LossWeights {
  double lambda_3d = 300.0;
  double lambda_2d = 300.0;
  double lambda_smpl = 60.0;
  double lambda_p = 60.0;  // spatial (part / keypoint) supervision; gated off in mixed mode

  void validate() const {
    if (lambda_3d < 0 || lambda_2d < 0 || lambda_smpl < 0 || lambda_p < 0)
      throw std::invalid_argument("loss weights must be nonnegative");
  }
};

// Mean squared distance over valid joints, both sets centered on the root
// joint first. An all-false mask yields a graph-free zero.
inline Tensor64 loss_3d(const Tensor64& pred, const Tensor64& gt,
                        const std::vector<uint8_t>& valid, int64_t root_index = 0) {
  if (pred.dim() != 2 || pred.size(1) != 3 || gt.dim() != 2 || gt.size(1) != 3)
    throw std::invalid_argument("loss_3d: expected [K,3] joint sets");
  const int64_t k = pred.size(0);
  if (gt.size(0) != k || int64_t(valid.size()) != k)
    throw std::invalid_argument("loss_3d: joint count mismatch");
  if (root_index < 0 || root_index >= k)
    throw std::invalid_argument("loss_3d: root index out of range");
  int64_t n_valid = 0;
  std::vector<double> w(static_cast<size_t>(k), 0.0);
  for (int64_t j = 0; j < k; ++j)
    if (valid[size_t(j)]) {
      w[size_t(j)] = 1.0;
      ++n_valid;
    }
  if (n_valid == 0) return Tensor64::scalar(0.0);
  Tensor64 pc = sub(pred, slice(pred, 0, root_index, 1));
  Tensor64 gc = sub(gt, slice(gt, 0, root_index, 1));
  Tensor64 sq = square(sub(pc, gc));  // [K,3]
  Tensor64 wt = Tensor64::from_data({k, 1}, std::move(w));
  return div(sum(mul(sq, wt)), double(n_valid));
}

// Confidence-weighted mean squared distance over joints; no centering (the
// camera translation is part of what this loss teaches).
inline Tensor64 loss_2d(const Tensor64& pred, const Tensor64& gt,
                        const std::vector<double>& conf) {
  if (pred.dim() != 2 || pred.size(1) != 2 || gt.dim() != 2 || gt.size(1) != 2)
    throw std::invalid_argument("loss_2d: expected [K,2] keypoint sets");
  const int64_t k = pred.size(0);
  if (gt.size(0) != k || int64_t(conf.size()) != k)
    throw std::invalid_argument("loss_2d: joint count mismatch");
  for (double c : conf)
    if (c < 0) throw std::invalid_argument("loss_2d: confidences must be nonnegative");
  std::vector<double> w(conf);
  Tensor64 wt = Tensor64::from_data({k, 1}, std::move(w));
  return div(sum(mul(square(sub(pred, gt)), wt)), double(k));
}

// Axis-angle pose (flat K*3) to a constant [K,9] rotation-matrix tensor, for
// building pose-loss targets.
inline Tensor64 constant_rotmats(const std::vector<double>& axis_angle_flat) {
  if (axis_angle_flat.size() % 3 != 0)
    throw std::invalid_argument("constant_rotmats: pose length must be divisible by 3");
  const int64_t k = int64_t(axis_angle_flat.size() / 3);
  std::vector<double> out;
  out.reserve(static_cast<size_t>(k * 9));
  for (int64_t j = 0; j < k; ++j) {
    Mat3 m = axis_angle_to_matrix({axis_angle_flat[size_t(3 * j)],
                                   axis_angle_flat[size_t(3 * j + 1)],
                                   axis_angle_flat[size_t(3 * j + 2)]});
    out.insert(out.end(), m.begin(), m.end());
  }
  return Tensor64::from_data({k, 9}, std::move(out));
}

// Squared L2 between poses in rotation-matrix form plus squared L2 between
// shape coefficients (sum reduction, matching the model-parameter norm).
inline Tensor64 loss_smpl(const Tensor64& pred_rotmats, const Tensor64& pred_beta,
                          const Tensor64& gt_rotmats, const Tensor64& gt_beta) {
  if (pred_rotmats.dim() != 2 || pred_rotmats.size(1) != 9 ||
      gt_rotmats.dim() != 2 || gt_rotmats.size(1) != 9)
    throw std::invalid_argument("loss_smpl: rotations must be [K,9]");
  if (pred_rotmats.size(0) != gt_rotmats.size(0))
    throw std::invalid_argument("loss_smpl: joint count mismatch");
  if (pred_beta.numel() != gt_beta.numel())
    throw std::invalid_argument("loss_smpl: shape coefficient count mismatch");
  Tensor64 lr = sum(square(sub(pred_rotmats, gt_rotmats)));
  Tensor64 lb = sum(square(sub(flatten(pred_beta), flatten(gt_beta))));
  return add(lr, lb);
}

// Per-pixel channel softmax cross-entropy against integer labels in [0, J],
// averaged over every pixel of the batch.
inline Tensor64 loss_parts(const Tensor64& part_logits, const std::vector<int>& labels) {
  if (part_logits.dim() != 4)
    throw std::invalid_argument("loss_parts: logits must be [N,J+1,H,W]");
  const int64_t n = part_logits.size(0), c = part_logits.size(1);
  const int64_t h = part_logits.size(2), w = part_logits.size(3);
  if (int64_t(labels.size()) != n * h * w)
    throw std::invalid_argument("loss_parts: need one label per pixel, got " +
                                std::to_string(labels.size()) + " for " +
                                std::to_string(n * h * w) + " pixels");
  std::vector<double> onehot(static_cast<size_t>(n * c * h * w), 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const int lab = labels[size_t((i * h + y) * w + x)];
        if (lab < 0 || lab >= c)
          throw std::invalid_argument("loss_parts: label " + std::to_string(lab) +
                                      " outside [0, " + std::to_string(c - 1) + "]");
        onehot[size_t(((i * c + lab) * h + y) * w + x)] = 1.0;
      }
  Tensor64 mask = Tensor64::from_data({n, c, h, w}, std::move(onehot));
  Tensor64 ll = mul(log_softmax(part_logits, 1), mask);
  return div(neg(sum(ll)), double(n * h * w));
}

// Keypoint supervision: plain MSE between the joint channels of the spatial
// logits (background channel dropped) and Gaussian target heatmaps.
inline Tensor64 loss_keypoints(const Tensor64& part_logits, const Tensor64& targets) {
  if (part_logits.dim() != 4 || targets.dim() != 4)
    throw std::invalid_argument("loss_keypoints: expected [N,J+1,H,W] logits and [N,J,H,W] targets");
  const int64_t j = targets.size(1);
  if (part_logits.size(1) != j + 1 || part_logits.size(0) != targets.size(0) ||
      part_logits.size(2) != targets.size(2) || part_logits.size(3) != targets.size(3))
    throw std::invalid_argument("loss_keypoints: logit/target shapes incompatible");
  return mean(square(sub(slice(part_logits, 1, 1, j), targets)));
}

// Weighted sum of the four terms. A term whose weight is zero is ignored
// entirely (its tensor may be left default-constructed).
inline Tensor64 total_loss(const Tensor64& l3d, const Tensor64& l2d,
                           const Tensor64& lsmpl, const Tensor64& lp,
                           const LossWeights& w) {
  w.validate();
  Tensor64 total;
  auto accumulate = [&total](const Tensor64& term, double lambda, const char* name) {
    if (lambda == 0.0) return;
    if (!term.defined())
      throw std::invalid_argument(std::string("total_loss: ") + name +
                                  " has nonzero weight but no value");
    Tensor64 scaled = mul(term, lambda);
    total = total.defined() ? add(total, scaled) : scaled;
  };
  accumulate(l3d, w.lambda_3d, "3d term");
  accumulate(l2d, w.lambda_2d, "2d term");
  accumulate(lsmpl, w.lambda_smpl, "pose term");
  accumulate(lp, w.lambda_p, "spatial term");
  return total.defined() ? total : Tensor64::scalar(0.0);
}

// ---------------------------------------------------------------------------
// Metrics (plain doubles, no autodiff)

using Points3 = std::vector<std::array<double, 3>>;
using Points2 = std::vector<std::array<double, 2>>;

struct SimilarityTransform {
  double scale = 1.0;
  Mat3 rotation = mat3_identity();
  Vec3 translation = {0, 0, 0};

  std::array<double, 3> apply(const std::array<double, 3>& p) const {
    Vec3 r = mat3_apply(rotation, {p[0], p[1], p[2]});
    return {scale * r[0] + translation[0], scale * r[1] + translation[1],
            scale * r[2] + translation[2]};
  }
};

// Least-squares similarity transform minimizing ||s R X + t - Y||_F.
// Centers both sets, takes the SVD of the cross-covariance with a
// determinant-sign correction, and solves the scale in closed form.
// Collinear or coincident X has no well-defined rotation and is rejected.
inline SimilarityTransform procrustes_align(const Points3& x, const Points3& y) {
  const size_t k = x.size();
  if (k < 3) throw std::invalid_argument("procrustes: need at least 3 points");
  if (y.size() != k) throw std::invalid_argument("procrustes: point count mismatch");

  Eigen::Vector3d mx = Eigen::Vector3d::Zero(), my = Eigen::Vector3d::Zero();
  for (size_t i = 0; i < k; ++i) {
    mx += Eigen::Vector3d(x[i][0], x[i][1], x[i][2]);
    my += Eigen::Vector3d(y[i][0], y[i][1], y[i][2]);
  }
  mx /= double(k);
  my /= double(k);

  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  double var_x = 0.0;
  for (size_t i = 0; i < k; ++i) {
    Eigen::Vector3d xc = Eigen::Vector3d(x[i][0], x[i][1], x[i][2]) - mx;
    Eigen::Vector3d yc = Eigen::Vector3d(y[i][0], y[i][1], y[i][2]) - my;
    cov += yc * xc.transpose();
    var_x += xc.squaredNorm();
  }

  // rank check on the source points: collinear or coincident sets leave the
  // rotation underdetermined
  Eigen::Matrix3d xxt = Eigen::Matrix3d::Zero();
  for (size_t i = 0; i < k; ++i) {
    Eigen::Vector3d xc = Eigen::Vector3d(x[i][0], x[i][1], x[i][2]) - mx;
    xxt += xc * xc.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(xxt);
  const double lead = eig.eigenvalues()(2);
  if (!(lead > 0) || eig.eigenvalues()(1) <= 1e-12 * lead)
    throw std::invalid_argument("procrustes: source points are collinear or coincident");

  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d u = svd.matrixU(), v = svd.matrixV();
  Eigen::Vector3d d = Eigen::Vector3d::Ones();
  if ((u * v.transpose()).determinant() < 0) d(2) = -1.0;
  Eigen::Matrix3d r = u * d.asDiagonal() * v.transpose();
  const double s = svd.singularValues().dot(d) / var_x;

  SimilarityTransform out;
  out.scale = s;
  for (int i = 0; i < 3; ++i)
    for (int jj = 0; jj < 3; ++jj) out.rotation[size_t(3 * i + jj)] = r(i, jj);
  Eigen::Vector3d t = my - s * (r * mx);
  out.translation = {t(0), t(1), t(2)};
  return out;
}

namespace detail {
inline double mean_distance(const Points3& a, const Points3& b) {
  if (a.size() != b.size() || a.empty())
    throw std::invalid_argument("metric: point sets must match and be nonempty");
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i)
    acc += std::sqrt((a[i][0] - b[i][0]) * (a[i][0] - b[i][0]) +
                     (a[i][1] - b[i][1]) * (a[i][1] - b[i][1]) +
                     (a[i][2] - b[i][2]) * (a[i][2] - b[i][2]));
  return acc / double(a.size());
}

inline Points3 root_centered(const Points3& p, size_t root) {
  if (root >= p.size()) throw std::invalid_argument("metric: root index out of range");
  Points3 out(p);
  const std::array<double, 3> r = p[root];
  for (auto& q : out) {
    q[0] -= r[0];
    q[1] -= r[1];
    q[2] -= r[2];
  }
  return out;
}
}  // namespace detail

// Mean per-joint position error after root alignment, in input units.
inline double mpjpe(const Points3& pred, const Points3& gt, size_t root_index = 0) {
  return detail::mean_distance(detail::root_centered(pred, root_index),
                               detail::root_centered(gt, root_index));
}

inline std::vector<double> per_joint_error(const Points3& pred, const Points3& gt,
                                           size_t root_index = 0) {
  Points3 p = detail::root_centered(pred, root_index);
  Points3 g = detail::root_centered(gt, root_index);
  std::vector<double> out(p.size());
  for (size_t i = 0; i < p.size(); ++i)
    out[i] = std::sqrt((p[i][0] - g[i][0]) * (p[i][0] - g[i][0]) +
                       (p[i][1] - g[i][1]) * (p[i][1] - g[i][1]) +
                       (p[i][2] - g[i][2]) * (p[i][2] - g[i][2]));
  return out;
}

// Mean per-joint error after the optimal similarity alignment of the
// prediction onto the ground truth.
inline double pa_mpjpe(const Points3& pred, const Points3& gt) {
  SimilarityTransform t = procrustes_align(pred, gt);
  Points3 aligned(pred.size());
  for (size_t i = 0; i < pred.size(); ++i) aligned[i] = t.apply(pred[i]);
  return detail::mean_distance(aligned, gt);
}

// Mean per-vertex distance, in input units. Callers align (root-center)
// before calling; the raw distance itself makes no alignment choice.
inline double pve(const Points3& pred_mesh, const Points3& gt_mesh) {
  return detail::mean_distance(pred_mesh, gt_mesh);
}

// Fraction of 2D joints whose prediction lies within `threshold` of the
// ground truth (same units as the inputs).
inline double pck(const Points2& pred, const Points2& gt, double threshold) {
  if (pred.size() != gt.size() || pred.empty())
    throw std::invalid_argument("pck: point sets must match and be nonempty");
  if (!(threshold > 0)) throw std::invalid_argument("pck: threshold must be positive");
  size_t hit = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const double dx = pred[i][0] - gt[i][0], dy = pred[i][1] - gt[i][1];
    if (std::sqrt(dx * dx + dy * dy) <= threshold) ++hit;
  }
  return double(hit) / double(pred.size());
}

// Mean intersection-over-union across foreground classes 1..num_classes-1.
// Classes absent from both maps are skipped; two all-background maps agree
// perfectly and score 1.
inline double seg_iou(const std::vector<int>& pred, const std::vector<int>& gt,
                      int num_classes) {
  if (pred.size() != gt.size() || pred.empty())
    throw std::invalid_argument("seg_iou: label maps must match and be nonempty");
  if (num_classes < 2)
    throw std::invalid_argument("seg_iou: need at least one foreground class");
  std::vector<int64_t> inter(static_cast<size_t>(num_classes), 0);
  std::vector<int64_t> uni(static_cast<size_t>(num_classes), 0);
  for (size_t i = 0; i < pred.size(); ++i) {
    const int p = pred[i], g = gt[i];
    if (p < 0 || p >= num_classes || g < 0 || g >= num_classes)
      throw std::invalid_argument("seg_iou: label outside [0, num_classes)");
    if (p == g) {
      ++inter[size_t(p)];
      ++uni[size_t(p)];
    } else {
      ++uni[size_t(p)];
      ++uni[size_t(g)];
    }
  }
  double acc = 0.0;
  int present = 0;
  for (int c = 1; c < num_classes; ++c)
    if (uni[size_t(c)] > 0) {
      acc += double(inter[size_t(c)]) / double(uni[size_t(c)]);
      ++present;
    }
  return present == 0 ? 1.0 : acc / double(present);
}

struct MetricReport {
  double mpjpe_mm = 0.0;
  double pa_mpjpe_mm = 0.0;
  double pve_mm = 0.0;
  double pck = 0.0;
  double seg_iou = 0.0;
  std::vector<double> per_joint_mpjpe_mm;

  void validate() const {
    auto finite_nonneg = [](double v) { return std::isfinite(v) && v >= 0.0; };
    if (!finite_nonneg(mpjpe_mm) || !finite_nonneg(pa_mpjpe_mm) || !finite_nonneg(pve_mm))
      throw std::runtime_error("metric report: distances must be finite and nonnegative");
    if (!(pck >= 0.0 && pck <= 1.0) || !(seg_iou >= 0.0 && seg_iou <= 1.0))
      throw std::runtime_error("metric report: fractions must lie in [0,1]");
    for (double v : per_joint_mpjpe_mm)
      if (!finite_nonneg(v))
        throw std::runtime_error("metric report: per-joint errors must be finite");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"mpjpe_mm", mpjpe_mm},     {"pa_mpjpe_mm", pa_mpjpe_mm},
                          {"pve_mm", pve_mm},         {"pck", pck},
                          {"seg_iou", seg_iou},       {"per_joint_mpjpe_mm", per_joint_mpjpe_mm}};
  }

  static MetricReport from_json(const nlohmann::json& j) {
    MetricReport r;
    r.mpjpe_mm = j.at("mpjpe_mm").get<double>();
    r.pa_mpjpe_mm = j.at("pa_mpjpe_mm").get<double>();
    r.pve_mm = j.at("pve_mm").get<double>();
    r.pck = j.at("pck").get<double>();
    r.seg_iou = j.at("seg_iou").get<double>();
    r.per_joint_mpjpe_mm = j.at("per_joint_mpjpe_mm").get<std::vector<double>>();
    return r;
  }

  std::string to_table() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    os << std::left << std::setw(12) << "metric" << std::right << std::setw(10)
       << "value" << "\n";
    os << std::left << std::setw(12) << "mpjpe_mm" << std::right << std::setw(10)
       << mpjpe_mm << "\n";
    os << std::left << std::setw(12) << "pa_mpjpe_mm" << std::right << std::setw(10)
       << pa_mpjpe_mm << "\n";
    os << std::left << std::setw(12) << "pve_mm" << std::right << std::setw(10)
       << pve_mm << "\n";
    os << std::left << std::setw(12) << "pck" << std::right << std::setw(10)
       << std::setprecision(4) << pck << "\n";
    os << std::left << std::setw(12) << "seg_iou" << std::right << std::setw(10)
       << seg_iou << "\n";
    return os.str();
  }
};

// Running average of per-sample metrics, with a per-joint breakdown.
class MetricAccumulator {
 public:
  void add(const MetricReport& r) {
    if (count_ == 0) {
      sum_ = r;
    } else {
      sum_.mpjpe_mm += r.mpjpe_mm;
      sum_.pa_mpjpe_mm += r.pa_mpjpe_mm;
      sum_.pve_mm += r.pve_mm;
      sum_.pck += r.pck;
      sum_.seg_iou += r.seg_iou;
      if (sum_.per_joint_mpjpe_mm.size() != r.per_joint_mpjpe_mm.size())
        throw std::invalid_argument("metric accumulator: per-joint sizes differ");
      for (size_t i = 0; i < r.per_joint_mpjpe_mm.size(); ++i)
        sum_.per_joint_mpjpe_mm[i] += r.per_joint_mpjpe_mm[i];
    }
    ++count_;
  }

  int64_t count() const { return count_; }

  MetricReport mean() const {
    if (count_ == 0) throw std::runtime_error("metric accumulator: no samples");
    MetricReport r = sum_;
    const double inv = 1.0 / double(count_);
    r.mpjpe_mm *= inv;
    r.pa_mpjpe_mm *= inv;
    r.pve_mm *= inv;
    r.pck *= inv;
    r.seg_iou *= inv;
    for (double& v : r.per_joint_mpjpe_mm) v *= inv;
    return r;
  }

 private:
  MetricReport sum_;
  int64_t count_ = 0;
};

}  // namespace parelab
