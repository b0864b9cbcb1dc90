#pragma once
//
// Training loop, evaluation, and run logging for the part-attention regressor.
//
// The loop is fully deterministic given its seed: batch composition and both
// augmentations draw from counter-based streams keyed by (seed, purpose, step),
// so step N consumes identical randomness whether it is reached in one run or
// after resuming from a checkpoint. Checkpoints carry the optimizer moments
// and the step counter, which makes resumed training bit-identical to an
// uninterrupted run.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "parelab/body_model.hpp"
#include "parelab/camera.hpp"
#include "parelab/data.hpp"
#include "parelab/losses.hpp"
#include "parelab/net.hpp"
#include "parelab/rng.hpp"
#include "parelab/tensor.hpp"

namespace parelab {

// ---------------------------------------------------------------------------
// configuration

struct TrainConfig {
  int64_t total_steps = 10000;
  int64_t batch_size = 8;
  double lr = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  LossWeights weights;                 // per-term loss scales
  int64_t randcrop_start_step = 8000;  // random-crop augmentation starts here
  bool use_occluder = true;            // synthetic occlusion on every step
  int64_t eval_every = 1000;           // checkpoint / eval cadence, in steps
  double grad_clip = 1.0;              // global-norm bound; 0 disables clipping
  uint64_t seed = 1;
  std::string checkpoint_dir = "run";

  void validate() const {
    if (total_steps < 0)
      throw std::invalid_argument("train config: total_steps must be >= 0");
    if (batch_size < 1)
      throw std::invalid_argument("train config: batch_size must be >= 1");
    if (!(lr > 0)) throw std::invalid_argument("train config: lr must be positive");
    if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1))
      throw std::invalid_argument("train config: adam betas must lie in [0,1)");
    if (!(adam_eps > 0))
      throw std::invalid_argument("train config: adam_eps must be positive");
    weights.validate();
    if (randcrop_start_step < 0)
      throw std::invalid_argument("train config: randcrop_start_step must be >= 0");
    if (eval_every < 1)
      throw std::invalid_argument("train config: eval_every must be >= 1");
    if (grad_clip < 0)
      throw std::invalid_argument("train config: grad_clip must be >= 0");
    if (checkpoint_dir.empty())
      throw std::invalid_argument("train config: checkpoint_dir must be set");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"total_steps", total_steps},
                          {"batch_size", batch_size},
                          {"lr", lr},
                          {"adam_beta1", adam_beta1},
                          {"adam_beta2", adam_beta2},
                          {"adam_eps", adam_eps},
                          {"lambda_3d", weights.lambda_3d},
                          {"lambda_2d", weights.lambda_2d},
                          {"lambda_smpl", weights.lambda_smpl},
                          {"lambda_p", weights.lambda_p},
                          {"randcrop_start_step", randcrop_start_step},
                          {"use_occluder", use_occluder},
                          {"eval_every", eval_every},
                          {"grad_clip", grad_clip},
                          {"seed", seed},
                          {"checkpoint_dir", checkpoint_dir}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    nlohmann::json known = c.to_json();
    for (auto it = j.begin(); it != j.end(); ++it)
      if (!known.contains(it.key()))
        throw std::invalid_argument("train config: unknown key '" + it.key() + "'");
    c.total_steps = j.value("total_steps", c.total_steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.weights.lambda_3d = j.value("lambda_3d", c.weights.lambda_3d);
    c.weights.lambda_2d = j.value("lambda_2d", c.weights.lambda_2d);
    c.weights.lambda_smpl = j.value("lambda_smpl", c.weights.lambda_smpl);
    c.weights.lambda_p = j.value("lambda_p", c.weights.lambda_p);
    c.randcrop_start_step = j.value("randcrop_start_step", c.randcrop_start_step);
    c.use_occluder = j.value("use_occluder", c.use_occluder);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_dir = j.value("checkpoint_dir", c.checkpoint_dir);
    c.validate();
    return c;
  }

  // Content hash for run identity. The checkpoint directory is where results
  // land, not what they are, so it stays out of the hash.
  std::string hash() const {
    nlohmann::json j = to_json();
    j.erase("checkpoint_dir");
    return fnv1a_hex(j.dump());
  }

  // Full-scale schedule paired with NetConfig::large().
  static TrainConfig large() {
    TrainConfig c;
    c.total_steps = 200000;
    c.batch_size = 64;
    c.lr = 5e-5;
    c.randcrop_start_step = 175000;
    c.eval_every = 10000;
    return c;
  }
};

// ---------------------------------------------------------------------------
// run log (JSON lines; one record per line, dispatched on "kind")

struct StepRecord {
  int64_t step = 0;     // 0-based index of the step this record describes
  double total = 0.0;   // weighted sum actually optimized
  double l3d = 0.0;     // unweighted term values
  double l2d = 0.0;
  double lsmpl = 0.0;
  double lparts = 0.0;  // 0 when spatial supervision is inactive
  bool parts_active = false;
  double grad_norm = 0.0;  // global norm before clipping

  nlohmann::json to_json() const {
    return nlohmann::json{{"kind", "step"},       {"step", step},
                          {"total", total},       {"l3d", l3d},
                          {"l2d", l2d},           {"lsmpl", lsmpl},
                          {"lparts", lparts},     {"parts_active", parts_active},
                          {"grad_norm", grad_norm}};
  }

  static StepRecord from_json(const nlohmann::json& j) {
    StepRecord r;
    r.step = j.at("step").get<int64_t>();
    r.total = j.at("total").get<double>();
    r.l3d = j.at("l3d").get<double>();
    r.l2d = j.at("l2d").get<double>();
    r.lsmpl = j.at("lsmpl").get<double>();
    r.lparts = j.at("lparts").get<double>();
    r.parts_active = j.at("parts_active").get<bool>();
    r.grad_norm = j.at("grad_norm").get<double>();
    return r;
  }
};

struct EvalRecord {
  int64_t step = 0;       // completed steps when this evaluation ran
  MetricReport metrics;   // clean-set metrics

  nlohmann::json to_json() const {
    return nlohmann::json{{"kind", "eval"}, {"step", step}, {"metrics", metrics.to_json()}};
  }

  static EvalRecord from_json(const nlohmann::json& j) {
    EvalRecord r;
    r.step = j.at("step").get<int64_t>();
    r.metrics = MetricReport::from_json(j.at("metrics"));
    return r;
  }
};

struct RunLog {
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  std::optional<int64_t> aborted_step;

  static RunLog load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("run log: cannot open " + path);
    RunLog log;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      nlohmann::json j = nlohmann::json::parse(line);
      const std::string kind = j.at("kind").get<std::string>();
      if (kind == "step")
        log.steps.push_back(StepRecord::from_json(j));
      else if (kind == "eval")
        log.evals.push_back(EvalRecord::from_json(j));
      else if (kind == "abort")
        log.aborted_step = j.at("step").get<int64_t>();
      else
        throw std::runtime_error("run log: unknown record kind '" + kind + "'");
    }
    return log;
  }
};

// ---------------------------------------------------------------------------
// batch loss assembly

struct BatchLosses {
  Tensor64 total;   // weighted sum; graph-free zero when every weight is off
  Tensor64 l3d;     // unweighted per-term means over the batch
  Tensor64 l2d;
  Tensor64 lsmpl;
  Tensor64 lparts;  // undefined when spatial supervision is inactive
  bool parts_active = false;
};

// One forward pass over a prepared (already augmented) batch, producing all
// loss terms. The spatial term is gated by the network's own schedule; its
// weight is zeroed here whenever the network reports it inactive, so the
// returned total is always consistent with what the gate allows.
inline BatchLosses compute_batch_losses(PartAttentionNet& net, BodyTensors& body,
                                        const std::vector<Sample>& batch,
                                        int64_t global_step,
                                        const LossWeights& weights) {
  if (batch.empty())
    throw std::invalid_argument("batch losses: batch must be nonempty");
  const int64_t n = int64_t(batch.size());
  const int64_t joints = net.cfg.joints;

  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), int64_t(0));
  Tensor64 image = batch_image_tensor(batch, order);
  ForwardOut fwd = net.forward(image, global_step, &body);

  Tensor64 acc3, acc2, accs;
  for (int64_t i = 0; i < n; ++i) {
    const Sample& s = batch[size_t(i)];
    const int64_t k = int64_t(s.joints3d_gt.size());
    Tensor64 gt3 = Tensor64::from_data({k, 3}, detail::flatten3(s.joints3d_gt));
    // every joint of a synthesized sample has exact 3D ground truth
    std::vector<uint8_t> valid(static_cast<size_t>(k), 1);
    Tensor64 t3 = loss_3d(fwd.pred.joints3d[size_t(i)], gt3, valid);

    Tensor64 gt2 = Tensor64::from_data({k, 2}, detail::flatten2(s.joints2d_gt));
    Tensor64 t2 = loss_2d(fwd.pred.joints2d[size_t(i)], gt2, s.conf2d);

    Tensor64 rot_i = slice(fwd.pred.rotmats, 0, i * joints, joints);
    Tensor64 beta_i = reshape(slice(fwd.pred.beta, 0, i, 1), {net.cfg.betas});
    Tensor64 gt_beta =
        Tensor64::from_data({int64_t(s.beta_gt.size())}, s.beta_gt);
    Tensor64 ts = loss_smpl(rot_i, beta_i, constant_rotmats(s.theta_gt), gt_beta);

    acc3 = acc3.defined() ? add(acc3, t3) : t3;
    acc2 = acc2.defined() ? add(acc2, t2) : t2;
    accs = accs.defined() ? add(accs, ts) : ts;
  }

  BatchLosses out;
  const double inv_n = 1.0 / double(n);
  out.l3d = mul(acc3, inv_n);
  out.l2d = mul(acc2, inv_n);
  out.lsmpl = mul(accs, inv_n);
  out.parts_active = fwd.part_loss_active;

  if (fwd.part_loss_active) {
    const int64_t h = fwd.part_logits.size(2), w = fwd.part_logits.size(3);
    if (net.cfg.supervision_mode == SupervisionMode::keypoints) {
      std::vector<double> maps;
      maps.reserve(static_cast<size_t>(n * joints * h * w));
      for (const Sample& s : batch) {
        Tensor64 m =
            keypoint_heatmap_targets(s.joints2d_gt, h, w, net.cfg.heatmap_sigma);
        const auto& d = m.data();
        maps.insert(maps.end(), d.begin(), d.end());
      }
      Tensor64 targets =
          Tensor64::from_data({n, joints, h, w}, std::move(maps));
      out.lparts = loss_keypoints(fwd.part_logits, targets);
    } else {
      // part-label cross-entropy; label maps must match the logit grid
      std::vector<int> labels;
      labels.reserve(static_cast<size_t>(n * h * w));
      for (const Sample& s : batch) {
        if (s.label_size != h || s.label_size != w)
          throw std::invalid_argument(
              "batch losses: label maps are " + std::to_string(s.label_size) +
              "^2 but the logit grid is " + std::to_string(h) + "x" +
              std::to_string(w));
        labels.insert(labels.end(), s.part_labels.begin(), s.part_labels.end());
      }
      out.lparts = loss_parts(fwd.part_logits, labels);
    }
  }

  LossWeights effective = weights;
  if (!out.parts_active) effective.lambda_p = 0.0;
  out.total = total_loss(out.l3d, out.l2d, out.lsmpl, out.lparts, effective);
  return out;
}

// ---------------------------------------------------------------------------
// evaluation

struct EvalReport {
  MetricReport clean;
  std::optional<MetricReport> occluded;
  double occlusion_delta_mm = 0.0;  // occluded mpjpe minus clean mpjpe

  nlohmann::json to_json() const {
    nlohmann::json j{{"clean", clean.to_json()},
                     {"occlusion_delta_mm", occlusion_delta_mm}};
    j["occluded"] = occluded ? occluded->to_json() : nlohmann::json(nullptr);
    return j;
  }

  static EvalReport from_json(const nlohmann::json& j) {
    EvalReport r;
    r.clean = MetricReport::from_json(j.at("clean"));
    if (!j.at("occluded").is_null())
      r.occluded = MetricReport::from_json(j.at("occluded"));
    r.occlusion_delta_mm = j.at("occlusion_delta_mm").get<double>();
    return r;
  }
};

namespace detail {

inline Points3 root_aligned(Points3 pts, const std::array<double, 3>& root) {
  for (auto& p : pts) {
    p[0] -= root[0];
    p[1] -= root[1];
    p[2] -= root[2];
  }
  return pts;
}

// Metrics over one dataset pass in index order. Assumes inference mode and a
// disabled tape are already in force. When `occ` is given, each sample is
// occluded with a stream keyed by the dataset seed and the sample index, so
// every network evaluated against this dataset sees identical occlusions.
inline MetricReport eval_pass(PartAttentionNet& net, BodyTensors& body,
                              const Dataset& ds, const OccluderConfig* occ,
                              int64_t batch_size) {
  const int64_t n = int64_t(ds.samples.size());
  const int64_t joints = net.cfg.joints;
  const double pck_threshold = 0.05 * double(ds.spec.image_size);
  const double half_px = 0.5 * double(ds.spec.image_size - 1);
  MetricAccumulator acc;

  for (int64_t b0 = 0; b0 < n; b0 += batch_size) {
    const int64_t bn = std::min(batch_size, n - b0);
    std::vector<Sample> batch(ds.samples.begin() + b0,
                              ds.samples.begin() + b0 + bn);
    if (occ)
      for (Sample& s : batch) {
        Rng ro(ds.spec.seed, RngUse::synth_occ, uint64_t(s.index));
        apply_occluder(s, ro, *occ);
      }

    std::vector<int64_t> order(static_cast<size_t>(bn));
    std::iota(order.begin(), order.end(), int64_t(0));
    Tensor64 image = batch_image_tensor(batch, order);
    ForwardOut fwd = net.forward(image, net.params.step_count(), &body);

    for (int64_t i = 0; i < bn; ++i) {
      const Sample& s = batch[size_t(i)];
      MetricReport r;

      const Points3 pj = as_points(fwd.pred.joints3d[size_t(i)].data());
      const Points3& gj = s.joints3d_gt;
      r.mpjpe_mm = kUnitsToMm * mpjpe(pj, gj);
      r.pa_mpjpe_mm = kUnitsToMm * pa_mpjpe(pj, gj);
      r.per_joint_mpjpe_mm = per_joint_error(pj, gj);
      for (double& v : r.per_joint_mpjpe_mm) v *= kUnitsToMm;

      // vertex error with both meshes pinned at their root joint
      Pose pose;
      pose.rep = PoseRep::axis_angle;
      pose.joints = body.def->K;
      pose.data = s.theta_gt;
      const Points3 gm = as_points(lbs(*body.def, pose, s.beta_gt));
      const Points3 pm = as_points(fwd.pred.mesh[size_t(i)].data());
      r.pve_mm = kUnitsToMm * pve(root_aligned(pm, pj[0]), root_aligned(gm, gj[0]));

      // 2D accuracy in pixels
      Points2 p2(static_cast<size_t>(joints)), g2(static_cast<size_t>(joints));
      const auto& j2 = fwd.pred.joints2d[size_t(i)].data();
      for (int64_t q = 0; q < joints; ++q) {
        p2[size_t(q)] = {(j2[size_t(2 * q)] + 1.0) * half_px,
                         (j2[size_t(2 * q + 1)] + 1.0) * half_px};
        g2[size_t(q)] = {(s.joints2d_gt[size_t(q)][0] + 1.0) * half_px,
                         (s.joints2d_gt[size_t(q)][1] + 1.0) * half_px};
      }
      r.pck = pck(p2, g2, pck_threshold);

      // part segmentation at the logit grid; the pooled baseline has no maps
      if (fwd.part_logits.defined()) {
        const int64_t c = fwd.part_logits.size(1);
        const int64_t h = fwd.part_logits.size(2), w = fwd.part_logits.size(3);
        if (h != s.label_size || w != s.label_size)
          throw std::invalid_argument(
              "evaluate: label maps are " + std::to_string(s.label_size) +
              "^2 but the logit grid is " + std::to_string(h) + "x" +
              std::to_string(w));
        const auto& logits = fwd.part_logits.data();
        std::vector<int> pred_labels(static_cast<size_t>(h * w));
        for (int64_t p = 0; p < h * w; ++p) {
          int best = 0;
          double best_v = logits[size_t((i * c) * h * w + p)];
          for (int64_t ch = 1; ch < c; ++ch) {
            const double v = logits[size_t((i * c + ch) * h * w + p)];
            if (v > best_v) {
              best_v = v;
              best = int(ch);
            }
          }
          pred_labels[size_t(p)] = best;
        }
        r.seg_iou = seg_iou(pred_labels, s.part_labels, int(joints + 1));
      } else {
        r.seg_iou = 0.0;
      }

      acc.add(r);
    }
  }
  return acc.mean();
}

}  // namespace detail

// Dataset metrics in inference mode, with an optional second pass under
// synthetic occlusion. Occlusions are keyed by the dataset seed and sample
// index, so repeated calls (and calls against different networks) see the
// same occluded images; an occluder probability of zero reproduces the clean
// pass exactly.
inline EvalReport evaluate(PartAttentionNet& net, const BodyModelDef& model,
                           const Dataset& ds, const OccluderConfig* occ = nullptr,
                           int64_t batch_size = 8) {
  if (ds.samples.empty())
    throw std::invalid_argument("evaluate: dataset is empty");
  if (batch_size < 1)
    throw std::invalid_argument("evaluate: batch_size must be >= 1");

  InferenceModeGuard mode_guard(net);
  NoGradGuard tape_guard;

  BodyTensors body(model);
  EvalReport rep;
  rep.clean = detail::eval_pass(net, body, ds, nullptr, batch_size);
  if (occ) {
    rep.occluded = detail::eval_pass(net, body, ds, occ, batch_size);
    rep.occlusion_delta_mm = rep.occluded->mpjpe_mm - rep.clean.mpjpe_mm;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// training

struct TrainResult {
  RunLog log;                    // records for the steps this call ran
  std::string final_checkpoint;  // newest checkpoint path; empty if none
  int64_t steps_run = 0;
  bool aborted_nan = false;
};

// Runs the optimization from the network's current step counter up to
// cfg.total_steps. Checkpoints land in cfg.checkpoint_dir as
// ckpt_<steps_done>.bin at every eval_every boundary and at the end; the run
// log is appended to log.jsonl in the same directory. When an evaluation set
// is supplied, each checkpoint is followed by a clean-set evaluation whose
// metrics join the log. A non-finite loss or gradient aborts the run,
// keeping the last finished checkpoint.
inline TrainResult train(PartAttentionNet& net, const BodyModelDef& model,
                         const Dataset& train_ds, const Dataset* eval_ds,
                         const TrainConfig& cfg) {
  cfg.validate();
  if (train_ds.samples.empty())
    throw std::invalid_argument("train: dataset is empty");
  const bool needs_labels =
      !net.cfg.baseline_gap &&
      (net.cfg.supervision_mode == SupervisionMode::parts ||
       net.cfg.supervision_mode == SupervisionMode::mixed);
  if (needs_labels && (train_ds.spec.label_size != net.cfg.feat_h ||
                       train_ds.spec.label_size != net.cfg.feat_w))
    throw std::invalid_argument(
        "train: part supervision needs label maps at the logit resolution (" +
        std::to_string(net.cfg.feat_h) + "), got " +
        std::to_string(train_ds.spec.label_size));

  namespace fs = std::filesystem;
  fs::create_directories(cfg.checkpoint_dir);
  const std::string log_path =
      (fs::path(cfg.checkpoint_dir) / "log.jsonl").string();
  std::ofstream logf(log_path, std::ios::app);
  if (!logf) throw std::runtime_error("train: cannot open " + log_path);

  BodyTensors body(model);
  TrainResult res;
  const int64_t n_train = int64_t(train_ds.samples.size());
  const int64_t start = net.params.step_count();

  auto save_checkpoint = [&](int64_t steps_done) {
    nlohmann::json meta{{"kind", "checkpoint"},
                        {"steps_done", steps_done},
                        {"train_config", cfg.to_json()}};
    const std::string path =
        (fs::path(cfg.checkpoint_dir) / ("ckpt_" + std::to_string(steps_done) + ".bin"))
            .string();
    net.save(path, std::move(meta));
    res.final_checkpoint = path;
  };

  for (int64_t step = start; step < cfg.total_steps; ++step) {
    // with-replacement batch from a per-step stream
    Rng pick(cfg.seed, RngUse::batch, uint64_t(step));
    std::vector<Sample> batch;
    batch.reserve(static_cast<size_t>(cfg.batch_size));
    for (int64_t i = 0; i < cfg.batch_size; ++i)
      batch.push_back(train_ds.samples[size_t(pick.below(uint64_t(n_train)))]);

    if (cfg.use_occluder) {
      Rng occ(cfg.seed, RngUse::synth_occ, uint64_t(step));
      for (Sample& s : batch) apply_occluder(s, occ, train_ds.spec.occluder);
    }
    if (step >= cfg.randcrop_start_step) {
      Rng crop(cfg.seed, RngUse::rand_crop, uint64_t(step));
      for (Sample& s : batch) apply_crop(s, crop, train_ds.spec.crop);
    }

    BatchLosses bl = compute_batch_losses(net, body, batch, step, cfg.weights);
    const double total_value = bl.total.data()[0];

    net.params.zero_grad();
    double gnorm = 0.0;
    if (std::isfinite(total_value)) {
      bl.total.backward();
      gnorm = net.params.grad_norm();
    }
    if (!std::isfinite(total_value) || !std::isfinite(gnorm)) {
      res.aborted_nan = true;
      res.log.aborted_step = step;
      logf << nlohmann::json{{"kind", "abort"},
                             {"step", step},
                             {"reason", "non-finite loss or gradient"}}
                  .dump()
           << "\n";
      logf.flush();
      break;
    }
    if (cfg.grad_clip > 0) net.params.clip_grad_norm(cfg.grad_clip);
    net.params.adam_step(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);

    StepRecord rec;
    rec.step = step;
    rec.total = total_value;
    rec.l3d = bl.l3d.data()[0];
    rec.l2d = bl.l2d.data()[0];
    rec.lsmpl = bl.lsmpl.data()[0];
    rec.lparts = bl.lparts.defined() ? bl.lparts.data()[0] : 0.0;
    rec.parts_active = bl.parts_active;
    rec.grad_norm = gnorm;
    res.log.steps.push_back(rec);
    logf << rec.to_json().dump() << "\n";
    logf.flush();
    ++res.steps_run;

    const int64_t done = step + 1;
    if (done % cfg.eval_every == 0 || done == cfg.total_steps) {
      save_checkpoint(done);
      if (eval_ds) {
        EvalReport er = evaluate(net, model, *eval_ds, nullptr, cfg.batch_size);
        EvalRecord ev;
        ev.step = done;
        ev.metrics = er.clean;
        res.log.evals.push_back(ev);
        logf << ev.to_json().dump() << "\n";
        logf.flush();
      }
    }
  }
  return res;
}

}  // namespace parelab
