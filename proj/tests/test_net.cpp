#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <vector>

#include "oracles.hpp"
#include "parelab/body_model.hpp"
#include "parelab/losses.hpp"
#include "parelab/net.hpp"

using namespace parelab;

namespace {

// Independent Eq.-style oracle: per-joint softmax over positions, then the
// attention-weighted sum of feature columns, all with plain loops.
std::vector<double> fuse_oracle(const std::vector<double>& logits,
                                const std::vector<double>& feats, int64_t n,
                                int64_t j, int64_t c, int64_t h, int64_t w) {
  const int64_t hw = h * w;
  std::vector<double> out(static_cast<size_t>(n * j * c), 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t q = 0; q < j; ++q) {
      // softmax over positions of channel q+1 (channel 0 is background)
      std::vector<double> a(static_cast<size_t>(hw));
      double mx = -1e300;
      for (int64_t p = 0; p < hw; ++p) {
        a[size_t(p)] = logits[size_t(((i * (j + 1) + q + 1) * hw) + p)];
        mx = std::max(mx, a[size_t(p)]);
      }
      double z = 0.0;
      for (int64_t p = 0; p < hw; ++p) {
        a[size_t(p)] = std::exp(a[size_t(p)] - mx);
        z += a[size_t(p)];
      }
      for (int64_t p = 0; p < hw; ++p) a[size_t(p)] /= z;
      for (int64_t cc = 0; cc < c; ++cc) {
        double acc = 0.0;
        for (int64_t p = 0; p < hw; ++p)
          acc += a[size_t(p)] * feats[size_t((i * c + cc) * hw + p)];
        out[size_t((i * j + q) * c + cc)] = acc;
      }
    }
  return out;
}

NetConfig tiny_config() {
  NetConfig cfg;
  cfg.image_size = 8;
  cfg.backbone_widths = {4};
  cfg.branch_width = 4;
  cfg.feat_h = cfg.feat_w = 32;
  cfg.channels = 6;
  cfg.joints = 6;
  cfg.betas = 2;
  cfg.init_seed = 7;
  return cfg;
}

}  // namespace

TEST_CASE("attention fusion matches the per-position softmax oracle over random shapes") {
  Rng rng(101, RngUse::test);
  for (int trial = 0; trial < 100; ++trial) {
    const int64_t n = 1 + int64_t(rng.below(3));
    const int64_t j = 1 + int64_t(rng.below(5));
    const int64_t c = 1 + int64_t(rng.below(7));
    const int64_t h = 1 + int64_t(rng.below(6));
    const int64_t w = 1 + int64_t(rng.below(6));
    auto ldata = oracle::random_vec(rng, n * (j + 1) * h * w, -3.0, 3.0);
    auto fdata = oracle::random_vec(rng, n * c * h * w, -2.0, 2.0);
    Tensor64 logits = Tensor64::from_data({n, j + 1, h, w}, std::vector<double>(ldata));
    Tensor64 feats = Tensor64::from_data({n, c, h, w}, std::vector<double>(fdata));
    Tensor64 fused = attention_fuse(logits, feats);
    REQUIRE(fused.shape() == Shape{n, j, c});
    auto expect = fuse_oracle(ldata, fdata, n, j, c, h, w);
    REQUIRE(oracle::max_abs_diff(fused.data(), expect) <= 1e-12);
  }
}

TEST_CASE("spatial attention rows are distributions; uniform logits give the spatial mean") {
  Rng rng(11, RngUse::test);
  Tensor64 logits = oracle::random_tensor(rng, {2, 4, 3, 5}, false, -4.0, 4.0);
  Tensor64 attn = spatial_attention(logits, 3);
  REQUIRE(attn.shape() == Shape{2, 3, 15});
  const auto& a = attn.data();
  for (int64_t row = 0; row < 6; ++row) {
    double s = 0.0;
    for (int64_t p = 0; p < 15; ++p) s += a[size_t(row * 15 + p)];
    REQUIRE(std::abs(s - 1.0) <= 1e-9);
  }

  Tensor64 flat = Tensor64::from_data({1, 3, 2, 2},
                                      std::vector<double>(12, 0.7));  // constant logits
  Tensor64 feats = oracle::random_tensor(rng, {1, 5, 2, 2}, false, -1.0, 1.0);
  Tensor64 fused = attention_fuse(flat, feats);
  for (int64_t j = 0; j < 2; ++j)
    for (int64_t c = 0; c < 5; ++c) {
      double m = 0.0;
      for (int64_t p = 0; p < 4; ++p) m += feats.data()[size_t(c * 4 + p)];
      m /= 4.0;
      REQUIRE(std::abs(fused.data()[size_t((j * 5) + c)] - m) <= 1e-12);
    }
}

TEST_CASE("a dominant logit at one position selects that position's feature column") {
  Rng rng(12, RngUse::test);
  const int64_t h = 4, w = 4, c = 3;
  std::vector<double> ldata(size_t(1 * 3 * h * w), 0.0);
  const int64_t peak = 9;  // position index in the 16-cell map, joint 1 of 2
  ldata[size_t((0 * 3 + 2) * h * w + peak)] = 1e4;
  Tensor64 logits = Tensor64::from_data({1, 3, h, w}, std::move(ldata));
  Tensor64 feats = oracle::random_tensor(rng, {1, c, h, w}, false, -2.0, 2.0);
  Tensor64 fused = attention_fuse(logits, feats);
  for (int64_t ch = 0; ch < c; ++ch) {
    const double want = feats.data()[size_t(ch * h * w + peak)];
    REQUIRE(std::abs(fused.data()[size_t(1 * c + ch)] - want) <= 1e-6);
    REQUIRE(std::isfinite(fused.data()[size_t(ch)]));  // joint 0 stays finite
  }
}

TEST_CASE("attention fusion gradients match finite differences") {
  Rng rng(13, RngUse::test);
  Tensor64 logits = oracle::random_tensor(rng, {1, 3, 2, 3}, true, -1.0, 1.0);
  Tensor64 feats = oracle::random_tensor(rng, {1, 4, 2, 3}, true, -1.0, 1.0);
  Tensor64 wsum = oracle::random_tensor(rng, {1, 2, 4}, false, -1.0, 1.0);
  Tensor64 loss = sum(mul(attention_fuse(logits, feats), wsum));
  loss.backward();
  auto eval = [&](const std::vector<double>& lv, const std::vector<double>& fv) {
    NoGradGuard g;
    Tensor64 l2 = Tensor64::from_data({1, 3, 2, 3}, std::vector<double>(lv));
    Tensor64 f2 = Tensor64::from_data({1, 4, 2, 3}, std::vector<double>(fv));
    return sum(mul(attention_fuse(l2, f2), wsum)).data()[0];
  };
  auto fd_l = oracle::finite_diff(logits.data(), [&](const std::vector<double>& v) {
    return eval(v, feats.data());
  });
  auto fd_f = oracle::finite_diff(feats.data(), [&](const std::vector<double>& v) {
    return eval(logits.data(), v);
  });
  REQUIRE(oracle::max_rel_err(logits.grad(), fd_l) <= 1e-6);
  REQUIRE(oracle::max_rel_err(feats.grad(), fd_f) <= 1e-6);
}

TEST_CASE("soft-argmax pooling hits exact positions and interpolates between them") {
  const int64_t h = 5, w = 5, c = 2;
  Rng rng(14, RngUse::test);
  Tensor64 feats = oracle::random_tensor(rng, {1, c, h, w}, false, -2.0, 2.0);

  SECTION("a dominant logit samples that pixel's features") {
    std::vector<double> ldata(size_t(2 * h * w), 0.0);
    const int64_t py = 3, px = 1;
    ldata[size_t(1 * h * w + py * w + px)] = 1e4;
    Tensor64 logits = Tensor64::from_data({1, 2, h, w}, std::move(ldata));
    Tensor64 pooled = pooling_fuse(logits, feats);
    REQUIRE(pooled.shape() == Shape{1, 1, c});
    for (int64_t ch = 0; ch < c; ++ch)
      REQUIRE(std::abs(pooled.data()[size_t(ch)] -
                       feats.data()[size_t(ch * h * w + py * w + px)]) <= 1e-6);
  }

  SECTION("uniform attention samples the grid centroid") {
    Tensor64 logits = Tensor64::from_data({1, 2, h, w}, std::vector<double>(size_t(2 * h * w), 0.0));
    Tensor64 pooled = pooling_fuse(logits, feats);
    // centroid of a 5x5 grid is pixel (2,2) exactly
    for (int64_t ch = 0; ch < c; ++ch)
      REQUIRE(std::abs(pooled.data()[size_t(ch)] -
                       feats.data()[size_t(ch * h * w + 2 * w + 2)]) <= 1e-9);
  }

  SECTION("two equal peaks sample the bilinear midpoint") {
    std::vector<double> ldata(size_t(2 * h * w), -1e4);
    ldata[size_t(1 * h * w + 2 * w + 1)] = 0.0;  // (y=2, x=1)
    ldata[size_t(1 * h * w + 2 * w + 2)] = 0.0;  // (y=2, x=2)
    Tensor64 logits = Tensor64::from_data({1, 2, h, w}, std::move(ldata));
    Tensor64 pooled = pooling_fuse(logits, feats);
    for (int64_t ch = 0; ch < c; ++ch) {
      const double want = 0.5 * feats.data()[size_t(ch * h * w + 2 * w + 1)] +
                          0.5 * feats.data()[size_t(ch * h * w + 2 * w + 2)];
      REQUIRE(std::abs(pooled.data()[size_t(ch)] - want) <= 1e-6);
    }
  }
}

TEST_CASE("pooling detaches sampling locations; attention propagates into the maps") {
  Rng rng(33, RngUse::test);
  SECTION("pooling: part-map gradients are exactly zero") {
    Tensor64 logits = oracle::random_tensor(rng, {2, 4, 5, 5}, true, -1.0, 1.0);
    Tensor64 feats = oracle::random_tensor(rng, {2, 6, 5, 5}, true, -1.0, 1.0);
    Tensor64 loss = sum(pooling_fuse(logits, feats));
    loss.backward();
    for (double g : logits.grad()) REQUIRE(g == 0.0);
    double fmax = 0.0;
    for (double g : feats.grad()) fmax = std::max(fmax, std::abs(g));
    REQUIRE(fmax > 0.0);
  }
  SECTION("attention: part-map gradients are nonzero") {
    Tensor64 logits = oracle::random_tensor(rng, {2, 4, 5, 5}, true, -1.0, 1.0);
    Tensor64 feats = oracle::random_tensor(rng, {2, 6, 5, 5}, true, -1.0, 1.0);
    Tensor64 loss = sum(mul(attention_fuse(logits, feats),
                            oracle::random_tensor(rng, {2, 3, 6}, false, -1.0, 1.0)));
    loss.backward();
    double lmax = 0.0;
    for (double g : logits.grad()) lmax = std::max(lmax, std::abs(g));
    REQUIRE(lmax > 0.0);
  }
}

TEST_CASE("keypoint heatmap targets follow the Gaussian formula at a known center") {
  std::vector<std::array<double, 2>> j2d = {{0.0, 0.0}, {-1.0, -1.0}};
  Tensor64 maps = keypoint_heatmap_targets(j2d, 9, 9, 2.0);
  REQUIRE(maps.shape() == Shape{2, 9, 9});
  // joint 0 centered at pixel (4,4): unit peak, exact falloff two pixels out
  REQUIRE(std::abs(maps.data()[size_t(0 * 81 + 4 * 9 + 4)] - 1.0) <= 1e-12);
  REQUIRE(std::abs(maps.data()[size_t(0 * 81 + 4 * 9 + 6)] - std::exp(-0.5)) <= 1e-12);
  REQUIRE(std::abs(maps.data()[size_t(0 * 81 + 6 * 9 + 6)] - std::exp(-1.0)) <= 1e-12);
  // joint 1 centered at the (0,0) corner
  REQUIRE(std::abs(maps.data()[size_t(1 * 81)] - 1.0) <= 1e-12);
  REQUIRE_THROWS_AS(keypoint_heatmap_targets(j2d, 9, 9, 0.0), std::invalid_argument);
}

TEST_CASE("config validation, serialization round trip, and hashing") {
  NetConfig cfg = tiny_config();
  REQUIRE_NOTHROW(cfg.validate());
  NetConfig back = NetConfig::from_json(cfg.to_json());
  REQUIRE(back.to_json() == cfg.to_json());
  REQUIRE(back.hash() == cfg.hash());

  NetConfig other = cfg;
  other.channels = 7;
  other.feat_h = other.feat_w = 32;
  REQUIRE(other.hash() != cfg.hash());

  nlohmann::json bad = cfg.to_json();
  bad["mystery"] = 1;
  REQUIRE_THROWS_AS(NetConfig::from_json(bad), std::invalid_argument);

  NetConfig indivisible = cfg;
  indivisible.image_size = 10;  // not divisible by stride 2 after 1 stage? 10/2=5 ok; feat must be 40
  indivisible.feat_h = indivisible.feat_w = 32;
  REQUIRE_THROWS_AS(indivisible.validate(), std::invalid_argument);

  NetConfig odd = cfg;
  odd.backbone_widths = {4, 4, 4};
  odd.image_size = 12;  // 12 % 8 != 0
  REQUIRE_THROWS_AS(odd.validate(), std::invalid_argument);

  REQUIRE_NOTHROW(NetConfig().validate());
  REQUIRE_NOTHROW(NetConfig::large().validate());
  REQUIRE(NetConfig().hash() != NetConfig::large().hash());
}

TEST_CASE("backbone output geometry, determinism in eval mode, and input checks") {
  NetConfig cfg;  // 64x64, 4 stages
  cfg.init_seed = 3;
  PartAttentionNet net(cfg);
  net.training = false;
  Rng rng(15, RngUse::test);
  Tensor64 img = oracle::random_tensor(rng, {2, 3, 64, 64}, false, 0.0, 1.0);
  Tensor64 f1 = net.backbone_forward(img);
  Tensor64 f2 = net.backbone_forward(img);
  REQUIRE(f1.shape() == Shape{2, 64, 4, 4});
  REQUIRE(oracle::max_abs_diff(f1.data(), f2.data()) == 0.0);

  Tensor64 wrong = Tensor64::from_data({1, 3, 32, 32},
                                       std::vector<double>(size_t(3 * 32 * 32), 0.0));
  REQUIRE_THROWS_AS(net.backbone_forward(wrong), std::invalid_argument);
  Tensor64 gray = Tensor64::from_data({1, 1, 64, 64},
                                      std::vector<double>(size_t(64 * 64), 0.0));
  REQUIRE_THROWS_AS(net.backbone_forward(gray), std::invalid_argument);
}

TEST_CASE("branch maps upsample to the configured resolution with the right channel counts") {
  NetConfig cfg = tiny_config();
  PartAttentionNet net(cfg);
  net.training = false;
  Rng rng(16, RngUse::test);
  Tensor64 img = oracle::random_tensor(rng, {1, 3, 8, 8}, false, 0.0, 1.0);
  Tensor64 feat = net.backbone_forward(img);
  REQUIRE(feat.shape() == Shape{1, 4, 4, 4});
  Tensor64 logits = net.branch_2d(feat);
  Tensor64 fvol = net.branch_3d(feat);
  REQUIRE(logits.shape() == Shape{1, cfg.joints + 1, 32, 32});
  REQUIRE(fvol.shape() == Shape{1, cfg.channels, 32, 32});
}

TEST_CASE("per-joint rotation heads are wired joint-to-joint") {
  NetConfig cfg = tiny_config();
  PartAttentionNet net(cfg);
  Rng rng(17, RngUse::test);
  const int64_t n = 2, j = cfg.joints, c = cfg.channels;
  Tensor64 fused = oracle::random_tensor(rng, {n, j, c}, false, -1.0, 1.0);
  Prediction base = net.regress(fused);
  REQUIRE(base.theta6d.shape() == Shape{n, j * 6});
  REQUIRE(base.rotmats.shape() == Shape{n * j, 9});
  REQUIRE(base.beta.shape() == Shape{n, cfg.betas});
  REQUIRE(base.cam_s.shape() == Shape{n, 1});
  REQUIRE(base.cam_t.shape() == Shape{n, 2});
  for (int64_t i = 0; i < n; ++i) REQUIRE(base.cam_s.data()[size_t(i)] > 0.0);

  // perturb the fused features of joint 2 only: other joints' 6D outputs move not at all
  std::vector<double> bumped = fused.data();
  for (int64_t ch = 0; ch < c; ++ch) bumped[size_t((0 * j + 2) * c + ch)] += 0.5;
  Prediction moved = net.regress(Tensor64::from_data({n, j, c}, std::move(bumped)));
  for (int64_t q = 0; q < j; ++q) {
    double delta = 0.0;
    for (int64_t e = 0; e < 6; ++e)
      delta += std::abs(moved.theta6d.data()[size_t(q * 6 + e)] -
                        base.theta6d.data()[size_t(q * 6 + e)]);
    if (q == 2)
      REQUIRE(delta > 1e-6);
    else
      REQUIRE(delta == 0.0);
  }

  // zeroed rotation-head weights leave the identity bias: every rotation is I
  for (int64_t q = 0; q < j; ++q) {
    auto& wdata = net.params.get("head.rot" + std::to_string(q) + ".w").mutable_data();
    std::fill(wdata.begin(), wdata.end(), 0.0);
  }
  Prediction rest = net.regress(fused);
  for (int64_t row = 0; row < n * j; ++row)
    for (int64_t e = 0; e < 9; ++e) {
      const double want = (e % 4 == 0) ? 1.0 : 0.0;  // identity row-major
      REQUIRE(std::abs(rest.rotmats.data()[size_t(row * 9 + e)] - want) <= 1e-12);
    }
}

TEST_CASE("baseline refinement matches a from-scratch replay of its own arithmetic") {
  NetConfig cfg = tiny_config();
  cfg.baseline_gap = true;
  cfg.gap_hidden = 10;
  PartAttentionNet net(cfg);
  net.training = false;
  Rng rng(18, RngUse::test);
  Tensor64 img = oracle::random_tensor(rng, {2, 3, 8, 8}, false, 0.0, 1.0);
  Prediction pred = net.baseline_gap_forward(img);

  // independent replay: pooled mean + three MLP residual iterations in loops
  Tensor64 feat = net.backbone_forward(img);
  const int64_t n = 2, c = feat.size(1), hw = feat.size(2) * feat.size(3);
  const int64_t state_dim = cfg.joints * 6 + cfg.betas + 3;
  auto matvec = [&](const std::string& name, const std::vector<double>& in) {
    const auto& wt = net.params.get(name + ".w");
    const auto& bt = net.params.get(name + ".b");
    const int64_t rows = wt.size(0), cols = wt.size(1);
    REQUIRE(int64_t(in.size()) == rows);
    std::vector<double> out(bt.data());
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t cc = 0; cc < cols; ++cc)
        out[size_t(cc)] += in[size_t(r)] * wt.data()[size_t(r * cols + cc)];
    return out;
  };
  for (int64_t i = 0; i < n; ++i) {
    std::vector<double> pooled(static_cast<size_t>(c), 0.0);
    for (int64_t ch = 0; ch < c; ++ch) {
      for (int64_t p = 0; p < hw; ++p)
        pooled[size_t(ch)] += feat.data()[size_t((i * c + ch) * hw + p)];
      pooled[size_t(ch)] /= double(hw);
    }
    std::vector<double> state(static_cast<size_t>(state_dim), 0.0);
    for (int64_t q = 0; q < cfg.joints; ++q) state[size_t(q * 6)] = state[size_t(q * 6 + 4)] = 1.0;
    state[size_t(cfg.joints * 6 + cfg.betas)] = std::log(std::expm1(1.0));
    for (int64_t it = 0; it < cfg.gap_iterations; ++it) {
      std::vector<double> inp(pooled);
      inp.insert(inp.end(), state.begin(), state.end());
      auto h0 = matvec("gap.fc0", inp);
      for (double& v : h0) v = std::max(0.0, v);
      auto h1 = matvec("gap.fc1", h0);
      for (double& v : h1) v = std::max(0.0, v);
      auto res = matvec("gap.out", h1);
      for (int64_t e = 0; e < state_dim; ++e) state[size_t(e)] += res[size_t(e)];
    }
    for (int64_t e = 0; e < cfg.joints * 6; ++e)
      REQUIRE(std::abs(pred.theta6d.data()[size_t(i * cfg.joints * 6 + e)] -
                       state[size_t(e)]) <= 1e-9);
    for (int64_t e = 0; e < cfg.betas; ++e)
      REQUIRE(std::abs(pred.beta.data()[size_t(i * cfg.betas + e)] -
                       state[size_t(cfg.joints * 6 + e)]) <= 1e-9);
    const double raw_s = state[size_t(cfg.joints * 6 + cfg.betas)];
    const double want_s = std::log1p(std::exp(raw_s)) + 1e-4;
    REQUIRE(std::abs(pred.cam_s.data()[size_t(i)] - want_s) <= 1e-9);
  }

  // zeroing the residual head freezes the initialization: identity pose, unit scale
  auto& ow = net.params.get("gap.out.w").mutable_data();
  std::fill(ow.begin(), ow.end(), 0.0);
  Prediction frozen = net.baseline_gap_forward(img);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t e = 0; e < cfg.joints * 6; ++e) {
      const double want = (e % 6 == 0 || e % 6 == 4) ? 1.0 : 0.0;
      REQUIRE(std::abs(frozen.theta6d.data()[size_t(i * cfg.joints * 6 + e)] - want) <= 1e-12);
    }
    for (int64_t e = 0; e < cfg.betas; ++e)
      REQUIRE(std::abs(frozen.beta.data()[size_t(i * cfg.betas + e)]) <= 1e-12);
    REQUIRE(std::abs(frozen.cam_s.data()[size_t(i)] - (1.0 + 1e-4)) <= 1e-12);
    REQUIRE(std::abs(frozen.cam_t.data()[size_t(2 * i)]) <= 1e-12);
    REQUIRE(std::abs(frozen.cam_t.data()[size_t(2 * i + 1)]) <= 1e-12);
  }
  // frozen identity pose maps to identity rotation matrices
  for (int64_t e = 0; e < 9; ++e)
    REQUIRE(std::abs(frozen.rotmats.data()[size_t(e)] - ((e % 4 == 0) ? 1.0 : 0.0)) <= 1e-12);
}

TEST_CASE("supervision gating per mode and step") {
  Rng rng(19, RngUse::test);
  Tensor64 img = oracle::random_tensor(rng, {1, 3, 8, 8}, false, 0.0, 1.0);
  auto flag_at = [&](SupervisionMode m, int64_t step) {
    NetConfig cfg = tiny_config();
    cfg.supervision_mode = m;
    cfg.mixed_switch_step = 50;
    PartAttentionNet net(cfg);
    net.training = false;
    NoGradGuard g;
    return net.forward(img, step).part_loss_active;
  };
  REQUIRE(flag_at(SupervisionMode::parts, 0));
  REQUIRE(flag_at(SupervisionMode::parts, 1000000));
  REQUIRE(flag_at(SupervisionMode::keypoints, 1000000));
  REQUIRE_FALSE(flag_at(SupervisionMode::none, 0));
  REQUIRE(flag_at(SupervisionMode::mixed, 49));
  REQUIRE_FALSE(flag_at(SupervisionMode::mixed, 50));
  REQUIRE_FALSE(flag_at(SupervisionMode::mixed, 51));

  NetConfig bcfg = tiny_config();
  bcfg.baseline_gap = true;
  PartAttentionNet baseline(bcfg);
  baseline.training = false;
  NoGradGuard g;
  ForwardOut out = baseline.forward(img, 0);
  REQUIRE_FALSE(out.part_loss_active);
  REQUIRE_FALSE(out.part_logits.defined());
}

TEST_CASE("full forward produces body geometry consistent with the camera model") {
  NetConfig cfg = tiny_config();
  PartAttentionNet net(cfg);
  net.training = false;
  BodyModelDef model = generate_toy_model(21, 24, cfg.joints, cfg.betas);
  BodyTensors body(model);
  Rng rng(20, RngUse::test);
  Tensor64 img = oracle::random_tensor(rng, {2, 3, 8, 8}, false, 0.0, 1.0);
  NoGradGuard g;
  ForwardOut out = net.forward(img, 0, &body);
  REQUIRE(out.pred.mesh.size() == 2);
  REQUIRE(out.pred.joints3d.size() == 2);
  REQUIRE(out.pred.joints2d.size() == 2);
  REQUIRE(out.part_logits.shape() == Shape{2, cfg.joints + 1, 32, 32});
  for (size_t i = 0; i < 2; ++i) {
    REQUIRE(out.pred.mesh[i].shape() == Shape{int64_t(model.V), 3});
    REQUIRE(out.pred.joints3d[i].shape() == Shape{cfg.joints, 3});
    REQUIRE(out.pred.joints2d[i].shape() == Shape{cfg.joints, 2});
    // 2D joints equal the weak-perspective projection of the 3D joints
    const double s = out.pred.cam_s.data()[i];
    const double tx = out.pred.cam_t.data()[2 * i];
    const double ty = out.pred.cam_t.data()[2 * i + 1];
    for (int64_t q = 0; q < cfg.joints; ++q) {
      const double X = out.pred.joints3d[i].data()[size_t(3 * q)];
      const double Y = out.pred.joints3d[i].data()[size_t(3 * q + 1)];
      REQUIRE(std::abs(out.pred.joints2d[i].data()[size_t(2 * q)] - (s * X + tx)) <= 1e-12);
      REQUIRE(std::abs(out.pred.joints2d[i].data()[size_t(2 * q + 1)] - (s * Y + ty)) <= 1e-12);
    }
    // predicted rotation blocks are orthonormal (6D parametrization guarantees it)
    for (int64_t q = 0; q < cfg.joints; ++q) {
      Mat3 m;
      for (int64_t e = 0; e < 9; ++e)
        m[size_t(e)] = out.pred.rotmats.data()[size_t((int64_t(i) * cfg.joints + q) * 9 + e)];
      REQUIRE(std::abs(mat3_det(m) - 1.0) <= 1e-9);
    }
  }

  // pooling mode produces the same shapes through the other fusion path
  NetConfig pcfg = tiny_config();
  pcfg.sampling_mode = SamplingMode::pooling;
  PartAttentionNet pnet(pcfg);
  pnet.training = false;
  ForwardOut pout = pnet.forward(img, 0, &body);
  REQUIRE(pout.pred.theta6d.shape() == Shape{2, cfg.joints * 6});
  REQUIRE(pout.pred.mesh.size() == 2);
}

TEST_CASE("end-to-end gradients through the full loss match finite differences") {
  NetConfig cfg = tiny_config();
  PartAttentionNet net(cfg);
  net.training = true;
  BodyModelDef model = generate_toy_model(22, 24, cfg.joints, cfg.betas);
  BodyTensors body(model);
  Rng rng(23, RngUse::test);
  const int64_t n = 2;
  Tensor64 img = oracle::random_tensor(rng, {n, 3, 8, 8}, false, 0.0, 1.0);

  // fixed random targets
  const int64_t k = cfg.joints;
  std::vector<Tensor64> gt_j3d, gt_j2d, gt_rm, gt_beta;
  std::vector<std::vector<uint8_t>> masks;
  std::vector<std::vector<double>> confs;
  std::vector<int> labels;
  for (int64_t i = 0; i < n; ++i) {
    gt_j3d.push_back(oracle::random_tensor(rng, {k, 3}, false, -0.5, 0.5));
    gt_j2d.push_back(oracle::random_tensor(rng, {k, 2}, false, -0.8, 0.8));
    gt_rm.push_back(constant_rotmats(oracle::random_vec(rng, k * 3, -1.0, 1.0)));
    gt_beta.push_back(oracle::random_tensor(rng, {cfg.betas}, false, -1.0, 1.0));
    std::vector<uint8_t> mask(static_cast<size_t>(k), 1);
    mask[1] = 0;
    masks.push_back(mask);
    confs.push_back(oracle::random_vec(rng, k, 0.0, 1.0));
  }
  for (int64_t p = 0; p < n * 32 * 32; ++p)
    labels.push_back(int(rng.below(uint64_t(cfg.joints + 1))));
  LossWeights weights;  // defaults: all four terms active

  auto compute_loss = [&]() {
    ForwardOut out = net.forward(img, 0, &body);
    Tensor64 l3 = Tensor64::scalar(0.0), l2 = Tensor64::scalar(0.0),
             ls = Tensor64::scalar(0.0);
    for (int64_t i = 0; i < n; ++i) {
      l3 = add(l3, loss_3d(out.pred.joints3d[size_t(i)], gt_j3d[size_t(i)], masks[size_t(i)]));
      l2 = add(l2, loss_2d(out.pred.joints2d[size_t(i)], gt_j2d[size_t(i)], confs[size_t(i)]));
      ls = add(ls, loss_smpl(slice(out.pred.rotmats, 0, i * k, k),
                             reshape(slice(out.pred.beta, 0, i, 1), {cfg.betas}),
                             gt_rm[size_t(i)], gt_beta[size_t(i)]));
    }
    Tensor64 lp = loss_parts(out.part_logits, labels);
    return total_loss(div(l3, double(n)), div(l2, double(n)), div(ls, double(n)), lp, weights);
  };

  Tensor64 loss = compute_loss();
  REQUIRE(std::isfinite(loss.data()[0]));
  loss.backward();

  // spot-check ~30 parameter coordinates spread across every layer kind
  Rng pick(24, RngUse::test);
  size_t checked = 0;
  double worst = 0.0;
  for (const std::string& name : net.params.names()) {
    Tensor64& p = net.params.get(name);
    if (!p.requires_grad()) continue;
    const size_t count = p.data().size();
    for (int rep = 0; rep < 2; ++rep) {
      const size_t idx = size_t(pick.below(uint64_t(count)));
      const double h = 1e-5;
      auto& data = p.mutable_data();
      const double keep = data[idx];
      double fp, fm;
      {
        NoGradGuard g;
        data[idx] = keep + h;
        fp = compute_loss().data()[0];
        data[idx] = keep - h;
        fm = compute_loss().data()[0];
        data[idx] = keep;
      }
      const double fd = (fp - fm) / (2 * h);
      const double an = p.grad()[idx];
      const double rel = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
      worst = std::max(worst, rel);
      ++checked;
    }
  }
  INFO("checked " << checked << " coordinates, worst rel err " << worst);
  REQUIRE(checked >= 30);
  REQUIRE(worst <= 1e-3);
}

TEST_CASE("checkpoint round trip restores weights, buffers, and rejects other configs") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "parelab_net_ckpt";
  fs::create_directories(dir);
  const std::string path = (dir / "net.bin").string();

  NetConfig cfg = tiny_config();
  PartAttentionNet net(cfg);
  Rng rng(25, RngUse::test);
  Tensor64 img = oracle::random_tensor(rng, {2, 3, 8, 8}, false, 0.0, 1.0);
  // a training-mode pass moves the batchnorm running buffers away from init
  net.training = true;
  (void)net.forward(img, 0);
  net.save(path, {{"note", 42}});

  PartAttentionNet fresh(cfg);
  nlohmann::json meta = fresh.load(path);
  REQUIRE(meta.at("note").get<int>() == 42);
  net.training = fresh.training = false;
  NoGradGuard g;
  ForwardOut a = net.forward(img, 0);
  ForwardOut b = fresh.forward(img, 0);
  REQUIRE(oracle::max_abs_diff(a.pred.theta6d.data(), b.pred.theta6d.data()) == 0.0);
  REQUIRE(oracle::max_abs_diff(a.part_logits.data(), b.part_logits.data()) == 0.0);

  NetConfig other = cfg;
  other.init_seed = 99;  // init_seed participates in the config hash
  PartAttentionNet reject(other);
  REQUIRE_THROWS_AS(reject.load(path), std::runtime_error);
  fs::remove_all(dir);
}
