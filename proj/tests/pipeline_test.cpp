#include <gavatar/pipeline.hpp>

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

namespace gavatar {
namespace {

namespace fs = std::filesystem;

std::string scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("gavatar_pipeline_" + name);
  fs::remove_all(p);
  return p.string();
}

SynthConfig small_config() {
  SynthConfig c;
  c.seed = 4;
  c.gaussian_count = 80;
  c.prior_vertices = 150;
  c.frame_count = 3;
  c.view_count = 4;
  c.width = c.height = 32;
  return c;
}

TEST(SynthConfig, Validation) {
  EXPECT_NO_THROW(SynthConfig{}.validate());
  auto bad = [](auto mutate) {
    SynthConfig c;
    mutate(c);
    return c;
  };
  EXPECT_THROW(bad([](SynthConfig& c) { c.gaussian_count = 0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](SynthConfig& c) { c.frame_count = 0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](SynthConfig& c) { c.view_count = 0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](SynthConfig& c) { c.width = 0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](SynthConfig& c) { c.pose_amplitude = 2.0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](SynthConfig& c) { c.pose_amplitude = -0.1; }).validate(), ConfigError);
  EXPECT_THROW(bad([](SynthConfig& c) { c.ring_radius = 0; }).validate(), ConfigError);
}

TEST(Synth, PriorIsFloatExact) {
  const SynthConfig c = small_config();
  const PriorModel m = make_prior(c);
  EXPECT_EQ(m.vertex_count(), c.prior_vertices);
  const auto bytes = serialize_prior(m);
  EXPECT_EQ(serialize_prior(deserialize_prior(bytes)), bytes);
}

TEST(Synth, GroundTruthAvatar) {
  const SynthConfig c = small_config();
  const PriorModel m = make_prior(c);
  const CanonicalAvatar a = make_gt_avatar(m, c);
  ASSERT_EQ(a.size(), static_cast<size_t>(c.gaussian_count));
  EXPECT_EQ(a.sh_degree, 1);
  EXPECT_NO_THROW(a.validate());
  for (size_t i = 0; i < a.size(); ++i) {
    const double o = sigmoid(a.opacities[i]);
    EXPECT_GE(o, 0.6 - 1e-12);
    EXPECT_LE(o, 0.95 + 1e-12);
    const double* sh = a.sh_of(i);
    for (int ch = 0; ch < 3; ++ch) {
      const double dc = 0.5 + kSh0 * sh[ch * a.sh_basis()];
      EXPECT_GE(dc, 0.05 - 1e-12);
      EXPECT_LE(dc, 0.95 + 1e-12);
    }
    // Skin weights are some prior vertex's weights.
    bool found = false;
    for (int v = 0; v < m.vertex_count() && !found; ++v)
      found = a.gauss_weights.row(static_cast<Eigen::Index>(i)) == m.skin_weights.row(v);
    EXPECT_TRUE(found) << i;
  }
  const CanonicalAvatar again = make_gt_avatar(m, c);
  EXPECT_EQ(serialize_avatar(a), serialize_avatar(again));
  SynthConfig other = c;
  other.seed = 5;
  EXPECT_NE(serialize_avatar(make_gt_avatar(m, other)), serialize_avatar(a));

  SynthConfig too_many = c;
  too_many.gaussian_count = c.prior_vertices + 1;
  EXPECT_THROW(make_gt_avatar(m, too_many), ConfigError);
}

TEST(Synth, PoseSequence) {
  SynthConfig c = small_config();
  c.frame_count = 20;
  const PriorModel m = make_prior(c);
  const auto frames = make_pose_sequence(m, c);
  ASSERT_EQ(frames.size(), 20u);
  const FrameParams canon = canonical_frame(m);
  EXPECT_EQ(frames[0].theta, canon.theta);
  EXPECT_EQ(frames[0].beta, canon.beta);
  EXPECT_EQ(frames[0].rotation, Mat3::Identity());
  EXPECT_EQ(frames[0].translation, Vec3::Zero());
  for (const auto& f : frames) {
    // (sin a - sin b) / 2 lies in [-1, 1].
    EXPECT_LE((f.theta - canon.theta).cwiseAbs().maxCoeff(), c.pose_amplitude + 1e-6);
    EXPECT_EQ(f.beta, canon.beta);
    EXPECT_LT((f.rotation * f.rotation.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-6);
  }
  // Per-frame step bounded by the trajectory's derivative.
  const double step = c.pose_amplitude * 2 * kPi / c.frame_count * 1.1;
  for (size_t t = 1; t < frames.size(); ++t) {
    EXPECT_LE((frames[t].theta - frames[t - 1].theta).cwiseAbs().maxCoeff(), step);
    EXPECT_LE(frames[t].translation.norm(), 0.5);
  }
  // Not static.
  EXPECT_GT((frames[5].theta - canon.theta).cwiseAbs().maxCoeff(), 0.01);
  // Values survive the frame file format unchanged.
  EXPECT_EQ(serialize_frames(deserialize_frames(serialize_frames(frames, m.pose_size())), m.pose_size()),
            serialize_frames(frames, m.pose_size()));

  SynthConfig still = c;
  still.pose_amplitude = 0;
  for (const auto& f : make_pose_sequence(m, still)) EXPECT_EQ(f.theta, canon.theta);
}

TEST(Synth, CamerasRingTheSubject) {
  const SynthConfig c = small_config();
  const PriorModel m = make_prior(c);
  const auto cams = make_cameras(m, c);
  ASSERT_EQ(cams.size(), 4u);
  Vec3 lo = Vec3::Constant(1e9), hi = Vec3::Constant(-1e9);
  for (const auto& v : canonical_vertices(m)) {
    lo = lo.cwiseMin(v);
    hi = hi.cwiseMax(v);
  }
  const Vec3 center = 0.5 * (lo + hi);
  for (const auto& cam : cams) {
    EXPECT_NO_THROW(cam.validate());
    EXPECT_NEAR((cam.center() - center).norm(), c.ring_radius, 1e-9);
    EXPECT_NEAR(cam.center().y(), center.y(), 1e-9);
    const Vec3 pc = cam.rotation * center + cam.translation;
    EXPECT_NEAR(cam.fx * pc.x() / pc.z() + cam.cx, cam.cx, 1e-9);
    EXPECT_NEAR(cam.fy * pc.y() / pc.z() + cam.cy, cam.cy, 1e-9);
    // Image y points down, so the head (max y) projects above the center.
    const Vec3 top = cam.rotation * Vec3(center.x(), hi.y(), center.z()) + cam.translation;
    EXPECT_LT(top.y() / top.z(), 0);
  }
}

TEST(Dataset, RenderLoadRoundTrip) {
  const SynthConfig c = small_config();
  const PriorModel m = make_prior(c);
  const CanonicalAvatar gt = make_gt_avatar(m, c);
  const auto poses = make_pose_sequence(m, c);
  const auto cams = make_cameras(m, c);
  const std::string dir = scratch_dir("roundtrip");
  const Dataset written = render_dataset(gt, m, poses, cams, dir);
  EXPECT_EQ(written.train_views, (std::vector<int>{0, 2}));
  EXPECT_EQ(written.test_views, (std::vector<int>{1, 3}));

  const Dataset d = Dataset::load(dir);
  EXPECT_EQ(serialize_prior(d.model), serialize_prior(m));
  EXPECT_EQ(serialize_frames(d.frames, m.pose_size()), serialize_frames(poses, m.pose_size()));
  ASSERT_EQ(d.cameras.size(), cams.size());
  for (size_t v = 0; v < cams.size(); ++v) {
    EXPECT_LT((d.cameras[v].rotation - cams[v].rotation).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_NEAR(d.cameras[v].fx, cams[v].fx, 1e-12);
  }
  EXPECT_EQ(d.train_views, written.train_views);
  EXPECT_EQ(d.test_views, written.test_views);
  EXPECT_EQ(serialize_avatar(load_avatar(dir + "/gt_avatar.gava")), serialize_avatar(gt));

  for (int f = 0; f < c.frame_count; ++f)
    for (int v = 0; v < c.view_count; ++v) {
      const RenderOutput r = rasterize(deform(gt, m, poses[static_cast<size_t>(f)]), cams[static_cast<size_t>(v)]);
      const Image img = d.image(f, v), mask = d.mask(f, v);
      ASSERT_TRUE(img.same_shape(r.image));
      ASSERT_TRUE(mask.same_shape(r.alpha));
      double worst = 0, coverage = 0;
      for (size_t i = 0; i < img.size(); ++i) worst = std::max(worst, std::abs(img.data[i] - std::clamp(r.image.data[i], 0.0, 1.0)));
      for (size_t i = 0; i < mask.size(); ++i) {
        worst = std::max(worst, std::abs(mask.data[i] - r.alpha.data[i]));
        coverage += mask.data[i] > 0.5;
      }
      EXPECT_LE(worst, 0.5 / 255 + 1e-12);
      // The subject is in view and does not fill the frame.
      EXPECT_GT(coverage / static_cast<double>(mask.size()), 0.02);
      EXPECT_LT(coverage / static_cast<double>(mask.size()), 0.6);
    }

  // Frame 0 is the canonical pose: its files equal a direct canonical render.
  size_t images = 0, masks = 0;
  for (const auto& e : fs::directory_iterator(dir + "/gt")) images += e.path().extension() == ".ppm";
  for (const auto& e : fs::directory_iterator(dir + "/masks")) masks += e.path().extension() == ".pgm";
  EXPECT_EQ(images, static_cast<size_t>(c.frame_count * c.view_count));
  EXPECT_EQ(masks, images);
  for (int v = 0; v < c.view_count; ++v) {
    const RenderOutput r = rasterize(deform(gt, m, canonical_frame(m)), cams[static_cast<size_t>(v)]);
    EXPECT_EQ(read_file(d.image_path(0, v)), detail::encode_netpbm(r.image, "P6"));
    EXPECT_EQ(read_file(d.mask_path(0, v)), detail::encode_netpbm(r.alpha, "P5"));
  }

  EXPECT_EQ(training_samples(d, d.train_views).size(), static_cast<size_t>(c.frame_count * 2));
  const auto ev = eval_views(d, d.test_views);
  ASSERT_EQ(ev.size(), static_cast<size_t>(c.frame_count * 2));
  EXPECT_EQ(ev[1].frame, 0);
  EXPECT_EQ(ev[2].frame, 1);
}

TEST(Dataset, LoadRejectsBrokenLayouts) {
  const SynthConfig c = small_config();
  const PriorModel m = make_prior(c);
  const CanonicalAvatar gt = make_gt_avatar(m, c);
  const std::string dir = scratch_dir("broken");
  render_dataset(gt, m, make_pose_sequence(m, c), make_cameras(m, c), dir);
  ASSERT_NO_THROW(Dataset::load(dir));

  fs::remove(dir + "/masks/0001_02.pgm");
  EXPECT_THROW(Dataset::load(dir), IoError);

  std::ofstream(dir + "/manifest.json") << R"({"frame_count": 1, "train_views": [0, 1], "test_views": [1]})";
  EXPECT_THROW(Dataset::load(dir), CorruptionError);
  std::ofstream(dir + "/manifest.json") << R"({"frame_count": 1, "train_views": [0], "test_views": [9]})";
  EXPECT_THROW(Dataset::load(dir), CorruptionError);
  std::ofstream(dir + "/manifest.json") << "{ not json";
  EXPECT_THROW(Dataset::load(dir), CorruptionError);
  EXPECT_THROW(Dataset::load(dir + "/nowhere"), IoError);
}

TEST(Report, Helpers) {
  const std::vector<double> log{4, 3, 2, 1};
  EXPECT_EQ(smoothed_loss_ends(log, 2), (std::pair<double, double>{3.5, 1.5}));
  EXPECT_EQ(smoothed_loss_ends(log, 100), (std::pair<double, double>{2.5, 2.5}));

  std::vector<RDPoint> rd{{"a", 0.1, 30, 0}, {"b", 0.2, 29.95, 0}, {"c", 0.3, 31, 0}};
  EXPECT_TRUE(rd_rates_increasing(rd));
  EXPECT_TRUE(rd_psnr_non_decreasing(rd));
  rd[1].psnr_db = 29.8;
  EXPECT_FALSE(rd_psnr_non_decreasing(rd));
  rd[2].rate_mbps = 0.2;
  EXPECT_FALSE(rd_rates_increasing(rd));

  const std::vector<std::vector<uint8_t>> payloads{std::vector<uint8_t>(10), std::vector<uint8_t>(30)};
  EXPECT_DOUBLE_EQ(temporal_rate(payloads), 320.0 / 2 * 25 / 1e6);
}

TEST(EndToEnd, WritesArtifactsAndConsistentReport) {
  EndToEndConfig cfg;
  cfg.synth = small_config();
  cfg.fit.iterations = 150;
  cfg.fit.prune_interval = 50;
  cfg.out_dir = scratch_dir("e2e");
  std::ostringstream log;
  const EndToEndReport rep = run_end_to_end(cfg, &log);
  EXPECT_NE(log.str().find("synth:"), std::string::npos);

  for (const char* f : {"summary.json", "rd.csv", "avatar.gava", "stream.gavc", "loss.csv", "dataset/manifest.json"})
    EXPECT_TRUE(fs::exists(cfg.out_dir + "/" + f)) << f;
  EXPECT_EQ(rep.loss_log.size(), 150u);
  ASSERT_EQ(rep.rd.size(), 4u);
  EXPECT_EQ(rep.checks.size(), 8u);

  const auto text = read_file(cfg.out_dir + "/summary.json");
  const auto j = nlohmann::json::parse(text.begin(), text.end());
  EXPECT_EQ(j.at("passed").get<bool>(), rep.passed());
  EXPECT_DOUBLE_EQ(j.at("train_psnr_db").get<double>(), rep.train_psnr);
  EXPECT_EQ(j.at("rd").size(), 4u);

  // The written stream is the finest rate point and decodes against the prior.
  const AvatarStream s = read_stream(cfg.out_dir + "/stream.gavc");
  EXPECT_DOUBLE_EQ(rate_mbps(8ull * serialize_stream(s).size(), cfg.synth.frame_count), rep.rd.back().rate_mbps);
  EXPECT_DOUBLE_EQ(temporal_rate(s.frames), rep.temporal_rate_mbps);
  const PriorModel model = make_prior(cfg.synth);
  EXPECT_NO_THROW(decode_stream(s, &model));
  EXPECT_EQ(load_avatar(cfg.out_dir + "/avatar.gava").size(), rep.final_gaussians);
  // Loss should fall even over a short run.
  const auto [head, tail] = smoothed_loss_ends(rep.loss_log, 30);
  EXPECT_LT(tail, head);
}

}  // namespace
}  // namespace gavatar
