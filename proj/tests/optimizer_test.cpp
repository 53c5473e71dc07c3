#include <gavatar/optimizer.hpp>

#include <gtest/gtest.h>

#include "grad_check.hpp"
#include "test_support.hpp"

namespace gavatar {
namespace {

Image filled(int w, int h, int c, double v) {
  Image img(w, h, c);
  std::fill(img.data.begin(), img.data.end(), v);
  return img;
}

Image random_image(int w, int h, int c, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(w, h, c);
  for (double& v : img.data) v = u(rng);
  return img;
}

TEST(SsimTest, IdenticalImagesScoreOne) {
  const Image a = random_image(20, 17, 3, 1);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
}

TEST(SsimTest, CheckerboardAgainstInverseIsNegative) {
  Image a(16, 16, 1), b(16, 16, 1);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      a.at(x, y) = (x + y) % 2;
      b.at(x, y) = 1 - a.at(x, y);
    }
  EXPECT_LT(ssim(a, b), 0.0);
}

TEST(SsimTest, ConstantImagesMatchClosedForm) {
  for (double a : {0.0, 0.2, 0.7})
    for (double b : {0.1, 0.5, 1.0}) {
      const double want = (2 * a * b + kSsimC1) / (a * a + b * b + kSsimC1);
      EXPECT_NEAR(ssim(filled(12, 14, 3, a), filled(12, 14, 3, b)), want, 1e-9);
    }
}

TEST(SsimTest, ShapeErrors) {
  EXPECT_THROW(ssim(filled(12, 12, 3, 0), filled(12, 13, 3, 0)), ShapeError);
  EXPECT_THROW(ssim(filled(10, 12, 1, 0), filled(10, 12, 1, 0)), ShapeError);
}

TEST(SsimTest, GradientMatchesFiniteDifferences) {
  Image a = random_image(14, 13, 2, 2);
  const Image b = random_image(14, 13, 2, 3);
  Image grad;
  ssim(a, b, &grad);
  for (size_t i = 0; i < a.size(); ++i) {
    const double keep = a.data[i];
    a.data[i] = keep + 1e-5;
    const double up = ssim(a, b);
    a.data[i] = keep - 1e-5;
    const double down = ssim(a, b);
    a.data[i] = keep;
    EXPECT_NEAR(grad.data[i], (up - down) / 2e-5, 1e-7);
  }
}

TEST(SsimTest, AdjointFilterIsTranspose) {
  const int w = 15, h = 12, ow = w - 10, oh = h - 10;
  const Image x = random_image(w, h, 1, 4), y = random_image(ow, oh, 1, 5);
  const auto fx = detail::filter_valid(x.data, w, h);
  const auto ay = detail::filter_adjoint(y.data, w, h);
  double lhs = 0, rhs = 0;
  for (size_t i = 0; i < fx.size(); ++i) lhs += fx[i] * y.data[i];
  for (size_t i = 0; i < ay.size(); ++i) rhs += ay[i] * x.data[i];
  EXPECT_NEAR(lhs, rhs, 1e-12);
}

TrainingSample flat_sample(double image, double mask) {
  TrainingSample s;
  s.image = filled(16, 16, 3, image);
  s.mask = filled(16, 16, 1, mask);
  return s;
}

TEST(LossTest, AnalyticValues) {
  const RenderOutput out{filled(16, 16, 3, 0.5), filled(16, 16, 1, 0.5)};
  const TrainingSample s = flat_sample(0.25, 1.0);
  const LossTerms t = loss_terms(out, s, {0.1, 0.0, 0.0});
  EXPECT_NEAR(t.l1, 0.25, 1e-15);
  EXPECT_NEAR(t.mask, 0.25, 1e-15);
  EXPECT_NEAR(t.total, 0.25 + 0.1 * 0.25, 1e-15);
  const LossTerms u = loss_terms(out, s, {0.1, 0.5, 0.0});
  const double ss = (2 * 0.5 * 0.25 + kSsimC1) / (0.25 + 0.0625 + kSsimC1);
  EXPECT_NEAR(u.ssim, ss, 1e-9);
  EXPECT_NEAR(u.total, t.total + 0.5 * (1 - ss), 1e-9);
}

TEST(LossTest, ZeroResidualHasZeroSubgradient) {
  const RenderOutput out{filled(16, 16, 3, 0.3), filled(16, 16, 1, 0.6)};
  Image gi, ga;
  const LossTerms t = loss_terms(out, flat_sample(0.3, 0.6), {}, &gi, &ga);
  EXPECT_NEAR(t.total, 0.0, 1e-12);
  for (double v : gi.data) EXPECT_NEAR(v, 0.0, 1e-12);
  for (double v : ga.data) EXPECT_EQ(v, 0.0);
}

TEST(LossTest, RejectsBadInput) {
  const RenderOutput out{filled(16, 16, 3, 0.3), filled(16, 16, 1, 0.6)};
  TrainingSample s = flat_sample(0.3, 0.6);
  EXPECT_THROW(loss(out, s, {-1, 0, 0}), ConfigError);
  s.mask = filled(15, 16, 1, 0.6);
  EXPECT_THROW(loss(out, s, {}), ShapeError);
}

void expect_all_groups(uint64_t seed, const LossWeights& w) {
  for (const auto& [name, st] : testing::check_all_groups(seed, w)) {
    SCOPED_TRACE(name);
    EXPECT_GT(st.checked, 0);
    EXPECT_EQ(st.failed, 0) << "worst relative error " << st.worst << ", unresolved " << st.unresolved;
  }
}

TEST(GradientTest, AllGroupsMatchFiniteDifferences) {
  for (uint64_t seed = 0; seed < 3; ++seed) {
    SCOPED_TRACE(seed);
    expect_all_groups(seed, {});
  }
}

TEST(GradientTest, StructuralTermMatchesFiniteDifferences) {
  expect_all_groups(11, {0.3, 0.5, 0.0});
}

TEST(GradientTest, ZeroLossGivesZeroGradients) {
  testing::GradScene s = testing::make_grad_scene(4);
  const RenderOutput out = rasterize(deform(s.avatar, s.model, s.sample.frame), s.sample.camera);
  s.sample.image = out.image;
  s.sample.mask = out.alpha;
  const AvatarGradients g = gradients(s.avatar, s.model, s.sample, {});
  EXPECT_NEAR(g.loss, 0.0, 1e-12);
  for (size_t i = 0; i < s.avatar.size(); ++i) {
    EXPECT_LE(g.positions[i].cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LE(g.log_scales[i].cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LE(g.rotations[i].cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LE(std::abs(g.opacities[i]), 1e-8);
  }
  for (double v : g.sh) EXPECT_LE(std::abs(v), 1e-8);
}

TEST(GradientTest, MaskTermIsLinearInLambda1) {
  testing::GradScene s = testing::make_grad_scene(5);
  for (double& m : s.sample.mask.data) m = 1.0 - m;  // alpha != mask almost everywhere
  const AvatarGradients g0 = gradients(s.avatar, s.model, s.sample, {0.0, 0.0, 0.0});
  const AvatarGradients g1 = gradients(s.avatar, s.model, s.sample, {0.1, 0.0, 0.0});
  const AvatarGradients g2 = gradients(s.avatar, s.model, s.sample, {0.2, 0.0, 0.0});
  double largest = 0;
  for (size_t i = 0; i < s.avatar.size(); ++i) {
    const Vec3 c1 = g1.positions[i] - g0.positions[i], c2 = g2.positions[i] - g0.positions[i];
    EXPECT_LE((c2 - 2 * c1).norm(), 1e-12 + 1e-9 * c1.norm());
    EXPECT_NEAR(g2.opacities[i] - g0.opacities[i], 2 * (g1.opacities[i] - g0.opacities[i]), 1e-12);
    largest = std::max(largest, c1.norm());
  }
  EXPECT_GT(largest, 0.0);
}

TEST(GradientTest, ThreadCountDoesNotChangeGradients) {
  testing::GradScene s = testing::make_grad_scene(6);
  const AvatarGradients a = gradients(s.avatar, s.model, s.sample, {});
  set_thread_count(3);
  const AvatarGradients b = gradients(s.avatar, s.model, s.sample, {});
  set_thread_count(1);
  EXPECT_EQ(a.sh, b.sh);
  EXPECT_EQ(a.opacities, b.opacities);
  for (size_t i = 0; i < a.positions.size(); ++i) EXPECT_EQ(a.positions[i], b.positions[i]);
}

TEST(InitTest, MatchesBruteForceNeighbours) {
  const PriorModel model = build_toy_prior(3, kDefaultJointCount, 250);
  const CanonicalAvatar a = init_from_prior(model, 1);
  const auto verts = canonical_vertices(model);
  ASSERT_EQ(a.size(), verts.size());
  EXPECT_EQ(a.sh_degree, 1);
  for (size_t i = 0; i < verts.size(); ++i) {
    std::vector<double> d;
    for (size_t j = 0; j < verts.size(); ++j)
      if (j != i) d.push_back((verts[j] - verts[i]).norm());
    std::sort(d.begin(), d.end());
    const double want = 0.3 * (d[0] + d[1] + d[2]) / 3.0;
    EXPECT_EQ(a.positions[i], verts[i]);
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(std::exp(a.log_scales[i][k]), want, 1e-12);
    EXPECT_NEAR(sigmoid(a.opacities[i]), 0.1, 1e-12);
    EXPECT_EQ(a.rotations[i], Quat(1, 0, 0, 0));
  }
  for (double c : a.sh) EXPECT_EQ(c, 0.0);
  EXPECT_EQ((a.gauss_weights - model.skin_weights).cwiseAbs().maxCoeff(), 0.0);
  // Zero SH renders gray.
  const Vec3 rgb = eval_sh({a.sh_of(0), 12}, Vec3(0, 0, 1));
  EXPECT_EQ(rgb, Vec3::Constant(0.5));
}

TEST(InitTest, NeighbourDistanceOnALine) {
  std::vector<Vec3> pts;
  for (int i = 0; i < 10; ++i) pts.emplace_back(0.1 * i, 0, 0);
  const auto nn = mean_neighbor_distance(pts);
  EXPECT_NEAR(nn[0], (0.1 + 0.2 + 0.3) / 3, 1e-12);
  EXPECT_NEAR(nn[5], (0.1 + 0.1 + 0.2) / 3, 1e-12);
}

std::vector<TrainingSample> render_samples(const CanonicalAvatar& gt, const PriorModel& model, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<TrainingSample> out;
  for (int f = 0; f < 2; ++f) {
    const FrameParams fp = f == 0 ? canonical_frame(model) : testing::random_frame(model, rng, 0.2);
    const auto g = deform(gt, model, fp);
    for (int v = 0; v < 2; ++v) {
      const double ang = kPi * v;
      TrainingSample s;
      s.frame = fp;
      const Vec3 c = fp.translation;
      s.camera = Camera::look_at(c + 3.0 * Vec3(std::sin(ang), 0, std::cos(ang)), c, Vec3(0, -1, 0), 20, 24, 24);
      const RenderOutput r = rasterize(g, s.camera);
      s.image = r.image;
      s.mask = r.alpha;
      out.push_back(std::move(s));
    }
  }
  return out;
}

TEST(FitTest, GroundTruthIsAFixedPoint) {
  const PriorModel model = build_toy_prior(8, kDefaultJointCount, 200);
  const CanonicalAvatar gt = testing::random_avatar(model, 60, 9, 1);
  const auto samples = render_samples(gt, model, 10);
  FitConfig cfg;
  cfg.iterations = 20;
  cfg.prune_interval = 5;
  const FitResult r = fit(model, samples, cfg, {}, gt);
  ASSERT_EQ(r.avatar.size(), gt.size());
  EXPECT_TRUE(r.prunes.empty());
  for (double l : r.loss_log) EXPECT_NEAR(l, 0.0, 1e-12);
  for (size_t i = 0; i < gt.size(); ++i) {
    EXPECT_LE((r.avatar.positions[i] - gt.positions[i]).norm(), 1e-12);
    EXPECT_LE((r.avatar.rotations[i] - gt.rotations[i]).norm(), 1e-12);
  }
  EXPECT_EQ(r.avatar.sh, gt.sh);
}

TEST(FitTest, DeterministicAndDecreasing) {
  const PriorModel model = build_toy_prior(12, kDefaultJointCount, 200);
  const CanonicalAvatar gt = testing::random_avatar(model, 80, 13, 1);
  const auto samples = render_samples(gt, model, 14);
  FitConfig cfg;
  cfg.iterations = 150;
  cfg.prune_interval = 50;
  cfg.seed = 3;
  const FitResult a = fit(model, samples, cfg, {});
  const FitResult b = fit(model, samples, cfg, {});
  EXPECT_EQ(a.loss_log, b.loss_log);
  EXPECT_EQ(a.avatar.sh, b.avatar.sh);
  ASSERT_EQ(a.loss_log.size(), 150u);
  double head = 0, tail = 0;
  for (int i = 0; i < 10; ++i) {
    head += a.loss_log[static_cast<size_t>(i)];
    tail += a.loss_log[a.loss_log.size() - 1 - static_cast<size_t>(i)];
  }
  EXPECT_LT(tail, head);
  for (const auto& ev : a.prunes) {
    EXPECT_GT(ev.removed, 0u);
    EXPECT_EQ(ev.iteration % 50, 0);
  }
}

TEST(FitTest, RejectsBadConfig) {
  const PriorModel model = build_toy_prior(1, kDefaultJointCount, 100);
  std::vector<TrainingSample> none;
  EXPECT_THROW(fit(model, none, {}, {}), ConfigError);
  const auto samples = render_samples(testing::random_avatar(model, 10, 1), model, 1);
  FitConfig cfg;
  cfg.iterations = 0;
  EXPECT_THROW(fit(model, samples, cfg, {}), ConfigError);
  cfg.iterations = 5;
  cfg.lr.sh = 0;
  EXPECT_THROW(fit(model, samples, cfg, {}), ConfigError);
}

TEST(FitTest, PruningEverythingThrows) {
  const PriorModel model = build_toy_prior(2, kDefaultJointCount, 100);
  const auto samples = render_samples(testing::random_avatar(model, 10, 2), model, 2);
  FitConfig cfg;
  cfg.iterations = 10;
  cfg.prune_interval = 2;
  cfg.prune_opacity_threshold = 1.1;
  EXPECT_THROW(fit(model, samples, cfg, {}), FitError);
}

}  // namespace
}  // namespace gavatar
