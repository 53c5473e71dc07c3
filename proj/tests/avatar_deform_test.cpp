#include <gavatar/avatar.hpp>

#include <Eigen/Eigenvalues>
#include <gtest/gtest.h>

#include <random>

#include "test_support.hpp"

namespace gavatar {
namespace {

using testing::max_abs_diff;

JointTransforms random_transforms(int joints, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  JointTransforms tf;
  for (int k = 0; k < joints; ++k) {
    tf.rotation.push_back(testing::random_rotation(rng));
    tf.translation.push_back(Vec3(u(rng), u(rng), u(rng)));
    tf.joint_positions.push_back(Vec3::Zero());
  }
  return tf;
}

Eigen::Vector3d sorted_eigenvalues(const Mat3& m) {
  Eigen::SelfAdjointEigenSolver<Mat3> es(m);
  return es.eigenvalues();
}

TEST(BlendTransformsTest, IdentityTransforms) {
  JointTransforms tf;
  tf.rotation.assign(3, Mat3::Identity());
  tf.translation.assign(3, Vec3::Zero());
  const auto bt = blend_transforms(tf, Eigen::RowVector3d(0.2, 0.3, 0.5));
  EXPECT_LE(max_abs_diff(bt.A, Mat3::Identity()), 1e-15);
  EXPECT_EQ(bt.b, Vec3::Zero());
}

TEST(BlendTransformsTest, OneHotSelectsJoint) {
  std::mt19937_64 rng(1);
  const JointTransforms tf = random_transforms(4, rng);
  for (int k = 0; k < 4; ++k) {
    Eigen::RowVector4d w = Eigen::RowVector4d::Zero();
    w(k) = 1.0;
    const auto bt = blend_transforms(tf, w);
    EXPECT_EQ(bt.A, tf.rotation[k]);
    EXPECT_EQ(bt.b, tf.translation[k]);
  }
}

TEST(BlendTransformsTest, HalfHalfMatchesScalarLoop) {
  std::mt19937_64 rng(2);
  const JointTransforms tf = random_transforms(2, rng);
  const auto bt = blend_transforms(tf, Eigen::RowVector2d(0.5, 0.5));
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(bt.A(r, c), 0.5 * tf.rotation[0](r, c) + 0.5 * tf.rotation[1](r, c), 1e-15);
    EXPECT_NEAR(bt.b(r), 0.5 * tf.translation[0](r) + 0.5 * tf.translation[1](r), 1e-15);
  }
}

TEST(BlendTransformsTest, UnnormalizedWeightsViolateContract) {
  std::mt19937_64 rng(3);
  const JointTransforms tf = random_transforms(2, rng);
  EXPECT_THROW(blend_transforms(tf, Eigen::RowVector2d(0.5, 0.6)), ContractError);
  EXPECT_THROW(blend_transforms(tf, Eigen::RowVector2d(1.5, -0.5)), ContractError);
  EXPECT_THROW(blend_transforms(tf, Eigen::RowVector3d(0.5, 0.25, 0.25)), ShapeError);
}

TEST(BlendTransformsTest, BlendStaysInEntrywiseConvexHull) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 500; ++trial) {
    const JointTransforms tf = random_transforms(4, rng);
    Eigen::RowVector4d w(u(rng), u(rng), u(rng), u(rng));
    w /= w.sum();
    const auto bt = blend_transforms(tf, w);
    for (int e = 0; e < 9; ++e) {
      double lo = 1e9, hi = -1e9;
      for (const auto& r : tf.rotation) {
        lo = std::min(lo, r(e));
        hi = std::max(hi, r(e));
      }
      EXPECT_GE(bt.A(e), lo - 1e-12);
      EXPECT_LE(bt.A(e), hi + 1e-12);
    }
  }
}

TEST(TransformPositionTest, TrivialCases) {
  const Vec3 p(0.3, -1.2, 2.0);
  EXPECT_EQ(transform_position(p, Mat3::Identity(), Vec3::Zero(), Mat3::Identity(), Vec3::Zero()), p);
  EXPECT_EQ(transform_position(p, Mat3::Identity(), Vec3::Zero(), Mat3::Identity(), Vec3(1, 2, 3)),
            p + Vec3(1, 2, 3));
}

TEST(TransformPositionTest, MatchesTwoStepRowVectorOracle) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-2, 2);
  for (int trial = 0; trial < 1000; ++trial) {
    Mat3 a;
    for (int i = 0; i < 9; ++i) a(i) = u(rng);
    const Vec3 p(u(rng), u(rng), u(rng)), b(u(rng), u(rng), u(rng)), t(u(rng), u(rng), u(rng));
    const Mat3 r = testing::random_rotation(rng);
    // Pose transform, then the world transform written with row vectors.
    const Vec3 posed = a * p + b;
    const Eigen::RowVector3d world = posed.transpose() * r.transpose() + t.transpose();
    EXPECT_LE((transform_position(p, a, b, r, t) - world.transpose()).norm(), 1e-12);
  }
}

TEST(CanonicalCovarianceTest, DiagonalCases) {
  EXPECT_LE(max_abs_diff(canonical_covariance(Vec3::Zero(), Quat(1, 0, 0, 0)), Mat3::Identity()), 1e-15);
  const Mat3 expected = Vec3(4, 1, 1).asDiagonal();
  EXPECT_LE(max_abs_diff(canonical_covariance(Vec3(std::log(2.0), 0, 0), Quat(1, 0, 0, 0)), expected), 1e-14);
}

TEST(CanonicalCovarianceTest, EigenvaluesAreSquaredScales) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(-3, 1);
  for (int trial = 0; trial < 1000; ++trial) {
    const Vec3 ls(u(rng), u(rng), u(rng));
    const Mat3 sigma = canonical_covariance(ls, testing::random_quat(rng));
    EXPECT_LE(max_abs_diff(sigma, sigma.transpose()), 0.0);
    Vec3 expected = (2 * ls).array().exp();
    std::sort(expected.data(), expected.data() + 3);
    EXPECT_LE((sorted_eigenvalues(sigma) - expected).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(TransformCovarianceTest, IdentityLeavesCovarianceUnchanged) {
  std::mt19937_64 rng(7);
  const Mat3 s = testing::random_psd(rng);
  EXPECT_LE(max_abs_diff(transform_covariance(s, Mat3::Identity(), Mat3::Identity()), s), 1e-15);
}

TEST(TransformCovarianceTest, OrthonormalBlendPreservesEigenvalues) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 1000; ++trial) {
    const Mat3 s = testing::random_psd(rng);
    const Mat3 out = transform_covariance(s, testing::random_rotation(rng), testing::random_rotation(rng));
    EXPECT_LE((sorted_eigenvalues(out) - sorted_eigenvalues(s)).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(TransformCovarianceTest, PreservesSymmetryAndPsd) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 5000; ++trial) {
    Mat3 a;
    for (int i = 0; i < 9; ++i) a(i) = u(rng);
    const Mat3 out = transform_covariance(testing::random_psd(rng), a, testing::random_rotation(rng));
    EXPECT_LE(max_abs_diff(out, out.transpose()), 1e-12);
    EXPECT_GE(sorted_eigenvalues(out)(0), -1e-10);
  }
}

class DeformTest : public ::testing::Test {
 protected:
  PriorModel model = build_toy_prior(21, 24, 400);
  CanonicalAvatar avatar = testing::random_avatar(model, 150, 3);
};

TEST_F(DeformTest, CanonicalParametersAreIdentity) {
  const DeformedGaussians g = deform(avatar, model, canonical_frame(model));
  for (size_t i = 0; i < avatar.size(); ++i) {
    EXPECT_LE((g.world_means[i] - avatar.positions[i]).norm(), 1e-9);
    EXPECT_LE(max_abs_diff(g.covariances[i], canonical_covariance(avatar.log_scales[i], avatar.rotations[i])), 1e-9);
    EXPECT_DOUBLE_EQ(g.opacities[i], sigmoid(avatar.opacities[i]));
  }
  EXPECT_EQ(g.sh, avatar.sh);
}

TEST_F(DeformTest, GlobalTranslationShiftsMeans) {
  FrameParams fp = canonical_frame(model);
  fp.translation = Vec3(0, 0, 1);
  const DeformedGaussians g = deform(avatar, model, fp);
  for (size_t i = 0; i < avatar.size(); ++i) {
    EXPECT_LE((g.world_means[i] - avatar.positions[i] - Vec3(0, 0, 1)).norm(), 1e-9);
    EXPECT_LE(max_abs_diff(g.covariances[i], canonical_covariance(avatar.log_scales[i], avatar.rotations[i])), 1e-9);
  }
}

TEST_F(DeformTest, GlobalRotationIsAnIsometry) {
  std::mt19937_64 rng(10);
  FrameParams fp = canonical_frame(model);
  fp.rotation = testing::random_rotation(rng);
  const DeformedGaussians g = deform(avatar, model, fp);
  for (size_t i = 0; i < avatar.size(); i += 7)
    for (size_t j = i + 1; j < avatar.size(); j += 5)
      EXPECT_NEAR((g.world_means[i] - g.world_means[j]).norm(), (avatar.positions[i] - avatar.positions[j]).norm(),
                  1e-9);
}

TEST_F(DeformTest, GlobalMotionEquivariance) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const FrameParams fp = testing::random_frame(model, rng);
    const Mat3 r = testing::random_rotation(rng);
    const Vec3 t(0.3, -0.2, 0.9);
    FrameParams moved = fp;
    moved.rotation = r * fp.rotation;
    moved.translation = r * fp.translation + t;
    const DeformedGaussians g0 = deform(avatar, model, fp);
    const DeformedGaussians g1 = deform(avatar, model, moved);
    for (size_t i = 0; i < avatar.size(); ++i) {
      EXPECT_LE((g1.world_means[i] - (r * g0.world_means[i] + t)).norm(), 1e-9);
      EXPECT_LE(max_abs_diff(g1.covariances[i], r * g0.covariances[i] * r.transpose()), 1e-9);
    }
  }
}

TEST_F(DeformTest, OutputCovariancesArePsd) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const DeformedGaussians g = deform(avatar, model, testing::random_frame(model, rng, 1.5));
    for (const Mat3& c : g.covariances) {
      EXPECT_LE(max_abs_diff(c, c.transpose()), 1e-12);
      EXPECT_GE(sorted_eigenvalues(c)(0), -1e-10);
    }
  }
}

TEST_F(DeformTest, BlendsMatchPerGaussianWeights) {
  std::mt19937_64 rng(13);
  const FrameParams fp = testing::random_frame(model, rng);
  std::vector<BlendedTransform> blends;
  const DeformedGaussians g = deform(avatar, model, fp, &blends);
  const JointTransforms tf = forward(model, {fp.theta, fp.beta}).transforms;
  for (size_t i = 0; i < avatar.size(); i += 13) {
    Mat3 a = Mat3::Zero();
    Vec3 b = Vec3::Zero();
    for (int k = 0; k < model.joint_count; ++k) {
      a += avatar.gauss_weights(static_cast<Eigen::Index>(i), k) * tf.rotation[k];
      b += avatar.gauss_weights(static_cast<Eigen::Index>(i), k) * tf.translation[k];
    }
    EXPECT_LE(max_abs_diff(blends[i].A, a), 1e-12);
    EXPECT_LE((g.world_means[i] - (fp.rotation * (a * avatar.positions[i] + b) + fp.translation)).norm(), 1e-12);
  }
}

TEST_F(DeformTest, JointCountMismatchIsShapeError) {
  const PriorModel other = build_toy_prior(1, 5, 40);
  EXPECT_THROW(deform(avatar, other, canonical_frame(other)), ShapeError);
}

TEST_F(DeformTest, AvatarFileRoundTrip) {
  const auto bytes = serialize_avatar(avatar);
  const CanonicalAvatar back = deserialize_avatar(bytes);
  ASSERT_EQ(back.size(), avatar.size());
  EXPECT_EQ(back.sh_degree, avatar.sh_degree);
  for (size_t i = 0; i < avatar.size(); ++i) {
    EXPECT_LE((back.positions[i] - avatar.positions[i]).norm(), 1e-6);
    EXPECT_LE((back.rotations[i] - avatar.rotations[i]).norm(), 1e-6);
  }
  auto bad = bytes;
  bad[1] = 'x';
  EXPECT_THROW(deserialize_avatar(bad), CorruptionError);
  bad = bytes;
  bad.pop_back();
  EXPECT_THROW(deserialize_avatar(bad), CorruptionError);
}

TEST_F(DeformTest, AvatarKeepPreservesOrder) {
  CanonicalAvatar a = avatar;
  std::vector<bool> flags(a.size());
  for (size_t i = 0; i < a.size(); ++i) flags[i] = i % 3 != 0;
  a.keep(flags);
  size_t out = 0;
  for (size_t i = 0; i < avatar.size(); ++i) {
    if (!flags[i]) continue;
    EXPECT_EQ(a.positions[out], avatar.positions[i]);
    EXPECT_EQ(a.sh_of(out)[2], avatar.sh_of(i)[2]);
    EXPECT_EQ(a.gauss_weights.row(static_cast<Eigen::Index>(out)),
              avatar.gauss_weights.row(static_cast<Eigen::Index>(i)));
    ++out;
  }
  EXPECT_EQ(a.size(), out);
  a.validate();
}

TEST(FrameParamsTest, NinetyFourValuesPerFrame) {
  const PriorModel m = build_toy_prior(1);
  EXPECT_EQ(canonical_frame(m).value_count(), 94);
  EXPECT_EQ(canonical_frame(m).to_vector().size(), 94);
}

TEST(FrameParamsTest, BinaryAndJsonRoundTrip) {
  const PriorModel m = build_toy_prior(1);
  std::mt19937_64 rng(14);
  std::vector<FrameParams> frames;
  for (int f = 0; f < 5; ++f) frames.push_back(testing::random_frame(m, rng));
  const auto bytes = serialize_frames(frames, m.pose_size());
  EXPECT_EQ(bytes.size(), 16u + 5 * 94 * 4);
  const auto back = deserialize_frames(bytes);
  ASSERT_EQ(back.size(), frames.size());
  for (size_t f = 0; f < frames.size(); ++f)
    EXPECT_LE((back[f].to_vector() - frames[f].to_vector()).cwiseAbs().maxCoeff(), 1e-6);
  const auto from_json = frames_from_json(nlohmann::json::parse(frames_to_json(frames).dump()));
  for (size_t f = 0; f < frames.size(); ++f)
    EXPECT_LE((from_json[f].to_vector() - frames[f].to_vector()).cwiseAbs().maxCoeff(), 1e-12);
  auto bad = bytes;
  bad.resize(bad.size() - 4);
  EXPECT_THROW(deserialize_frames(bad), CorruptionError);
}

}  // namespace
}  // namespace gavatar
