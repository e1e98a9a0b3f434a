#include "voxcarve/registration.hpp"

#include <gtest/gtest.h>

#include <random>

#include "voxcarve/phantom.hpp"

using namespace voxcarve;

namespace {

CameraIntrinsics test_camera() {
  CameraIntrinsics K;
  K.fx = K.fy = 120.0;
  K.cx = 0.5 * (160 - 1);
  K.cy = 0.5 * (120 - 1);
  K.width = 160;
  K.height = 120;
  return K;
}

// Structured surface cloud from the phantom, subsampled. Two asymmetric
// carved pockets break the corridor's rotational symmetry so the rigid fit is
// fully observable.
PointCloud phantom_cloud(int stride = 7) {
  const CameraIntrinsics K = test_camera();
  PhantomScene scene = PhantomScene::corridor(8.0, 45.0);
  scene = carve_bite(scene, Vec3(2.4, 0.8, 45.3), 1.8);
  scene = carve_bite(scene, Vec3(-1.6, -2.2, 45.6), 2.6);
  const RigidTransform pose = gen_trajectory(scene, 1, scene.wall_center(), K)[0];
  const PointCloud full = depth_to_pointcloud(render_gt_depth(scene, pose, K), pose, K);
  PointCloud cloud;
  for (size_t i = 0; i < full.points.size(); i += stride) cloud.points.push_back(full.points[i]);
  return cloud;
}

double rotation_angle(const Mat3& r) { return Eigen::AngleAxisd(r).angle(); }

RigidTransform small_transform(double degrees, double translation_mm) {
  const Eigen::AngleAxisd rot(degrees * M_PI / 180.0, Vec3(0.3, 1.0, 0.2).normalized());
  return RigidTransform(rot.toRotationMatrix(),
                        translation_mm * Vec3(0.6, -0.3, 0.74).normalized());
}

}  // namespace

TEST(EstimateScale, MedianRatioOnExactScaledMaps) {
  DepthMap ref(20, 20, 0.0f);
  for (int y = 0; y < 20; ++y)
    for (int x = 0; x < 20; ++x) ref.at(x, y) = 5.0f + 0.01f * (x + 20 * y);
  DepthMap source = ref;
  for (auto& v : source.data()) v *= 2.0f;
  EXPECT_DOUBLE_EQ(estimate_scale(source, ref), 0.5);
  EXPECT_DOUBLE_EQ(estimate_scale(ref, ref), 1.0);
}

// Median robustness: 20% of pixels perturbed +5 mm (one-sided, like an
// ablated region) must not move the recovered scale by more than 1%.
TEST(EstimateScale, RobustToOneSidedOutliers) {
  std::mt19937 rng(3);
  std::uniform_real_distribution<float> depth(8.0f, 14.0f);
  std::uniform_real_distribution<double> pick(0.0, 1.0);
  DepthMap ref(40, 40, 0.0f);
  DepthMap source(40, 40, 0.0f);
  for (int y = 0; y < 40; ++y)
    for (int x = 0; x < 40; ++x) {
      const float d = depth(rng);
      ref.at(x, y) = d;
      source.at(x, y) = 1.25f * d + (pick(rng) < 0.2 ? 5.0f : 0.0f);
    }
  EXPECT_NEAR(estimate_scale(source, ref), 0.8, 0.008);
}

TEST(EstimateScale, RequiresFiftyOverlappingPixels) {
  DepthMap a(10, 10, 0.0f), b(10, 10, 0.0f);
  for (int i = 0; i < 49; ++i) {
    a.at(i % 10, i / 10) = 5.0f;
    b.at(i % 10, i / 10) = 5.0f;
  }
  EXPECT_THROW(estimate_scale(a, b), RegistrationError);
  a.at(9, 9) = 5.0f;
  b.at(9, 9) = 5.0f;
  EXPECT_NO_THROW(estimate_scale(a, b));
}

TEST(EstimateScale, ExactlyScaleEquivariant) {
  std::mt19937 rng(11);
  std::uniform_real_distribution<float> depth(4.0f, 30.0f);
  DepthMap ref(30, 30, 0.0f), source(30, 30, 0.0f);
  for (int y = 0; y < 30; ++y)
    for (int x = 0; x < 30; ++x) {
      ref.at(x, y) = depth(rng);
      source.at(x, y) = depth(rng);
    }
  const double base = estimate_scale(source, ref);
  for (const double k : {0.5, 2.0, 3.7, 0.013}) {
    DepthMap scaled = source;
    for (auto& v : scaled.data()) v = static_cast<float>(v * k);
    EXPECT_NEAR(estimate_scale(scaled, ref) * k, base, 1e-6 * base);
  }
}

TEST(RigidFromCorrespondences, IdentityOnIdenticalPairs) {
  std::vector<std::pair<Vec3, Vec3>> pairs;
  std::mt19937 rng(4);
  std::uniform_real_distribution<double> u(-10.0, 10.0);
  for (int i = 0; i < 20; ++i) {
    const Vec3 p(u(rng), u(rng), u(rng));
    pairs.emplace_back(p, p);
  }
  const RigidTransform t = rigid_from_correspondences(pairs);
  EXPECT_LT(rotation_angle(t.rotation()), 1e-9);
  EXPECT_LT(t.translation().norm(), 1e-9);
}

TEST(RigidFromCorrespondences, RecoversKnownTransform) {
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> u(-10.0, 10.0);
  const Eigen::AngleAxisd rot(0.7, Vec3(1, 2, 3).normalized());
  const RigidTransform truth(rot.toRotationMatrix(), Vec3(4, -2, 9));
  std::vector<std::pair<Vec3, Vec3>> pairs;
  for (int i = 0; i < 50; ++i) {
    const Vec3 p(u(rng), u(rng), u(rng));
    pairs.emplace_back(p, truth * p);
  }
  const RigidTransform t = rigid_from_correspondences(pairs);
  EXPECT_LT((t.rotation() - truth.rotation()).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LT((t.translation() - truth.translation()).norm(), 1e-9);
}

TEST(RigidFromCorrespondences, RejectsDegenerateConfigurations) {
  std::vector<std::pair<Vec3, Vec3>> two = {{Vec3(0, 0, 0), Vec3(0, 0, 0)},
                                            {Vec3(1, 0, 0), Vec3(1, 0, 0)}};
  EXPECT_THROW(rigid_from_correspondences(two), std::invalid_argument);
  std::vector<std::pair<Vec3, Vec3>> collinear;
  for (int i = 0; i < 10; ++i)
    collinear.emplace_back(Vec3(i, 2.0 * i, -i), Vec3(i, 2.0 * i, -i));
  EXPECT_THROW(rigid_from_correspondences(collinear), std::invalid_argument);
  std::vector<std::pair<Vec3, Vec3>> coincident(5, {Vec3(1, 2, 3), Vec3(1, 2, 3)});
  EXPECT_THROW(rigid_from_correspondences(coincident), std::invalid_argument);
}

TEST(RigidFromCorrespondences, AlwaysProperRotation) {
  std::mt19937 rng(6);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::pair<Vec3, Vec3>> pairs;
    for (int i = 0; i < 8; ++i)
      pairs.emplace_back(Vec3(u(rng), u(rng), u(rng)), Vec3(u(rng), u(rng), u(rng)));
    const RigidTransform t = rigid_from_correspondences(pairs);
    EXPECT_NEAR(t.rotation().determinant(), 1.0, 1e-9);
  }
}

TEST(RansacIcp, SelfRegistrationIsIdentity) {
  const PointCloud cloud = phantom_cloud();
  const RegistrationResult r = ransac_icp(cloud, cloud);
  EXPECT_LT(rotation_angle(r.transform.rotation()), 1e-6);
  EXPECT_LT(r.transform.translation().norm(), 1e-6);
  EXPECT_LT(r.inlier_rmse, 1e-9);
  EXPECT_DOUBLE_EQ(r.inlier_fraction, 1.0);
}

TEST(RansacIcp, RecoversSmallKnownTransform) {
  const PointCloud source = phantom_cloud();
  const RigidTransform truth = small_transform(3.0, 1.0);
  PointCloud target;
  for (const Vec3& p : source.points) target.points.push_back(truth * p);
  const RegistrationResult r = ransac_icp(source, target);
  EXPECT_LT(rotation_angle(r.transform.rotation() * truth.rotation().transpose()),
            0.1 * M_PI / 180.0);
  EXPECT_LT((r.transform.translation() - truth.translation()).norm(), 0.05);
}

TEST(RansacIcp, IgnoresOneSidedAblationOutliers) {
  const PointCloud clean = phantom_cloud(5);
  const RigidTransform truth = small_transform(3.0, 1.0);
  PointCloud target;
  for (const Vec3& p : clean.points) target.points.push_back(truth * p);
  // Displace a contiguous 30% of the source 5 mm deeper, like carved tissue.
  PointCloud source = clean;
  const size_t displaced_from = source.points.size() * 7 / 10;
  for (size_t i = displaced_from; i < source.points.size(); ++i)
    source.points[i] += Vec3(0, 0, 5.0);
  const RegistrationResult r = ransac_icp(source, target);
  EXPECT_LT(rotation_angle(r.transform.rotation() * truth.rotation().transpose()),
            0.5 * M_PI / 180.0);
  EXPECT_LT((r.transform.translation() - truth.translation()).norm(), 0.2);
  // The displaced points cannot be inliers at the default 1 mm threshold.
  EXPECT_LT(r.inlier_fraction, 0.75);
  EXPECT_GT(r.inlier_fraction, 0.5);
}

TEST(RansacIcp, TransformEquivariantOnCleanData) {
  const PointCloud source = phantom_cloud(9);
  const RigidTransform truth = small_transform(2.0, 0.8);
  PointCloud target;
  for (const Vec3& p : source.points) target.points.push_back(truth * p);
  const RigidTransform g = small_transform(1.5, 0.5);
  PointCloud moved;
  for (const Vec3& p : source.points) moved.points.push_back(g * p);
  const RegistrationResult direct = ransac_icp(source, target);
  const RegistrationResult via = ransac_icp(moved, target);
  const RigidTransform expected = direct.transform * g.inverse();
  EXPECT_LT(rotation_angle(via.transform.rotation() * expected.rotation().transpose()), 2e-3);
  EXPECT_LT((via.transform.translation() - expected.translation()).norm(), 2e-2);
}

TEST(RansacIcp, NoConsensusOnUnrelatedClouds) {
  std::mt19937 rng(8);
  std::uniform_real_distribution<double> u(0.0, 100.0);
  PointCloud a, b;
  for (int i = 0; i < 300; ++i) {
    a.points.emplace_back(u(rng), u(rng), u(rng));
    b.points.emplace_back(u(rng), u(rng), u(rng));
  }
  EXPECT_THROW(ransac_icp(a, b), RegistrationError);
}

TEST(RansacIcp, RejectsTinyClouds) {
  PointCloud small;
  for (int i = 0; i < 50; ++i) small.points.emplace_back(i, 0.5 * i, 2.0 * i);
  EXPECT_THROW(ransac_icp(small, small), std::invalid_argument);
}

TEST(RansacIcp, DeterministicUnderSeed) {
  const PointCloud source = phantom_cloud(6);
  const RigidTransform truth = small_transform(2.5, 0.7);
  PointCloud target;
  for (const Vec3& p : source.points) target.points.push_back(truth * p);
  const RegistrationResult a = ransac_icp(source, target);
  const RegistrationResult b = ransac_icp(source, target);
  EXPECT_EQ(a.transform.matrix(), b.transform.matrix());
  EXPECT_EQ(a.inlier_rmse, b.inlier_rmse);
}

TEST(KdTree, NearestMatchesBruteForce) {
  std::mt19937 rng(12);
  std::uniform_real_distribution<double> u(-10.0, 10.0);
  std::vector<Vec3> points;
  for (int i = 0; i < 500; ++i) points.emplace_back(u(rng), u(rng), u(rng));
  const KdTree3 tree(points);
  for (int q = 0; q < 200; ++q) {
    const Vec3 query(u(rng), u(rng), u(rng));
    int best = -1;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < points.size(); ++i) {
      const double d2 = (points[i] - query).squaredNorm();
      if (d2 < best_d2) {
        best_d2 = d2;
        best = static_cast<int>(i);
      }
    }
    const auto nn = tree.nearest(query);
    EXPECT_EQ(nn.index, best);
    EXPECT_DOUBLE_EQ(nn.squared_distance, best_d2);
  }
}
