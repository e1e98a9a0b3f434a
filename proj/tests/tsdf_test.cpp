#include "voxcarve/tsdf_volume.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "voxcarve/marching_cubes_tables.hpp"

using namespace voxcarve;

namespace {

CameraIntrinsics test_camera(int w = 100, int h = 100) {
  CameraIntrinsics K;
  K.fx = K.fy = 100.0;
  K.cx = 0.5 * (w - 1);
  K.cy = 0.5 * (h - 1);
  K.width = w;
  K.height = h;
  return K;
}

// Independent batch fusion oracle: per voxel, collect every frame's clamped
// normalized distance by the stated rule and form the weighted mean (Eq. 2
// style), without going through integrate_frame.
void batch_fusion_oracle(const TsdfVolume& shape, std::span<const CameraFrame> frames,
                         const CameraIntrinsics& K, std::vector<double>& d_out,
                         std::vector<double>& w_out) {
  d_out.assign(shape.voxel_count(), 1.0);
  w_out.assign(shape.voxel_count(), 0.0);
  for (int z = 0; z < shape.dims().z(); ++z)
    for (int y = 0; y < shape.dims().y(); ++y)
      for (int x = 0; x < shape.dims().x(); ++x) {
        const Vec3 center = shape.voxel_center(x, y, z);
        double acc = 0.0;
        double wsum = 0.0;
        for (const CameraFrame& f : frames) {
          const Vec3 xc = f.pose * center;
          if (!(xc.z() > 0.0)) continue;
          const int px = round_pixel(K.fx * xc.x() / xc.z() + K.cx);
          const int py = round_pixel(K.fy * xc.y() / xc.z() + K.cy);
          if (px < 0 || px >= K.width || py < 0 || py >= K.height) continue;
          if (!f.depth.valid_at(px, py)) continue;
          double d = (f.depth.at(px, py) - xc.z()) / shape.truncation();
          if (d < -1.0) continue;
          d = std::min(1.0, d);
          acc += d;
          wsum += 1.0;
        }
        const size_t i = shape.index(x, y, z);
        if (wsum > 0.0) {
          d_out[i] = acc / wsum;
          w_out[i] = wsum;
        }
      }
}

std::vector<CameraFrame> random_frames(int n, const CameraIntrinsics& K, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> jitter(-0.05, 0.05);
  std::uniform_real_distribution<float> depth_dist(8.0f, 12.0f);
  std::uniform_real_distribution<double> drop(0.0, 1.0);
  std::vector<CameraFrame> frames;
  for (int i = 0; i < n; ++i) {
    CameraFrame f;
    f.depth = DepthMap(K.width, K.height, 0.0f);
    for (int y = 0; y < K.height; ++y)
      for (int x = 0; x < K.width; ++x)
        if (drop(rng) > 0.1) f.depth.at(x, y) = depth_dist(rng);
    const Eigen::AngleAxisd rot(jitter(rng), Vec3(jitter(rng), jitter(rng), 1.0).normalized());
    f.pose = RigidTransform(rot.toRotationMatrix(), Vec3(jitter(rng), jitter(rng), 10.0 * jitter(rng)));
    frames.push_back(std::move(f));
  }
  return frames;
}

}  // namespace

TEST(TsdfVolume, ConstructionAndSpan) {
  const TsdfVolume v(Eigen::Vector3i(64, 64, 64), Vec3::Zero(), 0.5, 1.0);
  // 64 voxels at 0.5 mm spacing span 32 mm per axis.
  EXPECT_DOUBLE_EQ(v.dims().x() * v.voxel_size(), 32.0);
  for (size_t i = 0; i < v.voxel_count(); i += 9973) {
    EXPECT_EQ(v.d(i), 1.0f);
    EXPECT_EQ(v.w(i), 0.0f);
  }
  EXPECT_NO_THROW(TsdfVolume(Eigen::Vector3i(2, 2, 2), Vec3::Zero(), 1.0, 1.0));
}

TEST(TsdfVolume, RejectsBadParameters) {
  EXPECT_THROW(TsdfVolume(Eigen::Vector3i(2, 2, 2), Vec3::Zero(), 0.0, 1.0), std::invalid_argument);
  EXPECT_THROW(TsdfVolume(Eigen::Vector3i(2, 2, 2), Vec3::Zero(), 1.0, 0.0), std::invalid_argument);
  EXPECT_THROW(TsdfVolume(Eigen::Vector3i(1, 2, 2), Vec3::Zero(), 1.0, 1.0), std::invalid_argument);
}

TEST(IntegrateFrame, OnSurfaceVoxel) {
  TsdfVolume v(Eigen::Vector3i(2, 2, 2), Vec3(0, 0, 10), 1.0, 1.0);
  const CameraIntrinsics K = test_camera();
  integrate_frame(v, DepthMap::constant(K.width, K.height, 10.0f), RigidTransform::identity(), K,
                  WeightImage::ones(K.width, K.height));
  const size_t i = v.index(0, 0, 0);  // voxel center (0,0,10): d* = 10 - 10 = 0
  EXPECT_FLOAT_EQ(v.d(i), 0.0f);
  EXPECT_FLOAT_EQ(v.w(i), 1.0f);
}

TEST(IntegrateFrame, PositiveDistanceClampsToOne) {
  // z_c = 8, M = 10: d* = 2 mm, d = min(1, 2) = 1.
  TsdfVolume v(Eigen::Vector3i(2, 2, 2), Vec3(0, 0, 8), 1.0, 1.0);
  const CameraIntrinsics K = test_camera();
  integrate_frame(v, DepthMap::constant(K.width, K.height, 10.0f), RigidTransform::identity(), K,
                  WeightImage::ones(K.width, K.height));
  const size_t i = v.index(0, 0, 0);
  EXPECT_FLOAT_EQ(v.d(i), 1.0f);
  EXPECT_FLOAT_EQ(v.w(i), 1.0f);
}

TEST(IntegrateFrame, IncrementalRuleMatchesDirectSubstitution) {
  // Prior (W=3, D=0.5), new observation d = -0.25 at weight 1:
  // D = (3*0.5 - 0.25) / 4 = 0.3125, W = 4.
  TsdfVolume v(Eigen::Vector3i(2, 2, 2), Vec3(0, 0, 10.25), 1.0, 1.0);
  const size_t i = v.index(0, 0, 0);
  v.d(i) = 0.5f;
  v.w(i) = 3.0f;
  const CameraIntrinsics K = test_camera();
  integrate_frame(v, DepthMap::constant(K.width, K.height, 10.0f), RigidTransform::identity(), K,
                  WeightImage::ones(K.width, K.height));
  EXPECT_FLOAT_EQ(v.d(i), 0.3125f);
  EXPECT_FLOAT_EQ(v.w(i), 4.0f);
}

TEST(IntegrateFrame, ZeroWeightIsBitExactNoOp) {
  const CameraIntrinsics K = test_camera();
  TsdfVolume v(Eigen::Vector3i(8, 8, 8), Vec3(-2, -2, 8), 0.5, 1.0);
  integrate_frame(v, DepthMap::constant(K.width, K.height, 9.0f), RigidTransform::identity(), K,
                  WeightImage::ones(K.width, K.height));
  const std::vector<float> d_before = v.d_data();
  const std::vector<float> w_before = v.w_data();
  integrate_frame(v, DepthMap::constant(K.width, K.height, 11.0f), RigidTransform::identity(), K,
                  WeightImage::zeros(K.width, K.height));
  EXPECT_EQ(v.d_data(), d_before);
  EXPECT_EQ(v.w_data(), w_before);
}

TEST(IntegrateFrame, DeepBehindSurfaceIsSkipped) {
  // Voxel 3 mm behind the observed surface (d = -3 < -1) must stay untouched.
  TsdfVolume v(Eigen::Vector3i(2, 2, 2), Vec3(0, 0, 13), 1.0, 1.0);
  const CameraIntrinsics K = test_camera();
  integrate_frame(v, DepthMap::constant(K.width, K.height, 10.0f), RigidTransform::identity(), K,
                  WeightImage::ones(K.width, K.height));
  const size_t i = v.index(0, 0, 0);
  EXPECT_EQ(v.d(i), 1.0f);
  EXPECT_EQ(v.w(i), 0.0f);
}

TEST(IntegrateFrame, WeightCapKeepsLateFramesInfluential) {
  TsdfVolume v(Eigen::Vector3i(2, 2, 2), Vec3(0, 0, 10), 1.0, 1.0);
  const CameraIntrinsics K = test_camera();
  const DepthMap depth = DepthMap::constant(K.width, K.height, 10.0f);
  const WeightImage ones = WeightImage::ones(K.width, K.height);
  IntegrateOptions opts;
  opts.weight_cap = 16.0f;
  for (int i = 0; i < 40; ++i) integrate_frame(v, depth, RigidTransform::identity(), K, ones, opts);
  EXPECT_FLOAT_EQ(v.w(v.index(0, 0, 0)), 16.0f);
}

TEST(IntegrateSequence, TwoFrameMeanMatchesEqTwo) {
  // Two frames with d = 0.2 and d = 0.4 at the voxel: mean 0.3, W = 2.
  TsdfVolume v(Eigen::Vector3i(2, 2, 2), Vec3(0, 0, 10), 1.0, 1.0);
  const CameraIntrinsics K = test_camera();
  std::vector<CameraFrame> frames;
  frames.push_back({DepthMap::constant(K.width, K.height, 10.2f), RigidTransform::identity()});
  frames.push_back({DepthMap::constant(K.width, K.height, 10.4f), RigidTransform::identity()});
  integrate_sequence(v, frames, K);
  const size_t i = v.index(0, 0, 0);
  EXPECT_NEAR(v.d(i), 0.3f, 1e-6);
  EXPECT_FLOAT_EQ(v.w(i), 2.0f);
}

TEST(IntegrateSequence, BatchMeanEqualsIncrementalFold) {
  const CameraIntrinsics K = test_camera(48, 36);
  const std::vector<CameraFrame> frames = random_frames(12, K, 31);
  TsdfVolume v(Eigen::Vector3i(12, 12, 10), Vec3(-2.5, -2.5, 7.5), 0.5, 1.0);
  integrate_sequence(v, frames, K);
  std::vector<double> d_ref, w_ref;
  batch_fusion_oracle(v, frames, K, d_ref, w_ref);
  for (size_t i = 0; i < v.voxel_count(); ++i) {
    EXPECT_NEAR(v.d(i), d_ref[i], 1e-6);
    EXPECT_NEAR(v.w(i), w_ref[i], 1e-6);
  }
}

TEST(IntegrateSequence, OrderIndependent) {
  const CameraIntrinsics K = test_camera(48, 36);
  std::vector<CameraFrame> frames = random_frames(10, K, 77);
  TsdfVolume a(Eigen::Vector3i(12, 12, 10), Vec3(-2.5, -2.5, 7.5), 0.5, 1.0);
  integrate_sequence(a, frames, K);
  std::mt19937 rng(5);
  std::shuffle(frames.begin(), frames.end(), rng);
  TsdfVolume b(Eigen::Vector3i(12, 12, 10), Vec3(-2.5, -2.5, 7.5), 0.5, 1.0);
  integrate_sequence(b, frames, K);
  for (size_t i = 0; i < a.voxel_count(); ++i) {
    EXPECT_NEAR(a.d(i), b.d(i), 1e-5);
    EXPECT_NEAR(a.w(i), b.w(i), 1e-5);
  }
}

TEST(IntegrateSequence, ValuesStayClampedAndWeightsGrow) {
  const CameraIntrinsics K = test_camera(48, 36);
  const std::vector<CameraFrame> frames = random_frames(8, K, 99);
  TsdfVolume v(Eigen::Vector3i(12, 12, 10), Vec3(-2.5, -2.5, 7.5), 0.5, 1.0);
  std::vector<float> prev_w(v.voxel_count(), 0.0f);
  for (const CameraFrame& f : frames) {
    integrate_frame(v, f.depth, f.pose, K, WeightImage::ones(K.width, K.height));
    for (size_t i = 0; i < v.voxel_count(); ++i) {
      EXPECT_GE(v.d(i), -1.0f);
      EXPECT_LE(v.d(i), 1.0f);
      EXPECT_GE(v.w(i), prev_w[i]);
      prev_w[i] = v.w(i);
    }
  }
}

TEST(IntegrateFrame, RejectsDimensionMismatch) {
  TsdfVolume v(Eigen::Vector3i(2, 2, 2), Vec3::Zero(), 1.0, 1.0);
  const CameraIntrinsics K = test_camera();
  EXPECT_THROW(integrate_frame(v, DepthMap(10, 10, 1.0f), RigidTransform::identity(), K,
                               WeightImage::ones(10, 10)),
               std::invalid_argument);
  EXPECT_THROW(integrate_frame(v, DepthMap(K.width, K.height, 1.0f), RigidTransform::identity(), K,
                               WeightImage::ones(10, 10)),
               std::invalid_argument);
}

TEST(MarchingCubesTables, EdgeTableMatchesTriangleTable) {
  using namespace voxcarve::detail;
  for (int c = 0; c < 256; ++c) {
    std::uint16_t used = 0;
    for (int k = 0; kTriTable[c][k] != -1; ++k) used |= static_cast<std::uint16_t>(1u << kTriTable[c][k]);
    EXPECT_EQ(used, kEdgeTable[c]) << "case " << c;
    EXPECT_EQ(kEdgeTable[c], kEdgeTable[255 - c]) << "case " << c;
  }
}

TEST(ExtractMesh, SphereVerticesLieOnSphere) {
  const double radius = 10.0;
  TsdfVolume v(Eigen::Vector3i(48, 48, 48), Vec3(-11.75, -11.75, -11.75), 0.5, 1.0);
  for (int z = 0; z < 48; ++z)
    for (int y = 0; y < 48; ++y)
      for (int x = 0; x < 48; ++x) {
        const size_t i = v.index(x, y, z);
        v.d(i) = static_cast<float>(std::clamp(v.voxel_center(x, y, z).norm() - radius, -1.0, 1.0));
        v.w(i) = 1.0f;
      }
  const TriangleMesh mesh = extract_mesh(v, 1.0f);
  ASSERT_GT(mesh.vertices.size(), 1000u);
  double worst = 0.0;
  for (const Vec3& vert : mesh.vertices) worst = std::max(worst, std::abs(vert.norm() - radius));
  EXPECT_LT(worst, 0.5);
  for (const auto& t : mesh.triangles) {
    EXPECT_NE(t[0], t[1]);
    EXPECT_NE(t[1], t[2]);
    for (const int vi : t) {
      EXPECT_GE(vi, 0);
      EXPECT_LT(vi, static_cast<int>(mesh.vertices.size()));
    }
  }
}

TEST(ExtractMesh, UnobservedVolumeGivesEmptyMesh) {
  const TsdfVolume v(Eigen::Vector3i(16, 16, 16), Vec3::Zero(), 1.0, 1.0);
  EXPECT_TRUE(extract_mesh(v, 1.0f).empty());
}

TEST(ExtractMesh, NoZeroCrossingGivesEmptyMesh) {
  TsdfVolume v(Eigen::Vector3i(16, 16, 16), Vec3::Zero(), 1.0, 1.0);
  std::fill(v.w_data().begin(), v.w_data().end(), 1.0f);  // observed, all D = 1
  EXPECT_TRUE(extract_mesh(v, 1.0f).empty());
}

TEST(TsdfVolume, TrilinearSampleInterpolates) {
  TsdfVolume v(Eigen::Vector3i(4, 4, 4), Vec3::Zero(), 1.0, 1.0);
  for (int z = 0; z < 4; ++z)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) {
        v.d(v.index(x, y, z)) = static_cast<float>(0.1 * x);
        v.w(v.index(x, y, z)) = 1.0f;
      }
  const auto s = v.sample(Vec3(1.5, 1.0, 1.0));
  ASSERT_TRUE(s.has_value());
  EXPECT_NEAR(*s, 0.15, 1e-6);
  EXPECT_FALSE(v.sample(Vec3(-1, 0, 0)).has_value());
  v.w(v.index(2, 1, 1)) = 0.0f;
  EXPECT_FALSE(v.sample(Vec3(1.5, 1.0, 1.0)).has_value());
}
