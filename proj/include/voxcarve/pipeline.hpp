#pragma once

// Orchestration of the whole update loop: preoperative model construction,
// sequential per-bite masked updates, dataset manifest handling, synthetic
// dataset generation, and the progression runner backing the CLI. Each update
// step renders the previous model at the step's poses, detects per-frame
// change masks, and integrates the registered depths with the masks as
// integration weights, so unchanged regions keep their exact prior state.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "voxcarve/change_detection.hpp"
#include "voxcarve/evaluation.hpp"
#include "voxcarve/geometry.hpp"
#include "voxcarve/io.hpp"
#include "voxcarve/phantom.hpp"
#include "voxcarve/registration.hpp"
#include "voxcarve/render.hpp"
#include "voxcarve/tsdf_volume.hpp"

namespace voxcarve {

enum class DepthSource { kRenderedGroundTruth, kEstimated };

inline std::string to_string(DepthSource s) {
  return s == DepthSource::kRenderedGroundTruth ? "rendered-ground-truth" : "estimated";
}

inline DepthSource depth_source_from_string(const std::string& s) {
  if (s == "rendered-ground-truth") return DepthSource::kRenderedGroundTruth;
  if (s == "estimated") return DepthSource::kEstimated;
  throw std::invalid_argument("unknown depth_source: " + s);
}

// One intraoperative stage: the frames captured right after a tissue fragment
// was removed, posed in the preoperative frame.
struct SurgicalStep {
  int index = 0;
  std::vector<CameraFrame> frames;
  DepthSource depth_source = DepthSource::kEstimated;
};

struct UpdateConfig {
  double voxel_size = 0.5;        // mm
  double truncation = 1.0;        // mm
  double change_threshold = 1.0;  // mm
  float min_weight = 1.0f;
  float weight_cap = 255.0f;
  bool reset_changed_weights = false;  // off = paper-faithful Eq.3 accumulation
  bool mask_open = true;
  bool use_icp = true;  // false: per-frame scale normalization only
  std::uint64_t seed = 0;
  std::optional<int> sequence_length;  // truncates intraoperative sequences
  RegistrationParams registration;     // inlier_threshold defaults to 2 * voxel_size

  void validate() const {
    if (!(voxel_size > 0.0) || !(truncation > 0.0) || !(change_threshold > 0.0) ||
        !(min_weight >= 0.0f) || !(weight_cap > 0.0f))
      throw std::invalid_argument("update config: all sizes must be positive");
    if (sequence_length && *sequence_length < 1)
      throw std::invalid_argument("update config: sequence_length must be >= 1");
  }

  ChangeDetectionParams change_params() const {
    ChangeDetectionParams p;
    p.threshold = change_threshold;
    p.mask_open = mask_open;
    p.use_icp = use_icp;
    p.registration = registration;
    return p;
  }
};

// Fresh volume sized to the frames' visual hull plus margin, fused with
// all-ones weights (Eq. 2 with w_i = 1).
inline TsdfVolume build_preop(std::span<const CameraFrame> frames, const CameraIntrinsics& K,
                              const UpdateConfig& config) {
  config.validate();
  if (frames.empty()) throw std::invalid_argument("build_preop: no frames");
  Eigen::AlignedBox3d hull;
  for (const CameraFrame& f : frames) {
    const PointCloud cloud = depth_to_pointcloud(f.depth, f.pose, K);
    for (const Vec3& p : cloud.points) hull.extend(p);
  }
  if (hull.isEmpty()) throw std::invalid_argument("build_preop: no valid depth in any frame");
  // 10% hull margin, and at least the truncation band.
  const Vec3 margin = (0.05 * hull.sizes()).cwiseMax(config.truncation + config.voxel_size);
  const Vec3 origin = hull.min() - margin;
  const Vec3 span = hull.max() + margin - origin;
  Eigen::Vector3i dims;
  for (int a = 0; a < 3; ++a)
    dims[a] = std::max(2, static_cast<int>(std::ceil(span[a] / config.voxel_size)) + 1);
  TsdfVolume v(dims, origin, config.voxel_size, config.truncation);
  IntegrateOptions opts;
  opts.weight_cap = config.weight_cap;
  integrate_sequence(v, frames, K, {}, opts);
  return v;
}

// Everything observable about one update step, for inspection and artifacts.
struct StepTrace {
  std::vector<int> frame_indices;          // frames that survived registration
  std::vector<ChangeMask> masks;           // aligned with frame_indices
  std::vector<RegistrationResult> registrations;
  std::vector<double> imputed_fractions;
  std::vector<std::string> warnings;
  std::vector<std::uint8_t> touched;       // voxels that received weight
};

// Applies one surgical step to the model in place (Eq. 1): render the current
// surface at the step's poses, detect change masks, and integrate each
// registered depth with its mask as the weight image (Eq. 3 with w = m).
inline void update_step(TsdfVolume& v, const SurgicalStep& step, const CameraIntrinsics& K,
                        const UpdateConfig& config, StepTrace* trace = nullptr) {
  config.validate();
  std::span<const CameraFrame> frames(step.frames);
  if (config.sequence_length && static_cast<int>(frames.size()) > *config.sequence_length)
    frames = frames.first(static_cast<size_t>(*config.sequence_length));
  if (frames.empty()) throw std::invalid_argument("update_step: step has no frames");

  const TriangleMesh model_mesh = extract_mesh(v, config.min_weight);
  if (model_mesh.empty()) throw std::runtime_error("update_step: current model has no surface");

  ChangeDetectionParams params = config.change_params();
  params.registration.seed = config.seed + static_cast<std::uint64_t>(step.index) * 1000003ull;
  std::vector<std::string> warnings;
  std::vector<FrameChange> changes = process_sequence(frames, model_mesh, K, params, &warnings);
  if (changes.empty())
    throw std::runtime_error("update_step: every frame failed registration");

  std::vector<std::uint8_t> touched(v.voxel_count(), 0);
  IntegrateOptions opts;
  opts.weight_cap = config.weight_cap;
  opts.touched = &touched;
  opts.reset_on_first_touch = config.reset_changed_weights;
  for (const FrameChange& change : changes) {
    integrate_frame(v, change.aligned.registered_depth, frames[change.frame_index].pose, K,
                    change.mask.to_weight_image(), opts);
  }

  if (trace) {
    for (FrameChange& change : changes) {
      trace->frame_indices.push_back(change.frame_index);
      trace->masks.push_back(std::move(change.mask));
      trace->registrations.push_back(change.aligned.registration);
      trace->imputed_fractions.push_back(change.aligned.imputed_fraction);
    }
    trace->warnings = std::move(warnings);
    trace->touched = std::move(touched);
  }
}

// ---------------------------------------------------------------------------
// Dataset manifest

struct ManifestFrame {
  std::string depth_file;     // primary depth per the step's depth_source
  std::string gt_depth_file;  // clean render, when available
  Mat4 pose = Mat4::Identity();
};

struct ManifestStep {
  int index = 0;
  DepthSource depth_source = DepthSource::kEstimated;
  std::vector<ManifestFrame> frames;
};

struct ManifestGroundTruth {
  std::vector<std::string> step_meshes;  // [0] = preop, [k] = after bite k
  std::vector<Mat4> eval_poses;
  std::vector<Mat4> unchanged_poses;
  std::vector<std::pair<Vec3, Vec3>> markers;  // (gt, reference)
  std::vector<Bite> bites;
};

struct DatasetManifest {
  CameraIntrinsics camera;
  ManifestStep preop;
  std::vector<ManifestStep> bite_steps;
  std::optional<ManifestGroundTruth> ground_truth;
  std::filesystem::path root;  // directory the relative paths resolve against

  std::filesystem::path resolve(const std::string& rel) const { return root / rel; }
};

namespace detail {

inline nlohmann::json mat4_to_json(const Mat4& m) {
  nlohmann::json a = nlohmann::json::array();
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) a.push_back(m(r, c));
  return a;
}

inline Mat4 mat4_from_json(const nlohmann::json& a, const std::string& where) {
  if (!a.is_array() || a.size() != 16)
    throw std::invalid_argument("manifest: " + where + ": pose must be 16 row-major numbers");
  Mat4 m;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) m(r, c) = a[static_cast<size_t>(r) * 4 + c].get<double>();
  return m;
}

inline nlohmann::json vec3_to_json(const Vec3& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); }

inline Vec3 vec3_from_json(const nlohmann::json& a, const std::string& where) {
  if (!a.is_array() || a.size() != 3)
    throw std::invalid_argument("manifest: " + where + ": expected 3 numbers");
  return Vec3(a[0].get<double>(), a[1].get<double>(), a[2].get<double>());
}

inline nlohmann::json step_to_json(const ManifestStep& step) {
  nlohmann::json j;
  j["index"] = step.index;
  j["depth_source"] = to_string(step.depth_source);
  j["frames"] = nlohmann::json::array();
  for (const ManifestFrame& f : step.frames) {
    nlohmann::json jf;
    jf["depth_file"] = f.depth_file;
    if (!f.gt_depth_file.empty()) jf["gt_depth_file"] = f.gt_depth_file;
    jf["pose"] = mat4_to_json(f.pose);
    j["frames"].push_back(std::move(jf));
  }
  return j;
}

inline ManifestStep step_from_json(const nlohmann::json& j, const std::string& where) {
  ManifestStep step;
  step.index = j.at("index").get<int>();
  step.depth_source = depth_source_from_string(j.at("depth_source").get<std::string>());
  const auto& frames = j.at("frames");
  if (!frames.is_array() || frames.empty())
    throw std::invalid_argument("manifest: " + where + ": step needs at least one frame");
  for (size_t i = 0; i < frames.size(); ++i) {
    const auto& jf = frames[i];
    ManifestFrame f;
    f.depth_file = jf.at("depth_file").get<std::string>();
    if (jf.contains("gt_depth_file")) f.gt_depth_file = jf.at("gt_depth_file").get<std::string>();
    f.pose = mat4_from_json(jf.at("pose"), where + ".frames[" + std::to_string(i) + "]");
    step.frames.push_back(std::move(f));
  }
  return step;
}

}  // namespace detail

inline void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  nlohmann::json j;
  j["camera"] = {{"fx", m.camera.fx},       {"fy", m.camera.fy},     {"cx", m.camera.cx},
                 {"cy", m.camera.cy},       {"width", m.camera.width}, {"height", m.camera.height}};
  j["pose_convention"] = "world_to_camera";
  j["units"] = "mm";
  j["preop"] = detail::step_to_json(m.preop);
  j["bites"] = nlohmann::json::array();
  for (const ManifestStep& s : m.bite_steps) j["bites"].push_back(detail::step_to_json(s));
  if (m.ground_truth) {
    nlohmann::json g;
    g["step_meshes"] = m.ground_truth->step_meshes;
    g["eval_poses"] = nlohmann::json::array();
    for (const Mat4& p : m.ground_truth->eval_poses) g["eval_poses"].push_back(detail::mat4_to_json(p));
    g["unchanged_poses"] = nlohmann::json::array();
    for (const Mat4& p : m.ground_truth->unchanged_poses)
      g["unchanged_poses"].push_back(detail::mat4_to_json(p));
    g["markers"] = nlohmann::json::array();
    for (const auto& [gt, ref] : m.ground_truth->markers)
      g["markers"].push_back({{"gt", detail::vec3_to_json(gt)}, {"ref", detail::vec3_to_json(ref)}});
    g["bites"] = nlohmann::json::array();
    for (const Bite& b : m.ground_truth->bites)
      g["bites"].push_back({{"center", detail::vec3_to_json(b.center)}, {"radius", b.radius}});
    j["ground_truth"] = std::move(g);
  }
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f << j.dump(2) << "\n";
  if (!f) throw IoError("write failed: " + path.string());
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);  // parse errors carry byte offsets
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("manifest " + path.string() + ": " + e.what());
  }
  DatasetManifest m;
  m.root = path.parent_path();
  try {
    const auto& cam = j.at("camera");
    m.camera.fx = cam.at("fx").get<double>();
    m.camera.fy = cam.at("fy").get<double>();
    m.camera.cx = cam.at("cx").get<double>();
    m.camera.cy = cam.at("cy").get<double>();
    m.camera.width = cam.at("width").get<int>();
    m.camera.height = cam.at("height").get<int>();
    m.camera.validate();
    m.preop = detail::step_from_json(j.at("preop"), "preop");
    const auto& bites = j.at("bites");
    if (!bites.is_array() || bites.empty())
      throw std::invalid_argument("manifest: needs at least one bite step");
    for (size_t k = 0; k < bites.size(); ++k)
      m.bite_steps.push_back(detail::step_from_json(bites[k], "bites[" + std::to_string(k) + "]"));
    if (j.contains("ground_truth")) {
      const auto& g = j.at("ground_truth");
      ManifestGroundTruth gt;
      gt.step_meshes = g.at("step_meshes").get<std::vector<std::string>>();
      if (gt.step_meshes.size() != m.bite_steps.size() + 1)
        throw std::invalid_argument("manifest: ground_truth.step_meshes must cover preop + every bite");
      for (const auto& p : g.at("eval_poses")) gt.eval_poses.push_back(detail::mat4_from_json(p, "eval_poses"));
      for (const auto& p : g.at("unchanged_poses"))
        gt.unchanged_poses.push_back(detail::mat4_from_json(p, "unchanged_poses"));
      for (const auto& mk : g.at("markers"))
        gt.markers.emplace_back(detail::vec3_from_json(mk.at("gt"), "markers.gt"),
                                detail::vec3_from_json(mk.at("ref"), "markers.ref"));
      if (g.contains("bites"))
        for (const auto& b : g.at("bites"))
          gt.bites.push_back(Bite{detail::vec3_from_json(b.at("center"), "bites.center"),
                                  b.at("radius").get<double>()});
      m.ground_truth = std::move(gt);
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("manifest " + path.string() + ": " + e.what());
  }
  return m;
}

// Loads a step's frames from disk. With use_gt_depth, the clean renders are
// loaded instead of the primary depth files (depth-estimator ablation).
inline SurgicalStep load_step(const DatasetManifest& m, const ManifestStep& step, bool use_gt_depth,
                              std::optional<int> limit = std::nullopt) {
  SurgicalStep out;
  out.index = step.index;
  out.depth_source = use_gt_depth ? DepthSource::kRenderedGroundTruth : step.depth_source;
  size_t n = step.frames.size();
  if (limit && static_cast<size_t>(*limit) < n) n = static_cast<size_t>(*limit);
  for (size_t i = 0; i < n; ++i) {
    const ManifestFrame& f = step.frames[i];
    const std::string& file = use_gt_depth && !f.gt_depth_file.empty() ? f.gt_depth_file : f.depth_file;
    if (use_gt_depth && f.gt_depth_file.empty() && step.depth_source == DepthSource::kEstimated)
      throw std::invalid_argument("manifest: step " + std::to_string(step.index) +
                                  " has no ground-truth depth files");
    CameraFrame frame;
    frame.depth = read_pfm(m.resolve(file));
    frame.pose = RigidTransform::from_matrix(f.pose);
    out.frames.push_back(std::move(frame));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic dataset generation

struct SynthParams {
  int width = 160, height = 120;
  double focal = 140.0;  // fx = fy, pixels
  int frames_per_step = 80;
  int n_bites = 5;
  int n_eval_poses = 5;
  int n_unchanged_poses = 3;
  double corridor_radius = 8.0;   // mm
  double corridor_length = 45.0;  // mm
  double bite_radius_min = 2.0, bite_radius_max = 3.0;  // mm
  double gt_mesh_voxel = 0.25;    // mm; half the default fusion voxel
  NoiseModel noise{0.7, 1.3, 0.3, 0.5, 320.0, 0};  // long-period bias: per-frame near-rigid ramps
  std::uint64_t seed = 0;

  CameraIntrinsics camera() const {
    CameraIntrinsics K;
    K.fx = K.fy = focal;
    K.cx = 0.5 * (width - 1);
    K.cy = 0.5 * (height - 1);
    K.width = width;
    K.height = height;
    return K;
  }
};

// The successive scenes of a progression: scenes[0] is the intact corridor,
// scenes[k] has the first k bites carved.
inline std::vector<PhantomScene> synth_scenes(const SynthParams& p) {
  std::vector<PhantomScene> scenes;
  scenes.push_back(PhantomScene::corridor(p.corridor_radius, p.corridor_length));
  std::mt19937_64 rng(p.seed);
  std::uniform_real_distribution<double> jitter(-0.2, 0.2);
  std::uniform_real_distribution<double> ring(2.2, 3.2);
  std::uniform_real_distribution<double> embed(0.3, 0.6);
  std::uniform_real_distribution<double> radius(p.bite_radius_min, p.bite_radius_max);
  for (int k = 0; k < p.n_bites; ++k) {
    const double angle = 2.0 * M_PI * k / p.n_bites + jitter(rng);
    const double rho = ring(rng);
    const Vec3 center(rho * std::cos(angle), rho * std::sin(angle),
                      p.corridor_length + embed(rng));
    scenes.push_back(carve_bite(scenes.back(), center, radius(rng)));
  }
  return scenes;
}

// Writes the full dataset (depths, ground-truth meshes, manifest) and returns
// the manifest. Deterministic in (params, seed).
inline DatasetManifest synth_dataset(const std::filesystem::path& out_dir, const SynthParams& p) {
  namespace fs = std::filesystem;
  const CameraIntrinsics K = p.camera();
  K.validate();
  const std::vector<PhantomScene> scenes = synth_scenes(p);
  const Vec3 target = scenes[0].wall_center();
  const std::vector<RigidTransform> trajectory =
      gen_trajectory(scenes[0], p.frames_per_step, target, K);

  fs::create_directories(out_dir / "gt");
  DatasetManifest m;
  m.camera = K;
  m.root = out_dir;

  char name[64];
  const auto render_step = [&](const PhantomScene& scene, int step_index,
                               bool corrupt) -> ManifestStep {
    ManifestStep step;
    step.index = step_index;
    step.depth_source = corrupt ? DepthSource::kEstimated : DepthSource::kRenderedGroundTruth;
    const fs::path dir =
        out_dir / (step_index == 0 ? std::string("preop") : "bite_" + std::to_string(step_index));
    fs::create_directories(dir);
    for (int i = 0; i < p.frames_per_step; ++i) {
      const DepthMap clean = render_gt_depth(scene, trajectory[i], K);
      ManifestFrame f;
      f.pose = trajectory[i].matrix();
      if (corrupt) {
        NoiseModel noise = p.noise;
        noise.seed = p.noise.seed + static_cast<std::uint64_t>(step_index) * 100003ull +
                     static_cast<std::uint64_t>(i);
        const DepthMap corrupted = corrupt_depth(clean, noise);
        std::snprintf(name, sizeof(name), "frame_%03d.pfm", i);
        write_pfm(dir / name, corrupted);
        f.depth_file = (dir.filename() / name).string();
        std::snprintf(name, sizeof(name), "frame_%03d_gt.pfm", i);
        write_pfm(dir / name, clean);
        f.gt_depth_file = (dir.filename() / name).string();
      } else {
        std::snprintf(name, sizeof(name), "frame_%03d.pfm", i);
        write_pfm(dir / name, clean);
        f.depth_file = (dir.filename() / name).string();
      }
      step.frames.push_back(std::move(f));
    }
    return step;
  };

  m.preop = render_step(scenes[0], 0, false);
  for (int k = 1; k <= p.n_bites; ++k) m.bite_steps.push_back(render_step(scenes[k], k, true));

  ManifestGroundTruth gt;
  for (int k = 0; k <= p.n_bites; ++k) {
    const TriangleMesh mesh = mesh_scene(scenes[k], p.gt_mesh_voxel);
    std::snprintf(name, sizeof(name), "step_%d.ply", k);
    write_ply(out_dir / "gt" / name, mesh);
    gt.step_meshes.push_back((fs::path("gt") / name).string());
  }
  for (const RigidTransform& pose : gen_trajectory(scenes[0], p.n_eval_poses, target, K))
    gt.eval_poses.push_back(pose.matrix());
  // Poses viewing the unchanged side wall, for the ground-truth alignment ICP.
  for (int i = 0; i < p.n_unchanged_poses; ++i) {
    const double z = (0.35 + 0.10 * i) * p.corridor_length;
    const Vec3 center(-0.25 * p.corridor_radius, 0.1 * p.corridor_radius, z);
    const Vec3 aim(0.9 * p.corridor_radius, 0.0, z + 4.0);
    gt.unchanged_poses.push_back(look_at_pose(center, aim).matrix());
  }
  const double r = p.corridor_radius, len = p.corridor_length;
  for (const Vec3& marker : {Vec3(r, 0, 0.25 * len), Vec3(0, r, 0.42 * len), Vec3(-r, 0, 0.58 * len),
                             Vec3(0, -r, 0.33 * len), Vec3(r * M_SQRT1_2, r * M_SQRT1_2, 0.66 * len)})
    gt.markers.emplace_back(marker, marker);
  for (const Bite& b : scenes.back().bites()) gt.bites.push_back(b);
  m.ground_truth = std::move(gt);

  save_manifest(out_dir / "manifest.json", m);
  return m;
}

// ---------------------------------------------------------------------------
// Progression runner

enum class Variant { kUpdated, kDepthAblation, kRegistrationAblation };

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::kUpdated: return "updated";
    case Variant::kDepthAblation: return "depth_ablation";
    default: return "registration_ablation";
  }
}

struct ProgressionOutputs {
  std::filesystem::path out_dir;
  std::filesystem::path preop_volume_file, preop_mesh_file;
  std::map<std::string, std::vector<std::filesystem::path>> mesh_files;    // per variant
  std::map<std::string, std::vector<std::filesystem::path>> volume_files;  // per variant
  std::vector<ReportRow> report;
  std::filesystem::path report_csv_file, report_txt_file;
};

// Builds the evaluation protocol from manifest ground truth: marker + ICP
// alignment of the final ground truth to the reference, then the constant
// change bounding box around the preoperative model.
inline EvalProtocol make_protocol(const DatasetManifest& m, const TriangleMesh& preop_model_mesh,
                                  const std::vector<TriangleMesh>& gt_meshes,
                                  const UpdateConfig& config) {
  if (!m.ground_truth) throw std::invalid_argument("make_protocol: manifest has no ground truth");
  EvalProtocol protocol;
  for (const Mat4& pose : m.ground_truth->eval_poses)
    protocol.eval_poses.push_back(RigidTransform::from_matrix(pose));
  std::vector<RigidTransform> unchanged;
  for (const Mat4& pose : m.ground_truth->unchanged_poses)
    unchanged.push_back(RigidTransform::from_matrix(pose));
  const TriangleMesh& reference = gt_meshes.front();  // preoperative ground truth
  RegistrationParams reg = config.registration;
  reg.seed = config.seed;
  const auto [alignment, residual] =
      align_gt(gt_meshes.back(), reference, m.ground_truth->markers, unchanged, m.camera, reg);
  protocol.gt_alignment = alignment;
  protocol.gt_residual = residual;
  const TriangleMesh final_gt = transform_mesh(gt_meshes.back(), alignment);
  protocol.bbox = change_bbox(final_gt, preop_model_mesh, 1.0, config.change_threshold);
  protocol.validate();
  return protocol;
}

// Full Eq. 1 progression: preop fusion once, then per-variant sequential
// updates, per-step artifacts, and (with ground truth) the evaluation report.
inline ProgressionOutputs run_progression(const DatasetManifest& m, const UpdateConfig& config,
                                          const std::filesystem::path& out_dir,
                                          std::span<const Variant> variants) {
  namespace fs = std::filesystem;
  config.validate();
  fs::create_directories(out_dir);
  ProgressionOutputs out;
  out.out_dir = out_dir;

  const SurgicalStep preop = load_step(m, m.preop, false);
  const TsdfVolume preop_volume = build_preop(preop.frames, m.camera, config);
  const TriangleMesh preop_mesh = extract_mesh(preop_volume, config.min_weight);
  out.preop_volume_file = out_dir / "preop.tsdf";
  out.preop_mesh_file = out_dir / "preop_mesh.ply";
  write_volume(out.preop_volume_file, preop_volume);
  write_ply(out.preop_mesh_file, preop_mesh);

  ProgressionMeshes eval_meshes;
  eval_meshes.preop_model = preop_mesh;

  char name[64];
  for (const Variant variant : variants) {
    const std::string vname = variant_name(variant);
    const fs::path vdir = out_dir / vname;
    fs::create_directories(vdir);
    UpdateConfig vconfig = config;
    if (variant == Variant::kRegistrationAblation) vconfig.use_icp = false;
    const bool use_gt_depth = variant == Variant::kDepthAblation;

    TsdfVolume v = preop_volume;
    std::vector<std::optional<TriangleMesh>> meshes;
    for (size_t k = 0; k < m.bite_steps.size(); ++k) {
      const SurgicalStep step = load_step(m, m.bite_steps[k], use_gt_depth, config.sequence_length);
      StepTrace trace;
      update_step(v, step, m.camera, vconfig, &trace);

      const fs::path mask_dir = vdir / ("masks_step_" + std::to_string(step.index));
      fs::create_directories(mask_dir);
      for (size_t i = 0; i < trace.masks.size(); ++i) {
        std::snprintf(name, sizeof(name), "frame_%03d.pgm", trace.frame_indices[i]);
        write_pgm(mask_dir / name, trace.masks[i]);
      }

      std::snprintf(name, sizeof(name), "step_%d.tsdf", step.index);
      write_volume(vdir / name, v);
      out.volume_files[vname].push_back(vdir / name);
      TriangleMesh mesh = extract_mesh(v, config.min_weight);
      std::snprintf(name, sizeof(name), "step_%d.ply", step.index);
      write_ply(vdir / name, mesh);
      out.mesh_files[vname].push_back(vdir / name);
      meshes.push_back(std::move(mesh));
    }
    if (variant == Variant::kUpdated) eval_meshes.updated = std::move(meshes);
    if (variant == Variant::kDepthAblation) eval_meshes.depth_ablation = std::move(meshes);
    if (variant == Variant::kRegistrationAblation)
      eval_meshes.registration_ablation = std::move(meshes);
  }

  if (m.ground_truth) {
    std::vector<TriangleMesh> gt_meshes;
    for (const std::string& rel : m.ground_truth->step_meshes)
      gt_meshes.push_back(read_ply(m.resolve(rel)));
    const EvalProtocol protocol = make_protocol(m, preop_mesh, gt_meshes, config);
    for (size_t k = 1; k < gt_meshes.size(); ++k)
      eval_meshes.ground_truth.push_back(transform_mesh(gt_meshes[k], protocol.gt_alignment));
    out.report = report_table(eval_meshes, protocol, m.camera);
    out.report_csv_file = out_dir / "report.csv";
    out.report_txt_file = out_dir / "report.txt";
    std::ofstream csv(out.report_csv_file);
    csv << report_csv(out.report);
    std::ofstream txt(out.report_txt_file);
    txt << report_text(out.report);
  }
  return out;
}

// Rebuilds the evaluation report from a finished run directory; variants that
// were not run stay blank.
inline std::vector<ReportRow> evaluate_run(const DatasetManifest& m, const UpdateConfig& config,
                                           const std::filesystem::path& run_dir,
                                           EvalProtocol* protocol_out = nullptr) {
  namespace fs = std::filesystem;
  if (!m.ground_truth) throw std::invalid_argument("evaluate: manifest has no ground truth");
  const fs::path preop_mesh_file = run_dir / "preop_mesh.ply";
  if (!fs::exists(preop_mesh_file))
    throw std::invalid_argument("evaluate: missing " + preop_mesh_file.string() + " (run init/run first)");
  ProgressionMeshes meshes;
  meshes.preop_model = read_ply(preop_mesh_file);
  std::vector<TriangleMesh> gt_meshes;
  for (const std::string& rel : m.ground_truth->step_meshes) gt_meshes.push_back(read_ply(m.resolve(rel)));
  const EvalProtocol protocol = make_protocol(m, meshes.preop_model, gt_meshes, config);
  for (size_t k = 1; k < gt_meshes.size(); ++k)
    meshes.ground_truth.push_back(transform_mesh(gt_meshes[k], protocol.gt_alignment));

  const auto load_variant = [&](Variant variant) {
    std::vector<std::optional<TriangleMesh>> out;
    bool any = false;
    for (size_t k = 1; k <= m.bite_steps.size(); ++k) {
      const fs::path mesh_file =
          run_dir / variant_name(variant) / ("step_" + std::to_string(k) + ".ply");
      if (fs::exists(mesh_file)) {
        out.emplace_back(read_ply(mesh_file));
        any = true;
      } else {
        out.emplace_back(std::nullopt);
      }
    }
    if (!any) out.clear();
    return out;
  };
  meshes.updated = load_variant(Variant::kUpdated);
  meshes.depth_ablation = load_variant(Variant::kDepthAblation);
  meshes.registration_ablation = load_variant(Variant::kRegistrationAblation);
  if (protocol_out) *protocol_out = protocol;
  return report_table(meshes, protocol, m.camera);
}

}  // namespace voxcarve
