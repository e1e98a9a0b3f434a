// Command-line driver: synthesize a phantom dataset, build the preoperative
// model, apply surgical-step updates, run a full progression, extract meshes,
// and evaluate against ground truth.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "voxcarve/voxcarve.hpp"

namespace fs = std::filesystem;
using namespace voxcarve;

namespace {

UpdateConfig load_config_file(const std::string& path) {
  UpdateConfig c;
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("config " + path + ": " + e.what());
  }
  const auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("voxel_size", c.voxel_size);
  get("truncation", c.truncation);
  get("change_threshold", c.change_threshold);
  get("min_weight", c.min_weight);
  get("weight_cap", c.weight_cap);
  get("reset_changed_weights", c.reset_changed_weights);
  get("mask_open", c.mask_open);
  get("seed", c.seed);
  if (j.contains("sequence_length") && !j.at("sequence_length").is_null())
    c.sequence_length = j.at("sequence_length").get<int>();
  if (j.contains("registration")) {
    const auto& r = j.at("registration");
    const auto rget = [&](const char* key, auto& field) {
      if (r.contains(key)) field = r.at(key).get<std::decay_t<decltype(field)>>();
    };
    rget("min_points", c.registration.min_points);
    rget("inlier_threshold", c.registration.inlier_threshold);
    rget("min_inlier_fraction", c.registration.min_inlier_fraction);
    rget("max_ransac_iterations", c.registration.max_ransac_iterations);
    rget("max_icp_iterations", c.registration.max_icp_iterations);
    rget("max_source_samples", c.registration.max_source_samples);
  }
  return c;
}

std::vector<Variant> parse_variants(const std::string& csv) {
  std::vector<Variant> out;
  std::string token;
  std::istringstream ss(csv);
  while (std::getline(ss, token, ',')) {
    if (token == "updated") out.push_back(Variant::kUpdated);
    else if (token == "depth-ablation" || token == "depth_ablation")
      out.push_back(Variant::kDepthAblation);
    else if (token == "registration-ablation" || token == "registration_ablation")
      out.push_back(Variant::kRegistrationAblation);
    else
      throw std::invalid_argument("unknown variant: " + token);
  }
  if (out.empty()) throw std::invalid_argument("no variants selected");
  return out;
}

void write_step_artifacts(const fs::path& out_dir, int step_index, const TsdfVolume& v,
                          const StepTrace& trace, float min_weight) {
  fs::create_directories(out_dir);
  char name[64];
  const fs::path mask_dir = out_dir / ("masks_step_" + std::to_string(step_index));
  fs::create_directories(mask_dir);
  for (size_t i = 0; i < trace.masks.size(); ++i) {
    std::snprintf(name, sizeof(name), "frame_%03d.pgm", trace.frame_indices[i]);
    write_pgm(mask_dir / name, trace.masks[i]);
  }
  std::snprintf(name, sizeof(name), "step_%d.tsdf", step_index);
  write_volume(out_dir / name, v);
  std::snprintf(name, sizeof(name), "step_%d.ply", step_index);
  write_ply(out_dir / name, extract_mesh(v, min_weight));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TSDF anatomy-model updating from posed depth maps"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_file;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int sequence_length = 0;
  bool sequence_length_set = false;
  bool reset_changed_weights = false;
  double threshold_mm = 0.0;
  bool threshold_set = false;
  app.add_option("--config", config_file, "JSON config file for update parameters");
  app.add_option("--seed", seed, "RNG seed")->each([&](const std::string&) { seed_set = true; });
  app.add_option("--sequence-length", sequence_length, "Limit frames per intraoperative step")
      ->each([&](const std::string&) { sequence_length_set = true; });
  app.add_flag("--reset-changed-weights", reset_changed_weights,
               "Zero cumulative weights at freshly detected change voxels");
  app.add_option("--threshold-mm", threshold_mm, "Change detection threshold in mm")
      ->each([&](const std::string&) { threshold_set = true; });

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a phantom dataset with ground truth");
  std::string synth_out;
  SynthParams sp;
  synth->add_option("--out", synth_out, "Output dataset directory")->required();
  synth->add_option("--frames", sp.frames_per_step, "Frames per step");
  synth->add_option("--bites", sp.n_bites, "Number of surgical bites");
  synth->add_option("--width", sp.width, "Image width");
  synth->add_option("--height", sp.height, "Image height");
  synth->add_option("--focal", sp.focal, "Focal length in pixels");
  synth->add_option("--eval-poses", sp.n_eval_poses, "Number of evaluation poses");
  synth->add_option("--radius", sp.corridor_radius, "Corridor radius, mm");
  synth->add_option("--length", sp.corridor_length, "Corridor length, mm");
  synth->add_option("--gt-voxel", sp.gt_mesh_voxel, "Ground-truth mesh sampling, mm");
  synth->add_option("--noise-sigma", sp.noise.sigma, "Depth noise sigma, mm");
  synth->add_option("--noise-scale-min", sp.noise.scale_min, "Per-frame scale range lower bound");
  synth->add_option("--noise-scale-max", sp.noise.scale_max, "Per-frame scale range upper bound");
  synth->add_option("--noise-bias", sp.noise.bias_amplitude, "Low-frequency bias amplitude, mm");
  synth->add_option("--noise-period", sp.noise.bias_period, "Bias spatial period, pixels");

  // init
  auto* init = app.add_subcommand("init", "Build the preoperative volume from the manifest");
  std::string init_manifest, init_out;
  init->add_option("--manifest", init_manifest, "Dataset manifest")->required();
  init->add_option("--out", init_out, "Output directory")->required();

  // update
  auto* update = app.add_subcommand("update", "Apply one surgical step to a volume");
  std::string upd_manifest, upd_volume, upd_out;
  int upd_step = 1;
  bool upd_gt_depth = false, upd_no_icp = false;
  update->add_option("--manifest", upd_manifest, "Dataset manifest")->required();
  update->add_option("--volume", upd_volume, "Input volume (.tsdf)")->required();
  update->add_option("--step", upd_step, "Bite step index (1-based)")->required();
  update->add_option("--out", upd_out, "Output directory")->required();
  update->add_flag("--use-gt-depths", upd_gt_depth, "Use clean ground-truth depths");
  update->add_flag("--no-icp", upd_no_icp, "Scale normalization only (registration ablation)");

  // run
  auto* run = app.add_subcommand("run", "Full progression: preop fusion + every bite");
  std::string run_manifest, run_out;
  std::string run_variants = "updated,depth-ablation,registration-ablation";
  run->add_option("--manifest", run_manifest, "Dataset manifest")->required();
  run->add_option("--out", run_out, "Output directory")->required();
  run->add_option("--variants", run_variants, "Comma-separated: updated,depth-ablation,registration-ablation");

  // extract-mesh
  auto* extract = app.add_subcommand("extract-mesh", "Marching-cubes surface of a volume");
  std::string ext_volume, ext_out;
  float ext_min_weight = 1.0f;
  extract->add_option("--volume", ext_volume, "Input volume (.tsdf)")->required();
  extract->add_option("--out", ext_out, "Output mesh (.ply)")->required();
  extract->add_option("--min-weight", ext_min_weight, "Minimum voxel weight");

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "Report errors of a run against ground truth");
  std::string eval_manifest, eval_run, eval_csv, eval_txt;
  evaluate->add_option("--manifest", eval_manifest, "Dataset manifest")->required();
  evaluate->add_option("--run", eval_run, "Run output directory")->required();
  evaluate->add_option("--out-csv", eval_csv, "Report CSV path (default <run>/report.csv)");
  evaluate->add_option("--out-txt", eval_txt, "Report text path (default <run>/report.txt)");

  CLI11_PARSE(app, argc, argv);

  try {
    UpdateConfig config;
    if (!config_file.empty()) config = load_config_file(config_file);
    if (seed_set) config.seed = seed;
    if (sequence_length_set) config.sequence_length = sequence_length;
    if (reset_changed_weights) config.reset_changed_weights = true;
    if (threshold_set) config.change_threshold = threshold_mm;

    if (synth->parsed()) {
      if (seed_set) {
        sp.seed = seed;
        sp.noise.seed = seed;
      }
      synth_dataset(synth_out, sp);
      std::cout << "dataset written to " << synth_out << "\n";
    } else if (init->parsed()) {
      const DatasetManifest m = load_manifest(init_manifest);
      const SurgicalStep preop = load_step(m, m.preop, false);
      const TsdfVolume v = build_preop(preop.frames, m.camera, config);
      fs::create_directories(init_out);
      write_volume(fs::path(init_out) / "preop.tsdf", v);
      write_ply(fs::path(init_out) / "preop_mesh.ply", extract_mesh(v, config.min_weight));
      std::cout << "preoperative model written to " << init_out << "\n";
    } else if (update->parsed()) {
      const DatasetManifest m = load_manifest(upd_manifest);
      if (upd_step < 1 || upd_step > static_cast<int>(m.bite_steps.size()))
        throw std::invalid_argument("update: step index out of range");
      TsdfVolume v = read_volume(upd_volume);
      const SurgicalStep step =
          load_step(m, m.bite_steps[upd_step - 1], upd_gt_depth, config.sequence_length);
      UpdateConfig c = config;
      if (upd_no_icp) c.use_icp = false;
      StepTrace trace;
      update_step(v, step, m.camera, c, &trace);
      for (const std::string& w : trace.warnings) std::cerr << "warning: " << w << "\n";
      write_step_artifacts(upd_out, step.index, v, trace, c.min_weight);
      std::cout << "step " << step.index << " written to " << upd_out << "\n";
    } else if (run->parsed()) {
      const DatasetManifest m = load_manifest(run_manifest);
      const std::vector<Variant> variants = parse_variants(run_variants);
      const ProgressionOutputs outputs = run_progression(m, config, run_out, variants);
      if (!outputs.report.empty()) std::cout << report_text(outputs.report);
      std::cout << "progression written to " << run_out << "\n";
    } else if (extract->parsed()) {
      const TsdfVolume v = read_volume(ext_volume);
      write_ply(ext_out, extract_mesh(v, ext_min_weight));
      std::cout << "mesh written to " << ext_out << "\n";
    } else if (evaluate->parsed()) {
      const DatasetManifest m = load_manifest(eval_manifest);
      const std::vector<ReportRow> rows = evaluate_run(m, config, eval_run);
      const fs::path csv = eval_csv.empty() ? fs::path(eval_run) / "report.csv" : fs::path(eval_csv);
      const fs::path txt = eval_txt.empty() ? fs::path(eval_run) / "report.txt" : fs::path(eval_txt);
      std::ofstream fcsv(csv);
      fcsv << report_csv(rows);
      std::ofstream ftxt(txt);
      ftxt << report_text(rows);
      std::cout << report_text(rows);
      std::cout << "report written to " << csv << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", e.what()}}.dump() << "\n";
    return 1;
  }
  return 0;
}
