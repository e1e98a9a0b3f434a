#pragma once

// On-disk formats. Depth maps are grayscale PFM (32-bit float, negative scale
// line = little-endian, rows bottom-to-top, non-positive = invalid). Meshes
// are ASCII PLY in millimeters. Volumes use a fixed little-endian layout:
// "TSDF" magic, u32 version, 3xu32 dims, 3xf64 origin, f64 voxel_size,
// f64 truncation, then D and W as f32 arrays in x-fastest order.

#include <array>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "voxcarve/change_detection.hpp"
#include "voxcarve/geometry.hpp"
#include "voxcarve/tsdf_volume.hpp"

namespace voxcarve {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void write_pfm(const std::filesystem::path& path, const DepthMap& depth) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f << "Pf\n" << depth.width() << " " << depth.height() << "\n-1.0\n";
  std::vector<float> row(depth.width());
  for (int y = depth.height() - 1; y >= 0; --y) {  // PFM stores rows bottom-up
    for (int x = 0; x < depth.width(); ++x) {
      const float v = depth.at(x, y);
      row[x] = (v > 0.0f && std::isfinite(v)) ? v : 0.0f;
    }
    f.write(reinterpret_cast<const char*>(row.data()), row.size() * sizeof(float));
  }
  if (!f) throw IoError("write failed: " + path.string());
}

inline DepthMap read_pfm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  std::string magic;
  f >> magic;
  if (magic != "Pf") throw IoError("not a grayscale PFM: " + path.string());
  int w = 0, h = 0;
  double scale = 0.0;
  f >> w >> h >> scale;
  if (!f || w <= 0 || h <= 0 || scale == 0.0) throw IoError("bad PFM header: " + path.string());
  f.get();  // single whitespace after the scale line
  DepthMap depth(w, h, 0.0f);
  std::vector<float> row(w);
  for (int y = h - 1; y >= 0; --y) {
    f.read(reinterpret_cast<char*>(row.data()), row.size() * sizeof(float));
    if (!f) throw IoError("truncated PFM: " + path.string());
    for (int x = 0; x < w; ++x) {
      float v = row[x];
      if (scale > 0.0) {  // big-endian file
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        bits = __builtin_bswap32(bits);
        std::memcpy(&v, &bits, 4);
      }
      depth.at(x, y) = (v > 0.0f && std::isfinite(v)) ? v : 0.0f;
    }
  }
  return depth;
}

inline void write_ply(const std::filesystem::path& path, const TriangleMesh& mesh) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f << "ply\nformat ascii 1.0\ncomment units millimeters\n";
  f << "element vertex " << mesh.vertices.size() << "\n";
  f << "property float x\nproperty float y\nproperty float z\n";
  f << "element face " << mesh.triangles.size() << "\n";
  f << "property list uchar int vertex_indices\nend_header\n";
  char line[128];
  for (const Vec3& v : mesh.vertices) {
    std::snprintf(line, sizeof(line), "%.6f %.6f %.6f\n", v.x(), v.y(), v.z());
    f << line;
  }
  for (const auto& t : mesh.triangles) {
    std::snprintf(line, sizeof(line), "3 %d %d %d\n", t[0], t[1], t[2]);
    f << line;
  }
  if (!f) throw IoError("write failed: " + path.string());
}

inline TriangleMesh read_ply(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open: " + path.string());
  std::string line;
  std::getline(f, line);
  if (line != "ply") throw IoError("not a PLY file: " + path.string());
  size_t n_vertices = 0, n_faces = 0;
  bool ascii = false;
  while (std::getline(f, line)) {
    std::istringstream ss(line);
    std::string token;
    ss >> token;
    if (token == "format") {
      std::string fmt;
      ss >> fmt;
      ascii = fmt == "ascii";
    } else if (token == "element") {
      std::string what;
      size_t count = 0;
      ss >> what >> count;
      if (what == "vertex") n_vertices = count;
      if (what == "face") n_faces = count;
    } else if (token == "end_header") {
      break;
    }
  }
  if (!ascii) throw IoError("only ASCII PLY is supported: " + path.string());
  TriangleMesh mesh;
  mesh.vertices.resize(n_vertices);
  for (size_t i = 0; i < n_vertices; ++i) {
    if (!(f >> mesh.vertices[i].x() >> mesh.vertices[i].y() >> mesh.vertices[i].z()))
      throw IoError("truncated PLY vertices: " + path.string());
  }
  mesh.triangles.resize(n_faces);
  for (size_t i = 0; i < n_faces; ++i) {
    int n = 0;
    auto& t = mesh.triangles[i];
    if (!(f >> n >> t[0] >> t[1] >> t[2]) || n != 3)
      throw IoError("only triangle faces are supported: " + path.string());
    for (const int vi : t)
      if (vi < 0 || static_cast<size_t>(vi) >= n_vertices)
        throw IoError("PLY face index out of range: " + path.string());
  }
  return mesh;
}

// Binary masks as 8-bit PGM (0 = unchanged, 255 = changed).
inline void write_pgm(const std::filesystem::path& path, const ChangeMask& mask) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f << "P5\n" << mask.width << " " << mask.height << "\n255\n";
  std::vector<std::uint8_t> row(mask.width);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) row[x] = mask.at(x, y) ? 255 : 0;
    f.write(reinterpret_cast<const char*>(row.data()), row.size());
  }
  if (!f) throw IoError("write failed: " + path.string());
}

inline ChangeMask read_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P5" || w <= 0 || h <= 0 || maxval != 255) throw IoError("bad PGM header: " + path.string());
  f.get();
  ChangeMask mask = ChangeMask::zeros(w, h);
  std::vector<std::uint8_t> row(w);
  for (int y = 0; y < h; ++y) {
    f.read(reinterpret_cast<char*>(row.data()), row.size());
    if (!f) throw IoError("truncated PGM: " + path.string());
    for (int x = 0; x < w; ++x) mask.at(x, y) = row[x] ? 1 : 0;
  }
  return mask;
}

namespace detail {

template <typename T>
void write_raw(std::ofstream& f, const T& value) {
  f.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_raw(std::ifstream& f) {
  T value;
  f.read(reinterpret_cast<char*>(&value), sizeof(T));
  return value;
}

}  // namespace detail

inline void write_volume(const std::filesystem::path& path, const TsdfVolume& v) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f.write("TSDF", 4);
  detail::write_raw<std::uint32_t>(f, 1);  // version
  for (int a = 0; a < 3; ++a) detail::write_raw<std::uint32_t>(f, static_cast<std::uint32_t>(v.dims()[a]));
  for (int a = 0; a < 3; ++a) detail::write_raw<double>(f, v.origin()[a]);
  detail::write_raw<double>(f, v.voxel_size());
  detail::write_raw<double>(f, v.truncation());
  f.write(reinterpret_cast<const char*>(v.d_data().data()), v.voxel_count() * sizeof(float));
  f.write(reinterpret_cast<const char*>(v.w_data().data()), v.voxel_count() * sizeof(float));
  if (!f) throw IoError("write failed: " + path.string());
}

inline TsdfVolume read_volume(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "TSDF", 4) != 0) throw IoError("not a TSDF volume: " + path.string());
  const auto version = detail::read_raw<std::uint32_t>(f);
  if (version != 1) throw IoError("unsupported volume version: " + path.string());
  Eigen::Vector3i dims;
  for (int a = 0; a < 3; ++a) dims[a] = static_cast<int>(detail::read_raw<std::uint32_t>(f));
  Vec3 origin;
  for (int a = 0; a < 3; ++a) origin[a] = detail::read_raw<double>(f);
  const double voxel_size = detail::read_raw<double>(f);
  const double truncation = detail::read_raw<double>(f);
  if (!f) throw IoError("truncated volume header: " + path.string());
  TsdfVolume v(dims, origin, voxel_size, truncation);
  f.read(reinterpret_cast<char*>(v.d_data().data()), v.voxel_count() * sizeof(float));
  f.read(reinterpret_cast<char*>(v.w_data().data()), v.voxel_count() * sizeof(float));
  if (!f) throw IoError("truncated volume data: " + path.string());
  return v;
}

}  // namespace voxcarve
