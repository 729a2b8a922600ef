#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "patchad/error.hpp"
#include "patchad/geometry.hpp"

namespace patchad {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

enum class CloudFormat { ply, obj, xyz };

inline CloudFormat format_from_path(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (ext == ".ply") return CloudFormat::ply;
  if (ext == ".obj") return CloudFormat::obj;
  if (ext == ".xyz" || ext == ".txt") return CloudFormat::xyz;
  fail(ErrorCode::MalformedFile, "unknown point cloud extension '" + ext + "'");
}

struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<Index, 3>> triangles;
};

/// Area-weighted uniform sampling of `n` points on the triangle soup.
inline PointCloud sample_mesh_surface(const Mesh& mesh, std::size_t n, std::uint64_t seed) {
  if (mesh.triangles.empty()) fail(ErrorCode::MalformedFile, "mesh has no faces to sample");
  std::vector<double> cdf;
  cdf.reserve(mesh.triangles.size());
  double total = 0.0;
  for (const auto& t : mesh.triangles) {
    const Vec3& a = mesh.vertices[t[0]];
    total += 0.5 * (mesh.vertices[t[1]] - a).cross(mesh.vertices[t[2]] - a).norm();
    cdf.push_back(total);
  }
  if (!(total > 0.0)) fail(ErrorCode::MalformedFile, "mesh has zero surface area");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  PointCloud out;
  out.points.reserve(n);
  out.normals.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = u01(rng) * total;
    auto it = std::upper_bound(cdf.begin(), cdf.end(), r);
    const auto& t = mesh.triangles[std::min<std::size_t>(it - cdf.begin(), cdf.size() - 1)];
    double s = u01(rng), w = u01(rng);
    if (s + w > 1.0) {
      s = 1.0 - s;
      w = 1.0 - w;
    }
    const Vec3& a = mesh.vertices[t[0]];
    const Vec3& b = mesh.vertices[t[1]];
    const Vec3& c = mesh.vertices[t[2]];
    out.points.push_back(a + s * (b - a) + w * (c - a));
    Vec3 nrm = (b - a).cross(c - a);
    out.normals.push_back(nrm.norm() > 0.0 ? Vec3(nrm.normalized()) : Vec3::UnitZ());
  }
  return out;
}

namespace detail {

inline std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline double parse_double(const std::string& tok, const std::string& what) {
  try {
    std::size_t used = 0;
    double v = std::stod(tok, &used);
    if (used != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    fail(ErrorCode::MalformedFile, "cannot parse '" + tok + "' in " + what);
  }
}

inline void finish_normals(PointCloud& cloud) {
  for (auto& n : cloud.normals) {
    const double len = n.norm();
    if (!(len > 0.0) || !std::isfinite(len)) {
      cloud.normals.clear();
      return;
    }
    n /= len;
  }
}

struct PlyProperty {
  std::string name;
  std::string type;
  bool is_list = false;
};

inline std::size_t ply_type_size(const std::string& t) {
  if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
  if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
  if (t == "int" || t == "uint" || t == "int32" || t == "uint32" || t == "float" || t == "float32")
    return 4;
  if (t == "double" || t == "float64") return 8;
  fail(ErrorCode::MalformedFile, "unknown PLY property type '" + t + "'");
}

inline double ply_read_binary(const char* p, const std::string& t) {
  auto load = [p]<typename T>(T) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return static_cast<double>(v);
  };
  if (t == "char" || t == "int8") return load(std::int8_t{});
  if (t == "uchar" || t == "uint8") return load(std::uint8_t{});
  if (t == "short" || t == "int16") return load(std::int16_t{});
  if (t == "ushort" || t == "uint16") return load(std::uint16_t{});
  if (t == "int" || t == "int32") return load(std::int32_t{});
  if (t == "uint" || t == "uint32") return load(std::uint32_t{});
  if (t == "float" || t == "float32") return load(float{});
  return load(double{});
}

inline PointCloud parse_ply(const std::string& bytes) {
  std::istringstream head(bytes);
  std::string line;
  if (!std::getline(head, line) || line.rfind("ply", 0) != 0)
    fail(ErrorCode::MalformedFile, "missing 'ply' magic");
  bool binary = false;
  std::size_t vertex_count = 0;
  bool in_vertex = false, seen_vertex = false;
  std::vector<PlyProperty> props;
  while (std::getline(head, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string kw;
    ls >> kw;
    if (kw == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt == "ascii") binary = false;
      else if (fmt == "binary_little_endian") binary = true;
      else fail(ErrorCode::MalformedFile, "unsupported PLY format '" + fmt + "'");
    } else if (kw == "element") {
      std::string name;
      long long count = -1;
      ls >> name >> count;
      if (count < 0) fail(ErrorCode::MalformedFile, "bad element line");
      in_vertex = (name == "vertex");
      if (in_vertex) {
        if (seen_vertex) fail(ErrorCode::MalformedFile, "duplicate vertex element");
        seen_vertex = true;
        vertex_count = static_cast<std::size_t>(count);
      } else if (!seen_vertex) {
        fail(ErrorCode::MalformedFile, "vertex element must come first");
      }
    } else if (kw == "property" && in_vertex) {
      PlyProperty p;
      std::string t;
      ls >> t;
      if (t == "list") {
        p.is_list = true;
        std::string a, b;
        ls >> a >> b;
        t = b;
      }
      p.type = t;
      ls >> p.name;
      if (p.name.empty()) fail(ErrorCode::MalformedFile, "property without a name");
      props.push_back(p);
    } else if (kw == "end_header") {
      break;
    }
  }
  if (line.rfind("end_header", 0) != 0) fail(ErrorCode::MalformedFile, "missing end_header");
  if (!seen_vertex) fail(ErrorCode::MalformedFile, "no vertex element");
  int ix = -1, iy = -1, iz = -1, inx = -1, iny = -1, inz = -1;
  for (int i = 0; i < static_cast<int>(props.size()); ++i) {
    if (props[i].is_list) fail(ErrorCode::MalformedFile, "list properties on vertices are unsupported");
    const auto& n = props[i].name;
    if (n == "x") ix = i;
    if (n == "y") iy = i;
    if (n == "z") iz = i;
    if (n == "nx") inx = i;
    if (n == "ny") iny = i;
    if (n == "nz") inz = i;
  }
  if (ix < 0 || iy < 0 || iz < 0) fail(ErrorCode::MalformedFile, "vertex lacks x/y/z");
  const bool with_normals = inx >= 0 && iny >= 0 && inz >= 0;

  PointCloud cloud;
  cloud.points.reserve(vertex_count);
  std::vector<double> row(props.size());
  const auto body_start = static_cast<std::size_t>(head.tellg());
  if (binary) {
    std::size_t stride = 0;
    std::vector<std::size_t> offs;
    for (const auto& p : props) {
      offs.push_back(stride);
      stride += ply_type_size(p.type);
    }
    if (bytes.size() < body_start + stride * vertex_count)
      fail(ErrorCode::MalformedFile, "binary PLY body is truncated");
    for (std::size_t v = 0; v < vertex_count; ++v) {
      const char* base = bytes.data() + body_start + v * stride;
      for (std::size_t i = 0; i < props.size(); ++i) row[i] = ply_read_binary(base + offs[i], props[i].type);
      cloud.points.emplace_back(row[ix], row[iy], row[iz]);
      if (with_normals) cloud.normals.emplace_back(row[inx], row[iny], row[inz]);
    }
  } else {
    for (std::size_t v = 0; v < vertex_count; ++v) {
      if (!std::getline(head, line)) fail(ErrorCode::MalformedFile, "ASCII PLY body is truncated");
      std::istringstream ls(line);
      for (std::size_t i = 0; i < props.size(); ++i) {
        std::string tok;
        if (!(ls >> tok)) fail(ErrorCode::MalformedFile, "short vertex row in ASCII PLY");
        row[i] = parse_double(tok, "PLY vertex row");
      }
      cloud.points.emplace_back(row[ix], row[iy], row[iz]);
      if (with_normals) cloud.normals.emplace_back(row[inx], row[iny], row[inz]);
    }
  }
  return cloud;
}

inline Mesh parse_obj(const std::string& bytes) {
  Mesh mesh;
  std::istringstream in(bytes);
  std::string line;
  std::vector<std::vector<long long>> faces;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string kw;
    ls >> kw;
    if (kw == "v") {
      std::string a, b, c;
      if (!(ls >> a >> b >> c)) fail(ErrorCode::MalformedFile, "short 'v' line in OBJ");
      mesh.vertices.emplace_back(parse_double(a, "OBJ"), parse_double(b, "OBJ"), parse_double(c, "OBJ"));
    } else if (kw == "f") {
      std::vector<long long> f;
      std::string tok;
      while (ls >> tok) {
        const auto slash = tok.find('/');
        try {
          f.push_back(std::stoll(tok.substr(0, slash)));
        } catch (const std::exception&) {
          fail(ErrorCode::MalformedFile, "bad face index '" + tok + "'");
        }
      }
      if (f.size() < 3) fail(ErrorCode::MalformedFile, "face with fewer than 3 vertices");
      faces.push_back(std::move(f));
    }
  }
  const auto nv = static_cast<long long>(mesh.vertices.size());
  for (const auto& f : faces) {
    std::vector<Index> idx;
    for (long long v : f) {
      const long long r = v < 0 ? nv + v : v - 1;
      if (r < 0 || r >= nv) fail(ErrorCode::MalformedFile, "face index out of range");
      idx.push_back(static_cast<Index>(r));
    }
    for (std::size_t t = 1; t + 1 < idx.size(); ++t) mesh.triangles.push_back({idx[0], idx[t], idx[t + 1]});
  }
  return mesh;
}

inline PointCloud parse_xyz(const std::string& bytes) {
  PointCloud cloud;
  std::istringstream in(bytes);
  std::string line;
  std::size_t cols = 0;
  while (std::getline(in, line)) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    std::vector<double> v;
    std::string tok;
    while (ls >> tok) v.push_back(parse_double(tok, "XYZ row"));
    if (v.size() != 3 && v.size() != 6) fail(ErrorCode::MalformedFile, "XYZ rows need 3 or 6 columns");
    if (cols == 0) cols = v.size();
    if (v.size() != cols) fail(ErrorCode::MalformedFile, "inconsistent XYZ column count");
    cloud.points.emplace_back(v[0], v[1], v[2]);
    if (cols == 6) cloud.normals.emplace_back(v[3], v[4], v[5]);
  }
  return cloud;
}

}  // namespace detail

struct LoadOptions {
  /// When set and the file is a mesh (OBJ with faces), draw this many surface samples.
  std::optional<std::size_t> sample_surface;
  std::uint64_t seed = 0;
};

inline Mesh load_obj_mesh(const std::filesystem::path& path) {
  return detail::parse_obj(detail::read_all(path));
}

inline PointCloud load_pointcloud(const std::filesystem::path& path, CloudFormat format,
                                  const LoadOptions& opts = {}) {
  const std::string bytes = detail::read_all(path);
  PointCloud cloud;
  switch (format) {
    case CloudFormat::ply: cloud = detail::parse_ply(bytes); break;
    case CloudFormat::xyz: cloud = detail::parse_xyz(bytes); break;
    case CloudFormat::obj: {
      const Mesh mesh = detail::parse_obj(bytes);
      if (opts.sample_surface) {
        if (mesh.vertices.empty()) fail(ErrorCode::EmptyCloud, "'" + path.string() + "' has no vertices");
        cloud = sample_mesh_surface(mesh, *opts.sample_surface, opts.seed);
      } else {
        cloud.points = mesh.vertices;
      }
      break;
    }
  }
  if (cloud.empty()) fail(ErrorCode::EmptyCloud, "'" + path.string() + "' has no points");
  for (const auto& p : cloud.points)
    if (!p.allFinite()) fail(ErrorCode::MalformedFile, "non-finite coordinate in '" + path.string() + "'");
  detail::finish_normals(cloud);
  return cloud;
}

inline PointCloud load_pointcloud(const std::filesystem::path& path, const LoadOptions& opts = {}) {
  return load_pointcloud(path, format_from_path(path), opts);
}

using Rgb = std::array<std::uint8_t, 3>;

struct PlyWriteOptions {
  bool binary = true;
  bool double_precision = false;  // float64 coordinates instead of float32
  const std::vector<Rgb>* colors = nullptr;
};

/// Writes x/y/z, optional nx/ny/nz and optional uchar red/green/blue.
inline void write_ply(const std::filesystem::path& path, const PointCloud& cloud,
                      const PlyWriteOptions& opts = {}) {
  const auto* colors = opts.colors;
  if (colors && colors->size() != cloud.size())
    fail(ErrorCode::CountMismatch, "color count differs from point count");
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::IoError, "cannot write '" + path.string() + "'");
  const bool normals = cloud.has_normals();
  const char* type = opts.double_precision ? "double" : "float";
  out << "ply\nformat " << (opts.binary ? "binary_little_endian" : "ascii") << " 1.0\n"
      << "element vertex " << cloud.size() << "\n";
  for (const char* n : {"x", "y", "z"}) out << "property " << type << ' ' << n << '\n';
  if (normals)
    for (const char* n : {"nx", "ny", "nz"}) out << "property " << type << ' ' << n << '\n';
  if (colors) out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  out << "end_header\n";
  out.precision(17);
  auto emit = [&]<typename T>(T, std::size_t i) {
    std::array<T, 6> f{};
    std::size_t nf = 3;
    for (int a = 0; a < 3; ++a) f[a] = static_cast<T>(cloud.points[i][a]);
    if (normals) {
      for (int a = 0; a < 3; ++a) f[3 + a] = static_cast<T>(cloud.normals[i][a]);
      nf = 6;
    }
    if (opts.binary) {
      out.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(nf * sizeof(T)));
      if (colors) out.write(reinterpret_cast<const char*>((*colors)[i].data()), 3);
    } else {
      for (std::size_t a = 0; a < nf; ++a) out << (a ? " " : "") << f[a];
      if (colors)
        for (auto c : (*colors)[i]) out << ' ' << static_cast<int>(c);
      out << '\n';
    }
  };
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (opts.double_precision) emit(double{}, i);
    else emit(float{}, i);
  }
  if (!out) fail(ErrorCode::IoError, "failed writing '" + path.string() + "'");
}

inline void write_xyz(const std::filesystem::path& path, const PointCloud& cloud) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::IoError, "cannot write '" + path.string() + "'");
  out.precision(17);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    out << cloud.points[i].x() << ' ' << cloud.points[i].y() << ' ' << cloud.points[i].z();
    if (cloud.has_normals())
      out << ' ' << cloud.normals[i].x() << ' ' << cloud.normals[i].y() << ' ' << cloud.normals[i].z();
    out << '\n';
  }
}

}  // namespace patchad
