#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Geometry>

#include "json.hpp"
#include "patchad/error.hpp"
#include "patchad/geometry.hpp"
#include "patchad/io.hpp"

namespace patchad {

// ---------------------------------------------------------------------------
// Procedural normal shapes

enum class ShapeKind { sphere, box, cylinder, torus, gear };

inline std::string_view to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::sphere: return "sphere";
    case ShapeKind::box: return "box";
    case ShapeKind::cylinder: return "cylinder";
    case ShapeKind::torus: return "torus";
    case ShapeKind::gear: return "gear";
  }
  return "unknown";
}

inline ShapeKind parse_shape_kind(std::string_view s) {
  for (auto k : {ShapeKind::sphere, ShapeKind::box, ShapeKind::cylinder, ShapeKind::torus, ShapeKind::gear})
    if (to_string(k) == s) return k;
  fail(ErrorCode::BadConfig, "unknown shape kind '" + std::string(s) + "'");
}

inline constexpr double kTorusMajor = 1.0;
inline constexpr double kTorusMinor = 0.3;
inline constexpr int kGearTeeth = 12;
inline constexpr double kGearRoot = 0.8;
inline constexpr double kGearTip = 1.0;
inline constexpr double kGearHalfThickness = 0.15;

namespace detail {

/// Outer radius of the gear profile at polar angle theta: teeth span the first half of each period.
inline double gear_radius(double theta) {
  const double period = 2.0 * std::numbers::pi / kGearTeeth;
  double phase = std::fmod(theta, period);
  if (phase < 0) phase += period;
  return phase < 0.5 * period ? kGearTip : kGearRoot;
}

inline void sample_gear(std::size_t n, std::mt19937_64& rng, PointCloud& out) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double pi = std::numbers::pi;
  const double period = 2.0 * pi / kGearTeeth;
  const double half = 0.5 * period;
  const double height = 2.0 * kGearHalfThickness;
  // Side wall pieces per tooth: tip arc, root arc, two radial flanks.
  const double tip_len = kGearTip * half, root_len = kGearRoot * half, flank = kGearTip - kGearRoot;
  const double per_tooth = tip_len + root_len + 2.0 * flank;
  const double side_area = kGearTeeth * per_tooth * height;
  const double cap_area = kGearTeeth * 0.5 * half * (kGearTip * kGearTip + kGearRoot * kGearRoot);
  const double total = side_area + 2.0 * cap_area;
  while (out.points.size() < n) {
    const double pick = u01(rng) * total;
    if (pick < side_area) {
      const int tooth = std::min(kGearTeeth - 1, static_cast<int>(u01(rng) * kGearTeeth));
      const double base = tooth * period;
      const double z = (u01(rng) - 0.5) * height;
      double s = u01(rng) * per_tooth;
      Vec3 p, nrm;
      if (s < tip_len) {
        const double th = base + s / kGearTip;
        p = {kGearTip * std::cos(th), kGearTip * std::sin(th), z};
        nrm = {std::cos(th), std::sin(th), 0.0};
      } else if ((s -= tip_len) < root_len) {
        const double th = base + half + s / kGearRoot;
        p = {kGearRoot * std::cos(th), kGearRoot * std::sin(th), z};
        nrm = {std::cos(th), std::sin(th), 0.0};
      } else if ((s -= root_len) < flank) {
        // Trailing flank of the tooth at angle base + half, facing +theta.
        const double th = base + half, r = kGearRoot + s;
        p = {r * std::cos(th), r * std::sin(th), z};
        nrm = {-std::sin(th), std::cos(th), 0.0};
      } else {
        // Leading flank at angle base, facing -theta.
        s -= flank;
        const double th = base, r = kGearRoot + s;
        p = {r * std::cos(th), r * std::sin(th), z};
        nrm = {std::sin(th), -std::cos(th), 0.0};
      }
      out.points.push_back(p);
      out.normals.push_back(nrm);
    } else {
      const bool top = pick < side_area + cap_area;
      double x, y, r2;
      do {
        x = 2.0 * u01(rng) - 1.0;
        y = 2.0 * u01(rng) - 1.0;
        r2 = x * x + y * y;
      } while (r2 > 1.0 || std::sqrt(r2) > gear_radius(std::atan2(y, x)));
      out.points.emplace_back(x, y, top ? kGearHalfThickness : -kGearHalfThickness);
      out.normals.emplace_back(0.0, 0.0, top ? 1.0 : -1.0);
    }
  }
}

}  // namespace detail

/// n surface-uniform samples with analytic normals.
inline PointCloud gen_shape(ShapeKind kind, std::size_t n, std::uint64_t seed) {
  if (n < 100) fail(ErrorCode::BadCount, "gen_shape needs at least 100 points");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double pi = std::numbers::pi;
  PointCloud out;
  out.points.reserve(n);
  out.normals.reserve(n);
  switch (kind) {
    case ShapeKind::sphere:
      while (out.points.size() < n) {
        Vec3 v(gauss(rng), gauss(rng), gauss(rng));
        const double len = v.norm();
        if (len < 1e-12) continue;
        v /= len;
        out.points.push_back(v);
        out.normals.push_back(v);
      }
      break;
    case ShapeKind::box: {
      const Vec3 half(0.6, 0.4, 0.3);
      const double areas[3] = {half.y() * half.z(), half.x() * half.z(), half.x() * half.y()};
      const double total = areas[0] + areas[1] + areas[2];
      while (out.points.size() < n) {
        double pick = u01(rng) * total;
        int axis = 0;
        while (axis < 2 && pick >= areas[axis]) pick -= areas[axis++];
        const double sign = u01(rng) < 0.5 ? -1.0 : 1.0;
        Vec3 p;
        for (int a = 0; a < 3; ++a) p[a] = (2.0 * u01(rng) - 1.0) * half[a];
        p[axis] = sign * half[axis];
        Vec3 nrm = Vec3::Zero();
        nrm[axis] = sign;
        out.points.push_back(p);
        out.normals.push_back(nrm);
      }
      break;
    }
    case ShapeKind::cylinder: {
      const double r = 0.5, h = 0.7;
      const double side = 2.0 * pi * r * 2.0 * h, cap = pi * r * r;
      while (out.points.size() < n) {
        const double pick = u01(rng) * (side + 2.0 * cap);
        if (pick < side) {
          const double th = 2.0 * pi * u01(rng);
          out.points.emplace_back(r * std::cos(th), r * std::sin(th), (2.0 * u01(rng) - 1.0) * h);
          out.normals.emplace_back(std::cos(th), std::sin(th), 0.0);
        } else {
          const double sign = pick < side + cap ? 1.0 : -1.0;
          const double rr = r * std::sqrt(u01(rng)), th = 2.0 * pi * u01(rng);
          out.points.emplace_back(rr * std::cos(th), rr * std::sin(th), sign * h);
          out.normals.emplace_back(0.0, 0.0, sign);
        }
      }
      break;
    }
    case ShapeKind::torus:
      while (out.points.size() < n) {
        const double u = 2.0 * pi * u01(rng), v = 2.0 * pi * u01(rng);
        // Area element is proportional to (R + r cos v).
        if (u01(rng) * (kTorusMajor + kTorusMinor) > kTorusMajor + kTorusMinor * std::cos(v)) continue;
        const double ring = kTorusMajor + kTorusMinor * std::cos(v);
        out.points.emplace_back(ring * std::cos(u), ring * std::sin(u), kTorusMinor * std::sin(v));
        out.normals.emplace_back(std::cos(v) * std::cos(u), std::cos(v) * std::sin(u), std::sin(v));
      }
      break;
    case ShapeKind::gear: detail::sample_gear(n, rng, out); break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Negative augmentation

enum class AnomalyKind { gaussian_bump, sine_bulge, cutoff_cube, cutoff_cylinder, planar_shift, angular_shift };

inline std::string_view to_string(AnomalyKind k) {
  switch (k) {
    case AnomalyKind::gaussian_bump: return "gaussian_bump";
    case AnomalyKind::sine_bulge: return "sine_bulge";
    case AnomalyKind::cutoff_cube: return "cutoff_cube";
    case AnomalyKind::cutoff_cylinder: return "cutoff_cylinder";
    case AnomalyKind::planar_shift: return "planar_shift";
    case AnomalyKind::angular_shift: return "angular_shift";
  }
  return "unknown";
}

inline AnomalyKind parse_anomaly_kind(std::string_view s) {
  for (auto k : {AnomalyKind::gaussian_bump, AnomalyKind::sine_bulge, AnomalyKind::cutoff_cube,
                 AnomalyKind::cutoff_cylinder, AnomalyKind::planar_shift, AnomalyKind::angular_shift})
    if (to_string(k) == s) return k;
  fail(ErrorCode::BadConfig, "unknown anomaly kind '" + std::string(s) + "'");
}

enum class AmplitudePreset { small, large };

inline double preset_amplitude(AmplitudePreset p) { return p == AmplitudePreset::small ? 0.01 : 0.1; }

/// Parameters of one applied deformation. Fields irrelevant to `kind` keep their defaults.
struct AugmentationSpec {
  AnomalyKind kind = AnomalyKind::gaussian_bump;
  Vec3 center = Vec3::Zero();
  double sigma = 0.05;
  double amplitude = 0.0;
  double wavelength = 0.0;              // sine_bulge
  Eigen::Matrix3d frame = Eigen::Matrix3d::Identity();  // cutoff: columns are the mask axes
  double half_extent = 0.0;             // cutoff cube half-edge / cylinder radius
  double half_height = 0.0;             // cutoff cylinder half-height (along frame column 2)
  Vec3 direction = Vec3::UnitX();       // rigid: half-space normal or rotation axis
  double threshold = 0.0;               // planar: region is {p : p.direction > threshold}
  double sector_start = 0.0;            // angular: sector [start, start + width) around `direction`
  double sector_width = 0.0;
  Vec3 shift = Vec3::Zero();            // planar motion
  double angle = 0.0;                   // angular motion
  double cut_ratio = 0.0;               // fraction of points inside the rigid region
  std::uint64_t seed = 0;
};

/// S (normal), S~ (abnormal), o_gt = S - S~ and m_gt[i] = |o_gt[i]| > 1e-9.
struct AugmentedSample {
  PointCloud normal;
  PointCloud abnormal;
  std::vector<Vec3> offsets;
  std::vector<std::uint8_t> mask;
  std::vector<AugmentationSpec> specs;

  std::size_t anomalous_count() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
  }
};

inline constexpr double kMaskEps = 1e-9;

/// Coordinates are kept on a 2^-40 grid so that S~ + (S - S~) reproduces S bit for bit.
inline double snap(double x) { return std::ldexp(std::nearbyint(std::ldexp(x, 40)), -40); }
inline Vec3 snap(const Vec3& v) { return {snap(v.x()), snap(v.y()), snap(v.z())}; }

namespace detail {

inline PointCloud snapped(const PointCloud& cloud) {
  PointCloud out;
  out.points.reserve(cloud.size());
  for (const auto& p : cloud.points) out.points.push_back(snap(p));
  out.normals = cloud.normals;
  return out;
}

inline AugmentedSample finish_sample(PointCloud normal, std::vector<Vec3> moved,
                                     std::vector<AugmentationSpec> specs) {
  AugmentedSample s;
  s.abnormal.points = std::move(moved);
  s.offsets.resize(normal.size());
  s.mask.resize(normal.size());
  for (std::size_t i = 0; i < normal.size(); ++i) {
    s.offsets[i] = normal.points[i] - s.abnormal.points[i];
    s.mask[i] = s.offsets[i].norm() > kMaskEps ? 1 : 0;
  }
  s.normal = std::move(normal);
  s.specs = std::move(specs);
  return s;
}

inline void require_normals(const PointCloud& cloud) {
  if (!cloud.has_normals() || cloud.normals.size() != cloud.size())
    fail(ErrorCode::MissingNormals, "deformation needs per-point normals");
}

}  // namespace detail

/// Displacement of one point under a normal-guided kernel deformation (before snapping).
inline Vec3 bump_displacement(const Vec3& x, const Vec3& n, const Vec3& center, double sigma, double amplitude) {
  const double r2 = sq_dist(x, center);
  const double mag = amplitude * std::exp(-r2 / (2.0 * sigma * sigma));
  if (std::abs(mag) < kMaskEps) return Vec3::Zero();
  return mag * n;
}

inline Vec3 sine_displacement(const Vec3& x, const Vec3& n, const Vec3& center, double sigma, double amplitude,
                              double wavelength) {
  const double r = std::sqrt(sq_dist(x, center));
  const double mag = amplitude * std::exp(-r * r / (2.0 * sigma * sigma)) *
                     std::sin(2.0 * std::numbers::pi * r / wavelength);
  if (std::abs(mag) < kMaskEps) return Vec3::Zero();
  return mag * n;
}

/// Nearest point on the boundary of the cube/cylinder mask for a point inside it; nullopt outside.
inline std::optional<Vec3> project_out_of_mask(const Vec3& x, const AugmentationSpec& spec) {
  const Vec3 local = spec.frame.transpose() * (x - spec.center);
  Vec3 moved = local;
  if (spec.kind == AnomalyKind::cutoff_cube) {
    const double h = spec.half_extent;
    if (local.cwiseAbs().maxCoeff() >= h) return std::nullopt;
    int axis = 0;
    double best = h - std::abs(local[0]);
    for (int a = 1; a < 3; ++a)
      if (h - std::abs(local[a]) < best) {
        best = h - std::abs(local[a]);
        axis = a;
      }
    moved[axis] = local[axis] < 0.0 ? -h : h;
  } else {
    const double rad = std::hypot(local.x(), local.y());
    const double r = spec.half_extent, hh = spec.half_height;
    if (rad >= r || std::abs(local.z()) >= hh) return std::nullopt;
    const double to_side = r - rad, to_cap = hh - std::abs(local.z());
    if (to_side <= to_cap) {
      const double scale = rad > 0.0 ? r / rad : 0.0;
      if (rad > 0.0) {
        moved.x() = local.x() * scale;
        moved.y() = local.y() * scale;
      } else {
        moved.x() = r;
      }
    } else {
      moved.z() = local.z() < 0.0 ? -hh : hh;
    }
  }
  return spec.center + spec.frame * moved;
}

inline bool in_rigid_region(const Vec3& p, const Vec3& cloud_center, const AugmentationSpec& spec) {
  if (spec.kind == AnomalyKind::planar_shift) return p.dot(spec.direction) > spec.threshold;
  const Vec3 axis = spec.direction.normalized();
  const Vec3 rel = p - cloud_center;
  Vec3 e1 = axis.unitOrthogonal();
  const Vec3 e2 = axis.cross(e1);
  double phi = std::atan2(rel.dot(e2), rel.dot(e1)) - spec.sector_start;
  phi = std::fmod(phi, 2.0 * std::numbers::pi);
  if (phi < 0.0) phi += 2.0 * std::numbers::pi;
  return phi < spec.sector_width;
}

namespace detail {

inline std::vector<Vec3> apply_spec(const std::vector<Vec3>& pts, const std::vector<Vec3>& normals,
                                    const AugmentationSpec& spec) {
  std::vector<Vec3> out = pts;
  switch (spec.kind) {
    case AnomalyKind::gaussian_bump:
      for (std::size_t i = 0; i < pts.size(); ++i)
        out[i] = snap(pts[i] + bump_displacement(pts[i], normals[i], spec.center, spec.sigma, spec.amplitude));
      break;
    case AnomalyKind::sine_bulge:
      for (std::size_t i = 0; i < pts.size(); ++i)
        out[i] = snap(pts[i] + sine_displacement(pts[i], normals[i], spec.center, spec.sigma, spec.amplitude,
                                                 spec.wavelength));
      break;
    case AnomalyKind::cutoff_cube:
    case AnomalyKind::cutoff_cylinder: {
      bool touched = false;
      for (std::size_t i = 0; i < pts.size(); ++i)
        if (auto q = project_out_of_mask(pts[i], spec)) {
          out[i] = snap(*q);
          touched = true;
        }
      if (!touched) fail(ErrorCode::EmptyIntersection, "cut-off mask touches no points");
      break;
    }
    case AnomalyKind::planar_shift:
    case AnomalyKind::angular_shift: {
      const Vec3 c = centroid(pts);
      std::size_t inside = 0;
      for (const auto& p : pts) inside += in_rigid_region(p, c, spec) ? 1 : 0;
      const double ratio = static_cast<double>(inside) / static_cast<double>(pts.size());
      if (ratio < 0.1 || ratio > 0.5) fail(ErrorCode::RatioOutOfRange, "rigid region must hold 10%-50% of points");
      const Eigen::AngleAxisd rot(spec.angle, spec.direction.normalized());
      for (std::size_t i = 0; i < pts.size(); ++i) {
        if (!in_rigid_region(pts[i], c, spec)) continue;
        out[i] = spec.kind == AnomalyKind::planar_shift ? snap(pts[i] + spec.shift)
                                                         : snap(c + rot * (pts[i] - c));
      }
      break;
    }
  }
  return out;
}

inline AugmentedSample apply_fragment(const PointCloud& cloud, const AugmentationSpec& spec) {
  auto normal = snapped(cloud);
  auto moved = apply_spec(normal.points, normal.normals, spec);
  return finish_sample(std::move(normal), std::move(moved), {spec});
}

}  // namespace detail

inline AugmentedSample apply_gaussian_bump(const PointCloud& cloud, const Vec3& center, double sigma,
                                           double amplitude) {
  detail::require_normals(cloud);
  if (!(sigma > 0.0)) fail(ErrorCode::BadConfig, "sigma must be positive");
  AugmentationSpec spec;
  spec.kind = AnomalyKind::gaussian_bump;
  spec.center = center;
  spec.sigma = sigma;
  spec.amplitude = amplitude;
  return detail::apply_fragment(cloud, spec);
}

inline AugmentedSample apply_sine_bulge(const PointCloud& cloud, const Vec3& center, double sigma, double amplitude,
                                        double wavelength) {
  detail::require_normals(cloud);
  if (!(sigma > 0.0)) fail(ErrorCode::BadConfig, "sigma must be positive");
  if (!(wavelength > 0.0)) fail(ErrorCode::BadWavelength, "wavelength must be positive");
  AugmentationSpec spec;
  spec.kind = AnomalyKind::sine_bulge;
  spec.center = center;
  spec.sigma = sigma;
  spec.amplitude = amplitude;
  spec.wavelength = wavelength;
  return detail::apply_fragment(cloud, spec);
}

enum class CutoffShape { cube, cylinder };

/// Projects points inside the mask onto its nearest boundary. `frame` columns are the mask axes
/// (the cylinder axis is column 2); `half_height` is ignored for cubes.
inline AugmentedSample apply_cutoff(const PointCloud& cloud, CutoffShape shape, const Vec3& center,
                                    double half_extent, double half_height = 0.0,
                                    const Eigen::Matrix3d& frame = Eigen::Matrix3d::Identity()) {
  if (!(half_extent > 0.0)) fail(ErrorCode::BadConfig, "mask size must be positive");
  AugmentationSpec spec;
  spec.kind = shape == CutoffShape::cube ? AnomalyKind::cutoff_cube : AnomalyKind::cutoff_cylinder;
  spec.center = center;
  spec.frame = frame;
  spec.half_extent = half_extent;
  spec.half_height = shape == CutoffShape::cube ? half_extent : half_height;
  if (!(spec.half_height > 0.0)) fail(ErrorCode::BadConfig, "cylinder half-height must be positive");
  return detail::apply_fragment(cloud, spec);
}

/// Half-space translation: points with p.direction > threshold move by `shift`.
inline AugmentedSample apply_planar_shift(const PointCloud& cloud, const Vec3& direction, double threshold,
                                          const Vec3& shift) {
  AugmentationSpec spec;
  spec.kind = AnomalyKind::planar_shift;
  spec.direction = direction;
  spec.threshold = threshold;
  spec.shift = shift;
  return detail::apply_fragment(cloud, spec);
}

/// Sector rotation: points whose azimuth about `axis` (through the centroid) falls in
/// [sector_start, sector_start + sector_width) rotate by `angle` about that axis.
inline AugmentedSample apply_angular_shift(const PointCloud& cloud, const Vec3& axis, double sector_start,
                                           double sector_width, double angle) {
  AugmentationSpec spec;
  spec.kind = AnomalyKind::angular_shift;
  spec.direction = axis;
  spec.sector_start = sector_start;
  spec.sector_width = sector_width;
  spec.angle = angle;
  return detail::apply_fragment(cloud, spec);
}

/// Random-parameter ranges used by negative_augment.
struct AugmentOptions {
  std::vector<AnomalyKind> kinds{AnomalyKind::gaussian_bump, AnomalyKind::sine_bulge, AnomalyKind::cutoff_cube,
                                 AnomalyKind::cutoff_cylinder};
  double sigma_min = 0.04;
  double sigma_max = 0.08;
  double mask_min = 0.08;  // cut-off half extent range
  double mask_max = 0.2;
  double ratio_min = 0.1;  // rigid-region fraction range
  double ratio_max = 0.5;
  int max_retries = 8;

  static AugmentOptions industrial() {
    AugmentOptions o;
    o.kinds = {AnomalyKind::planar_shift, AnomalyKind::angular_shift, AnomalyKind::cutoff_cube,
               AnomalyKind::cutoff_cylinder};
    return o;
  }
};

namespace detail {

inline Eigen::Matrix3d frame_from_axis(const Vec3& axis) {
  const Vec3 z = axis.normalized();
  const Vec3 x = z.unitOrthogonal();
  Eigen::Matrix3d f;
  f.col(0) = x;
  f.col(1) = z.cross(x);
  f.col(2) = z;
  return f;
}

inline double quantile(std::vector<double> v, double q) {
  const auto k = static_cast<std::size_t>(std::clamp(q, 0.0, 1.0) * static_cast<double>(v.size() - 1));
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
  return v[k];
}

inline AugmentationSpec draw_spec(const std::vector<Vec3>& pts, const std::vector<Vec3>& normals, double amplitude,
                                  const AugmentOptions& opt, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uniform = [&](double a, double b) { return a + (b - a) * u01(rng); };
  AugmentationSpec s;
  s.kind = opt.kinds[static_cast<std::size_t>(rng() % opt.kinds.size())];
  s.seed = rng();
  const std::size_t anchor = static_cast<std::size_t>(rng() % pts.size());
  const Vec3 p = pts[anchor], n = normals[anchor];
  const double sign = u01(rng) < 0.5 ? -1.0 : 1.0;
  switch (s.kind) {
    case AnomalyKind::gaussian_bump:
      s.center = p;
      s.sigma = uniform(opt.sigma_min, opt.sigma_max);
      s.amplitude = sign * amplitude;
      break;
    case AnomalyKind::sine_bulge:
      s.center = p;
      s.sigma = uniform(opt.sigma_min, opt.sigma_max);
      s.amplitude = sign * amplitude;
      s.wavelength = uniform(2.0, 4.0) * s.sigma;
      break;
    case AnomalyKind::cutoff_cube:
    case AnomalyKind::cutoff_cylinder: {
      // The inner mask face sits `amplitude` below the surface at the anchor: a planar cut of that depth.
      s.half_extent = uniform(opt.mask_min, opt.mask_max);
      s.half_height = s.kind == AnomalyKind::cutoff_cube ? s.half_extent : uniform(opt.mask_min, opt.mask_max);
      s.frame = frame_from_axis(n);
      s.center = p + n * (s.half_height - amplitude);
      s.amplitude = amplitude;
      break;
    }
    case AnomalyKind::planar_shift:
    case AnomalyKind::angular_shift: {
      Vec3 dir;
      std::normal_distribution<double> g(0.0, 1.0);
      do dir = Vec3(g(rng), g(rng), g(rng));
      while (dir.norm() < 1e-6);
      dir.normalize();
      s.cut_ratio = uniform(opt.ratio_min, opt.ratio_max);
      s.amplitude = amplitude;
      if (s.kind == AnomalyKind::planar_shift) {
        std::vector<double> proj(pts.size());
        for (std::size_t i = 0; i < pts.size(); ++i) proj[i] = pts[i].dot(dir);
        s.direction = dir;
        s.threshold = quantile(std::move(proj), 1.0 - s.cut_ratio);
        s.shift = sign * amplitude * dir;
      } else {
        s.direction = dir;
        s.sector_start = uniform(0.0, 2.0 * std::numbers::pi);
        s.sector_width = 2.0 * std::numbers::pi * s.cut_ratio;
        s.angle = sign * amplitude;
      }
      break;
    }
  }
  return s;
}

}  // namespace detail

/// Composes `n_anomalies` random deformations on top of `cloud` (sequentially, each on the already
/// deformed points) and records the exact offsets back to the undeformed cloud.
inline AugmentedSample negative_augment(const PointCloud& cloud, std::size_t n_anomalies, double amplitude,
                                        std::uint64_t seed, const AugmentOptions& opt = {}) {
  if (opt.kinds.empty()) fail(ErrorCode::BadConfig, "no anomaly kinds enabled");
  PointCloud base = detail::snapped(cloud);
  if (!base.has_normals()) base.normals = estimate_normals(base, 16).normals;
  std::mt19937_64 rng(seed);
  std::vector<Vec3> moved = base.points;
  std::vector<AugmentationSpec> specs;
  for (std::size_t a = 0; a < n_anomalies; ++a) {
    for (int attempt = 0;; ++attempt) {
      const auto spec = detail::draw_spec(moved, base.normals, amplitude, opt, rng);
      try {
        auto next = detail::apply_spec(moved, base.normals, spec);
        bool changed = false;
        for (std::size_t i = 0; i < next.size() && !changed; ++i) changed = (next[i] - moved[i]).norm() > kMaskEps;
        if (!changed) fail(ErrorCode::EmptyIntersection, "deformation left every point in place");
        moved = std::move(next);
        specs.push_back(spec);
        break;
      } catch (const Error& e) {
        const bool retryable = e.code() == ErrorCode::EmptyIntersection || e.code() == ErrorCode::RatioOutOfRange;
        if (!retryable || attempt + 1 >= opt.max_retries) throw;
      }
    }
  }
  return detail::finish_sample(std::move(base), std::move(moved), std::move(specs));
}

inline AugmentedSample negative_augment(const PointCloud& cloud, std::size_t n_anomalies, AmplitudePreset preset,
                                        std::uint64_t seed, const AugmentOptions& opt = {}) {
  return negative_augment(cloud, n_anomalies, preset_amplitude(preset), seed, opt);
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const AugmentationSpec& s) {
  auto v3 = [](const Vec3& v) { return nlohmann::json{v.x(), v.y(), v.z()}; };
  nlohmann::json frame = nlohmann::json::array();
  for (int c = 0; c < 3; ++c) frame.push_back(v3(s.frame.col(c)));
  return {{"kind", to_string(s.kind)}, {"center", v3(s.center)}, {"sigma", s.sigma},
          {"amplitude", s.amplitude}, {"wavelength", s.wavelength}, {"frame", frame},
          {"half_extent", s.half_extent}, {"half_height", s.half_height}, {"direction", v3(s.direction)},
          {"threshold", s.threshold}, {"sector_start", s.sector_start}, {"sector_width", s.sector_width},
          {"shift", v3(s.shift)}, {"angle", s.angle}, {"cut_ratio", s.cut_ratio}, {"seed", s.seed}};
}

inline AugmentationSpec spec_from_json(const nlohmann::json& j) {
  auto v3 = [](const nlohmann::json& a) { return Vec3(a.at(0).get<double>(), a.at(1).get<double>(), a.at(2).get<double>()); };
  AugmentationSpec s;
  s.kind = parse_anomaly_kind(j.at("kind").get<std::string>());
  s.center = v3(j.at("center"));
  s.sigma = j.value("sigma", s.sigma);
  s.amplitude = j.value("amplitude", 0.0);
  s.wavelength = j.value("wavelength", 0.0);
  if (j.contains("frame"))
    for (int c = 0; c < 3; ++c) s.frame.col(c) = v3(j["frame"][c]);
  s.half_extent = j.value("half_extent", 0.0);
  s.half_height = j.value("half_height", 0.0);
  if (j.contains("direction")) s.direction = v3(j["direction"]);
  s.threshold = j.value("threshold", 0.0);
  s.sector_start = j.value("sector_start", 0.0);
  s.sector_width = j.value("sector_width", 0.0);
  if (j.contains("shift")) s.shift = v3(j["shift"]);
  s.angle = j.value("angle", 0.0);
  s.cut_ratio = j.value("cut_ratio", 0.0);
  s.seed = j.value("seed", std::uint64_t{0});
  return s;
}

// ---------------------------------------------------------------------------
// Sample bundles: <name>_normal.ply, <name>_abnormal.ply, <name>_labels.json

inline void write_bundle(const std::filesystem::path& dir, const std::string& name, const AugmentedSample& s) {
  std::filesystem::create_directories(dir);
  PlyWriteOptions opts;
  opts.double_precision = true;
  write_ply(dir / (name + "_normal.ply"), s.normal, opts);
  write_ply(dir / (name + "_abnormal.ply"), s.abnormal, opts);
  nlohmann::json labels;
  labels["offsets"] = nlohmann::json::array();
  for (const auto& o : s.offsets) labels["offsets"].push_back({o.x(), o.y(), o.z()});
  labels["mask"] = nlohmann::json::array();
  for (auto m : s.mask) labels["mask"].push_back(m != 0);
  labels["specs"] = nlohmann::json::array();
  for (const auto& sp : s.specs) labels["specs"].push_back(to_json(sp));
  std::ofstream out(dir / (name + "_labels.json"));
  if (!out) fail(ErrorCode::IoError, "cannot write labels for " + name);
  out << labels.dump();
}

inline AugmentedSample read_bundle(const std::filesystem::path& dir, const std::string& name) {
  AugmentedSample s;
  s.normal = load_pointcloud(dir / (name + "_normal.ply"));
  s.abnormal = load_pointcloud(dir / (name + "_abnormal.ply"));
  s.abnormal.normals.clear();
  const auto path = dir / (name + "_labels.json");
  std::ifstream in(path);
  if (!in) fail(ErrorCode::MissingLabels, "missing " + path.string());
  nlohmann::json j;
  try {
    in >> j;
    for (const auto& o : j.at("offsets"))
      s.offsets.emplace_back(o.at(0).get<double>(), o.at(1).get<double>(), o.at(2).get<double>());
    for (const auto& m : j.at("mask")) s.mask.push_back(m.get<bool>() ? 1 : 0);
    for (const auto& sp : j.value("specs", nlohmann::json::array())) s.specs.push_back(spec_from_json(sp));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::MalformedFile, path.string() + ": " + e.what());
  }
  if (s.offsets.size() != s.abnormal.size() || s.mask.size() != s.abnormal.size() || s.normal.size() != s.abnormal.size())
    fail(ErrorCode::CountMismatch, "bundle " + name + " has inconsistent point counts");
  return s;
}

}  // namespace patchad
