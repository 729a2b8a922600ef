#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <boost/crc.hpp>

#include "patchad/encoder.hpp"
#include "patchad/geometry.hpp"
#include "patchad/patchify.hpp"
#include "patchad/tape.hpp"

namespace patchad {

inline constexpr int kCodebookLevels = 3;
inline constexpr double kDefaultTau = 0.85;

using Feature = Eigen::Matrix<float, kFeatureDim, 1>;

struct CodebookEntry {
  Feature feature = Feature::Zero();  // unit norm
  double weight = 1.0;                // merge count n_i
  std::set<std::uint64_t> keys;       // spatial hash keys of every merged patch
};

struct Retrieval {
  std::size_t index = 0;
  double similarity = 0.0;
};

/// Per-scale store of normal patch features. Inserting a feature merges it into the first entry
/// (in insertion order) whose cosine similarity reaches tau, otherwise appends a new entry.
class Codebook {
 public:
  explicit Codebook(double tau = kDefaultTau) : tau_(tau) {
    if (!(tau > 0.0 && tau <= 1.0)) fail(ErrorCode::BadConfig, "codebook threshold must lie in (0, 1]");
  }

  double tau() const noexcept { return tau_; }
  const std::vector<CodebookEntry>& level(int l) const { return levels_.at(check(l)); }
  std::size_t size(int l) const { return level(l).size(); }
  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& l : levels_) n += l.size();
    return n;
  }

  /// Returns the index of the entry that absorbed or now holds `feature`.
  std::size_t update(int l, std::span<const double> feature, const SpatialKey& key) {
    if (feature.size() != kFeatureDim) fail(ErrorCode::ShapeMismatch, "codebook features are 32-wide");
    Eigen::Matrix<double, kFeatureDim, 1> t;
    for (int i = 0; i < kFeatureDim; ++i) t[i] = feature[static_cast<std::size_t>(i)];
    if (!t.allFinite()) fail(ErrorCode::NonFinite, "codebook feature is not finite");
    const double norm = t.norm();
    if (!(norm > 0.0)) fail(ErrorCode::NonFinite, "codebook feature has zero norm");
    t /= norm;
    auto& entries = levels_.at(check(l));
    for (std::size_t j = 0; j < entries.size(); ++j) {
      auto& e = entries[j];
      const Eigen::Matrix<double, kFeatureDim, 1> c = e.feature.cast<double>();
      const double s = c.dot(t);
      if (s < tau_) continue;
      Eigen::Matrix<double, kFeatureDim, 1> merged = (e.weight * c + s * t) / (e.weight + s);
      merged /= merged.norm();
      e.feature = merged.cast<float>();
      e.weight += s;
      e.keys.insert(key.key);
      return j;
    }
    CodebookEntry e;
    e.feature = t.cast<float>();
    e.weight = 1.0;
    e.keys.insert(key.key);
    entries.push_back(std::move(e));
    return entries.size() - 1;
  }

  std::size_t update(int l, const Eigen::VectorXd& feature, const SpatialKey& key) {
    return update(l, std::span<const double>(feature.data(), static_cast<std::size_t>(feature.size())), key);
  }

  /// Maximal-cosine entry for a unit query (ties to the lowest index).
  Retrieval retrieve(int l, std::span<const double> query) const {
    const auto& entries = level(l);
    if (entries.empty()) fail(ErrorCode::EmptyLevel, "codebook level " + std::to_string(l) + " is empty");
    if (query.size() != kFeatureDim) fail(ErrorCode::ShapeMismatch, "codebook queries are 32-wide");
    Retrieval best{0, -std::numeric_limits<double>::infinity()};
    for (std::size_t j = 0; j < entries.size(); ++j) {
      double s = 0.0;
      for (int i = 0; i < kFeatureDim; ++i) s += static_cast<double>(entries[j].feature[i]) * query[static_cast<std::size_t>(i)];
      if (s > best.similarity) best = {j, s};
    }
    return best;
  }

  /// Batched retrieval for the rows of `queries` [m, 32].
  template <typename T>
  std::vector<Retrieval> retrieve_all(int l, const Matrix<T>& queries) const {
    const auto& entries = level(l);
    if (entries.empty()) fail(ErrorCode::EmptyLevel, "codebook level " + std::to_string(l) + " is empty");
    if (queries.cols() != kFeatureDim) fail(ErrorCode::ShapeMismatch, "codebook queries are 32-wide");
    Matrix<double> bank(static_cast<Eigen::Index>(entries.size()), kFeatureDim);
    for (std::size_t j = 0; j < entries.size(); ++j)
      bank.row(static_cast<Eigen::Index>(j)) = entries[j].feature.cast<double>().transpose();
    const Matrix<double> sims = queries.template cast<double>() * bank.transpose();
    std::vector<Retrieval> out(static_cast<std::size_t>(queries.rows()));
    for (Eigen::Index r = 0; r < sims.rows(); ++r) {
      Retrieval best{0, sims(r, 0)};
      for (Eigen::Index j = 1; j < sims.cols(); ++j)
        if (sims(r, j) > best.similarity) best = {static_cast<std::size_t>(j), sims(r, j)};
      out[static_cast<std::size_t>(r)] = best;
    }
    return out;
  }

  /// Entry features of `l` selected by `rows`, as a [rows, 32] matrix.
  template <typename T>
  Matrix<T> features(int l, std::span<const Retrieval> rows) const {
    const auto& entries = level(l);
    Matrix<T> out(static_cast<Eigen::Index>(rows.size()), kFeatureDim);
    for (std::size_t r = 0; r < rows.size(); ++r)
      out.row(static_cast<Eigen::Index>(r)) = entries.at(rows[r].index).feature.template cast<T>().transpose();
    return out;
  }

  friend bool operator==(const Codebook& a, const Codebook& b) {
    if (a.tau_ != b.tau_) return false;
    for (int l = 0; l < kCodebookLevels; ++l) {
      const auto &x = a.levels_[l], &y = b.levels_[l];
      if (x.size() != y.size()) return false;
      for (std::size_t j = 0; j < x.size(); ++j)
        if (x[j].feature != y[j].feature || x[j].weight != y[j].weight || x[j].keys != y[j].keys) return false;
    }
    return true;
  }

  std::string serialize() const;
  static Codebook deserialize(const std::string& bytes);

 private:
  static std::size_t check(int l) {
    if (l < 1 || l > kCodebookLevels) fail(ErrorCode::BadConfig, "codebook level must be 1..3");
    return static_cast<std::size_t>(l - 1);
  }

  double tau_;
  std::array<std::vector<CodebookEntry>, kCodebookLevels> levels_;
};

// ---------------------------------------------------------------------------
// Scale matching

/// Sum of rank-paired dot products, truncated to the shorter list.
template <typename T>
double scale_similarity(const Matrix<T>& queries, const Matrix<T>& templates) {
  const auto m = std::min(queries.rows(), templates.rows());
  if (m == 0) fail(ErrorCode::EmptyInput, "scale similarity of empty patch lists");
  double alpha = 0.0;
  for (Eigen::Index j = 0; j < m; ++j)
    alpha += queries.row(j).template cast<double>().dot(templates.row(j).template cast<double>());
  return alpha;
}

/// 1-based level maximizing alpha / count (or raw alpha), ties to the finest level.
inline int select_scale(std::span<const double> alphas, std::span<const std::size_t> counts, bool normalize = true) {
  if (alphas.empty()) fail(ErrorCode::EmptyInput, "no levels to select from");
  if (normalize && counts.size() != alphas.size()) fail(ErrorCode::ShapeMismatch, "one count per level");
  int best = 0;
  double best_v = -std::numeric_limits<double>::infinity();
  for (std::size_t l = 0; l < alphas.size(); ++l) {
    const double v = normalize ? alphas[l] / static_cast<double>(std::max<std::size_t>(1, counts[l])) : alphas[l];
    if (v > best_v) {
      best_v = v;
      best = static_cast<int>(l);
    }
  }
  return best + 1;
}

// ---------------------------------------------------------------------------
// Serialization: "PBCB", u32 version, f64 tau, per level {u64 count, entries}, u64 CRC-64/XZ of
// everything before it. Entry = 32 x f32 feature, f64 weight, u32 key count, u64 keys.

inline constexpr std::uint32_t kCodebookVersion = 1;

using Crc64 = boost::crc_optimal<64, 0x42F0E1EBA9EA3693ULL, ~0ULL, ~0ULL, true, true>;

inline std::uint64_t crc64(std::string_view bytes) {
  Crc64 crc;
  crc.process_bytes(bytes.data(), bytes.size());
  return crc.checksum();
}

namespace detail {

template <typename U>
void append(std::string& out, U v) {
  static_assert(std::endian::native == std::endian::little, "codebook IO assumes a little-endian host");
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

struct Reader {
  const std::string& bytes;
  std::size_t pos = 0;
  template <typename U>
  U next() {
    if (pos + sizeof(U) > bytes.size()) fail(ErrorCode::CorruptFile, "codebook file is truncated");
    U v;
    std::memcpy(&v, bytes.data() + pos, sizeof(U));
    pos += sizeof(U);
    return v;
  }
};

}  // namespace detail

inline std::string Codebook::serialize() const {
  std::string out = "PBCB";
  detail::append(out, kCodebookVersion);
  detail::append(out, tau_);
  for (const auto& level : levels_) {
    detail::append(out, static_cast<std::uint64_t>(level.size()));
    for (const auto& e : level) {
      for (int i = 0; i < kFeatureDim; ++i) detail::append(out, e.feature[i]);
      detail::append(out, e.weight);
      detail::append(out, static_cast<std::uint32_t>(e.keys.size()));
      for (auto k : e.keys) detail::append(out, k);
    }
  }
  detail::append(out, crc64(out));
  return out;
}

inline Codebook Codebook::deserialize(const std::string& bytes) {
  if (bytes.size() < 4 + 4 + 8 + 8 || bytes.compare(0, 4, "PBCB") != 0)
    fail(ErrorCode::CorruptFile, "not a codebook file");
  detail::Reader r{bytes, 4};
  const auto version = r.next<std::uint32_t>();
  if (version != kCodebookVersion)
    fail(ErrorCode::VersionMismatch, "codebook version " + std::to_string(version) + " is not supported");
  const std::uint64_t stored = [&] {
    std::uint64_t v;
    std::memcpy(&v, bytes.data() + bytes.size() - 8, 8);
    return v;
  }();
  if (crc64(std::string_view(bytes).substr(0, bytes.size() - 8)) != stored)
    fail(ErrorCode::CorruptFile, "codebook checksum mismatch");
  Codebook cb(r.next<double>());
  for (auto& level : cb.levels_) {
    const auto count = r.next<std::uint64_t>();
    if (count > bytes.size()) fail(ErrorCode::CorruptFile, "implausible entry count");
    level.resize(static_cast<std::size_t>(count));
    for (auto& e : level) {
      for (int i = 0; i < kFeatureDim; ++i) e.feature[i] = r.next<float>();
      e.weight = r.next<double>();
      const auto nk = r.next<std::uint32_t>();
      for (std::uint32_t k = 0; k < nk; ++k) e.keys.insert(r.next<std::uint64_t>());
    }
  }
  if (r.pos != bytes.size() - 8) fail(ErrorCode::CorruptFile, "trailing bytes in codebook file");
  return cb;
}

inline void save_codebook(const std::filesystem::path& path, const Codebook& cb) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::IoError, "cannot write '" + path.string() + "'");
  const auto bytes = cb.serialize();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::IoError, "failed writing '" + path.string() + "'");
}

inline Codebook load_codebook(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return Codebook::deserialize(ss.str());
}

// ---------------------------------------------------------------------------
// Building from normal shapes

/// Hash cell edge for a level: twice the mean patch radius.
inline double hash_cell(const PatchSet& set, std::span<const Vec3> pts) {
  const double r = set.mean_radius(pts);
  return r > 0.0 ? 2.0 * r : 1.0;
}

/// Everything the codebook and the model need from one (canonical) cloud.
struct PreparedCloud {
  std::vector<Vec3> points;
  EncoderInput input;
  std::vector<PatchSet> patches;  // one per configured level
};

inline PreparedCloud prepare_cloud(std::vector<Vec3> points, const PatchConfig& config) {
  PreparedCloud p;
  p.input = encoder_input(points);
  p.patches = patchify_multiscale(points, config);
  p.points = std::move(points);
  return p;
}

/// Inserts every patch (level by level, in rank order) of each prepared cloud.
template <typename T>
void add_to_codebook(Codebook& cb, const PreparedCloud& cloud, ParameterSet<T>& params, FeatureMode mode) {
  Tape<T> tape;
  Var z = encode_points(tape, params, cloud.input, false);
  for (const auto& set : cloud.patches) {
    const Matrix<T> feats = tape.value(patch_features(tape, z, set, cloud.points, mode));
    const double cell = hash_cell(set, cloud.points);
    for (std::size_t j = 0; j < set.size(); ++j) {
      const Eigen::VectorXd f = feats.row(static_cast<Eigen::Index>(j)).transpose().template cast<double>();
      cb.update(set.level, f, spatial_hash(set.patches[j].center, set.level, cell));
    }
  }
}

template <typename T>
Codebook build_codebook(std::span<const PreparedCloud> clouds, ParameterSet<T>& params, FeatureMode mode,
                        double tau = kDefaultTau) {
  if (clouds.empty()) fail(ErrorCode::EmptyInput, "codebook needs at least one normal cloud");
  Codebook cb(tau);
  for (const auto& c : clouds) add_to_codebook(cb, c, params, mode);
  return cb;
}

}  // namespace patchad
