// Acceptance run: one PASS/FAIL/SKIP line per criterion, exit status 1 when any criterion fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "patchad/pipeline.hpp"

using namespace patchad;

namespace {

using Clock = std::chrono::steady_clock;
using Vec32 = Eigen::Matrix<double, kFeatureDim, 1>;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;
nlohmann::json summary = nlohmann::json::object();

void report(const std::string& name, const std::function<Outcome()>& check) {
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  if (!o.pass) ++failures;
  std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
  std::fflush(stdout);
  summary[name] = {{"pass", o.pass}, {"detail", o.detail}};
}

void skip(const std::string& name, const std::string& why) {
  std::printf("SKIP %s: %s\n", name.c_str(), why.c_str());
  summary[name] = {{"pass", nullptr}, {"detail", why}};
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// -- codebook ------------------------------------------------------------------

// Literal replay of the merge rule: float storage, double arithmetic, first entry at or above tau wins.
struct ReferenceCodebook {
  struct Entry {
    float c[kFeatureDim];
    double n;
  };
  double tau;
  std::vector<Entry> entries;
  std::size_t last = 0;

  void insert(const Vec32& raw) {
    double t[kFeatureDim], norm = 0.0;
    for (int i = 0; i < kFeatureDim; ++i) norm += raw[i] * raw[i];
    norm = std::sqrt(norm);
    for (int i = 0; i < kFeatureDim; ++i) t[i] = raw[i] / norm;
    for (std::size_t j = 0; j < entries.size(); ++j) {
      double s = 0.0;
      for (int i = 0; i < kFeatureDim; ++i) s += static_cast<double>(entries[j].c[i]) * t[i];
      if (s < tau) continue;
      double m[kFeatureDim], mn = 0.0;
      for (int i = 0; i < kFeatureDim; ++i) {
        m[i] = (entries[j].n * entries[j].c[i] + s * t[i]) / (entries[j].n + s);
        mn += m[i] * m[i];
      }
      mn = std::sqrt(mn);
      for (int i = 0; i < kFeatureDim; ++i) entries[j].c[i] = static_cast<float>(m[i] / mn);
      entries[j].n += s;
      last = j;
      return;
    }
    Entry e{};
    for (int i = 0; i < kFeatureDim; ++i) e.c[i] = static_cast<float>(t[i]);
    e.n = 1.0;
    entries.push_back(e);
    last = entries.size() - 1;
  }
};

std::vector<Vec32> unit_features(std::size_t n, std::size_t clusters, double noise, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<Vec32> centers(clusters);
  for (auto& c : centers) {
    for (int i = 0; i < kFeatureDim; ++i) c[i] = g(rng);
    c.normalize();
  }
  std::vector<Vec32> out(n);
  for (auto& v : out) {
    v = centers[rng() % clusters];
    for (int i = 0; i < kFeatureDim; ++i) v[i] += noise * g(rng);
    v.normalize();
  }
  return out;
}

std::span<const double> as_span(const Vec32& v) { return {v.data(), static_cast<std::size_t>(kFeatureDim)}; }

Outcome codebook_replay() {
  const auto feats = unit_features(10000, 40, 0.12, 1);
  Codebook cb(kDefaultTau);
  ReferenceCodebook ref{kDefaultTau, {}};
  for (std::size_t i = 0; i < feats.size(); ++i) {
    const auto got = cb.update(1, as_span(feats[i]), {i, 1});
    ref.insert(feats[i]);
    if (got != ref.last) return {false, fmt("merge decision differs at insert %zu", i)};
  }
  if (cb.size(1) != ref.entries.size())
    return {false, fmt("entry count %zu vs %zu", cb.size(1), ref.entries.size())};
  double worst_w = 0.0;
  for (std::size_t j = 0; j < ref.entries.size(); ++j) {
    worst_w = std::max(worst_w, std::abs(cb.level(1)[j].weight - ref.entries[j].n));
    for (int i = 0; i < kFeatureDim; ++i)
      if (cb.level(1)[j].feature[i] != ref.entries[j].c[i]) return {false, fmt("entry %zu feature differs", j)};
  }
  if (worst_w > 1e-9) return {false, fmt("weight error %.3g", worst_w)};

  Codebook multi;
  const auto pool = unit_features(3000, 600, 0.3, 3);
  for (std::size_t i = 0; i < pool.size(); ++i) multi.update(1 + static_cast<int>(i % 3), as_span(pool[i]), {i, 1});
  const auto queries = unit_features(300, 50, 0.5, 4);
  std::size_t checked = 0;
  for (int l = 1; l <= kCodebookLevels; ++l) {
    if (multi.size(l) > 1000) return {false, "level exceeds 1000 entries"};
    for (const auto& q : queries) {
      std::size_t best = 0;
      double best_s = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < multi.size(l); ++j) {
        const double s = multi.level(l)[j].feature.cast<double>().dot(q);
        if (s > best_s) best_s = s, best = j;
      }
      if (multi.retrieve(l, as_span(q)).index != best) return {false, fmt("retrieval differs on level %d", l)};
      ++checked;
    }
  }
  return {true, fmt("%zu entries, max weight error %.2g; %zu retrievals exact", cb.size(1), worst_w, checked)};
}

// -- geometry -------------------------------------------------------------------

// Recomputes every minimum distance from scratch at each step.
std::vector<Index> fps_oracle(const std::vector<Vec3>& pts, Index start) {
  std::vector<Index> sel{start};
  std::vector<char> used(pts.size(), 0);
  used[start] = 1;
  while (sel.size() < pts.size()) {
    double best = -1.0;
    Index arg = 0;
    for (Index i = 0; i < pts.size(); ++i) {
      if (used[i]) continue;
      double m = std::numeric_limits<double>::infinity();
      for (Index s : sel) m = std::min(m, (pts[i] - pts[s]).squaredNorm());
      if (m > best) best = m, arg = i;
    }
    sel.push_back(arg);
    used[arg] = 1;
  }
  return sel;
}

Outcome fps_exact() {
  std::size_t cases = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t n = 1 + rng() % 128;
    // Every other seed uses a coarse lattice so distance ties are frequent.
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<Vec3> pts(n);
    for (auto& p : pts)
      p = seed % 2 ? Vec3(std::round(u(rng) * 3), std::round(u(rng) * 3), std::round(u(rng) * 3)) : Vec3(u(rng), u(rng), u(rng));
    const auto full = fps_oracle(pts, seeded_start(seed, n));
    for (std::size_t k = 1; k <= n; ++k) {
      const auto got = farthest_point_sampling(pts, k, seed);
      if (!std::equal(got.begin(), got.end(), full.begin(), full.begin() + static_cast<std::ptrdiff_t>(k)) ||
          got.size() != k)
        return {false, fmt("seed %llu n=%zu k=%zu differs", static_cast<unsigned long long>(seed), n, k)};
      ++cases;
    }
  }
  return {true, fmt("%zu (seed, k) cases exact", cases)};
}

// -- metrics --------------------------------------------------------------------

double pairwise_auc(const std::vector<double>& s, const std::vector<std::uint8_t>& l) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (l[i] && !l[j]) {
        pairs += 1.0;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return wins / pairs;
}

Outcome auc_exact() {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng() % 999;
    const int levels = 1 + static_cast<int>(rng() % 20);
    std::vector<double> s(n);
    std::vector<std::uint8_t> l(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng() % static_cast<std::uint64_t>(levels)) / levels;
      l[i] = rng() % 3 == 0;
    }
    l[0] = 1;
    l[1] = 0;
    if (auc_roc(s, l) != pairwise_auc(s, l)) return {false, fmt("instance %d differs", t)};
  }
  const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
  const std::vector<std::uint8_t> l{0, 0, 1, 1};
  const double ex = auc_roc(s, l);
  return {ex == 0.75, fmt("100 instances exact; worked example %.17g", ex)};
}

// -- model ----------------------------------------------------------------------

Outcome gradient_check() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (FeatureMode mode : {FeatureMode::mean_point, FeatureMode::pooling}) {
    auto ps = make_model_params<double>(30);
    std::mt19937_64 rng(31);
    std::normal_distribution<double> g(0.0, 0.05);
    // Nonzero biases so every path carries signal.
    for (auto& p : ps)
      if (p.value.rows() == 1)
        for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] += g(rng);
    const PatchConfig four{PatchStrategy::multi_scale_spheres, {{4, 16}}, 3};
    const auto shape = gen_shape(ShapeKind::torus, 128, 26);
    const PreparedCloud cloud = prepare_cloud({shape.points.begin(), shape.points.begin() + 64}, four);
    if (cloud.patches.front().size() != 4) return {false, "toy instance lacks 4 patches"};
    const PreparedCloud normal[] = {prepare_cloud(gen_shape(ShapeKind::torus, 128, 27).points, four)};
    const auto codebook = build_codebook<double>(normal, ps, mode);
    FusionOptions opts;
    opts.feature_mode = mode;
    opts.attention_residual = true;
    std::uniform_real_distribution<double> u(-0.05, 0.05);
    Matrix<double> gt(64, 3), mask(64, 1);
    for (Eigen::Index i = 0; i < 64; ++i) {
      mask(i, 0) = i % 3 == 0;
      for (int c = 0; c < 3; ++c) gt(i, c) = mask(i, 0) ? u(rng) : 0.0;
    }
    worst = std::max(worst, grad_check(ps, [&](Tape<double>& tape) {
      const auto pred = forward(tape, ps, codebook, cloud, opts, true);
      return loss_total(tape, pred.offsets, pred.probs, gt, mask, LossWeights{});
    }));
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-4 && secs <= 60.0, fmt("max relative error %.3g, %.1f s", worst, secs)};
}

Outcome translation_invariance() {
  auto ps = make_model_params<double>(5);
  const auto cloud = gen_shape(ShapeKind::torus, 2048, 6);
  auto moved = cloud.points;
  for (auto& p : moved) p += Vec3(5, -3, 2);
  const auto cfg = PatchConfig::shapenet();
  const PreparedCloud a[] = {prepare_cloud(cloud.points, cfg)};
  const PreparedCloud b[] = {prepare_cloud(moved, cfg)};
  // A threshold near 1 keeps nearly every patch as its own entry, so the comparison covers all patches.
  const double tau = 0.999999;
  const auto ca = build_codebook<double>(a, ps, FeatureMode::mean_point, tau);
  const auto cb = build_codebook<double>(b, ps, FeatureMode::mean_point, tau);
  double worst = 0.0;
  for (int l = 1; l <= kCodebookLevels; ++l) {
    if (ca.size(l) != cb.size(l)) return {false, fmt("level %d sizes %zu vs %zu", l, ca.size(l), cb.size(l))};
    for (std::size_t j = 0; j < ca.size(l); ++j)
      worst = std::max(worst, static_cast<double>(
                                  (ca.level(l)[j].feature - cb.level(l)[j].feature).cwiseAbs().maxCoeff()));
  }
  return {worst <= 1e-6, fmt("%zu entries, max feature difference %.3g", ca.total_size(), worst)};
}

Outcome augmentation_exact() {
  AugmentOptions all;
  all.kinds = {AnomalyKind::gaussian_bump, AnomalyKind::sine_bulge,   AnomalyKind::cutoff_cube,
               AnomalyKind::cutoff_cylinder, AnomalyKind::planar_shift, AnomalyKind::angular_shift};
  std::size_t anomalous = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto cloud = normalize_to_canonical(gen_shape(static_cast<ShapeKind>(seed % 5), 512, seed)).first;
    const auto s = negative_augment(cloud, 1 + seed % 3, seed % 2 ? 0.1 : 0.01, seed, all);
    for (std::size_t i = 0; i < s.normal.size(); ++i) {
      if (s.abnormal.points[i] + s.offsets[i] != s.normal.points[i])
        return {false, fmt("sample %llu point %zu inexact", static_cast<unsigned long long>(seed), i)};
      if ((s.mask[i] != 0) != (s.offsets[i].norm() > 1e-9))
        return {false, fmt("sample %llu point %zu mask mismatch", static_cast<unsigned long long>(seed), i)};
    }
    anomalous += s.anomalous_count();
  }
  return {true, fmt("1000 samples exact, %zu anomalous points", anomalous)};
}

Outcome loss_values() {
  auto row = [](double x, double y, double z) {
    Matrix<double> m(1, 3);
    m << x, y, z;
    return m;
  };
  const double aligned = loss_sim(row(1, 2, 3), row(2, 4, 6));
  const double anti = loss_sim(row(1, 2, 3), row(-1, -2, -3));
  const double ortho = loss_sim(row(1, 0, 0), row(0, 1, 0));
  Matrix<double> half = Matrix<double>::Constant(8, 1, 0.5), labels(8, 1);
  labels << 0, 1, 1, 0, 1, 0, 0, 1;
  const double bce = loss_bce(half, labels);
  const double total = loss_total(0.3, -1.0, 0.7, LossWeights{});
  const bool ok = std::abs(aligned + 1.0) <= 1e-5 && std::abs(anti) <= 1e-5 && std::abs(ortho + 0.5) <= 1e-5 &&
                  std::abs(bce - std::log(2.0)) <= 1e-6 && std::abs(total - 0.15) <= 4 * std::numeric_limits<double>::epsilon();
  return {ok, fmt("sim %.6g/%.6g/%.6g, bce %.9g, total %.17g", aligned, anti, ortho, bce, total)};
}

// -- synthetic suite --------------------------------------------------------------

struct SuiteRun {
  std::vector<ClassRun> runs;
  double seconds = 0.0;
};

SuiteRun run_suite(const PipelineConfig& cfg, const std::string& label) {
  SuiteRun out;
  const auto t0 = Clock::now();
  for (auto kind : cfg.suite.classes) {
    const auto data = make_class_data(kind, cfg.suite, cfg.train.augment, cfg.seed);
    auto run = run_class(data, cfg);
    std::fprintf(stderr, "[%s] %s: point %.4f object %.4f (train %.0f s, eval %.0f s)\n", label.c_str(),
                 data.name.c_str(), run.metrics.point_auc_roc, run.metrics.object_auc_roc, run.train_seconds,
                 run.eval_seconds);
    out.runs.push_back(std::move(run));
  }
  out.seconds = seconds_since(t0);
  return out;
}

ClassMetrics suite_mean(const SuiteRun& s) {
  std::vector<ClassMetrics> all;
  for (const auto& r : s.runs) all.push_back(r.metrics);
  return make_report(all).mean;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  bool quick = false, nightly = false;
  int epochs = 0;
  std::string json_out;
  app.add_flag("--quick", quick, "Skip the synthetic training runs");
  app.add_flag("--nightly", nightly, "Also run the ablation trend");
  app.add_option("--epochs", epochs, "Override the training epochs (diagnostics only)");
  app.add_option("--json", json_out, "Write the criterion summary as JSON");
  CLI11_PARSE(app, argc, argv);

  report("gradient_check", gradient_check);
  report("codebook_oracle", codebook_replay);
  report("fps_oracle", fps_exact);
  report("auc_oracle", auc_exact);
  report("translation_invariance", translation_invariance);
  report("augmentation_exactness", augmentation_exact);
  report("loss_unit_values", loss_values);

  auto cfg = PipelineConfig::from_preset(Preset::shapenet, 0);
  if (epochs > 0) cfg.train.epochs = epochs;
  if (quick) {
    skip("synthetic_point_auc", "--quick");
    skip("synthetic_object_auc", "--quick");
    skip("synthetic_wall_time", "--quick");
    skip("loss_decreases", "--quick");
  } else {
    const auto suite = run_suite(cfg, "suite");
    const auto mean = suite_mean(suite);
    nlohmann::json per_class = nlohmann::json::array();
    for (const auto& r : suite.runs) per_class.push_back(to_json(r.metrics));
    summary["synthetic_classes"] = per_class;
    report("synthetic_point_auc", [&] {
      return Outcome{mean.point_auc_roc >= 0.80, fmt("mean point AUC-ROC %.4f (threshold 0.80)", mean.point_auc_roc)};
    });
    report("synthetic_object_auc", [&] {
      return Outcome{mean.object_auc_roc >= 0.85,
                     fmt("mean object AUC-ROC %.4f (threshold 0.85)", mean.object_auc_roc)};
    });
    report("synthetic_wall_time", [&] {
      return Outcome{suite.seconds <= 900.0, fmt("%.0f s for %zu classes (limit 900 s)", suite.seconds, suite.runs.size())};
    });
    report("loss_decreases", [&] {
      const int at = std::min(200, cfg.train.epochs);
      std::string detail;
      bool ok = true;
      for (const auto& r : suite.runs) {
        const double first = r.log.front().loss.total, later = r.log[static_cast<std::size_t>(at - 1)].loss.total;
        ok = ok && later < first;
        detail += fmt("%s %.4f->%.4f ", r.metrics.name.c_str(), first, later);
      }
      return Outcome{ok, fmt("epoch 1 -> epoch %d: ", at) + detail};
    });
  }

  if (!nightly) {
    skip("ablation_trend", "nightly only (--nightly)");
  } else {
    report("ablation_trend", [&] {
      double multi = 0.0;
      std::string detail;
      std::vector<std::pair<std::string, double>> singles;
      for (const auto& v : ablation_variants(cfg)) {
        if (v.axis != "strategy") continue;
        const double auc = suite_mean(run_suite(v.config, v.name)).point_auc_roc;
        detail += fmt("%s %.4f ", v.name.c_str(), auc);
        if (v.config.train.patch.strategy == PatchStrategy::multi_scale_spheres) multi = auc;
        else singles.emplace_back(v.name, auc);
      }
      bool ok = true;
      for (const auto& [name, auc] : singles) ok = ok && multi >= auc - 0.01;
      return Outcome{ok, detail};
    });
  }

  if (!json_out.empty()) std::ofstream(json_out) << summary.dump(2) << "\n";
  return failures == 0 ? 0 : 1;
}
