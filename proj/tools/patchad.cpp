// Command-line front end: data generation, augmentation, training, scoring and evaluation.
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "patchad/pipeline.hpp"

namespace fs = std::filesystem;
using namespace patchad;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string preset;
};

PipelineConfig resolve(const Globals& g) {
  std::optional<Preset> preset;
  if (!g.preset.empty()) preset = parse_preset(g.preset);
  if (!g.config.empty()) return load_pipeline_config(g.config, preset, g.seed);
  auto c = PipelineConfig::from_preset(preset.value_or(Preset::shapenet), g.seed.value_or(0));
  c.validate();
  return c;
}

std::vector<fs::path> list_files(const fs::path& dir, const std::string& suffix) {
  if (!fs::is_directory(dir)) fail(ErrorCode::IoError, "'" + dir.string() + "' is not a directory");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (e.is_regular_file() && name.size() > suffix.size() && name.ends_with(suffix)) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<fs::path> cloud_inputs(const fs::path& p) {
  if (!fs::is_directory(p)) return {p};
  std::vector<fs::path> out;
  for (const auto* ext : {".ply", ".xyz", ".obj"})
    for (auto& f : list_files(p, ext)) out.push_back(f);
  std::sort(out.begin(), out.end());
  if (out.empty()) fail(ErrorCode::EmptyInput, "no point clouds in '" + p.string() + "'");
  return out;
}

std::vector<PointCloud> load_clouds(const fs::path& p) {
  std::vector<PointCloud> out;
  for (const auto& f : cloud_inputs(p)) out.push_back(load_pointcloud(f));
  return out;
}

std::string index_name(std::size_t i) {
  std::ostringstream s;
  s << std::setw(4) << std::setfill('0') << i;
  return s.str();
}

struct Model {
  ParameterSet<float> params = make_model_params<float>(0);
  InferenceConfig inference;
};

Model load_model(const fs::path& checkpoint, const PipelineConfig& cfg) {
  Model m;
  m.inference = cfg.inference();
  const auto meta = load_checkpoint(checkpoint, m.params);
  if (meta.contains("patch")) m.inference.patch = patch_config_from_json(meta["patch"], m.inference.patch);
  if (meta.contains("fusion")) m.inference.fusion = fusion_from_json(meta["fusion"]);
  return m;
}

void print_metrics_table(const std::vector<std::pair<std::string, ClassMetrics>>& rows) {
  std::printf("%-28s %10s %10s %10s %10s\n", "variant", "point_roc", "point_pr", "object_roc", "object_pr");
  for (const auto& [name, m] : rows)
    std::printf("%-28s %10.4f %10.4f %10.4f %10.4f\n", name.c_str(), m.point_auc_roc, m.point_auc_pr,
                m.object_auc_roc, m.object_auc_pr);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Patch-level point cloud anomaly detection"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed_value = 0;
  app.add_option("--config", g.config, "Pipeline configuration (JSON)")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed_value, "Random seed (overrides the config)");
  app.add_option("--preset", g.preset, "Patch preset")->check(CLI::IsMember({"shapenet", "real3d", "industrial"}));

  // gen
  auto* gen = app.add_subcommand("gen", "Generate the synthetic suite (normal clouds per class)");
  std::string gen_out;
  std::vector<std::string> gen_classes;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--class", gen_classes, "Shape classes (default: config suite)");

  // augment
  auto* aug = app.add_subcommand("augment", "Inject synthetic anomalies and write labeled bundles");
  std::string aug_in, aug_out, aug_kind, aug_amp;
  std::size_t aug_count = 0;
  aug->add_option("--input", aug_in, "Normal cloud or directory of clouds")->required();
  aug->add_option("--out", aug_out, "Bundle directory")->required();
  aug->add_option("--kind", aug_kind, "Anomaly kind (default: all configured kinds)");
  aug->add_option("--amplitude", aug_amp, "small, large or a number (default: alternate small/large)");
  aug->add_option("--count", aug_count, "Anomalies per sample (default: random in the suite range)");

  // build-codebook
  auto* bcb = app.add_subcommand("build-codebook", "Build a patch codebook from normal clouds");
  std::string bcb_train, bcb_ckpt, bcb_out;
  bcb->add_option("--train", bcb_train, "Normal cloud directory")->required();
  bcb->add_option("--checkpoint", bcb_ckpt, "Encoder checkpoint (default: seeded initialization)");
  bcb->add_option("--out", bcb_out, "Codebook file")->required();

  // train
  auto* trn = app.add_subcommand("train", "Train a model on normal clouds");
  std::string trn_train, trn_out;
  int trn_epochs = 0;
  trn->add_option("--train", trn_train, "Normal cloud directory")->required();
  trn->add_option("--out", trn_out, "Output directory (model.ckpt, codebook.bin, train_log.csv)")->required();
  trn->add_option("--epochs", trn_epochs, "Epochs (overrides the config)")->check(CLI::PositiveNumber);

  // score
  auto* scr = app.add_subcommand("score", "Score one point cloud");
  std::string scr_ckpt, scr_cb, scr_in, scr_heat, scr_json;
  scr->add_option("--checkpoint", scr_ckpt, "Model checkpoint")->required();
  scr->add_option("--codebook", scr_cb, "Codebook file")->required();
  scr->add_option("--input", scr_in, "Point cloud")->required();
  scr->add_option("--heatmap", scr_heat, "Heatmap PLY output");
  scr->add_option("--json", scr_json, "Per-point scores as JSON");

  // eval
  auto* evl = app.add_subcommand("eval", "Evaluate a model on labeled bundles");
  std::string evl_ckpt, evl_cb, evl_test, evl_clean, evl_name = "class", evl_out, evl_heat;
  evl->add_option("--checkpoint", evl_ckpt, "Model checkpoint")->required();
  evl->add_option("--codebook", evl_cb, "Codebook file")->required();
  evl->add_option("--test", evl_test, "Bundle directory")->required();
  evl->add_option("--clean", evl_clean, "Directory of anomaly-free test clouds");
  evl->add_option("--name", evl_name, "Class name in the report");
  evl->add_option("--out", evl_out, "Report directory (report.csv, report.json)")->required();
  evl->add_option("--heatmaps", evl_heat, "Heatmap output directory");

  // inspect-codebook
  auto* icb = app.add_subcommand("inspect-codebook", "Print codebook statistics as JSON");
  std::string icb_path;
  icb->add_option("codebook", icb_path, "Codebook file")->required();

  // ablate
  auto* abl = app.add_subcommand("ablate", "Sweep patch strategies and feature modes on synthetic data");
  std::string abl_class = "sphere", abl_out;
  int abl_epochs = 0;
  abl->add_option("--class", abl_class, "Shape class");
  abl->add_option("--epochs", abl_epochs, "Epochs per variant (overrides the config)")->check(CLI::PositiveNumber);
  abl->add_option("--out", abl_out, "Comparison table CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error code=UsageError message=" << std::quoted(e.what()) << "\n";
    return 2;
  }
  if (*seed_opt) g.seed = seed_value;

  try {
    const PipelineConfig cfg = resolve(g);
    const std::uint64_t seed = cfg.seed;

    if (*gen) {
      SuiteConfig suite = cfg.suite;
      if (!gen_classes.empty()) {
        suite.classes.clear();
        for (const auto& c : gen_classes) suite.classes.push_back(parse_shape_kind(c));
      }
      suite.validate();
      for (auto kind : suite.classes) {
        const auto k = static_cast<std::uint64_t>(kind);
        const fs::path base = fs::path(gen_out) / std::string(to_string(kind));
        std::uint64_t draw = 0;
        auto emit = [&](const fs::path& dir, std::size_t n) {
          fs::create_directories(dir);
          for (std::size_t i = 0; i < n; ++i)
            write_ply(dir / (index_name(i) + ".ply"), gen_shape(kind, suite.points, mix_seed(seed, k, draw++)));
        };
        emit(base / "train", suite.train_clouds);
        emit(base / "test_normal", suite.test_anomalous);
        emit(base / "test_clean", suite.test_clean);
      }
      std::cout << "wrote " << suite.classes.size() << " classes to " << gen_out << "\n";
    } else if (*aug) {
      AugmentOptions opts = cfg.train.augment;
      if (!aug_kind.empty()) opts.kinds = {parse_anomaly_kind(aug_kind)};
      std::optional<double> amplitude;
      std::optional<AmplitudePreset> preset;
      if (aug_amp == "small") preset = AmplitudePreset::small;
      else if (aug_amp == "large") preset = AmplitudePreset::large;
      else if (!aug_amp.empty()) {
        try {
          amplitude = std::stod(aug_amp);
        } catch (const std::exception&) {
          fail(ErrorCode::UsageError, "amplitude must be small, large or a number");
        }
      }
      std::mt19937_64 rng(mix_seed(seed, 0xA11CE));
      std::uniform_int_distribution<std::size_t> count(cfg.suite.min_anomalies, cfg.suite.max_anomalies);
      const auto inputs = cloud_inputs(aug_in);
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        const auto cloud = load_pointcloud(inputs[i]);
        const std::size_t n = aug_count > 0 ? aug_count : count(rng);
        const std::uint64_t s = rng();
        const auto sample = amplitude ? negative_augment(cloud, n, *amplitude, s, opts)
                                      : negative_augment(cloud, n,
                                                         preset.value_or(i % 2 == 0 ? AmplitudePreset::small
                                                                                    : AmplitudePreset::large),
                                                         s, opts);
        write_bundle(aug_out, inputs[i].stem().string(), sample);
      }
      std::cout << "wrote " << inputs.size() << " bundles to " << aug_out << "\n";
    } else if (*bcb) {
      Model m;
      m.inference = cfg.inference();
      m.params = make_model_params<float>(seed);
      if (!bcb_ckpt.empty()) m = load_model(bcb_ckpt, cfg);
      const auto clouds = load_clouds(bcb_train);
      const auto prepared = prepare_normals(clouds, m.inference.patch);
      const auto cb = build_codebook<float>(prepared, m.params, m.inference.fusion.feature_mode, cfg.train.tau);
      save_codebook(bcb_out, cb);
      std::cout << "codebook entries " << cb.total_size() << "\n";
    } else if (*trn) {
      TrainConfig tc = cfg.train;
      if (trn_epochs > 0) tc.epochs = trn_epochs;
      fs::create_directories(trn_out);
      tc.checkpoint_path = fs::path(trn_out) / "model.ckpt";
      tc.log_path = fs::path(trn_out) / "train_log.csv";
      const auto clouds = load_clouds(trn_train);
      auto result = train<float>(clouds, tc, make_model_params<float>(tc.seed), [&](const EpochLog& e) {
        if (e.epoch == 1 || e.epoch % 10 == 0 || e.epoch == tc.epochs)
          std::cout << "epoch " << e.epoch << " loss " << e.loss.total << "\n" << std::flush;
      });
      save_codebook(fs::path(trn_out) / "codebook.bin", result.codebook);
      std::cout << "wrote " << trn_out << "\n";
    } else if (*scr) {
      auto m = load_model(scr_ckpt, cfg);
      const auto cb = load_codebook(scr_cb);
      const auto cloud = load_pointcloud(scr_in);
      const auto inf = infer(m.params, cb, cloud, m.inference);
      if (!scr_heat.empty()) export_heatmap(cloud, inf.scores.points, scr_heat);
      if (!scr_json.empty()) {
        std::ofstream out(scr_json);
        if (!out) fail(ErrorCode::IoError, "cannot write '" + scr_json + "'");
        out << nlohmann::json{{"object_score", inf.scores.object}, {"level", inf.level}, {"points", inf.scores.points}}
                   .dump();
      }
      std::cout << "object_score " << inf.scores.object << "\n";
    } else if (*evl) {
      auto m = load_model(evl_ckpt, cfg);
      const auto cb = load_codebook(evl_cb);
      std::vector<TestSample> samples;
      for (const auto& f : list_files(evl_test, "_labels.json")) {
        const auto fname = f.filename().string();
        const auto name = fname.substr(0, fname.size() - std::string("_labels.json").size());
        auto b = read_bundle(evl_test, name);
        samples.push_back({name, std::move(b.abnormal), std::move(b.mask)});
      }
      if (!evl_clean.empty())
        for (const auto& f : cloud_inputs(evl_clean)) {
          auto c = load_pointcloud(f);
          c.normals.clear();
          std::vector<std::uint8_t> none(c.size(), 0);
          samples.push_back({"clean_" + f.stem().string(), std::move(c), std::move(none)});
        }
      if (!evl_heat.empty()) fs::create_directories(evl_heat);
      const auto metrics = evaluate_class<float>(evl_name, m.params, cb, samples, m.inference, evl_heat);
      fs::create_directories(evl_out);
      const auto report = make_report({metrics}, config_hash(cfg));
      write_report(report, fs::path(evl_out) / "report.csv", fs::path(evl_out) / "report.json");
      print_metrics_table({{evl_name, metrics}});
    } else if (*icb) {
      const auto cb = load_codebook(icb_path);
      nlohmann::json j = {{"tau", cb.tau()}, {"total", cb.total_size()}};
      j["levels"] = nlohmann::json::array();
      for (int l = 1; l <= kCodebookLevels; ++l) j["levels"].push_back(cb.size(l));
      std::cout << j.dump(2) << "\n";
    } else if (*abl) {
      PipelineConfig base = cfg;
      if (abl_epochs > 0) base.train.epochs = abl_epochs;
      const auto data = make_class_data(parse_shape_kind(abl_class), base.suite, base.train.augment, seed);
      std::vector<std::pair<std::string, ClassMetrics>> rows;
      std::ofstream csv;
      if (!abl_out.empty()) {
        csv.open(abl_out);
        if (!csv) fail(ErrorCode::IoError, "cannot write '" + abl_out + "'");
        csv << "axis,variant,point_auc_roc,point_auc_pr,object_auc_roc,object_auc_pr\n";
      }
      for (const auto& v : ablation_variants(base)) {
        const auto run = run_class(data, v.config);
        rows.push_back({v.axis + ":" + v.name, run.metrics});
        if (csv)
          csv << v.axis << ',' << v.name << ',' << run.metrics.point_auc_roc << ',' << run.metrics.point_auc_pr << ','
              << run.metrics.object_auc_roc << ',' << run.metrics.object_auc_pr << "\n";
        std::cerr << "done " << rows.back().first << "\n";
      }
      print_metrics_table(rows);
    }
  } catch (const Error& e) {
    const std::string msg = e.what();
    const auto colon = msg.find(": ");
    std::cerr << "error code=" << to_string(e.code())
              << " message=" << std::quoted(colon == std::string::npos ? msg : msg.substr(colon + 2)) << "\n";
    return e.code() == ErrorCode::UsageError ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error code=Internal message=" << std::quoted(e.what()) << "\n";
    return 1;
  }
  return 0;
}
