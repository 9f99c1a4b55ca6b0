// Command-line front end: synthetic data generation, corruption, training,
// full-volume inference, evaluation, weak-supervision accuracy and timing
// benchmarks. Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tubefield/caseio.hpp"
#include "tubefield/checkpoint.hpp"
#include "tubefield/metrics.hpp"
#include "tubefield/pipeline.hpp"
#include "tubefield/points.hpp"
#include "tubefield/skeleton.hpp"
#include "tubefield/synthtree.hpp"
#include "tubefield/toml_lite.hpp"

namespace fs = std::filesystem;
using namespace tubefield;

namespace {

const std::set<std::pair<std::string, std::string>> kKnownKeys = {
    {"synth", "dims"},          {"synth", "depth"},
    {"synth", "children"},      {"synth", "trunk_radius"},
    {"synth", "radius_decay"},  {"synth", "branch_min"},
    {"synth", "branch_max"},    {"synth", "bend_jitter"},
    {"synth", "class_count"},   {"synth", "segment_count"},
    {"synth", "seed"},          {"synth", "breaks_min"},
    {"synth", "breaks_max"},    {"synth", "min_nodes"},
    {"model", "d"},             {"model", "K"},
    {"model", "R"},             {"model", "C"},
    {"model", "grid"},          {"model", "descriptor_r"},
    {"model", "fourier_bands"}, {"model", "fusion"},
    {"train", "epochs"},        {"train", "batch_size"},
    {"train", "learning_rate"}, {"train", "lambda_bce"},
    {"train", "lambda_dice"},   {"train", "supervision"},
    {"train", "n_surface"},     {"train", "n_skeleton"},
    {"train", "q_repair"},      {"train", "q_label"},
    {"train", "q_segment"},     {"train", "p_near"},
    {"train", "weak_min_nodes"},{"train", "seed"},
    {"train", "threads"},       {"infer", "chunk"},
    {"infer", "threads"},
};

void validate_keys(const TomlConfig& cfg) {
  for (const auto& key : cfg.keys()) {
    if (!kKnownKeys.count(key))
      throw CLI::ValidationError("config", "unknown config key [" + key.first +
                                               "] " + key.second);
  }
}

TreeSpec tree_spec_from(const TomlConfig& cfg) {
  TreeSpec s;
  int dims = static_cast<int>(cfg.get_int("synth", "dims", 64));
  s.dims = {dims, dims, dims};
  s.depth = static_cast<int>(cfg.get_int("synth", "depth", 3));
  s.children_per_node = static_cast<int>(cfg.get_int("synth", "children", 2));
  s.trunk_radius = cfg.get_double("synth", "trunk_radius", 2.5);
  s.radius_decay = cfg.get_double("synth", "radius_decay", 0.8);
  s.branch_length_range = {cfg.get_double("synth", "branch_min", 8.0),
                           cfg.get_double("synth", "branch_max", 12.0)};
  s.bend_jitter = cfg.get_double("synth", "bend_jitter", 0.35);
  s.class_count = static_cast<int>(cfg.get_int("synth", "class_count", 7));
  s.segment_count = static_cast<int>(cfg.get_int("synth", "segment_count", 6));
  s.seed = static_cast<uint64_t>(cfg.get_int("synth", "seed", 0));
  return s;
}

Hyper hyper_from(const TomlConfig& cfg, const TreeSpec& synth) {
  Hyper h;
  h.d = static_cast<int>(cfg.get_int("model", "d", 32));
  h.K = static_cast<int>(cfg.get_int("model", "K", 8));
  h.R = static_cast<int>(cfg.get_int("model", "R", 64));
  h.C = static_cast<int>(cfg.get_int("model", "C", h.d));
  h.grid = static_cast<int>(cfg.get_int("model", "grid", 32));
  h.descriptor_r = static_cast<int>(cfg.get_int("model", "descriptor_r", 2));
  h.fourier_bands = static_cast<int>(cfg.get_int("model", "fourier_bands", 10));
  h.fusion = fusion_mode_from_string(cfg.get_string("model", "fusion", "ssa"));
  h.tree_classes = synth.class_count;
  h.segment_classes = synth.segment_count;
  return h;
}

TrainConfig train_config_from(const TomlConfig& cfg) {
  TrainConfig t;
  t.hyper = hyper_from(cfg, tree_spec_from(cfg));
  t.epochs = static_cast<int>(cfg.get_int("train", "epochs", 15));
  t.batch_size = static_cast<int>(cfg.get_int("train", "batch_size", 16));
  t.learning_rate = cfg.get_double("train", "learning_rate", 1e-4);
  t.lambda_bce = cfg.get_double("train", "lambda_bce", 0.5);
  t.lambda_dice = cfg.get_double("train", "lambda_dice", 0.5);
  std::string sup = cfg.get_string("train", "supervision", "full");
  if (sup == "full")
    t.supervision = Supervision::full;
  else if (sup == "weak")
    t.supervision = Supervision::weak;
  else
    throw CLI::ValidationError("config", "train.supervision must be full|weak");
  t.n_surface = static_cast<int>(cfg.get_int("train", "n_surface", 2048));
  t.n_skeleton = static_cast<int>(cfg.get_int("train", "n_skeleton", 512));
  t.q_repair = static_cast<int>(cfg.get_int("train", "q_repair", 1024));
  t.q_label = static_cast<int>(cfg.get_int("train", "q_label", 1024));
  t.q_segment = static_cast<int>(cfg.get_int("train", "q_segment", 1024));
  t.p_near = cfg.get_double("train", "p_near", 0.8);
  t.weak_min_nodes = static_cast<int>(cfg.get_int("train", "weak_min_nodes", 8));
  t.seed = static_cast<uint64_t>(cfg.get_int("train", "seed", 0));
  t.threads = static_cast<int>(cfg.get_int("train", "threads", 1));
  return t;
}

std::vector<std::string> list_case_dirs(const std::string& data_dir) {
  std::vector<std::string> dirs;
  for (const auto& e : fs::directory_iterator(data_dir))
    if (e.is_directory() && fs::exists(e.path() / "manifest.json"))
      dirs.push_back(e.path().string());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty())
    throw std::runtime_error("no case directories under " + data_dir);
  return dirs;
}

void write_json_file(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << j.dump(2) << '\n';
}

double now_seconds(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

int cmd_synth(const std::string& config_path, const std::string& out_dir,
              int n_cases, int64_t seed_override) {
  TomlConfig cfg = TomlConfig::parse_file(config_path);
  validate_keys(cfg);
  TreeSpec spec = tree_spec_from(cfg);
  uint64_t seed = seed_override >= 0 ? uint64_t(seed_override) : spec.seed;
  std::vector<SyntheticCase> cases = generate_split(spec, n_cases, seed);
  for (int i = 0; i < n_cases; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "case_%04d", i);
    save_case(cases[i], (fs::path(out_dir) / name).string());
  }
  std::cout << "wrote " << n_cases << " cases to " << out_dir << std::endl;
  return 0;
}

int cmd_corrupt(const std::string& case_dir, int n_breaks, int min_nodes,
                uint64_t seed) {
  VoxelVolume complete = read_volume(case_dir + "/complete.vvol");
  CorruptResult res = corrupt(complete, n_breaks, min_nodes, seed);
  save_corruption(case_dir, res.volume, res.records, n_breaks, min_nodes, seed);
  std::cout << "applied " << res.records.size() << "/" << n_breaks
            << " breaks to " << case_dir << std::endl;
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_ckpt, const std::string& history_path,
              int64_t seed_override) {
  TomlConfig cfg = TomlConfig::parse_file(config_path);
  validate_keys(cfg);
  TrainConfig tc = train_config_from(cfg);
  if (seed_override >= 0) tc.seed = uint64_t(seed_override);
  std::vector<TrainCase> cases;
  for (const auto& dir : list_case_dirs(data_dir))
    cases.push_back(load_train_case(dir, true));
  TrainResult result = train(tc, cases);
  save_checkpoint(result.params, out_ckpt);
  if (!history_path.empty()) write_history_csv(result.history, history_path);
  std::cout << "trained " << result.params.parameter_count() << " parameters, "
            << result.history.size() << " steps -> " << out_ckpt << std::endl;
  return 0;
}

int cmd_infer(const std::string& ckpt_path, const std::string& case_dir,
              const std::string& out_dir, int chunk, int threads) {
  Params<float> params = load_checkpoint(ckpt_path);
  TrainCase cs = load_train_case(case_dir, true);
  InferenceOptions opts;
  opts.chunk = chunk;
  opts.threads = threads;
  InferenceResult result = infer_full(params, cs.corrupted, cs.lung_mask, opts);
  save_inference(result, out_dir);
  double total = 0.0;
  for (const auto& [k, v] : result.timings_s) total += v;
  std::cout << "inference finished in " << total << " s -> " << out_dir
            << std::endl;
  return 0;
}

int cmd_eval(const std::string& case_dir, const std::string& pred_dir,
             const std::string& out_path) {
  TrainCase cs = load_train_case(case_dir, true);
  InferenceResult result = load_inference(pred_dir);
  MetricsReport report = evaluate_case(result, cs);
  std::ofstream out(out_path);
  if (!out) throw std::runtime_error("cannot open " + out_path);
  out << report.to_json() << '\n';
  std::cout << report.to_json() << std::endl;
  return 0;
}

int cmd_weak_acc(const std::string& case_dir, double radius_factor,
                 int64_t samples, uint64_t seed) {
  TrainCase cs = load_train_case(case_dir, true);

  // query space: voxels within radius_factor * mean break radius of the
  // corrupted tree
  double mean_radius = 0.0;
  if (!cs.records.empty()) {
    for (const auto& r : cs.records) mean_radius += r.branch_radius;
    mean_radius /= double(cs.records.size());
  } else {
    mean_radius = 2.0;
  }
  double rho = radius_factor * mean_radius;
  VoxelVolume qspace =
      dilate_ball(cs.corrupted.foreground_voxels(), rho, cs.corrupted.dims());

  size_t tree_voxels = cs.corrupted.count_foreground();
  size_t diff_voxels = 0;
  for (size_t i = 0; i < cs.complete.voxel_count(); ++i)
    diff_voxels +=
        (cs.complete.data()[i] > 0 && cs.corrupted.data()[i] == 0) ? 1 : 0;
  double rho_d = double(diff_voxels) / double(tree_voxels);
  size_t qspace_voxels = qspace.count_foreground();
  double analytic =
      weak_supervision_accuracy(tree_voxels, rho_d, qspace_voxels);

  // Monte Carlo: weak targets (corrupted occupancy) vs true occupancy
  std::vector<size_t> pool;
  for (size_t i = 0; i < qspace.voxel_count(); ++i)
    if (qspace.data()[i] > 0) pool.push_back(i);
  Rng rng(seed);
  int64_t agree = 0;
  for (int64_t s = 0; s < samples; ++s) {
    size_t idx = pool[rng.uniform_u64(pool.size())];
    bool weak_label = cs.corrupted.data()[idx] > 0;
    bool true_label = cs.complete.data()[idx] > 0;
    agree += (weak_label == true_label);
  }
  double empirical = double(agree) / double(samples);

  nlohmann::json j = {{"analytic", analytic},
                      {"empirical", empirical},
                      {"tree_voxels", tree_voxels},
                      {"rho_d", rho_d},
                      {"query_space_voxels", qspace_voxels},
                      {"samples", samples}};
  std::cout << j.dump() << std::endl;
  return 0;
}

int cmd_bench(const std::string& out_path, int threads) {
  TreeSpec spec; // desk preset defaults
  spec.seed = 7;
  SyntheticCase cs = generate_case(spec);
  CorruptResult cor = corrupt(cs.complete_tree, 2, 8, 7);
  nlohmann::json t;

  auto t0 = std::chrono::steady_clock::now();
  VoxelVolume skel = thin_3d(cor.volume);
  t["thin_3d"] = now_seconds(t0);

  t0 = std::chrono::steady_clock::now();
  ComponentLabeling cl = connected_components(cor.volume, Connectivity::twenty_six);
  t["connected_components"] = now_seconds(t0);

  t0 = std::chrono::steady_clock::now();
  PointSet surf = extract_surface_points(cor.volume, 2048, 1);
  PointSet skelpts = extract_skeleton_points_from(skel, 512, 2);
  auto knn = knn_indices(surf, skelpts, 8);
  t["knn"] = now_seconds(t0);

  t0 = std::chrono::steady_clock::now();
  Hyper h;
  Params<float> params = Params<float>::init(h, 0);
  InferenceOptions opts;
  opts.threads = threads;
  InferenceResult inf = infer_full(params, cor.volume, cs.lung_mask, opts);
  t["infer_full"] = now_seconds(t0);
  for (const auto& [k, v] : inf.timings_s) t["infer_" + k] = v;
  t["ncc_input"] = cl.count;

  nlohmann::json j = {{"seconds", t}, {"threads", threads}};
  write_json_file(j, out_path);
  std::cout << j.dump(2) << std::endl;
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"implicit-field modeling of tubular trees: synthesis, "
               "corruption, repair training, multi-task inference"};
  app.require_subcommand(1);

  std::string config_path, out_dir, case_dir, data_dir, ckpt_path, pred_dir,
      out_path, history_path;
  int n_cases = 1, n_breaks = 1, min_nodes = 8, chunk = 8192, threads = 1;
  int64_t seed_override = -1;
  uint64_t seed = 0;
  double radius_factor = 6.0;
  int64_t samples = 1000000;

  auto* synth = app.add_subcommand("synth", "generate synthetic tree cases");
  synth->add_option("--config", config_path, "TOML config")->required();
  synth->add_option("--out", out_dir, "output directory")->required();
  synth->add_option("--cases", n_cases, "number of cases");
  synth->add_option("--seed", seed_override, "seed override");

  auto* corrupt_cmd = app.add_subcommand("corrupt", "apply skeleton-guided breaks");
  corrupt_cmd->add_option("--case", case_dir, "case directory")->required();
  corrupt_cmd->add_option("--breaks", n_breaks, "number of breaks");
  corrupt_cmd->add_option("--min-nodes", min_nodes, "breakable path threshold");
  corrupt_cmd->add_option("--seed", seed, "seed");

  auto* train_cmd = app.add_subcommand("train", "train the implicit field");
  train_cmd->add_option("--config", config_path, "TOML config")->required();
  train_cmd->add_option("--data", data_dir, "directory of cases")->required();
  train_cmd->add_option("--out", ckpt_path, "checkpoint path")->required();
  train_cmd->add_option("--history", history_path, "history CSV path");
  train_cmd->add_option("--seed", seed_override, "seed override");

  auto* infer_cmd = app.add_subcommand("infer", "full-volume multi-task inference");
  infer_cmd->add_option("--checkpoint", ckpt_path, "checkpoint")->required();
  infer_cmd->add_option("--case", case_dir, "case directory")->required();
  infer_cmd->add_option("--out", pred_dir, "output directory")->required();
  infer_cmd->add_option("--chunk", chunk, "query chunk size");
  infer_cmd->add_option("--threads", threads, "worker threads");

  auto* eval_cmd = app.add_subcommand("eval", "score predictions against a case");
  eval_cmd->add_option("--case", case_dir, "case directory")->required();
  eval_cmd->add_option("--pred", pred_dir, "prediction directory")->required();
  eval_cmd->add_option("--out", out_path, "metrics.json path")->required();

  auto* weak_cmd = app.add_subcommand(
      "weak-acc", "analytic vs Monte Carlo weak-supervision accuracy");
  weak_cmd->add_option("--case", case_dir, "case directory")->required();
  weak_cmd->add_option("--radius-factor", radius_factor, "query radius factor");
  weak_cmd->add_option("--samples", samples, "Monte Carlo samples");
  weak_cmd->add_option("--seed", seed, "seed");

  auto* bench_cmd = app.add_subcommand("bench", "time the heavy kernels");
  bench_cmd->add_option("--out", out_path, "timing JSON path")->required();
  bench_cmd->add_option("--threads", threads, "worker threads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << std::endl;
    return 2;
  }

  try {
    if (*synth) return cmd_synth(config_path, out_dir, n_cases, seed_override);
    if (*corrupt_cmd) return cmd_corrupt(case_dir, n_breaks, min_nodes, seed);
    if (*train_cmd)
      return cmd_train(config_path, data_dir, ckpt_path, history_path,
                       seed_override);
    if (*infer_cmd) return cmd_infer(ckpt_path, case_dir, pred_dir, chunk, threads);
    if (*eval_cmd) return cmd_eval(case_dir, pred_dir, out_path);
    if (*weak_cmd) return cmd_weak_acc(case_dir, radius_factor, samples, seed);
    if (*bench_cmd) return cmd_bench(out_path, threads);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "usage error: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
