#include "tubefield/caseio.hpp"

#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace tubefield {

namespace {

namespace fs = std::filesystem;

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  nlohmann::json j;
  in >> j;
  return j;
}

void write_json(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << j.dump(2) << '\n';
}

nlohmann::json coord_json(const Coord& c) {
  return nlohmann::json::array({c.x, c.y, c.z});
}

Coord coord_from(const nlohmann::json& j) {
  return {j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>()};
}

} // namespace

void save_case(const SyntheticCase& cs, const std::string& dir) {
  fs::create_directories(dir);
  write_volume(cs.complete_tree, dir + "/complete.vvol");
  write_volume(cs.tree_labels, dir + "/tree_labels.vvol");
  write_volume(cs.lung_mask, dir + "/lung_mask.vvol");
  write_volume(cs.segment_labels, dir + "/segment_labels.vvol");

  const TreeSpec& s = cs.spec;
  nlohmann::json manifest;
  manifest["seed"] = s.seed;
  manifest["tree_spec"] = {
      {"dims", s.dims},
      {"depth", s.depth},
      {"children_per_node", s.children_per_node},
      {"trunk_radius", s.trunk_radius},
      {"radius_decay", s.radius_decay},
      {"branch_length_range", s.branch_length_range},
      {"bend_jitter", s.bend_jitter},
      {"class_count", s.class_count},
      {"segment_count", s.segment_count}};
  manifest["files"] = {{"complete", "complete.vvol"},
                       {"tree_labels", "tree_labels.vvol"},
                       {"lung_mask", "lung_mask.vvol"},
                       {"segment_labels", "segment_labels.vvol"}};
  write_json(manifest, dir + "/manifest.json");
}

void save_corruption(const std::string& dir, const VoxelVolume& corrupted,
                     const std::vector<BreakRecord>& records, int n_requested,
                     int min_nodes, uint64_t seed) {
  write_volume(corrupted, dir + "/corrupted.vvol");

  VoxelVolume complete = read_volume(dir + "/complete.vvol");
  VoxelVolume removed(complete.nx(), complete.ny(), complete.nz(), 2);
  for (size_t i = 0; i < complete.voxel_count(); ++i)
    removed.data()[i] =
        (complete.data()[i] > 0 && corrupted.data()[i] == 0) ? 1 : 0;
  write_volume(removed, dir + "/removed_mask.vvol");

  nlohmann::json manifest = read_json(dir + "/manifest.json");
  nlohmann::json breaks = nlohmann::json::array();
  for (const auto& r : records) {
    breaks.push_back({{"branch_id", r.branch_id},
                      {"endpoint_a", coord_json(r.endpoint_a)},
                      {"endpoint_b", coord_json(r.endpoint_b)},
                      {"capsule_radius", r.capsule_radius},
                      {"branch_radius", r.branch_radius},
                      {"removed_voxels", r.removed.size()}});
  }
  manifest["corruption"] = {{"seed", seed},
                            {"n_breaks_requested", n_requested},
                            {"n_breaks_applied", records.size()},
                            {"min_nodes", min_nodes},
                            {"breaks", breaks}};
  manifest["files"]["corrupted"] = "corrupted.vvol";
  manifest["files"]["removed_mask"] = "removed_mask.vvol";
  write_json(manifest, dir + "/manifest.json");
}

TrainCase load_train_case(const std::string& dir, bool require_corruption) {
  TrainCase cs;
  cs.complete = read_volume(dir + "/complete.vvol");
  cs.tree_labels = read_volume(dir + "/tree_labels.vvol");
  cs.lung_mask = read_volume(dir + "/lung_mask.vvol");
  cs.segment_labels = read_volume(dir + "/segment_labels.vvol");
  nlohmann::json manifest = read_json(dir + "/manifest.json");
  if (manifest.contains("corruption")) {
    cs.corrupted = read_volume(dir + "/corrupted.vvol");
    for (const auto& b : manifest["corruption"]["breaks"]) {
      BreakRecord r;
      r.branch_id = b.at("branch_id");
      r.endpoint_a = coord_from(b.at("endpoint_a"));
      r.endpoint_b = coord_from(b.at("endpoint_b"));
      r.capsule_radius = b.at("capsule_radius");
      r.branch_radius = b.at("branch_radius");
      cs.records.push_back(std::move(r));
    }
  } else if (require_corruption) {
    throw std::runtime_error("case " + dir + " has no corruption entry");
  } else {
    cs.corrupted = cs.complete;
  }
  return cs;
}

void save_inference(const InferenceResult& result, const std::string& dir) {
  fs::create_directories(dir);
  write_volume(result.repaired_tree, dir + "/repaired.vvol");
  write_volume(result.repair_mask, dir + "/repair_mask.vvol");
  write_volume(result.labeled_tree, dir + "/labeled.vvol");
  write_volume(result.segment_volume, dir + "/segments_pred.vvol");
  nlohmann::json t;
  for (const auto& [k, v] : result.timings_s) t[k] = v;
  write_json({{"seconds", t}}, dir + "/timings.json");
}

InferenceResult load_inference(const std::string& dir) {
  InferenceResult r;
  r.repaired_tree = read_volume(dir + "/repaired.vvol");
  r.repair_mask = read_volume(dir + "/repair_mask.vvol");
  r.labeled_tree = read_volume(dir + "/labeled.vvol");
  r.segment_volume = read_volume(dir + "/segments_pred.vvol");
  return r;
}

} // namespace tubefield
