#include "tubefield/metrics.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace tubefield {

ComponentSet gt_components(const VoxelVolume& complete,
                           const VoxelVolume& corrupted) {
  if (complete.dims() != corrupted.dims())
    throw std::invalid_argument("gt_components: dims mismatch");
  VoxelVolume diff(complete.nx(), complete.ny(), complete.nz(), 2);
  for (size_t i = 0; i < complete.voxel_count(); ++i) {
    bool comp = complete.data()[i] > 0, corr = corrupted.data()[i] > 0;
    if (corr && !comp)
      throw std::invalid_argument(
          "gt_components: corrupted foreground not contained in complete");
    diff.data()[i] = (comp && !corr) ? 1 : 0;
  }
  return mask_components(diff);
}

ComponentSet mask_components(const VoxelVolume& mask) {
  ComponentLabeling cl = connected_components(mask, Connectivity::twenty_six);
  ComponentSet out;
  out.components.resize(cl.count);
  for (int z = 0; z < mask.nz(); ++z)
    for (int y = 0; y < mask.ny(); ++y)
      for (int x = 0; x < mask.nx(); ++x) {
        int32_t l = cl.labels[mask.index(x, y, z)];
        if (l > 0) out.components[l - 1].push_back({x, y, z});
      }
  return out;
}

namespace {

std::set<Coord> set_union(const ComponentSet& cs) {
  std::set<Coord> u;
  for (const auto& c : cs.components) u.insert(c.begin(), c.end());
  return u;
}

size_t overlap(const CoordList& comp, const std::set<Coord>& other) {
  size_t n = 0;
  for (const auto& c : comp) n += other.count(c);
  return n;
}

F1Result combine_f1(int gt_hit, int gt_total, int pred_hit, int pred_total) {
  F1Result r;
  if (gt_total == 0 && pred_total == 0) return {1.0, 1.0, 1.0};
  if (gt_total == 0 || pred_total == 0) return {0.0, 0.0, 0.0};
  r.recall = double(gt_hit) / gt_total;
  r.precision = double(pred_hit) / pred_total;
  r.f1 = (r.precision + r.recall) > 0.0
             ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
             : 0.0;
  return r;
}

} // namespace

F1Result containment_f1(const ComponentSet& gt, const ComponentSet& pred) {
  const std::set<Coord> gt_union = set_union(gt);
  const std::set<Coord> pred_union = set_union(pred);
  int gt_hit = 0;
  for (const auto& g : gt.components)
    if (!g.empty() && double(overlap(g, pred_union)) / g.size() > 0.5) ++gt_hit;
  int pred_hit = 0;
  for (const auto& p : pred.components)
    if (!p.empty() && double(overlap(p, gt_union)) / p.size() > 0.5) ++pred_hit;
  return combine_f1(gt_hit, static_cast<int>(gt.components.size()), pred_hit,
                    static_cast<int>(pred.components.size()));
}

F1Result dice_matching_f1(const ComponentSet& gt, const ComponentSet& pred) {
  const size_t N = gt.components.size(), M = pred.components.size();
  std::vector<std::set<Coord>> pred_sets(M);
  for (size_t j = 0; j < M; ++j)
    pred_sets[j].insert(pred.components[j].begin(), pred.components[j].end());

  std::vector<double> best_gt(N, 0.0), best_pred(M, 0.0);
  for (size_t i = 0; i < N; ++i) {
    for (size_t j = 0; j < M; ++j) {
      size_t inter = overlap(gt.components[i], pred_sets[j]);
      double dice = 2.0 * double(inter) /
                    double(gt.components[i].size() + pred.components[j].size());
      best_gt[i] = std::max(best_gt[i], dice);
      best_pred[j] = std::max(best_pred[j], dice);
    }
  }
  int gt_hit = 0, pred_hit = 0;
  for (double d : best_gt) gt_hit += d > 0.5;
  for (double d : best_pred) pred_hit += d > 0.5;
  return combine_f1(gt_hit, static_cast<int>(N), pred_hit, static_cast<int>(M));
}

double global_dice(const ComponentSet& gt, const ComponentSet& pred) {
  const std::set<Coord> gu = set_union(gt), pu = set_union(pred);
  if (gu.empty() && pu.empty()) return 1.0;
  size_t inter = 0;
  for (const auto& c : gu) inter += pu.count(c);
  return 2.0 * double(inter) / double(gu.size() + pu.size());
}

int ncc_repaired(const VoxelVolume& corrupted, const ComponentSet& pred) {
  VoxelVolume u(corrupted.nx(), corrupted.ny(), corrupted.nz(), 2);
  for (size_t i = 0; i < corrupted.voxel_count(); ++i)
    u.data()[i] = corrupted.data()[i] > 0 ? 1 : 0;
  for (const auto& comp : pred.components)
    for (const auto& c : comp)
      if (u.in_bounds(c)) u.at(c) = 1;
  return connected_components(u, Connectivity::twenty_six).count;
}

MicroDice micro_dice(const VoxelVolume& pred_labels,
                     const VoxelVolume& gt_labels, const CoordList& eval_mask) {
  if (pred_labels.dims() != gt_labels.dims())
    throw std::invalid_argument("micro_dice: dims mismatch");
  std::map<int, size_t> tp, fp, fn;
  size_t tp_sum = 0, fp_sum = 0, fn_sum = 0;
  for (const auto& c : eval_mask) {
    if (!gt_labels.in_bounds(c))
      throw std::invalid_argument("micro_dice: eval voxel outside grid");
    int p = pred_labels.at(c), g = gt_labels.at(c);
    if (p == g) {
      if (g > 0) {
        ++tp[g];
        ++tp_sum;
      }
    } else {
      if (p > 0) {
        ++fp[p];
        ++fp_sum;
      }
      if (g > 0) {
        ++fn[g];
        ++fn_sum;
      }
    }
  }
  MicroDice out;
  double denom = 2.0 * double(tp_sum) + double(fp_sum) + double(fn_sum);
  out.micro = denom > 0.0 ? 2.0 * double(tp_sum) / denom : 1.0;
  std::set<int> classes;
  for (const auto& [k, v] : tp) classes.insert(k);
  for (const auto& [k, v] : fp) classes.insert(k);
  for (const auto& [k, v] : fn) classes.insert(k);
  for (int c : classes) {
    double d = 2.0 * double(tp[c]) + double(fp[c]) + double(fn[c]);
    out.per_class[c] = d > 0.0 ? 2.0 * double(tp[c]) / d : 1.0;
  }
  return out;
}

double weak_supervision_accuracy(size_t tree_voxels, double rho_d,
                                 size_t query_space_voxels) {
  if (query_space_voxels == 0)
    throw std::invalid_argument(
        "weak_supervision_accuracy: empty query space");
  if (rho_d < 0.0 || rho_d > 1.0)
    throw std::invalid_argument("weak_supervision_accuracy: rho_d out of [0,1]");
  if (double(tree_voxels) * rho_d > double(query_space_voxels))
    throw std::invalid_argument(
        "weak_supervision_accuracy: disconnection mass exceeds query space");
  return 1.0 - double(tree_voxels) * rho_d / double(query_space_voxels);
}

std::string MetricsReport::to_json() const {
  nlohmann::json j;
  j["cf1"] = cf1;
  j["dmf1"] = dmf1;
  j["gdice"] = gdice;
  j["ncc"] = ncc;
  j["dice_tree"] = dice_tree;
  j["dice_skeleton"] = dice_skeleton;
  j["dice_lung"] = dice_lung;
  nlohmann::json per_class;
  for (const auto& [k, v] : per_class_tree) per_class["tree"][std::to_string(k)] = v;
  for (const auto& [k, v] : per_class_lung) per_class["lung"][std::to_string(k)] = v;
  j["per_class"] = per_class;
  j["counts"] = {{"gt_components", gt_components},
                 {"pred_components", pred_components},
                 {"cf1_precision", cf1_parts.precision},
                 {"cf1_recall", cf1_parts.recall},
                 {"dmf1_precision", dmf1_parts.precision},
                 {"dmf1_recall", dmf1_parts.recall}};
  return j.dump(2);
}

} // namespace tubefield
