#pragma once

#include <map>
#include <string>
#include <vector>

#include "tubefield/volume.hpp"

namespace tubefield {

// Disconnection components: pairwise disjoint 26-connected voxel sets.
struct ComponentSet {
  std::vector<CoordList> components;

  size_t total_voxels() const {
    size_t n = 0;
    for (const auto& c : components) n += c.size();
    return n;
  }
};

struct F1Result {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct MetricsReport {
  double cf1 = 0.0, dmf1 = 0.0, gdice = 0.0;
  int ncc = 0;
  double dice_tree = 0.0, dice_skeleton = 0.0, dice_lung = 0.0;
  std::map<int, double> per_class_tree;
  std::map<int, double> per_class_lung;
  int gt_components = 0, pred_components = 0;
  F1Result cf1_parts, dmf1_parts;

  std::string to_json() const;
};

// 26-connected components of (complete minus corrupted). Throws when the
// corrupted foreground is not contained in the complete foreground.
ComponentSet gt_components(const VoxelVolume& complete,
                           const VoxelVolume& corrupted);

// 26-connected components of a binary mask.
ComponentSet mask_components(const VoxelVolume& mask);

// Instance detection at > 0.5 containment against the union of the other
// side. Both sides empty => (1,1,1); exactly one side empty => zeros.
F1Result containment_f1(const ComponentSet& gt, const ComponentSet& pred);

// As containment_f1 but a component counts only when its best pairwise Dice
// is > 0.5.
F1Result dice_matching_f1(const ComponentSet& gt, const ComponentSet& pred);

// Dice between the unions of the two sets; both empty => 1.
double global_dice(const ComponentSet& gt, const ComponentSet& pred);

// Connected-component count (26-adjacency) of corrupted u union(pred).
int ncc_repaired(const VoxelVolume& corrupted, const ComponentSet& pred);

struct MicroDice {
  double micro = 0.0;
  std::map<int, double> per_class;
};

// Micro-averaged Dice over classes 1..class_count pooled, restricted to
// eval_mask; pred label 0 inside the mask counts as a miss for the gt class.
MicroDice micro_dice(const VoxelVolume& pred_labels,
                     const VoxelVolume& gt_labels, const CoordList& eval_mask);

// Expected accuracy of the synthetic weak supervision:
// 1 - tree_voxels * rho_d / query_space_voxels.
double weak_supervision_accuracy(size_t tree_voxels, double rho_d,
                                 size_t query_space_voxels);

} // namespace tubefield
