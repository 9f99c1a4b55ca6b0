#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "tubefield/volume.hpp"

namespace tubefield {

// Parameters of the procedural tubular-tree generator. class_count plays the
// role of the anatomical tree classes (last class reserved for the trunk),
// segment_count the role of the region classes tied to peripheral branches.
struct TreeSpec {
  std::array<int, 3> dims = {64, 64, 64};
  int depth = 3;
  int children_per_node = 2;
  double trunk_radius = 2.5;
  double radius_decay = 0.8;           // in (0, 1]
  std::array<double, 2> branch_length_range = {8.0, 12.0};
  double bend_jitter = 0.35;           // radians
  int class_count = 7;                 // >= 2; trunk gets class class_count
  int segment_count = 6;               // defaults to class_count - 1
  uint64_t seed = 0;
};

// One generated branch as a capsule (segment + radius); kept so tests and
// corruption tooling can reason about the geometry without re-deriving it
// from voxels.
struct CapsuleBranch {
  std::array<double, 3> p0;
  std::array<double, 3> p1;
  double radius = 0.0;
  int parent = -1;   // index into branches, -1 for the trunk
  int depth = 0;     // 0 = trunk
  int tree_class = 0;
};

struct SyntheticCase {
  VoxelVolume complete_tree;   // binary
  VoxelVolume tree_labels;     // 1..class_count on foreground, 0 elsewhere
  VoxelVolume lung_mask;       // binary region around the peripheral tree
  VoxelVolume segment_labels;  // 1..segment_count inside lung_mask
  std::vector<CapsuleBranch> branches;
  TreeSpec spec;
};

// Deterministic capsule-union tree with per-branch labels, a surrounding
// region mask (dilation of the peripheral tree by 3 * trunk_radius) and a
// nearest-peripheral-voxel partition of that region. Throws "spec does not
// fit" if the tree cannot be kept inside dims.
SyntheticCase generate_case(const TreeSpec& spec);

// n_cases cases from per-case seeds spec.seed + i.
std::vector<SyntheticCase> generate_split(const TreeSpec& spec_template,
                                          int n_cases, uint64_t seed);

} // namespace tubefield
