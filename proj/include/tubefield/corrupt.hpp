#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "tubefield/rng.hpp"
#include "tubefield/skeleton.hpp"
#include "tubefield/volume.hpp"

namespace tubefield {

// One synthesized disconnection.
struct BreakRecord {
  int branch_id = -1;
  Coord endpoint_a;      // breakpoints on the branch skeleton path
  Coord endpoint_b;
  double capsule_radius = 0.0; // removal radius base, also drives query sampling
  double branch_radius = 0.0;  // mean skeleton radius over the removed span
  CoordList removed;           // ascending (z,y,x)
};

// Knobs of the skeleton-guided removal. The retention probability at
// normalized position t along the broken segment is
//   p_keep(t) = p_edge * (2|t-0.5|)^gamma        for |t-0.5| > band
//   p_keep(t) = 0                                 for |t-0.5| <= band
// so voxels near the break cross-sections tend to survive while the center
// is always cleared. band is central_band in t units, widened to at least
// central_band_min_voxels of arc length so that short segments still get cut
// through (26-adjacency cannot jump the cleared slab).
struct BreakParams {
  double p_edge = 0.35;
  double gamma = 2.0;
  double capsule_inflation = 1.25;
  double central_band = 0.1;
  double central_band_min_voxels = 1.3;
  int end_margin = 2;  // path voxels kept untouched at each end
  int break_span = 3;  // minimum path voxels between the breakpoints
};

// Branches whose path voxel count strictly exceeds min_nodes, ascending id.
std::vector<int> select_breakable_branches(const SkeletonGraph& graph,
                                           int min_nodes);

// Removes a stochastically retained capsule segment of one branch. Kept
// voxels that end up attached to neither stub are removed as well, so a
// bridge branch is guaranteed to actually disconnect. Throws "branch not
// breakable" when the path is too short for margin + span.
std::pair<VoxelVolume, BreakRecord> apply_break(const VoxelVolume& vol,
                                                const SkeletonGraph& graph,
                                                int branch_id, Rng& rng,
                                                const BreakParams& params = {});

struct CorruptResult {
  VoxelVolume volume;
  std::vector<BreakRecord> records; // may be shorter than n_breaks
};

// Applies up to n_breaks sequential breaks, re-extracting the skeleton graph
// after each one; stops early when no breakable branch remains.
CorruptResult corrupt(const VoxelVolume& tree, int n_breaks, int min_nodes,
                      uint64_t seed, const BreakParams& params = {});

} // namespace tubefield
