#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "tubefield/corrupt.hpp"
#include "tubefield/volume.hpp"

namespace tubefield {

enum class Task { repair, label, segment };
enum class Provenance { near_break, background, foreground, lung };

struct QueryBatch {
  Task task = Task::repair;
  std::vector<std::array<double, 3>> coords; // normalized, in [-1,1]^3
  std::vector<int32_t> targets;              // occupancy bit or class id
  std::vector<Provenance> provenance;

  size_t size() const { return coords.size(); }
};

// Repair queries: one record is drawn, floor(q_total*p) continuous points are
// sampled uniformly inside the capsule of radius 6*branch_radius around the
// breakpoint segment, the rest uniformly at background voxel centers of the
// corrupted (input) volume. Targets are occupancy lookups in the supervision
// volume. Throws "no disconnection available" on empty records.
QueryBatch sample_repair_queries(const VoxelVolume& supervision,
                                 const VoxelVolume& corrupted,
                                 const std::vector<BreakRecord>& records,
                                 int q_total, double p, uint64_t seed);

// q_total foreground voxel centers of `input`, class targets from labels
// (without replacement while the foreground suffices).
QueryBatch sample_label_queries(const VoxelVolume& input,
                                const VoxelVolume& labels, int q_total,
                                uint64_t seed);

// q_total region voxel centers with segment class targets.
QueryBatch sample_segment_queries(const VoxelVolume& lung_mask,
                                  const VoxelVolume& segment_labels,
                                  int q_total, uint64_t seed);

// Weakly supervised repair sample: one extra synthetic break on an already
// corrupted tree; the pre-break tree is the supervision target.
struct WeakSample {
  VoxelVolume input_tree;  // corrupted tree plus the extra break
  VoxelVolume target_tree; // the original corrupted tree
  BreakRecord synthetic_record;
};

// Throws "no breakable branch" when the corrupted tree has none.
WeakSample make_weak_sample(const VoxelVolume& corrupted, int min_nodes,
                            uint64_t seed);

} // namespace tubefield
