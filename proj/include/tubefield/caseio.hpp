#pragma once

#include <string>
#include <vector>

#include "tubefield/corrupt.hpp"
#include "tubefield/pipeline.hpp"
#include "tubefield/synthtree.hpp"

namespace tubefield {

// On-disk case layout: complete.vvol, tree_labels.vvol, lung_mask.vvol,
// segment_labels.vvol plus manifest.json (spec echo, seed, file names).
// Corruption adds corrupted.vvol, removed_mask.vvol and a "corruption" entry
// in the manifest carrying the break records.
void save_case(const SyntheticCase& cs, const std::string& dir);

void save_corruption(const std::string& dir, const VoxelVolume& corrupted,
                     const std::vector<BreakRecord>& records, int n_requested,
                     int min_nodes, uint64_t seed);

// Loads the volumes a training/evaluation case needs. Break records come
// from the manifest (endpoints and radii; per-record removed sets are not
// persisted individually, only their union mask).
TrainCase load_train_case(const std::string& dir, bool require_corruption);

void save_inference(const InferenceResult& result, const std::string& dir);
InferenceResult load_inference(const std::string& dir);

} // namespace tubefield
