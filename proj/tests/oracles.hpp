#pragma once

// Naive reference implementations used as independent oracles. Everything
// here favors obviousness over speed and must stay decoupled from the
// library code paths it checks.

#include <array>
#include <functional>
#include <set>
#include <vector>

#include "tubefield/metrics.hpp"
#include "tubefield/points.hpp"
#include "tubefield/rng.hpp"
#include "tubefield/volume.hpp"

namespace tubefield::oracle {

// repeated flood fill, set-based
ComponentLabeling flood_fill_components(const VoxelVolume& vol,
                                        Connectivity conn);

// exhaustive nearest-background scan
std::vector<double> brute_force_edt(const VoxelVolume& vol);

// all offsets within the ball, scanned exhaustively
CoordList brute_force_ball(const Coord& seed, double radius,
                           const std::array<int, 3>& dims);

// O(N*M) per-query scan, ascending (distance, index)
std::vector<std::vector<int>> brute_force_knn(const PointSet& queries,
                                              const PointSet& references,
                                              int K);

// metric references, straight from the formulas on std::set
double naive_containment_f1(const ComponentSet& gt, const ComponentSet& pred);
double naive_dice_matching_f1(const ComponentSet& gt, const ComponentSet& pred);
double naive_global_dice(const ComponentSet& gt, const ComponentSet& pred);
int naive_ncc(const VoxelVolume& corrupted, const ComponentSet& pred);
double naive_micro_dice(const VoxelVolume& pred, const VoxelVolume& gt,
                        const CoordList& mask);

// random binary volume with the given foreground probability
VoxelVolume random_volume(Rng& rng, int nx, int ny, int nz, double p_fg);

// random disjoint component set inside dims
ComponentSet random_component_set(Rng& rng, const std::array<int, 3>& dims,
                                  int max_components);

// central finite differences of f at x, one parameter entry at a time
double central_difference(const std::function<double(double)>& f, double x,
                          double h);

} // namespace tubefield::oracle
