#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "tubefield/volume.hpp"

namespace tubefield {

// Isotropic map from continuous voxel coordinates (integer = voxel center)
// into [-1,1]^3; the same instance is shared by point sets, tri-planes and
// queries of a case.
struct Normalizer {
  std::array<double, 3> origin = {0, 0, 0}; // voxel coordinate mapping to 0
  double scale = 1.0;                       // half of the longest axis

  std::array<double, 3> normalize(double x, double y, double z) const {
    return {(x - origin[0]) / scale, (y - origin[1]) / scale,
            (z - origin[2]) / scale};
  }
  std::array<double, 3> denormalize(const std::array<double, 3>& p) const {
    return {p[0] * scale + origin[0], p[1] * scale + origin[1],
            p[2] * scale + origin[2]};
  }
};

Normalizer make_normalizer(const std::array<int, 3>& dims);

enum class PointKind { surface, skeleton };

struct PointSet {
  std::vector<std::array<double, 3>> coords; // normalized, in [-1,1]^3
  CoordList source_voxels;
  PointKind kind = PointKind::surface;

  size_t size() const { return coords.size(); }
};

// Boundary voxels, normalized, uniformly subsampled without replacement to
// n_target; when there are fewer candidates than n_target every candidate is
// kept once and the remainder is resampled with replacement.
PointSet extract_surface_points(const VoxelVolume& vol, int n_target,
                                uint64_t seed);

// Same contract over the thinning skeleton of vol.
PointSet extract_skeleton_points(const VoxelVolume& vol, int n_target,
                                 uint64_t seed);
PointSet extract_skeleton_points_from(const VoxelVolume& skel, int n_target,
                                      uint64_t seed);

// Flattened binary occupancy of the (2r+1)^3 cube around source_voxel in
// fixed (dz,dy,dx) order; out-of-grid neighbors read as 0.
std::vector<float> super_point_descriptor(const VoxelVolume& vol,
                                          const Coord& source_voxel, int r);

// K nearest references per query (Euclidean in normalized space), ascending
// distance with ties broken by the smaller reference index. Grid-accelerated
// but bit-identical to brute force. Throws when reference has fewer than K
// points.
std::vector<std::vector<int>> knn_indices(const PointSet& query_points,
                                          const PointSet& reference_points,
                                          int K);

} // namespace tubefield
