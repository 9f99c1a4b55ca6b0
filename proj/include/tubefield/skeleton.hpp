#pragma once

#include <string>
#include <vector>

#include "tubefield/volume.hpp"

namespace tubefield {

enum class NodeKind { endpoint, junction };

struct SkeletonNode {
  Coord pos;         // representative voxel
  NodeKind kind = NodeKind::endpoint;
  CoordList members; // all skeleton voxels owned by this node (>=1)
};

struct SkeletonBranch {
  int node_a = -1;
  int node_b = -1;
  CoordList path;                     // ordered, 26-adjacent; ends are node voxels
  std::vector<double> radius_profile; // distance-transform value per path voxel
  double mean_radius = 0.0;
  size_t length() const { return path.empty() ? 0 : path.size() - 1; }
};

struct SkeletonGraph {
  std::vector<SkeletonNode> nodes;
  std::vector<SkeletonBranch> branches;
};

// Topology-preserving 3D thinning after Lee et al.: iterative peeling of the
// six border directions, deleting only simple points that keep the Euler
// characteristic invariant, until a fixed point. Preserves the 26-connected
// component count of the input.
VoxelVolume thin_3d(const VoxelVolume& vol);

// Attributed branch graph of a thinned volume. Voxels with != 2 skeleton
// neighbors become nodes (1 neighbor => endpoint, >=3 => junction); adjacent
// junction voxels are merged into one node placed at the member nearest the
// cluster centroid. dist must come from the pre-thinning volume and supplies
// the per-voxel radius profile.
SkeletonGraph build_skeleton_graph(const VoxelVolume& skel,
                                   const std::vector<double>& dist);

// JSON export: nodes as [[x,y,z], kind], edges as {path, radius}.
std::string skeleton_graph_to_json(const SkeletonGraph& graph);

} // namespace tubefield
