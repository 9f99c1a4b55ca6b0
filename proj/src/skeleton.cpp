#include "tubefield/skeleton.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace tubefield {

namespace {

// ---------------------------------------------------------------------------
// Thinning after Lee, Kashyap & Chu (1994), in the formulation used by the
// ITK/Fiji implementations: peel the six border directions in turn, deleting
// candidates that are border points, not line endpoints, Euler-invariant and
// simple; candidates are re-checked sequentially before deletion so earlier
// deletions cannot break topology through later ones.
// ---------------------------------------------------------------------------

// 27-neighborhood, index = (dz+1)*9 + (dy+1)*3 + (dx+1); entry 13 = center.
void gather_neighborhood(const VoxelVolume& vol, int x, int y, int z,
                         std::array<uint8_t, 27>& n) {
  int i = 0;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx, ++i)
        n[i] = vol.at_or_zero(x + dx, y + dy, z + dz) > 0 ? 1 : 0;
}

int neighbor_count(const std::array<uint8_t, 27>& n) {
  int c = 0;
  for (int i = 0; i < 27; ++i) c += n[i];
  return c - n[13];
}

// Change of the Euler characteristic per octant configuration (Lee et al.,
// Table 2 lineage). Index bit layout matches the octant indexers below.
const std::array<int, 256>& euler_lut() {
  static const std::array<int, 256> lut = [] {
    std::array<int, 256> t{};
    const int odd[128] = {
        1,  -1, -1, 1,  -3, -1, -1, 1,  -1, 1,  1,  -1, 3,  1,  1,  -1,
        -3, -1, 3,  1,  1,  -1, 3,  1,  -1, 1,  1,  -1, 3,  1,  1,  -1,
        -3, 3,  -1, 1,  1,  3,  -1, 1,  -1, 1,  1,  -1, 3,  1,  1,  -1,
        1,  3,  3,  1,  5,  3,  3,  1,  -1, 1,  1,  -1, 3,  1,  1,  -1,
        -7, -1, -1, 1,  -3, -1, -1, 1,  -1, 1,  1,  -1, 3,  1,  1,  -1,
        -3, -1, 3,  1,  1,  -1, 3,  1,  -1, 1,  1,  -1, 3,  1,  1,  -1,
        -3, 3,  -1, 1,  1,  3,  -1, 1,  -1, 1,  1,  -1, 3,  1,  1,  -1,
        1,  3,  3,  1,  5,  3,  3,  1,  -1, 1,  1,  -1, 3,  1,  1,  -1};
    for (int i = 0; i < 128; ++i) t[2 * i + 1] = odd[i];
    return t;
  }();
  return lut;
}

// Octant configuration indices. Bit order follows the reference algorithm;
// the center voxel always contributes bit 0.
uint8_t octant_neb(const std::array<uint8_t, 27>& n) {
  uint8_t v = 1;
  if (n[2]) v |= 128;
  if (n[1]) v |= 64;
  if (n[11]) v |= 32;
  if (n[10]) v |= 16;
  if (n[5]) v |= 8;
  if (n[4]) v |= 4;
  if (n[14]) v |= 2;
  return v;
}
uint8_t octant_nwb(const std::array<uint8_t, 27>& n) {
  uint8_t v = 1;
  if (n[0]) v |= 128;
  if (n[9]) v |= 64;
  if (n[3]) v |= 32;
  if (n[12]) v |= 16;
  if (n[1]) v |= 8;
  if (n[10]) v |= 4;
  if (n[4]) v |= 2;
  return v;
}
uint8_t octant_seb(const std::array<uint8_t, 27>& n) {
  uint8_t v = 1;
  if (n[8]) v |= 128;
  if (n[7]) v |= 64;
  if (n[17]) v |= 32;
  if (n[16]) v |= 16;
  if (n[5]) v |= 8;
  if (n[4]) v |= 4;
  if (n[14]) v |= 2;
  return v;
}
uint8_t octant_swb(const std::array<uint8_t, 27>& n) {
  uint8_t v = 1;
  if (n[6]) v |= 128;
  if (n[15]) v |= 64;
  if (n[7]) v |= 32;
  if (n[16]) v |= 16;
  if (n[3]) v |= 8;
  if (n[12]) v |= 4;
  if (n[4]) v |= 2;
  return v;
}
uint8_t octant_neu(const std::array<uint8_t, 27>& n) {
  uint8_t v = 1;
  if (n[20]) v |= 128;
  if (n[23]) v |= 64;
  if (n[19]) v |= 32;
  if (n[22]) v |= 16;
  if (n[11]) v |= 8;
  if (n[14]) v |= 4;
  if (n[10]) v |= 2;
  return v;
}
uint8_t octant_nwu(const std::array<uint8_t, 27>& n) {
  uint8_t v = 1;
  if (n[18]) v |= 128;
  if (n[21]) v |= 64;
  if (n[9]) v |= 32;
  if (n[12]) v |= 16;
  if (n[19]) v |= 8;
  if (n[22]) v |= 4;
  if (n[10]) v |= 2;
  return v;
}
uint8_t octant_seu(const std::array<uint8_t, 27>& n) {
  uint8_t v = 1;
  if (n[26]) v |= 128;
  if (n[23]) v |= 64;
  if (n[17]) v |= 32;
  if (n[14]) v |= 16;
  if (n[25]) v |= 8;
  if (n[22]) v |= 4;
  if (n[16]) v |= 2;
  return v;
}
uint8_t octant_swu(const std::array<uint8_t, 27>& n) {
  uint8_t v = 1;
  if (n[24]) v |= 128;
  if (n[25]) v |= 64;
  if (n[15]) v |= 32;
  if (n[16]) v |= 16;
  if (n[21]) v |= 8;
  if (n[22]) v |= 4;
  if (n[12]) v |= 2;
  return v;
}

bool euler_invariant(const std::array<uint8_t, 27>& n) {
  const auto& lut = euler_lut();
  int chi = 0;
  chi += lut[octant_swu(n)];
  chi += lut[octant_seu(n)];
  chi += lut[octant_nwu(n)];
  chi += lut[octant_neu(n)];
  chi += lut[octant_swb(n)];
  chi += lut[octant_seb(n)];
  chi += lut[octant_nwb(n)];
  chi += lut[octant_neb(n)];
  return chi == 0;
}

// Octree flood of the 26-neighborhood (center removed) used by the simple
// point test; labels the foreground of one octant and spills into adjacent
// octants through shared faces/edges.
void octree_label(int octant, int label, std::array<int, 26>& cube) {
  switch (octant) {
    case 1:
      if (cube[0] == 1) cube[0] = label;
      if (cube[1] == 1) { cube[1] = label; octree_label(2, label, cube); }
      if (cube[3] == 1) { cube[3] = label; octree_label(3, label, cube); }
      if (cube[4] == 1) {
        cube[4] = label;
        octree_label(2, label, cube);
        octree_label(3, label, cube);
        octree_label(4, label, cube);
      }
      if (cube[9] == 1) { cube[9] = label; octree_label(5, label, cube); }
      if (cube[10] == 1) {
        cube[10] = label;
        octree_label(2, label, cube);
        octree_label(5, label, cube);
        octree_label(6, label, cube);
      }
      if (cube[12] == 1) {
        cube[12] = label;
        octree_label(3, label, cube);
        octree_label(5, label, cube);
        octree_label(7, label, cube);
      }
      break;
    case 2:
      if (cube[1] == 1) { cube[1] = label; octree_label(1, label, cube); }
      if (cube[4] == 1) {
        cube[4] = label;
        octree_label(1, label, cube);
        octree_label(3, label, cube);
        octree_label(4, label, cube);
      }
      if (cube[10] == 1) {
        cube[10] = label;
        octree_label(1, label, cube);
        octree_label(5, label, cube);
        octree_label(6, label, cube);
      }
      if (cube[2] == 1) cube[2] = label;
      if (cube[5] == 1) { cube[5] = label; octree_label(4, label, cube); }
      if (cube[11] == 1) { cube[11] = label; octree_label(6, label, cube); }
      if (cube[13] == 1) {
        cube[13] = label;
        octree_label(4, label, cube);
        octree_label(6, label, cube);
        octree_label(8, label, cube);
      }
      break;
    case 3:
      if (cube[3] == 1) { cube[3] = label; octree_label(1, label, cube); }
      if (cube[4] == 1) {
        cube[4] = label;
        octree_label(1, label, cube);
        octree_label(2, label, cube);
        octree_label(4, label, cube);
      }
      if (cube[12] == 1) {
        cube[12] = label;
        octree_label(1, label, cube);
        octree_label(5, label, cube);
        octree_label(7, label, cube);
      }
      if (cube[6] == 1) cube[6] = label;
      if (cube[7] == 1) { cube[7] = label; octree_label(4, label, cube); }
      if (cube[14] == 1) { cube[14] = label; octree_label(7, label, cube); }
      if (cube[15] == 1) {
        cube[15] = label;
        octree_label(4, label, cube);
        octree_label(7, label, cube);
        octree_label(8, label, cube);
      }
      break;
    case 4:
      if (cube[4] == 1) {
        cube[4] = label;
        octree_label(1, label, cube);
        octree_label(2, label, cube);
        octree_label(3, label, cube);
      }
      if (cube[5] == 1) { cube[5] = label; octree_label(2, label, cube); }
      if (cube[13] == 1) {
        cube[13] = label;
        octree_label(2, label, cube);
        octree_label(6, label, cube);
        octree_label(8, label, cube);
      }
      if (cube[7] == 1) { cube[7] = label; octree_label(3, label, cube); }
      if (cube[15] == 1) {
        cube[15] = label;
        octree_label(3, label, cube);
        octree_label(7, label, cube);
        octree_label(8, label, cube);
      }
      if (cube[8] == 1) cube[8] = label;
      if (cube[16] == 1) { cube[16] = label; octree_label(8, label, cube); }
      break;
    case 5:
      if (cube[9] == 1) { cube[9] = label; octree_label(1, label, cube); }
      if (cube[10] == 1) {
        cube[10] = label;
        octree_label(1, label, cube);
        octree_label(2, label, cube);
        octree_label(6, label, cube);
      }
      if (cube[12] == 1) {
        cube[12] = label;
        octree_label(1, label, cube);
        octree_label(3, label, cube);
        octree_label(7, label, cube);
      }
      if (cube[17] == 1) cube[17] = label;
      if (cube[18] == 1) { cube[18] = label; octree_label(6, label, cube); }
      if (cube[20] == 1) { cube[20] = label; octree_label(7, label, cube); }
      if (cube[21] == 1) {
        cube[21] = label;
        octree_label(6, label, cube);
        octree_label(7, label, cube);
        octree_label(8, label, cube);
      }
      break;
    case 6:
      if (cube[10] == 1) {
        cube[10] = label;
        octree_label(1, label, cube);
        octree_label(2, label, cube);
        octree_label(5, label, cube);
      }
      if (cube[11] == 1) { cube[11] = label; octree_label(2, label, cube); }
      if (cube[13] == 1) {
        cube[13] = label;
        octree_label(2, label, cube);
        octree_label(4, label, cube);
        octree_label(8, label, cube);
      }
      if (cube[18] == 1) { cube[18] = label; octree_label(5, label, cube); }
      if (cube[21] == 1) {
        cube[21] = label;
        octree_label(5, label, cube);
        octree_label(7, label, cube);
        octree_label(8, label, cube);
      }
      if (cube[19] == 1) cube[19] = label;
      if (cube[22] == 1) { cube[22] = label; octree_label(8, label, cube); }
      break;
    case 7:
      if (cube[12] == 1) {
        cube[12] = label;
        octree_label(1, label, cube);
        octree_label(3, label, cube);
        octree_label(5, label, cube);
      }
      if (cube[14] == 1) { cube[14] = label; octree_label(3, label, cube); }
      if (cube[15] == 1) {
        cube[15] = label;
        octree_label(3, label, cube);
        octree_label(4, label, cube);
        octree_label(8, label, cube);
      }
      if (cube[20] == 1) { cube[20] = label; octree_label(5, label, cube); }
      if (cube[21] == 1) {
        cube[21] = label;
        octree_label(5, label, cube);
        octree_label(6, label, cube);
        octree_label(8, label, cube);
      }
      if (cube[23] == 1) cube[23] = label;
      if (cube[24] == 1) { cube[24] = label; octree_label(8, label, cube); }
      break;
    case 8:
      if (cube[13] == 1) {
        cube[13] = label;
        octree_label(2, label, cube);
        octree_label(4, label, cube);
        octree_label(6, label, cube);
      }
      if (cube[15] == 1) {
        cube[15] = label;
        octree_label(3, label, cube);
        octree_label(4, label, cube);
        octree_label(7, label, cube);
      }
      if (cube[16] == 1) { cube[16] = label; octree_label(4, label, cube); }
      if (cube[21] == 1) {
        cube[21] = label;
        octree_label(5, label, cube);
        octree_label(6, label, cube);
        octree_label(7, label, cube);
      }
      if (cube[22] == 1) { cube[22] = label; octree_label(6, label, cube); }
      if (cube[24] == 1) { cube[24] = label; octree_label(7, label, cube); }
      if (cube[25] == 1) cube[25] = label;
      break;
    default:
      break;
  }
}

// A point is simple when the foreground of its 26-neighborhood (center
// removed) stays in a single 26-connected piece.
bool is_simple_point(const std::array<uint8_t, 27>& n) {
  std::array<int, 26> cube;
  for (int i = 0; i < 13; ++i) cube[i] = n[i];
  for (int i = 14; i < 27; ++i) cube[i - 1] = n[i];

  int label = 2;
  for (int i = 0; i < 26; ++i) {
    if (cube[i] != 1) continue;
    switch (i) {
      case 0: case 1: case 3: case 4: case 9: case 10: case 12:
        octree_label(1, label, cube);
        break;
      case 2: case 5: case 11: case 13:
        octree_label(2, label, cube);
        break;
      case 6: case 7: case 14: case 15:
        octree_label(3, label, cube);
        break;
      case 8: case 16:
        octree_label(4, label, cube);
        break;
      case 17: case 18: case 20: case 21:
        octree_label(5, label, cube);
        break;
      case 19: case 22:
        octree_label(6, label, cube);
        break;
      case 23: case 24:
        octree_label(7, label, cube);
        break;
      case 25:
        octree_label(8, label, cube);
        break;
      default:
        break;
    }
    ++label;
    if (label - 2 >= 2) return false;
  }
  return true;
}

} // namespace

VoxelVolume thin_3d(const VoxelVolume& vol) {
  VoxelVolume skel(vol.nx(), vol.ny(), vol.nz(), 2);
  skel.spacing = vol.spacing;
  for (size_t i = 0; i < vol.voxel_count(); ++i)
    skel.data()[i] = vol.data()[i] > 0 ? 1 : 0;

  // border direction offsets, reference order: N S E W U B
  const int border_off[6][3] = {{0, -1, 0}, {0, 1, 0},  {1, 0, 0},
                                {-1, 0, 0}, {0, 0, 1},  {0, 0, -1}};

  std::vector<Coord> candidates;
  std::array<uint8_t, 27> nb;
  int unchanged_borders = 0;
  while (unchanged_borders < 6) {
    unchanged_borders = 0;
    for (int border = 0; border < 6; ++border) {
      candidates.clear();
      for (int z = 0; z < skel.nz(); ++z) {
        for (int y = 0; y < skel.ny(); ++y) {
          for (int x = 0; x < skel.nx(); ++x) {
            if (!skel.foreground(x, y, z)) continue;
            const int* o = border_off[border];
            if (skel.at_or_zero(x + o[0], y + o[1], z + o[2]) > 0) continue;
            gather_neighborhood(skel, x, y, z, nb);
            if (neighbor_count(nb) == 1) continue; // keep line endpoints
            if (!euler_invariant(nb)) continue;
            if (!is_simple_point(nb)) continue;
            candidates.push_back({x, y, z});
          }
        }
      }
      bool changed = false;
      for (const auto& c : candidates) {
        gather_neighborhood(skel, c.x, c.y, c.z, nb);
        if (is_simple_point(nb)) {
          skel.at(c) = 0;
          changed = true;
        }
      }
      if (!changed) ++unchanged_borders;
    }
  }
  return skel;
}

namespace {

int count_skeleton_neighbors(const VoxelVolume& skel, const Coord& c) {
  int n = 0;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        if (!dx && !dy && !dz) continue;
        n += skel.at_or_zero(c.x + dx, c.y + dy, c.z + dz) > 0;
      }
  return n;
}

CoordList skeleton_neighbors(const VoxelVolume& skel, const Coord& c) {
  CoordList out;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        if (!dx && !dy && !dz) continue;
        if (skel.at_or_zero(c.x + dx, c.y + dy, c.z + dz) > 0)
          out.push_back({c.x + dx, c.y + dy, c.z + dz});
      }
  return out;
}

} // namespace

SkeletonGraph build_skeleton_graph(const VoxelVolume& skel,
                                   const std::vector<double>& dist) {
  if (dist.size() != skel.voxel_count())
    throw std::invalid_argument("build_skeleton_graph: dist size mismatch");

  SkeletonGraph graph;
  const CoordList voxels = skel.foreground_voxels();
  if (voxels.empty()) return graph;

  std::map<Coord, int> degree;
  for (const auto& v : voxels) degree[v] = count_skeleton_neighbors(skel, v);

  // Node voxels: degree != 2. Adjacent junction voxels (degree >= 3) merge
  // into a single node; the representative is the member nearest the cluster
  // centroid, ties resolved by (z,y,x).
  std::map<Coord, int> node_of; // voxel -> node id, node voxels only
  std::set<Coord> junction_seen;
  for (const auto& v : voxels) {
    int deg = degree[v];
    if (deg == 2) continue;
    if (deg >= 3) {
      if (junction_seen.count(v)) continue;
      CoordList cluster, stack{v};
      junction_seen.insert(v);
      while (!stack.empty()) {
        Coord c = stack.back();
        stack.pop_back();
        cluster.push_back(c);
        for (const auto& nb : skeleton_neighbors(skel, c)) {
          if (degree[nb] >= 3 && !junction_seen.count(nb)) {
            junction_seen.insert(nb);
            stack.push_back(nb);
          }
        }
      }
      std::sort(cluster.begin(), cluster.end());
      double cx = 0, cy = 0, cz = 0;
      for (const auto& c : cluster) {
        cx += c.x;
        cy += c.y;
        cz += c.z;
      }
      cx /= cluster.size();
      cy /= cluster.size();
      cz /= cluster.size();
      Coord rep = cluster.front();
      double best = 1e300;
      for (const auto& c : cluster) {
        double d2 = (c.x - cx) * (c.x - cx) + (c.y - cy) * (c.y - cy) +
                    (c.z - cz) * (c.z - cz);
        if (d2 < best) {
          best = d2;
          rep = c;
        }
      }
      int id = static_cast<int>(graph.nodes.size());
      graph.nodes.push_back({rep, NodeKind::junction, cluster});
      for (const auto& c : cluster) node_of[c] = id;
    } else { // degree 0 or 1: endpoint (degree 0 = isolated dust)
      int id = static_cast<int>(graph.nodes.size());
      graph.nodes.push_back({v, NodeKind::endpoint, {v}});
      node_of[v] = id;
    }
  }

  auto radius_at = [&](const Coord& c) {
    return dist[skel.index(c.x, c.y, c.z)];
  };
  auto finish_branch = [&](SkeletonBranch&& b) {
    b.radius_profile.reserve(b.path.size());
    double sum = 0.0;
    for (const auto& c : b.path) {
      double r = radius_at(c);
      b.radius_profile.push_back(r);
      sum += r;
    }
    b.mean_radius = b.path.empty() ? 0.0 : sum / b.path.size();
    graph.branches.push_back(std::move(b));
  };

  std::set<Coord> chain_visited;
  std::set<std::pair<Coord, Coord>> direct_edges;
  for (int id = 0; id < static_cast<int>(graph.nodes.size()); ++id) {
    for (const auto& m : graph.nodes[id].members) {
      for (const auto& nb : skeleton_neighbors(skel, m)) {
        auto it = node_of.find(nb);
        if (it != node_of.end()) {
          if (it->second == id && degree[nb] >= 3) continue; // intra-cluster
          // direct node-to-node contact (only endpoints can produce these)
          Coord a = std::min(m, nb), b = std::max(m, nb);
          if (direct_edges.insert({a, b}).second) {
            SkeletonBranch br;
            br.node_a = id;
            br.node_b = it->second;
            br.path = {m, nb};
            finish_branch(std::move(br));
          }
          continue;
        }
        if (chain_visited.count(nb)) continue;
        // walk the 2-neighbor chain until the next node voxel
        SkeletonBranch br;
        br.node_a = id;
        br.path.push_back(m);
        Coord prev = m, cur = nb;
        while (true) {
          chain_visited.insert(cur);
          br.path.push_back(cur);
          auto nbs = skeleton_neighbors(skel, cur);
          Coord next{-1, -1, -1};
          bool found = false;
          for (const auto& cand : nbs) {
            if (cand == prev) continue;
            next = cand;
            found = true;
            break;
          }
          if (!found) break; // dangling chain end (cannot happen on valid input)
          prev = cur;
          cur = next;
          auto nit = node_of.find(cur);
          if (nit != node_of.end()) {
            br.path.push_back(cur);
            br.node_b = nit->second;
            break;
          }
        }
        if (br.node_b < 0) br.node_b = id;
        finish_branch(std::move(br));
      }
    }
  }

  // Pure cycles contain no node voxel; anchor each at its smallest (z,y,x)
  // voxel and emit a self-loop branch.
  for (const auto& v : voxels) {
    if (degree[v] != 2 || chain_visited.count(v)) continue;
    int id = static_cast<int>(graph.nodes.size());
    graph.nodes.push_back({v, NodeKind::junction, {v}});
    SkeletonBranch br;
    br.node_a = br.node_b = id;
    br.path.push_back(v);
    chain_visited.insert(v);
    auto nbs = skeleton_neighbors(skel, v);
    Coord prev = v, cur = nbs.front();
    while (cur != v) {
      chain_visited.insert(cur);
      br.path.push_back(cur);
      for (const auto& cand : skeleton_neighbors(skel, cur)) {
        if (cand == prev) continue;
        prev = cur;
        cur = cand;
        break;
      }
    }
    br.path.push_back(v);
    finish_branch(std::move(br));
  }

  return graph;
}

std::string skeleton_graph_to_json(const SkeletonGraph& graph) {
  nlohmann::json j;
  j["nodes"] = nlohmann::json::array();
  for (const auto& n : graph.nodes) {
    j["nodes"].push_back({{n.pos.x, n.pos.y, n.pos.z},
                          n.kind == NodeKind::endpoint ? "endpoint" : "junction"});
  }
  j["edges"] = nlohmann::json::array();
  for (const auto& b : graph.branches) {
    nlohmann::json e;
    e["path"] = nlohmann::json::array();
    for (const auto& c : b.path) e["path"].push_back({c.x, c.y, c.z});
    e["radius"] = b.radius_profile;
    j["edges"].push_back(std::move(e));
  }
  return j.dump();
}

} // namespace tubefield
