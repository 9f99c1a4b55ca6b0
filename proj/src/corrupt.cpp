#include "tubefield/corrupt.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace tubefield {

std::vector<int> select_breakable_branches(const SkeletonGraph& graph,
                                           int min_nodes) {
  std::vector<int> ids;
  for (int i = 0; i < static_cast<int>(graph.branches.size()); ++i)
    if (static_cast<int>(graph.branches[i].path.size()) > min_nodes)
      ids.push_back(i);
  return ids;
}

namespace {

struct Segment {
  const CoordList& path;
  std::vector<double> cum; // arc length up to each path voxel
  int i0, i1;

  Segment(const CoordList& p, int a, int b) : path(p), i0(a), i1(b) {
    cum.resize(b - a + 1, 0.0);
    for (int k = a + 1; k <= b; ++k) {
      double dx = path[k].x - path[k - 1].x;
      double dy = path[k].y - path[k - 1].y;
      double dz = path[k].z - path[k - 1].z;
      cum[k - a] = cum[k - a - 1] + std::sqrt(dx * dx + dy * dy + dz * dz);
    }
  }
  double length() const { return cum.back(); }

  // squared distance to the polyline and arc-length position of the closest
  // point
  void closest(double px, double py, double pz, double& d2_out,
               double& s_out) const {
    double best = 1e300, best_s = 0.0;
    for (int k = i0; k < i1; ++k) {
      double ax = path[k].x, ay = path[k].y, az = path[k].z;
      double bx = path[k + 1].x, by = path[k + 1].y, bz = path[k + 1].z;
      double ux = bx - ax, uy = by - ay, uz = bz - az;
      double len2 = ux * ux + uy * uy + uz * uz;
      double t = ((px - ax) * ux + (py - ay) * uy + (pz - az) * uz) / len2;
      t = std::clamp(t, 0.0, 1.0);
      double cx = ax + t * ux - px, cy = ay + t * uy - py, cz = az + t * uz - pz;
      double d2 = cx * cx + cy * cy + cz * cz;
      if (d2 < best) {
        best = d2;
        best_s = cum[k - i0] + t * std::sqrt(len2);
      }
    }
    d2_out = best;
    s_out = best_s;
  }
};

} // namespace

std::pair<VoxelVolume, BreakRecord> apply_break(const VoxelVolume& vol,
                                                const SkeletonGraph& graph,
                                                int branch_id, Rng& rng,
                                                const BreakParams& params) {
  if (branch_id < 0 || branch_id >= static_cast<int>(graph.branches.size()))
    throw std::invalid_argument("apply_break: bad branch id");
  const SkeletonBranch& branch = graph.branches[branch_id];
  const int n = static_cast<int>(branch.path.size());
  const int margin = params.end_margin;
  if (n <= 2 * margin) throw std::runtime_error("branch not breakable");

  // all (i, j) with margin <= i < j <= n-1-margin and j - i >= break_span
  std::vector<std::pair<int, int>> pairs;
  for (int i = margin; i <= n - 1 - margin; ++i)
    for (int j = i + params.break_span; j <= n - 1 - margin; ++j)
      pairs.push_back({i, j});
  if (pairs.empty()) throw std::runtime_error("branch not breakable");
  auto [bi, bj] = pairs[rng.uniform_u64(pairs.size())];

  BreakRecord rec;
  rec.branch_id = branch_id;
  rec.endpoint_a = branch.path[bi];
  rec.endpoint_b = branch.path[bj];
  double rad_max = 0.0, rad_sum = 0.0;
  for (int k = bi; k <= bj; ++k) {
    rad_max = std::max(rad_max, branch.radius_profile[k]);
    rad_sum += branch.radius_profile[k];
  }
  rec.capsule_radius = rad_max;
  rec.branch_radius = rad_sum / (bj - bi + 1);

  Segment seg(branch.path, bi, bj);
  const double L = seg.length();
  const double capsule = rec.capsule_radius * params.capsule_inflation;
  const double band =
      std::max(params.central_band, params.central_band_min_voxels / L);

  int x0 = vol.nx(), x1 = -1, y0 = vol.ny(), y1 = -1, z0 = vol.nz(), z1 = -1;
  for (int k = bi; k <= bj; ++k) {
    x0 = std::min(x0, branch.path[k].x);
    x1 = std::max(x1, branch.path[k].x);
    y0 = std::min(y0, branch.path[k].y);
    y1 = std::max(y1, branch.path[k].y);
    z0 = std::min(z0, branch.path[k].z);
    z1 = std::max(z1, branch.path[k].z);
  }
  const int pad = static_cast<int>(std::ceil(capsule)) + 1;
  x0 = std::max(0, x0 - pad);
  y0 = std::max(0, y0 - pad);
  z0 = std::max(0, z0 - pad);
  x1 = std::min(vol.nx() - 1, x1 + pad);
  y1 = std::min(vol.ny() - 1, y1 + pad);
  z1 = std::min(vol.nz() - 1, z1 + pad);

  VoxelVolume out = vol;
  std::set<Coord> candidate, removed;
  for (int z = z0; z <= z1; ++z) {
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        if (!vol.foreground(x, y, z)) continue;
        double d2, s;
        seg.closest(x, y, z, d2, s);
        if (d2 > capsule * capsule) continue;
        candidate.insert({x, y, z});
        double t_off = std::abs(s / L - 0.5);
        if (t_off <= band) {
          removed.insert({x, y, z});
          continue;
        }
        double p_keep = params.p_edge * std::pow(2.0 * t_off, params.gamma);
        if (rng.uniform() >= p_keep) removed.insert({x, y, z});
      }
    }
  }

  // kept-capsule voxels must attach to foreground outside the capsule;
  // floating islands become part of the removal
  std::set<Coord> kept;
  for (const auto& c : candidate)
    if (!removed.count(c)) kept.insert(c);
  std::set<Coord> seen;
  for (const auto& start : kept) {
    if (seen.count(start)) continue;
    CoordList comp, stack{start};
    seen.insert(start);
    bool attached = false;
    while (!stack.empty()) {
      Coord c = stack.back();
      stack.pop_back();
      comp.push_back(c);
      for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            if (!dx && !dy && !dz) continue;
            Coord nb{c.x + dx, c.y + dy, c.z + dz};
            if (!vol.in_bounds(nb) || !vol.foreground(nb)) continue;
            if (removed.count(nb)) continue;
            if (!candidate.count(nb)) {
              attached = true;
              continue;
            }
            if (kept.count(nb) && !seen.count(nb)) {
              seen.insert(nb);
              stack.push_back(nb);
            }
          }
    }
    if (!attached)
      for (const auto& c : comp) removed.insert(c);
  }

  for (const auto& c : removed) out.at(c) = 0;
  rec.removed.assign(removed.begin(), removed.end());
  std::sort(rec.removed.begin(), rec.removed.end());
  return {std::move(out), std::move(rec)};
}

CorruptResult corrupt(const VoxelVolume& tree, int n_breaks, int min_nodes,
                      uint64_t seed, const BreakParams& params) {
  if (n_breaks < 0) throw std::invalid_argument("corrupt: n_breaks must be >= 0");
  CorruptResult res;
  res.volume = tree;
  Rng rng(seed);
  for (int k = 0; k < n_breaks; ++k) {
    std::vector<double> dist = distance_transform(res.volume);
    SkeletonGraph graph = build_skeleton_graph(thin_3d(res.volume), dist);
    std::vector<int> eligible = select_breakable_branches(graph, min_nodes);
    // drop branches that cannot host margin + span
    std::vector<int> usable;
    for (int id : eligible) {
      int n = static_cast<int>(graph.branches[id].path.size());
      if (n - 1 - 2 * params.end_margin >= params.break_span) usable.push_back(id);
    }
    if (usable.empty()) break;
    int branch = usable[rng.uniform_u64(usable.size())];
    auto [vol, rec] = apply_break(res.volume, graph, branch, rng, params);
    res.volume = std::move(vol);
    res.records.push_back(std::move(rec));
  }
  return res;
}

} // namespace tubefield
