#include "tubefield/points.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "tubefield/rng.hpp"
#include "tubefield/skeleton.hpp"

namespace tubefield {

Normalizer make_normalizer(const std::array<int, 3>& dims) {
  Normalizer n;
  int longest = std::max({dims[0], dims[1], dims[2]});
  n.scale = longest / 2.0;
  for (int k = 0; k < 3; ++k) n.origin[k] = (dims[k] - 1) / 2.0;
  return n;
}

namespace {

PointSet sample_points(const CoordList& candidates, int n_target,
                       uint64_t seed, PointKind kind, const Normalizer& norm) {
  if (candidates.empty())
    throw std::runtime_error("point extraction: empty foreground");
  if (n_target < 1)
    throw std::invalid_argument("point extraction: n_target must be >= 1");

  Rng rng(seed);
  CoordList chosen;
  const int n = static_cast<int>(candidates.size());
  if (n >= n_target) {
    // partial Fisher-Yates over a copy
    CoordList pool = candidates;
    for (int i = 0; i < n_target; ++i) {
      int j = i + static_cast<int>(rng.uniform_u64(n - i));
      std::swap(pool[i], pool[j]);
      chosen.push_back(pool[i]);
    }
  } else {
    // keep every candidate once, pad by repetition
    chosen = candidates;
    for (int i = n; i < n_target; ++i)
      chosen.push_back(candidates[rng.uniform_u64(n)]);
  }

  PointSet ps;
  ps.kind = kind;
  ps.source_voxels = std::move(chosen);
  ps.coords.reserve(ps.source_voxels.size());
  for (const auto& c : ps.source_voxels)
    ps.coords.push_back(norm.normalize(c.x, c.y, c.z));
  return ps;
}

} // namespace

PointSet extract_surface_points(const VoxelVolume& vol, int n_target,
                                uint64_t seed) {
  return sample_points(boundary_voxels(vol), n_target, seed,
                       PointKind::surface, make_normalizer(vol.dims()));
}

PointSet extract_skeleton_points(const VoxelVolume& vol, int n_target,
                                 uint64_t seed) {
  return extract_skeleton_points_from(thin_3d(vol), n_target, seed);
}

PointSet extract_skeleton_points_from(const VoxelVolume& skel, int n_target,
                                      uint64_t seed) {
  return sample_points(skel.foreground_voxels(), n_target, seed,
                       PointKind::skeleton, make_normalizer(skel.dims()));
}

std::vector<float> super_point_descriptor(const VoxelVolume& vol,
                                          const Coord& c, int r) {
  if (r < 0) throw std::invalid_argument("super_point_descriptor: r < 0");
  const int w = 2 * r + 1;
  std::vector<float> desc(static_cast<size_t>(w) * w * w, 0.0f);
  size_t i = 0;
  for (int dz = -r; dz <= r; ++dz)
    for (int dy = -r; dy <= r; ++dy)
      for (int dx = -r; dx <= r; ++dx, ++i)
        desc[i] = vol.at_or_zero(c.x + dx, c.y + dy, c.z + dz) > 0 ? 1.0f : 0.0f;
  return desc;
}

namespace {

struct Candidate {
  double d2;
  int idx;
  bool operator<(const Candidate& o) const {
    if (d2 != o.d2) return d2 < o.d2;
    return idx < o.idx;
  }
};

double dist2(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

} // namespace

std::vector<std::vector<int>> knn_indices(const PointSet& query_points,
                                          const PointSet& reference_points,
                                          int K) {
  const int m = static_cast<int>(reference_points.size());
  if (K < 1) throw std::invalid_argument("knn_indices: K must be >= 1");
  if (m < K) throw std::invalid_argument("knn_indices: reference smaller than K");

  // uniform grid over [-1,1]^3
  const int G = std::max(1, static_cast<int>(std::cbrt(double(m) / 2.0)));
  const double cell = 2.0 / G;
  auto cell_of = [&](double v) {
    int c = static_cast<int>(std::floor((v + 1.0) / cell));
    return std::clamp(c, 0, G - 1);
  };
  std::vector<std::vector<int>> bins(static_cast<size_t>(G) * G * G);
  for (int i = 0; i < m; ++i) {
    const auto& p = reference_points.coords[i];
    bins[(static_cast<size_t>(cell_of(p[2])) * G + cell_of(p[1])) * G +
         cell_of(p[0])]
        .push_back(i);
  }

  std::vector<std::vector<int>> out(query_points.size());
  std::vector<Candidate> cand;
  for (size_t qi = 0; qi < query_points.size(); ++qi) {
    const auto& q = query_points.coords[qi];
    const int cx = cell_of(q[0]), cy = cell_of(q[1]), cz = cell_of(q[2]);
    cand.clear();
    // expand rings of cells until the K-th best cannot be beaten by anything
    // in a farther ring
    for (int ring = 0; ring < G + 1; ++ring) {
      for (int z = std::max(0, cz - ring); z <= std::min(G - 1, cz + ring); ++z) {
        for (int y = std::max(0, cy - ring); y <= std::min(G - 1, cy + ring); ++y) {
          for (int x = std::max(0, cx - ring); x <= std::min(G - 1, cx + ring);
               ++x) {
            if (std::max({std::abs(x - cx), std::abs(y - cy), std::abs(z - cz)}) !=
                ring)
              continue; // shell only
            for (int i : bins[(static_cast<size_t>(z) * G + y) * G + x])
              cand.push_back({dist2(q, reference_points.coords[i]), i});
          }
        }
      }
      if (static_cast<int>(cand.size()) >= K) {
        std::nth_element(cand.begin(), cand.begin() + (K - 1), cand.end());
        double kth = cand[K - 1].d2;
        // any point in a ring farther than `ring` is at least ring*cell away;
        // strict comparison so equidistant smaller-index points are still found
        double safe = double(ring) * cell;
        if (safe * safe > kth) break;
      }
    }
    std::sort(cand.begin(), cand.end());
    out[qi].reserve(K);
    for (int k = 0; k < K; ++k) out[qi].push_back(cand[k].idx);
  }
  return out;
}

} // namespace tubefield
