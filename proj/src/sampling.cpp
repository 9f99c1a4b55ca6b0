#include "tubefield/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "tubefield/points.hpp"

namespace tubefield {

namespace {

int round_voxel(double v) { return static_cast<int>(std::floor(v + 0.5)); }

std::vector<size_t> collect_indices(const VoxelVolume& vol, bool foreground) {
  std::vector<size_t> out;
  for (size_t i = 0; i < vol.voxel_count(); ++i)
    if ((vol.data()[i] > 0) == foreground) out.push_back(i);
  return out;
}

Coord coord_of(const VoxelVolume& vol, size_t idx) {
  int nx = vol.nx(), ny = vol.ny();
  return {static_cast<int>(idx % nx), static_cast<int>((idx / nx) % ny),
          static_cast<int>(idx / (static_cast<size_t>(nx) * ny))};
}

// uniform voxel-center queries over an index set, without replacement while
// the set suffices
QueryBatch sample_voxel_queries(const VoxelVolume& domain,
                                const VoxelVolume& labels, int q_total,
                                uint64_t seed, Task task, Provenance prov) {
  std::vector<size_t> pool = collect_indices(domain, true);
  if (pool.empty())
    throw std::runtime_error("sample queries: empty sampling domain");
  if (q_total < 1)
    throw std::invalid_argument("sample queries: q_total must be >= 1");
  Rng rng(seed);
  std::vector<size_t> chosen;
  chosen.reserve(q_total);
  if (static_cast<int>(pool.size()) >= q_total) {
    for (int i = 0; i < q_total; ++i) {
      size_t j = i + rng.uniform_u64(pool.size() - i);
      std::swap(pool[i], pool[j]);
      chosen.push_back(pool[i]);
    }
  } else {
    for (int i = 0; i < q_total; ++i)
      chosen.push_back(pool[rng.uniform_u64(pool.size())]);
  }
  Normalizer norm = make_normalizer(domain.dims());
  QueryBatch batch;
  batch.task = task;
  for (size_t idx : chosen) {
    Coord c = coord_of(domain, idx);
    batch.coords.push_back(norm.normalize(c.x, c.y, c.z));
    batch.targets.push_back(labels.data()[idx]);
    batch.provenance.push_back(prov);
  }
  return batch;
}

} // namespace

QueryBatch sample_repair_queries(const VoxelVolume& supervision,
                                 const VoxelVolume& corrupted,
                                 const std::vector<BreakRecord>& records,
                                 int q_total, double p, uint64_t seed) {
  if (records.empty()) throw std::runtime_error("no disconnection available");
  if (!(p > 0.0 && p < 1.0))
    throw std::invalid_argument("sample_repair_queries: p must be in (0,1)");
  if (q_total < 1)
    throw std::invalid_argument("sample_repair_queries: q_total must be >= 1");
  if (supervision.dims() != corrupted.dims())
    throw std::invalid_argument("sample_repair_queries: dims mismatch");

  Rng rng(seed);
  const BreakRecord& rec = records[rng.uniform_u64(records.size())];
  const double rho = 6.0 * rec.branch_radius;
  const int n_near = static_cast<int>(std::floor(q_total * p));
  const int n_bg = q_total - n_near;

  Normalizer norm = make_normalizer(corrupted.dims());
  QueryBatch batch;
  batch.task = Task::repair;

  const double ax = rec.endpoint_a.x, ay = rec.endpoint_a.y,
               az = rec.endpoint_a.z;
  const double bx = rec.endpoint_b.x, by = rec.endpoint_b.y,
               bz = rec.endpoint_b.z;
  const double ux = bx - ax, uy = by - ay, uz = bz - az;
  const double len2 = ux * ux + uy * uy + uz * uz;
  const double lo[3] = {std::min(ax, bx) - rho, std::min(ay, by) - rho,
                        std::min(az, bz) - rho};
  const double hi[3] = {std::max(ax, bx) + rho, std::max(ay, by) + rho,
                        std::max(az, bz) + rho};

  int produced = 0;
  while (produced < n_near) {
    double px = rng.uniform(lo[0], hi[0]);
    double py = rng.uniform(lo[1], hi[1]);
    double pz = rng.uniform(lo[2], hi[2]);
    double t = len2 > 0.0
                   ? std::clamp(((px - ax) * ux + (py - ay) * uy + (pz - az) * uz) / len2,
                                0.0, 1.0)
                   : 0.0;
    double cx = ax + t * ux - px, cy = ay + t * uy - py, cz = az + t * uz - pz;
    if (cx * cx + cy * cy + cz * cz > rho * rho) continue;
    int vx = round_voxel(px), vy = round_voxel(py), vz = round_voxel(pz);
    if (!corrupted.in_bounds(vx, vy, vz)) continue;
    batch.coords.push_back(norm.normalize(px, py, pz));
    batch.targets.push_back(supervision.at(vx, vy, vz) > 0 ? 1 : 0);
    batch.provenance.push_back(Provenance::near_break);
    ++produced;
  }

  if (n_bg > 0) {
    std::vector<size_t> background = collect_indices(corrupted, false);
    if (background.empty())
      throw std::runtime_error("sample_repair_queries: no background voxels");
    for (int i = 0; i < n_bg; ++i) {
      size_t idx = background[rng.uniform_u64(background.size())];
      Coord c = coord_of(corrupted, idx);
      batch.coords.push_back(norm.normalize(c.x, c.y, c.z));
      batch.targets.push_back(supervision.data()[idx] > 0 ? 1 : 0);
      batch.provenance.push_back(Provenance::background);
    }
  }
  return batch;
}

QueryBatch sample_label_queries(const VoxelVolume& input,
                                const VoxelVolume& labels, int q_total,
                                uint64_t seed) {
  if (input.dims() != labels.dims())
    throw std::invalid_argument("sample_label_queries: dims mismatch");
  return sample_voxel_queries(input, labels, q_total, seed, Task::label,
                              Provenance::foreground);
}

QueryBatch sample_segment_queries(const VoxelVolume& lung_mask,
                                  const VoxelVolume& segment_labels,
                                  int q_total, uint64_t seed) {
  if (lung_mask.dims() != segment_labels.dims())
    throw std::invalid_argument("sample_segment_queries: dims mismatch");
  return sample_voxel_queries(lung_mask, segment_labels, q_total, seed,
                              Task::segment, Provenance::lung);
}

WeakSample make_weak_sample(const VoxelVolume& corrupted, int min_nodes,
                            uint64_t seed) {
  CorruptResult res = corrupt(corrupted, 1, min_nodes, seed);
  if (res.records.empty()) throw std::runtime_error("no breakable branch");
  WeakSample w;
  w.input_tree = std::move(res.volume);
  w.target_tree = corrupted;
  w.synthetic_record = std::move(res.records.front());
  return w;
}

} // namespace tubefield
