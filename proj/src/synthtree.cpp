#include "tubefield/synthtree.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "tubefield/rng.hpp"

namespace tubefield {

namespace {

using Vec3 = std::array<double, 3>;

Vec3 operator+(const Vec3& a, const Vec3& b) {
  return {a[0] + b[0], a[1] + b[1], a[2] + b[2]};
}
Vec3 operator-(const Vec3& a, const Vec3& b) {
  return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}
Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
double dot(const Vec3& a, const Vec3& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}
Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2],
          a[0] * b[1] - a[1] * b[0]};
}
double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
Vec3 normalized(const Vec3& a) {
  double n = norm(a);
  return {a[0] / n, a[1] / n, a[2] / n};
}

double point_segment_dist2(const Vec3& p, const Vec3& a, const Vec3& b) {
  Vec3 ab = b - a;
  double len2 = dot(ab, ab);
  double t = len2 > 0.0 ? std::clamp(dot(p - a, ab) / len2, 0.0, 1.0) : 0.0;
  Vec3 c = a + t * ab;
  return dot(p - c, p - c);
}

constexpr double kChildSpread = 0.55; // base polar angle of children, radians

struct Grower {
  const TreeSpec& spec;
  Rng rng;
  std::vector<CapsuleBranch> branches;

  Grower(const TreeSpec& s) : spec(s), rng(s.seed) {}

  bool inside_margin(const Vec3& p, double margin) const {
    for (int k = 0; k < 3; ++k)
      if (p[k] < margin || p[k] > spec.dims[k] - 1 - margin) return false;
    return true;
  }

  // Deflects the growth direction back into the grid when the straight
  // endpoint would leave the safety margin.
  Vec3 steer_endpoint(const Vec3& base, Vec3 dir, double len, double margin) {
    Vec3 end = base + len * dir;
    for (int pass = 0; pass < 3 && !inside_margin(end, margin); ++pass) {
      for (int k = 0; k < 3; ++k) {
        if (end[k] < margin || end[k] > spec.dims[k] - 1 - margin) dir[k] = -dir[k];
      }
      dir = normalized(dir);
      end = base + len * dir;
    }
    if (!inside_margin(end, margin))
      throw std::runtime_error("spec does not fit");
    return end;
  }

  // Pre-order growth; parent links are rebuilt from the depth sequence
  // afterwards.
  void grow(const Vec3& base, const Vec3& dir, double radius, int depth,
            int tree_class) {
    double len = rng.uniform(spec.branch_length_range[0],
                             spec.branch_length_range[1]);
    double margin = radius + 2.0;
    Vec3 end = steer_endpoint(base, dir, len, margin);
    Vec3 actual_dir = normalized(end - base);
    branches.push_back({base, end, radius, -1, depth, tree_class});

    if (depth >= spec.depth) return;

    // orthonormal frame around the realized direction
    Vec3 axis = std::abs(actual_dir[0]) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
    Vec3 e1 = normalized(cross(actual_dir, axis));
    Vec3 e2 = cross(actual_dir, e1);

    double roll = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    double child_radius = std::max(1.0, radius * spec.radius_decay);
    struct ChildPlan { Vec3 dir; int cls; };
    std::vector<ChildPlan> plan;
    for (int i = 0; i < spec.children_per_node; ++i) {
      double theta = kChildSpread +
                     rng.uniform(-spec.bend_jitter, spec.bend_jitter);
      double phi = roll + 2.0 * 3.14159265358979323846 * i /
                              spec.children_per_node +
                   rng.uniform(-spec.bend_jitter, spec.bend_jitter);
      Vec3 cdir = normalized(std::cos(theta) * actual_dir +
                             std::sin(theta) *
                                 (std::cos(phi) * e1 + std::sin(phi) * e2));
      int cls = depth == 0 ? (i % (spec.class_count - 1)) + 1 : tree_class;
      plan.push_back({cdir, cls});
    }
    for (const auto& c : plan) grow(end, c.dir, child_radius, depth + 1, c.cls);
  }
};

} // namespace

SyntheticCase generate_case(const TreeSpec& spec) {
  if (spec.trunk_radius < 1.0)
    throw std::invalid_argument("generate_case: trunk_radius must be >= 1");
  if (spec.radius_decay <= 0.0 || spec.radius_decay > 1.0)
    throw std::invalid_argument("generate_case: radius_decay must be in (0,1]");
  if (spec.class_count < 2 || spec.class_count > 254)
    throw std::invalid_argument("generate_case: class_count out of range");
  if (spec.segment_count < 1 || spec.segment_count > 254)
    throw std::invalid_argument("generate_case: segment_count out of range");
  if (spec.children_per_node < 1)
    throw std::invalid_argument("generate_case: children_per_node must be >= 1");
  if (spec.depth < 0)
    throw std::invalid_argument("generate_case: depth must be >= 0");
  if (spec.branch_length_range[0] > spec.branch_length_range[1] ||
      spec.branch_length_range[0] <= 0.0)
    throw std::invalid_argument("generate_case: bad branch_length_range");
  const auto& dims = spec.dims;
  double base_margin = spec.trunk_radius + 2.0;
  for (int k = 0; k < 3; ++k)
    if (dims[k] < 2 * base_margin + 2)
      throw std::runtime_error("spec does not fit");

  Grower grower(spec);
  Vec3 base = {dims[0] / 2.0, dims[1] / 2.0, base_margin};
  grower.grow(base, {0.0, 0.0, 1.0}, spec.trunk_radius, 0, spec.class_count);

  // branches are in pre-order; the parent of branch i is the nearest earlier
  // branch with smaller depth
  auto& branches = grower.branches;
  {
    std::vector<int> stack;
    for (int i = 0; i < static_cast<int>(branches.size()); ++i) {
      while (!stack.empty() && branches[stack.back()].depth >= branches[i].depth)
        stack.pop_back();
      branches[i].parent = stack.empty() ? -1 : stack.back();
      stack.push_back(i);
    }
  }

  SyntheticCase out;
  out.spec = spec;
  out.branches = branches;
  out.tree_labels =
      VoxelVolume(dims[0], dims[1], dims[2],
                  static_cast<uint16_t>(spec.class_count + 1));
  out.complete_tree = VoxelVolume(dims[0], dims[1], dims[2], 2);

  // stamp capsules in pre-order; earlier branches keep their label on overlap
  for (const auto& b : branches) {
    double r = b.radius;
    int x0 = static_cast<int>(std::floor(std::min(b.p0[0], b.p1[0]) - r - 1));
    int x1 = static_cast<int>(std::ceil(std::max(b.p0[0], b.p1[0]) + r + 1));
    int y0 = static_cast<int>(std::floor(std::min(b.p0[1], b.p1[1]) - r - 1));
    int y1 = static_cast<int>(std::ceil(std::max(b.p0[1], b.p1[1]) + r + 1));
    int z0 = static_cast<int>(std::floor(std::min(b.p0[2], b.p1[2]) - r - 1));
    int z1 = static_cast<int>(std::ceil(std::max(b.p0[2], b.p1[2]) + r + 1));
    const double r2 = r * r;
    for (int z = z0; z <= z1; ++z) {
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          Vec3 p = {double(x), double(y), double(z)};
          if (point_segment_dist2(p, b.p0, b.p1) > r2) continue;
          if (!out.tree_labels.in_bounds(x, y, z))
            throw std::runtime_error("spec does not fit");
          if (out.tree_labels.at(x, y, z) == 0)
            out.tree_labels.at(x, y, z) = static_cast<uint8_t>(b.tree_class);
          out.complete_tree.at(x, y, z) = 1;
        }
      }
    }
  }

  // peripheral voxels (everything except the trunk class) define the region
  CoordList peripheral;
  for (int z = 0; z < dims[2]; ++z)
    for (int y = 0; y < dims[1]; ++y)
      for (int x = 0; x < dims[0]; ++x) {
        uint8_t c = out.tree_labels.at(x, y, z);
        if (c > 0 && c < spec.class_count) peripheral.push_back({x, y, z});
      }

  out.lung_mask = dilate_ball(peripheral, 3.0 * spec.trunk_radius, dims);
  out.segment_labels =
      VoxelVolume(dims[0], dims[1], dims[2],
                  static_cast<uint16_t>(spec.segment_count + 1));

  if (!peripheral.empty()) {
    // nearest-peripheral-voxel partition, one exact distance field per
    // segment class; ties resolve to the smallest id
    const size_t total = out.lung_mask.voxel_count();
    std::vector<double> best(total, std::numeric_limits<double>::infinity());
    std::vector<uint8_t> best_class(total, 0);
    for (int s = 1; s <= spec.segment_count; ++s) {
      std::vector<uint8_t> sites(total, 0);
      bool any = false;
      for (const auto& p : peripheral) {
        int cls = out.tree_labels.at(p);
        int seg = (cls - 1) % spec.segment_count + 1;
        if (seg == s) {
          sites[out.tree_labels.index(p.x, p.y, p.z)] = 1;
          any = true;
        }
      }
      if (!any) continue;
      std::vector<double> d2 = squared_distance_to_sites(dims, sites);
      for (size_t i = 0; i < total; ++i) {
        if (d2[i] < best[i]) {
          best[i] = d2[i];
          best_class[i] = static_cast<uint8_t>(s);
        }
      }
    }
    for (size_t i = 0; i < total; ++i)
      if (out.lung_mask.data()[i] > 0)
        out.segment_labels.data()[i] = best_class[i];
  }

  return out;
}

std::vector<SyntheticCase> generate_split(const TreeSpec& spec_template,
                                          int n_cases, uint64_t seed) {
  if (n_cases < 1)
    throw std::invalid_argument("generate_split: n_cases must be >= 1");
  std::vector<SyntheticCase> cases;
  cases.reserve(n_cases);
  for (int i = 0; i < n_cases; ++i) {
    TreeSpec s = spec_template;
    s.seed = seed + static_cast<uint64_t>(i);
    cases.push_back(generate_case(s));
  }
  return cases;
}

} // namespace tubefield
