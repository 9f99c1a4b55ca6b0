#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace tubefield {

struct Coord {
  int x = 0, y = 0, z = 0;

  friend bool operator==(const Coord&, const Coord&) = default;
  // ascending (z, y, x), the canonical iteration order of this project
  friend bool operator<(const Coord& a, const Coord& b) {
    if (a.z != b.z) return a.z < b.z;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  }
};

using CoordList = std::vector<Coord>;

// Dense 3D grid of u8 labels, x-fastest ordering. Carrier of every mask and
// label volume in the pipeline; label > 0 is foreground wherever a volume is
// interpreted as binary.
class VoxelVolume {
public:
  VoxelVolume() = default;
  VoxelVolume(int nx, int ny, int nz, uint16_t class_count = 2);

  int nx() const { return nx_; }
  int ny() const { return ny_; }
  int nz() const { return nz_; }
  std::array<int, 3> dims() const { return {nx_, ny_, nz_}; }
  size_t voxel_count() const { return data_.size(); }

  size_t index(int x, int y, int z) const {
    return (static_cast<size_t>(z) * ny_ + y) * nx_ + x;
  }
  bool in_bounds(int x, int y, int z) const {
    return x >= 0 && x < nx_ && y >= 0 && y < ny_ && z >= 0 && z < nz_;
  }
  bool in_bounds(const Coord& c) const { return in_bounds(c.x, c.y, c.z); }

  uint8_t at(int x, int y, int z) const { return data_[index(x, y, z)]; }
  uint8_t& at(int x, int y, int z) { return data_[index(x, y, z)]; }
  uint8_t at(const Coord& c) const { return at(c.x, c.y, c.z); }
  uint8_t& at(const Coord& c) { return at(c.x, c.y, c.z); }

  // 0 when outside the grid
  uint8_t at_or_zero(int x, int y, int z) const {
    return in_bounds(x, y, z) ? data_[index(x, y, z)] : uint8_t(0);
  }
  bool foreground(int x, int y, int z) const { return at(x, y, z) > 0; }
  bool foreground(const Coord& c) const { return at(c) > 0; }

  const std::vector<uint8_t>& data() const { return data_; }
  std::vector<uint8_t>& data() { return data_; }

  size_t count_foreground() const;
  CoordList foreground_voxels() const; // ascending (z,y,x)
  void fill(uint8_t v);

  std::array<float, 3> spacing = {1.0f, 1.0f, 1.0f};
  uint16_t class_count = 2;

private:
  int nx_ = 0, ny_ = 0, nz_ = 0;
  std::vector<uint8_t> data_;
};

struct ComponentLabeling {
  std::vector<int32_t> labels; // per voxel; 0 = background
  int32_t count = 0;           // number of foreground components
  std::vector<size_t> sizes;   // sizes[i] = voxel count of component i+1
};

enum class Connectivity { six = 6, twenty_six = 26 };

// Exact connected-component labeling of the binary interpretation of vol.
// Component ids are assigned in first-encounter order of the (z,y,x) scan,
// so labels are deterministic.
ComponentLabeling connected_components(const VoxelVolume& vol,
                                       Connectivity conn);

// Foreground voxels with at least one 6-neighbor that is background or
// outside the grid, ascending (z,y,x).
CoordList boundary_voxels(const VoxelVolume& vol);

// Exact Euclidean distance (unit voxel spacing) from every voxel to the
// nearest background voxel center; 0 on background. Throws if the volume has
// no background voxel.
std::vector<double> distance_transform(const VoxelVolume& vol);

// Exact squared Euclidean distance from every voxel of the grid to the
// nearest site voxel (site[i] != 0). Values are exact integers stored as
// doubles. Throws if there is no site.
std::vector<double> squared_distance_to_sites(const std::array<int, 3>& dims,
                                              const std::vector<uint8_t>& sites);

// Union of Euclidean balls of the given radius centered on the seeds.
// radius 0 reproduces exactly the seed set. Throws if a seed lies outside
// dims or radius < 0.
VoxelVolume dilate_ball(const CoordList& seeds, double radius,
                        const std::array<int, 3>& dims);

// "VVOL" container: 4-byte magic, u8 version=1, u8 dtype=0 (u8), u16
// reserved, 3x u32 dims, 3x f32 spacing, u16 class_count, all little-endian,
// then the raw payload, x-fastest. No compression.
VoxelVolume read_volume(const std::string& path);
void write_volume(const VoxelVolume& vol, const std::string& path);

} // namespace tubefield
