#include "tubefield/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace tubefield {

VoxelVolume::VoxelVolume(int nx, int ny, int nz, uint16_t cls)
    : class_count(cls), nx_(nx), ny_(ny), nz_(nz) {
  if (nx < 1 || ny < 1 || nz < 1)
    throw std::invalid_argument("VoxelVolume: dims must be >= 1");
  if (cls < 1) throw std::invalid_argument("VoxelVolume: class_count must be >= 1");
  data_.assign(static_cast<size_t>(nx) * ny * nz, 0);
}

size_t VoxelVolume::count_foreground() const {
  size_t n = 0;
  for (uint8_t v : data_) n += (v > 0);
  return n;
}

CoordList VoxelVolume::foreground_voxels() const {
  CoordList out;
  size_t i = 0;
  for (int z = 0; z < nz_; ++z)
    for (int y = 0; y < ny_; ++y)
      for (int x = 0; x < nx_; ++x, ++i)
        if (data_[i] > 0) out.push_back({x, y, z});
  return out;
}

void VoxelVolume::fill(uint8_t v) { std::fill(data_.begin(), data_.end(), v); }

namespace {

constexpr int kOff6[6][3] = {{1, 0, 0},  {-1, 0, 0}, {0, 1, 0},
                             {0, -1, 0}, {0, 0, 1},  {0, 0, -1}};

} // namespace

ComponentLabeling connected_components(const VoxelVolume& vol,
                                       Connectivity conn) {
  const int nx = vol.nx(), ny = vol.ny(), nz = vol.nz();
  ComponentLabeling cl;
  cl.labels.assign(vol.voxel_count(), 0);

  // neighbor offset table for the requested adjacency
  std::vector<std::array<int, 3>> offs;
  if (conn == Connectivity::six) {
    for (auto& o : kOff6) offs.push_back({o[0], o[1], o[2]});
  } else {
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx)
          if (dx || dy || dz) offs.push_back({dx, dy, dz});
  }

  std::vector<size_t> stack;
  const auto& data = vol.data();
  size_t idx = 0;
  for (int z = 0; z < nz; ++z) {
    for (int y = 0; y < ny; ++y) {
      for (int x = 0; x < nx; ++x, ++idx) {
        if (data[idx] == 0 || cl.labels[idx] != 0) continue;
        const int32_t label = ++cl.count;
        size_t sz = 0;
        cl.labels[idx] = label;
        stack.push_back(idx);
        while (!stack.empty()) {
          size_t cur = stack.back();
          stack.pop_back();
          ++sz;
          int cx = static_cast<int>(cur % nx);
          int cy = static_cast<int>((cur / nx) % ny);
          int cz = static_cast<int>(cur / (static_cast<size_t>(nx) * ny));
          for (const auto& o : offs) {
            int px = cx + o[0], py = cy + o[1], pz = cz + o[2];
            if (!vol.in_bounds(px, py, pz)) continue;
            size_t pidx = vol.index(px, py, pz);
            if (data[pidx] > 0 && cl.labels[pidx] == 0) {
              cl.labels[pidx] = label;
              stack.push_back(pidx);
            }
          }
        }
        cl.sizes.push_back(sz);
      }
    }
  }
  return cl;
}

CoordList boundary_voxels(const VoxelVolume& vol) {
  CoordList out;
  for (int z = 0; z < vol.nz(); ++z) {
    for (int y = 0; y < vol.ny(); ++y) {
      for (int x = 0; x < vol.nx(); ++x) {
        if (!vol.foreground(x, y, z)) continue;
        for (const auto& o : kOff6) {
          if (vol.at_or_zero(x + o[0], y + o[1], z + o[2]) == 0) {
            out.push_back({x, y, z});
            break;
          }
        }
      }
    }
  }
  return out;
}

namespace {

// 1D lower-envelope pass of the Felzenszwalb-Huttenlocher squared distance
// transform, in place on one grid line. Entries may be +inf (no site yet on
// this line); a parabola at +inf can only sit at stack slot 0 from the
// initialization and is replaced by the first finite one.
void edt_pass_1d(std::vector<double>& d, std::vector<int>& v,
                 std::vector<double>& zbuf, int n, double* line) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  int k = 0;
  v[0] = 0;
  zbuf[0] = -kInf;
  zbuf[1] = kInf;
  for (int q = 1; q < n; ++q) {
    if (line[q] == kInf) continue;
    double s;
    bool replaced = false;
    while (true) {
      if (line[v[k]] == kInf) { // only possible at k == 0
        v[0] = q;
        zbuf[1] = kInf;
        replaced = true;
        break;
      }
      double num =
          (line[q] + double(q) * q) - (line[v[k]] + double(v[k]) * v[k]);
      s = num / (2.0 * q - 2.0 * v[k]);
      if (s <= zbuf[k]) {
        --k; // finite s is always > zbuf[0] = -inf, so k stays >= 0
      } else {
        break;
      }
    }
    if (replaced) continue;
    ++k;
    v[k] = q;
    zbuf[k] = s;
    zbuf[k + 1] = kInf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (zbuf[k + 1] < q) ++k;
    double dq = double(q) - v[k];
    d[q] = dq * dq + line[v[k]];
  }
  for (int q = 0; q < n; ++q) line[q] = d[q];
}

void edt_along_axis(std::vector<double>& field, const std::array<int, 3>& dims,
                    int axis) {
  const int nx = dims[0], ny = dims[1], nz = dims[2];
  const size_t sx = 1, sy = static_cast<size_t>(nx),
               sz = static_cast<size_t>(nx) * ny;
  int n;
  size_t stride;
  std::vector<std::array<size_t, 2>> lines; // (origin, count) pairs per line
  if (axis == 0) {
    n = nx;
    stride = sx;
    for (int z = 0; z < nz; ++z)
      for (int y = 0; y < ny; ++y) lines.push_back({z * sz + y * sy, 0});
  } else if (axis == 1) {
    n = ny;
    stride = sy;
    for (int z = 0; z < nz; ++z)
      for (int x = 0; x < nx; ++x) lines.push_back({z * sz + x * sx, 0});
  } else {
    n = nz;
    stride = sz;
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) lines.push_back({y * sy + x * sx, 0});
  }
  if (n == 1) return;

  std::vector<double> line(n), d(n), zbuf(n + 1);
  std::vector<int> v(n);
  constexpr double kInf = std::numeric_limits<double>::infinity();
  for (auto& L : lines) {
    bool any_finite = false;
    for (int i = 0; i < n; ++i) {
      line[i] = field[L[0] + i * stride];
      any_finite |= (line[i] != kInf);
    }
    if (!any_finite) continue;
    edt_pass_1d(d, v, zbuf, n, line.data());
    for (int i = 0; i < n; ++i) field[L[0] + i * stride] = line[i];
  }
}

} // namespace

std::vector<double> squared_distance_to_sites(
    const std::array<int, 3>& dims, const std::vector<uint8_t>& sites) {
  const size_t total =
      static_cast<size_t>(dims[0]) * dims[1] * dims[2];
  if (sites.size() != total)
    throw std::invalid_argument("squared_distance_to_sites: size mismatch");
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> field(total);
  bool any = false;
  for (size_t i = 0; i < total; ++i) {
    field[i] = sites[i] ? 0.0 : kInf;
    any |= (sites[i] != 0);
  }
  if (!any)
    throw std::runtime_error("squared_distance_to_sites: no site voxel");
  edt_along_axis(field, dims, 0);
  edt_along_axis(field, dims, 1);
  edt_along_axis(field, dims, 2);
  // squared distances between voxel centers are exact integers
  for (double& v : field) v = std::round(v);
  return field;
}

std::vector<double> distance_transform(const VoxelVolume& vol) {
  std::vector<uint8_t> background(vol.voxel_count());
  bool any_bg = false;
  for (size_t i = 0; i < background.size(); ++i) {
    background[i] = vol.data()[i] == 0 ? 1 : 0;
    any_bg |= background[i] != 0;
  }
  if (!any_bg) throw std::runtime_error("distance_transform: no background reference");
  std::vector<double> sq = squared_distance_to_sites(vol.dims(), background);
  for (double& v : sq) v = std::sqrt(v);
  return sq;
}

VoxelVolume dilate_ball(const CoordList& seeds, double radius,
                        const std::array<int, 3>& dims) {
  if (radius < 0.0) throw std::invalid_argument("dilate_ball: negative radius");
  VoxelVolume out(dims[0], dims[1], dims[2], 2);
  for (const auto& s : seeds)
    if (!out.in_bounds(s)) throw std::invalid_argument("dilate_ball: seed outside dims");
  const int r = static_cast<int>(std::floor(radius));
  const double r2 = radius * radius;
  for (const auto& s : seeds) {
    for (int dz = -r; dz <= r; ++dz) {
      for (int dy = -r; dy <= r; ++dy) {
        for (int dx = -r; dx <= r; ++dx) {
          if (double(dx) * dx + double(dy) * dy + double(dz) * dz > r2) continue;
          int x = s.x + dx, y = s.y + dy, z = s.z + dz;
          if (out.in_bounds(x, y, z)) out.at(x, y, z) = 1;
        }
      }
    }
  }
  return out;
}

namespace {

void put_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(char((v >> (8 * i)) & 0xff));
}
void put_u16(std::string& buf, uint16_t v) {
  buf.push_back(char(v & 0xff));
  buf.push_back(char((v >> 8) & 0xff));
}
void put_f32(std::string& buf, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(buf, bits);
}

uint32_t get_u32(const unsigned char* p) {
  return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 |
         uint32_t(p[3]) << 24;
}
uint16_t get_u16(const unsigned char* p) {
  return uint16_t(p[0]) | uint16_t(p[1]) << 8;
}
float get_f32(const unsigned char* p) {
  uint32_t bits = get_u32(p);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

constexpr size_t kHeaderSize = 4 + 1 + 1 + 2 + 12 + 12 + 2;

} // namespace

void write_volume(const VoxelVolume& vol, const std::string& path) {
  if (vol.voxel_count() == 0)
    throw std::invalid_argument("write_volume: empty volume");
  for (uint8_t v : vol.data())
    if (v >= vol.class_count)
      throw std::invalid_argument("write_volume: label exceeds class_count");
  std::string header;
  header.reserve(kHeaderSize);
  header += "VVOL";
  header.push_back(1); // version
  header.push_back(0); // dtype u8
  put_u16(header, 0);  // reserved
  put_u32(header, static_cast<uint32_t>(vol.nx()));
  put_u32(header, static_cast<uint32_t>(vol.ny()));
  put_u32(header, static_cast<uint32_t>(vol.nz()));
  put_f32(header, vol.spacing[0]);
  put_f32(header, vol.spacing[1]);
  put_f32(header, vol.spacing[2]);
  put_u16(header, vol.class_count);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_volume: cannot open " + path);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(vol.data().data()),
            static_cast<std::streamsize>(vol.voxel_count()));
  if (!out) throw std::runtime_error("write_volume: write failed for " + path);
}

VoxelVolume read_volume(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_volume: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  if (bytes.size() < 4 || bytes.compare(0, 4, "VVOL") != 0)
    throw std::runtime_error("read_volume: bad magic");
  if (bytes.size() < kHeaderSize)
    throw std::runtime_error("read_volume: truncated header");
  const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (p[4] != 1) throw std::runtime_error("read_volume: unsupported version");
  if (p[5] != 0) throw std::runtime_error("read_volume: unsupported dtype");
  uint32_t nx = get_u32(p + 8), ny = get_u32(p + 12), nz = get_u32(p + 16);
  if (nx < 1 || ny < 1 || nz < 1)
    throw std::runtime_error("read_volume: invalid dims");
  float sx = get_f32(p + 20), sy = get_f32(p + 24), sz = get_f32(p + 28);
  if (!(sx > 0.0f) || !(sy > 0.0f) || !(sz > 0.0f))
    throw std::runtime_error("read_volume: invalid spacing");
  uint16_t cls = get_u16(p + 32);
  if (cls < 1) throw std::runtime_error("read_volume: invalid class_count");
  const size_t expected = static_cast<size_t>(nx) * ny * nz;
  const size_t payload = bytes.size() - kHeaderSize;
  if (payload < expected) throw std::runtime_error("read_volume: truncated payload");
  if (payload > expected)
    throw std::runtime_error("read_volume: dim/payload mismatch");

  VoxelVolume vol(static_cast<int>(nx), static_cast<int>(ny),
                  static_cast<int>(nz), cls);
  vol.spacing = {sx, sy, sz};
  std::memcpy(vol.data().data(), bytes.data() + kHeaderSize, expected);
  for (uint8_t v : vol.data())
    if (v >= cls) throw std::runtime_error("read_volume: label exceeds class_count");
  return vol;
}

} // namespace tubefield
