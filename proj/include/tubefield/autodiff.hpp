#pragma once

// Minimal reverse-mode automatic differentiation on dense arrays, sized for
// this project: enough ops for point MLPs, cross-attention over KNN lists,
// scatter/gather between point sets and grids, small 2D/3D convolutions and
// the loss heads. Scalar type is a template parameter: training runs float,
// gradient verification runs double.
//
// Determinism contract: every output element is accumulated in a fixed
// iteration order that does not depend on batching, chunking or thread
// count (threads only ever split independent output elements).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <vector>

namespace tubefield::ad {

inline int& thread_count() {
  static int n = 1;
  return n;
}
inline void set_threads(int n) { thread_count() = n < 1 ? 1 : n; }

template <typename T>
struct Array {
  std::vector<size_t> shape;
  std::vector<T> data;

  Array() = default;
  explicit Array(std::vector<size_t> s) : shape(std::move(s)) {
    data.assign(numel_of(shape), T(0));
  }
  static size_t numel_of(const std::vector<size_t>& s) {
    size_t n = 1;
    for (size_t d : s) n *= d;
    return n;
  }
  size_t numel() const { return data.size(); }
  size_t dim(int i) const { return shape[i]; }

  T& at2(size_t i, size_t j) { return data[i * shape[1] + j]; }
  const T& at2(size_t i, size_t j) const { return data[i * shape[1] + j]; }
};

template <typename T>
class Graph {
public:
  using Id = int;

  Id constant(Array<T> v) { return push(std::move(v), false); }
  Id leaf(Array<T> v) { return push(std::move(v), true); }

  const Array<T>& value(Id id) const { return nodes_[id].value; }
  const Array<T>& grad(Id id) const { return nodes_[id].grad; }
  size_t size() const { return nodes_.size(); }

  // ---- elementwise ----

  Id add(Id a, Id b) {
    check_same_shape(a, b, "add");
    Array<T> out(nodes_[a].value.shape);
    const auto& va = nodes_[a].value.data;
    const auto& vb = nodes_[b].value.data;
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] = va[i] + vb[i];
    return make(std::move(out), {a, b}, [this, a, b](const Array<T>& g) {
      accumulate(a, g.data, T(1));
      accumulate(b, g.data, T(1));
    });
  }

  Id sub(Id a, Id b) {
    check_same_shape(a, b, "sub");
    Array<T> out(nodes_[a].value.shape);
    for (size_t i = 0; i < out.numel(); ++i)
      out.data[i] = nodes_[a].value.data[i] - nodes_[b].value.data[i];
    return make(std::move(out), {a, b}, [this, a, b](const Array<T>& g) {
      accumulate(a, g.data, T(1));
      accumulate(b, g.data, T(-1));
    });
  }

  Id mul(Id a, Id b) {
    check_same_shape(a, b, "mul");
    Array<T> out(nodes_[a].value.shape);
    for (size_t i = 0; i < out.numel(); ++i)
      out.data[i] = nodes_[a].value.data[i] * nodes_[b].value.data[i];
    return make(std::move(out), {a, b}, [this, a, b](const Array<T>& g) {
      if (wants(a)) {
        auto& ga = nodes_[a].grad.data;
        for (size_t i = 0; i < g.numel(); ++i)
          ga[i] += g.data[i] * nodes_[b].value.data[i];
      }
      if (wants(b)) {
        auto& gb = nodes_[b].grad.data;
        for (size_t i = 0; i < g.numel(); ++i)
          gb[i] += g.data[i] * nodes_[a].value.data[i];
      }
    });
  }

  Id scale(Id a, T s) {
    Array<T> out(nodes_[a].value.shape);
    for (size_t i = 0; i < out.numel(); ++i)
      out.data[i] = s * nodes_[a].value.data[i];
    return make(std::move(out), {a}, [this, a, s](const Array<T>& g) {
      accumulate(a, g.data, s);
    });
  }

  Id relu(Id a) {
    Array<T> out(nodes_[a].value.shape);
    for (size_t i = 0; i < out.numel(); ++i)
      out.data[i] = nodes_[a].value.data[i] > T(0) ? nodes_[a].value.data[i] : T(0);
    return make(std::move(out), {a}, [this, a](const Array<T>& g) {
      if (!wants(a)) return;
      auto& ga = nodes_[a].grad.data;
      const auto& va = nodes_[a].value.data;
      for (size_t i = 0; i < g.numel(); ++i)
        if (va[i] > T(0)) ga[i] += g.data[i]; // subgradient 0 at 0
    });
  }

  Id sigmoid(Id a) {
    Array<T> out(nodes_[a].value.shape);
    for (size_t i = 0; i < out.numel(); ++i) {
      T x = nodes_[a].value.data[i];
      out.data[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                              : std::exp(x) / (T(1) + std::exp(x));
    }
    Id id = make(std::move(out), {a}, nullptr);
    nodes_[id].backward = [this, a, id](const Array<T>& g) {
      if (!wants(a)) return;
      auto& ga = nodes_[a].grad.data;
      const auto& y = nodes_[id].value.data;
      for (size_t i = 0; i < g.numel(); ++i)
        ga[i] += g.data[i] * y[i] * (T(1) - y[i]);
    };
    return id;
  }

  Id softmax_rows(Id a) {
    const auto& v = nodes_[a].value;
    if (v.shape.size() != 2) throw std::invalid_argument("softmax_rows: 2D only");
    const size_t n = v.shape[0], m = v.shape[1];
    Array<T> out(v.shape);
    for (size_t i = 0; i < n; ++i) {
      T mx = v.data[i * m];
      for (size_t j = 1; j < m; ++j) mx = std::max(mx, v.data[i * m + j]);
      T sum = T(0);
      for (size_t j = 0; j < m; ++j) {
        T e = std::exp(v.data[i * m + j] - mx);
        out.data[i * m + j] = e;
        sum += e;
      }
      for (size_t j = 0; j < m; ++j) out.data[i * m + j] /= sum;
    }
    Id id = make(std::move(out), {a}, nullptr);
    nodes_[id].backward = [this, a, id, n, m](const Array<T>& g) {
      if (!wants(a)) return;
      auto& ga = nodes_[a].grad.data;
      const auto& y = nodes_[id].value.data;
      for (size_t i = 0; i < n; ++i) {
        T dotp = T(0);
        for (size_t j = 0; j < m; ++j) dotp += g.data[i * m + j] * y[i * m + j];
        for (size_t j = 0; j < m; ++j)
          ga[i * m + j] += y[i * m + j] * (g.data[i * m + j] - dotp);
      }
    };
    return id;
  }

  // ---- linear algebra ----

  // y = x W^T (+ b); x: (n,in), W: (out,in), b: (out) or -1
  Id linear(Id x, Id w, Id b = -1) {
    const auto& vx = nodes_[x].value;
    const auto& vw = nodes_[w].value;
    if (vx.shape.size() != 2 || vw.shape.size() != 2 ||
        vx.shape[1] != vw.shape[1])
      throw std::invalid_argument("linear: shape mismatch");
    const size_t n = vx.shape[0], in = vx.shape[1], out_dim = vw.shape[0];
    if (b >= 0 && nodes_[b].value.numel() != out_dim)
      throw std::invalid_argument("linear: bias shape mismatch");
    Array<T> out({n, out_dim});
    const T* bias = b >= 0 ? nodes_[b].value.data.data() : nullptr;
    const T* px = vx.data.data();
    const T* pw = vw.data.data();
    T* po = out.data.data();
    // transposed weight copy makes the inner loop contiguous and free of
    // reductions; per-output accumulation stays in ascending k order
    std::vector<T> wt(in * out_dim);
    for (size_t j = 0; j < out_dim; ++j)
      for (size_t k = 0; k < in; ++k) wt[k * out_dim + j] = pw[j * in + k];
#pragma omp parallel for num_threads(thread_count()) if (thread_count() > 1 && n > 64)
    for (long long i = 0; i < static_cast<long long>(n); ++i) {
      T* oi = po + i * out_dim;
      if (bias) {
        for (size_t j = 0; j < out_dim; ++j) oi[j] = bias[j];
      } else {
        for (size_t j = 0; j < out_dim; ++j) oi[j] = T(0);
      }
      const T* xi = px + i * in;
      for (size_t k = 0; k < in; ++k) {
        T a = xi[k];
        if (a == T(0)) continue;
        const T* wtk = wt.data() + k * out_dim;
        for (size_t j = 0; j < out_dim; ++j) oi[j] += a * wtk[j];
      }
    }
    std::vector<Id> parents = b >= 0 ? std::vector<Id>{x, w, b}
                                     : std::vector<Id>{x, w};
    return make(std::move(out), parents,
                [this, x, w, b, n, in, out_dim](const Array<T>& g) {
      const T* pg = g.data.data();
      if (wants(x)) {
        T* gx = nodes_[x].grad.data.data();
        const T* pw = nodes_[w].value.data.data();
#pragma omp parallel for num_threads(thread_count()) if (thread_count() > 1 && n > 64)
        for (long long i = 0; i < static_cast<long long>(n); ++i)
          for (size_t j = 0; j < out_dim; ++j) {
            T gij = pg[i * out_dim + j];
            const T* wj = pw + j * in;
            T* gxi = gx + i * in;
            for (size_t k = 0; k < in; ++k) gxi[k] += gij * wj[k];
          }
      }
      if (wants(w)) {
        T* gw = nodes_[w].grad.data.data();
        const T* px = nodes_[x].value.data.data();
#pragma omp parallel for num_threads(thread_count()) if (thread_count() > 1 && out_dim > 8)
        for (long long j = 0; j < static_cast<long long>(out_dim); ++j)
          for (size_t i = 0; i < n; ++i) {
            T gij = pg[i * out_dim + j];
            const T* xi = px + i * in;
            T* gwj = gw + j * in;
            for (size_t k = 0; k < in; ++k) gwj[k] += gij * xi[k];
          }
      }
      if (b >= 0 && wants(b)) {
        T* gb = nodes_[b].grad.data.data();
        for (size_t i = 0; i < n; ++i)
          for (size_t j = 0; j < out_dim; ++j) gb[j] += pg[i * out_dim + j];
      }
    });
  }

  // ---- shape plumbing ----

  Id concat_cols(const std::vector<Id>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    size_t n = nodes_[parts[0]].value.shape[0], total = 0;
    for (Id p : parts) {
      if (nodes_[p].value.shape.size() != 2 || nodes_[p].value.shape[0] != n)
        throw std::invalid_argument("concat_cols: shape mismatch");
      total += nodes_[p].value.shape[1];
    }
    Array<T> out({n, total});
    size_t off = 0;
    for (Id p : parts) {
      size_t m = nodes_[p].value.shape[1];
      for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < m; ++j)
          out.data[i * total + off + j] = nodes_[p].value.data[i * m + j];
      off += m;
    }
    return make(std::move(out), parts,
                [this, parts, n, total](const Array<T>& g) {
      size_t off = 0;
      for (Id p : parts) {
        size_t m = nodes_[p].value.shape[1];
        if (wants(p)) {
          auto& gp = nodes_[p].grad.data;
          for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < m; ++j)
              gp[i * m + j] += g.data[i * total + off + j];
        }
        off += m;
      }
    });
  }

  Id concat_rows(Id a, Id b) {
    const auto& va = nodes_[a].value;
    const auto& vb = nodes_[b].value;
    if (va.shape.size() != 2 || vb.shape.size() != 2 ||
        va.shape[1] != vb.shape[1])
      throw std::invalid_argument("concat_rows: shape mismatch");
    Array<T> out({va.shape[0] + vb.shape[0], va.shape[1]});
    std::copy(va.data.begin(), va.data.end(), out.data.begin());
    std::copy(vb.data.begin(), vb.data.end(), out.data.begin() + va.numel());
    size_t na = va.numel();
    return make(std::move(out), {a, b}, [this, a, b, na](const Array<T>& g) {
      if (wants(a)) {
        auto& ga = nodes_[a].grad.data;
        for (size_t i = 0; i < na; ++i) ga[i] += g.data[i];
      }
      if (wants(b)) {
        auto& gb = nodes_[b].grad.data;
        for (size_t i = 0; i < gb.size(); ++i) gb[i] += g.data[na + i];
      }
    });
  }

  // (C1,H,W) ++ (C2,H,W) -> (C1+C2,H,W)
  Id concat_chan(Id a, Id b) {
    const auto& va = nodes_[a].value;
    const auto& vb = nodes_[b].value;
    if (va.shape.size() != 3 || vb.shape.size() != 3 ||
        va.shape[1] != vb.shape[1] || va.shape[2] != vb.shape[2])
      throw std::invalid_argument("concat_chan: shape mismatch");
    Array<T> out({va.shape[0] + vb.shape[0], va.shape[1], va.shape[2]});
    std::copy(va.data.begin(), va.data.end(), out.data.begin());
    std::copy(vb.data.begin(), vb.data.end(), out.data.begin() + va.numel());
    size_t na = va.numel();
    return make(std::move(out), {a, b}, [this, a, b, na](const Array<T>& g) {
      if (wants(a)) {
        auto& ga = nodes_[a].grad.data;
        for (size_t i = 0; i < na; ++i) ga[i] += g.data[i];
      }
      if (wants(b)) {
        auto& gb = nodes_[b].grad.data;
        for (size_t i = 0; i < gb.size(); ++i) gb[i] += g.data[na + i];
      }
    });
  }

  // ---- point/grid exchange ----

  // Per-cell mean of the rows landing in each cell; output is channel-major
  // (d, n_cells) so grids and planes can be viewed without a transpose.
  Id scatter_mean(Id feats, std::vector<int32_t> cells, size_t n_cells,
                  std::vector<size_t> out_shape) {
    const auto& v = nodes_[feats].value;
    if (v.shape.size() != 2 || cells.size() != v.shape[0])
      throw std::invalid_argument("scatter_mean: shape mismatch");
    const size_t n = v.shape[0], d = v.shape[1];
    if (Array<T>::numel_of(out_shape) != d * n_cells)
      throw std::invalid_argument("scatter_mean: bad output shape");
    auto counts = std::make_shared<std::vector<int32_t>>(n_cells, 0);
    for (int32_t c : cells) {
      if (c < 0 || static_cast<size_t>(c) >= n_cells)
        throw std::invalid_argument("scatter_mean: cell out of range");
      ++(*counts)[c];
    }
    Array<T> out(out_shape);
    for (size_t i = 0; i < n; ++i) {
      int32_t c = cells[i];
      for (size_t k = 0; k < d; ++k)
        out.data[k * n_cells + c] += v.data[i * d + k];
    }
    for (size_t c = 0; c < n_cells; ++c) {
      if ((*counts)[c] == 0) continue;
      T inv = T(1) / T((*counts)[c]);
      for (size_t k = 0; k < d; ++k) out.data[k * n_cells + c] *= inv;
    }
    auto cells_ptr = std::make_shared<std::vector<int32_t>>(std::move(cells));
    return make(std::move(out), {feats},
                [this, feats, cells_ptr, counts, n, d, n_cells](const Array<T>& g) {
      if (!wants(feats)) return;
      auto& gf = nodes_[feats].grad.data;
      for (size_t i = 0; i < n; ++i) {
        int32_t c = (*cells_ptr)[i];
        T inv = T(1) / T((*counts)[c]);
        for (size_t k = 0; k < d; ++k)
          gf[i * d + k] += g.data[k * n_cells + c] * inv;
      }
    });
  }

  // Trilinear interpolation of a (C,G,G,G) grid at continuous grid-frame
  // coordinates (clamped to the border).
  Id trilinear_gather(Id grid, std::vector<std::array<double, 3>> coords) {
    const auto& v = nodes_[grid].value;
    if (v.shape.size() != 4) throw std::invalid_argument("trilinear_gather: 4D grid");
    const size_t C = v.shape[0], G = v.shape[1];
    if (v.shape[2] != G || v.shape[3] != G)
      throw std::invalid_argument("trilinear_gather: cubic grid only");
    const size_t n = coords.size();
    struct Corner { size_t cell; T w; };
    auto corners = std::make_shared<std::vector<std::array<Corner, 8>>>(n);
    for (size_t i = 0; i < n; ++i) {
      double cs[3];
      size_t c0[3];
      double f[3];
      for (int k = 0; k < 3; ++k) {
        cs[k] = std::min(std::max(coords[i][k], 0.0), double(G - 1));
        c0[k] = std::min(static_cast<size_t>(cs[k]), G - 2);
        f[k] = cs[k] - double(c0[k]);
      }
      int idx = 0;
      for (int dz = 0; dz <= 1; ++dz)
        for (int dy = 0; dy <= 1; ++dy)
          for (int dx = 0; dx <= 1; ++dx, ++idx) {
            double w = (dx ? f[0] : 1.0 - f[0]) * (dy ? f[1] : 1.0 - f[1]) *
                       (dz ? f[2] : 1.0 - f[2]);
            size_t cell =
                ((c0[2] + dz) * G + (c0[1] + dy)) * G + (c0[0] + dx);
            (*corners)[i][idx] = {cell, T(w)};
          }
    }
    Array<T> out({n, C});
    const size_t g3 = G * G * G;
    for (size_t i = 0; i < n; ++i)
      for (size_t ch = 0; ch < C; ++ch) {
        T acc = T(0);
        for (const auto& cr : (*corners)[i])
          acc += cr.w * v.data[ch * g3 + cr.cell];
        out.data[i * C + ch] = acc;
      }
    return make(std::move(out), {grid},
                [this, grid, corners, n, C, g3](const Array<T>& g) {
      if (!wants(grid)) return;
      auto& gg = nodes_[grid].grad.data;
      for (size_t i = 0; i < n; ++i)
        for (size_t ch = 0; ch < C; ++ch) {
          T gi = g.data[i * C + ch];
          for (const auto& cr : (*corners)[i]) gg[ch * g3 + cr.cell] += gi * cr.w;
        }
    });
  }

  // Bilinear interpolation of a (C,R,R) plane at continuous cell coordinates
  // (row-coordinate second). uv[i] = (u: column/x cell, v: row/y cell).
  Id bilinear_sample(Id plane, std::vector<std::array<double, 2>> uv) {
    const auto& v = nodes_[plane].value;
    if (v.shape.size() != 3) throw std::invalid_argument("bilinear_sample: 3D plane");
    const size_t C = v.shape[0], R = v.shape[1];
    if (v.shape[2] != R) throw std::invalid_argument("bilinear_sample: square plane");
    const size_t n = uv.size();
    struct Corner { size_t cell; T w; };
    auto corners = std::make_shared<std::vector<std::array<Corner, 4>>>(n);
    for (size_t i = 0; i < n; ++i) {
      double cs[2];
      size_t c0[2];
      double f[2];
      for (int k = 0; k < 2; ++k) {
        cs[k] = std::min(std::max(uv[i][k], 0.0), double(R - 1));
        c0[k] = std::min(static_cast<size_t>(cs[k]), R - 2);
        f[k] = cs[k] - double(c0[k]);
      }
      int idx = 0;
      for (int dv = 0; dv <= 1; ++dv)
        for (int du = 0; du <= 1; ++du, ++idx) {
          double w = (du ? f[0] : 1.0 - f[0]) * (dv ? f[1] : 1.0 - f[1]);
          (*corners)[i][idx] = {(c0[1] + dv) * R + (c0[0] + du), T(w)};
        }
    }
    Array<T> out({n, C});
    const size_t r2 = R * R;
    for (size_t i = 0; i < n; ++i)
      for (size_t ch = 0; ch < C; ++ch) {
        T acc = T(0);
        for (const auto& cr : (*corners)[i]) acc += cr.w * v.data[ch * r2 + cr.cell];
        out.data[i * C + ch] = acc;
      }
    return make(std::move(out), {plane},
                [this, plane, corners, n, C, r2](const Array<T>& g) {
      if (!wants(plane)) return;
      auto& gp = nodes_[plane].grad.data;
      for (size_t i = 0; i < n; ++i)
        for (size_t ch = 0; ch < C; ++ch) {
          T gi = g.data[i * C + ch];
          for (const auto& cr : (*corners)[i]) gp[ch * r2 + cr.cell] += gi * cr.w;
        }
    });
  }

  // ---- attention / neighbor aggregation ----

  // Softmax cross-attention over per-row neighbor lists:
  // out_i = sum_j softmax_j(scale * q_i . key_{knn[i][j]}) * val_{knn[i][j]}
  Id attention(Id q, Id keys, Id vals, std::vector<int32_t> knn_flat, size_t K,
               T scale) {
    const auto& vq = nodes_[q].value;
    const auto& vk = nodes_[keys].value;
    const auto& vv = nodes_[vals].value;
    if (vq.shape.size() != 2 || vk.shape.size() != 2 || vv.shape.size() != 2 ||
        vq.shape[1] != vk.shape[1] || vk.shape != vv.shape)
      throw std::invalid_argument("attention: shape mismatch");
    const size_t n = vq.shape[0], d = vq.shape[1];
    if (knn_flat.size() != n * K) throw std::invalid_argument("attention: knn size");
    auto knn = std::make_shared<std::vector<int32_t>>(std::move(knn_flat));
    auto weights = std::make_shared<std::vector<T>>(n * K);
    Array<T> out({n, d});
    std::vector<T> scores(K);
    for (size_t i = 0; i < n; ++i) {
      const T* qi = vq.data.data() + i * d;
      T mx = -std::numeric_limits<T>::infinity();
      for (size_t j = 0; j < K; ++j) {
        const T* kj = vk.data.data() + size_t((*knn)[i * K + j]) * d;
        T s = T(0);
        for (size_t k = 0; k < d; ++k) s += qi[k] * kj[k];
        scores[j] = s * scale;
        mx = std::max(mx, scores[j]);
      }
      T sum = T(0);
      for (size_t j = 0; j < K; ++j) {
        T e = std::exp(scores[j] - mx);
        (*weights)[i * K + j] = e;
        sum += e;
      }
      T* oi = out.data.data() + i * d;
      for (size_t j = 0; j < K; ++j) {
        T w = (*weights)[i * K + j] / sum;
        (*weights)[i * K + j] = w;
        const T* vj = vv.data.data() + size_t((*knn)[i * K + j]) * d;
        for (size_t k = 0; k < d; ++k) oi[k] += w * vj[k];
      }
    }
    return make(std::move(out), {q, keys, vals},
                [this, q, keys, vals, knn, weights, n, d, K, scale](
                    const Array<T>& g) {
      const auto& vq = nodes_[q].value;
      const auto& vk = nodes_[keys].value;
      const auto& vv = nodes_[vals].value;
      std::vector<T> dw(K), ds(K);
      for (size_t i = 0; i < n; ++i) {
        const T* gi = g.data.data() + i * d;
        // dL/dw_j and softmax backward
        T dot_wd = T(0);
        for (size_t j = 0; j < K; ++j) {
          const T* vj = vv.data.data() + size_t((*knn)[i * K + j]) * d;
          T acc = T(0);
          for (size_t k = 0; k < d; ++k) acc += gi[k] * vj[k];
          dw[j] = acc;
          dot_wd += (*weights)[i * K + j] * acc;
        }
        for (size_t j = 0; j < K; ++j)
          ds[j] = (*weights)[i * K + j] * (dw[j] - dot_wd);
        if (wants(vals)) {
          auto& gv = nodes_[vals].grad.data;
          for (size_t j = 0; j < K; ++j) {
            T w = (*weights)[i * K + j];
            T* gvj = gv.data() + size_t((*knn)[i * K + j]) * d;
            for (size_t k = 0; k < d; ++k) gvj[k] += w * gi[k];
          }
        }
        if (wants(q)) {
          auto& gq = nodes_[q].grad.data;
          T* gqi = gq.data() + i * d;
          for (size_t j = 0; j < K; ++j) {
            const T* kj = vk.data.data() + size_t((*knn)[i * K + j]) * d;
            T s = ds[j] * scale;
            for (size_t k = 0; k < d; ++k) gqi[k] += s * kj[k];
          }
        }
        if (wants(keys)) {
          auto& gk = nodes_[keys].grad.data;
          const T* qi = vq.data.data() + i * d;
          for (size_t j = 0; j < K; ++j) {
            T* gkj = gk.data() + size_t((*knn)[i * K + j]) * d;
            T s = ds[j] * scale;
            for (size_t k = 0; k < d; ++k) gkj[k] += s * qi[k];
          }
        }
      }
    });
  }

  // out_i = sum_j w_ij * val_{knn[i][j]} with constant weights.
  Id weighted_gather(Id vals, std::vector<int32_t> knn_flat, size_t K,
                     std::vector<T> w_flat) {
    const auto& vv = nodes_[vals].value;
    if (vv.shape.size() != 2) throw std::invalid_argument("weighted_gather: 2D vals");
    const size_t n = knn_flat.size() / K, d = vv.shape[1];
    if (knn_flat.size() != n * K || w_flat.size() != n * K)
      throw std::invalid_argument("weighted_gather: size mismatch");
    auto knn = std::make_shared<std::vector<int32_t>>(std::move(knn_flat));
    auto w = std::make_shared<std::vector<T>>(std::move(w_flat));
    Array<T> out({n, d});
    for (size_t i = 0; i < n; ++i) {
      T* oi = out.data.data() + i * d;
      for (size_t j = 0; j < K; ++j) {
        const T* vj = vv.data.data() + size_t((*knn)[i * K + j]) * d;
        T wj = (*w)[i * K + j];
        for (size_t k = 0; k < d; ++k) oi[k] += wj * vj[k];
      }
    }
    return make(std::move(out), {vals},
                [this, vals, knn, w, n, d, K](const Array<T>& g) {
      if (!wants(vals)) return;
      auto& gv = nodes_[vals].grad.data;
      for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < K; ++j) {
          T wj = (*w)[i * K + j];
          T* gvj = gv.data() + size_t((*knn)[i * K + j]) * d;
          const T* gi = g.data.data() + i * d;
          for (size_t k = 0; k < d; ++k) gvj[k] += wj * gi[k];
        }
    });
  }

  // ---- convolutions ----

  // 3x3 conv, padding 1, stride 1 or 2. x: (Ci,H,W), w: (Co,Ci,3,3), b: (Co).
  Id conv2d(Id x, Id w, Id b, int stride) {
    const auto& vx = nodes_[x].value;
    const auto& vw = nodes_[w].value;
    if (vx.shape.size() != 3 || vw.shape.size() != 4 || vw.shape[2] != 3 ||
        vw.shape[3] != 3 || vx.shape[0] != vw.shape[1])
      throw std::invalid_argument("conv2d: shape mismatch");
    if (stride != 1 && stride != 2) throw std::invalid_argument("conv2d: stride");
    const size_t Ci = vx.shape[0], H = vx.shape[1], W = vx.shape[2];
    const size_t Co = vw.shape[0];
    if (nodes_[b].value.numel() != Co)
      throw std::invalid_argument("conv2d: bias shape");
    const size_t Ho = H / stride, Wo = W / stride;
    Array<T> out({Co, Ho, Wo});
    const T* px = vx.data.data();
    const T* pw = vw.data.data();
    const T* pb = nodes_[b].value.data.data();
    T* po = out.data.data();
#pragma omp parallel for num_threads(thread_count()) if (thread_count() > 1)
    for (long long co = 0; co < static_cast<long long>(Co); ++co) {
      T* ochan = po + co * Ho * Wo;
      for (size_t i = 0; i < Ho * Wo; ++i) ochan[i] = pb[co];
      for (size_t ci = 0; ci < Ci; ++ci) {
        const T* ichan = px + ci * H * W;
        for (int ky = 0; ky < 3; ++ky) {
          for (int kx = 0; kx < 3; ++kx) {
            T wv = pw[((co * Ci + ci) * 3 + ky) * 3 + kx];
            if (wv == T(0)) continue;
            for (size_t y = 0; y < Ho; ++y) {
              long long iy = static_cast<long long>(y) * stride + ky - 1;
              if (iy < 0 || iy >= static_cast<long long>(H)) continue;
              const T* irow = ichan + iy * W;
              T* orow = ochan + y * Wo;
              for (size_t xo = 0; xo < Wo; ++xo) {
                long long ix = static_cast<long long>(xo) * stride + kx - 1;
                if (ix < 0 || ix >= static_cast<long long>(W)) continue;
                orow[xo] += wv * irow[ix];
              }
            }
          }
        }
      }
    }
    return make(std::move(out), {x, w, b},
                [this, x, w, b, stride, Ci, H, W, Co, Ho, Wo](const Array<T>& g) {
      const T* pg = g.data.data();
      if (wants(x)) {
        T* gx = nodes_[x].grad.data.data();
        const T* pw = nodes_[w].value.data.data();
#pragma omp parallel for num_threads(thread_count()) if (thread_count() > 1)
        for (long long ci = 0; ci < static_cast<long long>(Ci); ++ci) {
          T* gchan = gx + ci * H * W;
          for (size_t co = 0; co < Co; ++co) {
            const T* gout = pg + co * Ho * Wo;
            for (int ky = 0; ky < 3; ++ky) {
              for (int kx = 0; kx < 3; ++kx) {
                T wv = pw[((co * Ci + ci) * 3 + ky) * 3 + kx];
                if (wv == T(0)) continue;
                for (size_t y = 0; y < Ho; ++y) {
                  long long iy = static_cast<long long>(y) * stride + ky - 1;
                  if (iy < 0 || iy >= static_cast<long long>(H)) continue;
                  T* grow = gchan + iy * W;
                  const T* gorow = gout + y * Wo;
                  for (size_t xo = 0; xo < Wo; ++xo) {
                    long long ix = static_cast<long long>(xo) * stride + kx - 1;
                    if (ix < 0 || ix >= static_cast<long long>(W)) continue;
                    grow[ix] += wv * gorow[xo];
                  }
                }
              }
            }
          }
        }
      }
      if (wants(w)) {
        T* gw = nodes_[w].grad.data.data();
        const T* px = nodes_[x].value.data.data();
#pragma omp parallel for num_threads(thread_count()) if (thread_count() > 1)
        for (long long co = 0; co < static_cast<long long>(Co); ++co) {
          const T* gout = pg + co * Ho * Wo;
          for (size_t ci = 0; ci < Ci; ++ci) {
            const T* ichan = px + ci * H * W;
            for (int ky = 0; ky < 3; ++ky) {
              for (int kx = 0; kx < 3; ++kx) {
                T acc = T(0);
                for (size_t y = 0; y < Ho; ++y) {
                  long long iy = static_cast<long long>(y) * stride + ky - 1;
                  if (iy < 0 || iy >= static_cast<long long>(H)) continue;
                  const T* irow = ichan + iy * W;
                  const T* gorow = gout + y * Wo;
                  for (size_t xo = 0; xo < Wo; ++xo) {
                    long long ix = static_cast<long long>(xo) * stride + kx - 1;
                    if (ix < 0 || ix >= static_cast<long long>(W)) continue;
                    acc += gorow[xo] * irow[ix];
                  }
                }
                gw[((co * Ci + ci) * 3 + ky) * 3 + kx] += acc;
              }
            }
          }
        }
      }
      if (wants(b)) {
        T* gb = nodes_[b].grad.data.data();
        for (size_t co = 0; co < Co; ++co) {
          T acc = T(0);
          const T* gout = pg + co * Ho * Wo;
          for (size_t i = 0; i < Ho * Wo; ++i) acc += gout[i];
          gb[co] += acc;
        }
      }
    });
  }

  // 3x3x3 conv, padding 1, stride 1, on a cubic grid (Ci,G,G,G). When the
  // input is sparse (scatter of a few thousand points into the grid) the
  // active-cell list keeps the cost proportional to the occupancy.
  Id conv3d(Id x, Id w, Id b) {
    const auto& vx = nodes_[x].value;
    const auto& vw = nodes_[w].value;
    if (vx.shape.size() != 4 || vw.shape.size() != 5 ||
        vx.shape[0] != vw.shape[1])
      throw std::invalid_argument("conv3d: shape mismatch");
    const size_t Ci = vx.shape[0], G = vx.shape[1];
    const size_t Co = vw.shape[0];
    if (nodes_[b].value.numel() != Co)
      throw std::invalid_argument("conv3d: bias shape");
    const size_t g3 = G * G * G;

    // offsets with in-bounds handling baked into per-cell neighbor lists
    auto active = std::make_shared<std::vector<int32_t>>();
    {
      const T* px = vx.data.data();
      std::vector<uint8_t> nz(g3, 0);
      for (size_t ci = 0; ci < Ci; ++ci)
        for (size_t v = 0; v < g3; ++v)
          if (px[ci * g3 + v] != T(0)) nz[v] = 1;
      for (size_t v = 0; v < g3; ++v)
        if (nz[v]) active->push_back(static_cast<int32_t>(v));
    }

    Array<T> out({Co, G, G, G});
    const T* px = vx.data.data();
    const T* pw = vw.data.data();
    const T* pb = nodes_[b].value.data.data();
    T* po = out.data.data();
    auto for_neighbors = [G](int32_t v, auto&& fn) {
      int x0 = static_cast<int>(v % G);
      int y0 = static_cast<int>((v / G) % G);
      int z0 = static_cast<int>(v / (G * G));
      int o = 0;
      for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx, ++o) {
            int x1 = x0 + dx, y1 = y0 + dy, z1 = z0 + dz;
            if (x1 < 0 || y1 < 0 || z1 < 0 || x1 >= int(G) || y1 >= int(G) ||
                z1 >= int(G))
              continue;
            fn(o, (static_cast<size_t>(z1) * G + y1) * G + x1);
          }
    };
#pragma omp parallel for num_threads(thread_count()) if (thread_count() > 1)
    for (long long co = 0; co < static_cast<long long>(Co); ++co) {
      T* ochan = po + co * g3;
      for (size_t i = 0; i < g3; ++i) ochan[i] = pb[co];
      for (size_t ci = 0; ci < Ci; ++ci) {
        const T* ichan = px + ci * g3;
        const T* wk = pw + (co * Ci + ci) * 27;
        for (int32_t v : *active) {
          T val = ichan[v];
          if (val == T(0)) continue;
          // scatter: out[target] += w[26 - o] * in[v]  (correlation flip)
          for_neighbors(v, [&](int o, size_t target) {
            ochan[target] += wk[26 - o] * val;
          });
        }
      }
    }
    return make(std::move(out), {x, w, b},
                [this, x, w, b, active, for_neighbors, Ci, Co, g3](const Array<T>& g) {
      const T* pg = g.data.data();
      if (wants(x)) {
        T* gx = nodes_[x].grad.data.data();
        const T* pw = nodes_[w].value.data.data();
#pragma omp parallel for num_threads(thread_count()) if (thread_count() > 1)
        for (long long ci = 0; ci < static_cast<long long>(Ci); ++ci) {
          T* gchan = gx + ci * g3;
          for (size_t co = 0; co < Co; ++co) {
            const T* wk = pw + (co * Ci + ci) * 27;
            const T* gout = pg + co * g3;
            for (int32_t v : *active) {
              T acc = T(0);
              for_neighbors(v, [&](int o, size_t target) {
                acc += wk[26 - o] * gout[target];
              });
              gchan[v] += acc;
            }
          }
        }
      }
      if (wants(w)) {
        T* gw = nodes_[w].grad.data.data();
        const T* px = nodes_[x].value.data.data();
#pragma omp parallel for num_threads(thread_count()) if (thread_count() > 1)
        for (long long co = 0; co < static_cast<long long>(Co); ++co) {
          const T* gout = pg + co * g3;
          for (size_t ci = 0; ci < Ci; ++ci) {
            const T* ichan = px + ci * g3;
            T* wk = gw + (co * Ci + ci) * 27;
            for (int32_t v : *active) {
              T val = ichan[v];
              if (val == T(0)) continue;
              for_neighbors(v, [&](int o, size_t target) {
                wk[26 - o] += val * gout[target];
              });
            }
          }
        }
      }
      if (wants(b)) {
        T* gb = nodes_[b].grad.data.data();
        for (size_t co = 0; co < Co; ++co) {
          T acc = T(0);
          const T* gout = pg + co * g3;
          for (size_t i = 0; i < g3; ++i) acc += gout[i];
          gb[co] += acc;
        }
      }
    });
  }

  // nearest-neighbor 2x upsampling of (C,H,W)
  Id upsample2(Id x) {
    const auto& vx = nodes_[x].value;
    if (vx.shape.size() != 3) throw std::invalid_argument("upsample2: 3D only");
    const size_t C = vx.shape[0], H = vx.shape[1], W = vx.shape[2];
    Array<T> out({C, 2 * H, 2 * W});
    for (size_t c = 0; c < C; ++c)
      for (size_t y = 0; y < H; ++y)
        for (size_t xx = 0; xx < W; ++xx) {
          T v = vx.data[(c * H + y) * W + xx];
          size_t base = (c * 2 * H + 2 * y) * 2 * W + 2 * xx;
          out.data[base] = v;
          out.data[base + 1] = v;
          out.data[base + 2 * W] = v;
          out.data[base + 2 * W + 1] = v;
        }
    return make(std::move(out), {x}, [this, x, C, H, W](const Array<T>& g) {
      if (!wants(x)) return;
      auto& gx = nodes_[x].grad.data;
      for (size_t c = 0; c < C; ++c)
        for (size_t y = 0; y < H; ++y)
          for (size_t xx = 0; xx < W; ++xx) {
            size_t base = (c * 2 * H + 2 * y) * 2 * W + 2 * xx;
            gx[(c * H + y) * W + xx] += g.data[base] + g.data[base + 1] +
                                        g.data[base + 2 * W] +
                                        g.data[base + 2 * W + 1];
          }
    });
  }

  // ---- losses / reductions ----

  Id sum_all(Id a) {
    Array<T> out({1});
    for (T v : nodes_[a].value.data) out.data[0] += v;
    return make(std::move(out), {a}, [this, a](const Array<T>& g) {
      accumulate_scalar(a, g.data[0]);
    });
  }

  Id mean_all(Id a) {
    Array<T> out({1});
    for (T v : nodes_[a].value.data) out.data[0] += v;
    T inv = T(1) / T(nodes_[a].value.numel());
    out.data[0] *= inv;
    return make(std::move(out), {a}, [this, a, inv](const Array<T>& g) {
      accumulate_scalar(a, g.data[0] * inv);
    });
  }

  // weighted sum of scalar nodes
  Id scalar_mix(const std::vector<Id>& parts, const std::vector<T>& coeffs) {
    if (parts.size() != coeffs.size())
      throw std::invalid_argument("scalar_mix: size mismatch");
    Array<T> out({1});
    for (size_t i = 0; i < parts.size(); ++i) {
      if (nodes_[parts[i]].value.numel() != 1)
        throw std::invalid_argument("scalar_mix: scalars only");
      out.data[0] += coeffs[i] * nodes_[parts[i]].value.data[0];
    }
    return make(std::move(out), parts, [this, parts, coeffs](const Array<T>& g) {
      for (size_t i = 0; i < parts.size(); ++i)
        if (wants(parts[i])) nodes_[parts[i]].grad.data[0] += coeffs[i] * g.data[0];
    });
  }

  // mean of -(t ln p + (1-t) ln(1-p)); p must lie strictly inside (0,1)
  Id bce_loss(Id p, std::vector<T> targets) {
    const auto& vp = nodes_[p].value;
    if (vp.numel() != targets.size())
      throw std::invalid_argument("bce_loss: size mismatch");
    const size_t n = vp.numel();
    Array<T> out({1});
    for (size_t i = 0; i < n; ++i) {
      T pi = vp.data[i];
      out.data[0] -= targets[i] * std::log(pi) +
                     (T(1) - targets[i]) * std::log(T(1) - pi);
    }
    out.data[0] /= T(n);
    auto t = std::make_shared<std::vector<T>>(std::move(targets));
    return make(std::move(out), {p}, [this, p, t, n](const Array<T>& g) {
      if (!wants(p)) return;
      auto& gp = nodes_[p].grad.data;
      const auto& vp = nodes_[p].value.data;
      T s = g.data[0] / T(n);
      for (size_t i = 0; i < n; ++i)
        gp[i] += s * (-(*t)[i] / vp[i] + (T(1) - (*t)[i]) / (T(1) - vp[i]));
    });
  }

  // numerically safe BCE on logits: mean(softplus(z) - t*z)
  Id sigmoid_bce_with_logits(Id z, std::vector<T> targets) {
    const auto& vz = nodes_[z].value;
    if (vz.numel() != targets.size())
      throw std::invalid_argument("sigmoid_bce_with_logits: size mismatch");
    const size_t n = vz.numel();
    Array<T> out({1});
    for (size_t i = 0; i < n; ++i) {
      T x = vz.data[i];
      T softplus = std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
      out.data[0] += softplus - targets[i] * x;
    }
    out.data[0] /= T(n);
    auto t = std::make_shared<std::vector<T>>(std::move(targets));
    return make(std::move(out), {z}, [this, z, t, n](const Array<T>& g) {
      if (!wants(z)) return;
      auto& gz = nodes_[z].grad.data;
      const auto& vz = nodes_[z].value.data;
      T s = g.data[0] / T(n);
      for (size_t i = 0; i < n; ++i) {
        T x = vz[i];
        T sig = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                          : std::exp(x) / (T(1) + std::exp(x));
        gz[i] += s * (sig - (*t)[i]);
      }
    });
  }

  // 1 - (2 sum(p t) + 1) / (sum p + sum t + 1)
  Id soft_dice_loss(Id p, std::vector<T> targets) {
    const auto& vp = nodes_[p].value;
    if (vp.numel() != targets.size())
      throw std::invalid_argument("soft_dice_loss: size mismatch");
    const size_t n = vp.numel();
    T inter = T(0), psum = T(0), tsum = T(0);
    for (size_t i = 0; i < n; ++i) {
      inter += vp.data[i] * targets[i];
      psum += vp.data[i];
      tsum += targets[i];
    }
    T num = T(2) * inter + T(1);
    T den = psum + tsum + T(1);
    Array<T> out({1});
    out.data[0] = T(1) - num / den;
    auto t = std::make_shared<std::vector<T>>(std::move(targets));
    return make(std::move(out), {p}, [this, p, t, n, num, den](const Array<T>& g) {
      if (!wants(p)) return;
      auto& gp = nodes_[p].grad.data;
      T s = g.data[0];
      for (size_t i = 0; i < n; ++i)
        gp[i] += s * (num / (den * den) - T(2) * (*t)[i] / den);
    });
  }

  // mean negative log probability of the target class; dist rows are
  // probability distributions
  Id ce_loss(Id dist, std::vector<int32_t> labels) {
    const auto& v = nodes_[dist].value;
    if (v.shape.size() != 2 || v.shape[0] != labels.size())
      throw std::invalid_argument("ce_loss: shape mismatch");
    const size_t n = v.shape[0], C = v.shape[1];
    constexpr T kTiny = T(1e-12);
    Array<T> out({1});
    for (size_t i = 0; i < n; ++i) {
      int32_t y = labels[i];
      if (y < 0 || static_cast<size_t>(y) >= C)
        throw std::invalid_argument("ce_loss: label out of range");
      out.data[0] -= std::log(std::max(v.data[i * C + y], kTiny));
    }
    out.data[0] /= T(n);
    auto lab = std::make_shared<std::vector<int32_t>>(std::move(labels));
    return make(std::move(out), {dist}, [this, dist, lab, n, C](const Array<T>& g) {
      if (!wants(dist)) return;
      auto& gd = nodes_[dist].grad.data;
      const auto& v = nodes_[dist].value.data;
      T s = g.data[0] / T(n);
      for (size_t i = 0; i < n; ++i) {
        int32_t y = (*lab)[i];
        gd[i * C + y] -= s / std::max(v[i * C + y], kTiny);
      }
    });
  }

  // fused, numerically safe CE on logits: mean(logsumexp(z_i) - z_{i,y})
  Id softmax_ce_with_logits(Id z, std::vector<int32_t> labels) {
    const auto& v = nodes_[z].value;
    if (v.shape.size() != 2 || v.shape[0] != labels.size())
      throw std::invalid_argument("softmax_ce_with_logits: shape mismatch");
    const size_t n = v.shape[0], C = v.shape[1];
    Array<T> out({1});
    for (size_t i = 0; i < n; ++i) {
      int32_t y = labels[i];
      if (y < 0 || static_cast<size_t>(y) >= C)
        throw std::invalid_argument("softmax_ce_with_logits: label out of range");
      T mx = v.data[i * C];
      for (size_t j = 1; j < C; ++j) mx = std::max(mx, v.data[i * C + j]);
      T sum = T(0);
      for (size_t j = 0; j < C; ++j) sum += std::exp(v.data[i * C + j] - mx);
      out.data[0] += mx + std::log(sum) - v.data[i * C + y];
    }
    out.data[0] /= T(n);
    auto lab = std::make_shared<std::vector<int32_t>>(std::move(labels));
    return make(std::move(out), {z}, [this, z, lab, n, C](const Array<T>& g) {
      if (!wants(z)) return;
      auto& gz = nodes_[z].grad.data;
      const auto& v = nodes_[z].value.data;
      T s = g.data[0] / T(n);
      for (size_t i = 0; i < n; ++i) {
        T mx = v[i * C];
        for (size_t j = 1; j < C; ++j) mx = std::max(mx, v[i * C + j]);
        T sum = T(0);
        for (size_t j = 0; j < C; ++j) sum += std::exp(v[i * C + j] - mx);
        for (size_t j = 0; j < C; ++j) {
          T soft = std::exp(v[i * C + j] - mx) / sum;
          gz[i * C + j] += s * (soft - (j == static_cast<size_t>((*lab)[i]) ? T(1) : T(0)));
        }
      }
    });
  }

  // ---- engine ----

  void backward(Id root) {
    if (nodes_[root].value.numel() != 1)
      throw std::invalid_argument("backward: root must be scalar");
    for (auto& n : nodes_)
      if (n.needs_grad) {
        n.grad.shape = n.value.shape;
        n.grad.data.assign(n.value.numel(), T(0));
      }
    if (!nodes_[root].needs_grad)
      throw std::invalid_argument("backward: root does not require grad");
    nodes_[root].grad.data[0] = T(1);
    for (Id id = static_cast<Id>(nodes_.size()) - 1; id >= 0; --id) {
      auto& n = nodes_[id];
      if (!n.needs_grad || !n.backward) continue;
      n.backward(n.grad);
    }
  }

private:
  struct Node {
    Array<T> value;
    Array<T> grad;
    std::function<void(const Array<T>&)> backward;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;

  bool wants(Id id) const { return nodes_[id].needs_grad; }

  void accumulate(Id id, const std::vector<T>& g, T s) {
    if (!wants(id)) return;
    auto& dst = nodes_[id].grad.data;
    for (size_t i = 0; i < g.size(); ++i) dst[i] += s * g[i];
  }
  void accumulate_scalar(Id id, T s) {
    if (!wants(id)) return;
    for (auto& v : nodes_[id].grad.data) v += s;
  }

  void check_same_shape(Id a, Id b, const char* op) const {
    if (nodes_[a].value.shape != nodes_[b].value.shape)
      throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }

  Id push(Array<T> v, bool needs) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = needs;
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size()) - 1;
  }

  Id make(Array<T> v, const std::vector<Id>& parents,
          std::function<void(const Array<T>&)> back) {
    Node n;
    n.value = std::move(v);
    n.backward = std::move(back);
    for (Id p : parents) n.needs_grad |= nodes_[p].needs_grad;
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size()) - 1;
  }
};

} // namespace tubefield::ad
