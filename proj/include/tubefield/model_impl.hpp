#pragma once

// template implementation of model.hpp

#include <algorithm>
#include <stdexcept>

namespace tubefield {

inline FusionMode fusion_mode_from_string(const std::string& s) {
  if (s == "ssa") return FusionMode::ssa;
  if (s == "early") return FusionMode::early;
  if (s == "late") return FusionMode::late;
  if (s == "distance_weighted") return FusionMode::distance_weighted;
  throw std::invalid_argument("unknown fusion mode: " + s);
}

inline std::string fusion_mode_to_string(FusionMode m) {
  switch (m) {
    case FusionMode::ssa: return "ssa";
    case FusionMode::early: return "early";
    case FusionMode::late: return "late";
    case FusionMode::distance_weighted: return "distance_weighted";
  }
  return "ssa";
}

template <typename T>
std::vector<std::pair<std::string, ad::Array<T>*>> Params<T>::entries() {
  std::vector<std::pair<std::string, ad::Array<T>*>> e;
  auto enc = [&](const std::string& p, EncoderParams<T>& s) {
    e.push_back({p + ".w1", &s.w1});
    e.push_back({p + ".b1", &s.b1});
    e.push_back({p + ".w2", &s.w2});
    e.push_back({p + ".b2", &s.b2});
    e.push_back({p + ".vox_w", &s.vox_w});
    e.push_back({p + ".vox_b", &s.vox_b});
  };
  enc("surf", surf);
  enc("skel", skel);
  if (hyper.fusion == FusionMode::ssa) {
    e.push_back({"ssa.wq", &wq});
    e.push_back({"ssa.wk", &wk});
    e.push_back({"ssa.wv", &wv});
    e.push_back({"ssa.wo", &wo});
  } else if (hyper.fusion == FusionMode::distance_weighted) {
    e.push_back({"dw.mix_w", &mix_w});
    e.push_back({"dw.mix_b", &mix_b});
  }
  e.push_back({"unet.enc0_w", &unet_enc0_w});
  e.push_back({"unet.enc0_b", &unet_enc0_b});
  e.push_back({"unet.down1_w", &unet_down1_w});
  e.push_back({"unet.down1_b", &unet_down1_b});
  e.push_back({"unet.enc1_w", &unet_enc1_w});
  e.push_back({"unet.enc1_b", &unet_enc1_b});
  e.push_back({"unet.down2_w", &unet_down2_w});
  e.push_back({"unet.down2_b", &unet_down2_b});
  e.push_back({"unet.bott_w", &unet_bott_w});
  e.push_back({"unet.bott_b", &unet_bott_b});
  e.push_back({"unet.up1_w", &unet_up1_w});
  e.push_back({"unet.up1_b", &unet_up1_b});
  e.push_back({"unet.dec1_w", &unet_dec1_w});
  e.push_back({"unet.dec1_b", &unet_dec1_b});
  e.push_back({"unet.up2_w", &unet_up2_w});
  e.push_back({"unet.up2_b", &unet_up2_b});
  e.push_back({"unet.dec2_w", &unet_dec2_w});
  e.push_back({"unet.dec2_b", &unet_dec2_b});
  e.push_back({"pos.w", &pos_w});
  e.push_back({"pos.b", &pos_b});
  auto head = [&](const std::string& p, HeadParams<T>& hd) {
    e.push_back({p + ".w1", &hd.w1});
    e.push_back({p + ".b1", &hd.b1});
    e.push_back({p + ".w2", &hd.w2});
    e.push_back({p + ".b2", &hd.b2});
    e.push_back({p + ".w3", &hd.w3});
    e.push_back({p + ".b3", &hd.b3});
  };
  head("head_repair", head_repair);
  head("head_label", head_label);
  head("head_segment", head_segment);
  return e;
}

template <typename T>
std::vector<std::pair<std::string, const ad::Array<T>*>> Params<T>::entries()
    const {
  auto mut = const_cast<Params<T>*>(this)->entries();
  std::vector<std::pair<std::string, const ad::Array<T>*>> e;
  e.reserve(mut.size());
  for (auto& [n, a] : mut) e.push_back({n, a});
  return e;
}

template <typename T>
Params<T> Params<T>::init(const Hyper& h, uint64_t seed) {
  Params<T> p;
  p.hyper = h;
  const size_t d = static_cast<size_t>(h.d);
  const size_t C = static_cast<size_t>(h.C);
  auto shape_of = [&](const std::string& name) -> std::vector<size_t> {
    const size_t in_s = 3 + h.descriptor_len();
    if (name == "surf.w1") return {d, in_s};
    if (name == "skel.w1") return {d, 3};
    if (name == "surf.b1" || name == "skel.b1") return {d};
    if (name == "surf.w2" || name == "skel.w2") return {d, d};
    if (name == "surf.b2" || name == "skel.b2") return {d};
    if (name == "surf.vox_w" || name == "skel.vox_w") return {d, d, 3, 3, 3};
    if (name == "surf.vox_b" || name == "skel.vox_b") return {d};
    if (name == "ssa.wq" || name == "ssa.wk" || name == "ssa.wv" ||
        name == "ssa.wo")
      return {d, d};
    if (name == "dw.mix_w") return {d, 2 * d};
    if (name == "dw.mix_b") return {d};
    const size_t ci = static_cast<size_t>(h.unet_in());
    if (name == "unet.enc0_w") return {C, ci, 3, 3};
    if (name == "unet.enc0_b") return {C};
    if (name == "unet.down1_w") return {2 * C, C, 3, 3};
    if (name == "unet.down1_b") return {2 * C};
    if (name == "unet.enc1_w") return {2 * C, 2 * C, 3, 3};
    if (name == "unet.enc1_b") return {2 * C};
    if (name == "unet.down2_w") return {4 * C, 2 * C, 3, 3};
    if (name == "unet.down2_b") return {4 * C};
    if (name == "unet.bott_w") return {4 * C, 4 * C, 3, 3};
    if (name == "unet.bott_b") return {4 * C};
    if (name == "unet.up1_w") return {2 * C, 4 * C, 3, 3};
    if (name == "unet.up1_b") return {2 * C};
    if (name == "unet.dec1_w") return {2 * C, 4 * C, 3, 3};
    if (name == "unet.dec1_b") return {2 * C};
    if (name == "unet.up2_w") return {C, 2 * C, 3, 3};
    if (name == "unet.up2_b") return {C};
    if (name == "unet.dec2_w") return {C, 2 * C, 3, 3};
    if (name == "unet.dec2_b") return {C};
    if (name == "pos.w") return {size_t(h.D), size_t(h.posenc_in())};
    if (name == "pos.b") return {size_t(h.D)};
    const size_t emb = static_cast<size_t>(h.embed_len());
    auto head_shape = [&](const std::string& tail,
                          size_t out) -> std::vector<size_t> {
      if (tail == "w1") return {256, emb};
      if (tail == "b1") return {256};
      if (tail == "w2") return {128, 256};
      if (tail == "b2") return {128};
      if (tail == "w3") return {out, 128};
      return {out};
    };
    auto dotpos = name.find('.');
    std::string prefix = name.substr(0, dotpos), tail = name.substr(dotpos + 1);
    if (prefix == "head_repair") return head_shape(tail, 1);
    if (prefix == "head_label")
      return head_shape(tail, static_cast<size_t>(h.tree_classes));
    if (prefix == "head_segment")
      return head_shape(tail, static_cast<size_t>(h.segment_classes));
    throw std::logic_error("unknown parameter name " + name);
  };

  Rng rng(seed);
  // biases follow their weight in registry order and share its fan_in
  size_t last_fan_in = 1;
  for (auto& [name, arr] : p.entries()) {
    std::vector<size_t> shape = shape_of(name);
    *arr = ad::Array<T>(shape);
    if (shape.size() >= 2) {
      last_fan_in = 1;
      for (size_t i = 1; i < shape.size(); ++i) last_fan_in *= shape[i];
    }
    T bound = T(1) / std::sqrt(T(last_fan_in));
    for (auto& v : arr->data) v = T(rng.uniform(-double(bound), double(bound)));
  }
  return p;
}

template <typename T>
size_t Params<T>::parameter_count() const {
  size_t n = 0;
  for (auto& [name, arr] : entries()) n += arr->numel();
  return n;
}

template <typename T>
bool Params<T>::all_finite() const {
  for (auto& [name, arr] : entries())
    for (T v : arr->data)
      if (!std::isfinite(double(v))) return false;
  return true;
}

template <typename T>
struct ParamNodes {
  using Id = typename ad::Graph<T>::Id;
  struct Enc { Id w1, b1, w2, b2, vox_w, vox_b; };
  struct Hd { Id w1, b1, w2, b2, w3, b3; };
  Enc surf, skel;
  Id wq = -1, wk = -1, wv = -1, wo = -1;
  Id mix_w = -1, mix_b = -1;
  Id enc0_w, enc0_b, down1_w, down1_b, enc1_w, enc1_b, down2_w, down2_b;
  Id bott_w, bott_b, up1_w, up1_b, dec1_w, dec1_b, up2_w, up2_b, dec2_w,
      dec2_b;
  Id pos_w, pos_b;
  Hd repair, label, segment;
  std::vector<std::pair<std::string, Id>> order; // registry order
};

template <typename T>
ParamNodes<T> bind_params(ad::Graph<T>& g, const Params<T>& p) {
  ParamNodes<T> pn;
  auto put = [&](const std::string& name, const ad::Array<T>& a) {
    auto id = g.leaf(a);
    pn.order.push_back({name, id});
    return id;
  };
  auto enc = [&](const std::string& pre, const EncoderParams<T>& e,
                 typename ParamNodes<T>::Enc& out) {
    out.w1 = put(pre + ".w1", e.w1);
    out.b1 = put(pre + ".b1", e.b1);
    out.w2 = put(pre + ".w2", e.w2);
    out.b2 = put(pre + ".b2", e.b2);
    out.vox_w = put(pre + ".vox_w", e.vox_w);
    out.vox_b = put(pre + ".vox_b", e.vox_b);
  };
  enc("surf", p.surf, pn.surf);
  enc("skel", p.skel, pn.skel);
  if (p.hyper.fusion == FusionMode::ssa) {
    pn.wq = put("ssa.wq", p.wq);
    pn.wk = put("ssa.wk", p.wk);
    pn.wv = put("ssa.wv", p.wv);
    pn.wo = put("ssa.wo", p.wo);
  } else if (p.hyper.fusion == FusionMode::distance_weighted) {
    pn.mix_w = put("dw.mix_w", p.mix_w);
    pn.mix_b = put("dw.mix_b", p.mix_b);
  }
  pn.enc0_w = put("unet.enc0_w", p.unet_enc0_w);
  pn.enc0_b = put("unet.enc0_b", p.unet_enc0_b);
  pn.down1_w = put("unet.down1_w", p.unet_down1_w);
  pn.down1_b = put("unet.down1_b", p.unet_down1_b);
  pn.enc1_w = put("unet.enc1_w", p.unet_enc1_w);
  pn.enc1_b = put("unet.enc1_b", p.unet_enc1_b);
  pn.down2_w = put("unet.down2_w", p.unet_down2_w);
  pn.down2_b = put("unet.down2_b", p.unet_down2_b);
  pn.bott_w = put("unet.bott_w", p.unet_bott_w);
  pn.bott_b = put("unet.bott_b", p.unet_bott_b);
  pn.up1_w = put("unet.up1_w", p.unet_up1_w);
  pn.up1_b = put("unet.up1_b", p.unet_up1_b);
  pn.dec1_w = put("unet.dec1_w", p.unet_dec1_w);
  pn.dec1_b = put("unet.dec1_b", p.unet_dec1_b);
  pn.up2_w = put("unet.up2_w", p.unet_up2_w);
  pn.up2_b = put("unet.up2_b", p.unet_up2_b);
  pn.dec2_w = put("unet.dec2_w", p.unet_dec2_w);
  pn.dec2_b = put("unet.dec2_b", p.unet_dec2_b);
  pn.pos_w = put("pos.w", p.pos_w);
  pn.pos_b = put("pos.b", p.pos_b);
  auto hd = [&](const std::string& pre, const HeadParams<T>& h,
                typename ParamNodes<T>::Hd& out) {
    out.w1 = put(pre + ".w1", h.w1);
    out.b1 = put(pre + ".b1", h.b1);
    out.w2 = put(pre + ".w2", h.w2);
    out.b2 = put(pre + ".b2", h.b2);
    out.w3 = put(pre + ".w3", h.w3);
    out.b3 = put(pre + ".b3", h.b3);
  };
  hd("head_repair", p.head_repair, pn.repair);
  hd("head_label", p.head_label, pn.label);
  hd("head_segment", p.head_segment, pn.segment);
  return pn;
}

template <typename T>
FieldContext<T> make_field_context(const Hyper& h, const VoxelVolume& vol,
                                   const PointSet& surface,
                                   const PointSet& skeleton) {
  FieldContext<T> ctx;
  ctx.normalizer = make_normalizer(vol.dims());
  ctx.n_surf = static_cast<int>(surface.size());
  ctx.n_skel = static_cast<int>(skeleton.size());
  const int desc_len = h.descriptor_len();

  ctx.surf_inputs.reserve(size_t(ctx.n_surf) * (3 + desc_len));
  for (int i = 0; i < ctx.n_surf; ++i) {
    const auto& c = surface.coords[i];
    ctx.surf_inputs.push_back(T(c[0]));
    ctx.surf_inputs.push_back(T(c[1]));
    ctx.surf_inputs.push_back(T(c[2]));
    std::vector<float> desc =
        super_point_descriptor(vol, surface.source_voxels[i], h.descriptor_r);
    for (float v : desc) ctx.surf_inputs.push_back(T(v));
  }
  ctx.skel_inputs.reserve(size_t(ctx.n_skel) * 3);
  for (int i = 0; i < ctx.n_skel; ++i) {
    const auto& c = skeleton.coords[i];
    ctx.skel_inputs.push_back(T(c[0]));
    ctx.skel_inputs.push_back(T(c[1]));
    ctx.skel_inputs.push_back(T(c[2]));
  }

  auto fill_cells = [&](const PointSet& ps, std::vector<int32_t>& grid_cells,
                        std::vector<std::array<double, 3>>& grid_coords,
                        std::vector<int32_t>& xy, std::vector<int32_t>& yz,
                        std::vector<int32_t>& xz) {
    const int G = h.grid, R = h.R;
    for (const auto& c : ps.coords) {
      int gx = plane_cell(c[0], G), gy = plane_cell(c[1], G),
          gz = plane_cell(c[2], G);
      grid_cells.push_back((int32_t(gz) * G + gy) * G + gx);
      grid_coords.push_back({plane_coord(c[0], G), plane_coord(c[1], G),
                             plane_coord(c[2], G)});
      int px = plane_cell(c[0], R), py = plane_cell(c[1], R),
          pz = plane_cell(c[2], R);
      xy.push_back(int32_t(py) * R + px);
      yz.push_back(int32_t(pz) * R + py);
      xz.push_back(int32_t(pz) * R + px);
    }
  };
  fill_cells(surface, ctx.surf_grid_cells, ctx.surf_grid_coords,
             ctx.surf_cells_xy, ctx.surf_cells_yz, ctx.surf_cells_xz);
  fill_cells(skeleton, ctx.skel_grid_cells, ctx.skel_grid_coords,
             ctx.skel_cells_xy, ctx.skel_cells_yz, ctx.skel_cells_xz);

  if (h.fusion == FusionMode::ssa ||
      h.fusion == FusionMode::distance_weighted) {
    auto knn = knn_indices(surface, skeleton, h.K);
    ctx.knn_flat.reserve(size_t(ctx.n_surf) * h.K);
    for (const auto& row : knn)
      for (int idx : row) ctx.knn_flat.push_back(idx);
    if (h.fusion == FusionMode::distance_weighted) {
      constexpr double kEps = 1e-6;
      ctx.dw_weights.reserve(ctx.knn_flat.size());
      for (int i = 0; i < ctx.n_surf; ++i) {
        double inv[64];
        double sum = 0.0;
        for (int j = 0; j < h.K; ++j) {
          const auto& a = surface.coords[i];
          const auto& b = skeleton.coords[ctx.knn_flat[size_t(i) * h.K + j]];
          double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
          double dist = std::sqrt(dx * dx + dy * dy + dz * dz);
          inv[j] = 1.0 / (kEps + dist);
          sum += inv[j];
        }
        for (int j = 0; j < h.K; ++j) ctx.dw_weights.push_back(T(inv[j] / sum));
      }
    }
  }
  return ctx;
}

namespace detail {

template <typename T>
typename ad::Graph<T>::Id encode_point_set(
    ad::Graph<T>& g, const typename ParamNodes<T>::Enc& enc,
    const std::vector<T>& inputs, int n, int in_dim,
    const std::vector<int32_t>& grid_cells,
    const std::vector<std::array<double, 3>>& grid_coords, int G) {
  ad::Array<T> in({size_t(n), size_t(in_dim)});
  in.data = inputs;
  auto x = g.constant(std::move(in));
  auto h1 = g.relu(g.linear(x, enc.w1, enc.b1));
  auto point_feats = g.linear(h1, enc.w2, enc.b2);
  const size_t g3 = size_t(G) * G * G;
  auto pooled = g.scatter_mean(point_feats, grid_cells, g3,
                               {g.value(point_feats).shape[1], size_t(G),
                                size_t(G), size_t(G)});
  auto smoothed = g.conv3d(pooled, enc.vox_w, enc.vox_b);
  auto gathered = g.trilinear_gather(smoothed, grid_coords);
  return g.add(point_feats, gathered);
}

template <typename T>
typename ad::Graph<T>::Id unet2d(ad::Graph<T>& g, const ParamNodes<T>& pn,
                                 const Hyper& h,
                                 typename ad::Graph<T>::Id plane) {
  if (h.R % 4 != 0)
    throw std::invalid_argument("unet2d: R must be divisible by 4");
  auto e0 = g.relu(g.conv2d(plane, pn.enc0_w, pn.enc0_b, 1));
  auto d1 = g.relu(g.conv2d(e0, pn.down1_w, pn.down1_b, 2));
  auto e1 = g.relu(g.conv2d(d1, pn.enc1_w, pn.enc1_b, 1));
  auto d2 = g.relu(g.conv2d(e1, pn.down2_w, pn.down2_b, 2));
  auto bt = g.relu(g.conv2d(d2, pn.bott_w, pn.bott_b, 1));
  auto u1 = g.relu(g.conv2d(g.upsample2(bt), pn.up1_w, pn.up1_b, 1));
  auto m1 = g.relu(g.conv2d(g.concat_chan(u1, e1), pn.dec1_w, pn.dec1_b, 1));
  auto u2 = g.relu(g.conv2d(g.upsample2(m1), pn.up2_w, pn.up2_b, 1));
  return g.conv2d(g.concat_chan(u2, e0), pn.dec2_w, pn.dec2_b, 1);
}

} // namespace detail

template <typename T>
FieldNodes<T> build_field(ad::Graph<T>& g, const ParamNodes<T>& pn,
                          const Hyper& h, const FieldContext<T>& ctx) {
  using Id = typename ad::Graph<T>::Id;
  Id phi_s = detail::encode_point_set<T>(g, pn.surf, ctx.surf_inputs,
                                         ctx.n_surf, 3 + h.descriptor_len(),
                                         ctx.surf_grid_cells,
                                         ctx.surf_grid_coords, h.grid);
  Id phi_k = detail::encode_point_set<T>(g, pn.skel, ctx.skel_inputs,
                                         ctx.n_skel, 3, ctx.skel_grid_cells,
                                         ctx.skel_grid_coords, h.grid);

  const size_t R = static_cast<size_t>(h.R);
  const size_t r2 = R * R;
  auto project = [&](Id feats, const std::vector<int32_t>& cells) {
    return g.scatter_mean(feats, cells, r2,
                          {g.value(feats).shape[1], R, R});
  };

  Id pre_xy = -1, pre_yz = -1, pre_xz = -1;
  switch (h.fusion) {
    case FusionMode::ssa: {
      Id q = g.linear(phi_s, pn.wq);
      Id k = g.linear(phi_k, pn.wk);
      Id v = g.linear(phi_k, pn.wv);
      Id att = g.attention(q, k, v, ctx.knn_flat, size_t(h.K),
                           T(1.0 / std::sqrt(double(h.d))));
      Id fused = g.add(phi_s, g.linear(att, pn.wo));
      pre_xy = project(fused, ctx.surf_cells_xy);
      pre_yz = project(fused, ctx.surf_cells_yz);
      pre_xz = project(fused, ctx.surf_cells_xz);
      break;
    }
    case FusionMode::distance_weighted: {
      Id agg = g.weighted_gather(phi_k, ctx.knn_flat, size_t(h.K),
                                 ctx.dw_weights);
      Id fused = g.linear(g.concat_cols({phi_s, agg}), pn.mix_w, pn.mix_b);
      pre_xy = project(fused, ctx.surf_cells_xy);
      pre_yz = project(fused, ctx.surf_cells_yz);
      pre_xz = project(fused, ctx.surf_cells_xz);
      break;
    }
    case FusionMode::early: {
      Id both = g.concat_rows(phi_s, phi_k);
      auto cat = [&](const std::vector<int32_t>& a,
                     const std::vector<int32_t>& b) {
        std::vector<int32_t> out = a;
        out.insert(out.end(), b.begin(), b.end());
        return out;
      };
      pre_xy = project(both, cat(ctx.surf_cells_xy, ctx.skel_cells_xy));
      pre_yz = project(both, cat(ctx.surf_cells_yz, ctx.skel_cells_yz));
      pre_xz = project(both, cat(ctx.surf_cells_xz, ctx.skel_cells_xz));
      break;
    }
    case FusionMode::late: {
      pre_xy = g.concat_chan(project(phi_s, ctx.surf_cells_xy),
                             project(phi_k, ctx.skel_cells_xy));
      pre_yz = g.concat_chan(project(phi_s, ctx.surf_cells_yz),
                             project(phi_k, ctx.skel_cells_yz));
      pre_xz = g.concat_chan(project(phi_s, ctx.surf_cells_xz),
                             project(phi_k, ctx.skel_cells_xz));
      break;
    }
  }

  FieldNodes<T> field;
  field.plane_xy = detail::unet2d(g, pn, h, pre_xy);
  field.plane_yz = detail::unet2d(g, pn, h, pre_yz);
  field.plane_xz = detail::unet2d(g, pn, h, pre_xz);
  return field;
}

template <typename T>
typename ad::Graph<T>::Id query_embedding(
    ad::Graph<T>& g, const ParamNodes<T>& pn, const Hyper& h,
    const FieldNodes<T>& field,
    const std::vector<std::array<double, 3>>& queries) {
  const size_t n = queries.size();
  std::vector<std::array<double, 2>> uv_xy(n), uv_yz(n), uv_xz(n);
  for (size_t i = 0; i < n; ++i) {
    double x = std::clamp(queries[i][0], -1.0, 1.0);
    double y = std::clamp(queries[i][1], -1.0, 1.0);
    double z = std::clamp(queries[i][2], -1.0, 1.0);
    uv_xy[i] = {plane_coord(x, h.R), plane_coord(y, h.R)};
    uv_yz[i] = {plane_coord(y, h.R), plane_coord(z, h.R)};
    uv_xz[i] = {plane_coord(x, h.R), plane_coord(z, h.R)};
  }
  auto s_xy = g.bilinear_sample(field.plane_xy, std::move(uv_xy));
  auto s_yz = g.bilinear_sample(field.plane_yz, std::move(uv_yz));
  auto s_xz = g.bilinear_sample(field.plane_xz, std::move(uv_xz));

  // positional features: raw coords plus Fourier bands, then a learned map
  const int bands = h.fourier_bands;
  ad::Array<T> pos({n, size_t(h.posenc_in())});
  constexpr double kPi = 3.14159265358979323846;
  for (size_t i = 0; i < n; ++i) {
    double q[3] = {std::clamp(queries[i][0], -1.0, 1.0),
                   std::clamp(queries[i][1], -1.0, 1.0),
                   std::clamp(queries[i][2], -1.0, 1.0)};
    size_t off = i * h.posenc_in();
    for (int k = 0; k < 3; ++k) pos.data[off + k] = T(q[k]);
    for (int j = 0; j < bands; ++j) {
      double f = std::ldexp(kPi, j); // 2^j * pi
      for (int k = 0; k < 3; ++k) {
        pos.data[off + 3 + j * 3 + k] = T(std::sin(f * q[k]));
        pos.data[off + 3 + bands * 3 + j * 3 + k] = T(std::cos(f * q[k]));
      }
    }
  }
  auto posenc = g.linear(g.constant(std::move(pos)), pn.pos_w, pn.pos_b);
  return g.concat_cols({s_xy, s_yz, s_xz, posenc});
}

template <typename T>
typename ad::Graph<T>::Id head_logits(ad::Graph<T>& g, const ParamNodes<T>& pn,
                                      Head head,
                                      typename ad::Graph<T>::Id h_q) {
  const auto& hd = head == Head::repair ? pn.repair
                   : head == Head::label ? pn.label
                                         : pn.segment;
  auto h1 = g.relu(g.linear(h_q, hd.w1, hd.b1));
  auto h2 = g.relu(g.linear(h1, hd.w2, hd.b2));
  return g.linear(h2, hd.w3, hd.b3);
}

namespace detail {

template <typename T>
std::vector<T> transpose_weights(const ad::Array<T>& w) {
  const size_t out = w.shape[0], in = w.shape[1];
  std::vector<T> wt(in * out);
  for (size_t j = 0; j < out; ++j)
    for (size_t k = 0; k < in; ++k) wt[k * out + j] = w.data[j * in + k];
  return wt;
}

// y = relu?(x W^T + b) with the same accumulation order as Graph::linear
template <typename T>
void plain_linear(const T* x, size_t in, const std::vector<T>& wt,
                  const ad::Array<T>& b, size_t out, bool relu_after, T* y) {
  for (size_t j = 0; j < out; ++j) y[j] = b.data[j];
  for (size_t k = 0; k < in; ++k) {
    T a = x[k];
    if (a == T(0)) continue;
    const T* wtk = wt.data() + k * out;
    for (size_t j = 0; j < out; ++j) y[j] += a * wtk[j];
  }
  if (relu_after)
    for (size_t j = 0; j < out; ++j) y[j] = y[j] > T(0) ? y[j] : T(0);
}

// one bilinear plane sample, mirroring Graph::bilinear_sample
template <typename T>
void plain_plane_sample(const ad::Array<T>& plane, double u, double v, T* out) {
  const size_t C = plane.shape[0], R = plane.shape[1], r2 = R * R;
  double cs[2] = {std::min(std::max(u, 0.0), double(R - 1)),
                  std::min(std::max(v, 0.0), double(R - 1))};
  size_t c0[2] = {std::min(static_cast<size_t>(cs[0]), R - 2),
                  std::min(static_cast<size_t>(cs[1]), R - 2)};
  double f[2] = {cs[0] - double(c0[0]), cs[1] - double(c0[1])};
  size_t cells[4];
  T w[4];
  int idx = 0;
  for (int dv = 0; dv <= 1; ++dv)
    for (int du = 0; du <= 1; ++du, ++idx) {
      w[idx] = T((du ? f[0] : 1.0 - f[0]) * (dv ? f[1] : 1.0 - f[1]));
      cells[idx] = (c0[1] + dv) * R + (c0[0] + du);
    }
  for (size_t ch = 0; ch < C; ++ch) {
    T acc = T(0);
    for (int i = 0; i < 4; ++i) acc += w[i] * plane.data[ch * r2 + cells[i]];
    out[ch] = acc;
  }
}

} // namespace detail

template <typename T>
QueryEvaluator<T>::QueryEvaluator(const Params<T>& params, PlaneField<T> planes)
    : params_(params), planes_(std::move(planes)) {
  pos_wt_ = detail::transpose_weights(params_.pos_w);
  const HeadParams<T>* heads[3] = {&params_.head_repair, &params_.head_label,
                                   &params_.head_segment};
  for (int i = 0; i < 3; ++i) {
    h1_wt_[i] = detail::transpose_weights(heads[i]->w1);
    h2_wt_[i] = detail::transpose_weights(heads[i]->w2);
    h3_wt_[i] = detail::transpose_weights(heads[i]->w3);
  }
}

template <typename T>
int QueryEvaluator<T>::out_dim(Head head) const {
  switch (head) {
    case Head::repair: return 1;
    case Head::label: return params_.hyper.tree_classes;
    case Head::segment: return params_.hyper.segment_classes;
  }
  return 1;
}

template <typename T>
std::vector<T> QueryEvaluator<T>::logits(
    Head head, const std::vector<std::array<double, 3>>& queries) const {
  const Hyper& h = params_.hyper;
  const int hi = head == Head::repair ? 0 : head == Head::label ? 1 : 2;
  const HeadParams<T>* hp = hi == 0   ? &params_.head_repair
                            : hi == 1 ? &params_.head_label
                                      : &params_.head_segment;
  const size_t C = static_cast<size_t>(h.C);
  const size_t D = static_cast<size_t>(h.D);
  const size_t emb = 3 * C + D;
  const size_t od = static_cast<size_t>(out_dim(head));
  const size_t n = queries.size();
  std::vector<T> out(n * od);
  constexpr double kPi = 3.14159265358979323846;
#pragma omp parallel num_threads(ad::thread_count()) if (ad::thread_count() > 1 && n > 256)
  {
    std::vector<T> hq(emb), posfeat(h.posenc_in()), h1(256), h2(128);
#pragma omp for
    for (long long i = 0; i < static_cast<long long>(n); ++i) {
      double q[3];
      for (int k = 0; k < 3; ++k)
        q[k] = std::clamp(queries[i][k], -1.0, 1.0);
      detail::plain_plane_sample(planes_.xy, plane_coord(q[0], h.R),
                                 plane_coord(q[1], h.R), hq.data());
      detail::plain_plane_sample(planes_.yz, plane_coord(q[1], h.R),
                                 plane_coord(q[2], h.R), hq.data() + C);
      detail::plain_plane_sample(planes_.xz, plane_coord(q[0], h.R),
                                 plane_coord(q[2], h.R), hq.data() + 2 * C);
      for (int k = 0; k < 3; ++k) posfeat[k] = T(q[k]);
      for (int j = 0; j < h.fourier_bands; ++j) {
        double f = std::ldexp(kPi, j);
        for (int k = 0; k < 3; ++k) {
          posfeat[3 + j * 3 + k] = T(std::sin(f * q[k]));
          posfeat[3 + h.fourier_bands * 3 + j * 3 + k] = T(std::cos(f * q[k]));
        }
      }
      detail::plain_linear(posfeat.data(), posfeat.size(), pos_wt_,
                           params_.pos_b, D, false, hq.data() + 3 * C);
      detail::plain_linear(hq.data(), emb, h1_wt_[hi], hp->b1, 256, true,
                           h1.data());
      detail::plain_linear(h1.data(), 256, h2_wt_[hi], hp->b2, 128, true,
                           h2.data());
      detail::plain_linear(h2.data(), 128, h3_wt_[hi], hp->b3, od, false,
                           out.data() + i * od);
    }
  }
  return out;
}

} // namespace tubefield
