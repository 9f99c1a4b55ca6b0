#pragma once

// The implicit-field model: two point-voxel encoders (surface with a cubic
// occupancy descriptor, skeleton bare), a fusion stage (cross-attention by
// default, with the three ablation variants selectable), tri-plane
// projection, a shared 2D U-Net, and three MLP heads decoding query
// embeddings into occupancy / tree class / region class.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tubefield/autodiff.hpp"
#include "tubefield/points.hpp"
#include "tubefield/rng.hpp"

namespace tubefield {

enum class FusionMode { ssa, early, late, distance_weighted };

FusionMode fusion_mode_from_string(const std::string& s);
std::string fusion_mode_to_string(FusionMode m);

struct Hyper {
  int d = 32;            // point feature width
  int K = 8;             // skeleton neighbors per surface point
  int R = 64;            // tri-plane resolution
  int C = 32;            // plane channels (kept equal to d)
  int D = 64;            // positional encoding width
  int grid = 32;         // voxel-branch grid resolution
  int fourier_bands = 10;
  int descriptor_r = 2;  // super-point cube radius
  int tree_classes = 7;
  int segment_classes = 6;
  FusionMode fusion = FusionMode::ssa;

  int descriptor_len() const {
    int w = 2 * descriptor_r + 1;
    return w * w * w;
  }
  int posenc_in() const { return 3 + 6 * fourier_bands; }
  int embed_len() const { return 3 * C + D; }
  int unet_in() const { return fusion == FusionMode::late ? 2 * d : d; }
};

template <typename T>
struct EncoderParams {
  ad::Array<T> w1, b1, w2, b2; // point MLP
  ad::Array<T> vox_w, vox_b;   // 3x3x3 grid smoothing
};

template <typename T>
struct HeadParams {
  ad::Array<T> w1, b1, w2, b2, w3, b3;
};

template <typename T>
struct Params {
  Hyper hyper;
  EncoderParams<T> surf, skel;
  ad::Array<T> wq, wk, wv, wo;       // ssa fusion
  ad::Array<T> mix_w, mix_b;         // distance-weighted fusion
  ad::Array<T> unet_enc0_w, unet_enc0_b, unet_down1_w, unet_down1_b;
  ad::Array<T> unet_enc1_w, unet_enc1_b, unet_down2_w, unet_down2_b;
  ad::Array<T> unet_bott_w, unet_bott_b;
  ad::Array<T> unet_up1_w, unet_up1_b, unet_dec1_w, unet_dec1_b;
  ad::Array<T> unet_up2_w, unet_up2_b, unet_dec2_w, unet_dec2_b;
  ad::Array<T> pos_w, pos_b;
  HeadParams<T> head_repair, head_label, head_segment;

  std::vector<std::pair<std::string, ad::Array<T>*>> entries();
  std::vector<std::pair<std::string, const ad::Array<T>*>> entries() const;

  static Params<T> init(const Hyper& h, uint64_t seed);
  size_t parameter_count() const;
  bool all_finite() const;
};

// Per-case constants prepared once: encoder inputs, projection cells, KNN.
template <typename T>
struct FieldContext {
  int n_surf = 0, n_skel = 0;
  std::vector<T> surf_inputs; // (n_surf, 3 + descriptor_len)
  std::vector<T> skel_inputs; // (n_skel, 3)
  std::vector<int32_t> surf_grid_cells, skel_grid_cells;
  std::vector<std::array<double, 3>> surf_grid_coords, skel_grid_coords;
  std::vector<int32_t> surf_cells_xy, surf_cells_yz, surf_cells_xz;
  std::vector<int32_t> skel_cells_xy, skel_cells_yz, skel_cells_xz;
  std::vector<int32_t> knn_flat;  // (n_surf * K)
  std::vector<T> dw_weights;      // (n_surf * K), distance_weighted only
  Normalizer normalizer;
};

// Builds the per-case constants from the two point sets.
template <typename T>
FieldContext<T> make_field_context(const Hyper& h, const VoxelVolume& vol,
                                   const PointSet& surface,
                                   const PointSet& skeleton);

template <typename T>
struct ParamNodes; // bound graph ids, mirrors Params

template <typename T>
struct FieldNodes {
  typename ad::Graph<T>::Id plane_xy = -1, plane_yz = -1, plane_xz = -1;
};

template <typename T>
ParamNodes<T> bind_params(ad::Graph<T>& g, const Params<T>& p);

template <typename T>
FieldNodes<T> build_field(ad::Graph<T>& g, const ParamNodes<T>& pn,
                          const Hyper& h, const FieldContext<T>& ctx);

// Concatenated tri-plane samples + positional encoding for each query
// (normalized coordinates, clamped to [-1,1]).
template <typename T>
typename ad::Graph<T>::Id query_embedding(
    ad::Graph<T>& g, const ParamNodes<T>& pn, const Hyper& h,
    const FieldNodes<T>& field,
    const std::vector<std::array<double, 3>>& queries);

enum class Head { repair, label, segment };

// Raw logits of one head: (n,1) for repair, (n,classes) otherwise.
template <typename T>
typename ad::Graph<T>::Id head_logits(ad::Graph<T>& g, const ParamNodes<T>& pn,
                                      Head head,
                                      typename ad::Graph<T>::Id h_q);

// plane cell of a normalized coordinate
inline int plane_cell(double v, int R) {
  int c = static_cast<int>(std::floor((v + 1.0) * 0.5 * R));
  return c < 0 ? 0 : (c >= R ? R - 1 : c);
}
// continuous cell-frame coordinate of a normalized coordinate
inline double plane_coord(double v, int R) {
  return (v + 1.0) * 0.5 * R - 0.5;
}

// The encoded field: three refined plane feature maps (C,R,R).
template <typename T>
struct PlaneField {
  ad::Array<T> xy, yz, xz;
};

// Tape-free query decoding against a frozen field, arithmetically identical
// to the graph path (same loop structure and accumulation order), so chunked
// full-volume inference is cheap, memory-bounded and bit-equal to the graph.
template <typename T>
class QueryEvaluator {
public:
  QueryEvaluator(const Params<T>& params, PlaneField<T> planes);

  // row-major (queries.size() x out_dim) logits
  std::vector<T> logits(Head head,
                        const std::vector<std::array<double, 3>>& queries) const;
  int out_dim(Head head) const;

private:
  const Params<T>& params_;
  PlaneField<T> planes_;
  std::vector<T> pos_wt_, h1_wt_[3], h2_wt_[3], h3_wt_[3];
};

} // namespace tubefield

#include "tubefield/model_impl.hpp"
