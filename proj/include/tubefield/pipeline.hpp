#pragma once

#include <map>
#include <string>
#include <vector>

#include "tubefield/corrupt.hpp"
#include "tubefield/metrics.hpp"
#include "tubefield/model.hpp"
#include "tubefield/sampling.hpp"

namespace tubefield {

enum class Supervision { full, weak };

struct TrainConfig {
  int epochs = 15;
  int batch_size = 16;
  double learning_rate = 1e-4;
  double lambda_bce = 0.5;
  double lambda_dice = 0.5;
  Supervision supervision = Supervision::full;
  Hyper hyper;
  int n_surface = 2048;
  int n_skeleton = 512;
  int q_repair = 1024;
  int q_label = 1024;
  int q_segment = 1024;
  double p_near = 0.8;
  int weak_min_nodes = 8;
  uint64_t seed = 0;
  int threads = 1;
};

struct TrainCase {
  VoxelVolume complete, corrupted, tree_labels, lung_mask, segment_labels;
  std::vector<BreakRecord> records;
};

struct HistoryRow {
  int epoch = 0;
  int step = 0;
  double loss_repair = 0.0, loss_label = 0.0, loss_recon = 0.0, total = 0.0;
};

struct TrainResult {
  Params<float> params;
  std::vector<HistoryRow> history;
};

// Graph-level loss builders shared by training and the verification suite.
// loss_repair = lambda_bce * BCE + lambda_dice * softDice on probabilities.
template <typename T>
typename ad::Graph<T>::Id loss_repair(ad::Graph<T>& g,
                                      typename ad::Graph<T>::Id probs,
                                      const std::vector<T>& targets,
                                      T lambda_bce, T lambda_dice) {
  auto bce = g.bce_loss(probs, std::vector<T>(targets));
  auto dice = g.soft_dice_loss(probs, std::vector<T>(targets));
  return g.scalar_mix({bce, dice}, {lambda_bce, lambda_dice});
}

// mean negative log probability of the target class
template <typename T>
typename ad::Graph<T>::Id loss_ce(ad::Graph<T>& g,
                                  typename ad::Graph<T>::Id dist,
                                  const std::vector<int32_t>& labels) {
  return g.ce_loss(dist, std::vector<int32_t>(labels));
}

// Multi-task Adam training over synthetic cases; deterministic in
// config.seed. Weak supervision replaces the repair targets with a fresh
// synthetic break per case, the pre-break tree acting as the target.
TrainResult train(const TrainConfig& config, const std::vector<TrainCase>& cases);

void write_history_csv(const std::vector<HistoryRow>& history,
                       const std::string& path);

struct InferenceOptions {
  int chunk = 8192;
  int n_surface = 2048;
  int n_skeleton = 512;
  uint64_t point_seed = 0;
  int threads = 1;
};

struct InferenceResult {
  VoxelVolume repaired_tree;  // corrupted u repair_mask
  VoxelVolume repair_mask;    // predicted reconnections only
  VoxelVolume labeled_tree;   // classes on repaired foreground
  VoxelVolume segment_volume; // classes on the lung mask
  std::map<std::string, double> timings_s;
};

// Full-volume multi-task inference: the corrupted tree is encoded once; every
// background voxel is a repair query (threshold: probability strictly > 0.5),
// every repaired-tree voxel a labeling query, every lung voxel a segment
// query. Queries run in fixed-size chunks; results are chunk-independent.
InferenceResult infer_full(const Params<float>& params,
                           const VoxelVolume& corrupted,
                           const VoxelVolume& lung_mask,
                           const InferenceOptions& opts = {});

// Repair metrics against the known difference components, labeling Dice on
// the observed foreground, skeleton Dice on the complete-tree skeleton,
// segment Dice over the lung mask.
MetricsReport evaluate_case(const InferenceResult& result,
                            const TrainCase& cs);

} // namespace tubefield
