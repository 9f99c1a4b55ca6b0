#include "tubefield/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "tubefield/points.hpp"
#include "tubefield/skeleton.hpp"

namespace tubefield {

namespace {

struct PreparedCase {
  const TrainCase* cs = nullptr;
  VoxelVolume input;        // what the encoder sees
  const VoxelVolume* repair_target = nullptr; // supervision for repair queries
  std::vector<BreakRecord> repair_records;
  FieldContext<float> ctx;
  bool usable = true;
};

PreparedCase prepare_case(const TrainConfig& cfg, const TrainCase& cs,
                          uint64_t case_seed) {
  PreparedCase p;
  p.cs = &cs;
  Rng rng(case_seed);
  if (cfg.supervision == Supervision::weak) {
    try {
      WeakSample w = make_weak_sample(cs.corrupted, cfg.weak_min_nodes,
                                      rng.fork(0).seed());
      p.input = std::move(w.input_tree);
      p.repair_records = {w.synthetic_record};
      p.repair_target = &cs.corrupted;
    } catch (const std::runtime_error&) {
      p.usable = false;
      return p;
    }
  } else {
    p.input = cs.corrupted;
    p.repair_records = cs.records;
    p.repair_target = &cs.complete;
  }
  PointSet surface =
      extract_surface_points(p.input, cfg.n_surface, rng.fork(1).seed());
  PointSet skeleton =
      extract_skeleton_points(p.input, cfg.n_skeleton, rng.fork(2).seed());
  p.ctx = make_field_context<float>(cfg.hyper, p.input, surface, skeleton);
  return p;
}

struct Adam {
  double lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int64_t t = 0;
  std::vector<std::vector<float>> m, v;

  explicit Adam(double lr_) : lr(lr_) {}

  void step(Params<float>& params, const std::vector<std::vector<float>>& grads) {
    auto entries = params.entries();
    if (m.empty()) {
      m.resize(entries.size());
      v.resize(entries.size());
      for (size_t i = 0; i < entries.size(); ++i) {
        m[i].assign(entries[i].second->numel(), 0.0f);
        v[i].assign(entries[i].second->numel(), 0.0f);
      }
    }
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, double(t));
    const double bc2 = 1.0 - std::pow(beta2, double(t));
    for (size_t i = 0; i < entries.size(); ++i) {
      auto& w = entries[i].second->data;
      const auto& g = grads[i];
      for (size_t k = 0; k < w.size(); ++k) {
        m[i][k] = float(beta1 * m[i][k] + (1.0 - beta1) * g[k]);
        v[i][k] = float(beta2 * v[i][k] + (1.0 - beta2) * double(g[k]) * g[k]);
        double mh = m[i][k] / bc1, vh = v[i][k] / bc2;
        w[k] = float(w[k] - lr * mh / (std::sqrt(vh) + eps));
      }
    }
  }
};

} // namespace

TrainResult train(const TrainConfig& cfg, const std::vector<TrainCase>& cases) {
  if (cases.empty()) throw std::invalid_argument("train: no cases");
  ad::set_threads(cfg.threads);
  Rng master(cfg.seed);

  std::vector<PreparedCase> prepared;
  for (size_t i = 0; i < cases.size(); ++i) {
    PreparedCase p =
        prepare_case(cfg, cases[i], master.fork(100 + i).seed());
    if (p.usable) prepared.push_back(std::move(p));
  }
  if (prepared.empty())
    throw std::runtime_error("train: no usable cases after preparation");

  TrainResult result;
  result.params = Params<float>::init(cfg.hyper, master.fork(0).seed());
  Adam adam(cfg.learning_rate);
  auto entries = result.params.entries();
  std::vector<std::vector<float>> grad_acc(entries.size());

  const int n_cases = static_cast<int>(prepared.size());
  const int steps_per_epoch =
      (n_cases + cfg.batch_size - 1) / cfg.batch_size;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // deterministic shuffle of case order
    std::vector<int> order(n_cases);
    for (int i = 0; i < n_cases; ++i) order[i] = i;
    Rng shuffle_rng = master.fork(10000 + epoch);
    for (int i = n_cases - 1; i > 0; --i) {
      int j = static_cast<int>(shuffle_rng.uniform_u64(i + 1));
      std::swap(order[i], order[j]);
    }

    for (int step = 0; step < steps_per_epoch; ++step) {
      for (size_t i = 0; i < entries.size(); ++i)
        grad_acc[i].assign(entries[i].second->numel(), 0.0f);
      double sum_repair = 0.0, sum_label = 0.0, sum_recon = 0.0;
      int batch_n = 0;

      for (int bi = 0; bi < cfg.batch_size; ++bi) {
        int ci = step * cfg.batch_size + bi;
        if (ci >= n_cases) break;
        const PreparedCase& pc = prepared[order[ci]];
        Rng qrng = master.fork(20000 + (uint64_t(epoch) * steps_per_epoch + step) *
                                           1000 +
                               order[ci]);

        ad::Graph<float> g;
        auto pn = bind_params(g, result.params);
        auto field = build_field(g, pn, cfg.hyper, pc.ctx);

        std::vector<ad::Graph<float>::Id> task_losses;
        std::vector<float> coeffs;
        double v_repair = 0.0, v_label = 0.0, v_recon = 0.0;

        if (!pc.repair_records.empty()) {
          QueryBatch rq = sample_repair_queries(
              *pc.repair_target, pc.input, pc.repair_records, cfg.q_repair,
              cfg.p_near, qrng.fork(0).seed());
          auto h_r = query_embedding(g, pn, cfg.hyper, field, rq.coords);
          auto z_r = head_logits(g, pn, Head::repair, h_r);
          std::vector<float> t_r(rq.targets.begin(), rq.targets.end());
          auto bce = g.sigmoid_bce_with_logits(z_r, std::vector<float>(t_r));
          auto dice = g.soft_dice_loss(g.sigmoid(z_r), std::vector<float>(t_r));
          auto l_r = g.scalar_mix({bce, dice}, {float(cfg.lambda_bce),
                                                float(cfg.lambda_dice)});
          task_losses.push_back(l_r);
          coeffs.push_back(1.0f);
          v_repair = g.value(l_r).data[0];
        }
        {
          QueryBatch lq = sample_label_queries(pc.input, pc.cs->tree_labels,
                                               cfg.q_label,
                                               qrng.fork(1).seed());
          auto h_l = query_embedding(g, pn, cfg.hyper, field, lq.coords);
          auto z_l = head_logits(g, pn, Head::label, h_l);
          std::vector<int32_t> y(lq.targets.size());
          for (size_t i = 0; i < y.size(); ++i) y[i] = lq.targets[i] - 1;
          auto l_l = g.softmax_ce_with_logits(z_l, std::move(y));
          task_losses.push_back(l_l);
          coeffs.push_back(1.0f);
          v_label = g.value(l_l).data[0];
        }
        if (pc.cs->lung_mask.count_foreground() > 0) {
          QueryBatch sq = sample_segment_queries(pc.cs->lung_mask,
                                                 pc.cs->segment_labels,
                                                 cfg.q_segment,
                                                 qrng.fork(2).seed());
          auto h_s = query_embedding(g, pn, cfg.hyper, field, sq.coords);
          auto z_s = head_logits(g, pn, Head::segment, h_s);
          std::vector<int32_t> y(sq.targets.size());
          for (size_t i = 0; i < y.size(); ++i) y[i] = sq.targets[i] - 1;
          auto l_s = g.softmax_ce_with_logits(z_s, std::move(y));
          task_losses.push_back(l_s);
          coeffs.push_back(1.0f);
          v_recon = g.value(l_s).data[0];
        }

        auto total = g.scalar_mix(task_losses, coeffs);
        double v_total = g.value(total).data[0];
        if (!std::isfinite(v_total)) {
          std::ostringstream os;
          os << "train: non-finite loss at epoch " << epoch << " step " << step
             << " (repair=" << v_repair << ", label=" << v_label
             << ", recon=" << v_recon << ")";
          throw std::runtime_error(os.str());
        }
        g.backward(total);
        for (size_t i = 0; i < pn.order.size(); ++i) {
          const auto& grad = g.grad(pn.order[i].second).data;
          auto& acc = grad_acc[i];
          for (size_t k = 0; k < grad.size(); ++k) acc[k] += grad[k];
        }
        sum_repair += v_repair;
        sum_label += v_label;
        sum_recon += v_recon;
        ++batch_n;
      }

      if (batch_n == 0) continue;
      const float inv = 1.0f / float(batch_n);
      for (auto& gacc : grad_acc)
        for (auto& v : gacc) v *= inv;
      adam.step(result.params, grad_acc);
      HistoryRow row;
      row.epoch = epoch;
      row.step = step;
      row.loss_repair = sum_repair / batch_n;
      row.loss_label = sum_label / batch_n;
      row.loss_recon = sum_recon / batch_n;
      row.total = row.loss_repair + row.loss_label + row.loss_recon;
      result.history.push_back(row);
    }
  }
  if (!result.params.all_finite())
    throw std::runtime_error("train: non-finite parameters after training");
  return result;
}

void write_history_csv(const std::vector<HistoryRow>& history,
                       const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_history_csv: cannot open " + path);
  out << "epoch,step,loss_repair,loss_label,loss_recon,total\n";
  for (const auto& r : history)
    out << r.epoch << ',' << r.step << ',' << r.loss_repair << ','
        << r.loss_label << ',' << r.loss_recon << ',' << r.total << '\n';
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

} // namespace

InferenceResult infer_full(const Params<float>& params,
                           const VoxelVolume& corrupted,
                           const VoxelVolume& lung_mask,
                           const InferenceOptions& opts) {
  if (corrupted.dims() != lung_mask.dims())
    throw std::invalid_argument("infer_full: dims mismatch");
  ad::set_threads(opts.threads);
  InferenceResult res;
  auto t0 = std::chrono::steady_clock::now();

  Rng rng(opts.point_seed);
  PointSet surface =
      extract_surface_points(corrupted, opts.n_surface, rng.fork(1).seed());
  PointSet skeleton =
      extract_skeleton_points(corrupted, opts.n_skeleton, rng.fork(2).seed());
  FieldContext<float> ctx =
      make_field_context<float>(params.hyper, corrupted, surface, skeleton);
  res.timings_s["points"] = seconds_since(t0);

  t0 = std::chrono::steady_clock::now();
  PlaneField<float> planes;
  {
    ad::Graph<float> g;
    auto pn = bind_params(g, params);
    auto field = build_field(g, pn, params.hyper, ctx);
    planes.xy = g.value(field.plane_xy);
    planes.yz = g.value(field.plane_yz);
    planes.xz = g.value(field.plane_xz);
  }
  res.timings_s["encode"] = seconds_since(t0);

  QueryEvaluator<float> eval(params, std::move(planes));
  Normalizer norm = ctx.normalizer;
  const int nx = corrupted.nx(), ny = corrupted.ny(), nz = corrupted.nz();

  auto run_head = [&](Head head, const CoordList& voxels,
                      auto&& consume) {
    std::vector<std::array<double, 3>> chunk;
    std::vector<size_t> chunk_idx;
    chunk.reserve(opts.chunk);
    size_t pos = 0;
    while (pos < voxels.size()) {
      chunk.clear();
      chunk_idx.clear();
      size_t end = std::min(voxels.size(), pos + size_t(opts.chunk));
      for (size_t i = pos; i < end; ++i) {
        const Coord& c = voxels[i];
        chunk.push_back(norm.normalize(c.x, c.y, c.z));
        chunk_idx.push_back(i);
      }
      std::vector<float> logits = eval.logits(head, chunk);
      consume(chunk_idx, logits);
      pos = end;
    }
  };

  t0 = std::chrono::steady_clock::now();
  res.repair_mask = VoxelVolume(nx, ny, nz, 2);
  CoordList background;
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x)
        if (!corrupted.foreground(x, y, z)) background.push_back({x, y, z});
  run_head(Head::repair, background,
           [&](const std::vector<size_t>& idx, const std::vector<float>& lg) {
             for (size_t i = 0; i < idx.size(); ++i) {
               // probability strictly greater than 0.5 <=> logit > 0
               if (lg[i] > 0.0f) res.repair_mask.at(background[idx[i]]) = 1;
             }
           });
  res.repaired_tree = VoxelVolume(nx, ny, nz, 2);
  for (size_t i = 0; i < corrupted.voxel_count(); ++i)
    res.repaired_tree.data()[i] =
        (corrupted.data()[i] > 0 || res.repair_mask.data()[i] > 0) ? 1 : 0;
  res.timings_s["repair"] = seconds_since(t0);

  t0 = std::chrono::steady_clock::now();
  res.labeled_tree = VoxelVolume(nx, ny, nz,
                                 uint16_t(params.hyper.tree_classes + 1));
  CoordList repaired_fg = res.repaired_tree.foreground_voxels();
  const int n_tree = params.hyper.tree_classes;
  run_head(Head::label, repaired_fg,
           [&](const std::vector<size_t>& idx, const std::vector<float>& lg) {
             for (size_t i = 0; i < idx.size(); ++i) {
               int best = 0;
               for (int c = 1; c < n_tree; ++c)
                 if (lg[i * n_tree + c] > lg[i * n_tree + best]) best = c;
               res.labeled_tree.at(repaired_fg[idx[i]]) = uint8_t(best + 1);
             }
           });
  res.timings_s["label"] = seconds_since(t0);

  t0 = std::chrono::steady_clock::now();
  res.segment_volume = VoxelVolume(nx, ny, nz,
                                   uint16_t(params.hyper.segment_classes + 1));
  CoordList lung = lung_mask.foreground_voxels();
  const int n_seg = params.hyper.segment_classes;
  run_head(Head::segment, lung,
           [&](const std::vector<size_t>& idx, const std::vector<float>& lg) {
             for (size_t i = 0; i < idx.size(); ++i) {
               int best = 0;
               for (int c = 1; c < n_seg; ++c)
                 if (lg[i * n_seg + c] > lg[i * n_seg + best]) best = c;
               res.segment_volume.at(lung[idx[i]]) = uint8_t(best + 1);
             }
           });
  res.timings_s["segment"] = seconds_since(t0);
  return res;
}

MetricsReport evaluate_case(const InferenceResult& result, const TrainCase& cs) {
  MetricsReport rep;
  ComponentSet gt = gt_components(cs.complete, cs.corrupted);
  ComponentSet pred = mask_components(result.repair_mask);
  rep.gt_components = static_cast<int>(gt.components.size());
  rep.pred_components = static_cast<int>(pred.components.size());
  rep.cf1_parts = containment_f1(gt, pred);
  rep.dmf1_parts = dice_matching_f1(gt, pred);
  rep.cf1 = rep.cf1_parts.f1;
  rep.dmf1 = rep.dmf1_parts.f1;
  rep.gdice = global_dice(gt, pred);
  rep.ncc = ncc_repaired(cs.corrupted, pred);

  MicroDice tree = micro_dice(result.labeled_tree, cs.tree_labels,
                              cs.corrupted.foreground_voxels());
  rep.dice_tree = tree.micro;
  rep.per_class_tree = tree.per_class;

  VoxelVolume complete_skel = thin_3d(cs.complete);
  MicroDice skel = micro_dice(result.labeled_tree, cs.tree_labels,
                              complete_skel.foreground_voxels());
  rep.dice_skeleton = skel.micro;

  MicroDice lung = micro_dice(result.segment_volume, cs.segment_labels,
                              cs.lung_mask.foreground_voxels());
  rep.dice_lung = lung.micro;
  rep.per_class_lung = lung.per_class;
  return rep;
}

} // namespace tubefield
