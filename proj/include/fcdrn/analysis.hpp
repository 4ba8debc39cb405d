// Inspection suite: residual weight norms, drop-a-stage ablation, norm-thresholded compression and the
// retrain-reduced comparison.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "fcdrn/model.hpp"
#include "fcdrn/svg.hpp"
#include "fcdrn/train.hpp"

namespace fcdrn {

/// (1/M) * sum_m ||w[:, m, :, :]||_1 for w of shape [N, M, K, K].
template <typename T>
double conv_weight_norm(const Tensor<T>& w) {
  if (w.shape().c == 0) return 0.0;
  double s = 0.0;
  for (T v : w.values()) s += std::abs(static_cast<double>(v));
  return s / w.shape().c;
}

struct WeightNormEntry {
  int stage = 0;  // 1-based
  int block = 0;  // 1-based
  int conv = 0;   // 1 or 2 within the residual branch
  double norm = 0.0;
};

struct WeightNormReport {
  std::vector<WeightNormEntry> entries;

  /// Entries of one stage, in block order.
  [[nodiscard]] std::vector<WeightNormEntry> stage(int id) const {
    std::vector<WeightNormEntry> out;
    for (const auto& e : entries)
      if (e.stage == id) out.push_back(e);
    return out;
  }
};

template <typename T>
WeightNormReport weight_norms(const ModelGraph<T>& model) {
  WeightNormReport r;
  for (int k = 0; k < kStageCount; ++k) {
    const auto& blocks = model.stages[k].blocks;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      r.entries.push_back({k + 1, static_cast<int>(b) + 1, 1, conv_weight_norm(blocks[b].conv1.weight.value())});
      r.entries.push_back({k + 1, static_cast<int>(b) + 1, 2, conv_weight_norm(blocks[b].conv2.weight.value())});
    }
  }
  return r;
}

inline void write_weight_norms_csv(std::ostream& os, const WeightNormReport& r) {
  os << "stage,block,conv,norm\n";
  char buf[32];
  for (const auto& e : r.entries) {
    std::snprintf(buf, sizeof buf, "%.9g", e.norm);
    os << e.stage << ',' << e.block << ',' << e.conv << ',' << buf << '\n';
  }
}

/// Norm profile: one bar per residual conv, stages separated by vertical lines.
inline std::string weight_norms_svg(const WeightNormReport& r, const std::string& title = "Residual weight norms") {
  std::vector<svg::Bar> bars;
  std::vector<std::size_t> separators;
  int last_stage = 0;
  for (const auto& e : r.entries) {
    if (e.stage != last_stage && !bars.empty()) separators.push_back(bars.size());
    last_stage = e.stage;
    bars.push_back({"R" + std::to_string(e.stage) + "." + std::to_string(e.block) + "." + std::to_string(e.conv),
                    e.norm});
  }
  return svg::bar_chart(title, "residual conv", "mean l1 norm per input channel", bars, separators);
}

/// Runs a model with chosen stages cut back to their first block. The model itself is never modified.
template <typename T>
struct ModelView {
  ModelGraph<T>* model = nullptr;
  ForwardOptions options;

  Tensor<T> infer(const Tensor<T>& image) const { return model->infer(image, options); }
  [[nodiscard]] std::size_t active_blocks(int stage_id) const {
    return std::min(options.active[stage_id - 1], model->stages[stage_id - 1].blocks.size());
  }
};

template <typename T>
ModelView<T> drop_resnet(ModelGraph<T>& model, int stage_id) {
  if (stage_id < 1 || stage_id > kStageCount) {
    throw Error("drop_resnet: stage id must lie in [1, 9], got " + std::to_string(stage_id));
  }
  ModelView<T> v{&model, {}};
  v.options.active[stage_id - 1] = 1;
  return v;
}

struct AblationRow {
  int stage = 0;  // 0 is the full-model baseline
  double val_miou = 0.0;
  double delta = 0.0;  // val_miou - baseline
};

struct AblationReport {
  double baseline = 0.0;
  std::vector<AblationRow> rows;  // baseline first, then stages 1..9
};

template <typename T>
AblationReport ablation_sweep(ModelGraph<T>& model, const Dataset& val) {
  if (val.empty()) throw DataError("ablation_sweep: empty validation set");
  AblationReport r;
  r.baseline = evaluate(model, val).miou();
  r.rows.push_back({0, r.baseline, 0.0});
  for (int k = 1; k <= kStageCount; ++k) {
    const double m = evaluate(model, val, drop_resnet(model, k).options).miou();
    r.rows.push_back({k, m, m - r.baseline});
  }
  return r;
}

inline void write_ablation_csv(std::ostream& os, const AblationReport& r) {
  os << "dropped_stage,val_miou,delta\n";
  char buf[64];
  for (const auto& row : r.rows) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g", row.val_miou, row.delta);
    os << (row.stage == 0 ? std::string("none") : std::to_string(row.stage)) << ',' << buf << '\n';
  }
}

inline std::string ablation_svg(const AblationReport& r) {
  std::vector<svg::Bar> bars;
  for (const auto& row : r.rows)
    if (row.stage > 0) bars.push_back({std::to_string(row.stage), 100.0 * row.delta});
  return svg::bar_chart("mIoU change when a ResNet is reduced to its first block", "dropped ResNet",
                        "mean IoU change [%]", bars, {});
}

struct CompressionResult {
  std::vector<std::pair<int, int>> removed;  // (stage, block), 1-based, numbering of the input model
  std::size_t params_before = 0;
  std::size_t params_after = 0;
  double rate = 1.0;
  std::optional<double> miou_before;
  std::optional<double> miou_after;

  [[nodiscard]] std::optional<double> delta() const {
    if (!miou_before || !miou_after) return std::nullopt;
    return *miou_after - *miou_before;
  }
};

/// Removes every residual block after the first of its stage whose final-conv norm is below the threshold.
/// `per_stage` overrides the threshold for individual stages (index 0 is stage 1).
template <typename T>
std::pair<CompressionResult, ModelGraph<T>> compress(const ModelGraph<T>& model, double epsilon,
                                                     const Dataset* val = nullptr,
                                                     const std::array<std::optional<double>, kStageCount>& per_stage = {}) {
  if (!(epsilon >= 0.0)) throw Error("compress: threshold must be non-negative");
  for (const auto& e : per_stage)
    if (e && !(*e >= 0.0)) throw Error("compress: per-stage threshold must be non-negative");
  CompressionResult r;
  ModelGraph<T> out = model.clone();
  r.params_before = out.count_parameters();
  for (int k = 0; k < kStageCount; ++k) {
    const double eps = per_stage[k].value_or(epsilon);
    auto& blocks = out.stages[k].blocks;
    std::vector<ResidualBasicBlock<T>> kept;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      if (b > 0 && conv_weight_norm(blocks[b].conv2.weight.value()) < eps) {
        r.removed.emplace_back(k + 1, static_cast<int>(b) + 1);
      } else {
        kept.push_back(std::move(blocks[b]));
      }
    }
    blocks = std::move(kept);
    out.arch.blocks[k] = static_cast<int>(blocks.size());
  }
  r.params_after = out.count_parameters();
  r.rate = static_cast<double>(r.params_before) / static_cast<double>(r.params_after);
  if (val != nullptr) {
    ModelGraph<T> before = model.clone();
    r.miou_before = evaluate(before, *val).miou();
    r.miou_after = evaluate(out, *val).miou();
  }
  return {std::move(r), std::move(out)};
}

inline void write_compression_csv(std::ostream& os, const CompressionResult& r) {
  os << "stage,block\n";
  for (const auto& [s, b] : r.removed) os << s << ',' << b << '\n';
}

struct RetrainRow {
  std::string arm;
  double val_miou = 0.0;
  double miou_loss = 0.0;  // reference - val_miou, in IoU points
  double rate = 1.0;
  int best_epoch = 0;
};

struct RetrainReport {
  std::string architecture;
  double reference_miou = 0.0;  // the full-capacity trained model
  std::vector<RetrainRow> rows;
};

/// Fresh initialisation of the compressed architecture, trained with the full protocol.
template <typename T>
TrainResult<T> retrain_reduced(const ArchitectureDescriptor& reduced, const Dataset& train_set, const Dataset& val_set,
                               TrainConfig cfg, bool weight_decay, std::uint64_t init_seed,
                               const TrainOptions<T>& options = {}) {
  if (!weight_decay) cfg.weight_decay = 0.0;
  auto model = ModelGraph<T>::build(reduced, init_seed);
  return train(model, train_set, val_set, cfg, options);
}

/// The three arms: compressed-from-trained, retrained with weight decay, retrained without.
template <typename T>
RetrainReport retrain_comparison(ModelGraph<T>& trained, double epsilon, const Dataset& train_set,
                                 const Dataset& val_set, const TrainConfig& cfg, std::uint64_t init_seed,
                                 const TrainOptions<T>& options = {}) {
  RetrainReport rep;
  rep.architecture = "FC-DRN-" + to_string(trained.family());
  auto [cr, compressed] = compress(trained, epsilon, &val_set);
  rep.reference_miou = *cr.miou_before;
  rep.rows.push_back({"compressed", *cr.miou_after, rep.reference_miou - *cr.miou_after, cr.rate, 0});
  for (bool wd : {true, false}) {
    auto res = retrain_reduced<T>(compressed.arch, train_set, val_set, cfg, wd, init_seed, options);
    rep.rows.push_back({wd ? "retrained" : "retrained-no-wd", res.best_val_miou,
                        rep.reference_miou - res.best_val_miou, cr.rate, res.best_epoch});
  }
  return rep;
}

inline void write_retrain_csv(std::ostream& os, const RetrainReport& r) {
  os << "architecture,arm,val_miou,miou_loss_percent,compression_rate,best_epoch\n";
  char buf[96];
  for (const auto& row : r.rows) {
    std::snprintf(buf, sizeof buf, "%.6f,%.4f,%.4f,%d", row.val_miou, 100.0 * row.miou_loss, row.rate, row.best_epoch);
    os << r.architecture << ',' << row.arm << ',' << buf << '\n';
  }
}

/// Markdown table with the columns architecture / mean IoU loss [%] / compression rate.
inline void write_retrain_table(std::ostream& os, const RetrainReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "Full-capacity %s: mean IoU %.2f%%\n\n", r.architecture.c_str(),
                100.0 * r.reference_miou);
  os << buf;
  os << "| Architecture | mean IoU [%] | mean IoU loss [%] | compression rate |\n";
  os << "|---|---|---|---|\n";
  for (const auto& row : r.rows) {
    std::snprintf(buf, sizeof buf, "| %s (%s) | %.2f | %.2f | %.2f |\n", r.architecture.c_str(), row.arm.c_str(),
                  100.0 * row.val_miou, 100.0 * row.miou_loss, row.rate);
    os << buf;
  }
}

}  // namespace fcdrn
