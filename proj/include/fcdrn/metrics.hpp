// Confusion matrix, per-class IoU, mean IoU and global accuracy.
#pragma once

#include <cstdint>
#include <iomanip>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "fcdrn/tensor.hpp"

namespace fcdrn {

/// K x K counts, rows = ground truth, columns = prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int classes) : k_(classes), counts_(static_cast<std::size_t>(classes) * classes, 0) {
    if (classes < 1) throw Error("confusion matrix: need at least one class");
  }

  [[nodiscard]] int classes() const { return k_; }
  [[nodiscard]] std::int64_t at(int gt, int pred) const { return counts_[static_cast<std::size_t>(gt) * k_ + pred]; }
  [[nodiscard]] const std::vector<std::int64_t>& counts() const { return counts_; }

  [[nodiscard]] std::int64_t total() const {
    std::int64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  /// Ground-truth pixels equal to `void_index` are skipped.
  void accumulate(const LabelMap& pred, const LabelMap& gt, std::optional<int> void_index = std::nullopt) {
    if (pred.shape() != gt.shape()) {
      throw ShapeError("confusion matrix: prediction " + pred.shape().str() + " vs ground truth " + gt.shape().str());
    }
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const int g = gt[i];
      if (void_index && g == *void_index) continue;
      const int p = pred[i];
      if (p < 0 || p >= k_) throw DataError("confusion matrix: prediction " + std::to_string(p) + " out of range");
      if (g < 0 || g >= k_) throw DataError("confusion matrix: label " + std::to_string(g) + " out of range");
      ++counts_[static_cast<std::size_t>(g) * k_ + p];
    }
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    if (o.k_ != k_) throw ShapeError("confusion matrix: class count mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
    return *this;
  }

  bool operator==(const ConfusionMatrix&) const = default;

  /// TP / (TP + FP + FN); empty for classes absent from both ground truth and prediction.
  [[nodiscard]] std::vector<std::optional<double>> per_class_iou() const {
    std::vector<std::optional<double>> iou(k_);
    for (int c = 0; c < k_; ++c) {
      std::int64_t row = 0, col = 0;
      for (int j = 0; j < k_; ++j) {
        row += at(c, j);
        col += at(j, c);
      }
      const std::int64_t tp = at(c, c);
      const std::int64_t uni = row + col - tp;
      if (uni > 0) iou[c] = static_cast<double>(tp) / static_cast<double>(uni);
    }
    return iou;
  }

  [[nodiscard]] double miou() const {
    require_nonempty();
    double s = 0.0;
    int n = 0;
    for (const auto& v : per_class_iou()) {
      if (v) {
        s += *v;
        ++n;
      }
    }
    return s / n;
  }

  [[nodiscard]] double global_accuracy() const {
    require_nonempty();
    std::int64_t diag = 0;
    for (int c = 0; c < k_; ++c) diag += at(c, c);
    return static_cast<double>(diag) / static_cast<double>(total());
  }

 private:
  void require_nonempty() const {
    if (total() == 0) throw Error("confusion matrix is empty");
  }

  int k_;
  std::vector<std::int64_t> counts_;
};

/// class,iou rows (blank IoU for excluded classes) followed by mean_iou and global_accuracy rows.
inline void write_metrics_csv(std::ostream& os, const ConfusionMatrix& cm, const std::vector<std::string>& names = {}) {
  os << "class,iou\n" << std::setprecision(6) << std::fixed;
  const auto iou = cm.per_class_iou();
  for (int c = 0; c < cm.classes(); ++c) {
    os << (c < static_cast<int>(names.size()) ? names[c] : "class_" + std::to_string(c)) << ',';
    if (iou[c]) os << *iou[c];
    os << '\n';
  }
  os << "mean_iou," << cm.miou() << "\nglobal_accuracy," << cm.global_accuracy() << '\n';
  os << std::defaultfloat;
}

}  // namespace fcdrn
