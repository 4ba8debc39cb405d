// Training loop: augmentation, RMSProp with decaying rate, validation mIoU and early stopping.
#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "fcdrn/data.hpp"
#include "fcdrn/loss.hpp"
#include "fcdrn/metrics.hpp"
#include "fcdrn/model.hpp"
#include "fcdrn/optim.hpp"

namespace fcdrn {

struct TrainConfig {
  double lr0 = 1e-3;
  double lr_decay = 0.995;
  double weight_decay = 1e-4;
  double dropout = 0.2;
  DropoutKind dropout_kind = DropoutKind::Element;
  int crop_h = 324;  // 0 trains on full images
  int crop_w = 324;
  double hflip_prob = 0.5;
  int patience = 200;
  bool soft_targets = false;
  int batch_size = 3;
  int max_epochs = 1000;
  std::uint64_t seed = 0;
  double rho = 0.9;
  double eps = 1e-8;
  int train_eval_every = 0;  // also score the training set every N epochs; 0 = never

  void validate() const {
    auto bad = [](const std::string& what) { throw Error("train config: " + what); };
    if (!(lr0 > 0.0)) bad("lr0 must be positive");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) bad("lr_decay must lie in (0, 1]");
    if (!(weight_decay >= 0.0)) bad("weight_decay must be non-negative");
    if (!(dropout >= 0.0 && dropout < 1.0)) bad("dropout must lie in [0, 1)");
    if (!(hflip_prob >= 0.0 && hflip_prob <= 1.0)) bad("hflip_prob must lie in [0, 1]");
    if (patience < 1) bad("patience must be at least 1");
    if (batch_size < 1) bad("batch_size must be at least 1");
    if (max_epochs < 0) bad("max_epochs must be non-negative");
    if (crop_h < 0 || crop_w < 0) bad("crop must be non-negative");
    if (!(rho >= 0.0 && rho < 1.0)) bad("rho must lie in [0, 1)");
    if (!(eps > 0.0)) bad("eps must be positive");
    if (train_eval_every < 0) bad("train_eval_every must be non-negative");
  }
};

/// Strict-improvement patience counter.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {}

  /// Records the score of `epoch`; true when training should stop.
  bool update(int epoch, double score) {
    if (!has_best_ || score > best_score_) {
      has_best_ = true;
      best_ = epoch;
      best_score_ = score;
      return false;
    }
    return epoch - best_ >= patience_;
  }
  [[nodiscard]] bool improved_at(int epoch) const { return has_best_ && best_ == epoch; }
  [[nodiscard]] int best_epoch() const { return has_best_ ? best_ : 0; }
  [[nodiscard]] double best_score() const { return best_score_; }

 private:
  int patience_;
  bool has_best_ = false;
  int best_ = 0;
  double best_score_ = 0.0;
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_miou = 0.0;
  double val_acc = 0.0;
  std::optional<double> train_miou;
  double seconds = 0.0;
};

inline void write_history_csv(std::ostream& os, const std::vector<EpochRecord>& history, bool with_time = true) {
  os << "epoch,lr,train_loss,val_miou,val_acc,train_miou" << (with_time ? ",seconds" : "") << "\n";
  for (const auto& r : history) {
    os << r.epoch << ',' << std::setprecision(9) << r.lr << ',' << r.train_loss << ',' << r.val_miou << ','
       << r.val_acc << ',';
    if (r.train_miou) os << *r.train_miou;
    if (with_time) os << ',' << std::setprecision(4) << r.seconds;
    os << '\n';
  }
}

enum class TrainStatus { MaxEpochs, EarlyStopped, Diverged, Stopped };

inline std::string to_string(TrainStatus s) {
  switch (s) {
    case TrainStatus::MaxEpochs: return "max_epochs";
    case TrainStatus::EarlyStopped: return "early_stopped";
    case TrainStatus::Diverged: return "diverged";
    case TrainStatus::Stopped: return "stopped";
  }
  return "?";
}

template <typename T>
struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_val_miou = 0.0;
  ModelGraph<T> best;  // weights at best_epoch (the initial weights if no epoch completed)
  TrainStatus status = TrainStatus::MaxEpochs;
  std::string message;
  std::map<std::string, Tensor<T>> optimizer_state;  // at the end of the last completed epoch
};

template <typename T>
struct TrainOptions {
  std::function<bool(const EpochRecord&)> stop;            // user stop condition, checked after each epoch
  std::function<void(const EpochRecord&)> on_epoch;        // progress callback
  int start_epoch = 0;                                     // epochs already completed (resume)
  const std::map<std::string, Tensor<T>>* optimizer_state = nullptr;
};

/// Eval-mode confusion matrix over a dataset, one sample at a time.
template <typename T>
ConfusionMatrix evaluate(ModelGraph<T>& model, const Dataset& data, const ForwardOptions& opt = {}) {
  if (data.empty()) throw DataError("evaluate: empty dataset");
  ConfusionMatrix cm(model.num_classes());
  for (const auto& s : data.samples) {
    const auto logits = model.infer(s.image.template cast<T>(), opt);
    cm.accumulate(argmax_labels(logits), s.labels, data.void_index);
  }
  return cm;
}

template <typename T>
std::vector<std::pair<std::string, Var<T>>> named_parameters(ModelGraph<T>& model) {
  std::vector<std::pair<std::string, Var<T>>> out;
  model.visit_params([&](const std::string& n, Var<T>& v) { out.emplace_back(n, v); });
  return out;
}

/// Trains `model` in place. All randomness comes from streams derived from (seed, epoch, sample), so a
/// resumed run replays exactly what an uninterrupted one would have done.
template <typename T>
TrainResult<T> train(ModelGraph<T>& model, const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                     const TrainOptions<T>& options = {}) {
  cfg.validate();
  if (train_set.empty()) throw DataError("train: empty training set");
  if (val_set.empty()) throw DataError("train: empty validation set");
  if (train_set.classes > model.num_classes()) throw DataError("train: dataset has more classes than the model");

  RmsProp<T> opt(named_parameters(model), {cfg.rho, cfg.eps, cfg.weight_decay});
  if (options.optimizer_state != nullptr) opt.load_state(*options.optimizer_state);
  EarlyStopping stopper(cfg.patience);
  TrainResult<T> result;
  result.best = model.clone();
  auto snapshot_optimizer = [&] {
    result.optimizer_state.clear();
    opt.visit_state([&](const std::string& n, Tensor<T>& t) { result.optimizer_state.emplace(n, t); });
  };

  const int n = static_cast<int>(train_set.size());
  const int k = model.num_classes();
  for (int epoch = options.start_epoch + 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_at_epoch(cfg.lr0, cfg.lr_decay, epoch - 1);
    Rng order_rng = derive_rng(cfg.seed, 0x10000000ULL + epoch);
    Rng drop_rng = derive_rng(cfg.seed, 0x20000000ULL + epoch);
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    for (int i = n - 1; i > 0; --i) std::swap(order[i], order[uniform_int(order_rng, 0, i)]);

    double loss_sum = 0.0;
    int batches = 0;
    EpochRecord rec;
    try {
      for (int b0 = 0; b0 < n; b0 += cfg.batch_size) {
        std::vector<SegmentationSample> parts;
        for (int i = b0; i < std::min(n, b0 + cfg.batch_size); ++i) {
          const auto& s = train_set.samples[order[i]];
          Rng aug = derive_rng(cfg.seed, (static_cast<std::uint64_t>(epoch) << 32) + static_cast<std::uint64_t>(i));
          const int ch = cfg.crop_h > 0 ? cfg.crop_h : s.image.h();
          const int cw = cfg.crop_w > 0 ? cfg.crop_w : s.image.w();
          parts.push_back(augment(s, ch, cw, cfg.hflip_prob, aug));
        }
        const auto batch = stack(parts);

        Tape<T> tape;
        ForwardContext<T> ctx{&tape, Mode::Train, &drop_rng, cfg.dropout, cfg.dropout_kind};
        auto logits = model.forward(ctx, Var<T>(batch.image.template cast<T>()));
        auto loss = cfg.soft_targets
                        ? softmax_cross_entropy(&tape, logits,
                                                soften(batch.labels, k, train_set.void_index).template cast<T>())
                        : softmax_cross_entropy(&tape, logits, batch.labels, train_set.void_index);
        opt.zero_grad();
        tape.backward(loss);
        opt.step(lr);
        loss_sum += static_cast<double>(loss.value()[0]);
        ++batches;
      }
      rec.epoch = epoch;
      rec.lr = lr;
      rec.train_loss = loss_sum / batches;
      const auto cm = evaluate(model, val_set);
      rec.val_miou = cm.miou();
      rec.val_acc = cm.global_accuracy();
      if (cfg.train_eval_every > 0 && epoch % cfg.train_eval_every == 0) {
        rec.train_miou = evaluate(model, train_set).miou();
      }
      if (!std::isfinite(rec.train_loss)) throw NumericalError("non-finite epoch loss");
    } catch (const NumericalError& e) {
      model = result.best.clone();
      result.status = TrainStatus::Diverged;
      result.message = "epoch " + std::to_string(epoch) + ": " + e.what();
      return result;
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(rec);
    snapshot_optimizer();

    const bool patience_out = stopper.update(epoch, rec.val_miou);
    if (stopper.improved_at(epoch)) {
      result.best = model.clone();
      result.best_epoch = epoch;
      result.best_val_miou = rec.val_miou;
    }
    if (options.on_epoch) options.on_epoch(rec);
    if (patience_out) {
      result.status = TrainStatus::EarlyStopped;
      return result;
    }
    if (options.stop && options.stop(rec)) {
      result.status = TrainStatus::Stopped;
      return result;
    }
  }
  result.status = TrainStatus::MaxEpochs;
  return result;
}

}  // namespace fcdrn
