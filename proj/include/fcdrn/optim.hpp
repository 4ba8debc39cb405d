// RMSProp with coupled weight decay, and the exponential learning-rate schedule.
#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "fcdrn/autodiff.hpp"

namespace fcdrn {

inline double lr_at_epoch(double lr0, double decay, int epoch) {
  if (epoch < 0) throw Error("learning rate: negative epoch");
  return lr0 * std::pow(decay, epoch);
}

struct RmsPropConfig {
  double rho = 0.9;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <typename T>
class RmsProp {
 public:
  using NamedParam = std::pair<std::string, Var<T>>;

  RmsProp(std::vector<NamedParam> params, RmsPropConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    if (!(cfg.rho >= 0.0 && cfg.rho < 1.0)) throw Error("rmsprop: rho must lie in [0, 1)");
    if (!(cfg.eps > 0.0)) throw Error("rmsprop: eps must be positive");
    if (!(cfg.weight_decay >= 0.0)) throw Error("rmsprop: weight decay must be non-negative");
    for (const auto& [name, p] : params_) sq_.emplace_back(p.shape());
  }

  [[nodiscard]] const RmsPropConfig& config() const { return cfg_; }
  [[nodiscard]] const std::vector<NamedParam>& params() const { return params_; }

  /// Checks every gradient before touching any parameter; a missing gradient counts as zero.
  void step(double lr) {
    for (const auto& [name, p] : params_) {
      if (p.has_grad() && !p.grad().all_finite()) throw NumericalError("rmsprop: non-finite gradient in " + name);
    }
    const double rho = cfg_.rho, wd = cfg_.weight_decay;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].second;
      auto& v = sq_[i];
      T* w = p.mutable_value().data();
      const T* g = p.has_grad() ? p.grad().data() : nullptr;
      T* s = v.data();
      for (std::size_t j = 0; j < v.size(); ++j) {
        const double gj = (g ? static_cast<double>(g[j]) : 0.0) + wd * static_cast<double>(w[j]);
        const double sj = rho * static_cast<double>(s[j]) + (1.0 - rho) * gj * gj;
        s[j] = static_cast<T>(sj);
        w[j] = static_cast<T>(static_cast<double>(w[j]) - lr * gj / (std::sqrt(sj) + cfg_.eps));
      }
    }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  /// Restores saved averages; parameters without an entry keep a fresh (zero) state.
  void load_state(const std::map<std::string, Tensor<T>>& state) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto it = state.find(params_[i].first);
      if (it == state.end()) continue;
      if (it->second.shape() != sq_[i].shape()) throw ShapeError("rmsprop: state shape mismatch for " + it->first);
      sq_[i] = it->second;
    }
  }

  /// Running squared-gradient averages, named after their parameters.
  template <typename F>
  void visit_state(F&& f) {
    for (std::size_t i = 0; i < params_.size(); ++i) f(params_[i].first, sq_[i]);
  }

 private:
  std::vector<NamedParam> params_;
  std::vector<Tensor<T>> sq_;
  RmsPropConfig cfg_;
};

}  // namespace fcdrn
