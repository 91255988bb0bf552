#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "stark/tensor.hpp"

namespace stark {

// AdamW with decoupled weight decay and bias-corrected moments. Parameter
// groups carry their own learning rate (backbone vs. rest).
template <class S>
class AdamWT {
 public:
  struct Settings {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
  };

  explicit AdamWT(Settings s = {}) : set_(s) {}

  void add_group(std::vector<TensorT<S>> params, std::vector<std::string> names, double lr) {
    if (params.size() != names.size()) throw std::invalid_argument("adamw: params/names size mismatch");
    Group g;
    g.lr = lr;
    for (size_t i = 0; i < params.size(); ++i) {
      Slot sl;
      sl.p = params[i];
      sl.name = names[i];
      sl.m.assign(static_cast<size_t>(sl.p.numel()), 0.0);
      sl.v.assign(static_cast<size_t>(sl.p.numel()), 0.0);
      g.slots.push_back(std::move(sl));
    }
    groups_.push_back(std::move(g));
  }

  void scale_lr(double factor) {
    for (auto& g : groups_) g.lr *= factor;
  }

  long step_count() const { return t_; }

  void zero_grad() {
    for (auto& g : groups_)
      for (auto& sl : g.slots) {
        sl.p.grad();  // ensure the buffer exists so disconnected params read zero
        sl.p.zero_grad();
      }
  }

  // Global-norm gradient clipping over every group; no-op if max_norm <= 0.
  void clip_global_norm(double max_norm) {
    if (max_norm <= 0.0) return;
    double sq = 0.0;
    for (auto& g : groups_)
      for (auto& sl : g.slots) {
        if (!sl.p.has_grad()) continue;
        const S* gr = sl.p.grad();
        const std::int64_t n = sl.p.numel();
        for (std::int64_t i = 0; i < n; ++i) sq += static_cast<double>(gr[i]) * static_cast<double>(gr[i]);
      }
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) return;
    const S scale = static_cast<S>(max_norm / norm);
    for (auto& g : groups_)
      for (auto& sl : g.slots) {
        if (!sl.p.has_grad()) continue;
        S* gr = sl.p.grad();
        const std::int64_t n = sl.p.numel();
        for (std::int64_t i = 0; i < n; ++i) gr[i] *= scale;
      }
  }

  // One update. Gradients are read, never modified.
  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(set_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(set_.beta2, static_cast<double>(t_));
    for (auto& g : groups_) {
      for (auto& sl : g.slots) {
        if (!sl.p.has_grad())
          throw std::invalid_argument("adamw: parameter '" + sl.name + "' has no gradient");
        S* p = sl.p.data();
        const S* gr = sl.p.grad();
        const std::int64_t n = sl.p.numel();
        for (std::int64_t i = 0; i < n; ++i) {
          const double gi = static_cast<double>(gr[i]);
          sl.m[static_cast<size_t>(i)] = set_.beta1 * sl.m[static_cast<size_t>(i)] + (1.0 - set_.beta1) * gi;
          sl.v[static_cast<size_t>(i)] = set_.beta2 * sl.v[static_cast<size_t>(i)] + (1.0 - set_.beta2) * gi * gi;
          const double mhat = sl.m[static_cast<size_t>(i)] / bc1;
          const double vhat = sl.v[static_cast<size_t>(i)] / bc2;
          double x = static_cast<double>(p[i]);
          x -= g.lr * set_.weight_decay * x;  // decoupled decay
          x -= g.lr * mhat / (std::sqrt(vhat) + set_.eps);
          p[i] = static_cast<S>(x);
        }
      }
    }
  }

 private:
  struct Slot {
    TensorT<S> p;
    std::string name;
    std::vector<double> m, v;
  };
  struct Group {
    double lr = 1e-4;
    std::vector<Slot> slots;
  };

  Settings set_;
  std::vector<Group> groups_;
  long t_ = 0;
};

using AdamW = AdamWT<float>;

}  // namespace stark
