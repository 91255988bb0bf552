#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "stark/losses.hpp"
#include "stark/rng.hpp"
#include "stark/tensor.hpp"

// Central-finite-difference verification of the reverse-mode gradients.
// Everything here runs on the double instantiation of the engine so the
// oracle is a true 64-bit reference.

namespace stark {

using DTensor = TensorT<double>;
using DTape = TapeT<double>;

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  std::int64_t checked = 0;
};

// loss_fn must rebuild the forward pass from the current parameter values on
// every call. Gradients are compared element by element against
// (f(p+h) - f(p-h)) / 2h.
inline GradCheckResult check_gradients(const std::string& name,
                                       const std::function<DTensor()>& loss_fn,
                                       std::vector<DTensor> params, double h = 1e-3) {
  GradCheckResult res;
  res.name = name;

  DTape tape;
  {
    DTape::Scope scope(tape);
    DTensor loss = loss_fn();
    for (auto& p : params) {
      p.grad();
      p.zero_grad();
    }
    tape.backward(loss);
  }

  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    analytic.emplace_back(p.grad(), p.grad() + p.numel());
  }

  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    double* pd = p.data();
    for (std::int64_t i = 0; i < p.numel(); ++i) {
      const double saved = pd[i];
      pd[i] = saved + h;
      const double lp = loss_fn().item();
      pd[i] = saved - h;
      const double lm = loss_fn().item();
      pd[i] = saved;
      const double fd = (lp - lm) / (2.0 * h);
      const double an = analytic[pi][static_cast<size_t>(i)];
      const double denom = std::max({std::abs(an), std::abs(fd), 1e-6});
      const double rel = std::abs(an - fd) / denom;
      if (rel > res.max_rel_err) res.max_rel_err = rel;
      ++res.checked;
    }
  }
  return res;
}

// Per-operation gradient suite: each differentiable op in isolation on small
// random inputs, scalarized through a fixed random weighting so every output
// element contributes.
std::vector<GradCheckResult> op_gradient_suite();

// Full localization loss through a micro model (defined with the model stack).
GradCheckResult model_gradient_check();

}  // namespace stark
