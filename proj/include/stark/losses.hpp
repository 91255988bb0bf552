#pragma once

#include "stark/tensor.hpp"

namespace stark {

// Boxes as four [B] coordinate columns (x1,y1,x2,y2), normalized to the crop.
template <class S>
struct BoxColsT {
  TensorT<S> x1, y1, x2, y2;

  static BoxColsT from_matrix(const TensorT<S>& m) {
    return BoxColsT{unstack_last(m, 0), unstack_last(m, 1), unstack_last(m, 2), unstack_last(m, 3)};
  }
};

// Differentiable generalized IoU per sample. Intersection sides clamp at
// zero (true subgradient of the geometry); predicted corners are taken as-is,
// so inverted predictions contribute negative area and a strong repair
// gradient. Denominators carry a tiny epsilon so degenerate pairs stay finite.
template <class S>
TensorT<S> giou_pairwise(const BoxColsT<S>& a, const BoxColsT<S>& b) {
  const S eps = static_cast<S>(1e-9);
  auto ix = relu(sub(emin(a.x2, b.x2), emax(a.x1, b.x1)));
  auto iy = relu(sub(emin(a.y2, b.y2), emax(a.y1, b.y1)));
  auto inter = mul(ix, iy);
  auto area_a = mul(sub(a.x2, a.x1), sub(a.y2, a.y1));
  auto area_b = mul(sub(b.x2, b.x1), sub(b.y2, b.y1));
  auto uni = sub(add(area_a, area_b), inter);
  auto iou_v = div(inter, add_scalar(uni, eps));
  auto hull = mul(sub(emax(a.x2, b.x2), emin(a.x1, b.x1)), sub(emax(a.y2, b.y2), emin(a.y1, b.y1)));
  auto penalty = div(sub(hull, uni), add_scalar(hull, eps));
  return sub(iou_v, penalty);
}

// Mean absolute corner difference per sample.
template <class S>
TensorT<S> l1_pairwise(const BoxColsT<S>& a, const BoxColsT<S>& b) {
  auto t = add(add(abs_val(sub(a.x1, b.x1)), abs_val(sub(a.y1, b.y1))),
               add(abs_val(sub(a.x2, b.x2)), abs_val(sub(a.y2, b.y2))));
  return mul_scalar(t, static_cast<S>(0.25));
}

template <class S>
struct LocLossT {
  TensorT<S> total;      // scalar: lambda_iou * mean(1 - giou) + lambda_l1 * mean |delta|
  TensorT<S> giou_term;  // scalar, unweighted mean(1 - giou)
  TensorT<S> l1_term;    // scalar, unweighted mean |delta|
};

// Localization objective over a batch of normalized corner boxes.
template <class S>
LocLossT<S> localization_loss(const BoxColsT<S>& pred, const BoxColsT<S>& gt, double lambda_iou,
                              double lambda_l1) {
  LocLossT<S> out;
  out.giou_term = mean_all(add_scalar(mul_scalar(giou_pairwise(pred, gt), S(-1)), S(1)));
  out.l1_term = mean_all(l1_pairwise(pred, gt));
  out.total = add(mul_scalar(out.giou_term, static_cast<S>(lambda_iou)),
                  mul_scalar(out.l1_term, static_cast<S>(lambda_l1)));
  return out;
}

// Mean binary cross-entropy over the batch, from logits.
template <class S>
TensorT<S> bce_mean(const TensorT<S>& logits, const TensorT<S>& labels) {
  return mean_all(bce_with_logits(logits, labels));
}

}  // namespace stark
