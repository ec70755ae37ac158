#pragma once

#include <array>
#include <optional>

#include "mixri/tensor.hpp"

namespace mixri {
class Rng;
}

namespace mixri::ops {

/// RAII guard disabling tape construction (inference mode).
class NoGrad {
 public:
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// ---- elementwise ----
// Binary ops accept equal shapes, or one operand whose shape is a suffix of
// the other's (broadcast over the leading batch dims), or a scalar operand.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor square(const Tensor& a);

// ---- shape ----
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor permute(const Tensor& a, const std::vector<int>& dims);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len);
Tensor broadcast_to(const Tensor& a, const Shape& shape);  // a.shape must be a suffix

// ---- reductions ----
Tensor reduce_sum(const Tensor& a);                 // -> [1]
Tensor reduce_mean(const Tensor& a);                // -> [1]
Tensor reduce_sum_axis(const Tensor& a, int axis);  // drops the axis
Tensor reduce_mean_axis(const Tensor& a, int axis);

// ---- linear algebra ----
// Batched matrix product. Trailing two dims are the matrix dims; leading
// batch dims broadcast by standard rules.
Tensor matmul(const Tensor& a, const Tensor& b);

// ---- neural primitives ----
Tensor softmax(const Tensor& a, int axis);
Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Pins entries where `mask` is negative to the most negative finite value of
/// the element type (the -inf surrogate). `mask` must broadcast like binary
/// ops; it is treated as a constant.
Tensor mask_pin(const Tensor& a, const Tensor& mask);

/// Scaled dot-product attention, `heads` heads, scale 1/sqrt(D/heads).
/// additive_mask: optional [B,Lq,Lk] with entries 0 (keep) or the -inf
/// surrogate (drop); masked keys receive exactly zero attention weight.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const std::optional<Tensor>& additive_mask, int heads);

Tensor conv2d(const Tensor& x, const Tensor& w, const std::optional<Tensor>& bias, int stride,
              int padding);
Tensor conv3d(const Tensor& x, const Tensor& w, const std::optional<Tensor>& bias, int stride,
              int padding);

/// Samples feature_map [C,H,W] at continuous pixel coords (integer = pixel
/// center); out-of-bounds coords clamp to the border. Returns [len(points),C].
/// Differentiable w.r.t. the feature map; the points are constants.
Tensor bilinear_sample(const Tensor& feature_map, const std::vector<std::array<double, 2>>& points);

// ---- losses (elementwise) ----
/// Binary cross entropy on probabilities, clamped to [1e-7, 1-1e-7].
Tensor bce_with_probs(const Tensor& probs, const Tensor& targets);
/// Huber on (pred - target): 0.5 e^2 for |e| <= delta, else delta(|e| - delta/2).
Tensor huber(const Tensor& pred, const Tensor& target, double delta);

// ---- constants / init ----
Tensor constant_like(const Tensor& a, double v);
Tensor randn(const Shape& shape, Dtype dt, Rng& rng, double mean = 0.0, double stddev = 1.0);
Tensor uniform(const Shape& shape, Dtype dt, Rng& rng, double lo, double hi);

}  // namespace mixri::ops
