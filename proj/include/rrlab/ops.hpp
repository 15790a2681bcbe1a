#pragma once

#include <cstdint>
#include <vector>

#include "rrlab/tape.hpp"

// Differentiable primitives. Every function records one node on the tape of
// its first operand and throws ShapeError on incompatible operands.
namespace rrlab::ad {

/// Probabilities are clamped to this floor before taking logarithms.
inline constexpr double kLogFloor = 1e-12;

// Elementwise arithmetic. Operands must share a shape, or one of them must
// hold a single element, which is broadcast.
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> div(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T factor);

template <typename T> Var<T> leaky_relu(const Var<T>& x, T slope);
template <typename T> Var<T> abs(const Var<T>& x);
/// log(max(x, 1e-12)); zero gradient below the floor.
template <typename T> Var<T> log(const Var<T>& x);
/// Softmax over the last axis.
template <typename T> Var<T> softmax(const Var<T>& x);

/// Sum of all elements; result has shape ().
template <typename T> Var<T> reduce_sum(const Var<T>& x);
/// Sum over the last axis, dropping it.
template <typename T> Var<T> sum_last(const Var<T>& x);
/// Maximum over all elements. Gradient goes to the first maximal element.
template <typename T> Var<T> reduce_max(const Var<T>& x);
/// Maximum over the last axis; ties resolve to the smallest index.
template <typename T> Var<T> max_last(const Var<T>& x);
template <typename T> Var<T> l1_norm(const Var<T>& x);
template <typename T> Var<T> l2_norm(const Var<T>& x);

/// x[i, labels[i]] for a rank-2 x.
template <typename T> Var<T> pick(const Var<T>& x, const std::vector<std::uint32_t>& labels);
/// Identity on values; blocks all gradient flow to the input.
template <typename T> Var<T> stop_gradient(const Var<T>& x);
template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);

/// Adds a per-channel bias (C) along the last axis.
template <typename T> Var<T> bias_add(const Var<T>& x, const Var<T>& bias);
/// x (N, D) times w (D, O) plus optional bias (O).
template <typename T> Var<T> dense(const Var<T>& x, const Var<T>& w, const Var<T>* bias);

struct ConvGeometry {
  int stride = 1;
  int padding = 0;
};
/// NHWC input, weights (kh, kw, cin, cout), zero padding.
template <typename T> Var<T> conv2d(const Var<T>& x, const Var<T>& w, ConvGeometry geometry);

template <typename T>
struct BatchStats {
  std::vector<T> mean;
  std::vector<T> var;  ///< population (biased) variance
};

/// Normalizes over every axis but the last using the batch's own statistics,
/// which are written to `stats` when non-null.
template <typename T>
Var<T> batch_norm_train(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps,
                        BatchStats<T>* stats);
/// Normalizes with fixed statistics.
template <typename T>
Var<T> batch_norm_eval(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                       const std::vector<T>& mean, const std::vector<T>& var, T eps);

/// NHWC max pooling; the first maximum in a window receives the gradient.
template <typename T> Var<T> max_pool2d(const Var<T>& x, int size, int stride);
/// (N, H, W, C) -> (N, C)
template <typename T> Var<T> global_avg_pool(const Var<T>& x);
/// Inverted dropout with a mask drawn from `seed`.
template <typename T> Var<T> dropout(const Var<T>& x, double rate, std::uint64_t seed);

}  // namespace rrlab::ad
