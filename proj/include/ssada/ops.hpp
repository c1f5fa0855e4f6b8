#pragma once

// Differentiable operations on ssada::Tensor.
//
// Feature maps are laid out channel-major, [C, H, W], without a batch axis.
// Broadcasting is limited to replicating a leading-axis-1 operand along axis 0
// ([1,H,W] over [C,H,W], or a [1,n] row over [N,n]).

#include <cstdint>
#include <span>
#include <vector>

#include "ssada/tensor.hpp"

namespace ssada {

enum class UnaryOp { Relu, Sigmoid, Neg, Log, Square };
enum class BinaryOp { Add, Sub, Mul };
enum class Reduction { Sum, Mean };

Tensor elementwise_unary(UnaryOp op, const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor neg(const Tensor& x);
/// Throws DomainError on any non-positive input.
Tensor log(const Tensor& x);
Tensor square(const Tensor& x);

/// b must match a's shape, or be a's shape with a leading extent of 1 (replicated along axis 0).
Tensor elementwise_binary(BinaryOp op, const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);
/// x^exponent for x >= 0. The derivative at exponent 0 is taken as 0.
Tensor pow_scalar(const Tensor& x, double exponent);
/// Gradient passes only where lo <= x <= hi.
Tensor clamp(const Tensor& x, double lo, double hi);

/// [m,k] x [k,n] -> [m,n].
Tensor matmul(const Tensor& a, const Tensor& b);

/// Cross-correlation of x [Cin,H,W] with w [Cout,Cin,k,k] (k odd); bias [Cout] may be undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride = 1, int padding = 0);

/// Per-window maximum; gradient goes to the first maximal element in scan order.
Tensor max_pool2d(const Tensor& x, int window = 2, int stride = 2);

Tensor reduce(Reduction op, const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Identity forward, negated gradient backward.
Tensor grad_reverse(const Tensor& x);

Tensor reshape(const Tensor& x, const Shape& shape);
/// Concatenation along axis 0.
Tensor concat(const Tensor& a, const Tensor& b);
/// Rows [start, start + count) along axis 0.
Tensor slice(const Tensor& x, std::int64_t start, std::int64_t count);

/// [C,H,W] -> [1,H,W] mean over channels.
Tensor channel_mean(const Tensor& x);
/// [C,H,W] -> [1,H,W] max over channels (first index on ties).
Tensor channel_max(const Tensor& x);
/// [C,H,W] -> [1,C] spatial mean.
Tensor global_avg_pool(const Tensor& x);

/// Mean binary cross-entropy of sigmoid(logits) against targets in [0,1].
Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets);
/// logits [K, ...] with K classes on axis 0; one label per remaining position, -1 to ignore.
/// Mean over labelled positions, 0 when none are labelled.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);
/// sum_i weights[i] * smoothL1(pred[i] - target[i]) with unit transition point.
Tensor smooth_l1(const Tensor& pred, std::span<const double> target, std::span<const double> weights);

}  // namespace ssada
