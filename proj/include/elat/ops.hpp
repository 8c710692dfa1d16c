#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "elat/tensor.hpp"

// Differentiable primitives. Binary ops accept either identical shapes or a
// right operand whose shape equals the left operand's shape without its leading
// (batch) dimension. Reductions named *_last act over the trailing axis.
namespace elat::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor neg(const Tensor& a);

/// [M,K] x [K,N] -> [M,N]
Tensor matmul(const Tensor& a, const Tensor& b);

struct Conv2dParams {
    std::size_t stride = 1;
    std::size_t padding = 0;
};

/// x [N,C,H,W], weight [O,C,kh,kw], bias [O] (may be an empty Tensor()) -> [N,O,H',W']
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dParams params);

Tensor relu(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_last(const Tensor& a);
/// Max over the trailing axis. The gradient goes to the first maximal entry.
Tensor max_last(const Tensor& a);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
/// Numerically stable log(sum(exp(.))) over the trailing axis.
Tensor logsumexp(const Tensor& a);
Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);

/// [N,K] with one index per row -> [N]
Tensor gather(const Tensor& a, std::span<const std::size_t> index);

/// Euclidean norm over the trailing axis. Gradient at the origin is zero.
Tensor l2_norm(const Tensor& a);
/// Gradient passes where lo <= a <= hi.
Tensor clamp(const Tensor& a, double lo, double hi);
/// sign(0) == 0; the gradient is zero everywhere.
Tensor sign(const Tensor& a);

/// Stacks equally shaped tensors along a new trailing axis.
Tensor stack_last(std::span<const Tensor> parts);

}  // namespace elat::ops
