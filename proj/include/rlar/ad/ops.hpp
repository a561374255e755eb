#pragma once

#include <cstddef>
#include <span>

#include "rlar/ad/tensor.hpp"

// Differentiable ops. Every op records itself on the graph of its node-bearing
// inputs (if that graph is recording) and validates shapes, throwing
// ShapeError naming the op. Outputs are checked for finiteness; a non-finite
// value raises NumericalError naming the op.
//
// Layout conventions: images are N x C x H x W, conv weights O x C x k x k,
// matrices are row-major rank-2 tensors, scalars have shape {}.
namespace rlar::ad {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// a / (b + guard); the guard is the caller's choice, nothing is injected.
Tensor div(const Tensor& a, const Tensor& b, double guard);

Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor abs(const Tensor& x);
// 1/x where x != 0, exactly 0 where x == 0.
Tensor recip_nonzero(const Tensor& x);

// Rank-2 only: (m x k) * (k x n) -> (m x n).
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
// x: N x in, weight: out x in, bias: out.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Adds bias[c] along axis 1 of a rank >= 2 tensor.
Tensor add_bias(const Tensor& x, const Tensor& bias);
// Sum over every axis except 1: shape -> {shape[1]}.
Tensor channel_sum(const Tensor& x);
// Inverse broadcast of channel_sum.
Tensor channel_expand(const Tensor& bias, const Shape& shape);

// Zero-padded cross-correlation. Output extent (H + 2*pad - k)/stride + 1.
Tensor conv2d(const Tensor& x, const Tensor& weight, std::size_t stride, std::size_t pad);
// Transposed convolution: gradient of conv2d w.r.t. its input.
Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& weight, std::size_t stride,
                         std::size_t pad, const Shape& input_shape);
// Gradient of conv2d w.r.t. its weight, shape O x C x k x k.
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad_out, std::size_t stride,
                          std::size_t pad, std::size_t kernel);

// Nearest-neighbour 2x upsampling and its adjoint (2x2 sum pooling).
Tensor upsample2x(const Tensor& x);
Tensor sum_pool2x(const Tensor& x);

// N x C x H x W -> N x C and back.
Tensor spatial_sum(const Tensor& x);
Tensor spatial_expand(const Tensor& x, std::size_t height, std::size_t width);
Tensor global_avg_pool(const Tensor& x);

// Row-wise log-softmax of an N x C matrix.
Tensor log_softmax(const Tensor& x);

Tensor reshape(const Tensor& x, const Shape& shape);
// Sub-range [start, start + length) of axis 1, and its zero-padded inverse.
Tensor narrow(const Tensor& x, std::size_t start, std::size_t length);
Tensor widen(const Tensor& x, std::size_t start, std::size_t total);
Tensor concat_channels(std::span<const Tensor> parts);

// Full reductions return shape {}.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor expand_scalar(const Tensor& s, const Shape& shape);

// Reductions over every axis except 0: shape -> {shape[0]}.
Tensor sum_per_sample(const Tensor& x);
Tensor mean_per_sample(const Tensor& x);
Tensor expand_per_sample(const Tensor& v, const Shape& shape);

// Euclidean norm of the whole tensor ({}), or of each sample ({N}).
// The subgradient at the origin is taken as zero.
Tensor l2norm(const Tensor& x);
Tensor l2norm_per_sample(const Tensor& x);

}  // namespace rlar::ad
