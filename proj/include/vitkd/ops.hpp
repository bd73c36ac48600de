#pragma once

#include <initializer_list>
#include <vector>

#include "vitkd/tensor.hpp"

namespace vitkd {

// All ops are pure: inputs are never modified and every result is a fresh
// node. Binary elementwise ops broadcast trailing-aligned, numpy style.

Tensor matmul(const Tensor& a, const Tensor& b);  // [..,m,k] x [..,k,n], leading dims broadcast
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);

Tensor transpose(const Tensor& a, int64_t d0, int64_t d1);
Tensor reshape(const Tensor& a, Shape new_shape);
Tensor concat(const std::vector<Tensor>& parts, int64_t dim);
Tensor slice(const Tensor& a, int64_t dim, int64_t start, int64_t len);
Tensor index_select(const Tensor& a, int64_t dim, const std::vector<int64_t>& indices);

Tensor softmax(const Tensor& a, int64_t dim);
// Normalizes over the last axis, epsilon 1e-6; gamma/beta optional (pass
// undefined Tensors for the affine-free variant).
Tensor layer_norm(const Tensor& a, const Tensor& gamma = {}, const Tensor& beta = {});
Tensor gelu(const Tensor& a);
Tensor log_op(const Tensor& a);
Tensor clamp_min(const Tensor& a, float lo);

Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// Piecewise quadratic/linear penalty, mean-reduced over all elements.
Tensor smooth_l1(const Tensor& pred, const Tensor& target, float beta = 2.0f);

constexpr float kLayerNormEps = 1e-6f;

}  // namespace vitkd
