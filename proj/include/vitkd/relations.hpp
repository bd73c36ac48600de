#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vitkd/tensor.hpp"

namespace vitkd {

enum class RelationPair { QQ, KK, VV, QK };

std::string relation_pair_name(RelationPair p);
RelationPair relation_pair_from_name(const std::string& name);  // ConfigError on unknown

// The four token-relation matrices of one attention block, per head:
// R = softmax(X Y^T * scale) with X,Y drawn from {Q,K,V}.
struct RelationSet {
    Tensor qq, kk, vv, qk;  // [.., M, T, T]
    bool softmax_applied = true;
    float scale = 1.0f;

    const Tensor& pair(RelationPair p) const;
};

// q/k/v: [.., T, head_dim]; typically [M,T,d] or [B,M,T,d]. Scale defaults to
// 1/sqrt(head_dim); scale_override exists for the scale-invariance property
// (compute with (c*q, k) and scale/c to land on the same relations).
RelationSet compute_relations(const Tensor& q, const Tensor& k, const Tensor& v, bool apply_softmax,
                              bool exclude_class_token = false,
                              std::optional<float> scale_override = std::nullopt);

// Per-head [T,T] matrices -> [M,T,T], order preserved.
Tensor stack_heads(const std::vector<Tensor>& heads);

}  // namespace vitkd
