#include "vitkd/relations.hpp"

#include <cmath>

#include "vitkd/ops.hpp"

namespace vitkd {

std::string relation_pair_name(RelationPair p) {
    switch (p) {
        case RelationPair::QQ: return "qq";
        case RelationPair::KK: return "kk";
        case RelationPair::VV: return "vv";
        case RelationPair::QK: return "qk";
    }
    throw ContractError("unreachable relation pair");
}

RelationPair relation_pair_from_name(const std::string& name) {
    if (name == "qq") return RelationPair::QQ;
    if (name == "kk") return RelationPair::KK;
    if (name == "vv") return RelationPair::VV;
    if (name == "qk") return RelationPair::QK;
    throw ConfigError("unknown relation pair '" + name + "' (expected qq, kk, vv or qk)");
}

const Tensor& RelationSet::pair(RelationPair p) const {
    switch (p) {
        case RelationPair::QQ: return qq;
        case RelationPair::KK: return kk;
        case RelationPair::VV: return vv;
        case RelationPair::QK: return qk;
    }
    throw ContractError("unreachable relation pair");
}

RelationSet compute_relations(const Tensor& q, const Tensor& k, const Tensor& v, bool apply_softmax,
                              bool exclude_class_token, std::optional<float> scale_override) {
    if (q.dim() < 2) throw ShapeError("compute_relations: rank >= 2 required, got " + shape_str(q.shape()));
    if (q.shape() != k.shape() || q.shape() != v.shape())
        throw ShapeError("compute_relations: q/k/v shapes disagree: " + shape_str(q.shape()) + " " +
                         shape_str(k.shape()) + " " + shape_str(v.shape()));
    const int64_t head_dim = q.size(-1);
    const int64_t tokens = q.size(-2);

    Tensor qa = q, ka = k, va = v;
    if (exclude_class_token) {
        if (tokens < 2)
            throw ShapeError("compute_relations: cannot drop the class token from " +
                             std::to_string(tokens) + " tokens");
        qa = slice(q, -2, 1, tokens - 1);
        ka = slice(k, -2, 1, tokens - 1);
        va = slice(v, -2, 1, tokens - 1);
    }

    RelationSet rs;
    rs.softmax_applied = apply_softmax;
    rs.scale = scale_override.value_or(1.0f / std::sqrt(static_cast<float>(head_dim)));
    auto relate = [&](const Tensor& x, const Tensor& y) {
        Tensor r = scale(matmul(x, transpose(y, -1, -2)), rs.scale);
        return apply_softmax ? softmax(r, -1) : r;
    };
    rs.qq = relate(qa, qa);
    rs.kk = relate(ka, ka);
    rs.vv = relate(va, va);
    rs.qk = relate(qa, ka);
    return rs;
}

Tensor stack_heads(const std::vector<Tensor>& heads) {
    if (heads.empty()) throw ShapeError("stack_heads: no heads given");
    std::vector<Tensor> rows;
    rows.reserve(heads.size());
    for (const auto& h : heads) {
        if (h.dim() != 2)
            throw ShapeError("stack_heads: each head must be [T,T], got " + shape_str(h.shape()));
        rows.push_back(reshape(h, {1, h.size(0), h.size(1)}));
    }
    return concat(rows, 0);
}

}  // namespace vitkd
