#include "vitkd/distill.hpp"

#include <algorithm>
#include <cmath>

#include "vitkd/ops.hpp"
#include "vitkd/rng.hpp"

namespace vitkd {

// ---------------------------------------------------------------------------
// enum names
// ---------------------------------------------------------------------------

std::string loss_kind_name(LossKind k) {
    switch (k) {
        case LossKind::class_token: return "class_token";
        case LossKind::feature: return "feature";
        case LossKind::relation: return "relation";
    }
    throw ContractError("unreachable loss kind");
}

LossKind loss_kind_from_name(const std::string& name) {
    if (name == "class_token") return LossKind::class_token;
    if (name == "feature") return LossKind::feature;
    if (name == "relation") return LossKind::relation;
    throw ConfigError("unknown loss kind '" + name + "' (expected class_token, feature or relation)");
}

std::string feature_target_name(FeatureTarget t) {
    switch (t) {
        case FeatureTarget::output: return "output";
        case FeatureTarget::ffn_pre: return "ffn_pre";
        case FeatureTarget::ffn_post: return "ffn_post";
        case FeatureTarget::attn_pre: return "attn_pre";
        case FeatureTarget::attn_post: return "attn_post";
        case FeatureTarget::qkv: return "qkv";
    }
    throw ContractError("unreachable feature target");
}

FeatureTarget feature_target_from_name(const std::string& name) {
    if (name == "output") return FeatureTarget::output;
    if (name == "ffn_pre") return FeatureTarget::ffn_pre;
    if (name == "ffn_post") return FeatureTarget::ffn_post;
    if (name == "attn_pre") return FeatureTarget::attn_pre;
    if (name == "attn_post") return FeatureTarget::attn_post;
    if (name == "qkv") return FeatureTarget::qkv;
    throw ConfigError("unknown feature target '" + name + "'");
}

// ---------------------------------------------------------------------------
// LossStrategy
// ---------------------------------------------------------------------------

void LossStrategy::validate() const {
    if (kind == LossKind::relation && relation_pairs.empty())
        throw ConfigError("loss strategy: relation distillation needs at least one relation pair");
    if (class_token_temperature <= 0.0f)
        throw ConfigError("loss strategy: class_token_temperature must be positive");
}

nlohmann::json LossStrategy::to_json() const {
    nlohmann::json pairs = nlohmann::json::array();
    for (RelationPair p : relation_pairs) pairs.push_back(relation_pair_name(p));
    return {{"kind", loss_kind_name(kind)},
            {"feature_target", feature_target_name(feature_target)},
            {"relation_pairs", pairs},
            {"relation_softmax", relation_softmax},
            {"with_reconstruction", with_reconstruction},
            {"class_token_temperature", class_token_temperature}};
}

LossStrategy LossStrategy::from_json(const nlohmann::json& j) {
    static const char* known[] = {"kind",           "feature_target",      "relation_pairs",
                                  "relation_softmax", "with_reconstruction", "class_token_temperature"};
    if (!j.is_object()) throw ConfigError("loss strategy must be a JSON object");
    for (const auto& [key, _] : j.items())
        if (std::find_if(std::begin(known), std::end(known),
                         [&](const char* k) { return key == k; }) == std::end(known))
            throw ConfigError("loss strategy: unknown key '" + key + "'");
    LossStrategy s;
    try {
        s.kind = loss_kind_from_name(j.at("kind").get<std::string>());
        if (j.contains("feature_target"))
            s.feature_target = feature_target_from_name(j.at("feature_target").get<std::string>());
        if (j.contains("relation_pairs")) {
            s.relation_pairs.clear();
            for (const auto& p : j.at("relation_pairs"))
                s.relation_pairs.push_back(relation_pair_from_name(p.get<std::string>()));
        }
        s.relation_softmax = j.value("relation_softmax", s.relation_softmax);
        s.with_reconstruction = j.value("with_reconstruction", s.with_reconstruction);
        s.class_token_temperature = j.value("class_token_temperature", s.class_token_temperature);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("loss strategy: ") + e.what());
    }
    s.validate();
    return s;
}

// ---------------------------------------------------------------------------
// ProjectionHead
// ---------------------------------------------------------------------------

ProjectionHead::ProjectionHead(int64_t d_in, int64_t d_out, uint64_t seed) {
    if (d_in < 1 || d_out < 1) throw ConfigError("projection head needs positive dimensions");
    std::vector<float> weights(static_cast<size_t>(d_in * d_out), 0.0f);
    if (d_in == d_out) {
        for (int64_t i = 0; i < d_in; ++i) weights[static_cast<size_t>(i * d_out + i)] = 1.0f;
    } else {
        Rng rng(seed);
        for (auto& x : weights) x = rng.trunc_normal(0.02f);
    }
    w = Tensor::param({d_in, d_out}, std::move(weights));
    b = Tensor::param({d_out}, std::vector<float>(static_cast<size_t>(d_out), 0.0f));
}

Tensor ProjectionHead::apply(const Tensor& x) const {
    if (x.size(-1) != w.size(0))
        throw ShapeError("projection head expects last dim " + std::to_string(w.size(0)) + ", got " +
                         shape_str(x.shape()));
    if (x.dim() == 1) return add(reshape(matmul(reshape(x, {1, x.size(0)}), w), {w.size(1)}), b);
    return add(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

Tensor kl_loss(const Tensor& p, const Tensor& t) {
    if (p.shape() != t.shape())
        throw ShapeError("kl_loss: shapes differ, " + shape_str(p.shape()) + " vs " +
                         shape_str(t.shape()));
    const int64_t cols = t.size(-1);
    const int64_t rows = t.numel() / cols;

    // Target rows must be distributions; also fold t*log(t) into a constant
    // here (0*log 0 := 0) so no gradient machinery touches the target side.
    const auto& tv = t.data();
    double t_entropy_sum = 0.0;
    for (int64_t r = 0; r < rows; ++r) {
        double sum = 0.0;
        for (int64_t c = 0; c < cols; ++c) {
            const float x = tv[static_cast<size_t>(r * cols + c)];
            if (x < 0.0f)
                throw ContractError("kl_loss: target row " + std::to_string(r) +
                                    " has a negative entry; rows must be distributions");
            sum += x;
            if (x > 0.0f) t_entropy_sum += static_cast<double>(x) * std::log(static_cast<double>(x));
        }
        if (std::fabs(sum - 1.0) > 1e-4)
            throw ContractError("kl_loss: target row " + std::to_string(r) + " sums to " +
                                std::to_string(sum) + ", expected 1 within 1e-4");
    }

    Tensor t_const = t.requires_grad() ? t.detach() : t;
    Tensor cross = mean_all(mul(t_const, log_op(clamp_min(p, 1e-8f))));  // E[t*log p] over all cells
    const float t_entropy_mean = static_cast<float>(t_entropy_sum / static_cast<double>(t.numel()));
    // mean over rows of sum_i t*log(t/p) == (E[t*log t] - E[t*log p]) * cols
    return scale(sub(Tensor::scalar(t_entropy_mean), cross), static_cast<float>(cols));
}

Tensor class_token_loss(const Tensor& c_s, const Tensor& c_t, float temperature) {
    if (c_s.shape() != c_t.shape())
        throw ShapeError("class_token_loss: dims differ, " + shape_str(c_s.shape()) + " vs " +
                         shape_str(c_t.shape()));
    if (temperature <= 0.0f) throw ContractError("class_token_loss: temperature must be positive");
    const float inv_t = 1.0f / temperature;
    Tensor p = softmax(scale(c_s, inv_t), -1);
    Tensor t = softmax(scale(c_t, inv_t), -1);
    return kl_loss(p, t);
}

Tensor feature_loss(const Tensor& student_feature, const Tensor& teacher_feature,
                    const ProjectionHead& head) {
    Tensor projected = head.apply(layer_norm(student_feature));
    Tensor target = layer_norm(teacher_feature);
    return smooth_l1(projected, target, 2.0f);
}

Tensor relation_loss(const RelationSet& student, const RelationSet& teacher,
                     const std::vector<RelationPair>& pairs) {
    if (pairs.empty()) throw ContractError("relation_loss: no relation pairs selected");
    if (student.softmax_applied != teacher.softmax_applied)
        throw ContractError("relation_loss: student and teacher relations disagree on softmax");
    const Tensor& s0 = student.pair(pairs.front());
    const Tensor& t0 = teacher.pair(pairs.front());
    if (s0.size(-3) != t0.size(-3))
        throw ContractError("relation_loss: student has " + std::to_string(s0.size(-3)) +
                            " heads, teacher has " + std::to_string(t0.size(-3)) +
                            "; configure the student's adaptive last block to match the teacher");
    if (s0.size(-1) != t0.size(-1) || s0.size(-2) != t0.size(-2))
        throw ShapeError("relation_loss: token counts differ, " + shape_str(s0.shape()) + " vs " +
                         shape_str(t0.shape()));

    Tensor total;
    for (RelationPair p : pairs) {
        Tensor term = student.softmax_applied ? kl_loss(student.pair(p), teacher.pair(p))
                                              : smooth_l1(student.pair(p), teacher.pair(p), 2.0f);
        total = total.defined() ? add(total, term) : term;
    }
    return total;
}

Tensor reconstruction_loss(const Tensor& predicted_patches, const Tensor& images,
                           const MaskSpec& mask, const ViTConfig& cfg) {
    if (mask.masked_indices.empty())
        throw ContractError("reconstruction_loss: mask has no masked patches");
    Tensor target = patchify(images, cfg);  // [B,N,P], plain data
    if (predicted_patches.shape() != target.shape())
        throw ShapeError("reconstruction_loss: predictions " + shape_str(predicted_patches.shape()) +
                         " do not match patch grid " + shape_str(target.shape()));

    // Per-patch pixel normalization of the target.
    auto& tv = target.data();
    const int64_t P = target.size(-1);
    const int64_t rows = target.numel() / P;
    for (int64_t r = 0; r < rows; ++r) {
        float* row = tv.data() + r * P;
        double mean = 0.0;
        for (int64_t i = 0; i < P; ++i) mean += row[i];
        mean /= static_cast<double>(P);
        double var = 0.0;
        for (int64_t i = 0; i < P; ++i) {
            const double d = row[i] - mean;
            var += d * d;
        }
        var /= static_cast<double>(P);
        const float rstd = static_cast<float>(1.0 / std::sqrt(var + 1e-6));
        for (int64_t i = 0; i < P; ++i)
            row[i] = (row[i] - static_cast<float>(mean)) * rstd;
    }

    Tensor pred_masked = index_select(predicted_patches, 1, mask.masked_indices);
    Tensor target_masked = index_select(target, 1, mask.masked_indices);
    Tensor diff = sub(pred_masked, target_masked);
    return mean_all(mul(diff, diff));
}

}  // namespace vitkd
