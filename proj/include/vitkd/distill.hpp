#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "vitkd/relations.hpp"
#include "vitkd/tensor.hpp"
#include "vitkd/vit.hpp"

namespace vitkd {

enum class LossKind { class_token, feature, relation };
enum class FeatureTarget { output, ffn_pre, ffn_post, attn_pre, attn_post, qkv };

std::string loss_kind_name(LossKind k);
LossKind loss_kind_from_name(const std::string& name);
std::string feature_target_name(FeatureTarget t);
FeatureTarget feature_target_from_name(const std::string& name);

struct LossStrategy {
    LossKind kind = LossKind::relation;
    FeatureTarget feature_target = FeatureTarget::output;
    std::vector<RelationPair> relation_pairs = {RelationPair::QK, RelationPair::VV};
    bool relation_softmax = true;
    bool with_reconstruction = false;
    float class_token_temperature = 1.0f;

    void validate() const;  // ConfigError on violation
    nlohmann::json to_json() const;
    static LossStrategy from_json(const nlohmann::json& j);
};

// One linear map d_in -> d_out per distilled stream. With d_in == d_out it
// starts as the identity, so an untouched student matches its teacher with
// zero loss from step 0.
struct ProjectionHead {
    Tensor w;  // [d_in, d_out]
    Tensor b;  // [d_out]

    ProjectionHead(int64_t d_in, int64_t d_out, uint64_t seed);
    Tensor apply(const Tensor& x) const;  // [.., d_in] -> [.., d_out]
    std::vector<Tensor> parameters() const { return {w, b}; }
};

// Rows of `t` (along the last axis) must be distributions: nonnegative,
// summing to 1 within 1e-4. `p` is clamped at 1e-8 before the log. Returns
// the mean over rows of sum_i t_i * log(t_i / p_i), with 0*log 0 := 0.
Tensor kl_loss(const Tensor& p, const Tensor& t);

// KL between temperature-softmaxed class tokens (teacher is the target).
Tensor class_token_loss(const Tensor& c_s, const Tensor& c_t, float temperature);

// smooth_l1(project(whiten(student)), whiten(teacher)) with affine-free layer
// norm as the whitener on both sides.
Tensor feature_loss(const Tensor& student_feature, const Tensor& teacher_feature,
                    const ProjectionHead& head);

// Sum over selected pairs of the per-head mean KL (or smooth L1 when the
// relations were built without softmax).
Tensor relation_loss(const RelationSet& student, const RelationSet& teacher,
                     const std::vector<RelationPair>& pairs);

// MSE over masked patches only; targets are per-patch pixel-normalized.
// predicted_patches: [B, N, patch_size^2 * channels].
Tensor reconstruction_loss(const Tensor& predicted_patches, const Tensor& images,
                           const MaskSpec& mask, const ViTConfig& cfg);

}  // namespace vitkd
