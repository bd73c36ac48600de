#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "vitkd/rng.hpp"
#include "vitkd/tensor.hpp"

namespace vitkd {

struct ViTConfig {
    int64_t depth = 12;
    int64_t hidden_dim = 192;
    int64_t heads = 3;
    int64_t patch_size = 16;
    int64_t image_size = 224;
    int64_t num_classes = 1000;
    int64_t channels = 3;
    float drop_path_rate = 0.0f;
    // When nonzero, the last block runs this many heads instead of `heads`
    // (head dim hidden_dim / adaptive_last_block_heads, parameter count
    // unchanged) so student relations can match a teacher's head count.
    int64_t adaptive_last_block_heads = 0;
    int64_t mlp_ratio = 4;

    int64_t num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
    int64_t tokens() const { return num_patches() + 1; }
    int64_t head_dim() const { return hidden_dim / heads; }

    void validate() const;  // ConfigError on violation
    nlohmann::json to_json() const;
    static ViTConfig from_json(const nlohmann::json& j);
};

struct MaskSpec {
    float mask_ratio = 0.0f;
    uint64_t seed = 0;
    std::vector<int64_t> masked_indices;  // patch indices (class token never masked), sorted

    // Draws round(mask_ratio * num_patches) distinct indices.
    static MaskSpec make(float mask_ratio, int64_t num_patches, uint64_t seed);
};

enum class Mode { train, eval };

struct BlockTaps {
    Tensor attn_pre;       // H_i: attention branch output (after drop path)
    Tensor attn_post;      // H^_i = H_i + F_{i-1}
    Tensor ffn_pre;        // H~_i: FFN branch output (after drop path)
    Tensor ffn_post;       // F-_i = H^_i + H~_i
    Tensor block_feature;  // F_i (same tensor as ffn_post)
    Tensor q, k, v;        // [B, M_i, T, D/M_i]
};

struct TapRecord {
    Tensor patch_embed;             // F_0: [B, T, D] (tokens + class token + positions)
    std::vector<BlockTaps> blocks;  // one per block, in order
    Tensor class_token;             // [B, D], row 0 of F_L before the final norm
};

struct ForwardResult {
    Tensor logits;  // [B, num_classes]
    Tensor pooled;  // [B, D], final-norm class token
    TapRecord taps;
};

struct QKV {
    Tensor q, k, v;  // [B, M, T, D/M]
};

// [B, C, H, W] -> [B, N, patch_size*patch_size*C]; rows ordered top-left to
// bottom-right, each row flattened channel-major.
Tensor patchify(const Tensor& images, const ViTConfig& cfg);

class ViTModel {
public:
    ViTModel(ViTConfig config, uint64_t seed);

    static ViTModel from_checkpoint(const std::string& manifest_path);
    // extra is merged into the manifest's config next to the "model" entry.
    void save(const std::string& manifest_path, const nlohmann::json& extra = {}) const;

    const ViTConfig& config() const { return cfg_; }
    int64_t block_heads(int64_t block) const;  // 0-based

    // Runtime regularization knob; architecture and weights are untouched.
    void set_drop_path_rate(float rate) { cfg_.drop_path_rate = rate; }

    const std::vector<std::pair<std::string, Tensor>>& named_parameters() const { return params_; }
    std::vector<Tensor> parameters() const;
    const Tensor& param(const std::string& name) const;
    int64_t param_count() const;
    int64_t block_param_count(int64_t block) const;

    // images [B, C, H, W]. Train mode needs drop_rng when drop_path_rate > 0.
    ForwardResult forward(const Tensor& images, Mode mode, const MaskSpec* mask = nullptr,
                          Rng* drop_rng = nullptr) const;

    // Exposed for tests: per-head projections of one block. skip_ln bypasses
    // the pre-attention norm so identity weights pass inputs through.
    QKV qkv_project(const Tensor& f_prev, int64_t block, bool skip_ln = false) const;

    // [B, D] -> [B, num_classes]
    Tensor classification_head(const Tensor& pooled) const;

private:
    ViTModel(ViTConfig config) : cfg_(std::move(config)) {}  // params added by caller

    Tensor embed_tokens(const Tensor& images, const MaskSpec* mask) const;
    Tensor block_forward(const Tensor& f_prev, int64_t block, Mode mode, Rng* drop_rng,
                         BlockTaps& taps) const;
    void add_param(const std::string& name, Tensor t);

    ViTConfig cfg_;
    std::vector<std::pair<std::string, Tensor>> params_;
    std::unordered_map<std::string, size_t> index_;
};

}  // namespace vitkd
