#include "vitkd/vit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vitkd/ops.hpp"
#include "vitkd/serialize.hpp"

namespace vitkd {

// ---------------------------------------------------------------------------
// ViTConfig
// ---------------------------------------------------------------------------

void ViTConfig::validate() const {
    if (depth < 1) throw ConfigError("model config: depth must be >= 1");
    if (hidden_dim < 1 || heads < 1 || hidden_dim % heads != 0)
        throw ConfigError("model config: hidden_dim " + std::to_string(hidden_dim) +
                          " must be a positive multiple of heads " + std::to_string(heads));
    if (adaptive_last_block_heads < 0 ||
        (adaptive_last_block_heads > 0 && hidden_dim % adaptive_last_block_heads != 0))
        throw ConfigError("model config: hidden_dim " + std::to_string(hidden_dim) +
                          " is not divisible by adaptive_last_block_heads " +
                          std::to_string(adaptive_last_block_heads));
    if (patch_size < 1 || image_size < 1 || image_size % patch_size != 0)
        throw ConfigError("model config: image_size " + std::to_string(image_size) +
                          " must be a positive multiple of patch_size " + std::to_string(patch_size));
    if (num_classes < 1) throw ConfigError("model config: num_classes must be >= 1");
    if (channels < 1) throw ConfigError("model config: channels must be >= 1");
    if (drop_path_rate < 0.0f || drop_path_rate >= 1.0f)
        throw ConfigError("model config: drop_path_rate must be in [0, 1)");
    if (mlp_ratio < 1) throw ConfigError("model config: mlp_ratio must be >= 1");
}

nlohmann::json ViTConfig::to_json() const {
    return {{"depth", depth},
            {"hidden_dim", hidden_dim},
            {"heads", heads},
            {"patch_size", patch_size},
            {"image_size", image_size},
            {"num_classes", num_classes},
            {"channels", channels},
            {"drop_path_rate", drop_path_rate},
            {"adaptive_last_block_heads", adaptive_last_block_heads},
            {"mlp_ratio", mlp_ratio}};
}

ViTConfig ViTConfig::from_json(const nlohmann::json& j) {
    static const char* known[] = {"depth",       "hidden_dim",     "heads",
                                  "patch_size",  "image_size",     "num_classes",
                                  "channels",    "drop_path_rate", "adaptive_last_block_heads",
                                  "mlp_ratio"};
    if (!j.is_object()) throw ConfigError("model config must be a JSON object");
    for (const auto& [key, _] : j.items())
        if (std::find_if(std::begin(known), std::end(known),
                         [&](const char* k) { return key == k; }) == std::end(known))
            throw ConfigError("model config: unknown key '" + key + "'");
    ViTConfig c;
    try {
        c.depth = j.at("depth").get<int64_t>();
        c.hidden_dim = j.at("hidden_dim").get<int64_t>();
        c.heads = j.at("heads").get<int64_t>();
        c.patch_size = j.at("patch_size").get<int64_t>();
        c.image_size = j.at("image_size").get<int64_t>();
        c.num_classes = j.at("num_classes").get<int64_t>();
        c.channels = j.value("channels", c.channels);
        c.drop_path_rate = j.value("drop_path_rate", c.drop_path_rate);
        c.adaptive_last_block_heads = j.value("adaptive_last_block_heads", c.adaptive_last_block_heads);
        c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// MaskSpec
// ---------------------------------------------------------------------------

MaskSpec MaskSpec::make(float mask_ratio, int64_t num_patches, uint64_t seed) {
    if (mask_ratio < 0.0f || mask_ratio >= 1.0f)
        throw ConfigError("mask_ratio must be in [0, 1), got " + std::to_string(mask_ratio));
    MaskSpec spec;
    spec.mask_ratio = mask_ratio;
    spec.seed = seed;
    const auto count = static_cast<int64_t>(std::lround(static_cast<double>(mask_ratio) *
                                                        static_cast<double>(num_patches)));
    std::vector<int64_t> all(static_cast<size_t>(num_patches));
    std::iota(all.begin(), all.end(), 0);
    Rng rng(seed);
    rng.shuffle(all);
    spec.masked_indices.assign(all.begin(), all.begin() + count);
    std::sort(spec.masked_indices.begin(), spec.masked_indices.end());
    return spec;
}

// ---------------------------------------------------------------------------
// patchify
// ---------------------------------------------------------------------------

Tensor patchify(const Tensor& images, const ViTConfig& cfg) {
    if (images.dim() != 4 || images.size(1) != cfg.channels || images.size(2) != cfg.image_size ||
        images.size(3) != cfg.image_size)
        throw ShapeError("patchify: expected [B," + std::to_string(cfg.channels) + "," +
                         std::to_string(cfg.image_size) + "," + std::to_string(cfg.image_size) +
                         "], got " + shape_str(images.shape()));
    const int64_t B = images.size(0), C = cfg.channels, W = cfg.image_size, p = cfg.patch_size;
    const int64_t g = W / p, N = g * g, P = p * p * C;
    std::vector<float> out(static_cast<size_t>(B * N * P));
    const float* src = images.data().data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t gy = 0; gy < g; ++gy)
            for (int64_t gx = 0; gx < g; ++gx) {
                const int64_t n = gy * g + gx;
                float* dst = out.data() + (b * N + n) * P;
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t py = 0; py < p; ++py)
                        for (int64_t px = 0; px < p; ++px)
                            dst[c * p * p + py * p + px] =
                                src[((b * C + c) * W + gy * p + py) * W + gx * p + px];
            }
    return Tensor::from_data({B, N, P}, std::move(out));
}

// ---------------------------------------------------------------------------
// ViTModel
// ---------------------------------------------------------------------------

namespace {

std::string bname(int64_t block, const char* suffix) {
    return "blocks." + std::to_string(block) + "." + suffix;
}

}  // namespace

void ViTModel::add_param(const std::string& name, Tensor t) {
    index_[name] = params_.size();
    params_.emplace_back(name, std::move(t));
}

ViTModel::ViTModel(ViTConfig config, uint64_t seed) : cfg_(std::move(config)) {
    cfg_.validate();
    Rng rng(seed);
    auto trunc = [&](Shape shape) {
        std::vector<float> v(static_cast<size_t>(shape_numel(shape)));
        for (auto& x : v) x = rng.trunc_normal(0.02f);
        return Tensor::param(std::move(shape), std::move(v));
    };
    auto fill = [](Shape shape, float c) {
        const auto n = shape_numel(shape);
        return Tensor::param(std::move(shape), std::vector<float>(static_cast<size_t>(n), c));
    };

    const int64_t D = cfg_.hidden_dim;
    const int64_t P = cfg_.patch_size * cfg_.patch_size * cfg_.channels;
    add_param("patch_embed.w", trunc({P, D}));
    add_param("patch_embed.b", fill({D}, 0.0f));
    add_param("cls_token", trunc({1, 1, D}));
    add_param("mask_token", trunc({1, 1, D}));
    add_param("pos_embed", trunc({1, cfg_.tokens(), D}));
    for (int64_t i = 0; i < cfg_.depth; ++i) {
        add_param(bname(i, "ln1.g"), fill({D}, 1.0f));
        add_param(bname(i, "ln1.b"), fill({D}, 0.0f));
        add_param(bname(i, "attn.wq"), trunc({D, D}));
        add_param(bname(i, "attn.bq"), fill({D}, 0.0f));
        add_param(bname(i, "attn.wk"), trunc({D, D}));
        add_param(bname(i, "attn.bk"), fill({D}, 0.0f));
        add_param(bname(i, "attn.wv"), trunc({D, D}));
        add_param(bname(i, "attn.bv"), fill({D}, 0.0f));
        add_param(bname(i, "attn.wo"), trunc({D, D}));
        add_param(bname(i, "attn.bo"), fill({D}, 0.0f));
        add_param(bname(i, "ln2.g"), fill({D}, 1.0f));
        add_param(bname(i, "ln2.b"), fill({D}, 0.0f));
        add_param(bname(i, "mlp.w1"), trunc({D, cfg_.mlp_ratio * D}));
        add_param(bname(i, "mlp.b1"), fill({cfg_.mlp_ratio * D}, 0.0f));
        add_param(bname(i, "mlp.w2"), trunc({cfg_.mlp_ratio * D, D}));
        add_param(bname(i, "mlp.b2"), fill({D}, 0.0f));
    }
    add_param("ln_f.g", fill({D}, 1.0f));
    add_param("ln_f.b", fill({D}, 0.0f));
    add_param("head.w", trunc({D, cfg_.num_classes}));
    add_param("head.b", fill({cfg_.num_classes}, 0.0f));
}

int64_t ViTModel::block_heads(int64_t block) const {
    if (block < 0 || block >= cfg_.depth)
        throw ContractError("block index " + std::to_string(block) + " out of range [0," +
                            std::to_string(cfg_.depth) + ")");
    if (block == cfg_.depth - 1 && cfg_.adaptive_last_block_heads > 0)
        return cfg_.adaptive_last_block_heads;
    return cfg_.heads;
}

std::vector<Tensor> ViTModel::parameters() const {
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (const auto& [_, t] : params_) out.push_back(t);
    return out;
}

const Tensor& ViTModel::param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("no parameter named '" + name + "'");
    return params_[it->second].second;
}

int64_t ViTModel::param_count() const {
    int64_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
}

int64_t ViTModel::block_param_count(int64_t block) const {
    if (block < 0 || block >= cfg_.depth)
        throw ContractError("block index " + std::to_string(block) + " out of range");
    const std::string prefix = "blocks." + std::to_string(block) + ".";
    int64_t n = 0;
    for (const auto& [name, t] : params_)
        if (name.rfind(prefix, 0) == 0) n += t.numel();
    return n;
}

Tensor ViTModel::embed_tokens(const Tensor& images, const MaskSpec* mask) const {
    const int64_t B = images.size(0);
    const int64_t D = cfg_.hidden_dim;
    const int64_t N = cfg_.num_patches();

    Tensor patches = patchify(images, cfg_);
    Tensor tok = add(matmul(patches, param("patch_embed.w")), param("patch_embed.b"));  // [B,N,D]

    if (mask && !mask->masked_indices.empty()) {
        std::vector<float> keep(static_cast<size_t>(N), 1.0f);
        for (int64_t idx : mask->masked_indices) {
            if (idx < 0 || idx >= N)
                throw ConfigError("mask index " + std::to_string(idx) + " out of range for " +
                                  std::to_string(N) + " patches");
            keep[static_cast<size_t>(idx)] = 0.0f;
        }
        std::vector<float> drop(static_cast<size_t>(N));
        for (size_t i = 0; i < keep.size(); ++i) drop[i] = 1.0f - keep[i];
        Tensor keep_col = Tensor::from_data({1, N, 1}, std::move(keep));
        Tensor drop_col = Tensor::from_data({1, N, 1}, std::move(drop));
        tok = add(mul(tok, keep_col), mul(param("mask_token"), drop_col));
    }

    Tensor cls = add(Tensor::zeros({B, 1, 1}), param("cls_token"));  // broadcast to [B,1,D]
    Tensor x = concat({cls, tok}, 1);                                // [B,T,D]
    (void)D;
    return add(x, param("pos_embed"));
}

QKV ViTModel::qkv_project(const Tensor& f_prev, int64_t block, bool skip_ln) const {
    const int64_t M = block_heads(block);
    const int64_t D = cfg_.hidden_dim;
    const int64_t hd = D / M;
    if (f_prev.dim() != 3 || f_prev.size(2) != D)
        throw ShapeError("qkv_project: expected [B,T," + std::to_string(D) + "], got " +
                         shape_str(f_prev.shape()));
    const int64_t B = f_prev.size(0), T = f_prev.size(1);

    Tensor x = skip_ln ? f_prev : layer_norm(f_prev, param(bname(block, "ln1.g")),
                                             param(bname(block, "ln1.b")));
    auto project = [&](const char* w, const char* b) {
        Tensor y = add(matmul(x, param(bname(block, w))), param(bname(block, b)));  // [B,T,D]
        return transpose(reshape(y, {B, T, M, hd}), 1, 2);                          // [B,M,T,hd]
    };
    return {project("attn.wq", "attn.bq"), project("attn.wk", "attn.bk"),
            project("attn.wv", "attn.bv")};
}

namespace {

Tensor apply_drop_path(const Tensor& branch, float rate, Mode mode, Rng* rng) {
    if (mode == Mode::eval || rate <= 0.0f) return branch;
    if (!rng)
        throw ContractError("drop path rate " + std::to_string(rate) +
                            " active in train mode but no rng was provided");
    const int64_t B = branch.size(0);
    std::vector<float> m(static_cast<size_t>(B));
    const float inv_keep = 1.0f / (1.0f - rate);
    for (auto& v : m) v = rng->bernoulli(rate) ? 0.0f : inv_keep;
    return mul(branch, Tensor::from_data({B, 1, 1}, std::move(m)));
}

}  // namespace

Tensor ViTModel::block_forward(const Tensor& f_prev, int64_t block, Mode mode, Rng* drop_rng,
                               BlockTaps& taps) const {
    const int64_t B = f_prev.size(0), T = f_prev.size(1), D = cfg_.hidden_dim;
    const int64_t M = block_heads(block);
    const int64_t hd = D / M;
    // Stochastic depth deepens linearly: first block never drops, last block
    // drops at the configured rate.
    const float rate = cfg_.depth > 1 ? cfg_.drop_path_rate * static_cast<float>(block) /
                                            static_cast<float>(cfg_.depth - 1)
                                      : 0.0f;

    QKV qkv = qkv_project(f_prev, block);
    Tensor scores = scale(matmul(qkv.q, transpose(qkv.k, -1, -2)),
                          1.0f / std::sqrt(static_cast<float>(hd)));  // [B,M,T,T]
    Tensor att = softmax(scores, -1);
    Tensor ctx = matmul(att, qkv.v);                         // [B,M,T,hd]
    Tensor merged = reshape(transpose(ctx, 1, 2), {B, T, D});
    Tensor h = add(matmul(merged, param(bname(block, "attn.wo"))), param(bname(block, "attn.bo")));
    h = apply_drop_path(h, rate, mode, drop_rng);

    Tensor hhat = add(h, f_prev);
    Tensor x2 = layer_norm(hhat, param(bname(block, "ln2.g")), param(bname(block, "ln2.b")));
    Tensor hidden = gelu(add(matmul(x2, param(bname(block, "mlp.w1"))), param(bname(block, "mlp.b1"))));
    Tensor ht = add(matmul(hidden, param(bname(block, "mlp.w2"))), param(bname(block, "mlp.b2")));
    ht = apply_drop_path(ht, rate, mode, drop_rng);
    Tensor f = add(hhat, ht);

    taps.attn_pre = h;
    taps.attn_post = hhat;
    taps.ffn_pre = ht;
    taps.ffn_post = f;
    taps.block_feature = f;
    taps.q = qkv.q;
    taps.k = qkv.k;
    taps.v = qkv.v;
    return f;
}

ForwardResult ViTModel::forward(const Tensor& images, Mode mode, const MaskSpec* mask,
                                Rng* drop_rng) const {
    const int64_t B = images.size(0);
    const int64_t D = cfg_.hidden_dim;

    ForwardResult res;
    Tensor x = embed_tokens(images, mask);
    res.taps.patch_embed = x;
    res.taps.blocks.resize(static_cast<size_t>(cfg_.depth));
    for (int64_t i = 0; i < cfg_.depth; ++i) {
        x = block_forward(x, i, mode, drop_rng, res.taps.blocks[static_cast<size_t>(i)]);
        if (!x.all_finite())
            throw NumericError("non-finite activation in block " + std::to_string(i + 1) + " of " +
                               std::to_string(cfg_.depth));
    }
    res.taps.class_token = reshape(slice(x, 1, 0, 1), {B, D});
    Tensor normed = layer_norm(x, param("ln_f.g"), param("ln_f.b"));
    res.pooled = reshape(slice(normed, 1, 0, 1), {B, D});
    res.logits = classification_head(res.pooled);
    return res;
}

Tensor ViTModel::classification_head(const Tensor& pooled) const {
    if (pooled.dim() != 2 || pooled.size(1) != cfg_.hidden_dim)
        throw ShapeError("classification_head: expected [B," + std::to_string(cfg_.hidden_dim) +
                         "], got " + shape_str(pooled.shape()));
    return add(matmul(pooled, param("head.w")), param("head.b"));
}

void ViTModel::save(const std::string& manifest_path, const nlohmann::json& extra) const {
    nlohmann::json config = extra.is_object() ? extra : nlohmann::json::object();
    config["model"] = cfg_.to_json();
    save_checkpoint(manifest_path, params_, config);
}

ViTModel ViTModel::from_checkpoint(const std::string& manifest_path) {
    Checkpoint ck = load_checkpoint(manifest_path);
    if (!ck.config.contains("model"))
        throw ConfigError("checkpoint " + manifest_path + " has no model config");
    ViTModel m(ViTConfig::from_json(ck.config.at("model")), /*seed=*/0);
    if (ck.tensors.size() != m.params_.size())
        throw ConfigError("checkpoint " + manifest_path + " holds " +
                          std::to_string(ck.tensors.size()) + " tensors, model needs " +
                          std::to_string(m.params_.size()));
    for (auto& [name, t] : m.params_) {
        const Tensor& src = ck.at(name);
        if (src.shape() != t.shape())
            throw ConfigError("checkpoint tensor '" + name + "' has shape " + shape_str(src.shape()) +
                              ", model expects " + shape_str(t.shape()));
        t.data() = src.data();
    }
    return m;
}

}  // namespace vitkd
