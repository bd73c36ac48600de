#include "vitkd/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include "vitkd/metrics.hpp"
#include "vitkd/ops.hpp"
#include "vitkd/optim.hpp"
#include "vitkd/schedule.hpp"
#include "vitkd/serialize.hpp"

namespace vitkd {

namespace fs = std::filesystem;
using nlohmann::json;

// --------------------------------------------------------------------------
// Plan / chain documents

json InputMode::to_json() const {
    if (!masked) return json{{"kind", "raw"}};
    return json{{"kind", "masked"}, {"mask_ratio", mask_ratio}};
}

InputMode InputMode::from_json(const json& j) {
    InputMode m;
    if (j.is_string()) {
        const std::string s = j.get<std::string>();
        if (s == "raw") return m;
        if (s == "masked") {
            m.masked = true;
            return m;
        }
        throw ConfigError("input_mode: unknown kind '" + s + "'");
    }
    if (!j.is_object()) throw ConfigError("input_mode: expected string or object");
    for (const auto& [key, _] : j.items()) {
        if (key != "kind" && key != "mask_ratio")
            throw ConfigError("input_mode: unknown key '" + key + "'");
    }
    const std::string kind = j.value("kind", "raw");
    if (kind == "raw") {
        if (j.contains("mask_ratio"))
            throw ConfigError("input_mode: mask_ratio is only valid with kind 'masked'");
        return m;
    }
    if (kind != "masked") throw ConfigError("input_mode: unknown kind '" + kind + "'");
    m.masked = true;
    if (j.contains("mask_ratio")) m.mask_ratio = j.at("mask_ratio").get<float>();
    return m;
}

void DistillPlan::validate(bool require_teacher) const {
    if (require_teacher && teacher_checkpoint.empty())
        throw ConfigError("plan: teacher_checkpoint is required");
    student_config.validate();
    loss_strategy.validate();
    if (target_block_index && *target_block_index < 1)
        throw ConfigError("plan: target_block_index is 1-based and must be >= 1");
    if (input_mode.masked && (input_mode.mask_ratio < 0.0f || input_mode.mask_ratio >= 1.0f))
        throw ConfigError("plan: mask_ratio must lie in [0, 1)");
    if (loss_strategy.with_reconstruction && (!input_mode.masked || input_mode.mask_ratio <= 0.0f))
        throw ConfigError("plan: with_reconstruction requires masked input with mask_ratio > 0");
    if (teacher_drop_path < 0.0f || teacher_drop_path >= 1.0f ||
        student_drop_path < 0.0f || student_drop_path >= 1.0f)
        throw ConfigError("plan: drop path rates must lie in [0, 1)");
    if (epochs < 0) throw ConfigError("plan: epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("plan: batch_size must be >= 1");
    if (warmup_epochs < 0 || (epochs > 0 && warmup_epochs >= epochs))
        throw ConfigError("plan: warmup_epochs must be >= 0 and < epochs");
    if (peak_lr && *peak_lr <= 0.0f) throw ConfigError("plan: peak_lr must be positive");
    if (weight_decay < 0.0f) throw ConfigError("plan: weight_decay must be >= 0");
}

json DistillPlan::to_json() const {
    json j;
    j["teacher_checkpoint"] = teacher_checkpoint;
    j["student_config"] = student_config.to_json();
    if (student_init_checkpoint) j["student_init_checkpoint"] = *student_init_checkpoint;
    if (target_block_index) j["target_block_index"] = *target_block_index;
    j["loss_strategy"] = loss_strategy.to_json();
    j["input_mode"] = input_mode.to_json();
    j["teacher_drop_path"] = teacher_drop_path;
    j["student_drop_path"] = student_drop_path;
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    if (peak_lr) j["peak_lr"] = *peak_lr;
    j["warmup_epochs"] = warmup_epochs;
    j["weight_decay"] = weight_decay;
    j["seed"] = seed;
    return j;
}

DistillPlan DistillPlan::from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("plan: expected a JSON object");
    static const char* known[] = {"teacher_checkpoint", "student_config", "student_init_checkpoint",
                                  "target_block_index", "loss_strategy",  "input_mode",
                                  "teacher_drop_path",  "student_drop_path", "epochs",
                                  "batch_size",         "peak_lr",        "warmup_epochs",
                                  "weight_decay",       "seed"};
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const char* k : known) ok = ok || key == k;
        if (!ok) throw ConfigError("plan: unknown key '" + key + "'");
    }
    DistillPlan p;
    try {
        p.teacher_checkpoint = j.value("teacher_checkpoint", "");
        p.student_config = ViTConfig::from_json(j.at("student_config"));
        if (j.contains("student_init_checkpoint"))
            p.student_init_checkpoint = j.at("student_init_checkpoint").get<std::string>();
        if (j.contains("target_block_index"))
            p.target_block_index = j.at("target_block_index").get<int64_t>();
        if (j.contains("loss_strategy")) p.loss_strategy = LossStrategy::from_json(j.at("loss_strategy"));
        if (j.contains("input_mode")) p.input_mode = InputMode::from_json(j.at("input_mode"));
        p.teacher_drop_path = j.value("teacher_drop_path", 0.0f);
        p.student_drop_path = j.value("student_drop_path", 0.0f);
        p.epochs = j.value("epochs", int64_t{1});
        p.batch_size = j.value("batch_size", int64_t{64});
        if (j.contains("peak_lr")) p.peak_lr = j.at("peak_lr").get<float>();
        p.warmup_epochs = j.value("warmup_epochs", int64_t{0});
        p.weight_decay = j.value("weight_decay", 0.05f);
        p.seed = j.value("seed", uint64_t{0});
    } catch (const json::exception& e) {
        throw ConfigError(std::string("plan: ") + e.what());
    }
    p.validate(false);
    return p;
}

void StageChain::validate() const {
    if (stages.empty()) throw ConfigError("chain: needs at least one stage");
    stages[0].validate(true);
    for (size_t i = 1; i < stages.size(); ++i) {
        stages[i].validate(false);
        if (!stages[i].teacher_checkpoint.empty())
            throw ConfigError("chain: stage " + std::to_string(i) +
                              " must leave teacher_checkpoint empty (the chain wires it)");
        const ViTConfig& prev = stages[i - 1].student_config;
        const ViTConfig& next = stages[i].student_config;
        if (next.depth > prev.depth || next.hidden_dim > prev.hidden_dim)
            throw ConfigError("chain: stage " + std::to_string(i) +
                              " student must be no deeper/wider than the previous stage's student");
        if (next.image_size != prev.image_size || next.patch_size != prev.patch_size ||
            next.channels != prev.channels)
            throw ConfigError("chain: stage " + std::to_string(i) +
                              " changes image geometry mid-chain");
    }
}

json StageChain::to_json() const {
    json arr = json::array();
    for (const auto& s : stages) arr.push_back(s.to_json());
    return json{{"stages", std::move(arr)}};
}

StageChain StageChain::from_json(const json& j) {
    if (!j.is_object() || !j.contains("stages") || !j.at("stages").is_array())
        throw ConfigError("chain: expected an object with a 'stages' array");
    for (const auto& [key, _] : j.items())
        if (key != "stages") throw ConfigError("chain: unknown key '" + key + "'");
    StageChain c;
    for (const auto& s : j.at("stages")) c.stages.push_back(DistillPlan::from_json(s));
    c.validate();
    return c;
}

int64_t select_target_block(int64_t teacher_depth, std::optional<int64_t> override_index) {
    if (teacher_depth < 1) throw ConfigError("select_target_block: depth must be >= 1");
    if (override_index) {
        if (*override_index < 1 || *override_index > teacher_depth)
            throw ConfigError("target_block_index " + std::to_string(*override_index) +
                              " outside [1, " + std::to_string(teacher_depth) + "]");
        return *override_index;
    }
    return std::lround(0.75 * static_cast<double>(teacher_depth));
}

uint64_t config_hash(const json& j) { return fnv1a64(j.dump()); }
std::string config_hash_hex(const json& j) { return hex64(config_hash(j)); }

// --------------------------------------------------------------------------
// train_stage

namespace {

Tensor pick_feature(const BlockTaps& taps, FeatureTarget t) {
    switch (t) {
        case FeatureTarget::output: return taps.block_feature;
        case FeatureTarget::ffn_pre: return taps.ffn_pre;
        case FeatureTarget::ffn_post: return taps.ffn_post;
        case FeatureTarget::attn_pre: return taps.attn_pre;
        case FeatureTarget::attn_post: return taps.attn_post;
        case FeatureTarget::qkv: break;
    }
    throw ContractError("qkv feature target is handled per stream");
}

Tensor merge_heads(const Tensor& x) {  // [B, M, T, hd] -> [B, T, M*hd]
    const Shape& s = x.shape();
    return reshape(transpose(x, 1, 2), {s[0], s[2], s[1] * s[3]});
}

// Per-sample cache of one teacher stream; filled during the first epoch and
// reused afterwards (the teacher is frozen, so its taps never change).
struct StreamCache {
    std::vector<std::vector<float>> rows;
    Shape sample_shape;

    void store(const Tensor& batch, const std::vector<int64_t>& idx) {
        const Shape& s = batch.shape();
        if (sample_shape.empty()) sample_shape.assign(s.begin() + 1, s.end());
        const int64_t per = batch.numel() / s[0];
        for (size_t b = 0; b < idx.size(); ++b) {
            auto& row = rows[static_cast<size_t>(idx[b])];
            row.assign(batch.data().begin() + static_cast<int64_t>(b) * per,
                       batch.data().begin() + static_cast<int64_t>(b + 1) * per);
        }
    }

    bool have(const std::vector<int64_t>& idx) const {
        for (int64_t i : idx)
            if (rows[static_cast<size_t>(i)].empty()) return false;
        return true;
    }

    Tensor gather(const std::vector<int64_t>& idx) const {
        Shape shp{static_cast<int64_t>(idx.size())};
        shp.insert(shp.end(), sample_shape.begin(), sample_shape.end());
        const size_t per = rows[static_cast<size_t>(idx[0])].size();
        std::vector<float> out(idx.size() * per);
        for (size_t b = 0; b < idx.size(); ++b)
            std::memcpy(out.data() + b * per, rows[static_cast<size_t>(idx[b])].data(),
                        per * sizeof(float));
        return Tensor::from_data(std::move(shp), std::move(out));
    }
};

struct TeacherTargets {
    Tensor q, k, v;     // [B, M, T, hd]
    Tensor feature;     // [B, T, D_t]
    Tensor class_tok;   // [B, D_t]
};

}  // namespace

StageResult train_stage(const DistillPlan& plan, const Dataset& dataset,
                        const std::string& out_dir) {
    plan.validate(true);
    fs::create_directories(out_dir);

    ViTModel teacher = ViTModel::from_checkpoint(plan.teacher_checkpoint);
    const ViTConfig tcfg = teacher.config();
    ViTConfig scfg = plan.student_config;
    scfg.drop_path_rate = plan.student_drop_path;
    scfg.validate();

    if (tcfg.depth < scfg.depth)
        throw ConfigError("teacher depth " + std::to_string(tcfg.depth) +
                          " is shallower than student depth " + std::to_string(scfg.depth));
    if (tcfg.hidden_dim < scfg.hidden_dim)
        throw ConfigError("teacher hidden_dim " + std::to_string(tcfg.hidden_dim) +
                          " is narrower than student hidden_dim " + std::to_string(scfg.hidden_dim));
    if (tcfg.image_size != scfg.image_size || tcfg.patch_size != scfg.patch_size ||
        tcfg.channels != scfg.channels)
        throw ConfigError("teacher and student must agree on image_size/patch_size/channels");
    if (scfg.image_size != dataset.spec.image_size || scfg.channels != dataset.channels)
        throw ConfigError("plan image geometry does not match the dataset");
    if (dataset.size() < plan.batch_size)
        throw ConfigError("batch_size " + std::to_string(plan.batch_size) +
                          " exceeds dataset size " + std::to_string(dataset.size()));

    const int64_t tb = select_target_block(tcfg.depth, plan.target_block_index);
    teacher.set_drop_path_rate(plan.teacher_drop_path);
    const bool teacher_stochastic = plan.teacher_drop_path > 0.0f;

    const LossStrategy& st = plan.loss_strategy;
    const bool feature_qkv = st.kind == LossKind::feature && st.feature_target == FeatureTarget::qkv;
    const bool need_qkv = st.kind == LossKind::relation || feature_qkv;
    const bool need_feature = st.kind == LossKind::feature && !feature_qkv;
    const bool need_class = st.kind == LossKind::class_token;

    if (st.kind == LossKind::relation) {
        const int64_t sh = teacher.block_heads(tb - 1);
        const int64_t sm =
            scfg.adaptive_last_block_heads > 0 ? scfg.adaptive_last_block_heads : scfg.heads;
        if (sm != sh)
            throw ConfigError("relation distillation: student last block runs " +
                              std::to_string(sm) + " heads, teacher target block runs " +
                              std::to_string(sh) +
                              "; set student_config.adaptive_last_block_heads to match");
    }

    ViTModel student = [&]() {
        if (plan.student_init_checkpoint) {
            ViTModel m = ViTModel::from_checkpoint(*plan.student_init_checkpoint);
            ViTConfig got = m.config();
            got.drop_path_rate = scfg.drop_path_rate;
            if (got.to_json() != scfg.to_json())
                throw ConfigError("student_init_checkpoint architecture does not match student_config");
            m.set_drop_path_rate(scfg.drop_path_rate);
            return m;
        }
        return ViTModel(scfg, Rng(plan.seed).derive(0x57D0u).seed());
    }();

    // Distillation-time scaffolding; trained jointly, never saved.
    std::vector<Tensor> scaffold;
    std::optional<ProjectionHead> feat_head, q_head, k_head, v_head, class_head, decoder;
    const auto head_seed = [&](uint64_t tag) { return Rng(plan.seed).derive(tag).seed(); };
    if (need_feature) feat_head.emplace(scfg.hidden_dim, tcfg.hidden_dim, head_seed(0xF001u));
    if (feature_qkv) {
        q_head.emplace(scfg.hidden_dim, tcfg.hidden_dim, head_seed(0xF002u));
        k_head.emplace(scfg.hidden_dim, tcfg.hidden_dim, head_seed(0xF003u));
        v_head.emplace(scfg.hidden_dim, tcfg.hidden_dim, head_seed(0xF004u));
    }
    if (need_class) class_head.emplace(scfg.hidden_dim, tcfg.hidden_dim, head_seed(0xF005u));
    if (st.with_reconstruction)
        decoder.emplace(scfg.hidden_dim, scfg.patch_size * scfg.patch_size * scfg.channels,
                        head_seed(0xF006u));
    for (const auto* h : {&feat_head, &q_head, &k_head, &v_head, &class_head, &decoder})
        if (*h)
            for (const Tensor& t : (*h)->parameters()) scaffold.push_back(t);

    std::vector<Tensor> train_params = student.parameters();
    train_params.insert(train_params.end(), scaffold.begin(), scaffold.end());
    AdamWConfig ocfg;
    ocfg.weight_decay = plan.weight_decay;
    AdamW opt(train_params, ocfg);

    const int64_t n = dataset.size();
    const int64_t steps_per_epoch = n / plan.batch_size;
    const int64_t total_steps = plan.epochs * steps_per_epoch;
    const int64_t warmup_steps = plan.warmup_epochs * steps_per_epoch;
    const float peak = plan.resolved_peak_lr();

    std::vector<std::string> columns{"step", "lr", "loss_total"};
    std::vector<std::string> comp_names;
    if (st.kind == LossKind::relation) comp_names.push_back("loss_relation");
    if (st.kind == LossKind::feature) comp_names.push_back("loss_feature");
    if (st.kind == LossKind::class_token) comp_names.push_back("loss_class_token");
    if (st.with_reconstruction) comp_names.push_back("loss_reconstruction");
    columns.insert(columns.end(), comp_names.begin(), comp_names.end());
    columns.push_back("wall_ms");
    const std::string metrics_path = (fs::path(out_dir) / "metrics.csv").string();
    MetricsWriter metrics(metrics_path, columns);

    Rng drop_rng = Rng(plan.seed).derive(0xD809u);
    Rng teacher_drop_rng = Rng(plan.seed).derive(0x7EACu);
    Rng mask_rng = Rng(plan.seed).derive(0x3A5Cu);

    // The teacher always sees the raw image; with drop path 0 its taps are a
    // pure function of the sample, so they are cached after the first pass.
    const bool cacheable = !teacher_stochastic;
    StreamCache cache_q, cache_k, cache_v, cache_feat, cache_cls;
    for (auto* c : {&cache_q, &cache_k, &cache_v, &cache_feat, &cache_cls})
        c->rows.resize(static_cast<size_t>(n));

    auto teacher_targets = [&](const std::vector<int64_t>& idx,
                               const Tensor& images) -> TeacherTargets {
        TeacherTargets out;
        const bool cached = cacheable && (!need_qkv || cache_q.have(idx)) &&
                            (!need_feature || cache_feat.have(idx)) &&
                            (!need_class || cache_cls.have(idx));
        if (cached) {
            if (need_qkv) {
                out.q = cache_q.gather(idx);
                out.k = cache_k.gather(idx);
                out.v = cache_v.gather(idx);
            }
            if (need_feature) out.feature = cache_feat.gather(idx);
            if (need_class) out.class_tok = cache_cls.gather(idx);
            return out;
        }
        NoGradGuard ng;
        ForwardResult tf = teacher.forward(images, teacher_stochastic ? Mode::train : Mode::eval,
                                           nullptr, teacher_stochastic ? &teacher_drop_rng : nullptr);
        const BlockTaps& taps = tf.taps.blocks[static_cast<size_t>(tb - 1)];
        if (need_qkv) {
            out.q = taps.q;
            out.k = taps.k;
            out.v = taps.v;
            if (cacheable) {
                cache_q.store(out.q, idx);
                cache_k.store(out.k, idx);
                cache_v.store(out.v, idx);
            }
        }
        if (need_feature) {
            out.feature = pick_feature(taps, st.feature_target);
            if (cacheable) cache_feat.store(out.feature, idx);
        }
        if (need_class) {
            out.class_tok = tf.taps.class_token;
            if (cacheable) cache_cls.store(out.class_tok, idx);
        }
        return out;
    };

    int64_t step = 0;
    double final_loss = 0.0;
    for (int64_t epoch = 0; epoch < plan.epochs; ++epoch) {
        std::vector<int64_t> perm(static_cast<size_t>(n));
        std::iota(perm.begin(), perm.end(), int64_t{0});
        Rng order_rng = Rng(plan.seed).derive(0xE9000u + static_cast<uint64_t>(epoch));
        order_rng.shuffle(perm);
        for (int64_t s = 0; s < steps_per_epoch; ++s) {
            const auto t0 = std::chrono::steady_clock::now();
            const std::vector<int64_t> idx(perm.begin() + s * plan.batch_size,
                                           perm.begin() + (s + 1) * plan.batch_size);
            const Tensor images = dataset.batch(idx);
            const TeacherTargets tt = teacher_targets(idx, images);

            MaskSpec mask;
            const MaskSpec* mask_ptr = nullptr;
            if (plan.input_mode.masked) {
                mask = MaskSpec::make(plan.input_mode.mask_ratio, scfg.num_patches(),
                                      mask_rng.next_u64());
                mask_ptr = &mask;
            }
            ForwardResult fwd =
                student.forward(images, Mode::train, mask_ptr,
                                scfg.drop_path_rate > 0.0f ? &drop_rng : nullptr);
            const BlockTaps& sb = fwd.taps.blocks[static_cast<size_t>(scfg.depth - 1)];

            std::vector<std::pair<std::string, Tensor>> comps;
            if (st.kind == LossKind::relation) {
                RelationSet rs = compute_relations(sb.q, sb.k, sb.v, st.relation_softmax);
                RelationSet rt = [&]() {
                    NoGradGuard ng;
                    return compute_relations(tt.q, tt.k, tt.v, st.relation_softmax);
                }();
                comps.emplace_back("loss_relation", relation_loss(rs, rt, st.relation_pairs));
            } else if (feature_qkv) {
                Tensor l = feature_loss(merge_heads(sb.q), merge_heads(tt.q), *q_head);
                l = add(l, feature_loss(merge_heads(sb.k), merge_heads(tt.k), *k_head));
                l = add(l, feature_loss(merge_heads(sb.v), merge_heads(tt.v), *v_head));
                comps.emplace_back("loss_feature", l);
            } else if (st.kind == LossKind::feature) {
                comps.emplace_back("loss_feature",
                                   feature_loss(pick_feature(sb, st.feature_target), tt.feature,
                                                *feat_head));
            } else {
                comps.emplace_back("loss_class_token",
                                   class_token_loss(class_head->apply(fwd.taps.class_token),
                                                    tt.class_tok, st.class_token_temperature));
            }
            if (st.with_reconstruction) {
                const Tensor patch_tokens =
                    slice(sb.block_feature, 1, 1, scfg.num_patches());  // class token excluded
                comps.emplace_back("loss_reconstruction",
                                   reconstruction_loss(decoder->apply(patch_tokens), images, mask,
                                                       scfg));
            }
            Tensor total = comps[0].second;
            for (size_t c = 1; c < comps.size(); ++c) total = add(total, comps[c].second);
            if (!total.all_finite())
                throw NumericError("non-finite distillation loss at step " + std::to_string(step));

            const float lr = lr_at_step(step, total_steps, warmup_steps, peak, kMinLr);
            opt.set_lr(lr);
            final_loss = static_cast<double>(total.item());
            std::vector<double> row{static_cast<double>(step), static_cast<double>(lr), final_loss};
            for (const auto& [cname, cval] : comps) {
                (void)cname;
                row.push_back(static_cast<double>(cval.item()));
            }
            opt.zero_grad();
            backward(total);
            opt.step();

            const auto t1 = std::chrono::steady_clock::now();
            row.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
            metrics.append(row);
            ++step;
        }
    }

    const std::string ckpt_path = (fs::path(out_dir) / "checkpoint.json").string();
    json extra;
    extra["plan"] = plan.to_json();
    extra["stage"] = json{{"steps", step}, {"target_block", tb}};
    student.save(ckpt_path, extra);

    StageResult res;
    res.checkpoint_path = ckpt_path;
    res.metrics_path = metrics_path;
    res.weights_hash = checkpoint_blob_hash(ckpt_path);
    res.teacher_weights_hash = checkpoint_blob_hash(plan.teacher_checkpoint);
    res.steps = step;
    res.final_loss = final_loss;

    json summary;
    summary["plan"] = plan.to_json();
    summary["plan_hash"] = config_hash_hex(plan.to_json());
    summary["checkpoint"] = "checkpoint.json";
    summary["metrics"] = "metrics.csv";
    summary["steps"] = step;
    summary["final_loss"] = final_loss;
    summary["target_block"] = tb;
    summary["weights_hash"] = hex64(res.weights_hash);
    summary["teacher_weights_hash"] = hex64(res.teacher_weights_hash);
    std::ofstream out(fs::path(out_dir) / "stage_summary.json", std::ios::trunc);
    if (!out) throw ConfigError("cannot write stage summary in " + out_dir);
    out << summary.dump(2) << "\n";
    return res;
}

// --------------------------------------------------------------------------
// run_sequential

ChainResult run_sequential(const StageChain& chain, const Dataset& dataset,
                           const std::string& out_dir) {
    chain.validate();
    fs::create_directories(out_dir);
    ChainResult res;
    json stage_rows = json::array();
    auto write_summary = [&](bool complete) {
        json summary;
        summary["chain"] = chain.to_json();
        summary["stages"] = stage_rows;
        summary["complete"] = complete;
        std::ofstream out(fs::path(out_dir) / "chain_summary.json", std::ios::trunc);
        out << summary.dump(2) << "\n";
    };
    for (size_t i = 0; i < chain.stages.size(); ++i) {
        DistillPlan plan = chain.stages[i];
        if (i > 0) plan.teacher_checkpoint = res.stages.back().checkpoint_path;
        const std::string stage_dir = (fs::path(out_dir) / ("stage_" + std::to_string(i))).string();
        try {
            res.stages.push_back(train_stage(plan, dataset, stage_dir));
        } catch (const ConfigError& e) {
            write_summary(false);
            throw ConfigError("stage " + std::to_string(i) + ": " + e.what());
        } catch (const NumericError& e) {
            write_summary(false);
            throw NumericError("stage " + std::to_string(i) + ": " + e.what());
        } catch (const std::exception&) {
            write_summary(false);
            throw;
        }
        const StageResult& r = res.stages.back();
        stage_rows.push_back(json{{"dir", "stage_" + std::to_string(i)},
                                  {"weights_hash", hex64(r.weights_hash)},
                                  {"teacher_weights_hash", hex64(r.teacher_weights_hash)},
                                  {"steps", r.steps},
                                  {"final_loss", r.final_loss}});
    }
    res.final_checkpoint = res.stages.back().checkpoint_path;
    write_summary(true);
    return res;
}

// --------------------------------------------------------------------------
// evaluate

std::string eval_mode_name(EvalMode m) {
    return m == EvalMode::linear_probe ? "linear_probe" : "fine_tune";
}

EvalMode eval_mode_from_name(const std::string& name) {
    if (name == "linear_probe") return EvalMode::linear_probe;
    if (name == "fine_tune") return EvalMode::fine_tune;
    throw ConfigError("unknown eval mode '" + name + "' (expected linear_probe or fine_tune)");
}

void EvalOptions::validate() const {
    if (epochs < 0) throw ConfigError("eval: epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("eval: batch_size must be >= 1");
    if (warmup_epochs < 0 || (epochs > 0 && warmup_epochs >= epochs))
        throw ConfigError("eval: warmup_epochs must be >= 0 and < epochs");
    if (peak_lr && *peak_lr <= 0.0f) throw ConfigError("eval: peak_lr must be positive");
    if (weight_decay < 0.0f) throw ConfigError("eval: weight_decay must be >= 0");
    if (layer_decay <= 0.0f || layer_decay > 1.0f)
        throw ConfigError("eval: layer_decay must lie in (0, 1]");
    if (drop_path < 0.0f || drop_path >= 1.0f) throw ConfigError("eval: drop_path must lie in [0, 1)");
    if (holdout_fraction <= 0.0f || holdout_fraction >= 1.0f)
        throw ConfigError("eval: holdout_fraction must lie in (0, 1)");
}

json EvalOptions::to_json() const {
    json j;
    j["mode"] = eval_mode_name(mode);
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    if (peak_lr) j["peak_lr"] = *peak_lr;
    j["warmup_epochs"] = warmup_epochs;
    j["weight_decay"] = weight_decay;
    j["layer_decay"] = layer_decay;
    j["drop_path"] = drop_path;
    j["holdout_fraction"] = holdout_fraction;
    j["seed"] = seed;
    return j;
}

EvalOptions EvalOptions::from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("eval: expected a JSON object");
    static const char* known[] = {"mode",         "epochs",      "batch_size",
                                  "peak_lr",      "warmup_epochs", "weight_decay",
                                  "layer_decay",  "drop_path",   "holdout_fraction",
                                  "seed"};
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const char* k : known) ok = ok || key == k;
        if (!ok) throw ConfigError("eval: unknown key '" + key + "'");
    }
    EvalOptions o;
    try {
        if (j.contains("mode")) o.mode = eval_mode_from_name(j.at("mode").get<std::string>());
        o.epochs = j.value("epochs", o.epochs);
        o.batch_size = j.value("batch_size", o.batch_size);
        if (j.contains("peak_lr")) o.peak_lr = j.at("peak_lr").get<float>();
        o.warmup_epochs = j.value("warmup_epochs", o.warmup_epochs);
        o.weight_decay = j.value("weight_decay", o.weight_decay);
        o.layer_decay = j.value("layer_decay", o.layer_decay);
        o.drop_path = j.value("drop_path", o.drop_path);
        o.holdout_fraction = j.value("holdout_fraction", o.holdout_fraction);
        o.seed = j.value("seed", o.seed);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("eval: ") + e.what());
    }
    o.validate();
    return o;
}

namespace {

// Layer-wise lr-decay group of one parameter: embeddings 0, block i -> i+1,
// final norm and head -> depth+1.
int64_t layer_group(const std::string& name, int64_t depth) {
    if (name.rfind("blocks.", 0) == 0) {
        const size_t dot = name.find('.', 7);
        return std::stoll(name.substr(7, dot - 7)) + 1;
    }
    if (name.rfind("ln_f.", 0) == 0 || name.rfind("head.", 0) == 0) return depth + 1;
    return 0;
}

}  // namespace

EvalResult evaluate(ViTModel& model, const Dataset& dataset, const EvalOptions& opt,
                    const std::string& metrics_path) {
    opt.validate();
    const ViTConfig& cfg = model.config();
    if (cfg.num_classes != dataset.spec.num_classes)
        throw ConfigError("model has " + std::to_string(cfg.num_classes) + " classes, dataset has " +
                          std::to_string(dataset.spec.num_classes));
    if (cfg.image_size != dataset.spec.image_size || cfg.channels != dataset.channels)
        throw ConfigError("model image geometry does not match the dataset");

    const int64_t n = dataset.size();
    std::vector<int64_t> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), int64_t{0});
    Rng(opt.seed).derive(0x5917u).shuffle(idx);
    const int64_t n_eval =
        std::max<int64_t>(1, std::llround(static_cast<double>(n) * opt.holdout_fraction));
    const std::vector<int64_t> eval_idx(idx.begin(), idx.begin() + n_eval);
    std::vector<int64_t> train_idx(idx.begin() + n_eval, idx.end());
    if (opt.epochs > 0 && static_cast<int64_t>(train_idx.size()) < opt.batch_size)
        throw ConfigError("eval: training split smaller than batch_size");

    const bool probe = opt.mode == EvalMode::linear_probe;
    model.set_drop_path_rate(probe ? 0.0f : opt.drop_path);

    // Optimizer groups. Linear probe trains the head only; fine-tune scales
    // each layer's lr by layer_decay^(distance from the head).
    AdamWConfig ocfg;
    ocfg.weight_decay = opt.weight_decay;
    std::vector<AdamW> groups;
    std::vector<float> mults;
    if (probe) {
        groups.emplace_back(std::vector<Tensor>{model.param("head.w"), model.param("head.b")}, ocfg);
        mults.push_back(1.0f);
    } else {
        std::vector<std::vector<Tensor>> by_group(static_cast<size_t>(cfg.depth + 2));
        for (const auto& [name, t] : model.named_parameters())
            by_group[static_cast<size_t>(layer_group(name, cfg.depth))].push_back(t);
        for (size_t g = 0; g < by_group.size(); ++g) {
            if (by_group[g].empty()) continue;
            groups.emplace_back(std::move(by_group[g]), ocfg);
            mults.push_back(std::pow(opt.layer_decay,
                                     static_cast<float>(cfg.depth + 1 - static_cast<int64_t>(g))));
        }
    }

    // Frozen backbone: pooled features are computed once and reused.
    std::vector<float> probe_feats;
    std::unordered_map<int64_t, size_t> probe_slot;
    if (probe && opt.epochs > 0) {
        NoGradGuard ng;
        probe_feats.resize(train_idx.size() * static_cast<size_t>(cfg.hidden_dim));
        for (size_t i = 0; i < train_idx.size(); ++i) probe_slot[train_idx[i]] = i;
        for (size_t at = 0; at < train_idx.size(); at += 64) {
            const size_t take = std::min<size_t>(64, train_idx.size() - at);
            const std::vector<int64_t> chunk(train_idx.begin() + static_cast<int64_t>(at),
                                             train_idx.begin() + static_cast<int64_t>(at + take));
            ForwardResult f = model.forward(dataset.batch(chunk), Mode::eval);
            std::memcpy(probe_feats.data() + at * static_cast<size_t>(cfg.hidden_dim),
                        f.pooled.data().data(), f.pooled.data().size() * sizeof(float));
        }
    }

    const int64_t steps_per_epoch =
        opt.epochs > 0 ? static_cast<int64_t>(train_idx.size()) / opt.batch_size : 0;
    const int64_t total_steps = opt.epochs * steps_per_epoch;
    const int64_t warmup_steps = opt.warmup_epochs * steps_per_epoch;
    const float peak = opt.resolved_peak_lr();

    std::optional<MetricsWriter> metrics;
    if (!metrics_path.empty())
        metrics.emplace(metrics_path,
                        std::vector<std::string>{"step", "lr", "loss_total", "wall_ms"});

    Rng drop_rng = Rng(opt.seed).derive(0xD810u);
    int64_t step = 0;
    double final_loss = 0.0;
    for (int64_t epoch = 0; epoch < opt.epochs; ++epoch) {
        Rng order_rng = Rng(opt.seed).derive(0xE301000u + static_cast<uint64_t>(epoch));
        order_rng.shuffle(train_idx);
        for (int64_t s = 0; s < steps_per_epoch; ++s) {
            const auto t0 = std::chrono::steady_clock::now();
            const std::vector<int64_t> bidx(train_idx.begin() + s * opt.batch_size,
                                            train_idx.begin() + (s + 1) * opt.batch_size);
            Tensor logits;
            if (probe) {
                std::vector<float> buf(static_cast<size_t>(opt.batch_size) *
                                       static_cast<size_t>(cfg.hidden_dim));
                for (size_t b = 0; b < bidx.size(); ++b) {
                    const size_t pos = probe_slot.at(bidx[b]);
                    std::memcpy(buf.data() + b * static_cast<size_t>(cfg.hidden_dim),
                                probe_feats.data() + pos * static_cast<size_t>(cfg.hidden_dim),
                                static_cast<size_t>(cfg.hidden_dim) * sizeof(float));
                }
                logits = model.classification_head(
                    Tensor::from_data({opt.batch_size, cfg.hidden_dim}, std::move(buf)));
            } else {
                logits = model
                             .forward(dataset.batch(bidx), Mode::train, nullptr,
                                      cfg.drop_path_rate > 0.0f || opt.drop_path > 0.0f ? &drop_rng
                                                                                        : nullptr)
                             .logits;
            }
            const Tensor targets = one_hot(dataset.batch_labels(bidx), cfg.num_classes);
            const Tensor loss = kl_loss(softmax(logits, -1), targets);
            if (!loss.all_finite())
                throw NumericError("non-finite evaluation loss at step " + std::to_string(step));

            const float lr = lr_at_step(step, total_steps, warmup_steps, peak, kMinLr);
            for (size_t g = 0; g < groups.size(); ++g) {
                groups[g].set_lr(lr * mults[g]);
                groups[g].zero_grad();
            }
            final_loss = static_cast<double>(loss.item());
            backward(loss);
            for (auto& g : groups) g.step();

            if (metrics) {
                const auto t1 = std::chrono::steady_clock::now();
                metrics->append({static_cast<double>(step), static_cast<double>(lr), final_loss,
                                 std::chrono::duration<double, std::milli>(t1 - t0).count()});
            }
            ++step;
        }
    }

    model.set_drop_path_rate(0.0f);
    EvalResult res;
    res.eval_samples = n_eval;
    res.final_loss = final_loss;
    {
        NoGradGuard ng;
        for (size_t at = 0; at < eval_idx.size(); at += 64) {
            const size_t take = std::min<size_t>(64, eval_idx.size() - at);
            const std::vector<int64_t> chunk(eval_idx.begin() + static_cast<int64_t>(at),
                                             eval_idx.begin() + static_cast<int64_t>(at + take));
            ForwardResult f = model.forward(dataset.batch(chunk), Mode::eval);
            const std::vector<int64_t> labels = dataset.batch_labels(chunk);
            const auto& lg = f.logits.data();
            for (size_t b = 0; b < take; ++b) {
                int64_t best = 0;
                const float* row = lg.data() + b * static_cast<size_t>(cfg.num_classes);
                for (int64_t c = 1; c < cfg.num_classes; ++c)
                    if (row[c] > row[best]) best = c;
                if (best == labels[b]) ++res.correct;
            }
        }
    }
    res.accuracy = static_cast<double>(res.correct) / static_cast<double>(res.eval_samples);
    return res;
}

// --------------------------------------------------------------------------
// run_ablation_grid

void GridSpec::validate() const {
    if (!base_plan.is_object()) throw ConfigError("grid: base_plan must be a JSON object");
    if (axes.empty()) throw ConfigError("grid: needs at least one axis");
    for (const auto& axis : axes) {
        if (axis.name.empty()) throw ConfigError("grid: every axis needs a name");
        if (axis.values.empty())
            throw ConfigError("grid: axis '" + axis.name + "' has no values");
        if (!axis.pointer.empty()) {
            try {
                (void)json::json_pointer(axis.pointer);
            } catch (const json::exception& e) {
                throw ConfigError("grid: axis '" + axis.name + "' pointer invalid: " + e.what());
            }
        } else {
            for (const auto& v : axis.values)
                if (!v.is_object())
                    throw ConfigError("grid: axis '" + axis.name +
                                      "' uses the root pointer, so values must be objects");
        }
    }
    (void)DistillPlan::from_json(base_plan);  // surface base-plan schema errors early
}

GridSpec GridSpec::from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("grid: expected a JSON object");
    for (const auto& [key, _] : j.items())
        if (key != "base_plan" && key != "axes" && key != "eval")
            throw ConfigError("grid: unknown key '" + key + "'");
    GridSpec g;
    try {
        g.base_plan = j.at("base_plan");
        for (const auto& a : j.at("axes")) {
            GridAxis axis;
            axis.name = a.at("name").get<std::string>();
            axis.pointer = a.value("pointer", "");
            for (const auto& v : a.at("values")) axis.values.push_back(v);
            g.axes.push_back(std::move(axis));
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("grid: ") + e.what());
    }
    if (j.contains("eval")) g.eval = EvalOptions::from_json(j.at("eval"));
    g.validate();
    return g;
}

bool GridResult::partial() const {
    for (const auto& c : cells)
        if (!c.ok) return true;
    return false;
}

namespace {

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += "\"";
    return out;
}

std::string json_cell(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    return v.dump();
}

}  // namespace

GridResult run_ablation_grid(const GridSpec& spec, const Dataset& dataset,
                             const std::string& out_dir) {
    spec.validate();
    fs::create_directories(out_dir);

    std::vector<size_t> counter(spec.axes.size(), 0);
    GridResult res;
    int64_t cell_index = 0;
    for (;;) {
        GridCell cell;
        json plan_json = spec.base_plan;
        for (size_t a = 0; a < spec.axes.size(); ++a) {
            const json& value = spec.axes[a].values[counter[a]];
            cell.values.push_back(value);
            if (spec.axes[a].pointer.empty())
                plan_json.merge_patch(value);
            else
                plan_json[json::json_pointer(spec.axes[a].pointer)] = value;
        }
        char name[32];
        std::snprintf(name, sizeof(name), "cell_%03lld", static_cast<long long>(cell_index));
        const std::string cell_dir = (fs::path(out_dir) / name).string();
        cell.dir = name;
        try {
            const DistillPlan plan = DistillPlan::from_json(plan_json);
            const StageResult stage = train_stage(plan, dataset, cell_dir);
            ViTModel model = ViTModel::from_checkpoint(stage.checkpoint_path);
            const EvalResult ev =
                evaluate(model, dataset, spec.eval, (fs::path(cell_dir) / "eval.csv").string());
            cell.ok = true;
            cell.accuracy = ev.accuracy;
            cell.final_loss = stage.final_loss;
        } catch (const std::exception& e) {
            cell.ok = false;
            cell.error = e.what();
        }
        res.cells.push_back(std::move(cell));
        ++cell_index;

        size_t a = spec.axes.size();
        while (a > 0) {
            --a;
            if (++counter[a] < spec.axes[a].values.size()) break;
            counter[a] = 0;
            if (a == 0) {
                a = SIZE_MAX;
                break;
            }
        }
        if (a == SIZE_MAX) break;
    }

    // Summary artifacts: JSON for machines, CSV + aligned text for people.
    json summary;
    summary["axes"] = json::array();
    for (const auto& axis : spec.axes)
        summary["axes"].push_back(json{{"name", axis.name}, {"pointer", axis.pointer}});
    summary["eval"] = spec.eval.to_json();
    summary["cells"] = json::array();
    for (const auto& c : res.cells) {
        json row{{"dir", c.dir}, {"ok", c.ok}, {"values", c.values}};
        if (c.ok) {
            row["accuracy"] = c.accuracy;
            row["final_loss"] = c.final_loss;
        } else {
            row["error"] = c.error;
        }
        summary["cells"].push_back(std::move(row));
    }
    summary["partial"] = res.partial();
    {
        std::ofstream out(fs::path(out_dir) / "grid_summary.json", std::ios::trunc);
        if (!out) throw ConfigError("cannot write grid summary in " + out_dir);
        out << summary.dump(2) << "\n";
    }

    std::vector<std::string> cols;
    for (const auto& axis : spec.axes) cols.push_back(axis.name);
    cols.insert(cols.end(), {"accuracy", "final_loss", "status"});
    std::vector<std::vector<std::string>> rows;
    for (const auto& c : res.cells) {
        std::vector<std::string> row;
        for (const auto& v : c.values) row.push_back(json_cell(v));
        row.push_back(c.ok ? format_metric(c.accuracy) : "");
        row.push_back(c.ok ? format_metric(c.final_loss) : "");
        row.push_back(c.ok ? "ok" : "failed: " + c.error);
        rows.push_back(std::move(row));
    }
    {
        std::ofstream out(fs::path(out_dir) / "grid_results.csv", std::ios::trunc);
        if (!out) throw ConfigError("cannot write grid CSV in " + out_dir);
        for (size_t c = 0; c < cols.size(); ++c) out << (c ? "," : "") << csv_escape(cols[c]);
        out << "\n";
        for (const auto& row : rows) {
            for (size_t c = 0; c < row.size(); ++c) out << (c ? "," : "") << csv_escape(row[c]);
            out << "\n";
        }
    }
    {
        std::ofstream out(fs::path(out_dir) / "grid_table.txt", std::ios::trunc);
        if (!out) throw ConfigError("cannot write grid table in " + out_dir);
        out << format_table(cols, rows);
    }
    return res;
}

}  // namespace vitkd
