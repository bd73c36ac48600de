// Acceptance gate: one line per criterion, exit code = number of failures.
// Run all criteria with no arguments, or a subset: `acceptance_tests 5 9`.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vitkd/dataset.hpp"
#include "vitkd/distill.hpp"
#include "vitkd/metrics.hpp"
#include "vitkd/ops.hpp"
#include "vitkd/pipeline.hpp"
#include "vitkd/relations.hpp"
#include "vitkd/rng.hpp"
#include "vitkd/schedule.hpp"
#include "vitkd/serialize.hpp"
#include "vitkd/vit.hpp"

using namespace vitkd;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ------------------------------------------------------------------ helpers

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

fs::path work_dir(const char* tag) {
    fs::path p = fs::temp_directory_path() / (std::string("vitkd_accept_") + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    require(in.good(), "cannot open " + p.string());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

Tensor random_param(Shape shape, Rng& rng, float scl = 1.0f) {
    std::vector<float> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.normal() * scl;
    return Tensor::param(std::move(shape), std::move(v));
}

Tensor random_const(Shape shape, Rng& rng, float scl = 1.0f) {
    Tensor t = random_param(std::move(shape), rng, scl);
    t.set_requires_grad(false);
    return t;
}

// Central finite differences against reverse-mode gradients. The closure must
// rebuild the graph from the leaves on every call.
void fd_check(const std::vector<Tensor>& leaves, const std::function<Tensor()>& forward,
              const std::string& label, float step = 1e-3f, float rel_tol = 1e-2f,
              float abs_floor = 2e-3f) {
    for (const auto& l : leaves) const_cast<Tensor&>(l).zero_grad();
    Tensor loss = forward();
    backward(loss);
    std::vector<std::vector<float>> analytic;
    for (const auto& l : leaves) {
        require(l.has_grad(), label + ": missing gradient");
        analytic.push_back(l.grad());
    }
    NoGradGuard ng;
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& w = const_cast<Tensor&>(leaves[li]).data();
        for (size_t i = 0; i < w.size(); ++i) {
            const float orig = w[i];
            w[i] = orig + step;
            const float fp = forward().item();
            w[i] = orig - step;
            const float fm = forward().item();
            w[i] = orig;
            const float est = (fp - fm) / (2.0f * step);
            const float an = analytic[li][i];
            const float err = std::fabs(est - an);
            const float tol = std::max(rel_tol * std::max(std::fabs(est), std::fabs(an)), abs_floor);
            if (err > tol) {
                std::ostringstream os;
                os << label << ": leaf " << li << " elem " << i << " analytic " << an
                   << " vs finite-difference " << est;
                throw std::runtime_error(os.str());
            }
        }
    }
}

int run_cli(const fs::path& cwd, const std::string& args) {
    const std::string cmd = "cd " + cwd.string() + " && " + VITKD_CLI_PATH + " " + args +
                            " > cli_stdout.txt 2> cli_stderr.txt";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Dataset tiny_ds(int64_t n = 16, int64_t classes = 2, uint64_t seed = 5) {
    SyntheticDatasetSpec s;
    s.num_samples = n;
    s.image_size = 8;
    s.num_classes = classes;
    s.generator = "shapes";
    s.seed = seed;
    return generate_dataset(s);
}

ViTConfig tiny_cfg(int64_t depth = 2, int64_t dim = 16) {
    ViTConfig c;
    c.depth = depth;
    c.hidden_dim = dim;
    c.heads = 2;
    c.patch_size = 4;
    c.image_size = 8;
    c.num_classes = 2;
    return c;
}

DistillPlan tiny_plan(const std::string& teacher, const ViTConfig& student) {
    DistillPlan p;
    p.teacher_checkpoint = teacher;
    p.student_config = student;
    p.loss_strategy.kind = LossKind::relation;
    p.epochs = 1;
    p.batch_size = 8;
    p.seed = 3;
    return p;
}

// --------------------------------------------------- criterion 1: gradients

void criterion_gradient_oracle() {
    Rng rng(101);

    auto scalar_of = [&](const Tensor& t) { return mean_all(t); };

    {  // core ops, each through a weighted reduction so every element matters
        Tensor a = random_param({2, 3, 4}, rng);
        Tensor b = random_param({2, 3, 4}, rng);
        Tensor w = random_const({2, 3, 4}, rng);
        fd_check({a, b}, [&] { return mean_all(mul(add(a, b), w)); }, "add/mul");
        fd_check({a, b}, [&] { return mean_all(mul(sub(a, b), w)); }, "sub");
        fd_check({a}, [&] { return sum_all(scale(a, 0.7f)); }, "scale/sum_all");
    }
    {  // broadcasting add (bias pattern)
        Tensor x = random_param({3, 4}, rng);
        Tensor b = random_param({4}, rng);
        Tensor w = random_const({3, 4}, rng);
        fd_check({x, b}, [&] { return mean_all(mul(add(x, b), w)); }, "broadcast add");
    }
    {  // matmul, batched and transposed layouts
        Tensor a = random_param({2, 3, 4}, rng);
        Tensor b = random_param({2, 4, 5}, rng);
        Tensor w = random_const({2, 3, 5}, rng);
        fd_check({a, b}, [&] { return mean_all(mul(matmul(a, b), w)); }, "matmul");
        Tensor c = random_param({3, 4}, rng);
        Tensor d = random_param({5, 4}, rng);
        Tensor w2 = random_const({3, 5}, rng);
        fd_check({c, d}, [&] { return mean_all(mul(matmul(c, transpose(d, 0, 1)), w2)); },
                 "matmul transposed");
    }
    {  // shape ops
        Tensor x = random_param({2, 3, 4}, rng);
        Tensor w = random_const({4, 6}, rng);
        fd_check({x}, [&] { return mean_all(mul(reshape(x, {4, 6}), w)); }, "reshape");
        Tensor wt = random_const({4, 3, 2}, rng);
        fd_check({x}, [&] { return mean_all(mul(transpose(x, 0, 2), wt)); }, "transpose");
        Tensor y = random_param({2, 2, 4}, rng);
        Tensor wc = random_const({2, 5, 4}, rng);
        fd_check({x, y}, [&] { return mean_all(mul(concat({x, y}, 1), wc)); }, "concat");
        Tensor ws = random_const({2, 2, 4}, rng);
        fd_check({x}, [&] { return mean_all(mul(slice(x, 1, 1, 2), ws)); }, "slice");
        Tensor wi = random_const({2, 2, 4}, rng);
        fd_check({x}, [&] { return mean_all(mul(index_select(x, 1, {2, 0}), wi)); },
                 "index_select");
    }
    {  // nonlinearities and normalizations
        Tensor x = random_param({3, 8}, rng, 2.0f);
        Tensor w = random_const({3, 8}, rng);
        fd_check({x}, [&] { return mean_all(mul(softmax(x, -1), w)); }, "softmax");
        fd_check({x}, [&] { return mean_all(mul(gelu(x), w)); }, "gelu");
        fd_check({x}, [&] { return mean_all(mul(layer_norm(x), w)); }, "layer_norm");
        Tensor gamma = random_param({8}, rng);
        Tensor beta = random_param({8}, rng);
        fd_check({x, gamma, beta},
                 [&] { return mean_all(mul(layer_norm(x, gamma, beta), w)); }, "layer_norm affine");
        Tensor pos = random_param({3, 8}, rng);
        {
            NoGradGuard ng;
            for (auto& v : const_cast<Tensor&>(pos).data()) v = std::fabs(v) + 0.5f;
        }
        fd_check({pos}, [&] { return mean_all(mul(log_op(clamp_min(pos, 1e-6f)), w)); },
                 "log/clamp_min");
        Tensor sl = random_param({4, 6}, rng);
        Tensor tgt = random_const({4, 6}, rng);
        fd_check({sl}, [&] { return smooth_l1(sl, tgt); }, "smooth_l1");
        (void)scalar_of;
    }
    {  // distillation losses on ViT-shaped taps: [B, M, T, hd]
        const int64_t B = 2, M = 2, T = 5, hd = 3, D = M * hd;
        Tensor qs = random_param({B, M, T, hd}, rng), ks = random_param({B, M, T, hd}, rng),
               vs = random_param({B, M, T, hd}, rng);
        Tensor qt = random_const({B, M, T, hd}, rng), kt = random_const({B, M, T, hd}, rng),
               vt = random_const({B, M, T, hd}, rng);
        LossStrategy strat;
        fd_check({qs, ks, vs},
                 [&] {
                     RelationSet s = compute_relations(qs, ks, vs, true, false);
                     RelationSet t = compute_relations(qt, kt, vt, true, false);
                     return relation_loss(s, t, strat.relation_pairs);
                 },
                 "relation_loss");

        Tensor feat_s = random_param({B, T, D}, rng);
        Tensor feat_t = random_const({B, T, D + 2}, rng);
        ProjectionHead proj(D, D + 2, 31);
        std::vector<Tensor> leaves = {feat_s, proj.w, proj.b};
        fd_check(leaves, [&] { return feature_loss(feat_s, feat_t, proj); }, "feature_loss");

        Tensor cls_s = random_param({B, D}, rng);
        Tensor cls_t = random_const({B, D}, rng);
        fd_check({cls_s}, [&] { return class_token_loss(cls_s, cls_t, 2.0f); }, "class_token_loss");

        Tensor logits = random_param({B, 7}, rng);
        Tensor target = random_const({B, 7}, rng);
        {
            NoGradGuard ng;
            auto& tv = const_cast<Tensor&>(target).data();
            for (auto& v : tv) v = std::fabs(v) + 0.1f;
            for (int64_t r = 0; r < B; ++r) {
                float s = 0;
                for (int64_t c = 0; c < 7; ++c) s += tv[static_cast<size_t>(r * 7 + c)];
                for (int64_t c = 0; c < 7; ++c) tv[static_cast<size_t>(r * 7 + c)] /= s;
            }
        }
        fd_check({logits}, [&] { return kl_loss(softmax(logits, -1), target); }, "kl_loss");

        // masked reconstruction on a 2-patch image
        ViTConfig cfg = tiny_cfg(1, 8);
        cfg.patch_size = 4;
        cfg.image_size = 8;
        Tensor imgs = random_const({B, 3, 8, 8}, rng);
        MaskSpec mask = MaskSpec::make(0.75f, cfg.num_patches(), 9);
        Tensor pred = random_param({B, cfg.num_patches(), cfg.patch_size * cfg.patch_size * 3}, rng);
        fd_check({pred}, [&] { return reconstruction_loss(pred, imgs, mask, cfg); },
                 "reconstruction_loss");

        // weighted composite of all active terms
        fd_check({qs, ks, vs, cls_s},
                 [&] {
                     RelationSet s = compute_relations(qs, ks, vs, true, false);
                     RelationSet t = compute_relations(qt, kt, vt, true, false);
                     return add(relation_loss(s, t, strat.relation_pairs),
                                scale(class_token_loss(cls_s, cls_t, 1.0f), 0.5f));
                 },
                 "composite loss");
    }
}

// --------------------------------------------------- criterion 2: relations

void criterion_relation_invariants() {
    Rng rng(202);
    for (int iter = 0; iter < 100; ++iter) {
        const int64_t B = 1 + (iter % 2), M = 1 + (iter % 3), T = 2 + (iter % 5), hd = 1 + (iter % 4);
        Tensor q = random_const({B, M, T, hd}, rng, 2.0f);
        Tensor k = random_const({B, M, T, hd}, rng, 2.0f);
        Tensor v = random_const({B, M, T, hd}, rng, 2.0f);

        RelationSet soft = compute_relations(q, k, v, true, false);
        for (RelationPair p : {RelationPair::QQ, RelationPair::KK, RelationPair::VV, RelationPair::QK}) {
            const Tensor& r = soft.pair(p);
            const auto& d = r.data();
            const int64_t rows = B * M * T;
            for (int64_t row = 0; row < rows; ++row) {
                double sum = 0;
                for (int64_t c = 0; c < T; ++c) sum += d[static_cast<size_t>(row * T + c)];
                require(std::fabs(sum - 1.0) <= 1e-6,
                        "softmaxed relation row not stochastic: " + relation_pair_name(p));
            }
        }

        RelationSet raw = compute_relations(q, k, v, false, false);
        for (RelationPair p : {RelationPair::QQ, RelationPair::KK, RelationPair::VV}) {
            const Tensor& r = raw.pair(p);
            const auto& d = r.data();
            for (int64_t bm = 0; bm < B * M; ++bm)
                for (int64_t i = 0; i < T; ++i)
                    for (int64_t j = 0; j < T; ++j)
                        require(d[static_cast<size_t>((bm * T + i) * T + j)] ==
                                    d[static_cast<size_t>((bm * T + j) * T + i)],
                                "self-relation not exactly symmetric pre-softmax");
        }
    }

    // hand oracle: M=1, T=2, head_dim=1, q=(a,b) -> softmax of [[a^2,ab],[ab,b^2]]
    const double a = 0.8, b = -1.3;
    Tensor q = Tensor::from_data({1, 1, 2, 1}, {static_cast<float>(a), static_cast<float>(b)});
    Tensor k = Tensor::from_data({1, 1, 2, 1}, {0.4f, 0.9f});
    Tensor v = Tensor::from_data({1, 1, 2, 1}, {-0.2f, 0.6f});
    RelationSet rel = compute_relations(q, k, v, true, false);
    const auto& qq = rel.qq.data();
    auto row_softmax = [](double x, double y) {
        const double m = std::max(x, y);
        const double ex = std::exp(x - m), ey = std::exp(y - m);
        return std::pair<double, double>(ex / (ex + ey), ey / (ex + ey));
    };
    auto [e00, e01] = row_softmax(a * a, a * b);
    auto [e10, e11] = row_softmax(b * a, b * b);
    require(std::fabs(qq[0] - e00) <= 1e-6 && std::fabs(qq[1] - e01) <= 1e-6 &&
                std::fabs(qq[2] - e10) <= 1e-6 && std::fabs(qq[3] - e11) <= 1e-6,
            "Q-Q hand oracle mismatch");
}

// ------------------------------------------- criterion 3: identity distills

void criterion_identity_zero() {
    const fs::path dir = work_dir("c3");
    ViTConfig cfg = tiny_cfg(2, 16);
    ViTModel teacher(cfg, 71);
    const std::string ck = (dir / "teacher.json").string();
    teacher.save(ck);
    ViTModel student = ViTModel::from_checkpoint(ck);

    Dataset ds = tiny_ds(8);
    Tensor images = ds.batch({0, 1, 2, 3});

    NoGradGuard ng;
    ForwardResult ft = teacher.forward(images, Mode::eval);
    ForwardResult fs_ = student.forward(images, Mode::eval);
    const BlockTaps& tt = ft.taps.blocks.back();
    const BlockTaps& ts = fs_.taps.blocks.back();

    LossStrategy strat;
    RelationSet rs = compute_relations(ts.q, ts.k, ts.v, strat.relation_softmax, false);
    RelationSet rt = compute_relations(tt.q, tt.k, tt.v, strat.relation_softmax, false);
    const float l_rel = relation_loss(rs, rt, strat.relation_pairs).item();

    ProjectionHead proj(cfg.hidden_dim, cfg.hidden_dim, 5);  // identity-initialized
    const float l_feat = feature_loss(ts.block_feature, tt.block_feature, proj).item();

    const float l_cls = class_token_loss(fs_.taps.class_token, ft.taps.class_token, 1.0f).item();

    require(l_rel <= 1e-5f, "relation loss " + std::to_string(l_rel));
    require(l_feat <= 1e-5f, "feature loss " + std::to_string(l_feat));
    require(l_cls <= 1e-5f, "class-token loss " + std::to_string(l_cls));
}

// ------------------------------------------- criterion 4: adaptive heads

void criterion_head_alignment() {
    ViTConfig student;
    student.depth = 4;
    student.hidden_dim = 192;
    student.heads = 3;
    student.patch_size = 4;
    student.image_size = 16;
    student.num_classes = 4;
    student.adaptive_last_block_heads = 6;

    ViTConfig teacher = student;
    teacher.hidden_dim = 384;
    teacher.heads = 6;
    teacher.adaptive_last_block_heads = 0;

    ViTModel sm(student, 11), tm(teacher, 12);
    require(sm.block_heads(student.depth - 1) == 6, "adaptive last block head count");
    require(sm.block_heads(0) == 3, "regular block head count");

    Dataset ds = [&] {
        SyntheticDatasetSpec s;
        s.num_samples = 4;
        s.image_size = 16;
        s.num_classes = 4;
        s.generator = "shapes";
        s.seed = 9;
        return generate_dataset(s);
    }();
    Tensor images = ds.batch({0, 1});

    NoGradGuard ng;
    ForwardResult fs_ = sm.forward(images, Mode::eval);
    ForwardResult ft = tm.forward(images, Mode::eval);
    RelationSet rs = compute_relations(fs_.taps.blocks.back().q, fs_.taps.blocks.back().k,
                                       fs_.taps.blocks.back().v, true, false);
    RelationSet rt = compute_relations(ft.taps.blocks.back().q, ft.taps.blocks.back().k,
                                       ft.taps.blocks.back().v, true, false);
    require(rs.qk.shape() == rt.qk.shape(), "relation shapes differ between student and teacher");

    require(sm.block_param_count(student.depth - 1) == sm.block_param_count(0),
            "adaptive block parameter count changed");
}

// --------------------------------------- criterion 5: directional ordering

struct OrderingBenchConfig {
    int64_t n_samples = 512;
    int64_t image_size = 16;
    int64_t classes = 4;
    uint64_t data_seed = 1234;

    int64_t teacher_depth = 6, teacher_dim = 96, teacher_heads = 6;
    int64_t student_depth = 3, student_dim = 48, student_heads = 3;

    int64_t teacher_epochs = 40;
    int64_t distill_epochs = 30;
    int64_t finetune_epochs = 4;
    int64_t batch = 64;
    float teacher_lr = 2e-3f;
    float distill_lr = 1.5e-3f;
    float finetune_lr = 1.5e-3f;
    float holdout = 0.25f;
    int seeds = 5;
};

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

void criterion_directional_ordering(bool verbose) {
    const OrderingBenchConfig C;
    const fs::path dir = work_dir("c5");

    SyntheticDatasetSpec dspec;
    dspec.num_samples = C.n_samples;
    dspec.image_size = C.image_size;
    dspec.num_classes = C.classes;
    dspec.generator = "shapes";
    dspec.seed = C.data_seed;
    Dataset ds = generate_dataset(dspec);

    ViTConfig tcfg;
    tcfg.depth = C.teacher_depth;
    tcfg.hidden_dim = C.teacher_dim;
    tcfg.heads = C.teacher_heads;
    tcfg.patch_size = 4;
    tcfg.image_size = C.image_size;
    tcfg.num_classes = C.classes;

    ViTModel teacher(tcfg, 4242);
    EvalOptions topts;
    topts.mode = EvalMode::fine_tune;
    topts.epochs = C.teacher_epochs;
    topts.batch_size = C.batch;
    topts.peak_lr = C.teacher_lr;
    topts.warmup_epochs = 2;
    topts.layer_decay = 1.0f;
    topts.seed = 77;
    const EvalResult tr = evaluate(teacher, ds, topts);
    const std::string teacher_ck = (dir / "teacher.json").string();
    teacher.save(teacher_ck);
    if (verbose)
        std::printf("    teacher top-1 %.3f (%lld/%lld)\n", tr.accuracy,
                    static_cast<long long>(tr.correct), static_cast<long long>(tr.eval_samples));
    require(tr.accuracy >= 0.8, "toy teacher failed to learn the task");

    ViTConfig scfg;
    scfg.depth = C.student_depth;
    scfg.hidden_dim = C.student_dim;
    scfg.heads = C.student_heads;
    scfg.patch_size = 4;
    scfg.image_size = C.image_size;
    scfg.num_classes = C.classes;
    scfg.adaptive_last_block_heads = C.teacher_heads;

    EvalOptions fopts;
    fopts.mode = EvalMode::fine_tune;
    fopts.epochs = C.finetune_epochs;
    fopts.batch_size = C.batch;
    fopts.peak_lr = C.finetune_lr;
    fopts.warmup_epochs = 1;
    fopts.holdout_fraction = C.holdout;

    std::vector<double> acc_scratch, acc_feature, acc_relation;
    for (int s = 0; s < C.seeds; ++s) {
        fopts.seed = 900 + static_cast<uint64_t>(s);
        auto arm = [&](LossKind kind, int64_t epochs, const char* tag) {
            DistillPlan p;
            p.teacher_checkpoint = teacher_ck;
            p.student_config = scfg;
            p.loss_strategy.kind = kind;
            p.epochs = epochs;
            p.batch_size = C.batch;
            p.peak_lr = C.distill_lr;
            p.warmup_epochs = epochs > 0 ? 1 : 0;
            p.seed = 1000 + static_cast<uint64_t>(s);
            const fs::path out = dir / (std::string(tag) + "_" + std::to_string(s));
            const StageResult r = train_stage(p, ds, out.string());
            ViTModel m = ViTModel::from_checkpoint(r.checkpoint_path);
            const EvalResult e = evaluate(m, ds, fopts);
            if (verbose) std::printf("    seed %d %-8s top-1 %.3f\n", s, tag, e.accuracy);
            return e.accuracy;
        };
        // scratch = zero-epoch distill: identical student init, no training
        acc_scratch.push_back(arm(LossKind::relation, 0, "scratch"));
        acc_feature.push_back(arm(LossKind::feature, C.distill_epochs, "feature"));
        acc_relation.push_back(arm(LossKind::relation, C.distill_epochs, "relation"));
    }

    const double ms = median(acc_scratch), mf = median(acc_feature), mr = median(acc_relation);
    std::ostringstream os;
    os << "median top-1: relation " << mr << ", feature " << mf << ", scratch " << ms;
    if (verbose) std::printf("    %s\n", os.str().c_str());
    require(mr >= mf, "ordering violated (relation < feature): " + os.str());
    require(mf >= ms, "ordering violated (feature < scratch): " + os.str());
    require(mr >= ms + 0.02, "relation does not beat scratch by 2 points: " + os.str());
}

// ------------------------------------------------- criterion 6: chains

void criterion_sequential_chain() {
    const fs::path dir = work_dir("c6");
    Dataset ds = tiny_ds(16);

    ViTConfig t0 = tiny_cfg(3, 32);
    ViTModel teacher(t0, 61);
    const std::string ck = (dir / "teacher.json").string();
    teacher.save(ck);

    StageChain chain;
    chain.stages.push_back(tiny_plan(ck, tiny_cfg(3, 24)));
    chain.stages.push_back(tiny_plan("", tiny_cfg(2, 24)));
    chain.stages.push_back(tiny_plan("", tiny_cfg(2, 16)));
    chain.stages[1].seed = 4;
    chain.stages[2].seed = 5;

    const ChainResult r = run_sequential(chain, ds, (dir / "chain").string());
    require(r.stages.size() == 3, "chain did not complete 3 stages");
    require(r.stages[0].teacher_weights_hash == file_fnv1a64((dir / "teacher.bin").string()),
            "stage 0 teacher hash != original teacher");
    for (size_t i = 1; i < 3; ++i)
        require(r.stages[i].teacher_weights_hash == r.stages[i - 1].weights_hash,
                "stage " + std::to_string(i) + " teacher hash != previous stage output");

    // single-stage chain must be bit-identical to a direct train_stage run
    StageChain one;
    one.stages.push_back(tiny_plan(ck, tiny_cfg(2, 16)));
    const ChainResult cr = run_sequential(one, ds, (dir / "one").string());
    const StageResult sr = train_stage(one.stages[0], ds, (dir / "direct").string());
    require(cr.stages[0].weights_hash == sr.weights_hash, "chain vs direct weight hash");
    require(read_bytes(dir / "one/stage_0/checkpoint.bin") == read_bytes(dir / "direct/checkpoint.bin"),
            "chain vs direct blob bytes");
    require(read_bytes(dir / "one/stage_0/checkpoint.json") == read_bytes(dir / "direct/checkpoint.json"),
            "chain vs direct manifest bytes");
}

// ------------------------------- criterion 7: schedule, freeze, round trip

void criterion_schedule_and_freeze() {
    const fs::path dir = work_dir("c7");
    Dataset ds = tiny_ds(16);
    ViTConfig cfg = tiny_cfg(2, 16);
    ViTModel teacher(cfg, 91);
    const std::string ck = (dir / "teacher.json").string();
    teacher.save(ck);
    const uint64_t teacher_hash_before = file_fnv1a64((dir / "teacher.bin").string());

    DistillPlan plan = tiny_plan(ck, tiny_cfg(2, 16));
    plan.epochs = 5;
    plan.warmup_epochs = 2;
    plan.peak_lr = 3e-3f;
    const StageResult r = train_stage(plan, ds, (dir / "run").string());

    require(file_fnv1a64((dir / "teacher.bin").string()) == teacher_hash_before,
            "teacher blob changed during stage");
    require(r.teacher_weights_hash == teacher_hash_before, "recorded teacher hash mismatch");

    // lr trace vs an independent double-precision statement of the contract
    const MetricsTable m = read_metrics_csv(r.metrics_path);
    const int lr_col = static_cast<int>(m.column("lr"));
    require(lr_col >= 0, "metrics missing lr column");
    const int64_t steps_per_epoch = ds.size() / plan.batch_size;
    const int64_t total = plan.epochs * steps_per_epoch;
    const int64_t warm = plan.warmup_epochs * steps_per_epoch;
    require(static_cast<int64_t>(m.rows.size()) == total, "unexpected step count");
    const double peak = static_cast<double>(*plan.peak_lr);
    const double lo = static_cast<double>(kMinLr);
    for (int64_t t = 0; t < total; ++t) {
        double want;
        if (t < warm) {
            want = peak * static_cast<double>(t + 1) / static_cast<double>(warm);
        } else {
            const double prog = static_cast<double>(t - warm) / static_cast<double>(total - 1 - warm);
            want = lo + 0.5 * (peak - lo) * (1.0 + std::cos(prog * 3.14159265358979323846));
        }
        const double got = m.rows[static_cast<size_t>(t)][static_cast<size_t>(lr_col)];
        require(std::fabs(got - want) <= 1e-6 * std::max(1.0, std::fabs(want)),
                "lr trace mismatch at step " + std::to_string(t));
        if (t == warm) require(static_cast<float>(got) == static_cast<float>(peak), "lr(warmup) != peak");
        if (t == total - 1) require(static_cast<float>(got) == kMinLr, "final lr != min lr");
        if (t > warm)
            require(got <= m.rows[static_cast<size_t>(t - 1)][static_cast<size_t>(lr_col)] + 1e-12,
                    "lr not nonincreasing after warmup");
    }

    // checkpoint round trip is bit-exact (same stem so manifests are comparable)
    fs::create_directories(dir / "rt1");
    fs::create_directories(dir / "rt2");
    ViTModel reloaded = ViTModel::from_checkpoint(r.checkpoint_path);
    reloaded.save((dir / "rt1/model.json").string());
    ViTModel again = ViTModel::from_checkpoint((dir / "rt1/model.json").string());
    again.save((dir / "rt2/model.json").string());
    require(read_bytes(dir / "run/checkpoint.bin") == read_bytes(dir / "rt1/model.bin"),
            "round-trip blob differs from original");
    require(read_bytes(dir / "rt1/model.json") == read_bytes(dir / "rt2/model.json"),
            "round-trip manifest not stable");
    require(read_bytes(dir / "rt1/model.bin") == read_bytes(dir / "rt2/model.bin"),
            "round-trip blob not stable");
}

// --------------------------------------------- criterion 8: ablation grids

void criterion_ablation_harness() {
    const fs::path dir = work_dir("c8");
    Dataset ds = tiny_ds(16);

    ViTConfig tcfg = tiny_cfg(5, 16);
    ViTModel teacher(tcfg, 81);
    const std::string ck = (dir / "teacher.json").string();
    teacher.save(ck);

    DistillPlan base = tiny_plan(ck, tiny_cfg(2, 16));
    json base_json = base.to_json();

    EvalOptions ev;
    ev.mode = EvalMode::linear_probe;
    ev.epochs = 1;
    ev.batch_size = 8;
    ev.warmup_epochs = 0;

    auto run_grid = [&](const char* tag, const GridAxis& axis, size_t want_cells) {
        GridSpec spec;
        spec.base_plan = base_json;
        spec.axes = {axis};
        spec.eval = ev;
        const fs::path out = dir / tag;
        const GridResult r = run_ablation_grid(spec, ds, out.string());
        require(r.cells.size() == want_cells,
                std::string(tag) + ": expected " + std::to_string(want_cells) + " cells");
        require(!r.partial(), std::string(tag) + ": grid has failed cells");
        require(fs::exists(out / "grid_results.csv") && fs::exists(out / "grid_table.txt"),
                std::string(tag) + ": merged tables missing");
        // merged csv has one line per cell plus header
        std::ifstream csv(out / "grid_results.csv");
        int64_t lines = 0;
        std::string line;
        while (std::getline(csv, line))
            if (!line.empty()) ++lines;
        require(lines == static_cast<int64_t>(want_cells) + 1,
                std::string(tag) + ": merged table row count");
    };

    // relation-set variants (2 rows)
    GridAxis pairs_axis;
    pairs_axis.name = "relation_pairs";
    pairs_axis.pointer = "/loss_strategy/relation_pairs";
    pairs_axis.values = {json::array({"qq", "kk", "vv"}), json::array({"qk", "vv"})};
    run_grid("pairs", pairs_axis, 2);

    // target-block sweep (5 rows)
    GridAxis block_axis;
    block_axis.name = "target_block";
    block_axis.pointer = "/target_block_index";
    block_axis.values = {1, 2, 3, 4, 5};
    run_grid("blocks", block_axis, 5);

    // drop-path pairs (5 rows, each value patches two plan fields at once)
    GridAxis dp_axis;
    dp_axis.name = "drop_path";
    dp_axis.pointer = "";
    dp_axis.values = {json{{"teacher_drop_path", 0.0}, {"student_drop_path", 0.0}},
                      json{{"teacher_drop_path", 0.0}, {"student_drop_path", 0.1}},
                      json{{"teacher_drop_path", 0.0}, {"student_drop_path", 0.2}},
                      json{{"teacher_drop_path", 0.0}, {"student_drop_path", 0.3}},
                      json{{"teacher_drop_path", 0.1}, {"student_drop_path", 0.1}}};
    run_grid("droppath", dp_axis, 5);

    // masked-input mode end to end at the default mask ratio
    DistillPlan masked = tiny_plan(ck, tiny_cfg(2, 16));
    masked.input_mode.masked = true;
    masked.input_mode.mask_ratio = 0.75f;
    masked.loss_strategy.with_reconstruction = true;
    const StageResult mr = train_stage(masked, ds, (dir / "masked").string());
    require(std::isfinite(mr.final_loss), "masked-input run produced non-finite loss");
    const MetricsTable mt = read_metrics_csv(mr.metrics_path);
    require(mt.column("loss_reconstruction") >= 0, "masked run missing reconstruction column");
}

// ------------------------------------------------ criterion 9: determinism

void criterion_determinism() {
    const fs::path dir = work_dir("c9");
    require(run_cli(dir, "gen-data --samples 16 --classes 2 --image-size 8 --seed 5 --out ds") == 0,
            "gen-data failed");
    {
        std::ofstream cfg(dir / "teacher_cfg.json");
        cfg << R"({"depth": 2, "hidden_dim": 16, "heads": 2, "patch_size": 4, "image_size": 8, "num_classes": 2})";
    }
    require(run_cli(dir, "init --config teacher_cfg.json --seed 11 --out teacher/ck.json") == 0,
            "init failed");
    {
        std::ofstream plan(dir / "plan.json");
        plan << R"({"teacher_checkpoint": "teacher/ck.json",
                    "student_config": {"depth": 2, "hidden_dim": 16, "heads": 2, "patch_size": 4,
                                       "image_size": 8, "num_classes": 2},
                    "loss_strategy": {"kind": "relation"},
                    "epochs": 2, "batch_size": 8, "seed": 3})";
    }
    require(run_cli(dir, "distill --plan plan.json --data ds --out run_a") == 0, "first distill failed");
    require(run_cli(dir, "distill --plan plan.json --data ds --out run_b") == 0, "second distill failed");

    fs::path ck_a, ck_b;
    for (const auto& e : fs::directory_iterator(dir / "run_a")) ck_a = e.path() / "checkpoint.bin";
    for (const auto& e : fs::directory_iterator(dir / "run_b")) ck_b = e.path() / "checkpoint.bin";
    require(fs::exists(ck_a) && fs::exists(ck_b), "checkpoints missing");
    require(read_bytes(ck_a) == read_bytes(ck_b), "checkpoint blobs differ between identical runs");
    require(read_bytes(ck_a.parent_path() / "checkpoint.json") ==
                read_bytes(ck_b.parent_path() / "checkpoint.json"),
            "checkpoint manifests differ between identical runs");
}

}  // namespace

int main(int argc, char** argv) {
    struct Criterion {
        int id;
        const char* name;
        std::function<void()> body;
    };
    const bool verbose = true;
    const std::vector<Criterion> criteria = {
        {1, "gradient oracle (finite differences over every op and loss)",
         [] { criterion_gradient_oracle(); }},
        {2, "relation invariants (row-stochastic, symmetric, hand oracle)",
         [] { criterion_relation_invariants(); }},
        {3, "identity distillation losses vanish", [] { criterion_identity_zero(); }},
        {4, "adaptive-head alignment at unchanged parameter count",
         [] { criterion_head_alignment(); }},
        {5, "directional ordering: relation >= feature >= scratch",
         [verbose] { criterion_directional_ordering(verbose); }},
        {6, "sequential chain hash linkage and bit-identical single stage",
         [] { criterion_sequential_chain(); }},
        {7, "teacher freeze, lr schedule trace, checkpoint round trip",
         [] { criterion_schedule_and_freeze(); }},
        {8, "ablation grids (2/5/5 variants) and masked-input mode",
         [] { criterion_ablation_harness(); }},
        {9, "byte-identical checkpoints across identical CLI runs",
         [] { criterion_determinism(); }},
    };

    std::vector<int> selected;
    for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));

    int failures = 0;
    for (const auto& c : criteria) {
        if (!selected.empty() &&
            std::find(selected.begin(), selected.end(), c.id) == selected.end())
            continue;
        const auto t0 = std::chrono::steady_clock::now();
        std::string error;
        try {
            c.body();
        } catch (const std::exception& e) {
            error = e.what();
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (error.empty()) {
            std::printf("[PASS] criterion %d: %s (%.1fs)\n", c.id, c.name, secs);
        } else {
            std::printf("[FAIL] criterion %d: %s (%.1fs)\n       %s\n", c.id, c.name, secs,
                        error.c_str());
            ++failures;
        }
        std::fflush(stdout);
    }
    if (failures == 0)
        std::printf("all criteria passed\n");
    else
        std::printf("%d criteria failed\n", failures);
    return failures;
}
