#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vitkd/dataset.hpp"
#include "vitkd/distill.hpp"
#include "vitkd/vit.hpp"

namespace vitkd {

// Student input during distillation: the raw image, or the image with a
// random subset of patches replaced by the mask token.
struct InputMode {
    bool masked = false;
    float mask_ratio = 0.75f;

    nlohmann::json to_json() const;
    static InputMode from_json(const nlohmann::json& j);
};

// Everything one teacher -> student distillation stage needs. JSON plan files
// mirror these fields exactly.
struct DistillPlan {
    std::string teacher_checkpoint;
    ViTConfig student_config;
    // Optional warm start; must match student_config exactly. Copying the
    // teacher into an architecturally identical student gives zero loss.
    std::optional<std::string> student_init_checkpoint;
    std::optional<int64_t> target_block_index;  // 1-based; default round(0.75 * teacher depth)
    LossStrategy loss_strategy;
    InputMode input_mode;
    float teacher_drop_path = 0.0f;
    float student_drop_path = 0.0f;
    int64_t epochs = 1;
    int64_t batch_size = 64;
    std::optional<float> peak_lr;  // default 1.5e-4 * batch_size / 256
    int64_t warmup_epochs = 0;
    float weight_decay = 0.05f;
    uint64_t seed = 0;

    float resolved_peak_lr() const {
        return peak_lr ? *peak_lr : 1.5e-4f * static_cast<float>(batch_size) / 256.0f;
    }

    // `require_teacher` is false for chain stages whose teacher gets wired in.
    void validate(bool require_teacher = true) const;
    nlohmann::json to_json() const;
    static DistillPlan from_json(const nlohmann::json& j);
};

// Ordered stages; stage i's trained student becomes stage i+1's teacher.
struct StageChain {
    std::vector<DistillPlan> stages;

    void validate() const;
    nlohmann::json to_json() const;
    static StageChain from_json(const nlohmann::json& j);
};

// Teacher block (1-based) whose taps supply the distillation targets.
int64_t select_target_block(int64_t teacher_depth, std::optional<int64_t> override_index);

struct StageResult {
    std::string checkpoint_path;
    std::string metrics_path;
    uint64_t weights_hash = 0;  // FNV-1a of the checkpoint blob
    uint64_t teacher_weights_hash = 0;
    int64_t steps = 0;
    double final_loss = 0.0;
};

// Runs one distillation stage into `out_dir` (checkpoint.json/.bin,
// metrics.csv, stage_summary.json). Deterministic for a fixed plan and seed.
StageResult train_stage(const DistillPlan& plan, const Dataset& dataset,
                        const std::string& out_dir);

struct ChainResult {
    std::vector<StageResult> stages;
    std::string final_checkpoint;
};

// Stages run in order under out_dir/stage_<i>; a failing stage halts the
// chain and leaves earlier checkpoints on disk.
ChainResult run_sequential(const StageChain& chain, const Dataset& dataset,
                           const std::string& out_dir);

enum class EvalMode { linear_probe, fine_tune };

std::string eval_mode_name(EvalMode m);
EvalMode eval_mode_from_name(const std::string& name);

struct EvalOptions {
    EvalMode mode = EvalMode::fine_tune;
    int64_t epochs = 10;
    int64_t batch_size = 64;
    std::optional<float> peak_lr;  // default 1.5e-4 * batch_size / 256
    int64_t warmup_epochs = 1;
    float weight_decay = 0.05f;
    float layer_decay = 0.65f;  // fine_tune only: per-layer lr multiplier
    float drop_path = 0.0f;     // fine_tune only
    float holdout_fraction = 0.2f;
    uint64_t seed = 0;

    float resolved_peak_lr() const {
        return peak_lr ? *peak_lr : 1.5e-4f * static_cast<float>(batch_size) / 256.0f;
    }

    void validate() const;
    nlohmann::json to_json() const;
    static EvalOptions from_json(const nlohmann::json& j);
};

struct EvalResult {
    double accuracy = 0.0;  // top-1 on the held-out split
    int64_t eval_samples = 0;
    int64_t correct = 0;
    double final_loss = 0.0;
};

// Trains the head (linear_probe) or the whole model with layer-wise lr decay
// (fine_tune) on a deterministic train/holdout split, then reports top-1
// accuracy on the holdout. Mutates `model` in place.
EvalResult evaluate(ViTModel& model, const Dataset& dataset, const EvalOptions& opt,
                    const std::string& metrics_path = "");

struct GridAxis {
    std::string name;
    std::string pointer;  // JSON pointer into the plan; "" merge-patches the root
    std::vector<nlohmann::json> values;
};

struct GridSpec {
    nlohmann::json base_plan;
    std::vector<GridAxis> axes;
    EvalOptions eval;

    void validate() const;
    static GridSpec from_json(const nlohmann::json& j);
};

struct GridCell {
    std::vector<nlohmann::json> values;  // one per axis
    std::string dir;
    bool ok = false;
    std::string error;
    double accuracy = 0.0;
    double final_loss = 0.0;
};

struct GridResult {
    std::vector<GridCell> cells;
    bool partial() const;  // true when at least one cell failed
};

// Cartesian product over the axes; cells fail independently and the summary
// (grid_summary.json, grid_results.csv, grid_table.txt) always covers every
// cell attempted.
GridResult run_ablation_grid(const GridSpec& spec, const Dataset& dataset,
                             const std::string& out_dir);

// Canonical content hash of a JSON document (key order independent).
uint64_t config_hash(const nlohmann::json& j);
std::string config_hash_hex(const nlohmann::json& j);

}  // namespace vitkd
