// vitkd command-line front door: dataset generation, distillation runs,
// chains, ablation grids, evaluation, relation inspection and reporting.
//
// Exit codes: 0 ok, 2 config error, 3 runtime/numeric error, 4 partial grid.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "vitkd/dataset.hpp"
#include "vitkd/metrics.hpp"
#include "vitkd/pipeline.hpp"
#include "vitkd/relations.hpp"
#include "vitkd/serialize.hpp"

using namespace vitkd;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open " + path);
    try {
        json j;
        in >> j;
        return j;
    } catch (const json::exception& e) {
        throw ConfigError("malformed JSON in " + path + ": " + e.what());
    }
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

// Hash-named run directory. Existing results are never clobbered silently.
fs::path make_run_dir(const std::string& out_base, const json& config, bool force) {
    const fs::path dir = fs::path(out_base) / config_hash_hex(config);
    if (fs::exists(dir)) {
        if (!force)
            throw ConfigError("run directory already exists: " + dir.string() +
                              " (pass --force to overwrite)");
        fs::remove_all(dir);
    }
    fs::create_directories(dir);
    return dir;
}

void ensure_fresh_dir(const std::string& dir, bool force) {
    if (fs::exists(dir)) {
        if (!force)
            throw ConfigError("output directory already exists: " + dir +
                              " (pass --force to overwrite)");
        fs::remove_all(dir);
    }
    fs::create_directories(dir);
}

void write_run_info(const fs::path& dir, const std::string& command, const json& config,
                    const std::string& data_dir) {
    json info;
    info["command"] = command;
    info["config_hash"] = config_hash_hex(config);
    info["data"] = data_dir;
    write_json(dir / "run_info.json", info);
}

// ---------------------------------------------------------------- gen-data

struct GenDataArgs {
    std::string spec_file, out;
    int64_t samples = 0, image_size = 16, classes = 4;
    std::string generator = "shapes";
    uint64_t seed = 0;
    bool force = false;
};

int cmd_gen_data(const GenDataArgs& a) {
    SyntheticDatasetSpec spec;
    if (!a.spec_file.empty()) {
        spec = SyntheticDatasetSpec::from_json(load_json(a.spec_file));
    } else {
        if (a.samples <= 0) throw ConfigError("gen-data: pass --spec or --samples");
        spec.num_samples = a.samples;
        spec.image_size = a.image_size;
        spec.num_classes = a.classes;
        spec.generator = a.generator;
        spec.seed = a.seed;
        spec.validate();
    }
    ensure_fresh_dir(a.out, a.force);
    const Dataset ds = generate_dataset(spec);
    save_dataset(ds, a.out);
    std::cout << "wrote " << ds.size() << " samples (" << spec.num_classes << " classes, "
              << spec.image_size << "x" << spec.image_size << ", " << spec.generator << ") to "
              << a.out << "\n";
    return 0;
}

// ----------------------------------------------------------------- distill

int cmd_distill(const std::string& plan_file, const std::string& data_dir,
                const std::string& out_base, bool force) {
    const json plan_json = load_json(plan_file);
    const DistillPlan plan = DistillPlan::from_json(plan_json);
    const Dataset ds = load_dataset(data_dir);
    const fs::path dir = make_run_dir(out_base, plan_json, force);
    write_json(dir / "plan.json", plan_json);
    write_run_info(dir, "distill", plan_json, data_dir);

    const StageResult r = train_stage(plan, ds, dir.string());
    std::cout << "run " << dir.string() << "\n";
    std::cout << "steps " << r.steps << "  final_loss " << format_metric(r.final_loss) << "\n";
    std::cout << "checkpoint " << r.checkpoint_path << "  weights_hash " << hex64(r.weights_hash)
              << "\n";
    return 0;
}

// ------------------------------------------------------------------- chain

int cmd_chain(const std::string& chain_file, const std::string& data_dir,
              const std::string& out_base, bool force) {
    const json chain_json = load_json(chain_file);
    const StageChain chain = StageChain::from_json(chain_json);
    const Dataset ds = load_dataset(data_dir);
    const fs::path dir = make_run_dir(out_base, chain_json, force);
    write_json(dir / "chain.json", chain_json);
    write_run_info(dir, "chain", chain_json, data_dir);

    const ChainResult r = run_sequential(chain, ds, dir.string());
    std::cout << "run " << dir.string() << "\n";
    for (size_t i = 0; i < r.stages.size(); ++i)
        std::cout << "stage " << i << "  weights_hash " << hex64(r.stages[i].weights_hash)
                  << "  teacher_hash " << hex64(r.stages[i].teacher_weights_hash) << "\n";
    std::cout << "final " << r.final_checkpoint << "\n";
    return 0;
}

// -------------------------------------------------------------------- grid

int cmd_grid(const std::string& grid_file, const std::string& data_dir,
             const std::string& out_base, bool force) {
    const json grid_json = load_json(grid_file);
    const GridSpec spec = GridSpec::from_json(grid_json);
    const Dataset ds = load_dataset(data_dir);
    const fs::path dir = make_run_dir(out_base, grid_json, force);
    write_json(dir / "grid.json", grid_json);
    write_run_info(dir, "grid", grid_json, data_dir);

    const GridResult r = run_ablation_grid(spec, ds, dir.string());
    std::cout << "run " << dir.string() << "\n";
    std::ifstream table(dir / "grid_table.txt");
    std::cout << table.rdbuf();
    if (r.partial()) {
        std::cerr << "grid finished with failed cells (partial results kept)\n";
        return 4;
    }
    return 0;
}

// -------------------------------------------------------------------- eval

struct EvalArgs {
    std::string checkpoint, data_dir, opts_file, out_dir, save_model, mode;
    EvalOptions opts;
    bool force = false;
    // which flags were passed explicitly (override the opts file)
    bool has_mode = false, has_epochs = false, has_batch = false, has_lr = false,
         has_warmup = false, has_wd = false, has_layer_decay = false, has_drop_path = false,
         has_holdout = false, has_seed = false;
    int64_t epochs = 0, batch = 0;
    float lr = 0, wd = 0, layer_decay = 0, drop_path = 0, holdout = 0;
    int64_t warmup = 0;
    uint64_t seed = 0;
};

int cmd_eval(const EvalArgs& a) {
    EvalOptions opt;
    if (!a.opts_file.empty()) opt = EvalOptions::from_json(load_json(a.opts_file));
    if (a.has_mode) opt.mode = eval_mode_from_name(a.mode);
    if (a.has_epochs) opt.epochs = a.epochs;
    if (a.has_batch) opt.batch_size = a.batch;
    if (a.has_lr) opt.peak_lr = a.lr;
    if (a.has_warmup) opt.warmup_epochs = a.warmup;
    if (a.has_wd) opt.weight_decay = a.wd;
    if (a.has_layer_decay) opt.layer_decay = a.layer_decay;
    if (a.has_drop_path) opt.drop_path = a.drop_path;
    if (a.has_holdout) opt.holdout_fraction = a.holdout;
    if (a.has_seed) opt.seed = a.seed;
    opt.validate();

    const Dataset ds = load_dataset(a.data_dir);
    ViTModel model = ViTModel::from_checkpoint(a.checkpoint);

    std::string metrics_path;
    if (!a.out_dir.empty()) {
        ensure_fresh_dir(a.out_dir, a.force);
        metrics_path = (fs::path(a.out_dir) / "eval.csv").string();
    }
    const EvalResult r = evaluate(model, ds, opt, metrics_path);
    std::cout << "mode " << eval_mode_name(opt.mode) << "  top1_accuracy "
              << format_metric(r.accuracy) << "  (" << r.correct << "/" << r.eval_samples << ")\n";

    if (!a.out_dir.empty()) {
        json summary;
        summary["checkpoint"] = a.checkpoint;
        summary["data"] = a.data_dir;
        summary["options"] = opt.to_json();
        summary["accuracy"] = r.accuracy;
        summary["correct"] = r.correct;
        summary["eval_samples"] = r.eval_samples;
        summary["final_loss"] = r.final_loss;
        write_json(fs::path(a.out_dir) / "eval_summary.json", summary);
    }
    if (!a.save_model.empty()) {
        json extra;
        extra["eval"] = opt.to_json();
        extra["accuracy"] = r.accuracy;
        model.save(a.save_model, extra);
        std::cout << "saved fine-tuned model to " << a.save_model << "\n";
    }
    return 0;
}

// -------------------------------------------------------------------- init

int cmd_init(const std::string& config_file, uint64_t seed, const std::string& out, bool force) {
    const ViTConfig cfg = ViTConfig::from_json(load_json(config_file));
    if (fs::exists(out) && !force)
        throw ConfigError("checkpoint already exists: " + out + " (pass --force to overwrite)");
    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    ViTModel model(cfg, seed);
    model.save(out);
    std::cout << "wrote random-initialized checkpoint " << out << " (seed " << seed << ", "
              << model.param_count() << " parameters)\n";
    return 0;
}

// -------------------------------------------------------- inspect-relations

struct InspectArgs {
    std::string checkpoint, data_dir, pair = "qk", out;
    int64_t sample = 0, block = 0, head = 0;  // block 0 means "last"
    bool no_softmax = false, exclude_class_token = false;
};

int cmd_inspect_relations(const InspectArgs& a) {
    const Dataset ds = load_dataset(a.data_dir);
    ViTModel model = ViTModel::from_checkpoint(a.checkpoint);
    const RelationPair pair = relation_pair_from_name(a.pair);
    if (a.sample < 0 || a.sample >= ds.size())
        throw ConfigError("sample index " + std::to_string(a.sample) + " outside dataset");
    const int64_t depth = model.config().depth;
    const int64_t block = a.block == 0 ? depth : a.block;
    if (block < 1 || block > depth)
        throw ConfigError("block " + std::to_string(block) + " outside [1, " +
                          std::to_string(depth) + "]");

    NoGradGuard ng;
    const ForwardResult f = model.forward(ds.batch({a.sample}), Mode::eval);
    const BlockTaps& taps = f.taps.blocks[static_cast<size_t>(block - 1)];
    const int64_t heads = model.block_heads(block - 1);
    if (a.head < 0 || a.head >= heads)
        throw ConfigError("head " + std::to_string(a.head) + " outside [0, " +
                          std::to_string(heads) + ")");

    const RelationSet rel =
        compute_relations(taps.q, taps.k, taps.v, !a.no_softmax, a.exclude_class_token);
    const Tensor& r = rel.pair(pair);  // [1, M, T', T']
    const int64_t T = r.shape()[2];
    const float* base = r.data().data() + a.head * T * T;

    std::ostringstream csv;
    for (int64_t i = 0; i < T; ++i) {
        for (int64_t j = 0; j < T; ++j)
            csv << (j ? "," : "") << format_metric(static_cast<double>(base[i * T + j]));
        csv << "\n";
    }
    if (a.out.empty()) {
        std::cout << csv.str();
    } else {
        std::ofstream out(a.out, std::ios::trunc);
        if (!out) throw ConfigError("cannot write " + a.out);
        out << csv.str();
        std::cout << "wrote " << T << "x" << T << " " << relation_pair_name(pair)
                  << " relation (block " << block << ", head " << a.head << ") to " << a.out
                  << "\n";
    }
    return 0;
}

// ------------------------------------------------------------------ report

void render_grid_summary(const fs::path& file, std::ostream& os,
                         std::vector<std::vector<std::string>>* merged) {
    const json summary = load_json(file.string());
    std::vector<std::string> cols;
    for (const auto& axis : summary.at("axes")) cols.push_back(axis.at("name").get<std::string>());
    cols.insert(cols.end(), {"accuracy", "final_loss", "status"});
    std::vector<std::vector<std::string>> rows;
    for (const auto& cell : summary.at("cells")) {
        std::vector<std::string> row;
        for (const auto& v : cell.at("values"))
            row.push_back(v.is_string() ? v.get<std::string>() : v.dump());
        const bool ok = cell.at("ok").get<bool>();
        row.push_back(ok ? format_metric(cell.at("accuracy").get<double>()) : "");
        row.push_back(ok ? format_metric(cell.at("final_loss").get<double>()) : "");
        row.push_back(ok ? "ok" : "failed: " + cell.value("error", ""));
        rows.push_back(row);
        if (merged) {
            std::vector<std::string> m{file.parent_path().string() + "/" +
                                       cell.value("dir", "")};
            m.insert(m.end(), row.begin(), row.end());
            merged->push_back(std::move(m));
        }
    }
    os << "grid " << file.parent_path().string() << "\n";
    os << format_table(cols, rows) << "\n";
}

void render_chain_summary(const fs::path& file, std::ostream& os) {
    const json summary = load_json(file.string());
    std::vector<std::vector<std::string>> rows;
    for (const auto& st : summary.at("stages"))
        rows.push_back({st.at("dir").get<std::string>(), std::to_string(st.at("steps").get<int64_t>()),
                        format_metric(st.at("final_loss").get<double>()),
                        st.at("weights_hash").get<std::string>(),
                        st.at("teacher_weights_hash").get<std::string>()});
    os << "chain " << file.parent_path().string()
       << (summary.value("complete", false) ? "" : "  [incomplete]") << "\n";
    os << format_table({"stage", "steps", "final_loss", "weights_hash", "teacher_hash"}, rows)
       << "\n";
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& out_dir, bool force) {
    std::ostringstream report;
    std::vector<std::vector<std::string>> stage_rows;   // dir, steps, final_loss, hash
    std::vector<std::vector<std::string>> eval_rows;    // dir, mode, accuracy
    std::vector<std::vector<std::string>> grid_merged;  // cell dir + grid row

    for (const std::string& d : dirs) {
        if (!fs::exists(d)) throw ConfigError("no such run directory: " + d);
        std::vector<fs::path> files;
        for (const auto& entry : fs::recursive_directory_iterator(d))
            if (entry.is_regular_file()) files.push_back(entry.path());
        std::sort(files.begin(), files.end());
        for (const auto& p : files) {
            const std::string name = p.filename().string();
            if (name == "grid_summary.json") {
                render_grid_summary(p, report, &grid_merged);
            } else if (name == "chain_summary.json") {
                render_chain_summary(p, report);
            } else if (name == "stage_summary.json") {
                const json s = load_json(p.string());
                stage_rows.push_back({p.parent_path().string(),
                                      std::to_string(s.at("steps").get<int64_t>()),
                                      format_metric(s.at("final_loss").get<double>()),
                                      s.value("weights_hash", "")});
            } else if (name == "eval_summary.json") {
                const json s = load_json(p.string());
                eval_rows.push_back({p.parent_path().string(),
                                     s.at("options").at("mode").get<std::string>(),
                                     format_metric(s.at("accuracy").get<double>())});
            }
        }
    }
    if (!stage_rows.empty()) {
        report << "stages\n";
        report << format_table({"run", "steps", "final_loss", "weights_hash"}, stage_rows) << "\n";
    }
    if (!eval_rows.empty()) {
        report << "evaluations\n";
        report << format_table({"run", "mode", "top1_accuracy"}, eval_rows) << "\n";
    }
    if (stage_rows.empty() && eval_rows.empty() && grid_merged.empty())
        report << "no run summaries found\n";

    std::cout << report.str();
    if (!out_dir.empty()) {
        ensure_fresh_dir(out_dir, force);
        std::ofstream txt(fs::path(out_dir) / "report.txt", std::ios::trunc);
        txt << report.str();
        std::ofstream csv(fs::path(out_dir) / "report.csv", std::ios::trunc);
        csv << "kind,run,metric,value\n";
        for (const auto& r : stage_rows) csv << "stage," << r[0] << ",final_loss," << r[2] << "\n";
        for (const auto& r : eval_rows) csv << "eval," << r[0] << ",top1_accuracy," << r[2] << "\n";
        for (const auto& r : grid_merged) csv << "grid_cell," << r[0] << ",accuracy,"
                                              << (r.size() >= 3 ? r[r.size() - 3] : "") << "\n";
        std::cout << "wrote report to " << out_dir << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"vitkd: desk-scale ViT relation distillation"};
    app.require_subcommand(1);

    GenDataArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic labeled dataset");
    gen_cmd->add_option("--spec", gen.spec_file, "Dataset spec JSON file");
    gen_cmd->add_option("--samples", gen.samples, "Number of samples");
    gen_cmd->add_option("--image-size", gen.image_size, "Square image side (default 16)");
    gen_cmd->add_option("--classes", gen.classes, "Number of classes, 2..8 (default 4)");
    gen_cmd->add_option("--generator", gen.generator, "shapes | gaussian_textures");
    gen_cmd->add_option("--seed", gen.seed, "Generation seed");
    gen_cmd->add_option("--out", gen.out, "Output dataset directory")->required();
    gen_cmd->add_flag("--force", gen.force, "Overwrite an existing output directory");

    std::string plan_file, chain_file, grid_file, data_dir, out_base;
    bool force = false;
    auto* distill_cmd = app.add_subcommand("distill", "Run one distillation stage from a plan");
    distill_cmd->add_option("--plan", plan_file, "DistillPlan JSON file")->required();
    distill_cmd->add_option("--data", data_dir, "Dataset directory")->required();
    distill_cmd->add_option("--out", out_base, "Run base directory")->required();
    distill_cmd->add_flag("--force", force, "Overwrite an existing run directory");

    auto* chain_cmd = app.add_subcommand("chain", "Run a sequential distillation chain");
    chain_cmd->add_option("--chain", chain_file, "StageChain JSON file")->required();
    chain_cmd->add_option("--data", data_dir, "Dataset directory")->required();
    chain_cmd->add_option("--out", out_base, "Run base directory")->required();
    chain_cmd->add_flag("--force", force, "Overwrite an existing run directory");

    auto* grid_cmd = app.add_subcommand("grid", "Run an ablation grid");
    grid_cmd->add_option("--grid", grid_file, "GridSpec JSON file")->required();
    grid_cmd->add_option("--data", data_dir, "Dataset directory")->required();
    grid_cmd->add_option("--out", out_base, "Run base directory")->required();
    grid_cmd->add_flag("--force", force, "Overwrite an existing run directory");

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint (linear probe / fine-tune)");
    eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint manifest")->required();
    eval_cmd->add_option("--data", ev.data_dir, "Dataset directory")->required();
    auto* mode_opt = eval_cmd->add_option("--mode", ev.mode, "linear_probe | fine_tune");
    eval_cmd->add_option("--opts", ev.opts_file, "EvalOptions JSON file");
    auto* epochs_opt = eval_cmd->add_option("--epochs", ev.epochs, "Training epochs");
    auto* batch_opt = eval_cmd->add_option("--batch", ev.batch, "Batch size");
    auto* lr_opt = eval_cmd->add_option("--lr", ev.lr, "Peak learning rate");
    auto* warmup_opt = eval_cmd->add_option("--warmup", ev.warmup, "Warmup epochs");
    auto* wd_opt = eval_cmd->add_option("--weight-decay", ev.wd, "Weight decay");
    auto* ld_opt = eval_cmd->add_option("--layer-decay", ev.layer_decay, "Layer-wise lr decay");
    auto* dp_opt = eval_cmd->add_option("--drop-path", ev.drop_path, "Fine-tune drop path rate");
    auto* ho_opt = eval_cmd->add_option("--holdout", ev.holdout, "Holdout fraction (0, 1)");
    auto* seed_opt = eval_cmd->add_option("--seed", ev.seed, "Evaluation seed");
    eval_cmd->add_option("--out", ev.out_dir, "Directory for eval.csv and eval_summary.json");
    eval_cmd->add_option("--save-model", ev.save_model, "Save the trained model here");
    eval_cmd->add_flag("--force", ev.force, "Overwrite an existing output directory");

    std::string init_config, init_out;
    uint64_t init_seed = 0;
    bool init_force = false;
    auto* init_cmd = app.add_subcommand("init", "Write a random-initialized model checkpoint");
    init_cmd->add_option("--config", init_config, "ViT config JSON file")->required();
    init_cmd->add_option("--seed", init_seed, "Initialization seed");
    init_cmd->add_option("--out", init_out, "Checkpoint manifest path")->required();
    init_cmd->add_flag("--force", init_force, "Overwrite an existing checkpoint");

    InspectArgs ins;
    auto* ins_cmd = app.add_subcommand("inspect-relations", "Dump one relation matrix as CSV");
    ins_cmd->add_option("--checkpoint", ins.checkpoint, "Checkpoint manifest")->required();
    ins_cmd->add_option("--data", ins.data_dir, "Dataset directory")->required();
    ins_cmd->add_option("--sample", ins.sample, "Sample index (default 0)");
    ins_cmd->add_option("--block", ins.block, "1-based block (default: last)");
    ins_cmd->add_option("--head", ins.head, "Head index (default 0)");
    ins_cmd->add_option("--pair", ins.pair, "qq | kk | vv | qk (default qk)");
    ins_cmd->add_flag("--no-softmax", ins.no_softmax, "Dump raw scaled products");
    ins_cmd->add_flag("--exclude-class-token", ins.exclude_class_token,
                      "Drop the class token row/column");
    ins_cmd->add_option("--out", ins.out, "CSV output path (default: stdout)");

    std::vector<std::string> report_dirs;
    std::string report_out;
    bool report_force = false;
    auto* report_cmd = app.add_subcommand("report", "Merge run summaries into tables");
    report_cmd->add_option("dirs", report_dirs, "Run directories to scan")->required();
    report_cmd->add_option("--out", report_out, "Write report.txt / report.csv here");
    report_cmd->add_flag("--force", report_force, "Overwrite an existing report directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (app.got_subcommand(gen_cmd)) return cmd_gen_data(gen);
        if (app.got_subcommand(distill_cmd)) return cmd_distill(plan_file, data_dir, out_base, force);
        if (app.got_subcommand(chain_cmd)) return cmd_chain(chain_file, data_dir, out_base, force);
        if (app.got_subcommand(grid_cmd)) return cmd_grid(grid_file, data_dir, out_base, force);
        if (app.got_subcommand(eval_cmd)) {
            ev.has_mode = mode_opt->count() > 0;
            ev.has_epochs = epochs_opt->count() > 0;
            ev.has_batch = batch_opt->count() > 0;
            ev.has_lr = lr_opt->count() > 0;
            ev.has_warmup = warmup_opt->count() > 0;
            ev.has_wd = wd_opt->count() > 0;
            ev.has_layer_decay = ld_opt->count() > 0;
            ev.has_drop_path = dp_opt->count() > 0;
            ev.has_holdout = ho_opt->count() > 0;
            ev.has_seed = seed_opt->count() > 0;
            return cmd_eval(ev);
        }
        if (app.got_subcommand(init_cmd)) return cmd_init(init_config, init_seed, init_out, init_force);
        if (app.got_subcommand(ins_cmd)) return cmd_inspect_relations(ins);
        if (app.got_subcommand(report_cmd)) return cmd_report(report_dirs, report_out, report_force);
        std::cerr << "no subcommand given\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const json::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
