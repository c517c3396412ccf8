// Command-line front end: generate | train | eval | infer | dump-attn |
// config init. Configuration comes from a JSON file (see `config init`);
// --seed and --out override the corresponding fields.

#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "avloc/commands.hpp"

namespace {

avloc::RunConfig resolve_config(const std::string& config_path, bool seed_set, std::uint64_t seed) {
    avloc::RunConfig cfg;
    if (!config_path.empty()) cfg = avloc::load_run_config(config_path);
    if (seed_set) {
        cfg.seed = seed;
        cfg.synth.seed = seed;
    }
    return cfg;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dense audio-visual event localization on synthetic feature streams"};
    app.require_subcommand(1);

    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_set = false;
    app.add_option("--config", config_path, "JSON config file")->expected(1);
    app.add_option_function<std::uint64_t>(
           "--seed", [&](std::uint64_t s) { seed = s; seed_set = true; }, "Override the run seed");

    auto* config_cmd = app.add_subcommand("config", "Configuration helpers");
    auto* config_init = config_cmd->add_subcommand("init", "Write a config file with full defaults");
    std::string init_path = "config.json";
    config_init->add_option("--out", init_path, "Destination path");

    auto* generate = app.add_subcommand("generate", "Generate the synthetic dataset");
    std::string gen_out;
    generate->add_option("--out", gen_out, "Dataset directory (default: config data_dir)");

    auto* train_cmd = app.add_subcommand("train", "Train and checkpoint");
    std::string train_out;
    std::string resume_path;
    train_cmd->add_option("--out", train_out, "Run directory (default: config out_dir)");
    train_cmd->add_option("--resume", resume_path, "Checkpoint to resume from");

    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
    std::string eval_ckpt, eval_split = "test", eval_out;
    eval_cmd->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
    eval_cmd->add_option("--split", eval_split, "train|val|test")->check(CLI::IsMember({"train", "val", "test"}));
    eval_cmd->add_option("--out", eval_out, "Report directory (default: config out_dir)");

    auto* infer_cmd = app.add_subcommand("infer", "Run inference and write detections");
    std::string infer_ckpt, infer_audio, infer_visual, infer_id = "video", infer_split, infer_out;
    infer_cmd->add_option("--checkpoint", infer_ckpt, "Checkpoint file")->required();
    infer_cmd->add_option("--audio", infer_audio, "Audio feature file (single-video mode)");
    infer_cmd->add_option("--visual", infer_visual, "Visual feature file (single-video mode)");
    infer_cmd->add_option("--id", infer_id, "Video id for single-video mode");
    infer_cmd->add_option("--split", infer_split, "Whole-split mode: train|val|test")
        ->check(CLI::IsMember({"train", "val", "test"}));
    infer_cmd->add_option("--out", infer_out, "Output directory (default: config out_dir)");

    auto* attn_cmd = app.add_subcommand("dump-attn", "Export per-stage attention matrices as CSV");
    std::string attn_ckpt, attn_id, attn_out;
    attn_cmd->add_option("--checkpoint", attn_ckpt, "Checkpoint file")->required();
    attn_cmd->add_option("--id", attn_id, "Video id")->required();
    attn_cmd->add_option("--out", attn_out, "Output directory (default: config out_dir)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (config_init->parsed()) {
            avloc::RunConfig cfg = resolve_config(config_path, seed_set, seed);
            avloc::save_run_config(cfg, init_path);
            std::cout << "wrote " << init_path << "\n";
            return 0;
        }
        avloc::RunConfig cfg = resolve_config(config_path, seed_set, seed);
        if (generate->parsed()) {
            const std::string dir = gen_out.empty() ? cfg.data_dir : gen_out;
            avloc::cmd_generate(cfg, dir);
            std::cout << "dataset written to " << dir << "\n";
        } else if (train_cmd->parsed()) {
            const std::string out = train_out.empty() ? cfg.out_dir : train_out;
            const avloc::TrainResult r = avloc::cmd_train(cfg, out, resume_path);
            std::cout << "best val avg mAP " << r.best_val_avg_map << " at epoch " << r.best_epoch
                      << " (checkpoints in " << out << ")\n";
        } else if (eval_cmd->parsed()) {
            const std::string out = eval_out.empty() ? cfg.out_dir : eval_out;
            const avloc::EvalReport report = avloc::cmd_eval(cfg, eval_ckpt, eval_split, out);
            std::cout << avloc::report_table(report);
        } else if (infer_cmd->parsed()) {
            const std::string out = infer_out.empty() ? cfg.out_dir : infer_out;
            if (!infer_split.empty()) {
                avloc::cmd_infer_split(cfg, infer_ckpt, infer_split, out);
            } else if (!infer_audio.empty() && !infer_visual.empty()) {
                avloc::cmd_infer_files(cfg, infer_ckpt, infer_audio, infer_visual, infer_id, out);
            } else {
                std::cerr << "infer: need either --split or both --audio and --visual\n";
                return 2;
            }
            std::cout << "detections written to " << out << "\n";
        } else if (attn_cmd->parsed()) {
            const std::string out = attn_out.empty() ? cfg.out_dir : attn_out;
            const auto files = avloc::cmd_dump_attn(cfg, attn_ckpt, attn_id, out);
            for (const auto& f : files) std::cout << f << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
