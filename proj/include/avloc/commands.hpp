#pragma once

// Subcommand implementations behind the CLI: dataset generation, training,
// evaluation, inference and attention-map export. Kept out of the binary so
// tests can drive them directly.

#include <string>
#include <vector>

#include "avloc/config.hpp"
#include "avloc/trainer.hpp"

namespace avloc {

// Writes train/val/test annotation files and feature pairs under `dir`.
void cmd_generate(const RunConfig& cfg, const std::string& dir);

// Trains from cfg.data_dir into out_dir (config.json, metrics.jsonl,
// val_history.jsonl, best.ckpt, last.ckpt). Returns the training summary.
TrainResult cmd_train(const RunConfig& cfg, const std::string& out_dir, const std::string& resume_path = "");

// Evaluates `split` with the given checkpoint; writes report.json, report.txt,
// detections.jsonl and routes.jsonl under out_dir and returns the report.
EvalReport cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& split,
                    const std::string& out_dir);

// Single-video inference from a feature-file pair.
std::vector<VideoDetections> cmd_infer_files(const RunConfig& cfg, const std::string& checkpoint,
                                             const std::string& audio_path, const std::string& visual_path,
                                             const std::string& video_id, const std::string& out_dir);

// Whole-split inference.
std::vector<VideoDetections> cmd_infer_split(const RunConfig& cfg, const std::string& checkpoint,
                                             const std::string& split, const std::string& out_dir);

// Exports the six per-stage/branch attention matrices of one video as CSV.
// Returns the written file paths.
std::vector<std::string> cmd_dump_attn(const RunConfig& cfg, const std::string& checkpoint,
                                       const std::string& video_id, const std::string& out_dir);

} // namespace avloc
