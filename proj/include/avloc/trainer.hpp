#pragma once

// Training loop: seeded shuffling, per-sample gradient accumulation over a
// batch, Adam with linear warmup and cosine decay to 5% of the base rate, a
// linearly annealed gate temperature, per-step loss logging, per-epoch
// validation, and best/last checkpointing. A NaN anywhere aborts the run with
// the last written checkpoints retained.

#include <string>
#include <vector>

#include "avloc/config.hpp"
#include "avloc/data.hpp"
#include "avloc/eval.hpp"
#include "avloc/model.hpp"

namespace avloc {

double lr_at_step(double base_lr, std::int64_t step, std::int64_t warmup_steps, std::int64_t total_steps);
double tau_at_step(const ModelConfig& cfg, std::int64_t step, std::int64_t total_steps);

struct EvalOutcome {
    std::vector<VideoDetections> detections;
    EvalReport report;
};

// Inference (argmax gating, pruned expert execution) over a whole split,
// Soft-NMS included; report carries expert usage frequencies.
EvalOutcome evaluate_split(Pipeline& model, const std::vector<VideoSample>& videos);

struct TrainResult {
    double best_val_avg_map = -1.0;
    int best_epoch = -1;
    std::int64_t final_step = 0;
};

// Trains in place, writing metrics.jsonl, val_history.jsonl, best.ckpt and
// last.ckpt under out_dir. `resume_path` restores parameters, optimizer state
// and the step counter.
TrainResult train(Pipeline& model, const DatasetSplit& data, const RunConfig& cfg,
                  const std::string& out_dir, const std::string& resume_path = "");

} // namespace avloc
