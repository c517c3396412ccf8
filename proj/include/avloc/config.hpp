#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "avloc/errors.hpp"

namespace avloc {

// Architectural hyperparameters. Desk-scale defaults train in minutes on one
// CPU core; every field is overridable through the JSON config.
struct ModelConfig {
    int d_model = 32;
    int heads = 4;
    int levels = 4;      // pyramid depth L_c
    int t_max = 96;      // padded sequence length T_m
    int num_classes = 8; // C
    int d_audio = 16;    // input feature widths
    int d_visual = 16;
    int n1 = 2; // aggregation blocks before the expert branch taps in
    int n2 = 1; // aggregation blocks after
    int moe_layers = 4;  // m
    int num_experts = 2; // n
    double alpha1 = 0.3; // stage guidance weights, strictly increasing (or all 0)
    double alpha2 = 0.6;
    double alpha3 = 0.9;
    double gumbel_tau_start = 2.0;
    double gumbel_tau_end = 0.5;
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;
    double nms_sigma = 0.5;
    double nms_prune_floor = 1e-3;
    double score_floor = 0.05; // decode threshold before Soft-NMS
    // Per-level positive assignment ranges [lo, hi) on max boundary distance,
    // in snippet units; empty -> derived from `levels`.
    std::vector<std::pair<double, double>> level_ranges;

    void validate() const;
    std::vector<std::pair<double, double>> effective_ranges() const;
    bool guidance_enabled() const { return alpha1 != 0.0 || alpha2 != 0.0 || alpha3 != 0.0; }
    int pyramid_total_len() const; // T_l = sum over levels of t_max / 2^(l-1)
};

struct CoOccurrence {
    int class_a = 0;
    int class_b = 1;
    double prob = 0.5;
    double lag_min = -4.0;
    double lag_max = 4.0;
};

// Synthetic paired-stream generator settings.
struct SynthConfig {
    int train_videos = 200;
    int val_videos = 50;
    int test_videos = 50;
    int t_min = 32;
    int t_max = 96; // snippet count range per video
    int d_audio = 16;
    int d_visual = 16;
    int num_classes = 8;
    int events_min = 1;
    int events_max = 3;
    int event_len_min = 4;
    int event_len_max = 24;
    double proto_amplitude = 3.5; // prototype vector norm
    double proto_noise = 0.25;    // per-snippet jitter on planted events
    double bg_noise = 0.6;        // background noise scale
    std::vector<CoOccurrence> co_occurrence = {{0, 1, 0.5, -4.0, 4.0}, {2, 3, 0.5, 0.0, 6.0}};
    std::uint64_t seed = 7;

    void validate() const;
};

struct RunConfig {
    ModelConfig model;
    SynthConfig synth;
    int epochs = 40;
    int warmup_epochs = 5;
    int batch_size = 4;
    double lr = 1e-3;
    double weight_decay = 1e-4;
    std::uint64_t seed = 7;
    std::string data_dir = "data";
    std::string out_dir = "runs/default";

    void validate() const;
};

// JSON round-trip (object layout documented in the README).
std::string run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::string& path);
void save_run_config(const RunConfig& cfg, const std::string& path);

} // namespace avloc
