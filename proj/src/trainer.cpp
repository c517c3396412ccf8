#include "avloc/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

#include "avloc/checkpoint.hpp"
#include "avloc/losses.hpp"
#include "avloc/targets.hpp"

namespace avloc {

namespace fs = std::filesystem;

double lr_at_step(double base_lr, std::int64_t step, std::int64_t warmup_steps, std::int64_t total_steps) {
    if (warmup_steps > 0 && step < warmup_steps) {
        return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    }
    constexpr double floor_frac = 0.05;
    const std::int64_t decay_steps = std::max<std::int64_t>(1, total_steps - warmup_steps);
    const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(decay_steps));
    const double cosine = 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
    return base_lr * (floor_frac + (1.0 - floor_frac) * cosine);
}

double tau_at_step(const ModelConfig& cfg, std::int64_t step, std::int64_t total_steps) {
    if (total_steps <= 1) return cfg.gumbel_tau_end;
    const double p = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps - 1));
    return cfg.gumbel_tau_start + (cfg.gumbel_tau_end - cfg.gumbel_tau_start) * p;
}

EvalOutcome evaluate_split(Pipeline& model, const std::vector<VideoSample>& videos) {
    const ModelConfig& cfg = model.config();
    EvalOutcome out;
    std::vector<std::vector<int>> routes;
    for (const auto& video : videos) {
        PaddedSample padded = pad_or_crop(video, cfg.t_max);
        ForwardOptions opt;
        opt.gate_mode = GateMode::Argmax;
        opt.prune_experts = true;
        ForwardResult res = model.forward(padded, nullptr, opt);
        VideoDetections det;
        det.id = video.id;
        det.route = res.route;
        auto cands = decode_candidates(res.decoder.p.values(), res.decoder.reg.values(), cfg.num_classes,
                                       res.layout, cfg.score_floor, static_cast<double>(padded.t_orig));
        det.detections = soft_nms(cands, cfg.nms_sigma, cfg.nms_prune_floor);
        routes.push_back(det.route);
        out.detections.push_back(std::move(det));
    }
    out.report = mean_ap(out.detections, videos, cfg.num_classes, default_thresholds());
    out.report.expert_usage = expert_usage_stats(routes, cfg.moe_layers, cfg.num_experts);
    return out;
}

TrainResult train(Pipeline& model, const DatasetSplit& data, const RunConfig& cfg,
                  const std::string& out_dir, const std::string& resume_path) {
    cfg.validate();
    if (data.train.empty()) throw ContractError("train: empty training split");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("train: cannot create " + out_dir + ": " + ec.message());

    const std::int64_t steps_per_epoch =
        (static_cast<std::int64_t>(data.train.size()) + cfg.batch_size - 1) / cfg.batch_size;
    const std::int64_t total_steps = steps_per_epoch * cfg.epochs;
    const std::int64_t warmup_steps = steps_per_epoch * cfg.warmup_epochs;

    std::int64_t global_step = 0;
    int start_epoch = 0;
    if (!resume_path.empty()) {
        const CheckpointMeta meta = load_checkpoint(model.params(), resume_path, true);
        global_step = meta.global_step;
        start_epoch = meta.epoch;
    }

    // Pre-pad once; targets depend only on the padded events and the mask.
    std::vector<PaddedSample> padded;
    std::vector<SampleTargets> targets;
    padded.reserve(data.train.size());
    for (const auto& v : data.train) {
        padded.push_back(pad_or_crop(v, cfg.model.t_max));
        const PyramidLayout layout = make_pyramid_layout(cfg.model.t_max, cfg.model.levels, padded.back().valid);
        targets.push_back(assign_targets(padded.back().events, layout, cfg.model.effective_ranges(),
                                         cfg.model.num_classes));
    }

    std::ofstream metrics(fs::path(out_dir) / "metrics.jsonl", resume_path.empty() ? std::ios::trunc : std::ios::app);
    if (!metrics) throw IoError("train: cannot write metrics log");
    std::ofstream val_log(fs::path(out_dir) / "val_history.jsonl",
                          resume_path.empty() ? std::ios::trunc : std::ios::app);

    std::mt19937_64 gumbel_rng(cfg.seed ^ 0x6B1A5EEDULL);
    TrainResult result;
    const std::string best_path = (fs::path(out_dir) / "best.ckpt").string();
    const std::string last_path = (fs::path(out_dir) / "last.ckpt").string();

    for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        std::vector<size_t> order(padded.size());
        std::iota(order.begin(), order.end(), size_t{0});
        std::mt19937_64 shuffle_rng(cfg.seed ^ (0x5457AFF1EULL + static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        for (size_t b = 0; b < order.size(); b += static_cast<size_t>(cfg.batch_size)) {
            const size_t batch_end = std::min(order.size(), b + static_cast<size_t>(cfg.batch_size));
            const int batch_n = static_cast<int>(batch_end - b);
            const double tau = tau_at_step(cfg.model, global_step, total_steps);
            LossBreakdown mean_parts;
            for (size_t k = b; k < batch_end; ++k) {
                const size_t si = order[k];
                Tape tape;
                ForwardOptions opt;
                opt.gate_mode = GateMode::HardST;
                opt.tau = tau;
                opt.gumbel_rng = &gumbel_rng;
                ForwardResult res = model.forward(padded[si], &tape, opt);
                TotalLossT<float> loss = total_loss(res.decoder.cls_logits, res.decoder.reg,
                                                    res.fusion.guidance, targets[si], padded[si].valid,
                                                    res.layout, cfg.model);
                mean_parts.cls += loss.parts.cls / batch_n;
                mean_parts.reg += loss.parts.reg / batch_n;
                mean_parts.mcls += loss.parts.mcls / batch_n;
                mean_parts.total += loss.parts.total / batch_n;
                Tensor scaled = scale(loss.loss, 1.0f / static_cast<float>(batch_n));
                tape.backward(scaled);
            }
            AdamConfig adam;
            adam.lr = lr_at_step(cfg.lr, global_step, warmup_steps, total_steps);
            adam.weight_decay = cfg.weight_decay;
            adam_step(model.params().all(), adam);
            ++global_step;

            nlohmann::ordered_json line;
            line["step"] = global_step;
            line["L_cls"] = mean_parts.cls;
            line["L_reg"] = mean_parts.reg;
            line["L_mcls"] = mean_parts.mcls;
            line["total"] = mean_parts.total;
            metrics << line.dump() << "\n";
        }
        metrics.flush();

        const EvalOutcome val = evaluate_split(model, data.val);
        nlohmann::ordered_json vline;
        vline["epoch"] = epoch + 1;
        vline["avg_map"] = val.report.avg_map;
        val_log << vline.dump() << "\n";
        val_log.flush();

        CheckpointMeta meta;
        meta.global_step = global_step;
        meta.epoch = epoch + 1;
        save_checkpoint(model.params(), meta, last_path);
        if (val.report.avg_map > result.best_val_avg_map) {
            result.best_val_avg_map = val.report.avg_map;
            result.best_epoch = epoch + 1;
            save_checkpoint(model.params(), meta, best_path);
        }
    }
    result.final_step = global_step;
    return result;
}

} // namespace avloc
