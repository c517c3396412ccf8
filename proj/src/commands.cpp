#include "avloc/commands.hpp"

#include <filesystem>
#include <fstream>

#include "avloc/checkpoint.hpp"

namespace avloc {

namespace fs = std::filesystem;

void cmd_generate(const RunConfig& cfg, const std::string& dir) {
    cfg.synth.validate();
    const DatasetSplit ds = generate_dataset(cfg.synth);
    save_dataset(ds, dir);
}

TrainResult cmd_train(const RunConfig& cfg, const std::string& out_dir, const std::string& resume_path) {
    cfg.validate();
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("train: cannot create " + out_dir + ": " + ec.message());
    save_run_config(cfg, (fs::path(out_dir) / "config.json").string());
    const DatasetSplit data = load_dataset(cfg.data_dir);
    Pipeline model(cfg.model, cfg.seed);
    return train(model, data, cfg, out_dir, resume_path);
}

EvalReport cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& split,
                    const std::string& out_dir) {
    cfg.model.validate();
    Pipeline model(cfg.model, cfg.seed);
    load_checkpoint(model.params(), checkpoint, false);
    const DatasetSplit data = load_dataset(cfg.data_dir);
    const auto& videos = data.split(split);
    const EvalOutcome outcome = evaluate_split(model, videos);
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("eval: cannot create " + out_dir + ": " + ec.message());
    write_detections_jsonl(outcome.detections, (fs::path(out_dir) / "detections.jsonl").string());
    write_routes_jsonl(outcome.detections, (fs::path(out_dir) / "routes.jsonl").string());
    write_report_json(outcome.report, (fs::path(out_dir) / "report.json").string());
    write_report_table(outcome.report, (fs::path(out_dir) / "report.txt").string());
    return outcome.report;
}

namespace {

std::vector<VideoDetections> infer_videos(const RunConfig& cfg, const std::string& checkpoint,
                                          const std::vector<VideoSample>& videos, const std::string& out_dir) {
    Pipeline model(cfg.model, cfg.seed);
    load_checkpoint(model.params(), checkpoint, false);
    const EvalOutcome outcome = evaluate_split(model, videos);
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("infer: cannot create " + out_dir + ": " + ec.message());
    write_detections_jsonl(outcome.detections, (fs::path(out_dir) / "detections.jsonl").string());
    write_routes_jsonl(outcome.detections, (fs::path(out_dir) / "routes.jsonl").string());
    return outcome.detections;
}

VideoSample find_video(const DatasetSplit& data, const std::string& id) {
    for (const auto* split : {&data.train, &data.val, &data.test}) {
        for (const auto& v : *split)
            if (v.id == id) return v;
    }
    throw LookupError("no video with id '" + id + "' in the dataset");
}

void write_attn_csv(const AttnRecord& rec, const Mask& q_valid, const Mask& k_valid, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("dump-attn: cannot write " + path);
    out.precision(10); // keep row sums at 1 within 1e-6 after parsing
    // Valid query rows over valid key columns; padded space is not exported.
    for (int i = 0; i < rec.query_len; ++i) {
        if (!q_valid[static_cast<size_t>(i)]) continue;
        bool first = true;
        for (int j = 0; j < rec.key_len; ++j) {
            if (!k_valid[static_cast<size_t>(j)]) continue;
            if (!first) out << ",";
            out << rec.scores[static_cast<size_t>(i) * rec.key_len + j];
            first = false;
        }
        out << "\n";
    }
}

} // namespace

std::vector<VideoDetections> cmd_infer_files(const RunConfig& cfg, const std::string& checkpoint,
                                             const std::string& audio_path, const std::string& visual_path,
                                             const std::string& video_id, const std::string& out_dir) {
    VideoSample v;
    v.id = video_id;
    int t_a = 0, t_v = 0;
    v.audio = load_features(audio_path, t_a, v.d_audio);
    v.visual = load_features(visual_path, t_v, v.d_visual);
    if (t_a != t_v) {
        throw FormatError("infer: audio has " + std::to_string(t_a) + " snippets but visual has " +
                          std::to_string(t_v));
    }
    v.t_len = t_a;
    return infer_videos(cfg, checkpoint, {v}, out_dir);
}

std::vector<VideoDetections> cmd_infer_split(const RunConfig& cfg, const std::string& checkpoint,
                                             const std::string& split, const std::string& out_dir) {
    const DatasetSplit data = load_dataset(cfg.data_dir);
    return infer_videos(cfg, checkpoint, data.split(split), out_dir);
}

std::vector<std::string> cmd_dump_attn(const RunConfig& cfg, const std::string& checkpoint,
                                       const std::string& video_id, const std::string& out_dir) {
    Pipeline model(cfg.model, cfg.seed);
    load_checkpoint(model.params(), checkpoint, false);
    const DatasetSplit data = load_dataset(cfg.data_dir);
    const VideoSample video = find_video(data, video_id);
    PaddedSample padded = pad_or_crop(video, cfg.model.t_max);
    ForwardOptions opt;
    opt.gate_mode = GateMode::Argmax;
    opt.record_attention = true;
    ForwardResult res = model.forward(padded, nullptr, opt);

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("dump-attn: cannot create " + out_dir + ": " + ec.message());
    const char* names[6] = {"stage1_audio", "stage1_visual", "stage2_av", "stage2_va", "stage3_av", "stage3_va"};
    const Mask& level1 = res.layout.level_valid[0];
    std::vector<std::string> written;
    for (int i = 0; i < 6; ++i) {
        const Mask& m = i < 4 ? padded.valid : level1;
        const std::string path = (fs::path(out_dir) / (video_id + "_" + names[i] + ".csv")).string();
        write_attn_csv(res.fusion.attention[static_cast<size_t>(i)], m, m, path);
        written.push_back(path);
    }
    return written;
}

} // namespace avloc
