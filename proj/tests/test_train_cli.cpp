// Training loop, schedules, checkpointing, and the command layer.

#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "avloc/checkpoint.hpp"
#include "avloc/commands.hpp"
#include "avloc/losses.hpp"
#include "avloc/targets.hpp"

using namespace avloc;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_run(const fs::path& data_dir) {
    RunConfig cfg;
    cfg.model.d_model = 8;
    cfg.model.heads = 2;
    cfg.model.levels = 2;
    cfg.model.t_max = 16;
    cfg.model.num_classes = 4;
    cfg.model.d_audio = 8;
    cfg.model.d_visual = 8;
    cfg.model.n1 = 1;
    cfg.model.n2 = 1;
    cfg.model.moe_layers = 2;
    cfg.model.num_experts = 2;
    cfg.synth.train_videos = 6;
    cfg.synth.val_videos = 2;
    cfg.synth.test_videos = 2;
    cfg.synth.t_min = 8;
    cfg.synth.t_max = 16;
    cfg.synth.d_audio = 8;
    cfg.synth.d_visual = 8;
    cfg.synth.num_classes = 4;
    cfg.synth.events_min = 1;
    cfg.synth.events_max = 2;
    cfg.synth.event_len_min = 3;
    cfg.synth.event_len_max = 8;
    cfg.synth.co_occurrence = {{0, 1, 0.5, -2.0, 2.0}};
    cfg.synth.seed = 5;
    cfg.epochs = 2;
    cfg.warmup_epochs = 1;
    cfg.batch_size = 2;
    cfg.seed = 5;
    cfg.data_dir = data_dir.string();
    return cfg;
}

fs::path temp_dir(const char* name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

} // namespace

TEST_CASE("learning-rate schedule endpoints") {
    const double base = 1e-3;
    CHECK(lr_at_step(base, 0, 100, 1000) == 0.0);
    CHECK(lr_at_step(base, 50, 100, 1000) == doctest::Approx(base * 0.5));
    CHECK(lr_at_step(base, 100, 100, 1000) == doctest::Approx(base));
    CHECK(lr_at_step(base, 1000, 100, 1000) == doctest::Approx(base * 0.05));
    // monotone decay after warmup
    double prev = lr_at_step(base, 100, 100, 1000);
    for (int s = 101; s <= 1000; s += 50) {
        const double lr = lr_at_step(base, s, 100, 1000);
        CHECK(lr <= prev);
        prev = lr;
    }
}

TEST_CASE("gate temperature anneals linearly from start to end") {
    ModelConfig cfg;
    CHECK(tau_at_step(cfg, 0, 100) == doctest::Approx(2.0));
    CHECK(tau_at_step(cfg, 99, 100) == doctest::Approx(0.5));
    CHECK(tau_at_step(cfg, 50, 100) > 0.5);
    CHECK(tau_at_step(cfg, 50, 100) < 2.0);
}

TEST_CASE("config JSON round-trips every field") {
    RunConfig cfg = tiny_run("data");
    cfg.model.alpha1 = 0.1;
    cfg.model.alpha2 = 0.4;
    cfg.model.alpha3 = 0.8;
    cfg.model.level_ranges = {{0.0, 6.0}, {6.0, std::numeric_limits<double>::infinity()}};
    cfg.lr = 5e-4;
    const RunConfig back = run_config_from_json(run_config_to_json(cfg));
    CHECK(back.model.d_model == cfg.model.d_model);
    CHECK(back.model.alpha2 == cfg.model.alpha2);
    CHECK(back.model.level_ranges.size() == 2);
    CHECK(std::isinf(back.model.level_ranges[1].second));
    CHECK(back.synth.co_occurrence.size() == cfg.synth.co_occurrence.size());
    CHECK(back.lr == cfg.lr);
    CHECK(back.seed == cfg.seed);
    CHECK(back.data_dir == cfg.data_dir);
}

TEST_CASE("checkpoint round-trip restores parameters and optimizer state") {
    const fs::path dir = temp_dir("avloc_ckpt");
    ModelConfig mc = tiny_run("x").model;
    Pipeline a(mc, 7);
    // make the state nontrivial
    for (Param* p : a.params().all()) {
        for (size_t i = 0; i < p->adam_m.size(); ++i) p->adam_m[i] = 0.25f;
        p->step_count = 12;
    }
    CheckpointMeta meta;
    meta.global_step = 12;
    meta.epoch = 3;
    const std::string path = (dir / "a.ckpt").string();
    save_checkpoint(a.params(), meta, path);

    Pipeline b(mc, 8); // different init
    const CheckpointMeta loaded = load_checkpoint(b.params(), path, true);
    CHECK(loaded.global_step == 12);
    CHECK(loaded.epoch == 3);
    for (Param* p : b.params().all()) {
        Param* src = a.params().find(p->name);
        REQUIRE(src != nullptr);
        CHECK(p->value == src->value);
        CHECK(p->adam_m == src->adam_m);
        CHECK(p->step_count == 12);
    }

    // config mismatch -> version error
    ModelConfig other = mc;
    other.d_model = 16;
    Pipeline c(other, 9);
    CHECK_THROWS_AS(load_checkpoint(c.params(), path, false), VersionError);
}

TEST_CASE("one-epoch smoke run writes all artifacts and repeats byte-identically") {
    const fs::path data = temp_dir("avloc_train_data");
    const fs::path out1 = temp_dir("avloc_run1");
    const fs::path out2 = temp_dir("avloc_run2");
    RunConfig cfg = tiny_run(data);
    cmd_generate(cfg, data.string());
    // 300-videos contract scaled down: every split present on disk
    CHECK(fs::exists(data / "train.jsonl"));
    CHECK(fs::exists(data / "val.jsonl"));
    CHECK(fs::exists(data / "test.jsonl"));
    size_t feature_files = 0;
    for (const auto& e : fs::directory_iterator(data / "features")) {
        (void)e;
        ++feature_files;
    }
    CHECK(feature_files == 2 * (6 + 2 + 2));

    const TrainResult r1 = cmd_train(cfg, out1.string());
    CHECK(r1.final_step == 2 * 3); // 6 videos / batch 2 * 2 epochs
    for (const char* f : {"config.json", "metrics.jsonl", "val_history.jsonl", "best.ckpt", "last.ckpt"}) {
        CHECK(fs::exists(out1 / f));
    }
    // metrics schema
    {
        std::ifstream in(out1 / "metrics.jsonl");
        std::string line;
        REQUIRE(std::getline(in, line));
        CHECK(line.find("\"step\"") != std::string::npos);
        CHECK(line.find("\"L_cls\"") != std::string::npos);
        CHECK(line.find("\"L_reg\"") != std::string::npos);
        CHECK(line.find("\"L_mcls\"") != std::string::npos);
        CHECK(line.find("\"total\"") != std::string::npos);
    }

    const TrainResult r2 = cmd_train(cfg, out2.string());
    CHECK(r1.best_val_avg_map == r2.best_val_avg_map);
    CHECK(slurp(out1 / "best.ckpt") == slurp(out2 / "best.ckpt"));
    CHECK(slurp(out1 / "last.ckpt") == slurp(out2 / "last.ckpt"));
    CHECK(slurp(out1 / "metrics.jsonl") == slurp(out2 / "metrics.jsonl"));

    // checkpoint round-trip: eval twice from the file gives identical reports
    const fs::path eval1 = temp_dir("avloc_eval1");
    const fs::path eval2 = temp_dir("avloc_eval2");
    const EvalReport e1 = cmd_eval(cfg, (out1 / "best.ckpt").string(), "val", eval1.string());
    const EvalReport e2 = cmd_eval(cfg, (out1 / "best.ckpt").string(), "val", eval2.string());
    CHECK(e1.avg_map == e2.avg_map);
    CHECK(slurp(eval1 / "report.json") == slurp(eval2 / "report.json"));
    for (const char* f : {"report.json", "report.txt", "detections.jsonl", "routes.jsonl"}) {
        CHECK(fs::exists(eval1 / f));
    }
}

TEST_CASE("resume continues the step count monotonically") {
    const fs::path data = temp_dir("avloc_resume_data");
    const fs::path out = temp_dir("avloc_resume_run");
    RunConfig cfg = tiny_run(data);
    cmd_generate(cfg, data.string());
    const TrainResult first = cmd_train(cfg, out.string());
    CHECK(first.final_step == 6);
    RunConfig longer = cfg;
    longer.epochs = 4;
    const TrainResult resumed = cmd_train(longer, out.string(), (out / "last.ckpt").string());
    CHECK(resumed.final_step == 12); // steps 7..12 appended after the restored 6
}

TEST_CASE("a poisoned forward aborts without clobbering the previous checkpoint") {
    const fs::path data = temp_dir("avloc_nan_data");
    const fs::path out = temp_dir("avloc_nan_run");
    RunConfig cfg = tiny_run(data);
    cmd_generate(cfg, data.string());
    cmd_train(cfg, out.string());
    const std::string before = slurp(out / "last.ckpt");

    const DatasetSplit ds = load_dataset(data.string());
    Pipeline model(cfg.model, cfg.seed);
    Param* p = model.params().find("fusion.proj_a.w");
    REQUIRE(p != nullptr);
    for (auto& v : p->value) v = 1e30f;
    CHECK_THROWS_AS(train(model, ds, cfg, out.string()), NumericError);
    CHECK(slurp(out / "last.ckpt") == before); // last-good checkpoint retained
}

TEST_CASE("50 optimizer steps on a fixed 4-video batch halve the loss") {
    RunConfig cfg = tiny_run("unused");
    cfg.synth.train_videos = 4;
    const DatasetSplit ds = generate_dataset(cfg.synth);
    Pipeline model(cfg.model, 11);
    std::vector<PaddedSample> padded;
    std::vector<SampleTargets> targets;
    for (const auto& v : ds.train) {
        padded.push_back(pad_or_crop(v, cfg.model.t_max));
        const PyramidLayout layout = make_pyramid_layout(cfg.model.t_max, cfg.model.levels, padded.back().valid);
        targets.push_back(assign_targets(padded.back().events, layout, cfg.model.effective_ranges(),
                                         cfg.model.num_classes));
    }
    std::mt19937_64 grng(12);
    double first = 0.0, last = 0.0;
    for (int step = 0; step < 50; ++step) {
        double batch_loss = 0.0;
        for (size_t i = 0; i < padded.size(); ++i) {
            Tape tape;
            ForwardOptions opt;
            opt.gate_mode = GateMode::HardST;
            opt.tau = 1.0;
            opt.gumbel_rng = &grng;
            ForwardResult res = model.forward(padded[i], &tape, opt);
            TotalLossT<float> loss = total_loss(res.decoder.cls_logits, res.decoder.reg, res.fusion.guidance,
                                                targets[i], padded[i].valid, res.layout, cfg.model);
            batch_loss += loss.parts.total / padded.size();
            tape.backward(scale(loss.loss, 1.0f / static_cast<float>(padded.size())));
        }
        AdamConfig adam;
        adam.lr = 1e-3;
        adam.weight_decay = 1e-4;
        adam_step(model.params().all(), adam);
        if (step == 0) first = batch_loss;
        last = batch_loss;
    }
    CHECK(last <= 0.5 * first);
}

TEST_CASE("all-zero guidance weights leave guidance heads with exactly zero grads") {
    RunConfig cfg = tiny_run("unused");
    cfg.model.alpha1 = cfg.model.alpha2 = cfg.model.alpha3 = 0.0;
    cfg.synth.train_videos = 1;
    const DatasetSplit ds = generate_dataset(cfg.synth);
    Pipeline model(cfg.model, 13);
    PaddedSample padded = pad_or_crop(ds.train[0], cfg.model.t_max);
    const PyramidLayout layout = make_pyramid_layout(cfg.model.t_max, cfg.model.levels, padded.valid);
    const SampleTargets tg = assign_targets(padded.events, layout, cfg.model.effective_ranges(), cfg.model.num_classes);
    Tape tape;
    ForwardOptions opt;
    opt.gate_mode = GateMode::HardST;
    std::mt19937_64 grng(14);
    opt.gumbel_rng = &grng;
    ForwardResult res = model.forward(padded, &tape, opt);
    TotalLossT<float> loss =
        total_loss(res.decoder.cls_logits, res.decoder.reg, res.fusion.guidance, tg, padded.valid, res.layout, cfg.model);
    tape.backward(loss.loss);
    for (Param* p : model.params().all()) {
        if (p->name.find("fusion.head_") == std::string::npos) continue;
        for (float g : p->grad) CHECK(g == 0.0f);
    }
}

TEST_CASE("untrained model scores near chance on the synthetic test split") {
    RunConfig cfg = tiny_run("unused");
    cfg.synth.test_videos = 8;
    const DatasetSplit ds = generate_dataset(cfg.synth);
    Pipeline model(cfg.model, 17); // never trained
    const EvalOutcome out = evaluate_split(model, ds.test);
    CHECK(out.report.avg_map < 0.1);
}

TEST_CASE("empty split evaluates to a zero report without error") {
    const fs::path data = temp_dir("avloc_empty_data");
    const fs::path out = temp_dir("avloc_empty_out");
    RunConfig cfg = tiny_run(data);
    cfg.synth.test_videos = 0;
    cfg.epochs = 1;
    cfg.warmup_epochs = 0;
    cmd_generate(cfg, data.string());
    cmd_train(cfg, out.string());
    const EvalReport report = cmd_eval(cfg, (out / "best.ckpt").string(), "test", out.string());
    CHECK(report.avg_map == 0.0);
}

TEST_CASE("inference runs twice identically and emits the route log") {
    const fs::path data = temp_dir("avloc_infer_data");
    const fs::path out = temp_dir("avloc_infer_run");
    RunConfig cfg = tiny_run(data);
    cmd_generate(cfg, data.string());
    cmd_train(cfg, out.string());
    const fs::path i1 = temp_dir("avloc_infer1");
    const fs::path i2 = temp_dir("avloc_infer2");
    const auto d1 = cmd_infer_split(cfg, (out / "best.ckpt").string(), "test", i1.string());
    const auto d2 = cmd_infer_split(cfg, (out / "best.ckpt").string(), "test", i2.string());
    CHECK(slurp(i1 / "detections.jsonl") == slurp(i2 / "detections.jsonl"));
    CHECK(slurp(i1 / "routes.jsonl") == slurp(i2 / "routes.jsonl"));
    for (const auto& v : d1) {
        CHECK(v.route.size() == static_cast<size_t>(cfg.model.moe_layers));
        for (const auto& det : v.detections) {
            CHECK(det.t_start < det.t_end);
            CHECK(det.score > 0.0);
            CHECK(det.score < 1.0);
        }
    }

    // single-file mode matches the split entry for the same video
    const DatasetSplit ds = load_dataset(data.string());
    const std::string vid = ds.test[0].id;
    const fs::path i3 = temp_dir("avloc_infer3");
    const auto d3 = cmd_infer_files(cfg, (out / "best.ckpt").string(),
                                    (data / "features" / (vid + ".audio.davf")).string(),
                                    (data / "features" / (vid + ".visual.davf")).string(), vid, i3.string());
    REQUIRE(d3.size() == 1);
    REQUIRE(!d1.empty());
    CHECK(d3[0].detections.size() == d1[0].detections.size());
}

TEST_CASE("attention export writes six row-stochastic CSVs with matching dims") {
    const fs::path data = temp_dir("avloc_attn_data");
    const fs::path out = temp_dir("avloc_attn_run");
    RunConfig cfg = tiny_run(data);
    cmd_generate(cfg, data.string());
    cmd_train(cfg, out.string());
    const DatasetSplit ds = load_dataset(data.string());
    const std::string vid = ds.val[0].id;
    const int t_orig = std::min(ds.val[0].t_len, cfg.model.t_max);
    const fs::path attn = temp_dir("avloc_attn_out");
    const auto files = cmd_dump_attn(cfg, (out / "best.ckpt").string(), vid, attn.string());
    CHECK(files.size() == 6);
    for (size_t i = 0; i < files.size(); ++i) {
        std::ifstream in(files[i]);
        REQUIRE(in.good());
        std::string line;
        int rows = 0;
        while (std::getline(in, line)) {
            ++rows;
            double total = 0.0;
            int cols = 0;
            size_t pos = 0;
            while (pos <= line.size()) {
                const size_t comma = line.find(',', pos);
                const std::string cell = line.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
                total += std::stod(cell);
                ++cols;
                if (comma == std::string::npos) break;
                pos = comma + 1;
            }
            CHECK(std::abs(total - 1.0) < 1e-6);
            CHECK(cols == t_orig); // query_len x key_len, padded space excluded
        }
        CHECK(rows == t_orig);
    }

    CHECK_THROWS_AS(cmd_dump_attn(cfg, (out / "best.ckpt").string(), "missing_id", attn.string()), LookupError);
}
