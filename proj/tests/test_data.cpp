// Synthetic dataset generator, pad/crop, and the feature file format.

#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "avloc/data.hpp"

using namespace avloc;
namespace fs = std::filesystem;

namespace {

SynthConfig tiny_cfg() {
    SynthConfig cfg;
    cfg.train_videos = 6;
    cfg.val_videos = 3;
    cfg.test_videos = 3;
    cfg.t_min = 16;
    cfg.t_max = 32;
    cfg.d_audio = 8;
    cfg.d_visual = 8;
    cfg.num_classes = 4;
    cfg.events_min = 1;
    cfg.events_max = 2;
    cfg.event_len_min = 3;
    cfg.event_len_max = 10;
    cfg.co_occurrence = {{0, 1, 0.5, -2.0, 2.0}};
    cfg.seed = 99;
    return cfg;
}

fs::path temp_dir(const char* name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

} // namespace

TEST_CASE("zero events per video yields empty annotations") {
    SynthConfig cfg = tiny_cfg();
    cfg.events_min = 0;
    cfg.events_max = 0;
    cfg.co_occurrence.clear();
    const DatasetSplit ds = generate_dataset(cfg);
    for (const auto& v : ds.train) CHECK(v.events.empty());
}

TEST_CASE("probability-1 co-occurrence: every video with class a also has class b") {
    SynthConfig cfg = tiny_cfg();
    cfg.train_videos = 40;
    cfg.co_occurrence = {{0, 1, 1.0, -2.0, 2.0}};
    const DatasetSplit ds = generate_dataset(cfg);
    int with_a = 0;
    for (const auto& v : ds.train) {
        bool has_a = false, has_b = false;
        for (const auto& e : v.events) {
            has_a |= e.class_id == 0;
            has_b |= e.class_id == 1;
        }
        if (has_a) {
            ++with_a;
            CHECK(has_b);
        }
    }
    CHECK(with_a > 0); // the contract was actually exercised
}

TEST_CASE("generation is seed-determined down to the bytes on disk") {
    const SynthConfig cfg = tiny_cfg();
    const fs::path d1 = temp_dir("avloc_gen1");
    const fs::path d2 = temp_dir("avloc_gen2");
    save_dataset(generate_dataset(cfg), d1.string());
    save_dataset(generate_dataset(cfg), d2.string());
    int files = 0;
    for (const auto& entry : fs::recursive_directory_iterator(d1)) {
        if (!entry.is_regular_file()) continue;
        ++files;
        const fs::path rel = fs::relative(entry.path(), d1);
        std::ifstream a(entry.path(), std::ios::binary);
        std::ifstream b(d2 / rel, std::ios::binary);
        REQUIRE(b.good());
        const std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
        const std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
        CHECK(sa == sb);
    }
    CHECK(files == 3 + 2 * 12); // three annotation files + a feature pair per video

    SynthConfig other = cfg;
    other.seed = 100;
    const fs::path d3 = temp_dir("avloc_gen3");
    save_dataset(generate_dataset(other), d3.string());
    std::ifstream a(d1 / "features" / "train_0000.audio.davf", std::ios::binary);
    std::ifstream b(d3 / "features" / "train_0000.audio.davf", std::ios::binary);
    const std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    const std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    CHECK(sa != sb);
}

TEST_CASE("split ids are pairwise disjoint and annotations stay valid") {
    const DatasetSplit ds = generate_dataset(tiny_cfg());
    std::vector<std::string> ids;
    for (const auto* split : {&ds.train, &ds.val, &ds.test}) {
        for (const auto& v : *split) {
            ids.push_back(v.id);
            for (const auto& e : v.events) {
                CHECK(e.t_start >= 0.0);
                CHECK(e.t_start < e.t_end);
                CHECK(e.t_end <= v.t_len);
                CHECK(e.class_id >= 0);
                CHECK(e.class_id < 4);
            }
        }
    }
    std::sort(ids.begin(), ids.end());
    CHECK(std::adjacent_find(ids.begin(), ids.end()) == ids.end());
}

TEST_CASE("event snippets score higher against their class prototype than background") {
    const SynthConfig cfg = tiny_cfg();
    const DatasetSplit ds = generate_dataset(cfg);
    const auto protos = class_prototypes(cfg, true);
    double event_mean = 0.0, bg_mean = 0.0;
    long event_n = 0, bg_n = 0;
    for (const auto& v : ds.train) {
        for (int t = 0; t < v.t_len; ++t) {
            const float* row = v.audio.data() + static_cast<size_t>(t) * v.d_audio;
            for (int c = 0; c < cfg.num_classes; ++c) {
                double dot = 0.0;
                for (int d = 0; d < v.d_audio; ++d) dot += row[d] * protos[static_cast<size_t>(c)][static_cast<size_t>(d)];
                bool covered = false;
                for (const auto& e : v.events)
                    covered |= e.class_id == c && t >= e.t_start && t < e.t_end;
                if (covered) {
                    event_mean += dot;
                    ++event_n;
                } else {
                    bg_mean += dot;
                    ++bg_n;
                }
            }
        }
    }
    REQUIRE(event_n > 0);
    REQUIRE(bg_n > 0);
    CHECK(event_mean / event_n > bg_mean / bg_n);
}

TEST_CASE("pad_or_crop: identity, padding, and event dropping") {
    VideoSample v;
    v.id = "v";
    v.t_len = 3;
    v.d_audio = 2;
    v.d_visual = 2;
    v.audio = {1, 2, 3, 4, 5, 6};
    v.visual = {6, 5, 4, 3, 2, 1};
    v.events = {{0, 0.0, 2.0}};

    PaddedSample same = pad_or_crop(v, 3);
    CHECK(same.valid == Mask{1, 1, 1});
    CHECK(same.audio == v.audio);
    CHECK(same.events.size() == 1);

    PaddedSample padded = pad_or_crop(v, 5);
    CHECK(padded.valid == Mask{1, 1, 1, 0, 0});
    CHECK(padded.audio[2 * 3] == 0.0f);
    CHECK(padded.audio[2 * 4 + 1] == 0.0f);

    VideoSample longer;
    longer.id = "w";
    longer.t_len = 10;
    longer.d_audio = 1;
    longer.d_visual = 1;
    longer.audio.assign(10, 1.0f);
    longer.visual.assign(10, 1.0f);
    longer.events = {{1, 6.0, 9.0}, {2, 2.0, 8.0}};
    PaddedSample cropped = pad_or_crop(longer, 5);
    REQUIRE(cropped.events.size() == 1); // [6,9) dropped, [2,8) clipped
    CHECK(cropped.events[0].class_id == 2);
    CHECK(cropped.events[0].t_end == 5.0);
}

TEST_CASE("feature files round-trip exactly and reject malformed input") {
    const fs::path dir = temp_dir("avloc_feat");
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<float> dist(-2.0f, 2.0f);
    std::vector<float> data(7 * 4);
    for (auto& x : data) x = dist(rng);
    const std::string path = (dir / "x.davf").string();
    save_features(data, 7, 4, path);
    int t = 0, d = 0;
    CHECK(load_features(path, t, d) == data);
    CHECK(t == 7);
    CHECK(d == 4);

    // truncated payload
    {
        std::ofstream out(dir / "trunc.davf", std::ios::binary);
        std::ifstream in(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 8));
    }
    CHECK_THROWS_AS(load_features((dir / "trunc.davf").string(), t, d), FormatError);

    // header claims T=2, D=3 but only 5 floats follow
    {
        std::ofstream out(dir / "short.davf", std::ios::binary);
        out.write("DAVF", 4);
        const std::uint32_t header[3] = {1, 2, 3};
        out.write(reinterpret_cast<const char*>(header), 12);
        const float payload[5] = {0, 1, 2, 3, 4};
        out.write(reinterpret_cast<const char*>(payload), 20);
    }
    try {
        load_features((dir / "short.davf").string(), t, d);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
    }

    // bad magic
    {
        std::ofstream out(dir / "bad.davf", std::ios::binary);
        out.write("NOPE", 4);
    }
    CHECK_THROWS_AS(load_features((dir / "bad.davf").string(), t, d), FormatError);
}

TEST_CASE("dataset save/load round-trips annotations and features") {
    const fs::path dir = temp_dir("avloc_roundtrip");
    SynthConfig cfg = tiny_cfg();
    cfg.train_videos = 2;
    cfg.val_videos = 1;
    cfg.test_videos = 1;
    const DatasetSplit ds = generate_dataset(cfg);
    save_dataset(ds, dir.string());
    const DatasetSplit loaded = load_dataset(dir.string());
    REQUIRE(loaded.train.size() == ds.train.size());
    for (size_t i = 0; i < ds.train.size(); ++i) {
        CHECK(loaded.train[i].id == ds.train[i].id);
        CHECK(loaded.train[i].audio == ds.train[i].audio);
        CHECK(loaded.train[i].visual == ds.train[i].visual);
        REQUIRE(loaded.train[i].events.size() == ds.train[i].events.size());
        for (size_t e = 0; e < ds.train[i].events.size(); ++e) {
            CHECK(loaded.train[i].events[e].class_id == ds.train[i].events[e].class_id);
            CHECK(loaded.train[i].events[e].t_start == ds.train[i].events[e].t_start);
            CHECK(loaded.train[i].events[e].t_end == ds.train[i].events[e].t_end);
        }
    }
}
