#include "avloc/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include <json.hpp>

namespace avloc {

namespace fs = std::filesystem;

const std::vector<VideoSample>& DatasetSplit::split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw LookupError("unknown split '" + name + "' (expected train|val|test)");
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::vector<std::vector<float>> make_prototypes(const SynthConfig& cfg, std::uint64_t stream_tag, int dim) {
    std::mt19937_64 rng(splitmix64(cfg.seed ^ stream_tag));
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<std::vector<float>> protos(static_cast<size_t>(cfg.num_classes));
    for (auto& p : protos) {
        p.resize(static_cast<size_t>(dim));
        double norm2 = 0.0;
        for (auto& v : p) {
            const double x = dist(rng);
            v = static_cast<float>(x);
            norm2 += x * x;
        }
        const double s = cfg.proto_amplitude / std::max(std::sqrt(norm2), 1e-12);
        for (auto& v : p) v = static_cast<float>(v * s);
    }
    return protos;
}

constexpr std::uint64_t kAudioTag = 0xA11D10ULL;
constexpr std::uint64_t kVisualTag = 0x715AA1ULL;

VideoSample make_video(const SynthConfig& cfg, const std::string& id, std::uint64_t video_seed,
                       const std::vector<std::vector<float>>& protos_a,
                       const std::vector<std::vector<float>>& protos_v) {
    std::mt19937_64 rng(video_seed);
    VideoSample v;
    v.id = id;
    v.d_audio = cfg.d_audio;
    v.d_visual = cfg.d_visual;
    v.t_len = std::uniform_int_distribution<int>(cfg.t_min, cfg.t_max)(rng);

    std::uniform_int_distribution<int> class_dist(0, cfg.num_classes - 1);
    std::uniform_int_distribution<int> len_dist(cfg.event_len_min, cfg.event_len_max);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    auto clip_event = [&](EventAnnotation e) -> EventAnnotation {
        e.t_start = std::clamp(e.t_start, 0.0, static_cast<double>(v.t_len - 1));
        e.t_end = std::clamp(e.t_end, e.t_start + 1.0, static_cast<double>(v.t_len));
        return e;
    };

    const int n_events = std::uniform_int_distribution<int>(cfg.events_min, cfg.events_max)(rng);
    for (int n = 0; n < n_events; ++n) {
        EventAnnotation e;
        e.class_id = class_dist(rng);
        const int len = std::min(len_dist(rng), v.t_len);
        e.t_start = std::uniform_int_distribution<int>(0, v.t_len - len)(rng);
        e.t_end = e.t_start + len;
        v.events.push_back(clip_event(e));
        for (const auto& co : cfg.co_occurrence) {
            if (co.class_a != e.class_id) continue;
            if (unit(rng) > co.prob) continue;
            EventAnnotation partner;
            partner.class_id = co.class_b;
            const double lag = std::uniform_real_distribution<double>(co.lag_min, co.lag_max)(rng);
            const int plen = std::min(len_dist(rng), v.t_len);
            partner.t_start = std::floor(e.t_start + lag);
            partner.t_end = partner.t_start + plen;
            v.events.push_back(clip_event(partner));
        }
    }

    std::normal_distribution<double> bg(0.0, cfg.bg_noise);
    std::normal_distribution<double> jitter(0.0, cfg.proto_noise);
    v.audio.resize(static_cast<size_t>(v.t_len) * cfg.d_audio);
    v.visual.resize(static_cast<size_t>(v.t_len) * cfg.d_visual);
    for (auto& x : v.audio) x = static_cast<float>(bg(rng));
    for (auto& x : v.visual) x = static_cast<float>(bg(rng));

    for (const auto& e : v.events) {
        for (int t = 0; t < v.t_len; ++t) {
            if (t < e.t_start || t >= e.t_end) continue;
            float* arow = v.audio.data() + static_cast<size_t>(t) * cfg.d_audio;
            const auto& pa = protos_a[static_cast<size_t>(e.class_id)];
            for (int d = 0; d < cfg.d_audio; ++d) arow[d] += pa[static_cast<size_t>(d)] + static_cast<float>(jitter(rng));
            float* vrow = v.visual.data() + static_cast<size_t>(t) * cfg.d_visual;
            const auto& pv = protos_v[static_cast<size_t>(e.class_id)];
            for (int d = 0; d < cfg.d_visual; ++d) vrow[d] += pv[static_cast<size_t>(d)] + static_cast<float>(jitter(rng));
        }
    }
    return v;
}

} // namespace

std::vector<std::vector<float>> class_prototypes(const SynthConfig& cfg, bool audio) {
    return make_prototypes(cfg, audio ? kAudioTag : kVisualTag, audio ? cfg.d_audio : cfg.d_visual);
}

DatasetSplit generate_dataset(const SynthConfig& cfg) {
    cfg.validate();
    const auto protos_a = make_prototypes(cfg, kAudioTag, cfg.d_audio);
    const auto protos_v = make_prototypes(cfg, kVisualTag, cfg.d_visual);
    DatasetSplit ds;
    struct SplitSpec {
        const char* name;
        int count;
        std::uint64_t tag;
        std::vector<VideoSample>* out;
    };
    SplitSpec specs[] = {
        {"train", cfg.train_videos, 1, &ds.train},
        {"val", cfg.val_videos, 2, &ds.val},
        {"test", cfg.test_videos, 3, &ds.test},
    };
    for (const auto& spec : specs) {
        spec.out->reserve(static_cast<size_t>(spec.count));
        for (int i = 0; i < spec.count; ++i) {
            char id[32];
            std::snprintf(id, sizeof(id), "%s_%04d", spec.name, i);
            const std::uint64_t vseed = splitmix64(cfg.seed ^ (spec.tag << 32) ^ static_cast<std::uint64_t>(i));
            spec.out->push_back(make_video(cfg, id, vseed, protos_a, protos_v));
        }
    }
    return ds;
}

PaddedSample pad_or_crop(const VideoSample& sample, int t_max) {
    if (t_max <= 0) throw ConfigError("pad_or_crop: t_max must be positive");
    PaddedSample p;
    p.id = sample.id;
    p.t_orig = std::min(sample.t_len, t_max);
    p.d_audio = sample.d_audio;
    p.d_visual = sample.d_visual;
    p.audio.assign(static_cast<size_t>(t_max) * sample.d_audio, 0.0f);
    p.visual.assign(static_cast<size_t>(t_max) * sample.d_visual, 0.0f);
    p.valid.assign(static_cast<size_t>(t_max), 0);
    const int keep = p.t_orig;
    std::memcpy(p.audio.data(), sample.audio.data(), static_cast<size_t>(keep) * sample.d_audio * sizeof(float));
    std::memcpy(p.visual.data(), sample.visual.data(), static_cast<size_t>(keep) * sample.d_visual * sizeof(float));
    std::fill_n(p.valid.begin(), keep, 1);
    for (const auto& e : sample.events) {
        if (e.t_start >= keep) continue; // fully outside the crop
        EventAnnotation kept = e;
        kept.t_end = std::min(kept.t_end, static_cast<double>(keep));
        if (kept.t_end <= kept.t_start) continue;
        p.events.push_back(kept);
    }
    return p;
}

// ---------------------------------------------------------------------------
// Feature file format
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'D', 'A', 'V', 'F'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ofstream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::ifstream& in, const std::string& path, std::streamoff offset) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (in.gcount() != 4) {
        throw FormatError(path + ": truncated header at byte offset " + std::to_string(offset));
    }
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

} // namespace

void save_features(const std::vector<float>& data, int t_len, int dim, const std::string& path) {
    if (static_cast<std::int64_t>(data.size()) != static_cast<std::int64_t>(t_len) * dim) {
        throw ShapeError("save_features: data length " + std::to_string(data.size()) + " does not match " +
                         std::to_string(t_len) + "x" + std::to_string(dim));
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("save_features: cannot write " + path);
    out.write(kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(t_len));
    put_u32(out, static_cast<std::uint32_t>(dim));
    static_assert(sizeof(float) == 4);
    // Little-endian payload; this codebase targets little-endian hosts.
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * 4));
    if (!out) throw IoError("save_features: short write to " + path);
}

std::vector<float> load_features(const std::string& path, int& t_len, int& dim) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_features: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError(path + ": bad magic at byte offset 0");
    }
    const std::uint32_t version = get_u32(in, path, 4);
    if (version != kVersion) {
        throw FormatError(path + ": unsupported version " + std::to_string(version) + " at byte offset 4");
    }
    const std::uint32_t t = get_u32(in, path, 8);
    const std::uint32_t d = get_u32(in, path, 12);
    const std::uint64_t count = static_cast<std::uint64_t>(t) * d;
    std::vector<float> data(count);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(count * 4));
    if (static_cast<std::uint64_t>(in.gcount()) != count * 4) {
        throw FormatError(path + ": payload ends at byte offset " + std::to_string(16 + in.gcount()) +
                          ", expected " + std::to_string(16 + count * 4) + " bytes total");
    }
    in.peek();
    if (!in.eof()) {
        throw FormatError(path + ": trailing bytes after payload at byte offset " + std::to_string(16 + count * 4));
    }
    t_len = static_cast<int>(t);
    dim = static_cast<int>(d);
    return data;
}

// ---------------------------------------------------------------------------
// Annotations
// ---------------------------------------------------------------------------

void save_annotations(const std::vector<VideoSample>& videos, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("save_annotations: cannot write " + path);
    for (const auto& v : videos) {
        nlohmann::ordered_json j;
        j["id"] = v.id;
        j["T"] = v.t_len;
        nlohmann::ordered_json events = nlohmann::ordered_json::array();
        for (const auto& e : v.events) {
            nlohmann::ordered_json je;
            je["class"] = e.class_id;
            je["start"] = e.t_start;
            je["end"] = e.t_end;
            events.push_back(je);
        }
        j["events"] = events;
        out << j.dump() << "\n";
    }
}

std::vector<VideoSample> load_split(const std::string& annotation_path, const std::string& feature_dir) {
    std::ifstream in(annotation_path);
    if (!in) throw IoError("load_split: cannot open " + annotation_path);
    std::vector<VideoSample> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError(annotation_path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        VideoSample v;
        v.id = j.at("id").get<std::string>();
        v.t_len = j.at("T").get<int>();
        for (const auto& je : j.at("events")) {
            EventAnnotation e;
            e.class_id = je.at("class").get<int>();
            e.t_start = je.at("start").get<double>();
            e.t_end = je.at("end").get<double>();
            v.events.push_back(e);
        }
        int t = 0;
        v.audio = load_features((fs::path(feature_dir) / (v.id + ".audio.davf")).string(), t, v.d_audio);
        if (t != v.t_len) {
            throw FormatError(v.id + ": audio feature length " + std::to_string(t) +
                              " does not match annotation T " + std::to_string(v.t_len));
        }
        v.visual = load_features((fs::path(feature_dir) / (v.id + ".visual.davf")).string(), t, v.d_visual);
        if (t != v.t_len) {
            throw FormatError(v.id + ": visual feature length " + std::to_string(t) +
                              " does not match annotation T " + std::to_string(v.t_len));
        }
        out.push_back(std::move(v));
    }
    return out;
}

void save_dataset(const DatasetSplit& ds, const std::string& dir) {
    const fs::path root(dir);
    std::error_code ec;
    fs::create_directories(root / "features", ec);
    if (ec) throw IoError("save_dataset: cannot create " + (root / "features").string() + ": " + ec.message());
    const std::pair<const char*, const std::vector<VideoSample>*> splits[] = {
        {"train", &ds.train}, {"val", &ds.val}, {"test", &ds.test}};
    for (const auto& [name, videos] : splits) {
        save_annotations(*videos, (root / (std::string(name) + ".jsonl")).string());
        for (const auto& v : *videos) {
            save_features(v.audio, v.t_len, v.d_audio, (root / "features" / (v.id + ".audio.davf")).string());
            save_features(v.visual, v.t_len, v.d_visual, (root / "features" / (v.id + ".visual.davf")).string());
        }
    }
}

DatasetSplit load_dataset(const std::string& dir) {
    const fs::path root(dir);
    DatasetSplit ds;
    ds.train = load_split((root / "train.jsonl").string(), (root / "features").string());
    ds.val = load_split((root / "val.jsonl").string(), (root / "features").string());
    ds.test = load_split((root / "test.jsonl").string(), (root / "features").string());
    return ds;
}

} // namespace avloc
