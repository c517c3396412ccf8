#include "avloc/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace avloc {

using ordered_json = nlohmann::ordered_json;

void ModelConfig::validate() const {
    if (d_model < 1 || t_max < 1 || num_classes < 2 || levels < 1) {
        throw ConfigError("model: d_model/t_max/num_classes/levels out of range");
    }
    if (d_model % heads != 0) {
        throw ConfigError("model: d_model " + std::to_string(d_model) + " not divisible by heads " +
                          std::to_string(heads));
    }
    if (num_classes % heads != 0) {
        throw ConfigError("model: num_classes " + std::to_string(num_classes) +
                          " not divisible by heads " + std::to_string(heads) +
                          " (the aggregation blocks attend over class channels)");
    }
    const int div = 1 << (levels - 1);
    if (t_max % div != 0) {
        throw ConfigError("model: t_max " + std::to_string(t_max) + " not divisible by 2^(levels-1) = " +
                          std::to_string(div));
    }
    // Zero disables a stage (ablation); the active weights must increase.
    double prev = 0.0;
    for (double a : {alpha1, alpha2, alpha3}) {
        if (a < 0.0) throw ConfigError("model: guidance weights must be nonnegative");
        if (a == 0.0) continue;
        if (a <= prev) throw ConfigError("model: active guidance weights must increase strictly");
        prev = a;
    }
    if (moe_layers < 1 || num_experts < 1) {
        throw ConfigError("model: moe_layers and num_experts must be >= 1");
    }
    if (gumbel_tau_start <= 0.0 || gumbel_tau_end <= 0.0) {
        throw ConfigError("model: gumbel temperatures must be positive");
    }
    if (!level_ranges.empty() && static_cast<int>(level_ranges.size()) != levels) {
        throw ConfigError("model: level_ranges size " + std::to_string(level_ranges.size()) +
                          " does not match levels " + std::to_string(levels));
    }
}

std::vector<std::pair<double, double>> ModelConfig::effective_ranges() const {
    if (!level_ranges.empty()) return level_ranges;
    // Contiguous doubling ranges on absolute boundary distance; the last level
    // is open-ended so every event length is assigned somewhere.
    std::vector<std::pair<double, double>> r;
    double lo = 0.0, hi = 4.0;
    for (int l = 0; l < levels; ++l) {
        r.emplace_back(lo, l + 1 == levels ? std::numeric_limits<double>::infinity() : hi);
        lo = hi;
        hi *= 2.0;
    }
    return r;
}

int ModelConfig::pyramid_total_len() const {
    int total = 0;
    for (int l = 0; l < levels; ++l) total += t_max / (1 << l);
    return total;
}

void SynthConfig::validate() const {
    if (num_classes < 2) throw ConfigError("synth: num_classes must be >= 2");
    if (t_min < 1 || t_min > t_max) throw ConfigError("synth: empty snippet-count range");
    if (events_min < 0 || events_min > events_max) throw ConfigError("synth: empty events-per-video range");
    if (event_len_min < 1 || event_len_min > event_len_max) throw ConfigError("synth: empty event-length range");
    if (train_videos < 0 || val_videos < 0 || test_videos < 0) throw ConfigError("synth: negative split size");
    for (const auto& co : co_occurrence) {
        if (co.prob < 0.0 || co.prob > 1.0) throw ConfigError("synth: co-occurrence probability outside [0,1]");
        if (co.lag_min > co.lag_max) throw ConfigError("synth: empty co-occurrence lag range");
        if (co.class_a < 0 || co.class_a >= num_classes || co.class_b < 0 || co.class_b >= num_classes) {
            throw ConfigError("synth: co-occurrence class id out of range");
        }
    }
}

void RunConfig::validate() const {
    model.validate();
    synth.validate();
    if (warmup_epochs >= epochs) {
        throw ConfigError("train: warmup_epochs " + std::to_string(warmup_epochs) +
                          " must be smaller than epochs " + std::to_string(epochs));
    }
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (lr <= 0.0) throw ConfigError("train: lr must be positive");
    if (model.d_audio != synth.d_audio || model.d_visual != synth.d_visual) {
        throw ConfigError("config: model input widths do not match synth feature widths");
    }
    if (model.num_classes != synth.num_classes) {
        throw ConfigError("config: model num_classes does not match synth num_classes");
    }
    if (model.t_max < synth.t_max) {
        throw ConfigError("config: model t_max shorter than the longest generated video");
    }
}

namespace {

ordered_json model_to_json(const ModelConfig& m) {
    ordered_json j;
    j["d_model"] = m.d_model;
    j["heads"] = m.heads;
    j["levels"] = m.levels;
    j["t_max"] = m.t_max;
    j["num_classes"] = m.num_classes;
    j["d_audio"] = m.d_audio;
    j["d_visual"] = m.d_visual;
    j["n1"] = m.n1;
    j["n2"] = m.n2;
    j["moe_layers"] = m.moe_layers;
    j["num_experts"] = m.num_experts;
    j["alpha1"] = m.alpha1;
    j["alpha2"] = m.alpha2;
    j["alpha3"] = m.alpha3;
    j["gumbel_tau_start"] = m.gumbel_tau_start;
    j["gumbel_tau_end"] = m.gumbel_tau_end;
    j["focal_alpha"] = m.focal_alpha;
    j["focal_gamma"] = m.focal_gamma;
    j["nms_sigma"] = m.nms_sigma;
    j["nms_prune_floor"] = m.nms_prune_floor;
    j["score_floor"] = m.score_floor;
    if (!m.level_ranges.empty()) {
        ordered_json ranges = ordered_json::array();
        for (const auto& [lo, hi] : m.level_ranges) {
            ranges.push_back({lo, std::isinf(hi) ? -1.0 : hi});
        }
        j["level_ranges"] = ranges;
    }
    return j;
}

void model_from_json(const ordered_json& j, ModelConfig& m) {
    m.d_model = j.value("d_model", m.d_model);
    m.heads = j.value("heads", m.heads);
    m.levels = j.value("levels", m.levels);
    m.t_max = j.value("t_max", m.t_max);
    m.num_classes = j.value("num_classes", m.num_classes);
    m.d_audio = j.value("d_audio", m.d_audio);
    m.d_visual = j.value("d_visual", m.d_visual);
    m.n1 = j.value("n1", m.n1);
    m.n2 = j.value("n2", m.n2);
    m.moe_layers = j.value("moe_layers", m.moe_layers);
    m.num_experts = j.value("num_experts", m.num_experts);
    m.alpha1 = j.value("alpha1", m.alpha1);
    m.alpha2 = j.value("alpha2", m.alpha2);
    m.alpha3 = j.value("alpha3", m.alpha3);
    m.gumbel_tau_start = j.value("gumbel_tau_start", m.gumbel_tau_start);
    m.gumbel_tau_end = j.value("gumbel_tau_end", m.gumbel_tau_end);
    m.focal_alpha = j.value("focal_alpha", m.focal_alpha);
    m.focal_gamma = j.value("focal_gamma", m.focal_gamma);
    m.nms_sigma = j.value("nms_sigma", m.nms_sigma);
    m.nms_prune_floor = j.value("nms_prune_floor", m.nms_prune_floor);
    m.score_floor = j.value("score_floor", m.score_floor);
    m.level_ranges.clear();
    if (j.contains("level_ranges")) {
        for (const auto& r : j.at("level_ranges")) {
            const double lo = r.at(0).get<double>();
            double hi = r.at(1).get<double>();
            if (hi < 0.0) hi = std::numeric_limits<double>::infinity();
            m.level_ranges.emplace_back(lo, hi);
        }
    }
}

ordered_json synth_to_json(const SynthConfig& s) {
    ordered_json j;
    j["train_videos"] = s.train_videos;
    j["val_videos"] = s.val_videos;
    j["test_videos"] = s.test_videos;
    j["t_min"] = s.t_min;
    j["t_max"] = s.t_max;
    j["d_audio"] = s.d_audio;
    j["d_visual"] = s.d_visual;
    j["num_classes"] = s.num_classes;
    j["events_min"] = s.events_min;
    j["events_max"] = s.events_max;
    j["event_len_min"] = s.event_len_min;
    j["event_len_max"] = s.event_len_max;
    j["proto_amplitude"] = s.proto_amplitude;
    j["proto_noise"] = s.proto_noise;
    j["bg_noise"] = s.bg_noise;
    ordered_json pairs = ordered_json::array();
    for (const auto& co : s.co_occurrence) {
        ordered_json p;
        p["class_a"] = co.class_a;
        p["class_b"] = co.class_b;
        p["prob"] = co.prob;
        p["lag_min"] = co.lag_min;
        p["lag_max"] = co.lag_max;
        pairs.push_back(p);
    }
    j["co_occurrence"] = pairs;
    j["seed"] = s.seed;
    return j;
}

void synth_from_json(const ordered_json& j, SynthConfig& s) {
    s.train_videos = j.value("train_videos", s.train_videos);
    s.val_videos = j.value("val_videos", s.val_videos);
    s.test_videos = j.value("test_videos", s.test_videos);
    s.t_min = j.value("t_min", s.t_min);
    s.t_max = j.value("t_max", s.t_max);
    s.d_audio = j.value("d_audio", s.d_audio);
    s.d_visual = j.value("d_visual", s.d_visual);
    s.num_classes = j.value("num_classes", s.num_classes);
    s.events_min = j.value("events_min", s.events_min);
    s.events_max = j.value("events_max", s.events_max);
    s.event_len_min = j.value("event_len_min", s.event_len_min);
    s.event_len_max = j.value("event_len_max", s.event_len_max);
    s.proto_amplitude = j.value("proto_amplitude", s.proto_amplitude);
    s.proto_noise = j.value("proto_noise", s.proto_noise);
    s.bg_noise = j.value("bg_noise", s.bg_noise);
    if (j.contains("co_occurrence")) {
        s.co_occurrence.clear();
        for (const auto& p : j.at("co_occurrence")) {
            CoOccurrence co;
            co.class_a = p.at("class_a").get<int>();
            co.class_b = p.at("class_b").get<int>();
            co.prob = p.at("prob").get<double>();
            co.lag_min = p.value("lag_min", co.lag_min);
            co.lag_max = p.value("lag_max", co.lag_max);
            s.co_occurrence.push_back(co);
        }
    }
    s.seed = j.value("seed", s.seed);
}

} // namespace

std::string run_config_to_json(const RunConfig& cfg) {
    ordered_json j;
    j["model"] = model_to_json(cfg.model);
    j["synth"] = synth_to_json(cfg.synth);
    ordered_json t;
    t["epochs"] = cfg.epochs;
    t["warmup_epochs"] = cfg.warmup_epochs;
    t["batch_size"] = cfg.batch_size;
    t["lr"] = cfg.lr;
    t["weight_decay"] = cfg.weight_decay;
    j["train"] = t;
    j["seed"] = cfg.seed;
    j["data_dir"] = cfg.data_dir;
    j["out_dir"] = cfg.out_dir;
    return j.dump(2) + "\n";
}

RunConfig run_config_from_json(const std::string& text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("config: ") + e.what());
    }
    RunConfig cfg;
    try {
        if (j.contains("model")) model_from_json(j.at("model"), cfg.model);
        if (j.contains("synth")) synth_from_json(j.at("synth"), cfg.synth);
        if (j.contains("train")) {
            const auto& t = j.at("train");
            cfg.epochs = t.value("epochs", cfg.epochs);
            cfg.warmup_epochs = t.value("warmup_epochs", cfg.warmup_epochs);
            cfg.batch_size = t.value("batch_size", cfg.batch_size);
            cfg.lr = t.value("lr", cfg.lr);
            cfg.weight_decay = t.value("weight_decay", cfg.weight_decay);
        }
        cfg.seed = j.value("seed", cfg.seed);
        cfg.data_dir = j.value("data_dir", cfg.data_dir);
        cfg.out_dir = j.value("out_dir", cfg.out_dir);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("config: ") + e.what());
    }
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return run_config_from_json(buf.str());
}

void save_run_config(const RunConfig& cfg, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("config: cannot write " + path);
    out << run_config_to_json(cfg);
}

} // namespace avloc
