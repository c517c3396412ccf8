#include "avloc/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace avloc {

double tiou(double a_start, double a_end, double b_start, double b_end) {
    const double inter = std::max(0.0, std::min(a_end, b_end) - std::max(a_start, b_start));
    if (inter <= 0.0) return 0.0;
    const double uni = (a_end - a_start) + (b_end - b_start) - inter;
    return inter / uni;
}

std::vector<Candidate> decode_candidates(const std::vector<float>& p, const std::vector<float>& reg,
                                         int num_classes, const PyramidLayout& layout, double score_floor,
                                         double t_len) {
    const int tl = layout.total_len;
    if (static_cast<int>(p.size()) != tl * num_classes || static_cast<int>(reg.size()) != tl * 2 * num_classes) {
        throw ShapeError("decode: head outputs do not match layout (" + std::to_string(p.size()) + ", " +
                         std::to_string(reg.size()) + " vs T_l " + std::to_string(tl) + ")");
    }
    std::vector<Candidate> out;
    for (int i = 0; i < tl; ++i) {
        if (!layout.valid[static_cast<size_t>(i)]) continue;
        const double center = layout.center[static_cast<size_t>(i)];
        const double stride = layout.stride[static_cast<size_t>(i)];
        for (int c = 0; c < num_classes; ++c) {
            const double score = static_cast<double>(p[static_cast<size_t>(i) * num_classes + c]);
            if (score < score_floor) continue;
            const double ds = static_cast<double>(reg[static_cast<size_t>(i) * 2 * num_classes + 2 * c]);
            const double de = static_cast<double>(reg[static_cast<size_t>(i) * 2 * num_classes + 2 * c + 1]);
            Candidate cand;
            cand.class_id = c;
            cand.t_start = std::max(0.0, center - ds * stride);
            cand.t_end = std::min(t_len, center + de * stride);
            cand.score = score;
            cand.level = layout.level_of[static_cast<size_t>(i)];
            if (cand.t_end <= cand.t_start) continue;
            out.push_back(cand);
        }
    }
    return out;
}

std::vector<Candidate> soft_nms(const std::vector<Candidate>& cands, double sigma, double prune_floor) {
    // Per class; candidates of other classes never interact.
    std::vector<Candidate> out;
    std::vector<Candidate> pool = cands;
    std::vector<char> alive(pool.size(), 1);
    // Stable selection: highest current score, earliest insertion on ties.
    while (true) {
        int best = -1;
        for (size_t i = 0; i < pool.size(); ++i) {
            if (!alive[i]) continue;
            if (best < 0 || pool[i].score > pool[static_cast<size_t>(best)].score) best = static_cast<int>(i);
        }
        if (best < 0) break;
        const Candidate chosen = pool[static_cast<size_t>(best)];
        alive[static_cast<size_t>(best)] = 0;
        out.push_back(chosen);
        for (size_t i = 0; i < pool.size(); ++i) {
            if (!alive[i] || pool[i].class_id != chosen.class_id) continue;
            const double ov = tiou(chosen.t_start, chosen.t_end, pool[i].t_start, pool[i].t_end);
            if (ov <= 0.0) continue;
            pool[i].score *= std::exp(-(ov * ov) / sigma);
            if (pool[i].score < prune_floor) alive[i] = 0;
        }
    }
    std::stable_sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
    return out;
}

namespace {

struct ScoredMatch {
    double score;
    long order; // global insertion order, for deterministic tie-breaking
    bool tp;
};

// Greedy matching of one video's detections (score-descending, insertion
// order on ties) against its unmatched ground truth.
void match_instance(const ApInstance& inst, double threshold, long& order_counter,
                    std::vector<ScoredMatch>& out) {
    std::vector<size_t> idx(inst.detections.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
        return inst.detections[a].score > inst.detections[b].score;
    });
    std::vector<char> used(inst.ground_truth.size(), 0);
    for (size_t i : idx) {
        const Candidate& det = inst.detections[i];
        double best_ov = 0.0;
        int best_gt = -1;
        for (size_t g = 0; g < inst.ground_truth.size(); ++g) {
            if (used[g]) continue;
            const auto& gt = inst.ground_truth[g];
            const double ov = tiou(det.t_start, det.t_end, gt.t_start, gt.t_end);
            if (ov > best_ov) {
                best_ov = ov;
                best_gt = static_cast<int>(g);
            }
        }
        ScoredMatch m;
        m.score = det.score;
        m.order = order_counter++;
        m.tp = best_gt >= 0 && best_ov >= threshold;
        if (m.tp) used[static_cast<size_t>(best_gt)] = 1;
        out.push_back(m);
    }
}

} // namespace

double average_precision(const std::vector<ApInstance>& instances, double threshold) {
    size_t gt_total = 0;
    for (const auto& inst : instances) gt_total += inst.ground_truth.size();
    if (gt_total == 0) return 0.0; // callers skip GT-free classes
    std::vector<ScoredMatch> matches;
    long order = 0;
    for (const auto& inst : instances) match_instance(inst, threshold, order, matches);
    if (matches.empty()) return 0.0;
    std::sort(matches.begin(), matches.end(), [](const ScoredMatch& a, const ScoredMatch& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.order < b.order;
    });
    // All-point interpolation: area under the running-max precision envelope.
    const size_t n = matches.size();
    std::vector<double> precision(n), recall(n);
    double tp = 0.0, fp = 0.0;
    for (size_t i = 0; i < n; ++i) {
        if (matches[i].tp) tp += 1.0; else fp += 1.0;
        precision[i] = tp / (tp + fp);
        recall[i] = tp / static_cast<double>(gt_total);
    }
    for (size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double ap = recall[0] * precision[0];
    for (size_t i = 1; i < n; ++i) ap += (recall[i] - recall[i - 1]) * precision[i];
    return ap;
}

std::vector<double> default_thresholds() {
    std::vector<double> t;
    for (int i = 1; i <= 9; ++i) t.push_back(i / 10.0);
    return t;
}

namespace {

std::string threshold_key(double t) {
    char buf[8];
    std::snprintf(buf, sizeof(buf), "%.1f", t);
    return buf;
}

} // namespace

EvalReport mean_ap(const std::vector<VideoDetections>& detections, const std::vector<VideoSample>& ground_truth,
                   int num_classes, const std::vector<double>& thresholds) {
    if (detections.size() != ground_truth.size()) {
        throw ContractError("mean_ap: detections for " + std::to_string(detections.size()) +
                            " videos but ground truth for " + std::to_string(ground_truth.size()));
    }
    // Per class, one ApInstance per video.
    std::vector<std::vector<ApInstance>> per_class(static_cast<size_t>(num_classes));
    std::vector<size_t> gt_counts(static_cast<size_t>(num_classes), 0);
    for (size_t vi = 0; vi < detections.size(); ++vi) {
        if (detections[vi].id != ground_truth[vi].id) {
            throw ContractError("mean_ap: video order mismatch at index " + std::to_string(vi));
        }
        for (int c = 0; c < num_classes; ++c) {
            ApInstance inst;
            for (const auto& d : detections[vi].detections)
                if (d.class_id == c) inst.detections.push_back(d);
            for (const auto& e : ground_truth[vi].events)
                if (e.class_id == c) inst.ground_truth.push_back(e);
            gt_counts[static_cast<size_t>(c)] += inst.ground_truth.size();
            per_class[static_cast<size_t>(c)].push_back(std::move(inst));
        }
    }
    EvalReport report;
    report.thresholds = thresholds;
    double sum_over_thresholds = 0.0;
    for (double tau : thresholds) {
        double sum_ap = 0.0;
        int classes_with_gt = 0;
        for (int c = 0; c < num_classes; ++c) {
            if (gt_counts[static_cast<size_t>(c)] == 0) continue;
            sum_ap += average_precision(per_class[static_cast<size_t>(c)], tau);
            ++classes_with_gt;
        }
        const double m = classes_with_gt > 0 ? sum_ap / classes_with_gt : 0.0;
        report.map_at[threshold_key(tau)] = m;
        sum_over_thresholds += m;
    }
    report.avg_map = thresholds.empty() ? 0.0 : sum_over_thresholds / static_cast<double>(thresholds.size());
    return report;
}

void write_detections_jsonl(const std::vector<VideoDetections>& detections, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("write_detections: cannot write " + path);
    for (const auto& v : detections) {
        nlohmann::ordered_json j;
        j["id"] = v.id;
        nlohmann::ordered_json dets = nlohmann::ordered_json::array();
        for (const auto& d : v.detections) {
            nlohmann::ordered_json jd;
            jd["class"] = d.class_id;
            jd["start"] = d.t_start;
            jd["end"] = d.t_end;
            jd["score"] = d.score;
            dets.push_back(jd);
        }
        j["detections"] = dets;
        out << j.dump() << "\n";
    }
}

void write_routes_jsonl(const std::vector<VideoDetections>& detections, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("write_routes: cannot write " + path);
    for (const auto& v : detections) {
        nlohmann::ordered_json j;
        j["id"] = v.id;
        j["route"] = v.route;
        out << j.dump() << "\n";
    }
}

void write_report_json(const EvalReport& report, const std::string& path) {
    nlohmann::ordered_json j;
    nlohmann::ordered_json m;
    for (double t : report.thresholds) {
        const std::string key = threshold_key(t);
        m[key] = report.map_at.at(key);
    }
    j["map"] = m;
    j["avg_map"] = report.avg_map;
    if (!report.expert_usage.empty()) j["expert_usage"] = report.expert_usage;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("write_report: cannot write " + path);
    out << j.dump(2) << "\n";
}

std::string report_table(const EvalReport& report) {
    std::ostringstream os;
    os << "tIoU   ";
    for (double t : report.thresholds) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%6.1f", t);
        os << buf;
    }
    os << "   Avg.\n";
    os << "mAP    ";
    for (double t : report.thresholds) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%6.3f", report.map_at.at(threshold_key(t)));
        os << buf;
    }
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%7.3f", report.avg_map);
    os << buf << "\n";
    return os.str();
}

void write_report_table(const EvalReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("write_report: cannot write " + path);
    out << report_table(report);
}

} // namespace avloc
