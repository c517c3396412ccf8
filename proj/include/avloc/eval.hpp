#pragma once

// Candidate decoding, multi-class Gaussian Soft-NMS, and the tIoU / AP / mAP
// evaluator. AP uses greedy score-order matching against unmatched same-class
// ground truth and all-point PR interpolation; candidates and ground truth are
// pooled dataset-wide per class. Ties in score break by insertion order.

#include <map>
#include <string>
#include <vector>

#include "avloc/data.hpp"
#include "avloc/layout.hpp"

namespace avloc {

struct Candidate {
    int class_id = 0;
    double t_start = 0.0;
    double t_end = 0.0;
    double score = 0.0;
    int level = 0;
};

// All detections of one video, score-descending after Soft-NMS.
struct VideoDetections {
    std::string id;
    std::vector<Candidate> detections;
    std::vector<int> route;
};

struct EvalReport {
    std::vector<double> thresholds;          // 0.1 .. 0.9
    std::map<std::string, double> map_at;    // key = threshold formatted "0.x"
    double avg_map = 0.0;
    std::vector<std::vector<double>> expert_usage; // per layer, per expert
};

double tiou(double a_start, double a_end, double b_start, double b_end);

// Emits one candidate per (position, class) with p >= score_floor; boundaries
// are decoded as center -+ distance * level stride, clamped to [0, t_len].
// Zero-length intervals after clamping are discarded.
std::vector<Candidate> decode_candidates(const std::vector<float>& p, const std::vector<float>& reg,
                                         int num_classes, const PyramidLayout& layout, double score_floor,
                                         double t_len);

// Gaussian Soft-NMS: same-class scores decay by exp(-tIoU^2 / sigma); decayed
// scores below prune_floor drop. Output sorted score-descending.
std::vector<Candidate> soft_nms(const std::vector<Candidate>& cands, double sigma, double prune_floor);

// AP for one class at one threshold over pooled per-video candidate lists.
// `gt_count` is the number of ground-truth events of the class. Candidate
// lists and ground truth are per video so matches never cross videos.
struct ApInstance {
    std::vector<Candidate> detections;         // one video's detections of the class
    std::vector<EventAnnotation> ground_truth; // same video's events of the class
};

double average_precision(const std::vector<ApInstance>& instances, double threshold);

// mAP at each threshold plus their mean; classes without ground truth are
// skipped from the class mean.
EvalReport mean_ap(const std::vector<VideoDetections>& detections, const std::vector<VideoSample>& ground_truth,
                   int num_classes, const std::vector<double>& thresholds);

std::vector<double> default_thresholds(); // 0.1 : 0.1 : 0.9

void write_detections_jsonl(const std::vector<VideoDetections>& detections, const std::string& path);
void write_routes_jsonl(const std::vector<VideoDetections>& detections, const std::string& path);
void write_report_json(const EvalReport& report, const std::string& path);
void write_report_table(const EvalReport& report, const std::string& path);
std::string report_table(const EvalReport& report);

} // namespace avloc
