#pragma once

// Synthetic paired audio/visual streams with planted, possibly overlapping,
// class-correlated events, plus the on-disk feature and annotation formats.
//
// Feature file: magic "DAVF", u32 version=1, u32 T, u32 D, then T*D
// little-endian 32-bit floats, row-major.
// Annotation file: JSON lines, one video per line:
//   {"id": ..., "T": ..., "events": [{"class": c, "start": s, "end": e}, ...]}

#include <cstdint>
#include <string>
#include <vector>

#include "avloc/config.hpp"
#include "avloc/tensor.hpp"

namespace avloc {

struct EventAnnotation {
    int class_id = 0;
    double t_start = 0.0; // snippet units, inclusive
    double t_end = 0.0;   // snippet units, exclusive
};

struct VideoSample {
    std::string id;
    int t_len = 0; // snippet count T
    std::vector<float> audio;  // [T x d_audio]
    std::vector<float> visual; // [T x d_visual]
    int d_audio = 0;
    int d_visual = 0;
    std::vector<EventAnnotation> events;
};

// Sample padded or cropped to the model length; mask is true on original
// positions.
struct PaddedSample {
    std::string id;
    int t_orig = 0;
    std::vector<float> audio;  // [t_max x d_audio]
    std::vector<float> visual; // [t_max x d_visual]
    int d_audio = 0;
    int d_visual = 0;
    Mask valid; // [t_max]
    std::vector<EventAnnotation> events;
};

struct DatasetSplit {
    std::vector<VideoSample> train;
    std::vector<VideoSample> val;
    std::vector<VideoSample> test;

    const std::vector<VideoSample>& split(const std::string& name) const;
};

// Fully seed-determined; split ids are pairwise disjoint.
DatasetSplit generate_dataset(const SynthConfig& cfg);

// Per-class, per-modality prototype vectors used by the generator (unit
// direction scaled to cfg.proto_amplitude); exposed for the margin tests.
std::vector<std::vector<float>> class_prototypes(const SynthConfig& cfg, bool audio);

PaddedSample pad_or_crop(const VideoSample& sample, int t_max);

void save_features(const std::vector<float>& data, int t_len, int dim, const std::string& path);
// Returns row-major data; t_len/dim read from the header.
std::vector<float> load_features(const std::string& path, int& t_len, int& dim);

void save_annotations(const std::vector<VideoSample>& videos, const std::string& path);
// Loads annotations and the referenced feature files from `feature_dir`.
std::vector<VideoSample> load_split(const std::string& annotation_path, const std::string& feature_dir);

// Writes the three splits: <dir>/{train,val,test}.jsonl plus
// <dir>/features/<id>.{audio,visual}.davf.
void save_dataset(const DatasetSplit& ds, const std::string& dir);
DatasetSplit load_dataset(const std::string& dir);

} // namespace avloc
