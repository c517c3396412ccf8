#pragma once

// Supervision targets. Guidance targets are per-snippet multi-label vectors
// (pyramid-level labels take the union over each position's stride window);
// detection targets follow the anchor-free convention: a pyramid position is
// positive for an event iff its center time lies inside the event and the
// larger of its two boundary distances falls in the level's assignment range.
// Overlapping same-class events resolve to the one with the smaller extent.

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "avloc/config.hpp"
#include "avloc/data.hpp"
#include "avloc/layout.hpp"
#include "avloc/tensor.hpp"

namespace avloc {

struct SampleTargets {
    // [t_max x C]: class c active at snippet t (stage-1/2 guidance).
    std::vector<std::uint8_t> snippet_labels;
    // [T_l x C]: union of snippet labels over each position's stride window
    // (stage-3 guidance).
    std::vector<std::uint8_t> pyramid_labels;
    // [T_l x C]: detection-head classification targets.
    std::vector<std::uint8_t> det_labels;
    // Positive locations with ground-truth intervals for the regression loss.
    std::vector<RegTarget> positives;
};

inline SampleTargets assign_targets(const std::vector<EventAnnotation>& events, const PyramidLayout& layout,
                                    const std::vector<std::pair<double, double>>& ranges, int num_classes) {
    if (static_cast<int>(ranges.size()) != layout.levels) {
        throw ConfigError("assign_targets: " + std::to_string(ranges.size()) + " ranges for " +
                          std::to_string(layout.levels) + " levels");
    }
    SampleTargets tg;
    const int tm = layout.t_max;
    const int tl = layout.total_len;
    tg.snippet_labels.assign(static_cast<size_t>(tm) * num_classes, 0);
    tg.pyramid_labels.assign(static_cast<size_t>(tl) * num_classes, 0);
    tg.det_labels.assign(static_cast<size_t>(tl) * num_classes, 0);

    for (const auto& e : events) {
        for (int t = 0; t < tm; ++t) {
            if (t >= e.t_start && t < e.t_end) {
                tg.snippet_labels[static_cast<size_t>(t) * num_classes + e.class_id] = 1;
            }
        }
    }

    for (int i = 0; i < tl; ++i) {
        const int level = layout.level_of[static_cast<size_t>(i)];
        const int s = static_cast<int>(layout.stride[static_cast<size_t>(i)]);
        const double t_center = layout.center[static_cast<size_t>(i)];
        const int w0 = static_cast<int>(t_center);
        for (int c = 0; c < num_classes; ++c) {
            for (int t = w0; t < std::min(w0 + s, tm); ++t) {
                if (tg.snippet_labels[static_cast<size_t>(t) * num_classes + c]) {
                    tg.pyramid_labels[static_cast<size_t>(i) * num_classes + c] = 1;
                    break;
                }
            }
        }
        if (!layout.valid[static_cast<size_t>(i)]) continue;

        const auto [lo, hi] = ranges[static_cast<size_t>(level)];
        // Per class, the admissible event with the smallest extent wins.
        std::vector<double> best_extent(static_cast<size_t>(num_classes), std::numeric_limits<double>::infinity());
        std::vector<const EventAnnotation*> best(static_cast<size_t>(num_classes), nullptr);
        for (const auto& e : events) {
            if (t_center < e.t_start || t_center >= e.t_end) continue;
            const double ds = t_center - e.t_start;
            const double de = e.t_end - t_center;
            const double m = std::max(ds, de);
            if (m < lo || m >= hi) continue;
            const double extent = e.t_end - e.t_start;
            if (extent < best_extent[static_cast<size_t>(e.class_id)]) {
                best_extent[static_cast<size_t>(e.class_id)] = extent;
                best[static_cast<size_t>(e.class_id)] = &e;
            }
        }
        for (int c = 0; c < num_classes; ++c) {
            const EventAnnotation* e = best[static_cast<size_t>(c)];
            if (!e) continue;
            tg.det_labels[static_cast<size_t>(i) * num_classes + c] = 1;
            RegTarget rt;
            rt.position = i;
            rt.class_id = c;
            rt.stride = layout.stride[static_cast<size_t>(i)];
            rt.center = t_center;
            rt.gt_start = e->t_start;
            rt.gt_end = e->t_end;
            tg.positives.push_back(rt);
        }
    }
    return tg;
}

} // namespace avloc
