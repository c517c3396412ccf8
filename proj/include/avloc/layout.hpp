#pragma once

// Multi-resolution sequence layout: level l (0-based) is the input sequence
// downsampled by stride 2^l; all levels are concatenated along time into one
// length-T_l axis. The same layout drives the fusion pyramid, the aggregation
// masks, target assignment and candidate decoding.

#include <vector>

#include "avloc/errors.hpp"
#include "avloc/tensor.hpp"

namespace avloc {

struct PyramidLayout {
    int levels = 0;
    int t_max = 0;
    int total_len = 0;               // T_l
    std::vector<int> level_lengths;  // per level
    std::vector<int> level_offsets;  // start row of each level in the T_l axis
    std::vector<int> level_of;       // [T_l]
    std::vector<double> center;      // [T_l] position time in snippet units
    std::vector<double> stride;      // [T_l]
    Mask valid;                      // [T_l]
    std::vector<Mask> level_valid;   // per level, strided subsample of the base mask
};

inline PyramidLayout make_pyramid_layout(int t_max, int levels, const Mask& base_valid) {
    if (levels < 1) throw ConfigError("pyramid: need at least one level");
    if (t_max % (1 << (levels - 1)) != 0) {
        throw ConfigError("pyramid: t_max " + std::to_string(t_max) + " not divisible by 2^(levels-1) = " +
                          std::to_string(1 << (levels - 1)));
    }
    if (static_cast<int>(base_valid.size()) != t_max) {
        throw ShapeError("pyramid: mask length " + std::to_string(base_valid.size()) +
                         " does not match t_max " + std::to_string(t_max));
    }
    PyramidLayout lo;
    lo.levels = levels;
    lo.t_max = t_max;
    for (int l = 0; l < levels; ++l) {
        const int s = 1 << l;
        const int len = t_max / s;
        lo.level_offsets.push_back(lo.total_len);
        lo.level_lengths.push_back(len);
        Mask lv(static_cast<size_t>(len));
        for (int i = 0; i < len; ++i) {
            lv[static_cast<size_t>(i)] = base_valid[static_cast<size_t>(i) * s];
            lo.level_of.push_back(l);
            lo.center.push_back(static_cast<double>(i) * s);
            lo.stride.push_back(static_cast<double>(s));
            lo.valid.push_back(lv[static_cast<size_t>(i)]);
        }
        lo.level_valid.push_back(std::move(lv));
        lo.total_len += len;
    }
    return lo;
}

} // namespace avloc
