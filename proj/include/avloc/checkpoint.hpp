#pragma once

// Checkpoint format: magic "DAVC", u32 version, u32 record count, then flat
// named records (u32 name length, name bytes, u32 rank, u32 dims[rank],
// little-endian f32 payload). Parameter values live under "p/<name>", Adam
// moments under "m/" and "v/", counters under "meta/". Loading for inference
// reads only "p/" records; any shape or name mismatch against the model is a
// version error.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "avloc/nn.hpp"

namespace avloc {

struct CheckpointMeta {
    std::int64_t global_step = 0;
    int epoch = 0;
};

void save_checkpoint(ParamStoreT<float>& store, const CheckpointMeta& meta, const std::string& path);

// strict=true additionally restores Adam moments and counters (training
// resume); strict=false restores parameter values only.
CheckpointMeta load_checkpoint(ParamStoreT<float>& store, const std::string& path, bool with_optimizer_state);

} // namespace avloc
