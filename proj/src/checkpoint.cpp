#include "avloc/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "avloc/errors.hpp"

namespace avloc {

namespace {

constexpr char kMagic[4] = {'D', 'A', 'V', 'C'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ofstream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::ifstream& in, const std::string& path) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (in.gcount() != 4) throw FormatError(path + ": truncated checkpoint");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_record(std::ofstream& out, const std::string& name, const std::vector<int>& shape,
                const float* data, size_t n) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(shape.size()));
    for (int d : shape) put_u32(out, static_cast<std::uint32_t>(d));
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * 4));
}

struct Record {
    std::vector<int> shape;
    std::vector<float> data;
};

std::map<std::string, Record> read_records(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError(path + ": bad checkpoint magic");
    }
    const std::uint32_t version = get_u32(in, path);
    if (version != kVersion) {
        throw VersionError(path + ": checkpoint version " + std::to_string(version) + ", expected " +
                           std::to_string(kVersion));
    }
    const std::uint32_t count = get_u32(in, path);
    std::map<std::string, Record> records;
    for (std::uint32_t r = 0; r < count; ++r) {
        const std::uint32_t name_len = get_u32(in, path);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (in.gcount() != static_cast<std::streamsize>(name_len)) throw FormatError(path + ": truncated record name");
        Record rec;
        const std::uint32_t rank = get_u32(in, path);
        std::uint64_t numel = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            const std::uint32_t d = get_u32(in, path);
            rec.shape.push_back(static_cast<int>(d));
            numel *= d;
        }
        rec.data.resize(numel);
        in.read(reinterpret_cast<char*>(rec.data.data()), static_cast<std::streamsize>(numel * 4));
        if (static_cast<std::uint64_t>(in.gcount()) != numel * 4) {
            throw FormatError(path + ": truncated payload for record " + name);
        }
        records.emplace(std::move(name), std::move(rec));
    }
    return records;
}

} // namespace

void save_checkpoint(ParamStoreT<float>& store, const CheckpointMeta& meta, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("checkpoint: cannot write " + path);
    const auto params = store.all();
    out.write(kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(3 * params.size() + 2));
    for (const Param* p : params) put_record(out, "p/" + p->name, p->shape, p->value.data(), p->value.size());
    for (const Param* p : params) put_record(out, "m/" + p->name, p->shape, p->adam_m.data(), p->adam_m.size());
    for (const Param* p : params) put_record(out, "v/" + p->name, p->shape, p->adam_v.data(), p->adam_v.size());
    const float step = static_cast<float>(meta.global_step);
    const float epoch = static_cast<float>(meta.epoch);
    put_record(out, "meta/global_step", {1}, &step, 1);
    put_record(out, "meta/epoch", {1}, &epoch, 1);
    if (!out) throw IoError("checkpoint: short write to " + path);
}

CheckpointMeta load_checkpoint(ParamStoreT<float>& store, const std::string& path, bool with_optimizer_state) {
    const auto records = read_records(path);
    CheckpointMeta meta;
    for (Param* p : store.all()) {
        const auto it = records.find("p/" + p->name);
        if (it == records.end()) {
            throw VersionError(path + ": checkpoint has no record for parameter " + p->name +
                               " (checkpoint/config mismatch)");
        }
        if (it->second.shape != p->shape) {
            throw VersionError(path + ": parameter " + p->name + " has shape " + shape_str(it->second.shape) +
                               " in the checkpoint but " + shape_str(p->shape) + " in the model");
        }
        p->value = it->second.data;
        if (with_optimizer_state) {
            const auto mit = records.find("m/" + p->name);
            const auto vit = records.find("v/" + p->name);
            if (mit == records.end() || vit == records.end()) {
                throw VersionError(path + ": checkpoint lacks optimizer state for " + p->name);
            }
            p->adam_m = mit->second.data;
            p->adam_v = vit->second.data;
        }
    }
    const auto step_it = records.find("meta/global_step");
    if (step_it != records.end() && !step_it->second.data.empty()) {
        meta.global_step = static_cast<std::int64_t>(step_it->second.data[0]);
    }
    const auto epoch_it = records.find("meta/epoch");
    if (epoch_it != records.end() && !epoch_it->second.data.empty()) {
        meta.epoch = static_cast<int>(epoch_it->second.data[0]);
    }
    if (with_optimizer_state) {
        for (Param* p : store.all()) p->step_count = meta.global_step;
    }
    return meta;
}

} // namespace avloc
