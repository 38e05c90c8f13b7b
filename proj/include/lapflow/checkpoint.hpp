#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "lapflow/nn.hpp"
#include "lapflow/tensor.hpp"

namespace lapflow {

// Versioned binary container of named double arrays. Layout (little-endian):
//   magic "LFCK", u32 version, u64 entry count, then per entry:
//   u32 name length, name bytes, u32 rank, u64 dims..., f64 data.
// Key names are the parameter names produced by each module's params()
// enumeration (documented in docs/formats.md).
constexpr uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path,
                            const std::vector<std::pair<std::string, const Tensor*>>& entries) {
    std::ofstream f(path, std::ios::binary);
    require_io(f.good(), "checkpoint: cannot open " + path + " for writing");
    f.write("LFCK", 4);
    uint32_t version = kCheckpointVersion;
    f.write(reinterpret_cast<const char*>(&version), sizeof(version));
    uint64_t count = entries.size();
    f.write(reinterpret_cast<const char*>(&count), sizeof(count));
    for (const auto& [name, t] : entries) {
        ensure_finite(*t, "checkpoint entry " + name);
        uint32_t nlen = static_cast<uint32_t>(name.size());
        f.write(reinterpret_cast<const char*>(&nlen), sizeof(nlen));
        f.write(name.data(), nlen);
        uint32_t rank = static_cast<uint32_t>(t->shape.size());
        f.write(reinterpret_cast<const char*>(&rank), sizeof(rank));
        for (int64_t d : t->shape) {
            uint64_t ud = static_cast<uint64_t>(d);
            f.write(reinterpret_cast<const char*>(&ud), sizeof(ud));
        }
        f.write(reinterpret_cast<const char*>(t->data.data()),
                static_cast<std::streamsize>(t->data.size() * sizeof(double)));
    }
    require_io(f.good(), "checkpoint: write failed for " + path);
}

inline void save_checkpoint(const std::string& path, const ParamRefs& params) {
    std::vector<std::pair<std::string, const Tensor*>> entries;
    for (const auto& p : params) entries.emplace_back(p.name, p.tensor);
    save_checkpoint(path, entries);
}

inline std::map<std::string, Tensor> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require_io(f.good(), "checkpoint: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    require_io(f.gcount() == 4 && std::string(magic, 4) == "LFCK", "checkpoint: bad magic in " + path);
    uint32_t version = 0;
    f.read(reinterpret_cast<char*>(&version), sizeof(version));
    require_io(version == kCheckpointVersion, "checkpoint: unsupported version");
    uint64_t count = 0;
    f.read(reinterpret_cast<char*>(&count), sizeof(count));
    std::map<std::string, Tensor> out;
    for (uint64_t i = 0; i < count; ++i) {
        uint32_t nlen = 0;
        f.read(reinterpret_cast<char*>(&nlen), sizeof(nlen));
        std::string name(nlen, '\0');
        f.read(name.data(), nlen);
        uint32_t rank = 0;
        f.read(reinterpret_cast<char*>(&rank), sizeof(rank));
        std::vector<int64_t> shape(rank);
        for (uint32_t d = 0; d < rank; ++d) {
            uint64_t ud = 0;
            f.read(reinterpret_cast<char*>(&ud), sizeof(ud));
            shape[d] = static_cast<int64_t>(ud);
        }
        Tensor t(shape);
        f.read(reinterpret_cast<char*>(t.data.data()),
               static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        require_io(f.good(), "checkpoint: truncated entry " + name);
        out.emplace(std::move(name), std::move(t));
    }
    return out;
}

// Copies stored arrays into the given parameter set; every parameter must be
// present with a matching shape.
inline void apply_checkpoint(const std::map<std::string, Tensor>& stored, const ParamRefs& params) {
    for (const auto& p : params) {
        auto it = stored.find(p.name);
        require_io(it != stored.end(), "checkpoint: missing key " + p.name);
        require_io(it->second.shape == p.tensor->shape, "checkpoint: shape mismatch for " + p.name);
        p.tensor->data = it->second.data;
    }
}

}  // namespace lapflow
