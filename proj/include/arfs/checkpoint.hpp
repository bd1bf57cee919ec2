#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace arfs {

// Versioned container for named f32 tensors plus a config block, RNG state
// and step counter. Layout, all little-endian:
//   magic "ARFSCKPT" | version u16 | tag_len u8 | tag | config_len u32 |
//   config utf-8 | tensor_count u32 | per tensor: name_len u32, name,
//   rank u8, dims u32 each, dtype u8 (0 = f32), payload | rng_len u32 |
//   rng bytes | step u64 | crc32 u32 over everything before it.
// Files round-trip bit-exactly; the CRC and dtype are checked on load.

struct NamedTensor {
    std::string name;
    std::vector<uint32_t> dims;
    std::vector<float> data;
};

struct CheckpointData {
    std::string tag;  // "ar" or "bidir"
    std::string config_text;
    std::vector<NamedTensor> tensors;
    uint64_t rng_key = 0;
    uint64_t rng_counter = 0;
    uint64_t step = 0;

    const NamedTensor* find(const std::string& name) const {
        for (const auto& t : tensors) {
            if (t.name == name) return &t;
        }
        return nullptr;
    }
};

uint32_t crc32_ieee(const uint8_t* data, size_t len, uint32_t seed = 0);

void write_checkpoint(const std::string& path, const CheckpointData& ckpt);
CheckpointData read_checkpoint(const std::string& path);

}  // namespace arfs
