#include "arfs/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace arfs {

namespace {

std::array<uint32_t, 256> make_crc_table() {
    std::array<uint32_t, 256> table{};
    for (uint32_t i = 0; i < 256; ++i) {
        uint32_t c = i;
        for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
        table[i] = c;
    }
    return table;
}

constexpr char kMagic[9] = "ARFSCKPT";
constexpr uint16_t kVersion = 1;
constexpr uint8_t kDtypeF32 = 0;

void put_bytes(std::string& out, const void* p, size_t n) {
    out.append(reinterpret_cast<const char*>(p), n);
}

template <typename T>
void put_le(std::string& out, T v) {
    uint8_t buf[sizeof(T)];
    for (size_t i = 0; i < sizeof(T); ++i) buf[i] = uint8_t(uint64_t(v) >> (8 * i));
    put_bytes(out, buf, sizeof(T));
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > buf.size()) throw std::runtime_error("checkpoint truncated");
    }
    template <typename T>
    T get_le() {
        need(sizeof(T));
        uint64_t v = 0;
        for (size_t i = 0; i < sizeof(T); ++i) v |= uint64_t(uint8_t(buf[pos + i])) << (8 * i);
        pos += sizeof(T);
        return T(v);
    }
    std::string get_str(size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace

uint32_t crc32_ieee(const uint8_t* data, size_t len, uint32_t seed) {
    static const std::array<uint32_t, 256> table = make_crc_table();
    uint32_t c = seed ^ 0xffffffffu;
    for (size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xffu] ^ (c >> 8);
    return c ^ 0xffffffffu;
}

void write_checkpoint(const std::string& path, const CheckpointData& ckpt) {
    if (ckpt.tag != "ar" && ckpt.tag != "bidir") {
        throw std::invalid_argument("checkpoint tag must be \"ar\" or \"bidir\"");
    }
    std::string buf;
    buf.append(kMagic, 8);
    put_le(buf, kVersion);
    put_le(buf, uint8_t(ckpt.tag.size()));
    buf.append(ckpt.tag);
    put_le(buf, uint32_t(ckpt.config_text.size()));
    buf.append(ckpt.config_text);
    put_le(buf, uint32_t(ckpt.tensors.size()));
    for (const NamedTensor& t : ckpt.tensors) {
        put_le(buf, uint32_t(t.name.size()));
        buf.append(t.name);
        put_le(buf, uint8_t(t.dims.size()));
        size_t count = 1;
        for (uint32_t d : t.dims) {
            put_le(buf, d);
            count *= d;
        }
        if (count != t.data.size()) throw std::invalid_argument("tensor dims do not match payload");
        put_le(buf, kDtypeF32);
        for (float v : t.data) {
            uint32_t bits;
            std::memcpy(&bits, &v, 4);
            put_le(buf, bits);
        }
    }
    put_le(buf, uint32_t(16));
    put_le(buf, ckpt.rng_key);
    put_le(buf, ckpt.rng_counter);
    put_le(buf, ckpt.step);
    const uint32_t crc = crc32_ieee(reinterpret_cast<const uint8_t*>(buf.data()), buf.size());
    put_le(buf, crc);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out.write(buf.data(), std::streamsize(buf.size()));
    if (!out) throw std::runtime_error("write failed: " + path);
}

CheckpointData read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 12 + 4 || std::memcmp(buf.data(), kMagic, 8) != 0) {
        throw std::runtime_error("not a checkpoint file: " + path);
    }
    {
        const uint32_t stored = uint32_t(uint8_t(buf[buf.size() - 4])) |
                                uint32_t(uint8_t(buf[buf.size() - 3])) << 8 |
                                uint32_t(uint8_t(buf[buf.size() - 2])) << 16 |
                                uint32_t(uint8_t(buf[buf.size() - 1])) << 24;
        const uint32_t actual =
            crc32_ieee(reinterpret_cast<const uint8_t*>(buf.data()), buf.size() - 4);
        if (stored != actual) throw std::runtime_error("checkpoint CRC mismatch: " + path);
    }

    Reader r{buf, 8};
    CheckpointData ckpt;
    const uint16_t version = r.get_le<uint16_t>();
    if (version != kVersion) throw std::runtime_error("unsupported checkpoint version");
    ckpt.tag = r.get_str(r.get_le<uint8_t>());
    ckpt.config_text = r.get_str(r.get_le<uint32_t>());
    const uint32_t count = r.get_le<uint32_t>();
    ckpt.tensors.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        t.name = r.get_str(r.get_le<uint32_t>());
        const uint8_t rank = r.get_le<uint8_t>();
        size_t n = 1;
        for (uint8_t j = 0; j < rank; ++j) {
            t.dims.push_back(r.get_le<uint32_t>());
            n *= t.dims.back();
        }
        const uint8_t dtype = r.get_le<uint8_t>();
        if (dtype != kDtypeF32) throw std::runtime_error("unknown tensor dtype in checkpoint");
        t.data.resize(n);
        for (size_t j = 0; j < n; ++j) {
            const uint32_t bits = r.get_le<uint32_t>();
            std::memcpy(&t.data[j], &bits, 4);
        }
        ckpt.tensors.push_back(std::move(t));
    }
    const uint32_t rng_len = r.get_le<uint32_t>();
    if (rng_len != 16) throw std::runtime_error("unexpected rng state size");
    ckpt.rng_key = r.get_le<uint64_t>();
    ckpt.rng_counter = r.get_le<uint64_t>();
    ckpt.step = r.get_le<uint64_t>();
    return ckpt;
}

}  // namespace arfs
