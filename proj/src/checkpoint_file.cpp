#include "fvae/checkpoint.hpp"

#include <cstdio>
#include <fstream>

namespace fvae {

namespace {

constexpr char kMagic[4] = {'F', 'V', 'A', 'E'};
constexpr uint32_t kSupportedVersion = 1;

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

uint32_t get_u32(const uint8_t* p) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
    return v;
}

struct Cursor {
    const uint8_t* p;
    size_t left;
    const std::string& path;

    void need(size_t n) const {
        if (left < n)
            throw std::runtime_error("checkpoint: '" + path + "' truncated");
    }
    uint32_t u32() {
        need(4);
        const uint32_t v = get_u32(p);
        p += 4;
        left -= 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        const uint64_t v = detail::get_u64_le(p);
        p += 8;
        left -= 8;
        return v;
    }
    uint8_t u8() {
        need(1);
        const uint8_t v = *p;
        ++p;
        --left;
        return v;
    }
    std::vector<uint8_t> take(size_t n) {
        need(n);
        std::vector<uint8_t> out(p, p + n);
        p += n;
        left -= n;
        return out;
    }
};

}  // namespace

uint32_t crc32_ieee(const uint8_t* data, size_t len, uint32_t seed) {
    static uint32_t table[256];
    static bool ready = false;
    if (!ready) {
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            table[i] = c;
        }
        ready = true;
    }
    uint32_t crc = seed ^ 0xffffffffu;
    for (size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xffu] ^ (crc >> 8);
    return crc ^ 0xffffffffu;
}

void CheckpointFile::write(const std::string& path) const {
    std::vector<uint8_t> buf;
    buf.insert(buf.end(), kMagic, kMagic + 4);
    put_u32(buf, version);
    put_u32(buf, phase);
    put_u32(buf, static_cast<uint32_t>(entries.size()));
    for (const auto& e : entries) {
        put_u32(buf, static_cast<uint32_t>(e.name.size()));
        buf.insert(buf.end(), e.name.begin(), e.name.end());
        buf.push_back(static_cast<uint8_t>(e.dtype));
        buf.push_back(static_cast<uint8_t>(e.dims.size()));
        for (int64_t d : e.dims) detail::put_u64_le(buf, static_cast<uint64_t>(d));
        buf.insert(buf.end(), e.bytes.begin(), e.bytes.end());
    }
    put_u32(buf, crc32_ieee(buf.data(), buf.size()));

    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out.good())
            throw std::runtime_error("checkpoint: cannot open '" + tmp + "' for writing");
        out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!out.good()) throw std::runtime_error("checkpoint: short write to '" + tmp + "'");
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("checkpoint: cannot rename '" + tmp + "' to '" + path + "'");
}

CheckpointFile CheckpointFile::read(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in.good()) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 16) throw std::runtime_error("checkpoint: '" + path + "' truncated");
    if (std::memcmp(buf.data(), kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: '" + path + "' has bad magic (not an FVAE file)");
    const uint32_t stored_crc = get_u32(buf.data() + buf.size() - 4);
    const uint32_t actual_crc = crc32_ieee(buf.data(), buf.size() - 4);
    if (stored_crc != actual_crc)
        throw std::runtime_error("checkpoint: '" + path + "' CRC mismatch (corrupt file)");

    CheckpointFile f;
    Cursor c{buf.data() + 4, buf.size() - 8, path};
    f.version = c.u32();
    if (f.version != kSupportedVersion)
        throw std::runtime_error("checkpoint: '" + path + "' unknown version " +
                                 std::to_string(f.version));
    f.phase = c.u32();
    const uint32_t count = c.u32();
    for (uint32_t i = 0; i < count; ++i) {
        CheckpointEntry e;
        const uint32_t name_len = c.u32();
        const std::vector<uint8_t> name = c.take(name_len);
        e.name.assign(name.begin(), name.end());
        e.dtype = static_cast<CkptDtype>(c.u8());
        const uint8_t rank = c.u8();
        for (uint8_t d = 0; d < rank; ++d) e.dims.push_back(static_cast<int64_t>(c.u64()));
        const size_t elem = e.dtype == CkptDtype::f32 ? 4 : 8;
        e.bytes = c.take(static_cast<size_t>(e.count()) * elem);
        f.entries.push_back(std::move(e));
    }
    return f;
}

}  // namespace fvae
