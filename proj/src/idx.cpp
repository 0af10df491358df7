#include "fvae/dataset.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace fvae {

namespace {

uint32_t be32(const uint8_t* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
           (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

}  // namespace

IdxContents read_idx_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in.good()) throw std::invalid_argument("load_idx: cannot open '" + path + "'");
    std::vector<uint8_t> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (raw.size() < 4)
        throw std::invalid_argument("load_idx: '" + path + "' is empty or truncated (" +
                                    std::to_string(raw.size()) + " bytes)");
    IdxContents idx;
    idx.magic = be32(raw.data());
    if (idx.magic != 0x00000801u && idx.magic != 0x00000803u) {
        char hex[16];
        std::snprintf(hex, sizeof(hex), "0x%08x", idx.magic);
        throw std::invalid_argument("load_idx: '" + path + "' has unsupported magic " + hex +
                                    " (expected 0x00000801 or 0x00000803)");
    }
    const size_t ndim = idx.magic & 0xffu;
    if (raw.size() < 4 + 4 * ndim)
        throw std::invalid_argument("load_idx: '" + path + "' truncated in dimension header");
    size_t off = 4;
    int64_t total = 1;
    for (size_t d = 0; d < ndim; ++d) {
        const uint32_t dim = be32(raw.data() + off);
        off += 4;
        if (dim == 0) throw std::invalid_argument("load_idx: '" + path + "' has a zero dimension");
        idx.dims.push_back(static_cast<int64_t>(dim));
        total *= static_cast<int64_t>(dim);
    }
    if (raw.size() - off != static_cast<size_t>(total))
        throw std::invalid_argument("load_idx: '" + path + "' payload is " +
                                    std::to_string(raw.size() - off) + " bytes, expected " +
                                    std::to_string(total));
    idx.bytes.assign(raw.begin() + static_cast<std::ptrdiff_t>(off), raw.end());
    return idx;
}

}  // namespace fvae
