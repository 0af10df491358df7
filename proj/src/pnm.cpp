#include "fvae/image_io.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace fvae {

void write_pnm(const PnmImage& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out.good()) throw std::runtime_error("write_pnm: cannot open '" + path + "' for writing");
    out << (img.channels == 3 ? "P6" : "P5") << "\n"
        << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.bytes.data()),
              static_cast<std::streamsize>(img.bytes.size()));
    if (!out.good()) throw std::runtime_error("write_pnm: short write to '" + path + "'");
}

PnmImage read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in.good()) throw std::runtime_error("read_pnm: cannot open '" + path + "'");
    std::string magic;
    in >> magic;
    if (magic != "P5" && magic != "P6")
        throw std::runtime_error("read_pnm: '" + path + "' is not a binary PGM/PPM (magic '" +
                                 magic + "')");
    PnmImage img;
    img.channels = magic == "P6" ? 3 : 1;
    int64_t maxval = 0;
    in >> img.width >> img.height >> maxval;
    if (maxval != 255) throw std::runtime_error("read_pnm: only maxval 255 supported");
    in.get();  // single whitespace after header
    img.bytes.resize(static_cast<size_t>(img.channels * img.height * img.width));
    in.read(reinterpret_cast<char*>(img.bytes.data()), static_cast<std::streamsize>(img.bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.bytes.size()))
        throw std::runtime_error("read_pnm: '" + path + "' truncated");
    return img;
}

}  // namespace fvae
