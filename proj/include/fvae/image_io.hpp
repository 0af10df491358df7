#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fvae/tensor.hpp"

namespace fvae {

// Binary PGM (P5) / PPM (P6), maxval 255. The only export format; bit-exact.
struct PnmImage {
    int64_t channels = 1;  // 1 -> P5, 3 -> P6
    int64_t height = 0;
    int64_t width = 0;
    std::vector<uint8_t> bytes;  // interleaved rows for P6
};

void write_pnm(const PnmImage& img, const std::string& path);
PnmImage read_pnm(const std::string& path);

// Clip to [0,1] and round to nearest at 8-bit write time only.
inline uint8_t to_byte(double v) {
    if (v < 0) v = 0;
    if (v > 1) v = 1;
    const int b = static_cast<int>(v * 255.0 + 0.5);
    return static_cast<uint8_t>(b > 255 ? 255 : b);
}

// (C,H,W) planar float image -> 8-bit PNM.
template <typename T>
PnmImage to_pnm(const Tensor<T>& chw) {
    require_rank("to_pnm", chw, 3);
    const int64_t c = chw.shape[0], h = chw.shape[1], w = chw.shape[2];
    if (c != 1 && c != 3)
        throw std::invalid_argument("to_pnm: expected 1 or 3 channels, got " + shape_str(chw.shape));
    PnmImage img;
    img.channels = c;
    img.height = h;
    img.width = w;
    img.bytes.resize(static_cast<size_t>(c * h * w));
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            for (int64_t ch = 0; ch < c; ++ch)
                img.bytes[static_cast<size_t>((y * w + x) * c + ch)] =
                    to_byte(static_cast<double>(chw[(ch * h + y) * w + x]));
    return img;
}

// Tile a batch (N,C,H,W) row-major into one image with 1-pixel black gutters
// between tiles (none at the border).
template <typename T>
PnmImage tile_grid(const Tensor<T>& batch, int64_t cols) {
    require_rank("tile_grid", batch, 4);
    const int64_t n = batch.shape[0], c = batch.shape[1], h = batch.shape[2], w = batch.shape[3];
    if (cols < 1) throw std::invalid_argument("tile_grid: cols must be >= 1");
    if (cols > n) cols = n;
    const int64_t rows = (n + cols - 1) / cols;
    PnmImage img;
    img.channels = c;
    img.height = rows * h + (rows - 1);
    img.width = cols * w + (cols - 1);
    img.bytes.assign(static_cast<size_t>(img.channels * img.height * img.width), 0);
    for (int64_t i = 0; i < n; ++i) {
        const int64_t r = i / cols, q = i % cols;
        const int64_t oy = r * (h + 1), ox = q * (w + 1);
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x)
                for (int64_t ch = 0; ch < c; ++ch)
                    img.bytes[static_cast<size_t>((((oy + y) * img.width) + ox + x) * c + ch)] =
                        to_byte(static_cast<double>(batch[((i * c + ch) * h + y) * w + x]));
    }
    return img;
}

template <typename T>
void export_grid(const Tensor<T>& batch, int64_t cols, const std::string& path) {
    write_pnm(tile_grid(batch, cols), path);
}

}  // namespace fvae
