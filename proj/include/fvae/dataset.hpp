#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "fvae/rng.hpp"
#include "fvae/tensor.hpp"

namespace fvae {

// Images are stored pre-dequantization as k/256 with k in 0..255, so every
// value sits in [0, 1).
template <typename T>
struct Dataset {
    Tensor<T> images;         // (N, C, H, W)
    std::vector<int> labels;  // optional, e.g. bar orientation
    std::string source;
    std::string split = "all";

    int64_t size() const { return images.rank() == 4 ? images.shape[0] : 0; }
};

template <typename T>
struct DataSplit {
    Dataset<T> train, test;
};

// Deterministic shuffled split; train and test are disjoint by construction.
template <typename T>
DataSplit<T> split_dataset(const Dataset<T>& ds, double test_frac, RngStream& rng) {
    const int64_t n = ds.size();
    int64_t n_test = static_cast<int64_t>(static_cast<double>(n) * test_frac);
    if (n_test < 1) n_test = 1;
    if (n_test >= n) throw std::invalid_argument("split_dataset: test fraction leaves no train data");
    const std::vector<int64_t> perm = rng.permutation(n);
    const int64_t c = ds.images.shape[1], h = ds.images.shape[2], w = ds.images.shape[3];
    const int64_t per = c * h * w;
    DataSplit<T> out;
    auto take = [&](int64_t from, int64_t count, const char* tag) {
        Dataset<T> d;
        d.images = Tensor<T>({count, c, h, w});
        d.source = ds.source;
        d.split = tag;
        for (int64_t i = 0; i < count; ++i) {
            const int64_t src = perm[static_cast<size_t>(from + i)];
            std::copy(ds.images.ptr() + src * per, ds.images.ptr() + (src + 1) * per,
                      d.images.ptr() + i * per);
            if (!ds.labels.empty()) d.labels.push_back(ds.labels[static_cast<size_t>(src)]);
        }
        return d;
    };
    out.train = take(0, n - n_test, "train");
    out.test = take(n - n_test, n_test, "test");
    return out;
}

// (k + u)/256 with u ~ Uniform[0,1) per element; output strictly in [0, 1).
template <typename T>
Tensor<T> dequantize(const Tensor<T>& images, RngStream& rng) {
    Tensor<T> out(images.shape);
    for (int64_t i = 0; i < images.numel(); ++i)
        out[i] = images[i] + static_cast<T>(rng.uniform()) * T(1.0 / 256.0);
    return out;
}

template <typename T>
Tensor<T> quantize_to_grid(const Tensor<T>& v) {
    Tensor<T> out(v.shape);
    for (int64_t i = 0; i < v.numel(); ++i) {
        double k = std::floor(static_cast<double>(v[i]) * 256.0);
        if (k < 0) k = 0;
        if (k > 255) k = 255;
        out[i] = static_cast<T>(k / 256.0);
    }
    return out;
}

// ---- synthetic datasets -----------------------------------------------------

// blobs: two Gaussian bumps with random centers/widths per image.
// bars: one horizontal (label 0) or vertical (label 1) stripe.
// Deterministic given the stream state.
template <typename T>
Dataset<T> synth_dataset(const std::string& kind, int64_t n, int64_t height, int64_t width,
                         RngStream& rng) {
    if (n < 4) throw std::invalid_argument("synth_dataset: n must be >= 4, got " + std::to_string(n));
    if (height < 4 || width < 4)
        throw std::invalid_argument("synth_dataset: size must be >= 4x4, got " +
                                    std::to_string(height) + "x" + std::to_string(width));
    Dataset<T> ds;
    ds.source = kind;
    ds.images = Tensor<T>({n, 1, height, width});
    if (kind == "blobs") {
        for (int64_t i = 0; i < n; ++i) {
            T* img = ds.images.ptr() + i * height * width;
            for (int blob = 0; blob < 2; ++blob) {
                const double cy = 1.0 + rng.uniform() * (static_cast<double>(height) - 3.0);
                const double cx = 1.0 + rng.uniform() * (static_cast<double>(width) - 3.0);
                const double sigma = 0.7 + rng.uniform() * 0.8;
                const double amp = 0.5 + rng.uniform() * 0.45;
                for (int64_t y = 0; y < height; ++y)
                    for (int64_t x = 0; x < width; ++x) {
                        const double d2 = (static_cast<double>(y) - cy) * (static_cast<double>(y) - cy) +
                                          (static_cast<double>(x) - cx) * (static_cast<double>(x) - cx);
                        img[y * width + x] += static_cast<T>(amp * std::exp(-d2 / (2.0 * sigma * sigma)));
                    }
            }
        }
    } else if (kind == "bars") {
        for (int64_t i = 0; i < n; ++i) {
            T* img = ds.images.ptr() + i * height * width;
            const bool vertical = (rng.next_u64() & 1) != 0;
            ds.labels.push_back(vertical ? 1 : 0);
            const double base = 0.03 + rng.uniform() * 0.03;
            for (int64_t j = 0; j < height * width; ++j) img[j] = static_cast<T>(base);
            const double level = 0.75 + rng.uniform() * 0.2;
            if (vertical) {
                const int64_t col = static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(width));
                for (int64_t y = 0; y < height; ++y) img[y * width + col] = static_cast<T>(level);
            } else {
                const int64_t row = static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(height));
                for (int64_t x = 0; x < width; ++x) img[row * width + x] = static_cast<T>(level);
            }
        }
    } else {
        throw std::invalid_argument("synth_dataset: unknown kind '" + kind +
                                    "' (expected blobs|bars|digits-subset)");
    }
    ds.images = quantize_to_grid(ds.images);
    return ds;
}

// ---- IDX (ubyte) ingestion -----------------------------------------------

struct IdxContents {
    uint32_t magic = 0;
    std::vector<int64_t> dims;
    std::vector<uint8_t> bytes;
};

IdxContents read_idx_file(const std::string& path);

// Parses an IDX ubyte file. Images (magic 0x00000803) come out as
// (N,1,H,W) scaled by 1/256; label files (0x00000801) fill labels only.
template <typename T>
Dataset<T> load_idx(const std::string& path) {
    IdxContents idx = read_idx_file(path);
    Dataset<T> ds;
    ds.source = path;
    if (idx.magic == 0x00000803u) {
        const int64_t n = idx.dims[0], h = idx.dims[1], w = idx.dims[2];
        ds.images = Tensor<T>({n, 1, h, w});
        for (int64_t i = 0; i < ds.images.numel(); ++i)
            ds.images[i] = static_cast<T>(idx.bytes[static_cast<size_t>(i)]) * T(1.0 / 256.0);
    } else {  // 0x00000801
        ds.labels.reserve(idx.bytes.size());
        for (uint8_t b : idx.bytes) ds.labels.push_back(static_cast<int>(b));
    }
    return ds;
}

// First n images of a local IDX file, box-averaged down to (height, width).
template <typename T>
Dataset<T> digits_subset(const std::string& path, int64_t n, int64_t height, int64_t width) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe.good())
        throw std::invalid_argument(
            "digits-subset: no local IDX file at '" + path +
            "'; place an MNIST-style ubyte image file there (no download is performed)");
    probe.close();
    Dataset<T> full = load_idx<T>(path);
    if (full.size() == 0)
        throw std::invalid_argument("digits-subset: '" + path + "' contains no images");
    if (n > full.size()) n = full.size();
    const int64_t src_h = full.images.shape[2], src_w = full.images.shape[3];
    Dataset<T> ds;
    ds.source = "digits-subset:" + path;
    ds.images = Tensor<T>({n, 1, height, width});
    for (int64_t i = 0; i < n; ++i) {
        const T* src = full.images.ptr() + i * src_h * src_w;
        T* dst = ds.images.ptr() + i * height * width;
        for (int64_t y = 0; y < height; ++y)
            for (int64_t x = 0; x < width; ++x) {
                const int64_t y0 = y * src_h / height, y1 = std::max(y0 + 1, (y + 1) * src_h / height);
                const int64_t x0 = x * src_w / width, x1 = std::max(x0 + 1, (x + 1) * src_w / width);
                double acc = 0;
                for (int64_t sy = y0; sy < y1; ++sy)
                    for (int64_t sx = x0; sx < x1; ++sx) acc += static_cast<double>(src[sy * src_w + sx]);
                dst[y * width + x] = static_cast<T>(acc / static_cast<double>((y1 - y0) * (x1 - x0)));
            }
    }
    ds.images = quantize_to_grid(ds.images);
    return ds;
}

}  // namespace fvae
