#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "lapflow/common.hpp"

namespace lapflow {

// Pixel/latent image in [-1, 1], row-major (y, x, channel). The generator
// operates directly on pixels; there is no separate compressed latent space.
struct LatentImage {
    int64_t height = 0, width = 0, channels = 0;
    std::vector<double> data;

    LatentImage() = default;
    LatentImage(int64_t h, int64_t w, int64_t c)
        : height(h), width(w), channels(c), data(static_cast<size_t>(h * w * c), 0.0) {}

    double& at(int64_t y, int64_t x, int64_t c) {
        return data[static_cast<size_t>((y * width + x) * channels + c)];
    }
    double at(int64_t y, int64_t x, int64_t c) const {
        return data[static_cast<size_t>((y * width + x) * channels + c)];
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }

    void clamp() {
        for (auto& v : data) v = std::max(-1.0, std::min(1.0, v));
    }
};

inline LatentImage avg_pool(const LatentImage& img, int64_t kh, int64_t kw) {
    require(kh >= 1 && kw >= 1, "avg_pool: kernel must be >= 1");
    require(img.height % kh == 0 && img.width % kw == 0, "avg_pool: dims not divisible by kernel");
    LatentImage out(img.height / kh, img.width / kw, img.channels);
    const double inv = 1.0 / static_cast<double>(kh * kw);
    for (int64_t y = 0; y < out.height; ++y)
        for (int64_t x = 0; x < out.width; ++x)
            for (int64_t c = 0; c < img.channels; ++c) {
                double s = 0.0;
                for (int64_t dy = 0; dy < kh; ++dy)
                    for (int64_t dx = 0; dx < kw; ++dx) s += img.at(y * kh + dy, x * kw + dx, c);
                out.at(y, x, c) = s * inv;
            }
    return out;
}

// Non-overlapping PxP patches in row-major order; within a patch the layout is
// (dy, dx, channel). Returns patch vectors of length P*P*channels.
inline std::vector<std::vector<double>> extract_patches(const LatentImage& img, int64_t p) {
    require(img.height % p == 0 && img.width % p == 0, "extract_patches: dims not divisible");
    const int64_t gy = img.height / p, gx = img.width / p;
    std::vector<std::vector<double>> out;
    out.reserve(static_cast<size_t>(gy * gx));
    for (int64_t py = 0; py < gy; ++py)
        for (int64_t px = 0; px < gx; ++px) {
            std::vector<double> patch(static_cast<size_t>(p * p * img.channels));
            size_t i = 0;
            for (int64_t dy = 0; dy < p; ++dy)
                for (int64_t dx = 0; dx < p; ++dx)
                    for (int64_t c = 0; c < img.channels; ++c)
                        patch[i++] = img.at(py * p + dy, px * p + dx, c);
            out.push_back(std::move(patch));
        }
    return out;
}

inline LatentImage crop(const LatentImage& img, int64_t y0, int64_t x0, int64_t h, int64_t w) {
    require(y0 >= 0 && x0 >= 0 && y0 + h <= img.height && x0 + w <= img.width, "crop: out of bounds");
    LatentImage out(h, w, img.channels);
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            for (int64_t c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y0 + y, x0 + x, c);
    return out;
}

// Binary PPM (P6, 3 channels) / PGM (P5, 1 channel). [-1,1] maps linearly to
// 0..255 with round-to-nearest.
inline void write_pnm(const LatentImage& img, const std::string& path) {
    require(img.channels == 1 || img.channels == 3, "write_pnm: 1 or 3 channels only");
    std::ofstream f(path, std::ios::binary);
    require_io(f.good(), "write_pnm: cannot open " + path);
    f << (img.channels == 3 ? "P6" : "P5") << "\n" << img.width << " " << img.height << "\n255\n";
    for (double v : img.data) {
        double u = (std::max(-1.0, std::min(1.0, v)) + 1.0) * 0.5 * 255.0;
        unsigned char b = static_cast<unsigned char>(u + 0.5);
        f.write(reinterpret_cast<const char*>(&b), 1);
    }
    require_io(f.good(), "write_pnm: write failed for " + path);
}

inline LatentImage read_pnm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require_io(f.good(), "read_pnm: cannot open " + path);
    std::string magic;
    f >> magic;
    require_io(magic == "P6" || magic == "P5", "read_pnm: unsupported format in " + path);
    int64_t w, h, maxv;
    f >> w >> h >> maxv;
    require_io(maxv == 255, "read_pnm: expected 8-bit data");
    f.get();  // single whitespace after header
    const int64_t c = magic == "P6" ? 3 : 1;
    LatentImage img(h, w, c);
    std::vector<unsigned char> raw(static_cast<size_t>(w * h * c));
    f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    require_io(f.gcount() == static_cast<std::streamsize>(raw.size()), "read_pnm: truncated file");
    for (size_t i = 0; i < raw.size(); ++i) img.data[i] = static_cast<double>(raw[i]) / 255.0 * 2.0 - 1.0;
    return img;
}

inline double image_mse(const LatentImage& a, const LatentImage& b) {
    require(a.height == b.height && a.width == b.width && a.channels == b.channels,
            "image_mse: shape mismatch");
    double s = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        s += d * d;
    }
    return s / static_cast<double>(a.data.size());
}

}  // namespace lapflow
