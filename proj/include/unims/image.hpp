#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "unims/errors.hpp"

namespace unims {

// Pixel values are reals in [0,1], stored row-major as (y, x, channel).
struct ImageRaster {
    int height = 0;
    int width = 0;
    int channels = 0;  // 1 or 3
    std::vector<double> pixels;

    double at(int y, int x, int c) const {
        return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    double& at(int y, int x, int c) {
        return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
    }

    void validate() const {
        if (height <= 0 || width <= 0 || (channels != 1 && channels != 3)) {
            throw FormatError("image: bad dimensions " + std::to_string(height) + "x" +
                              std::to_string(width) + "x" + std::to_string(channels));
        }
        if (pixels.size() != static_cast<size_t>(height) * width * channels) {
            throw FormatError("image: pixel count does not match dimensions");
        }
    }
};

// Nearest-neighbor resize to a square target resolution.
inline ImageRaster resize_nearest(const ImageRaster& img, int resolution) {
    img.validate();
    if (resolution <= 0) throw InputError("resize: resolution must be positive");
    if (img.height == resolution && img.width == resolution) return img;
    ImageRaster out;
    out.height = resolution;
    out.width = resolution;
    out.channels = img.channels;
    out.pixels.resize(static_cast<size_t>(resolution) * resolution * img.channels);
    for (int y = 0; y < resolution; ++y) {
        int sy = std::min(img.height - 1, static_cast<int>(static_cast<int64_t>(y) * img.height / resolution));
        for (int x = 0; x < resolution; ++x) {
            int sx = std::min(img.width - 1, static_cast<int>(static_cast<int64_t>(x) * img.width / resolution));
            for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(sy, sx, c);
        }
    }
    return out;
}

// Slice into (H/P)*(W/P) patches, row-major patch order; each patch is the
// flattened P*P*channels block in (y, x, channel) order.
inline std::vector<std::vector<double>> patchify(const ImageRaster& img, int patch_size) {
    img.validate();
    if (patch_size <= 0 || img.height % patch_size != 0 || img.width % patch_size != 0) {
        throw ShapeError("patchify: dimensions " + std::to_string(img.height) + "x" +
                         std::to_string(img.width) + " not divisible by patch size " +
                         std::to_string(patch_size));
    }
    const int py = img.height / patch_size, px = img.width / patch_size;
    std::vector<std::vector<double>> patches;
    patches.reserve(static_cast<size_t>(py) * px);
    for (int by = 0; by < py; ++by) {
        for (int bx = 0; bx < px; ++bx) {
            std::vector<double> patch;
            patch.reserve(static_cast<size_t>(patch_size) * patch_size * img.channels);
            for (int y = 0; y < patch_size; ++y)
                for (int x = 0; x < patch_size; ++x)
                    for (int c = 0; c < img.channels; ++c)
                        patch.push_back(img.at(by * patch_size + y, bx * patch_size + x, c));
            patches.push_back(std::move(patch));
        }
    }
    return patches;
}

inline ImageRaster unpatchify(const std::vector<std::vector<double>>& patches, int patch_size,
                              int height, int width, int channels) {
    ImageRaster out;
    out.height = height;
    out.width = width;
    out.channels = channels;
    out.pixels.assign(static_cast<size_t>(height) * width * channels, 0.0);
    const int py = height / patch_size, px = width / patch_size;
    if (static_cast<size_t>(py) * px != patches.size()) {
        throw ShapeError("unpatchify: patch count mismatch");
    }
    for (int by = 0; by < py; ++by) {
        for (int bx = 0; bx < px; ++bx) {
            const auto& patch = patches[static_cast<size_t>(by) * px + bx];
            size_t k = 0;
            for (int y = 0; y < patch_size; ++y)
                for (int x = 0; x < patch_size; ++x)
                    for (int c = 0; c < channels; ++c)
                        out.at(by * patch_size + y, bx * patch_size + x, c) = patch[k++];
        }
    }
    return out;
}

// --------------------------------------------------------------------------
// File formats: binary PPM (P6) and the raw float container UIMG
// (magic "UIMG", u32 height/width/channels little-endian, f32 pixels).
// --------------------------------------------------------------------------

inline void write_ppm(const ImageRaster& img, const std::string& path) {
    img.validate();
    if (img.channels != 3) throw InputError("ppm: only 3-channel images");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw InputError("ppm: cannot open " + path + " for writing");
    f << "P6\n" << img.width << " " << img.height << "\n255\n";
    for (double v : img.pixels) {
        double clamped = std::min(1.0, std::max(0.0, v));
        f.put(static_cast<char>(static_cast<unsigned char>(std::lround(clamped * 255.0))));
    }
}

inline ImageRaster read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("ppm: cannot open " + path);
    std::string magic;
    f >> magic;
    if (magic != "P6") throw FormatError("ppm: bad magic in " + path);
    auto next_int = [&f, &path]() {
        // skip whitespace and '#' comments
        int c = f.get();
        while (c != EOF && (std::isspace(c) || c == '#')) {
            if (c == '#') {
                while (c != EOF && c != '\n') c = f.get();
            }
            c = f.get();
        }
        int val = 0;
        bool any = false;
        while (c != EOF && std::isdigit(c)) {
            val = val * 10 + (c - '0');
            any = true;
            c = f.get();
        }
        if (!any) throw FormatError("ppm: truncated header in " + path);
        return val;
    };
    ImageRaster img;
    img.width = next_int();
    img.height = next_int();
    int maxval = next_int();
    if (maxval != 255) throw FormatError("ppm: only maxval 255 supported");
    img.channels = 3;
    const size_t count = static_cast<size_t>(img.width) * img.height * 3;
    std::vector<unsigned char> raw(count);
    f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(count));
    if (static_cast<size_t>(f.gcount()) != count) throw FormatError("ppm: truncated pixel data in " + path);
    img.pixels.resize(count);
    for (size_t i = 0; i < count; ++i) img.pixels[i] = raw[i] / 255.0;
    img.validate();
    return img;
}

inline void write_uimg(const ImageRaster& img, const std::string& path) {
    img.validate();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw InputError("uimg: cannot open " + path + " for writing");
    f.write("UIMG", 4);
    auto put_u32 = [&f](uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                              static_cast<unsigned char>((v >> 16) & 0xff),
                              static_cast<unsigned char>((v >> 24) & 0xff)};
        f.write(reinterpret_cast<char*>(b), 4);
    };
    put_u32(static_cast<uint32_t>(img.height));
    put_u32(static_cast<uint32_t>(img.width));
    put_u32(static_cast<uint32_t>(img.channels));
    for (double v : img.pixels) {
        float fv = static_cast<float>(v);
        uint32_t bits;
        std::memcpy(&bits, &fv, 4);
        put_u32(bits);
    }
}

inline ImageRaster read_uimg(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("uimg: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (f.gcount() != 4 || std::memcmp(magic, "UIMG", 4) != 0) {
        throw FormatError("uimg: bad magic in " + path);
    }
    auto get_u32 = [&f, &path]() {
        unsigned char b[4];
        f.read(reinterpret_cast<char*>(b), 4);
        if (f.gcount() != 4) throw FormatError("uimg: truncated file " + path);
        return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
               (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
    };
    ImageRaster img;
    img.height = static_cast<int>(get_u32());
    img.width = static_cast<int>(get_u32());
    img.channels = static_cast<int>(get_u32());
    if (img.height <= 0 || img.width <= 0 || img.height > 1 << 16 || img.width > 1 << 16) {
        throw FormatError("uimg: implausible dimensions in " + path);
    }
    const size_t count = static_cast<size_t>(img.height) * img.width * img.channels;
    img.pixels.resize(count);
    for (size_t i = 0; i < count; ++i) {
        uint32_t bits = get_u32();
        float fv;
        std::memcpy(&fv, &bits, 4);
        img.pixels[i] = fv;
    }
    img.validate();
    return img;
}

inline ImageRaster load_image(const std::string& path) {
    if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".ppm") == 0) return read_ppm(path);
    return read_uimg(path);
}

}  // namespace unims
