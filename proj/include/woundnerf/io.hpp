#pragma once

#include <array>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <png.h>

#include "woundnerf/image.hpp"

namespace wnf {

namespace detail {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

inline FilePtr open_file(const std::string& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f) throw std::runtime_error("cannot open " + path);
    return f;
}

}  // namespace detail

inline void ensure_dir(const std::string& path) {
    std::filesystem::create_directories(path);
}

// ---------------------------------------------------------------- PNG

// Class-index mask as 8-bit palette PNG; pixel bytes are the class indices.
inline void write_mask_png(const std::string& path, const LabeledImage& mask) {
    mask.validate();
    auto file = detail::open_file(path, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("png write failed: " + path);
    }
    png_init_io(png, file.get());
    png_set_compression_level(png, 6);
    png_set_IHDR(png, info, mask.width, mask.height, 8, PNG_COLOR_TYPE_PALETTE,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    auto pal = label_palette();
    png_color palette[kNumClasses];
    for (int i = 0; i < kNumClasses; i++)
        palette[i] = {pal[i][0], pal[i][1], pal[i][2]};
    png_set_PLTE(png, info, palette, kNumClasses);
    png_write_info(png, info);
    for (int r = 0; r < mask.height; r++)
        png_write_row(png, const_cast<png_bytep>(mask.labels.data() + size_t(r) * mask.width));
    png_write_end(png, info);
    png_destroy_write_struct(&png, &info);
}

inline LabeledImage read_mask_png(const std::string& path) {
    auto file = detail::open_file(path, "rb");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("png read failed: " + path);
    }
    png_init_io(png, file.get());
    png_read_info(png, info);
    if (png_get_color_type(png, info) != PNG_COLOR_TYPE_PALETTE) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("not an indexed mask png: " + path);
    }
    if (png_get_bit_depth(png, info) < 8) png_set_packing(png);
    png_read_update_info(png, info);
    LabeledImage mask(int(png_get_image_width(png, info)), int(png_get_image_height(png, info)));
    for (int r = 0; r < mask.height; r++)
        png_read_row(png, mask.labels.data() + size_t(r) * mask.width, nullptr);
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    mask.validate();
    return mask;
}

inline uint8_t to_u8(double v) {
    double q = v * 255.0 + 0.5;
    if (q < 0) q = 0;
    if (q > 255) q = 255;
    return uint8_t(q);
}

inline void write_rgb_png(const std::string& path, const Grid<std::array<uint8_t, 3>>& img) {
    auto file = detail::open_file(path, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("png write failed: " + path);
    }
    png_init_io(png, file.get());
    png_set_compression_level(png, 6);
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<uint8_t> row(size_t(img.width) * 3);
    for (int r = 0; r < img.height; r++) {
        for (int c = 0; c < img.width; c++) {
            const auto& px = img.at(r, c);
            row[c * 3 + 0] = px[0];
            row[c * 3 + 1] = px[1];
            row[c * 3 + 2] = px[2];
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, info);
    png_destroy_write_struct(&png, &info);
}

inline void write_rgb_png(const std::string& path, const RgbImage& img) {
    Grid<std::array<uint8_t, 3>> q(img.width, img.height);
    for (int r = 0; r < img.height; r++)
        for (int c = 0; c < img.width; c++) {
            const Rgb& px = img.at(r, c);
            q.at(r, c) = {to_u8(px.r), to_u8(px.g), to_u8(px.b)};
        }
    write_rgb_png(path, q);
}

inline Grid<std::array<uint8_t, 3>> read_rgb_png(const std::string& path) {
    auto file = detail::open_file(path, "rb");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("png read failed: " + path);
    }
    png_init_io(png, file.get());
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
        png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    Grid<std::array<uint8_t, 3>> img(int(png_get_image_width(png, info)),
                                     int(png_get_image_height(png, info)));
    std::vector<uint8_t> row(size_t(img.width) * 3);
    for (int r = 0; r < img.height; r++) {
        png_read_row(png, row.data(), nullptr);
        for (int c = 0; c < img.width; c++)
            img.at(r, c) = {row[c * 3], row[c * 3 + 1], row[c * 3 + 2]};
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

// ---------------------------------------------------------------- WNDF float grids

// Binary float32 grid: 16-byte header (magic "WNDF", u32 width, u32 height,
// u32 channels), then row-major channel-interleaved float32 samples.
inline void write_wndf(const std::string& path, int width, int height, int channels,
                       const std::vector<float>& samples) {
    if (samples.size() != size_t(width) * height * channels)
        throw std::invalid_argument("wndf sample count mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path);
    out.write("WNDF", 4);
    uint32_t dims[3] = {uint32_t(width), uint32_t(height), uint32_t(channels)};
    out.write(reinterpret_cast<const char*>(dims), 12);
    out.write(reinterpret_cast<const char*>(samples.data()), samples.size() * sizeof(float));
    if (!out) throw std::runtime_error("short write: " + path);
}

inline std::vector<float> read_wndf(const std::string& path, int& width, int& height,
                                    int& channels) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    char magic[4];
    uint32_t dims[3];
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(dims), 12);
    if (!in || std::memcmp(magic, "WNDF", 4) != 0)
        throw std::runtime_error("bad WNDF header: " + path);
    width = int(dims[0]);
    height = int(dims[1]);
    channels = int(dims[2]);
    std::vector<float> samples(size_t(width) * height * channels);
    in.read(reinterpret_cast<char*>(samples.data()), samples.size() * sizeof(float));
    if (!in) throw std::runtime_error("short WNDF payload: " + path);
    return samples;
}

inline void write_depth_wndf(const std::string& path, const DepthImage& depth) {
    write_wndf(path, depth.width, depth.height, 1, depth.data);
}

inline DepthImage read_depth_wndf(const std::string& path) {
    int w, h, c;
    auto samples = read_wndf(path, w, h, c);
    if (c != 1) throw std::runtime_error("expected 1-channel WNDF: " + path);
    DepthImage img(w, h);
    img.data = std::move(samples);
    return img;
}

inline void write_prob_wndf(const std::string& path, const ProbImage& prob) {
    std::vector<float> samples;
    samples.reserve(prob.size() * kNumClasses);
    for (const auto& px : prob.data)
        for (double v : px) samples.push_back(float(v));
    write_wndf(path, prob.width, prob.height, kNumClasses, samples);
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return s;
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path);
    out << text;
    if (!out) throw std::runtime_error("short write: " + path);
}

}  // namespace wnf
