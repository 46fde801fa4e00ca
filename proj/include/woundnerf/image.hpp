#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "woundnerf/common.hpp"

namespace wnf {

// Row-major 2D grid; pixel (row, col).
template <typename T>
struct Grid {
    int width = 0, height = 0;
    std::vector<T> data;

    Grid() = default;
    Grid(int w, int h, T fill = T{}) : width(w), height(h), data(size_t(w) * h, fill) {}

    T& at(int row, int col) { return data[size_t(row) * width + col]; }
    const T& at(int row, int col) const { return data[size_t(row) * width + col]; }
    bool in_bounds(int row, int col) const {
        return row >= 0 && row < height && col >= 0 && col < width;
    }
    size_t size() const { return data.size(); }
    bool operator==(const Grid& o) const {
        return width == o.width && height == o.height && data == o.data;
    }
};

constexpr int kNumClasses = 6;
constexpr uint8_t kBackground = 0;
constexpr uint8_t kGranulation = 1;
constexpr uint8_t kSlough = 2;
constexpr uint8_t kNecrotic = 3;
constexpr uint8_t kEpithelia = 4;
constexpr uint8_t kUnknown = 5;

inline const char* class_name(int c) {
    static const char* names[kNumClasses] = {"background", "granulation", "slough",
                                             "necrotic",   "epithelia",   "unknown"};
    if (c < 0 || c >= kNumClasses) throw std::invalid_argument("class id out of range");
    return names[c];
}

enum class NoiseTag { clean, corrupted };

// Per-view class-index mask plus provenance.
struct LabeledImage {
    int width = 0, height = 0;
    std::vector<uint8_t> labels;  // row-major, values in {0..5}
    int view_id = -1;
    NoiseTag noise_tag = NoiseTag::clean;
    uint64_t noise_seed = 0;
    uint64_t noise_config_hash = 0;

    LabeledImage() = default;
    LabeledImage(int w, int h, uint8_t fill = 0)
        : width(w), height(h), labels(size_t(w) * h, fill) {}

    uint8_t& at(int row, int col) { return labels[size_t(row) * width + col]; }
    uint8_t at(int row, int col) const { return labels[size_t(row) * width + col]; }
    bool in_bounds(int row, int col) const {
        return row >= 0 && row < height && col >= 0 && col < width;
    }
    size_t size() const { return labels.size(); }

    void validate() const {
        if (labels.size() != size_t(width) * height)
            throw std::runtime_error("label grid size mismatch");
        for (uint8_t v : labels)
            if (v >= kNumClasses) throw std::runtime_error("label out of {0..5}");
    }
};

struct Rgb {
    double r = 0, g = 0, b = 0;
    bool operator==(const Rgb&) const = default;
};

using RgbImage = Grid<Rgb>;
using DepthImage = Grid<float>;   // ray distance; max float = miss sentinel
using ProbImage = Grid<std::array<double, kNumClasses>>;

constexpr float kDepthMiss = std::numeric_limits<float>::max();

// Fixed display palette for the class indices (documented in the README).
inline std::array<std::array<uint8_t, 3>, kNumClasses> label_palette() {
    return {{{20, 20, 24},      // background
             {204, 63, 63},     // granulation
             {229, 199, 82},    // slough
             {77, 51, 38},      // necrotic
             {240, 178, 191},   // epithelia
             {219, 94, 199}}};  // unknown
}

}  // namespace wnf
