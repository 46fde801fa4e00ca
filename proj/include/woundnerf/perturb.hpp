#pragma once

#include <cstdint>
#include <deque>
#include <stdexcept>
#include <string>
#include <vector>

#include "woundnerf/common.hpp"
#include "woundnerf/image.hpp"

namespace wnf {

enum class PerturbKind { erosion_dilation, jitter, half_frames };

struct PerturbConfig {
    PerturbKind kind = PerturbKind::erosion_dilation;
    int radius = 3;          // erosion-dilation structuring radius / jitter band, pixels
    double flip_prob = 0.5;  // jitter only
    uint64_t seed = 0;

    void validate() const {
        if (radius < 0) throw std::invalid_argument("radius/band must be >= 0");
        if (flip_prob < 0 || flip_prob > 1) throw std::invalid_argument("flip prob in [0,1]");
    }
};

inline const char* perturb_name(PerturbKind k) {
    switch (k) {
        case PerturbKind::erosion_dilation: return "erosion-dilation";
        case PerturbKind::jitter: return "jitter";
        case PerturbKind::half_frames: return "half-frames";
    }
    return "?";
}

namespace morph {

// Discrete disk: offsets with dr^2 + dc^2 <= radius^2.
inline std::vector<std::pair<int, int>> disk_offsets(int radius) {
    std::vector<std::pair<int, int>> off;
    for (int dr = -radius; dr <= radius; dr++)
        for (int dc = -radius; dc <= radius; dc++)
            if (dr * dr + dc * dc <= radius * radius) off.emplace_back(dr, dc);
    return off;
}

inline Grid<uint8_t> dilate(const Grid<uint8_t>& in, int radius) {
    auto off = disk_offsets(radius);
    Grid<uint8_t> out(in.width, in.height, 0);
    for (int r = 0; r < in.height; r++)
        for (int c = 0; c < in.width; c++) {
            if (!in.at(r, c)) continue;
            for (auto [dr, dc] : off) {
                int rr = r + dr, cc = c + dc;
                if (in.in_bounds(rr, cc)) out.at(rr, cc) = 1;
            }
        }
    return out;
}

// Pixels outside the image count as background, so erosion shrinks at borders.
inline Grid<uint8_t> erode(const Grid<uint8_t>& in, int radius) {
    auto off = disk_offsets(radius);
    Grid<uint8_t> out(in.width, in.height, 0);
    for (int r = 0; r < in.height; r++)
        for (int c = 0; c < in.width; c++) {
            bool keep = in.at(r, c);
            for (size_t k = 0; keep && k < off.size(); k++) {
                int rr = r + off[k].first, cc = c + off[k].second;
                keep = in.in_bounds(rr, cc) && in.at(rr, cc);
            }
            out.at(r, c) = keep ? 1 : 0;
        }
    return out;
}

// 8-connected BFS distance from the seed set == Chebyshev distance transform.
inline Grid<int> chebyshev_distance(const Grid<uint8_t>& seeds) {
    Grid<int> dist(seeds.width, seeds.height, -1);
    std::deque<std::pair<int, int>> q;
    for (int r = 0; r < seeds.height; r++)
        for (int c = 0; c < seeds.width; c++)
            if (seeds.at(r, c)) {
                dist.at(r, c) = 0;
                q.emplace_back(r, c);
            }
    while (!q.empty()) {
        auto [r, c] = q.front();
        q.pop_front();
        int d = dist.at(r, c);
        for (int dr = -1; dr <= 1; dr++)
            for (int dc = -1; dc <= 1; dc++) {
                int rr = r + dr, cc = c + dc;
                if (!dist.in_bounds(rr, cc) || dist.at(rr, cc) >= 0) continue;
                dist.at(rr, cc) = d + 1;
                q.emplace_back(rr, cc);
            }
    }
    return dist;
}

// Per-pixel label of the nearest wound-bed pixel (8-connected BFS order;
// ties resolved by visit order, which is deterministic).
inline Grid<uint8_t> nearest_wound_label(const LabeledImage& mask) {
    Grid<uint8_t> lab(mask.width, mask.height, 0);
    Grid<uint8_t> seen(mask.width, mask.height, 0);
    std::deque<std::pair<int, int>> q;
    for (int r = 0; r < mask.height; r++)
        for (int c = 0; c < mask.width; c++)
            if (mask.at(r, c) > 0) {
                lab.at(r, c) = mask.at(r, c);
                seen.at(r, c) = 1;
                q.emplace_back(r, c);
            }
    while (!q.empty()) {
        auto [r, c] = q.front();
        q.pop_front();
        for (int dr = -1; dr <= 1; dr++)
            for (int dc = -1; dc <= 1; dc++) {
                int rr = r + dr, cc = c + dc;
                if (!seen.in_bounds(rr, cc) || seen.at(rr, cc)) continue;
                seen.at(rr, cc) = 1;
                lab.at(rr, cc) = lab.at(r, c);
                q.emplace_back(rr, cc);
            }
    }
    return lab;
}

inline Grid<uint8_t> wound_binary(const LabeledImage& mask) {
    Grid<uint8_t> w(mask.width, mask.height, 0);
    for (size_t i = 0; i < mask.size(); i++) w.data[i] = mask.labels[i] > 0 ? 1 : 0;
    return w;
}

}  // namespace morph

// Branch of the erosion-dilation coin for a view; kept separate so manifests
// can record it without duplicating the derivation.
inline bool erode_dilate_is_erosion(int view_id, uint64_t seed) {
    Rng rng(mix_seed({seed, hash_str("erode-dilate"), uint64_t(view_id)}));
    return rng.bernoulli(0.5);
}

// Random erosion or dilation of the wound-bed region (one coin per mask).
// Tissue identity of pixels gained by dilation comes from the nearest input
// wound-bed pixel.
inline LabeledImage erode_dilate(const LabeledImage& mask, int radius, uint64_t seed) {
    if (radius < 0) throw std::invalid_argument("radius must be >= 0");
    if (radius == 0) return mask;
    bool do_erode = erode_dilate_is_erosion(mask.view_id, seed);
    Grid<uint8_t> wound = morph::wound_binary(mask);
    Grid<uint8_t> shaped = do_erode ? morph::erode(wound, radius) : morph::dilate(wound, radius);
    Grid<uint8_t> nearest = morph::nearest_wound_label(mask);
    LabeledImage out = mask;
    for (int r = 0; r < mask.height; r++)
        for (int c = 0; c < mask.width; c++) {
            if (!shaped.at(r, c))
                out.at(r, c) = 0;
            else
                out.at(r, c) = mask.at(r, c) > 0 ? mask.at(r, c) : nearest.at(r, c);
        }
    return out;
}

// Flips wound-bed membership of pixels within Chebyshev distance <= band of the
// wound boundary (distance measured to the nearest opposite-membership pixel).
// Background pixels that flip take the nearest input tissue label.
inline LabeledImage boundary_jitter(const LabeledImage& mask, int band, double flip_prob,
                                    uint64_t seed) {
    if (band < 0) throw std::invalid_argument("band must be >= 0");
    if (flip_prob < 0 || flip_prob > 1) throw std::invalid_argument("flip prob in [0,1]");
    if (band == 0) return mask;
    Grid<uint8_t> wound = morph::wound_binary(mask);
    Grid<uint8_t> not_wound(mask.width, mask.height, 0);
    bool any = false, all = true;
    for (size_t i = 0; i < wound.size(); i++) {
        not_wound.data[i] = wound.data[i] ? 0 : 1;
        any |= wound.data[i] != 0;
        all &= wound.data[i] != 0;
    }
    if (!any || all) return mask;  // no boundary
    Grid<int> dist_to_wound = morph::chebyshev_distance(wound);
    Grid<int> dist_to_bg = morph::chebyshev_distance(not_wound);
    Grid<uint8_t> nearest = morph::nearest_wound_label(mask);
    Rng rng(mix_seed({seed, hash_str("jitter"), uint64_t(mask.view_id)}));
    LabeledImage out = mask;
    for (int r = 0; r < mask.height; r++)
        for (int c = 0; c < mask.width; c++) {
            int d = wound.at(r, c) ? dist_to_bg.at(r, c) : dist_to_wound.at(r, c);
            if (d > band) continue;
            if (rng.bernoulli(flip_prob))
                out.at(r, c) = wound.at(r, c) ? 0 : nearest.at(r, c);
        }
    return out;
}

struct KeepSpec {
    enum class Mode { every_kth, count } mode = Mode::every_kth;
    int value = 1;
};

// Order-preserving, evenly strided subset of [0, n).
inline std::vector<int> subsample_indices(int n, const KeepSpec& keep) {
    if (n <= 0) throw std::invalid_argument("empty view list");
    std::vector<int> idx;
    if (keep.mode == KeepSpec::Mode::every_kth) {
        if (keep.value < 1) throw std::invalid_argument("stride must be >= 1");
        for (int i = 0; i < n; i += keep.value) idx.push_back(i);
    } else {
        if (keep.value < 1 || keep.value > n)
            throw std::invalid_argument("keep count exceeds available views");
        for (int i = 0; i < keep.value; i++) idx.push_back(int(int64_t(i) * n / keep.value));
    }
    return idx;
}

template <typename T>
std::vector<T> subsample_frames(const std::vector<T>& views, const KeepSpec& keep) {
    auto idx = subsample_indices(int(views.size()), keep);
    std::vector<T> out;
    out.reserve(idx.size());
    for (int i : idx) out.push_back(views[i]);
    return out;
}

}  // namespace wnf
