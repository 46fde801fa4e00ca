#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "woundnerf/camera.hpp"
#include "woundnerf/common.hpp"
#include "woundnerf/image.hpp"
#include "woundnerf/perturb.hpp"

namespace wnf {

enum class SurfaceKind { sphere, plane_crater };

struct TissueRegion {
    int id = 0;
    int class_id = 1;   // 1..5
    Vec3 center;        // on the surface, |sdf| < 1e-6
    double radius = 0;  // geodesic radius, world units
};

struct SceneConfig {
    std::string name = "scene";
    SurfaceKind kind = SurfaceKind::sphere;
    double sphere_radius = 1.0;
    Vec3 crater_center{0, 0, 0.15};
    double crater_radius = 0.55;
    double smooth_k = 0.1;
    std::vector<TissueRegion> regions;
    Aabb bounds{{-1.2, -1.2, -1.2}, {1.2, 1.2, 1.2}};
    std::array<Rgb, kNumClasses> albedo = default_albedo();
    Rgb void_color{0.10, 0.10, 0.12};

    static std::array<Rgb, kNumClasses> default_albedo() {
        return {{{0.80, 0.64, 0.54},     // background skin
                 {0.78, 0.22, 0.20},     // granulation
                 {0.88, 0.78, 0.34},     // slough
                 {0.24, 0.16, 0.12},     // necrotic
                 {0.93, 0.72, 0.76},     // epithelia
                 {0.85, 0.38, 0.78}}};   // unknown
    }
};

// Quadratic-smooth boolean subtraction of the cut shape (d_cut) from the base
// (d_base); k is the blend radius.
inline double smooth_subtraction(double d_cut, double d_base, double k) {
    double h = std::clamp(0.5 - 0.5 * (d_base + d_cut) / k, 0.0, 1.0);
    return d_base * (1.0 - h) + (-d_cut) * h + k * h * (1.0 - h);
}

class SyntheticScene {
public:
    explicit SyntheticScene(SceneConfig cfg) : cfg_(std::move(cfg)) { validate(); }

    const SceneConfig& config() const { return cfg_; }
    const Aabb& bounds() const { return cfg_.bounds; }

    double sdf(const Vec3& p) const {
        if (cfg_.kind == SurfaceKind::sphere) return norm(p) - cfg_.sphere_radius;
        double d_plane = p.z;  // solid half-space z <= 0
        double d_sphere = norm(p - cfg_.crater_center) - cfg_.crater_radius;
        return smooth_subtraction(d_sphere, d_plane, cfg_.smooth_k);
    }

    Vec3 sdf_gradient(const Vec3& p, double h = 1e-5) const {
        return {(sdf({p.x + h, p.y, p.z}) - sdf({p.x - h, p.y, p.z})) / (2 * h),
                (sdf({p.x, p.y + h, p.z}) - sdf({p.x, p.y - h, p.z})) / (2 * h),
                (sdf({p.x, p.y, p.z + h}) - sdf({p.x, p.y, p.z - h})) / (2 * h)};
    }

    // Projection onto the base surface used for the label field. The crater
    // surface is labelled through its footprint on the base plane.
    Vec3 surface_project(const Vec3& p) const {
        if (cfg_.kind == SurfaceKind::sphere) {
            double n = norm(p);
            if (n < 1e-12) return {0, 0, cfg_.sphere_radius};
            return p * (cfg_.sphere_radius / n);
        }
        return {p.x, p.y, 0};
    }

    // Geodesic distance between two base-surface points.
    double geodesic(const Vec3& a, const Vec3& b) const {
        if (cfg_.kind == SurfaceKind::sphere) {
            double r = cfg_.sphere_radius;
            double c = std::clamp(dot(a, b) / (r * r), -1.0, 1.0);
            return r * std::acos(c);
        }
        return std::hypot(a.x - b.x, a.y - b.y);
    }

    // Innermost (smallest-radius) region containing the surface projection.
    uint8_t label_of_projection(const Vec3& proj) const {
        int best = -1;
        double best_radius = 0;
        for (size_t i = 0; i < cfg_.regions.size(); i++) {
            const auto& reg = cfg_.regions[i];
            if (geodesic(proj, surface_project(reg.center)) > reg.radius) continue;
            if (best < 0 || reg.radius < best_radius) {
                best = int(i);
                best_radius = reg.radius;
            }
        }
        return best < 0 ? kBackground : uint8_t(cfg_.regions[best].class_id);
    }

    uint8_t surface_label(const Vec3& p) const {
        if (std::abs(sdf(p)) >= 1e-3)
            throw std::domain_error("surface_label: point is not near the surface");
        return label_of_projection(surface_project(p));
    }

private:
    void validate() const {
        for (const auto& reg : cfg_.regions) {
            if (!(reg.radius > 0)) throw std::invalid_argument("region radius must be positive");
            if (reg.class_id < 1 || reg.class_id > 5)
                throw std::invalid_argument("region class must be a tissue class 1..5");
            if (std::abs(sdf(reg.center)) > 1e-6)
                throw std::invalid_argument("region center not on the surface");
        }
        for (size_t i = 0; i < cfg_.regions.size(); i++)
            for (size_t j = i + 1; j < cfg_.regions.size(); j++) {
                const auto& a = cfg_.regions[i];
                const auto& b = cfg_.regions[j];
                double d = geodesic(surface_project(a.center), surface_project(b.center));
                bool disjoint = d > a.radius + b.radius;
                bool nested = d <= std::abs(a.radius - b.radius);
                if (!disjoint && !nested) {
                    std::ostringstream msg;
                    msg << "regions " << a.id << " and " << b.id
                        << " partially overlap on the surface";
                    throw std::invalid_argument(msg.str());
                }
            }
    }

    SceneConfig cfg_;
};

inline SyntheticScene make_scene(const SceneConfig& cfg) { return SyntheticScene(cfg); }

// ---------------------------------------------------------------- ground truth render

struct GroundTruthView {
    RgbImage rgb;
    LabeledImage label;
    DepthImage depth;
};

constexpr int kSphereTraceMaxSteps = 256;
constexpr double kSphereTraceTol = 1e-5;

// First zero crossing of the scene SDF along a ray, by sphere tracing.
// Returns the ray parameter t, or a negative value on a miss. Rays that start
// inside the solid (possible when the bounds clip it) count as misses; if a
// step lands past the surface, the crossing is refined by bisection.
inline double sphere_trace(const SyntheticScene& scene, const Vec3& origin, const Vec3& dir,
                           double t_near, double t_far) {
    double t = t_near;
    double d = scene.sdf(origin + dir * t);
    if (d < kSphereTraceTol) return -1.0;
    for (int step = 0; step < kSphereTraceMaxSteps && t <= t_far; step++) {
        double t_next = t + d;
        double d_next = scene.sdf(origin + dir * t_next);
        if (std::abs(d_next) < kSphereTraceTol) return t_next;
        if (d_next < 0) {
            double lo = t, hi = t_next;
            for (int i = 0; i < 64; i++) {
                double mid = 0.5 * (lo + hi);
                double dm = scene.sdf(origin + dir * mid);
                if (std::abs(dm) < kSphereTraceTol) return mid;
                (dm > 0 ? lo : hi) = mid;
            }
            return 0.5 * (lo + hi);
        }
        t = t_next;
        d = d_next;
    }
    return -1.0;
}

inline GroundTruthView render_ground_truth(const SyntheticScene& scene, const Camera& cam,
                                           int view_id = -1) {
    cam.validate();
    GroundTruthView out;
    out.rgb = RgbImage(cam.width, cam.height, scene.config().void_color);
    out.label = LabeledImage(cam.width, cam.height, kBackground);
    out.label.view_id = view_id;
    out.depth = DepthImage(cam.width, cam.height, kDepthMiss);
    const Vec3 light = normalized({1, 1, 1});
    parallel_for(cam.height, [&](int64_t r0, int64_t r1) {
        for (int r = int(r0); r < int(r1); r++)
            for (int c = 0; c < cam.width; c++) {
                Vec3 dir = cam.pixel_direction(r, c);
                double tn, tf;
                if (!intersect_aabb(scene.bounds(), cam.position, dir, tn, tf)) continue;
                double t = sphere_trace(scene, cam.position, dir, std::max(tn, 0.0), tf);
                if (t < 0) continue;
                Vec3 p = cam.position + dir * t;
                uint8_t lab = scene.surface_label(p);
                Vec3 n = normalized(scene.sdf_gradient(p));
                double shade = 0.2 + 0.8 * std::max(0.0, dot(n, light));
                Rgb alb = scene.config().albedo[lab];
                out.rgb.at(r, c) = {alb.r * shade, alb.g * shade, alb.b * shade};
                out.label.at(r, c) = lab;
                out.depth.at(r, c) = float(t);
            }
    });
    return out;
}

// ---------------------------------------------------------------- mask corruption

// Synthetic stand-in for an imperfect 2D segmentation model: per-class
// morphological noise, boundary jitter, and occasional whole-blob label flips.
struct NoiseConfig {
    int morph_radius_max = 2;      // per-class erosion/dilation radius, 0 disables
    int jitter_band = 1;           // boundary jitter band, 0 disables
    double jitter_flip_prob = 0.25;
    double blob_flip_prob = 0.08;  // whole-component class flip probability

    uint64_t hash() const {
        std::ostringstream s;
        s << morph_radius_max << '|' << jitter_band << '|' << jitter_flip_prob << '|'
          << blob_flip_prob;
        return hash_str(s.str());
    }
};

namespace detail {

inline void flip_blobs(LabeledImage& mask, double p_flip, Rng& rng) {
    if (p_flip <= 0) return;
    Grid<int> comp(mask.width, mask.height, -1);
    int n_comp = 0;
    std::vector<uint8_t> comp_class;
    for (int r = 0; r < mask.height; r++)
        for (int c = 0; c < mask.width; c++) {
            uint8_t cls = mask.at(r, c);
            if (cls == 0 || comp.at(r, c) >= 0) continue;
            int id = n_comp++;
            comp_class.push_back(cls);
            std::vector<std::pair<int, int>> stack{{r, c}};
            comp.at(r, c) = id;
            while (!stack.empty()) {
                auto [pr, pc] = stack.back();
                stack.pop_back();
                const int dr[4] = {-1, 1, 0, 0}, dc[4] = {0, 0, -1, 1};
                for (int k = 0; k < 4; k++) {
                    int rr = pr + dr[k], cc = pc + dc[k];
                    if (!comp.in_bounds(rr, cc) || comp.at(rr, cc) >= 0) continue;
                    if (mask.at(rr, cc) != cls) continue;
                    comp.at(rr, cc) = id;
                    stack.emplace_back(rr, cc);
                }
            }
        }
    std::vector<uint8_t> new_class(comp_class);
    for (int id = 0; id < n_comp; id++) {
        if (!rng.bernoulli(p_flip)) continue;
        int pick = int(rng.uniform_int(0, kNumClasses - 2));  // {0..5} minus current
        if (pick >= comp_class[id]) pick++;
        new_class[id] = uint8_t(pick);
    }
    for (size_t i = 0; i < mask.size(); i++)
        if (comp.data[i] >= 0) mask.labels[i] = new_class[comp.data[i]];
}

}  // namespace detail

inline LabeledImage corrupt_mask(const LabeledImage& clean, const NoiseConfig& cfg,
                                 uint64_t seed) {
    Rng rng(mix_seed({seed, hash_str("corrupt"), uint64_t(clean.view_id)}));
    LabeledImage out = clean;
    if (cfg.morph_radius_max > 0) {
        LabeledImage shaped = out;
        Grid<uint8_t> nearest = morph::nearest_wound_label(out);
        for (int cls = 1; cls < kNumClasses; cls++) {
            Grid<uint8_t> bin(out.width, out.height, 0);
            bool present = false;
            for (size_t i = 0; i < out.size(); i++) {
                bin.data[i] = out.labels[i] == cls ? 1 : 0;
                present |= bin.data[i] != 0;
            }
            if (!present) continue;
            bool do_erode = rng.bernoulli(0.5);
            int radius = int(rng.uniform_int(1, cfg.morph_radius_max));
            Grid<uint8_t> shaped_bin =
                do_erode ? morph::erode(bin, radius) : morph::dilate(bin, radius);
            for (size_t i = 0; i < out.size(); i++) {
                if (shaped_bin.data[i])
                    shaped.labels[i] = uint8_t(cls);
                else if (out.labels[i] == cls && shaped.labels[i] == cls)
                    shaped.labels[i] = 0;
            }
        }
        out = shaped;
    }
    if (cfg.jitter_band > 0)
        out = boundary_jitter(out, cfg.jitter_band, cfg.jitter_flip_prob,
                              mix_seed({seed, hash_str("corrupt-jitter")}));
    detail::flip_blobs(out, cfg.blob_flip_prob, rng);
    out.view_id = clean.view_id;
    out.noise_tag = NoiseTag::corrupted;
    out.noise_seed = seed;
    out.noise_config_hash = cfg.hash();
    return out;
}

inline std::vector<LabeledImage> corrupt_masks(const std::vector<LabeledImage>& clean,
                                               const NoiseConfig& cfg, uint64_t seed) {
    std::vector<LabeledImage> out;
    out.reserve(clean.size());
    for (const auto& m : clean) out.push_back(corrupt_mask(m, cfg, seed));
    return out;
}

}  // namespace wnf
