#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "woundnerf/camera.hpp"
#include "woundnerf/common.hpp"
#include "woundnerf/field.hpp"
#include "woundnerf/image.hpp"

namespace wnf {

struct Ray {
    Vec3 origin;
    Vec3 direction;  // unit
    double near = 0, far = 0;
    int view_id = -1;
    int row = 0, col = 0;
    bool valid = true;  // false when the ray misses the scene bounds

    void check() const {
        if (std::abs(norm(direction) - 1.0) > 1e-9)
            throw std::invalid_argument("ray direction not unit length");
        if (valid && !(0 < near && near < far))
            throw std::invalid_argument("ray needs 0 < near < far");
    }
};

// Ray through the pixel center (or a seeded sub-pixel jitter); near/far come
// from the scene bounds. Rays that miss the box are flagged invalid.
inline Ray pixel_ray(const Camera& cam, int row, int col, const Aabb& bounds,
                     std::optional<uint64_t> jitter = std::nullopt) {
    if (row < 0 || row >= cam.height || col < 0 || col >= cam.width)
        throw std::invalid_argument("pixel out of bounds");
    double jr = 0, jc = 0;
    if (jitter) {
        Rng rng(mix_seed({*jitter, uint64_t(row), uint64_t(col)}));
        jr = rng.uniform() - 0.5;
        jc = rng.uniform() - 0.5;
    }
    Ray ray;
    ray.origin = cam.position;
    ray.direction = cam.pixel_direction(row + jr, col + jc);
    ray.view_id = -1;
    ray.row = row;
    ray.col = col;
    double tn, tf;
    if (intersect_aabb(bounds, ray.origin, ray.direction, tn, tf) && tf > 1e-9) {
        ray.near = std::max(tn, 1e-6);
        ray.far = tf;
        ray.valid = ray.near < ray.far;
    } else {
        ray.valid = false;
    }
    return ray;
}

// Stratified-uniform depths in [near, far]: one sample per equal bin, at the
// bin midpoint when stratification is off. Strictly increasing.
inline std::vector<double> sample_ray(const Ray& ray, int n,
                                      std::optional<uint64_t> stratify = std::nullopt) {
    if (n < 2) throw std::invalid_argument("need at least 2 samples per ray");
    std::vector<double> ts(n);
    double span = (ray.far - ray.near) / n;
    if (stratify) {
        Rng rng(*stratify);
        for (int i = 0; i < n; i++) ts[i] = ray.near + span * (i + rng.uniform());
    } else {
        for (int i = 0; i < n; i++) ts[i] = ray.near + span * (i + 0.5);
    }
    return ts;
}

// ---------------------------------------------------------------- ray batches

// A batch of rays discretized for volume integration. Geometry is evaluated at
// S sample depths plus one trailing probe half a bin beyond `far`, so every
// sample owns an opacity segment.
struct RayBatch {
    int count = 0;    // R
    int samples = 0;  // S
    std::vector<Ray> rays;
    Mat points;  // (R*(S+1)) x 3
    Mat dirs;    // (R*S) x 3
    Mat ts;      // R x S
};

inline RayBatch make_ray_batch(const std::vector<Ray>& rays, int n_samples,
                               std::optional<uint64_t> stratify_seed = std::nullopt) {
    RayBatch batch;
    batch.count = int(rays.size());
    batch.samples = n_samples;
    batch.rays = rays;
    int sp1 = n_samples + 1;
    batch.points.resize(int64_t(batch.count) * sp1, 3);
    batch.dirs.resize(int64_t(batch.count) * n_samples, 3);
    batch.ts.resize(batch.count, n_samples);
    for (int r = 0; r < batch.count; r++) {
        const Ray& ray = rays[r];
        if (!ray.valid) {
            // Degenerate rays collapse onto one point: equal consecutive SDF
            // samples make every alpha exactly zero.
            for (int j = 0; j <= n_samples; j++)
                batch.points.row(int64_t(r) * sp1 + j) << ray.origin.x, ray.origin.y,
                    ray.origin.z;
            for (int j = 0; j < n_samples; j++) {
                batch.dirs.row(int64_t(r) * n_samples + j) << ray.direction.x,
                    ray.direction.y, ray.direction.z;
                batch.ts(r, j) = 0.0;
            }
            continue;
        }
        std::optional<uint64_t> seed;
        if (stratify_seed) seed = mix_seed({*stratify_seed, uint64_t(r)});
        auto ts = sample_ray(ray, n_samples, seed);
        double probe = ray.far + 0.5 * (ray.far - ray.near) / n_samples;
        for (int j = 0; j < n_samples; j++) {
            Vec3 p = ray.origin + ray.direction * ts[j];
            batch.points.row(int64_t(r) * sp1 + j) << p.x, p.y, p.z;
            batch.dirs.row(int64_t(r) * n_samples + j) << ray.direction.x, ray.direction.y,
                ray.direction.z;
            batch.ts(r, j) = ts[j];
        }
        Vec3 pp = ray.origin + ray.direction * probe;
        batch.points.row(int64_t(r) * sp1 + n_samples) << pp.x, pp.y, pp.z;
    }
    return batch;
}

enum class SemanticSpace { probability, logit };

struct RayGraphOptions {
    SemanticSpace semantic_space = SemanticSpace::probability;
    bool with_rgb = true;
    bool with_semantic = true;
    bool with_grad_x = false;
    bool dropout = false;  // semantic-head dropout (train mode)
    uint64_t dropout_seed = 0;
    Rgb background{0, 0, 0};
    // Weights below the floor become exactly zero and their samples leave the
    // attribute computation; 0 keeps the dense quadrature.
    double weight_floor = 0.0;
};

struct RayGraphNodes {
    GeometryNodes geom;
    int sharpness = -1;
    int alphas = -1;   // R x S
    int weights = -1;  // R x S
    int opacity = -1;  // R x 1
    int rgb_px = -1;   // R x 3, residual mass composited onto the background color
    int sem_px = -1;   // R x 6 probability rows
};

// Dropout rows seeded per flat sample index, so the mask stream does not
// depend on which samples survive the weight floor.
inline Mat dropout_rows(const std::vector<int>& flat_ids, int width, double rate,
                        uint64_t seed) {
    Mat m(int64_t(flat_ids.size()), width);
    double scale = 1.0 / (1.0 - rate);
    for (size_t i = 0; i < flat_ids.size(); i++) {
        Rng rng(mix_seed({seed, uint64_t(flat_ids[i])}));
        for (int c = 0; c < width; c++) m(int64_t(i), c) = rng.bernoulli(rate) ? 0.0 : scale;
    }
    return m;
}

// Volume-rendering graph over a ray batch; shared by training and evaluation.
// With a positive weight floor, attribute heads run only on the surviving
// samples (identical values: dropped terms carry exactly-zero weights).
inline RayGraphNodes build_ray_graph(diff::Tape& tape, const FieldModel& model,
                                     const RayBatch& batch, const RayGraphOptions& opt) {
    RayGraphNodes out;
    const FieldConfig& cfg = model.cfg;
    int R = batch.count, S = batch.samples;
    int pts = tape.input(batch.points);
    out.geom = geometry_nodes(tape, cfg, pts, opt.with_grad_x);
    out.sharpness = sharpness_node(tape, cfg);
    int sdf_rs = tape.col_to_rs(out.geom.out, 0, R, S + 1);
    out.alphas = tape.alpha_from_sdf(sdf_rs, out.sharpness);
    out.weights = tape.weights_from_alpha(out.alphas);
    if (opt.weight_floor > 0) out.weights = tape.floor_zero(out.weights, opt.weight_floor);
    out.opacity = tape.rowsum(out.weights);
    if (!opt.with_rgb && !opt.with_semantic) return out;

    int feat_attr =
        tape.drop_last_sample(tape.slice_cols(out.geom.out, 1, cfg.feat_dim), R, S + 1);

    if (opt.weight_floor > 0) {
        // Compact path over surviving samples.
        std::vector<int> survivors;
        const Mat& w = tape.value(out.weights);
        for (int r = 0; r < R; r++)
            for (int j = 0; j < S; j++)
                if (w(r, j) > 0) survivors.push_back(r * S + j);
        int feat_g = tape.gather_rows(feat_attr, survivors);

        if (opt.with_rgb) {
            Mat dirs_g(int64_t(survivors.size()), 3);
            for (size_t m = 0; m < survivors.size(); m++)
                dirs_g.row(int64_t(m)) = batch.dirs.row(survivors[m]);
            int rgb = appearance_nodes(tape, cfg, feat_g, tape.input(std::move(dirs_g)));
            int acc = tape.scatter_wsum(out.weights, rgb, survivors, false);
            int ones = tape.input(Mat::Ones(R, 1));
            int resid = tape.sub(ones, out.opacity);
            const double bg[3] = {opt.background.r, opt.background.g, opt.background.b};
            int ch[3];
            for (int c = 0; c < 3; c++)
                ch[c] = tape.add(tape.slice_cols(acc, c, 1), tape.scale(resid, bg[c]));
            out.rgb_px = tape.stack3(ch[0], ch[1], ch[2]);
        }
        if (opt.with_semantic) {
            Mat drop;
            const Mat* drop_ptr = nullptr;
            if (opt.dropout && cfg.dropout_rate > 0) {
                drop = dropout_rows(survivors, cfg.width, cfg.dropout_rate, opt.dropout_seed);
                drop_ptr = &drop;
            }
            int logits = semantic_nodes(tape, cfg, feat_g, drop_ptr);
            if (opt.semantic_space == SemanticSpace::probability) {
                int per_sample = tape.softmax_rows(logits);
                out.sem_px = tape.scatter_wsum(out.weights, per_sample, survivors, true);
            } else {
                int integrated = tape.scatter_wsum(out.weights, logits, survivors, false);
                out.sem_px = tape.softmax_rows(integrated);
            }
        }
        return out;
    }

    if (opt.with_rgb) {
        int dirs = tape.input(batch.dirs);
        int rgb = appearance_nodes(tape, cfg, feat_attr, dirs);
        int ones = tape.input(Mat::Ones(R, 1));
        int resid = tape.sub(ones, out.opacity);
        const double bg[3] = {opt.background.r, opt.background.g, opt.background.b};
        int ch[3];
        for (int c = 0; c < 3; c++) {
            int attr = tape.col_to_rs(rgb, c, R, S);
            int acc = tape.wsum(out.weights, attr);
            ch[c] = tape.add(acc, tape.scale(resid, bg[c]));
        }
        out.rgb_px = tape.stack3(ch[0], ch[1], ch[2]);
    }

    if (opt.with_semantic) {
        Mat drop;
        const Mat* drop_ptr = nullptr;
        if (opt.dropout && cfg.dropout_rate > 0) {
            std::vector<int> all_ids(int64_t(R) * S);
            for (size_t i = 0; i < all_ids.size(); i++) all_ids[i] = int(i);
            drop = dropout_rows(all_ids, cfg.width, cfg.dropout_rate, opt.dropout_seed);
            drop_ptr = &drop;
        }
        int logits = semantic_nodes(tape, cfg, feat_attr, drop_ptr);
        if (opt.semantic_space == SemanticSpace::probability) {
            int per_sample = tape.softmax_rows(logits);
            out.sem_px = tape.sem_composite(out.weights, per_sample, true);
        } else {
            int integrated = tape.sem_composite(out.weights, logits, false);
            out.sem_px = tape.softmax_rows(integrated);
        }
    }
    return out;
}

// ---------------------------------------------------------------- ray rendering

struct RaySample {
    Rgb rgb;
    std::array<double, 6> semantic{1, 0, 0, 0, 0, 0};
    double depth = 0;
    double opacity = 0;
    double transmittance_final = 1;
};

struct RenderOptions {
    int n_samples = 64;
    SemanticSpace semantic_space = SemanticSpace::probability;
    std::optional<uint64_t> stratify_seed;  // off => bin midpoints
    Rgb background{0, 0, 0};
};

struct RenderedView {
    RgbImage rgb;
    ProbImage prob;
    LabeledImage label;
    DepthImage depth;
};

inline uint8_t argmax_label(const std::array<double, 6>& p) {
    int best = 0;
    for (int c = 1; c < 6; c++)
        if (p[c] > p[best]) best = c;  // ties keep the lowest index
    return uint8_t(best);
}

namespace detail {

inline std::vector<RaySample> render_batch(FieldModel& model, const RayBatch& batch,
                                           const RenderOptions& opt) {
    diff::Tape tape(model.store);
    RayGraphOptions gopt;
    gopt.semantic_space = opt.semantic_space;
    gopt.background = opt.background;
    gopt.weight_floor = 1e-8;
    auto nodes = build_ray_graph(tape, model, batch, gopt);
    const Mat& w = tape.value(nodes.weights);
    const Mat& alphas = tape.value(nodes.alphas);
    const Mat& rgb = tape.value(nodes.rgb_px);
    const Mat& sem = tape.value(nodes.sem_px);
    std::vector<RaySample> out(batch.count);
    for (int r = 0; r < batch.count; r++) {
        RaySample& s = out[r];
        double wsum = 0, depth_acc = 0;
        for (int j = 0; j < batch.samples; j++) {
            wsum += w(r, j);
            depth_acc += w(r, j) * batch.ts(r, j);
        }
        double T = 1.0;
        for (int j = 0; j < batch.samples; j++) T *= 1.0 - alphas(r, j) + 1e-10;
        s.opacity = wsum;
        s.transmittance_final = T;
        s.depth = depth_acc / std::max(wsum, 1e-7);
        s.rgb = {rgb(r, 0), rgb(r, 1), rgb(r, 2)};
        for (int c = 0; c < 6; c++) s.semantic[c] = sem(r, c);
    }
    return out;
}

}  // namespace detail

// Volumetric integration of color, semantics, and depth along one ray.
inline RaySample render_ray(FieldModel& model, const Ray& ray, const RenderOptions& opt = {}) {
    ray.check();
    RayBatch batch = make_ray_batch({ray}, opt.n_samples, opt.stratify_seed);
    return detail::render_batch(model, batch, opt)[0];
}

// Per-pixel evaluation-mode rendering; ties in the argmax break toward the
// lowest class index.
inline RenderedView render_image(FieldModel& model, const Camera& cam, const Aabb& bounds,
                                 const RenderOptions& opt = {}) {
    RenderedView out;
    out.rgb = RgbImage(cam.width, cam.height);
    out.prob = ProbImage(cam.width, cam.height);
    out.label = LabeledImage(cam.width, cam.height);
    out.depth = DepthImage(cam.width, cam.height, kDepthMiss);
    const int chunk_rays = 2048;
    int64_t n_px = int64_t(cam.width) * cam.height;
    int n_chunks = int((n_px + chunk_rays - 1) / chunk_rays);
    parallel_chunks(n_px, n_chunks, [&](int, int64_t b, int64_t e) {
        std::vector<Ray> rays;
        rays.reserve(e - b);
        for (int64_t i = b; i < e; i++)
            rays.push_back(pixel_ray(cam, int(i / cam.width), int(i % cam.width), bounds));
        RayBatch batch = make_ray_batch(rays, opt.n_samples);
        auto samples = detail::render_batch(model, batch, opt);
        for (int64_t i = b; i < e; i++) {
            const RaySample& s = samples[i - b];
            int r = int(i / cam.width), c = int(i % cam.width);
            out.rgb.at(r, c) = s.rgb;
            out.prob.at(r, c) = s.semantic;
            out.label.at(r, c) = argmax_label(s.semantic);
            out.depth.at(r, c) = s.opacity > 0.01 ? float(s.depth) : kDepthMiss;
        }
    });
    return out;
}

}  // namespace wnf
