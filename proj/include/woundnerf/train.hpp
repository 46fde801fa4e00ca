#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "woundnerf/camera.hpp"
#include "woundnerf/common.hpp"
#include "woundnerf/diffcore.hpp"
#include "woundnerf/field.hpp"
#include "woundnerf/image.hpp"
#include "woundnerf/render.hpp"

namespace wnf {

struct NumericalDivergence : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- class weights

struct ClassWeights {
    std::array<double, 6> w{};  // w[0] = background
};

// Background clipped to 0.1; tissue weights 0.1 + 0.9 * N_y / sum(N).
inline ClassWeights class_weights(const std::array<int64_t, 5>& tissue_counts) {
    int64_t total = 0;
    for (int64_t n : tissue_counts) {
        if (n < 0) throw std::invalid_argument("negative pixel count");
        total += n;
    }
    if (total == 0) throw std::invalid_argument("no tissue supervision present");
    ClassWeights cw;
    cw.w[0] = 0.1;
    for (int y = 0; y < 5; y++) cw.w[y + 1] = 0.1 + 0.9 * double(tissue_counts[y]) / double(total);
    return cw;
}

inline ClassWeights class_weights_from_masks(const std::vector<LabeledImage>& masks) {
    std::array<int64_t, 5> counts{};
    for (const auto& m : masks)
        for (uint8_t v : m.labels)
            if (v >= 1 && v <= 5) counts[v - 1]++;
    return class_weights(counts);
}

// ---------------------------------------------------------------- scalar losses

inline double wce_loss(const std::array<double, 6>& semantic, int label, const ClassWeights& cw) {
    if (label < 0 || label >= 6) throw std::invalid_argument("label out of {0..5}");
    double sum = 0;
    for (double p : semantic) sum += p;
    if (std::abs(sum - 1.0) > 1e-6)
        throw std::invalid_argument("semantic distribution does not sum to 1");
    return -cw.w[label] * std::log(std::max(semantic[label], 1e-12));
}

inline double rgb_loss(const Rgb& predicted, const Rgb& observed) {
    return (std::abs(predicted.r - observed.r) + std::abs(predicted.g - observed.g) +
            std::abs(predicted.b - observed.b)) / 3.0;
}

inline double eikonal_loss(const std::vector<Vec3>& sdf_gradients) {
    if (sdf_gradients.empty()) return 0.0;
    double acc = 0;
    for (const Vec3& g : sdf_gradients) {
        double n = norm(g);
        acc += (n - 1.0) * (n - 1.0);
    }
    return acc / double(sdf_gradients.size());
}

// ---------------------------------------------------------------- configuration

// Per-ray semantic loss plug point; weighted cross-entropy is the shipped
// implementation.
using SemanticLossBuilder =
    std::function<int(diff::Tape&, int sem_px, const std::vector<int>& labels,
                      const std::vector<double>& ray_weights)>;

inline int wce_loss_nodes(diff::Tape& tape, int sem_px, const std::vector<int>& labels,
                          const std::vector<double>& ray_weights) {
    return tape.mean_all(tape.wce_rows(sem_px, labels, ray_weights));
}

struct TrainConfig {
    int stage1_iters = 5000;
    int stage2_iters = 3000;
    int rays_per_batch = 1024;
    int n_samples = 64;
    int eikonal_points = 512;
    double lr_stage1 = 5e-4;
    double lr_stage2 = 1e-3;
    double lambda_eik = 0.1;
    double rgb_weight = 1.0;
    double semantic_weight = 1.0;
    SemanticSpace semantic_space = SemanticSpace::probability;
    bool dropout = true;  // stage-2 head dropout
    uint64_t seed = 0;
    SemanticLossBuilder semantic_loss = wce_loss_nodes;

    void validate() const {
        if (stage1_iters < 0 || stage2_iters < 0) throw std::invalid_argument("negative iters");
        if (rays_per_batch < 1 || n_samples < 2) throw std::invalid_argument("bad batch config");
    }
};

struct LossRow {
    int iteration = 0;
    double total = 0, rgb = 0, eikonal = 0, wce = 0;
};

// ---------------------------------------------------------------- batches

struct PixelBatch {
    std::vector<Ray> rays;
    Mat rgb_targets;          // R x 3
    std::vector<int> labels;  // stage 2
};

// Uniform (view, pixel) draws; rays go through pixel centers so targets are
// exact image samples.
inline PixelBatch draw_pixel_batch(const std::vector<Camera>& cams,
                                   const std::vector<RgbImage>* rgb,
                                   const std::vector<LabeledImage>* masks, const Aabb& bounds,
                                   int count, uint64_t seed) {
    PixelBatch batch;
    batch.rays.reserve(count);
    if (rgb) batch.rgb_targets.resize(count, 3);
    Rng rng(seed);
    for (int i = 0; i < count; i++) {
        int v = int(rng.uniform_int(0, int64_t(cams.size()) - 1));
        int row = int(rng.uniform_int(0, cams[v].height - 1));
        int col = int(rng.uniform_int(0, cams[v].width - 1));
        Ray ray = pixel_ray(cams[v], row, col, bounds);
        ray.view_id = v;
        batch.rays.push_back(ray);
        if (rgb) {
            const Rgb& px = (*rgb)[v].at(row, col);
            batch.rgb_targets.row(i) << px.r, px.g, px.b;
        }
        if (masks) batch.labels.push_back((*masks)[v].at(row, col));
    }
    return batch;
}

// ---------------------------------------------------------------- stage 1

struct Stage1Data {
    std::vector<Camera> cameras;
    std::vector<RgbImage> images;
    Aabb bounds;
    Rgb background;
};

struct Stage1LossParts {
    double total = 0, rgb = 0, eikonal = 0;
};

// One stage-1 loss evaluation over a fixed batch; fills grads when non-null.
inline Stage1LossParts stage1_loss(FieldModel& model, const PixelBatch& batch,
                                   const Mat& eik_points, const TrainConfig& cfg,
                                   const Rgb& background, std::optional<uint64_t> stratify_seed,
                                   diff::GradStore* grads) {
    diff::Tape tape(model.store);
    RayBatch rays = make_ray_batch(batch.rays, cfg.n_samples, stratify_seed);
    RayGraphOptions opt;
    opt.with_semantic = false;
    opt.background = background;
    opt.weight_floor = 1e-8;
    auto nodes = build_ray_graph(tape, model, rays, opt);
    int rgb_term = tape.l1_loss(nodes.rgb_px, batch.rgb_targets);

    int eik_in = tape.input(eik_points);
    auto eik_geom = geometry_nodes(tape, model.cfg, eik_in, true);
    int eik_term = tape.eikonal(eik_geom.grad_x);

    int total = tape.add(tape.scale(rgb_term, cfg.rgb_weight),
                         tape.scale(eik_term, cfg.lambda_eik));
    Stage1LossParts parts;
    parts.rgb = tape.value(rgb_term)(0, 0);
    parts.eikonal = tape.value(eik_term)(0, 0);
    parts.total = tape.value(total)(0, 0);
    if (grads) tape.backward(total, Mat::Constant(1, 1, 1.0), *grads);
    return parts;
}

// Geometry + appearance training on RGB supervision with the eikonal
// regularizer; the semantic head is untouched. Deterministic per seed.
inline std::vector<LossRow> train_stage1(FieldModel& model, const Stage1Data& data,
                                         const TrainConfig& cfg) {
    cfg.validate();
    if (data.cameras.size() != data.images.size())
        throw std::invalid_argument("camera/image count mismatch");
    std::vector<LossRow> curve;
    if (cfg.stage1_iters == 0) return curve;
    diff::Adam opt({cfg.lr_stage1});
    diff::GradStore grads(model.store);
    Rng eik_rng(mix_seed({cfg.seed, hash_str("stage1-eik")}));
    for (int it = 0; it < cfg.stage1_iters; it++) {
        PixelBatch batch =
            draw_pixel_batch(data.cameras, &data.images, nullptr, data.bounds,
                             cfg.rays_per_batch, mix_seed({cfg.seed, hash_str("stage1-batch"),
                                                           uint64_t(it)}));
        Mat eik_points(cfg.eikonal_points, 3);
        for (int i = 0; i < cfg.eikonal_points; i++)
            eik_points.row(i) << eik_rng.uniform(data.bounds.lo.x, data.bounds.hi.x),
                eik_rng.uniform(data.bounds.lo.y, data.bounds.hi.y),
                eik_rng.uniform(data.bounds.lo.z, data.bounds.hi.z);
        grads.set_zero();
        auto parts = stage1_loss(model, batch, eik_points, cfg, data.background,
                                 mix_seed({cfg.seed, hash_str("stage1-strat"), uint64_t(it)}),
                                 &grads);
        if (!std::isfinite(parts.total))
            throw NumericalDivergence("stage-1 loss diverged at iteration " + std::to_string(it));
        opt.step(model.store, grads);
        if (it % 50 == 0 || it + 1 == cfg.stage1_iters)
            curve.push_back({it, parts.total, parts.rgb, parts.eikonal, 0.0});
    }
    return curve;
}

// ---------------------------------------------------------------- stage 2

struct Stage2Data {
    std::vector<Camera> cameras;       // views that carry masks
    std::vector<LabeledImage> masks;   // aligned with cameras
    Aabb bounds;
};

inline double stage2_loss(FieldModel& model, const PixelBatch& batch, const ClassWeights& cw,
                          const TrainConfig& cfg, std::optional<uint64_t> stratify_seed,
                          std::optional<uint64_t> dropout_seed, diff::GradStore* grads) {
    diff::Tape tape(model.store);
    RayBatch rays = make_ray_batch(batch.rays, cfg.n_samples, stratify_seed);
    RayGraphOptions opt;
    opt.with_rgb = false;
    opt.semantic_space = cfg.semantic_space;
    if (dropout_seed) {
        opt.dropout = true;
        opt.dropout_seed = *dropout_seed;
    }
    opt.weight_floor = 1e-8;  // invisible samples drop out of the loss exactly
    auto nodes = build_ray_graph(tape, model, rays, opt);
    std::vector<double> ray_weights(batch.labels.size());
    for (size_t i = 0; i < batch.labels.size(); i++) ray_weights[i] = cw.w[batch.labels[i]];
    int loss = cfg.semantic_loss(tape, nodes.sem_px, batch.labels, ray_weights);
    loss = tape.scale(loss, cfg.semantic_weight);
    double value = tape.value(loss)(0, 0);
    if (grads) tape.backward(loss, Mat::Constant(1, 1, 1.0), *grads);
    return value;
}

// Semantic-head training on (possibly corrupted) masks. Geometry, appearance
// and sharpness are frozen; class weights are computed once from the masks.
inline std::vector<LossRow> train_stage2(FieldModel& model, const Stage2Data& data,
                                         const TrainConfig& cfg,
                                         ClassWeights* out_weights = nullptr) {
    cfg.validate();
    if (data.cameras.size() != data.masks.size())
        throw std::invalid_argument("each stage-2 view needs a mask; got " +
                                    std::to_string(data.masks.size()) + " masks for " +
                                    std::to_string(data.cameras.size()) + " views");
    model.store.set_frozen("geo.", true);
    model.store.set_frozen("app.", true);
    model.store.set_frozen("s_log", true);
    ClassWeights cw = class_weights_from_masks(data.masks);
    if (out_weights) *out_weights = cw;
    std::vector<LossRow> curve;
    if (cfg.stage2_iters == 0) return curve;
    diff::Adam opt({cfg.lr_stage2});
    diff::GradStore grads(model.store);
    for (int it = 0; it < cfg.stage2_iters; it++) {
        PixelBatch batch = draw_pixel_batch(
            data.cameras, nullptr, &data.masks, data.bounds, cfg.rays_per_batch,
            mix_seed({cfg.seed, hash_str("stage2-batch"), uint64_t(it)}));
        std::optional<uint64_t> dropout_seed;
        if (cfg.dropout && model.cfg.dropout_rate > 0)
            dropout_seed = mix_seed({cfg.seed, hash_str("stage2-dropout"), uint64_t(it)});
        grads.set_zero();
        double loss = stage2_loss(model, batch, cw, cfg,
                                  mix_seed({cfg.seed, hash_str("stage2-strat"), uint64_t(it)}),
                                  dropout_seed, &grads);
        if (!std::isfinite(loss))
            throw NumericalDivergence("stage-2 loss diverged at iteration " + std::to_string(it));
        opt.step(model.store, grads);
        if (it % 50 == 0 || it + 1 == cfg.stage2_iters)
            curve.push_back({it, loss, 0.0, 0.0, loss});
    }
    return curve;
}

// ---------------------------------------------------------------- metrics helpers

inline double psnr(FieldModel& model, const std::vector<Camera>& cams,
                   const std::vector<RgbImage>& targets, const Aabb& bounds,
                   const Rgb& background, int n_samples = 64) {
    double se = 0;
    int64_t n = 0;
    RenderOptions opt;
    opt.n_samples = n_samples;
    opt.background = background;
    for (size_t v = 0; v < cams.size(); v++) {
        RenderedView view = render_image(model, cams[v], bounds, opt);
        for (int r = 0; r < view.rgb.height; r++)
            for (int c = 0; c < view.rgb.width; c++) {
                const Rgb& a = view.rgb.at(r, c);
                const Rgb& b = targets[v].at(r, c);
                se += (a.r - b.r) * (a.r - b.r) + (a.g - b.g) * (a.g - b.g) +
                      (a.b - b.b) * (a.b - b.b);
                n += 3;
            }
    }
    double mse = se / double(n);
    return -10.0 * std::log10(std::max(mse, 1e-12));
}

}  // namespace wnf
