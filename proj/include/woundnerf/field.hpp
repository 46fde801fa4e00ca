#pragma once

#include <array>
#include <cmath>
#include <string>

#include "woundnerf/common.hpp"
#include "woundnerf/diffcore.hpp"

namespace wnf {

using diff::Act;
using diff::Mat;

// Class-ordered logits: (background, granulation, slough, necrotic, epithelia, unknown).
using SemanticLogits = std::array<double, 6>;

struct FieldConfig {
    int pe_levels_geo = 6;
    int pe_levels_dir = 4;
    int width = 64;
    int feat_dim = 32;
    double dropout_rate = 0.5;
    double init_inv_std = 0.3;   // 1/s at initialization
    double init_radius = 0.5;    // geometric-init sphere radius
    double s_min = 1e-2, s_max = 1e4;

    diff::MlpArch geo_arch() const {
        return {"geo", 3, {width, width, 1 + feat_dim}, Act::softplus100, pe_levels_geo};
    }
    // Input is [g, encoded view direction]; the encoding is applied by the caller.
    diff::MlpArch app_arch() const {
        return {"app", feat_dim + 3 + 2 * 3 * pe_levels_dir, {width, 3}, Act::relu, 0};
    }
    diff::MlpArch sem_arch() const {
        return {"sem", feat_dim, {width, 6}, Act::relu, 0};
    }
};

struct FieldModel {
    diff::ParamStore store;
    FieldConfig cfg;

    double sharpness() const {
        double s = std::exp(store.at("s_log").value(0, 0));
        return std::clamp(s, cfg.s_min, cfg.s_max);
    }
};

// Geometry weights start as an approximate sphere of radius cfg.init_radius:
// zero-mean Gaussian hidden layers, raw-coordinate columns only in the first
// layer, and a final sdf row with positive mean and bias -radius.
inline FieldModel init_field(const FieldConfig& cfg, uint64_t seed) {
    FieldModel model;
    model.cfg = cfg;
    auto& store = model.store;
    Rng rng(mix_seed({seed, hash_str("field-init")}));

    auto gaussian = [&](int rows, int cols, double stddev) {
        Mat m(rows, cols);
        for (int r = 0; r < rows; r++)
            for (int c = 0; c < cols; c++) m(r, c) = stddev * rng.normal();
        return m;
    };

    const int W = cfg.width;
    const int geo_in = 3 + 2 * 3 * cfg.pe_levels_geo;
    Mat w0 = Mat::Zero(W, geo_in);
    w0.leftCols(3) = gaussian(W, 3, std::sqrt(2.0 / W));
    store.add("geo.w0", std::move(w0));
    store.add("geo.b0", Mat::Zero(1, W));
    store.add("geo.w1", gaussian(W, W, std::sqrt(2.0 / W)));
    store.add("geo.b1", Mat::Zero(1, W));
    Mat w2 = gaussian(1 + cfg.feat_dim, W, std::sqrt(2.0 / W));
    w2.row(0) = gaussian(1, W, 1e-4).array() + std::sqrt(kPi / W);
    store.add("geo.w2", std::move(w2));
    Mat b2 = Mat::Zero(1, 1 + cfg.feat_dim);
    b2(0, 0) = -cfg.init_radius;
    store.add("geo.b2", std::move(b2));

    diff::init_mlp(store, cfg.app_arch(), mix_seed({seed, hash_str("app-init")}));
    diff::init_mlp(store, cfg.sem_arch(), mix_seed({seed, hash_str("sem-init")}));

    store.add("s_log", Mat::Constant(1, 1, std::log(1.0 / cfg.init_inv_std)));
    return model;
}

// ---------------------------------------------------------------- graph builders

struct GeometryNodes {
    int out = -1;     // (N x 1+feat) raw network output
    int sdf = -1;     // (N x 1)
    int feat = -1;    // (N x feat)
    int grad_x = -1;  // (N x 3), only when requested
};

// Geometry forward on an existing tape. When with_grad_x is set, the exact
// input gradient of the sdf output is built as additional tape nodes, so the
// eikonal term stays differentiable w.r.t. the parameters.
inline GeometryNodes geometry_nodes(diff::Tape& tape, const FieldConfig& cfg, int points,
                                    bool with_grad_x) {
    GeometryNodes out;
    int pe = tape.pe(points, cfg.pe_levels_geo);
    int z0 = tape.affine(pe, "geo.w0", "geo.b0");
    int h0 = tape.act(z0, Act::softplus100);
    int z1 = tape.affine(h0, "geo.w1", "geo.b1");
    int h1 = tape.act(z1, Act::softplus100);
    out.out = tape.affine(h1, "geo.w2", "geo.b2");
    out.sdf = tape.slice_cols(out.out, 0, 1);
    out.feat = tape.slice_cols(out.out, 1, cfg.feat_dim);
    if (with_grad_x) {
        int w2row = tape.param_row("geo.w2", 0);
        int d1 = tape.act_grad(z1, Act::softplus100);
        int v1 = tape.mul_rowvec(d1, w2row);
        int u1 = tape.linmap(v1, "geo.w1");
        int d0 = tape.act_grad(z0, Act::softplus100);
        int v0 = tape.mul(d0, u1);
        int u0 = tape.linmap(v0, "geo.w0");
        out.grad_x = tape.pe_jac_vec(pe, u0);
    }
    return out;
}

// Sharpness node: s = clamp(exp(s_log), s_min, s_max).
inline int sharpness_node(diff::Tape& tape, const FieldConfig& cfg) {
    int raw = tape.param_val("s_log");
    int e = tape.exp_op(raw);
    return tape.clamp_op(e, cfg.s_min, cfg.s_max);
}

// dirs_encoded = pe(view dirs); caller provides per-sample direction rows.
inline int appearance_nodes(diff::Tape& tape, const FieldConfig& cfg, int feat, int dirs) {
    int pe_dir = tape.pe(dirs, cfg.pe_levels_dir);
    int cat = tape.concat_cols(feat, pe_dir);
    int z0 = tape.affine(cat, "app.w0", "app.b0");
    int h0 = tape.act(z0, Act::relu);
    int z1 = tape.affine(h0, "app.w1", "app.b1");
    return tape.act(z1, Act::sigmoid);
}

// dropout < 0 disables the mask (evaluation mode). The mask matrix must have
// the hidden width and is multiplied after the hidden activation.
inline int semantic_nodes(diff::Tape& tape, const FieldConfig& cfg, int feat,
                          const Mat* dropout) {
    int z0 = tape.affine(feat, "sem.w0", "sem.b0");
    int h0 = tape.act(z0, Act::relu);
    if (dropout) {
        int mask = tape.input(*dropout);
        h0 = tape.mul(h0, mask);
    }
    return tape.affine(h0, "sem.w1", "sem.b1");
}

// ---------------------------------------------------------------- point queries

struct GeometryEval {
    double sdf = 0;
    Eigen::RowVectorXd feat;
    Vec3 grad_x;
};

inline GeometryEval eval_geometry(FieldModel& model, const Vec3& x) {
    diff::Tape tape(model.store);
    Mat p(1, 3);
    p << x.x, x.y, x.z;
    int pt = tape.input(std::move(p));
    auto nodes = geometry_nodes(tape, model.cfg, pt, true);
    GeometryEval ev;
    ev.sdf = tape.value(nodes.sdf)(0, 0);
    ev.feat = tape.value(nodes.feat).row(0);
    const Mat& g = tape.value(nodes.grad_x);
    ev.grad_x = {g(0, 0), g(0, 1), g(0, 2)};
    return ev;
}

struct SemanticMode {
    bool train = false;
    uint64_t seed = 0;
};

// Point semantics depend only on the feature vector (never the view), so the
// learned field is view-consistent by construction.
inline SemanticLogits eval_semantic(FieldModel& model, const Eigen::RowVectorXd& feat,
                                    SemanticMode mode = {}) {
    diff::Tape tape(model.store);
    int f = tape.input(feat);
    Mat drop;
    const Mat* drop_ptr = nullptr;
    if (mode.train && model.cfg.dropout_rate > 0) {
        drop = diff::dropout_matrix(1, model.cfg.width, model.cfg.dropout_rate, mode.seed);
        drop_ptr = &drop;
    }
    int logits = semantic_nodes(tape, model.cfg, f, drop_ptr);
    const Mat& v = tape.value(logits);
    SemanticLogits out;
    for (int c = 0; c < 6; c++) out[c] = v(0, c);
    return out;
}

// ---------------------------------------------------------------- wound-bed aggregation

// log sum exp of the five tissue logits (granulation..unknown).
inline double woundbed_logit(const std::array<double, 5>& tissue_logits) {
    return diff::logsumexp(tissue_logits.data(), 5);
}

// Binary softmax over (aggregated wound-bed logit, background logit).
inline double woundbed_prob(const SemanticLogits& logits) {
    std::array<double, 5> tissues;
    for (int i = 0; i < 5; i++) tissues[i] = logits[i + 1];
    return diff::sigmoid_stable(woundbed_logit(tissues) - logits[0]);
}

// Opacity of a ray segment from the SDF at its endpoints (NeuS form):
// alpha = clamp((phi_s(d_i) - phi_s(d_next)) / max(phi_s(d_i), 1e-7), 0, 1).
inline double sdf_to_alpha(double sdf_i, double sdf_next, double s) {
    double pi = diff::sigmoid_stable(s * sdf_i);
    double pn = diff::sigmoid_stable(s * sdf_next);
    return std::clamp((pi - pn) / std::max(pi, 1e-7), 0.0, 1.0);
}

}  // namespace wnf
